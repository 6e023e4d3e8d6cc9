use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sppdense::cli::{ExperimentConfig, TABLE2_HEADER, TABLE3_HEADER};
use sppdense::data::CohortSpec;
use sppdense::models::{Backbone, ModelConfig};
use sppdense::train::TrainConfig;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sppdense"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        k_folds: 3,
        output_dir: out.to_path_buf(),
        cohort: CohortSpec {
            n_resistant: 6,
            n_sensitive: 8,
            slices_min: 1,
            slices_max: 1,
            image_size: 32,
            ..CohortSpec::desk(3)
        },
        model: ModelConfig {
            input_size: 32,
            ..ModelConfig::desk(Backbone::DenseNet)
        },
        train: TrainConfig {
            epochs: 2,
            ..TrainConfig::preset(Backbone::DenseNet, sppdense::models::Preset::Desk)
        },
        ..Default::default()
    }
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> String {
    let path = dir.join("exp.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path.to_string_lossy().into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn gen_data_train_report_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &tiny(&out));

    let o = bin(&["gen-data", "--config", &cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let patients = fs::read_dir(out.join("cohort"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with('P'))
        .count();
    assert_eq!(patients, 14);
    let cohort_json = fs::read(out.join("cohort/cohort.json")).unwrap();
    assert_eq!(code(&bin(&["gen-data", "--config", &cfg])), 0);
    assert_eq!(fs::read(out.join("cohort/cohort.json")).unwrap(), cohort_json);

    let o = bin(&["train", "--config", &cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = out.join("runs/train-densenet-seblock-spplayer");
    let first = fs::read(run.join("cv_report.json")).unwrap();
    let history = fs::read(run.join("fold1/history.csv")).unwrap();
    for f in ["run_meta.json", "config.toml", "fold0/metrics.csv", "fold0/roc.csv", "fold0/checkpoint/params.bin"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(code(&bin(&["train", "--config", &cfg])), 0);
    assert_eq!(fs::read(run.join("cv_report.json")).unwrap(), first);
    assert_eq!(fs::read(run.join("fold1/history.csv")).unwrap(), history);

    let report: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(report["config"]["model"]["in_channels"], 2);
    assert_eq!(report["level"], "image");
    assert_eq!(report["folds"].as_array().unwrap().len(), 3);
}

#[test]
fn ct_only_echo_records_one_channel() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let mut cfg = tiny(&out);
    cfg.modality = sppdense::data::Modality::CtOnly;
    let path = write_config(tmp.path(), &cfg);
    assert_eq!(code(&bin(&["gen-data", "--config", &path])), 0);
    assert_eq!(code(&bin(&["train", "--config", &path])), 0);
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("runs/train-densenet-seblock-spplayer-ct_only/cv_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["config"]["model"]["in_channels"], 1);
    assert_eq!(report["config"]["modality"], "ct_only");
}

#[test]
fn missing_cohort_is_a_runtime_error_without_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &tiny(&out));
    let o = bin(&["train", "--config", &cfg]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("gen-data"));
    assert!(!out.join("runs").exists());
}

#[test]
fn invalid_cohort_fails_before_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let mut cfg = tiny(&out);
    cfg.cohort.n_resistant = 0;
    let path = write_config(tmp.path(), &cfg);
    assert_eq!(code(&bin(&["gen-data", "--config", &path])), 1);
    assert!(!out.exists());
}

#[test]
fn validation_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let out = out.to_str().unwrap();
    assert_eq!(code(&bin(&["bogus"])), 1);
    assert_eq!(code(&bin(&["train", "--preset", "huge"])), 1);
    assert_eq!(code(&bin(&["train", "--out", out, "--preset", "paper"])), 1);
    assert_eq!(code(&bin(&["train", "--out", out, "--folds", "1"])), 1);
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "k_folds = \"five\"\n").unwrap();
    assert_eq!(code(&bin(&["train", "--config", bad.to_str().unwrap()])), 1);
    assert!(!Path::new(out).exists());
}

#[test]
fn missing_config_is_written_with_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("fresh.toml");
    // --folds 1 fails validation after the echo is written
    let o = bin(&["train", "--config", path.to_str().unwrap(), "--folds", "1"]);
    assert_eq!(code(&o), 1);
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), ExperimentConfig::default());
    for key in ["k_folds", "[cohort]", "class_signal", "[model]", "use_se", "[train]", "early_stop_patience"] {
        assert!(text.contains(key), "{key}");
    }
}

#[test]
fn gradcheck_fault_fixture_names_conv2d() {
    let o = bin(&["gradcheck", "--inject-fault"]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("gradient check failed: conv2d"), "{err}");
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.lines().any(|l| l.starts_with("relu ") && l.ends_with("pass")));
}

fn parse_table(text: &str, header: &str) -> Vec<Vec<String>> {
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), header);
    let width = header.split(',').count();
    lines
        .map(|l| {
            let cells: Vec<String> = l.split(',').map(str::to_string).collect();
            assert_eq!(cells.len(), width, "{l}");
            cells
        })
        .collect()
}

#[test]
fn ablation_and_modality_tables_follow_their_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let mut cfg = tiny(&out);
    cfg.train.epochs = 1;
    let path = write_config(tmp.path(), &cfg);
    assert_eq!(code(&bin(&["gen-data", "--config", &path])), 0);

    let o = bin(&["ablate", "--config", &path]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table2 = fs::read_to_string(out.join("runs/ablate/table2.csv")).unwrap();
    let rows = parse_table(&table2, TABLE2_HEADER);
    let names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(
        names,
        [
            "ResNet18",
            "ResNet18 + SE Block",
            "ResNet18 + SPPLayer",
            "ResNet18 + SE Block + SPPLayer",
            "DenseNet",
            "DenseNet + SE Block",
            "DenseNet + SPPLayer",
            "DenseNet + SE Block + SPPLayer",
            "Swin Transformer",
        ]
    );
    for r in &rows[..8] {
        assert_eq!(r[8], "ok");
        let auc: f64 = r[7].parse().unwrap();
        assert!((0.0..=1.0).contains(&auc));
    }
    assert_eq!(rows[8][8], "not implemented");
    let params: Vec<usize> = rows[..8].iter().map(|r| r[1].parse().unwrap()).collect();
    for pair in [(0, 1), (2, 3), (4, 5), (6, 7)] {
        assert!(params[pair.1] > params[pair.0]);
    }

    let o = bin(&["modality", "--config", &path]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table3 = fs::read_to_string(out.join("runs/modality/table3.csv")).unwrap();
    let rows = parse_table(&table3, TABLE3_HEADER);
    assert_eq!(rows.len(), 4);
    assert_eq!((rows[0][1].as_str(), rows[0][2].as_str()), ("SM", "1"));
    assert_eq!((rows[1][1].as_str(), rows[1][2].as_str()), ("MM", "2"));
    assert_eq!(rows[2][9], "not implemented");
}
