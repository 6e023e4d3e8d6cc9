//! Experiment orchestration behind the `sppdense` binary.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! config.toml                  resolved config of the last gen-data
//! cohort/                      generated cohort
//! runs/<run_id>/               one cross-validation run
//!     config.toml  cv_report.json  run_meta.json
//!     fold<f>/history.csv metrics.csv roc.csv checkpoint/
//! runs/ablate/table2.csv       plus one run directory per cell
//! runs/modality/table3.csv     plus one run directory per cell
//! ```
//!
//! Everything except `run_meta.json` is a pure function of the config.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::audit::{gradcheck_suite, report_table, CheckRow};
use crate::autodiff::Fault;
use crate::data::{generate_cohort, read_cohort, write_cohort, CohortSpec, Modality, PatientRecord};
use crate::error::{Error, Result};
use crate::eval::{cross_validate, CvReport, CvSetup, MetricSet};
use crate::io_util::{fmt6, read_string, write_string};
use crate::models::{Backbone, Model, ModelConfig, Preset};
use crate::train::TrainConfig;

pub const TABLE2_HEADER: &str = "model,params,accuracy,sensitivity,specificity,ppv,npv,auc,status";
pub const TABLE3_HEADER: &str = "model,modality,in_channels,accuracy,sensitivity,specificity,ppv,npv,auc,status";
const PLACEHOLDER: &str = "Swin Transformer";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub k_folds: usize,
    pub modality: Modality,
    pub output_dir: PathBuf,
    /// Split and initialization seed.
    pub seed: u64,
    pub cohort: CohortSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            k_folds: 5,
            modality: Modality::Multimodal,
            output_dir: PathBuf::from("out"),
            seed: 0,
            cohort: CohortSpec::desk(0),
            model: ModelConfig::desk(Backbone::DenseNet),
            train: TrainConfig::preset(Backbone::DenseNet, Preset::Desk),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies the modality invariant and checks every section.
    pub fn normalized(mut self) -> Result<Self> {
        self.model.in_channels = self.modality.channels();
        if self.k_folds < 3 {
            return Err(Error::Config(format!("k_folds must be at least 3, got {}", self.k_folds)));
        }
        self.cohort.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        Ok(self)
    }

    pub fn cohort_dir(&self) -> PathBuf {
        self.output_dir.join("cohort")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.output_dir.join("runs")
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Parser, Debug)]
#[command(name = "sppdense", version, about = "SE/SPP DenseNet and ResNet18 experiments on a synthetic PET/CT cohort")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment config; written with all defaults if it does not exist.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides output_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for the cohort, split, initialization and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    /// Number of cross-validation folds.
    #[arg(long, global = true)]
    folds: Option<usize>,
    /// Required for the paper-scale preset.
    #[arg(long, global = true)]
    confirm_large: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic cohort.
    GenData,
    /// Cross-validate the configured model.
    Train,
    /// Run the eight-cell SE/SPP ablation and write table2.csv.
    Ablate,
    /// Compare CT-only against multimodal input and write table3.csv.
    Modality,
    /// Finite-difference check of every primitive, block and desk model.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) if path.exists() => ExperimentConfig::from_toml(&read_string(path)?)?,
        Some(path) => {
            let cfg = ExperimentConfig::default();
            write_string(path, &cfg.to_toml())?;
            eprintln!("wrote default config to {}", path.display());
            cfg
        }
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.cohort.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(k) = cli.folds {
        cfg.k_folds = k;
    }
    if let Some(p) = cli.preset {
        let preset = match p {
            PresetArg::Desk => Preset::Desk,
            PresetArg::Paper => Preset::Paper,
        };
        let m = &cfg.model;
        let model = ModelConfig::preset(m.backbone, preset).with_toggles(m.use_se, m.use_spp);
        cfg.train = TrainConfig {
            seed: cfg.train.seed,
            ..TrainConfig::preset(m.backbone, preset)
        };
        cfg.cohort.image_size = model.input_size;
        cfg.model = model;
    }
    if cfg.model.scale_preset == Preset::Paper && !cli.confirm_large {
        return Err(Error::Config(
            "the paper preset requires --confirm-large".into(),
        ));
    }
    cfg.normalized()
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn write_meta(dir: &Path, command: &str, started: f64, clock: Instant) -> Result<()> {
    let meta = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "started_unix": started,
        "finished_unix": unix_now(),
        "elapsed_secs": clock.elapsed().as_secs_f64(),
    });
    write_string(&dir.join("run_meta.json"), &serde_json::to_string_pretty(&meta)?)
}

/// Writes the cohort under `output_dir/cohort`.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.cohort.validate()?;
    let records = generate_cohort(&cfg.cohort)?;
    let dir = cfg.cohort_dir();
    write_cohort(&dir, &cfg.cohort, &records)?;
    write_string(&cfg.output_dir.join("config.toml"), &cfg.to_toml())?;
    Ok(dir)
}

fn load_cohort(cfg: &ExperimentConfig) -> Result<(CohortSpec, Vec<PatientRecord>)> {
    let dir = cfg.cohort_dir();
    if !dir.join("cohort.json").exists() {
        return Err(Error::Data(format!(
            "no cohort at {}; run gen-data first",
            dir.display()
        )));
    }
    read_cohort(&dir)
}

pub fn slug(label: &str) -> String {
    label
        .to_lowercase()
        .replace(" + ", "-")
        .replace(' ', "")
}

fn run_cv(cfg: &ExperimentConfig, records: &[PatientRecord], dir: &Path) -> Result<CvReport> {
    let clock = Instant::now();
    let started = unix_now();
    let echo = serde_json::to_value(cfg)?;
    let setup = CvSetup {
        records,
        model: &cfg.model,
        train: &cfg.train,
        k: cfg.k_folds,
        modality: cfg.modality,
        seed: cfg.seed,
        out_dir: Some(dir),
        config_echo: echo,
    };
    let report = cross_validate(&setup)?;
    write_string(&dir.join("config.toml"), &cfg.to_toml())?;
    write_string(&dir.join("cv_report.json"), &serde_json::to_string_pretty(&report.to_json())?)?;
    write_meta(dir, "cv", started, clock)?;
    Ok(report)
}

/// One cross-validation run of the configured model.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<(PathBuf, CvReport)> {
    let (spec, records) = load_cohort(cfg)?;
    let cfg = ExperimentConfig {
        cohort: spec,
        ..cfg.clone()
    };
    let mut id = format!("train-{}", slug(&cfg.model.label()));
    if cfg.modality == Modality::CtOnly {
        id.push_str("-ct_only");
    }
    let dir = cfg.runs_dir().join(id);
    let report = run_cv(&cfg, &records, &dir)?;
    Ok((dir, report))
}

/// Outcome of one table row.
#[derive(Clone, Debug)]
pub struct Cell {
    pub label: String,
    pub config: ExperimentConfig,
    pub params: usize,
    pub result: std::result::Result<CvReport, String>,
}

impl Cell {
    pub fn auc(&self) -> Option<f64> {
        self.result.as_ref().ok().and_then(|r| r.mean.auc)
    }
}

fn metric_cols(m: Option<&MetricSet>) -> String {
    match m {
        Some(m) => m
            .values()
            .iter()
            .map(|v| v.map_or_else(|| "n/a".to_string(), fmt6))
            .collect::<Vec<_>>()
            .join(","),
        None => ["n/a"; 6].join(","),
    }
}

fn status(c: &Cell) -> &'static str {
    if c.result.is_ok() {
        "ok"
    } else {
        "failed"
    }
}

fn run_cell(records: &[PatientRecord], dir: &Path, cfg: ExperimentConfig, label: String) -> Cell {
    let params = Model::build(&cfg.model, cfg.seed).map(|m| m.count_params()).unwrap_or(0);
    eprintln!("running {label}");
    let result = cfg
        .clone()
        .normalized()
        .and_then(|c| run_cv(&c, records, dir))
        .map_err(|e| {
            eprintln!("{label} failed: {e}");
            e.to_string()
        });
    Cell {
        label,
        config: cfg,
        params,
        result,
    }
}

/// The eight ablation configs in table order: ResNet18 rows, then DenseNet.
pub fn ablation_matrix(cfg: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let mut out = Vec::new();
    for backbone in [Backbone::ResNet18, Backbone::DenseNet] {
        for (se, spp) in [(false, false), (true, false), (false, true), (true, true)] {
            let m = &cfg.model;
            let model = ModelConfig {
                input_size: m.input_size,
                in_channels: m.in_channels,
                spp_bins: m.spp_bins.clone(),
                se_reduction: m.se_reduction,
                ..ModelConfig::preset(backbone, m.scale_preset)
            }
            .with_toggles(se, spp);
            out.push(ExperimentConfig {
                model,
                ..cfg.clone()
            });
        }
    }
    out
}

pub fn table2_csv(cells: &[Cell]) -> String {
    let mut s = format!("{TABLE2_HEADER}\n");
    for c in cells {
        let m = c.result.as_ref().ok().map(|r| &r.mean);
        s.push_str(&format!("{},{},{},{}\n", c.label, c.params, metric_cols(m), status(c)));
    }
    s.push_str(&format!("{PLACEHOLDER},n/a,{},not implemented\n", metric_cols(None)));
    s
}

/// Runs the ablation lattice; failed cells are reported, not fatal.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<(PathBuf, Vec<Cell>)> {
    let clock = Instant::now();
    let started = unix_now();
    let (spec, records) = load_cohort(cfg)?;
    let cfg = ExperimentConfig {
        cohort: spec,
        ..cfg.clone()
    };
    let root = cfg.runs_dir().join("ablate");
    let cells: Vec<Cell> = ablation_matrix(&cfg)
        .into_iter()
        .map(|c| {
            let label = c.model.label();
            let dir = root.join(slug(&label));
            run_cell(&records, &dir, c, label)
        })
        .collect();
    write_string(&root.join("table2.csv"), &table2_csv(&cells))?;
    write_meta(&root, "ablate", started, clock)?;
    Ok((root, cells))
}

pub fn table3_csv(cells: &[Cell]) -> String {
    let mut s = format!("{TABLE3_HEADER}\n");
    for c in cells {
        let tag = match c.config.modality {
            Modality::CtOnly => "SM",
            Modality::Multimodal => "MM",
        };
        let m = c.result.as_ref().ok().map(|r| &r.mean);
        s.push_str(&format!(
            "{},{tag},{},{},{}\n",
            c.label,
            c.config.model.in_channels,
            metric_cols(m),
            status(c)
        ));
    }
    for tag in ["SM", "MM"] {
        s.push_str(&format!("{PLACEHOLDER},{tag},n/a,{},not implemented\n", metric_cols(None)));
    }
    s
}

/// CT-only (SM) and multimodal (MM) runs of the configured model.
pub fn cmd_modality(cfg: &ExperimentConfig) -> Result<(PathBuf, Vec<Cell>)> {
    let clock = Instant::now();
    let started = unix_now();
    let (spec, records) = load_cohort(cfg)?;
    let root = cfg.runs_dir().join("modality");
    let label = cfg.model.label();
    let mut cells = Vec::new();
    for modality in [Modality::CtOnly, Modality::Multimodal] {
        let mut c = ExperimentConfig {
            cohort: spec.clone(),
            modality,
            ..cfg.clone()
        };
        c.model.in_channels = modality.channels();
        let tag = if modality == Modality::CtOnly { "sm" } else { "mm" };
        let dir = root.join(format!("{}-{tag}", slug(&label)));
        cells.push(run_cell(&records, &dir, c, label.clone()));
    }
    if let (Some(sm), Some(mm)) = (cells[0].auc(), cells[1].auc()) {
        let verdict = if mm >= sm { "as expected" } else { "unexpected" };
        eprintln!("{label}: MM AUC {mm:.4} vs SM AUC {sm:.4} ({verdict})");
    }
    write_string(&root.join("table3.csv"), &table3_csv(&cells))?;
    write_meta(&root, "modality", started, clock)?;
    Ok((root, cells))
}

pub fn cmd_gradcheck(fault: Option<Fault>) -> Result<Vec<CheckRow>> {
    gradcheck_suite(fault)
}

fn dispatch(cli: &Cli) -> Result<i32> {
    if let Command::Gradcheck { inject_fault } = cli.command {
        let fault = inject_fault.then_some(Fault::FlipConvBackward);
        let rows = cmd_gradcheck(fault)?;
        print!("{}", report_table(&rows));
        let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
        if failed.is_empty() {
            println!("all {} checks passed", rows.len());
            return Ok(0);
        }
        eprintln!("gradient check failed: {}", failed.join(", "));
        return Ok(2);
    }
    let cfg = resolve(cli)?;
    match cli.command {
        Command::GenData => {
            let dir = cmd_gen_data(&cfg)?;
            println!("cohort written to {}", dir.display());
        }
        Command::Train => {
            let (dir, report) = cmd_train(&cfg)?;
            println!(
                "{}: AUC {} accuracy {} ({})",
                cfg.model.label(),
                report.mean.auc.map_or("n/a".into(), fmt6),
                report.mean.accuracy.map_or("n/a".into(), fmt6),
                dir.display()
            );
        }
        Command::Ablate => {
            let (dir, cells) = cmd_ablate(&cfg)?;
            print!("{}", table2_csv(&cells));
            println!("written to {}", dir.join("table2.csv").display());
            if cells.iter().any(|c| c.result.is_err()) {
                return Ok(2);
            }
        }
        Command::Modality => {
            let (dir, cells) = cmd_modality(&cfg)?;
            print!("{}", table3_csv(&cells));
            println!("written to {}", dir.join("table3.csv").display());
            if cells.iter().any(|c| c.result.is_err()) {
                return Ok(2);
            }
        }
        Command::Gradcheck { .. } => unreachable!(),
    }
    Ok(0)
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code: 0 ok, 1 invalid input, 2 runtime failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        assert!(text.contains("[cohort]") && text.contains("[model]") && text.contains("[train]"));
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn ct_only_forces_one_channel() {
        let cfg = ExperimentConfig {
            modality: Modality::CtOnly,
            ..Default::default()
        };
        assert_eq!(cfg.normalized().unwrap().model.in_channels, 1);
    }

    #[test]
    fn ablation_cells_differ_only_in_toggles() {
        let cfg = ExperimentConfig::default();
        let m = ablation_matrix(&cfg);
        assert_eq!(m.len(), 8);
        for c in &m {
            assert_eq!(c.cohort, cfg.cohort);
            assert_eq!(c.train, cfg.train);
            assert_eq!(c.seed, cfg.seed);
        }
        let labels: Vec<String> = m.iter().map(|c| c.model.label()).collect();
        assert_eq!(labels[0], "ResNet18");
        assert_eq!(labels[7], "DenseNet + SE Block + SPPLayer");
        for pair in m.chunks(2) {
            let base = Model::build(&pair[0].model, 0).unwrap().count_params();
            let se = Model::build(&pair[1].model, 0).unwrap().count_params();
            assert!(se > base);
        }
    }

    #[test]
    fn slugs() {
        assert_eq!(slug("DenseNet + SE Block + SPPLayer"), "densenet-seblock-spplayer");
        assert_eq!(slug("ResNet18"), "resnet18");
    }

    #[test]
    fn exit_codes_for_bad_input() {
        assert_eq!(run(["sppdense", "frobnicate"]), 1);
        assert_eq!(run(["sppdense", "train", "--folds", "x"]), 1);
        assert_eq!(run(["sppdense", "--help"]), 0);
        assert_eq!(run(["sppdense", "train", "--preset", "paper"]), 1);
        assert_eq!(run(["sppdense", "train", "--folds", "1"]), 1);
    }
}
