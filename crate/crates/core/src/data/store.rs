use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cohort::{CohortSpec, Label, PatientRecord, Provenance, Sample};
use super::split::SplitPlan;
use crate::error::{Error, Result};
use crate::io_util::{read_string, write_string};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct CohortFile {
    spec: CohortSpec,
    patients: usize,
}

/// Writes `P0001/label.txt`, `P0001/slice_000.{ct,pet}.pltn`, … and `cohort.json`.
pub fn write_cohort(dir: &Path, spec: &CohortSpec, records: &[PatientRecord]) -> Result<()> {
    for rec in records {
        let pdir = dir.join(&rec.patient_id);
        write_string(&pdir.join("label.txt"), &format!("{}\n", rec.label.as_str()))?;
        for (i, s) in rec.slices.iter().enumerate() {
            s.ct.save(&pdir.join(format!("slice_{i:03}.ct.pltn")))?;
            s.pet.save(&pdir.join(format!("slice_{i:03}.pet.pltn")))?;
        }
    }
    let meta = CohortFile {
        spec: spec.clone(),
        patients: records.len(),
    };
    write_string(&dir.join("cohort.json"), &serde_json::to_string_pretty(&meta)?)
}

pub fn read_cohort(dir: &Path) -> Result<(CohortSpec, Vec<PatientRecord>)> {
    let meta: CohortFile = serde_json::from_str(&read_string(&dir.join("cohort.json"))?)?;
    let mut ids: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with('P'))
        .collect();
    ids.sort();
    if ids.len() != meta.patients {
        return Err(Error::Data(format!(
            "cohort.json lists {} patients, found {} directories",
            meta.patients,
            ids.len()
        )));
    }
    let mut records = Vec::with_capacity(ids.len());
    for id in ids {
        let pdir = dir.join(&id);
        let label = Label::parse(&read_string(&pdir.join("label.txt"))?)?;
        let mut slices = Vec::new();
        for i in 0.. {
            let ct = pdir.join(format!("slice_{i:03}.ct.pltn"));
            if !ct.exists() {
                break;
            }
            slices.push(Sample {
                ct: Tensor::load(&ct)?,
                pet: Tensor::load(&pdir.join(format!("slice_{i:03}.pet.pltn")))?,
                provenance: Provenance::Original,
            });
        }
        if slices.is_empty() {
            return Err(Error::Data(format!("patient {id} has no slices")));
        }
        records.push(PatientRecord {
            patient_id: id,
            label,
            slices,
        });
    }
    Ok((meta.spec, records))
}

pub fn write_split(path: &Path, plan: &SplitPlan) -> Result<()> {
    write_string(path, &serde_json::to_string_pretty(plan)?)
}

pub fn read_split(path: &Path) -> Result<SplitPlan> {
    Ok(serde_json::from_str(&read_string(path)?)?)
}
