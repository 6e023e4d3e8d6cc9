use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::cohort::PatientRecord;
use super::transform::stack_and_resize;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Multimodal,
    CtOnly,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Multimodal => 2,
            Modality::CtOnly => 1,
        }
    }
}

/// Stacked, resized slices of a set of patients, ready for batching.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<f32>,
    /// Owning patient of each slice.
    pub patients: Vec<String>,
    pub channels: usize,
    pub size: usize,
}

impl Dataset {
    pub fn build(records: &[PatientRecord], ids: &[&str], size: usize, modality: Modality) -> Result<Dataset> {
        let wanted: HashSet<&str> = ids.iter().copied().collect();
        let plane = size * size;
        let channels = modality.channels();
        let mut ds = Dataset {
            images: Vec::new(),
            labels: Vec::new(),
            patients: Vec::new(),
            channels,
            size,
        };
        for rec in records.iter().filter(|r| wanted.contains(r.patient_id.as_str())) {
            for s in &rec.slices {
                let stacked = stack_and_resize(s, size)?;
                ds.images.extend_from_slice(&stacked.data()[..channels * plane]);
                ds.labels.push(rec.label.target());
                ds.patients.push(rec.patient_id.clone());
            }
        }
        if ds.labels.is_empty() {
            return Err(Error::Data("subset contains no slices".into()));
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    /// Images `[B, C, S, S]` and labels `[B, 1]` for the given slice indices.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Tensor) {
        let n = self.sample_len();
        let mut x = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            x.extend_from_slice(&self.images[i * n..(i + 1) * n]);
        }
        let y = idx.iter().map(|&i| self.labels[i]).collect();
        (
            Tensor::new(vec![idx.len(), self.channels, self.size, self.size], x).expect("sized"),
            Tensor::new(vec![idx.len(), 1], y).expect("sized"),
        )
    }
}
