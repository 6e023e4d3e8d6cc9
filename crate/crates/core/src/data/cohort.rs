use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Resistant,
    Sensitive,
}

impl Label {
    /// Resistant is the positive class.
    pub fn target(self) -> f32 {
        match self {
            Label::Resistant => 1.0,
            Label::Sensitive => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Resistant => "resistant",
            Label::Sensitive => "sensitive",
        }
    }

    pub fn parse(s: &str) -> Result<Label> {
        match s.trim() {
            "resistant" => Ok(Label::Resistant),
            "sensitive" => Ok(Label::Sensitive),
            other => Err(Error::Data(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Rotated90,
    Flipped,
}

/// One slice: co-registered CT and PET planes, each `[H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub ct: Tensor,
    pub pet: Tensor,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub label: Label,
    pub slices: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_resistant: usize,
    pub n_sensitive: usize,
    pub slices_min: usize,
    pub slices_max: usize,
    pub image_size: usize,
    pub class_signal: f64,
    pub seed: u64,
}

impl CohortSpec {
    /// Patient counts of the clinical cohort at desk image size.
    pub fn desk(seed: u64) -> Self {
        CohortSpec {
            n_resistant: 97,
            n_sensitive: 192,
            slices_min: 1,
            slices_max: 3,
            image_size: 64,
            class_signal: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_resistant == 0 || self.n_sensitive == 0 {
            return bad("cohort needs at least one patient per class");
        }
        if self.slices_min == 0 || self.slices_max < self.slices_min {
            return bad("slices per patient must satisfy 1 <= slices_min <= slices_max");
        }
        if self.image_size < 8 {
            return bad("image_size must be at least 8");
        }
        if !(0.0..=1.0).contains(&self.class_signal) {
            return bad("class_signal must lie in [0, 1]");
        }
        Ok(())
    }
}

// Lesion response of the resistant class at full signal.
const PET_GAIN: f32 = 1.0;
const PET_TEXTURE: f32 = 0.5;
const CT_SHIFT: f32 = 0.05;

/// Seeded synthetic cohort. Every patient consumes the same random draws
/// whatever its label; the label only scales the drawn lesion, so a zero
/// `class_signal` makes the classes identically distributed.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Vec<PatientRecord>> {
    spec.validate()?;
    let n = spec.n_resistant + spec.n_sensitive;
    let mut labels: Vec<Label> = (0..n)
        .map(|i| if i < spec.n_resistant { Label::Resistant } else { Label::Sensitive })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(u64::MAX);
    labels.shuffle(&mut rng);
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            patient(spec, i, label, &mut rng)
        })
        .collect())
}

fn patient(spec: &CohortSpec, i: usize, label: Label, rng: &mut ChaCha8Rng) -> PatientRecord {
    let s = spec.image_size as f32;
    let n_slices = rng.random_range(spec.slices_min..=spec.slices_max);
    let cx = rng.random_range(0.35..0.65) * s;
    let cy = rng.random_range(0.35..0.65) * s;
    let radius = rng.random_range(0.12..0.2) * s;
    let density = rng.random_range(0.3..0.7f32);
    let uptake = rng.random_range(0.6..1.0f32);
    let tilt = (rng.random_range(-0.2..0.2f32), rng.random_range(-0.2..0.2f32));
    let k = if label == Label::Resistant { spec.class_signal as f32 } else { 0.0 };
    let slices = (0..n_slices)
        .map(|_| {
            let jx = cx + rng.random_range(-0.03..0.03) * s;
            let jy = cy + rng.random_range(-0.03..0.03) * s;
            let r = radius * rng.random_range(0.9..1.1f32);
            slice(spec.image_size, (jx, jy, r), density, uptake, tilt, k, rng)
        })
        .collect();
    PatientRecord {
        patient_id: format!("P{:04}", i + 1),
        label,
        slices,
    }
}

fn slice(
    size: usize,
    (cx, cy, r): (f32, f32, f32),
    density: f32,
    uptake: f32,
    tilt: (f32, f32),
    k: f32,
    rng: &mut ChaCha8Rng,
) -> Sample {
    let ct_noise = Normal::new(0.0f32, 0.1).expect("valid std");
    let pet_noise = Normal::new(0.0f32, 0.05).expect("valid std");
    let unit = Normal::new(0.0f32, 1.0).expect("valid std");
    let sigma = r / 1.5;
    let s = size as f32;
    let mut ct = Vec::with_capacity(size * size);
    let mut pet = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let d2 = (fx - cx).powi(2) + (fy - cy).powi(2);
            let body = 0.2 + tilt.0 * fx / s + tilt.1 * fy / s;
            let inside = if d2 < r * r { 1.0 } else { 0.0 };
            let lesion_ct = inside * (density + CT_SHIFT * k);
            ct.push(body + lesion_ct + ct_noise.sample(rng));
            let tex = unit.sample(rng);
            let blob = uptake * (1.0 + PET_GAIN * k) * (-d2 / (2.0 * sigma * sigma)).exp();
            let blob = blob * (1.0 + PET_TEXTURE * k * tex).max(0.0);
            pet.push(0.1 + blob + pet_noise.sample(rng));
        }
    }
    Sample {
        ct: Tensor::new(vec![size, size], ct).expect("sized"),
        pet: Tensor::new(vec![size, size], pet).expect("sized"),
        provenance: Provenance::Original,
    }
}

pub fn count_slices(records: &[PatientRecord], label: Label) -> usize {
    records
        .iter()
        .filter(|r| r.label == label)
        .map(|r| r.slices.len())
        .sum()
}

/// Rotates a `[H, W]` plane 90° counterclockwise into `[W, H]`.
pub fn rot90_ccw(t: &Tensor) -> Tensor {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let d = t.data();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..w {
        for c in 0..h {
            out.push(d[c * w + (w - 1 - r)]);
        }
    }
    Tensor::new(vec![w, h], out).expect("sized")
}

/// Gives every slice of the minority class (by slice count) one rotated copy,
/// kept with its patient. No-op when the classes are already equal.
pub fn balance_minority(mut records: Vec<PatientRecord>) -> Vec<PatientRecord> {
    let r = count_slices(&records, Label::Resistant);
    let s = count_slices(&records, Label::Sensitive);
    let minority = match r.cmp(&s) {
        std::cmp::Ordering::Less => Label::Resistant,
        std::cmp::Ordering::Greater => Label::Sensitive,
        std::cmp::Ordering::Equal => return records,
    };
    for rec in records.iter_mut().filter(|p| p.label == minority) {
        let copies: Vec<Sample> = rec
            .slices
            .iter()
            .filter(|s| s.provenance == Provenance::Original)
            .map(|s| Sample {
                ct: rot90_ccw(&s.ct),
                pet: rot90_ccw(&s.pet),
                provenance: Provenance::Rotated90,
            })
            .collect();
        rec.slices.extend(copies);
    }
    records
}
