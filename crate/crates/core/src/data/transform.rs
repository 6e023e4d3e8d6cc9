use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use super::cohort::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Corner-aligned bilinear resize of one `[H, W]` plane.
pub fn resize_bilinear(t: &Tensor, target: usize) -> Result<Tensor> {
    let (h, w) = match t.shape() {
        [h, w] => (*h, *w),
        s => return Err(Error::shape("resize", format!("expected [H,W], got {s:?}"))),
    };
    if h < 2 || w < 2 || target < 2 {
        return Err(Error::shape(
            "resize",
            format!("need at least 2x2 on both sides, got {h}x{w} -> {target}"),
        ));
    }
    if h == target && w == target {
        return Ok(t.clone());
    }
    let d = t.data();
    let coord = |i: usize, n: usize| -> (usize, usize, f64) {
        let p = i as f64 * (n - 1) as f64 / (target - 1) as f64;
        let i0 = (p.floor() as usize).min(n - 2);
        (i0, i0 + 1, p - i0 as f64)
    };
    let mut out = Vec::with_capacity(target * target);
    for y in 0..target {
        let (y0, y1, fy) = coord(y, h);
        for x in 0..target {
            let (x0, x1, fx) = coord(x, w);
            let at = |yy: usize, xx: usize| d[yy * w + xx] as f64;
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    Tensor::new(vec![target, target], out)
}

/// `[2, target, target]` with CT in channel 0 and PET in channel 1.
pub fn stack_and_resize(s: &Sample, target: usize) -> Result<Tensor> {
    if s.ct.shape() != s.pet.shape() {
        return Err(Error::shape(
            "stack",
            format!("ct {:?} vs pet {:?}", s.ct.shape(), s.pet.shape()),
        ));
    }
    let ct = resize_bilinear(&s.ct, target)?;
    let pet = resize_bilinear(&s.pet, target)?;
    let mut data = ct.into_data();
    data.extend_from_slice(pet.data());
    Tensor::new(vec![2, target, target], data)
}

pub const NORM_EPS: f64 = 1e-8;

/// Per-channel mean and standard deviation of a training subset.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// `images` is `[N, C, H, W]` flattened.
    pub fn fit(images: &[f32], channels: usize, plane: usize) -> Result<NormStats> {
        if images.is_empty() || channels == 0 || !images.len().is_multiple_of(channels * plane) {
            return Err(Error::Data("cannot fit normalization on an empty subset".into()));
        }
        let n = images.len() / (channels * plane);
        let count = (n * plane) as f64;
        let mut mean = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        for (i, chunk) in images.chunks_exact(plane).enumerate() {
            let c = i % channels;
            mean[c] += chunk.iter().map(|&v| v as f64).sum::<f64>();
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for (i, chunk) in images.chunks_exact(plane).enumerate() {
            let c = i % channels;
            sq[c] += chunk.iter().map(|&v| (v as f64 - mean[c]).powi(2)).sum::<f64>();
        }
        let std = sq.iter().map(|s| (s / count).sqrt()).collect();
        Ok(NormStats { mean, std })
    }

    pub fn apply(&self, images: &mut [f32], plane: usize) {
        let c = self.mean.len();
        for (i, chunk) in images.chunks_exact_mut(plane).enumerate() {
            let (m, s) = (self.mean[i % c], self.std[i % c] + NORM_EPS);
            chunk.iter_mut().for_each(|v| *v = ((*v as f64 - m) / s) as f32);
        }
    }
}

/// Flips each `[C, H, W]` sample upside down.
pub fn vflip(sample: &mut [f32], channels: usize, h: usize, w: usize) {
    for c in 0..channels {
        let plane = &mut sample[c * h * w..(c + 1) * h * w];
        for y in 0..h / 2 {
            let (top, bottom) = plane.split_at_mut((h - 1 - y) * w);
            top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
        }
    }
}

/// Train-time augmentation: random vertical flips, then normalization.
/// Evaluation batches only get normalized.
#[derive(Debug)]
pub struct Augmenter {
    pub stats: NormStats,
    pub flip_prob: f64,
    flips: AtomicUsize,
}

impl Augmenter {
    pub fn new(stats: NormStats, flip_prob: f64) -> Self {
        Augmenter {
            stats,
            flip_prob,
            flips: AtomicUsize::new(0),
        }
    }

    /// Number of times the flip transform has been invoked.
    pub fn flip_calls(&self) -> usize {
        self.flips.load(Ordering::Relaxed)
    }

    pub fn train_batch(&self, batch: &mut Tensor, rng: &mut impl Rng) {
        let s = batch.shape().to_vec();
        let (c, h, w) = (s[1], s[2], s[3]);
        self.flips.fetch_add(1, Ordering::Relaxed);
        for sample in batch.data_mut().chunks_exact_mut(c * h * w) {
            if rng.random_bool(self.flip_prob) {
                vflip(sample, c, h, w);
            }
        }
        self.stats.apply(batch.data_mut(), h * w);
    }

    pub fn eval_batch(&self, batch: &mut Tensor) {
        let s = batch.shape().to_vec();
        self.stats.apply(batch.data_mut(), s[2] * s[3]);
    }
}
