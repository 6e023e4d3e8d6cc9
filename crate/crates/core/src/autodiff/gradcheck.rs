use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Fault, Graph, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// A scalar-valued tensor program that can be replayed at any precision.
///
/// `vars` holds the checked inputs first, then any constants, in the order
/// they were passed to [`grad_check`].
pub trait Program {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, vars: &[Var]) -> Result<Var>;
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
    pub seed: u64,
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-7,
            max_coords: None,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|a - n| / max(1, |a|, |n|)`.
    /// Infinite when either side was NaN.
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    if !analytic.is_finite() || !numeric.is_finite() {
        return f64::INFINITY;
    }
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn graph<T: Scalar>(fault: Option<Fault>) -> Graph<T> {
    match fault {
        Some(f) => Graph::with_fault(f),
        None => Graph::default(),
    }
}

/// Compares the `f32` reverse-mode gradient of `prog` against central
/// differences of the same program evaluated in `f64`.
pub fn grad_check<P: Program>(
    prog: &P,
    inputs: &[Tensor],
    consts: &[Tensor],
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut g = graph::<f32>(opts.fault);
    let mut vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    vars.extend(consts.iter().map(|t| g.input(t.clone())));
    let out = prog.eval(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<f32>> = inputs
        .iter()
        .zip(&vars)
        .map(|(t, v)| {
            grads
                .get(*v)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();
    drop(g);

    let consts64: Vec<Tensor<f64>> = consts.iter().map(|t| t.cast()).collect();
    let mut work: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = graph::<f64>(opts.fault);
        let mut vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        vars.extend(consts64.iter().map(|t| g.input(t.clone())));
        let out = prog.eval(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for (ii, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < input.len() => {
                let mut c = sample(&mut rng, input.len(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..input.len()).collect(),
        };
        for j in coords {
            let x0 = work[ii].data()[j];
            work[ii].data_mut()[j] = x0 + opts.h;
            let fp = eval(&work)?;
            work[ii].data_mut()[j] = x0 - opts.h;
            let fm = eval(&work)?;
            work[ii].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * opts.h);
            let err = rel_error(analytic[ii][j] as f64, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((ii, j));
            }
        }
    }
    Ok(report)
}
