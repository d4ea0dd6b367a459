//! Central-difference gradient checking in f64.
//!
//! The function under test builds a scalar loss on a tape from named input
//! tensors; analytic gradients from [`Tape::backward`] are compared against
//! `(f(x+eps) - f(x-eps)) / (2 eps)` per coordinate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{NodeId, Tape};
use super::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Zero gate: when both the analytic and the numeric derivative are at
    /// or below this magnitude the coordinate counts as agreeing. Central
    /// differences cannot resolve derivatives below roundoff-over-eps
    /// (about `1e-16 * |loss| / eps`), so structurally-zero gradients (for
    /// example a batch-norm shift that the next normalization cancels)
    /// would otherwise compare noise against noise.
    pub atol: f64,
    /// When set, only this many randomly chosen coordinates are checked per
    /// input tensor; `None` checks every coordinate.
    pub max_coords_per_input: Option<usize>,
    /// Seed for the coordinate subsample.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-4,
            atol: 1e-9,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct WorstCoord {
    pub input_name: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub worst: Option<WorstCoord>,
}

/// Relative error measure used throughout the check suite.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-12, analytic.abs() + numeric.abs())
}

/// Runs a central-difference check of `f` at the given named inputs.
///
/// `f` receives the (possibly perturbed) input tensors and must register on
/// the tape, under the given names, every input it wants differentiated —
/// typically via [`Tape::param`] — and return a scalar loss node.
pub fn grad_check<F>(
    f: &F,
    inputs: &[(String, Tensor<f64>)],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[(String, Tensor<f64>)]) -> Result<NodeId>,
{
    let marked: Vec<(String, Tensor<f64>)> = inputs
        .iter()
        .map(|(n, t)| (n.clone(), t.clone().with_requires_grad(true)))
        .collect();

    // Analytic pass.
    let mut tape = Tape::new();
    let loss = f(&mut tape, &marked)?;
    let _ = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;

    let eval_loss = |tensors: &[(String, Tensor<f64>)]| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let loss = f(&mut tape, tensors)?;
        tape.value(loss).item()
    };

    let mut report = GradCheckReport::default();
    for (i, (name, tensor)) in marked.iter().enumerate() {
        let analytic = grads
            .get(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tensor.shape().to_vec()));
        let n = tensor.numel();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (i as u64).wrapping_mul(0x9e37));
                let mut picked = rand::seq::index::sample(&mut rng, n, k).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let probe = |delta: f64| -> Result<f64> {
                let mut data = tensor.data().to_vec();
                data[c] += delta;
                let perturbed = Tensor::new(tensor.shape().to_vec(), data)?;
                let mut set = marked.to_vec();
                set[i].1 = perturbed;
                eval_loss(&set)
            };
            let plus = probe(opts.eps)?;
            let minus = probe(-opts.eps)?;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic.data()[c];
            let rel = if a.abs() <= opts.atol && numeric.abs() <= opts.atol {
                0.0
            } else {
                relative_error(a, numeric)
            };
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some(WorstCoord {
                    input_name: name.clone(),
                    coord: c,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
