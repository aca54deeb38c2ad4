//! Finite-difference verification of backward rules.
//!
//! Every primitive is compared against central differences at step 1e-5 in
//! 64-bit arithmetic. The relative error uses a floor of 1e-3 on the
//! denominator so that near-zero gradients are compared absolutely at the
//! finite-difference noise floor.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{DiffError, DiffValue, Graph, Result};
use crate::rng::Rng64;
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Inputs closer than this to a breakpoint (ELU at 0, clamp bounds, integer
/// sampling coordinates) are resampled.
pub const KINK_MARGIN: f64 = 1e-3;

const MAX_RESAMPLE: usize = 32;

/// Outcome of one finite-difference check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_err: f64,
    pub step: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    fn from_err(op: &str, max_rel_err: f64, tolerance: f64) -> GradCheckReport {
        GradCheckReport {
            op: op.to_string(),
            max_rel_err,
            step: FD_STEP,
            tolerance,
            pass: max_rel_err <= tolerance,
        }
    }
}

/// Check the analytic gradient of `build` against central differences.
///
/// `sample` draws the op inputs; `kink_free` rejects draws too close to a
/// non-differentiable point (resampled up to a bounded number of times).
/// The check contracts the (possibly non-scalar) output with a fixed random
/// probe vector so a single backward pass covers every output coordinate.
pub fn grad_check(
    name: &str,
    rng: &mut Rng64,
    sample: impl Fn(&mut Rng64) -> Vec<Tensor>,
    kink_free: impl Fn(&[Tensor]) -> bool,
    build: impl Fn(&Graph, &[DiffValue]) -> Result<DiffValue>,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut inputs = sample(rng);
    let mut tries = 0;
    while !kink_free(&inputs) {
        tries += 1;
        if tries > MAX_RESAMPLE {
            return Err(DiffError::KinkResampleExhausted {
                op: name.to_string(),
            });
        }
        inputs = sample(rng);
    }

    // Fixed probe: scalar = sum(output * r).
    let out_probe = eval(&build, &inputs, None)?;
    let probe = Tensor::from_fn(out_probe.shape(), |_| rng.uniform_in(0.5, 1.5));

    // Analytic gradients.
    let graph = Graph::new();
    let leaves: Vec<DiffValue> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
    let out = build(&graph, &leaves)?;
    let scalar = out.mul(&graph.constant(probe.clone()))?.sum()?;
    scalar.backward()?;
    let analytic: Vec<Tensor> = leaves.iter().map(|l| l.grad()).collect();

    // Central differences, one coordinate at a time.
    let mut max_rel = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= FD_STEP;
            let fp = probe_value(&eval(&build, &plus, None)?, &probe);
            let fm = probe_value(&eval(&build, &minus, None)?, &probe);
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic[k].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(GradCheckReport::from_err(name, max_rel, tolerance))
}

fn eval(
    build: &impl Fn(&Graph, &[DiffValue]) -> Result<DiffValue>,
    inputs: &[Tensor],
    _tag: Option<()>,
) -> Result<Tensor> {
    let graph = Graph::new();
    let leaves: Vec<DiffValue> = inputs.iter().map(|t| graph.constant(t.clone())).collect();
    Ok(build(&graph, &leaves)?.value())
}

fn probe_value(out: &Tensor, probe: &Tensor) -> f64 {
    out.iter().zip(probe.iter()).map(|(&o, &p)| o * p).sum()
}

/// True when every element of `values` is at least `margin` away from each
/// of `points`.
pub fn away_from(values: &Tensor, points: &[f64], margin: f64) -> bool {
    values
        .iter()
        .all(|&v| points.iter().all(|&p| (v - p).abs() >= margin))
}

/// True when every element is at least `margin` away from any integer
/// (bilinear sampling breakpoints).
pub fn away_from_integers(values: &Tensor, margin: f64) -> bool {
    values.iter().all(|&v| {
        let r = crate::math::round(v);
        (v - r).abs() >= margin
    })
}
