//! Adam with decoupled weight decay, plus the step learning-rate schedule.

use alloc::vec::Vec;

use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled: applied as `theta -= lr * weight_decay * theta` after the
    /// Adam update, not folded into the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> AdamConfig {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> AdamState {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A non-finite gradient component was found; parameters and moments
    /// are untouched.
    SkippedNonFinite,
}

/// One Adam update with bias correction, then decoupled weight decay.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> StepOutcome {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    if grads.iter().any(|g| !g.all_finite()) {
        return StepOutcome::SkippedNonFinite;
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - math::powi(cfg.beta1, t);
    let bc2 = 1.0 - math::powi(cfg.beta2, t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        let gd = g.data();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gd[i];
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= cfg.lr * m_hat / (math::sqrt(v_hat) + cfg.epsilon);
            if cfg.weight_decay > 0.0 {
                pd[i] -= cfg.lr * cfg.weight_decay * pd[i];
            }
        }
    }
    StepOutcome::Applied
}

/// Learning rate after `epoch` (0-based): lr0 * 0.1^(epoch / step_every).
pub fn stepped_lr(lr0: f64, epoch: usize, step_every: usize) -> f64 {
    lr0 * math::powi(0.1, (epoch / step_every.max(1)) as i32)
}

/// Global L2-norm gradient clipping; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        for &v in g.iter() {
            sq += v * v;
        }
    }
    let norm = math::sqrt(sq);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut().iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut params = vec![Tensor::new(&[3], vec![1.0, -2.0, 0.5])];
        let before = params[0].clone();
        let grads = vec![Tensor::zeros(&[3])];
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        adam_step(&mut params, &grads, &mut state, &cfg);
        assert_eq!(params[0], before);
    }

    #[test]
    fn first_step_magnitude_is_about_lr() {
        // Bias-corrected first step: |update| = lr * |g| / (|g| + eps') ~ lr.
        for &g in &[1.0, -0.3, 250.0] {
            let mut params = vec![Tensor::scalar(10.0)];
            let grads = vec![Tensor::scalar(g)];
            let mut state = AdamState::new(&params);
            let cfg = AdamConfig {
                lr: 0.05,
                weight_decay: 0.0,
                ..AdamConfig::default()
            };
            adam_step(&mut params, &grads, &mut state, &cfg);
            let update = 10.0 - params[0].item();
            assert!(
                (update - 0.05 * g.signum()).abs() < 1e-6,
                "g={g}: update {update}"
            );
        }
    }

    #[test]
    fn converges_on_quadratic() {
        // 200 steps on f(t) = (t-3)^2 with lr 0.1.
        let mut params = vec![Tensor::scalar(-4.0)];
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        for _ in 0..200 {
            let theta = params[0].item();
            let grads = vec![Tensor::scalar(2.0 * (theta - 3.0))];
            adam_step(&mut params, &grads, &mut state, &cfg);
        }
        let theta = params[0].item();
        assert!((theta - 3.0).abs() < 1e-2, "theta {theta}");
    }

    #[test]
    fn non_finite_gradient_skips_the_step() {
        let mut params = vec![Tensor::scalar(1.0)];
        let grads = vec![Tensor::scalar(f64::NAN)];
        let mut state = AdamState::new(&params);
        let outcome = adam_step(&mut params, &grads, &mut state, &AdamConfig::default());
        assert_eq!(outcome, StepOutcome::SkippedNonFinite);
        assert_eq!(params[0].item(), 1.0);
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn weight_decay_alone_shrinks_parameters() {
        // With zero gradients the only change is the decoupled decay.
        let mut params = vec![Tensor::scalar(2.0)];
        let grads = vec![Tensor::scalar(0.0)];
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        adam_step(&mut params, &grads, &mut state, &cfg);
        // theta = 2 - lr*wd*2 = 2 * (1 - 0.05).
        assert!((params[0].item() - 1.9).abs() < 1e-15);
    }

    #[test]
    fn lr_schedule_decays_every_five_epochs() {
        for e in 0..25 {
            let lr = stepped_lr(1e-4, e, 5);
            let expected = 1e-4 * 0.1f64.powi((e / 5) as i32);
            assert_eq!(lr, expected, "epoch {e}");
        }
    }

    #[test]
    fn global_clip_bounds_norm() {
        let mut grads = vec![Tensor::new(&[2], vec![30.0, 40.0])];
        let norm = clip_global_norm(&mut grads, 10.0);
        assert!((norm - 50.0).abs() < 1e-12);
        let clipped: f64 = grads[0].iter().map(|v| v * v).sum::<f64>();
        assert!((clipped.sqrt() - 10.0).abs() < 1e-12);
    }
}
