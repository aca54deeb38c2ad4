//! Mini-batch training loop: shuffled batches, horizontal-flip
//! augmentation, gradient accumulation in item order, global-norm clipping,
//! Adam with a step learning-rate schedule, per-epoch validation and
//! checkpoints.

use std::path::Path;
use std::time::Instant;

use planedepth_core::geometry::DepthMap;
use planedepth_core::losses::{total_loss, LossError, LossWeights};
use planedepth_core::metrics::{
    compute_metrics, median_scale, merge_reports, offset_diagnostics, MetricReport,
};
use planedepth_core::model::{forward, init, ModelConfig, ModelError, Parameters};
use planedepth_core::optim::{adam_step, clip_global_norm, stepped_lr, AdamConfig, AdamState, StepOutcome};
use planedepth_core::rng::Rng64;
use planedepth_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::dataset::CompactScene;
use crate::formats::{write_checkpoint, FormatError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training aborted: loss non-finite for {streak} consecutive batches (epoch {epoch}, batch {batch}); recent losses: {recent:?}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        streak: usize,
        recent: Vec<f64>,
    },
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("loss: {0}")]
    Loss(LossError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

impl From<LossError> for TrainError {
    fn from(e: LossError) -> TrainError {
        TrainError::Loss(e)
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Full training recipe; serializable as the JSON config file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Learning rate is multiplied by 0.1 every this many epochs.
    pub lr_step_epochs: usize,
    pub flip_prob: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Mean plane loss on/off (the other ablation switches live in `model`).
    pub mpl: bool,
    /// Apply median scaling before validation metrics.
    pub median_scale_val: bool,
    pub loss: LossWeights,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 8,
            epochs: 25,
            lr_step_epochs: 5,
            flip_prob: 0.5,
            clip_norm: 10.0,
            seed: 42,
            mpl: true,
            median_scale_val: true,
            loss: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) {
        assert!(self.lr > 0.0 && self.weight_decay >= 0.0);
        assert!(self.batch_size >= 1 && self.epochs >= 1);
        assert!((0.0..=1.0).contains(&self.flip_prob));
        self.loss.validate();
        self.model.validate();
    }

    fn adam(&self, epoch: usize) -> AdamConfig {
        AdamConfig {
            lr: stepped_lr(self.lr, epoch, self.lr_step_epochs),
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub total_loss: f64,
    pub depth_final: f64,
    pub depth_seed: f64,
    pub depth_initial: f64,
    pub mpl: f64,
    pub val: Option<MetricReport>,
    pub seed_region_consistency: Option<f64>,
    pub skipped_steps: usize,
    pub wall_time_s: f64,
}

pub struct TrainOutcome {
    pub params: Parameters,
    pub log: Vec<EpochRecord>,
}

const NON_FINITE_ABORT_STREAK: usize = 10;

/// Run the full loop. Checkpoints are written per epoch into
/// `checkpoint_dir` when given; `progress` observes each finished epoch.
pub fn train(
    train_set: &[CompactScene],
    val_set: Option<&[CompactScene]>,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate();
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut params = init(&cfg.model, cfg.seed);
    let mut state = AdamState::new(params.tensors());
    let mut rng = Rng64::new(cfg.seed ^ 0x7e57_7e57_0bad_cafe);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut bad_streak = 0usize;
    let mut recent_losses: Vec<f64> = Vec::new();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let adam_cfg = cfg.adam(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        rng.shuffle(&mut order);

        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut batches = 0usize;
        let mut skipped_steps = 0usize;

        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut accum: Vec<Tensor> = params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect();
            let mut contributed = 0usize;
            let mut batch_bad = false;
            let mut batch_losses = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
            for &idx in chunk {
                let flip = rng.uniform() < cfg.flip_prob;
                let scene = {
                    let s = train_set[idx].to_scene();
                    if flip {
                        s.flip_horizontal()
                    } else {
                        s
                    }
                };
                let out = forward(&scene.image, &params, &cfg.model)?;
                let loss = total_loss(
                    &out.d_f,
                    &out.d_s,
                    &out.d_i,
                    &scene.depth,
                    &scene.intrinsics,
                    &cfg.loss,
                    cfg.mpl,
                )?;
                let value = loss.value.item();
                recent_losses.push(value);
                if recent_losses.len() > NON_FINITE_ABORT_STREAK {
                    recent_losses.remove(0);
                }
                if !value.is_finite() {
                    batch_bad = true;
                    continue;
                }
                loss.value
                    .backward()
                    .map_err(|e| TrainError::Model(ModelError::Diff(e)))?;
                for (acc, leaf) in accum.iter_mut().zip(&out.param_values) {
                    let grad = leaf.grad();
                    for (a, g) in acc.data_mut().iter_mut().zip(grad.iter()) {
                        *a += g;
                    }
                }
                batch_losses.0 += value;
                batch_losses.1 += loss.depth_final;
                batch_losses.2 += loss.depth_seed;
                batch_losses.3 += loss.depth_initial;
                batch_losses.4 += loss.mpl;
                contributed += 1;
            }
            if batch_bad || contributed == 0 {
                bad_streak += 1;
                if bad_streak >= NON_FINITE_ABORT_STREAK {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                        streak: bad_streak,
                        recent: recent_losses,
                    });
                }
                if contributed == 0 {
                    continue;
                }
            } else {
                bad_streak = 0;
            }
            let inv = 1.0 / contributed as f64;
            for acc in accum.iter_mut() {
                for v in acc.data_mut().iter_mut() {
                    *v *= inv;
                }
            }
            clip_global_norm(&mut accum, cfg.clip_norm);
            match adam_step(params.tensors_mut(), &accum, &mut state, &adam_cfg) {
                StepOutcome::Applied => {}
                StepOutcome::SkippedNonFinite => skipped_steps += 1,
            }
            sums.0 += batch_losses.0 * inv;
            sums.1 += batch_losses.1 * inv;
            sums.2 += batch_losses.2 * inv;
            sums.3 += batch_losses.3 * inv;
            sums.4 += batch_losses.4 * inv;
            batches += 1;
        }

        let denom = batches.max(1) as f64;
        let (val, consistency) = match val_set {
            Some(scenes) if !scenes.is_empty() => {
                let (report, cons) = validate(scenes, &params, cfg)?;
                (Some(report), Some(cons))
            }
            _ => (None, None),
        };
        let record = EpochRecord {
            epoch,
            lr: adam_cfg.lr,
            total_loss: sums.0 / denom,
            depth_final: sums.1 / denom,
            depth_seed: sums.2 / denom,
            depth_initial: sums.3 / denom,
            mpl: sums.4 / denom,
            val,
            seed_region_consistency: consistency,
            skipped_steps,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        if let Some(dir) = checkpoint_dir {
            write_checkpoint(
                &dir.join(format!("checkpoint_epoch_{epoch:03}.p3p1")),
                &cfg.model,
                &params,
            )?;
        }
        progress(&record);
        log.push(record);
    }
    Ok(TrainOutcome { params, log })
}

/// Median-scaled (by default) metric suite plus seed-region consistency,
/// averaged over the validation set.
pub fn validate(
    scenes: &[CompactScene],
    params: &Parameters,
    cfg: &TrainConfig,
) -> Result<(MetricReport, f64)> {
    let mut reports = Vec::with_capacity(scenes.len());
    let mut consistency_sum = 0.0;
    for compact in scenes {
        let scene = compact.to_scene();
        let out = forward(&scene.image, params, &cfg.model)?;
        let pred = DepthMap::dense(out.d_f.value(), cfg.model.depth_range);
        let pred = if cfg.median_scale_val {
            median_scale(&pred, &scene.depth).map_err(|_| TrainError::EmptyDataset)?
        } else {
            pred
        };
        let cap = cfg.model.depth_range.1;
        let report = compute_metrics(&pred, &scene.depth, cap)
            .map_err(|_| TrainError::EmptyDataset)?;
        reports.push(report);
        let diag = offset_diagnostics(
            &out.seed_positions(),
            &out.confidence.value(),
            &scene.labels,
        );
        consistency_sum += diag.seed_region_consistency;
    }
    let merged = merge_reports(&reports).expect("non-empty validation set");
    Ok((merged, consistency_sum / scenes.len() as f64))
}
