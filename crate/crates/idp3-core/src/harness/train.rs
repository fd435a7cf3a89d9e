//! Imitation training loop: sample windows, regress noise, AdamW under a
//! warmed-up cosine rate schedule peaked at the manifest rate. The whole run
//! is a pure function of (dataset bytes, manifest), so reruns produce
//! byte-identical checkpoints.

use super::dataset::{sample_window, Dataset};
use super::manifest::RunManifest;
use super::policy::Policy;
use super::HarnessError;
use crate::sim::mix_seed;
use crate::tensornet::{AdamWConfig, Graph};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::{Path, PathBuf};

const TRAIN_SALT: u64 = 0x5452_4e53;
/// Warmup runs for 5% of the step budget, capped here.
const WARMUP_CAP: usize = 500;
/// The cosine tail decays to this fraction of the manifest rate.
const LR_FLOOR: f64 = 0.02;

/// Manifest rate as the peak of a warmed-up cosine: linear ramp over the
/// first few steps, then a half-cosine down to a small floor. Noise
/// regression needs the late low-rate phase; at a flat rate the loss
/// plateaus at the optimizer's noise ball instead.
fn scheduled_lr(peak: f64, step: usize, total: usize) -> f64 {
    let warmup = (total / 20).min(WARMUP_CAP);
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1);
    let progress = (step - warmup) as f64 / span as f64;
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    peak * (LR_FLOOR + (1.0 - LR_FLOOR) * cosine)
}

pub struct TrainOutcome {
    pub policy: Policy,
    /// Mean batch loss per epoch.
    pub losses: Vec<f64>,
    pub checkpoint: PathBuf,
}

/// Trains a policy on the dataset per the manifest and writes the final
/// checkpoint to `out_dir/{manifest short hash}.ckpt`, tagged with the
/// manifest hash so eval can refuse mismatched weights.
///
/// A non-finite loss or gradient aborts immediately; the parameters from
/// before the failing step are saved next to the would-be checkpoint and
/// reported in the error.
pub fn train(
    dataset: &Dataset,
    manifest: &RunManifest,
    out_dir: &Path,
) -> Result<TrainOutcome, HarnessError> {
    if dataset.trajectories.is_empty() {
        return Err(HarnessError::Dataset("cannot train on an empty dataset".into()));
    }
    let mut policy = Policy::from_manifest(manifest)?;
    policy.set_stats(&dataset.stats);
    fs::create_dir_all(out_dir)?;

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(manifest.train_seed, TRAIN_SALT));
    let steps_per_epoch = manifest.windows_per_epoch.div_ceil(manifest.batch_size);
    let total_steps = manifest.epochs * steps_per_epoch;
    let mut step_idx = 0usize;
    let mut losses = Vec::with_capacity(manifest.epochs);

    for epoch in 0..manifest.epochs {
        let mut epoch_sum = 0.0;
        let mut batches = 0usize;
        let mut drawn = 0usize;
        while drawn < manifest.windows_per_epoch {
            let batch_size = manifest.batch_size.min(manifest.windows_per_epoch - drawn);
            drawn += batch_size;
            let opt = AdamWConfig {
                lr: scheduled_lr(manifest.lr, step_idx, total_steps),
                weight_decay: manifest.weight_decay,
                ..AdamWConfig::default()
            };
            step_idx += 1;
            let windows: Vec<_> = (0..batch_size)
                .map(|_| sample_window(dataset, manifest.h_obs, manifest.h_pred, &mut rng))
                .collect();
            let histories: Vec<&[_]> = windows.iter().map(|w| w.history.as_slice()).collect();
            let actions: Vec<&[f64]> = windows.iter().map(|w| w.actions.as_slice()).collect();

            let mut g = Graph::new();
            let step = (|| -> Result<f64, HarnessError> {
                let loss = policy.batch_loss(&mut g, &histories, &actions, &mut rng)?;
                let value = g.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(HarnessError::Dataset("loss left the finite range".into()));
                }
                g.backward(loss, &mut policy.params)?;
                policy.params.adamw_step(&opt)?;
                Ok(value)
            })();
            match step {
                Ok(value) => {
                    epoch_sum += value;
                    batches += 1;
                }
                Err(_) => {
                    let last_good = out_dir.join(format!("{}.lastgood.ckpt", manifest.short_hash()));
                    let saved = policy.save(&last_good, manifest.tag64()).ok().map(|()| last_good);
                    return Err(HarnessError::NonFiniteLoss { epoch, batch: batches, last_good: saved });
                }
            }
        }
        losses.push(epoch_sum / batches as f64);
    }

    let checkpoint = out_dir.join(format!("{}.ckpt", manifest.short_hash()));
    policy.save(&checkpoint, manifest.tag64())?;
    Ok(TrainOutcome { policy, losses, checkpoint })
}
