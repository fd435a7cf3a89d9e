//! The visuomotor policy: observation encoder + conditional denoiser +
//! normalization constants, all living in one [`ParamSet`] so a single
//! checkpoint file captures everything needed to act.

use super::dataset::{DatasetStats, ACTION_DIM};
use super::manifest::RunManifest;
use super::HarnessError;
use crate::diffusion::{
    ddim_sample, denormalize_actions, make_schedule, normalize_actions, training_loss,
    DenoiserConfig, DenoiserMlp, NoiseSchedule,
};
use crate::encoders::{Activation, EncoderConfig, EncoderVariant, ImageEncoder, PointEncoder};
use crate::sim::{mix_seed, Action, Observation};
use crate::tensornet::{
    load_checkpoint_into, save_checkpoint, Graph, NodeId, ParamId, ParamSet, Tensor,
    TensornetError,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use std::path::Path;

const PROPRIO_DIM: usize = 4;
const INIT_SALT: u64 = 0x494e_4954;
const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
enum ObsEncoder {
    Points(PointEncoder),
    Image(ImageEncoder),
}

struct StatIds {
    action_min: ParamId,
    action_max: ParamId,
    proprio_mean: ParamId,
    proprio_std: ParamId,
}

/// Policy = encoder + denoiser + frozen stats. Construction order of the
/// parameters is fixed (encoder, denoiser, stats), which is what makes
/// checkpoints written by one process loadable by another.
pub struct Policy {
    pub params: ParamSet,
    encoder: ObsEncoder,
    denoiser: DenoiserMlp,
    schedule: NoiseSchedule,
    stats: StatIds,
    h_obs: usize,
    h_pred: usize,
    t_infer: usize,
}

impl Policy {
    /// Builds a freshly initialized policy; weights are a pure function of
    /// the manifest's train seed and architecture keys.
    pub fn from_manifest(m: &RunManifest) -> Result<Self, HarnessError> {
        m.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(m.train_seed, INIT_SALT));
        let mut params = ParamSet::new();
        let enc_cfg = EncoderConfig {
            variant: m.encoder,
            widths: m.widths.clone(),
            embedding_dim: m.embedding_dim,
            activation: Activation::Relu,
            n_points: m.target_points,
            image_size: 64,
            proprio_dim: PROPRIO_DIM,
        };
        let encoder = if m.encoder == EncoderVariant::ImageBaseline {
            ObsEncoder::Image(ImageEncoder::init(&mut params, "enc", &enc_cfg, &mut rng))
        } else {
            ObsEncoder::Points(PointEncoder::init(&mut params, "enc", &enc_cfg, &mut rng))
        };
        let den_cfg = DenoiserConfig { hidden: m.hidden.clone(), time_embed_dim: m.time_embed_dim };
        let denoiser = DenoiserMlp::init(
            &mut params,
            "den",
            m.h_pred * ACTION_DIM,
            m.h_obs * m.embedding_dim,
            &den_cfg,
            &mut rng,
        );
        let stats = StatIds {
            action_min: params.add_frozen("stats.action_min", Tensor::zeros(&[ACTION_DIM])),
            action_max: params.add_frozen("stats.action_max", Tensor::filled(&[ACTION_DIM], 1.0)),
            proprio_mean: params.add_frozen("stats.proprio_mean", Tensor::zeros(&[PROPRIO_DIM])),
            proprio_std: params.add_frozen("stats.proprio_std", Tensor::filled(&[PROPRIO_DIM], 1.0)),
        };
        let schedule = make_schedule(m.t_train, m.schedule)?;
        Ok(Self {
            params,
            encoder,
            denoiser,
            schedule,
            stats,
            h_obs: m.h_obs,
            h_pred: m.h_pred,
            t_infer: m.t_infer,
        })
    }

    pub fn set_stats(&mut self, stats: &DatasetStats) {
        let pairs: [(ParamId, &[f64]); 4] = [
            (self.stats.action_min, &stats.action_min),
            (self.stats.action_max, &stats.action_max),
            (self.stats.proprio_mean, &stats.proprio_mean),
            (self.stats.proprio_std, &stats.proprio_std),
        ];
        for (id, values) in pairs {
            let value = &mut self.params.get_mut(id).value;
            assert_eq!(value.numel(), values.len(), "stat dimension drifted");
            value.data_mut().copy_from_slice(values);
        }
    }

    fn stat(&self, id: ParamId) -> &[f64] {
        self.params.get(id).value.data()
    }

    pub fn h_obs(&self) -> usize {
        self.h_obs
    }

    pub fn h_pred(&self) -> usize {
        self.h_pred
    }

    pub fn needs_images(&self) -> bool {
        matches!(self.encoder, ObsEncoder::Image(_))
    }

    /// Cloud size the encoder was built for; `None` for image baselines.
    pub fn point_budget(&self) -> Option<usize> {
        match &self.encoder {
            ObsEncoder::Points(enc) => Some(enc.config().n_points),
            ObsEncoder::Image(_) => None,
        }
    }

    /// Embeds a batch of observation histories: one forward pass per history
    /// slot over the stacked batch, embeddings concatenated oldest-to-newest
    /// into `[B, h_obs * embedding_dim]`.
    pub fn condition(
        &self,
        g: &mut Graph,
        histories: &[&[&Observation]],
    ) -> Result<NodeId, HarnessError> {
        let b = histories.len();
        assert!(b > 0, "empty batch");
        for h in histories {
            assert_eq!(h.len(), self.h_obs, "history length must be h_obs");
        }
        let mean = self.stat(self.stats.proprio_mean).to_vec();
        let std: Vec<f64> =
            self.stat(self.stats.proprio_std).iter().map(|s| s.max(STD_FLOOR)).collect();
        let mut embeddings = Vec::with_capacity(self.h_obs);
        for k in 0..self.h_obs {
            let mut pdata = Vec::with_capacity(b * PROPRIO_DIM);
            for h in histories {
                let p = &h[k].proprio;
                assert_eq!(p.len(), PROPRIO_DIM, "proprio width");
                for d in 0..PROPRIO_DIM {
                    pdata.push((p[d] - mean[d]) / std[d]);
                }
            }
            let proprio = g.input(Tensor::from_vec(&[b, PROPRIO_DIM], pdata));
            let emb = match &self.encoder {
                ObsEncoder::Points(enc) => {
                    let n = enc.config().n_points;
                    let mut cdata = vec![0.0; b * 3 * n];
                    for (bi, h) in histories.iter().enumerate() {
                        let cloud = &h[k].cloud;
                        if cloud.len() != n {
                            return Err(HarnessError::Dataset(format!(
                                "cloud has {} points, policy expects {n}",
                                cloud.len()
                            )));
                        }
                        let base = bi * 3 * n;
                        for (i, p) in cloud.positions.iter().enumerate() {
                            cdata[base + i] = p[0];
                            cdata[base + n + i] = p[1];
                            cdata[base + 2 * n + i] = p[2];
                        }
                    }
                    let cloud = g.input(Tensor::from_vec(&[b, 3, n], cdata));
                    enc.forward(g, &self.params, cloud, proprio)
                }
                ObsEncoder::Image(enc) => {
                    let side = enc.config().image_size;
                    let mut idata = vec![0.0; b * side * side];
                    for (bi, h) in histories.iter().enumerate() {
                        let img = h[k].image.as_ref().ok_or_else(|| {
                            HarnessError::Dataset(
                                "image-baseline policy needs image observations".into(),
                            )
                        })?;
                        assert_eq!(img.shape(), &[1, 1, side, side], "depth grid shape");
                        idata[bi * side * side..(bi + 1) * side * side]
                            .copy_from_slice(img.data());
                    }
                    let image = g.input(Tensor::from_vec(&[b, 1, side, side], idata));
                    enc.forward(g, &self.params, image, proprio)
                }
            };
            embeddings.push(emb);
        }
        Ok(if embeddings.len() == 1 { embeddings[0] } else { g.concat_cols(&embeddings) })
    }

    /// Noise-regression loss for a batch of training windows. Actions are
    /// normalized with the dataset stats before diffusion.
    pub fn batch_loss<R: Rng>(
        &self,
        g: &mut Graph,
        histories: &[&[&Observation]],
        raw_actions: &[&[f64]],
        rng: &mut R,
    ) -> Result<NodeId, HarnessError> {
        assert_eq!(histories.len(), raw_actions.len());
        let cond = self.condition(g, histories)?;
        let amin = self.stat(self.stats.action_min).to_vec();
        let amax = self.stat(self.stats.action_max).to_vec();
        let dim = self.h_pred * ACTION_DIM;
        let mut flat = Vec::with_capacity(histories.len() * dim);
        for raw in raw_actions {
            assert_eq!(raw.len(), dim, "action chunk length");
            flat.extend(normalize_actions(raw, &amin, &amax));
        }
        let x0 = Tensor::from_vec(&[histories.len(), dim], flat);
        Ok(training_loss(g, &self.params, &self.denoiser, &self.schedule, &x0, cond, rng)?)
    }

    /// One receding-horizon plan: encode the history once, run the strided
    /// deterministic sampler from a seeded Gaussian start, denormalize into
    /// executable actions.
    pub fn plan(
        &self,
        history: &[&Observation],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Action>, HarnessError> {
        let mut g = Graph::new();
        let cond_node = self.condition(&mut g, &[history])?;
        if let Some(p) = g.poisoned() {
            return Err(TensornetError::NonFinite(p.to_string()).into());
        }
        let cond = g.value(cond_node).clone();
        let x_init = Tensor::randn(&[1, self.h_pred * ACTION_DIM], rng);
        // Normalized chunks live in [-1, 1] by construction, so the sampler
        // may project every x0 estimate onto that support.
        let x = ddim_sample(
            &self.denoiser,
            &self.params,
            &self.schedule,
            &cond,
            self.t_infer,
            &x_init,
            Some((-1.0, 1.0)),
        )?;
        let amin = self.stat(self.stats.action_min);
        let amax = self.stat(self.stats.action_max);
        let flat = denormalize_actions(x.data(), amin, amax);
        Ok(flat
            .chunks_exact(ACTION_DIM)
            .map(|row| Action { target: [row[0], row[1], row[2]], grip: row[3] })
            .collect())
    }

    pub fn save(&self, path: &Path, tag: u64) -> Result<(), HarnessError> {
        Ok(save_checkpoint(path, &self.params, tag)?)
    }

    /// Restores weights and stats into a policy freshly built from the same
    /// manifest; returns the stored tag for matching against the manifest.
    pub fn load_weights(&mut self, path: &Path) -> Result<u64, HarnessError> {
        Ok(load_checkpoint_into(path, &mut self.params)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::PointCloud;

    fn tiny_manifest() -> RunManifest {
        RunManifest {
            target_points: 16,
            h_pred: 4,
            h_obs: 2,
            h_act: 2,
            widths: vec![8, 8],
            embedding_dim: 8,
            hidden: vec![16],
            time_embed_dim: 4,
            ..RunManifest::default()
        }
    }

    fn obs(seed: u64, n: usize) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positions = (0..n)
            .map(|_| [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(0.2..1.0)])
            .collect();
        Observation {
            cloud: PointCloud::from_positions(positions),
            proprio: vec![0.1, 0.2, 0.5, 0.0],
            image: None,
        }
    }

    #[test]
    fn initialization_is_seed_deterministic() {
        let m = tiny_manifest();
        let a = Policy::from_manifest(&m).unwrap();
        let b = Policy::from_manifest(&m).unwrap();
        assert_eq!(a.params.len(), b.params.len());
        for (pa, pb) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.trainable, pb.trainable);
            let bits_equal = pa
                .value
                .data()
                .iter()
                .zip(pb.value.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(bits_equal, "param {} differs between identical inits", pa.name);
        }
    }

    #[test]
    fn stats_ride_in_frozen_params() {
        let m = tiny_manifest();
        let mut p = Policy::from_manifest(&m).unwrap();
        let stats = DatasetStats {
            action_min: vec![-1.0, -2.0, 0.0, 0.0],
            action_max: vec![1.0, 2.0, 1.0, 1.0],
            proprio_mean: vec![0.5; 4],
            proprio_std: vec![0.1; 4],
        };
        p.set_stats(&stats);
        assert_eq!(p.stat(p.stats.action_min), stats.action_min.as_slice());
        assert!(!p.params.get(p.stats.action_min).trainable);
    }

    #[test]
    fn plan_emits_h_pred_finite_actions_and_is_seed_reproducible() {
        let m = tiny_manifest();
        let mut p = Policy::from_manifest(&m).unwrap();
        p.set_stats(&DatasetStats {
            action_min: vec![-0.5, -0.5, 0.0, 0.0],
            action_max: vec![0.5, 0.9, 1.0, 1.0],
            proprio_mean: vec![0.0; 4],
            proprio_std: vec![1.0; 4],
        });
        let o0 = obs(1, m.target_points);
        let o1 = obs(2, m.target_points);
        let history = [&o0, &o1];
        let mut rng_a = ChaCha8Rng::seed_from_u64(9);
        let plan_a = p.plan(&history, &mut rng_a).unwrap();
        assert_eq!(plan_a.len(), m.h_pred);
        for a in &plan_a {
            assert!(a.target.iter().all(|v| v.is_finite()) && a.grip.is_finite());
        }
        let mut rng_b = ChaCha8Rng::seed_from_u64(9);
        let plan_b = p.plan(&history, &mut rng_b).unwrap();
        assert_eq!(plan_a, plan_b);
    }

    #[test]
    fn wrong_cloud_budget_is_reported() {
        let m = tiny_manifest();
        let p = Policy::from_manifest(&m).unwrap();
        let o = obs(1, m.target_points + 1);
        let history = [&o, &o];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(p.plan(&history, &mut rng), Err(HarnessError::Dataset(_))));
    }

    #[test]
    fn checkpoints_restore_bitwise() {
        let m = tiny_manifest();
        let mut p = Policy::from_manifest(&m).unwrap();
        p.set_stats(&DatasetStats {
            action_min: vec![-1.0; 4],
            action_max: vec![1.0; 4],
            proprio_mean: vec![0.25; 4],
            proprio_std: vec![2.0; 4],
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.tnck");
        p.save(&path, 0xFEED).unwrap();
        let mut q = Policy::from_manifest(&m).unwrap();
        let tag = q.load_weights(&path).unwrap();
        assert_eq!(tag, 0xFEED);
        let o0 = obs(1, m.target_points);
        let o1 = obs(2, m.target_points);
        let history = [&o0, &o1];
        let mut rng_a = ChaCha8Rng::seed_from_u64(4);
        let mut rng_b = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(p.plan(&history, &mut rng_a).unwrap(), q.plan(&history, &mut rng_b).unwrap());
    }

    #[test]
    fn image_policy_requires_images() {
        let m = RunManifest {
            encoder: EncoderVariant::ImageBaseline,
            widths: vec![4, 4],
            ..tiny_manifest()
        };
        let p = Policy::from_manifest(&m).unwrap();
        let o = obs(1, 16); // image: None
        let history = [&o, &o];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(p.plan(&history, &mut rng), Err(HarnessError::Dataset(_))));
    }
}
