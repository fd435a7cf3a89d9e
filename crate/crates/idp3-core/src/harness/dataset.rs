//! Demonstration recording, the versioned dataset file, and window sampling
//! for training.
//!
//! Collection runs the scripted expert round by round and keeps only rounds
//! that end in a successful place: a failed round rewinds the environment to
//! the round's start and retries the expert under a fresh jitter seed, so
//! stored trajectories are all-success by construction. Each demo gets its
//! own scene seed and a small camera-pose jitter, which is what later makes
//! view perturbations at evaluation time survivable.

use super::manifest::RunManifest;
use super::HarnessError;
use crate::geom::PointCloud;
use crate::sampling::SamplingConfig;
use crate::sim::{
    mix_seed, perturb_view, Action, Env, JitterConfig, Observation, ObsPipeline, SceneConfig,
    ScriptedExpert,
};
use crate::tensornet::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"IDPD";
const VERSION: u32 = 1;
pub(crate) const ACTION_DIM: usize = 4;
const PROPRIO_DIM: usize = 4;

const SCENE_SALT: u64 = 0x5343_4e45;
const JITTER_SALT: u64 = 0x4a49_5454;
const VIEW_SALT: u64 = 0x5649_4557;

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub observations: Vec<Observation>,
    pub actions: Vec<Action>,
    pub scene_seed: u64,
    pub jitter_theta: f64,
    pub jitter_sigma: f64,
    pub jitter_seed: u64,
    /// Deterministic stand-in for wall-clock time: the demo index. Wall
    /// clocks would break byte-identical re-collection.
    pub timestamp: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// Per-dimension normalization statistics over the whole dataset: actions
/// get min/max (for a [-1, 1] map), proprioception gets mean/std.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub action_min: Vec<f64>,
    pub action_max: Vec<f64>,
    pub proprio_mean: Vec<f64>,
    pub proprio_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub stats: DatasetStats,
}

impl Dataset {
    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }
}

fn action_row(a: &Action) -> [f64; ACTION_DIM] {
    [a.target[0], a.target[1], a.target[2], a.grip]
}

pub fn compute_stats(trajectories: &[Trajectory]) -> DatasetStats {
    let mut action_min = vec![f64::INFINITY; ACTION_DIM];
    let mut action_max = vec![f64::NEG_INFINITY; ACTION_DIM];
    let mut sum = [0.0; PROPRIO_DIM];
    let mut sumsq = [0.0; PROPRIO_DIM];
    let mut count = 0usize;
    for traj in trajectories {
        for a in &traj.actions {
            for (d, v) in action_row(a).into_iter().enumerate() {
                action_min[d] = action_min[d].min(v);
                action_max[d] = action_max[d].max(v);
            }
        }
        for o in &traj.observations {
            for d in 0..PROPRIO_DIM {
                sum[d] += o.proprio[d];
                sumsq[d] += o.proprio[d] * o.proprio[d];
            }
            count += 1;
        }
    }
    assert!(count > 0, "stats need at least one observation");
    let n = count as f64;
    let proprio_mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let proprio_std: Vec<f64> = sumsq
        .iter()
        .zip(&proprio_mean)
        .map(|(sq, m)| (sq / n - m * m).max(0.0).sqrt())
        .collect();
    DatasetStats { action_min, action_max, proprio_mean, proprio_std }
}

#[derive(Debug, Clone)]
pub struct CollectConfig {
    pub scene: SceneConfig,
    pub pipeline: ObsPipeline,
    pub demos: usize,
    pub rounds_per_demo: usize,
    pub jitter_theta: f64,
    pub jitter_sigma: f64,
    /// Uniform camera yaw jitter bound per demo, degrees (0 disables).
    pub cam_jitter_deg: f64,
    /// Uniform camera shift jitter bound per demo per axis, meters.
    pub cam_jitter_shift: f64,
    pub seed: u64,
    /// Step budget per round attempt before it counts as failed.
    pub round_budget: usize,
    /// Re-rolls allowed per round before collection aborts.
    pub max_retries: usize,
    /// Shortest admissible trajectory (window size the trainer will ask for).
    pub min_traj_len: usize,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            pipeline: ObsPipeline { include_image: true, ..ObsPipeline::default() },
            demos: 10,
            rounds_per_demo: 1,
            jitter_theta: 0.3,
            jitter_sigma: 0.01,
            cam_jitter_deg: 5.0,
            cam_jitter_shift: 0.02,
            seed: 1,
            round_budget: 200,
            max_retries: 20,
            min_traj_len: 18,
        }
    }
}

impl CollectConfig {
    /// Collection settings a manifest pins down. `include_image` is a
    /// caller decision (store depth grids only when an image baseline will
    /// train on this data); it does not affect any random draw, so datasets
    /// with and without images hold bitwise-identical clouds and actions.
    pub fn from_manifest(m: &RunManifest, include_image: bool) -> Self {
        Self {
            pipeline: ObsPipeline {
                sampling: SamplingConfig {
                    voxel_size: m.voxel_size,
                    target_points: m.target_points,
                },
                include_image,
                ..ObsPipeline::default()
            },
            demos: m.demos,
            rounds_per_demo: m.rounds_per_demo,
            jitter_theta: m.jitter_theta,
            jitter_sigma: m.jitter_sigma,
            cam_jitter_deg: m.cam_jitter_deg,
            cam_jitter_shift: m.cam_jitter_shift,
            seed: m.data_seed,
            min_traj_len: m.h_pred + m.h_obs,
            ..CollectConfig::default()
        }
    }
}

fn jittered_range(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.random_range(-bound..bound)
    } else {
        0.0
    }
}

/// Records `demos` expert trajectories, each `rounds_per_demo` successful
/// pick-and-place rounds long. Every random choice is derived from
/// `cfg.seed`, so the same config collects the same bytes. Fails if any
/// round exhausts its retries or more than half of all attempted rounds
/// fail.
pub fn collect_demos(cfg: &CollectConfig) -> Result<Dataset, HarnessError> {
    let mut trajectories = Vec::with_capacity(cfg.demos);
    let mut failed_rounds = 0usize;
    let mut total_rounds = 0usize;
    for demo in 0..cfg.demos as u64 {
        let mut view_rng =
            ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(cfg.seed, VIEW_SALT), demo));
        let yaw = jittered_range(&mut view_rng, cfg.cam_jitter_deg);
        let shift = [
            jittered_range(&mut view_rng, cfg.cam_jitter_shift),
            jittered_range(&mut view_rng, cfg.cam_jitter_shift),
            jittered_range(&mut view_rng, cfg.cam_jitter_shift),
        ];
        let scene = perturb_view(&cfg.scene, yaw, shift);
        let scene_seed = mix_seed(mix_seed(cfg.seed, SCENE_SALT), demo);
        let jitter_seed = mix_seed(mix_seed(cfg.seed, JITTER_SALT), demo);
        let mut env = Env::reset(scene, scene_seed)?;
        let mut expert = ScriptedExpert::new(JitterConfig {
            theta: cfg.jitter_theta,
            sigma: cfg.jitter_sigma,
            seed: jitter_seed,
        });
        let mut observations = Vec::new();
        let mut actions = Vec::new();
        for round in 0..cfg.rounds_per_demo as u64 {
            let mut attempt = 0u64;
            loop {
                total_rounds += 1;
                let snapshot = env.clone();
                let mut round_obs = Vec::new();
                let mut round_actions = Vec::new();
                let mut placed = false;
                for _ in 0..cfg.round_budget {
                    let obs = env.observe(&cfg.pipeline)?;
                    let action = expert.action(env.cfg(), env.state());
                    let ev = env.step(&action);
                    round_obs.push(obs);
                    round_actions.push(action);
                    if ev.success_place {
                        placed = true;
                        break;
                    }
                }
                if placed {
                    observations.append(&mut round_obs);
                    actions.append(&mut round_actions);
                    break;
                }
                failed_rounds += 1;
                attempt += 1;
                if attempt as usize > cfg.max_retries {
                    return Err(HarnessError::ExpertFailure {
                        failed: failed_rounds,
                        total: total_rounds,
                    });
                }
                env = snapshot;
                expert = ScriptedExpert::new(JitterConfig {
                    theta: cfg.jitter_theta,
                    sigma: cfg.jitter_sigma,
                    seed: mix_seed(jitter_seed, round * 1000 + attempt),
                });
            }
        }
        if observations.len() < cfg.min_traj_len {
            return Err(HarnessError::Dataset(format!(
                "demo {demo} is {} steps, below the window size {}",
                observations.len(),
                cfg.min_traj_len
            )));
        }
        trajectories.push(Trajectory {
            observations,
            actions,
            scene_seed,
            jitter_theta: cfg.jitter_theta,
            jitter_sigma: cfg.jitter_sigma,
            jitter_seed,
            timestamp: demo,
        });
    }
    if failed_rounds * 2 > total_rounds {
        return Err(HarnessError::ExpertFailure { failed: failed_rounds, total: total_rounds });
    }
    let stats = compute_stats(&trajectories);
    Ok(Dataset { trajectories, stats })
}

/// One training sample: `h_obs` observation references (oldest first) and a
/// flat `h_pred x 4` raw action chunk.
#[derive(Debug)]
pub struct Window<'a> {
    pub history: Vec<&'a Observation>,
    pub actions: Vec<f64>,
}

/// Uniform over trajectories, then uniform over every start index in the
/// chosen trajectory. Histories before the start repeat the first
/// observation; action chunks running off the end repeat the final action.
pub fn sample_window<'a>(
    ds: &'a Dataset,
    h_obs: usize,
    h_pred: usize,
    rng: &mut ChaCha8Rng,
) -> Window<'a> {
    let traj = &ds.trajectories[rng.random_range(0..ds.trajectories.len())];
    let len = traj.len();
    let start = rng.random_range(0..len);
    let history = (0..h_obs)
        .map(|k| {
            let idx = (start + k + 1).saturating_sub(h_obs).min(len - 1);
            &traj.observations[idx]
        })
        .collect();
    let mut actions = Vec::with_capacity(h_pred * ACTION_DIM);
    for j in 0..h_pred {
        let idx = (start + j).min(len - 1);
        actions.extend_from_slice(&action_row(&traj.actions[idx]));
    }
    Window { history, actions }
}

fn w_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn w_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn w_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], HarnessError> {
        if self.pos + n > self.buf.len() {
            return Err(HarnessError::Dataset(format!(
                "truncated dataset: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, HarnessError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, HarnessError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, HarnessError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, HarnessError> {
        let raw = self.take(8 * n)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<(), HarnessError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    w_u32(&mut out, VERSION);
    w_u32(&mut out, ACTION_DIM as u32);
    w_u32(&mut out, PROPRIO_DIM as u32);
    w_f64s(&mut out, &ds.stats.action_min);
    w_f64s(&mut out, &ds.stats.action_max);
    w_f64s(&mut out, &ds.stats.proprio_mean);
    w_f64s(&mut out, &ds.stats.proprio_std);
    w_u64(&mut out, ds.trajectories.len() as u64);
    for traj in &ds.trajectories {
        w_u64(&mut out, traj.scene_seed);
        w_f64s(&mut out, &[traj.jitter_theta, traj.jitter_sigma]);
        w_u64(&mut out, traj.jitter_seed);
        w_u64(&mut out, traj.timestamp);
        w_u64(&mut out, traj.len() as u64);
        for (obs, act) in traj.observations.iter().zip(&traj.actions) {
            w_u64(&mut out, obs.cloud.len() as u64);
            for p in &obs.cloud.positions {
                w_f64s(&mut out, p);
            }
            w_f64s(&mut out, &obs.proprio);
            match &obs.image {
                None => out.push(0),
                Some(img) => {
                    out.push(1);
                    let s = img.shape();
                    w_u64(&mut out, s[2] as u64);
                    w_u64(&mut out, s[3] as u64);
                    w_f64s(&mut out, img.data());
                }
            }
            w_f64s(&mut out, &action_row(act));
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, HarnessError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(HarnessError::Dataset("bad magic, not a dataset file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(HarnessError::Dataset(format!("unsupported dataset version {version}")));
    }
    let action_dim = r.u32()? as usize;
    let proprio_dim = r.u32()? as usize;
    if action_dim != ACTION_DIM || proprio_dim != PROPRIO_DIM {
        return Err(HarnessError::Dataset(format!(
            "unexpected dims: action {action_dim}, proprio {proprio_dim}"
        )));
    }
    let stats = DatasetStats {
        action_min: r.f64s(action_dim)?,
        action_max: r.f64s(action_dim)?,
        proprio_mean: r.f64s(proprio_dim)?,
        proprio_std: r.f64s(proprio_dim)?,
    };
    let n_traj = r.u64()? as usize;
    let mut trajectories = Vec::with_capacity(n_traj);
    for _ in 0..n_traj {
        let scene_seed = r.u64()?;
        let jitter_theta = r.f64()?;
        let jitter_sigma = r.f64()?;
        let jitter_seed = r.u64()?;
        let timestamp = r.u64()?;
        let n_steps = r.u64()? as usize;
        if n_steps == 0 {
            return Err(HarnessError::Dataset("empty trajectory".into()));
        }
        let mut observations = Vec::with_capacity(n_steps);
        let mut actions = Vec::with_capacity(n_steps);
        for _ in 0..n_steps {
            let n_points = r.u64()? as usize;
            let mut positions = Vec::with_capacity(n_points);
            for _ in 0..n_points {
                let xyz = r.f64s(3)?;
                positions.push([xyz[0], xyz[1], xyz[2]]);
            }
            let proprio = r.f64s(proprio_dim)?;
            let image = match r.take(1)?[0] {
                0 => None,
                1 => {
                    let h = r.u64()? as usize;
                    let w = r.u64()? as usize;
                    Some(Tensor::from_vec(&[1, 1, h, w], r.f64s(h * w)?))
                }
                other => {
                    return Err(HarnessError::Dataset(format!("bad image flag {other}")));
                }
            };
            let row = r.f64s(action_dim)?;
            observations.push(Observation {
                cloud: PointCloud::from_positions(positions),
                proprio,
                image,
            });
            actions.push(Action { target: [row[0], row[1], row[2]], grip: row[3] });
        }
        trajectories.push(Trajectory {
            observations,
            actions,
            scene_seed,
            jitter_theta,
            jitter_sigma,
            jitter_seed,
            timestamp,
        });
    }
    if r.pos != buf.len() {
        return Err(HarnessError::Dataset(format!(
            "{} trailing bytes after the last trajectory",
            buf.len() - r.pos
        )));
    }
    Ok(Dataset { trajectories, stats })
}
