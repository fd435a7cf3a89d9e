//! Flat key=value run manifests and their content hash.
//!
//! The manifest is the reproducibility unit: two manifests with the same
//! canonical form are the same experiment. Parsing is strict (unknown or
//! duplicate keys are errors) and canonicalization re-emits sorted keys, so
//! hashes do not depend on key order, spacing, or comments in the source.

use super::HarnessError;
use crate::diffusion::ScheduleKind;
use crate::encoders::EncoderVariant;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub encoder: EncoderVariant,
    pub target_points: usize,
    pub h_pred: usize,
    pub h_obs: usize,
    /// Actions executed per replan.
    pub h_act: usize,
    pub schedule: ScheduleKind,
    pub t_train: usize,
    pub t_infer: usize,
    pub demos: usize,
    pub rounds_per_demo: usize,
    pub epochs: usize,
    /// An epoch is this many sampled windows; batches are carved from it.
    pub windows_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub data_seed: u64,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub eval_episodes: usize,
    pub eval_steps: usize,
    pub jitter_theta: f64,
    pub jitter_sigma: f64,
    /// Per-demo camera yaw jitter bound at collection time, degrees.
    pub cam_jitter_deg: f64,
    /// Per-demo camera shift jitter bound at collection time, meters.
    pub cam_jitter_shift: f64,
    pub voxel_size: f64,
    pub widths: Vec<usize>,
    pub embedding_dim: usize,
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
}

impl Default for RunManifest {
    fn default() -> Self {
        Self {
            encoder: EncoderVariant::ConvPyramidIdp3,
            target_points: 1024,
            h_pred: 16,
            h_obs: 2,
            h_act: 8,
            schedule: ScheduleKind::Cosine,
            t_train: 50,
            t_infer: 10,
            demos: 50,
            rounds_per_demo: 1,
            epochs: 300,
            windows_per_epoch: 256,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 1e-6,
            data_seed: 1,
            train_seed: 2,
            eval_seed: 3,
            eval_episodes: 50,
            eval_steps: 400,
            jitter_theta: 0.3,
            jitter_sigma: 0.01,
            cam_jitter_deg: 5.0,
            cam_jitter_shift: 0.02,
            voxel_size: 0.02,
            widths: vec![16, 32, 64],
            embedding_dim: 64,
            hidden: vec![256, 256],
            time_embed_dim: 16,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T, HarnessError>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| HarnessError::Manifest(format!("key {key}: {e}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>, HarnessError> {
    v.split(',')
        .map(|piece| parse_num::<usize>(key, piece.trim()))
        .collect()
}

fn fmt_list(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunManifest {
    /// Parses `key = value` lines. Blank lines and `#` comments are allowed;
    /// unknown and duplicate keys are not. Missing keys take defaults.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut m = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HarnessError::Manifest(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let v = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(HarnessError::Manifest(format!("duplicate key {key}")));
            }
            match key {
                "encoder" => {
                    m.encoder = v.parse().map_err(HarnessError::Manifest)?;
                }
                "target_points" => m.target_points = parse_num(key, v)?,
                "h_pred" => m.h_pred = parse_num(key, v)?,
                "h_obs" => m.h_obs = parse_num(key, v)?,
                "h_act" => m.h_act = parse_num(key, v)?,
                "schedule" => {
                    m.schedule = v.parse().map_err(|e: String| HarnessError::Manifest(e))?;
                }
                "t_train" => m.t_train = parse_num(key, v)?,
                "t_infer" => m.t_infer = parse_num(key, v)?,
                "demos" => m.demos = parse_num(key, v)?,
                "rounds_per_demo" => m.rounds_per_demo = parse_num(key, v)?,
                "epochs" => m.epochs = parse_num(key, v)?,
                "windows_per_epoch" => m.windows_per_epoch = parse_num(key, v)?,
                "batch_size" => m.batch_size = parse_num(key, v)?,
                "lr" => m.lr = parse_num(key, v)?,
                "weight_decay" => m.weight_decay = parse_num(key, v)?,
                "data_seed" => m.data_seed = parse_num(key, v)?,
                "train_seed" => m.train_seed = parse_num(key, v)?,
                "eval_seed" => m.eval_seed = parse_num(key, v)?,
                "eval_episodes" => m.eval_episodes = parse_num(key, v)?,
                "eval_steps" => m.eval_steps = parse_num(key, v)?,
                "jitter_theta" => m.jitter_theta = parse_num(key, v)?,
                "jitter_sigma" => m.jitter_sigma = parse_num(key, v)?,
                "cam_jitter_deg" => m.cam_jitter_deg = parse_num(key, v)?,
                "cam_jitter_shift" => m.cam_jitter_shift = parse_num(key, v)?,
                "voxel_size" => m.voxel_size = parse_num(key, v)?,
                "widths" => m.widths = parse_list(key, v)?,
                "embedding_dim" => m.embedding_dim = parse_num(key, v)?,
                "hidden" => m.hidden = parse_list(key, v)?,
                "time_embed_dim" => m.time_embed_dim = parse_num(key, v)?,
                other => {
                    return Err(HarnessError::Manifest(format!("unknown key {other:?}")));
                }
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Manifest(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let err = |msg: String| Err(HarnessError::Manifest(msg));
        if self.h_pred == 0 || self.h_obs == 0 {
            return err("h_pred and h_obs must be >= 1".into());
        }
        if self.h_act == 0 || self.h_act > self.h_pred {
            return err(format!("h_act must be in [1, h_pred], got {}", self.h_act));
        }
        if self.t_infer == 0 || !self.t_train.is_multiple_of(self.t_infer) {
            return err(format!(
                "t_infer must divide t_train, got {}/{}",
                self.t_train, self.t_infer
            ));
        }
        if self.batch_size == 0 || self.windows_per_epoch == 0 {
            return err("batch_size and windows_per_epoch must be >= 1".into());
        }
        if self.demos == 0 || self.rounds_per_demo == 0 {
            return err("demos and rounds_per_demo must be >= 1".into());
        }
        if self.widths.is_empty() || self.hidden.is_empty() {
            return err("widths and hidden must be non-empty".into());
        }
        if !(self.lr > 0.0) || !(self.voxel_size > 0.0) {
            return err("lr and voxel_size must be positive".into());
        }
        Ok(())
    }

    /// Sorted-key canonical form; the identity of the run.
    pub fn to_canonical_string(&self) -> String {
        let mut s = String::new();
        let mut kv: Vec<(&str, String)> = vec![
            ("batch_size", self.batch_size.to_string()),
            ("cam_jitter_deg", self.cam_jitter_deg.to_string()),
            ("cam_jitter_shift", self.cam_jitter_shift.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("demos", self.demos.to_string()),
            ("embedding_dim", self.embedding_dim.to_string()),
            ("encoder", self.encoder.to_string()),
            ("epochs", self.epochs.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("eval_seed", self.eval_seed.to_string()),
            ("eval_steps", self.eval_steps.to_string()),
            ("h_act", self.h_act.to_string()),
            ("h_obs", self.h_obs.to_string()),
            ("h_pred", self.h_pred.to_string()),
            ("hidden", fmt_list(&self.hidden)),
            ("jitter_sigma", self.jitter_sigma.to_string()),
            ("jitter_theta", self.jitter_theta.to_string()),
            ("lr", self.lr.to_string()),
            ("rounds_per_demo", self.rounds_per_demo.to_string()),
            ("schedule", self.schedule.to_string()),
            ("t_infer", self.t_infer.to_string()),
            ("t_train", self.t_train.to_string()),
            ("target_points", self.target_points.to_string()),
            ("time_embed_dim", self.time_embed_dim.to_string()),
            ("train_seed", self.train_seed.to_string()),
            ("voxel_size", self.voxel_size.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("widths", fmt_list(&self.widths)),
            ("windows_per_epoch", self.windows_per_epoch.to_string()),
        ];
        kv.sort_by_key(|(k, _)| *k);
        for (k, v) in kv {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn hash_hex(&self) -> String {
        let digest = Sha256::digest(self.to_canonical_string().as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut acc, b| {
            let _ = write!(acc, "{b:02x}");
            acc
        })
    }

    /// Short prefix used in artifact file names.
    pub fn short_hash(&self) -> String {
        self.hash_hex()[..12].to_string()
    }

    /// First 8 hash bytes as a big-endian integer; stamped into checkpoints
    /// so a checkpoint can be matched back to its manifest.
    pub fn tag64(&self) -> u64 {
        let digest = Sha256::digest(self.to_canonical_string().as_bytes());
        u64::from_be_bytes(digest[..8].try_into().expect("sha256 is long enough"))
    }
}
