//! Conditional denoising over flattened action chunks.
//!
//! Training uses the standard forward-noising objective: draw a timestep and
//! Gaussian noise, corrupt the normalized chunk, and regress the noise from
//! `(x_t, t, embedding)`. Inference uses a strided deterministic sampler;
//! the full-length ancestral sampler exists as a slow reference
//! implementation that the fast path is tested against.

use crate::tensornet::{Graph, NodeId, ParamId, ParamSet, Tensor, TensornetError};
use rand::Rng;
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("schedule needs at least 2 steps, got {0}")]
    BadTrainSteps(usize),
    #[error("inference steps {t_infer} must evenly divide training steps {t_train}")]
    BadSteps { t_train: usize, t_infer: usize },
    #[error("timestep {t} outside [1, {t_train}]")]
    TimeOutOfRange { t: usize, t_train: usize },
    #[error(transparent)]
    Net(#[from] TensornetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

impl FromStr for ScheduleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "linear" => Ok(Self::Linear),
            other => Err(format!("unknown schedule {other:?} (cosine|linear)")),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Cosine => "cosine",
            Self::Linear => "linear",
        })
    }
}

/// Precomputed noising coefficients. Arrays are indexed by timestep with a
/// sentinel at 0: `alpha_bar(0) == 1` (the clean-data endpoint used by the
/// final sampler step), betas/alphas are defined for t in [1, t_train].
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    t_train: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Shift constant of the cosine schedule.
const COSINE_S: f64 = 0.008;
/// Betas are capped here so alpha_bar stays strictly positive.
const BETA_MAX: f64 = 0.999;

pub fn make_schedule(t_train: usize, kind: ScheduleKind) -> Result<NoiseSchedule, DiffusionError> {
    if t_train < 2 {
        return Err(DiffusionError::BadTrainSteps(t_train));
    }
    let mut betas = vec![0.0; t_train + 1];
    match kind {
        ScheduleKind::Cosine => {
            let f = |t: f64| {
                let x = (t / t_train as f64 + COSINE_S) / (1.0 + COSINE_S);
                (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
            };
            for t in 1..=t_train {
                let ratio = f(t as f64) / f(t as f64 - 1.0);
                betas[t] = (1.0 - ratio).min(BETA_MAX);
            }
        }
        ScheduleKind::Linear => {
            let (b0, b1) = (1e-4, 0.02);
            for t in 1..=t_train {
                betas[t] = b0 + (b1 - b0) * (t - 1) as f64 / (t_train - 1) as f64;
            }
        }
    }
    let mut alphas = vec![1.0; t_train + 1];
    let mut alpha_bars = vec![1.0; t_train + 1];
    for t in 1..=t_train {
        alphas[t] = 1.0 - betas[t];
        alpha_bars[t] = alpha_bars[t - 1] * alphas[t];
    }
    let s = NoiseSchedule { kind, t_train, betas, alphas, alpha_bars };
    s.check_invariants();
    Ok(s)
}

impl NoiseSchedule {
    fn check_invariants(&self) {
        for t in 1..=self.t_train {
            assert!(self.betas[t] > 0.0 && self.betas[t] < 1.0, "beta_{t} out of (0,1)");
            assert!(
                self.alpha_bars[t] > 0.0 && self.alpha_bars[t] < self.alpha_bars[t - 1],
                "alpha_bar must be strictly decreasing and positive at t={t}"
            );
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn t_train(&self) -> usize {
        self.t_train
    }

    pub fn beta(&self, t: usize) -> f64 {
        assert!((1..=self.t_train).contains(&t), "beta({t})");
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        assert!((1..=self.t_train).contains(&t), "alpha({t})");
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_train, "alpha_bar({t})");
        self.alpha_bars[t]
    }
}

/// A horizon of normalized action rows, the unit the denoiser works on.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    horizon: usize,
    dim: usize,
    data: Vec<f64>,
}

impl ActionChunk {
    pub fn new(horizon: usize, dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), horizon * dim, "chunk data length");
        assert!(data.iter().all(|v| v.is_finite()), "chunk must be finite");
        Self { horizon, dim, data }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps, rows noised
/// independently: row i of `x0` uses timestep `t[i]`.
pub fn q_sample(x0: &Tensor, t: &[usize], eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor, DiffusionError> {
    assert_eq!(x0.shape(), eps.shape(), "q_sample noise shape");
    assert_eq!(x0.shape().len(), 2, "q_sample expects [rows, dim]");
    let rows = x0.shape()[0];
    let dim = x0.shape()[1];
    assert_eq!(t.len(), rows, "one timestep per row");
    for &ti in t {
        if ti == 0 || ti > s.t_train() {
            return Err(DiffusionError::TimeOutOfRange { t: ti, t_train: s.t_train() });
        }
    }
    let mut out = vec![0.0; rows * dim];
    for (r, &ti) in t.iter().enumerate() {
        let ab = s.alpha_bar(ti);
        let (c0, c1) = (ab.sqrt(), (1.0 - ab).sqrt());
        for c in 0..dim {
            out[r * dim + c] = c0 * x0.data()[r * dim + c] + c1 * eps.data()[r * dim + c];
        }
    }
    Ok(Tensor::from_vec(x0.shape(), out))
}

/// Anything that maps (noisy chunk, timesteps, conditioning) to predicted
/// noise inside a graph. Test stubs implement this alongside the real MLP.
pub trait DenoiseModel {
    fn predict(&self, g: &mut Graph, params: &ParamSet, x_t: NodeId, t: &[usize], cond: NodeId) -> NodeId;
}

#[derive(Debug, Clone)]
pub struct DenoiserConfig {
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { hidden: vec![256, 256], time_embed_dim: 16 }
    }
}

/// Fixed sinusoidal features of the raw timestep, `[sin(t f_i) .. cos(t f_i)]`
/// with geometrically spaced frequencies. Not learned.
pub fn time_embedding(t: &[usize], dim: usize) -> Tensor {
    assert!(dim >= 2 && dim.is_multiple_of(2), "time embedding dim must be even and >= 2");
    let half = dim / 2;
    let mut out = vec![0.0; t.len() * dim];
    for (r, &ti) in t.iter().enumerate() {
        for i in 0..half {
            let freq = (-(i as f64) / half as f64 * 10_000f64.ln()).exp();
            let angle = ti as f64 * freq;
            out[r * dim + i] = angle.sin();
            out[r * dim + half + i] = angle.cos();
        }
    }
    Tensor::from_vec(&[t.len(), dim], out)
}

/// MLP over `[x_t | time features | embedding]`, hidden layers with the
/// smooth activation, linear output back to the chunk dimension.
pub struct DenoiserMlp {
    x_dim: usize,
    cond_dim: usize,
    time_dim: usize,
    layers: Vec<(ParamId, ParamId)>,
}

impl DenoiserMlp {
    pub fn init<R: Rng>(
        params: &mut ParamSet,
        prefix: &str,
        x_dim: usize,
        cond_dim: usize,
        cfg: &DenoiserConfig,
        rng: &mut R,
    ) -> Self {
        assert!(!cfg.hidden.is_empty(), "denoiser needs at least one hidden layer");
        let mut dims = vec![x_dim + cfg.time_embed_dim + cond_dim];
        dims.extend_from_slice(&cfg.hidden);
        dims.push(x_dim);
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            let scale = 1.0 / (dims[i] as f64).sqrt();
            let w = params.add(&format!("{prefix}.lin{i}.w"), Tensor::randn(&[dims[i], dims[i + 1]], rng).scaled(scale));
            let b = params.add(&format!("{prefix}.lin{i}.b"), Tensor::zeros(&[dims[i + 1]]));
            layers.push((w, b));
        }
        Self { x_dim, cond_dim, time_dim: cfg.time_embed_dim, layers }
    }
}

impl DenoiseModel for DenoiserMlp {
    fn predict(&self, g: &mut Graph, params: &ParamSet, x_t: NodeId, t: &[usize], cond: NodeId) -> NodeId {
        let rows = g.value(x_t).shape()[0];
        assert_eq!(g.value(x_t).shape(), &[rows, self.x_dim], "denoiser x_t shape");
        assert_eq!(g.value(cond).shape(), &[rows, self.cond_dim], "denoiser cond shape");
        assert_eq!(t.len(), rows, "denoiser timestep count");
        let temb = g.input(time_embedding(t, self.time_dim));
        let mut h = g.concat_cols(&[x_t, temb, cond]);
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wn = g.param(params, w);
            let bn = g.param(params, b);
            h = g.linear(h, wn, bn);
            if i + 1 < self.layers.len() {
                h = g.mish(h);
            }
        }
        h
    }
}

/// Noise-regression loss with explicit timesteps and noise, the seam the
/// stochastic wrapper and the tests share.
#[allow(clippy::too_many_arguments)]
pub fn training_loss_with<M: DenoiseModel>(
    g: &mut Graph,
    params: &ParamSet,
    model: &M,
    s: &NoiseSchedule,
    x0: &Tensor,
    t: &[usize],
    eps: &Tensor,
    cond: NodeId,
) -> Result<NodeId, DiffusionError> {
    let x_t = q_sample(x0, t, eps, s)?;
    let x_t = g.input(x_t);
    let eps_hat = model.predict(g, params, x_t, t, cond);
    let eps_node = g.input(eps.clone());
    Ok(g.mse_loss(eps_hat, eps_node))
}

/// Draws per-row timesteps uniform on [1, T] and unit Gaussian noise, in
/// that order, then defers to [`training_loss_with`].
pub fn training_loss<M: DenoiseModel, R: Rng>(
    g: &mut Graph,
    params: &ParamSet,
    model: &M,
    s: &NoiseSchedule,
    x0: &Tensor,
    cond: NodeId,
    rng: &mut R,
) -> Result<NodeId, DiffusionError> {
    let rows = x0.shape()[0];
    let t: Vec<usize> = (0..rows).map(|_| rng.random_range(1..=s.t_train())).collect();
    let eps = Tensor::randn(x0.shape(), rng);
    training_loss_with(g, params, model, s, x0, &t, &eps, cond)
}

/// One forward prediction on a throwaway graph; fails if any op went
/// non-finite.
fn predict_data<M: DenoiseModel>(
    model: &M,
    params: &ParamSet,
    x: &Tensor,
    t: usize,
    cond: &Tensor,
) -> Result<Tensor, DiffusionError> {
    let mut g = Graph::new();
    let xn = g.input(x.clone());
    let cn = g.input(cond.clone());
    let t_rows = vec![t; x.shape()[0]];
    let eps_hat = model.predict(&mut g, params, xn, &t_rows, cn);
    if let Some(p) = g.poisoned() {
        return Err(TensornetError::NonFinite(p.to_string()).into());
    }
    Ok(g.value(eps_hat).clone())
}

/// Full-length ancestral sampling, the reference sampler. Draw order is part
/// of the contract so tests can replay it: first the start noise `[rows,
/// x_dim]`, then one noise tensor after each denoiser call for t > 1.
/// `temperature` scales every draw; 0 makes the path deterministic.
pub fn ddpm_sample<M: DenoiseModel, R: Rng>(
    model: &M,
    params: &ParamSet,
    s: &NoiseSchedule,
    cond: &Tensor,
    x_dim: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Tensor, DiffusionError> {
    let rows = cond.shape()[0];
    let mut x = Tensor::randn(&[rows, x_dim], rng).scaled(temperature);
    for t in (1..=s.t_train()).rev() {
        let eps_hat = predict_data(model, params, &x, t, cond)?;
        let (ab, ab_prev) = (s.alpha_bar(t), s.alpha_bar(t - 1));
        let beta = s.beta(t);
        let c_eps = beta / (1.0 - ab).sqrt();
        let c_mean = 1.0 / s.alpha(t).sqrt();
        let mut next = vec![0.0; rows * x_dim];
        for i in 0..rows * x_dim {
            next[i] = c_mean * (x.data()[i] - c_eps * eps_hat.data()[i]);
        }
        if t > 1 {
            let sigma = ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt();
            let z = Tensor::randn(&[rows, x_dim], rng);
            for i in 0..rows * x_dim {
                next[i] += sigma * temperature * z.data()[i];
            }
        }
        x = Tensor::from_vec(&[rows, x_dim], next);
    }
    Ok(x)
}

/// Deterministic strided sampler. Timesteps descend from T in equal strides
/// and finish at 0 (where alpha_bar is 1, so the last update returns the
/// x0 estimate directly). `t_infer` must divide the training length.
/// The result is a pure function of (x_init, cond, params).
///
/// `x0_clip` bounds the per-step x0 estimate elementwise. At the high end of
/// the schedule alpha_bar is ~1e-6, so the estimate divides by ~1e-3 and any
/// prediction error lands on the output a thousandfold; when the data support
/// is known (normalized chunks live in [-1, 1]) the bound keeps one bad early
/// stride from blowing up the whole trajectory. `None` is the raw update rule.
pub fn ddim_sample<M: DenoiseModel>(
    model: &M,
    params: &ParamSet,
    s: &NoiseSchedule,
    cond: &Tensor,
    t_infer: usize,
    x_init: &Tensor,
    x0_clip: Option<(f64, f64)>,
) -> Result<Tensor, DiffusionError> {
    if t_infer == 0 || t_infer > s.t_train() || !s.t_train().is_multiple_of(t_infer) {
        return Err(DiffusionError::BadSteps { t_train: s.t_train(), t_infer });
    }
    if let Some((lo, hi)) = x0_clip {
        assert!(lo < hi, "empty x0 clip interval");
    }
    let rows = cond.shape()[0];
    assert_eq!(x_init.shape()[0], rows, "one start row per conditioning row");
    let x_dim = x_init.shape()[1];
    let stride = s.t_train() / t_infer;
    let mut taus: Vec<usize> = (0..t_infer).map(|k| s.t_train() - k * stride).collect();
    taus.push(0);
    let mut x = x_init.clone();
    for w in taus.windows(2) {
        let (t_cur, t_next) = (w[0], w[1]);
        let eps_hat = predict_data(model, params, &x, t_cur, cond)?;
        let ab = s.alpha_bar(t_cur);
        let ab_next = s.alpha_bar(t_next);
        let mut next = vec![0.0; rows * x_dim];
        for i in 0..rows * x_dim {
            let mut x0_pred = (x.data()[i] - (1.0 - ab).sqrt() * eps_hat.data()[i]) / ab.sqrt();
            if let Some((lo, hi)) = x0_clip {
                x0_pred = x0_pred.clamp(lo, hi);
            }
            next[i] = ab_next.sqrt() * x0_pred + (1.0 - ab_next).sqrt() * eps_hat.data()[i];
        }
        x = Tensor::from_vec(&[rows, x_dim], next);
    }
    Ok(x)
}

/// Per-dimension min-max map to [-1,1]. Dimensions with max == min carry no
/// information and map to 0.
pub fn normalize_actions(raw: &[f64], min: &[f64], max: &[f64]) -> Vec<f64> {
    assert_eq!(min.len(), max.len());
    let dim = min.len();
    assert_eq!(raw.len() % dim, 0, "flat action data must be whole rows");
    raw.iter()
        .enumerate()
        .map(|(i, &v)| {
            let d = i % dim;
            let span = max[d] - min[d];
            if span.abs() < 1e-12 {
                0.0
            } else {
                2.0 * (v - min[d]) / span - 1.0
            }
        })
        .collect()
}

/// Inverse of [`normalize_actions`]; degenerate dimensions restore the
/// stored minimum.
pub fn denormalize_actions(norm: &[f64], min: &[f64], max: &[f64]) -> Vec<f64> {
    assert_eq!(min.len(), max.len());
    let dim = min.len();
    assert_eq!(norm.len() % dim, 0, "flat action data must be whole rows");
    norm.iter()
        .enumerate()
        .map(|(i, &v)| {
            let d = i % dim;
            let span = max[d] - min[d];
            if span.abs() < 1e-12 {
                min[d]
            } else {
                (v + 1.0) / 2.0 * span + min[d]
            }
        })
        .collect()
}
