//! Observation encoders: four point-cloud variants and a depth-image
//! baseline, all mapping to a fixed-width conditioning vector.
//!
//! The point variants share one skeleton: a stack of pointwise stages over
//! `[B,3,N]`, max-pooled to per-channel features. Linear variants are bare
//! pointwise layers; conv variants add per-point layer normalization.
//! Pyramid variants pool after every stage and concatenate the pooled
//! vectors instead of keeping only the deepest one. Proprioception is always
//! concatenated after pooling, ahead of the final projection, so the
//! embedding layout is `[stage pools.. | proprio] -> linear`.

use crate::geom::PointCloud;
use crate::tensornet::{Graph, NodeId, ParamId, ParamSet, Tensor, TensornetError};
use rand::Rng;
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("expected {want} points, got {got}")]
    PointCountMismatch { got: usize, want: usize },
    #[error("expected a {want}x{want} depth grid, got {got_w}x{got_h}")]
    WrongGridSize { got_w: usize, got_h: usize, want: usize },
    #[error(transparent)]
    Net(#[from] TensornetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderVariant {
    LinearDp3,
    Conv,
    LinearPyramid,
    ConvPyramidIdp3,
    ImageBaseline,
}

impl EncoderVariant {
    pub fn is_pyramid(self) -> bool {
        matches!(self, Self::LinearPyramid | Self::ConvPyramidIdp3)
    }

    pub fn has_norm(self) -> bool {
        matches!(self, Self::Conv | Self::ConvPyramidIdp3)
    }
}

impl FromStr for EncoderVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear_dp3" => Ok(Self::LinearDp3),
            "conv" => Ok(Self::Conv),
            "linear_pyramid" => Ok(Self::LinearPyramid),
            "conv_pyramid_idp3" => Ok(Self::ConvPyramidIdp3),
            "image_baseline" => Ok(Self::ImageBaseline),
            other => Err(format!(
                "unknown encoder {other:?} (linear_dp3|conv|linear_pyramid|conv_pyramid_idp3|image_baseline)"
            )),
        }
    }
}

impl std::fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::LinearDp3 => "linear_dp3",
            Self::Conv => "conv",
            Self::LinearPyramid => "linear_pyramid",
            Self::ConvPyramidIdp3 => "conv_pyramid_idp3",
            Self::ImageBaseline => "image_baseline",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Mish,
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Self::Relu),
            "mish" => Ok(Self::Mish),
            other => Err(format!("unknown activation {other:?} (relu|mish)")),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Relu => "relu",
            Self::Mish => "mish",
        })
    }
}

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    /// Channel width per stage; also the image baseline's conv channels.
    pub widths: Vec<usize>,
    pub embedding_dim: usize,
    pub activation: Activation,
    /// Expected cloud size after sampling; checked at the observation seam.
    pub n_points: usize,
    /// Depth grid side length for the image baseline; each conv stage halves
    /// it, so it must be divisible by 2^stages.
    pub image_size: usize,
    pub proprio_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            variant: EncoderVariant::ConvPyramidIdp3,
            widths: vec![64, 128, 256],
            embedding_dim: 128,
            activation: Activation::Relu,
            n_points: 1024,
            image_size: 64,
            proprio_dim: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) {
        assert!(!self.widths.is_empty(), "encoder needs at least one stage");
        assert!(self.embedding_dim > 0, "embedding_dim must be positive");
        if self.variant == EncoderVariant::ImageBaseline {
            assert!(
                self.image_size.is_multiple_of(1 << self.widths.len()),
                "grid {} not divisible by 2^{}",
                self.image_size,
                self.widths.len()
            );
        }
    }

    /// Width of the pooled feature vector entering the projection,
    /// before proprioception is appended.
    fn pooled_width(&self) -> usize {
        if self.variant.is_pyramid() {
            self.widths.iter().sum()
        } else {
            *self.widths.last().unwrap()
        }
    }
}

/// The conditioning vector handed to the diffusion head.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsEmbedding {
    pub vector: Vec<f64>,
    pub variant: EncoderVariant,
}

impl ObsEmbedding {
    pub fn new(vector: Vec<f64>, variant: EncoderVariant) -> Self {
        assert!(vector.iter().all(|v| v.is_finite()), "embedding must be finite");
        Self { vector, variant }
    }
}

#[derive(Debug, Clone)]
struct PointStage {
    w: ParamId,
    b: ParamId,
    norm: Option<(ParamId, ParamId)>,
}

/// Shared-weight point stack. Works on `[B,3,N]` position tensors; N is not
/// baked into the parameters, so the same encoder accepts any cloud size.
#[derive(Debug, Clone)]
pub struct PointEncoder {
    cfg: EncoderConfig,
    stages: Vec<PointStage>,
    proj_w: ParamId,
    proj_b: ParamId,
}

impl PointEncoder {
    pub fn init<R: Rng>(params: &mut ParamSet, prefix: &str, cfg: &EncoderConfig, rng: &mut R) -> Self {
        assert_ne!(cfg.variant, EncoderVariant::ImageBaseline, "use ImageEncoder for the image baseline");
        cfg.validate();
        let mut stages = Vec::new();
        let mut c_in = 3;
        for (i, &c_out) in cfg.widths.iter().enumerate() {
            let scale = 1.0 / (c_in as f64).sqrt();
            let w = params.add(&format!("{prefix}.stage{i}.w"), Tensor::randn(&[c_out, c_in], rng).scaled(scale));
            let b = params.add(&format!("{prefix}.stage{i}.b"), Tensor::zeros(&[c_out]));
            let norm = cfg.variant.has_norm().then(|| {
                let gamma = params.add(&format!("{prefix}.stage{i}.ln.g"), Tensor::filled(&[c_out], 1.0));
                let beta = params.add(&format!("{prefix}.stage{i}.ln.b"), Tensor::zeros(&[c_out]));
                (gamma, beta)
            });
            stages.push(PointStage { w, b, norm });
            c_in = c_out;
        }
        let proj_in = cfg.pooled_width() + cfg.proprio_dim;
        let scale = 1.0 / (proj_in as f64).sqrt();
        let proj_w = params.add(&format!("{prefix}.proj.w"), Tensor::randn(&[proj_in, cfg.embedding_dim], rng).scaled(scale));
        let proj_b = params.add(&format!("{prefix}.proj.b"), Tensor::zeros(&[cfg.embedding_dim]));
        Self { cfg: cfg.clone(), stages, proj_w, proj_b }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Embedding node `[B, embedding_dim]` from cloud `[B,3,N]` and proprio
    /// `[B,P]`.
    pub fn forward(&self, g: &mut Graph, params: &ParamSet, cloud: NodeId, proprio: NodeId) -> NodeId {
        self.forward_with_pools(g, params, cloud, proprio).0
    }

    /// Like [`forward`](Self::forward) but also returns the pooled node of
    /// every contributing stage, in concatenation order. Tests inspect these
    /// to reason about which points carried the embedding.
    pub fn forward_with_pools(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        cloud: NodeId,
        proprio: NodeId,
    ) -> (NodeId, Vec<NodeId>) {
        assert_eq!(g.value(cloud).shape()[1], 3, "cloud tensor must be [B,3,N]");
        let mut h = cloud;
        let mut pools = Vec::new();
        let last = self.stages.len() - 1;
        for (i, stage) in self.stages.iter().enumerate() {
            let w = g.param(params, stage.w);
            let b = g.param(params, stage.b);
            h = g.pointwise_conv(h, w, b);
            if let Some((gamma, beta)) = stage.norm {
                let gn = g.param(params, gamma);
                let bn = g.param(params, beta);
                h = g.layer_norm_channels(h, gn, bn);
            }
            h = match self.cfg.activation {
                Activation::Relu => g.relu(h),
                Activation::Mish => g.mish(h),
            };
            if self.cfg.variant.is_pyramid() || i == last {
                pools.push(g.max_pool_points(h));
            }
        }
        let mut parts = pools.clone();
        parts.push(proprio);
        let cat = g.concat_cols(&parts);
        let w = g.param(params, self.proj_w);
        let b = g.param(params, self.proj_b);
        (g.linear(cat, w, b), pools)
    }
}

/// Strided depth-grid conv stack for the image baseline. Every stage halves
/// the grid; the surviving map is flattened and projected.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    cfg: EncoderConfig,
    convs: Vec<(ParamId, ParamId)>,
    proj_w: ParamId,
    proj_b: ParamId,
}

impl ImageEncoder {
    pub fn init<R: Rng>(params: &mut ParamSet, prefix: &str, cfg: &EncoderConfig, rng: &mut R) -> Self {
        assert_eq!(cfg.variant, EncoderVariant::ImageBaseline, "ImageEncoder is only for the image baseline");
        cfg.validate();
        let mut convs = Vec::new();
        let mut c_in = 1;
        for (i, &c_out) in cfg.widths.iter().enumerate() {
            let scale = 1.0 / (c_in as f64 * 9.0).sqrt();
            let w = params.add(&format!("{prefix}.conv{i}.w"), Tensor::randn(&[c_out, c_in, 3, 3], rng).scaled(scale));
            let b = params.add(&format!("{prefix}.conv{i}.b"), Tensor::zeros(&[c_out]));
            convs.push((w, b));
            c_in = c_out;
        }
        let side = cfg.image_size >> cfg.widths.len();
        let proj_in = c_in * side * side + cfg.proprio_dim;
        let scale = 1.0 / (proj_in as f64).sqrt();
        let proj_w = params.add(&format!("{prefix}.proj.w"), Tensor::randn(&[proj_in, cfg.embedding_dim], rng).scaled(scale));
        let proj_b = params.add(&format!("{prefix}.proj.b"), Tensor::zeros(&[cfg.embedding_dim]));
        Self { cfg: cfg.clone(), convs, proj_w, proj_b }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Embedding node `[B, embedding_dim]` from grids `[B,1,G,G]` and
    /// proprio `[B,P]`.
    pub fn forward(&self, g: &mut Graph, params: &ParamSet, image: NodeId, proprio: NodeId) -> NodeId {
        let shape = g.value(image).shape().to_vec();
        assert_eq!(&shape[1..], &[1, self.cfg.image_size, self.cfg.image_size], "image tensor must be [B,1,G,G]");
        let rows = shape[0];
        let mut h = image;
        for &(w, b) in &self.convs {
            let wn = g.param(params, w);
            let bn = g.param(params, b);
            h = g.conv2d(h, wn, bn, 2, 1);
            h = match self.cfg.activation {
                Activation::Relu => g.relu(h),
                Activation::Mish => g.mish(h),
            };
        }
        let flat_len = g.value(h).numel() / rows;
        let flat = g.reshape(h, &[rows, flat_len]);
        let cat = g.concat_cols(&[flat, proprio]);
        let w = g.param(params, self.proj_w);
        let b = g.param(params, self.proj_b);
        g.linear(cat, w, b)
    }
}

/// Positions of a cloud as a `[1,3,N]` tensor, the encoder input layout.
/// Colors are ignored: the embedding is geometry-only by default.
pub fn cloud_to_tensor(pc: &PointCloud) -> Tensor {
    let n = pc.len();
    let mut data = vec![0.0; 3 * n];
    for (i, p) in pc.positions.iter().enumerate() {
        data[i] = p[0];
        data[n + i] = p[1];
        data[2 * n + i] = p[2];
    }
    Tensor::from_vec(&[1, 3, n], data)
}

/// Single-observation inference path: checks the point budget, runs one
/// forward pass on a throwaway graph, and extracts the embedding.
pub fn encode_points(
    pc: &PointCloud,
    proprio: &[f64],
    encoder: &PointEncoder,
    params: &ParamSet,
) -> Result<ObsEmbedding, EncoderError> {
    let want = encoder.cfg.n_points;
    if pc.len() != want {
        return Err(EncoderError::PointCountMismatch { got: pc.len(), want });
    }
    assert_eq!(proprio.len(), encoder.cfg.proprio_dim, "proprio width");
    let mut g = Graph::new();
    let cloud = g.input(cloud_to_tensor(pc));
    let prop = g.input(Tensor::from_vec(&[1, proprio.len()], proprio.to_vec()));
    let emb = encoder.forward(&mut g, params, cloud, prop);
    if let Some(p) = g.poisoned() {
        return Err(TensornetError::NonFinite(p.to_string()).into());
    }
    Ok(ObsEmbedding::new(g.value(emb).data().to_vec(), encoder.cfg.variant))
}

/// Image-baseline counterpart of [`encode_points`].
pub fn encode_image(
    grid: &Tensor,
    proprio: &[f64],
    encoder: &ImageEncoder,
    params: &ParamSet,
) -> Result<ObsEmbedding, EncoderError> {
    let want = encoder.cfg.image_size;
    let s = grid.shape();
    if s != [1, 1, want, want] {
        return Err(EncoderError::WrongGridSize {
            got_w: s.last().copied().unwrap_or(0),
            got_h: s.get(s.len().wrapping_sub(2)).copied().unwrap_or(0),
            want,
        });
    }
    assert_eq!(proprio.len(), encoder.cfg.proprio_dim, "proprio width");
    let mut g = Graph::new();
    let img = g.input(grid.clone());
    let prop = g.input(Tensor::from_vec(&[1, proprio.len()], proprio.to_vec()));
    let emb = encoder.forward(&mut g, params, img, prop);
    if let Some(p) = g.poisoned() {
        return Err(TensornetError::NonFinite(p.to_string()).into());
    }
    Ok(ObsEmbedding::new(g.value(emb).data().to_vec(), encoder.cfg.variant))
}
