//! Camera geometry: pinhole unprojection, rigid transforms, and the fixed
//! camera-frame crop that bounds the workspace.
//!
//! Everything downstream of the camera works in the camera frame. There is no
//! extrinsic calibration anywhere in the pipeline; `transform_cloud` exists
//! for tests and tooling that need to contrast the egocentric path with a
//! world-frame one.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("intrinsics invalid: {0}")]
    BadIntrinsics(String),
    #[error("depth image invalid: {0}")]
    BadDepthImage(String),
    #[error("depth dims {dw}x{dh} do not match intrinsics {iw}x{ih}")]
    DimMismatch { dw: usize, dh: usize, iw: usize, ih: usize },
    #[error("stride must be >= 1")]
    ZeroStride,
    #[error("rotation is not orthonormal within 1e-9 (residual {0:.3e})")]
    NotRigid(f64),
    #[error("rotation determinant {0:.6} is not +1")]
    Reflection(f64),
    #[error("crop box min exceeds max on axis {0}")]
    BadCropBox(usize),
    #[error("point cloud invalid: {0}")]
    BadCloud(String),
}

/// Pinhole camera intrinsics. `width`/`height` are the image dims in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, GeomError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(GeomError::BadIntrinsics(format!("fx={} fy={}", self.fx, self.fy)));
        }
        if self.width < 1 || self.height < 1 {
            return Err(GeomError::BadIntrinsics("zero-sized image".into()));
        }
        if !(0.0..=self.width as f64).contains(&self.cx) || !(0.0..=self.height as f64).contains(&self.cy) {
            return Err(GeomError::BadIntrinsics(format!("principal point ({}, {}) outside image", self.cx, self.cy)));
        }
        Ok(())
    }
}

/// Row-major depth image. Depth 0 marks an invalid pixel (dropout or no hit).
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, GeomError> {
        if data.len() != width * height {
            return Err(GeomError::BadDepthImage(format!(
                "data len {} != {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if let Some(d) = data.iter().find(|d| !d.is_finite() || **d < 0.0) {
            return Err(GeomError::BadDepthImage(format!("non-finite or negative depth {d}")));
        }
        Ok(Self { width, height, data })
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Self {
        Self::new(width, height, vec![depth; width * height]).expect("constant depth image")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Point cloud with optional per-point colors. Positions are meters in
/// whatever frame produced them; the egocentric pipeline keeps them in the
/// camera frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub positions: Vec<[f64; 3]>,
    pub colors: Option<Vec<[f64; 3]>>,
}

impl PointCloud {
    pub fn from_positions(positions: Vec<[f64; 3]>) -> Self {
        Self { positions, colors: None }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if let Some(c) = &self.colors {
            if c.len() != self.positions.len() {
                return Err(GeomError::BadCloud(format!(
                    "{} colors for {} points",
                    c.len(),
                    self.positions.len()
                )));
            }
        }
        for p in &self.positions {
            if p.iter().any(|x| !x.is_finite()) {
                return Err(GeomError::BadCloud(format!("non-finite position {p:?}")));
            }
        }
        Ok(())
    }
}

/// Proper rigid transform (rotation + translation). The rotation is checked
/// to be orthonormal with determinant +1 at construction; composition of
/// valid transforms is not re-checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

const RIGID_TOL: f64 = 1e-9;

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeomError> {
        let residual = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !residual.is_finite() || residual > RIGID_TOL {
            return Err(GeomError::NotRigid(residual));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > RIGID_TOL {
            return Err(GeomError::Reflection(det));
        }
        if translation.iter().any(|x| !x.is_finite()) {
            return Err(GeomError::BadCloud("non-finite translation".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::from(t) }
    }

    /// Rotation by `radians` about the +z axis, no translation.
    pub fn rotation_z(radians: f64) -> Self {
        let (s, c) = radians.sin_cos();
        let rotation = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        Self { rotation, translation: Vector3::zeros() }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> [f64; 3] {
        self.translation.into()
    }

    /// `a.compose(&b)` applies `b` first: `(a∘b)(p) = a(b(p))`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        (self.rotation * Vector3::from(p) + self.translation).into()
    }

    /// Rotates a direction vector, ignoring the translation part.
    pub fn rotate_dir(&self, d: [f64; 3]) -> [f64; 3] {
        (self.rotation * Vector3::from(d)).into()
    }
}

/// Axis-aligned crop volume, fixed in the camera frame per config. This is
/// the only workspace bound in the pipeline; there is no segmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl CropBox {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self, GeomError> {
        for axis in 0..3 {
            if !(min[axis] <= max[axis]) {
                return Err(GeomError::BadCropBox(axis));
            }
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|a| self.min[a] <= p[a] && p[a] <= self.max[a])
    }
}

impl Default for CropBox {
    /// 1.2 m cube in front of the camera, starting just past the lens.
    fn default() -> Self {
        Self { min: [-0.6, -0.6, 0.05], max: [0.6, 0.6, 1.25] }
    }
}

/// Back-projects a depth image through the pinhole model.
///
/// Pixel (u, v) with depth d maps to ((u-cx)*d/fx, (v-cy)*d/fy, d) in the
/// camera frame. Pixels with depth 0 are skipped. Output order is row-major
/// scan order, which makes the result reproducible and lets voxel sampling
/// downstream pick stable representatives.
pub fn unproject(depth: &DepthImage, k: &Intrinsics, stride: usize) -> Result<PointCloud, GeomError> {
    if stride == 0 {
        return Err(GeomError::ZeroStride);
    }
    k.validate()?;
    if depth.width != k.width || depth.height != k.height {
        return Err(GeomError::DimMismatch { dw: depth.width, dh: depth.height, iw: k.width, ih: k.height });
    }
    let mut positions = Vec::with_capacity(depth.width * depth.height / (stride * stride));
    for v in (0..depth.height).step_by(stride) {
        for u in (0..depth.width).step_by(stride) {
            let d = depth.at(u, v);
            if d == 0.0 {
                continue;
            }
            positions.push([(u as f64 - k.cx) * d / k.fx, (v as f64 - k.cy) * d / k.fy, d]);
        }
    }
    Ok(PointCloud::from_positions(positions))
}

/// Applies a rigid transform to every point; colors pass through untouched.
pub fn transform_cloud(cloud: &PointCloud, t: &RigidTransform) -> PointCloud {
    PointCloud {
        positions: cloud.positions.iter().map(|p| t.apply(*p)).collect(),
        colors: cloud.colors.clone(),
    }
}

/// Retains points inside the box (boundary inclusive), preserving order and
/// per-point colors.
pub fn crop_box(cloud: &PointCloud, b: &CropBox) -> PointCloud {
    match &cloud.colors {
        None => PointCloud::from_positions(
            cloud.positions.iter().filter(|p| b.contains(p)).copied().collect(),
        ),
        Some(colors) => {
            let mut positions = Vec::new();
            let mut kept_colors = Vec::new();
            for (p, c) in cloud.positions.iter().zip(colors) {
                if b.contains(p) {
                    positions.push(*p);
                    kept_colors.push(*c);
                }
            }
            PointCloud { positions, colors: Some(kept_colors) }
        }
    }
}
