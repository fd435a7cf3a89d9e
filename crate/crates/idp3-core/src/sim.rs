//! Synthetic desk-top pick-and-place world with an analytic depth camera.
//!
//! Everything is kinematic: the effector is a velocity-clamped point, a
//! successful grasp rigidly attaches the object to it, and the camera
//! ray-casts planes and boxes instead of rasterizing meshes. Episodes are
//! bit-reproducible from a seed, which the training and evaluation code
//! leans on heavily.
//!
//! Frames: the scene frame is z-up with the table surface at
//! [`SceneConfig::table_height`]. `camera_pose` maps camera coordinates
//! (x right, y down, z forward) into the scene frame. Observations stay in
//! the camera frame on purpose: the policy consumes what the sensor saw, so
//! nothing downstream depends on where the desk sits in the world.
//! [`SceneConfig::world_from_scene`] records that placement for consumers
//! that want to draw the scene somewhere; no simulation, rendering, or
//! scoring code reads it.

use crate::geom::{
    crop_box, unproject, CropBox, DepthImage, GeomError, Intrinsics, PointCloud, RigidTransform,
};
use crate::sampling::{cascade_sample, SamplingConfig, SamplingError};
use crate::tensornet::Tensor;
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Grip values at or above this count as closed.
pub const GRIP_THRESHOLD: f64 = 0.5;

const RESET_SALT: u64 = 0x5245_5345u64;
const RESPAWN_SALT: u64 = 0x5253_5057u64;
const NOISE_SALT: u64 = 0x4e4f_4953u64;
const SAMPLE_SALT: u64 = 0x534d_504cu64;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scene config invalid: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

/// splitmix64-style finalizer used to derive independent seeds from one
/// root seed and a stream index. Cheap, stateless, and good enough to keep
/// per-step noise streams uncorrelated.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Static clutter box sitting on the table. Purely visual: it occludes and
/// adds points to the cloud but never collides with anything.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    pub center: [f64; 2],
    pub size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Where the scene sits in some outer world. Carried for consumers only;
    /// the simulation itself is defined entirely in the scene frame.
    pub world_from_scene: RigidTransform,
    /// Table surface height (scene z).
    pub table_height: f64,
    /// Center of the object spawn region on the table, scene xy.
    pub region_center: [f64; 2],
    /// Extent of the spawn region. Zero extent pins spawns to the center.
    pub region_size: [f64; 2],
    /// Cube edge length of the manipulated object.
    pub object_size: f64,
    /// Drop-off target on the table, scene xy.
    pub place_target: [f64; 2],
    /// An object released with its center within this xy radius of
    /// `place_target` scores a place.
    pub place_radius: f64,
    /// Effector start position.
    pub home: [f64; 3],
    /// Camera-to-scene pose (camera: x right, y down, z forward).
    pub camera_pose: RigidTransform,
    /// Point the camera is aimed at; pivot for view perturbations.
    pub lookat: [f64; 3],
    pub intrinsics: Intrinsics,
    /// Background plane at scene y = `wall_y`, so no ray escapes to infinity.
    pub wall_y: f64,
    /// Cube edge of the rendered effector marker. The policy only ever sees
    /// the scene through depth, so the hand must be visible in it.
    pub effector_size: f64,
    pub n_distractors: usize,
    /// [min, max] edge length for distractor cubes.
    pub distractor_size: [f64; 2],
    /// Max effector displacement per step, meters.
    pub max_speed: f64,
    /// Closing within this distance of the object center captures it.
    pub grasp_radius: f64,
    /// Object center height above the table that counts as lifted.
    pub lift_height: f64,
    /// Consecutive lifted steps required to score a grasp.
    pub lift_hold_steps: u32,
    /// Gaussian noise sigma on valid depths, meters.
    pub depth_sigma: f64,
    /// Per-pixel probability of depth dropout (pixel becomes invalid).
    pub dropout_p: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let lookat = [0.0, 0.50, 0.40];
        Self {
            world_from_scene: RigidTransform::identity(),
            table_height: 0.40,
            region_center: [0.0, 0.50],
            region_size: [0.10, 0.20],
            object_size: 0.045,
            place_target: [0.28, 0.50],
            place_radius: 0.06,
            home: [0.0, 0.35, 0.60],
            camera_pose: look_at_camera([0.0, 0.05, 0.85], lookat),
            lookat,
            intrinsics: Intrinsics::new(60.0, 60.0, 32.0, 32.0, 64, 64)
                .expect("default intrinsics are valid"),
            wall_y: 1.6,
            effector_size: 0.03,
            n_distractors: 0,
            distractor_size: [0.03, 0.06],
            max_speed: 0.05,
            grasp_radius: 0.03,
            lift_height: 0.10,
            lift_hold_steps: 5,
            depth_sigma: 0.005,
            dropout_p: 0.02,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.intrinsics.validate().map_err(|e| SimError::BadConfig(e.to_string()))?;
        let positive = [
            (self.object_size, "object_size"),
            (self.effector_size, "effector_size"),
            (self.max_speed, "max_speed"),
            (self.grasp_radius, "grasp_radius"),
            (self.lift_height, "lift_height"),
            (self.place_radius, "place_radius"),
        ];
        for (v, name) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(SimError::BadConfig(format!("{name} must be positive, got {v}")));
            }
        }
        for (i, v) in self.region_size.iter().enumerate() {
            if !v.is_finite() || *v < 0.0 {
                return Err(SimError::BadConfig(format!("region_size[{i}] must be >= 0, got {v}")));
            }
        }
        if !self.table_height.is_finite() || !self.wall_y.is_finite() {
            return Err(SimError::BadConfig("table_height and wall_y must be finite".into()));
        }
        if !(self.depth_sigma >= 0.0) {
            return Err(SimError::BadConfig(format!("depth_sigma must be >= 0, got {}", self.depth_sigma)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(SimError::BadConfig(format!("dropout_p must be in [0, 1), got {}", self.dropout_p)));
        }
        if self.lift_hold_steps == 0 {
            return Err(SimError::BadConfig("lift_hold_steps must be >= 1".into()));
        }
        if !(self.distractor_size[0] > 0.0) || self.distractor_size[1] < self.distractor_size[0] {
            return Err(SimError::BadConfig(format!(
                "distractor_size range [{}, {}] invalid",
                self.distractor_size[0], self.distractor_size[1]
            )));
        }
        Ok(())
    }
}

/// Camera pose looking from `pos` toward `target`, scene +z as "up".
/// Columns of the rotation are the camera axes (right, down, forward)
/// expressed in the scene frame.
pub fn look_at_camera(pos: [f64; 3], target: [f64; 3]) -> RigidTransform {
    let f = normalize(sub(target, pos));
    // right = forward x up yields a right-handed (right, down, forward) triple.
    let r = normalize(cross(f, [0.0, 0.0, 1.0]));
    let d = cross(f, r);
    let rotation = Matrix3::from_columns(&[Vector3::from(r), Vector3::from(d), Vector3::from(f)]);
    RigidTransform::from_parts(rotation, Vector3::from(pos))
        .expect("look-at construction yields a rotation")
}

/// Orbits the camera about the vertical axis through `lookat` by `yaw_deg`,
/// then shifts it by `shift` (scene frame). Zero perturbation returns the
/// config unchanged, without any numeric round trip.
pub fn perturb_view(cfg: &SceneConfig, yaw_deg: f64, shift: [f64; 3]) -> SceneConfig {
    if yaw_deg == 0.0 && shift == [0.0; 3] {
        return cfg.clone();
    }
    let rot = RigidTransform::rotation_z(yaw_deg.to_radians());
    let pos = cfg.camera_pose.translation();
    let rel = sub(pos, cfg.lookat);
    let orbited = rot.rotate_dir(rel);
    let new_pos = [
        cfg.lookat[0] + orbited[0] + shift[0],
        cfg.lookat[1] + orbited[1] + shift[1],
        cfg.lookat[2] + orbited[2] + shift[2],
    ];
    let new_rot = rot.rotation() * cfg.camera_pose.rotation();
    let mut out = cfg.clone();
    out.camera_pose = RigidTransform::from_parts(new_rot, Vector3::from(new_pos))
        .expect("orbit keeps the rotation orthonormal");
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub effector: [f64; 3],
    /// Grip command in [0, 1]; >= [`GRIP_THRESHOLD`] means closed.
    pub grip: f64,
    /// Object center. While held this is exactly `effector + held_offset`.
    pub object: [f64; 3],
    pub held: bool,
    pub held_offset: [f64; 3],
    pub step_index: u64,
    /// Consecutive held steps with the object at lift height.
    pub lift_streak: u32,
    /// Whether the current grasp already scored, so it scores once.
    pub grasp_scored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    /// Effector position setpoint; motion toward it is clamped to
    /// `max_speed` per step.
    pub target: [f64; 3],
    /// Grip command, clamped to [0, 1].
    pub grip: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepEvents {
    /// Grip crossed upward through the threshold this step.
    pub attempt: bool,
    /// Held object stayed at lift height long enough, scored once per grasp.
    pub success_grasp: bool,
    /// Object released with its center inside the place zone.
    pub success_place: bool,
}

impl StepEvents {
    pub fn any(&self) -> bool {
        self.attempt || self.success_grasp || self.success_place
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.attempt {
            out.push("attempt".to_string());
        }
        if self.success_grasp {
            out.push("success_grasp".to_string());
        }
        if self.success_place {
            out.push("success_place".to_string());
        }
        out
    }
}

/// One line of an episode event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub action: Action,
    pub events: Vec<String>,
    pub effector: [f64; 3],
    pub object: [f64; 3],
}

/// What the policy gets per step: an egocentric cloud at the fixed point
/// budget, proprioception, and optionally the raw depth grid for image
/// baselines. Cloud points are camera-frame; proprio is scene-frame
/// effector position plus grip.
#[derive(Debug, Clone)]
pub struct Observation {
    pub cloud: PointCloud,
    pub proprio: Vec<f64>,
    pub image: Option<Tensor>,
}

/// Depth-to-policy-input settings. Crop bounds are camera-frame meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsPipeline {
    pub stride: usize,
    pub crop: CropBox,
    pub sampling: SamplingConfig,
    pub include_image: bool,
    pub with_noise: bool,
}

impl Default for ObsPipeline {
    fn default() -> Self {
        Self {
            stride: 1,
            crop: CropBox::default(),
            sampling: SamplingConfig::default(),
            include_image: false,
            with_noise: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Env {
    cfg: SceneConfig,
    state: EnvState,
    distractors: Vec<Distractor>,
    episode_seed: u64,
    respawn_count: u64,
}

impl Env {
    /// Fresh episode: effector at home, object drawn uniformly in the spawn
    /// region, distractors placed clear of the object and the place zone.
    /// The same (config, seed) pair always yields the same episode.
    pub fn reset(cfg: SceneConfig, seed: u64) -> Result<Self, SimError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, RESET_SALT));
        let xy = draw_in_region(&cfg, &mut rng);
        let object = [xy[0], xy[1], cfg.table_height + cfg.object_size / 2.0];
        let mut distractors = Vec::with_capacity(cfg.n_distractors);
        for _ in 0..cfg.n_distractors {
            distractors.push(draw_distractor(&cfg, &object, &distractors, &mut rng));
        }
        let state = EnvState {
            effector: cfg.home,
            grip: 0.0,
            object,
            held: false,
            held_offset: [0.0; 3],
            step_index: 0,
            lift_streak: 0,
            grasp_scored: false,
        };
        Ok(Self { cfg, state, distractors, episode_seed: seed, respawn_count: 0 })
    }

    pub fn cfg(&self) -> &SceneConfig {
        &self.cfg
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn distractors(&self) -> &[Distractor] {
        &self.distractors
    }

    pub fn episode_seed(&self) -> u64 {
        self.episode_seed
    }

    /// Advances one step. Order per step: move (speed-clamped), evaluate the
    /// grip edge (closing may capture, opening drops and may score a place),
    /// carry the held object, then update lift scoring. A placed object
    /// respawns in the spawn region from a seeded draw so the episode can
    /// continue with another round.
    pub fn step(&mut self, action: &Action) -> StepEvents {
        let cfg = &self.cfg;
        let s = &mut self.state;
        let target = if action.target.iter().all(|c| c.is_finite()) { action.target } else { s.effector };
        let delta = sub(target, s.effector);
        let n = norm(delta);
        s.effector = if n > cfg.max_speed {
            add(s.effector, scale3(delta, cfg.max_speed / n))
        } else {
            target
        };

        let grip_prev = s.grip;
        let grip = if action.grip.is_finite() { action.grip.clamp(0.0, 1.0) } else { grip_prev };
        let mut ev = StepEvents::default();

        if grip_prev < GRIP_THRESHOLD && grip >= GRIP_THRESHOLD {
            ev.attempt = true;
            if !s.held && norm(sub(s.object, s.effector)) <= cfg.grasp_radius {
                s.held = true;
                s.held_offset = sub(s.object, s.effector);
                s.lift_streak = 0;
                s.grasp_scored = false;
            }
        }

        if s.held {
            s.object = add(s.effector, s.held_offset);
        }

        if grip_prev >= GRIP_THRESHOLD && grip < GRIP_THRESHOLD && s.held {
            s.held = false;
            s.lift_streak = 0;
            s.held_offset = [0.0; 3];
            s.object[2] = cfg.table_height + cfg.object_size / 2.0;
            let dx = s.object[0] - cfg.place_target[0];
            let dy = s.object[1] - cfg.place_target[1];
            if (dx * dx + dy * dy).sqrt() <= cfg.place_radius {
                ev.success_place = true;
                self.respawn_count += 1;
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                    mix_seed(self.episode_seed, RESPAWN_SALT),
                    self.respawn_count,
                ));
                let xy = draw_in_region(cfg, &mut rng);
                s.object = [xy[0], xy[1], cfg.table_height + cfg.object_size / 2.0];
                s.grasp_scored = false;
            }
        }

        if s.held {
            if s.object[2] - cfg.table_height >= cfg.lift_height {
                s.lift_streak += 1;
            } else {
                s.lift_streak = 0;
            }
            if !s.grasp_scored && s.lift_streak >= cfg.lift_hold_steps {
                ev.success_grasp = true;
                s.grasp_scored = true;
            }
        }

        s.grip = grip;
        s.step_index += 1;
        ev
    }

    /// Depth render of the current state. Sensor noise is keyed by
    /// (episode seed, step index), so re-rendering the same step is
    /// bit-identical and distinct steps get independent streams.
    pub fn render(&self, with_noise: bool) -> DepthImage {
        let seed = with_noise
            .then(|| mix_seed(mix_seed(self.episode_seed, NOISE_SALT), self.state.step_index));
        render_depth(&self.cfg, &self.state, &self.distractors, seed)
    }

    /// Full observation: render, back-project, crop, sample down to the
    /// fixed budget. The cloud sampler seed is also (episode, step)-keyed.
    /// A frame whose crop comes up empty (pathological dropout) degrades to
    /// an all-zeros cloud instead of failing the episode.
    pub fn observe(&self, pipe: &ObsPipeline) -> Result<Observation, SimError> {
        let depth = self.render(pipe.with_noise);
        let raw = unproject(&depth, &self.cfg.intrinsics, pipe.stride)?;
        let cropped = crop_box(&raw, &pipe.crop);
        let cloud = if cropped.is_empty() {
            PointCloud::from_positions(vec![[0.0; 3]; pipe.sampling.target_points])
        } else {
            cascade_sample(
                &cropped,
                &pipe.sampling,
                mix_seed(mix_seed(self.episode_seed, SAMPLE_SALT), self.state.step_index),
            )?
        };
        let proprio = vec![
            self.state.effector[0],
            self.state.effector[1],
            self.state.effector[2],
            self.state.grip,
        ];
        let image = pipe.include_image.then(|| {
            Tensor::from_vec(
                &[1, 1, self.cfg.intrinsics.height, self.cfg.intrinsics.width],
                depth.as_slice().to_vec(),
            )
        });
        Ok(Observation { cloud, proprio, image })
    }
}

fn draw_in_region(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> [f64; 2] {
    let mut out = [0.0; 2];
    for a in 0..2 {
        let half = cfg.region_size[a] / 2.0;
        out[a] = if half > 0.0 {
            rng.random_range(cfg.region_center[a] - half..cfg.region_center[a] + half)
        } else {
            cfg.region_center[a]
        };
    }
    out
}

fn draw_distractor(
    cfg: &SceneConfig,
    object: &[f64; 3],
    placed: &[Distractor],
    rng: &mut ChaCha8Rng,
) -> Distractor {
    let [smin, smax] = cfg.distractor_size;
    let mut candidate = Distractor { center: [0.0, 0.45], size: smin };
    // Rejection-sample a spot clear of the object, the place zone, and
    // earlier distractors; after enough failures the last draw stands
    // (clutter is allowed to crowd, just not to sit on the task geometry).
    for _ in 0..100 {
        let size = if smax > smin { rng.random_range(smin..smax) } else { smin };
        let x = rng.random_range(-0.30..0.30);
        let y = rng.random_range(0.38..0.70);
        candidate = Distractor { center: [x, y], size };
        let clear_of = |cx: f64, cy: f64, r: f64| {
            let dx = x - cx;
            let dy = y - cy;
            (dx * dx + dy * dy).sqrt() >= r
        };
        let ok = clear_of(object[0], object[1], 0.10)
            && clear_of(cfg.place_target[0], cfg.place_target[1], cfg.place_radius + 0.06)
            && placed.iter().all(|d| clear_of(d.center[0], d.center[1], 0.08));
        if ok {
            break;
        }
    }
    candidate
}

/// Analytic depth render: nearest positive hit along each pixel ray against
/// the table plane, the background wall, and the object / effector /
/// distractor boxes. Stored depth is camera-z (the ray parameter for the
/// unnormalized direction), matching what back-projection expects. With a
/// noise seed, each valid pixel gets Gaussian depth noise and may drop out
/// to 0; the draw order is fixed (per pixel: normal then uniform, row-major)
/// so a seed pins the whole image.
pub fn render_depth(
    cfg: &SceneConfig,
    state: &EnvState,
    distractors: &[Distractor],
    noise_seed: Option<u64>,
) -> DepthImage {
    let k = &cfg.intrinsics;
    let r = cfg.camera_pose.rotation();
    let o = cfg.camera_pose.translation();
    let mut boxes: Vec<([f64; 3], f64)> = Vec::with_capacity(2 + distractors.len());
    boxes.push((state.object, cfg.object_size / 2.0));
    boxes.push((state.effector, cfg.effector_size / 2.0));
    for d in distractors {
        boxes.push(([d.center[0], d.center[1], cfg.table_height + d.size / 2.0], d.size / 2.0));
    }
    let mut data = vec![0.0; k.width * k.height];
    for v in 0..k.height {
        for u in 0..k.width {
            let xn = (u as f64 - k.cx) / k.fx;
            let yn = (v as f64 - k.cy) / k.fy;
            let dir = [
                r[(0, 0)] * xn + r[(0, 1)] * yn + r[(0, 2)],
                r[(1, 0)] * xn + r[(1, 1)] * yn + r[(1, 2)],
                r[(2, 0)] * xn + r[(2, 1)] * yn + r[(2, 2)],
            ];
            let mut s = f64::INFINITY;
            if let Some(t) = ray_axis_plane(&o, &dir, 2, cfg.table_height) {
                s = s.min(t);
            }
            if let Some(t) = ray_axis_plane(&o, &dir, 1, cfg.wall_y) {
                s = s.min(t);
            }
            for (c, h) in &boxes {
                if let Some(t) = ray_box(&o, &dir, c, *h) {
                    s = s.min(t);
                }
            }
            data[v * k.width + u] = if s.is_finite() { s } else { 0.0 };
        }
    }
    if let Some(seed) = noise_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for d in data.iter_mut() {
            // Both values are drawn for every pixel so the stream layout
            // does not depend on scene content.
            let g: f64 = rng.sample(StandardNormal);
            let drop: f64 = rng.random();
            if *d > 0.0 {
                *d = if drop < cfg.dropout_p { 0.0 } else { (*d + cfg.depth_sigma * g).max(0.0) };
            }
        }
    }
    DepthImage::new(k.width, k.height, data).expect("renderer yields finite non-negative depths")
}

fn ray_axis_plane(o: &[f64; 3], d: &[f64; 3], axis: usize, value: f64) -> Option<f64> {
    if d[axis].abs() < 1e-12 {
        return None;
    }
    let s = (value - o[axis]) / d[axis];
    (s > 1e-9).then_some(s)
}

fn ray_box(o: &[f64; 3], d: &[f64; 3], center: &[f64; 3], half: f64) -> Option<f64> {
    let mut lo = 1e-9f64;
    let mut hi = f64::INFINITY;
    for a in 0..3 {
        let mn = center[a] - half;
        let mx = center[a] + half;
        if d[a].abs() < 1e-12 {
            if o[a] < mn || o[a] > mx {
                return None;
            }
        } else {
            let inv = 1.0 / d[a];
            let p = (mn - o[a]) * inv;
            let q = (mx - o[a]) * inv;
            let (t0, t1) = if p <= q { (p, q) } else { (q, p) };
            lo = lo.max(t0);
            hi = hi.min(t1);
            if lo > hi {
                return None;
            }
        }
    }
    Some(lo)
}

/// Ornstein-Uhlenbeck jitter parameters for the scripted expert. The
/// stationary lag-1 autocorrelation of the jitter is `1 - theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JitterConfig {
    pub theta: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self { theta: 0.3, sigma: 0.01, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    ApproachAbove,
    Descend,
    Close,
    Lift,
    MoveToPlace,
    Release,
}

/// Hand-written demonstrator: approach above the object, descend, close,
/// lift clear of the scoring height, carry to the place zone, release.
/// A failed grasp loops back to the approach, so noisy runs retry instead
/// of stalling. OU jitter perturbs every positional waypoint; grip commands
/// stay crisp.
#[derive(Debug, Clone)]
pub struct ScriptedExpert {
    jitter: JitterConfig,
    rng: ChaCha8Rng,
    ou: [f64; 3],
    phase: Phase,
    close_steps: u32,
    hold_steps: u32,
}

/// Hover height above the object center before descending.
const HOVER: f64 = 0.08;

impl ScriptedExpert {
    pub fn new(jitter: JitterConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(jitter.seed);
        Self { jitter, rng, ou: [0.0; 3], phase: Phase::ApproachAbove, close_steps: 0, hold_steps: 0 }
    }

    /// Restarts the phase machine and jitter stream under a new seed;
    /// used to re-roll a failed demonstration round.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.ou = [0.0; 3];
        self.phase = Phase::ApproachAbove;
        self.close_steps = 0;
        self.hold_steps = 0;
    }

    fn step_jitter(&mut self) -> [f64; 3] {
        for a in 0..3 {
            let g: f64 = self.rng.sample(StandardNormal);
            self.ou[a] = (1.0 - self.jitter.theta) * self.ou[a] + self.jitter.sigma * g;
        }
        self.ou
    }

    pub fn action(&mut self, cfg: &SceneConfig, state: &EnvState) -> Action {
        let ou = self.step_jitter();
        let lift_z = cfg.table_height + cfg.lift_height + 0.07;
        // Reactive transitions first; bounded because each hop either needs
        // proximity the previous phase has not produced yet or a counter.
        for _ in 0..4 {
            let next = match self.phase {
                Phase::ApproachAbove => {
                    let wp = add(state.object, [0.0, 0.0, HOVER]);
                    (norm(sub(state.effector, wp)) <= 0.02).then_some(Phase::Descend)
                }
                Phase::Descend => (norm(sub(state.effector, state.object)) <= 0.015).then(|| {
                    self.close_steps = 0;
                    Phase::Close
                }),
                Phase::Close => (self.close_steps >= 2).then(|| {
                    if state.held {
                        self.hold_steps = 0;
                        Phase::Lift
                    } else {
                        Phase::ApproachAbove
                    }
                }),
                Phase::Lift => {
                    if !state.held {
                        Some(Phase::ApproachAbove)
                    } else {
                        (self.hold_steps >= cfg.lift_hold_steps + 3).then_some(Phase::MoveToPlace)
                    }
                }
                Phase::MoveToPlace => {
                    if !state.held {
                        Some(Phase::ApproachAbove)
                    } else {
                        let dx = state.object[0] - cfg.place_target[0];
                        let dy = state.object[1] - cfg.place_target[1];
                        ((dx * dx + dy * dy).sqrt() <= 0.02).then_some(Phase::Release)
                    }
                }
                Phase::Release => None,
            };
            match next {
                Some(p) => self.phase = p,
                None => break,
            }
        }
        let (wp, grip) = match self.phase {
            Phase::ApproachAbove => (add(state.object, [0.0, 0.0, HOVER]), 0.0),
            Phase::Descend => (state.object, 0.0),
            Phase::Close => {
                self.close_steps += 1;
                (state.effector, 1.0)
            }
            Phase::Lift => {
                if state.effector[2] >= cfg.table_height + cfg.lift_height + 0.05 {
                    self.hold_steps += 1;
                }
                ([state.object[0], state.object[1], lift_z], 1.0)
            }
            Phase::MoveToPlace => ([cfg.place_target[0], cfg.place_target[1], lift_z], 1.0),
            Phase::Release => {
                self.phase = Phase::ApproachAbove;
                (state.effector, 0.0)
            }
        };
        Action { target: add(wp, ou), grip }
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale3(a: [f64; 3], c: f64) -> [f64; 3] {
    [a[0] * c, a[1] * c, a[2] * c]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = norm(a);
    assert!(n > 1e-9, "degenerate direction");
    scale3(a, 1.0 / n)
}
