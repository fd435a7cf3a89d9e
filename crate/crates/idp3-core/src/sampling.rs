//! Point-sampling strategies for bringing a raw cloud down to the fixed
//! point budget the encoder expects.
//!
//! The production path is `cascade_sample` (voxel grid, then seeded uniform
//! fill), which covers the workspace at a fraction of the cost of farthest
//! point sampling. Exact greedy FPS is kept as the reference strategy so the
//! cascade has something to be benchmarked and tested against.

use crate::geom::PointCloud;
use rand_chacha::ChaCha8Rng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("input cloud is empty")]
    EmptyCloud,
    #[error("voxel size must be positive and finite, got {0}")]
    BadVoxelSize(f64),
    #[error("target point count must be >= 1")]
    BadTarget,
    #[error("start index {start} out of range for {n} points")]
    StartOutOfRange { start: usize, n: usize },
    #[error("fps target {n} exceeds cloud size {have}")]
    TargetExceedsCloud { n: usize, have: usize },
}

/// Cascade parameters. `target_points` is the exact output size; ablation
/// grids use {1024, 2048, 4096, 8192}, anything >= 1 is accepted elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub voxel_size: f64,
    pub target_points: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { voxel_size: 0.02, target_points: 1024 }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), SamplingError> {
        if !(self.voxel_size > 0.0) || !self.voxel_size.is_finite() {
            return Err(SamplingError::BadVoxelSize(self.voxel_size));
        }
        if self.target_points == 0 {
            return Err(SamplingError::BadTarget);
        }
        Ok(())
    }
}

fn voxel_key(p: &[f64; 3], size: f64) -> (i64, i64, i64) {
    (
        (p[0] / size).floor() as i64,
        (p[1] / size).floor() as i64,
        (p[2] / size).floor() as i64,
    )
}

fn gather(pc: &PointCloud, indices: &[usize]) -> PointCloud {
    PointCloud {
        positions: indices.iter().map(|&i| pc.positions[i]).collect(),
        colors: pc.colors.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect()),
    }
}

/// Keeps one representative per occupied voxel: the lowest-index point that
/// fell in it. Output order is first occurrence of each voxel, so the result
/// is a subsequence of the input.
pub fn voxel_downsample(pc: &PointCloud, voxel_size: f64) -> Result<PointCloud, SamplingError> {
    if !(voxel_size > 0.0) || !voxel_size.is_finite() {
        return Err(SamplingError::BadVoxelSize(voxel_size));
    }
    let mut seen: HashMap<(i64, i64, i64), ()> = HashMap::with_capacity(pc.len());
    let mut kept = Vec::new();
    for (i, p) in pc.positions.iter().enumerate() {
        if seen.insert(voxel_key(p, voxel_size), ()).is_none() {
            kept.push(i);
        }
    }
    Ok(gather(pc, &kept))
}

/// Draws exactly `n` points with the seeded generator.
///
/// N > n: sample without replacement (selection order). N == n: the input is
/// returned unchanged, no permutation. N < n: all inputs in order, then the
/// remainder drawn with replacement.
pub fn uniform_sample(pc: &PointCloud, n: usize, seed: u64) -> Result<PointCloud, SamplingError> {
    if n == 0 {
        return Err(SamplingError::BadTarget);
    }
    if pc.is_empty() {
        return Err(SamplingError::EmptyCloud);
    }
    let len = pc.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if len == n {
        return Ok(pc.clone());
    }
    let indices: Vec<usize> = if len > n {
        // Partial Fisher-Yates: the first n slots end up with a uniform
        // without-replacement draw.
        let mut pool: Vec<usize> = (0..len).collect();
        for i in 0..n {
            let j = rng.random_range(i..len);
            pool.swap(i, j);
        }
        pool.truncate(n);
        pool
    } else {
        let mut idx: Vec<usize> = (0..len).collect();
        idx.extend((len..n).map(|_| rng.random_range(0..len)));
        idx
    };
    Ok(gather(pc, &indices))
}

/// Exact greedy farthest point sampling (max-min metric). Ties in the
/// farthest distance resolve to the lowest index, so the procedure is fully
/// deterministic given `start_index`.
pub fn farthest_point_sample(pc: &PointCloud, n: usize, start_index: usize) -> Result<PointCloud, SamplingError> {
    if pc.is_empty() {
        return Err(SamplingError::EmptyCloud);
    }
    if n == 0 {
        return Err(SamplingError::BadTarget);
    }
    let len = pc.len();
    if start_index >= len {
        return Err(SamplingError::StartOutOfRange { start: start_index, n: len });
    }
    if n > len {
        return Err(SamplingError::TargetExceedsCloud { n, have: len });
    }
    let dist2 = |a: &[f64; 3], b: &[f64; 3]| -> f64 {
        let dx = a[0] - b[0];
        let dy = a[1] - b[1];
        let dz = a[2] - b[2];
        dx * dx + dy * dy + dz * dz
    };
    let mut selected = Vec::with_capacity(n);
    selected.push(start_index);
    let start = pc.positions[start_index];
    let mut min_d2: Vec<f64> = pc.positions.iter().map(|p| dist2(p, &start)).collect();
    while selected.len() < n {
        // Strict > keeps the lowest index on ties.
        let mut best = 0usize;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d2.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        selected.push(best);
        let bp = pc.positions[best];
        for (i, d) in min_d2.iter_mut().enumerate() {
            let nd = dist2(&pc.positions[i], &bp);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(gather(pc, &selected))
}

/// Voxel pass for coverage, then seeded uniform fill to exactly
/// `cfg.target_points`. This is the observation pipeline's sampler.
pub fn cascade_sample(pc: &PointCloud, cfg: &SamplingConfig, seed: u64) -> Result<PointCloud, SamplingError> {
    cfg.validate()?;
    if pc.is_empty() {
        return Err(SamplingError::EmptyCloud);
    }
    let coarse = voxel_downsample(pc, cfg.voxel_size)?;
    uniform_sample(&coarse, cfg.target_points, seed)
}

/// One timing row of [`bench_samplers`]. Durations are wall-clock
/// nanoseconds; `median_ns` is the reported statistic, min/max give spread.
#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub strategy: String,
    pub input_n: usize,
    pub target_n: usize,
    pub median_ns: u128,
    pub min_ns: u128,
    pub max_ns: u128,
}

#[derive(Debug, Clone, Serialize)]
pub struct SamplerBenchReport {
    pub repetitions: usize,
    pub rows: Vec<BenchRow>,
}

impl SamplerBenchReport {
    pub fn row(&self, strategy: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }
}

fn time_median<F: FnMut()>(reps: usize, mut f: F) -> (u128, u128, u128) {
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = std::time::Instant::now();
        f();
        samples.push(t0.elapsed().as_nanos());
    }
    samples.sort_unstable();
    (samples[samples.len() / 2], samples[0], samples[samples.len() - 1])
}

/// Times each strategy `repetitions` times on the same cloud and reports
/// medians. FPS runs from start index 0; seeded strategies reuse `seed` so
/// every repetition does identical work.
pub fn bench_samplers(
    pc: &PointCloud,
    cfg: &SamplingConfig,
    repetitions: usize,
    seed: u64,
) -> Result<SamplerBenchReport, SamplingError> {
    cfg.validate()?;
    if pc.is_empty() {
        return Err(SamplingError::EmptyCloud);
    }
    if repetitions == 0 {
        return Err(SamplingError::BadTarget);
    }
    let mut rows = Vec::new();
    let mut push = |strategy: &str, (median_ns, min_ns, max_ns): (u128, u128, u128)| {
        rows.push(BenchRow {
            strategy: strategy.to_string(),
            input_n: pc.len(),
            target_n: cfg.target_points,
            median_ns,
            min_ns,
            max_ns,
        });
    };
    push(
        "voxel",
        time_median(repetitions, || {
            std::hint::black_box(voxel_downsample(pc, cfg.voxel_size).unwrap());
        }),
    );
    push(
        "uniform",
        time_median(repetitions, || {
            std::hint::black_box(uniform_sample(pc, cfg.target_points.min(pc.len()), seed).unwrap());
        }),
    );
    push(
        "cascade",
        time_median(repetitions, || {
            std::hint::black_box(cascade_sample(pc, cfg, seed).unwrap());
        }),
    );
    let fps_n = cfg.target_points.min(pc.len());
    push(
        "fps",
        time_median(repetitions, || {
            std::hint::black_box(farthest_point_sample(pc, fps_n, 0).unwrap());
        }),
    );
    Ok(SamplerBenchReport { repetitions, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::from_positions(
            (0..n)
                .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect(),
        )
    }

    /// Brute-force voxel reference: point i survives iff no j < i shares its
    /// voxel. Quadratic on purpose; no hash map involved.
    fn voxel_oracle(pc: &PointCloud, size: f64) -> Vec<[f64; 3]> {
        let mut out = Vec::new();
        for (i, p) in pc.positions.iter().enumerate() {
            let k = voxel_key(p, size);
            if !pc.positions[..i].iter().any(|q| voxel_key(q, size) == k) {
                out.push(*p);
            }
        }
        out
    }

    /// Greedy FPS reference recomputing all distances from scratch each
    /// round instead of maintaining a running minimum.
    fn fps_oracle(pc: &PointCloud, n: usize, start: usize) -> Vec<[f64; 3]> {
        let d2 = |a: &[f64; 3], b: &[f64; 3]| {
            (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
        };
        let mut selected = vec![start];
        while selected.len() < n {
            let mut best = 0;
            let mut best_d = f64::NEG_INFINITY;
            for i in 0..pc.len() {
                let min_d = selected
                    .iter()
                    .map(|&s| d2(&pc.positions[i], &pc.positions[s]))
                    .fold(f64::INFINITY, f64::min);
                if min_d > best_d {
                    best_d = min_d;
                    best = i;
                }
            }
            selected.push(best);
        }
        selected.iter().map(|&i| pc.positions[i]).collect()
    }

    #[test]
    fn voxel_collapses_cluster_to_lowest_index() {
        // 8 points inside one 0.1 voxel; representative must be index 0.
        let pts: Vec<[f64; 3]> = (0..8).map(|i| [0.01 + 0.001 * i as f64, 0.02, 0.03]).collect();
        let pc = PointCloud::from_positions(pts.clone());
        let out = voxel_downsample(&pc, 0.1).unwrap();
        assert_eq!(out.positions, vec![pts[0]]);
    }

    #[test]
    fn voxel_grid_points_pass_through_in_order() {
        // One point per voxel: output identical to input.
        let mut pts = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                pts.push([0.05 + 0.1 * i as f64, 0.05 + 0.1 * j as f64, -0.35]);
            }
        }
        let pc = PointCloud::from_positions(pts.clone());
        let out = voxel_downsample(&pc, 0.1).unwrap();
        assert_eq!(out.positions, pts);
    }

    #[test]
    fn voxel_handles_negative_coords() {
        // -0.01 and +0.01 straddle the voxel boundary at 0.
        let pc = PointCloud::from_positions(vec![[-0.01, 0.0, 0.0], [0.01, 0.0, 0.0]]);
        let out = voxel_downsample(&pc, 0.1).unwrap();
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn voxel_matches_oracle_on_random_clouds() {
        for seed in 0..50 {
            let pc = random_cloud(80, seed);
            let got = voxel_downsample(&pc, 0.13).unwrap();
            assert_eq!(got.positions, voxel_oracle(&pc, 0.13), "seed {seed}");
        }
    }

    #[test]
    fn uniform_exact_size_is_a_copy() {
        let pc = random_cloud(32, 7);
        let out = uniform_sample(&pc, 32, 99).unwrap();
        assert_eq!(out.positions, pc.positions);
    }

    #[test]
    fn uniform_pads_with_replacement() {
        let pc = random_cloud(5, 3);
        let out = uniform_sample(&pc, 12, 4).unwrap();
        assert_eq!(out.len(), 12);
        // First N entries are the originals in order.
        assert_eq!(&out.positions[..5], &pc.positions[..]);
        // Padding draws only existing points.
        for p in &out.positions[5..] {
            assert!(pc.positions.contains(p));
        }
    }

    #[test]
    fn uniform_downsample_is_without_replacement() {
        let pc = random_cloud(64, 11);
        let out = uniform_sample(&pc, 20, 123).unwrap();
        assert_eq!(out.len(), 20);
        let mut seen = std::collections::HashSet::new();
        for p in &out.positions {
            let idx = pc.positions.iter().position(|q| q == p).unwrap();
            assert!(seen.insert(idx), "index {idx} drawn twice");
        }
    }

    #[test]
    fn uniform_is_seed_deterministic() {
        let pc = random_cloud(100, 5);
        let a = uniform_sample(&pc, 30, 42).unwrap();
        let b = uniform_sample(&pc, 30, 42).unwrap();
        let c = uniform_sample(&pc, 30, 43).unwrap();
        assert_eq!(a.positions, b.positions);
        assert_ne!(a.positions, c.positions);
    }

    #[test]
    fn fps_square_picks_diagonal() {
        let pc = PointCloud::from_positions(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
        ]);
        let out = farthest_point_sample(&pc, 2, 0).unwrap();
        // Farthest from corner 0 is the opposite corner.
        assert_eq!(out.positions, vec![[0.0, 0.0, 0.0], [1.0, 1.0, 0.0]]);
    }

    #[test]
    fn fps_tie_resolves_to_lowest_index() {
        // Points 1 and 2 are equidistant from the start; index 1 must win.
        let pc = PointCloud::from_positions(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
        ]);
        let out = farthest_point_sample(&pc, 2, 0).unwrap();
        assert_eq!(out.positions[1], [1.0, 0.0, 0.0]);
    }

    #[test]
    fn fps_full_budget_returns_all_points() {
        let pc = random_cloud(17, 9);
        let out = farthest_point_sample(&pc, 17, 3).unwrap();
        assert_eq!(out.len(), 17);
        let mut sorted_in: Vec<_> = pc.positions.clone();
        let mut sorted_out: Vec<_> = out.positions.clone();
        sorted_in.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted_out.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(sorted_in, sorted_out);
    }

    #[test]
    fn fps_matches_oracle_small_clouds() {
        for seed in 0..60 {
            let n = 3 + (seed as usize % 30);
            let pc = random_cloud(n, seed + 1000);
            for start in 0..n.min(6) {
                let budget = 1 + (seed as usize % n);
                let got = farthest_point_sample(&pc, budget, start).unwrap();
                assert_eq!(got.positions, fps_oracle(&pc, budget, start), "seed {seed} start {start}");
            }
        }
    }

    #[test]
    fn fps_rejects_bad_args() {
        let pc = random_cloud(4, 0);
        assert!(matches!(
            farthest_point_sample(&pc, 2, 9),
            Err(SamplingError::StartOutOfRange { .. })
        ));
        assert!(matches!(
            farthest_point_sample(&pc, 5, 0),
            Err(SamplingError::TargetExceedsCloud { .. })
        ));
        let empty = PointCloud::from_positions(vec![]);
        assert!(matches!(farthest_point_sample(&empty, 1, 0), Err(SamplingError::EmptyCloud)));
    }

    #[test]
    fn cascade_equals_manual_two_step() {
        let pc = random_cloud(500, 21);
        let cfg = SamplingConfig { voxel_size: 0.25, target_points: 40 };
        let got = cascade_sample(&pc, &cfg, 77).unwrap();
        let manual = uniform_sample(&voxel_downsample(&pc, 0.25).unwrap(), 40, 77).unwrap();
        assert_eq!(got.positions, manual.positions);
        assert_eq!(got.len(), 40);
    }

    #[test]
    fn cascade_pads_when_voxels_are_scarce() {
        let pc = random_cloud(50, 2);
        // Huge voxels collapse everything into a handful of cells.
        let cfg = SamplingConfig { voxel_size: 2.0, target_points: 16 };
        let out = cascade_sample(&pc, &cfg, 5).unwrap();
        assert_eq!(out.len(), 16);
    }

    #[test]
    fn bench_report_has_all_strategies() {
        let pc = random_cloud(300, 4);
        let cfg = SamplingConfig { voxel_size: 0.2, target_points: 64 };
        let report = bench_samplers(&pc, &cfg, 3, 0).unwrap();
        for strategy in ["voxel", "uniform", "cascade", "fps"] {
            let row = report.row(strategy).unwrap();
            assert_eq!(row.input_n, 300);
            assert_eq!(row.target_n, 64);
            assert!(row.min_ns <= row.median_ns && row.median_ns <= row.max_ns);
        }
    }

    proptest! {
        #[test]
        fn voxel_output_is_subsequence(seed in 0u64..500, size in 0.05f64..0.5) {
            let pc = random_cloud(40, seed);
            let out = voxel_downsample(&pc, size).unwrap();
            // Exact-coordinate subsequence check.
            let mut cursor = 0;
            for p in &out.positions {
                let pos = pc.positions[cursor..].iter().position(|q| q == p);
                prop_assert!(pos.is_some());
                cursor += pos.unwrap() + 1;
            }
        }

        #[test]
        fn voxel_coverage_within_diagonal(seed in 0u64..200, size in 0.05f64..0.5) {
            let pc = random_cloud(60, seed);
            let out = voxel_downsample(&pc, size).unwrap();
            let bound = size * 3f64.sqrt();
            for p in &pc.positions {
                let nearest = out
                    .positions
                    .iter()
                    .map(|q| {
                        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min);
                prop_assert!(nearest <= bound + 1e-12);
            }
        }

        #[test]
        fn fps_output_points_come_from_input(seed in 0u64..200) {
            let pc = random_cloud(30, seed);
            let out = farthest_point_sample(&pc, 10, (seed % 30) as usize).unwrap();
            for p in &out.positions {
                prop_assert!(pc.positions.contains(p));
            }
        }

        #[test]
        fn cascade_always_hits_target(seed in 0u64..200, target in 1usize..64) {
            let pc = random_cloud(100, seed);
            let cfg = SamplingConfig { voxel_size: 0.15, target_points: target };
            let out = cascade_sample(&pc, &cfg, seed).unwrap();
            prop_assert_eq!(out.len(), target);
        }
    }
}
