//! Shared inputs for the sampler benchmarks.

use idp3_core::geom::PointCloud;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Synthetic desk-scale cloud: a box roughly matching what the simulated
/// camera returns, so voxel occupancy is realistic rather than degenerate.
pub fn desk_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = (0..n)
        .map(|_| {
            [
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(0.2..1.2),
            ]
        })
        .collect();
    PointCloud::from_positions(positions)
}
