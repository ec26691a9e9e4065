//! Hypervolume oracles that share no code with the sweep under test.

use moncae_core::{ObjectivePoint, ReferencePoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Counts the unit cells of the reference box dominated by some point.
/// Exact whenever every coordinate is an integer.
pub fn unit_grid_hv(points: &[ObjectivePoint], r: &ReferencePoint) -> f64 {
    let (rx, ry) = (r.rec_loss_ref as i64, r.loc_ref as i64);
    let mut cells = 0u64;
    for x in 0..rx {
        for y in 0..ry {
            let covered = points
                .iter()
                .any(|p| p.rec_loss <= x as f64 && p.loc <= y as f64);
            cells += covered as u64;
        }
    }
    cells as f64
}

/// Up to `max_len` points uniform in the box `[0, r)`, or on the integer
/// lattice inside it when `integer` is set.
pub fn random_set(
    rng: &mut ChaCha8Rng,
    r: &ReferencePoint,
    max_len: usize,
    integer: bool,
) -> Vec<ObjectivePoint> {
    let n = rng.gen_range(0..=max_len);
    (0..n)
        .map(|_| {
            if integer {
                ObjectivePoint::new(
                    rng.gen_range(0..r.rec_loss_ref as i64) as f64,
                    rng.gen_range(0..r.loc_ref as i64) as f64,
                )
            } else {
                ObjectivePoint::new(
                    rng.gen_range(0.0..r.rec_loss_ref),
                    rng.gen_range(0.0..r.loc_ref),
                )
            }
        })
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
