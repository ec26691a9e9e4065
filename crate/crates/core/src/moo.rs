//! Multi-objective primitives: Pareto dominance, level of compression,
//! the two-objective hypervolume indicator, exclusive contributions and a
//! non-dominated archive.
//!
//! Both objectives are minimized. The hypervolume of a point set is the area
//! of the union of the boxes spanned between each point and the reference
//! point; points outside the reference box contribute nothing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MooError {
    #[error("invalid shape {0:?}: expected a non-empty list of dimensions >= 1")]
    InvalidShape(Vec<usize>),
    #[error("invalid point ({rec_loss}, {loc}): coordinates must be finite")]
    InvalidPoint { rec_loss: f64, loc: f64 },
    #[error("invalid reference point ({0}, {1}): coordinates must be finite and > 0")]
    InvalidReference(f64, f64),
    #[error("index {index} out of range for {len} points")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("dimension mismatch: point has {point} objectives, reference has {reference}")]
    DimensionMismatch { point: usize, reference: usize },
}

/// A pair of (reconstruction loss, level of compression).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectivePoint {
    pub rec_loss: f64,
    pub loc: f64,
}

impl ObjectivePoint {
    pub const fn new(rec_loss: f64, loc: f64) -> Self {
        Self { rec_loss, loc }
    }

    fn is_finite(&self) -> bool {
        self.rec_loss.is_finite() && self.loc.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub rec_loss_ref: f64,
    pub loc_ref: f64,
}

impl ReferencePoint {
    pub fn new(rec_loss_ref: f64, loc_ref: f64) -> Result<Self, MooError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(rec_loss_ref) || !ok(loc_ref) {
            return Err(MooError::InvalidReference(rec_loss_ref, loc_ref));
        }
        Ok(Self {
            rec_loss_ref,
            loc_ref,
        })
    }

    /// The point itself, as the worst representable objective pair.
    pub fn as_point(&self) -> ObjectivePoint {
        ObjectivePoint::new(self.rec_loss_ref, self.loc_ref)
    }

    /// Area of the whole reference box anchored at the origin.
    pub fn box_area(&self) -> f64 {
        self.rec_loss_ref * self.loc_ref
    }
}

impl Default for ReferencePoint {
    fn default() -> Self {
        Self {
            rec_loss_ref: 4.0,
            loc_ref: 12.0,
        }
    }
}

/// log10 of the number of elements in a tensor of the given shape.
pub fn level_of_compression(shape: &[usize]) -> Result<f64, MooError> {
    if shape.is_empty() || shape.iter().any(|&d| d < 1) {
        return Err(MooError::InvalidShape(shape.to_vec()));
    }
    let count = shape
        .iter()
        .try_fold(1u128, |acc, &d| acc.checked_mul(d as u128));
    Ok(match count {
        Some(c) => (c as f64).log10(),
        None => shape.iter().map(|&d| (d as f64).log10()).sum(),
    })
}

/// `a` is no worse than `b` in every objective and differs from it.
pub fn dominates(a: &ObjectivePoint, b: &ObjectivePoint) -> bool {
    a.rec_loss <= b.rec_loss && a.loc <= b.loc && a != b
}

/// Exact two-objective hypervolume.
pub fn hypervolume(points: &[ObjectivePoint], reference: &ReferencePoint) -> Result<f64, MooError> {
    if let Some(p) = points.iter().find(|p| !p.is_finite()) {
        return Err(MooError::InvalidPoint {
            rec_loss: p.rec_loss,
            loc: p.loc,
        });
    }
    Ok(sweep(points.iter().copied(), reference))
}

fn sweep(points: impl Iterator<Item = ObjectivePoint>, reference: &ReferencePoint) -> f64 {
    let mut inside: Vec<ObjectivePoint> = points
        .filter(|p| p.rec_loss < reference.rec_loss_ref && p.loc < reference.loc_ref)
        .collect();
    inside.sort_by(|a, b| {
        a.rec_loss
            .total_cmp(&b.rec_loss)
            .then(a.loc.total_cmp(&b.loc))
    });
    inside.dedup();

    // Each point that lowers the running loc floor adds a strip reaching to
    // the reference rec_loss.
    let mut floor = reference.loc_ref;
    let mut area = 0.0;
    for p in inside {
        if p.loc < floor {
            area += (reference.rec_loss_ref - p.rec_loss) * (floor - p.loc);
            floor = p.loc;
        }
    }
    area
}

/// Exclusive hypervolume contribution of `points[index]`.
///
/// Equal to `HV(points) - HV(points without element index)`; exactly zero
/// for dominated, duplicated or out-of-box points.
pub fn chvi(
    index: usize,
    points: &[ObjectivePoint],
    reference: &ReferencePoint,
) -> Result<f64, MooError> {
    if index >= points.len() {
        return Err(MooError::IndexOutOfRange {
            index,
            len: points.len(),
        });
    }
    let total = hypervolume(points, reference)?;
    let rest = sweep(
        points
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != index)
            .map(|(_, p)| *p),
        reference,
    );
    Ok((total - rest).max(0.0))
}

/// Exclusive contributions of every point, in input order.
pub fn contributions(
    points: &[ObjectivePoint],
    reference: &ReferencePoint,
) -> Result<Vec<f64>, MooError> {
    (0..points.len())
        .map(|i| chvi(i, points, reference))
        .collect()
}

/// Monte-Carlo hypervolume estimate for any number of objectives.
///
/// Samples are uniform in the box `[0, reference]`, so every objective must
/// be non-negative for the estimate to be unbiased. The first
/// `floor(samples^(1/d))^d` samples are jittered-stratified (one uniform
/// draw per cell of a regular grid), the rest are independent. Returns the
/// estimate and the independent-sampling standard error, which bounds the
/// stratified error from above.
pub fn hypervolume_monte_carlo(
    points: &[Vec<f64>],
    reference: &[f64],
    samples: usize,
    seed: u64,
) -> Result<(f64, f64), MooError> {
    for p in points {
        if p.len() != reference.len() {
            return Err(MooError::DimensionMismatch {
                point: p.len(),
                reference: reference.len(),
            });
        }
    }
    if samples == 0 || reference.is_empty() {
        return Ok((0.0, 0.0));
    }
    let d = reference.len();
    let volume: f64 = reference.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let covered = |s: &[f64]| {
        points
            .iter()
            .any(|p| p.iter().zip(s).all(|(pi, si)| pi <= si))
    };

    let mut strata = (samples as f64).powf(1.0 / d as f64).floor() as usize;
    while strata.checked_pow(d as u32).is_none_or(|c| c > samples) {
        strata -= 1;
    }
    let cells = strata.pow(d as u32);
    let mut sample = vec![0.0; d];
    let mut cell = vec![0usize; d];
    let mut hits = 0usize;
    for _ in 0..cells {
        for ((s, &r), &k) in sample.iter_mut().zip(reference).zip(&cell) {
            *s = (k as f64 + rng.gen::<f64>()) / strata as f64 * r;
        }
        hits += covered(&sample) as usize;
        // Odometer over the grid.
        for k in cell.iter_mut() {
            *k += 1;
            if *k < strata {
                break;
            }
            *k = 0;
        }
    }
    for _ in cells..samples {
        for (s, &r) in sample.iter_mut().zip(reference) {
            *s = rng.gen::<f64>() * r;
        }
        hits += covered(&sample) as usize;
    }
    let frac = hits as f64 / samples as f64;
    let stderr = volume * (frac * (1.0 - frac) / samples as f64).sqrt();
    Ok((volume * frac, stderr))
}

/// Default sample count for [`hypervolume_monte_carlo`].
pub const DEFAULT_MC_SAMPLES: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub point: ObjectivePoint,
    pub genome_id: String,
    pub generation: usize,
}

/// Mutually non-dominated set of every objective point offered so far.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParetoArchive {
    entries: Vec<ArchiveEntry>,
}

impl ParetoArchive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Offers a point. Returns true when the archive changed.
    pub fn insert(&mut self, point: ObjectivePoint, genome_id: &str, generation: usize) -> bool {
        if self.entries.iter().any(|e| dominates(&e.point, &point)) {
            return false;
        }
        if self
            .entries
            .iter()
            .any(|e| e.point == point && e.genome_id == genome_id)
        {
            return false;
        }
        self.entries.retain(|e| !dominates(&point, &e.point));
        self.entries.push(ArchiveEntry {
            point,
            genome_id: genome_id.to_string(),
            generation,
        });
        true
    }

    pub fn entries(&self) -> &[ArchiveEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn points(&self) -> Vec<ObjectivePoint> {
        self.entries.iter().map(|e| e.point).collect()
    }

    pub fn hypervolume(&self, reference: &ReferencePoint) -> f64 {
        sweep(self.entries.iter().map(|e| e.point), reference)
    }

    /// Entries ordered by rec_loss, then loc, then genome id.
    pub fn sorted_entries(&self) -> Vec<ArchiveEntry> {
        let mut out = self.entries.clone();
        out.sort_by(|a, b| {
            a.point
                .rec_loss
                .total_cmp(&b.point.rec_loss)
                .then(a.point.loc.total_cmp(&b.point.loc))
                .then_with(|| a.genome_id.cmp(&b.genome_id))
        });
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(a: f64, b: f64) -> ObjectivePoint {
        ObjectivePoint::new(a, b)
    }

    #[test]
    fn loc_examples() {
        assert!((level_of_compression(&[4, 4, 3]).unwrap() - 1.6812).abs() < 1e-3);
        assert_eq!(level_of_compression(&[1, 1, 1]).unwrap(), 0.0);
        assert!((level_of_compression(&[8, 8, 8]).unwrap() - 2.7093).abs() < 1e-3);
        assert!(level_of_compression(&[]).is_err());
        assert!(level_of_compression(&[3, 0]).is_err());
    }

    #[test]
    fn dominance() {
        assert!(dominates(&p(1.0, 1.0), &p(2.0, 2.0)));
        assert!(!dominates(&p(1.0, 3.0), &p(3.0, 1.0)));
        assert!(!dominates(&p(3.0, 1.0), &p(1.0, 3.0)));
        assert!(!dominates(&p(1.0, 1.0), &p(1.0, 1.0)));
        assert!(dominates(&p(1.0, 1.0), &p(1.0, 2.0)));
    }

    #[test]
    fn hypervolume_examples() {
        let r = ReferencePoint::default();
        assert_eq!(hypervolume(&[], &r).unwrap(), 0.0);
        assert_eq!(hypervolume(&[p(1.0, 1.0)], &r).unwrap(), 33.0);
        assert_eq!(hypervolume(&[p(1.0, 6.0), p(2.0, 2.0)], &r).unwrap(), 26.0);
        assert_eq!(hypervolume(&[p(5.0, 1.0), p(1.0, 13.0)], &r).unwrap(), 0.0);
        assert!(hypervolume(&[p(f64::NAN, 1.0)], &r).is_err());
    }

    #[test]
    fn chvi_examples() {
        let r = ReferencePoint::default();
        assert_eq!(chvi(1, &[p(1.0, 1.0), p(2.0, 2.0)], &r).unwrap(), 0.0);
        let pts = [p(1.0, 6.0), p(2.0, 2.0)];
        assert_eq!(chvi(0, &pts, &r).unwrap(), 6.0);
        assert_eq!(chvi(1, &pts, &r).unwrap(), 8.0);
        assert!(matches!(
            chvi(2, &pts, &r),
            Err(MooError::IndexOutOfRange { index: 2, len: 2 })
        ));
        // duplicates share their volume, so neither is exclusive
        let dup = [p(1.0, 1.0), p(1.0, 1.0)];
        assert_eq!(chvi(0, &dup, &r).unwrap(), 0.0);
    }

    #[test]
    fn reference_validation() {
        assert!(ReferencePoint::new(0.0, 1.0).is_err());
        assert!(ReferencePoint::new(1.0, f64::INFINITY).is_err());
        assert_eq!(
            ReferencePoint::new(4.0, 12.0).unwrap(),
            ReferencePoint::default()
        );
    }

    #[test]
    fn archive_examples() {
        let mut a = ParetoArchive::new();
        a.insert(p(1.0, 1.0), "a", 0);
        assert!(!a.insert(p(2.0, 2.0), "b", 0));
        assert_eq!(a.points(), vec![p(1.0, 1.0)]);

        let mut a = ParetoArchive::new();
        a.insert(p(2.0, 2.0), "a", 0);
        a.insert(p(1.0, 1.0), "b", 1);
        assert_eq!(a.points(), vec![p(1.0, 1.0)]);

        let mut a = ParetoArchive::new();
        a.insert(p(3.0, 1.0), "a", 0);
        a.insert(p(1.0, 3.0), "b", 0);
        assert_eq!(a.len(), 2);

        // re-offering the same genome at the same point is a no-op
        assert!(!a.insert(p(1.0, 3.0), "b", 2));
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn monte_carlo_single_box() {
        let (est, se) =
            hypervolume_monte_carlo(&[vec![1.0, 1.0]], &[4.0, 12.0], 200_000, 7).unwrap();
        assert!((est - 33.0).abs() < 4.0 * se + 1e-9);
        assert!(hypervolume_monte_carlo(&[vec![1.0]], &[4.0, 12.0], 10, 0).is_err());
    }

    #[test]
    fn monte_carlo_three_objectives_and_leftover_samples() {
        // Two overlapping boxes in 3-D: 1 + 1 - 0.5 = 1.5.
        let pts = vec![vec![1.0, 1.0, 1.0], vec![1.0, 1.5, 0.0]];
        // 1001 is not a cube: 10^3 stratified draws plus one independent one.
        let (est, se) = hypervolume_monte_carlo(&pts, &[2.0, 2.0, 2.0], 1001, 3).unwrap();
        assert!((est - 1.5).abs() < 4.0 * se, "{est} {se}");
        let (est, _) = hypervolume_monte_carlo(&pts, &[2.0, 2.0, 2.0], 1_000_000, 3).unwrap();
        assert!((est - 1.5).abs() < 1e-2, "{est}");
        assert_eq!(
            hypervolume_monte_carlo(&pts, &[2.0, 2.0, 2.0], 0, 3).unwrap(),
            (0.0, 0.0)
        );
    }
}
