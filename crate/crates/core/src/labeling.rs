//! Per-point semantic labels from primitive centers, symmetry-aware
//! cross-entropy, oracle labeling of observations and centralization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{axis_rotation, PointCloud, Sim3Transform, Vec3};
use crate::primitive::PrimitiveSet;

pub type Label = u32;

/// Outlier class; never a primitive index.
pub const DUST: Label = u32::MAX;

pub const DEFAULT_DUST_RADIUS: f64 = 0.1;

/// Rotational symmetry about an axis through the canonical origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetrySpec {
    #[serde(with = "crate::serde_vec3")]
    pub axis: Vec3,
    /// Rotation angles in degrees; always contains 0.
    pub angles: Vec<f64>,
}

impl Default for SymmetrySpec {
    fn default() -> Self {
        Self::none()
    }
}

impl SymmetrySpec {
    pub fn none() -> Self {
        Self {
            axis: Vec3::y(),
            angles: vec![0.0],
        }
    }

    /// `{i·60° | i = 0..5}` about `axis`.
    pub fn sixfold(axis: Vec3) -> Self {
        Self {
            axis: axis.normalize(),
            angles: (0..6).map(|i| 60.0 * i as f64).collect(),
        }
    }

    pub fn is_symmetric(&self) -> bool {
        self.angles.len() > 1
    }

    pub fn contains(&self, degrees: f64) -> bool {
        self.angles.iter().any(|a| {
            let d = (a - degrees).rem_euclid(360.0);
            d.min(360.0 - d) < 1e-9
        })
    }
}

/// Points with one label each (`DUST` for outliers).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabeledPointCloud {
    pub points: PointCloud,
    pub labels: Vec<Label>,
}

impl LabeledPointCloud {
    pub fn new(points: PointCloud, labels: Vec<Label>) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::LengthMismatch(points.len(), labels.len()));
        }
        Ok(Self { points, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Applies a transform to the points, keeping labels.
    pub fn transformed(&self, t: &Sim3Transform) -> Self {
        Self {
            points: t.apply(&self.points),
            labels: self.labels.clone(),
        }
    }

    pub fn distinct_labels(&self) -> Vec<Label> {
        let mut l: Vec<Label> = self.labels.iter().copied().filter(|&l| l != DUST).collect();
        l.sort_unstable();
        l.dedup();
        l
    }
}

/// Per-label means of the observed points, sorted by label.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SemanticCenters {
    pub labels: Vec<Label>,
    pub centers: Vec<Vec3>,
    pub counts: Vec<usize>,
}

impl SemanticCenters {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, label: Label) -> Option<&Vec3> {
        self.labels.binary_search(&label).ok().map(|i| &self.centers[i])
    }

    pub fn transformed(&self, t: &Sim3Transform) -> Self {
        Self {
            labels: self.labels.clone(),
            centers: self.centers.iter().map(|c| t.apply_point(c)).collect(),
            counts: self.counts.clone(),
        }
    }
}

fn nearest_label(p: &Vec3, centers: &[Vec3]) -> (Label, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = (p - c).norm_squared();
        // strict comparison keeps the lowest index on ties
        if d < best.1 {
            best = (j as Label, d);
        }
    }
    (best.0, best.1.sqrt())
}

/// Index of the closest primitive center for every point.
pub fn assign_labels(cloud: &PointCloud, ps: &PrimitiveSet) -> Vec<Label> {
    let centers = ps.centers();
    cloud.iter().map(|p| nearest_label(p, &centers).0).collect()
}

/// Labels against centers rotated by `degrees` about the symmetry axis.
pub fn rotated_labels(cloud: &PointCloud, ps: &PrimitiveSet, sym: &SymmetrySpec, degrees: f64) -> Result<Vec<Label>> {
    if !sym.contains(degrees) {
        return Err(Error::AngleNotInSpec(degrees));
    }
    if degrees == 0.0 {
        return Ok(assign_labels(cloud, ps));
    }
    let rot = axis_rotation(&sym.axis, degrees);
    let centers: Vec<Vec3> = ps.primitives.iter().map(|p| rot * p.center).collect();
    Ok(cloud.iter().map(|p| nearest_label(p, &centers).0).collect())
}

/// Minimum over the symmetry angles of the mean cross-entropy between
/// predicted class distributions (`N_c + 1` columns, the last being dust)
/// and the rotated labels. Returns `(loss, minimizing angle)`.
pub fn symmetric_cross_entropy(
    pred: &[Vec<f64>],
    cloud: &PointCloud,
    ps: &PrimitiveSet,
    sym: &SymmetrySpec,
) -> Result<(f64, f64)> {
    if pred.len() != cloud.len() {
        return Err(Error::LengthMismatch(pred.len(), cloud.len()));
    }
    if cloud.is_empty() {
        return Err(Error::EmptyList);
    }
    let classes = ps.len() + 1;
    for (row, p) in pred.iter().enumerate() {
        let sum: f64 = p.iter().sum();
        if p.len() != classes || p.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::MalformedDistribution { row });
        }
    }
    let mut best = (f64::INFINITY, sym.angles[0]);
    for &angle in &sym.angles {
        let labels = rotated_labels(cloud, ps, sym, angle)?;
        let ce = pred.iter().zip(&labels).map(|(p, &l)| -p[l as usize].ln()).sum::<f64>() / pred.len() as f64;
        if ce < best.0 {
            best = (ce, angle);
        }
    }
    Ok(best)
}

/// Label corruption and outlier handling for oracle labeling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelNoise {
    /// Probability of replacing a non-dust label by a uniformly random wrong one.
    pub flip_fraction: f64,
    pub dust_radius: f64,
    pub seed: u64,
}

impl Default for LabelNoise {
    fn default() -> Self {
        Self {
            flip_fraction: 0.0,
            dust_radius: DEFAULT_DUST_RADIUS,
            seed: 0,
        }
    }
}

/// Labels an observation using the ground-truth pose: points are mapped to
/// the canonical frame, assigned their nearest center, marked `DUST` beyond
/// `dust_radius`, and optionally flipped.
pub fn oracle_label_observation(
    observed: &PointCloud,
    gt: &Sim3Transform,
    ps: &PrimitiveSet,
    noise: &LabelNoise,
) -> LabeledPointCloud {
    let inv = gt.inverse();
    let centers = ps.centers();
    let n_c = centers.len() as Label;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let labels = observed
        .iter()
        .map(|p| {
            let (label, dist) = nearest_label(&inv.apply_point(p), &centers);
            if dist > noise.dust_radius {
                return DUST;
            }
            if n_c > 1 && noise.flip_fraction > 0.0 && rng.random::<f64>() < noise.flip_fraction {
                let other = rng.random_range(0..n_c - 1);
                return if other >= label { other + 1 } else { other };
            }
            label
        })
        .collect();
    LabeledPointCloud {
        points: observed.clone(),
        labels,
    }
}

/// Replaces each non-dust label, with probability `fraction`, by a uniformly
/// drawn different label in `0..n_labels`.
pub fn flip_labels(lc: &LabeledPointCloud, fraction: f64, n_labels: usize, seed: u64) -> LabeledPointCloud {
    let n_c = n_labels as Label;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = lc
        .labels
        .iter()
        .map(|&label| {
            if label == DUST || n_c < 2 || fraction <= 0.0 || rng.random::<f64>() >= fraction {
                return label;
            }
            let other = rng.random_range(0..n_c - 1);
            if other >= label {
                other + 1
            } else {
                other
            }
        })
        .collect();
    LabeledPointCloud {
        points: lc.points.clone(),
        labels,
    }
}

/// Minimum number of distinct labels needed to form quadruples.
pub const MIN_LABELS: usize = 4;

pub fn centralize(lc: &LabeledPointCloud) -> Result<SemanticCenters> {
    centralize_with(lc, 1)
}

/// Per-label point means, dropping labels with fewer than `min_points` points.
pub fn centralize_with(lc: &LabeledPointCloud, min_points: usize) -> Result<SemanticCenters> {
    centralize_trimmed(lc, min_points, 0.0)
}

/// Like [`centralize_with`], but when `trim > 0` each label's mean skips
/// points farther from the label's medoid than `trim` times the median
/// distance to it.
pub fn centralize_trimmed(lc: &LabeledPointCloud, min_points: usize, trim: f64) -> Result<SemanticCenters> {
    let mut order: Vec<usize> = (0..lc.len()).filter(|&i| lc.labels[i] != DUST).collect();
    order.sort_by_key(|&i| (lc.labels[i], i));
    let mut out = SemanticCenters::default();
    for group in order.chunk_by(|&a, &b| lc.labels[a] == lc.labels[b]) {
        if group.len() < min_points.max(1) {
            continue;
        }
        let points: Vec<Vec3> = group.iter().map(|&i| lc.points.points[i]).collect();
        let kept = if trim > 0.0 {
            trim_to_core(&points, trim)
        } else {
            points
        };
        let sum: Vec3 = kept.iter().sum();
        out.labels.push(lc.labels[group[0]]);
        out.centers.push(sum / kept.len() as f64);
        out.counts.push(kept.len());
    }
    if out.len() < MIN_LABELS {
        return Err(Error::TooFewLabels {
            needed: MIN_LABELS,
            got: out.len(),
        });
    }
    Ok(out)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn trim_to_core(points: &[Vec3], trim: f64) -> Vec<Vec3> {
    if points.len() < 3 {
        return points.to_vec();
    }
    let spread = |c: &Vec3| points.iter().map(|p| (p - c).norm()).sum::<f64>();
    let middle = points
        .iter()
        .min_by(|a, b| spread(a).total_cmp(&spread(b)))
        .copied()
        .expect("non-empty");
    let dist: Vec<f64> = points.iter().map(|p| (p - middle).norm()).collect();
    let cutoff = trim * median(&mut dist.clone());
    let kept: Vec<Vec3> = points
        .iter()
        .zip(&dist)
        .filter(|(_, &d)| d <= cutoff)
        .map(|(p, _)| *p)
        .collect();
    if kept.is_empty() {
        points.to_vec()
    } else {
        kept
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitive::SpherePrimitive;
    use rand::Rng;

    fn ring(n: usize, radius: f64) -> PrimitiveSet {
        PrimitiveSet::new(
            "ring",
            (0..n)
                .map(|j| {
                    let a = (j as f64 * 360.0 / n as f64).to_radians();
                    // ring in the x-z plane, symmetric about +y
                    SpherePrimitive::new(Vec3::new(radius * a.cos(), 0.0, -radius * a.sin()), 0.05)
                })
                .collect(),
        )
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Vec3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-0.3..0.3),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect(),
        )
    }

    fn one_hot(labels: &[Label], classes: usize) -> Vec<Vec<f64>> {
        labels
            .iter()
            .map(|&l| {
                let mut row = vec![0.0; classes];
                row[l as usize] = 1.0;
                row
            })
            .collect()
    }

    #[test]
    fn nearest_center_and_ties() {
        let single = PrimitiveSet::new("s", vec![SpherePrimitive::new(Vec3::new(0.3, 0.0, 0.0), 0.1)]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = random_cloud(&mut rng, 20);
        assert!(assign_labels(&cloud, &single).iter().all(|&l| l == 0));

        let pair = PrimitiveSet::new(
            "p",
            vec![
                SpherePrimitive::new(Vec3::new(-1.0, 0.0, 0.0), 0.1),
                SpherePrimitive::new(Vec3::new(1.0, 0.0, 0.0), 0.1),
            ],
        );
        let pts = PointCloud::new(vec![Vec3::new(0.9, 0.0, 0.0), Vec3::zeros()]);
        assert_eq!(assign_labels(&pts, &pair), vec![1, 0]);
    }

    #[test]
    fn rotated_labels_permute_on_symmetric_ring() {
        let ps = ring(6, 0.5);
        let sym = SymmetrySpec::sixfold(Vec3::y());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cloud = random_cloud(&mut rng, 300);
        let base = assign_labels(&cloud, &ps);
        assert_eq!(rotated_labels(&cloud, &ps, &sym, 0.0).unwrap(), base);

        // Brute force: rotating the ring by 60° moves center j onto center j+1.
        let rot = rotated_labels(&cloud, &ps, &sym, 60.0).unwrap();
        let centers = ps.centers();
        for (p, &l) in cloud.iter().zip(&rot) {
            let by_hand = (0..6)
                .min_by(|&a, &b| {
                    let ca = centers[(a + 1) % 6];
                    let cb = centers[(b + 1) % 6];
                    (p - ca).norm().total_cmp(&(p - cb).norm())
                })
                .unwrap();
            assert_eq!(l as usize, by_hand);
        }
        // fixed permutation of the unrotated labels
        for (&b, &r) in base.iter().zip(&rot) {
            assert_eq!(r, (b + 5) % 6);
        }
        assert!(matches!(
            rotated_labels(&cloud, &ps, &sym, 33.0),
            Err(Error::AngleNotInSpec(_))
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let ps = ring(6, 0.5);
        let sym = SymmetrySpec::sixfold(Vec3::y());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud = random_cloud(&mut rng, 200);

        let l0 = assign_labels(&cloud, &ps);
        let (loss, angle) = symmetric_cross_entropy(&one_hot(&l0, 7), &cloud, &ps, &sym).unwrap();
        assert_eq!((loss, angle), (0.0, 0.0));

        let l60 = rotated_labels(&cloud, &ps, &sym, 60.0).unwrap();
        let (loss, angle) = symmetric_cross_entropy(&one_hot(&l60, 7), &cloud, &ps, &sym).unwrap();
        assert_eq!((loss, angle), (0.0, 60.0));

        let uniform = vec![vec![1.0 / 7.0; 7]; cloud.len()];
        let (loss, _) = symmetric_cross_entropy(&uniform, &cloud, &ps, &sym).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);

        let mut bad = uniform.clone();
        bad[4][0] += 0.1;
        assert!(matches!(
            symmetric_cross_entropy(&bad, &cloud, &ps, &sym),
            Err(Error::MalformedDistribution { row: 4 })
        ));
    }

    #[test]
    fn cross_entropy_invariant_under_symmetry_rotation() {
        let ps = ring(6, 0.5);
        let sym = SymmetrySpec::sixfold(Vec3::y());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cloud = random_cloud(&mut rng, 150);
        let pred: Vec<Vec<f64>> = (0..cloud.len())
            .map(|_| {
                let raw: Vec<f64> = (0..7).map(|_| rng.random_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            })
            .collect();
        let (base, _) = symmetric_cross_entropy(&pred, &cloud, &ps, &sym).unwrap();
        for &phi in &sym.angles {
            let rot = Sim3Transform {
                scale: 1.0,
                rotation: axis_rotation(&sym.axis, phi),
                translation: Vec3::zeros(),
            };
            let (loss, _) = symmetric_cross_entropy(&pred, &rot.apply(&cloud), &ps, &sym).unwrap();
            assert!((loss - base).abs() <= 1e-12);
        }
    }

    #[test]
    fn oracle_labels_and_dust() {
        let ps = ring(6, 0.5);
        let gt = Sim3Transform {
            scale: 0.3,
            rotation: axis_rotation(&Vec3::new(1.0, 2.0, 0.5), 40.0),
            translation: Vec3::new(0.1, -0.2, 1.0),
        };
        let mut pts: Vec<Vec3> = ps.centers().iter().map(|c| gt.apply_point(c)).collect();
        pts.push(gt.apply_point(&Vec3::new(0.0, 1.0, 0.0)));
        let lc = oracle_label_observation(&PointCloud::new(pts), &gt, &ps, &LabelNoise::default());
        assert_eq!(lc.labels, vec![0, 1, 2, 3, 4, 5, DUST]);
    }

    #[test]
    fn label_flip_count_is_binomial() {
        let ps = ring(6, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec3> = (0..10_000)
            .map(|_| ps.primitives[rng.random_range(0..6)].center + Vec3::new(rng.random_range(-0.02..0.02), 0.0, 0.0))
            .collect();
        let cloud = PointCloud::new(pts);
        let gt = Sim3Transform::identity();
        let clean = oracle_label_observation(&cloud, &gt, &ps, &LabelNoise::default());
        let noisy = oracle_label_observation(
            &cloud,
            &gt,
            &ps,
            &LabelNoise {
                flip_fraction: 0.1,
                seed: 9,
                ..LabelNoise::default()
            },
        );
        let flipped = clean.labels.iter().zip(&noisy.labels).filter(|(a, b)| a != b).count();
        assert!((900..=1100).contains(&flipped), "flipped {flipped}");
        assert!(noisy.labels.iter().all(|&l| l < 6));
    }

    #[test]
    fn centralize_examples() {
        let pts = PointCloud::new(vec![
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(3.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(5.0, 5.0, 5.0),
            Vec3::new(9.0, 9.0, 9.0),
        ]);
        let lc = LabeledPointCloud::new(pts.clone(), vec![7, 7, 2, 3, 1, DUST]).unwrap();
        let c = centralize(&lc).unwrap();
        assert_eq!(c.labels, vec![1, 2, 3, 7]);
        assert_eq!(c.get(7), Some(&Vec3::new(2.0, 0.0, 0.0)));
        assert_eq!(c.counts, vec![1, 1, 1, 2]);

        let all_dust = LabeledPointCloud::new(pts, vec![DUST; 6]).unwrap();
        assert!(matches!(centralize(&all_dust), Err(Error::TooFewLabels { got: 0, .. })));
    }

    #[test]
    fn centralize_ignores_point_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts: Vec<Vec3> = (0..200)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let labels: Vec<Label> = (0..200)
            .map(|_| {
                if rng.random::<f64>() < 0.1 {
                    DUST
                } else {
                    rng.random_range(0..10)
                }
            })
            .collect();
        let a = centralize(&LabeledPointCloud::new(PointCloud::new(pts.clone()), labels.clone()).unwrap()).unwrap();
        let mut idx: Vec<usize> = (0..200).collect();
        idx.reverse();
        let b = centralize(
            &LabeledPointCloud::new(
                PointCloud::new(idx.iter().map(|&i| pts[i]).collect()),
                idx.iter().map(|&i| labels[i]).collect(),
            )
            .unwrap(),
        )
        .unwrap();
        assert_eq!(a.labels, b.labels);
        for (x, y) in a.centers.iter().zip(&b.centers) {
            assert!((x - y).amax() < 1e-12);
        }
    }

    #[test]
    fn trimmed_means_skip_stray_points() {
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for l in 0..4u32 {
            let c = Vec3::new(l as f64, 0.0, 0.0);
            for k in 0..6 {
                let d = [Vec3::x(), -Vec3::x(), Vec3::y(), -Vec3::y(), Vec3::z(), -Vec3::z()][k];
                points.push(c + 0.01 * d);
                labels.push(l);
            }
        }
        points.push(Vec3::new(0.0, 5.0, 0.0));
        labels.push(2);
        let lc = LabeledPointCloud::new(PointCloud::new(points), labels).unwrap();

        let plain = centralize(&lc).unwrap();
        assert!((plain.get(2).unwrap() - Vec3::new(2.0, 0.0, 0.0)).norm() > 0.5);
        let trimmed = centralize_trimmed(&lc, 1, 2.5).unwrap();
        for l in 0..4u32 {
            assert!((trimmed.get(l).unwrap() - Vec3::new(l as f64, 0.0, 0.0)).norm() < 1e-12);
        }
        assert_eq!(trimmed.counts, vec![6, 6, 6, 6]);
    }

    #[test]
    fn flipped_labels_always_change_and_keep_dust() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cloud = random_cloud(&mut rng, 400);
        let labels: Vec<Label> = (0..400)
            .map(|i| if i % 10 == 0 { DUST } else { (i % 7) as Label })
            .collect();
        let lc = LabeledPointCloud::new(cloud, labels).unwrap();
        assert_eq!(flip_labels(&lc, 0.0, 7, 1), lc);
        let all = flip_labels(&lc, 1.0, 7, 1);
        for (a, b) in lc.labels.iter().zip(&all.labels) {
            if *a == DUST {
                assert_eq!(*b, DUST);
            } else {
                assert!(*b != *a && *b < 7);
            }
        }
        assert_eq!(flip_labels(&lc, 0.3, 7, 5), flip_labels(&lc, 0.3, 7, 5));
    }
}
