//! End-to-end estimation from a labeled observation: centralize, optimize
//! the latent shape, then align the decoded shape to the observed points.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::basis::{LatentCode, LinearShapeBasis};
use crate::descriptor::{descriptor_residual, sample_usable_quadruples, shape_descriptor};
use crate::error::{Error, Result};
use crate::geometry::{umeyama_align_weighted, Alignment, Mat3, Sim3Transform, Vec3};
use crate::labeling::{centralize_trimmed, LabeledPointCloud, SemanticCenters, DUST};
use crate::optimizer::{optimize_shape, optimize_shape_ransac, OptimizationTrace, OptimizerConfig};
use crate::primitive::PrimitiveSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateConfig {
    pub optimizer: OptimizerConfig,
    /// Weight every observed label equally in the pose fit instead of
    /// weighting by point count.
    pub uniform_label_weights: bool,
    pub min_points_per_label: usize,
    /// Per-label means drop points farther than this many median distances
    /// from the label's coordinate-wise median; 0 disables trimming.
    pub center_trim: f64,
    /// Rounds of pose re-fitting on points whose residual is within
    /// `pose_trim` median residuals; 0 disables.
    pub pose_refits: usize,
    pub pose_trim: f64,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            uniform_label_weights: false,
            min_points_per_label: 5,
            center_trim: 2.5,
            pose_refits: 2,
            pose_trim: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub centralize_ms: f64,
    pub optimize_ms: f64,
    pub pose_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationResult {
    pub z_hat: LatentCode,
    pub pose: Sim3Transform,
    /// Mean squared point-to-center distance after alignment.
    pub alignment_residual: f64,
    pub descriptor_residual: f64,
    pub observed_labels: usize,
    pub timings: StageTimings,
    pub trace: OptimizationTrace,
}

#[derive(Serialize, Deserialize)]
struct ResultJson {
    z: Vec<f64>,
    scale: f64,
    rotation: [f64; 9],
    translation: [f64; 3],
    residuals: BTreeMap<String, f64>,
    timings_ms: BTreeMap<String, f64>,
    observed_labels: usize,
}

fn rotation_row_major(r: &Mat3) -> [f64; 9] {
    std::array::from_fn(|i| r[(i / 3, i % 3)])
}

impl EstimationResult {
    pub fn to_json(&self) -> serde_json::Value {
        let t = &self.pose.translation;
        let json = ResultJson {
            z: self.z_hat.0.clone(),
            scale: self.pose.scale,
            rotation: rotation_row_major(&self.pose.rotation),
            translation: [t.x, t.y, t.z],
            residuals: BTreeMap::from([
                ("alignment".to_string(), self.alignment_residual),
                ("descriptor".to_string(), self.descriptor_residual),
            ]),
            timings_ms: BTreeMap::from([
                ("centralize".to_string(), self.timings.centralize_ms),
                ("optimize".to_string(), self.timings.optimize_ms),
                ("pose".to_string(), self.timings.pose_ms),
                ("total".to_string(), self.timings.total_ms),
            ]),
            observed_labels: self.observed_labels,
        };
        serde_json::to_value(json).expect("plain data serializes")
    }

    /// Parses the JSON written by [`Self::to_json`]; the trace is not stored.
    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        let j: ResultJson = serde_json::from_value(value)?;
        let rotation = Mat3::from_row_slice(&j.rotation);
        let pose = Sim3Transform::new(j.scale, rotation, Vec3::from(j.translation))?;
        let get = |m: &BTreeMap<String, f64>, k: &str| m.get(k).copied().unwrap_or(0.0);
        Ok(Self {
            z_hat: LatentCode(j.z),
            pose,
            alignment_residual: get(&j.residuals, "alignment"),
            descriptor_residual: get(&j.residuals, "descriptor"),
            observed_labels: j.observed_labels,
            timings: StageTimings {
                centralize_ms: get(&j.timings_ms, "centralize"),
                optimize_ms: get(&j.timings_ms, "optimize"),
                pose_ms: get(&j.timings_ms, "pose"),
                total_ms: get(&j.timings_ms, "total"),
            },
            trace: OptimizationTrace::default(),
        })
    }
}

/// Similarity mapping the decoded shape onto the observation, from every
/// non-dust point paired with the decoded center of its label.
pub fn recover_pose(lc: &LabeledPointCloud, decoded: &PrimitiveSet) -> Result<Alignment> {
    recover_pose_weighted(lc, decoded, false)
}

pub fn recover_pose_weighted(
    lc: &LabeledPointCloud,
    decoded: &PrimitiveSet,
    uniform_per_label: bool,
) -> Result<Alignment> {
    recover_pose_trimmed(lc, decoded, uniform_per_label, 0, 0.0)
}

/// Pose fit followed by `refits` rounds that zero the weight of points whose
/// residual exceeds `trim` times the median residual of the previous fit.
pub fn recover_pose_trimmed(
    lc: &LabeledPointCloud,
    decoded: &PrimitiveSet,
    uniform_per_label: bool,
    refits: usize,
    trim: f64,
) -> Result<Alignment> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &l in lc.labels.iter().filter(|&&l| l != DUST) {
        *counts.entry(l).or_default() += 1;
    }
    let mut src = Vec::new();
    let mut dst = Vec::new();
    let mut base = Vec::new();
    for (p, &l) in lc.points.iter().zip(&lc.labels) {
        if l == DUST {
            continue;
        }
        let c = decoded.primitives.get(l as usize).ok_or(Error::MissingLabel(l))?.center;
        src.push(c);
        dst.push(*p);
        base.push(if uniform_per_label {
            1.0 / counts[&l] as f64
        } else {
            1.0
        });
    }
    if src.is_empty() {
        return Err(Error::DegenerateConfiguration("no labeled points"));
    }
    let mut alignment = umeyama_align_weighted(&src, &dst, &base)?;
    for _ in 0..refits {
        let residuals: Vec<f64> = src
            .iter()
            .zip(&dst)
            .map(|(s, d)| (alignment.transform.apply_point(s) - d).norm())
            .collect();
        let mut sorted = residuals.clone();
        sorted.sort_by(f64::total_cmp);
        let cutoff = trim * sorted[sorted.len() / 2];
        let weights: Vec<f64> = base
            .iter()
            .zip(&residuals)
            .map(|(&w, &r)| if r <= cutoff { w } else { 0.0 })
            .collect();
        match umeyama_align_weighted(&src, &dst, &weights) {
            Ok(refined) => alignment = refined,
            Err(Error::DegenerateConfiguration(_)) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(alignment)
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Shape and pose of the object behind a labeled observation.
pub fn estimate(lc: &LabeledPointCloud, basis: &LinearShapeBasis, cfg: &EstimateConfig) -> Result<EstimationResult> {
    let start = Instant::now();
    let centers: SemanticCenters = centralize_trimmed(lc, cfg.min_points_per_label, cfg.center_trim)?;
    let centralize_ms = ms(start);

    let t = Instant::now();
    let (z_hat, trace) = if cfg.optimizer.ransac.is_some() {
        optimize_shape_ransac(&centers, basis, &cfg.optimizer)?
    } else {
        optimize_shape(&centers, basis, &cfg.optimizer)?
    };
    let optimize_ms = ms(t);

    let t = Instant::now();
    let decoded = basis.decode(&z_hat)?;
    let kept: std::collections::BTreeSet<u32> = centers.labels.iter().copied().collect();
    // Points whose label was dropped by centralization are treated as dust.
    let used = LabeledPointCloud {
        points: lc.points.clone(),
        labels: lc
            .labels
            .iter()
            .map(|l| if kept.contains(l) { *l } else { DUST })
            .collect(),
    };
    let alignment = recover_pose_trimmed(
        &used,
        &decoded,
        cfg.uniform_label_weights,
        cfg.pose_refits,
        cfg.pose_trim,
    )?;
    let pose_ms = ms(t);

    let qs = sample_usable_quadruples(&centers, cfg.optimizer.quadruples, cfg.optimizer.seed)?;
    let descriptor_residual =
        descriptor_residual(&shape_descriptor(&centers, &qs)?, &shape_descriptor(&decoded, &qs)?)?;

    Ok(EstimationResult {
        z_hat,
        pose: alignment.transform,
        alignment_residual: alignment.residual,
        descriptor_residual,
        observed_labels: centers.len(),
        timings: StageTimings {
            centralize_ms,
            optimize_ms,
            pose_ms,
            total_ms: ms(start),
        },
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::{centralize_with, Label};
    use crate::primitive::SpherePrimitive;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(n: usize, rng: &mut ChaCha8Rng) -> PrimitiveSet {
        PrimitiveSet::new(
            "t",
            (0..n)
                .map(|_| {
                    SpherePrimitive::new(
                        Vec3::new(
                            rng.random_range(-0.5..0.5),
                            rng.random_range(-0.5..0.5),
                            rng.random_range(-0.5..0.5),
                        ),
                        0.05,
                    )
                })
                .collect(),
        )
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Sim3Transform {
        Sim3Transform {
            scale: rng.random_range(0.1..2.0),
            rotation: Sim3Transform::random_rotation(rng),
            translation: Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.5..3.0),
            ),
        }
    }

    #[test]
    fn recovers_constructed_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let set = random_set(12, &mut rng);
            let truth = random_pose(&mut rng);
            let labels: Vec<Label> = (0..12)
                .flat_map(|l| std::iter::repeat_n(l, 1 + l as usize % 3))
                .collect();
            let points: Vec<Vec3> = labels
                .iter()
                .map(|&l| truth.apply_point(&set.primitives[l as usize].center))
                .collect();
            let lc = LabeledPointCloud::new(points.into(), labels).unwrap();
            let al = recover_pose(&lc, &set).unwrap();
            assert!(al.transform.max_component_diff(&truth) <= 1e-8);

            // Dust points anywhere leave the pose unchanged.
            let mut with_dust = lc.clone();
            with_dust.points.points.push(Vec3::new(100.0, -3.0, 7.0));
            with_dust.labels.push(DUST);
            assert_eq!(recover_pose(&with_dust, &set).unwrap().transform, al.transform);
        }
    }

    #[test]
    fn single_label_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let set = random_set(5, &mut rng);
        let points: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, 0.0, 1.0)).collect();
        let lc = LabeledPointCloud::new(points.into(), vec![3; 10]).unwrap();
        assert!(matches!(
            recover_pose(&lc, &set),
            Err(Error::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn uniform_label_weights_match_center_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set = random_set(8, &mut rng);
        let truth = random_pose(&mut rng);
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for l in 0..8u32 {
            for _ in 0..(1 + 5 * (l as usize % 2)) {
                let noise = Vec3::new(rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02), 0.0);
                points.push(truth.apply_point(&(set.primitives[l as usize].center + noise)));
                labels.push(l);
            }
        }
        let lc = LabeledPointCloud::new(points.into(), labels).unwrap();
        let centers = centralize_with(&lc, 1).unwrap();
        let src: Vec<Vec3> = centers
            .labels
            .iter()
            .map(|&l| set.primitives[l as usize].center)
            .collect();
        let ones = vec![1.0; src.len()];
        let by_center = umeyama_align_weighted(&src, &centers.centers, &ones).unwrap();
        let uniform = recover_pose_weighted(&lc, &set, true).unwrap();
        assert!(uniform.transform.max_component_diff(&by_center.transform) < 1e-9);
    }

    #[test]
    fn all_dust_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let set = random_set(8, &mut rng);
        let basis = LinearShapeBasis::constant(&set, 2);
        let points: Vec<Vec3> = (0..50).map(|i| Vec3::new(i as f64, 1.0, 2.0)).collect();
        let lc = LabeledPointCloud::new(points.into(), vec![DUST; 50]).unwrap();
        assert!(matches!(
            estimate(&lc, &basis, &EstimateConfig::default()),
            Err(Error::TooFewLabels { .. })
        ));
    }

    #[test]
    fn estimate_recovers_pose_of_exact_observation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let set = random_set(16, &mut rng);
        let basis = LinearShapeBasis::constant(&set, 2);
        let truth = random_pose(&mut rng);
        let labels: Vec<Label> = (0..16).flat_map(|l| [l, l]).collect();
        let points: Vec<Vec3> = labels
            .iter()
            .map(|&l| truth.apply_point(&set.primitives[l as usize].center))
            .collect();
        let lc = LabeledPointCloud::new(points.into(), labels).unwrap();
        let cfg = EstimateConfig {
            optimizer: OptimizerConfig {
                quadruples: 500,
                iterations: 5,
                ..OptimizerConfig::default()
            },
            min_points_per_label: 1,
            ..EstimateConfig::default()
        };
        let result = estimate(&lc, &basis, &cfg).unwrap();
        assert!(result.pose.max_component_diff(&truth) < 1e-8);
        assert_eq!(result.observed_labels, 16);
        assert!(result.alignment_residual < 1e-12);

        let back = EstimationResult::from_json(result.to_json()).unwrap();
        assert_eq!(back.pose, result.pose);
        assert_eq!(back.z_hat, result.z_hat);
        let keys: Vec<String> = result.to_json().as_object().unwrap().keys().cloned().collect();
        for k in ["z", "scale", "rotation", "translation", "residuals", "timings_ms"] {
            assert!(keys.iter().any(|x| x == k), "{k}");
        }
    }

    #[test]
    fn pose_refits_ignore_mislabeled_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let set = random_set(10, &mut rng);
        let truth = random_pose(&mut rng);
        let labels: Vec<Label> = (0..10).flat_map(|l| [l; 6]).collect();
        let mut points: Vec<Vec3> = labels
            .iter()
            .map(|&l| truth.apply_point(&set.primitives[l as usize].center))
            .collect();
        points[3] = truth.apply_point(&set.primitives[7].center);
        points[20] = truth.apply_point(&set.primitives[1].center);
        let lc = LabeledPointCloud::new(points.into(), labels).unwrap();

        let plain = recover_pose(&lc, &set).unwrap();
        assert!(plain.transform.max_component_diff(&truth) > 1e-3);
        let refit = recover_pose_trimmed(&lc, &set, false, 2, 3.0).unwrap();
        assert!(refit.transform.max_component_diff(&truth) < 1e-8);
    }
}
