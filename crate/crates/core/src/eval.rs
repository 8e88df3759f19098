//! Benchmark metrics: Chamfer distance, oriented-box IoU, pose errors and
//! average precision.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::basis::{LatentCode, LinearShapeBasis};
use crate::error::{Error, Result};
use crate::geometry::{axis_rotation, rotation_angle_deg, vector_angle_deg, Mat3, Sim3Transform, Vec3};
use crate::io::GroundTruth;
use crate::labeling::SymmetrySpec;

/// Symmetric squared Chamfer distance: mean squared nearest-neighbor distance
/// from `a` to `b` plus from `b` to `a`. Zero for empty input.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    one_sided(a, b) + one_sided(b, a)
}

fn one_sided(from: &[Vec3], to: &[Vec3]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|p| to.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min))
        .sum();
    total / from.len() as f64
}

/// Box of the given extents around `center` in a canonical frame, placed in
/// the world by `pose`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub pose: Sim3Transform,
    #[serde(with = "crate::serde_vec3")]
    pub extents: Vec3,
    #[serde(with = "crate::serde_vec3", default = "Vec3::zeros")]
    pub center: Vec3,
}

impl OrientedBox {
    pub fn new(pose: Sim3Transform, extents: Vec3, center: Vec3) -> Result<Self> {
        if extents.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(Error::InvalidConfig("box extents must be positive".into()));
        }
        Ok(Self { pose, extents, center })
    }

    /// Tight box around canonical points.
    pub fn around(points: &[Vec3], pose: Sim3Transform) -> Result<Self> {
        let cloud = crate::geometry::PointCloud::new(points.to_vec());
        let (lo, hi) = cloud.bounds().ok_or(Error::EmptyList)?;
        Self::new(pose, (hi - lo).map(|e| e.max(1e-12)), (lo + hi) / 2.0)
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let h = self.extents / 2.0;
        std::array::from_fn(|i| {
            let sign = |bit: usize| if i >> bit & 1 == 1 { 1.0 } else { -1.0 };
            self.pose
                .apply_point(&(self.center + Vec3::new(sign(0) * h.x, sign(1) * h.y, sign(2) * h.z)))
        })
    }

    pub fn contains(&self, world: &Vec3) -> bool {
        let local = self.pose.rotation.transpose() * (world - self.pose.translation) / self.pose.scale - self.center;
        let h = self.extents / 2.0;
        local.x.abs() <= h.x && local.y.abs() <= h.y && local.z.abs() <= h.z
    }

    pub fn volume(&self) -> f64 {
        self.extents.product() * self.pose.scale.powi(3)
    }
}

pub const DEFAULT_IOU_RESOLUTION: usize = 50;

/// IoU estimated from a `resolution³` grid of cell centers inside each box:
/// the fraction of one box's cells lying in the other gives the intersection
/// volume, and the two estimates are averaged.
pub fn iou3d(a: &OrientedBox, b: &OrientedBox, resolution: usize) -> f64 {
    let inter = 0.5 * (a.volume() * fraction_inside(a, b, resolution) + b.volume() * fraction_inside(b, a, resolution));
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

fn fraction_inside(src: &OrientedBox, other: &OrientedBox, resolution: usize) -> f64 {
    let n = resolution.max(1);
    let h = src.extents / n as f64;
    let origin = src.center - src.extents / 2.0;
    let mut hits = 0u64;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let local = origin + Vec3::new((i as f64 + 0.5) * h.x, (j as f64 + 0.5) * h.y, (k as f64 + 0.5) * h.z);
                hits += other.contains(&src.pose.apply_point(&local)) as u64;
            }
        }
    }
    hits as f64 / (n * n * n) as f64
}

/// Rotates `pred` about the symmetry axis (in its canonical frame) to best
/// match `gt`; identity for asymmetric categories.
pub fn align_symmetric_rotation(pred: &Mat3, gt: &Mat3, sym: &SymmetrySpec) -> Mat3 {
    if !sym.is_symmetric() {
        return *pred;
    }
    let axis = sym.axis.normalize();
    // Best angle maximizes trace(gtᵀ · pred · Rot(axis, θ)).
    let m = gt.transpose() * pred;
    let k = Mat3::new(0.0, -axis.z, axis.y, axis.z, 0.0, -axis.x, -axis.y, axis.x, 0.0);
    let aat = axis * axis.transpose();
    let cos_coeff = (m * (Mat3::identity() - aat)).trace();
    let sin_coeff = (m * k).trace();
    let theta = sin_coeff.atan2(cos_coeff);
    pred * axis_rotation(&axis, theta.to_degrees())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub rotation_deg: f64,
    pub translation: f64,
    pub scale_ratio: f64,
}

/// Rotation error (deg; axis angle for symmetric categories), world-frame
/// translation error and scale ratio `s_pred / s_gt`.
pub fn pose_error(pred: &Sim3Transform, gt: &Sim3Transform, sym: &SymmetrySpec) -> PoseError {
    let rotation_deg = if sym.is_symmetric() {
        let axis = sym.axis.normalize();
        vector_angle_deg(&(pred.rotation * axis), &(gt.rotation * axis))
    } else {
        rotation_angle_deg(&pred.rotation, &gt.rotation)
    };
    PoseError {
        rotation_deg,
        translation: (pred.translation - gt.translation).norm(),
        scale_ratio: pred.scale / gt.scale,
    }
}

/// Fraction of instances with rotation error ≤ `rot_deg` and translation
/// error ≤ `trans`.
pub fn average_precision(errors: &[PoseError], rot_deg: f64, trans: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::EmptyList);
    }
    let hits = errors
        .iter()
        .filter(|e| e.rotation_deg <= rot_deg && e.translation <= trans)
        .count();
    Ok(hits as f64 / errors.len() as f64)
}

/// Fraction of IoU values at or above `threshold`.
pub fn iou_average_precision(ious: &[f64], threshold: f64) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::EmptyList);
    }
    Ok(ious.iter().filter(|&&v| v >= threshold).count() as f64 / ious.len() as f64)
}

/// Per-instance evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub id: String,
    pub category: String,
    pub rot_deg: f64,
    pub trans_m: f64,
    pub scale_ratio: f64,
    pub iou: f64,
    pub chamfer: f64,
    pub diameter: f64,
}

impl InstanceMetrics {
    pub fn pose_error(&self) -> PoseError {
        PoseError {
            rotation_deg: self.rot_deg,
            translation: self.trans_m,
            scale_ratio: self.scale_ratio,
        }
    }
}

/// Surface samples per shape when scoring an estimate.
pub const SCORE_SURFACE_POINTS: usize = 2000;

/// Scores an estimated shape and pose against a ground-truth scene record.
/// Boxes enclose each decoded shape's surface samples in its canonical frame;
/// Chamfer compares the two canonical shapes.
pub fn score_instance(
    id: &str,
    basis: &LinearShapeBasis,
    z_hat: &LatentCode,
    pose: &Sim3Transform,
    gt: &GroundTruth,
) -> Result<InstanceMetrics> {
    let gt_pose = gt.pose()?;
    let err = pose_error(pose, &gt_pose, &gt.symmetry);
    let pred_pts = basis.decode(z_hat)?.surface_points(SCORE_SURFACE_POINTS, gt.seed);
    let gt_pts = basis
        .decode(&gt.latent())?
        .surface_points(SCORE_SURFACE_POINTS, gt.seed);
    let iou = iou3d(
        &OrientedBox::around(&pred_pts, *pose)?,
        &OrientedBox::around(&gt_pts, gt_pose)?,
        DEFAULT_IOU_RESOLUTION,
    );
    Ok(InstanceMetrics {
        id: id.to_string(),
        category: gt.category.clone(),
        rot_deg: err.rotation_deg,
        trans_m: err.translation,
        scale_ratio: err.scale_ratio,
        iou,
        chamfer: chamfer(&pred_pts, &gt_pts),
        diameter: gt.diameter,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub count: usize,
    pub iou50: f64,
    pub iou75: f64,
    /// Keys like `"5deg_2cm"`.
    pub pose_ap: BTreeMap<String, f64>,
    /// Translation thresholds as a fraction of each instance's diameter,
    /// keys like `"5deg_5pct"`.
    pub relative_pose_ap: BTreeMap<String, f64>,
    pub mean_chamfer: f64,
    pub mean_rot_deg: f64,
    pub mean_trans_m: f64,
}

pub const POSE_THRESHOLDS: [(f64, f64); 4] = [(5.0, 0.02), (5.0, 0.05), (10.0, 0.02), (10.0, 0.05)];
pub const RELATIVE_POSE_THRESHOLDS: [(f64, f64); 4] = [(5.0, 0.05), (5.0, 0.10), (10.0, 0.05), (10.0, 0.10)];

fn relative_ap(items: &[InstanceMetrics], rot_deg: f64, frac: f64) -> f64 {
    items
        .iter()
        .filter(|m| m.rot_deg <= rot_deg && m.trans_m <= frac * m.diameter)
        .count() as f64
        / items.len() as f64
}

pub fn summarize(items: &[InstanceMetrics]) -> Result<MetricsReport> {
    if items.is_empty() {
        return Err(Error::EmptyList);
    }
    let errors: Vec<PoseError> = items.iter().map(InstanceMetrics::pose_error).collect();
    let ious: Vec<f64> = items.iter().map(|m| m.iou).collect();
    let mut pose_ap = BTreeMap::new();
    for (r, t) in POSE_THRESHOLDS {
        pose_ap.insert(
            format!("{r}deg_{}cm", (t * 100.0).round()),
            average_precision(&errors, r, t)?,
        );
    }
    let mut relative_pose_ap = BTreeMap::new();
    for (r, f) in RELATIVE_POSE_THRESHOLDS {
        relative_pose_ap.insert(format!("{r}deg_{}pct", (f * 100.0).round()), relative_ap(items, r, f));
    }
    let n = items.len() as f64;
    Ok(MetricsReport {
        count: items.len(),
        iou50: iou_average_precision(&ious, 0.5)?,
        iou75: iou_average_precision(&ious, 0.75)?,
        pose_ap,
        relative_pose_ap,
        mean_chamfer: items.iter().map(|m| m.chamfer).sum::<f64>() / n,
        mean_rot_deg: items.iter().map(|m| m.rot_deg).sum::<f64>() / n,
        mean_trans_m: items.iter().map(|m| m.trans_m).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveMetric {
    Iou,
    Rotation,
    Translation,
}

impl CurveMetric {
    pub fn name(&self) -> &'static str {
        match self {
            CurveMetric::Iou => "iou",
            CurveMetric::Rotation => "rotation",
            CurveMetric::Translation => "translation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub category: String,
    pub metric: CurveMetric,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrid {
    pub iou: Vec<f64>,
    pub rotation_deg: Vec<f64>,
    pub translation_m: Vec<f64>,
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        Self {
            iou: (0..=20).map(|i| i as f64 * 0.05).collect(),
            rotation_deg: (0..=30).map(|i| i as f64 * 2.0).collect(),
            translation_m: (0..=20).map(|i| i as f64 * 0.005).collect(),
        }
    }
}

/// Per-category AP curves. IoU curves count `iou ≥ threshold` and are
/// non-increasing; rotation and translation curves count errors at or below
/// the threshold (ignoring the other error) and are non-decreasing.
pub fn ap_curves(items: &[InstanceMetrics], grid: &ThresholdGrid) -> Result<Vec<CurvePoint>> {
    if items.is_empty() {
        return Err(Error::EmptyList);
    }
    let mut by_category: BTreeMap<&str, Vec<&InstanceMetrics>> = BTreeMap::new();
    for m in items {
        by_category.entry(&m.category).or_default().push(m);
    }
    let mut out = Vec::new();
    for (category, group) in by_category {
        let n = group.len() as f64;
        let frac = |pred: &dyn Fn(&InstanceMetrics) -> bool| group.iter().filter(|m| pred(m)).count() as f64 / n;
        let mut push = |metric, threshold, ap| {
            out.push(CurvePoint {
                threshold,
                category: category.to_string(),
                metric,
                ap,
            })
        };
        for &t in &grid.iou {
            push(CurveMetric::Iou, t, frac(&|m| m.iou >= t));
        }
        for &t in &grid.rotation_deg {
            push(CurveMetric::Rotation, t, frac(&|m| m.rot_deg <= t));
        }
        for &t in &grid.translation_m {
            push(CurveMetric::Translation, t, frac(&|m| m.trans_m <= t));
        }
    }
    Ok(out)
}

pub fn write_metrics_csv<W: Write>(items: &[InstanceMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record([
        "id",
        "category",
        "rot_deg",
        "trans_m",
        "scale_ratio",
        "iou",
        "chamfer",
        "diameter",
    ])
    .map_err(io)?;
    for m in items {
        w.write_record([
            m.id.clone(),
            m.category.clone(),
            m.rot_deg.to_string(),
            m.trans_m.to_string(),
            m.scale_ratio.to_string(),
            m.iou.to_string(),
            m.chamfer.to_string(),
            m.diameter.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_curves_csv<W: Write>(curves: &[CurvePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(["threshold", "category", "metric", "ap"]).map_err(io)?;
    for c in curves {
        w.write_record([
            c.threshold.to_string(),
            c.category.clone(),
            c.metric.name().to_string(),
            c.ap.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curves_csv<R: std::io::Read>(input: R) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (row, record) in r.records().enumerate() {
        let rec = record.map_err(|e| Error::Format(e.to_string()))?;
        let field = |i: usize| {
            rec.get(i)
                .ok_or_else(|| Error::Format(format!("curves row {row}: missing field {i}")))
        };
        let num = |i: usize| -> Result<f64> {
            field(i)?
                .parse()
                .map_err(|_| Error::Format(format!("curves row {row}: bad number")))
        };
        let metric = match field(2)? {
            "iou" => CurveMetric::Iou,
            "rotation" => CurveMetric::Rotation,
            "translation" => CurveMetric::Translation,
            other => return Err(Error::Format(format!("curves row {row}: unknown metric {other}"))),
        };
        out.push(CurvePoint {
            threshold: num(0)?,
            category: field(1)?.to_string(),
            metric,
            ap: num(3)?,
        });
    }
    Ok(out)
}
