//! Similarity transforms, point clouds and least-squares SIM(3) alignment.
//!
//! Transforms act as `x_world = s * R * x + t`. The alternative form
//! `s * R * (x + t')` that keeps the translation in the source frame is
//! available through [`Sim3Transform::from_source_offset`] and
//! [`Sim3Transform::source_offset`].

use nalgebra::{Matrix3, Unit, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Ordered set of 3D points.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Vec3> {
        self.points.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Axis-aligned bounds `(min, max)`, or `None` for an empty cloud.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.points.first()?;
        Some(
            self.points
                .iter()
                .fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p))),
        )
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Vec3::zeros(), |acc, p| acc + p);
        Some(sum / self.points.len() as f64)
    }
}

impl From<Vec<Vec3>> for PointCloud {
    fn from(points: Vec<Vec3>) -> Self {
        Self { points }
    }
}

/// Scale, rotation and translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sim3Transform {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Sim3Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Sim3Transform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a transform after checking scale positivity and rotation orthonormality.
    pub fn new(scale: f64, rotation: Mat3, translation: Vec3) -> Result<Self> {
        let t = Self {
            scale,
            rotation,
            translation,
        };
        if t.is_valid(1e-9) {
            Ok(t)
        } else {
            Err(Error::InvalidConfig(
                "scale must be positive and rotation orthonormal with det +1".into(),
            ))
        }
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        self.scale > 0.0
            && self.scale.is_finite()
            && self.translation.iter().all(|v| v.is_finite())
            && (r.transpose() * r - Mat3::identity()).amax() <= tol
            && (r.determinant() - 1.0).abs() <= tol
    }

    /// Converts from `x -> s * R * (x + offset)`.
    pub fn from_source_offset(scale: f64, rotation: Mat3, offset: Vec3) -> Self {
        Self {
            scale,
            rotation,
            translation: scale * rotation * offset,
        }
    }

    /// Translation expressed in the source frame: `t = s * R * offset`.
    pub fn source_offset(&self) -> Vec3 {
        self.rotation.transpose() * self.translation / self.scale
    }

    #[inline]
    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }

    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud::new(cloud.points.iter().map(|p| self.apply_point(p)).collect())
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        let inv_s = 1.0 / self.scale;
        Self {
            scale: inv_s,
            rotation: rt,
            translation: -(rt * self.translation) * inv_s,
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
        }
    }

    /// Largest absolute component difference over scale, rotation and translation.
    pub fn max_component_diff(&self, other: &Self) -> f64 {
        let ds = (self.scale - other.scale).abs();
        let dr = (self.rotation - other.rotation).amax();
        let dt = (self.translation - other.translation).amax();
        ds.max(dr).max(dt)
    }

    /// Draws a uniformly random rotation.
    pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Mat3 {
        let q = nalgebra::Quaternion::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
    }
}

/// Rotation of `degrees` about `axis` (need not be normalized).
pub fn axis_rotation(axis: &Vec3, degrees: f64) -> Mat3 {
    let axis = Unit::new_normalize(*axis);
    nalgebra::Rotation3::from_axis_angle(&axis, degrees.to_radians()).into_inner()
}

/// Geodesic angle between two rotations, in degrees.
///
/// Uses `atan2` on the skew and symmetric parts so that small angles keep full
/// relative precision.
pub fn rotation_angle_deg(a: &Mat3, b: &Mat3) -> f64 {
    let d = a.transpose() * b;
    let cos_part = (d.trace() - 1.0) * 0.5;
    let skew = Vec3::new(d[(2, 1)] - d[(1, 2)], d[(0, 2)] - d[(2, 0)], d[(1, 0)] - d[(0, 1)]);
    let sin_part = 0.5 * skew.norm();
    sin_part.atan2(cos_part).to_degrees()
}

/// Angle between two vectors in degrees, precise near zero.
pub fn vector_angle_deg(a: &Vec3, b: &Vec3) -> f64 {
    a.cross(b).norm().atan2(a.dot(b)).to_degrees()
}

/// Least-squares similarity alignment and its mean squared residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub transform: Sim3Transform,
    pub residual: f64,
}

/// Finds `(s, R, t)` minimizing `mean ‖dst_i − s R src_i − t‖²` (Umeyama).
pub fn umeyama_align(src: &PointCloud, dst: &PointCloud) -> Result<Alignment> {
    umeyama_align_pairs(&src.points, &dst.points, None)
}

/// Weighted variant of [`umeyama_align`]; weights must be non-negative.
pub fn umeyama_align_weighted(src: &[Vec3], dst: &[Vec3], weights: &[f64]) -> Result<Alignment> {
    umeyama_align_pairs(src, dst, Some(weights))
}

fn umeyama_align_pairs(src: &[Vec3], dst: &[Vec3], weights: Option<&[f64]>) -> Result<Alignment> {
    if src.len() != dst.len() {
        return Err(Error::LengthMismatch(src.len(), dst.len()));
    }
    if let Some(w) = weights {
        if w.len() != src.len() {
            return Err(Error::LengthMismatch(src.len(), w.len()));
        }
        if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidConfig("weights must be finite and non-negative".into()));
        }
    }
    if src.len() < 3 {
        return Err(Error::DegenerateConfiguration("need at least 3 correspondences"));
    }
    let weight = |i: usize| weights.map_or(1.0, |w| w[i]);
    let total: f64 = (0..src.len()).map(weight).sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateConfiguration("zero total weight"));
    }

    let mut mu_src = Vec3::zeros();
    let mut mu_dst = Vec3::zeros();
    for i in 0..src.len() {
        mu_src += weight(i) * src[i];
        mu_dst += weight(i) * dst[i];
    }
    mu_src /= total;
    mu_dst /= total;

    let mut var_src = 0.0;
    let mut cov = Mat3::zeros();
    for i in 0..src.len() {
        let w = weight(i);
        let a = src[i] - mu_src;
        let b = dst[i] - mu_dst;
        var_src += w * a.norm_squared();
        cov += w * b * a.transpose();
    }
    var_src /= total;
    cov /= total;

    let spread = mu_src.norm().max(1.0);
    if var_src <= (1e-14 * spread).powi(2) {
        return Err(Error::DegenerateConfiguration("source points coincide"));
    }

    let svd = cov.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::DegenerateConfiguration("svd failed")),
    };
    let sv = svd.singular_values;
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if !(sorted[0] > 0.0) || sorted[1] <= 1e-9 * sorted[0] {
        return Err(Error::DegenerateConfiguration(
            "correspondence covariance has rank <= 1",
        ));
    }

    // Flip the axis of the smallest singular value when U V^T is a reflection.
    let mut sign = Mat3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        let smallest = (0..3).min_by(|&a, &b| sv[a].total_cmp(&sv[b])).unwrap_or(2);
        sign[(smallest, smallest)] = -1.0;
    }
    let rotation = u * sign * v_t;
    let trace_ds: f64 = (0..3).map(|k| sv[k] * sign[(k, k)]).sum();
    let scale = trace_ds / var_src;
    if !(scale > 0.0) {
        return Err(Error::DegenerateConfiguration("non-positive scale"));
    }
    let translation = mu_dst - scale * rotation * mu_src;
    let transform = Sim3Transform {
        scale,
        rotation,
        translation,
    };

    let mut residual = 0.0;
    for i in 0..src.len() {
        residual += weight(i) * (dst[i] - transform.apply_point(&src[i])).norm_squared();
    }
    residual /= total;

    Ok(Alignment { transform, residual })
}
