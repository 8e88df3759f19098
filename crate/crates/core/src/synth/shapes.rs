//! Procedural category families with analytic signed distance functions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::labeling::SymmetrySpec;
use crate::primitive::SdfSample;

/// Near-surface samples satisfy `|s| ≤ NEAR_SURFACE_BAND`.
pub const NEAR_SURFACE_BAND: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Revolved profile: rounded body with an optional neck.
    /// Parameters: body radius, body height, corner rounding, neck radius, neck height.
    Lathe,
    /// Revolved open shell cut by a horizontal plane.
    /// Parameters: radius, cut height, wall thickness.
    LatheShell,
    /// Base and lid boxes joined at a hinge.
    /// Parameters: width, depth, thickness, opening angle (degrees).
    Laptop,
    /// Cylindrical body with a torus handle.
    /// Parameters: body radius, body height, handle radius, handle thickness.
    Mug,
}

impl Family {
    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            Family::Lathe => &["body_radius", "body_height", "rounding", "neck_radius", "neck_height"],
            Family::LatheShell => &["radius", "cut_height", "thickness"],
            Family::Laptop => &["width", "depth", "thickness", "opening_deg"],
            Family::Mug => &["body_radius", "body_height", "handle_radius", "handle_thickness"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub family: Family,
    pub ranges: Vec<ParamRange>,
    pub symmetry: SymmetrySpec,
    /// Rescale and recenter every instance to a unit bounding-box diagonal.
    pub normalize: bool,
}

pub const BUILTIN_CATEGORIES: [&str; 6] = ["bottle", "bowl", "can", "laptop", "mug", "sphere"];

impl CategorySpec {
    fn with_ranges(name: &str, family: Family, ranges: &[(f64, f64)], symmetry: SymmetrySpec) -> Self {
        let ranges = family
            .param_names()
            .iter()
            .zip(ranges)
            .map(|(n, &(lo, hi))| ParamRange {
                name: n.to_string(),
                lo,
                hi,
            })
            .collect();
        Self {
            name: name.to_string(),
            family,
            ranges,
            symmetry,
            normalize: true,
        }
    }

    pub fn builtin(name: &str) -> Result<Self> {
        let up = SymmetrySpec::sixfold(Vec3::y());
        let spec = match name {
            "bottle" => Self::with_ranges(
                name,
                Family::Lathe,
                &[(0.28, 0.4), (0.8, 1.2), (0.05, 0.15), (0.08, 0.15), (0.25, 0.45)],
                up,
            ),
            "can" => Self::with_ranges(
                name,
                Family::Lathe,
                &[(0.3, 0.45), (0.7, 1.1), (0.0, 0.04), (0.0, 0.0), (0.0, 0.0)],
                up,
            ),
            "bowl" => Self::with_ranges(name, Family::LatheShell, &[(0.4, 0.5), (-0.2, 0.0), (0.04, 0.07)], up),
            "laptop" => Self::with_ranges(
                name,
                Family::Laptop,
                &[(0.9, 1.1), (0.6, 0.8), (0.04, 0.07), (70.0, 130.0)],
                SymmetrySpec::none(),
            ),
            "mug" => Self::with_ranges(
                name,
                Family::Mug,
                &[(0.3, 0.4), (0.7, 1.0), (0.18, 0.25), (0.03, 0.05)],
                SymmetrySpec::none(),
            ),
            // Fixed sphere of radius 0.4, left unnormalized.
            "sphere" => Self {
                normalize: false,
                ..Self::with_ranges(
                    name,
                    Family::Lathe,
                    &[(0.4, 0.4), (0.8, 0.8), (0.4, 0.4), (0.0, 0.0), (0.0, 0.0)],
                    up,
                )
            },
            other => return Err(Error::InvalidConfig(format!("unknown category '{other}'"))),
        };
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let names = self.family.param_names();
        if self.ranges.len() != names.len() {
            return Err(Error::InvalidConfig(format!(
                "{} expects {} parameter ranges, got {}",
                self.name,
                names.len(),
                self.ranges.len()
            )));
        }
        for r in &self.ranges {
            if !(r.lo.is_finite() && r.hi.is_finite() && r.lo <= r.hi) {
                return Err(Error::InvalidConfig(format!("empty range for parameter {}", r.name)));
            }
        }
        Ok(())
    }

    pub fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.ranges.len() {
            return Err(Error::ParamsOutOfRange(format!(
                "expected {} parameters, got {}",
                self.ranges.len(),
                params.len()
            )));
        }
        for (p, r) in params.iter().zip(&self.ranges) {
            if !(r.lo..=r.hi).contains(p) {
                return Err(Error::ParamsOutOfRange(format!(
                    "{} = {p} outside [{}, {}]",
                    r.name, r.lo, r.hi
                )));
            }
        }
        Ok(())
    }

    pub fn sample_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.ranges
            .iter()
            .map(|r| {
                if r.lo == r.hi {
                    r.lo
                } else {
                    rng.random_range(r.lo..=r.hi)
                }
            })
            .collect()
    }

    pub fn shape(&self, params: &[f64]) -> Result<AnalyticShape> {
        self.validate()?;
        self.check_params(params)?;
        let mut shape = AnalyticShape {
            family: self.family,
            params: params.to_vec(),
            scale: 1.0,
            offset: Vec3::zeros(),
        };
        if self.normalize {
            let (lo, hi) = shape.raw_bounds();
            shape.scale = (hi - lo).norm();
            shape.offset = (lo + hi) / 2.0;
        }
        Ok(shape)
    }
}

/// One instance: a raw family shape mapped by `x_raw = scale·x + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticShape {
    pub family: Family,
    pub params: Vec<f64>,
    pub scale: f64,
    pub offset: Vec3,
}

fn rounded_rect(p: (f64, f64), half: (f64, f64), rounding: f64) -> f64 {
    let r = rounding.min(half.0).min(half.1).max(0.0);
    let qx = p.0.abs() - half.0 + r;
    let qy = p.1.abs() - half.1 + r;
    (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt() + qx.max(qy).min(0.0) - r
}

fn box_sdf(local: &Vec3, half: &Vec3) -> f64 {
    let q = local.abs() - half;
    q.sup(&Vec3::zeros()).norm() + q.max().min(0.0)
}

/// Local frame of the laptop lid: (hinge point, along-lid, thickness) axes.
fn lid_frame(opening_deg: f64, thickness: f64) -> (Vec3, Vec3, Vec3) {
    let a = opening_deg.to_radians();
    let hinge = Vec3::new(0.0, thickness, 0.0);
    (
        hinge,
        Vec3::new(0.0, a.sin(), -a.cos()),
        Vec3::new(0.0, a.cos(), a.sin()),
    )
}

impl AnalyticShape {
    /// Signed distance in the (possibly normalized) instance frame.
    pub fn sdf(&self, x: &Vec3) -> f64 {
        self.raw_sdf(&(x * self.scale + self.offset)) / self.scale
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        let (lo, hi) = self.raw_bounds();
        ((lo - self.offset) / self.scale, (hi - self.offset) / self.scale)
    }

    fn raw_sdf(&self, x: &Vec3) -> f64 {
        let p = &self.params;
        match self.family {
            Family::Lathe => {
                let (radius, height, rounding, neck_r, neck_h) = (p[0], p[1], p[2], p[3], p[4]);
                let rho = (x.x * x.x + x.z * x.z).sqrt();
                let body = rounded_rect((rho, x.y), (radius, height / 2.0), rounding);
                if neck_r > 0.0 && neck_h > 0.0 {
                    let bottom = height / 2.0 - rounding.min(height / 2.0);
                    let top = height / 2.0 + neck_h;
                    let neck = rounded_rect((rho, x.y - (bottom + top) / 2.0), (neck_r, (top - bottom) / 2.0), 0.0);
                    body.min(neck)
                } else {
                    body
                }
            }
            Family::LatheShell => {
                let (radius, cut, thickness) = (p[0], p[1], p[2]);
                let rim = (radius * radius - cut * cut).sqrt();
                let q = ((x.x * x.x + x.z * x.z).sqrt(), x.y);
                let d = if cut * q.0 < rim * q.1 {
                    ((q.0 - rim).powi(2) + (q.1 - cut).powi(2)).sqrt()
                } else {
                    ((q.0 * q.0 + q.1 * q.1).sqrt() - radius).abs()
                };
                d - thickness
            }
            Family::Laptop => {
                let (width, depth, thickness, opening) = (p[0], p[1], p[2], p[3]);
                let half = Vec3::new(width / 2.0, thickness / 2.0, depth / 2.0);
                let base = box_sdf(&(x - Vec3::new(0.0, thickness / 2.0, -depth / 2.0)), &half);
                let (hinge, along, across) = lid_frame(opening, thickness);
                let c = hinge + along * (depth / 2.0) + across * (thickness / 2.0);
                let d = x - c;
                let lid = box_sdf(&Vec3::new(d.x, d.dot(&across), d.dot(&along)), &half);
                base.min(lid)
            }
            Family::Mug => {
                let (radius, height, handle_r, handle_t) = (p[0], p[1], p[2], p[3]);
                let rho = (x.x * x.x + x.z * x.z).sqrt();
                let dx = rho - radius;
                let dy = x.y.abs() - height / 2.0;
                let body = dx.max(dy).min(0.0) + (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
                let ring = (((x.x - radius).powi(2) + x.y * x.y).sqrt() - handle_r, x.z);
                let handle = (ring.0 * ring.0 + ring.1 * ring.1).sqrt() - handle_t;
                body.min(handle)
            }
        }
    }

    fn raw_bounds(&self) -> (Vec3, Vec3) {
        let p = &self.params;
        match self.family {
            Family::Lathe => {
                let rho = p[0].max(if p[4] > 0.0 { p[3] } else { 0.0 });
                let top = p[1] / 2.0 + if p[3] > 0.0 { p[4] } else { 0.0 };
                (Vec3::new(-rho, -p[1] / 2.0, -rho), Vec3::new(rho, top, rho))
            }
            Family::LatheShell => {
                let (radius, cut, thickness) = (p[0], p[1], p[2]);
                let rho = if cut >= 0.0 {
                    radius
                } else {
                    (radius * radius - cut * cut).sqrt()
                } + thickness;
                (
                    Vec3::new(-rho, -radius - thickness, -rho),
                    Vec3::new(rho, cut + thickness, rho),
                )
            }
            Family::Laptop => {
                let (width, depth, thickness, opening) = (p[0], p[1], p[2], p[3]);
                let (hinge, along, across) = lid_frame(opening, thickness);
                let mut lo = Vec3::new(-width / 2.0, 0.0, -depth);
                let mut hi = Vec3::new(width / 2.0, thickness, 0.0);
                for a in [0.0, depth] {
                    for b in [0.0, thickness] {
                        let c = hinge + along * a + across * b;
                        lo = lo.inf(&Vec3::new(-width / 2.0, c.y, c.z));
                        hi = hi.sup(&Vec3::new(width / 2.0, c.y, c.z));
                    }
                }
                (lo, hi)
            }
            Family::Mug => {
                let (radius, height, handle_r, handle_t) = (p[0], p[1], p[2], p[3]);
                let half_y = (height / 2.0).max(handle_r + handle_t);
                (
                    Vec3::new(-radius, -half_y, -radius),
                    Vec3::new(radius + handle_r + handle_t, half_y, radius),
                )
            }
        }
    }

    /// Central-difference SDF gradient.
    pub fn sdf_gradient(&self, x: &Vec3) -> Vec3 {
        let h = 1e-6;
        Vec3::from_fn(|i, _| {
            let mut e = Vec3::zeros();
            e[i] = h;
            (self.sdf(&(x + e)) - self.sdf(&(x - e))) / (2.0 * h)
        })
    }
}

fn uniform_in_box<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    Vec3::new(
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
    )
}

fn near_surface_points<R: Rng + ?Sized>(
    shape: &AnalyticShape,
    n: usize,
    band: f64,
    rng: &mut R,
) -> Result<Vec<SdfSample>> {
    let mut out = Vec::with_capacity(n);
    let max_attempts = 10_000 + 1000 * n;
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::InsufficientSamples {
                needed: n,
                got: out.len(),
            });
        }
        let x = uniform_in_box(rng);
        let s = shape.sdf(&x);
        if s.abs() <= band {
            out.push(SdfSample { x, s });
        }
    }
    Ok(out)
}

/// `n` SDF samples: the first half near the surface, the rest uniform in
/// `[-0.5, 0.5]³`.
pub fn sample_sdf(spec: &CategorySpec, params: &[f64], n: usize, seed: u64) -> Result<Vec<SdfSample>> {
    let shape = spec.shape(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let near = n / 2;
    let mut out = near_surface_points(&shape, near, NEAR_SURFACE_BAND, &mut rng)?;
    out.extend((near..n).map(|_| {
        let x = uniform_in_box(&mut rng);
        SdfSample { x, s: shape.sdf(&x) }
    }));
    Ok(out)
}

/// Points on the analytic surface, found by projecting near-surface samples
/// along the SDF gradient.
pub fn analytic_surface_points(shape: &AnalyticShape, n: usize, seed: u64) -> Result<Vec<Vec3>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let mut rounds = 0;
    while out.len() < n {
        rounds += 1;
        if rounds > 20 {
            break;
        }
        for sample in near_surface_points(shape, 2 * (n - out.len()), 0.02, &mut rng)? {
            let mut x = sample.x;
            for _ in 0..4 {
                let g = shape.sdf_gradient(&x);
                let gn = g.norm_squared();
                if gn < 1e-12 {
                    break;
                }
                x -= shape.sdf(&x) * g / gn;
            }
            if shape.sdf(&x).abs() < 1e-6 && out.len() < n {
                out.push(x);
            }
        }
    }
    Ok(out)
}
