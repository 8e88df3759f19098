//! Sphere primitives: signed distance, truncated-L1 fitting to SDF samples and
//! cross-instance index alignment.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{weighted::WeightedIndex, Distribution, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::assignment::min_cost_assignment;
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};

/// Truncation used for the SDF target remapping.
pub const DEFAULT_TRUNCATION: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpherePrimitive {
    #[serde(rename = "c", with = "crate::serde_vec3")]
    pub center: Vec3,
    #[serde(rename = "r")]
    pub radius: f64,
}

impl SpherePrimitive {
    pub fn new(center: Vec3, radius: f64) -> Self {
        Self { center, radius }
    }

    #[inline]
    pub fn sdf(&self, x: &Vec3) -> f64 {
        (x - self.center).norm() - self.radius
    }
}

/// Labeled sphere primitives of one category instance; the index is the
/// semantic label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PrimitiveSetJson", into = "PrimitiveSetJson")]
pub struct PrimitiveSet {
    pub category: String,
    pub primitives: Vec<SpherePrimitive>,
}

#[derive(Serialize, Deserialize)]
struct PrimitiveSetJson {
    category: String,
    n_primitives: usize,
    spheres: Vec<SpherePrimitive>,
}

impl TryFrom<PrimitiveSetJson> for PrimitiveSet {
    type Error = String;

    fn try_from(j: PrimitiveSetJson) -> std::result::Result<Self, String> {
        if j.n_primitives != j.spheres.len() {
            return Err(format!(
                "n_primitives is {} but {} spheres are listed",
                j.n_primitives,
                j.spheres.len()
            ));
        }
        Ok(Self {
            category: j.category,
            primitives: j.spheres,
        })
    }
}

impl From<PrimitiveSet> for PrimitiveSetJson {
    fn from(p: PrimitiveSet) -> Self {
        Self {
            category: p.category,
            n_primitives: p.primitives.len(),
            spheres: p.primitives,
        }
    }
}

impl PrimitiveSet {
    pub fn new(category: impl Into<String>, primitives: Vec<SpherePrimitive>) -> Self {
        Self {
            category: category.into(),
            primitives,
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn centers(&self) -> Vec<Vec3> {
        self.primitives.iter().map(|p| p.center).collect()
    }

    pub fn center_cloud(&self) -> PointCloud {
        PointCloud::new(self.centers())
    }

    /// Distance to the nearest primitive surface, negative inside.
    pub fn sdf(&self, x: &Vec3) -> f64 {
        primitive_sdf(x, self)
    }

    /// Packs `(cx, cy, cz, r)` per primitive.
    pub fn pack(&self) -> Vec<f64> {
        self.primitives
            .iter()
            .flat_map(|p| [p.center.x, p.center.y, p.center.z, p.radius])
            .collect()
    }

    pub fn unpack(category: impl Into<String>, packed: &[f64]) -> Self {
        let primitives = packed
            .chunks_exact(4)
            .map(|c| SpherePrimitive::new(Vec3::new(c[0], c[1], c[2]), c[3]))
            .collect();
        Self::new(category, primitives)
    }

    /// Up to `n` points on the boundary of the union of spheres, drawn with
    /// density proportional to area and discarding points buried inside other
    /// spheres. Returns fewer points only if the union is (nearly) all buried.
    pub fn surface_points(&self, n: usize, seed: u64) -> Vec<Vec3> {
        let live: Vec<&SpherePrimitive> = self.primitives.iter().filter(|p| p.radius > 0.0).collect();
        let Ok(pick) = WeightedIndex::new(live.iter().map(|p| p.radius * p.radius)) else {
            return Vec::new();
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        let max_attempts = 200 * n.max(1);
        for _ in 0..max_attempts {
            if out.len() == n {
                break;
            }
            let i = pick.sample(&mut rng);
            let dir: [f64; 3] = UnitSphere.sample(&mut rng);
            let x = live[i].center + live[i].radius * Vec3::from(dir);
            let buried = live
                .iter()
                .enumerate()
                .any(|(j, q)| j != i && (x - q.center).norm() < q.radius - 1e-12);
            if !buried {
                out.push(x);
            }
        }
        out
    }

    /// Returns a copy whose primitive `new_index` is `self.primitives[order[new_index]]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self::new(
            self.category.clone(),
            order.iter().map(|&i| self.primitives[i]).collect(),
        )
    }
}

/// `min_i ‖x − c_i‖ − r_i`; `+∞` for an empty set.
pub fn primitive_sdf(x: &Vec3, ps: &PrimitiveSet) -> f64 {
    ps.primitives.iter().map(|p| p.sdf(x)).fold(f64::INFINITY, f64::min)
}

/// A query position with its ground-truth signed distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdfSample {
    pub x: Vec3,
    pub s: f64,
}

/// Remaps the SDF target so primitives settle in a shell of depth `t` under
/// the surface: values below `-t/2` are reflected to `-s - t`.
#[inline]
pub fn truncate_sdf(s: f64, t: f64) -> f64 {
    if s >= -0.5 * t {
        s
    } else {
        -s - t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub iterations: usize,
    pub step: f64,
    /// Predictions and targets are clamped to `[-clamp, clamp]` before the L1.
    pub clamp: f64,
    pub init_radius: f64,
    /// Stop once the loss improved by less than this relative amount over
    /// the last `patience` iterations.
    pub tolerance: f64,
    pub patience: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            step: 1e-2,
            clamp: 0.03,
            init_radius: 0.02,
            tolerance: 1e-5,
            patience: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub set: PrimitiveSet,
    pub loss: f64,
    /// Loss after every accepted step, starting with the initial loss.
    pub loss_history: Vec<f64>,
}

/// Mean clamped L1 between primitive distances and truncated targets.
pub fn truncated_l1_loss(samples: &[SdfSample], ps: &PrimitiveSet, t: f64, clamp: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let sum: f64 = samples
        .iter()
        .map(|smp| {
            let d = primitive_sdf(&smp.x, ps).clamp(-clamp, clamp);
            let target = truncate_sdf(smp.s, t).clamp(-clamp, clamp);
            (d - target).abs()
        })
        .sum();
    sum / samples.len() as f64
}

/// Loss and subgradient with respect to packed `(c, r)` parameters. Each
/// primitive's subgradient is averaged over the samples it owns rather than
/// over all samples, so primitives move at comparable rates regardless of how
/// much of the domain they cover.
fn loss_and_grad(samples: &[SdfSample], targets: &[f64], packed: &[f64], clamp: f64, grad: &mut [f64]) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut owned = vec![0usize; packed.len() / 4];
    let mut loss = 0.0;
    for (smp, &target) in samples.iter().zip(targets) {
        let mut best = f64::INFINITY;
        let mut best_i = 0;
        let mut best_dist = 0.0;
        for (i, p) in packed.chunks_exact(4).enumerate() {
            let dist = ((smp.x.x - p[0]).powi(2) + (smp.x.y - p[1]).powi(2) + (smp.x.z - p[2]).powi(2)).sqrt();
            let d = dist - p[3];
            if d < best {
                best = d;
                best_i = i;
                best_dist = dist;
            }
        }
        let d = best.clamp(-clamp, clamp);
        let diff = d - target;
        loss += diff.abs();
        if best.abs() >= clamp {
            continue;
        }
        owned[best_i] += 1;
        if diff == 0.0 {
            continue;
        }
        let sign = diff.signum();
        let p = &packed[best_i * 4..best_i * 4 + 4];
        if best_dist > 0.0 {
            let inv = sign / best_dist;
            grad[best_i * 4] += (p[0] - smp.x.x) * inv;
            grad[best_i * 4 + 1] += (p[1] - smp.x.y) * inv;
            grad[best_i * 4 + 2] += (p[2] - smp.x.z) * inv;
        }
        grad[best_i * 4 + 3] -= sign;
    }
    for (g, &n) in grad.chunks_exact_mut(4).zip(&owned) {
        if n > 0 {
            g.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    loss / samples.len() as f64
}

/// Farthest-point sampling; starts from the point farthest from the centroid.
pub fn farthest_point_sampling(points: &[Vec3], k: usize) -> Vec<usize> {
    if points.is_empty() || k == 0 {
        return Vec::new();
    }
    let centroid = points.iter().fold(Vec3::zeros(), |a, p| a + p) / points.len() as f64;
    let first = points
        .iter()
        .enumerate()
        .max_by(|a, b| {
            (a.1 - centroid)
                .norm_squared()
                .total_cmp(&(b.1 - centroid).norm_squared())
        })
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut chosen = vec![first];
    let mut dist: Vec<f64> = points.iter().map(|p| (p - points[first]).norm_squared()).collect();
    while chosen.len() < k.min(points.len()) {
        let (next, _) = dist
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty");
        chosen.push(next);
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min((p - points[next]).norm_squared());
        }
    }
    chosen
}

/// Fits `n_c` spheres to SDF samples by subgradient descent on the clamped
/// truncated-L1 loss. A step that raises the loss is rejected and the step
/// size halved, so the accepted loss sequence never increases.
pub fn fit_primitives(samples: &[SdfSample], n_c: usize, t: f64, cfg: &FitConfig) -> Result<FitResult> {
    if n_c == 0 {
        return Err(Error::InvalidConfig("primitive count must be positive".into()));
    }
    if !(t > 0.0) {
        return Err(Error::InvalidConfig("truncation must be positive".into()));
    }
    let needed = 10 * n_c;
    if samples.len() < needed {
        return Err(Error::InsufficientSamples {
            needed,
            got: samples.len(),
        });
    }
    let inside: Vec<Vec3> = samples.iter().filter(|s| s.s < 0.0).map(|s| s.x).collect();
    if inside.is_empty() || inside.len() == samples.len() {
        return Err(Error::InsufficientSamples {
            needed,
            got: inside.len().min(samples.len() - inside.len()),
        });
    }

    // Seed from the shell the truncated target asks primitives to occupy.
    let shell: Vec<Vec3> = samples.iter().filter(|s| s.s < 0.0 && s.s >= -t).map(|s| s.x).collect();
    let pool = if shell.len() >= n_c { &shell } else { &inside };
    let seeds = farthest_point_sampling(pool, n_c);
    let mut packed: Vec<f64> = (0..n_c)
        .flat_map(|k| {
            let c = pool[seeds[k % seeds.len()]];
            [c.x, c.y, c.z, cfg.init_radius]
        })
        .collect();

    let targets: Vec<f64> = samples
        .iter()
        .map(|s| truncate_sdf(s.s, t).clamp(-cfg.clamp, cfg.clamp))
        .collect();
    let mut grad = vec![0.0; packed.len()];
    let mut cand_grad = vec![0.0; packed.len()];
    let mut loss = loss_and_grad(samples, &targets, &packed, cfg.clamp, &mut grad);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { iteration: 0 });
    }
    let mut history = vec![loss];
    let mut step = cfg.step;
    let mut candidate = packed.clone();
    let mut checkpoint = loss;

    for iteration in 1..=cfg.iterations {
        for ((c, p), g) in candidate.iter_mut().zip(&packed).zip(&grad) {
            *c = p - step * g;
        }
        for r in candidate.iter_mut().skip(3).step_by(4) {
            *r = r.max(0.0);
        }
        let cand_loss = loss_and_grad(samples, &targets, &candidate, cfg.clamp, &mut cand_grad);
        if !cand_loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration });
        }
        if cand_loss <= loss {
            std::mem::swap(&mut packed, &mut candidate);
            std::mem::swap(&mut grad, &mut cand_grad);
            loss = cand_loss;
            history.push(loss);
            step = (step * 1.25).min(cfg.step);
        } else {
            step *= 0.5;
        }
        if cfg.patience > 0 && iteration % cfg.patience == 0 {
            if checkpoint - loss <= cfg.tolerance * checkpoint {
                break;
            }
            checkpoint = loss;
        }
    }

    Ok(FitResult {
        set: PrimitiveSet::unpack("", &packed),
        loss,
        loss_history: history,
    })
}

/// Permutation and matching cost produced by [`align_primitive_indices`].
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSet {
    pub set: PrimitiveSet,
    /// `order[new_index]` is the index in the unaligned set.
    pub order: Vec<usize>,
    pub cost: f64,
}

/// Re-indexes each set by minimum-cost matching of its centers to the
/// reference centers (squared Euclidean cost).
pub fn align_primitive_indices(sets: &[PrimitiveSet], reference: &PrimitiveSet) -> Result<Vec<AlignedSet>> {
    let n = reference.len();
    sets.iter()
        .map(|set| {
            if set.len() != n {
                return Err(Error::CountMismatch {
                    expected: n,
                    got: set.len(),
                });
            }
            // rows: reference slots, columns: set primitives
            let cost: Vec<f64> = reference
                .primitives
                .iter()
                .flat_map(|r| set.primitives.iter().map(move |p| (r.center - p.center).norm_squared()))
                .collect();
            let (order, cost) = min_cost_assignment(&cost, n);
            Ok(AlignedSet {
                set: set.permuted(&order),
                order,
                cost,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sphere_set(c: Vec3, r: f64) -> PrimitiveSet {
        PrimitiveSet::new("t", vec![SpherePrimitive::new(c, r)])
    }

    fn analytic_sphere_samples(n: usize, radius: f64, seed: u64) -> Vec<SdfSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let x = if i % 2 == 0 {
                    // near the surface
                    let dir = loop {
                        let v = Vec3::new(
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                        );
                        let n = v.norm();
                        if n > 1e-3 && n <= 1.0 {
                            break v / n;
                        }
                    };
                    dir * (radius + rng.random_range(-0.05..0.05))
                } else {
                    Vec3::new(
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                    )
                };
                SdfSample {
                    x,
                    s: x.norm() - radius,
                }
            })
            .collect()
    }

    #[test]
    fn sdf_examples() {
        let s = sphere_set(Vec3::zeros(), 0.4);
        assert_eq!(primitive_sdf(&Vec3::new(0.4, 0.0, 0.0), &s), 0.0);
        assert!((primitive_sdf(&Vec3::new(1.0, 0.0, 0.0), &s) - 0.6).abs() < 1e-15);
        let two = PrimitiveSet::new(
            "t",
            vec![
                SpherePrimitive::new(Vec3::new(1.0, 0.0, 0.0), 0.1),
                SpherePrimitive::new(Vec3::new(-1.0, 0.0, 0.0), 0.1),
            ],
        );
        assert!((primitive_sdf(&Vec3::new(0.5, 0.0, 0.0), &two) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn truncation_examples() {
        assert_eq!(truncate_sdf(0.05, 0.02), 0.05);
        assert!((truncate_sdf(-0.05, 0.02) - 0.03).abs() < 1e-15);
        assert_eq!(truncate_sdf(-0.01, 0.02), -0.01);
        // continuity at -t/2
        let below = truncate_sdf(-0.01 - 1e-12, 0.02);
        assert!((below - (-0.01)).abs() < 1e-11);
    }

    #[test]
    fn sdf_is_one_lipschitz() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ps = PrimitiveSet::new(
            "t",
            (0..8)
                .map(|_| {
                    SpherePrimitive::new(
                        Vec3::new(
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                        ),
                        rng.random_range(0.0..0.3),
                    )
                })
                .collect(),
        );
        for _ in 0..1000 {
            let a = Vec3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let b = Vec3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            assert!((ps.sdf(&a) - ps.sdf(&b)).abs() <= (a - b).norm() + 1e-12);
        }
    }

    #[test]
    fn fit_rejects_empty_and_bad_config() {
        let cfg = FitConfig::default();
        assert!(matches!(
            fit_primitives(&[], 4, 0.02, &cfg),
            Err(Error::InsufficientSamples { .. })
        ));
        let samples = analytic_sphere_samples(100, 0.4, 1);
        assert!(fit_primitives(&samples, 1, 0.0, &cfg).is_err());
        let outside: Vec<SdfSample> = (0..100)
            .map(|i| SdfSample {
                x: Vec3::new(i as f64, 0.0, 0.0),
                s: 1.0,
            })
            .collect();
        assert!(matches!(
            fit_primitives(&outside, 1, 0.02, &cfg),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn single_sphere_fit_recovers_sphere() {
        // Samples inside the untruncated band, where the sphere itself has zero loss.
        let samples: Vec<SdfSample> = analytic_sphere_samples(8000, 0.4, 2)
            .into_iter()
            .filter(|s| s.s.abs() <= 0.5 * DEFAULT_TRUNCATION)
            .collect();
        let cfg = FitConfig {
            clamp: 0.05,
            ..FitConfig::default()
        };
        let fit = fit_primitives(&samples, 1, DEFAULT_TRUNCATION, &cfg).unwrap();
        let p = fit.set.primitives[0];
        assert!((p.radius - 0.4).abs() <= 0.01, "radius {}", p.radius);
        assert!(p.center.norm() <= 0.01, "center {}", p.center);
    }

    #[test]
    fn sixteen_sphere_fit_hugs_surface() {
        let samples = analytic_sphere_samples(4000, 0.4, 3);
        let held_out = analytic_sphere_samples(4000, 0.4, 4);
        let cfg = FitConfig::default();
        let fit = fit_primitives(&samples, 16, DEFAULT_TRUNCATION, &cfg).unwrap();
        let loss = truncated_l1_loss(&held_out, &fit.set, DEFAULT_TRUNCATION, cfg.clamp);
        assert!(loss <= 0.01, "held-out loss {loss}");
        for p in &fit.set.primitives {
            assert!(
                (p.center.norm() - 0.4).abs() <= 0.05,
                "center at radius {}",
                p.center.norm()
            );
        }
        assert!(fit.loss_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn alignment_inverts_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let reference = PrimitiveSet::new(
            "t",
            (0..8)
                .map(|_| {
                    SpherePrimitive::new(
                        Vec3::new(
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                        ),
                        0.1,
                    )
                })
                .collect(),
        );
        let same = align_primitive_indices(std::slice::from_ref(&reference), &reference).unwrap();
        assert_eq!(same[0].order, (0..8).collect::<Vec<_>>());
        assert_eq!(same[0].cost, 0.0);

        let mut perm: Vec<usize> = (0..8).collect();
        for i in (1..8).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let shuffled = reference.permuted(&perm);
        let aligned = align_primitive_indices(&[shuffled], &reference).unwrap();
        assert_eq!(aligned[0].set, reference);
        for (new_idx, &old) in aligned[0].order.iter().enumerate() {
            assert_eq!(perm[old], new_idx);
        }
    }

    #[test]
    fn alignment_rejects_count_mismatch() {
        let a = PrimitiveSet::new("t", vec![SpherePrimitive::new(Vec3::zeros(), 0.1); 3]);
        let b = PrimitiveSet::new("t", vec![SpherePrimitive::new(Vec3::zeros(), 0.1); 4]);
        assert!(matches!(
            align_primitive_indices(&[b], &a),
            Err(Error::CountMismatch { expected: 3, got: 4 })
        ));
    }

    #[test]
    fn json_schema_round_trip() {
        let ps = PrimitiveSet::new("mug", vec![SpherePrimitive::new(Vec3::new(0.1, -0.2, 1.0 / 3.0), 0.05)]);
        let text = serde_json::to_string(&ps).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["n_primitives"], 1);
        assert_eq!(v["spheres"][0]["c"][2], serde_json::json!(1.0 / 3.0));
        let back: PrimitiveSet = serde_json::from_str(&text).unwrap();
        assert_eq!(back, ps);
        let bad = r#"{"category":"x","n_primitives":2,"spheres":[]}"#;
        assert!(serde_json::from_str::<PrimitiveSet>(bad).is_err());
    }

    #[test]
    fn surface_points_lie_on_union_boundary() {
        let ps = PrimitiveSet::new(
            "t",
            vec![
                SpherePrimitive::new(Vec3::zeros(), 0.3),
                SpherePrimitive::new(Vec3::new(0.4, 0.0, 0.0), 0.2),
                SpherePrimitive::new(Vec3::new(0.1, 0.0, 0.0), 0.05),
                SpherePrimitive::new(Vec3::new(2.0, 0.0, 0.0), 0.0),
            ],
        );
        let pts = ps.surface_points(3000, 1);
        assert_eq!(pts.len(), 3000);
        assert!(pts.iter().all(|p| ps.sdf(p).abs() < 1e-12));
        assert_eq!(pts, ps.surface_points(3000, 1));
        // The fully buried small sphere contributes nothing.
        assert!(pts
            .iter()
            .all(|p| ((p - Vec3::new(0.1, 0.0, 0.0)).norm() - 0.05).abs() > 1e-9));
        assert!(PrimitiveSet::new("e", vec![]).surface_points(10, 0).is_empty());
    }
}
