//! Affine latent shape space over packed primitive parameters.
//!
//! A shape is decoded as `packed = mean + B · diag(σ) · z`, where `B` has
//! orthonormal columns (principal directions of the aligned training sets)
//! and `σ` holds the per-direction training standard deviations, so that
//! `z ~ N(0, I)` reproduces the training spread. Radii are clamped at zero
//! after decoding; centers are exactly affine in `z`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::primitive::PrimitiveSet;

/// Shape embedding.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentCode(pub Vec<f64>);

impl LatentCode {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for LatentCode {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BasisJson", into = "BasisJson")]
pub struct LinearShapeBasis {
    pub category: String,
    latent_dim: usize,
    n_primitives: usize,
    mean: Vec<f64>,
    /// Row-major `(4·n_primitives) × latent_dim`, orthonormal columns.
    directions: Vec<f64>,
    scales: Vec<f64>,
    pub radii_clamped: bool,
    /// `directions · diag(scales)`, row-major.
    effective: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BasisJson {
    #[serde(default)]
    category: String,
    latent_dim: usize,
    n_primitives: usize,
    mean: Vec<f64>,
    basis: Vec<Vec<f64>>,
    scales: Vec<f64>,
    #[serde(default = "default_true")]
    radii_clamped: bool,
}

fn default_true() -> bool {
    true
}

impl TryFrom<BasisJson> for LinearShapeBasis {
    type Error = String;

    fn try_from(j: BasisJson) -> std::result::Result<Self, String> {
        let p = 4 * j.n_primitives;
        if j.mean.len() != p || j.basis.len() != p {
            return Err(format!("expected {p} packed rows"));
        }
        if j.scales.len() != j.latent_dim || j.basis.iter().any(|r| r.len() != j.latent_dim) {
            return Err(format!("expected {} latent columns", j.latent_dim));
        }
        Ok(LinearShapeBasis::from_parts(
            j.category,
            j.n_primitives,
            j.mean,
            j.basis.concat(),
            j.scales,
            j.radii_clamped,
        ))
    }
}

impl From<LinearShapeBasis> for BasisJson {
    fn from(b: LinearShapeBasis) -> Self {
        let d = b.latent_dim;
        Self {
            basis: b.directions.chunks(d.max(1)).map(<[f64]>::to_vec).collect(),
            category: b.category,
            latent_dim: d,
            n_primitives: b.n_primitives,
            mean: b.mean,
            scales: b.scales,
            radii_clamped: b.radii_clamped,
        }
    }
}

/// Basis plus the full singular spectrum of the centered training data.
#[derive(Debug, Clone)]
pub struct BasisFit {
    pub basis: LinearShapeBasis,
    pub singular_values: Vec<f64>,
    /// `sqrt(Σ σ_k²)` over the discarded directions.
    pub residual_tail: f64,
}

impl LinearShapeBasis {
    fn from_parts(
        category: String,
        n_primitives: usize,
        mean: Vec<f64>,
        directions: Vec<f64>,
        scales: Vec<f64>,
        radii_clamped: bool,
    ) -> Self {
        let d = scales.len();
        let effective = directions
            .chunks(d.max(1))
            .flat_map(|row| row.iter().zip(&scales).map(|(b, s)| b * s).collect::<Vec<_>>())
            .collect();
        Self {
            category,
            latent_dim: d,
            n_primitives,
            mean,
            directions,
            scales,
            radii_clamped,
            effective,
        }
    }

    /// A basis whose every instance is `mean` (zero-variance directions).
    pub fn constant(mean: &PrimitiveSet, latent_dim: usize) -> Self {
        let p = 4 * mean.len();
        let directions = orthonormal_completion(&DMatrix::zeros(p, 0), latent_dim);
        Self::from_parts(
            mean.category.clone(),
            mean.len(),
            mean.pack(),
            row_major(&directions),
            vec![0.0; latent_dim],
            true,
        )
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn n_primitives(&self) -> usize {
        self.n_primitives
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// Orthonormal direction matrix, `(4·n_primitives) × latent_dim`.
    pub fn directions(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(4 * self.n_primitives, self.latent_dim, &self.directions)
    }

    fn check_dim(&self, z: &LatentCode) -> Result<()> {
        if z.dim() != self.latent_dim {
            return Err(Error::DimensionMismatch {
                expected: self.latent_dim,
                got: z.dim(),
            });
        }
        Ok(())
    }

    /// Packed parameters before the radius clamp.
    pub fn decode_packed(&self, z: &LatentCode) -> Result<Vec<f64>> {
        self.check_dim(z)?;
        let d = self.latent_dim;
        Ok(self
            .mean
            .iter()
            .enumerate()
            .map(|(row, m)| {
                let coeffs = &self.effective[row * d..(row + 1) * d];
                m + coeffs.iter().zip(&z.0).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect())
    }

    pub fn decode(&self, z: &LatentCode) -> Result<PrimitiveSet> {
        let mut packed = self.decode_packed(z)?;
        if self.radii_clamped {
            for r in packed.iter_mut().skip(3).step_by(4) {
                *r = r.max(0.0);
            }
        }
        Ok(PrimitiveSet::unpack(self.category.clone(), &packed))
    }

    /// Decoded center of one primitive.
    pub fn decode_center(&self, z: &LatentCode, label: usize) -> Vec3 {
        let d = self.latent_dim;
        let mut c = Vec3::new(self.mean[4 * label], self.mean[4 * label + 1], self.mean[4 * label + 2]);
        for axis in 0..3 {
            let row = &self.effective[(4 * label + axis) * d..(4 * label + axis + 1) * d];
            c[axis] += row.iter().zip(&z.0).map(|(a, b)| a * b).sum::<f64>();
        }
        c
    }

    /// Rows of the (constant) Jacobian `∂c_label / ∂z`, one per axis.
    pub fn center_jacobian(&self, label: usize) -> [&[f64]; 3] {
        let d = self.latent_dim;
        let row = |axis: usize| &self.effective[(4 * label + axis) * d..(4 * label + axis + 1) * d];
        [row(0), row(1), row(2)]
    }

    /// Least-squares latent code of a primitive set (zero along zero-variance directions).
    pub fn project(&self, set: &PrimitiveSet) -> Result<LatentCode> {
        if set.len() != self.n_primitives {
            return Err(Error::CountMismatch {
                expected: self.n_primitives,
                got: set.len(),
            });
        }
        let packed = set.pack();
        let d = self.latent_dim;
        let mut z = vec![0.0; d];
        for (row, (p, m)) in packed.iter().zip(&self.mean).enumerate() {
            let diff = p - m;
            for (k, zk) in z.iter_mut().enumerate() {
                *zk += self.directions[row * d + k] * diff;
            }
        }
        for (zk, s) in z.iter_mut().zip(&self.scales) {
            *zk = if *s > 1e-300 { *zk / s } else { 0.0 };
        }
        Ok(LatentCode(z))
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows())
        .flat_map(|r| (0..m.ncols()).map(move |c| m[(r, c)]))
        .collect()
}

/// Extends the columns of `m` to `dim` orthonormal columns.
fn orthonormal_completion(m: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    let p = m.nrows();
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(dim);
    let candidates = m
        .column_iter()
        .map(|c| c.into_owned())
        .chain((0..p).map(|i| DVector::from_fn(p, |r, _| if r == i { 1.0 } else { 0.0 })));
    for mut v in candidates {
        if cols.len() == dim {
            break;
        }
        // Two Gram-Schmidt passes keep orthogonality at round-off level.
        for _ in 0..2 {
            for c in &cols {
                let proj = c.dot(&v);
                v -= c * proj;
            }
        }
        let n = v.norm();
        if n > 1e-6 {
            cols.push(v / n);
        }
    }
    DMatrix::from_columns(&cols)
}

/// Principal-component basis over index-aligned primitive sets.
pub fn fit_shape_basis(aligned: &[PrimitiveSet], latent_dim: usize) -> Result<BasisFit> {
    let n = aligned.len();
    if n < latent_dim + 1 {
        return Err(Error::TooFewInstances {
            needed: latent_dim + 1,
            got: n,
        });
    }
    let n_c = aligned[0].len();
    let p = 4 * n_c;
    if latent_dim > p {
        return Err(Error::InvalidLatentDim {
            dim: latent_dim,
            max: p,
        });
    }
    if let Some(bad) = aligned.iter().find(|s| s.len() != n_c) {
        return Err(Error::CountMismatch {
            expected: n_c,
            got: bad.len(),
        });
    }

    let rows: Vec<Vec<f64>> = aligned.iter().map(PrimitiveSet::pack).collect();
    let mean: Vec<f64> = (0..p)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let centered = DMatrix::from_fn(n, p, |i, j| rows[i][j] - mean[j]);

    let svd = centered.svd(false, true);
    let v_t = svd.v_t.ok_or(Error::DegenerateConfiguration("svd failed"))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let singular_values: Vec<f64> = order.iter().map(|&k| svd.singular_values[k]).collect();

    let kept = latent_dim.min(order.len());
    let top = DMatrix::from_fn(p, kept, |r, c| v_t[(order[c], r)]);
    let directions = orthonormal_completion(&top, latent_dim);
    let denom = ((n - 1).max(1)) as f64;
    // Spread at round-off level of the mean counts as no variation.
    let floor = 1e-12 * (1.0 + mean.iter().map(|m| m * m).sum::<f64>().sqrt()) * (n as f64).sqrt();
    let scales: Vec<f64> = (0..latent_dim)
        .map(|k| match singular_values.get(k) {
            Some(&s) if s > floor => s / denom.sqrt(),
            _ => 0.0,
        })
        .collect();
    let residual_tail = singular_values
        .iter()
        .skip(latent_dim)
        .map(|s| s * s)
        .sum::<f64>()
        .sqrt();

    let basis = LinearShapeBasis::from_parts(
        aligned[0].category.clone(),
        n_c,
        mean,
        row_major(&directions),
        scales,
        true,
    );
    Ok(BasisFit {
        basis,
        singular_values,
        residual_tail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitive::SpherePrimitive;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(rng: &mut ChaCha8Rng, n_c: usize) -> PrimitiveSet {
        PrimitiveSet::new(
            "t",
            (0..n_c)
                .map(|_| {
                    SpherePrimitive::new(
                        Vec3::new(
                            rng.random_range(-0.5..0.5),
                            rng.random_range(-0.5..0.5),
                            rng.random_range(-0.5..0.5),
                        ),
                        rng.random_range(0.05..0.1),
                    )
                })
                .collect(),
        )
    }

    /// Instances `base + a·u + b·v` for random coefficients.
    fn rank_two_family(rng: &mut ChaCha8Rng, n_c: usize, count: usize) -> Vec<PrimitiveSet> {
        let base = random_set(rng, n_c).pack();
        let u: Vec<f64> = (0..4 * n_c).map(|_| rng.random_range(-0.05..0.05)).collect();
        let v: Vec<f64> = (0..4 * n_c).map(|_| rng.random_range(-0.05..0.05)).collect();
        (0..count)
            .map(|_| {
                let a = rng.random_range(-1.0..1.0);
                let b = rng.random_range(-1.0..1.0);
                let packed: Vec<f64> = (0..4 * n_c).map(|k| base[k] + a * u[k] + b * v[k]).collect();
                PrimitiveSet::unpack("t", &packed)
            })
            .collect()
    }

    fn assert_orthonormal(b: &LinearShapeBasis) {
        let m = b.directions();
        let gram = m.transpose() * &m;
        assert!((gram - DMatrix::identity(b.latent_dim(), b.latent_dim())).amax() <= 1e-8);
    }

    #[test]
    fn decode_zero_is_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sets: Vec<_> = (0..10).map(|_| random_set(&mut rng, 6)).collect();
        let fit = fit_shape_basis(&sets, 4).unwrap();
        let decoded = fit.basis.decode_packed(&LatentCode::zeros(4)).unwrap();
        assert_eq!(decoded, fit.basis.mean());
        assert_orthonormal(&fit.basis);
    }

    #[test]
    fn identical_instances_give_zero_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let one = random_set(&mut rng, 5);
        let sets = vec![one.clone(); 6];
        let fit = fit_shape_basis(&sets, 3).unwrap();
        assert_orthonormal(&fit.basis);
        assert!(fit.basis.scales().iter().all(|&s| s == 0.0));
        let back = fit.basis.decode(&LatentCode::zeros(3)).unwrap();
        assert!(back.pack().iter().zip(one.pack()).all(|(a, b)| (a - b).abs() < 1e-15));
        // Any code decodes to the same shape.
        let other = fit.basis.decode(&LatentCode(vec![1.0, -2.0, 3.0])).unwrap();
        assert_eq!(other, back);
    }

    #[test]
    fn rank_two_family_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sets = rank_two_family(&mut rng, 8, 12);
        let fit = fit_shape_basis(&sets, 2).unwrap();
        assert!(fit.residual_tail < 1e-10);
        for s in &sets {
            let z = fit.basis.project(s).unwrap();
            let back = fit.basis.decode_packed(&z).unwrap();
            let err = back
                .iter()
                .zip(s.pack())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err <= 1e-8, "round-trip error {err}");
        }
    }

    #[test]
    fn projection_error_within_residual_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sets: Vec<_> = (0..15).map(|_| random_set(&mut rng, 4)).collect();
        let fit = fit_shape_basis(&sets, 5).unwrap();
        for s in &sets {
            let z = fit.basis.project(s).unwrap();
            let back = fit.basis.decode_packed(&z).unwrap();
            let err = back
                .iter()
                .zip(s.pack())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(err <= fit.residual_tail + 1e-12);
        }
    }

    #[test]
    fn unit_code_variance_matches_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sets: Vec<_> = (0..30).map(|_| random_set(&mut rng, 3)).collect();
        let fit = fit_shape_basis(&sets, 4).unwrap();
        let codes: Vec<LatentCode> = sets.iter().map(|s| fit.basis.project(s).unwrap()).collect();
        for k in 0..4 {
            let var = codes.iter().map(|z| z.0[k] * z.0[k]).sum::<f64>() / 29.0;
            assert!((var - 1.0).abs() < 1e-9, "direction {k} variance {var}");
        }
    }

    #[test]
    fn dimension_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sets: Vec<_> = (0..3).map(|_| random_set(&mut rng, 1)).collect();
        assert!(matches!(fit_shape_basis(&sets, 3), Err(Error::TooFewInstances { .. })));
        let many: Vec<_> = (0..8).map(|_| random_set(&mut rng, 1)).collect();
        assert!(matches!(
            fit_shape_basis(&many, 5),
            Err(Error::InvalidLatentDim { dim: 5, max: 4 })
        ));
        let fit = fit_shape_basis(&many, 2).unwrap();
        assert!(matches!(
            fit.basis.decode(&LatentCode::zeros(3)),
            Err(Error::DimensionMismatch { .. })
        ));
        let mixed = vec![
            random_set(&mut rng, 2),
            random_set(&mut rng, 3),
            random_set(&mut rng, 2),
        ];
        assert!(matches!(fit_shape_basis(&mixed, 1), Err(Error::CountMismatch { .. })));
    }

    #[test]
    fn radius_clamp_leaves_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sets: Vec<_> = (0..10).map(|_| random_set(&mut rng, 3)).collect();
        let fit = fit_shape_basis(&sets, 3).unwrap();
        let b = &fit.basis;
        // Find a code that drives radius 0 far negative along the first direction with a radius loading.
        let d = b.directions();
        let k = (0..3)
            .max_by(|&x, &y| d[(3, x)].abs().total_cmp(&d[(3, y)].abs()))
            .unwrap();
        let mut z = vec![0.0; 3];
        z[k] = -1e3 * d[(3, k)].signum();
        let z = LatentCode(z);
        let raw = b.decode_packed(&z).unwrap();
        assert!(raw[3] < 0.0);
        let set = b.decode(&z).unwrap();
        assert_eq!(set.primitives[0].radius, 0.0);
        for (l, p) in set.primitives.iter().enumerate() {
            assert_eq!(p.center, Vec3::new(raw[4 * l], raw[4 * l + 1], raw[4 * l + 2]));
            assert_eq!(p.center, b.decode_center(&z, l));
        }
    }

    #[test]
    fn center_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sets: Vec<_> = (0..12).map(|_| random_set(&mut rng, 4)).collect();
        let fit = fit_shape_basis(&sets, 5).unwrap();
        let b = &fit.basis;
        let h = 1e-4;
        for _ in 0..10 {
            let z: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            for label in 0..4 {
                let jac = b.center_jacobian(label);
                for k in 0..5 {
                    let mut zp = z.clone();
                    let mut zm = z.clone();
                    zp[k] += h;
                    zm[k] -= h;
                    let fd =
                        (b.decode_center(&LatentCode(zp), label) - b.decode_center(&LatentCode(zm), label)) / (2.0 * h);
                    for axis in 0..3 {
                        let exact = jac[axis][k];
                        let rel = (fd[axis] - exact).abs() / exact.abs().max(1e-12);
                        assert!(rel <= 1e-7 || (fd[axis] - exact).abs() < 1e-12, "rel error {rel}");
                    }
                }
            }
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sets: Vec<_> = (0..9).map(|_| random_set(&mut rng, 3)).collect();
        let fit = fit_shape_basis(&sets, 4).unwrap();
        let text = serde_json::to_string(&fit.basis).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["latent_dim"], 4);
        assert_eq!(v["n_primitives"], 3);
        assert_eq!(v["basis"].as_array().unwrap().len(), 12);
        let back: LinearShapeBasis = serde_json::from_str(&text).unwrap();
        assert_eq!(back, fit.basis);
    }
}
