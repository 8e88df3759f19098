//! SIM(3)-invariant shape descriptor built from cosines between normalized
//! center-difference vectors.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::labeling::{Label, SemanticCenters};
use crate::primitive::PrimitiveSet;

/// Difference vectors at or below this norm are degenerate.
pub const DEGENERATE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Quadruple {
    pub i: Label,
    pub j: Label,
    pub k: Label,
    pub o: Label,
}

impl Quadruple {
    pub fn new(i: Label, j: Label, k: Label, o: Label) -> Self {
        Self { i, j, k, o }
    }

    pub fn labels(&self) -> [Label; 4] {
        [self.i, self.j, self.k, self.o]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrupleSample {
    pub quadruples: Vec<Quadruple>,
    pub seed: u64,
    /// Label set the sample was drawn from.
    pub labels: Vec<Label>,
}

impl QuadrupleSample {
    pub fn len(&self) -> usize {
        self.quadruples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quadruples.is_empty()
    }

    /// Sub-sample keeping the quadruples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            quadruples: indices.iter().map(|&i| self.quadruples[i]).collect(),
            seed: self.seed,
            labels: self.labels.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShapeDescriptor {
    pub values: Vec<f64>,
}

impl ShapeDescriptor {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Label → center lookup used by descriptor evaluation.
pub trait CenterLookup {
    fn center(&self, label: Label) -> Option<Vec3>;
}

impl CenterLookup for [Vec3] {
    fn center(&self, label: Label) -> Option<Vec3> {
        self.get(label as usize).copied()
    }
}

impl CenterLookup for Vec<Vec3> {
    fn center(&self, label: Label) -> Option<Vec3> {
        self.as_slice().center(label)
    }
}

impl CenterLookup for SemanticCenters {
    fn center(&self, label: Label) -> Option<Vec3> {
        self.get(label).copied()
    }
}

impl CenterLookup for PrimitiveSet {
    fn center(&self, label: Label) -> Option<Vec3> {
        self.primitives.get(label as usize).map(|p| p.center)
    }
}

impl CenterLookup for BTreeMap<Label, Vec3> {
    fn center(&self, label: Label) -> Option<Vec3> {
        self.get(&label).copied()
    }
}

impl CenterLookup for HashMap<Label, Vec3> {
    fn center(&self, label: Label) -> Option<Vec3> {
        self.get(&label).copied()
    }
}

#[inline]
fn unit(v: Vec3) -> Option<(Vec3, f64)> {
    let n = v.norm();
    (n > DEGENERATE_EPS).then(|| (v / n, n))
}

/// Cosine of the angle between `c_i − c_j` and `c_k − c_o`.
pub fn atomic_descriptor(ci: &Vec3, cj: &Vec3, ck: &Vec3, co: &Vec3) -> Result<f64> {
    let (u, _) = unit(ci - cj).ok_or(Error::DegenerateVector { index: 0 })?;
    let (w, _) = unit(ck - co).ok_or(Error::DegenerateVector { index: 0 })?;
    Ok(u.dot(&w).clamp(-1.0, 1.0))
}

/// Atomic descriptor and its gradient with respect to `(c_i, c_j, c_k, c_o)`.
pub fn atomic_descriptor_grad(ci: &Vec3, cj: &Vec3, ck: &Vec3, co: &Vec3) -> Result<(f64, [Vec3; 4])> {
    let (u, nu) = unit(ci - cj).ok_or(Error::DegenerateVector { index: 0 })?;
    let (w, nw) = unit(ck - co).ok_or(Error::DegenerateVector { index: 0 })?;
    let theta = u.dot(&w).clamp(-1.0, 1.0);
    let gu = (w - theta * u) / nu;
    let gw = (u - theta * w) / nw;
    Ok((theta, [gu, -gu, gw, -gw]))
}

fn lookup<C: CenterLookup + ?Sized>(centers: &C, q: &Quadruple) -> Result<[Vec3; 4]> {
    let get = |l: Label| centers.center(l).ok_or(Error::MissingLabel(l));
    Ok([get(q.i)?, get(q.j)?, get(q.k)?, get(q.o)?])
}

/// Draws `m` quadruples uniformly (with replacement) from all `(i, j, k, o)`
/// over `labels` with `i ≠ j` and `k ≠ o`.
pub fn sample_quadruples(labels: &[Label], m: usize, seed: u64) -> Result<QuadrupleSample> {
    sample_filtered(labels, m, seed, |_, _| true)
}

/// Like [`sample_quadruples`], additionally redrawing any pair whose centers
/// coincide, so the result can always be evaluated on `centers`.
pub fn sample_usable_quadruples(centers: &SemanticCenters, m: usize, seed: u64) -> Result<QuadrupleSample> {
    sample_filtered(&centers.labels, m, seed, |a, b| {
        match (centers.get(a), centers.get(b)) {
            (Some(x), Some(y)) => (x - y).norm() > DEGENERATE_EPS,
            _ => false,
        }
    })
}

fn sample_filtered(
    labels: &[Label],
    m: usize,
    seed: u64,
    usable: impl Fn(Label, Label) -> bool,
) -> Result<QuadrupleSample> {
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::LabelSetTooSmall(distinct.len()));
    }
    let n = distinct.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_attempts = 1000 * m.max(1);
    let mut attempts = 0;
    let mut draw_pair = |rng: &mut ChaCha8Rng| -> Result<(Label, Label)> {
        loop {
            attempts += 1;
            if attempts > max_attempts {
                return Err(Error::DegenerateVector { index: 0 });
            }
            let a = distinct[rng.random_range(0..n)];
            let b = distinct[rng.random_range(0..n)];
            if a != b && usable(a, b) {
                return Ok((a, b));
            }
        }
    };
    let mut quadruples = Vec::with_capacity(m);
    for _ in 0..m {
        let (i, j) = draw_pair(&mut rng)?;
        let (k, o) = draw_pair(&mut rng)?;
        quadruples.push(Quadruple { i, j, k, o });
    }
    Ok(QuadrupleSample {
        quadruples,
        seed,
        labels: distinct,
    })
}

/// Concatenated atomic descriptors, in sample order.
pub fn shape_descriptor<C: CenterLookup + ?Sized>(centers: &C, qs: &QuadrupleSample) -> Result<ShapeDescriptor> {
    let values = qs
        .quadruples
        .iter()
        .enumerate()
        .map(|(index, q)| {
            let [a, b, c, d] = lookup(centers, q)?;
            atomic_descriptor(&a, &b, &c, &d).map_err(|_| Error::DegenerateVector { index })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ShapeDescriptor { values })
}

/// Descriptor over label-indexed centers together with the vector-Jacobian
/// product `Σ_m cotangent_m · ∂θ_m/∂c_label`, computed by `cotangent_of`
/// from the descriptor values. The gradient is indexed by label.
pub fn descriptor_vjp(
    centers: &[Vec3],
    qs: &QuadrupleSample,
    cotangent_of: impl FnOnce(&ShapeDescriptor) -> Vec<f64>,
) -> Result<(ShapeDescriptor, Vec<Vec3>)> {
    let mut grads = Vec::with_capacity(qs.len());
    let mut values = Vec::with_capacity(qs.len());
    for (index, q) in qs.quadruples.iter().enumerate() {
        let [a, b, c, d] = lookup(centers, q)?;
        let (theta, g) = atomic_descriptor_grad(&a, &b, &c, &d).map_err(|_| Error::DegenerateVector { index })?;
        values.push(theta);
        grads.push(g);
    }
    let desc = ShapeDescriptor { values };
    let cot = cotangent_of(&desc);
    let mut out = vec![Vec3::zeros(); centers.len()];
    for ((q, g), w) in qs.quadruples.iter().zip(&grads).zip(&cot) {
        if *w == 0.0 {
            continue;
        }
        for (label, gl) in q.labels().iter().zip(g) {
            out[*label as usize] += *w * gl;
        }
    }
    Ok((desc, out))
}

/// Euclidean norm of the elementwise difference.
pub fn descriptor_residual(a: &ShapeDescriptor, b: &ShapeDescriptor) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}
