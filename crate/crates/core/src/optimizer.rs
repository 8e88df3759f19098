//! Online latent-code optimization against an observed set of semantic
//! centers, plus a consensus (RANSAC-style) variant.

use std::io::Write;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{LatentCode, LinearShapeBasis};
use crate::descriptor::{
    descriptor_residual, descriptor_vjp, sample_usable_quadruples, shape_descriptor, QuadrupleSample, ShapeDescriptor,
};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::labeling::{SemanticCenters, MIN_LABELS};

const NORM_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub rounds: usize,
    pub fraction: f64,
    pub trim: f64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            rounds: 16,
            fraction: 0.5,
            trim: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub iterations: usize,
    pub step: f64,
    pub momentum: f64,
    pub eta: f64,
    pub quadruples: usize,
    pub resample_per_iter: bool,
    pub ransac: Option<RansacConfig>,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            step: 0.02,
            momentum: 0.9,
            eta: 1e-4,
            quadruples: 10_000,
            resample_per_iter: false,
            ransac: None,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return bad("step must be positive");
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad("eta must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.quadruples == 0 {
            return bad("quadruple count must be positive");
        }
        if let Some(r) = &self.ransac {
            if r.rounds == 0 {
                return bad("ransac rounds must be at least 1");
            }
            if !(r.fraction > 0.0 && r.fraction <= 1.0) {
                return bad("ransac fraction must lie in (0, 1]");
            }
            if !(r.trim > 0.0 && r.trim <= 1.0) {
                return bad("ransac trim quantile must lie in (0, 1]");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub objective: Vec<f64>,
    pub residual: Vec<f64>,
    pub z_norm: Vec<f64>,
    /// Lowest objective seen up to and including each iteration.
    pub best_objective: Vec<f64>,
    pub z_hat: LatentCode,
}

impl OptimizationTrace {
    pub fn len(&self) -> usize {
        self.objective.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objective.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "objective", "residual", "z_norm"])
            .map_err(|e| Error::Io(e.to_string()))?;
        for i in 0..self.len() {
            w.write_record([
                i.to_string(),
                self.objective[i].to_string(),
                self.residual[i].to_string(),
                self.z_norm[i].to_string(),
            ])
            .map_err(|e| Error::Io(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the columns written by [`Self::write_csv`]. The running best
    /// objective is recomputed; `z_hat` is not stored and comes back empty.
    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut trace = Self::default();
        for (row, record) in csv::Reader::from_reader(input).records().enumerate() {
            let rec = record.map_err(|e| Error::Format(e.to_string()))?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Format(format!("trace row {row}: bad field {i}")))
            };
            let objective = num(1)?;
            let best = trace
                .best_objective
                .last()
                .map_or(objective, |b: &f64| b.min(objective));
            trace.objective.push(objective);
            trace.residual.push(num(2)?);
            trace.z_norm.push(num(3)?);
            trace.best_objective.push(best);
        }
        Ok(trace)
    }
}

/// Decoded centers indexed by label.
fn decoded_centers(basis: &LinearShapeBasis, z: &LatentCode) -> Result<Vec<Vec3>> {
    basis
        .decode_packed(z)
        .map(|packed| packed.chunks_exact(4).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
}

/// Objective terms against a precomputed observed descriptor.
struct Evaluation {
    objective: f64,
    residual: f64,
    gradient: Vec<f64>,
}

fn evaluate(
    z: &LatentCode,
    basis: &LinearShapeBasis,
    observed: &ShapeDescriptor,
    qs: &QuadrupleSample,
    eta: f64,
) -> Result<Evaluation> {
    let centers = decoded_centers(basis, z)?;
    let mut residual = 0.0;
    let (_, center_grad) = descriptor_vjp(&centers, qs, |decoded| {
        let diff: Vec<f64> = decoded
            .values
            .iter()
            .zip(&observed.values)
            .map(|(d, o)| d - o)
            .collect();
        residual = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
        if residual > 0.0 {
            diff.iter().map(|x| x / residual).collect()
        } else {
            vec![0.0; diff.len()]
        }
    })?;

    let dim = basis.latent_dim();
    let mut gradient = vec![0.0; dim];
    for (label, g) in center_grad.iter().enumerate() {
        if *g == Vec3::zeros() {
            continue;
        }
        for (axis, row) in basis.center_jacobian(label).iter().enumerate() {
            for (out, j) in gradient.iter_mut().zip(row.iter()) {
                *out += g[axis] * j;
            }
        }
    }
    let z_norm = z.norm();
    if eta > 0.0 {
        let denom = z_norm.max(NORM_FLOOR);
        for (out, zi) in gradient.iter_mut().zip(&z.0) {
            *out += eta * zi / denom;
        }
    }
    Ok(Evaluation {
        objective: residual + eta * z_norm,
        residual,
        gradient,
    })
}

fn check_observation(obs: &SemanticCenters) -> Result<()> {
    if obs.len() < MIN_LABELS {
        return Err(Error::TooFewLabels {
            needed: MIN_LABELS,
            got: obs.len(),
        });
    }
    Ok(())
}

/// `‖f(obs) − f(decode(z))‖ + η‖z‖` over the quadruples in `qs`.
pub fn objective(
    z: &LatentCode,
    basis: &LinearShapeBasis,
    obs: &SemanticCenters,
    qs: &QuadrupleSample,
    eta: f64,
) -> Result<f64> {
    let observed = shape_descriptor(obs, qs)?;
    let decoded = shape_descriptor(&decoded_centers(basis, z)?, qs)?;
    Ok(descriptor_residual(&observed, &decoded)? + eta * z.norm())
}

/// Analytic gradient of [`objective`] with respect to `z`.
pub fn objective_gradient(
    z: &LatentCode,
    basis: &LinearShapeBasis,
    obs: &SemanticCenters,
    qs: &QuadrupleSample,
    eta: f64,
) -> Result<Vec<f64>> {
    let observed = shape_descriptor(obs, qs)?;
    Ok(evaluate(z, basis, &observed, qs, eta)?.gradient)
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Momentum gradient descent from the mean shape over a fixed quadruple sample
/// (or a fresh one per iteration). Returns the best iterate.
fn descend(
    obs: &SemanticCenters,
    basis: &LinearShapeBasis,
    cfg: &OptimizerConfig,
    initial_sample: QuadrupleSample,
) -> Result<(LatentCode, OptimizationTrace)> {
    let dim = basis.latent_dim();
    let mut qs = initial_sample;
    let mut observed = shape_descriptor(obs, &qs)?;
    let step = cfg.step;

    let mut z = LatentCode::zeros(dim);
    let mut velocity = vec![0.0; dim];
    let mut current = evaluate(&z, basis, &observed, &qs, cfg.eta)?;
    let mut trace = OptimizationTrace::default();
    let mut best: Option<(f64, LatentCode)> = None;

    for iteration in 0..cfg.iterations {
        for (v, g) in velocity.iter_mut().zip(&current.gradient) {
            *v = cfg.momentum * *v - step * g;
        }
        for (zi, v) in z.0.iter_mut().zip(&velocity) {
            *zi += v;
        }
        if cfg.resample_per_iter {
            qs = sample_usable_quadruples(obs, qs.len(), derive_seed(cfg.seed, iteration as u64 + 1))?;
            observed = shape_descriptor(obs, &qs)?;
        }
        current = evaluate(&z, basis, &observed, &qs, cfg.eta)?;
        if !current.objective.is_finite() {
            return Err(Error::NonFiniteLoss { iteration });
        }
        if best.as_ref().is_none_or(|(b, _)| current.objective < *b) {
            best = Some((current.objective, z.clone()));
        }
        trace.objective.push(current.objective);
        trace.residual.push(current.residual);
        trace.z_norm.push(z.norm());
        trace
            .best_objective
            .push(best.as_ref().map(|b| b.0).unwrap_or(f64::INFINITY));
    }
    let (_, z_hat) = best.expect("at least one iteration");
    trace.z_hat = z_hat.clone();
    Ok((z_hat, trace))
}

/// Optimizes the latent code so the decoded centers reproduce the observed
/// shape descriptor.
pub fn optimize_shape(
    obs: &SemanticCenters,
    basis: &LinearShapeBasis,
    cfg: &OptimizerConfig,
) -> Result<(LatentCode, OptimizationTrace)> {
    cfg.validate()?;
    check_observation(obs)?;
    let qs = sample_usable_quadruples(obs, cfg.quadruples, cfg.seed)?;
    descend(obs, basis, cfg, qs)
}

/// Mean of the smallest `trim` fraction of absolute residuals.
fn trimmed_mean_abs(a: &ShapeDescriptor, b: &ShapeDescriptor, trim: f64) -> f64 {
    let mut r: Vec<f64> = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).collect();
    r.sort_by(f64::total_cmp);
    let keep = ((trim * r.len() as f64).ceil() as usize).clamp(1, r.len().max(1));
    r.iter().take(keep).sum::<f64>() / keep as f64
}

/// Consensus score of a candidate code on the full sample (lower is better).
pub fn consensus_score(
    z: &LatentCode,
    basis: &LinearShapeBasis,
    observed: &ShapeDescriptor,
    qs: &QuadrupleSample,
    trim: f64,
) -> Result<f64> {
    let decoded = shape_descriptor(&decoded_centers(basis, z)?, qs)?;
    Ok(trimmed_mean_abs(observed, &decoded, trim))
}

/// Runs independent optimizations on random halves (by default) of the
/// quadruple sample and keeps the candidate with the best trimmed residual on
/// the full sample. The full-sample run competes as an extra candidate.
pub fn optimize_shape_ransac(
    obs: &SemanticCenters,
    basis: &LinearShapeBasis,
    cfg: &OptimizerConfig,
) -> Result<(LatentCode, OptimizationTrace)> {
    cfg.validate()?;
    check_observation(obs)?;
    let ransac = cfg.ransac.clone().unwrap_or_default();
    let full = sample_usable_quadruples(obs, cfg.quadruples, cfg.seed)?;
    let observed = shape_descriptor(obs, &full)?;
    let subset_len = ((ransac.fraction * full.len() as f64).round() as usize).clamp(1, full.len());

    let mut best = descend(obs, basis, cfg, full.clone())?;
    let mut best_score = consensus_score(&best.0, basis, &observed, &full, ransac.trim)?;
    for round in 0..ransac.rounds {
        let subset = if subset_len == full.len() {
            full.clone()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1_000_000 + round as u64));
            let mut idx = sample_indices(&mut rng, full.len(), subset_len).into_vec();
            idx.sort_unstable();
            full.select(&idx)
        };
        let candidate = descend(obs, basis, cfg, subset)?;
        let score = consensus_score(&candidate.0, basis, &observed, &full, ransac.trim)?;
        if score < best_score {
            best = candidate;
            best_score = score;
        }
    }
    Ok(best)
}
