use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::shapes::{analytic_surface_points, sample_sdf, CategorySpec};
use crate::basis::{fit_shape_basis, LinearShapeBasis};
use crate::error::{Error, Result};
use crate::eval::chamfer;
use crate::primitive::{align_primitive_indices, fit_primitives, FitConfig, PrimitiveSet, DEFAULT_TRUNCATION};

/// Surface points per shape when measuring Chamfer distances.
const CHAMFER_POINTS: usize = 1500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    pub n_instances: usize,
    pub n_primitives: usize,
    pub latent_dim: usize,
    pub truncation: f64,
    pub samples_per_instance: usize,
    pub fit: FitConfig,
    pub seed: u64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            n_instances: 40,
            n_primitives: 64,
            latent_dim: 8,
            truncation: DEFAULT_TRUNCATION,
            samples_per_instance: 10_000,
            fit: FitConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryModel {
    pub spec: CategorySpec,
    pub basis: LinearShapeBasis,
    /// Fitted primitive sets with indices aligned to instance 0.
    pub instances: Vec<PrimitiveSet>,
    pub params: Vec<Vec<f64>>,
    pub fit_loss: Vec<f64>,
    /// Chamfer between each fitted union of spheres and its analytic surface.
    pub fit_chamfer: Vec<f64>,
    /// Chamfer between each fitted set and its projection through the basis.
    pub recon_chamfer: Vec<f64>,
}

/// Mixes a stream index into a base seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Union-of-spheres Chamfer distance between two primitive sets.
pub fn primitive_chamfer(a: &PrimitiveSet, b: &PrimitiveSet, seed: u64) -> f64 {
    chamfer(
        &a.surface_points(CHAMFER_POINTS, seed),
        &b.surface_points(CHAMFER_POINTS, seed ^ 1),
    )
}

/// Fits primitives to `n_instances` random instances of a category, aligns
/// their indices to the first instance and fits a linear basis.
pub fn build_category_model(spec: &CategorySpec, cfg: &BuildConfig) -> Result<CategoryModel> {
    spec.validate()?;
    if cfg.n_instances <= cfg.latent_dim {
        return Err(Error::TooFewInstances {
            needed: cfg.latent_dim + 1,
            got: cfg.n_instances,
        });
    }
    if !(cfg.truncation > 0.0) {
        return Err(Error::InvalidConfig("truncation must be positive".into()));
    }

    // One sampling stream for every instance, so identical parameters give
    // identical fits.
    let sample_seed = derive_seed(cfg.seed, u64::MAX);
    let fitted: Vec<(Vec<f64>, PrimitiveSet, f64, f64)> = (0..cfg.n_instances)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(cfg.seed, i as u64);
            let params = spec.sample_params(&mut ChaCha8Rng::seed_from_u64(seed));
            let samples = sample_sdf(spec, &params, cfg.samples_per_instance, sample_seed)?;
            let fit = fit_primitives(&samples, cfg.n_primitives, cfg.truncation, &cfg.fit)?;
            let mut set = fit.set;
            set.category = spec.name.clone();
            let truth = analytic_surface_points(&spec.shape(&params)?, CHAMFER_POINTS, derive_seed(seed, 2))?;
            let fit_chamfer = chamfer(&set.surface_points(CHAMFER_POINTS, derive_seed(seed, 3)), &truth);
            Ok((params, set, fit.loss, fit_chamfer))
        })
        .collect::<Result<_>>()?;

    let sets: Vec<PrimitiveSet> = fitted.iter().map(|f| f.1.clone()).collect();
    let aligned: Vec<PrimitiveSet> = align_primitive_indices(&sets, &sets[0])?
        .into_iter()
        .map(|a| a.set)
        .collect();
    let mut basis = fit_shape_basis(&aligned, cfg.latent_dim)?.basis;
    basis.category = spec.name.clone();

    let recon_chamfer = aligned
        .par_iter()
        .enumerate()
        .map(|(i, set)| {
            let recon = basis.decode(&basis.project(set)?)?;
            Ok(primitive_chamfer(&recon, set, derive_seed(cfg.seed, 1_000 + i as u64)))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(CategoryModel {
        spec: spec.clone(),
        basis,
        instances: aligned,
        params: fitted.iter().map(|f| f.0.clone()).collect(),
        fit_loss: fitted.iter().map(|f| f.2).collect(),
        fit_chamfer: fitted.iter().map(|f| f.3).collect(),
        recon_chamfer,
    })
}
