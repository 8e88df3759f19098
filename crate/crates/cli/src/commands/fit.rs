use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;

use primpose::io::{read_json, write_json};
use primpose::primitive::{FitConfig, DEFAULT_TRUNCATION};
use primpose::synth::{build_category_model, BuildConfig, CategorySpec};

use crate::failure::{CliError, CliResult};
use crate::layout::{BASIS_FILE, CATEGORY_FILE};
use crate::Globals;

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Built-in category name, or a path to a category JSON file.
    #[arg(long)]
    pub category: String,
    /// Training instances (profile default: 40).
    #[arg(long)]
    pub instances: Option<usize>,
    /// Primitives per shape (profile default: 64 desk, 256 paper-parity).
    #[arg(long = "n-primitives")]
    pub n_primitives: Option<usize>,
    /// SDF truncation distance.
    #[arg(long, default_value_t = DEFAULT_TRUNCATION)]
    pub trunc: f64,
    #[arg(long = "latent-dim", default_value_t = 8)]
    pub latent_dim: usize,
    /// SDF samples drawn per instance.
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    /// Iteration cap of each primitive fit.
    #[arg(long = "fit-iters", default_value_t = FitConfig::default().iterations)]
    pub fit_iters: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct FitSummary<'a> {
    category: &'a str,
    instances: usize,
    n_primitives: usize,
    latent_dim: usize,
    truncation: f64,
    seed: u64,
    params: &'a [Vec<f64>],
    fit_loss: &'a [f64],
    fit_chamfer: &'a [f64],
    recon_chamfer: &'a [f64],
}

fn load_spec(category: &str) -> CliResult<CategorySpec> {
    let path = Path::new(category);
    if path.extension().is_some_and(|e| e == "json") {
        let spec: CategorySpec = read_json(path)?;
        spec.validate().map_err(|e| CliError::config(e.to_string()))?;
        return Ok(spec);
    }
    CategorySpec::builtin(category).map_err(|e| CliError::config(e.to_string()))
}

fn stats(values: &[f64]) -> (f64, f64) {
    let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
    (mean, values.iter().copied().fold(0.0, f64::max))
}

pub fn run(args: &FitArgs, globals: &Globals) -> CliResult<()> {
    if !(args.trunc > 0.0 && args.trunc.is_finite()) {
        return Err(CliError::config(format!(
            "--trunc must be positive, got {}",
            args.trunc
        )));
    }
    let spec = load_spec(&args.category)?;
    let cfg = BuildConfig {
        n_instances: args.instances.unwrap_or(globals.profile.instances()),
        n_primitives: args.n_primitives.unwrap_or(globals.profile.n_primitives()),
        latent_dim: args.latent_dim,
        truncation: args.trunc,
        samples_per_instance: args.samples,
        fit: FitConfig {
            iterations: args.fit_iters,
            ..FitConfig::default()
        },
        seed: globals.seed,
    };
    let model = build_category_model(&spec, &cfg)?;

    write_json(&args.out.join(BASIS_FILE), &model.basis)?;
    write_json(&args.out.join(CATEGORY_FILE), &model.spec)?;
    for (i, set) in model.instances.iter().enumerate() {
        write_json(&args.out.join("prims").join(format!("instance_{i:03}.json")), set)?;
    }
    let summary = FitSummary {
        category: &spec.name,
        instances: cfg.n_instances,
        n_primitives: cfg.n_primitives,
        latent_dim: cfg.latent_dim,
        truncation: cfg.truncation,
        seed: cfg.seed,
        params: &model.params,
        fit_loss: &model.fit_loss,
        fit_chamfer: &model.fit_chamfer,
        recon_chamfer: &model.recon_chamfer,
    };
    write_json(&args.out.join("fit_summary.json"), &summary)?;

    let (loss_mean, loss_max) = stats(&model.fit_loss);
    let (fit_mean, fit_max) = stats(&model.fit_chamfer);
    let (recon_mean, recon_max) = stats(&model.recon_chamfer);
    println!(
        "{}: {} instances, {} primitives, latent dim {}",
        spec.name, cfg.n_instances, cfg.n_primitives, cfg.latent_dim
    );
    println!("  fit loss        mean {loss_mean:.3e}  max {loss_max:.3e}");
    println!("  fit chamfer     mean {fit_mean:.3e}  max {fit_max:.3e}");
    println!("  basis chamfer   mean {recon_mean:.3e}  max {recon_max:.3e}");
    println!("  wrote {}", args.out.display());
    Ok(())
}
