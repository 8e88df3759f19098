use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use primpose::basis::LinearShapeBasis;
use primpose::io::{read_ply, write_atomic, write_json, CLOUD_FILE};
use primpose::labeling::flip_labels;
use primpose::optimizer::{OptimizerConfig, RansacConfig};
use primpose::pipeline::{estimate, EstimateConfig, StageTimings};
use primpose::synth::derive_seed;

use crate::failure::{CliError, CliResult};
use crate::layout::{load_model, scene_names, ERROR_FILE, RESULT_FILE, TRACE_FILE};
use crate::Globals;

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Directory written by `fit`.
    #[arg(long)]
    pub model: PathBuf,
    /// Directory of scene folders, each holding a cloud.ply.
    #[arg(long)]
    pub scenes: PathBuf,
    /// Where per-scene results go (default: alongside the scenes).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    /// Sampled quadruples (profile default: 10^4 desk, 10^6 paper-parity).
    #[arg(long)]
    pub quads: Option<usize>,
    /// Consensus rounds over random quadruple subsets.
    #[arg(long, num_args = 0..=1, default_missing_value = "16")]
    pub ransac: Option<usize>,
    /// Extra fraction of labels flipped before estimation.
    #[arg(long = "label-noise", default_value_t = 0.0)]
    pub label_noise: f64,
    /// Weight labels equally in the pose fit instead of by point count.
    #[arg(long = "uniform-label-weights")]
    pub uniform_label_weights: bool,
    /// Labels observed on fewer points are ignored.
    #[arg(long = "min-points", default_value_t = EstimateConfig::default().min_points_per_label)]
    pub min_points: usize,
    /// Per-label trimming factor for center estimates (0 disables).
    #[arg(long = "center-trim", default_value_t = EstimateConfig::default().center_trim)]
    pub center_trim: f64,
    /// Trimmed pose re-fits (0 disables).
    #[arg(long = "pose-refits", default_value_t = EstimateConfig::default().pose_refits)]
    pub pose_refits: usize,
    /// Record wall-clock stage timings (makes result.json non-reproducible).
    #[arg(long)]
    pub timings: bool,
}

#[derive(Serialize)]
struct SceneError<'a> {
    scene: &'a str,
    error: &'a str,
    exit_code: u8,
}

#[derive(Serialize)]
struct EstimateSummary {
    scenes: usize,
    succeeded: Vec<String>,
    failed: Vec<String>,
}

impl EstimateArgs {
    fn config(&self, globals: &Globals) -> CliResult<EstimateConfig> {
        let cfg = EstimateConfig {
            optimizer: OptimizerConfig {
                iterations: self.iters,
                quadruples: self.quads.unwrap_or(globals.profile.quadruples()),
                ransac: self.ransac.map(|rounds| RansacConfig {
                    rounds,
                    ..RansacConfig::default()
                }),
                seed: globals.seed,
                ..OptimizerConfig::default()
            },
            uniform_label_weights: self.uniform_label_weights,
            min_points_per_label: self.min_points,
            center_trim: self.center_trim,
            pose_refits: self.pose_refits,
            ..EstimateConfig::default()
        };
        cfg.optimizer.validate().map_err(|e| CliError::config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(CliError::config("--label-noise must lie in [0, 1]"));
        }
        if !(self.center_trim >= 0.0) {
            return Err(CliError::config("--center-trim must be non-negative"));
        }
        Ok(cfg)
    }
}

fn estimate_scene(
    input: &Path,
    output: &Path,
    basis: &LinearShapeBasis,
    cfg: &EstimateConfig,
    label_noise: (f64, u64),
    keep_timings: bool,
) -> CliResult<()> {
    let mut observation = read_ply(&input.join(CLOUD_FILE))?;
    if label_noise.0 > 0.0 {
        observation = flip_labels(&observation, label_noise.0, basis.n_primitives(), label_noise.1);
    }
    let mut result = estimate(&observation, basis, cfg)?;
    if !keep_timings {
        result.timings = StageTimings::default();
    }
    let mut trace = Vec::new();
    result.trace.write_csv(&mut trace)?;
    write_json(&output.join(RESULT_FILE), &result.to_json())?;
    write_atomic(&output.join(TRACE_FILE), &trace)?;
    Ok(())
}

pub fn run(args: &EstimateArgs, globals: &Globals) -> CliResult<()> {
    let cfg = args.config(globals)?;
    let model = load_model(&args.model)?;
    let names = scene_names(&args.scenes, CLOUD_FILE)?;
    let out_root = args.out.clone().unwrap_or_else(|| args.scenes.clone());

    let outcomes: Vec<CliResult<()>> = names
        .par_iter()
        .enumerate()
        .map(|(i, name)| {
            let output = out_root.join(name);
            let noise = (args.label_noise, derive_seed(globals.seed, i as u64));
            let outcome = estimate_scene(
                &args.scenes.join(name),
                &output,
                &model.basis,
                &cfg,
                noise,
                args.timings,
            );
            match &outcome {
                Ok(()) => {
                    let _ = fs::remove_file(output.join(ERROR_FILE));
                }
                Err(e) => {
                    let _ = fs::remove_file(output.join(RESULT_FILE));
                    let _ = fs::remove_file(output.join(TRACE_FILE));
                    let record = SceneError {
                        scene: name,
                        error: &e.message,
                        exit_code: e.code,
                    };
                    write_json(&output.join(ERROR_FILE), &record)?;
                }
            }
            Ok(outcome)
        })
        .collect::<CliResult<Vec<_>>>()?;

    let mut summary = EstimateSummary {
        scenes: names.len(),
        succeeded: Vec::new(),
        failed: Vec::new(),
    };
    for (name, outcome) in names.iter().zip(&outcomes) {
        match outcome {
            Ok(()) => summary.succeeded.push(name.clone()),
            Err(e) => {
                eprintln!("{name}: {e}");
                summary.failed.push(name.clone());
            }
        }
    }
    write_json(&out_root.join("estimate_summary.json"), &summary)?;
    println!(
        "estimated {}/{} scenes ({} failed)",
        summary.succeeded.len(),
        summary.scenes,
        summary.failed.len()
    );
    Ok(())
}
