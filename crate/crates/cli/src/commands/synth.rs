use std::path::PathBuf;

use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use primpose::io::{write_json, write_scene_dir};
use primpose::synth::{derive_seed, synth_scene_retry, CorruptionConfig, SceneConfig};

use crate::failure::{CliError, CliResult};
use crate::layout::{load_model, scene_dir};
use crate::Globals;

/// View redraws before a scene is reported as failed.
const VIEW_ATTEMPTS: usize = 5;

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory written by `fit`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    /// Gaussian point noise as a fraction of the object diameter.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Fraction of points replaced by uniform outliers.
    #[arg(long, default_value_t = 0.0)]
    pub outliers: f64,
    /// Fraction of labels replaced by a wrong label.
    #[arg(long = "label-flip", default_value_t = 0.0)]
    pub label_flip: f64,
    /// Points per observation after resampling.
    #[arg(long, default_value_t = 1024)]
    pub points: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct SceneFailure {
    scene: String,
    error: String,
}

#[derive(Serialize)]
struct SynthSummary {
    category: String,
    requested: usize,
    written: Vec<String>,
    failed: Vec<SceneFailure>,
}

pub fn run(args: &SynthArgs, globals: &Globals) -> CliResult<()> {
    if !(args.noise >= 0.0) || !(0.0..1.0).contains(&args.outliers) || !(0.0..=1.0).contains(&args.label_flip) {
        return Err(CliError::config(
            "need --noise >= 0, 0 <= --outliers < 1 and 0 <= --label-flip <= 1",
        ));
    }
    if args.points == 0 {
        return Err(CliError::config("--points must be positive"));
    }
    let model = load_model(&args.model)?;
    let cfg = SceneConfig {
        corruption: CorruptionConfig {
            noise_sigma: args.noise,
            outlier_fraction: args.outliers,
            label_flip: args.label_flip,
        },
        n_points: args.points,
        ..SceneConfig::default()
    };

    let outcomes: Vec<(String, CliResult<()>)> = (0..args.count)
        .into_par_iter()
        .map(|i| {
            let dir = scene_dir(&args.out, i);
            let name = dir.file_name().unwrap().to_string_lossy().into_owned();
            let seed = derive_seed(globals.seed, i as u64);
            let outcome = synth_scene_retry(&model.basis, &model.spec, seed, &cfg, VIEW_ATTEMPTS)
                .and_then(|scene| write_scene_dir(&dir, &scene))
                .map_err(CliError::from);
            (name, outcome)
        })
        .collect();

    let mut summary = SynthSummary {
        category: model.spec.name.clone(),
        requested: args.count,
        written: Vec::new(),
        failed: Vec::new(),
    };
    for (scene, outcome) in outcomes {
        match outcome {
            Ok(()) => summary.written.push(scene),
            Err(e) => {
                eprintln!("{scene}: {e}");
                summary.failed.push(SceneFailure {
                    scene,
                    error: e.message,
                });
            }
        }
    }
    write_json(&args.out.join("synth_summary.json"), &summary)?;
    println!(
        "wrote {}/{} {} scenes to {}",
        summary.written.len(),
        args.count,
        summary.category,
        args.out.display()
    );
    Ok(())
}
