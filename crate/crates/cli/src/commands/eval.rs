use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use primpose::eval::{
    ap_curves, score_instance, summarize, write_curves_csv, write_metrics_csv, InstanceMetrics, MetricsReport,
    ThresholdGrid,
};
use primpose::io::{read_json, write_atomic, write_json, GroundTruth, GT_FILE};
use primpose::pipeline::EstimationResult;

use crate::failure::{CliError, CliResult, EXIT_NUMERIC};
use crate::layout::{load_model, scene_names, CURVES_FILE, RESULT_FILE};
use crate::Globals;

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory written by `fit`.
    #[arg(long)]
    pub model: PathBuf,
    /// Directory of scene folders, each holding a gt.json.
    #[arg(long)]
    pub scenes: PathBuf,
    /// Where `estimate` wrote its results (default: the scenes directory).
    #[arg(long)]
    pub results: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct Summary {
    scenes: usize,
    evaluated: usize,
    /// Scenes without a usable estimate; they are not part of any AP.
    failed: Vec<String>,
    overall: MetricsReport,
    per_category: BTreeMap<String, MetricsReport>,
}

pub fn run(args: &EvalArgs, _globals: &Globals) -> CliResult<()> {
    let model = load_model(&args.model)?;
    let names = scene_names(&args.scenes, GT_FILE)?;
    let results = args.results.clone().unwrap_or_else(|| args.scenes.clone());

    let scored: Vec<(String, CliResult<InstanceMetrics>)> = names
        .par_iter()
        .map(|name| {
            let score = || -> CliResult<InstanceMetrics> {
                let gt: GroundTruth = read_json(&args.scenes.join(name).join(GT_FILE))?;
                let result = EstimationResult::from_json(read_json(&results.join(name).join(RESULT_FILE))?)?;
                Ok(score_instance(name, &model.basis, &result.z_hat, &result.pose, &gt)?)
            };
            (name.clone(), score())
        })
        .collect();

    let mut metrics = Vec::new();
    let mut failed = Vec::new();
    for (name, outcome) in scored {
        match outcome {
            Ok(m) => metrics.push(m),
            Err(e) => {
                eprintln!("{name}: {e}");
                failed.push(name);
            }
        }
    }
    if metrics.is_empty() {
        return Err(CliError {
            code: EXIT_NUMERIC,
            message: format!("no scene in {} has a usable estimate", args.scenes.display()),
        });
    }

    let mut by_category: BTreeMap<String, Vec<InstanceMetrics>> = BTreeMap::new();
    for m in &metrics {
        by_category.entry(m.category.clone()).or_default().push(m.clone());
    }
    let summary = Summary {
        scenes: names.len(),
        evaluated: metrics.len(),
        failed,
        overall: summarize(&metrics)?,
        per_category: by_category
            .iter()
            .map(|(k, v)| Ok((k.clone(), summarize(v)?)))
            .collect::<primpose::Result<_>>()?,
    };

    let mut table = Vec::new();
    write_metrics_csv(&metrics, &mut table)?;
    write_atomic(&args.out.join("metrics.csv"), &table)?;
    let mut curves = Vec::new();
    write_curves_csv(&ap_curves(&metrics, &ThresholdGrid::default())?, &mut curves)?;
    write_atomic(&args.out.join(CURVES_FILE), &curves)?;
    write_json(&args.out.join("summary.json"), &summary)?;

    let r = &summary.overall;
    println!("evaluated {}/{} scenes", summary.evaluated, summary.scenes);
    println!("  IoU50 {:.3}  IoU75 {:.3}", r.iou50, r.iou75);
    for (k, v) in r.pose_ap.iter().chain(&r.relative_pose_ap) {
        println!("  {k:<12} {v:.3}");
    }
    println!("  mean chamfer {:.3e}", r.mean_chamfer);
    Ok(())
}
