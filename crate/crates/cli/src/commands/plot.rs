use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use clap::Args;

use primpose::eval::{read_curves_csv, CurveMetric};
use primpose::io::write_atomic;
use primpose::optimizer::OptimizationTrace;

use crate::failure::{CliError, CliResult};
use crate::layout::{scene_names, CURVES_FILE, TRACE_FILE};
use crate::svg::{LineChart, Series};

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Directory written by `eval` (reads curves.csv).
    #[arg(long)]
    pub eval: PathBuf,
    /// Directory of per-scene trace.csv files written by `estimate`.
    #[arg(long)]
    pub traces: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn axis_label(metric: CurveMetric) -> &'static str {
    match metric {
        CurveMetric::Iou => "3D IoU threshold",
        CurveMetric::Rotation => "rotation error threshold (deg)",
        CurveMetric::Translation => "translation error threshold (m)",
    }
}

pub fn run(args: &PlotArgs) -> CliResult<()> {
    let path = args.eval.join(CURVES_FILE);
    let file = fs::File::open(&path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let curves = read_curves_csv(file)?;

    let mut grouped: BTreeMap<CurveMetric, BTreeMap<String, Vec<(f64, f64)>>> = BTreeMap::new();
    for c in curves {
        grouped
            .entry(c.metric)
            .or_default()
            .entry(c.category)
            .or_default()
            .push((c.threshold, c.ap));
    }
    let mut written = Vec::new();
    for (metric, by_category) in grouped {
        let chart = LineChart {
            title: format!("AP vs {} threshold", metric.name()),
            x_label: axis_label(metric).into(),
            y_label: "average precision".into(),
            y_range: Some((0.0, 1.0)),
            log_y: false,
            series: by_category
                .into_iter()
                .map(|(name, points)| Series { name, points })
                .collect(),
        };
        let file = args.out.join(format!("ap_{}.svg", metric.name()));
        write_atomic(&file, chart.render().as_bytes())?;
        written.push(file);
    }

    if let Some(root) = &args.traces {
        let mut series = Vec::new();
        for name in scene_names(root, TRACE_FILE)? {
            let path = root.join(&name).join(TRACE_FILE);
            let file = fs::File::open(&path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
            let trace = OptimizationTrace::read_csv(file)?;
            let points = trace
                .objective
                .iter()
                .enumerate()
                .map(|(i, &v)| (i as f64, v))
                .collect();
            series.push(Series { name, points });
        }
        let chart = LineChart {
            title: "shape optimization".into(),
            x_label: "iteration".into(),
            y_label: "objective".into(),
            y_range: None,
            log_y: true,
            series,
        };
        let file = args.out.join("optimization_trace.svg");
        write_atomic(&file, chart.render().as_bytes())?;
        written.push(file);
    }
    for file in written {
        println!("wrote {}", file.display());
    }
    Ok(())
}
