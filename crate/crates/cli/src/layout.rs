//! Directory layout shared by the subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use primpose::basis::LinearShapeBasis;
use primpose::io::read_json;
use primpose::synth::CategorySpec;

use crate::failure::{CliError, CliResult};

pub const BASIS_FILE: &str = "basis.json";
pub const CATEGORY_FILE: &str = "category.json";
pub const RESULT_FILE: &str = "result.json";
pub const ERROR_FILE: &str = "error.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const CURVES_FILE: &str = "curves.csv";

pub struct Model {
    pub spec: CategorySpec,
    pub basis: LinearShapeBasis,
}

pub fn load_model(dir: &Path) -> CliResult<Model> {
    let load = |name: &str| dir.join(name);
    Ok(Model {
        spec: read_json(&load(CATEGORY_FILE)).map_err(|e| CliError::from(e).context("loading model"))?,
        basis: read_json(&load(BASIS_FILE)).map_err(|e| CliError::from(e).context("loading model"))?,
    })
}

/// Sorted names of the subdirectories of `root` that contain `marker`.
pub fn scene_names(root: &Path, marker: &str) -> CliResult<Vec<String>> {
    let entries = fs::read_dir(root).map_err(|e| CliError::io(format!("{}: {e}", root.display())))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry?;
        if entry.path().join(marker).is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

pub fn scene_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("scene_{index:04}"))
}
