//! Output directories and atomic file writes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mem_core::dvae::DvaeConfig;
use mem_core::tensor::ParamStore;
use mem_core::vit::VitConfig;

use crate::error::CliError;

pub const CONFIG_FILE: &str = "config.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CARD_FILE: &str = "model.json";
pub const MODEL_FILE: &str = "model.memc";
pub const STATE_FILE: &str = "state.memc";
pub const CURVE_FILE: &str = "curve.csv";

/// Writes `bytes` to a sibling temp file and renames it over `path`, so a
/// reader never observes a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Io(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| CliError::Io(format!("writing {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| CliError::Io(format!("renaming to {}: {e}", path.display())))
}

/// Claims `dir` for a stage. An existing non-empty directory is only
/// accepted with `resume`.
pub fn prepare_dir(dir: &Path, resume: bool) -> Result<(), CliError> {
    let occupied = dir.exists() && (dir.is_file() || fs::read_dir(dir)?.next().is_some());
    if occupied && !resume {
        return Err(CliError::Io(format!(
            "{} already exists; pass --resume to continue or choose another --out",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("creating {}: {e}", dir.display())))
}

/// Architecture metadata stored next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelCard {
    Dvae { config: DvaeConfig },
    Vit { config: VitConfig },
    Classifier { config: VitConfig, num_classes: usize },
}

pub fn write_model(dir: &Path, card: &ModelCard, params: &ParamStore) -> Result<(), CliError> {
    write_atomic(&dir.join(MODEL_FILE), &params.to_bytes())?;
    let json = serde_json::to_string_pretty(card).expect("model card serializes") + "\n";
    write_atomic(&dir.join(CARD_FILE), json.as_bytes())
}

/// Accepts a stage output directory or a path to its `model.memc`.
fn model_dir(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

pub fn read_model(path: &Path) -> Result<(ModelCard, ParamStore), CliError> {
    let dir = model_dir(path);
    let card_path = dir.join(CARD_FILE);
    let text = fs::read_to_string(&card_path).map_err(|e| CliError::Io(format!("reading {}: {e}", card_path.display())))?;
    let card: ModelCard =
        serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{} is malformed: {e}", card_path.display())))?;
    let model_path = dir.join(MODEL_FILE);
    let bytes = fs::read(&model_path).map_err(|e| CliError::Io(format!("reading {}: {e}", model_path.display())))?;
    let params =
        ParamStore::from_bytes(&bytes).map_err(|e| CliError::Io(format!("{} is malformed: {e}", model_path.display())))?;
    Ok((card, params))
}

/// Parameters followed by optimizer moments, in one checkpoint.
pub fn write_state(dir: &Path, params: &ParamStore, moments: &ParamStore) -> Result<(), CliError> {
    let mut all = params.clone();
    for (name, value) in moments.names().iter().zip(moments.values()) {
        all.add(name.clone(), value.clone());
    }
    write_atomic(&dir.join(STATE_FILE), &all.to_bytes())
}

pub fn read_state(dir: &Path) -> Result<Option<ParamStore>, CliError> {
    let path = dir.join(STATE_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let bytes = fs::read(&path)?;
    ParamStore::from_bytes(&bytes)
        .map(Some)
        .map_err(|e| CliError::Io(format!("{} is malformed: {e}", path.display())))
}

/// Rows of an existing curve CSV whose leading step is below `limit`,
/// header included; empty when there is no file.
pub fn curve_prefix(dir: &Path, limit: usize) -> Result<String, CliError> {
    let path = dir.join(CURVE_FILE);
    if !path.exists() {
        return Ok(String::new());
    }
    let text = fs::read_to_string(&path)?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0 || line.split(',').next().and_then(|s| s.parse::<usize>().ok()).is_some_and(|s| s < limit);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}
