//! Run directories: datasets named by a config, training, and the files a run leaves behind.

use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::datasets::{generate, load_dataset, DatasetKind, Dataset, GeneratorConfig};
use crate::error::{Error, Result};
use crate::trainer::{train, TrainedRun};

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// A saved dataset directory, or one generated from the benchmark name.
fn dataset(name: &str, path: &Option<PathBuf>, seed: u64, count: usize) -> Result<Dataset> {
    if let Some(dir) = path {
        return load_dataset(dir);
    }
    let kind = DatasetKind::parse(name).ok_or_else(|| Error::MissingData {
        path: PathBuf::from(name),
        hint: "this benchmark is not generated; set dataset.path to an ingested directory".into(),
    })?;
    generate(&GeneratorConfig::procedural(kind), seed, count)
}

pub fn training_set(cfg: &RunConfig) -> Result<Dataset> {
    dataset(&cfg.dataset, &cfg.dataset_path, cfg.train_data_seed, cfg.train_count)
}

pub fn evaluation_set(cfg: &RunConfig) -> Result<Dataset> {
    dataset(&cfg.dataset, &cfg.eval_path, cfg.eval_data_seed, cfg.eval_count)
}

/// Train per `cfg`; when `cfg.out` is set the directory receives the resolved config, the
/// checkpoint and the metric log.
pub fn run(cfg: &RunConfig) -> Result<TrainedRun> {
    cfg.train.validate()?;
    let train_set = training_set(cfg)?;
    let eval_set = evaluation_set(cfg)?;
    if let Some(dir) = &cfg.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
    }
    let out = train(&cfg.train, &train_set, Some(&eval_set))?;
    if let Some(dir) = &cfg.out {
        out.save(dir)?;
    }
    Ok(out)
}

/// The resolved config stored in a run directory.
pub fn read_run_config(dir: &Path) -> Result<RunConfig> {
    let path = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&path).map_err(|_| Error::MissingData {
        path: path.clone(),
        hint: "not a run directory".into(),
    })?;
    RunConfig::parse(&text)
}
