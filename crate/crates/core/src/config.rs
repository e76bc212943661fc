//! Flat `key=value` run configuration with dotted section prefixes.
//!
//! `dataset` and `objective` select the recipe defaults; every other key overrides one field.
//! Unknown keys are rejected. `to_text` writes every key, so a resolved config reproduces
//! the run on its own.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::model::Objective;
use crate::recipes::{self, Recipe};
use crate::trainer::{BetaMode, LabelProxy, TrainConfig, VaeTarget};

pub const DEFAULT_TRAIN_COUNT: usize = 4000;
pub const DEFAULT_EVAL_COUNT: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Benchmark name, e.g. `anomaly-mnist`.
    pub dataset: String,
    /// Directory of a saved training set; generated in memory when absent.
    pub dataset_path: Option<PathBuf>,
    /// Directory of a saved evaluation set.
    pub eval_path: Option<PathBuf>,
    pub train_count: usize,
    pub train_data_seed: u64,
    pub eval_count: usize,
    pub eval_data_seed: u64,
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
}

/// Every key in the order `to_text` writes them.
pub const KEYS: &[&str] = &[
    "dataset",
    "objective",
    "dataset.path",
    "dataset.train_count",
    "dataset.train_seed",
    "dataset.eval_path",
    "dataset.eval_count",
    "dataset.eval_seed",
    "out",
    "classifier.arch",
    "mask.arch",
    "mask.initial_logit",
    "vae.encoder",
    "vae.decoder",
    "vae.latent_dim",
    "vae.sigma",
    "vae.target",
    "beta.initial",
    "beta.mode",
    "beta.eta",
    "beta.error_clip",
    "beta.min",
    "beta.max",
    "beta.ema",
    "gumbel.temperature",
    "randomize.enabled",
    "randomize.rects",
    "randomize.min_side",
    "randomize.max_side",
    "train.steps",
    "train.batch_size",
    "train.learning_rate",
    "train.seed",
    "train.classifier_warmup",
    "train.eval_every",
    "train.eval_samples",
    "label_proxy",
];

fn recipe(dataset: &str) -> Result<Recipe> {
    recipes::by_name(dataset).ok_or_else(|| Error::config(format!("unknown dataset `{dataset}`")))
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("`{key}` cannot be `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::config(format!("`{key}` takes on/off, got `{value}`"))),
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Defaults for one benchmark and objective.
    pub fn new(dataset: &str, objective: Objective) -> Result<Self> {
        let r = recipe(dataset)?;
        Ok(RunConfig {
            dataset: dataset.to_string(),
            dataset_path: None,
            eval_path: None,
            train_count: DEFAULT_TRAIN_COUNT,
            train_data_seed: 1,
            eval_count: DEFAULT_EVAL_COUNT,
            eval_data_seed: 2,
            out: None,
            train: TrainConfig::for_recipe(&r, objective),
        })
    }

    /// Parse config text; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(&pairs)
    }

    /// Build from overrides; `dataset` (default `anomaly-mnist`) and `objective` (default `ib`)
    /// are read first wherever they appear.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let find = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let dataset = find("dataset").unwrap_or("anomaly-mnist");
        let objective = match find("objective") {
            Some(o) => Objective::parse(o).ok_or_else(|| Error::config(format!("unknown objective `{o}`")))?,
            None => Objective::Ib,
        };
        let mut cfg = RunConfig::new(dataset, objective)?;
        for (k, v) in pairs {
            if k != "dataset" && k != "objective" {
                cfg.set(k, v)?;
            }
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Apply one override. Changing the dataset or objective resets every other field.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "dataset" => {
                let keep = (self.out.clone(), t.seed);
                *self = RunConfig::new(value, t.objective)?;
                (self.out, self.train.seed) = keep;
            }
            "objective" => {
                let o = Objective::parse(value).ok_or_else(|| Error::config(format!("unknown objective `{value}`")))?;
                let keep = (self.out.clone(), t.seed);
                *self = RunConfig::new(&self.dataset.clone(), o)?;
                (self.out, self.train.seed) = keep;
            }
            "dataset.path" => self.dataset_path = optional_path(value),
            "dataset.train_count" => self.train_count = parse_value(key, value)?,
            "dataset.train_seed" => self.train_data_seed = parse_value(key, value)?,
            "dataset.eval_path" => self.eval_path = optional_path(value),
            "dataset.eval_count" => self.eval_count = parse_value(key, value)?,
            "dataset.eval_seed" => self.eval_data_seed = parse_value(key, value)?,
            "out" => self.out = optional_path(value),
            "classifier.arch" => t.model.classifier = value.to_string(),
            "mask.arch" => t.model.mask = value.to_string(),
            "mask.initial_logit" => t.model.mask_initial_logit = parse_value(key, value)?,
            "vae.encoder" => t.model.encoder = value.to_string(),
            "vae.decoder" => t.model.decoder = value.to_string(),
            "vae.latent_dim" => t.model.latent_dim = parse_value(key, value)?,
            "vae.sigma" => t.model.sigma = parse_value(key, value)?,
            "vae.target" => {
                t.vae_target =
                    VaeTarget::parse(value).ok_or_else(|| Error::config(format!("bad vae target `{value}`")))?
            }
            "beta.initial" => t.beta0 = parse_value(key, value)?,
            "beta.mode" => {
                t.beta_mode = BetaMode::parse(value).ok_or_else(|| Error::config(format!("unknown beta mode `{value}`")))?
            }
            "beta.eta" => t.beta_eta = parse_value(key, value)?,
            "beta.error_clip" => t.beta_error_clip = parse_value(key, value)?,
            "beta.min" => t.beta_min = parse_value(key, value)?,
            "beta.max" => t.beta_max = parse_value(key, value)?,
            "beta.ema" => t.loss_ema = parse_value(key, value)?,
            "gumbel.temperature" => t.temperature = parse_value(key, value)?,
            "randomize.enabled" => t.randomization.enabled = parse_bool(key, value)?,
            "randomize.rects" => t.randomization.rect_count = parse_value(key, value)?,
            "randomize.min_side" => t.randomization.min_side = parse_value(key, value)?,
            "randomize.max_side" => {
                t.randomization.max_side = match value {
                    "" | "auto" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "train.steps" => t.steps = parse_value(key, value)?,
            "train.batch_size" => t.batch_size = parse_value(key, value)?,
            "train.learning_rate" => t.learning_rate = parse_value(key, value)?,
            "train.seed" | "seed" => t.seed = parse_value(key, value)?,
            "train.classifier_warmup" => t.classifier_warmup = parse_value(key, value)?,
            "train.eval_every" => t.eval_every = parse_value(key, value)?,
            "train.eval_samples" => t.eval_samples = parse_value(key, value)?,
            "label_proxy" => {
                t.label_proxy = match value {
                    "groundtruth" | "ground-truth" => LabelProxy::GroundTruth,
                    "" => return Err(Error::config("label_proxy needs `groundtruth` or a checkpoint path")),
                    path => LabelProxy::Pretrained(PathBuf::from(path)),
                }
            }
            _ => return Err(Error::config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Value of one key as `to_text` writes it.
    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let r = &t.randomization;
        Some(match key {
            "dataset" => self.dataset.clone(),
            "objective" => t.objective.name().to_string(),
            "dataset.path" => show_path(&self.dataset_path),
            "dataset.train_count" => self.train_count.to_string(),
            "dataset.train_seed" => self.train_data_seed.to_string(),
            "dataset.eval_path" => show_path(&self.eval_path),
            "dataset.eval_count" => self.eval_count.to_string(),
            "dataset.eval_seed" => self.eval_data_seed.to_string(),
            "out" => show_path(&self.out),
            "classifier.arch" => t.model.classifier.clone(),
            "mask.arch" => t.model.mask.clone(),
            "mask.initial_logit" => t.model.mask_initial_logit.to_string(),
            "vae.encoder" => t.model.encoder.clone(),
            "vae.decoder" => t.model.decoder.clone(),
            "vae.latent_dim" => t.model.latent_dim.to_string(),
            "vae.sigma" => t.model.sigma.to_string(),
            "vae.target" => t.vae_target.to_string(),
            "beta.initial" => t.beta0.to_string(),
            "beta.mode" => t.beta_mode.name().to_string(),
            "beta.eta" => t.beta_eta.to_string(),
            "beta.error_clip" => t.beta_error_clip.to_string(),
            "beta.min" => t.beta_min.to_string(),
            "beta.max" => t.beta_max.to_string(),
            "beta.ema" => t.loss_ema.to_string(),
            "gumbel.temperature" => t.temperature.to_string(),
            "randomize.enabled" => if r.enabled { "on" } else { "off" }.to_string(),
            "randomize.rects" => r.rect_count.to_string(),
            "randomize.min_side" => r.min_side.to_string(),
            "randomize.max_side" => r.max_side.map(|v| v.to_string()).unwrap_or_else(|| "auto".into()),
            "train.steps" => t.steps.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.learning_rate" => t.learning_rate.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.classifier_warmup" => t.classifier_warmup.to_string(),
            "train.eval_every" => t.eval_every.to_string(),
            "train.eval_samples" => t.eval_samples.to_string(),
            "label_proxy" => match &t.label_proxy {
                LabelProxy::GroundTruth => "groundtruth".to_string(),
                LabelProxy::Pretrained(p) => p.display().to_string(),
            },
            _ => return None,
        })
    }

    /// Every key with its resolved value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            s.push_str(key);
            s.push('=');
            s.push_str(&self.get(key).unwrap_or_default());
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        for name in ["anomaly-mnist", "anomaly-cifar", "multidigit-2", "multidigit-4", "anchors", "svhn"] {
            for obj in [Objective::Ib, Objective::Ceb, Objective::CondIb] {
                let cfg = RunConfig::new(name, obj).unwrap();
                let text = cfg.to_text();
                assert_eq!(text.lines().count(), KEYS.len());
                assert_eq!(RunConfig::parse(&text).unwrap(), cfg, "{name} {obj:?}");
            }
        }
    }

    #[test]
    fn overrides_apply_after_recipe_defaults() {
        let text = "# smoke\ntrain.steps = 10\nobjective=ceb\ndataset=anchors\nvae.target=10:14\nrandomize.enabled=off\nseed=4\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.dataset, "anchors");
        assert_eq!(cfg.train.objective, Objective::Ceb);
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.train.seed, 4);
        assert_eq!((cfg.train.vae_target.lo, cfg.train.vae_target.hi), (10.0, 14.0));
        assert!(!cfg.train.randomization.enabled);
        assert_eq!(cfg.train.model.image_shape, [40, 40, 1]);
        let again = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn bad_input_is_rejected() {
        assert!(RunConfig::parse("no_such_key=1").is_err());
        assert!(RunConfig::parse("train.steps=ten").is_err());
        assert!(RunConfig::parse("dataset=imagenet").is_err());
        assert!(RunConfig::parse("objective=vib").is_err());
        assert!(RunConfig::parse("just text").is_err());
        assert!(RunConfig::parse("beta.initial=-1").is_err());
        assert!(RunConfig::parse("randomize.enabled=maybe").is_err());
    }

    #[test]
    fn changing_the_dataset_keeps_seed_and_output() {
        let mut cfg = RunConfig::new("anomaly-mnist", Objective::Ib).unwrap();
        cfg.set("seed", "9").unwrap();
        cfg.set("out", "/tmp/x").unwrap();
        cfg.set("train.steps", "3").unwrap();
        cfg.set("dataset", "anchors").unwrap();
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.out, Some(PathBuf::from("/tmp/x")));
        assert_ne!(cfg.train.steps, 3);
        assert!(KEYS.iter().all(|k| cfg.get(k).is_some()));
        assert!(cfg.get("nope").is_none());
    }
}
