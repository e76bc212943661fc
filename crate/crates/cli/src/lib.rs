//! Command implementations behind the `ibsal` binary.

pub mod font;
pub mod plot;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ibsal::config::RunConfig;
use ibsal::datasets::{generate, load_dataset, save_dataset, svhn, Dataset, DatasetKind, GeneratorConfig};
use ibsal::experiment::{self, CHECKPOINT_DIR};
use ibsal::mask::RandomizationPolicy;
use ibsal::metrics::{
    acceptance_report, accuracy, auc_rank, evaluate, mask_only_accuracy_split, randomized_mask_accuracy,
    region_average, unmasked_predictions, AcceptanceReport, EvalOptions, Evaluation, Region, STABILITY_DRAWS,
};
use ibsal::model::{load_checkpoint, IbModel};
use ibsal::oracle::{records_to_jsonl, run_suite_with_terms, suite_passes, OracleRecord};
use ibsal::trainer::{train_baseline, CondTerm, COND_TERMS};

pub const EXIT_CHECK: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;
pub const EXIT_DATA: u8 = 4;
pub const EXIT_RUNTIME: u8 = 5;

#[derive(Debug)]
pub enum Failure {
    /// The command ran but a check it performs did not pass.
    Check(String),
    Usage(String),
    Core(ibsal::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        use ibsal::Error as E;
        match self {
            Failure::Check(_) => EXIT_CHECK,
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Core(E::Config(_) | E::Parse { .. }) => EXIT_CONFIG,
            Failure::Core(E::Data(_) | E::MissingData { .. } | E::Checksum(_)) => EXIT_DATA,
            Failure::Core(_) => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Check(m) => write!(f, "check failed: {m}"),
            Failure::Usage(m) => write!(f, "usage: {m}"),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<ibsal::Error> for Failure {
    fn from(e: ibsal::Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl From<image::ImageError> for Failure {
    fn from(e: image::ImageError) -> Self {
        Failure::Core(ibsal::Error::Io(std::io::Error::other(e)))
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

#[derive(Parser, Debug)]
#[command(name = "ibsal", version, about = "Information-bottleneck saliency masks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a procedural (or ingested SVHN) dataset directory.
    Generate(GenerateArgs),
    /// Train a mask model and write a run directory.
    Train(TrainArgs),
    /// Score a trained run and write a JSON report.
    Eval(EvalArgs),
    /// Check the information identities on exactly enumerated worlds.
    Oracle(OracleArgs),
    /// Draw mask grids, l1 histograms and region summaries for a run.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub dataset: String,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// SVHN source directory (`index.csv` plus images).
    #[arg(long)]
    pub source: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// Flat `key=value` config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long, value_parser = ["ib", "ceb", "cond-ib"])]
    pub objective: Option<String>,
    #[arg(long, value_parser = ["fixed", "adaptive", "grad-gate"])]
    pub beta_mode: Option<String>,
    /// A value or a `lo..hi` band.
    #[arg(long)]
    pub vae_target: Option<String>,
    #[arg(long, value_parser = ["on", "off"])]
    pub randomize: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Any config key, repeatable: `--set train.batch_size=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Checkpoint directory; defaults to the run's.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Saved dataset to evaluate on; defaults to the run's evaluation set.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Add per-category accuracy with randomly grown masks.
    #[arg(long)]
    pub randomized: bool,
    /// Train a separate unmasked classifier as the accuracy reference.
    #[arg(long)]
    pub baseline: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report path; defaults to `report.json` in the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    #[arg(long, default_value = "all")]
    pub suite: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub worlds: usize,
    /// JSONL output with one record per identity and world.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Negate one conditional-objective term to check that the suite notices.
    #[arg(long, value_parser = ["masked-given-mask", "mask", "mask-given-image", "image-given-mask-label", "label-given-masked"])]
    pub flip_sign: Option<String>,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Output directory; defaults to `plots/` in the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub batches: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Oracle(a) => cmd_oracle(&a).map(|_| ()),
        Command::Plot(a) => cmd_plot(&a).map(|_| ()),
    }
}

pub fn cmd_generate(a: &GenerateArgs) -> CmdResult {
    let data = if a.dataset == "svhn" {
        let source = a
            .source
            .as_ref()
            .ok_or_else(|| Failure::Usage("svhn is ingested from --source, not generated".into()))?;
        svhn::ingest_svhn(source, a.count, a.seed)?
    } else {
        let kind = DatasetKind::parse(&a.dataset)
            .ok_or_else(|| Failure::Usage(format!("unknown dataset `{}`", a.dataset)))?;
        generate(&GeneratorConfig::procedural(kind), a.seed, a.count)?
    };
    save_dataset(&data, &a.out)?;
    println!("wrote {} samples to {}", data.len(), a.out.display());
    Ok(())
}

fn split_pair(s: &str) -> CmdResult<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Failure::Usage(format!("expected KEY=VALUE, got `{s}`")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Config file pairs followed by flag overrides, in precedence order.
pub fn train_pairs(a: &TrainArgs) -> CmdResult<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Failure::Core(ibsal::Error::MissingData {
                path: path.clone(),
                hint: e.to_string(),
            })
        })?;
        for line in text.lines().map(str::trim) {
            if !line.is_empty() && !line.starts_with('#') {
                pairs.push(split_pair(line)?);
            }
        }
    }
    let flags: [(&str, Option<String>); 8] = [
        ("dataset", a.dataset.clone()),
        ("objective", a.objective.clone()),
        ("beta.mode", a.beta_mode.clone()),
        ("vae.target", a.vae_target.clone()),
        ("randomize.enabled", a.randomize.clone()),
        ("train.seed", a.seed.map(|s| s.to_string())),
        ("train.steps", a.steps.map(|s| s.to_string())),
        ("out", a.out.as_ref().map(|p| p.display().to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            pairs.push((k.to_string(), v));
        }
    }
    for o in &a.overrides {
        pairs.push(split_pair(o)?);
    }
    Ok(pairs)
}

pub fn cmd_train(a: &TrainArgs) -> CmdResult<RunConfig> {
    let cfg = RunConfig::from_pairs(&train_pairs(a)?)?;
    if cfg.out.is_none() {
        return Err(Failure::Usage("train needs --out or an `out` config key".into()));
    }
    let out = experiment::run(&cfg)?;
    let dir = cfg.out.as_ref().expect("checked above");
    match out.log.last_eval() {
        Some(ibsal::trainer::MetricRecord::Eval { accuracy, l1_mean, .. }) => println!(
            "trained {} steps; beta {:.4e}; vae {:.3}; eval accuracy {accuracy:.4}; visible {l1_mean:.4}",
            cfg.train.steps, out.beta, out.vae_loss_avg
        ),
        _ => println!("trained {} steps; beta {:.4e}; vae {:.3}", cfg.train.steps, out.beta, out.vae_loss_avg),
    }
    if let Some(a) = out.proxy_agreement {
        println!("label proxy agrees with ground truth on {a:.4} of training samples");
    }
    println!("run directory {}", dir.display());
    Ok(cfg)
}

/// Model, evaluation data and config of a run directory (or a bare checkpoint).
pub struct LoadedRun {
    pub config: Option<RunConfig>,
    pub model: IbModel,
    pub final_vae: Option<f64>,
    pub data: Dataset,
}

pub fn load_run(run: Option<&Path>, checkpoint: Option<&Path>, dataset: Option<&Path>) -> CmdResult<LoadedRun> {
    let config = run.map(experiment::read_run_config).transpose()?;
    let ckpt = match (checkpoint, run) {
        (Some(c), _) => c.to_path_buf(),
        (None, Some(r)) => r.join(CHECKPOINT_DIR),
        (None, None) => return Err(Failure::Usage("give --run or --checkpoint".into())),
    };
    if !ckpt.is_dir() {
        return Err(Failure::Core(ibsal::Error::MissingData {
            path: ckpt,
            hint: "checkpoint directory not found".into(),
        }));
    }
    let (model, info) = load_checkpoint(&ckpt)?;
    let final_vae = info.get("vae_loss_avg").and_then(|v| v.parse().ok());
    let data = match (dataset, &config) {
        (Some(d), _) => load_dataset(d)?,
        (None, Some(cfg)) => experiment::evaluation_set(cfg)?,
        (None, None) => return Err(Failure::Usage("a bare checkpoint needs --dataset".into())),
    };
    Ok(LoadedRun {
        config,
        model,
        final_vae,
        data,
    })
}

/// Per-category mean (inside, outside) visible fractions over samples with a region.
pub fn region_rows(eval: &Evaluation, data: &Dataset) -> CmdResult<Vec<(usize, f64, f64)>> {
    let regions = Region::of_dataset(data);
    let mut sums: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
    for (k, region) in regions.iter().enumerate() {
        if let Some(r) = region {
            let (i, o) = region_average(&eval.mask(k), eval.height, eval.width, r)?;
            let e = sums.entry(eval.samples[k].label).or_default();
            e.0 += i;
            e.1 += o;
            e.2 += 1;
        }
    }
    Ok(sums
        .into_iter()
        .map(|(c, (i, o, n))| (c, i / n as f64, o / n as f64))
        .collect())
}

pub fn cmd_eval(a: &EvalArgs) -> CmdResult<AcceptanceReport> {
    let run = load_run(a.run.as_deref(), a.checkpoint.as_deref(), a.dataset.as_deref())?;
    let policy = report_policy(run.config.as_ref());
    let options = EvalOptions {
        stability_draws: STABILITY_DRAWS,
        stability_policy: policy,
        ..EvalOptions::new(a.seed)
    };
    let eval = evaluate(&run.model, &run.data, &options)?;
    let labels = run.data.labels();
    let unmasked = accuracy(&unmasked_predictions(&run.model, &run.data)?, &labels);
    let baseline = if a.baseline {
        let cfg = run
            .config
            .as_ref()
            .ok_or_else(|| Failure::Usage("--baseline needs --run".into()))?;
        let train_set = experiment::training_set(cfg)?;
        let model = train_baseline(&cfg.train, &train_set)?;
        accuracy(&unmasked_predictions(&model, &run.data)?, &labels)
    } else {
        unmasked
    };
    let target = run
        .config
        .as_ref()
        .map(|c| c.train.vae_target)
        .unwrap_or_else(|| ibsal::trainer::VaeTarget::point(f64::NAN));
    let mut report = acceptance_report(&eval, Some(baseline), run.final_vae, target);
    let extra = &mut report.extra;
    extra.insert("unmasked_accuracy".into(), unmasked);
    extra.insert("baseline_accuracy".into(), baseline);
    let l1 = eval.l1();
    let anomalies: Vec<bool> = run.data.meta.iter().map(|m| m.anomaly == Some(true)).collect();
    if run.data.meta.iter().any(|m| m.anomaly.is_some()) && anomalies.iter().any(|&p| p) {
        extra.insert("auc_l1".into(), auc_rank(&l1, &anomalies));
    }
    if eval.len() >= 2 {
        extra.insert(
            "mask_only_accuracy".into(),
            mask_only_accuracy_split(&l1, &labels, eval.categories)?,
        );
    }
    extra.insert("l1_category_spread".into(), report.mask_stats.category_spread());
    let regions = Region::of_dataset(&run.data);
    if regions.iter().any(Option::is_some) {
        let s = eval.region_summary(&regions)?;
        extra.insert("region_inside".into(), s.inside);
        extra.insert("region_outside".into(), s.outside);
        extra.insert("region_ratio".into(), s.ratio);
    }
    if a.randomized {
        let per = randomized_mask_accuracy(&run.model, &run.data, &policy, a.seed)?;
        println!("randomized-mask accuracy per category");
        for (c, acc) in per.iter().enumerate() {
            println!("  {c:>3}  {acc:.4}");
            extra.insert(format!("randomized_accuracy_{c}"), *acc);
        }
        extra.insert("randomized_accuracy_min".into(), per.iter().cloned().fold(f64::INFINITY, f64::min));
    }
    let json = serde_json::to_string_pretty(&report)?;
    let out = match (&a.out, &a.run) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(r)) => Some(r.join("report.json")),
        (None, None) => None,
    };
    if let Some(p) = out {
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&p, &json)?;
    }
    println!("{json}");
    Ok(report)
}

fn parse_term(name: &str) -> CmdResult<CondTerm> {
    Ok(match name {
        "masked-given-mask" => CondTerm::MaskedGivenMask,
        "mask" => CondTerm::Mask,
        "mask-given-image" => CondTerm::MaskGivenImage,
        "image-given-mask-label" => CondTerm::ImageGivenMaskLabel,
        "label-given-masked" => CondTerm::LabelGivenMasked,
        other => return Err(Failure::Usage(format!("unknown term `{other}`"))),
    })
}

/// Largest deviation and overall verdict per identity, in first-seen order.
pub fn oracle_summary(records: &[OracleRecord]) -> Vec<(String, f64, bool)> {
    let mut out: Vec<(String, f64, bool)> = Vec::new();
    for r in records {
        match out.iter_mut().find(|(id, _, _)| *id == r.identity) {
            Some(e) => {
                e.1 = e.1.max(r.max_deviation);
                e.2 &= r.pass;
            }
            None => out.push((r.identity.clone(), r.max_deviation, r.pass)),
        }
    }
    out
}

pub fn cmd_oracle(a: &OracleArgs) -> CmdResult<Vec<OracleRecord>> {
    let mut terms = COND_TERMS;
    if let Some(name) = &a.flip_sign {
        let t = parse_term(name)?;
        for term in terms.iter_mut().filter(|(k, _)| *k == t) {
            term.1 = -term.1;
        }
    }
    let mut records = run_suite_with_terms(a.seed, a.worlds, &terms)?;
    if a.suite != "all" {
        records.retain(|r| r.identity == a.suite);
        if records.is_empty() {
            return Err(Failure::Usage(format!("no identity named `{}`", a.suite)));
        }
    }
    if let Some(p) = &a.out {
        std::fs::write(p, records_to_jsonl(&records)?)?;
    }
    for (id, dev, pass) in oracle_summary(&records) {
        println!("{:<4} {id:<34} max deviation {dev:.3e}", if pass { "PASS" } else { "FAIL" });
    }
    if suite_passes(&records) {
        Ok(records)
    } else {
        Err(Failure::Check("oracle identities violated".into()))
    }
}

pub fn cmd_plot(a: &PlotArgs) -> CmdResult<Vec<PathBuf>> {
    let run = load_run(Some(&a.run), None, None)?;
    let out = a.out.clone().unwrap_or_else(|| a.run.join("plots"));
    std::fs::create_dir_all(&out)?;
    let eval = evaluate(&run.model, &run.data, &EvalOptions::new(a.seed))?;
    let mut written = Vec::new();
    for b in 0..a.batches {
        let start = b * a.batch_size;
        let end = (start + a.batch_size).min(run.data.len());
        if start >= end {
            break;
        }
        let samples: Vec<_> = (start..end).map(|k| (&run.data.samples[k].image, eval.mask(k))).collect();
        let path = out.join(format!("masks_{b}.png"));
        plot::mask_grid(&samples).save(&path)?;
        written.push(path);
    }
    let stats = eval.stats();
    let csv = out.join("histogram.csv");
    std::fs::write(&csv, stats.histogram_csv())?;
    let png = out.join("histogram.png");
    plot::histogram_image(&stats).save(&png)?;
    written.extend([csv, png]);
    let rows = region_rows(&eval, &run.data)?;
    if !rows.is_empty() {
        let mut text = String::from("category,inside,outside\n");
        for (c, i, o) in &rows {
            text.push_str(&format!("{c},{i},{o}\n"));
        }
        let csv = out.join("regions.csv");
        std::fs::write(&csv, text)?;
        let png = out.join("regions.png");
        plot::region_bars(&rows).save(&png)?;
        written.extend([csv, png]);
    }
    for p in &written {
        println!("{}", p.display());
    }
    Ok(written)
}

/// Default randomization for reports when a run has it disabled.
pub fn report_policy(cfg: Option<&RunConfig>) -> RandomizationPolicy {
    cfg.map(|c| c.train.randomization)
        .filter(|p| p.enabled)
        .unwrap_or_default()
}
