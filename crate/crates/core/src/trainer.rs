//! Loss assembly for the bottleneck objectives, beta control and the training loop.

use std::io::Write as _;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::mask::{
    gumbel_difference, mask_nll_graph, randomize_graph, rectangles_indicator, relaxed_sample_graph,
    sample_rectangles, RandomizationPolicy, DEFAULT_TEMPERATURE,
};
use crate::model::{IbModel, ModelConfig, Objective};
use crate::params::{Adam, Bound};
use crate::recipes::Recipe;
use crate::rng::{purpose, substream};
use crate::tensor::Tensor;
use crate::types::{apply_mask_graph, batch_tensor};
use crate::vae::{latent_noise, VaeBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BetaMode {
    Fixed,
    Adaptive,
    GradGate,
}

impl BetaMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fixed" => Some(BetaMode::Fixed),
            "adaptive" => Some(BetaMode::Adaptive),
            "grad-gate" | "grad_gate" => Some(BetaMode::GradGate),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BetaMode::Fixed => "fixed",
            BetaMode::Adaptive => "adaptive",
            BetaMode::GradGate => "grad-gate",
        }
    }
}

/// Desired band for the running VAE loss; a single number is a zero-width band.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeTarget {
    pub lo: f64,
    pub hi: f64,
}

impl VaeTarget {
    pub fn point(v: f64) -> Self {
        VaeTarget { lo: v, hi: v }
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    /// Parse `12` or `10:14`.
    pub fn parse(s: &str) -> Option<Self> {
        let t = match s.split_once(':') {
            Some((a, b)) => VaeTarget {
                lo: a.trim().parse().ok()?,
                hi: b.trim().parse().ok()?,
            },
            None => VaeTarget::point(s.trim().parse().ok()?),
        };
        (t.lo.is_finite() && t.hi.is_finite() && t.lo <= t.hi && t.mid() > 0.0).then_some(t)
    }
}

impl std::fmt::Display for VaeTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.lo == self.hi {
            write!(f, "{}", self.lo)
        } else {
            write!(f, "{}:{}", self.lo, self.hi)
        }
    }
}

/// Where the label fed to the conditional objective's image model comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum LabelProxy {
    GroundTruth,
    /// Argmax of the classifier stored in a checkpoint, applied to unmasked images.
    Pretrained(std::path::PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub model: ModelConfig,
    pub beta0: f64,
    pub beta_mode: BetaMode,
    pub vae_target: VaeTarget,
    pub beta_eta: f64,
    /// Bound on the relative error fed to the controller, so that a VAE loss far above the
    /// target raises beta no faster than one far below lowers it.
    pub beta_error_clip: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Decay of the running VAE-loss average driving the controller.
    pub loss_ema: f64,
    pub temperature: f64,
    pub randomization: RandomizationPolicy,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Classifier-only steps on unmasked images before the joint objective starts.
    pub classifier_warmup: usize,
    /// Evaluate every this many steps (0: only after the last step when an eval set is given).
    pub eval_every: usize,
    pub eval_samples: usize,
    pub label_proxy: LabelProxy,
}

impl TrainConfig {
    pub fn for_recipe(recipe: &Recipe, objective: Objective) -> Self {
        TrainConfig {
            objective,
            model: ModelConfig::from_recipe(recipe),
            beta0: 1e-3,
            beta_mode: BetaMode::Adaptive,
            vae_target: VaeTarget::point(recipe.vae_target),
            beta_eta: 0.01,
            beta_error_clip: 1.0,
            beta_min: 1e-6,
            beta_max: 1e3,
            loss_ema: 0.9,
            temperature: DEFAULT_TEMPERATURE,
            randomization: if objective == Objective::CondIb {
                RandomizationPolicy::disabled()
            } else {
                RandomizationPolicy::default()
            },
            steps: 1000,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            classifier_warmup: 0,
            eval_every: 0,
            eval_samples: 512,
            label_proxy: LabelProxy::GroundTruth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.beta0 > 0.0 && self.beta0.is_finite()) {
            return bad(format!("beta0 must be positive, got {}", self.beta0));
        }
        if !(self.beta_min > 0.0 && self.beta_min <= self.beta_max) {
            return bad("beta bounds must satisfy 0 < min <= max".into());
        }
        if !(self.vae_target.lo.is_finite() && self.vae_target.hi.is_finite() && self.vae_target.lo <= self.vae_target.hi)
        {
            return bad("vae target must be a finite range".into());
        }
        if self.vae_target.mid() <= 0.0 {
            return bad("vae target midpoint must be positive".into());
        }
        if !(self.beta_error_clip > 0.0) || !(self.beta_eta >= 0.0) {
            return bad("beta_eta must be non-negative and beta_error_clip positive".into());
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.loss_ema) {
            return bad("loss_ema must lie in [0, 1)".into());
        }
        let [h, w, _] = self.model.image_shape;
        if self.randomization.enabled {
            self.randomization.side_range(h, w)?;
        }
        Ok(())
    }
}

/// `beta * exp(eta * e)` clamped to `[min, max]`, where `e = (avg - mid) / mid` limited to
/// `[-clip, clip]`; unchanged inside the band. An infinite `clip` leaves `e` unbounded.
pub fn update_beta(beta: f64, vae_loss_avg: f64, target: VaeTarget, eta: f64, clip: f64, min: f64, max: f64) -> f64 {
    if (target.lo..=target.hi).contains(&vae_loss_avg) {
        return beta;
    }
    let mid = target.mid();
    let error = ((vae_loss_avg - mid) / mid).clamp(-clip, clip);
    (beta * (eta * error).exp()).clamp(min, max)
}

/// Whether the VAE term stops feeding gradients into the mask network.
pub fn gradient_gate(vae_loss_avg: f64, threshold: f64) -> bool {
    vae_loss_avg < threshold
}

/// Controller state: current beta and the running VAE-loss average.
#[derive(Clone, Debug, PartialEq)]
pub struct BetaController {
    pub beta: f64,
    pub average: Option<f64>,
    mode: BetaMode,
    target: VaeTarget,
    eta: f64,
    clip: f64,
    min: f64,
    max: f64,
    decay: f64,
}

impl BetaController {
    pub fn new(config: &TrainConfig) -> Self {
        BetaController {
            beta: config.beta0,
            average: None,
            mode: config.beta_mode,
            target: config.vae_target,
            eta: config.beta_eta,
            clip: config.beta_error_clip,
            min: config.beta_min,
            max: config.beta_max,
            decay: config.loss_ema,
        }
    }

    pub fn gate(&self) -> bool {
        self.mode == BetaMode::GradGate && self.average.is_some_and(|a| gradient_gate(a, self.target.lo))
    }

    pub fn observe(&mut self, vae_loss: f64) {
        let avg = match self.average {
            Some(a) => self.decay * a + (1.0 - self.decay) * vae_loss,
            None => vae_loss,
        };
        self.average = Some(avg);
        if self.mode == BetaMode::Adaptive {
            self.beta = update_beta(self.beta, avg, self.target, self.eta, self.clip, self.min, self.max);
        }
    }
}

/// All random draws of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepNoise {
    /// `[n, 1, h, w]` logistic noise of the relaxed mask sample.
    pub gumbel: Tensor,
    /// `[n, d]` latent draws per VAE, in model order.
    pub latents: Vec<Tensor>,
    /// `[n, 1, h, w]` indicator of the randomization rectangles.
    pub grow: Tensor,
}

impl StepNoise {
    /// Draws for batch positions `0..n`, each from its own `(seed, step, position)` stream.
    pub fn draw(
        seed: u64,
        step: u64,
        n: usize,
        image_shape: [usize; 3],
        latent_dim: usize,
        vaes: usize,
        policy: &RandomizationPolicy,
    ) -> Result<Self> {
        let [h, w, _] = image_shape;
        let mut gumbel = Vec::with_capacity(n * h * w);
        let mut grow = Vec::with_capacity(n * h * w);
        let mut latents = vec![Vec::with_capacity(n * latent_dim); vaes];
        for j in 0..n {
            let j64 = j as u64;
            gumbel.extend(gumbel_difference(h * w, &mut substream(seed, &[purpose::MASK, step, j64])));
            let rects = sample_rectangles(policy, h, w, &mut substream(seed, &[purpose::RANDOMIZE, step, j64]))?;
            grow.extend(rectangles_indicator(&rects, h, w));
            for (v, lat) in latents.iter_mut().enumerate() {
                let mut rng = substream(seed, &[purpose::LATENT, step, j64, v as u64]);
                lat.extend(latent_noise(1, latent_dim, &mut rng).into_data());
            }
        }
        Ok(StepNoise {
            gumbel: Tensor::new(vec![n, 1, h, w], gumbel),
            latents: latents
                .into_iter()
                .map(|l| Tensor::new(vec![n, latent_dim], l))
                .collect(),
            grow: Tensor::new(vec![n, 1, h, w], grow),
        })
    }
}

/// One batch ready for loss evaluation.
#[derive(Clone, Debug)]
pub struct LossInputs<'a> {
    /// `[n, c, h, w]`.
    pub images: Tensor,
    pub labels: &'a [usize],
    /// Label proxy of the conditional objective (ground truth by default).
    pub proxy: &'a [usize],
    pub beta: f64,
    pub temperature: f64,
    pub gate: bool,
    pub noise: StepNoise,
}

/// Graph nodes of an assembled loss; per-sample terms have shape `[n]`.
#[derive(Clone, Copy, Debug)]
pub struct LossGraph {
    pub loss: Var,
    pub vae: Var,
    pub mask_nll: Var,
    pub class_nll: Var,
    pub logits: Var,
    pub vae_mask: Option<Var>,
    pub vae_image: Option<Var>,
    pub rho: Var,
}

/// Batch means of every loss term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub vae: f64,
    pub mask_nll: f64,
    pub class_nll: f64,
    pub vae_mask: Option<f64>,
    pub vae_image: Option<f64>,
    pub accuracy: f64,
}

fn vaes_for(objective: Objective) -> usize {
    if objective == Objective::CondIb {
        3
    } else {
        1
    }
}

/// Entropy terms of the conditional objective, each bounded by one loss component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CondTerm {
    /// `H(I*M | M)`, bounded by the mask-conditioned VAE and weighted by beta.
    MaskedGivenMask,
    /// `H(M)`, bounded by the mask VAE.
    Mask,
    /// `H(M | I)`, the mask log-likelihood.
    MaskGivenImage,
    /// `H(I | M, C')`, bounded by the image VAE.
    ImageGivenMaskLabel,
    /// `H(C' | I*M)`, bounded by the classifier.
    LabelGivenMasked,
}

/// Signs of the conditional objective's terms; the loss and the exact oracle both read this.
pub const COND_TERMS: [(CondTerm, f64); 5] = [
    (CondTerm::MaskedGivenMask, 1.0),
    (CondTerm::Mask, 1.0),
    (CondTerm::MaskGivenImage, -1.0),
    (CondTerm::ImageGivenMaskLabel, 1.0),
    (CondTerm::LabelGivenMasked, 1.0),
];

/// Assemble the objective of `model.objective` on one batch.
///
/// Bottleneck form, per sample: `beta * vae(i*m) + class_nll(i*m') - beta * mask_nll(m)`.
/// Conditional form: `beta * vae(i*m | m) + vae(m) - mask_nll(m) + vae(i | m, c') + class_nll(i*m)`.
pub fn build_loss(g: &mut Graph, params: &Bound, model: &IbModel, inputs: &LossInputs) -> Result<LossGraph> {
    let n = inputs.labels.len();
    let c = model.config.image_shape[2];
    let images = g.constant(inputs.images.clone());
    let rho = model.mask.probabilities(g, params, images);
    let m = relaxed_sample_graph(g, rho, inputs.noise.gumbel.clone(), inputs.temperature);
    let m_vae = if inputs.gate { g.detach(m) } else { m };
    let masked = apply_mask_graph(g, images, m_vae);
    let pixels = g.slice(masked, 0, c);
    let mask_nll = mask_nll_graph(g, m, rho);
    let cond = model.objective == Objective::CondIb;
    let labels_for_vae = match model.objective {
        Objective::Ceb => Some(inputs.labels),
        _ => None,
    };
    let vae = model.vae.terms(
        g,
        params,
        VaeBatch {
            encoder_input: masked,
            pixels: Some(pixels),
            mask: Some(m_vae),
            labels: labels_for_vae,
        },
        inputs.noise.latents[0].clone(),
    )?;

    let grown = randomize_graph(g, m, inputs.noise.grow.clone());
    let seen = apply_mask_graph(g, images, grown);
    let logits = model.classifier.logits(g, params, seen);
    let class_targets = if cond { inputs.proxy } else { inputs.labels };
    let class_nll = g.cross_entropy(logits, class_targets);

    let (mut vae_mask, mut vae_image) = (None, None);
    let per = if let Some(cm) = &model.cond {
        if inputs.proxy.len() != n {
            return Err(Error::data("conditional objective needs a label proxy per sample"));
        }
        let vm = cm.vae_mask.terms(
            g,
            params,
            VaeBatch {
                encoder_input: m,
                pixels: None,
                mask: Some(m),
                labels: None,
            },
            inputs.noise.latents[1].clone(),
        )?;
        let full = g.concat(&[images, m]);
        let vi = cm.vae_image.terms(
            g,
            params,
            VaeBatch {
                encoder_input: full,
                pixels: Some(images),
                mask: Some(m),
                labels: Some(inputs.proxy),
            },
            inputs.noise.latents[2].clone(),
        )?;
        vae_mask = Some(vm.loss);
        vae_image = Some(vi.loss);
        let mut per: Option<Var> = None;
        for &(term, sign) in COND_TERMS.iter() {
            let (v, weight) = match term {
                CondTerm::MaskedGivenMask => (vae.loss, inputs.beta),
                CondTerm::Mask => (vm.loss, 1.0),
                CondTerm::MaskGivenImage => (mask_nll, 1.0),
                CondTerm::ImageGivenMaskLabel => (vi.loss, 1.0),
                CondTerm::LabelGivenMasked => (class_nll, 1.0),
            };
            let t = g.scale(v, sign * weight);
            per = Some(match per {
                Some(p) => g.add(p, t),
                None => t,
            });
        }
        per.expect("term table is not empty")
    } else {
        let weighted_vae = g.scale(vae.loss, inputs.beta);
        let per = g.add(weighted_vae, class_nll);
        let weighted = g.scale(mask_nll, inputs.beta);
        g.sub(per, weighted)
    };
    let loss = g.mean(per);
    Ok(LossGraph {
        loss,
        vae: vae.loss,
        mask_nll,
        class_nll,
        logits,
        vae_mask,
        vae_image,
        rho,
    })
}

fn mean(g: &Graph, v: Var) -> f64 {
    let t = g.value(v);
    t.sum() / t.len() as f64
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Read batch means off an evaluated loss graph.
pub fn components(g: &Graph, lg: &LossGraph, targets: &[usize]) -> LossComponents {
    let logits = g.value(lg.logits);
    let k = logits.row_len();
    let correct = logits
        .data()
        .chunks(k)
        .zip(targets)
        .filter(|(row, &t)| argmax(row) == t)
        .count();
    LossComponents {
        total: g.value(lg.loss).item(),
        vae: mean(g, lg.vae),
        mask_nll: mean(g, lg.mask_nll),
        class_nll: mean(g, lg.class_nll),
        vae_mask: lg.vae_mask.map(|v| mean(g, v)),
        vae_image: lg.vae_image.map(|v| mean(g, v)),
        accuracy: correct as f64 / targets.len() as f64,
    }
}

/// Loss of one batch of dataset indices with frozen parameters.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    model: &IbModel,
    data: &Dataset,
    indices: &[usize],
    proxy: &[usize],
    beta: f64,
    temperature: f64,
    policy: &RandomizationPolicy,
    seed: u64,
    step: u64,
) -> Result<LossComponents> {
    let labels: Vec<usize> = indices.iter().map(|&i| data.samples[i].label).collect();
    let proxy: Vec<usize> = indices.iter().map(|&i| proxy[i]).collect();
    let noise = StepNoise::draw(
        seed,
        step,
        indices.len(),
        model.config.image_shape,
        model.config.latent_dim,
        vaes_for(model.objective),
        policy,
    )?;
    let mut g = Graph::new();
    let b = model.store.bind_frozen(&mut g);
    let inputs = LossInputs {
        images: batch_tensor(indices.iter().map(|&i| &data.samples[i].image)),
        labels: &labels,
        proxy: &proxy,
        beta,
        temperature,
        gate: false,
        noise,
    };
    let lg = build_loss(&mut g, &b, model, &inputs)?;
    let targets = if model.objective == Objective::CondIb { &proxy } else { &labels };
    Ok(components(&g, &lg, targets))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Step {
        step: usize,
        beta: f64,
        vae_loss: f64,
        vae_loss_avg: f64,
        mask_nll: f64,
        class_nll: f64,
        total_loss: f64,
        train_accuracy: f64,
        gated: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        vae_mask_loss: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        vae_image_loss: Option<f64>,
    },
    Eval {
        step: usize,
        accuracy: f64,
        per_category: Vec<f64>,
        l1_mean: f64,
        l1_per_category: Vec<f64>,
    },
}

impl MetricRecord {
    pub fn step(&self) -> usize {
        match self {
            MetricRecord::Step { step, .. } | MetricRecord::Eval { step, .. } => *step,
        }
    }
}

/// Append-only record of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    records: Vec<MetricRecord>,
}

impl MetricLog {
    pub fn push(&mut self, record: MetricRecord) {
        if let Some(last) = self.records.last() {
            assert!(record.step() >= last.step(), "metric steps must not decrease");
        }
        self.records.push(record);
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn step_records(&self) -> impl Iterator<Item = &MetricRecord> {
        self.records.iter().filter(|r| matches!(r, MetricRecord::Step { .. }))
    }

    pub fn last_eval(&self) -> Option<&MetricRecord> {
        self.records.iter().rev().find(|r| matches!(r, MetricRecord::Eval { .. }))
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut log = MetricLog::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            log.push(serde_json::from_str(line)?);
        }
        Ok(log)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_jsonl()?.as_bytes())?;
        f.flush()?;
        Ok(())
    }
}

/// A finished run: trained model, metrics and the final controller state.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub model: IbModel,
    pub log: MetricLog,
    pub beta: f64,
    pub vae_loss_avg: f64,
    /// Fraction of training samples whose label proxy equals the ground-truth label
    /// (conditional objective only).
    pub proxy_agreement: Option<f64>,
}

impl TrainedRun {
    /// Persist `checkpoint/` and `metrics.jsonl` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let steps = self.log.step_records().count();
        let mut info = crate::model::CheckpointInfo::from([
            ("steps".to_string(), steps.to_string()),
            ("beta".to_string(), format!("{:?}", self.beta)),
            ("vae_loss_avg".to_string(), format!("{:?}", self.vae_loss_avg)),
        ]);
        if let Some(a) = self.proxy_agreement {
            info.insert("proxy_agreement".to_string(), format!("{a:?}"));
        }
        crate::model::save_checkpoint(&self.model, &info, &dir.join("checkpoint"))?;
        self.log.write(&dir.join("metrics.jsonl"))
    }
}

/// Labels used as the conditional objective's proxy for every sample of `data`.
pub fn proxy_labels(config: &TrainConfig, data: &Dataset) -> Result<Vec<usize>> {
    match &config.label_proxy {
        LabelProxy::GroundTruth => Ok(data.labels()),
        LabelProxy::Pretrained(path) => {
            let (model, _) = crate::model::load_checkpoint(path)?;
            crate::metrics::unmasked_predictions(&model, data)
        }
    }
}

/// Fraction of positions where `proxy` and `labels` agree.
pub fn proxy_agreement(proxy: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return f64::NAN;
    }
    proxy.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// Fit the classifier alone on fully visible images for `steps` steps, with the batch size,
/// learning rate and seed of `config`.
pub fn fit_unmasked_classifier(
    model: &mut IbModel,
    config: &TrainConfig,
    data: &Dataset,
    targets: &[usize],
    steps: usize,
) -> Result<()> {
    if targets.len() != data.len() {
        return Err(Error::data("one target per sample"));
    }
    let proxy = targets;
    let mut adam = Adam::new(&model.store, config.learning_rate);
    let batch = config.batch_size.min(data.len());
    let [h, w, _] = config.model.image_shape;
    for step in 0..steps {
        let mut rng = substream(config.seed, &[purpose::WARMUP, step as u64]);
        let indices = sample_indices(&mut rng, data.len(), batch).into_vec();
        let targets: Vec<usize> = indices.iter().map(|&i| proxy[i]).collect();
        let mut g = Graph::new();
        let b = model.store.bind(&mut g);
        let images = g.constant(batch_tensor(indices.iter().map(|&i| &data.samples[i].image)));
        let ones = g.constant(Tensor::full(vec![batch, 1, h, w], 1.0));
        let seen = apply_mask_graph(&mut g, images, ones);
        let logits = model.classifier.logits(&mut g, &b, seen);
        let nll = g.cross_entropy(logits, &targets);
        let loss = g.mean(nll);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: "classifier warm-up".into(),
            });
        }
        let grads = g.backward(loss);
        let grads = b.gradients(&grads, &model.store);
        adam.step(&mut model.store, &grads);
    }
    Ok(())
}

/// The unmasked reference classifier: same architecture, seed and optimizer as the masked
/// run, trained on raw images for the run's total step count.
pub fn train_baseline(config: &TrainConfig, data: &Dataset) -> Result<IbModel> {
    config.validate()?;
    let mut model = IbModel::build(&config.model, Objective::Ib, config.seed)?;
    let steps = config.classifier_warmup + config.steps;
    fit_unmasked_classifier(&mut model, config, data, &data.labels(), steps)?;
    Ok(model)
}

/// Train `config.objective` on `data`; evaluates on `eval` when given.
pub fn train(config: &TrainConfig, data: &Dataset, eval: Option<&Dataset>) -> Result<TrainedRun> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    if data.image_shape() != config.model.image_shape || data.categories() != config.model.categories {
        return Err(Error::config(format!(
            "dataset {:?} with {} categories does not match the model {:?} with {}",
            data.image_shape(),
            data.categories(),
            config.model.image_shape,
            config.model.categories
        )));
    }
    let mut model = IbModel::build(&config.model, config.objective, config.seed)?;
    let proxy = proxy_labels(config, data)?;
    fit_unmasked_classifier(&mut model, config, data, &proxy, config.classifier_warmup)?;
    let mut adam = Adam::new(&model.store, config.learning_rate);
    let mut control = BetaController::new(config);
    let mut log = MetricLog::default();
    let batch = config.batch_size.min(data.len());
    let vaes = vaes_for(config.objective);
    for step in 0..config.steps {
        let s = step as u64;
        let mut rng = substream(config.seed, &[purpose::BATCH, s]);
        let indices = sample_indices(&mut rng, data.len(), batch).into_vec();
        let labels: Vec<usize> = indices.iter().map(|&i| data.samples[i].label).collect();
        let step_proxy: Vec<usize> = indices.iter().map(|&i| proxy[i]).collect();
        let noise = StepNoise::draw(
            config.seed,
            s,
            batch,
            config.model.image_shape,
            config.model.latent_dim,
            vaes,
            &config.randomization,
        )?;
        let gate = control.gate();
        let beta = control.beta;
        let mut g = Graph::new();
        let b = model.store.bind(&mut g);
        let inputs = LossInputs {
            images: batch_tensor(indices.iter().map(|&i| &data.samples[i].image)),
            labels: &labels,
            proxy: &step_proxy,
            beta,
            temperature: config.temperature,
            gate,
            noise,
        };
        let lg = build_loss(&mut g, &b, &model, &inputs)?;
        let targets = if config.objective == Objective::CondIb { &step_proxy } else { &labels };
        let comp = components(&g, &lg, targets);
        if !comp.total.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: serde_json::to_string(&comp).unwrap_or_default(),
            });
        }
        let grads = g.backward(lg.loss);
        let grads = b.gradients(&grads, &model.store);
        if grads.iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite {
                step,
                detail: "non-finite gradient".into(),
            });
        }
        adam.step(&mut model.store, &grads);
        control.observe(comp.vae);
        log.push(MetricRecord::Step {
            step,
            beta,
            vae_loss: comp.vae,
            vae_loss_avg: control.average.unwrap_or(comp.vae),
            mask_nll: comp.mask_nll,
            class_nll: comp.class_nll,
            total_loss: comp.total,
            train_accuracy: comp.accuracy,
            gated: gate,
            vae_mask_loss: comp.vae_mask,
            vae_image_loss: comp.vae_image,
        });
        let last = step + 1 == config.steps;
        let periodic = config.eval_every > 0 && (step + 1) % config.eval_every == 0;
        if let Some(ev) = eval {
            if periodic || last {
                let subset = ev.take(config.eval_samples);
                let out = crate::metrics::evaluate(&model, &subset, &crate::metrics::EvalOptions::new(config.seed))?;
                log.push(out.record(step));
            }
        }
    }
    Ok(TrainedRun {
        model,
        log,
        beta: control.beta,
        vae_loss_avg: control.average.unwrap_or(f64::NAN),
        proxy_agreement: (config.objective == Objective::CondIb).then(|| proxy_agreement(&proxy, &data.labels())),
    })
}

#[cfg(test)]
pub(crate) mod tests;
