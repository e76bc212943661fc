//! Evaluation with Boolean masks: accuracies, mask norms, region statistics, leakage
//! baselines, ROC areas and the three-part quality report.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::mask::{sample_rectangles, RandomizationPolicy};
use crate::model::IbModel;
use crate::rng::{purpose, substream};
use crate::tensor::Tensor;
use crate::trainer::{MetricRecord, VaeTarget};
use crate::types::{apply_mask_graph, batch_tensor, Rect};

pub const HISTOGRAM_BINS: usize = 50;
const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub seed: u64,
    /// Grow each hard mask with random rectangles before classification.
    pub randomize: Option<RandomizationPolicy>,
    /// Extra randomized predictions per image for the stability statistic (0: skip).
    pub stability_draws: usize,
    /// Policy used by the stability draws.
    pub stability_policy: RandomizationPolicy,
}

impl EvalOptions {
    pub fn new(seed: u64) -> Self {
        EvalOptions {
            seed,
            randomize: None,
            stability_draws: 0,
            stability_policy: RandomizationPolicy::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub label: usize,
    pub predicted: usize,
    /// Visible fraction of the hard mask.
    pub l1: f64,
    /// Majority prediction over randomized draws agrees with `predicted`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stable: Option<bool>,
}

/// Per-sample outcome of one evaluation pass, with the hard masks kept as 0/1 bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub categories: usize,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<SampleResult>,
    masks: Vec<Vec<u8>>,
}

impl Evaluation {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Hard mask of sample `k` as row-major 0/1 values.
    pub fn mask(&self, k: usize) -> Vec<f64> {
        self.masks[k].iter().map(|&b| b as f64).collect()
    }

    pub fn accuracy(&self) -> f64 {
        accuracy(&self.predictions(), &self.labels())
    }

    pub fn per_category_accuracy(&self) -> Vec<f64> {
        per_category_accuracy(&self.predictions(), &self.labels(), self.categories)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.predicted).collect()
    }

    pub fn l1(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.l1).collect()
    }

    pub fn stats(&self) -> MaskStats {
        mask_l1_stats(&self.l1(), &self.labels(), self.categories)
    }

    /// Fraction of images whose randomized majority matches the plain prediction.
    pub fn stability(&self) -> Option<f64> {
        let flags: Option<Vec<bool>> = self.samples.iter().map(|s| s.stable).collect();
        let flags = flags?;
        (!flags.is_empty()).then(|| flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64)
    }

    pub fn record(&self, step: usize) -> MetricRecord {
        let stats = self.stats();
        MetricRecord::Eval {
            step,
            accuracy: self.accuracy(),
            per_category: self.per_category_accuracy(),
            l1_mean: stats.mean,
            l1_per_category: stats.per_category_mean,
        }
    }

    /// Mean inside/outside visible fractions over samples that have a region.
    pub fn region_summary(&self, regions: &[Option<Region>]) -> Result<RegionSummary> {
        if regions.len() != self.len() {
            return Err(Error::data("one region entry per evaluated sample is required"));
        }
        let (mut inside, mut outside, mut count) = (0.0, 0.0, 0);
        for (k, region) in regions.iter().enumerate() {
            if let Some(region) = region {
                let (i, o) = region_average(&self.mask(k), self.height, self.width, region)?;
                inside += i;
                outside += o;
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::data("no sample carries a region"));
        }
        let (inside, outside) = (inside / count as f64, outside / count as f64);
        Ok(RegionSummary {
            count,
            inside,
            outside,
            ratio: inside / outside,
        })
    }
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// Accuracy within each true category; categories without samples report 0.
pub fn per_category_accuracy(predicted: &[usize], labels: &[usize], categories: usize) -> Vec<f64> {
    let mut hit = vec![0usize; categories];
    let mut tot = vec![0usize; categories];
    for (&p, &l) in predicted.iter().zip(labels) {
        tot[l] += 1;
        hit[l] += (p == l) as usize;
    }
    hit.iter()
        .zip(&tot)
        .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
        .collect()
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

/// Classify `[n, c, h, w]` images under `[n, 1, h, w]` masks; returns predicted classes.
fn predict(model: &IbModel, images: &Tensor, masks: Tensor) -> Vec<usize> {
    let mut g = Graph::new();
    let b = model.store.bind_frozen(&mut g);
    let x = g.constant(images.clone());
    let m = g.constant(masks);
    let input = apply_mask_graph(&mut g, x, m);
    let logits = model.classifier.logits(&mut g, &b, input);
    let t = g.value(logits);
    t.data().chunks(t.row_len()).map(argmax).collect()
}

fn probabilities(model: &IbModel, images: &Tensor) -> Vec<f64> {
    let mut g = Graph::new();
    let b = model.store.bind_frozen(&mut g);
    let x = g.constant(images.clone());
    let rho = model.mask.probabilities(&mut g, &b, x);
    g.value(rho).data().to_vec()
}

fn grown(mask: &[u8], rects: &[Rect], width: usize) -> Vec<f64> {
    mask.iter()
        .enumerate()
        .map(|(i, &v)| {
            let (y, x) = (i / width, i % width);
            if v == 1 || rects.iter().any(|r| r.contains(y, x)) {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Evaluate with one hard mask per image drawn from the `(seed, index)` stream.
pub fn evaluate(model: &IbModel, data: &Dataset, options: &EvalOptions) -> Result<Evaluation> {
    let [h, w, _] = model.config.image_shape;
    if data.image_shape() != model.config.image_shape {
        return Err(Error::shape(format!(
            "dataset images {:?} do not match the model {:?}",
            data.image_shape(),
            model.config.image_shape
        )));
    }
    let plane = h * w;
    let mut samples = Vec::with_capacity(data.len());
    let mut masks = Vec::with_capacity(data.len());
    for start in (0..data.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(data.len());
        let n = end - start;
        let images = batch_tensor(data.samples[start..end].iter().map(|s| &s.image));
        let rho = probabilities(model, &images);
        let mut hard = Vec::with_capacity(n);
        for j in 0..n {
            let mut rng = substream(options.seed, &[purpose::EVAL, (start + j) as u64, 0]);
            let m: Vec<u8> = rho[j * plane..(j + 1) * plane]
                .iter()
                .map(|&p| (rng.gen::<f64>() < p) as u8)
                .collect();
            hard.push(m);
        }
        let shown: Vec<f64> = match &options.randomize {
            Some(policy) => {
                let mut out = Vec::with_capacity(n * plane);
                for (j, m) in hard.iter().enumerate() {
                    let mut rng = substream(options.seed, &[purpose::RANDOMIZE, (start + j) as u64, 0]);
                    let rects = sample_rectangles(policy, h, w, &mut rng)?;
                    out.extend(grown(m, &rects, w));
                }
                out
            }
            None => hard.iter().flat_map(|m| m.iter().map(|&b| b as f64)).collect(),
        };
        let predicted = predict(model, &images, Tensor::new(vec![n, 1, h, w], shown));
        let mut votes = vec![vec![0usize; model.config.categories]; n];
        for d in 0..options.stability_draws {
            let mut out = Vec::with_capacity(n * plane);
            for (j, m) in hard.iter().enumerate() {
                let path = [purpose::RANDOMIZE, (start + j) as u64, 1 + d as u64];
                let rects = sample_rectangles(&options.stability_policy, h, w, &mut substream(options.seed, &path))?;
                out.extend(grown(m, &rects, w));
            }
            for (j, p) in predict(model, &images, Tensor::new(vec![n, 1, h, w], out)).into_iter().enumerate() {
                votes[j][p] += 1;
            }
        }
        for (j, m) in hard.into_iter().enumerate() {
            let stable = (options.stability_draws > 0).then(|| {
                let v: Vec<f64> = votes[j].iter().map(|&c| c as f64).collect();
                argmax(&v) == predicted[j]
            });
            samples.push(SampleResult {
                label: data.samples[start + j].label,
                predicted: predicted[j],
                l1: m.iter().map(|&b| b as f64).sum::<f64>() / plane as f64,
                stable,
            });
            masks.push(m);
        }
    }
    Ok(Evaluation {
        categories: model.config.categories,
        height: h,
        width: w,
        samples,
        masks,
    })
}

/// Per-category accuracy of the frozen classifier on randomly grown hard masks.
pub fn randomized_mask_accuracy(
    model: &IbModel,
    data: &Dataset,
    policy: &RandomizationPolicy,
    seed: u64,
) -> Result<Vec<f64>> {
    let options = EvalOptions {
        randomize: Some(*policy),
        ..EvalOptions::new(seed)
    };
    Ok(evaluate(model, data, &options)?.per_category_accuracy())
}

/// Classifier predictions on fully visible images.
pub fn unmasked_predictions(model: &IbModel, data: &Dataset) -> Result<Vec<usize>> {
    let [h, w, _] = model.config.image_shape;
    if data.image_shape() != model.config.image_shape {
        return Err(Error::shape("dataset does not match the model".to_string()));
    }
    let mut out = Vec::with_capacity(data.len());
    for start in (0..data.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(data.len());
        let images = batch_tensor(data.samples[start..end].iter().map(|s| &s.image));
        out.extend(predict(model, &images, Tensor::full(vec![end - start, 1, h, w], 1.0)));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub per_sample: Vec<f64>,
    pub mean: f64,
    pub per_category_mean: Vec<f64>,
    /// `HISTOGRAM_BINS` equal bins over `[0, 1]` per category; 1.0 falls in the last bin.
    pub histograms: Vec<Vec<usize>>,
}

impl MaskStats {
    /// Largest difference between category means relative to the overall mean.
    pub fn category_spread(&self) -> f64 {
        let present: Vec<f64> = self
            .per_category_mean
            .iter()
            .zip(&self.histograms)
            .filter(|(_, h)| h.iter().sum::<usize>() > 0)
            .map(|(&m, _)| m)
            .collect();
        let hi = present.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = present.iter().cloned().fold(f64::INFINITY, f64::min);
        (hi - lo) / self.mean
    }

    /// CSV rows `bin_left,bin_right,count_0,...`.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin_left,bin_right");
        for c in 0..self.histograms.len() {
            out.push_str(&format!(",count_{c}"));
        }
        out.push('\n');
        for b in 0..HISTOGRAM_BINS {
            let w = 1.0 / HISTOGRAM_BINS as f64;
            out.push_str(&format!("{},{}", b as f64 * w, (b + 1) as f64 * w));
            for h in &self.histograms {
                out.push_str(&format!(",{}", h[b]));
            }
            out.push('\n');
        }
        out
    }
}

pub fn histogram_bin(value: f64) -> usize {
    ((value * HISTOGRAM_BINS as f64).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1)
}

/// Group per-sample visible fractions by label.
pub fn mask_l1_stats(l1: &[f64], labels: &[usize], categories: usize) -> MaskStats {
    let mut sums = vec![0.0; categories];
    let mut counts = vec![0usize; categories];
    let mut histograms = vec![vec![0usize; HISTOGRAM_BINS]; categories];
    for (&v, &l) in l1.iter().zip(labels) {
        sums[l] += v;
        counts[l] += 1;
        histograms[l][histogram_bin(v)] += 1;
    }
    MaskStats {
        per_sample: l1.to_vec(),
        mean: if l1.is_empty() { 0.0 } else { l1.iter().sum::<f64>() / l1.len() as f64 },
        per_category_mean: sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect(),
        histograms,
    }
}

/// Radius of the disk around the small digit's centre used for inside/outside averages.
pub const SMALL_DIGIT_RADIUS: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Region {
    Rect(Rect),
    /// Pixels whose centres lie within `radius` of `center` (`[y, x]`, pixel units).
    Disk { center: [f64; 2], radius: f64 },
}

impl Region {
    /// The class-defining region recorded for a sample: the anomaly rectangle or a disk
    /// around the small digit.
    pub fn of_sample(meta: &crate::datasets::SampleMeta) -> Option<Region> {
        meta.rect.map(Region::Rect).or(meta.small_center.map(|center| Region::Disk {
            center,
            radius: SMALL_DIGIT_RADIUS,
        }))
    }

    pub fn of_dataset(data: &Dataset) -> Vec<Option<Region>> {
        data.meta.iter().map(Region::of_sample).collect()
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        match self {
            Region::Rect(r) => r.contains(y, x),
            Region::Disk { center, radius } => {
                let dy = y as f64 + 0.5 - center[0];
                let dx = x as f64 + 0.5 - center[1];
                dy * dy + dx * dx <= radius * radius
            }
        }
    }
}

/// Means of `mask` (row-major `height x width`) over the region and its complement.
pub fn region_average(mask: &[f64], height: usize, width: usize, region: &Region) -> Result<(f64, f64)> {
    if mask.len() != height * width {
        return Err(Error::shape(format!("mask of {} values for {height}x{width}", mask.len())));
    }
    match region {
        Region::Rect(r) if !r.fits(height, width) => return Err(Error::data("region leaves the frame")),
        Region::Disk { center, radius }
            if center[0] - radius < 0.0
                || center[1] - radius < 0.0
                || center[0] + radius > height as f64
                || center[1] + radius > width as f64 =>
        {
            return Err(Error::data("region leaves the frame"))
        }
        _ => {}
    }
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for y in 0..height {
        for x in 0..width {
            let v = mask[y * width + x];
            if region.contains(y, x) {
                si += v;
                ni += 1;
            } else {
                so += v;
                no += 1;
            }
        }
    }
    if ni == 0 || no == 0 {
        return Err(Error::data("region or its complement is empty"));
    }
    Ok((si / ni as f64, so / no as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub count: usize,
    pub inside: f64,
    pub outside: f64,
    pub ratio: f64,
}

/// Area under the ROC curve of `scores` for `positive` versus the rest, via the rank-sum
/// statistic with ties sharing their average rank.
pub fn auc_rank(scores: &[f64], positive: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    let np = positive.iter().filter(|&&p| p).count() as f64;
    let nn = positive.len() as f64 - np;
    let sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    (sum - np * (np + 1.0) / 2.0) / (np * nn)
}

/// Same area by sweeping the threshold over every distinct score and integrating the
/// ROC polyline with the trapezoid rule.
pub fn auc_sweep(scores: &[f64], positive: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let np = positive.iter().filter(|&&p| p).count() as f64;
    let nn = positive.len() as f64 - np;
    let (mut area, mut px, mut py) = (0.0, 0.0, 0.0);
    for t in thresholds {
        let (mut tp, mut fp) = (0.0, 0.0);
        for (&s, &p) in scores.iter().zip(positive) {
            if s >= t {
                if p {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        let (x, y) = (fp / nn, tp / np);
        area += (x - px) * (y + py) / 2.0;
        px = x;
        py = y;
    }
    area + (1.0 - px) * (1.0 + py) / 2.0
}

/// Orientation-free separation: `max(auc, 1 - auc)`.
pub fn separation(auc: f64) -> f64 {
    auc.max(1.0 - auc)
}

/// Held-out accuracy of a classifier that sees only the visible fraction: each of the
/// histogram bins predicts the majority label of the training samples falling in it,
/// empty bins borrow from the nearest populated bin.
pub fn mask_only_accuracy(
    train_l1: &[f64],
    train_labels: &[usize],
    test_l1: &[f64],
    test_labels: &[usize],
    categories: usize,
) -> Result<f64> {
    if train_l1.is_empty() || test_l1.is_empty() {
        return Err(Error::data("mask-only classifier needs train and test samples"));
    }
    let mut counts = vec![vec![0usize; categories]; HISTOGRAM_BINS];
    for (&v, &l) in train_l1.iter().zip(train_labels) {
        counts[histogram_bin(v)][l] += 1;
    }
    let populated: Vec<usize> = (0..HISTOGRAM_BINS).filter(|&b| counts[b].iter().sum::<usize>() > 0).collect();
    let vote = |b: usize| {
        let c = &counts[b];
        (0..categories).fold(0, |best, k| if c[k] > c[best] { k } else { best })
    };
    let rule: Vec<usize> = (0..HISTOGRAM_BINS)
        .map(|b| {
            let near = *populated
                .iter()
                .min_by_key(|&&p| (p as isize - b as isize).unsigned_abs())
                .expect("training samples exist");
            vote(near)
        })
        .collect();
    let predicted: Vec<usize> = test_l1.iter().map(|&v| rule[histogram_bin(v)]).collect();
    Ok(accuracy(&predicted, test_labels))
}

/// Mask-only accuracy with even positions as the training split and odd as held-out.
pub fn mask_only_accuracy_split(l1: &[f64], labels: &[usize], categories: usize) -> Result<f64> {
    let pick = |parity: usize| -> (Vec<f64>, Vec<usize>) {
        l1.iter()
            .zip(labels)
            .enumerate()
            .filter(|(i, _)| i % 2 == parity)
            .map(|(_, (&v, &l))| (v, l))
            .unzip()
    };
    let (a, la) = pick(0);
    let (b, lb) = pick(1);
    mask_only_accuracy(&a, &la, &b, &lb, categories)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCheck {
    pub masked: f64,
    pub baseline: Option<f64>,
    /// Allowed shortfall of the masked classifier below the baseline.
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeLossCheck {
    pub final_loss: Option<f64>,
    pub target_lo: f64,
    pub target_hi: f64,
    /// Relative slack around the band, as a fraction of its midpoint.
    pub slack: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityCheck {
    pub draws: usize,
    pub stability: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// The three quality checks on a trained run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceReport {
    pub accuracy: AccuracyCheck,
    pub vae_loss: VaeLossCheck,
    pub stability: StabilityCheck,
    pub per_category_accuracy: Vec<f64>,
    pub mask_stats: MaskStats,
    #[serde(default)]
    pub extra: BTreeMap<String, f64>,
}

impl AcceptanceReport {
    pub fn pass(&self) -> bool {
        self.accuracy.pass && self.vae_loss.pass && self.stability.pass
    }
}

pub const ACCURACY_TOLERANCE: f64 = 0.05;
pub const VAE_SLACK: f64 = 0.25;
pub const STABILITY_THRESHOLD: f64 = 0.9;
pub const STABILITY_DRAWS: usize = 10;

/// Build the report from an evaluation carrying stability flags.
pub fn acceptance_report(
    eval: &Evaluation,
    baseline_accuracy: Option<f64>,
    final_vae_loss: Option<f64>,
    target: VaeTarget,
) -> AcceptanceReport {
    let masked = eval.accuracy();
    let accuracy = AccuracyCheck {
        masked,
        baseline: baseline_accuracy,
        tolerance: ACCURACY_TOLERANCE,
        pass: baseline_accuracy.is_some_and(|b| masked >= b - ACCURACY_TOLERANCE),
    };
    let slack = VAE_SLACK * target.mid();
    let vae_loss = VaeLossCheck {
        final_loss: final_vae_loss,
        target_lo: target.lo,
        target_hi: target.hi,
        slack: VAE_SLACK,
        pass: final_vae_loss.is_some_and(|v| v >= target.lo - slack && v <= target.hi + slack),
    };
    let s = eval.stability();
    let stability = StabilityCheck {
        draws: eval.samples.first().map_or(0, |_| if s.is_some() { STABILITY_DRAWS } else { 0 }),
        stability: s.unwrap_or(0.0),
        threshold: STABILITY_THRESHOLD,
        pass: s.is_some_and(|v| v >= STABILITY_THRESHOLD),
    };
    AcceptanceReport {
        accuracy,
        vae_loss,
        stability,
        per_category_accuracy: eval.per_category_accuracy(),
        mask_stats: eval.stats(),
        extra: BTreeMap::new(),
    }
}
