//! Mask model: per-pixel visibility probabilities, relaxed and hard samplers, mask entropy
//! estimators and rectangle randomization.

use rand::Rng;

use crate::arch::{build_network, infer_shapes, parse_architecture, BuildOptions, FeatureShape, Network};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::recipes::MASK_PLAN;
use crate::tensor::Tensor;
use crate::types::{batch_tensor, Image, Mask, MaskKind, MaskProbability, Rect, RHO_EPSILON};

pub const DEFAULT_TEMPERATURE: f64 = 0.5;

/// Network mapping an image to visibility logits, squashed into `[eps, 1 - eps]`.
#[derive(Clone, Debug)]
pub struct MaskModel {
    net: Network,
}

impl MaskModel {
    /// Build from an architecture string whose final layer must emit one channel at the
    /// image resolution. `initial_logit` sets the starting visibility of every pixel.
    pub fn build<R: Rng>(
        spec: &str,
        image_shape: [usize; 3],
        initial_logit: f64,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let net = parse_architecture(spec, &MASK_PLAN)?.with_linear_output();
        let net = infer_shapes(net, FeatureShape::image(image_shape))?;
        let want = FeatureShape::Map {
            channels: 1,
            height: image_shape[0],
            width: image_shape[1],
        };
        let got = net.output_shape().expect("shaped");
        if got != want {
            return Err(Error::shape(format!("mask network emits {got}, expected {want}")));
        }
        let options = BuildOptions {
            zero_final: false,
            final_bias: initial_logit,
        };
        Ok(MaskModel {
            net: build_network(&net, store, prefix, options, rng)?,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    /// `[n, c, h, w]` images to `[n, 1, h, w]` clamped probabilities.
    pub fn probabilities(&self, g: &mut Graph, params: &Bound, images: Var) -> Var {
        let logits = self.net.forward(g, params, images);
        let rho = g.sigmoid(logits);
        g.clamp(rho, RHO_EPSILON, 1.0 - RHO_EPSILON)
    }

    /// Probabilities for a single image with frozen parameters.
    pub fn mask_probabilities(&self, store: &ParamStore, image: &Image) -> Result<MaskProbability> {
        let mut g = Graph::new();
        let b = store.bind_frozen(&mut g);
        let x = g.constant(batch_tensor([image]));
        let rho = self.probabilities(&mut g, &b, x);
        MaskProbability::new(image.height(), image.width(), g.value(rho).data().to_vec())
    }
}

fn open_unit<R: Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen();
    u.max(f64::MIN_POSITIVE)
}

fn gumbel<R: Rng>(rng: &mut R) -> f64 {
    -(-open_unit(rng).ln()).ln()
}

/// Difference of two independent Gumbel draws per element, i.e. standard logistic noise.
pub fn gumbel_difference<R: Rng>(count: usize, rng: &mut R) -> Vec<f64> {
    (0..count).map(|_| gumbel(rng) - gumbel(rng)).collect()
}

/// Two-category concrete relaxation of Bernoulli(`rho`) driven by fixed `noise`:
/// `sigmoid((log rho - log(1 - rho) + noise) / tau)`.
pub fn relaxed_sample_graph(g: &mut Graph, rho: Var, noise: Tensor, temperature: f64) -> Var {
    let log_on = g.log(rho);
    let off = g.one_minus(rho);
    let log_off = g.log(off);
    let logit = g.sub(log_on, log_off);
    let noise = g.constant(noise.reshape(g.shape(rho).to_vec()));
    let perturbed = g.add(logit, noise);
    let scaled = g.scale(perturbed, 1.0 / temperature);
    g.sigmoid(scaled)
}

fn relaxed_value(rho: f64, noise: f64, temperature: f64) -> f64 {
    crate::autodiff::sigmoid(((rho.ln() - (1.0 - rho).ln()) + noise) / temperature)
}

/// One relaxed mask sample with values in `[0, 1]`.
pub fn sample_mask_relaxed<R: Rng>(rho: &MaskProbability, temperature: f64, rng: &mut R) -> Result<Mask> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::config(format!("temperature must be positive, got {temperature}")));
    }
    let noise = gumbel_difference(rho.values().len(), rng);
    let values = rho
        .values()
        .iter()
        .zip(&noise)
        .map(|(&p, &n)| relaxed_value(p, n, temperature))
        .collect();
    Mask::new(rho.height(), rho.width(), MaskKind::Relaxed, values)
}

/// One Boolean mask with independent pixels, visible with probability `rho`.
pub fn sample_mask_hard<R: Rng>(rho: &MaskProbability, rng: &mut R) -> Mask {
    let values = rho
        .values()
        .iter()
        .map(|&p| if rng.gen::<f64>() < p { 1.0 } else { 0.0 })
        .collect();
    Mask::new(rho.height(), rho.width(), MaskKind::Boolean, values).expect("binary values")
}

fn binary_entropy(p: f64) -> f64 {
    let q = 1.0 - p;
    let t = |x: f64| if x > 0.0 { -x * x.ln() } else { 0.0 };
    t(p) + t(q)
}

/// Entropy in nats of the factorized Bernoulli mask distribution.
pub fn mask_entropy_continuous(rho: &MaskProbability) -> f64 {
    rho.values().iter().map(|&p| binary_entropy(p)).sum()
}

/// `-log p(m | rho)` summed over pixels; relaxed masks use the same cross-entropy form.
pub fn mask_negative_log_likelihood(mask: &Mask, rho: &MaskProbability) -> Result<f64> {
    if mask.values().len() != rho.values().len() {
        return Err(Error::shape(format!(
            "mask of {} pixels against {} probabilities",
            mask.values().len(),
            rho.values().len()
        )));
    }
    Ok(mask
        .values()
        .iter()
        .zip(rho.values())
        .map(|(&m, &p)| -(m * p.ln() + (1.0 - m) * (1.0 - p).ln()))
        .sum())
}

/// Per-sample `-log p(m | rho)` for `[n, 1, h, w]` tensors, shape `[n]`.
pub fn mask_nll_graph(g: &mut Graph, mask: Var, rho: Var) -> Var {
    let log_on = g.log(rho);
    let off = g.one_minus(rho);
    let log_off = g.log(off);
    let hidden = g.one_minus(mask);
    let a = g.mul(mask, log_on);
    let b = g.mul(hidden, log_off);
    let ll = g.add(a, b);
    let per = g.sum_rows(ll);
    g.scale(per, -1.0)
}

/// Per-sample factorized entropy of `[n, 1, h, w]` probabilities, shape `[n]`.
pub fn mask_entropy_graph(g: &mut Graph, rho: Var) -> Var {
    mask_nll_graph(g, rho, rho)
}

/// Random rectangles forced visible in the mask the classifier sees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RandomizationPolicy {
    pub enabled: bool,
    pub rect_count: usize,
    pub min_side: usize,
    /// Largest side; `None` means half the shorter image side.
    pub max_side: Option<usize>,
}

impl Default for RandomizationPolicy {
    fn default() -> Self {
        RandomizationPolicy {
            enabled: true,
            rect_count: 1,
            min_side: 4,
            max_side: None,
        }
    }
}

impl RandomizationPolicy {
    pub fn disabled() -> Self {
        RandomizationPolicy {
            enabled: false,
            ..Self::default()
        }
    }

    /// Inclusive side range for a `height x width` image, rejecting impossible policies.
    pub fn side_range(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let limit = height.min(width);
        let max = self.max_side.unwrap_or(limit / 2);
        if self.min_side == 0 || self.min_side > max || max > limit {
            return Err(Error::config(format!(
                "rectangle sides [{}, {max}] do not fit a {height}x{width} image",
                self.min_side
            )));
        }
        Ok((self.min_side, max))
    }
}

/// Draw the rectangles of one randomization; empty when the policy is disabled.
pub fn sample_rectangles<R: Rng>(
    policy: &RandomizationPolicy,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<Vec<Rect>> {
    if !policy.enabled {
        return Ok(Vec::new());
    }
    let (lo, hi) = policy.side_range(height, width)?;
    Ok((0..policy.rect_count)
        .map(|_| {
            let h = rng.gen_range(lo..=hi);
            let w = rng.gen_range(lo..=hi);
            let top = rng.gen_range(0..=height - h);
            let left = rng.gen_range(0..=width - w);
            Rect::new(top, left, h, w)
        })
        .collect())
}

/// Union of rectangle indicators as a row-major 0/1 grid.
pub fn rectangles_indicator(rects: &[Rect], height: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; height * width];
    for r in rects {
        for (o, v) in out.iter_mut().zip(r.indicator(height, width)) {
            *o = f64::max(*o, v);
        }
    }
    out
}

/// `m' = m + R (1 - m)`: pixels inside any rectangle become visible, others are unchanged.
pub fn grow_mask(mask: &Mask, rects: &[Rect]) -> Mask {
    let r = rectangles_indicator(rects, mask.height(), mask.width());
    let values = mask
        .values()
        .iter()
        .zip(&r)
        .map(|(&m, &r)| m + r * (1.0 - m))
        .collect();
    Mask::new(mask.height(), mask.width(), mask.kind(), values).expect("grown mask stays in range")
}

/// Randomize a mask under `policy`, returning the grown mask and the rectangles used.
pub fn randomize_mask<R: Rng>(
    mask: &Mask,
    policy: &RandomizationPolicy,
    rng: &mut R,
) -> Result<(Mask, Vec<Rect>)> {
    let rects = sample_rectangles(policy, mask.height(), mask.width(), rng)?;
    Ok((grow_mask(mask, &rects), rects))
}

/// Differentiable `m + R (1 - m)` for `[n, 1, h, w]` masks and a constant indicator.
pub fn randomize_graph(g: &mut Graph, mask: Var, indicator: Tensor) -> Var {
    let r = g.constant(indicator.reshape(g.shape(mask).to_vec()));
    let hidden = g.one_minus(mask);
    let forced = g.mul(r, hidden);
    g.add(mask, forced)
}

#[cfg(test)]
mod tests;
