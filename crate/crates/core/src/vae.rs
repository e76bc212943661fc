//! Variational bound on the entropy of masked images (and of the conditioned variants used by
//! the conditional objective).

use rand::Rng;
use rand_distr::StandardNormal;

use crate::arch::{
    build_network, infer_shapes, parse_architecture, BuildOptions, FeatureShape, LayerKind, Network,
    Nonlinearity, Padding,
};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::recipes::VAE_PLAN;
use crate::tensor::Tensor;
use crate::types::{MaskedImage, RHO_EPSILON};

/// Feature width of a decoder trunk whose output is combined with a spatial mask.
const CONDITIONED_TRUNK_WIDTH: usize = 8;

/// What the decoder reconstructs and how it is scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Likelihood {
    /// Bernoulli mask plus Gaussian pixels on visible locations.
    MaskedImage,
    /// Bernoulli mask only.
    MaskOnly,
    /// Gaussian pixels on visible locations; the mask is an input, not a target.
    VisiblePixels,
    /// Gaussian pixels everywhere.
    AllPixels,
}

impl Likelihood {
    fn has_mask(self) -> bool {
        matches!(self, Likelihood::MaskedImage | Likelihood::MaskOnly)
    }

    fn has_pixels(self) -> bool {
        self != Likelihood::MaskOnly
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeSpec {
    pub encoder: String,
    pub decoder: String,
    /// `[height, width, pixel channels]` of the modelled image.
    pub image_shape: [usize; 3],
    /// Channels of the encoder input tensor.
    pub encoder_channels: usize,
    pub latent_dim: usize,
    pub sigma: f64,
    pub likelihood: Likelihood,
    /// Category count when the decoder also receives a one-hot label.
    pub label_categories: Option<usize>,
    /// Whether the decoder receives the mask as an extra spatial input.
    pub mask_conditioned_decoder: bool,
}

impl VaeSpec {
    /// Masked-image VAE: encoder sees `[pixels * m, m]`, decoder emits mask and pixels.
    pub fn masked_image(encoder: &str, decoder: &str, image_shape: [usize; 3], latent_dim: usize, sigma: f64) -> Self {
        VaeSpec {
            encoder: encoder.to_string(),
            decoder: decoder.to_string(),
            image_shape,
            encoder_channels: image_shape[2] + 1,
            latent_dim,
            sigma,
            likelihood: Likelihood::MaskedImage,
            label_categories: None,
            mask_conditioned_decoder: false,
        }
    }

    fn decoder_outputs(&self) -> usize {
        let c = self.image_shape[2];
        match self.likelihood {
            Likelihood::MaskedImage => 1 + c,
            Likelihood::MaskOnly => 1,
            Likelihood::VisiblePixels | Likelihood::AllPixels => c,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Vae {
    spec: VaeSpec,
    encoder: Network,
    decoder: Network,
    head: Option<Network>,
}

/// Graph nodes of one decoded batch.
#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    /// `[n, 1, h, w]` Bernoulli mask parameters.
    pub rho_hat: Option<Var>,
    /// `[n, c, h, w]` pixel means.
    pub i_hat: Option<Var>,
}

/// Per-sample loss terms, each of shape `[n]`.
#[derive(Clone, Copy, Debug)]
pub struct VaeTerms {
    pub recon: Var,
    pub kl: Var,
    pub loss: Var,
    pub decoded: Decoded,
}

/// Inputs of one VAE evaluation on a batch.
#[derive(Clone, Copy, Debug)]
pub struct VaeBatch<'a> {
    /// `[n, encoder_channels, h, w]`.
    pub encoder_input: Var,
    /// `[n, c, h, w]` pixel targets (already masked where appropriate).
    pub pixels: Option<Var>,
    /// `[n, 1, h, w]` mask: a target for Bernoulli likelihoods, a weight for visible pixels
    /// and the decoder's spatial input when conditioned.
    pub mask: Option<Var>,
    pub labels: Option<&'a [usize]>,
}

/// Output layers start at zero: the posterior starts at the prior and the decoder at
/// coin-flip masks with zero pixel means.
const ZERO_HEAD: BuildOptions = BuildOptions {
    zero_final: true,
    final_bias: 0.0,
};

impl Vae {
    pub fn build<R: Rng>(spec: VaeSpec, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Self> {
        let [h, w, _] = spec.image_shape;
        let d = spec.latent_dim;
        let enc = parse_architecture(&spec.encoder, &VAE_PLAN)?
            .then(&[LayerKind::FullyConnected { units: 2 * d }], Nonlinearity::None);
        let enc = infer_shapes(enc, FeatureShape::image([h, w, spec.encoder_channels]))?;
        let encoder = build_network(&enc, store, &format!("{prefix}.encoder"), ZERO_HEAD, rng)?;

        let outputs = spec.decoder_outputs();
        let dec = parse_architecture(&spec.decoder, &VAE_PLAN)?;
        let dec = if spec.mask_conditioned_decoder {
            dec.with_output_width(CONDITIONED_TRUNK_WIDTH)?
        } else {
            dec.with_output_width(outputs)?.with_linear_output()
        };
        let dec_in = d + spec.label_categories.unwrap_or(0);
        let dec = infer_shapes(dec, FeatureShape::Vector(dec_in))?;
        match dec.output_shape() {
            Some(FeatureShape::Map { height, width, .. }) if height == h && width == w => {}
            other => {
                return Err(Error::shape(format!(
                    "decoder emits {}, expected a {h}x{w} map",
                    other.map(|s| s.to_string()).unwrap_or_default()
                )))
            }
        }
        let options = if spec.mask_conditioned_decoder {
            BuildOptions::default()
        } else {
            ZERO_HEAD
        };
        let decoder = build_network(&dec, store, &format!("{prefix}.decoder"), options, rng)?;

        let head = if spec.mask_conditioned_decoder {
            let head = crate::arch::NetworkSpec::default().then(
                &[LayerKind::Conv {
                    kernel: 1,
                    stride: 1,
                    out_channels: outputs,
                    padding: Padding::Valid,
                }],
                Nonlinearity::None,
            );
            let head = infer_shapes(head, FeatureShape::image([h, w, CONDITIONED_TRUNK_WIDTH + 1]))?;
            Some(build_network(&head, store, &format!("{prefix}.head"), ZERO_HEAD, rng)?)
        } else {
            None
        };
        Ok(Vae {
            spec,
            encoder,
            decoder,
            head,
        })
    }

    pub fn spec(&self) -> &VaeSpec {
        &self.spec
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    /// `(mu, logvar)`, each `[n, d]`.
    pub fn encode(&self, g: &mut Graph, params: &Bound, input: Var) -> (Var, Var) {
        let stats = self.encoder.forward(g, params, input);
        let d = self.spec.latent_dim;
        (g.slice(stats, 0, d), g.slice(stats, d, d))
    }

    pub fn decode(
        &self,
        g: &mut Graph,
        params: &Bound,
        z: Var,
        labels: Option<&[usize]>,
        mask: Option<Var>,
    ) -> Result<Decoded> {
        let n = g.shape(z)[0];
        let z = match (self.spec.label_categories, labels) {
            (Some(k), Some(labels)) => {
                if labels.len() != n {
                    return Err(Error::shape(format!("{} labels for {n} latents", labels.len())));
                }
                let mut onehot = vec![0.0; n * k];
                for (i, &c) in labels.iter().enumerate() {
                    if c >= k {
                        return Err(Error::data(format!("label {c} outside {k} categories")));
                    }
                    onehot[i * k + c] = 1.0;
                }
                let oh = g.constant(Tensor::new(vec![n, k], onehot));
                g.concat(&[z, oh])
            }
            (Some(_), None) => return Err(Error::data("class-conditional decoder needs a label")),
            (None, _) => z,
        };
        let mut out = self.decoder.forward(g, params, z);
        if let Some(head) = &self.head {
            let m = mask.ok_or_else(|| Error::data("mask-conditioned decoder needs a mask"))?;
            let joined = g.concat(&[out, m]);
            out = head.forward(g, params, joined);
        }
        let c = self.spec.image_shape[2];
        Ok(match self.spec.likelihood {
            Likelihood::MaskedImage => {
                let logits = g.slice(out, 0, 1);
                Decoded {
                    rho_hat: Some(bernoulli_parameters(g, logits)),
                    i_hat: Some(g.slice(out, 1, c)),
                }
            }
            Likelihood::MaskOnly => Decoded {
                rho_hat: Some(bernoulli_parameters(g, out)),
                i_hat: None,
            },
            Likelihood::VisiblePixels | Likelihood::AllPixels => Decoded {
                rho_hat: None,
                i_hat: Some(out),
            },
        })
    }

    /// Reconstruction NLL of one reparameterized sample plus the KL term.
    /// `eta` holds the `[n, d]` standard-normal draws.
    pub fn terms(&self, g: &mut Graph, params: &Bound, batch: VaeBatch, eta: Tensor) -> Result<VaeTerms> {
        let (mu, logvar) = self.encode(g, params, batch.encoder_input);
        let z = reparameterize(g, mu, logvar, eta);
        let decoded = self.decode(g, params, z, batch.labels, batch.mask)?;
        let lk = self.spec.likelihood;
        if lk.has_mask() && batch.mask.is_none() {
            return Err(Error::data("Bernoulli likelihood needs a target mask"));
        }
        if lk.has_pixels() && batch.pixels.is_none() {
            return Err(Error::data("Gaussian likelihood needs target pixels"));
        }
        let recon = reconstruction_nll_graph(
            g,
            lk,
            batch.pixels,
            batch.mask,
            decoded.rho_hat,
            decoded.i_hat,
            self.spec.sigma,
        );
        let kl = kl_to_prior_graph(g, mu, logvar);
        let loss = g.add(recon, kl);
        Ok(VaeTerms {
            recon,
            kl,
            loss,
            decoded,
        })
    }
}

fn bernoulli_parameters(g: &mut Graph, logits: Var) -> Var {
    let p = g.sigmoid(logits);
    g.clamp(p, RHO_EPSILON, 1.0 - RHO_EPSILON)
}

/// Standard-normal draws for a `[n, d]` latent batch.
pub fn latent_noise<R: Rng>(n: usize, d: usize, rng: &mut R) -> Tensor {
    Tensor::new(vec![n, d], (0..n * d).map(|_| rng.sample(StandardNormal)).collect())
}

/// `z = mu + exp(logvar / 2) * eta`.
pub fn reparameterize(g: &mut Graph, mu: Var, logvar: Var, eta: Tensor) -> Var {
    let half = g.scale(logvar, 0.5);
    let sd = g.exp(half);
    let e = g.constant(eta.reshape(g.shape(mu).to_vec()));
    let noise = g.mul(sd, e);
    g.add(mu, noise)
}

/// Per-sample `0.5 * sum(mu^2 + exp(logvar) - 1 - logvar)`, shape `[n]`.
pub fn kl_to_prior_graph(g: &mut Graph, mu: Var, logvar: Var) -> Var {
    let mu2 = g.square(mu);
    let var = g.exp(logvar);
    let a = g.add(mu2, var);
    let b = g.sub(a, logvar);
    let c = g.offset(b, -1.0);
    let per = g.sum_rows(c);
    g.scale(per, 0.5)
}

/// Per-sample reconstruction NLL, shape `[n]`, with the Gaussian normalizer dropped.
pub fn reconstruction_nll_graph(
    g: &mut Graph,
    likelihood: Likelihood,
    pixels: Option<Var>,
    mask: Option<Var>,
    rho_hat: Option<Var>,
    i_hat: Option<Var>,
    sigma: f64,
) -> Var {
    let mut parts = Vec::with_capacity(2);
    if likelihood.has_mask() {
        let m = mask.expect("mask target");
        parts.push(crate::mask::mask_nll_graph(g, m, rho_hat.expect("decoded mask")));
    }
    if likelihood.has_pixels() {
        let diff = g.sub(pixels.expect("pixel target"), i_hat.expect("decoded pixels"));
        let sq = g.square(diff);
        let weighted = match likelihood {
            Likelihood::AllPixels => sq,
            _ => g.mul_channels(sq, mask.expect("visibility mask")),
        };
        let per = g.sum_rows(weighted);
        parts.push(g.scale(per, 1.0 / (2.0 * sigma * sigma)));
    }
    match parts.as_slice() {
        [a] => *a,
        [a, b] => g.add(*a, *b),
        _ => unreachable!("every likelihood scores at least one target"),
    }
}

/// Reconstruction NLL of one masked image; `rho_hat` is `h x w`, `i_hat` is HWC.
pub fn reconstruction_nll(mi: &MaskedImage, rho_hat: &[f64], i_hat: &[f64], sigma: f64) -> Result<f64> {
    let [h, w, c] = mi.shape();
    if rho_hat.len() != h * w || i_hat.len() != h * w * c {
        return Err(Error::shape(format!(
            "decoded {} mask and {} pixel values for a {h}x{w}x{c} image",
            rho_hat.len(),
            i_hat.len()
        )));
    }
    let mut total = 0.0;
    for p in 0..h * w {
        let m = mi.indicator_channel()[p];
        let r = rho_hat[p];
        let sq: f64 = (0..c)
            .map(|ch| (mi.pixel_channel()[p * c + ch] - i_hat[p * c + ch]).powi(2))
            .sum();
        total += -(1.0 - m) * (1.0 - r).ln() - m * (r.ln() - sq / (2.0 * sigma * sigma));
    }
    Ok(total)
}

pub fn kl_to_prior(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// Single-sample VAE loss of one masked image with frozen parameters.
pub fn vae_loss<R: Rng>(
    vae: &Vae,
    store: &ParamStore,
    mi: &MaskedImage,
    rng: &mut R,
    label: Option<usize>,
) -> Result<f64> {
    if vae.spec.likelihood != Likelihood::MaskedImage {
        return Err(Error::config("vae_loss scores masked images"));
    }
    let [h, w, c] = mi.shape();
    if [h, w, c] != vae.spec.image_shape {
        return Err(Error::shape(format!(
            "masked image {h}x{w}x{c} against a {:?} model",
            vae.spec.image_shape
        )));
    }
    let mut g = Graph::new();
    let b = store.bind_frozen(&mut g);
    let chw = mi.to_tensor();
    let input = g.constant(chw);
    let pixels = g.slice(input, 0, c);
    let mask = g.slice(input, c, 1);
    let labels = label.map(|l| vec![l]);
    let eta = latent_noise(1, vae.latent_dim(), rng);
    let t = vae.terms(
        &mut g,
        &b,
        VaeBatch {
            encoder_input: input,
            pixels: Some(pixels),
            mask: Some(mask),
            labels: labels.as_deref(),
        },
        eta,
    )?;
    Ok(g.value(t.loss).item())
}
