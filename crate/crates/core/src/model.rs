//! Assembled models (mask network, VAEs, classifier) and their checkpoints.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::arch::{build_network, infer_shapes, parse_architecture, BuildOptions, FeatureShape, Network};
use crate::autodiff::{log_sum_exp, Graph, Var};
use crate::error::{Error, Result};
use crate::mask::MaskModel;
use crate::params::{Bound, ParamStore};
use crate::recipes::{Recipe, CLASSIFIER_PLAN};
use crate::rng::{purpose, substream};
use crate::tensor::Tensor;
use crate::types::MaskedImage;
use crate::vae::{Likelihood, Vae, VaeSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Ib,
    Ceb,
    CondIb,
}

impl Objective {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ib" => Some(Objective::Ib),
            "ceb" => Some(Objective::Ceb),
            "cond-ib" | "cond_ib" => Some(Objective::CondIb),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Objective::Ib => "ib",
            Objective::Ceb => "ceb",
            Objective::CondIb => "cond-ib",
        }
    }
}

/// Architecture strings and sizes shared by every submodel.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_shape: [usize; 3],
    pub categories: usize,
    pub classifier: String,
    pub mask: String,
    pub encoder: String,
    pub decoder: String,
    pub latent_dim: usize,
    pub sigma: f64,
    /// Starting logit of every mask pixel.
    pub mask_initial_logit: f64,
}

impl ModelConfig {
    pub fn from_recipe(r: &Recipe) -> Self {
        ModelConfig {
            image_shape: r.image_shape,
            categories: r.categories,
            classifier: r.classifier.into(),
            mask: r.mask.into(),
            encoder: r.encoder.into(),
            decoder: r.decoder.into(),
            latent_dim: r.latent_dim,
            sigma: r.sigma,
            mask_initial_logit: 2.0,
        }
    }
}

/// Classifier over masked images (`channels + 1` inputs) emitting `K` logits.
#[derive(Clone, Debug)]
pub struct Classifier {
    net: Network,
    categories: usize,
}

impl Classifier {
    pub fn build<R: Rng>(
        spec: &str,
        image_shape: [usize; 3],
        categories: usize,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let net = parse_architecture(spec, &CLASSIFIER_PLAN)?.with_linear_output();
        let [h, w, c] = image_shape;
        let net = infer_shapes(net, FeatureShape::image([h, w, c + 1]))?;
        if net.output_shape() != Some(FeatureShape::Vector(categories)) {
            return Err(Error::shape(format!(
                "classifier emits {}, expected {categories} logits",
                net.output_shape().map(|s| s.to_string()).unwrap_or_default()
            )));
        }
        Ok(Classifier {
            net: build_network(&net, store, prefix, BuildOptions::default(), rng)?,
            categories,
        })
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    /// `[n, c + 1, h, w]` masked images to `[n, K]` logits.
    pub fn logits(&self, g: &mut Graph, params: &Bound, masked: Var) -> Var {
        self.net.forward(g, params, masked)
    }
}

/// Logits of one masked image with frozen parameters.
pub fn classify(classifier: &Classifier, store: &ParamStore, mi: &MaskedImage) -> Result<Vec<f64>> {
    let want = classifier.net.input_shape();
    let [h, w, c] = mi.shape();
    if want != FeatureShape::image([h, w, c + 1]) {
        return Err(Error::shape(format!("masked image {h}x{w}x{c} against classifier input {want}")));
    }
    let mut g = Graph::new();
    let b = store.bind_frozen(&mut g);
    let x = g.constant(mi.to_tensor());
    let l = classifier.logits(&mut g, &b, x);
    Ok(g.value(l).data().to_vec())
}

/// `-log softmax(logits)[label]`.
pub fn class_nll(logits: &[f64], label: usize) -> f64 {
    log_sum_exp(logits) - logits[label]
}

/// Extra variational models of the conditional objective.
#[derive(Clone, Debug)]
pub struct CondModels {
    /// Bernoulli model of the mask alone.
    pub vae_mask: Vae,
    /// Full-image model given the mask and the label proxy.
    pub vae_image: Vae,
}

/// Every network of one run together with its parameters.
#[derive(Clone, Debug)]
pub struct IbModel {
    pub config: ModelConfig,
    pub objective: Objective,
    pub store: ParamStore,
    pub mask: MaskModel,
    /// Masked-image VAE; conditioned on the mask in the conditional objective.
    pub vae: Vae,
    pub classifier: Classifier,
    pub cond: Option<CondModels>,
}

impl IbModel {
    pub fn build(config: &ModelConfig, objective: Objective, seed: u64) -> Result<Self> {
        let mut rng = substream(seed, &[purpose::INIT]);
        let mut store = ParamStore::new();
        let [_, _, c] = config.image_shape;
        let mask = MaskModel::build(
            &config.mask,
            config.image_shape,
            config.mask_initial_logit,
            &mut store,
            "mask",
            &mut rng,
        )?;
        let base = VaeSpec::masked_image(
            &config.encoder,
            &config.decoder,
            config.image_shape,
            config.latent_dim,
            config.sigma,
        );
        let vae_spec = match objective {
            Objective::Ib => base.clone(),
            Objective::Ceb => VaeSpec {
                label_categories: Some(config.categories),
                ..base.clone()
            },
            Objective::CondIb => VaeSpec {
                likelihood: Likelihood::VisiblePixels,
                mask_conditioned_decoder: true,
                ..base.clone()
            },
        };
        let vae = Vae::build(vae_spec, &mut store, "vae", &mut rng)?;
        let classifier = Classifier::build(
            &config.classifier,
            config.image_shape,
            config.categories,
            &mut store,
            "classifier",
            &mut rng,
        )?;
        let cond = if objective == Objective::CondIb {
            let vae_mask = Vae::build(
                VaeSpec {
                    encoder_channels: 1,
                    likelihood: Likelihood::MaskOnly,
                    ..base.clone()
                },
                &mut store,
                "vae_mask",
                &mut rng,
            )?;
            let vae_image = Vae::build(
                VaeSpec {
                    encoder_channels: c + 1,
                    likelihood: Likelihood::AllPixels,
                    label_categories: Some(config.categories),
                    mask_conditioned_decoder: true,
                    ..base
                },
                &mut store,
                "vae_image",
                &mut rng,
            )?;
            Some(CondModels { vae_mask, vae_image })
        } else {
            None
        };
        Ok(IbModel {
            config: config.clone(),
            objective,
            store,
            mask,
            vae,
            classifier,
            cond,
        })
    }

    pub fn is_mask_param(&self, name: &str) -> bool {
        name.starts_with("mask.")
    }
}

/// Extra key=value entries persisted with a checkpoint (step, beta, ...).
pub type CheckpointInfo = BTreeMap<String, String>;

fn param_file(name: &str) -> String {
    format!("{name}.bin")
}

/// Write a checkpoint directory: `manifest.txt` plus one little-endian `f64` file per parameter.
pub fn save_checkpoint(model: &IbModel, info: &CheckpointInfo, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let c = &model.config;
    let mut m = String::new();
    let mut kv = |k: &str, v: String| writeln!(m, "{k}={v}").expect("string write");
    kv("format", "ibsal-checkpoint-1".into());
    kv("objective", model.objective.name().into());
    kv(
        "model.image_shape",
        format!("{}x{}x{}", c.image_shape[0], c.image_shape[1], c.image_shape[2]),
    );
    kv("model.categories", c.categories.to_string());
    kv("model.classifier", c.classifier.clone());
    kv("model.mask", c.mask.clone());
    kv("model.encoder", c.encoder.clone());
    kv("model.decoder", c.decoder.clone());
    kv("model.latent_dim", c.latent_dim.to_string());
    kv("model.sigma", format!("{:?}", c.sigma));
    kv("model.mask_initial_logit", format!("{:?}", c.mask_initial_logit));
    for (k, v) in info {
        kv(&format!("info.{k}"), v.clone());
    }
    for (name, t) in model.store.iter() {
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        kv(&format!("param.{name}"), shape.join("x"));
        let mut bytes = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(dir.join(param_file(name)), bytes)?;
    }
    std::fs::write(dir.join("manifest.txt"), m)?;
    Ok(())
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    s.split('x').map(|d| d.parse().ok()).collect()
}

/// Rebuild the model described by a checkpoint and restore its parameters.
pub fn load_checkpoint(dir: &Path) -> Result<(IbModel, CheckpointInfo)> {
    let path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&path).map_err(|_| Error::MissingData {
        path: path.clone(),
        hint: "not a checkpoint directory".into(),
    })?;
    let mut kv = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::data(format!("{}: malformed line {line:?}", path.display())))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<&String> {
        kv.get(k)
            .ok_or_else(|| Error::data(format!("{}: missing {k}", path.display())))
    };
    let bad = |k: &str| Error::data(format!("{}: bad value for {k}", path.display()));
    if get("format")? != "ibsal-checkpoint-1" {
        return Err(Error::data(format!("{}: unknown checkpoint format", path.display())));
    }
    let objective = Objective::parse(get("objective")?).ok_or_else(|| bad("objective"))?;
    let shape = parse_shape(get("model.image_shape")?).ok_or_else(|| bad("model.image_shape"))?;
    if shape.len() != 3 {
        return Err(bad("model.image_shape"));
    }
    let config = ModelConfig {
        image_shape: [shape[0], shape[1], shape[2]],
        categories: get("model.categories")?.parse().map_err(|_| bad("model.categories"))?,
        classifier: get("model.classifier")?.clone(),
        mask: get("model.mask")?.clone(),
        encoder: get("model.encoder")?.clone(),
        decoder: get("model.decoder")?.clone(),
        latent_dim: get("model.latent_dim")?.parse().map_err(|_| bad("model.latent_dim"))?,
        sigma: get("model.sigma")?.parse().map_err(|_| bad("model.sigma"))?,
        mask_initial_logit: get("model.mask_initial_logit")?
            .parse()
            .map_err(|_| bad("model.mask_initial_logit"))?,
    };
    let mut model = IbModel::build(&config, objective, 0)?;
    let names: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let key = format!("param.{name}");
        let shape = parse_shape(get(&key)?).ok_or_else(|| bad(&key))?;
        let file = dir.join(param_file(&name));
        let bytes = std::fs::read(&file).map_err(|_| Error::MissingData {
            path: file.clone(),
            hint: "checkpoint is missing a parameter file".into(),
        })?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        if data.len() * 8 != bytes.len() || data.len() != shape.iter().product::<usize>() {
            return Err(Error::data(format!("{}: wrong size", file.display())));
        }
        model.store.set(&name, Tensor::new(shape, data))?;
    }
    let info = kv
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("info.").map(|k| (k.to_string(), v.clone())))
        .collect();
    Ok((model, info))
}
