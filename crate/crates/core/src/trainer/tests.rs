use super::*;
use crate::autodiff::sigmoid;
use crate::gradcheck::check;
use crate::mask::mask_negative_log_likelihood;
use crate::model::{class_nll, classify};
use crate::params::Bound;
use crate::types::{apply_mask, Image, LabeledSample, Mask, MaskKind, MaskProbability};
use crate::vae::{kl_to_prior, reconstruction_nll};
use rand::Rng;

pub(crate) fn toy_config() -> ModelConfig {
    ModelConfig {
        image_shape: [4, 4, 1],
        categories: 2,
        classifier: "C(3, 2, 3) -> Avg -> FC(2)".into(),
        mask: "C(1, 1, 3) -> C(1, 1, 1)".into(),
        encoder: "C(3, 2, 3)".into(),
        decoder: "FC(6) -> FC(8) -> Shape(2x2) -> T_s(3, 2, 2)".into(),
        latent_dim: 2,
        sigma: 0.5,
        mask_initial_logit: 0.5,
    }
}

fn toy_policy() -> RandomizationPolicy {
    RandomizationPolicy {
        enabled: true,
        rect_count: 1,
        min_side: 1,
        max_side: Some(2),
    }
}

pub(crate) fn toy_data(count: usize, seed: u64) -> Dataset {
    let mut rng = substream(seed, &[99]);
    let samples = (0..count)
        .map(|i| {
            let px = (0..16).map(|_| rng.gen::<f32>()).collect();
            LabeledSample::new(Image::new(4, 4, 1, px).unwrap(), i % 2, 2).unwrap()
        })
        .collect();
    Dataset::from_samples("toy", samples, 2).unwrap()
}

/// Shift every parameter off its initial value so no head starts at exactly zero.
fn perturbed(objective: Objective) -> IbModel {
    let mut model = IbModel::build(&toy_config(), objective, 3).unwrap();
    for id in model.store.ids().collect::<Vec<_>>() {
        for (j, v) in model.store.get_mut(id).data_mut().iter_mut().enumerate() {
            *v += 0.04 * ((j % 5) as f64 - 2.0) + 0.01;
        }
    }
    model
}

fn toy_inputs<'a>(data: &Dataset, labels: &'a [usize], beta: f64, policy: &RandomizationPolicy, objective: Objective) -> LossInputs<'a> {
    let n = labels.len();
    LossInputs {
        images: batch_tensor(data.samples[..n].iter().map(|s| &s.image)),
        labels,
        proxy: labels,
        beta,
        temperature: 0.5,
        gate: false,
        noise: StepNoise::draw(5, 0, n, [4, 4, 1], 2, vaes_for(objective), policy).unwrap(),
    }
}

#[test]
fn beta_update_rules() {
    let t = VaeTarget { lo: 10.0, hi: 14.0 };
    assert_eq!(update_beta(0.1, 12.0, t, 0.01, f64::INFINITY, 1e-6, 1e3), 0.1);
    assert_eq!(update_beta(0.1, 13.5, t, 0.01, f64::INFINITY, 1e-6, 1e3), 0.1);
    assert!(update_beta(0.1, 20.0, t, 0.01, f64::INFINITY, 1e-6, 1e3) > 0.1);
    assert!(update_beta(0.1, 5.0, t, 0.01, f64::INFINITY, 1e-6, 1e3) < 0.1);
    let want = 0.1 * (0.01f64 * (20.0 - 12.0) / 12.0).exp();
    assert!((update_beta(0.1, 20.0, t, 0.01, f64::INFINITY, 1e-6, 1e3) - want).abs() < 1e-15);
    assert_eq!(update_beta(999.0, 1e9, t, 0.01, f64::INFINITY, 1e-6, 1e3), 1e3);
    assert_eq!(update_beta(2e-6, 0.0, t, 10.0, f64::INFINITY, 1e-6, 1e3), 1e-6);
    let p = VaeTarget::point(12.0);
    assert_eq!(update_beta(0.3, 12.0, p, 0.5, f64::INFINITY, 1e-6, 1e3), 0.3);
    assert_eq!(VaeTarget::parse("10:14"), Some(t));
    assert_eq!(VaeTarget::parse("12"), Some(p));
    assert!(VaeTarget::parse("14:10").is_none());
    assert!(VaeTarget::parse("inf").is_none());
    assert!((update_beta(0.1, 1e4, t, 0.01, 1.0, 1e-6, 1e3) - 0.1 * 0.01f64.exp()).abs() < 1e-15);
    assert!((update_beta(0.1, 0.0, t, 0.01, 1.0, 1e-6, 1e3) - 0.1 * (-0.01f64).exp()).abs() < 1e-15);
    assert!(gradient_gate(3.0, 4.0) && !gradient_gate(5.0, 4.0));
}

#[test]
fn controller_settles_on_a_responsive_plant() {
    // The plant's loss falls as compression pressure grows: vae = 12 (b* / b)^0.5.
    let optimum = 0.05;
    let mut config = TrainConfig::for_recipe(&crate::recipes::mnist_anomaly(), Objective::Ib);
    config.vae_target = VaeTarget::point(12.0);
    config.beta_eta = 0.05;
    let mut c = BetaController::new(&config);
    let mut history = Vec::new();
    for _ in 0..6000 {
        let vae = 12.0 * (optimum / c.beta).sqrt();
        c.observe(vae);
        assert!((config.beta_min..=config.beta_max).contains(&c.beta));
        history.push(c.beta);
    }
    for b in &history[5000..] {
        assert!((b / optimum - 1.0).abs() < 0.1, "{b}");
    }
}

#[test]
fn gate_engages_only_in_gate_mode_below_threshold() {
    let mut config = TrainConfig::for_recipe(&crate::recipes::mnist_anomaly(), Objective::Ib);
    config.beta_mode = BetaMode::GradGate;
    let mut c = BetaController::new(&config);
    assert!(!c.gate());
    c.observe(5.0);
    assert!(c.gate());
    assert_eq!(c.beta, config.beta0);
    c.observe(1e6);
    assert!(!c.gate());
    config.beta_mode = BetaMode::Fixed;
    let mut f = BetaController::new(&config);
    f.observe(1e6);
    assert_eq!(f.beta, config.beta0);
    assert!(!f.gate());
}

/// Per-sample terms recomputed without the batched loss graph.
fn independent_components(model: &IbModel, inputs: &LossInputs, data: &Dataset) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = inputs.labels.len();
    let (mut vae, mut mask, mut class) = (vec![], vec![], vec![]);
    for j in 0..n {
        let image = &data.samples[j].image;
        let rho = model.mask.mask_probabilities(&model.store, image).unwrap();
        let noise = &inputs.noise.gumbel.data()[j * 16..(j + 1) * 16];
        let m: Vec<f64> = rho
            .values()
            .iter()
            .zip(noise)
            .map(|(&p, &e)| sigmoid(((p / (1.0 - p)).ln() + e) / inputs.temperature))
            .collect();
        let m = Mask::new(4, 4, MaskKind::Relaxed, m).unwrap();
        mask.push(mask_negative_log_likelihood(&m, &rho).unwrap());

        let grow = &inputs.noise.grow.data()[j * 16..(j + 1) * 16];
        let grown: Vec<f64> = m.values().iter().zip(grow).map(|(&v, &r)| v + r * (1.0 - v)).collect();
        let shown = apply_mask(image, &Mask::new(4, 4, MaskKind::Relaxed, grown).unwrap()).unwrap();
        let logits = classify(&model.classifier, &model.store, &shown).unwrap();
        class.push(class_nll(&logits, inputs.labels[j]));

        let mi = apply_mask(image, &m).unwrap();
        let mut g = Graph::new();
        let b = model.store.bind_frozen(&mut g);
        let x = g.constant(mi.to_tensor());
        let (mu, lv) = model.vae.encode(&mut g, &b, x);
        let (mu_v, lv_v) = (g.value(mu).data().to_vec(), g.value(lv).data().to_vec());
        let eta = &inputs.noise.latents[0].data()[j * 2..(j + 1) * 2];
        let z: Vec<f64> = (0..2).map(|k| mu_v[k] + (0.5 * lv_v[k]).exp() * eta[k]).collect();
        let z = g.constant(Tensor::new(vec![1, 2], z));
        let labels = [inputs.labels[j]];
        let lab = (model.objective == Objective::Ceb).then_some(&labels[..]);
        let d = model.vae.decode(&mut g, &b, z, lab, None).unwrap();
        let nll = reconstruction_nll(
            &mi,
            g.value(d.rho_hat.unwrap()).data(),
            g.value(d.i_hat.unwrap()).data(),
            model.config.sigma,
        )
        .unwrap();
        vae.push(nll + kl_to_prior(&mu_v, &lv_v));
    }
    (vae, mask, class)
}

#[test]
fn loss_equals_independently_summed_components() {
    let data = toy_data(6, 1);
    let labels = data.labels();
    for objective in [Objective::Ib, Objective::Ceb] {
        let model = perturbed(objective);
        let beta = 0.37;
        let inputs = toy_inputs(&data, &labels, beta, &toy_policy(), objective);
        let mut g = Graph::new();
        let b = model.store.bind_frozen(&mut g);
        let lg = build_loss(&mut g, &b, &model, &inputs).unwrap();
        let comp = components(&g, &lg, &labels);
        let (vae, mask, class) = independent_components(&model, &inputs, &data);
        let n = labels.len() as f64;
        let want: f64 = (0..labels.len()).map(|j| beta * vae[j] + class[j] - beta * mask[j]).sum::<f64>() / n;
        assert!((comp.total - want).abs() < 1e-9, "{objective:?}: {} vs {want}", comp.total);
        assert!((comp.vae - vae.iter().sum::<f64>() / n).abs() < 1e-9);
        assert!((comp.mask_nll - mask.iter().sum::<f64>() / n).abs() < 1e-9);
        assert!((comp.class_nll - class.iter().sum::<f64>() / n).abs() < 1e-9);
        let recombined = beta * comp.vae + comp.class_nll - beta * comp.mask_nll;
        assert!((comp.total - recombined).abs() < 1e-9);
    }
}

#[test]
fn zero_beta_leaves_only_cross_entropy() {
    let data = toy_data(4, 2);
    let labels = data.labels();
    let model = perturbed(Objective::Ib);
    let inputs = toy_inputs(&data, &labels, 0.0, &toy_policy(), Objective::Ib);
    let mut g = Graph::new();
    let b = model.store.bind_frozen(&mut g);
    let lg = build_loss(&mut g, &b, &model, &inputs).unwrap();
    let comp = components(&g, &lg, &labels);
    assert_eq!(comp.total, comp.class_nll);
    assert!(comp.vae > 0.0 && comp.mask_nll > 0.0);
}

#[test]
fn hard_masks_with_perfect_models_cancel_the_mask_terms() {
    // Equivalent check on the loss level: with an exact reconstruction model the mask part
    // of the VAE term equals the mask likelihood, leaving class_nll + beta * (Gaussian + KL).
    let rho = MaskProbability::new(2, 2, vec![0.2, 0.7, 0.5, 0.9]).unwrap();
    let m = Mask::new(2, 2, MaskKind::Boolean, vec![1.0, 0.0, 1.0, 1.0]).unwrap();
    let img = Image::new(2, 2, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let mi = apply_mask(&img, &m).unwrap();
    let rec = reconstruction_nll(&mi, rho.values(), mi.pixel_channel(), 0.5).unwrap();
    let nll = mask_negative_log_likelihood(&m, &rho).unwrap();
    assert!((rec - nll).abs() < 1e-12);
}

fn total_loss_gradient(objective: Objective) -> f64 {
    let data = toy_data(2, 4);
    let labels = data.labels();
    let model = perturbed(objective);
    let policy = if objective == Objective::CondIb { RandomizationPolicy::disabled() } else { toy_policy() };
    let inputs = toy_inputs(&data, &labels, 0.6, &policy, objective);
    let params: Vec<Tensor> = model.store.iter().map(|(_, t)| t.clone()).collect();
    let report = check(&params, 1e-6, |g, v| {
        let b = Bound::from_vars(v.to_vec());
        build_loss(g, &b, &model, &inputs).unwrap().loss
    });
    report.max_rel_error
}

#[test]
fn total_loss_gradients_match_differences() {
    for objective in [Objective::Ib, Objective::Ceb, Objective::CondIb] {
        let err = total_loss_gradient(objective);
        assert!(err <= 1e-3, "{objective:?}: {err}");
    }
}

fn parameter_gradients(model: &IbModel, inputs: &LossInputs, vae_only: bool) -> Vec<Tensor> {
    let mut g = Graph::new();
    let b = model.store.bind(&mut g);
    let lg = build_loss(&mut g, &b, model, inputs).unwrap();
    let out = if vae_only { g.mean(lg.vae) } else { lg.loss };
    let grads = g.backward(out);
    b.gradients(&grads, &model.store)
}

#[test]
fn gate_blocks_only_the_vae_path_into_the_mask_network() {
    let data = toy_data(4, 6);
    let labels = data.labels();
    let model = perturbed(Objective::Ib);
    let mut inputs = toy_inputs(&data, &labels, 0.8, &toy_policy(), Objective::Ib);
    let open = parameter_gradients(&model, &inputs, false);
    let open_vae = parameter_gradients(&model, &inputs, true);
    inputs.gate = true;
    let gated = parameter_gradients(&model, &inputs, false);
    let gated_vae = parameter_gradients(&model, &inputs, true);
    let mut mask_changed = false;
    for (k, (name, _)) in model.store.iter().enumerate() {
        if model.is_mask_param(name) {
            assert!(gated_vae[k].data().iter().all(|&v| v == 0.0), "{name}");
            assert!(open_vae[k].data().iter().any(|&v| v != 0.0), "{name}");
            mask_changed |= gated[k].max_abs_diff(&open[k]) > 1e-9;
        } else {
            assert!(gated[k].max_abs_diff(&open[k]) < 1e-12, "{name}");
        }
    }
    assert!(mask_changed);
}

#[test]
fn deterministic_cond_mask_offsets_entropy_terms() {
    // A saturated mask network gives rho at the clamp for every pixel: the mask likelihood
    // is then ~0 and so is what a well-fit mask VAE could reach.
    let data = toy_data(4, 8);
    let labels = data.labels();
    let mut model = perturbed(Objective::CondIb);
    for id in model.store.ids_with_prefix("mask.").collect::<Vec<_>>() {
        let name = model.store.name(id).to_string();
        let t = model.store.get_mut(id);
        let fill = if name.ends_with("bias") { 40.0 } else { 0.0 };
        t.data_mut().iter_mut().for_each(|v| *v = fill);
    }
    let inputs = toy_inputs(&data, &labels, 0.5, &RandomizationPolicy::disabled(), Objective::CondIb);
    let mut g = Graph::new();
    let b = model.store.bind_frozen(&mut g);
    let lg = build_loss(&mut g, &b, &model, &inputs).unwrap();
    let comp = components(&g, &lg, &labels);
    assert!(comp.mask_nll < 0.1, "{}", comp.mask_nll);
    let want = 0.5 * comp.vae + comp.vae_mask.unwrap() - comp.mask_nll + comp.vae_image.unwrap() + comp.class_nll;
    assert!((comp.total - want).abs() < 1e-9);
}

fn smoke_config(objective: Objective, steps: usize) -> TrainConfig {
    TrainConfig {
        objective,
        model: toy_config(),
        beta0: 1e-3,
        beta_mode: BetaMode::Adaptive,
        vae_target: VaeTarget::point(8.0),
        beta_eta: 0.01,
        beta_error_clip: 1.0,
        beta_min: 1e-6,
        beta_max: 1e3,
        loss_ema: 0.9,
        temperature: 0.5,
        randomization: if objective == Objective::CondIb { RandomizationPolicy::disabled() } else { toy_policy() },
        steps,
        batch_size: 8,
        learning_rate: 1e-3,
        seed: 11,
        classifier_warmup: 0,
        eval_every: 5,
        eval_samples: 16,
        label_proxy: LabelProxy::GroundTruth,
    }
}

#[test]
fn short_runs_log_every_step_and_repeat_exactly() {
    let data = toy_data(32, 9);
    for objective in [Objective::Ib, Objective::Ceb, Objective::CondIb] {
        let config = smoke_config(objective, 10);
        let a = train(&config, &data, Some(&data)).unwrap();
        assert_eq!(a.log.step_records().count(), 10);
        assert_eq!(a.log.records().len(), 12);
        for r in a.log.step_records() {
            if let MetricRecord::Step { beta, .. } = r {
                assert!((1e-6..=1e3).contains(beta));
            }
        }
        let b = train(&config, &data, Some(&data)).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.to_jsonl().unwrap(), b.log.to_jsonl().unwrap());
        let back = MetricLog::from_jsonl(&a.log.to_jsonl().unwrap()).unwrap();
        assert_eq!(back.records().len(), a.log.records().len());
        let mut other = config.clone();
        other.seed = 12;
        assert_ne!(train(&other, &data, None).unwrap().log.records()[0], a.log.records()[0]);
    }
}

#[test]
fn runs_persist_checkpoint_and_metrics() {
    let data = toy_data(16, 10);
    let run = train(&smoke_config(Objective::Ib, 3), &data, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run.save(dir.path()).unwrap();
    let (model, info) = crate::model::load_checkpoint(&dir.path().join("checkpoint")).unwrap();
    assert_eq!(info["steps"], "3");
    for ((_, a), (_, b)) in model.store.iter().zip(run.model.store.iter()) {
        assert_eq!(a, b);
    }
    let log = MetricLog::from_jsonl(&std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap()).unwrap();
    assert_eq!(log.records().len(), 3);
}

#[test]
fn non_finite_losses_abort_the_run() {
    let data = toy_data(8, 12);
    let mut config = smoke_config(Objective::Ib, 2);
    config.model.mask_initial_logit = f64::NAN;
    let err = train(&config, &data, None).unwrap_err();
    assert!(matches!(err, Error::NonFinite { step: 0, .. }), "{err}");
}

#[test]
fn invalid_configs_are_rejected() {
    let data = toy_data(8, 13);
    let mut c = smoke_config(Objective::Ib, 1);
    c.beta0 = 0.0;
    assert!(matches!(train(&c, &data, None), Err(Error::Config(_))));
    let mut c = smoke_config(Objective::Ib, 1);
    c.randomization.min_side = 9;
    assert!(matches!(train(&c, &data, None), Err(Error::Config(_))));
    let mut c = smoke_config(Objective::Ib, 1);
    c.model.categories = 3;
    assert!(matches!(train(&c, &data, None), Err(Error::Config(_))));
}

#[test]
fn ground_truth_proxy_is_the_label() {
    let data = toy_data(8, 14);
    let config = smoke_config(Objective::CondIb, 1);
    assert_eq!(proxy_labels(&config, &data).unwrap(), data.labels());
}

#[test]
fn pretrained_proxy_is_deterministic() {
    let data = toy_data(16, 15);
    let run = train(&smoke_config(Objective::Ib, 2), &data, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run.save(dir.path()).unwrap();
    let mut config = smoke_config(Objective::CondIb, 1);
    config.label_proxy = LabelProxy::Pretrained(dir.path().join("checkpoint"));
    let a = proxy_labels(&config, &data).unwrap();
    assert_eq!(a, proxy_labels(&config, &data).unwrap());
    assert_eq!(a, crate::metrics::unmasked_predictions(&run.model, &data).unwrap());
    assert!(a.iter().all(|&c| c < 2));
}

#[test]
fn proxy_agreement_counts_matching_labels() {
    assert_eq!(proxy_agreement(&[0, 1, 1, 0], &[0, 1, 0, 0]), 0.75);
    assert_eq!(proxy_agreement(&[2, 2], &[2, 2]), 1.0);
}
