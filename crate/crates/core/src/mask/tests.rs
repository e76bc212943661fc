use super::*;
use crate::gradcheck::check;
use crate::recipes::MNIST_MASK;
use crate::rng::substream;
use proptest::prelude::*;
use rand::Rng;

fn probs(values: &[f64], h: usize, w: usize) -> MaskProbability {
    MaskProbability::new(h, w, values.to_vec()).unwrap()
}

#[test]
fn relaxed_samples_threshold_to_bernoulli() {
    let rho = probs(&[0.05, 0.3, 0.5, 0.9], 2, 2);
    let mut rng = substream(3, &[]);
    let trials = 20_000;
    let mut counts = [0usize; 4];
    for _ in 0..trials {
        let m = sample_mask_relaxed(&rho, DEFAULT_TEMPERATURE, &mut rng).unwrap();
        assert!(m.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        for (c, v) in counts.iter_mut().zip(m.threshold(0.5).values()) {
            *c += *v as usize;
        }
    }
    for (c, &p) in counts.iter().zip(rho.values()) {
        let freq = *c as f64 / trials as f64;
        let sd = (p * (1.0 - p) / trials as f64).sqrt();
        assert!((freq - p).abs() < 3.0 * sd + 1e-12, "freq {freq} vs {p}");
    }
}

#[test]
fn hard_samples_match_probabilities() {
    let rho = probs(&[0.2, 0.7], 1, 2);
    let mut rng = substream(4, &[]);
    let trials = 20_000;
    let mut on = [0usize; 2];
    for _ in 0..trials {
        let m = sample_mask_hard(&rho, &mut rng);
        assert_eq!(m.kind(), MaskKind::Boolean);
        on[0] += m.values()[0] as usize;
        on[1] += m.values()[1] as usize;
    }
    for (c, p) in on.iter().zip([0.2, 0.7]) {
        let freq = *c as f64 / trials as f64;
        assert!((freq - p).abs() < 3.0 * (p * (1.0 - p) / trials as f64).sqrt());
    }
}

#[test]
fn low_temperature_sharpens_samples() {
    let rho = MaskProbability::uniform(4, 4, 0.5);
    let mut rng = substream(5, &[]);
    let spread = |tau: f64, rng: &mut crate::rng::Stream| {
        let m = sample_mask_relaxed(&rho, tau, rng).unwrap();
        m.values().iter().map(|v| v.min(1.0 - v)).sum::<f64>()
    };
    let sharp: f64 = (0..200).map(|_| spread(0.05, &mut rng)).sum();
    let soft: f64 = (0..200).map(|_| spread(2.0, &mut rng)).sum();
    assert!(sharp < 0.2 * soft);
    assert!(sample_mask_relaxed(&rho, 0.0, &mut rng).is_err());
}

#[test]
fn relaxed_sample_gradient_matches_differences() {
    let rho = Tensor::new(vec![1, 1, 2, 2], vec![0.2, 0.45, 0.6, 0.85]);
    let noise = Tensor::new(vec![4], vec![0.3, -0.7, 1.1, -0.2]);
    let weights = Tensor::new(vec![1, 1, 2, 2], vec![1.0, -2.0, 0.5, 3.0]);
    let r = check(&[rho], 1e-6, |g, v| {
        let m = relaxed_sample_graph(g, v[0], noise.clone(), DEFAULT_TEMPERATURE);
        let w = g.constant(weights.clone());
        let y = g.mul(m, w);
        g.sum(y)
    });
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn relaxed_graph_agrees_with_sampler() {
    let rho = probs(&[0.1, 0.5, 0.8, 0.99], 2, 2);
    let mut a = substream(9, &[]);
    let mut b = substream(9, &[]);
    let m = sample_mask_relaxed(&rho, 0.7, &mut a).unwrap();
    let noise = gumbel_difference(4, &mut b);
    let mut g = Graph::new();
    let r = g.constant(Tensor::new(vec![1, 1, 2, 2], rho.values().to_vec()));
    let mv = relaxed_sample_graph(&mut g, r, Tensor::new(vec![4], noise), 0.7);
    for (x, y) in g.value(mv).data().iter().zip(m.values()) {
        assert!((x - y).abs() < 1e-15);
    }
}

#[test]
fn expected_nll_equals_entropy() {
    let rho = probs(&[0.1, 0.4, 0.5, 0.95, 0.7, 0.2], 2, 3);
    let h = mask_entropy_continuous(&rho);
    let mut rng = substream(6, &[]);
    let n = 20_000;
    let draws: Vec<f64> = (0..n)
        .map(|_| mask_negative_log_likelihood(&sample_mask_hard(&rho, &mut rng), &rho).unwrap())
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((mean - h).abs() < 3.0 * (var / n as f64).sqrt(), "{mean} vs {h}");
}

#[test]
fn entropy_peaks_at_one_half() {
    let half = MaskProbability::uniform(3, 3, 0.5);
    assert!((mask_entropy_continuous(&half) - 9.0 * 2f64.ln()).abs() < 1e-12);
    let sure = MaskProbability::uniform(3, 3, 0.0);
    assert!(mask_entropy_continuous(&sure) < 1e-3);
}

#[test]
fn entropy_graph_and_gradient() {
    let rho = Tensor::new(vec![2, 1, 1, 2], vec![0.2, 0.6, 0.5, 0.9]);
    let mut g = Graph::new();
    let r = g.constant(rho.clone());
    let h = mask_entropy_graph(&mut g, r);
    let want0 = mask_entropy_continuous(&probs(&[0.2, 0.6], 1, 2));
    assert!((g.value(h).data()[0] - want0).abs() < 1e-12);
    let rep = check(&[rho], 1e-6, |g, v| {
        let h = mask_entropy_graph(g, v[0]);
        g.sum(h)
    });
    assert!(rep.max_rel_error < 1e-6);
}

#[test]
fn nll_rejects_mismatched_shapes() {
    let m = Mask::filled(2, 2, true);
    assert!(mask_negative_log_likelihood(&m, &MaskProbability::uniform(3, 3, 0.5)).is_err());
}

#[test]
fn seeded_rectangle_on_empty_mask() {
    let m = Mask::filled(8, 8, false);
    let rect = Rect::new(2, 2, 3, 3);
    let grown = grow_mask(&m, &[rect]);
    for y in 0..8 {
        for x in 0..8 {
            let inside = (2..=4).contains(&y) && (2..=4).contains(&x);
            assert_eq!(grown.get(y, x), if inside { 1.0 } else { 0.0 });
        }
    }
    let policy = RandomizationPolicy::default();
    let mut rng = substream(1, &[]);
    let (grown, rects) = randomize_mask(&m, &policy, &mut rng).unwrap();
    assert_eq!(rects.len(), 1);
    assert_eq!(grown.values(), rectangles_indicator(&rects, 8, 8).as_slice());
}

#[test]
fn oversize_policies_are_rejected() {
    let mut rng = substream(1, &[]);
    let policy = RandomizationPolicy {
        max_side: Some(20),
        ..RandomizationPolicy::default()
    };
    assert!(sample_rectangles(&policy, 16, 16, &mut rng).is_err());
    let tiny = RandomizationPolicy::default();
    assert!(sample_rectangles(&tiny, 6, 6, &mut rng).is_err());
    assert!(sample_rectangles(&RandomizationPolicy::disabled(), 6, 6, &mut rng)
        .unwrap()
        .is_empty());
}

#[test]
fn randomization_only_adds_visibility() {
    let mut rng = substream(2, &[]);
    let policy = RandomizationPolicy {
        rect_count: 2,
        ..RandomizationPolicy::default()
    };
    for _ in 0..1000 {
        let vals: Vec<f64> = (0..144).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect();
        let m = Mask::new(12, 12, MaskKind::Boolean, vals).unwrap();
        let (g, rects) = randomize_mask(&m, &policy, &mut rng).unwrap();
        let r = rectangles_indicator(&rects, 12, 12);
        for i in 0..144 {
            assert!(g.values()[i] >= m.values()[i]);
            if r[i] == 1.0 {
                assert_eq!(g.values()[i], 1.0);
            } else {
                assert_eq!(g.values()[i], m.values()[i]);
            }
        }
        for rect in &rects {
            assert!(rect.fits(12, 12) && (4..=6).contains(&rect.height) && (4..=6).contains(&rect.width));
        }
    }
}

#[test]
fn randomize_graph_matches_grow_mask() {
    let m = Mask::new(2, 2, MaskKind::Relaxed, vec![0.2, 0.9, 0.0, 0.5]).unwrap();
    let rect = Rect::new(0, 1, 2, 1);
    let want = grow_mask(&m, &[rect]);
    let mut g = Graph::new();
    let mv = g.constant(Tensor::new(vec![1, 1, 2, 2], m.values().to_vec()));
    let out = randomize_graph(&mut g, mv, Tensor::new(vec![4], rect.indicator(2, 2)));
    assert_eq!(g.value(out).data(), want.values());
}

fn mnist_mask_model(store: &mut ParamStore) -> MaskModel {
    let mut rng = substream(11, &[]);
    MaskModel::build(MNIST_MASK, [28, 28, 1], 0.0, store, "mask", &mut rng).unwrap()
}

#[test]
fn mask_model_emits_clamped_probabilities() {
    let mut store = ParamStore::new();
    let model = mnist_mask_model(&mut store);
    let img = Image::zeros(28, 28, 1);
    let rho = model.mask_probabilities(&store, &img).unwrap();
    assert_eq!(rho.values().len(), 784);
    assert!(rho
        .values()
        .iter()
        .all(|&p| (RHO_EPSILON..=1.0 - RHO_EPSILON).contains(&p)));
    let mut bad = ParamStore::new();
    let mut rng = substream(1, &[]);
    assert!(MaskModel::build("C(1,1,2)", [28, 28, 1], 0.0, &mut bad, "m", &mut rng).is_err());
}

/// Largest Chebyshev distance at which a single-pixel change moves the mask output.
fn influence_radius(model: &MaskModel, store: &ParamStore, y0: usize, x0: usize) -> usize {
    let mut rng = substream(12, &[]);
    let mut img = Image::zeros(28, 28, 1);
    for y in 0..28 {
        for x in 0..28 {
            img.set(y, x, 0, rng.gen::<f32>());
        }
    }
    let base = model.mask_probabilities(store, &img).unwrap();
    img.set(y0, x0, 0, 1.0 - img.get(y0, x0, 0));
    let moved = model.mask_probabilities(store, &img).unwrap();
    let mut radius = 0;
    for y in 0..28 {
        for x in 0..28 {
            if (base.values()[y * 28 + x] - moved.values()[y * 28 + x]).abs() > 0.0 {
                radius = radius.max(y.abs_diff(y0).max(x.abs_diff(x0)));
            }
        }
    }
    radius
}

#[test]
fn mnist_mask_has_a_local_receptive_field() {
    let mut store = ParamStore::new();
    let model = mnist_mask_model(&mut store);
    for (y, x) in [(0, 0), (13, 13), (27, 5)] {
        let r = influence_radius(&model, &store, y, x);
        assert!(r < 15, "pixel ({y},{x}) reaches {r} pixels away");
    }
}

proptest! {
    #[test]
    fn grown_masks_stay_in_range(vals in prop::collection::vec(0.0f64..=1.0, 36), top in 0usize..3, left in 0usize..3) {
        let m = Mask::new(6, 6, MaskKind::Relaxed, vals).unwrap();
        let g = grow_mask(&m, &[Rect::new(top, left, 3, 4)]);
        prop_assert!(g.values().iter().zip(m.values()).all(|(a, b)| a >= b && *a <= 1.0));
    }
}
