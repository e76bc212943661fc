use super::*;
use proptest::prelude::*;
use rand::Rng;

fn shape(side: usize, categories: usize, deterministic_labels: bool, growth: bool) -> WorldShape {
    WorldShape {
        side,
        categories,
        deterministic_labels,
        growth,
    }
}

fn one_pixel(rho: f64) -> DiscreteWorld {
    DiscreteWorld {
        side: 1,
        images: vec![(0, 0.5), (1, 0.5)],
        categories: 2,
        labels: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        rho: vec![vec![rho], vec![rho]],
        growth: None,
    }
}

#[test]
fn one_pixel_world_enumerates_four_equal_cells() {
    let j = enumerate_joint(&one_pixel(0.5)).unwrap();
    let im = j.marginal(&[Image, Mask]);
    assert_eq!(im.len(), 4);
    assert!(im.values().all(|&p| (p - 0.25).abs() < 1e-15));
    assert!((j.total() - 1.0).abs() < 1e-12);
}

#[test]
fn cell_count_is_combinatorial() {
    for (side, k, growth) in [(1, 2, false), (2, 3, false), (2, 2, true), (3, 2, false)] {
        let w = random_world(shape(side, k, false, growth), 9);
        let j = enumerate_joint(&w).unwrap();
        let masks = 1usize << (side * side);
        let expected = w.images.len() * k * masks * if growth { masks } else { 1 };
        assert_eq!(j.cells.len(), expected);
        assert_eq!(w.cell_count(), expected);
        assert!((j.total() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn oversized_worlds_are_refused_with_a_size() {
    let mut w = random_world(shape(3, 2, false, true), 1);
    let codes: Vec<u32> = (0..512).collect();
    let p = 1.0 / 512.0;
    w.images = codes.iter().map(|&c| (c, p)).collect();
    w.labels = vec![vec![0.5, 0.5]; 512];
    w.rho = vec![vec![0.5; 9]; 512];
    match enumerate_joint(&w) {
        Err(Error::TooLarge { cells, limit }) => {
            assert_eq!(cells, 512 * 2 * 512 * 512);
            assert_eq!(limit, CELL_LIMIT as u128);
        }
        other => panic!("expected refusal, got {other:?}"),
    }
    let mut big = w.clone();
    big.side = 4;
    assert!(matches!(enumerate_joint(&big), Err(Error::Config(_))));
}

#[test]
fn invalid_worlds_are_rejected() {
    let mut w = one_pixel(0.5);
    w.images[0].1 = 0.6;
    assert!(enumerate_joint(&w).is_err());
    let mut w = one_pixel(0.5);
    w.rho[0][0] = 1.5;
    assert!(enumerate_joint(&w).is_err());
    let mut w = one_pixel(0.5);
    w.labels[1] = vec![0.3, 0.3];
    assert!(enumerate_joint(&w).is_err());
}

#[test]
fn textbook_information_values() {
    // Fully visible masks: the masked image is the image, which equals the label.
    let j = enumerate_joint(&one_pixel(1.0)).unwrap();
    assert!((j.mutual_information(&[Image], &[Label]) - 2f64.ln()).abs() < 1e-12);
    assert!((j.mutual_information(&[Masked], &[Label]) - 2f64.ln()).abs() < 1e-12);
    // Mask drawn independently of the image.
    let j = enumerate_joint(&one_pixel(0.3)).unwrap();
    assert!(j.mutual_information(&[Mask], &[Image]).abs() < 1e-12);
    assert!(j.mutual_information(&[Mask], &[Label]).abs() < 1e-12);
}

#[test]
fn beta_prime_one_relation_on_a_two_by_two_world() {
    let w = random_world(shape(2, 2, false, false), 3);
    let mut rng = substream(3, &[1]);
    let other = w.rho.iter().map(|r| random_rho(r.len(), &mut rng)).collect();
    assert!(verify_ib_ceb_equivalence(&w, other, 1.0).unwrap() < TOLERANCE);
    assert!(verify_ib_ceb_equivalence(&w, w.rho.clone(), 1.0).unwrap() == 0.0);
    let grown = random_world(shape(2, 2, false, true), 3);
    assert!(matches!(
        verify_ib_ceb_equivalence(&grown, grown.rho.clone(), 1.0),
        Err(Error::Refused(_))
    ));
}

#[test]
fn equivalence_over_twenty_policy_pairs() {
    let w = random_world(shape(2, 3, false, false), 11);
    let mut rng = substream(11, &[2]);
    for _ in 0..20 {
        let other = w.rho.iter().map(|r| random_rho(r.len(), &mut rng)).collect();
        let beta_prime = rng.gen_range(0.01..10.0);
        assert!(verify_ib_ceb_equivalence(&w, other, beta_prime).unwrap() < TOLERANCE);
    }
}

#[test]
fn decomposition_with_constant_and_functional_labels() {
    let mut w = random_world(shape(2, 2, true, false), 4);
    for row in &mut w.labels {
        *row = vec![1.0, 0.0];
    }
    let j = enumerate_joint(&w).unwrap();
    assert!(j.conditional_mi(&[Label], &[Masked], &[Mask]).abs() < 1e-12);
    assert!(verify_appendix_b(&w).unwrap() < TOLERANCE);
    for seed in 0..20 {
        let w = random_world(shape(2, 3, true, false), seed);
        assert!(verify_appendix_b(&w).unwrap() < TOLERANCE);
    }
}

#[test]
fn decomposition_needs_labels_determined_by_the_image() {
    // With label noise the identity picks up H(C'|I) and fails: the check has teeth.
    let w = random_world(shape(2, 3, false, false), 5);
    assert!(verify_appendix_b(&w).unwrap() > 1e-3);
}

#[test]
fn conditional_objective_terms_match_and_a_flipped_sign_is_caught() {
    for seed in 0..10 {
        let w = random_world(shape(2, 2, true, false), seed);
        assert!(verify_cond_objective(&w, 0.7, &COND_TERMS).unwrap() < TOLERANCE);
        for flip in 0..COND_TERMS.len() {
            let mut terms = COND_TERMS;
            terms[flip].1 = -terms[flip].1;
            assert!(
                verify_cond_objective(&w, 0.7, &terms).unwrap() > 1e-6,
                "flipping {:?} went unnoticed",
                terms[flip].0
            );
        }
    }
    let mut terms = COND_TERMS;
    terms[2].1 = 1.0;
    let records = run_suite_with_terms(0, 3, &terms).unwrap();
    assert!(!suite_passes(&records));
    assert!(records
        .iter()
        .filter(|r| !r.pass)
        .all(|r| r.identity == "conditional_objective_terms"));
}

#[test]
fn closed_form_mask_entropy_matches_enumeration() {
    for seed in 0..20 {
        let side = 1 + (seed % 3) as usize;
        let w = random_world(shape(side, 2, false, false), seed);
        assert!(verify_mask_entropy(&w).unwrap() < 1e-12);
    }
}

#[test]
fn chain_rule_on_random_worlds() {
    for seed in 0..20 {
        let w = random_world(shape(2, 2, false, seed % 2 == 0), seed);
        assert!(verify_chain_rule(&w).unwrap() < 1e-12);
    }
}

#[test]
fn variational_bounds() {
    let w = random_world(shape(2, 3, false, true), 6);
    let j = enumerate_joint(&w).unwrap();
    let exact = exact_models(&j, 3);
    let (g, h) = verify_variational_bound(&j, &exact);
    assert!(g.abs() < 1e-12 && h.abs() < 1e-12);

    let mut perturbed = exact.clone();
    let (&key, _) = perturbed.decoder.iter().next().unwrap();
    let other = *perturbed.decoder.keys().find(|&&k| k != key).unwrap();
    let d = perturbed.decoder[&key] * 0.5;
    *perturbed.decoder.get_mut(&key).unwrap() -= d;
    *perturbed.decoder.get_mut(&other).unwrap() += d;
    assert!(verify_variational_bound(&j, &perturbed).0 > 1e-6);

    let mut rng = substream(6, &[3]);
    for _ in 0..20 {
        let (g, h) = verify_variational_bound(&j, &random_models(&j, 3, &mut rng));
        assert!(g > -TOLERANCE && h > -TOLERANCE);
    }
}

#[test]
fn growth_probe_extremes() {
    let mut w = random_world(shape(2, 2, false, true), 7);
    w.growth = Some(GrowthKernel { reveal: vec![0.0; 4] });
    assert!(probe_growth_monotonicity(&w).unwrap().abs() < 1e-12);
    w.growth = Some(GrowthKernel { reveal: vec![1.0; 4] });
    let j = enumerate_joint(&w).unwrap();
    assert!(
        (j.mutual_information(&[GrownMasked], &[Label]) - j.mutual_information(&[Image], &[Label])).abs() < 1e-12
    );
    assert!(probe_growth_monotonicity(&w).unwrap() > -1e-12);
    assert!(probe_growth_monotonicity(&w.without_growth()).is_err());
}

#[test]
fn growth_probe_sweep_is_tabulated() {
    let mut outcomes = Vec::new();
    for seed in 0..50 {
        let w = random_world(shape(2, 2, false, true), seed);
        outcomes.push(probe_growth_monotonicity(&w).unwrap());
    }
    assert_eq!(outcomes.len(), 50);
    assert!(outcomes.iter().all(|v| v.is_finite()));
}

#[test]
fn suite_passes_quickly_and_serializes() {
    let records = run_suite(100, 20).unwrap();
    let failing: Vec<_> = records.iter().filter(|r| !r.pass).collect();
    assert!(failing.is_empty(), "{failing:?}");
    let identities: std::collections::BTreeSet<_> = records.iter().map(|r| r.identity.as_str()).collect();
    assert_eq!(identities.len(), 8);
    let text = records_to_jsonl(&records).unwrap();
    let back: Vec<OracleRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(back, records);
    assert_eq!(run_suite(100, 20).unwrap(), records);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn information_is_never_negative(seed in 0u64..1_000_000, growth in any::<bool>(), k in 2usize..4) {
        let w = random_world(shape(2, k, false, growth), seed);
        let j = enumerate_joint(&w).unwrap();
        prop_assert!(check_non_negative(&j) < 1e-12);
        prop_assert!((j.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn chain_rule_for_arbitrary_selections(seed in 0u64..1_000_000) {
        let w = random_world(shape(2, 3, false, true), seed);
        let j = enumerate_joint(&w).unwrap();
        let lhs = j.mutual_information(&[Label], &[Image, GrownMask]);
        let rhs = j.mutual_information(&[Label], &[GrownMask]) + j.conditional_mi(&[Label], &[Image], &[GrownMask]);
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }
}
