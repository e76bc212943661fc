use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::check;
use crate::recipes::{self, CLASSIFIER_PLAN, MASK_PLAN, VAE_PLAN};

fn conv(kernel: usize, stride: usize, out_channels: usize, padding: Padding) -> LayerKind {
    LayerKind::Conv {
        kernel,
        stride,
        out_channels,
        padding,
    }
}

fn map(h: usize, w: usize, c: usize) -> FeatureShape {
    FeatureShape::image([h, w, c])
}

#[test]
fn parses_a_simple_chain() {
    let net = parse_architecture("C(3,2,8) -> Avg -> FC(2)", &CLASSIFIER_PLAN).unwrap();
    let kinds: Vec<LayerKind> = net.layers.iter().map(|l| l.kind).collect();
    assert_eq!(
        kinds,
        vec![
            conv(3, 2, 8, Padding::Valid),
            LayerKind::AvgPool,
            LayerKind::FullyConnected { units: 2 }
        ]
    );
    assert_eq!(net.layers[0].nonlinearity, Nonlinearity::Relu6);
    assert_eq!(net.layers[1].nonlinearity, Nonlinearity::None);
}

#[test]
fn empty_string_is_the_identity_network() {
    let net = parse_architecture("", &[]).unwrap();
    assert!(net.layers.is_empty());
    let net = infer_shapes(net, map(4, 4, 1)).unwrap();
    assert_eq!(net.output_shape(), Some(map(4, 4, 1)));
}

#[test]
fn published_classifier_has_eight_layers_ending_in_two_logits() {
    let net = parse_architecture(recipes::MNIST_CLASSIFIER, &CLASSIFIER_PLAN).unwrap();
    assert_eq!(net.layers.len(), 8);
    assert_eq!(net.layers[7].kind, LayerKind::FullyConnected { units: 2 });
    let net = infer_shapes(net, map(28, 28, 2)).unwrap();
    assert_eq!(net.output_shape(), Some(FeatureShape::Vector(2)));
}

#[test]
fn segments_take_their_own_nonlinearity() {
    let net = parse_architecture(recipes::MNIST_MASK, &MASK_PLAN).unwrap();
    assert_eq!(net.layers[0].nonlinearity, Nonlinearity::Relu6);
    assert_eq!(net.layers[0].segment, 0);
    let last = net.layers.last().unwrap();
    assert_eq!((last.segment, last.nonlinearity), (1, Nonlinearity::LeakyRelu));
    let linear = net.with_linear_output();
    assert_eq!(linear.layers.last().unwrap().nonlinearity, Nonlinearity::None);
}

#[test]
fn repairs_the_missing_comma_typo() {
    let net = parse_architecture(recipes::CIFAR_MASK, &MASK_PLAN).unwrap();
    let typo = net.layers[net.layers.len() - 2].kind;
    assert_eq!(typo, conv(3, 1, 8, Padding::Same));
}

#[test]
fn rejects_unknown_tokens_and_wrong_arity() {
    match parse_architecture("C(3,2,4) -> Foo(1)", &[]) {
        Err(Error::Parse { position, .. }) => assert_eq!(position, 1),
        other => panic!("{other:?}"),
    }
    match parse_architecture("C(3,2)", &[]) {
        Err(Error::Parse { position, message }) => {
            assert_eq!(position, 0);
            assert!(message.contains("3 argument"), "{message}");
        }
        other => panic!("{other:?}"),
    }
    assert!(parse_architecture("C(3,2,4) -> -> Avg", &[]).is_err());
    assert!(parse_architecture("C(0,1,4)", &[]).is_err());
    assert!(parse_architecture("Shape(7)", &[]).is_err());
}

#[test]
fn conv_shape_rules() {
    let valid = parse_architecture("C(3,2,4)", &[]).unwrap();
    let out = infer_shapes(valid, map(28, 28, 1)).unwrap().output_shape();
    assert_eq!(out, Some(map(13, 13, 4)));
    let same = parse_architecture("C_s(3,2,4)", &[]).unwrap();
    let out = infer_shapes(same, map(28, 28, 1)).unwrap().output_shape();
    assert_eq!(out, Some(map(14, 14, 4)));
    let tconv = parse_architecture("T_s(3,2,4) -> T(3,2,2)", &[]).unwrap();
    let shaped = infer_shapes(tconv, map(7, 7, 1)).unwrap();
    assert_eq!(shaped.layer_shapes(), &[map(14, 14, 4), map(29, 29, 2)]);
    let avg = parse_architecture("Avg", &[]).unwrap();
    let out = infer_shapes(avg, map(7, 7, 16)).unwrap().output_shape();
    assert_eq!(out, Some(FeatureShape::Vector(16)));
}

#[test]
fn shape_errors_name_the_layer() {
    let net = parse_architecture("C(3,2,4) -> C(3,2,4) -> C(5,1,4)", &[]).unwrap();
    let err = infer_shapes(net, map(10, 10, 1)).unwrap_err().to_string();
    assert!(err.contains("layer 2"), "{err}");
    let net = parse_architecture("FC(10) -> Shape(3x3)", &[]).unwrap();
    assert!(infer_shapes(net, map(2, 2, 1)).is_err());
    let net = parse_architecture("Avg -> C(1,1,1)", &[]).unwrap();
    assert!(infer_shapes(net, map(2, 2, 1)).is_err());
}

#[test]
fn published_networks_have_expected_shapes() {
    let cases = [
        (recipes::MNIST_MASK, map(28, 28, 1), map(28, 28, 1)),
        (recipes::CIFAR_MASK, map(32, 32, 3), map(32, 32, 1)),
        (recipes::MULTI_MASK, map(56, 56, 1), map(56, 56, 1)),
        (recipes::SVHN_MASK, map(128, 128, 3), map(128, 128, 1)),
        (recipes::ANCHORS_MASK, map(40, 40, 1), map(40, 40, 1)),
        (recipes::MNIST_DECODER, FeatureShape::Vector(24), map(28, 28, 2)),
        (recipes::CIFAR_DECODER, FeatureShape::Vector(64), map(32, 32, 4)),
        (recipes::MULTI_DECODER, FeatureShape::Vector(24), map(56, 56, 2)),
        (recipes::SVHN_DECODER, FeatureShape::Vector(64), map(128, 128, 4)),
        (recipes::ANCHORS_DECODER, FeatureShape::Vector(24), map(40, 40, 2)),
        (recipes::SVHN_CLASSIFIER, map(128, 128, 4), FeatureShape::Vector(4)),
        (recipes::MULTI_CLASSIFIER, map(56, 56, 2), FeatureShape::Vector(10)),
        (recipes::CIFAR_CLASSIFIER, map(32, 32, 4), FeatureShape::Vector(2)),
    ];
    for (s, input, want) in cases {
        let net = infer_shapes(parse_architecture(s, &MASK_PLAN).unwrap(), input).unwrap();
        assert_eq!(net.output_shape(), Some(want), "{s}");
    }
}

#[test]
fn mask_network_builds_and_maps_image_to_single_channel() {
    let spec = infer_shapes(
        parse_architecture(recipes::MNIST_MASK, &MASK_PLAN).unwrap().with_linear_output(),
        map(28, 28, 1),
    )
    .unwrap();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = build_network(&spec, &mut store, "mask", BuildOptions::default(), &mut rng).unwrap();
    let mut g = Graph::new();
    let bound = store.bind_frozen(&mut g);
    let x = g.constant(Tensor::full(vec![3, 1, 28, 28], 0.5));
    let y = net.forward(&mut g, &bound, x);
    assert_eq!(g.shape(y), &[3, 1, 28, 28]);
}

#[test]
fn zero_final_layer_gives_constant_output() {
    let spec = infer_shapes(
        parse_architecture(recipes::MNIST_CLASSIFIER, &CLASSIFIER_PLAN).unwrap().with_linear_output(),
        map(28, 28, 2),
    )
    .unwrap();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let options = BuildOptions {
        zero_final: true,
        final_bias: 0.25,
    };
    let net = build_network(&spec, &mut store, "cls", options, &mut rng).unwrap();
    let mut g = Graph::new();
    let bound = store.bind_frozen(&mut g);
    let x = g.constant(Tensor::new(
        vec![2, 2, 28, 28],
        (0..2 * 2 * 28 * 28).map(|i| (i as f64 * 0.01).sin().abs()).collect(),
    ));
    let y = net.forward(&mut g, &bound, x);
    assert!(g.value(y).data().iter().all(|&v| v == 0.25));
}

#[test]
fn seeded_builds_are_bitwise_identical() {
    let spec = infer_shapes(
        parse_architecture(recipes::MNIST_DECODER, &VAE_PLAN).unwrap(),
        FeatureShape::Vector(24),
    )
    .unwrap();
    let build = |seed| {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        build_network(&spec, &mut store, "dec", BuildOptions::default(), &mut rng).unwrap();
        store
    };
    assert_eq!(build(9), build(9));
    assert_ne!(build(9), build(10));
}

#[test]
fn built_network_gradients_match_finite_differences() {
    let s = "[C_s(3,1,3) -> C(3,2,4) -> Pad(1)] -> [Resize(4) -> T_s(3,2,2) -> C(1,1,3) -> Avg -> FC(5) -> Shape(1x5) -> Avg -> FC(2)]";
    let spec = infer_shapes(
        parse_architecture(s, &MASK_PLAN).unwrap().with_linear_output(),
        map(4, 4, 2),
    )
    .unwrap();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = build_network(&spec, &mut store, "n", BuildOptions::default(), &mut rng).unwrap();
    let x = Tensor::new(
        vec![2, 2, 4, 4],
        (0..64).map(|i| ((i * 37) % 17) as f64 / 17.0).collect(),
    );
    // Nonzero biases keep activations off the piecewise-linear kinks (padding yields exact zeros).
    let params: Vec<Tensor> = store
        .iter()
        .enumerate()
        .map(|(i, (_, t))| t.map(|v| v + 0.1 + 0.05 * i as f64))
        .collect();
    let r = check(&params, 1e-5, |g, vars| {
        let input = g.constant(x.clone());
        let bound = Bound::from_vars(vars.to_vec());
        let y = net.forward(g, &bound, input);
        let sq = g.square(y);
        g.sum(sq)
    });
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

fn arb_layer() -> impl Strategy<Value = LayerKind> {
    let pad = prop_oneof![Just(Padding::Valid), Just(Padding::Same)];
    prop_oneof![
        (1usize..6, 1usize..4, 1usize..64, pad.clone()).prop_map(|(k, s, d, p)| conv(k, s, d, p)),
        (1usize..6, 1usize..4, 1usize..64, pad).prop_map(|(kernel, stride, out_channels, padding)| {
            LayerKind::TransposeConv {
                kernel,
                stride,
                out_channels,
                padding,
            }
        }),
        (1usize..200).prop_map(|size| LayerKind::Resize { size }),
        (1usize..5).prop_map(|amount| LayerKind::Pad { amount }),
        Just(LayerKind::AvgPool),
        (1usize..200).prop_map(|units| LayerKind::FullyConnected { units }),
        (1usize..9, 1usize..9).prop_map(|(height, width)| LayerKind::Reshape { height, width }),
    ]
}

proptest! {
    #[test]
    fn unparse_then_parse_round_trips(
        first in proptest::collection::vec(arb_layer(), 1..6),
        second in proptest::collection::vec(arb_layer(), 0..6),
    ) {
        let plan = MASK_PLAN;
        let mut text: Vec<String> = Vec::new();
        let render = |ls: &[LayerKind]| ls.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(" -> ");
        if second.is_empty() {
            text.push(render(&first));
        } else {
            text.push(format!("[{}]", render(&first)));
            text.push(format!("[{}]", render(&second)));
        }
        let parsed = parse_architecture(&text.join(" -> "), &plan).unwrap();
        let reparsed = parse_architecture(&parsed.to_string(), &plan).unwrap();
        prop_assert_eq!(&parsed, &reparsed);
        let spaced = parsed.to_string().replace("->", "  ->  ").replace(',', " , ");
        prop_assert_eq!(parse_architecture(&spaced, &plan).unwrap(), parsed);
    }
}
