use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_input(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn mlp(hidden: &[usize], inputs: usize, classes: usize, seed: u64) -> Network {
    let mut net = build_architecture(&Architecture::Mlp(hidden.to_vec()), &[inputs], classes, 0).unwrap();
    net.init_params(seed, InitMode::Kaiming);
    net
}

#[test]
fn mlp_split_for_one_classifier_relu() {
    let net = build_architecture(&Architecture::Mlp(vec![128, 128]), &[784], 10, 1).unwrap();
    // Affine, ReLU, Affine, ReLU, Affine: split before the second affine.
    assert_eq!(net.layers.len(), 5);
    assert_eq!(net.split_index, 2);
    assert!(net.layers[2].is_linear());
    assert_eq!(net.classifier_relu_count(), 1);
}

#[test]
fn zero_classifier_relus_puts_split_at_end() {
    let net = build_architecture(&Architecture::Cnn3, &[1, 28, 28], 10, 0).unwrap();
    assert_eq!(net.split_index, net.layers.len());
    assert!(!net.has_classifier());
}

#[test]
fn cnn7_has_six_relus() {
    let net = build_architecture(&Architecture::Cnn7, &[1, 28, 28], 10, 6).unwrap();
    assert_eq!(net.relu_count(), 6);
    assert_eq!(net.split_index, 0);
    let err = build_architecture(&Architecture::Cnn7, &[1, 28, 28], 10, 7).unwrap_err();
    assert!(err.to_string().contains("7 ReLU"), "{err}");
}

#[test]
fn architecture_names_parse() {
    assert_eq!("mlp".parse::<Architecture>().unwrap(), Architecture::Mlp(vec![128, 128]));
    assert_eq!("mlp:8,4".parse::<Architecture>().unwrap(), Architecture::Mlp(vec![8, 4]));
    assert_eq!("mlp:8,4".parse::<Architecture>().unwrap().to_string(), "mlp:8,4");
    assert!("resnet".parse::<Architecture>().is_err());
    assert!("mlp:0".parse::<Architecture>().is_err());
}

#[test]
fn cnn3_shapes() {
    let net = build_architecture(&Architecture::Cnn3, &[1, 28, 28], 10, 1).unwrap();
    let shapes = net.layer_shapes().unwrap();
    assert_eq!(shapes[1], vec![16, 14, 14]);
    assert_eq!(shapes[3], vec![32, 7, 7]);
    assert_eq!(shapes.last().unwrap(), &vec![10]);
    assert_eq!(net.classifier_relu_count(), 1);
}

#[test]
fn init_is_seeded() {
    let a = mlp(&[16, 16], 4, 3, 5);
    let b = mlp(&[16, 16], 4, 3, 5);
    let c = mlp(&[16, 16], 4, 3, 6);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.layers.iter().flat_map(|l| match l {
        Layer::Affine { bias, .. } => bias.data().to_vec(),
        _ => vec![],
    }).all(|b| b == 0.0));
}

#[test]
fn kaiming_variance() {
    // 100 x 100 = 10k samples per layer.
    let mut net = build_architecture(&Architecture::Mlp(vec![100]), &[100], 100, 0).unwrap();
    net.init_params(1, InitMode::Kaiming);
    for layer in &net.layers {
        if let Layer::Affine { weight, .. } = layer {
            let n = weight.len() as f64;
            let mean = weight.sum() / n;
            let var = weight.data().iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
            let expected = 2.0 / weight.shape()[1] as f64;
            assert!((var / expected - 1.0).abs() < 0.1, "var {var} vs {expected}");
        }
    }
}

#[test]
fn forward_identity_and_zero_weights() {
    let mut net = build_architecture(&Architecture::Mlp(vec![]), &[2], 2, 0).unwrap();
    if let Layer::Affine { weight, .. } = &mut net.layers[0] {
        weight.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    }
    let x = Tensor::from_rows(&[vec![1.0, 2.0]]);
    assert_eq!(net.forward(&x).unwrap().data(), &[1.0, 2.0]);

    let mut net = build_architecture(&Architecture::Mlp(vec![4]), &[3], 3, 0).unwrap();
    if let Some(Layer::Affine { bias, .. }) = net.layers.last_mut() {
        bias.data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
    }
    let x = Tensor::from_rows(&[vec![0.3, 0.1, 0.9]]);
    assert_eq!(net.forward(&x).unwrap().data(), &[0.5, -1.0, 2.0]);
}

#[test]
fn forward_rejects_wrong_input_shape() {
    let net = mlp(&[4], 3, 2, 0);
    assert!(net.forward(&Tensor::zeros(&[1, 4])).is_err());
}

#[test]
fn forward_matches_manual_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = mlp(&[6, 5], 4, 3, 9);
    let x = random_input(&[3, 4], &mut rng);
    let logits = net.forward(&x).unwrap();
    for s in 0..3 {
        let mut h: Vec<f64> = x.row(s).to_vec();
        for layer in &net.layers {
            h = match layer {
                Layer::Affine { weight, bias } => (0..weight.shape()[0])
                    .map(|i| {
                        bias.data()[i]
                            + weight.row(i).iter().zip(&h).map(|(w, v)| w * v).sum::<f64>()
                    })
                    .collect(),
                Layer::Relu => h.iter().map(|v| v.max(0.0)).collect(),
                _ => unreachable!(),
            };
        }
        for (a, b) in logits.row(s).iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn tape_forward_matches_concrete() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut net = build_architecture(&Architecture::Cnn3, &[1, 12, 12], 4, 1).unwrap();
    net.init_params(3, InitMode::Kaiming);
    let x = random_input(&[2, 1, 12, 12], &mut rng);
    let mut g = Graph::new();
    let p = net.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let out = net.forward_on_tape(&mut g, &p, xv, 0..net.layers.len()).unwrap();
    let direct = net.forward(&x).unwrap();
    for (a, b) in g.value(out).data().iter().zip(direct.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn split_composition_equals_full_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut net = mlp(&[8, 8, 8], 5, 4, 1);
    for k in 0..=3 {
        net.set_classifier_relus(k).unwrap();
        let x = random_input(&[4, 5], &mut rng);
        let z = net.forward_range(&x, net.extractor()).unwrap();
        let y = net.forward_range(&z, net.classifier()).unwrap();
        assert_eq!(y, net.forward(&x).unwrap());
    }
}

#[test]
fn elision_identity_example() {
    let mut net = build_architecture(&Architecture::Mlp(vec![]), &[3], 3, 0).unwrap();
    if let Layer::Affine { weight, .. } = &mut net.layers[0] {
        weight.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }
    let e = net.elide_final_layer(0).unwrap();
    let Layer::Affine { weight, .. } = &e.layers[0] else { panic!() };
    assert_eq!(weight.data(), &[0.0, 0.0, 0.0, -1.0, 1.0, 0.0, -1.0, 0.0, 1.0]);
    assert!(net.elide_final_layer(3).is_err());
}

#[test]
fn elided_forward_is_logit_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let net = mlp(&[7, 7], 3, 4, 2);
    for y in 0..4 {
        let e = net.elide_final_layer(y).unwrap();
        let x = random_input(&[100, 3], &mut rng);
        let o = net.forward(&x).unwrap();
        let od = e.forward(&x).unwrap();
        for s in 0..100 {
            assert_eq!(od.at2(s, y), 0.0);
            for i in 0..4 {
                assert!((od.at2(s, i) - (o.at2(s, i) - o.at2(s, y))).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn tape_elision_matches_network_elision() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let net = mlp(&[5], 3, 4, 4);
    let x = random_input(&[6, 3], &mut rng);
    let mut g = Graph::new();
    let p = net.bind(&mut g, true);
    let pe = p.elided(&mut g, 4, 2).unwrap();
    let xv = g.constant(x.clone());
    let out = net.forward_on_tape(&mut g, &pe, xv, 0..net.layers.len()).unwrap();
    let expected = net.elide_final_layer(2).unwrap().forward(&x).unwrap();
    for (a, b) in g.value(out).data().iter().zip(expected.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn normalization_prefix_keeps_split() {
    let mut net = build_architecture(&Architecture::Cnn3, &[3, 8, 8], 10, 1).unwrap();
    let before = net.layers[net.split_index].clone();
    net = net.with_normalization(vec![0.5; 3], vec![0.25; 3]).unwrap();
    assert_eq!(net.layers[net.split_index], before);
    assert!(net.clone().with_normalization(vec![0.0; 3], vec![0.0; 3]).is_err());
}

#[test]
fn flat_params_roundtrip() {
    let mut net = mlp(&[3], 2, 2, 1);
    let flat = net.flat_params();
    let mut other = mlp(&[3], 2, 2, 99);
    other.set_flat_params(&flat).unwrap();
    assert_eq!(other, net);
    assert!(net.set_flat_params(&flat[1..]).is_err());
}

mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn elided_logits_are_differences(seed in 0u64..10_000, y in 0usize..4, cls in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = split_at(mlp(&[6, 5], 3, 4, seed), cls);
            let x = random_input(&[8, 3], &mut rng);
            let o = net.forward(&x).unwrap();
            let od = net.elide_final_layer(y).unwrap().forward(&x).unwrap();
            for s in 0..8 {
                for i in 0..4 {
                    prop_assert!((od.at2(s, i) - (o.at2(s, i) - o.at2(s, y))).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn split_never_changes_forward(seed in 0u64..10_000, cls in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = split_at(mlp(&[7, 6, 5], 4, 3, seed), cls);
            let x = random_input(&[5, 4], &mut rng);
            let z = net.forward_range(&x, net.extractor()).unwrap();
            prop_assert_eq!(net.forward_range(&z, net.classifier()).unwrap(), net.forward(&x).unwrap());
        }
    }

    fn split_at(mut net: Network, classifier_relus: usize) -> Network {
        net.set_classifier_relus(classifier_relus).unwrap();
        net
    }
}
