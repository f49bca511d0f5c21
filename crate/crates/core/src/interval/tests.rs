use rand::Rng;

use super::*;
use crate::net::{build_architecture, Architecture, InitMode};
use crate::tensor::{finite_diff_check, Probe};
use crate::testutil::{random_mlp, rng, uniform};

fn sample_in(b: &BoxBounds, r: &mut rand_chacha::ChaCha8Rng) -> Tensor {
    let data = b
        .lo
        .data()
        .iter()
        .zip(b.hi.data())
        .map(|(&l, &h)| if h > l { r.gen_range(l..=h) } else { l })
        .collect();
    Tensor::new(b.lo.shape().to_vec(), data).unwrap()
}

#[test]
fn ball_examples() {
    let x = Tensor::vector(&[0.5]);
    let b = box_from_ball(&x, 0.1, Some((0.0, 1.0))).unwrap();
    assert!((b.lo.item() - 0.4).abs() < 1e-15 && (b.hi.item() - 0.6).abs() < 1e-15);
    let b = box_from_ball(&Tensor::vector(&[0.05]), 0.1, Some((0.0, 1.0))).unwrap();
    assert_eq!(b.lo.item(), 0.0);
    assert!((b.hi.item() - 0.15).abs() < 1e-15);
    let b = box_from_ball(&x, 0.0, None).unwrap();
    assert_eq!(b.lo, x);
    assert_eq!(b.hi, x);
    assert!(box_from_ball(&x, -0.1, None).is_err());
}

#[test]
fn layer_examples() {
    let layer = Layer::Affine {
        weight: Tensor::from_rows(&[vec![1.0, -1.0]]),
        bias: Tensor::vector(&[0.0]),
    };
    let b = BoxBounds::new(Tensor::full(&[1, 2], -1.0), Tensor::full(&[1, 2], 1.0)).unwrap();
    let out = propagate_interval(&layer, &b).unwrap();
    assert_eq!((out.lo.item(), out.hi.item()), (-2.0, 2.0));

    let b = BoxBounds::new(Tensor::from_rows(&[vec![-1.0]]), Tensor::from_rows(&[vec![2.0]])).unwrap();
    let out = propagate_interval(&Layer::Relu, &b).unwrap();
    assert_eq!((out.lo.item(), out.hi.item()), (0.0, 2.0));

    let conv = Layer::Conv2d {
        weight: Tensor::full(&[1, 1, 2, 2], 1.0),
        bias: Tensor::zeros(&[1]),
        stride: 1,
        padding: 0,
    };
    let b = BoxBounds::new(Tensor::full(&[1, 1, 3, 3], -1.0), Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
    let out = propagate_interval(&conv, &b).unwrap();
    assert!(out.radius().data().iter().all(|&r| r == 4.0));
    assert!(out.center().data().iter().all(|&c| c == 0.0));
}

#[test]
fn box_validation() {
    assert!(BoxBounds::new(Tensor::vector(&[1.0]), Tensor::vector(&[0.0])).is_err());
    assert!(BoxBounds::new(Tensor::vector(&[1.0]), Tensor::vector(&[1.0, 2.0])).is_err());
}

#[test]
fn full_split_extractor_output_has_logit_shape() {
    let net = random_mlp(3, &[4], 3, 0, 1);
    let x = uniform(&[2, 3], 0.0, 1.0, &mut rng(1));
    let b = box_from_ball(&x, 0.1, None).unwrap();
    let ext = ibp_bounds(&net, &b, &[0, 1], BoundTarget::ExtractorOutput).unwrap();
    let full = ibp_bounds(&net, &b, &[0, 1], BoundTarget::ElidedLogits).unwrap();
    assert_eq!(ext.lo.shape(), full.lo.shape());
}

#[test]
fn zero_epsilon_collapses_to_forward() {
    let net = random_mlp(4, &[6, 6], 3, 1, 2);
    let x = uniform(&[5, 4], 0.0, 1.0, &mut rng(2));
    let labels = [0, 1, 2, 0, 1];
    let b = box_from_ball(&x, 0.0, None).unwrap();
    let out = ibp_bounds(&net, &b, &labels, BoundTarget::ElidedLogits).unwrap();
    let logits = net.forward(&x).unwrap();
    for (s, &y) in labels.iter().enumerate() {
        for i in 0..3 {
            let d = logits.at2(s, i) - logits.at2(s, y);
            assert!((out.lo.at2(s, i) - d).abs() < 1e-12);
            assert!((out.hi.at2(s, i) - d).abs() < 1e-12);
        }
    }
}

#[test]
fn monte_carlo_soundness_small_mlp() {
    let mut r = rng(3);
    for seed in 0..5 {
        let net = random_mlp(3, &[8, 8], 4, 1, seed);
        let x = uniform(&[1, 3], 0.0, 1.0, &mut r);
        let labels = [seed as usize % 4];
        let b = box_from_ball(&x, 0.15, Some((0.0, 1.0))).unwrap();
        let bounds = ibp_bounds(&net, &b, &labels, BoundTarget::ElidedLogits).unwrap();
        let elided = net.elide_final_layer(labels[0]).unwrap();
        for _ in 0..1000 {
            let xs = sample_in(&b, &mut r);
            let o = elided.forward(&xs).unwrap();
            assert!(bounds.contains(&o, 1e-9));
        }
    }
}

#[test]
fn monotone_in_epsilon() {
    let net = random_mlp(5, &[10, 10], 3, 0, 4);
    let x = uniform(&[3, 5], 0.0, 1.0, &mut rng(4));
    let labels = [0, 1, 2];
    let mut prev: Option<BoxBounds> = None;
    for eps in [0.0, 0.01, 0.05, 0.1, 0.3] {
        let b = box_from_ball(&x, eps, Some((0.0, 1.0))).unwrap();
        let out = ibp_bounds(&net, &b, &labels, BoundTarget::ElidedLogits).unwrap();
        if let Some(p) = &prev {
            assert!(p.is_subset_of(&out, 1e-12));
        }
        prev = Some(out);
    }
}

#[test]
fn exact_on_linear_networks() {
    let mut r = rng(5);
    let net = random_mlp(4, &[], 3, 0, 5);
    let mut deep = build_architecture(&Architecture::Mlp(vec![]), &[4], 3, 0).unwrap();
    deep.init_params(1, InitMode::Kaiming);
    let x = uniform(&[1, 4], 0.0, 1.0, &mut r);
    let b = box_from_ball(&x, 0.2, None).unwrap();
    let out = ibp_bounds(&net, &b, &[1], BoundTarget::ElidedLogits).unwrap();
    // Corner that maximizes each elided logit by the sign of its row.
    let elided = net.elide_final_layer(1).unwrap();
    let Layer::Affine { weight, .. } = &elided.layers[0] else { panic!() };
    for i in 0..3 {
        let corner: Vec<f64> = (0..4)
            .map(|j| if weight.at2(i, j) > 0.0 { b.hi.data()[j] } else { b.lo.data()[j] })
            .collect();
        let v = elided.forward(&Tensor::from_rows(&[corner])).unwrap();
        assert!((v.at2(0, i) - out.hi.at2(0, i)).abs() < 1e-9);
    }
}

#[test]
fn tape_and_direct_propagation_agree() {
    let mut net = build_architecture(&Architecture::Cnn3, &[1, 10, 10], 5, 1).unwrap();
    net.init_params(7, InitMode::IbpStable);
    crate::testutil::randomize_biases(&mut net, 7);
    let net = net.with_normalization(vec![0.3], vec![0.5]).unwrap();
    let x = uniform(&[2, 1, 10, 10], 0.0, 1.0, &mut rng(6));
    let b = box_from_ball(&x, 0.1, Some((0.0, 1.0))).unwrap();
    let direct = propagate_range(&net, &b, 0..net.layers.len()).unwrap();
    let mut g = Graph::new();
    let p = net.bind(&mut g, true);
    let bv = BoxVars::constant(&mut g, &b);
    let out = propagate_range_on_tape(&mut g, &net, &p, bv, 0..net.layers.len()).unwrap();
    let tape = out.values(&g);
    for (a, c) in tape.lo.data().iter().zip(direct.lo.data()) {
        assert!((a - c).abs() < 1e-12);
    }
    for (a, c) in tape.hi.data().iter().zip(direct.hi.data()) {
        assert!((a - c).abs() < 1e-12);
    }
}

#[test]
fn bound_gradients_match_finite_differences() {
    let net = random_mlp(3, &[5, 4], 3, 0, 8);
    let x = uniform(&[2, 3], 0.0, 1.0, &mut rng(8));
    let b = box_from_ball(&x, 0.1, None).unwrap();
    let theta = Tensor::vector(&net.flat_params());
    // Scalar probe: weighted sum of all lower and upper bounds.
    let weights = uniform(&[2, 3], -1.0, 1.0, &mut rng(9));
    let eval = |flat: &Tensor| {
        let mut n = net.clone();
        n.set_flat_params(flat.data()).unwrap();
        let mut g = Graph::new();
        let p = n.bind(&mut g, true);
        let bv = BoxVars::constant(&mut g, &b);
        let out = propagate_range_on_tape(&mut g, &n, &p, bv, 0..n.layers.len()).unwrap();
        let lo = out.lo(&mut g).unwrap();
        let hi = out.hi(&mut g).unwrap();
        let wv = g.constant(weights.clone());
        let s = g.add(lo, hi).unwrap();
        let s = g.mul(s, wv).unwrap();
        let root = g.sum(s).unwrap();
        (g, p, root)
    };
    let (g, p, root) = eval(&theta);
    let grads = g.backward(root).unwrap();
    let analytic: Vec<f64> = p.vars().iter().flat_map(|v| grads.get(*v).into_data()).collect();
    let report = finite_diff_check(
        |t| {
            let (g, _, root) = eval(t);
            Probe { value: g.value(root).item(), kinks: g.kink_quantities() }
        },
        &theta,
        &Tensor::vector(&analytic),
        1e-6,
    );
    assert!(report.max_rel_error < 1e-5, "{report:?}");
    assert!(report.checked > theta.len() / 2);
}

#[test]
fn ibp_stable_init_keeps_radii_bounded() {
    // Mean box radius after every affine layer, relative to the input radius,
    // averaged over 20 seeds.
    let eps = 0.1;
    let depth = 6;
    let mut ratios = vec![0.0; depth + 1];
    for seed in 0..20 {
        let mut net = build_architecture(&Architecture::Mlp(vec![100; depth]), &[100], 10, 0).unwrap();
        net.init_params(seed, InitMode::IbpStable);
        let x = uniform(&[1, 100], 0.0, 1.0, &mut rng(100 + seed));
        let mut b = box_from_ball(&x, eps, None).unwrap();
        let mut k = 0;
        for layer in &net.layers {
            b = propagate_interval(layer, &b).unwrap();
            if layer.is_linear() {
                ratios[k] += b.radius().sum() / b.radius().len() as f64 / eps / 20.0;
                k += 1;
            }
        }
    }
    eprintln!("ibp_stable radius ratios: {ratios:?}");
    for r in &ratios {
        assert!(*r <= 2.0 && *r >= 0.5, "{ratios:?}");
    }
    // Kaiming blows the box up by an order of magnitude per layer.
    let mut net = build_architecture(&Architecture::Mlp(vec![100; depth]), &[100], 10, 0).unwrap();
    net.init_params(0, InitMode::Kaiming);
    let x = uniform(&[1, 100], 0.0, 1.0, &mut rng(0));
    let b = box_from_ball(&x, eps, None).unwrap();
    let out = propagate_range(&net, &b, 0..net.layers.len()).unwrap();
    assert!(out.radius().sum() / out.radius().len() as f64 > 100.0 * eps);
}

mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn sampled_points_stay_inside_bounds(seed in 0u64..10_000, eps in 0.0f64..0.4, y in 0usize..3) {
            let net = random_mlp(3, &[6, 6], 3, 1, seed);
            let mut r = rng(seed);
            let x = uniform(&[1, 3], 0.0, 1.0, &mut r);
            let b = box_from_ball(&x, eps, Some((0.0, 1.0))).unwrap();
            let bounds = ibp_bounds(&net, &b, &[y], BoundTarget::ElidedLogits).unwrap();
            let elided = net.elide_final_layer(y).unwrap();
            for _ in 0..200 {
                let o = elided.forward(&sample_in(&b, &mut r)).unwrap();
                prop_assert!(bounds.contains(&o, 1e-9));
            }
        }

        #[test]
        fn bounds_grow_with_epsilon(seed in 0u64..10_000, e1 in 0.0f64..0.3, e2 in 0.0f64..0.3) {
            let (small, large) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            let net = random_mlp(4, &[8, 8], 3, 0, seed);
            let x = uniform(&[2, 4], 0.0, 1.0, &mut rng(seed));
            let out = |eps| {
                let b = box_from_ball(&x, eps, Some((0.0, 1.0))).unwrap();
                ibp_bounds(&net, &b, &[0, 2], BoundTarget::ElidedLogits).unwrap()
            };
            prop_assert!(out(small).is_subset_of(&out(large), 1e-12));
        }
    }
}
