use rand::Rng;

use super::*;
use crate::net::{build_architecture, Architecture, InitMode, Layer};
use crate::testutil::{random_mlp, rng, uniform};

fn ce(net: &Network, x: &Tensor, labels: &[usize]) -> Vec<f64> {
    let logits = net.forward(x).unwrap();
    labels
        .iter()
        .enumerate()
        .map(|(s, &y)| {
            let row = logits.row(s);
            logsumexp(row) - row[y]
        })
        .collect()
}

fn linear_net(weight: Vec<Vec<f64>>, bias: Vec<f64>) -> Network {
    let inputs = weight[0].len();
    let k = weight.len();
    Network::new(
        vec![Layer::Affine {
            weight: Tensor::from_rows(&weight),
            bias: Tensor::vector(&bias),
        }],
        vec![inputs],
        k,
        1,
    )
    .unwrap()
}

#[test]
fn zero_epsilon_is_identity() {
    let net = random_mlp(4, &[8], 3, 0, 1);
    let x = uniform(&[3, 4], 0.0, 1.0, &mut rng(1));
    let adv = pgd_input(&net, &x, &[0, 1, 2], 0.0, Some((0.0, 1.0)), &AttackConfig::training()).unwrap();
    assert_eq!(adv, x);
}

#[test]
fn one_step_on_linear_model_follows_gradient_sign() {
    let net = linear_net(vec![vec![1.0, -2.0, 0.5], vec![-1.0, 1.0, 0.5]], vec![0.0, 0.0]);
    let x = Tensor::from_rows(&[vec![0.5, 0.5, 0.5]]);
    let cfg = AttackConfig {
        steps: 1,
        init: Init::Clean,
        ..AttackConfig::training()
    };
    let adv = pgd_input(&net, &x, &[0], 0.1, Some((0.0, 1.0)), &cfg).unwrap();
    // CE for label 0 grows along w_1 - w_0 = [-2, 3, 0].
    let expect = [0.4, 0.6, 0.5];
    for (a, e) in adv.data().iter().zip(expect) {
        assert!((a - e).abs() < 1e-12, "{adv:?}");
    }
}

#[test]
fn input_attack_increases_loss() {
    let mut r = rng(2);
    let mut better = 0;
    let trials = 40;
    for t in 0..trials {
        let net = random_mlp(5, &[12, 12], 3, 0, 100 + t);
        let x = uniform(&[1, 5], 0.0, 1.0, &mut r);
        let y = [r.gen_range(0..3)];
        let cfg = AttackConfig {
            steps: 50,
            ..AttackConfig::training().with_seed(t)
        };
        let adv = pgd_input(&net, &x, &y, 0.1, Some((0.0, 1.0)), &cfg).unwrap();
        assert!(box_from_ball(&x, 0.1, Some((0.0, 1.0))).unwrap().contains(&adv, 0.0));
        if ce(&net, &adv, &y)[0] >= ce(&net, &x, &y)[0] {
            better += 1;
        }
    }
    assert!(better as f64 >= 0.95 * trials as f64, "{better}/{trials}");
}

#[test]
fn degenerate_latent_box_returns_its_point() {
    let net = random_mlp(3, &[6, 6], 3, 1, 3);
    let z = uniform(&[2, 6], -1.0, 1.0, &mut rng(3));
    let b = BoxBounds::point(&z);
    for est in [Estimator::Single, Estimator::Multi] {
        let att = pgd_latent(&net, net.classifier(), &b, &[0, 2], None, est, &AttackConfig::evaluation()).unwrap();
        for (r, &(s, _)) in att.owners.iter().enumerate() {
            assert_eq!(att.points.row(r), z.row(s));
        }
    }
}

#[test]
fn latent_attack_reaches_linear_corner() {
    let mut r = rng(4);
    let net = linear_net(
        (0..4).map(|_| (0..6).map(|_| r.gen_range(-1.0..1.0)).collect()).collect(),
        vec![0.1, -0.2, 0.3, 0.0],
    );
    let lo = uniform(&[2, 6], -1.0, 0.0, &mut r);
    let hi = lo.map(|v| v + 0.7);
    let b = BoxBounds::new(lo, hi).unwrap();
    let labels = [1, 3];
    let cfg = AttackConfig {
        steps: 50,
        ..AttackConfig::training()
    };
    let att = pgd_latent(&net, 0..1, &b, &labels, None, Estimator::Multi, &cfg).unwrap();
    assert_eq!(att.owners.len(), 6);
    let Layer::Affine { weight, bias } = &net.layers[0] else { unreachable!() };
    for (row, &(s, t)) in att.owners.iter().enumerate() {
        let y = labels[s];
        let mut best = bias.data()[t] - bias.data()[y];
        for j in 0..6 {
            let v = weight.at2(t, j) - weight.at2(y, j);
            best += v * if v > 0.0 { b.hi.row(s)[j] } else { b.lo.row(s)[j] };
        }
        assert!((att.values[row] - best).abs() < 1e-6, "{} vs {best}", att.values[row]);
        assert!(b.select_rows(&[s]).contains(&att.points.select_rows(&[row]), 0.0));
    }
}

/// Logit differences of a 2-D latent toy classifier on a dense grid.
fn grid_max(net: &Network, b: &BoxBounds, y: usize, t: usize, n: usize) -> f64 {
    let (lo, hi) = (b.lo.data(), b.hi.data());
    let mut pts = Vec::with_capacity(n * n * 2);
    for i in 0..n {
        for j in 0..n {
            pts.push(lo[0] + (hi[0] - lo[0]) * i as f64 / (n - 1) as f64);
            pts.push(lo[1] + (hi[1] - lo[1]) * j as f64 / (n - 1) as f64);
        }
    }
    let out = net.forward(&Tensor::new(vec![n * n, 2], pts).unwrap()).unwrap();
    (0..n * n).map(|r| out.at2(r, t) - out.at2(r, y)).fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn multi_estimator_dominates_single_point() {
    let mut r = rng(5);
    let mut pgd_dominates = 0;
    let cases = 30;
    for seed in 0..cases {
        let mut net = build_architecture(&Architecture::Mlp(vec![8]), &[2], 3, 1).unwrap();
        net.init_params(seed, InitMode::Kaiming);
        crate::testutil::randomize_biases(&mut net, seed);
        let lo = uniform(&[1, 2], -1.0, 0.0, &mut r);
        let hi = lo.map(|v| v + 1.0);
        let b = BoxBounds::new(lo, hi).unwrap();
        let y = (seed % 3) as usize;
        let cfg = AttackConfig {
            steps: 50,
            restarts: 3,
            ..AttackConfig::training().with_seed(seed)
        };
        let single = pgd_latent(&net, 0..net.layers.len(), &b, &[y], None, Estimator::Single, &cfg).unwrap();
        let multi = pgd_latent(&net, 0..net.layers.len(), &b, &[y], None, Estimator::Multi, &cfg).unwrap();
        let at_single = net.forward(&single.points).unwrap();
        let mut all = true;
        for (row, &(_, t)) in multi.owners.iter().enumerate() {
            let single_diff = at_single.at2(0, t) - at_single.at2(0, y);
            assert!(grid_max(&net, &b, y, t, 201) >= single_diff - 1e-2);
            all &= multi.values[row] >= single_diff - 1e-9;
        }
        pgd_dominates += all as usize;
    }
    assert!(pgd_dominates as f64 >= 0.9 * cases as f64, "{pgd_dominates}/{cases}");
}

#[test]
fn attacks_are_seed_deterministic() {
    let net = random_mlp(4, &[8, 8], 3, 1, 6);
    let x = uniform(&[3, 4], 0.0, 1.0, &mut rng(6));
    let cfg = AttackConfig::training().with_seed(9);
    let a = pgd_input(&net, &x, &[0, 1, 2], 0.2, Some((0.0, 1.0)), &cfg).unwrap();
    let b = pgd_input(&net, &x, &[0, 1, 2], 0.2, Some((0.0, 1.0)), &cfg).unwrap();
    assert_eq!(a, b);
    let boxes = box_from_ball(&net.forward_range(&x, net.extractor()).unwrap(), 0.3, None).unwrap();
    let l1 = pgd_latent(&net, net.classifier(), &boxes, &[0, 1, 2], None, Estimator::Multi, &cfg).unwrap();
    let l2 = pgd_latent(&net, net.classifier(), &boxes, &[0, 1, 2], None, Estimator::Multi, &cfg).unwrap();
    assert_eq!(l1.points, l2.points);
}

#[test]
fn sabr_region_limits_and_containment() {
    let net = random_mlp(6, &[10], 3, 0, 7);
    let mut r = rng(7);
    let x = uniform(&[4, 6], 0.2, 0.8, &mut r);
    let labels = [0, 1, 2, 0];
    let cfg = AttackConfig::training();
    let clip = Some((0.0, 1.0));
    let full = sabr_select_region(&net, &x, &labels, 0.1, 0.1, clip, &cfg).unwrap();
    assert_eq!(full, box_from_ball(&x, 0.1, clip).unwrap());
    let small = sabr_select_region(&net, &x, &labels, 0.1, 0.01, clip, &cfg).unwrap();
    for v in small.radius().data() {
        assert!((v - 0.01).abs() < 1e-12);
    }
    assert!(sabr_select_region(&net, &x, &labels, 0.1, 0.2, clip, &cfg).is_err());
    assert!(sabr_select_region(&net, &x, &labels, 0.1, 0.0, clip, &cfg).is_err());
    let mut violations = 0;
    for trial in 0..1000 {
        let x = uniform(&[1, 6], 0.0, 1.0, &mut r);
        let eps = r.gen_range(0.01..0.3);
        let tau = eps * r.gen_range(0.05..1.0);
        let cfg = AttackConfig {
            steps: 2,
            ..AttackConfig::training().with_seed(trial)
        };
        let region = sabr_select_region(&net, &x, &[trial as usize % 3], eps, tau, clip, &cfg).unwrap();
        let ball = box_from_ball(&x, eps, clip).unwrap();
        if !region.is_subset_of(&ball, 0.0) || region.lo.data().iter().zip(region.hi.data()).any(|(l, h)| l > h) {
            violations += 1;
        }
    }
    assert_eq!(violations, 0);
}

#[test]
fn input_margin_attack_is_feasible_lower_bound() {
    let net = random_mlp(4, &[8], 3, 0, 8);
    let x = uniform(&[2, 4], 0.0, 1.0, &mut rng(8));
    let labels = [0, 2];
    let cfg = AttackConfig {
        steps: 20,
        init: Init::Clean,
        ..AttackConfig::training()
    };
    let m = pgd_input_margin(&net, &x, &labels, 0.05, Some((0.0, 1.0)), &cfg).unwrap();
    let clean = net.forward(&x).unwrap();
    for (s, &y) in labels.iter().enumerate() {
        let clean_margin = (0..3)
            .filter(|&i| i != y)
            .map(|i| clean.at2(s, i) - clean.at2(s, y))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(m[s] >= clean_margin);
    }
}

#[test]
fn rejects_bad_config() {
    let net = random_mlp(2, &[4], 2, 0, 9);
    let x = Tensor::from_rows(&[vec![0.5, 0.5]]);
    let cfg = AttackConfig {
        steps: 0,
        ..AttackConfig::training()
    };
    assert!(pgd_input(&net, &x, &[0], 0.1, None, &cfg).is_err());
    assert!(pgd_input(&net, &x, &[5], 0.1, None, &AttackConfig::training()).is_err());
}

mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn latent_iterates_stay_in_box(seed in 0u64..10_000, width in 0.0f64..0.5, multi in any::<bool>()) {
            let net = random_mlp(4, &[8, 8], 3, 1, seed);
            let x = uniform(&[3, 4], 0.0, 1.0, &mut rng(seed));
            let z = net.forward_range(&x, net.extractor()).unwrap();
            let latent = box_from_ball(&z, width, None).unwrap();
            let estimator = if multi { Estimator::Multi } else { Estimator::Single };
            let cfg = AttackConfig::training().with_seed(seed);
            let a = pgd_latent(&net, net.classifier(), &latent, &[0, 1, 2], None, estimator, &cfg).unwrap();
            for (r, &(s, _)) in a.owners.iter().enumerate() {
                for ((v, l), h) in a.points.row(r).iter().zip(latent.lo.row(s)).zip(latent.hi.row(s)) {
                    prop_assert!(l <= v && v <= h);
                }
            }
            let again = pgd_latent(&net, net.classifier(), &latent, &[0, 1, 2], None, estimator, &cfg).unwrap();
            prop_assert_eq!(a.points, again.points);
        }

        #[test]
        fn input_attack_stays_in_clipped_ball(seed in 0u64..10_000, eps in 0.0f64..0.3) {
            let net = random_mlp(4, &[8], 3, 0, seed);
            let x = uniform(&[2, 4], 0.0, 1.0, &mut rng(seed));
            let cfg = AttackConfig::training().with_seed(seed);
            let adv = pgd_input(&net, &x, &[1, 2], eps, Some((0.0, 1.0)), &cfg).unwrap();
            let ball = box_from_ball(&x, eps, Some((0.0, 1.0))).unwrap();
            prop_assert!(ball.contains(&adv, 0.0));
            prop_assert_eq!(adv, pgd_input(&net, &x, &[1, 2], eps, Some((0.0, 1.0)), &cfg).unwrap());
        }
    }
}
