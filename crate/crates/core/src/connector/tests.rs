use rand::Rng;

use super::*;
use crate::interval::{box_from_ball, propagate_range_on_tape, BoxVars};
use crate::testutil::{random_mlp, rng, uniform};

fn p(c: f64) -> ConnectorParams {
    ConnectorParams::new(c).unwrap()
}

#[test]
fn partial_examples() {
    assert_eq!(connector_partials(0.0, 1.0, 0.0, &p(0.5)).unwrap(), (1.0, 0.0));
    assert_eq!(connector_partials(0.0, 1.0, 0.25, &p(0.5)).unwrap(), (0.5, 0.0));
    let (a, b) = connector_partials(0.0, 1.0, 0.3, &p(1.0)).unwrap();
    assert!((a - 0.7).abs() < 1e-15 && (b - 0.3).abs() < 1e-15);
    assert_eq!(connector_partials(0.4, 0.4, 0.4, &p(0.5)).unwrap(), (0.5, 0.5));
    assert_eq!(connector_partials(0.4, 0.4, 0.4, &p(0.0)).unwrap(), (0.5, 0.5));
}

#[test]
fn binary_and_linear_limits() {
    let mut r = rng(1);
    for _ in 0..20 {
        let lo = r.gen_range(-2.0..1.0);
        let hi = lo + r.gen_range(0.01..2.0);
        let z = r.gen_range(lo..=hi);
        let (a, b) = connector_partials(lo, hi, z, &p(1.0)).unwrap();
        assert_eq!(a, 1.0 - (z - lo) / (hi - lo));
        assert_eq!(b, 1.0 - (hi - z) / (hi - lo));
        assert!((a + b - 1.0).abs() < 1e-12);
        assert_eq!(connector_partials(lo, hi, z, &p(0.0)).unwrap(), (0.0, 0.0));
        assert_eq!(connector_partials(lo, hi, lo, &p(0.0)).unwrap(), (1.0, 0.0));
        assert_eq!(connector_partials(lo, hi, hi, &p(0.0)).unwrap(), (0.0, 1.0));
    }
}

#[test]
fn partials_in_unit_interval_and_zero_outside_band() {
    let mut r = rng(2);
    for _ in 0..500 {
        let c = r.gen_range(0.0..=1.0);
        let lo = r.gen_range(-1.0..1.0);
        let hi = lo + r.gen_range(0.0..1.0);
        let z = if hi > lo { r.gen_range(lo..=hi) } else { lo };
        let (a, b) = connector_partials(lo, hi, z, &p(c)).unwrap();
        assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
        if hi > lo && z - lo >= c * (hi - lo) && c > 0.0 {
            assert_eq!(a, 0.0);
        }
        if hi > lo && hi - z >= c * (hi - lo) && c > 0.0 {
            assert_eq!(b, 0.0);
        }
    }
}

#[test]
fn rejects_points_outside_box_and_bad_c() {
    assert!(connector_partials(0.0, 1.0, 1.5, &p(0.5)).is_err());
    assert!(connector_partials(0.0, 1.0, -1e-3, &p(0.5)).is_err());
    assert!(ConnectorParams::new(1.5).is_err());
    assert!(ConnectorParams::new(-0.1).is_err());
}

fn node_grads(z: &[f64], seed: &[f64], copies: usize) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let lo = g.param(Tensor::vector(&[0.0, 0.0, 0.0]));
    let hi = g.param(Tensor::vector(&[1.0, 1.0, 1.0]));
    let w = g.constant(Tensor::vector(seed));
    let mut total = None;
    for _ in 0..copies {
        let n = connector_node(&mut g, lo, hi, Tensor::vector(z), &p(0.5)).unwrap();
        let t = g.mul(n, w).unwrap();
        let s = g.sum(t).unwrap();
        total = Some(match total {
            None => s,
            Some(prev) => g.add(prev, s).unwrap(),
        });
    }
    let grads = g.backward(total.unwrap()).unwrap();
    (grads.get(lo).into_data(), grads.get(hi).into_data())
}

#[test]
fn node_routes_gradient_diagonally() {
    let (dlo, dhi) = node_grads(&[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0], 1);
    assert_eq!(dlo, vec![1.0, 0.0, 0.0]);
    assert_eq!(dhi, vec![0.0, 0.0, 0.0]);
    // Perturbing the upstream gradient of one coordinate moves only that coordinate.
    let (a_lo, a_hi) = node_grads(&[0.1, 0.2, 0.9], &[0.3, -0.7, 1.1], 1);
    let (b_lo, b_hi) = node_grads(&[0.1, 0.2, 0.9], &[0.3, 5.0, 1.1], 1);
    for j in [0, 2] {
        assert_eq!(a_lo[j], b_lo[j]);
        assert_eq!(a_hi[j], b_hi[j]);
    }
    assert_ne!(a_lo[1], b_lo[1]);
}

#[test]
fn connector_gradients_accumulate_additively() {
    let z = [0.1, 0.5, 0.8];
    let seed = [1.0, -2.0, 0.5];
    let (lo1, hi1) = node_grads(&z, &seed, 1);
    let (lo2, hi2) = node_grads(&z, &seed, 2);
    for j in 0..3 {
        assert_eq!(lo2[j], 2.0 * lo1[j]);
        assert_eq!(hi2[j], 2.0 * hi1[j]);
    }
}

/// Loss of a small net where the latent input is either a connector node at
/// the box center (c = 1) or the midpoint computed on the tape.
fn midpoint_case(use_connector: bool) -> (Vec<f64>, f64) {
    let net = random_mlp(3, &[6, 5], 3, 1, 11);
    let x = uniform(&[4, 3], 0.0, 1.0, &mut rng(11));
    let b = box_from_ball(&x, 0.1, None).unwrap();
    let mut g = Graph::new();
    let params = net.bind(&mut g, true);
    let bv = BoxVars::constant(&mut g, &b);
    let latent = propagate_range_on_tape(&mut g, &net, &params, bv, net.extractor()).unwrap();
    let lo = latent.lo(&mut g).unwrap();
    let hi = latent.hi(&mut g).unwrap();
    let z = if use_connector {
        let mid = latent.values(&g).center();
        connector_node(&mut g, lo, hi, mid, &p(1.0)).unwrap()
    } else {
        let s = g.add(lo, hi).unwrap();
        g.scale(s, 0.5).unwrap()
    };
    let out = net.forward_on_tape(&mut g, &params, z, net.classifier()).unwrap();
    let lse = g.logsumexp(out).unwrap();
    let root = g.mean(lse).unwrap();
    let grads = g.backward(root).unwrap();
    let flat = params.vars().iter().flat_map(|v| grads.get(*v).into_data()).collect();
    (flat, g.value(root).item())
}

#[test]
fn linear_connector_at_center_matches_midpoint_map() {
    let (a, la) = midpoint_case(true);
    let (b, lb) = midpoint_case(false);
    assert!((la - lb).abs() < 1e-12);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12 * (1.0 + y.abs()), "{x} vs {y}");
    }
}

#[test]
fn classifier_gradients_ignore_connector() {
    let net = random_mlp(3, &[6, 5], 3, 1, 12);
    let x = uniform(&[4, 3], 0.0, 1.0, &mut rng(12));
    let b = box_from_ball(&x, 0.1, None).unwrap();
    let grads_with = |connector: bool, c: f64| {
        let mut g = Graph::new();
        let params = net.bind(&mut g, true);
        let bv = BoxVars::constant(&mut g, &b);
        let latent = propagate_range_on_tape(&mut g, &net, &params, bv, net.extractor()).unwrap();
        let vals = latent.values(&g);
        let z = vals.lo.zip_map(&vals.hi, |l, h| l + 0.3 * (h - l));
        let zv = if connector {
            let lo = latent.lo(&mut g).unwrap();
            let hi = latent.hi(&mut g).unwrap();
            connector_node(&mut g, lo, hi, z, &p(c)).unwrap()
        } else {
            g.constant(z)
        };
        let out = net.forward_on_tape(&mut g, &params, zv, net.classifier()).unwrap();
        let lse = g.logsumexp(out).unwrap();
        let root = g.mean(lse).unwrap();
        let grads = g.backward(root).unwrap();
        net.classifier()
            .filter_map(|i| params.layer(i))
            .flat_map(|(w, bb)| [grads.get(w).into_data(), grads.get(bb).into_data()])
            .flatten()
            .collect::<Vec<_>>()
    };
    let reference = grads_with(false, 0.0);
    for c in [0.0, 0.5, 1.0] {
        assert_eq!(grads_with(true, c), reference);
    }
}

mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn partials_are_bounded_and_banded(c in 0.0f64..=1.0, lo in -2.0f64..2.0, w in 0.0f64..2.0, t in 0.0f64..=1.0) {
            let hi = lo + w;
            let z = (lo + t * w).min(hi);
            let (a, b) = connector_partials(lo, hi, z, &p(c)).unwrap();
            prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
            if hi > lo && c > 0.0 && z - lo >= c * w {
                prop_assert_eq!(a, 0.0);
            }
            if hi > lo && c > 0.0 && hi - z >= c * w {
                prop_assert_eq!(b, 0.0);
            }
        }

        #[test]
        fn linear_partials_sum_to_one(lo in -2.0f64..2.0, w in 0.01f64..2.0, t in 0.0f64..=1.0) {
            let z = (lo + t * w).min(lo + w);
            let (a, b) = connector_partials(lo, lo + w, z, &p(1.0)).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }
}
