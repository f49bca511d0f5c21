//! Helpers shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::net::{build_architecture, Architecture, InitMode, Network};
use crate::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Kaiming-initialized MLP with random (nonzero) biases.
pub fn random_mlp(inputs: usize, hidden: &[usize], classes: usize, cls_relus: usize, seed: u64) -> Network {
    let mut net = build_architecture(&Architecture::Mlp(hidden.to_vec()), &[inputs], classes, cls_relus).unwrap();
    net.init_params(seed, InitMode::Kaiming);
    randomize_biases(&mut net, seed);
    net
}

pub fn randomize_biases(net: &mut Network, seed: u64) {
    let mut r = rng(seed ^ 0xb1a5);
    for (i, p) in net.params_mut().into_iter().enumerate() {
        if i % 2 == 1 {
            for v in p.data_mut() {
                *v = r.gen_range(-0.3..0.3);
            }
        }
    }
}
