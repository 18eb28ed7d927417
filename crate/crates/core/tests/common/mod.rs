#![allow(dead_code)]

pub mod oracle;

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use seqrank::model::{self, ModelConfig, TransformerConfig};
use seqrank::numerics::{ParamStore, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn random_weights(rng: &mut ChaCha8Rng, n: usize) -> Rc<[f64]> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Redraws every parameter from N(0, std²) so tests are not dominated by the
/// near-identity behaviour of small initialisations. Layer-norm gains stay
/// near 1.
pub fn randomise(store: &mut ParamStore, std: f64, seed: u64) {
    let mut r = rng(seed);
    let normal = Normal::new(0.0, std).unwrap();
    for p in store.iter_mut() {
        let gain = p.name.ends_with("ln/g");
        for v in p.value.data_mut() {
            *v = normal.sample(&mut r) + if gain { 1.0 } else { 0.0 };
        }
    }
}

pub fn small_model(d_h: usize, max_actions: usize) -> ModelConfig {
    ModelConfig {
        max_actions,
        d_pin: 4,
        transformer: TransformerConfig {
            n_layers: 2,
            n_heads: 2,
            d_h,
            d_ffn: 2 * d_h,
            d_e: 4,
            dropout_rate: 0.0,
        },
    }
}

pub fn random_two_tower(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut store = model::init_two_tower(cfg, seed).unwrap();
    randomise(&mut store, 0.3, seed ^ 0x5eed);
    store
}
