#![allow(dead_code)]

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use samcd::model::EncoderSpec;
use samcd::nn::{ParamId, ParamStore};
use samcd::tensor::{Graph, Var};
use samcd::ModelConfig;

/// Small but complete configuration: every stage present, few channels.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderSpec { channels: [6, 8, 10, 12], ..EncoderSpec::default() },
        adaptor_width: 6,
        semantic_channels: 4,
        change_width: 6,
        residual_blocks: 2,
        ..ModelConfig::default()
    }
}

pub fn randn4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

pub fn uniform3(shape: (usize, usize, usize), seed: u64) -> Array3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_simple_fn(shape, || rng.random::<f32>())
}

/// Smooth scalar read-out of a 4-d map: mean cosine dissimilarity against a
/// fixed random probe over all pixels.
pub fn readout(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let shape = g.shape4(x);
    let probe = g.constant(randn4(shape, seed));
    let mask = Array3::from_elem((shape.0, shape.2, shape.3), 1u8);
    g.masked_cosine_loss(x, probe, mask).expect("matching shapes")
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-3;
/// Absolute floor so gradients at rounding level do not dominate.
pub const FD_ABS_FLOOR: f64 = 1e-8;

pub fn close(analytic: f64, numeric: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs());
    (analytic - numeric).abs() <= FD_REL_TOL * scale + FD_ABS_FLOOR
}

/// Central difference of `f` with respect to element `index` of `param`.
pub fn fd_param(
    store: &mut ParamStore<f64>,
    param: ParamId,
    index: usize,
    mut f: impl FnMut(&ParamStore<f64>) -> f64,
) -> f64 {
    let orig = store.value(param).as_slice().expect("standard layout")[index];
    store.value_mut(param).as_slice_mut().unwrap()[index] = orig + FD_STEP;
    let up = f(store);
    store.value_mut(param).as_slice_mut().unwrap()[index] = orig - FD_STEP;
    let down = f(store);
    store.value_mut(param).as_slice_mut().unwrap()[index] = orig;
    (up - down) / (2.0 * FD_STEP)
}

/// Up to `count` random `(param, element)` pairs from trainable parameters.
pub fn sample_entries(store: &ParamStore<f64>, count: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.trainable().collect();
    (0..count)
        .map(|_| {
            let id = ids[rng.random_range(0..ids.len())];
            (id, rng.random_range(0..store.value(id).len()))
        })
        .collect()
}
