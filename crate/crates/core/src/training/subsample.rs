use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Seeded shuffle of `indices`, keeping the first `ceil(fraction * N)`.
pub fn subsample_labels(indices: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if indices.is_empty() {
        return Err(Error::Validation("cannot subsample an empty dataset".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("label fraction {fraction} outside (0, 1]")));
    }
    // the small slack keeps e.g. 0.1 * 440 from rounding up to 45
    let keep = ((fraction * indices.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut out = indices.to_vec();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out.truncate(keep.min(indices.len()));
    Ok(out)
}
