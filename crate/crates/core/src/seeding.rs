//! Deterministic random streams derived from a seed and some context.

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// A generator keyed by `seed` and an arbitrary byte tag.
pub fn stream(seed: u64, tag: &[u8]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag);
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// A generator keyed by `seed` and a list of integers.
pub fn stream_u64(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let tag: Vec<u8> = parts.iter().flat_map(|p| p.to_le_bytes()).collect();
    stream(seed, &tag)
}

/// One generator per image of a `[B, …]` tensor, keyed by the image content,
/// so results do not depend on batch composition.
pub fn per_image_streams(seed: u64, x: &Tensor) -> Result<Vec<ChaCha8Rng>> {
    let b = x.dim(0)?;
    let flat = x.to_dtype(DType::F32)?.flatten_from(1)?.to_vec2::<f32>()?;
    Ok((0..b)
        .map(|i| {
            let bytes: Vec<u8> = flat[i].iter().flat_map(|v| v.to_le_bytes()).collect();
            stream(seed, &bytes)
        })
        .collect())
}
