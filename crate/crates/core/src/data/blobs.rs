use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ImageBatch;
use crate::error::{Error, Result};

pub const BLOB_SIDE: usize = 16;
const SQUARE: usize = 6;
const NOISE: f32 = 0.1;

/// Two-class 16×16 images: a bright 6×6 square in the top-left corner
/// (class 0) or the bottom-right corner (class 1), plus uniform noise of
/// amplitude 0.1, clamped to `[0, 1]`. Labels alternate `0, 1, 0, 1, …`.
pub fn make_synthetic_blobs(per_class: usize, seed: u64) -> Result<(ImageBatch, Vec<usize>)> {
    if per_class == 0 {
        return Err(Error::InvalidArgument("need at least one image per class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2 * per_class;
    let px = BLOB_SIDE * BLOB_SIDE;
    let mut values = Vec::with_capacity(n * px);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let offset = if y == 0 { 1 } else { BLOB_SIDE - 1 - SQUARE };
        for r in 0..BLOB_SIDE {
            for c in 0..BLOB_SIDE {
                let inside = (offset..offset + SQUARE).contains(&r)
                    && (offset..offset + SQUARE).contains(&c);
                let base = if inside { 0.9 } else { 0.0 };
                let v: f32 = base + rng.random_range(-NOISE..=NOISE);
                values.push(v.clamp(0.0, 1.0));
            }
        }
        labels.push(y);
    }
    Ok((ImageBatch::new(values, n, (1, BLOB_SIDE, BLOB_SIDE))?, labels))
}
