//! Big-endian IDX containers as used by the MNIST distribution.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::ImageBatch;
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 2051;
pub const LABELS_MAGIC: u32 = 2049;

// Refuse absurd headers before allocating.
const MAX_ITEMS: usize = 1 << 24;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("IDX header truncated at byte {at}")))
}

fn magic(bytes: &[u8], expected: u32) -> Result<()> {
    let m = be_u32(bytes, 0)?;
    if m != expected {
        return Err(Error::Format(format!(
            "bad IDX magic {m:#010x}, expected {expected:#010x}"
        )));
    }
    Ok(())
}

/// Raw `u8` images: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    magic(bytes, IMAGES_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if n > MAX_ITEMS || rows == 0 || cols == 0 || rows > 4096 || cols > 4096 {
        return Err(Error::Format(format!("implausible IDX header {n}x{rows}x{cols}")));
    }
    let len = n * rows * cols;
    let body = &bytes[16..];
    if body.len() != len {
        return Err(Error::Format(format!(
            "IDX image payload has {} bytes, header promises {len}",
            body.len()
        )));
    }
    Ok((n, rows, cols, body.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    magic(bytes, LABELS_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    if n > MAX_ITEMS {
        return Err(Error::Format(format!("implausible IDX label count {n}")));
    }
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format(format!(
            "IDX label payload has {} bytes, header promises {n}",
            body.len()
        )));
    }
    Ok(body.to_vec())
}

/// Reads a file, transparently inflating gzip.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Images scaled by 1/255 together with their labels.
pub fn decode_idx_pair(images: &[u8], labels: &[u8]) -> Result<(ImageBatch, Vec<usize>)> {
    let (n, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != n {
        return Err(Error::Format(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    let values = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let batch = ImageBatch::new(values, n, (1, rows, cols))?;
    Ok((batch, labels.into_iter().map(usize::from).collect()))
}

pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<(ImageBatch, Vec<usize>)> {
    decode_idx_pair(&read_maybe_gz(images)?, &read_maybe_gz(labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images_file(n: u32, rows: u32, cols: u32, body: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IMAGES_MAGIC, n, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(body);
        v
    }

    fn labels_file(body: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        v.extend_from_slice(&(body.len() as u32).to_be_bytes());
        v.extend_from_slice(body);
        v
    }

    #[test]
    fn parses_and_scales() {
        let img = images_file(2, 2, 2, &[0, 255, 51, 102, 1, 2, 3, 4]);
        let (batch, labels) = decode_idx_pair(&img, &labels_file(&[7, 1])).unwrap();
        assert_eq!(batch.len(), 2);
        assert_eq!(batch.shape(), (1, 2, 2));
        assert_eq!(batch.image(0)[1], 1.0);
        assert!((batch.image(0)[2] - 0.2).abs() < 1e-7);
        assert_eq!(labels, vec![7, 1]);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let mut img = images_file(1, 2, 2, &[0; 4]);
        assert!(parse_idx_images(&img[..img.len() - 1]).is_err());
        assert!(parse_idx_images(&img[..10]).is_err());
        img[3] = 0x01;
        assert!(matches!(parse_idx_images(&img), Err(Error::Format(_))));
        assert!(parse_idx_labels(&images_file(1, 1, 1, &[0])).is_err());
    }

    #[test]
    fn count_mismatch_is_an_error() {
        let img = images_file(2, 1, 1, &[0, 0]);
        assert!(decode_idx_pair(&img, &labels_file(&[1])).is_err());
    }

    #[test]
    fn reads_gzip_files() {
        use flate2::{write::GzEncoder, Compression};
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let raw = labels_file(&[3, 1, 4]);
        let path = dir.path().join("labels.gz");
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&raw).unwrap();
        std::fs::write(&path, enc.finish().unwrap()).unwrap();
        assert_eq!(read_maybe_gz(&path).unwrap(), raw);
    }
}
