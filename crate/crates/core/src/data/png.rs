//! 8-bit grayscale PNG conversion for single images.

use std::io::Cursor;

use png::{BitDepth, ColorType, Decoder, Encoder, Transformations};

use crate::error::{Error, Result};

// Upper bound on decoded pixels; protects against decompression bombs.
const MAX_PIXELS: usize = 4096 * 4096;

/// Encodes one `H×W` image with values in `[0, 1]` as grayscale PNG.
pub fn encode_gray(pixels: &[f32], height: usize, width: usize) -> Result<Vec<u8>> {
    crate::error::check_dim(height * width, pixels.len())?;
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut out = Vec::new();
    {
        let mut enc = Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(ColorType::Grayscale);
        enc.set_depth(BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Format(format!("png encode: {e}")))?;
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::Format(format!("png encode: {e}")))?;
    }
    Ok(out)
}

/// Decodes any PNG into luminance values in `[0, 1]`: `(height, width, pixels)`.
/// Colour images are converted with Rec. 601 weights; alpha is ignored.
pub fn decode_gray(data: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let bad = |e: png::DecodingError| Error::Format(format!("png decode: {e}"));
    let mut dec = Decoder::new(Cursor::new(data));
    dec.set_transformations(Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(bad)?;
    let (w, h) = {
        let info = reader.info();
        (info.width as usize, info.height as usize)
    };
    if w * h > MAX_PIXELS {
        return Err(Error::Format(format!("png of {w}x{h} pixels is too large")));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("png too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(bad)?;
    let channels = match frame.color_type {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => {
            return Err(Error::Format("indexed png was not expanded".into()));
        }
    };
    let stride = frame.line_size;
    let mut out = Vec::with_capacity(w * h);
    for r in 0..h {
        let line = &buf[r * stride..r * stride + w * channels];
        for px in line.chunks_exact(channels) {
            let v = if channels >= 3 {
                0.299 * px[0] as f32 + 0.587 * px[1] as f32 + 0.114 * px[2] as f32
            } else {
                px[0] as f32
            };
            out.push((v / 255.0).clamp(0.0, 1.0));
        }
    }
    Ok((h, w, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_on_the_8_bit_grid() {
        let px: Vec<f32> = (0..12).map(|i| (i * 20) as f32 / 255.0).collect();
        let png = encode_gray(&px, 3, 4).unwrap();
        let (h, w, back) = decode_gray(&png).unwrap();
        assert_eq!((h, w), (3, 4));
        for (a, b) in px.iter().zip(&back) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_gray(b"not a png").is_err());
        assert!(encode_gray(&[0.0; 3], 2, 2).is_err());
    }

    #[test]
    fn rgb_is_converted_to_luminance() {
        let mut out = Vec::new();
        {
            let mut enc = Encoder::new(&mut out, 1, 1);
            enc.set_color(ColorType::Rgb);
            enc.set_depth(BitDepth::Eight);
            enc.write_header().unwrap().write_image_data(&[255, 255, 255]).unwrap();
        }
        let (_, _, v) = decode_gray(&out).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-5);
    }
}
