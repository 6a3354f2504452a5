use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named network layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    /// 28×28 digits: three convolutions down to 256×4×4 and back.
    Mnist,
    /// 16×16 synthetic images.
    Blobs,
    /// 8×8 inputs with two small convolutions, for gradient checks and goldens.
    Tiny,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

const fn conv(channels: usize, kernel: usize, stride: usize) -> ConvLayer {
    ConvLayer {
        channels,
        kernel,
        stride,
    }
}

/// Image shape plus the convolution stacks of encoder and decoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// `(C, H, W)` of the modelled images.
    pub image: (usize, usize, usize),
    pub encoder: Vec<ConvLayer>,
    /// `(C, H, W)` the decoder's first fully connected layer is reshaped to.
    pub decoder_seed: (usize, usize, usize),
    pub decoder: Vec<ConvLayer>,
}

impl Architecture {
    pub fn preset(kind: ArchKind) -> Self {
        match kind {
            ArchKind::Mnist => Self {
                image: (1, 28, 28),
                encoder: vec![conv(64, 6, 2), conv(128, 5, 1), conv(256, 5, 1)],
                decoder_seed: (256, 4, 4),
                decoder: vec![conv(128, 5, 1), conv(64, 5, 1), conv(1, 6, 2)],
            },
            ArchKind::Blobs => Self {
                image: (1, 16, 16),
                encoder: vec![conv(16, 4, 2), conv(32, 3, 1), conv(64, 3, 1)],
                decoder_seed: (64, 3, 3),
                decoder: vec![conv(32, 3, 1), conv(16, 3, 1), conv(1, 4, 2)],
            },
            ArchKind::Tiny => Self {
                image: (1, 8, 8),
                encoder: vec![conv(4, 3, 1), conv(8, 3, 1)],
                decoder_seed: (8, 4, 4),
                decoder: vec![conv(4, 3, 1), conv(1, 3, 1)],
            },
        }
    }

    /// Shape after the encoder's convolutions. The encoder input has one extra
    /// channel carrying the label embedding.
    pub fn encoder_output(&self) -> Result<(usize, usize, usize)> {
        let (c, mut h, mut w) = self.image;
        let mut ch = c + 1;
        for l in &self.encoder {
            if l.kernel > h || l.kernel > w || l.stride == 0 {
                return Err(Error::InvalidArgument(format!(
                    "encoder layer {l:?} does not fit a {h}x{w} input"
                )));
            }
            h = (h - l.kernel) / l.stride + 1;
            w = (w - l.kernel) / l.stride + 1;
            ch = l.channels;
        }
        Ok((ch, h, w))
    }

    pub fn decoder_output(&self) -> (usize, usize, usize) {
        let (mut ch, mut h, mut w) = self.decoder_seed;
        for l in &self.decoder {
            h = (h - 1) * l.stride + l.kernel;
            w = (w - 1) * l.stride + l.kernel;
            ch = l.channels;
        }
        (ch, h, w)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_output()?;
        if self.encoder.is_empty() || self.decoder.is_empty() {
            return Err(Error::InvalidArgument("empty convolution stack".into()));
        }
        let out = self.decoder_output();
        if out != self.image {
            return Err(Error::InvalidArgument(format!(
                "decoder produces {out:?}, images are {:?}",
                self.image
            )));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.image.0 * self.image.1 * self.image.2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_consistent() {
        for kind in [ArchKind::Mnist, ArchKind::Blobs, ArchKind::Tiny] {
            Architecture::preset(kind).validate().unwrap();
        }
        let mnist = Architecture::preset(ArchKind::Mnist);
        assert_eq!(mnist.encoder_output().unwrap(), (256, 4, 4));
        assert_eq!(mnist.decoder_output(), (1, 28, 28));
        assert_eq!(Architecture::preset(ArchKind::Tiny).encoder_output().unwrap(), (8, 4, 4));
    }

    #[test]
    fn mismatched_decoder_is_rejected() {
        let mut a = Architecture::preset(ArchKind::Tiny);
        a.decoder[1].kernel = 2;
        assert!(a.validate().is_err());
    }
}
