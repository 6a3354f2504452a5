//! The learned parts of the model: recognition encoder `q(z|x,y)`, decoder
//! `p(x|y,z)`, prior encoder `p(z|y)` and their label embeddings.

mod arch;
mod model;
pub mod ops;

pub use arch::{ArchKind, Architecture, ConvLayer};
pub use model::{GdvaeModel, ModelConfig, ParamStore};

use candle_core::{DType, Device, Tensor};

use crate::error::{check_dim, Error, Result};
use crate::gaussian::{Covariance, DiagGaussian, GdaParams};

/// Interface the inference, counterfactual and loss code is written against.
///
/// Images are `[B, C, H, W]` tensors; latents are `[B, M]`.
pub trait GdvaeNet: Send + Sync {
    fn num_classes(&self) -> usize;
    fn latent_dim(&self) -> usize;
    fn image_shape(&self) -> (usize, usize, usize);
    fn device(&self) -> &Device;
    fn dtype(&self) -> DType;
    fn shared_covariance(&self) -> bool;
    /// Fixed `log p(y)`.
    fn class_log_prior(&self) -> Vec<f64>;
    /// Mean and log-variance of `q(z | x, y)`, each `[B, M]`.
    fn encode(&self, x: &Tensor, y: &[usize]) -> Result<(Tensor, Tensor)>;
    /// Decoder output before clamping to the pixel range.
    fn decode_raw(&self, z: &Tensor, y: &[usize]) -> Result<Tensor>;
    /// Mean and log-variance of `p(z | y)` for every class, each `[K, M]`.
    fn prior(&self) -> Result<(Tensor, Tensor)>;
}

pub fn one_hot(labels: &[usize], k: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = vec![0f64; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::ClassOutOfRange { index: y, classes: k });
        }
        data[i * k + y] = 1.0;
    }
    Ok(Tensor::from_vec(data, (labels.len(), k), device)?.to_dtype(dtype)?)
}

pub(crate) fn rows_f64(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

/// Rows of latents as a `[N, M]` tensor.
pub fn latents_tensor(
    rows: &[Vec<f64>],
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let m = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    check_dim(rows.len() * m, flat.len())?;
    Ok(Tensor::from_vec(flat, (rows.len(), m), device)?.to_dtype(dtype)?)
}

/// `q(z | x, y)` for a batch as plain Gaussians.
pub fn encode_gaussians<N: GdvaeNet + ?Sized>(
    net: &N,
    x: &Tensor,
    y: &[usize],
) -> Result<Vec<DiagGaussian>> {
    let (mean, log_var) = net.encode(x, y)?;
    rows_f64(&mean)?
        .into_iter()
        .zip(rows_f64(&log_var)?)
        .map(|(m, l)| DiagGaussian::new(m, l))
        .collect()
}

/// `q(z | x, y)` for every class: result is indexed `[image][class]`.
pub fn encode_all_classes<N: GdvaeNet + ?Sized>(
    net: &N,
    x: &Tensor,
) -> Result<Vec<Vec<DiagGaussian>>> {
    let b = x.dim(0)?;
    let k = net.num_classes();
    let mut out = vec![Vec::with_capacity(k); b];
    for class in 0..k {
        for (i, g) in encode_gaussians(net, x, &vec![class; b])?
            .into_iter()
            .enumerate()
        {
            out[i].push(g);
        }
    }
    Ok(out)
}

/// Decoder output clamped to `[0, 1]`.
pub fn decode<N: GdvaeNet + ?Sized>(net: &N, z: &Tensor, y: &[usize]) -> Result<Tensor> {
    Ok(net.decode_raw(z, y)?.clamp(0.0, 1.0)?)
}

/// `p(z | y)` for every class.
pub fn prior_gaussians<N: GdvaeNet + ?Sized>(net: &N) -> Result<Vec<DiagGaussian>> {
    let (mean, log_var) = net.prior()?;
    rows_f64(&mean)?
        .into_iter()
        .zip(rows_f64(&log_var)?)
        .map(|(m, l)| DiagGaussian::new(m, l))
        .collect()
}

/// The latent discriminant classifier defined by the prior encoder and the
/// fixed class prior.
pub fn gda_params<N: GdvaeNet + ?Sized>(net: &N) -> Result<GdaParams> {
    let priors = prior_gaussians(net)?;
    let means = priors.iter().map(|g| g.mean().to_vec()).collect();
    let covariance = if net.shared_covariance() {
        Covariance::Shared(priors[0].log_var().to_vec())
    } else {
        Covariance::PerClass(priors.iter().map(|g| g.log_var().to_vec()).collect())
    };
    GdaParams::new(means, covariance, net.class_log_prior())
}

/// `mean + exp(½·log_var) ⊙ noise`.
pub fn reparameterize(g: &DiagGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    check_dim(g.dim(), noise.len())?;
    Ok(g.mean()
        .iter()
        .zip(g.std_dev())
        .zip(noise)
        .map(|((m, s), n)| m + s * n)
        .collect())
}

/// Decoded prototypes `g(μ_{z|y})`, one per class, as `[K, C, H, W]`.
pub fn prototypes<N: GdvaeNet + ?Sized>(net: &N) -> Result<Tensor> {
    sample_class_consistent(net, &vec![0.0; net.latent_dim()]).map(|(x, _)| x)
}

/// Decodes `μ_{z|y} + σ_{z|y} ⊙ eps` for every class `y`, returning the
/// images `[K, C, H, W]` and the latents used.
pub fn sample_class_consistent<N: GdvaeNet + ?Sized>(
    net: &N,
    eps: &[f64],
) -> Result<(Tensor, Vec<Vec<f64>>)> {
    let latents = prior_gaussians(net)?
        .iter()
        .map(|g| reparameterize(g, eps))
        .collect::<Result<Vec<_>>>()?;
    let z = latents_tensor(&latents, net.dtype(), net.device())?;
    let labels: Vec<usize> = (0..net.num_classes()).collect();
    Ok((decode(net, &z, &labels)?, latents))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reparameterize_examples() {
        let g = DiagGaussian::new(vec![0.5, -1.0], vec![0.3, -0.2]).unwrap();
        assert_eq!(reparameterize(&g, &[0.0, 0.0]).unwrap(), vec![0.5, -1.0]);
        let std = DiagGaussian::standard(2);
        assert_eq!(reparameterize(&std, &[0.7, -1.3]).unwrap(), vec![0.7, -1.3]);
        let g = DiagGaussian::new(vec![1.0], vec![(4.0f64).ln()]).unwrap();
        assert!((reparameterize(&g, &[1.0]).unwrap()[0] - 3.0).abs() < 1e-12);
        assert!(reparameterize(&g, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn one_hot_rejects_bad_labels() {
        let t = one_hot(&[1, 0], 2, DType::F64, &Device::Cpu).unwrap();
        assert_eq!(t.to_vec2::<f64>().unwrap(), vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert!(one_hot(&[2], 2, DType::F64, &Device::Cpu).is_err());
    }
}
