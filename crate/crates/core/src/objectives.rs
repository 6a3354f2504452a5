//! Training objective: the conditional and classifier ELBOs sharing one
//! reconstruction term, plus the counterfactual consistency regularizer.
//!
//! Everything here is written on tensors so that it can be differentiated.
//! All randomness is drawn up front into a [`LossNoise`], which makes the
//! loss a deterministic function of the parameters.

use candle_core::{DType, Device, Tensor, D};
use candle_nn::ops::log_softmax;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{LossSettings, TrainConfig};
use crate::em::EmMode;
use crate::error::{check_dim, Error, Result};
use crate::gaussian::argmax;
use crate::nets::GdvaeNet;
use crate::seeding::stream_u64;

/// Per-term loss values, each averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub kl_cvae: f64,
    pub prior_term: f64,
    pub kl_vae: f64,
    /// Unscaled `−log p(y_true | z*)`.
    pub cls: f64,
    pub consistency: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recombines the terms with the given weights.
    pub fn combine(&self, alpha: f64, beta: f64, gamma: f64, cls_scale: f64) -> f64 {
        (alpha + beta) * self.rec
            + alpha * (self.kl_cvae + self.prior_term)
            + beta * (self.kl_vae + cls_scale * self.cls)
            + gamma * self.consistency
    }

    pub fn is_finite(&self) -> bool {
        [
            self.rec,
            self.kl_cvae,
            self.prior_term,
            self.kl_vae,
            self.cls,
            self.consistency,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Differentiable total plus its parts.
pub struct LossOutput {
    /// Scalar tensor connected to the model parameters.
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

/// Every random number the loss consumes for a batch of `B` images.
#[derive(Clone, Debug, PartialEq)]
pub struct LossNoise {
    pub batch: usize,
    pub latent_dim: usize,
    /// Class picks for stochastic EM, `[T][S][B]` in `[0, 1)`.
    pub em_uniform: Vec<f64>,
    /// Latent noise for stochastic EM, `[T][S][B][M]`.
    pub em_normal: Vec<f64>,
    /// Class picks for `y*`, `[O][B]`.
    pub y_uniform: Vec<f64>,
    /// Latent noise for `z*`, `[O][B][M]`.
    pub z_normal: Vec<f64>,
    /// Consistency targets `δ`, `[n][B]`.
    pub delta: Vec<f64>,
    /// Whether the global explainer is used, `[n][B]`.
    pub global: Vec<bool>,
}

impl LossNoise {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, batch: usize, latent_dim: usize, cfg: &TrainConfig) -> Self {
        let (s, t, o, n) = (
            cfg.em.samples,
            cfg.em.iterations,
            cfg.expectation_samples,
            cfg.consistency_samples,
        );
        let stochastic = matches!(cfg.em.mode, EmMode::Stochastic { .. });
        let em_count = if stochastic { t * s * batch } else { 0 };
        let mut uniform = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random::<f64>()).collect() };
        let em_uniform = uniform(em_count);
        let y_uniform = uniform(o * batch);
        let mut normal = |len: usize| -> Vec<f64> {
            (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let em_normal = normal(em_count * latent_dim);
        let z_normal = normal(o * batch * latent_dim);
        let eps = cfg.epsilon;
        let delta = (0..n * batch)
            .map(|_| if eps > 0.0 { rng.random_range(-eps..eps) } else { 0.0 })
            .collect();
        let global = (0..n * batch).map(|_| rng.random_bool(0.5)).collect();
        Self {
            batch,
            latent_dim,
            em_uniform,
            em_normal,
            y_uniform,
            z_normal,
            delta,
            global,
        }
    }

    /// Noise for one training chunk.
    pub fn for_step(seed: u64, epoch: usize, step: usize, chunk: usize, batch: usize, latent_dim: usize, cfg: &TrainConfig) -> Self {
        let mut rng = stream_u64(seed, &[0x4c4f5353, epoch as u64, step as u64, chunk as u64]);
        Self::draw(&mut rng, batch, latent_dim, cfg)
    }
}

fn constant(data: Vec<f64>, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

fn mask(indices: &[usize], k: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = vec![0.0; indices.len() * k];
    for (i, &c) in indices.iter().enumerate() {
        data[i * k + c] = 1.0;
    }
    constant(data, &[indices.len(), k], dtype, device)
}

/// Index of the first class whose cumulative probability exceeds `u`.
fn pick(probs: &[f64], u: f64) -> usize {
    let total: f64 = probs.iter().sum();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p / total;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// `KL(N(mq, e^lq) ‖ N(mp, e^lp))` summed over the last axis: `[N, M] → [N]`.
pub fn kl_diag_tensor(mq: &Tensor, lq: &Tensor, mp: &Tensor, lp: &Tensor) -> Result<Tensor> {
    let ratio = (lq.exp()? + (mq - mp)?.sqr()?)?.div(&lp.exp()?)?;
    let inner = ((lp - lq)? + ratio)?.affine(1.0, -1.0)?;
    Ok((inner.sum(D::Minus1)? * 0.5)?)
}

/// `log p(y | z)` of the latent discriminant classifier, `[N, M] → [N, K]`.
pub fn gda_log_posterior_tensor(z: &Tensor, prior_mean: &Tensor, prior_log_var: &Tensor, log_prior: &Tensor) -> Result<Tensor> {
    let diff = z.unsqueeze(1)?.broadcast_sub(&prior_mean.unsqueeze(0)?)?;
    let prec = prior_log_var.neg()?.exp()?.unsqueeze(0)?;
    let quad = diff.sqr()?.broadcast_mul(&prec)?.sum(D::Minus1)?;
    let log_det = prior_log_var.sum(D::Minus1)?;
    let log_joint = (quad * -0.5)?
        .broadcast_sub(&(log_det * 0.5)?.unsqueeze(0)?)?
        .broadcast_add(&log_prior.unsqueeze(0)?)?;
    Ok(log_softmax(&log_joint, 1)?)
}

/// Gaussian negative log-likelihood per image with `Σ_x = σ²I`: `[B, …] → [B]`.
pub fn gaussian_nll(x: &Tensor, x_hat: &Tensor, sigma: f64) -> Result<Tensor> {
    let d = x.elem_count() / x.dim(0)?;
    let var = sigma * sigma;
    let sq = (x - x_hat)?.sqr()?.flatten_from(1)?.sum(1)?;
    let c = 0.5 * d as f64 * (2.0 * std::f64::consts::PI * var).ln();
    Ok(sq.affine(0.5 / var, c)?)
}

/// Encodings of every image under every class label and the prior.
struct Forward {
    b: usize,
    k: usize,
    m: usize,
    /// `[B, K, M]`.
    mean: Tensor,
    log_var: Tensor,
    prior_mean: Tensor,
    prior_log_var: Tensor,
    log_prior: Tensor,
    log_prior_vec: Vec<f64>,
}

impl Forward {
    fn new<N: GdvaeNet + ?Sized>(net: &N, x: &Tensor) -> Result<Self> {
        let b = x.dim(0)?;
        let k = net.num_classes();
        let m = net.latent_dim();
        let xs = Tensor::cat(&vec![x.clone(); k], 0)?;
        let labels: Vec<usize> = (0..k).flat_map(|c| std::iter::repeat_n(c, b)).collect();
        let (mean, log_var) = net.encode(&xs, &labels)?;
        let mean = mean.reshape((k, b, m))?.transpose(0, 1)?.contiguous()?;
        let log_var = log_var.reshape((k, b, m))?.transpose(0, 1)?.contiguous()?;
        let (prior_mean, prior_log_var) = net.prior()?;
        let log_prior_vec = net.class_log_prior();
        let log_prior = constant(log_prior_vec.clone(), &[k], net.dtype(), net.device())?;
        Ok(Self {
            b,
            k,
            m,
            mean,
            log_var,
            prior_mean,
            prior_log_var,
            log_prior,
            log_prior_vec,
        })
    }

    fn log_posterior(&self, z: &Tensor) -> Result<Tensor> {
        gda_log_posterior_tensor(z, &self.prior_mean, &self.prior_log_var, &self.log_prior)
    }

    /// Selects class `classes[r]` of image `images[r]`: `([R, M], [R, M])`.
    fn select(&self, images: &[usize], classes: &[usize]) -> Result<(Tensor, Tensor)> {
        let dev = self.mean.device();
        let idx = Tensor::from_vec(images.iter().map(|&i| i as u32).collect::<Vec<_>>(), images.len(), dev)?;
        let mk = mask(classes, self.k, self.mean.dtype(), dev)?.unsqueeze(2)?;
        let pick = |t: &Tensor| -> Result<Tensor> {
            Ok(t.index_select(&idx, 0)?.broadcast_mul(&mk)?.sum(1)?)
        };
        Ok((pick(&self.mean)?, pick(&self.log_var)?))
    }

    /// `Σ_y q(y) mean(q(z|x,y))`: `[B, K] → [B, M]`.
    fn mixture_mean(&self, q: &Tensor) -> Result<Tensor> {
        Ok(self.mean.broadcast_mul(&q.unsqueeze(2)?)?.sum(1)?)
    }

    /// Differentiable EM classifier, returning `q(y|x)` as `[B, K]`.
    fn em(&self, cfg: &TrainConfig, noise: &LossNoise) -> Result<Tensor> {
        let (b, k, m) = (self.b, self.k, self.m);
        let dtype = self.mean.dtype();
        let dev = self.mean.device().clone();
        let prior: Vec<f64> = self.log_prior_vec.iter().map(|v| v.exp()).collect();
        let mut q = constant(prior.repeat(b), &[b, k], dtype, &dev)?;
        let (s, t_max) = (cfg.em.samples, cfg.em.iterations);
        for t in 0..t_max {
            if cfg.em_detach_early_iterations && t + 1 < t_max {
                q = q.detach();
            }
            q = match cfg.em.mode {
                EmMode::MeanOnly => self.log_posterior(&self.mixture_mean(&q)?)?.exp()?,
                EmMode::Stochastic { .. } => {
                    let probs = q.to_dtype(DType::F64)?.to_vec2::<f64>()?;
                    let mut images = Vec::with_capacity(s * b);
                    let mut classes = Vec::with_capacity(s * b);
                    for si in 0..s {
                        for (bi, p) in probs.iter().enumerate() {
                            images.push(bi);
                            classes.push(pick(p, noise.em_uniform[(t * s + si) * b + bi]));
                        }
                    }
                    let (mu, lv) = self.select(&images, &classes)?;
                    let off = t * s * b * m;
                    let eps = constant(noise.em_normal[off..off + s * b * m].to_vec(), &[s * b, m], dtype, &dev)?;
                    let z = (mu + (lv * 0.5)?.exp()?.mul(&eps)?)?;
                    self.log_posterior(&z)?.exp()?.reshape((s, b, k))?.mean(0)?
                }
            };
        }
        Ok(q)
    }
}

fn scalar_mean(t: &Tensor) -> Result<f64> {
    Ok(t.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// The full training loss for a batch with labels `y`, using pre-drawn noise.
pub fn total_loss_with_noise<N: GdvaeNet + ?Sized>(
    net: &N,
    x: &Tensor,
    y: &[usize],
    cfg: &TrainConfig,
    settings: &LossSettings,
    noise: &LossNoise,
) -> Result<LossOutput> {
    let fw = Forward::new(net, x)?;
    let (b, k, m) = (fw.b, fw.k, fw.m);
    check_dim(b, y.len())?;
    check_dim(b, noise.batch)?;
    check_dim(m, noise.latent_dim)?;
    if let Some(&bad) = y.iter().find(|&&c| c >= k) {
        return Err(Error::ClassOutOfRange { index: bad, classes: k });
    }
    let dtype = net.dtype();
    let dev = net.device().clone();
    let images: Vec<usize> = (0..b).collect();

    let (mu_y, lv_y) = fw.select(&images, y)?;
    let y_mask = mask(y, k, dtype, &dev)?;
    let pm_y = y_mask.matmul(&fw.prior_mean)?;
    let plv_y = y_mask.matmul(&fw.prior_log_var)?;
    let kl_cvae = kl_diag_tensor(&mu_y, &lv_y, &pm_y, &plv_y)?;
    let kl_vae = kl_diag_tensor(&mu_y, &lv_y, &mu_y.zeros_like()?, &lv_y.zeros_like()?)?;
    let prior_vals: Vec<f64> = y.iter().map(|&c| -fw.log_prior_vec[c]).collect();
    let prior_term = constant(prior_vals, &[b], dtype, &dev)?;

    let q = fw.em(cfg, noise)?;
    let q_vals = q.to_dtype(DType::F64)?.to_vec2::<f64>()?;

    // Reconstruction and classification expectations over O draws of (y*, z*).
    let o = cfg.expectation_samples;
    let mut rec = Vec::with_capacity(o);
    let mut cls = Vec::with_capacity(o);
    let y_idx = Tensor::from_vec(y.iter().map(|&c| c as u32).collect::<Vec<_>>(), (b, 1), &dev)?;
    for oi in 0..o {
        let eps = constant(noise.z_normal[oi * b * m..(oi + 1) * b * m].to_vec(), &[b, m], dtype, &dev)?;
        let (y_star, z_star) = if !settings.marginal_expectations {
            (y.to_vec(), (&mu_y + (&lv_y * 0.5)?.exp()?.mul(&eps)?)?)
        } else {
            match cfg.em.mode {
                EmMode::MeanOnly => {
                    let ys: Vec<usize> = q_vals.iter().map(|p| argmax(p)).collect();
                    (ys, fw.mixture_mean(&q)?)
                }
                EmMode::Stochastic { .. } => {
                    let ys: Vec<usize> = q_vals
                        .iter()
                        .enumerate()
                        .map(|(i, p)| pick(p, noise.y_uniform[oi * b + i]))
                        .collect();
                    let (mu, lv) = fw.select(&images, &ys)?;
                    (ys, (mu + (lv * 0.5)?.exp()?.mul(&eps)?)?)
                }
            }
        };
        let x_hat = net.decode_raw(&z_star, &y_star)?;
        rec.push(gaussian_nll(x, &x_hat, settings.sigma_x)?);
        let logp = fw.log_posterior(&z_star)?.gather(&y_idx, 1)?.squeeze(1)?;
        cls.push(logp.neg()?);
    }
    let rec = (Tensor::stack(&rec, 0)?.mean(0)?).mean_all()?;
    let cls = (Tensor::stack(&cls, 0)?.mean(0)?).mean_all()?;
    let kl_cvae = kl_cvae.mean_all()?;
    let kl_vae = kl_vae.mean_all()?;
    let prior_term = prior_term.mean_all()?;

    let use_con = cfg.gamma > 0.0 && cfg.consistency_samples > 0;
    let consistency = if use_con {
        consistency_from_forward(net, &fw, &q_vals, cfg.consistency_samples, noise)?
    } else {
        Tensor::zeros((), dtype, &dev)?
    };

    let (alpha, beta, gamma) = (cfg.alpha, cfg.beta, cfg.gamma);
    let total = ((&rec * (alpha + beta))?
        + ((&kl_cvae + &prior_term)? * alpha)?
        + ((&kl_vae + (&cls * settings.cls_scale)?)? * beta)?
        + (&consistency * gamma)?)?;
    let breakdown = LossBreakdown {
        rec: scalar_mean(&rec)?,
        kl_cvae: scalar_mean(&kl_cvae)?,
        prior_term: scalar_mean(&prior_term)?,
        kl_vae: scalar_mean(&kl_vae)?,
        cls: scalar_mean(&cls)?,
        consistency: scalar_mean(&consistency)?,
        total: scalar_mean(&total)?,
    };
    Ok(LossOutput { total, breakdown })
}

/// Consistency regularizer: for random targets `δ`, shift the latent mean of
/// the predicted class along a randomly chosen explainer (local L2 or
/// global), decode, re-encode and compare the new posterior with the
/// shifted one (same variance).
fn consistency_from_forward<N: GdvaeNet + ?Sized>(
    net: &N,
    fw: &Forward,
    q_vals: &[Vec<f64>],
    n: usize,
    noise: &LossNoise,
) -> Result<Tensor> {
    if fw.k != 2 {
        return Err(Error::InvalidArgument(format!(
            "consistency loss needs two classes, model has {}",
            fw.k
        )));
    }
    if !net.shared_covariance() {
        return Err(Error::SharedCovarianceRequired);
    }
    let (b, m) = (fw.b, fw.m);
    let dtype = net.dtype();
    let dev = net.device().clone();
    let r = n * b;
    let mut images = Vec::with_capacity(r);
    let mut src = Vec::with_capacity(r);
    let mut dst = Vec::with_capacity(r);
    for _ in 0..n {
        for (bi, p) in q_vals.iter().enumerate() {
            let c = argmax(p);
            images.push(bi);
            src.push(c);
            dst.push(1 - c);
        }
    }
    let (z, lv) = fw.select(&images, &src)?;
    let (prior_mean, prior_log_var) = (&fw.prior_mean, &fw.prior_log_var);

    // Discriminant of class 0 against class 1 under the shared covariance.
    let prec = prior_log_var.get(0)?.neg()?.exp()?;
    let mu0 = prior_mean.get(0)?;
    let mu1 = prior_mean.get(1)?;
    let w0 = (&mu0 * &prec)?;
    let w1 = (&mu1 * &prec)?;
    let w01 = (&w0 - &w1)?;
    let b01 = (((&w0 * &mu0)?.sum_all()? * -0.5)? + ((&w1 * &mu1)?.sum_all()? * 0.5)?)?
        .affine(1.0, fw.log_prior_vec[0] - fw.log_prior_vec[1])?;
    let sign: Vec<f64> = src.iter().map(|&c| if c == 0 { 1.0 } else { -1.0 }).collect();
    let sign = constant(sign, &[r, 1], dtype, &dev)?;
    let w = sign.broadcast_mul(&w01.unsqueeze(0)?)?;
    let bias = sign.broadcast_mul(&b01.reshape((1, 1))?)?;

    let dst_mean = mask(&dst, 2, dtype, &dev)?.matmul(prior_mean)?;
    let w_global = (dst_mean - &z)?;
    let den_global = (&w * &w_global)?.sum(1)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let use_global: Vec<f64> = noise
        .global
        .iter()
        .zip(&den_global)
        .map(|(&g, d)| if g && d.abs() >= crate::counterfactual::DEGENERATE_TOL { 1.0 } else { 0.0 })
        .collect();
    let g = constant(use_global, &[r, 1], dtype, &dev)?;
    let w_bar = (w_global.broadcast_mul(&g)? + w.broadcast_mul(&g.affine(-1.0, 1.0)?)?)?;
    let den = (&w * &w_bar)?.sum_keepdim(1)?;
    let den_vals = den.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if let Some(d) = den_vals.iter().find(|d| d.abs() < crate::counterfactual::DEGENERATE_TOL) {
        return Err(Error::DegenerateDirection(d.abs()));
    }
    let delta = constant(noise.delta[..r].to_vec(), &[r, 1], dtype, &dev)?;
    let f = ((&w * &z)?.sum_keepdim(1)? + bias)?;
    let kappa = ((delta - f)? / den)?;
    let z_delta = (&z + w_bar.broadcast_mul(&kappa)?)?;
    let y_delta: Vec<usize> = noise.delta[..r]
        .iter()
        .zip(src.iter().zip(&dst))
        .map(|(d, (&c, &k))| {
            if *d > 0.0 {
                c
            } else if *d < 0.0 {
                k
            } else {
                c.min(k)
            }
        })
        .collect();
    let x_delta = net.decode_raw(&z_delta, &y_delta)?;
    let x_delta = x_delta.clamp(0.0, 1.0)?;
    let (mu_re, lv_re) = net.encode(&x_delta, &y_delta)?;
    debug_assert_eq!(mu_re.dims2()?, (r, m));
    Ok(kl_diag_tensor(&mu_re, &lv_re, &z_delta, &lv)?.mean_all()?)
}

/// [`total_loss_with_noise`] with noise derived from `seed`.
pub fn total_loss<N: GdvaeNet + ?Sized>(
    net: &N,
    x: &Tensor,
    y: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<LossOutput> {
    let (c, h, w) = net.image_shape();
    let settings = cfg.loss_settings(c * h * w)?;
    let mut rng = stream_u64(seed, &[0x4c4f5353]);
    let noise = LossNoise::draw(&mut rng, x.dim(0)?, net.latent_dim(), cfg);
    total_loss_with_noise(net, x, y, cfg, &settings, &noise)
}
