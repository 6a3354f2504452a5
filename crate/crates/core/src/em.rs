//! Classification with an unknown label.
//!
//! The EM classifier starts from the class prior and alternates between
//! ancestral sampling from the marginal `q(z|x) = Σ_y q(z|x,y) q(y|x)` and
//! re-estimating `q(y|x)` as the average GDA posterior of the samples. The
//! importance-sampling classifier is the usual CVAE baseline.

use candle_core::Tensor;
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::error::{check_dim, Error, Result};
use crate::gaussian::{
    gaussian_log_pdf, gda_posterior, log_sum_exp, normalize_log, DiagGaussian, GdaParams,
};
use crate::nets::{encode_all_classes, latents_tensor, reparameterize, rows_f64, GdvaeNet};
use crate::seeding::per_image_streams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EmMode {
    /// Ancestral sampling with generators derived from `seed`.
    Stochastic { seed: u64 },
    /// A single deterministic point `Σ_y q(y|x)·mean(q(z|x,y))` per iteration.
    MeanOnly,
}

/// Samples `S` per iteration and number of iterations `T`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub samples: usize,
    pub iterations: usize,
    pub mode: EmMode,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            samples: 20,
            iterations: 3,
            mode: EmMode::Stochastic { seed: 0 },
        }
    }
}

impl EmConfig {
    pub fn mean_only() -> Self {
        Self {
            mode: EmMode::MeanOnly,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.iterations == 0 {
            return Err(Error::InvalidArgument("EM needs S >= 1 and T >= 1".into()));
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        match self.mode {
            EmMode::Stochastic { seed } => seed,
            EmMode::MeanOnly => 0,
        }
    }
}

/// `Σ_y p_y · mean_y`.
pub fn marginal_mean(encodings: &[DiagGaussian], class_probs: &[f64]) -> Result<Vec<f64>> {
    check_dim(encodings.len(), class_probs.len())?;
    let m = encodings.first().map_or(0, DiagGaussian::dim);
    let mut z = vec![0.0; m];
    for (g, p) in encodings.iter().zip(class_probs) {
        check_dim(m, g.dim())?;
        for (zj, mj) in z.iter_mut().zip(g.mean()) {
            *zj += p * mj;
        }
    }
    Ok(z)
}

fn categorical(probs: &[f64]) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(probs)
        .map_err(|e| Error::InvalidArgument(format!("bad class distribution: {e}")))
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R, m: usize) -> Vec<f64> {
    (0..m).map(|_| StandardNormal.sample(rng)).collect()
}

/// `n` ancestral samples: `y ~ Cat(class_probs)`, then `z ~ q(z|x,y)`.
pub fn marginal_sample<R: Rng + ?Sized>(
    encodings: &[DiagGaussian],
    class_probs: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    check_dim(encodings.len(), class_probs.len())?;
    let total: f64 = class_probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "class probabilities sum to {total}"
        )));
    }
    let cat = categorical(class_probs)?;
    (0..n)
        .map(|_| {
            let y = cat.sample(rng);
            let m = encodings[y].dim();
            reparameterize(&encodings[y], &standard_normal(rng, m))
        })
        .collect()
}

/// Runs the EM classifier on one image given `q(z|x,y)` for every class and
/// returns `q(y|x)` after every iteration; element 0 is the class prior.
pub fn em_trace<R: Rng + ?Sized>(
    encodings: &[DiagGaussian],
    gda: &GdaParams,
    cfg: &EmConfig,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let k = gda.num_classes();
    check_dim(k, encodings.len())?;
    let mut q: Vec<f64> = gda.class_log_prior().iter().map(|v| v.exp()).collect();
    let mut trace = vec![q.clone()];
    for _ in 0..cfg.iterations {
        let mut next = vec![0.0; k];
        match cfg.mode {
            EmMode::MeanOnly => {
                next = gda_posterior(gda, &marginal_mean(encodings, &q)?)?;
            }
            EmMode::Stochastic { .. } => {
                for z in marginal_sample(encodings, &q, cfg.samples, rng)? {
                    for (n, p) in next.iter_mut().zip(gda_posterior(gda, &z)?) {
                        *n += p;
                    }
                }
                let s = cfg.samples as f64;
                next.iter_mut().for_each(|v| *v /= s);
            }
        }
        q = next;
        trace.push(q.clone());
    }
    Ok(trace)
}

/// Final `q(y|x)` of [`em_trace`].
pub fn em_posterior<R: Rng + ?Sized>(
    encodings: &[DiagGaussian],
    gda: &GdaParams,
    cfg: &EmConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    Ok(em_trace(encodings, gda, cfg, rng)?.pop().unwrap_or_default())
}

/// EM traces for a `[B, C, H, W]` batch. In stochastic mode each image gets a
/// generator keyed by the seed and its own pixels.
pub fn em_classify_traces<N: GdvaeNet + ?Sized>(
    net: &N,
    gda: &GdaParams,
    x: &Tensor,
    cfg: &EmConfig,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let encodings = encode_all_classes(net, x)?;
    let mut rngs = per_image_streams(cfg.seed(), x)?;
    encodings
        .iter()
        .zip(rngs.iter_mut())
        .map(|(enc, rng)| em_trace(enc, gda, cfg, rng))
        .collect()
}

/// `q(y|x)` for every image of a `[B, C, H, W]` batch.
pub fn em_classify<N: GdvaeNet + ?Sized>(
    net: &N,
    gda: &GdaParams,
    x: &Tensor,
    cfg: &EmConfig,
) -> Result<Vec<Vec<f64>>> {
    Ok(em_classify_traces(net, gda, x, cfg)?
        .into_iter()
        .map(|mut t| t.pop().unwrap_or_default())
        .collect())
}

pub(crate) const CHUNK: usize = 256;

/// [`em_classify`] over an image batch, in bounded-size chunks.
pub fn em_classify_images<N: GdvaeNet + ?Sized>(
    net: &N,
    gda: &GdaParams,
    images: &ImageBatch,
    cfg: &EmConfig,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for start in (0..images.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(images.len());
        let x = images.range(start, end).to_tensor(net.dtype(), net.device())?;
        out.extend(em_classify(net, gda, &x, cfg)?);
    }
    Ok(out)
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Mean over images of `|H_t − H_{t−1}|` for `t = 1..=T`.
pub fn mean_entropy_changes(traces: &[Vec<Vec<f64>>]) -> Vec<f64> {
    let t = traces.first().map_or(0, |tr| tr.len().saturating_sub(1));
    let mut out = vec![0.0; t];
    for tr in traces {
        for i in 0..t {
            out[i] += (entropy(&tr[i + 1]) - entropy(&tr[i])).abs();
        }
    }
    out.iter_mut().for_each(|v| *v /= traces.len().max(1) as f64);
    out
}

/// Settings of the importance-sampling classifier.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsConfig {
    pub samples: usize,
    pub seed: u64,
    /// Decoder standard deviation of `p(x|y,z)`.
    pub sigma_x: f64,
}

impl Default for IsConfig {
    fn default() -> Self {
        Self {
            samples: 60,
            seed: 0,
            sigma_x: 0.6,
        }
    }
}

/// Gaussian log-likelihood `log N(x; mean, σ²I)` summed over pixels.
pub(crate) fn image_log_likelihood(x: &[f64], mean: &[f64], sigma: f64) -> f64 {
    let var = sigma * sigma;
    let norm = 0.5 * (2.0 * std::f64::consts::PI * var).ln();
    x.iter()
        .zip(mean)
        .map(|(a, b)| -norm - 0.5 * (a - b) * (a - b) / var)
        .sum()
}

// Rows handed to the decoder at once.
const DECODE_ROWS: usize = 1024;

fn decode_rows<N: GdvaeNet + ?Sized>(net: &N, z: &[Vec<f64>], y: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(z.len());
    for chunk in z.chunks(DECODE_ROWS) {
        let zt = latents_tensor(chunk, net.dtype(), net.device())?;
        let x = net.decode_raw(&zt, &vec![y; chunk.len()])?.flatten_from(1)?;
        out.extend(rows_f64(&x)?);
    }
    Ok(out)
}

/// Importance-sampling estimates `log p̂(x|y)` for every image and class:
/// `p̂(x|y) = (1/S) Σ_s p(x|y,z_s) p(z_s|y) / q(z_s|x,y)`, `z_s ~ q(z|x,y)`.
/// Also returns the standard error of `p̂` relative to `p̂`.
pub fn is_log_likelihood<N: GdvaeNet + ?Sized>(
    net: &N,
    x: &Tensor,
    cfg: &IsConfig,
) -> Result<Vec<Vec<(f64, f64)>>> {
    if cfg.samples == 0 {
        return Err(Error::InvalidArgument("importance sampling needs S >= 1".into()));
    }
    let b = x.dim(0)?;
    let k = net.num_classes();
    let encodings = encode_all_classes(net, x)?;
    let priors = crate::nets::prior_gaussians(net)?;
    let pixels = rows_f64(&x.flatten_from(1)?)?;
    let mut rngs = per_image_streams(cfg.seed, x)?;
    let s = cfg.samples;
    let mut out = vec![Vec::with_capacity(k); b];
    for y in 0..k {
        let mut latents = Vec::with_capacity(b * s);
        for i in 0..b {
            let g = &encodings[i][y];
            for _ in 0..s {
                latents.push(reparameterize(g, &standard_normal(&mut rngs[i], g.dim()))?);
            }
        }
        let decoded = decode_rows(net, &latents, y)?;
        for i in 0..b {
            let g = &encodings[i][y];
            let mut logw = Vec::with_capacity(s);
            for j in 0..s {
                let z = &latents[i * s + j];
                let lx = image_log_likelihood(&pixels[i], &decoded[i * s + j], cfg.sigma_x);
                logw.push(lx + gaussian_log_pdf(z, &priors[y])? - gaussian_log_pdf(z, g)?);
            }
            let lse = log_sum_exp(&logw);
            let est = lse - (s as f64).ln();
            // Relative standard error of the mean of the weights.
            let w: Vec<f64> = logw.iter().map(|l| (l - lse).exp() * s as f64).collect();
            let var = w.iter().map(|v| (v - 1.0) * (v - 1.0)).sum::<f64>()
                / (s.max(2) - 1) as f64;
            out[i].push((est, (var / s as f64).sqrt()));
        }
    }
    Ok(out)
}

/// Importance-sampling classifier: `p(y|x) ∝ p̂(x|y) p(y)`.
pub fn is_classify<N: GdvaeNet + ?Sized>(
    net: &N,
    x: &Tensor,
    cfg: &IsConfig,
) -> Result<Vec<Vec<f64>>> {
    let prior = net.class_log_prior();
    Ok(is_log_likelihood(net, x, cfg)?
        .into_iter()
        .map(|row| {
            let joint: Vec<f64> = row.iter().zip(&prior).map(|((l, _), p)| l + p).collect();
            normalize_log(&joint).into_iter().map(f64::exp).collect()
        })
        .collect())
}

/// [`is_classify`] over an image batch in bounded chunks.
pub fn is_classify_images<N: GdvaeNet + ?Sized>(
    net: &N,
    images: &ImageBatch,
    cfg: &IsConfig,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    let chunk = (DECODE_ROWS / cfg.samples.max(1)).max(1);
    for start in (0..images.len()).step_by(chunk) {
        let end = (start + chunk).min(images.len());
        let x = images.range(start, end).to_tensor(net.dtype(), net.device())?;
        out.extend(is_classify(net, &x, cfg)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::Covariance;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gda_pm1() -> GdaParams {
        GdaParams::shared_uniform(vec![vec![1.0, 0.0], vec![-1.0, 0.0]], vec![0.0, 0.0]).unwrap()
    }

    fn same_encoding(mean: [f64; 2], k: usize) -> Vec<DiagGaussian> {
        vec![DiagGaussian::new(mean.to_vec(), vec![0.0, 0.0]).unwrap(); k]
    }

    #[test]
    fn single_class_is_certain() {
        let gda = GdaParams::shared_uniform(vec![vec![0.3, 0.1]], vec![0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for cfg in [EmConfig::default(), EmConfig::mean_only()] {
            let q = em_posterior(&same_encoding([5.0, 5.0], 1), &gda, &cfg, &mut rng).unwrap();
            assert_eq!(q, vec![1.0]);
        }
    }

    #[test]
    fn mean_only_fixed_point() {
        let gda = gda_pm1();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in 1..6 {
            let cfg = EmConfig {
                iterations: t,
                ..EmConfig::mean_only()
            };
            let q = em_posterior(&same_encoding([1.0, 0.0], 2), &gda, &cfg, &mut rng).unwrap();
            assert!((q[0] - 0.880_797).abs() < 1e-6 && (q[1] - 0.119_203).abs() < 1e-6);
            let q = em_posterior(&same_encoding([0.0, 0.0], 2), &gda, &cfg, &mut rng).unwrap();
            assert!((q[0] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_posterior_returns_prior() {
        let gda = GdaParams::new(
            vec![vec![0.0, 0.0]; 3],
            Covariance::Shared(vec![0.0, 0.0]),
            vec![0.2f64.ln(), 0.3f64.ln(), 0.5f64.ln()],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = em_posterior(&same_encoding([2.0, -1.0], 3), &gda, &EmConfig::default(), &mut rng)
            .unwrap();
        for (a, b) in q.iter().zip([0.2, 0.3, 0.5]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stochastic_is_seed_deterministic() {
        let gda = gda_pm1();
        let enc = vec![
            DiagGaussian::new(vec![0.4, 0.0], vec![0.0, 0.0]).unwrap(),
            DiagGaussian::new(vec![-0.2, 0.5], vec![0.5, 0.0]).unwrap(),
        ];
        let cfg = EmConfig::default();
        let a = em_posterior(&enc, &gda, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = em_posterior(&enc, &gda, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn marginal_sample_component_and_mean() {
        let enc = vec![
            DiagGaussian::new(vec![3.0], vec![0.0]).unwrap(),
            DiagGaussian::new(vec![-3.0], vec![(0.25f64).ln()]).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let only0 = marginal_sample(&enc, &[1.0, 0.0], 200, &mut rng).unwrap();
        // Component 1 never produces values above 0 in practice (12σ away).
        assert!(only0.iter().all(|z| z[0] > -2.0));

        let p = [0.3, 0.7];
        let n = 100_000;
        let zs = marginal_sample(&enc, &p, n, &mut rng).unwrap();
        let mean = zs.iter().map(|z| z[0]).sum::<f64>() / n as f64;
        let expected = marginal_mean(&enc, &p).unwrap()[0];
        // Mixture variance: Σ p (σ² + μ²) − (Σ p μ)².
        let var = 0.3 * (1.0 + 9.0) + 0.7 * (0.25 + 9.0) - expected * expected;
        let se = (var / n as f64).sqrt();
        assert!((mean - expected).abs() < 4.0 * se, "{mean} vs {expected}");
    }

    #[test]
    fn marginal_sample_checks_probabilities() {
        let enc = same_encoding([0.0, 0.0], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(marginal_sample(&enc, &[0.5, 0.6], 1, &mut rng).is_err());
    }

    #[test]
    fn entropy_changes_are_averaged() {
        let traces = vec![vec![vec![0.5, 0.5], vec![1.0, 0.0], vec![1.0, 0.0]]];
        let d = mean_entropy_changes(&traces);
        assert!((d[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(d[1], 0.0);
    }
}
