//! Closed-form counterfactuals.
//!
//! Every explainer moves a latent code along a direction `w̄` until the
//! pairwise discriminant `f(z) = wᵀz + b` takes the requested value `δ`:
//! `z^δ = z + κ w̄` with `κ = (δ − wᵀz − b) / (wᵀw̄)`.
//!
//! * local L2: `w̄ = w`, the closest point in Euclidean distance,
//! * local Mahalanobis: `w̄ = Σ w`, the closest point under `Σ⁻¹`,
//! * global: `w̄ = μ_k − z`, the straight path towards the counter prototype.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::em::{em_classify, EmConfig, EmMode};
use crate::error::{check_dim, Error, Result};
use crate::gaussian::{argmax, dot, two_class_discriminant, Covariance, GdaParams, LinearDiscriminant};
use crate::nets::{decode, encode_gaussians, latents_tensor, reparameterize, GdvaeNet};

/// Below this `|wᵀw̄|` the step length is undefined.
pub const DEGENERATE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfMethod {
    LocalL2,
    LocalM,
    Global,
}

impl CfMethod {
    pub const ALL: [CfMethod; 3] = [CfMethod::LocalL2, CfMethod::LocalM, CfMethod::Global];

    pub fn as_str(&self) -> &'static str {
        match self {
            CfMethod::LocalL2 => "local_l2",
            CfMethod::LocalM => "local_m",
            CfMethod::Global => "global",
        }
    }
}

impl fmt::Display for CfMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CfMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local_l2" => Ok(CfMethod::LocalL2),
            "local_m" => Ok(CfMethod::LocalM),
            "global" => Ok(CfMethod::Global),
            other => Err(Error::InvalidArgument(format!(
                "unknown method {other:?} (expected local_l2, local_m or global)"
            ))),
        }
    }
}

/// Metric of the local explainer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    L2,
    Mahalanobis,
}

/// `ln(p / (1 − p))`.
pub fn delta_from_confidence(p_c: f64) -> Result<f64> {
    if !(p_c > 0.0 && p_c < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "confidence must lie strictly inside (0, 1), got {p_c}"
        )));
    }
    Ok((p_c / (1.0 - p_c)).ln())
}

/// Step length `κ = (δ − wᵀz − b) / (wᵀw̄)`.
pub fn solve_kappa(w: &[f64], w_bar: &[f64], b: f64, z: &[f64], delta: f64) -> Result<f64> {
    check_dim(w.len(), w_bar.len())?;
    check_dim(w.len(), z.len())?;
    let den = dot(w, w_bar);
    if den.abs() < DEGENERATE_TOL || !den.is_finite() {
        return Err(Error::DegenerateDirection(den.abs()));
    }
    Ok((delta - dot(w, z) - b) / den)
}

/// A latent counterfactual.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCf {
    pub z_delta: Vec<f64>,
    pub kappa: f64,
    pub delta: f64,
}

fn step(f: &LinearDiscriminant, w_bar: &[f64], z: &[f64], delta: f64) -> Result<LatentCf> {
    let kappa = solve_kappa(&f.w, w_bar, f.b, z, delta)?;
    let z_delta = z.iter().zip(w_bar).map(|(zi, wi)| zi + kappa * wi).collect();
    Ok(LatentCf {
        z_delta,
        kappa,
        delta,
    })
}

fn shared_variance(gda: &GdaParams) -> Result<Vec<f64>> {
    match gda.covariance() {
        Covariance::Shared(lv) => Ok(lv.iter().map(|v| v.exp()).collect()),
        Covariance::PerClass(_) => Err(Error::SharedCovarianceRequired),
    }
}

/// Closest point with `f(z^δ) = δ` under the chosen metric, where
/// `f = f⁽ᶜ⁾ − f⁽ᵏ⁾`.
pub fn local_cf(
    gda: &GdaParams,
    c: usize,
    k: usize,
    z: &[f64],
    delta: f64,
    metric: Metric,
) -> Result<LatentCf> {
    let f = two_class_discriminant(gda, c, k)?;
    check_dim(f.w.len(), z.len())?;
    let w_bar = match metric {
        Metric::L2 => f.w.clone(),
        Metric::Mahalanobis => shared_variance(gda)?
            .iter()
            .zip(&f.w)
            .map(|(s, w)| s * w)
            .collect(),
    };
    step(&f, &w_bar, z, delta)
}

/// Point on the segment from `z` towards the prototype `μ_{z|k}` (extended
/// if necessary) with `f(z^δ) = δ`.
pub fn global_cf(gda: &GdaParams, c: usize, k: usize, z: &[f64], delta: f64) -> Result<LatentCf> {
    let f = two_class_discriminant(gda, c, k)?;
    check_dim(f.w.len(), z.len())?;
    let w_bar: Vec<f64> = gda.class_mean(k).iter().zip(z).map(|(m, zi)| m - zi).collect();
    step(&f, &w_bar, z, delta)
}

/// Dispatches on the explainer kind.
pub fn latent_cf(
    gda: &GdaParams,
    c: usize,
    k: usize,
    z: &[f64],
    delta: f64,
    method: CfMethod,
) -> Result<LatentCf> {
    match method {
        CfMethod::LocalL2 => local_cf(gda, c, k, z, delta, Metric::L2),
        CfMethod::LocalM => local_cf(gda, c, k, z, delta, Metric::Mahalanobis),
        CfMethod::Global => global_cf(gda, c, k, z, delta),
    }
}

/// Swaps the pairwise logit of `c` against `k`: `δ = −f(z)`, local L2 step.
/// Only the pairwise comparison is guaranteed to flip; with more classes a
/// third class may end up with the largest posterior.
pub fn multiclass_cf(gda: &GdaParams, z: &[f64], c: usize, k: usize) -> Result<LatentCf> {
    let f = two_class_discriminant(gda, c, k)?;
    check_dim(f.w.len(), z.len())?;
    local_cf(gda, c, k, z, -f.eval(z), Metric::L2)
}

/// GDA parameters estimated from labelled latents: class means, pooled
/// diagonal covariance and empirical class frequencies.
pub fn empirical_gda_from_latents(
    latents: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
) -> Result<GdaParams> {
    check_dim(latents.len(), labels.len())?;
    if num_classes < 2 {
        return Err(Error::InvalidArgument("need at least two classes".into()));
    }
    let m = latents.first().map_or(0, Vec::len);
    let mut counts = vec![0usize; num_classes];
    let mut means = vec![vec![0.0; m]; num_classes];
    for (z, &y) in latents.iter().zip(labels) {
        if y >= num_classes {
            return Err(Error::ClassOutOfRange {
                index: y,
                classes: num_classes,
            });
        }
        check_dim(m, z.len())?;
        counts[y] += 1;
        for (a, b) in means[y].iter_mut().zip(z) {
            *a += b;
        }
    }
    if let Some(c) = counts.iter().position(|&n| n < 2) {
        return Err(Error::InvalidArgument(format!(
            "class {c} has {} latents, need at least 2",
            counts[c]
        )));
    }
    for (mu, &n) in means.iter_mut().zip(&counts) {
        mu.iter_mut().for_each(|v| *v /= n as f64);
    }
    let mut var = vec![0.0; m];
    for (z, &y) in latents.iter().zip(labels) {
        for j in 0..m {
            let d = z[j] - means[y][j];
            var[j] += d * d;
        }
    }
    let dof = (latents.len() - num_classes) as f64;
    let log_var = var.iter().map(|v| (v / dof).max(f64::MIN_POSITIVE).ln()).collect();
    let n = latents.len() as f64;
    let log_prior = counts.iter().map(|&c| (c as f64 / n).ln()).collect();
    GdaParams::new(means, Covariance::Shared(log_var), log_prior)
}

/// Desired discriminant value, as a confidence or a raw logit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfTarget {
    Confidence(f64),
    Logit(f64),
}

impl CfTarget {
    pub fn delta(&self) -> Result<f64> {
        match *self {
            CfTarget::Confidence(p) => delta_from_confidence(p),
            CfTarget::Logit(d) if d.is_finite() => Ok(d),
            CfTarget::Logit(d) => Err(Error::InvalidArgument(format!("logit {d} is not finite"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfRequest {
    pub method: CfMethod,
    pub target: CfTarget,
    /// Counter class `k`; defaults to the other class when `K = 2`.
    pub counter_class: Option<usize>,
    /// Explicit reference class `c`; defaults to the EM prediction.
    pub reference_class: Option<usize>,
}

impl CfRequest {
    pub fn confidence(method: CfMethod, p_c: f64) -> Self {
        Self {
            method,
            target: CfTarget::Confidence(p_c),
            counter_class: None,
            reference_class: None,
        }
    }
}

/// An image counterfactual together with everything needed to judge it.
#[derive(Clone, Debug, PartialEq)]
pub struct CfResult {
    /// Reference class `c` (the prediction unless overridden).
    pub class: usize,
    pub counter_class: usize,
    /// `q(y|x)` of the query image.
    pub class_probs: Vec<f64>,
    pub z_star: Vec<f64>,
    pub z_delta: Vec<f64>,
    pub kappa: f64,
    pub delta: f64,
    /// Value of the pairwise discriminant at `z^δ`.
    pub f_delta: f64,
    /// Class fed to the decoder for `x^δ`.
    pub decode_class: usize,
    /// Reconstruction `g(z*)`.
    pub x_star: ImageBatch,
    pub x_delta: ImageBatch,
    /// Measured `p(c | x^δ)`.
    pub p_hat: f64,
}

/// Query-level quantities shared by every counterfactual of one image.
#[derive(Clone, Debug)]
pub struct CfAnchor {
    pub class_probs: Vec<f64>,
    pub predicted: usize,
    pub z_star: Vec<f64>,
    pub z_star_class: usize,
    pub x_star: ImageBatch,
}

/// Classifies a single image `[1, C, H, W]` and picks `z*`: the mean of
/// `q(z|x,y*)`, or one sample from it when `sample_seed` is given.
pub fn cf_anchor<N: GdvaeNet + ?Sized>(
    net: &N,
    gda: &GdaParams,
    x: &Tensor,
    em_cfg: &EmConfig,
    reference: Option<usize>,
    sample_seed: Option<u64>,
) -> Result<CfAnchor> {
    check_dim(1, x.dim(0)?)?;
    let class_probs = em_classify(net, gda, x, em_cfg)?.remove(0);
    let predicted = argmax(&class_probs);
    let c = reference.unwrap_or(predicted);
    if c >= net.num_classes() {
        return Err(Error::ClassOutOfRange {
            index: c,
            classes: net.num_classes(),
        });
    }
    let q = encode_gaussians(net, x, &[c])?.remove(0);
    let z_star = match sample_seed {
        None => q.mean().to_vec(),
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise: Vec<f64> = (0..q.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
            reparameterize(&q, &noise)?
        }
    };
    let zt = latents_tensor(std::slice::from_ref(&z_star), net.dtype(), net.device())?;
    let x_star = ImageBatch::from_tensor(&decode(net, &zt, &[c])?)?;
    Ok(CfAnchor {
        class_probs,
        predicted,
        z_star,
        z_star_class: c,
        x_star,
    })
}

fn counter_for(net_k: usize, c: usize, requested: Option<usize>) -> Result<usize> {
    match requested {
        Some(k) if k >= net_k => Err(Error::ClassOutOfRange {
            index: k,
            classes: net_k,
        }),
        Some(k) if k == c => Err(Error::SameClass(c)),
        Some(k) => Ok(k),
        None if net_k == 2 => Ok(1 - c),
        None => Err(Error::InvalidArgument(
            "a counter class is required with more than two classes".into(),
        )),
    }
}

/// Decoder class for `z^δ`: the member of `{c, k}` with the larger posterior,
/// lowest index on a tie.
fn decode_class_for(f_value: f64, c: usize, k: usize) -> usize {
    if f_value > 0.0 {
        c
    } else if f_value < 0.0 {
        k
    } else {
        c.min(k)
    }
}

/// Counterfactual images for one query image and many requests. Each request
/// succeeds or fails on its own.
pub fn cf_image_many<N: GdvaeNet + ?Sized>(
    net: &N,
    gda: &GdaParams,
    x: &Tensor,
    requests: &[CfRequest],
    em_cfg: &EmConfig,
    sample_seed: Option<u64>,
) -> Result<Vec<Result<CfResult>>> {
    let first = cf_anchor(net, gda, x, em_cfg, None, sample_seed)?;
    let predicted = first.predicted;
    let mut anchors = BTreeMap::from([(predicted, first)]);
    let mut partial = Vec::with_capacity(requests.len());
    for req in requests {
        let c = req.reference_class.unwrap_or(predicted);
        if !anchors.contains_key(&c) {
            let a = cf_anchor(net, gda, x, em_cfg, Some(c), sample_seed)?;
            anchors.insert(c, a);
        }
        let z = &anchors[&c].z_star;
        partial.push((|| {
            let k = counter_for(net.num_classes(), c, req.counter_class)?;
            let cf = latent_cf(gda, c, k, z, req.target.delta()?, req.method)?;
            let f_delta = two_class_discriminant(gda, c, k)?.eval(&cf.z_delta);
            Ok((c, k, cf, f_delta))
        })());
    }

    // Decode every successful latent and measure p(c | x^δ) with mean-only EM.
    let ok: Vec<&(usize, usize, LatentCf, f64)> =
        partial.iter().filter_map(|r: &Result<_>| r.as_ref().ok()).collect();
    let measure = EmConfig {
        mode: EmMode::MeanOnly,
        ..*em_cfg
    };
    let mut decoded = Vec::with_capacity(ok.len());
    for chunk in ok.chunks(crate::em::CHUNK) {
        let zs: Vec<Vec<f64>> = chunk.iter().map(|p| p.2.z_delta.clone()).collect();
        let ys: Vec<usize> = chunk.iter().map(|p| decode_class_for(p.3, p.0, p.1)).collect();
        let xd = decode(net, &latents_tensor(&zs, net.dtype(), net.device())?, &ys)?;
        let probs = em_classify(net, gda, &xd, &measure)?;
        let batch = ImageBatch::from_tensor(&xd)?;
        for (i, p) in chunk.iter().enumerate() {
            decoded.push((batch.select(&[i]), probs[i][p.0]));
        }
    }

    let mut decoded = decoded.into_iter();
    let mut out = Vec::with_capacity(partial.len());
    for r in partial {
        out.push(r.and_then(|(c, k, cf, f_delta)| {
            let anchor = &anchors[&c];
            let (x_delta, p_hat) = decoded
                .next()
                .ok_or_else(|| Error::InvalidArgument("decoder output missing".into()))?;
            Ok(CfResult {
                class: c,
                counter_class: k,
                class_probs: anchor.class_probs.clone(),
                z_star: anchor.z_star.clone(),
                z_delta: cf.z_delta,
                kappa: cf.kappa,
                delta: cf.delta,
                f_delta,
                decode_class: decode_class_for(f_delta, c, k),
                x_star: anchor.x_star.clone(),
                x_delta,
                p_hat,
            })
        }));
    }
    Ok(out)
}

/// A single image counterfactual.
pub fn cf_image<N: GdvaeNet + ?Sized>(
    net: &N,
    gda: &GdaParams,
    x: &Tensor,
    req: &CfRequest,
    em_cfg: &EmConfig,
    sample_seed: Option<u64>,
) -> Result<CfResult> {
    cf_image_many(net, gda, x, std::slice::from_ref(req), em_cfg, sample_seed)?.remove(0)
}

/// `n ≥ 2` equally spaced latents on the segment `μ_{z|a} → μ_{z|b}`.
pub fn prototype_path(gda: &GdaParams, a: usize, b: usize, n: usize) -> Result<Vec<Vec<f64>>> {
    if n < 2 {
        return Err(Error::InvalidArgument("a path needs at least 2 steps".into()));
    }
    for i in [a, b] {
        if i >= gda.num_classes() {
            return Err(Error::ClassOutOfRange {
                index: i,
                classes: gda.num_classes(),
            });
        }
    }
    let (ma, mb) = (gda.class_mean(a), gda.class_mean(b));
    Ok((0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            ma.iter().zip(mb).map(|(x, y)| (1.0 - t) * x + t * y).collect()
        })
        .collect())
}
