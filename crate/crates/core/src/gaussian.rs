//! Closed-form Gaussian and Gaussian-discriminant mathematics.
//!
//! Everything here works on plain `f64` slices. The differentiable tensor
//! versions used during training live in [`crate::objectives`] and are tested
//! against these functions.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Lower clamp applied to every log-variance.
pub const LOG_VAR_MIN: f64 = -10.0;
/// Upper clamp applied to every log-variance.
pub const LOG_VAR_MAX: f64 = 10.0;

/// `ln(2π) / 2`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Factorized Gaussian parameterized by mean and log-variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_var: Vec<f64>,
}

impl DiagGaussian {
    /// Builds a Gaussian, clamping every log-variance to `[-10, 10]`.
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        check_dim(mean.len(), log_var.len())?;
        if mean.iter().chain(&log_var).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "gaussian parameters must be finite".into(),
            ));
        }
        let log_var = log_var
            .into_iter()
            .map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX))
            .collect();
        Ok(Self { mean, log_var })
    }

    /// `N(0, I)` in `dim` dimensions.
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| v.exp()).collect()
    }

    pub fn std_dev(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| (0.5 * v).exp()).collect()
    }

    /// Same covariance, mean moved to `mean`.
    pub fn with_mean(&self, mean: Vec<f64>) -> Result<Self> {
        Self::new(mean, self.log_var.clone())
    }
}

/// Log-density of `x` under `g`.
pub fn gaussian_log_pdf(x: &[f64], g: &DiagGaussian) -> Result<f64> {
    check_dim(g.dim(), x.len())?;
    Ok(x.iter()
        .zip(g.mean.iter().zip(&g.log_var))
        .map(|(xi, (mu, lv))| {
            let r = xi - mu;
            -HALF_LN_2PI - 0.5 * lv - 0.5 * r * r * (-lv).exp()
        })
        .sum())
}

/// `KL(q || p)` for two factorized Gaussians.
pub fn kl_diag(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    check_dim(p.dim(), q.dim())?;
    let mut kl = 0.0;
    for j in 0..q.dim() {
        let (mq, lq) = (q.mean[j], q.log_var[j]);
        let (mp, lp) = (p.mean[j], p.log_var[j]);
        let d = mq - mp;
        kl += 0.5 * (lp - lq + (lq.exp() + d * d) * (-lp).exp() - 1.0);
    }
    // Rounding can leave a tiny negative residue for q == p.
    Ok(kl.max(0.0))
}

/// Covariance storage of a [`GdaParams`], as log-variances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariance {
    Shared(Vec<f64>),
    PerClass(Vec<Vec<f64>>),
}

/// Parameters of the latent Gaussian discriminant classifier: class
/// prototypes, diagonal covariance(s) and class log-priors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GdaParams {
    class_means: Vec<Vec<f64>>,
    covariance: Covariance,
    class_log_prior: Vec<f64>,
}

impl GdaParams {
    pub fn new(
        class_means: Vec<Vec<f64>>,
        covariance: Covariance,
        class_log_prior: Vec<f64>,
    ) -> Result<Self> {
        let k = class_means.len();
        if k == 0 {
            return Err(Error::InvalidArgument("GDA needs at least one class".into()));
        }
        check_dim(k, class_log_prior.len())?;
        let m = class_means[0].len();
        for mu in &class_means {
            check_dim(m, mu.len())?;
        }
        let clamp = |v: Vec<f64>| -> Vec<f64> {
            v.into_iter()
                .map(|x| x.clamp(LOG_VAR_MIN, LOG_VAR_MAX))
                .collect()
        };
        let covariance = match covariance {
            Covariance::Shared(lv) => {
                check_dim(m, lv.len())?;
                Covariance::Shared(clamp(lv))
            }
            Covariance::PerClass(lvs) => {
                check_dim(k, lvs.len())?;
                for lv in &lvs {
                    check_dim(m, lv.len())?;
                }
                Covariance::PerClass(lvs.into_iter().map(clamp).collect())
            }
        };
        let finite = class_means.iter().flatten().all(|v| v.is_finite())
            && class_log_prior.iter().all(|v| !v.is_nan() && *v < f64::INFINITY)
            && match &covariance {
                Covariance::Shared(lv) => lv.iter().all(|v| v.is_finite()),
                Covariance::PerClass(lvs) => lvs.iter().flatten().all(|v| v.is_finite()),
            };
        if !finite {
            return Err(Error::InvalidArgument("GDA parameters must be finite".into()));
        }
        let mass: f64 = class_log_prior.iter().map(|v| v.exp()).sum();
        if (mass - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "class priors sum to {mass}, expected 1"
            )));
        }
        Ok(Self {
            class_means,
            covariance,
            class_log_prior,
        })
    }

    /// Shared covariance and uniform class prior.
    pub fn shared_uniform(class_means: Vec<Vec<f64>>, log_var: Vec<f64>) -> Result<Self> {
        let k = class_means.len().max(1);
        Self::new(
            class_means,
            Covariance::Shared(log_var),
            vec![-(k as f64).ln(); k],
        )
    }

    pub fn num_classes(&self) -> usize {
        self.class_means.len()
    }

    pub fn dim(&self) -> usize {
        self.class_means[0].len()
    }

    pub fn class_means(&self) -> &[Vec<f64>] {
        &self.class_means
    }

    pub fn class_mean(&self, i: usize) -> &[f64] {
        &self.class_means[i]
    }

    pub fn covariance(&self) -> &Covariance {
        &self.covariance
    }

    pub fn class_log_prior(&self) -> &[f64] {
        &self.class_log_prior
    }

    pub fn is_shared(&self) -> bool {
        matches!(self.covariance, Covariance::Shared(_))
    }

    /// Shared log-variance, if the covariance is class independent.
    pub fn shared_log_var(&self) -> Option<&[f64]> {
        match &self.covariance {
            Covariance::Shared(lv) => Some(lv),
            Covariance::PerClass(_) => None,
        }
    }

    pub fn class_log_var(&self, i: usize) -> &[f64] {
        match &self.covariance {
            Covariance::Shared(lv) => lv,
            Covariance::PerClass(lvs) => &lvs[i],
        }
    }

    /// The class-conditional latent distribution `p(z | y = i)`.
    pub fn class_gaussian(&self, i: usize) -> DiagGaussian {
        DiagGaussian {
            mean: self.class_means[i].clone(),
            log_var: self.class_log_var(i).to_vec(),
        }
    }

    fn check_class(&self, i: usize) -> Result<()> {
        if i < self.num_classes() {
            Ok(())
        } else {
            Err(Error::ClassOutOfRange {
                index: i,
                classes: self.num_classes(),
            })
        }
    }

    /// `log p(z | y = i) + log p(y = i)` for every class.
    pub fn log_joint(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), z.len())?;
        (0..self.num_classes())
            .map(|i| {
                let ll = gaussian_log_pdf(z, &self.class_gaussian(i))?;
                Ok(ll + self.class_log_prior[i])
            })
            .collect()
    }
}

/// Numerically stable `ln Σ exp(v)`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Normalizes a vector of log-weights so that their exponentials sum to one.
pub fn normalize_log(values: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(values);
    values.iter().map(|v| v - lse).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Log of the Bayes posterior `p(y | z)` under the GDA model.
pub fn gda_log_posterior(gda: &GdaParams, z: &[f64]) -> Result<Vec<f64>> {
    Ok(normalize_log(&gda.log_joint(z)?))
}

/// Bayes posterior `p(y | z)` under the GDA model.
pub fn gda_posterior(gda: &GdaParams, z: &[f64]) -> Result<Vec<f64>> {
    Ok(gda_log_posterior(gda, z)?
        .into_iter()
        .map(f64::exp)
        .collect())
}

/// Affine function `f(z) = wᵀz + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearDiscriminant {
    pub w: Vec<f64>,
    pub b: f64,
}

impl LinearDiscriminant {
    pub fn eval(&self, z: &[f64]) -> f64 {
        dot(&self.w, z) + self.b
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Linear discriminant `f⁽ⁱ⁾(z) = log p(y = i | z)` up to a class-independent
/// term. Requires a shared covariance.
pub fn discriminant(gda: &GdaParams, i: usize) -> Result<LinearDiscriminant> {
    gda.check_class(i)?;
    let lv = gda.shared_log_var().ok_or(Error::SharedCovarianceRequired)?;
    let mu = gda.class_mean(i);
    let w: Vec<f64> = mu.iter().zip(lv).map(|(m, l)| m * (-l).exp()).collect();
    let b = -0.5 * dot(&w, mu) + gda.class_log_prior()[i];
    Ok(LinearDiscriminant { w, b })
}

/// `f(z) = f⁽ᶜ⁾(z) − f⁽ᵏ⁾(z)`: positive values favour `c`, negative favour `k`.
pub fn two_class_discriminant(gda: &GdaParams, c: usize, k: usize) -> Result<LinearDiscriminant> {
    gda.check_class(c)?;
    gda.check_class(k)?;
    if c == k {
        return Err(Error::SameClass(c));
    }
    let fc = discriminant(gda, c)?;
    let fk = discriminant(gda, k)?;
    Ok(LinearDiscriminant {
        w: fc.w.iter().zip(&fk.w).map(|(a, b)| a - b).collect(),
        b: fc.b - fk.b,
    })
}

/// Logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN_HALF: f64 = -std::f64::consts::LN_2;

    fn g(mean: &[f64], log_var: &[f64]) -> DiagGaussian {
        DiagGaussian::new(mean.to_vec(), log_var.to_vec()).unwrap()
    }

    fn symmetric_gda(prior: [f64; 2]) -> GdaParams {
        GdaParams::new(
            vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
            Covariance::Shared(vec![0.0, 0.0]),
            vec![prior[0].ln(), prior[1].ln()],
        )
        .unwrap()
    }

    #[test]
    fn log_pdf_examples() {
        let std1 = g(&[0.0], &[0.0]);
        assert!((gaussian_log_pdf(&[0.0], &std1).unwrap() + 0.918_938_5).abs() < 1e-7);
        assert!((gaussian_log_pdf(&[1.0], &std1).unwrap() + 1.418_938_5).abs() < 1e-7);
        let std3 = DiagGaussian::standard(3);
        let v = gaussian_log_pdf(&[0.0; 3], &std3).unwrap();
        assert!((v + 3.0 * 0.918_938_5).abs() < 1e-6);
    }

    #[test]
    fn log_pdf_integrates_to_one() {
        // Trapezoid rule over ±12σ.
        let dist = g(&[0.3], &[(0.7f64).ln()]);
        let n = 20_000;
        let (lo, hi) = (0.3 - 12.0, 0.3 + 12.0);
        let h = (hi - lo) / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let x = lo + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            acc += w * gaussian_log_pdf(&[x], &dist).unwrap().exp();
        }
        assert!((acc * h - 1.0).abs() < 1e-9);
        // Peak density of N(0,1) is 1/sqrt(2π).
        let peak = gaussian_log_pdf(&[0.0], &DiagGaussian::standard(1)).unwrap().exp();
        assert!((peak - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn log_pdf_dimension_mismatch() {
        let err = gaussian_log_pdf(&[0.0, 1.0], &DiagGaussian::standard(1)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn kl_examples() {
        let std1 = DiagGaussian::standard(1);
        assert_eq!(kl_diag(&std1, &std1).unwrap(), 0.0);
        assert!((kl_diag(&g(&[1.0], &[0.0]), &std1).unwrap() - 0.5).abs() < 1e-12);
        let q = g(&[0.0], &[(0.25f64).ln()]);
        let expected = std::f64::consts::LN_2 + 0.125 - 0.5;
        assert!((kl_diag(&q, &std1).unwrap() - expected).abs() < 1e-12);
        assert!((kl_diag(&q, &std1).unwrap() - 0.318_147_2).abs() < 1e-7);
        assert!(kl_diag(&std1, &DiagGaussian::standard(2)).is_err());
    }

    #[test]
    fn log_var_is_clamped() {
        let d = g(&[0.0, 0.0], &[-50.0, 50.0]);
        assert_eq!(d.log_var(), &[LOG_VAR_MIN, LOG_VAR_MAX]);
        assert!(DiagGaussian::new(vec![f64::NAN], vec![0.0]).is_err());
        assert!(DiagGaussian::new(vec![0.0], vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn posterior_examples() {
        let gda = symmetric_gda([0.5, 0.5]);
        let p = gda_posterior(&gda, &[0.0, 0.0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
        let p = gda_posterior(&gda, &[1.0, 0.0]).unwrap();
        assert!((p[0] - 0.880_797).abs() < 1e-6);
        assert!((p[1] - 0.119_203).abs() < 1e-6);
        assert!((p[0] - sigmoid(2.0)).abs() < 1e-12);
        let skewed = symmetric_gda([0.8, 0.2]);
        let p = gda_posterior(&skewed, &[0.0, 0.0]).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-12 && (p[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn posterior_survives_far_latents() {
        // Direct normalization of the likelihoods would underflow to 0/0 here.
        let gda = GdaParams::shared_uniform(
            vec![vec![0.0; 64], vec![0.1; 64]],
            vec![-8.0; 64],
        )
        .unwrap();
        let p = gda_posterior(&gda, &[40.0; 64]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(argmax(&p), 1);
    }

    #[test]
    fn per_class_covariance_posterior() {
        let gda = GdaParams::new(
            vec![vec![0.0], vec![0.0]],
            Covariance::PerClass(vec![vec![0.0], vec![(4.0f64).ln()]]),
            vec![LN_HALF, LN_HALF],
        )
        .unwrap();
        // Equal means, different spread: the wide class wins far from the mean.
        let p = gda_posterior(&gda, &[5.0]).unwrap();
        assert!(p[1] > 0.99);
        assert!(matches!(
            discriminant(&gda, 0),
            Err(Error::SharedCovarianceRequired)
        ));
    }

    #[test]
    fn discriminant_examples() {
        let gda = symmetric_gda([0.5, 0.5]);
        let d = discriminant(&gda, 0).unwrap();
        assert_eq!(d.w, vec![1.0, 0.0]);
        assert!((d.b - (-0.5 + LN_HALF)).abs() < 1e-12);

        let zero = GdaParams::shared_uniform(vec![vec![0.0, 0.0], vec![1.0, 1.0]], vec![0.0, 0.0])
            .unwrap();
        let d = discriminant(&zero, 0).unwrap();
        assert_eq!(d.w, vec![0.0, 0.0]);
        assert!((d.b - LN_HALF).abs() < 1e-12);

        let aniso = GdaParams::shared_uniform(
            vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
            vec![(4.0f64).ln(), 0.0],
        )
        .unwrap();
        let d = discriminant(&aniso, 0).unwrap();
        assert!((d.w[0] - 0.25).abs() < 1e-12 && d.w[1] == 0.0);
        assert!((d.b - (-0.125 + LN_HALF)).abs() < 1e-12);
    }

    #[test]
    fn two_class_examples() {
        let gda = symmetric_gda([0.5, 0.5]);
        let f = two_class_discriminant(&gda, 0, 1).unwrap();
        assert_eq!(f.w, vec![2.0, 0.0]);
        assert!(f.b.abs() < 1e-12);
        assert!(matches!(
            two_class_discriminant(&gda, 1, 1),
            Err(Error::SameClass(1))
        ));
        assert!(matches!(
            two_class_discriminant(&gda, 0, 2),
            Err(Error::ClassOutOfRange { .. })
        ));

        let aniso = GdaParams::shared_uniform(
            vec![vec![1.0, 1.0], vec![-1.0, -1.0]],
            vec![(4.0f64).ln(), 0.0],
        )
        .unwrap();
        let f = two_class_discriminant(&aniso, 0, 1).unwrap();
        assert!((f.w[0] - 0.5).abs() < 1e-12 && (f.w[1] - 2.0).abs() < 1e-12);
        assert!(f.b.abs() < 1e-12);
    }

    #[test]
    fn prior_must_normalize() {
        let err = GdaParams::new(
            vec![vec![0.0], vec![1.0]],
            Covariance::Shared(vec![0.0]),
            vec![0.0, 0.0],
        );
        assert!(err.is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }
}
