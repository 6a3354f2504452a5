//! Evaluation: predictive accuracy and reconstruction error, the
//! counterfactual consistency sweep and a Fréchet realism distance.

use std::io::Write;

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::counterfactual::{cf_image_many, CfMethod, CfRequest};
use crate::data::{Dataset, ImageBatch};
use crate::em::{em_classify_images, EmConfig, CHUNK};
use crate::error::{check_dim, Error, Result};
use crate::gaussian::{argmax, GdaParams};
use crate::nets::{decode, encode_gaussians, latents_tensor, GdvaeModel, GdvaeNet};

/// The 19 requested confidences `0.05, 0.10, …, 0.95`.
pub fn confidence_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

/// Fraction of equal entries.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_dim(labels.len(), preds.len())?;
    if preds.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    let hits = preds.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mean squared pixel difference over all images.
pub fn mse_images(a: &ImageBatch, b: &ImageBatch) -> Result<f64> {
    if a.shape() != b.shape() || a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "image batches differ: {}×{:?} vs {}×{:?}",
            a.len(),
            a.shape(),
            b.len(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument("mse of empty batches".into()));
    }
    let sum: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum();
    Ok(sum / a.values().len() as f64)
}

/// Sample correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_dim(xs.len(), ys.len())?;
    if xs.len() < 2 {
        return Err(Error::InvalidArgument("pearson needs at least two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("pearson of a constant sequence".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Bin of `p` among `bins` equal bins of `[0, 1]`; the last bin is closed.
pub fn bin_index(p: f64, bins: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("{p} is outside [0, 1]")));
    }
    Ok(((p * bins as f64).floor() as usize).min(bins - 1))
}

/// Fraction of pairs that fall into the same bin.
pub fn binned_accuracy(requested: &[f64], actual: &[f64], bins: usize) -> Result<f64> {
    check_dim(requested.len(), actual.len())?;
    if bins == 0 || requested.is_empty() {
        return Err(Error::InvalidArgument("binned accuracy needs bins and data".into()));
    }
    let mut hits = 0;
    for (r, a) in requested.iter().zip(actual) {
        if bin_index(*r, bins)? == bin_index(*a, bins)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / requested.len() as f64)
}

pub const EIGEN_CLIP_TOL: f64 = 1e-8;

fn mean_cov(feats: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = feats.first().map_or(0, Vec::len);
    if d == 0 || feats.len() < d + 1 {
        return Err(Error::InvalidArgument(format!(
            "need at least {} feature vectors of dimension {d}, got {}",
            d + 1,
            feats.len()
        )));
    }
    let n = feats.len();
    let mut data = Vec::with_capacity(n * d);
    for f in feats {
        check_dim(d, f.len())?;
        data.extend_from_slice(f);
    }
    let x = DMatrix::from_row_slice(n, d, &data);
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

/// Eigenvalues of a symmetric matrix with small negative ones set to zero.
fn clipped_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for v in eig.eigenvalues.iter_mut() {
        if *v < -EIGEN_CLIP_TOL * scale {
            return Err(Error::InvalidArgument(format!(
                "matrix is not positive semidefinite (eigenvalue {v})"
            )));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

fn sqrtm_psd(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = clipped_eigen(m)?;
    let s = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * s * eig.eigenvectors.transpose())
}

/// Fréchet distance between Gaussians fitted to two sets of feature vectors:
/// `‖m_a − m_b‖² + Tr(C_a + C_b − 2 (C_a C_b)^{1/2})`.
pub fn frechet_distance(feats_a: &[Vec<f64>], feats_b: &[Vec<f64>]) -> Result<f64> {
    let (ma, ca) = mean_cov(feats_a)?;
    let (mb, cb) = mean_cov(feats_b)?;
    check_dim(ma.len(), mb.len())?;
    Ok(frechet_from_moments(&ma, &ca, &mb, &cb)?)
}

/// Fréchet distance between `N(ma, ca)` and `N(mb, cb)`.
pub fn frechet_from_moments(
    ma: &DVector<f64>,
    ca: &DMatrix<f64>,
    mb: &DVector<f64>,
    cb: &DMatrix<f64>,
) -> Result<f64> {
    // Tr((C_a C_b)^{1/2}) = Tr((C_a^{1/2} C_b C_a^{1/2})^{1/2}), which is symmetric.
    let sa = sqrtm_psd(ca.clone())?;
    let inner = &sa * cb * &sa;
    let tr_sqrt: f64 = clipped_eigen(inner)?.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let d = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

/// Maps images to feature vectors for the realism distance.
pub trait FeatureExtractor {
    fn features(&self, images: &ImageBatch) -> Result<Vec<Vec<f64>>>;
}

/// Encoder convolution features of a trained model, averaged over space and
/// over the label inputs.
pub struct EncoderFeatures<'a> {
    pub model: &'a GdvaeModel,
}

impl FeatureExtractor for EncoderFeatures<'_> {
    fn features(&self, images: &ImageBatch) -> Result<Vec<Vec<f64>>> {
        let model = self.model;
        let channels = model
            .architecture()
            .encoder
            .last()
            .map_or(1, |l| l.channels);
        let k = model.num_classes();
        let mut out = Vec::with_capacity(images.len());
        for start in (0..images.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(images.len());
            let x = images.range(start, end).to_tensor(model.dtype(), model.device())?;
            let b = end - start;
            let mut acc: Option<Tensor> = None;
            for class in 0..k {
                let f = model.encoder_features(&x, &vec![class; b])?;
                let pooled = f.reshape((b, channels, ()))?.mean(2)?;
                acc = Some(match acc {
                    None => pooled,
                    Some(a) => (a + pooled)?,
                });
            }
            let mean = acc.ok_or_else(|| Error::InvalidArgument("model has no classes".into()))?;
            out.extend((mean / k as f64)?.to_dtype(DType::F64)?.to_vec2::<f64>()?);
        }
        Ok(out)
    }
}

/// One counterfactual of the consistency sweep. The optional fields are
/// `None` when that counterfactual failed; `error` says why.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub image_id: usize,
    pub p_c: f64,
    pub delta: f64,
    pub method: CfMethod,
    pub p_hat: Option<f64>,
    pub prox_mse: Option<f64>,
    pub kappa: Option<f64>,
    /// `|f(z^δ) − δ|`.
    pub constraint_error: Option<f64>,
    pub error: Option<String>,
    #[serde(skip)]
    pub x_delta: Option<ImageBatch>,
}

/// Requests every confidence of [`confidence_grid`] with every method for
/// each image. Query images are referenced by their index in `images`.
pub fn consistency_sweep<N: GdvaeNet + ?Sized>(
    net: &N,
    gda: &GdaParams,
    images: &ImageBatch,
    methods: &[CfMethod],
    em_cfg: &EmConfig,
    keep_images: bool,
) -> Result<Vec<SweepRecord>> {
    let grid = confidence_grid();
    let requests: Vec<(CfMethod, f64)> = methods
        .iter()
        .flat_map(|&m| grid.iter().map(move |&p| (m, p)))
        .collect();
    let reqs: Vec<CfRequest> = requests.iter().map(|&(m, p)| CfRequest::confidence(m, p)).collect();
    let mut out = Vec::with_capacity(images.len() * reqs.len());
    for i in 0..images.len() {
        let query = images.select(&[i]);
        let x = query.to_tensor(net.dtype(), net.device())?;
        let results = cf_image_many(net, gda, &x, &reqs, em_cfg, None)?;
        for (&(method, p_c), res) in requests.iter().zip(results) {
            let delta = crate::counterfactual::delta_from_confidence(p_c)?;
            let mut rec = SweepRecord {
                image_id: i,
                p_c,
                delta,
                method,
                p_hat: None,
                prox_mse: None,
                kappa: None,
                constraint_error: None,
                error: None,
                x_delta: None,
            };
            match res {
                Ok(cf) => {
                    rec.p_hat = Some(cf.p_hat);
                    rec.prox_mse = Some(mse_images(&query, &cf.x_delta)?);
                    rec.kappa = Some(cf.kappa);
                    rec.constraint_error = Some((cf.f_delta - delta).abs());
                    if keep_images {
                        rec.x_delta = Some(cf.x_delta);
                    }
                }
                Err(e) => rec.error = Some(e.to_string()),
            }
            out.push(rec);
        }
    }
    Ok(out)
}

/// Writes sweep records as CSV with header
/// `image_id,p_c,delta,method,p_hat,prox_mse,kappa`.
pub fn write_sweep_csv<W: Write>(records: &[SweepRecord], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["image_id", "p_c", "delta", "method", "p_hat", "prox_mse", "kappa"])?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    for r in records {
        wr.write_record([
            r.image_id.to_string(),
            r.p_c.to_string(),
            r.delta.to_string(),
            r.method.to_string(),
            opt(r.p_hat),
            opt(r.prox_mse),
            opt(r.kappa),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// Mean squared gap between requested and measured confidence.
pub fn confidence_mse(records: &[SweepRecord]) -> Option<f64> {
    let gaps: Vec<f64> = records
        .iter()
        .filter_map(|r| r.p_hat.map(|p| (r.p_c - p).powi(2)))
        .collect();
    (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64)
}

/// Scores of one explainer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: CfMethod,
    pub pearson: Option<f64>,
    pub binned_acc: Option<f64>,
    pub confidence_mse: Option<f64>,
    pub proximity_mse: Option<f64>,
    /// Feature-space Fréchet distance of the counterfactuals to the test
    /// images; `None` when there are too few samples for the feature size.
    pub frechet: Option<f64>,
    pub records: usize,
    pub failures: usize,
}

/// Summarizes sweep records of a single method.
pub fn method_report(
    method: CfMethod,
    records: &[SweepRecord],
    frechet: Option<f64>,
) -> MethodReport {
    let ok: Vec<&SweepRecord> = records
        .iter()
        .filter(|r| r.method == method && r.p_hat.is_some())
        .collect();
    let requested: Vec<f64> = ok.iter().map(|r| r.p_c).collect();
    let actual: Vec<f64> = ok.iter().filter_map(|r| r.p_hat).collect();
    let mine: Vec<SweepRecord> = ok.iter().map(|r| (*r).clone()).collect();
    let prox: Vec<f64> = ok.iter().filter_map(|r| r.prox_mse).collect();
    let total = records.iter().filter(|r| r.method == method).count();
    MethodReport {
        method,
        pearson: pearson(&requested, &actual).ok(),
        binned_acc: binned_accuracy(&requested, &actual, 12).ok(),
        confidence_mse: confidence_mse(&mine),
        proximity_mse: (!prox.is_empty()).then(|| prox.iter().sum::<f64>() / prox.len() as f64),
        frechet,
        records: total,
        failures: total - ok.len(),
    }
}

/// Evaluation options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub em: EmConfig,
    pub methods: Vec<CfMethod>,
    /// Images used for the counterfactual sweep (all test images are used
    /// for accuracy and reconstruction).
    pub sweep_images: usize,
    pub frechet: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            em: EmConfig::default(),
            methods: CfMethod::ALL.to_vec(),
            sweep_images: 100,
            frechet: true,
        }
    }
}

/// Full evaluation report. MSE values are raw (tables usually show ×10²).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc: f64,
    pub recon_mse: f64,
    pub images: usize,
    pub methods: Vec<MethodReport>,
}

impl EvalReport {
    /// One CSV row per method.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "method",
            "acc",
            "recon_mse",
            "pearson",
            "binned_acc",
            "confidence_mse",
            "proximity_mse",
            "frechet",
            "records",
            "failures",
        ])?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        for m in &self.methods {
            wr.write_record([
                m.method.to_string(),
                self.acc.to_string(),
                self.recon_mse.to_string(),
                opt(m.pearson),
                opt(m.binned_acc),
                opt(m.confidence_mse),
                opt(m.proximity_mse),
                opt(m.frechet),
                m.records.to_string(),
                m.failures.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// EM predictions for every image.
pub fn predict<N: GdvaeNet + ?Sized>(
    net: &N,
    gda: &GdaParams,
    images: &ImageBatch,
    em_cfg: &EmConfig,
) -> Result<Vec<usize>> {
    Ok(em_classify_images(net, gda, images, em_cfg)?
        .iter()
        .map(|p| argmax(p))
        .collect())
}

/// Reconstructions `g(mean(q(z|x,ŷ)), ŷ)` using the given labels.
pub fn reconstruct<N: GdvaeNet + ?Sized>(
    net: &N,
    images: &ImageBatch,
    labels: &[usize],
) -> Result<ImageBatch> {
    check_dim(images.len(), labels.len())?;
    let mut values = Vec::with_capacity(images.values().len());
    for start in (0..images.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(images.len());
        let x = images.range(start, end).to_tensor(net.dtype(), net.device())?;
        let y = &labels[start..end];
        let means: Vec<Vec<f64>> = encode_gaussians(net, &x, y)?
            .into_iter()
            .map(|g| g.mean().to_vec())
            .collect();
        let z = latents_tensor(&means, net.dtype(), net.device())?;
        let xr = decode(net, &z, y)?;
        values.extend(ImageBatch::from_tensor(&xr)?.values().iter().copied());
    }
    ImageBatch::new(values, images.len(), images.shape())
}

/// Accuracy and reconstruction MSE; reconstructions use the predicted class.
pub fn predictive_metrics<N: GdvaeNet + ?Sized>(
    net: &N,
    gda: &GdaParams,
    data: &Dataset,
    em_cfg: &EmConfig,
) -> Result<(f64, f64)> {
    let preds = predict(net, gda, &data.images, em_cfg)?;
    let acc = accuracy(&preds, &data.labels)?;
    let recon = reconstruct(net, &data.images, &preds)?;
    Ok((acc, mse_images(&data.images, &recon)?))
}

/// Accuracy, reconstruction and per-method counterfactual scores.
pub fn evaluate_model(
    model: &GdvaeModel,
    gda: &GdaParams,
    test: &Dataset,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let (acc, recon_mse) = predictive_metrics(model, gda, test, &cfg.em)?;
    let sweep_set = test.head(cfg.sweep_images.min(test.len()));
    let records = if cfg.methods.is_empty() || sweep_set.is_empty() {
        Vec::new()
    } else {
        consistency_sweep(model, gda, &sweep_set.images, &cfg.methods, &cfg.em, cfg.frechet)?
    };
    let extractor = EncoderFeatures { model };
    let real = if cfg.frechet {
        Some(extractor.features(&test.images)?)
    } else {
        None
    };
    let mut methods = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let frechet = match &real {
            Some(real) => {
                let cf_images: Vec<&ImageBatch> = records
                    .iter()
                    .filter(|r| r.method == method)
                    .filter_map(|r| r.x_delta.as_ref())
                    .collect();
                if cf_images.is_empty() {
                    None
                } else {
                    let values: Vec<f32> =
                        cf_images.iter().flat_map(|b| b.values().iter().copied()).collect();
                    let batch = ImageBatch::new(values, cf_images.len(), test.images.shape())?;
                    frechet_distance(real, &extractor.features(&batch)?).ok()
                }
            }
            None => None,
        };
        methods.push(method_report(method, &records, frechet));
    }
    Ok(EvalReport {
        acc,
        recon_mse,
        images: test.len(),
        methods,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert!((accuracy(&[0, 1, 1], &[0, 1, 0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(accuracy(&[0, 1], &[0]).is_err());
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn mse_examples() {
        let zeros = ImageBatch::new(vec![0.0; 784], 1, (1, 28, 28)).unwrap();
        assert_eq!(mse_images(&zeros, &zeros).unwrap(), 0.0);
        let tenth = ImageBatch::new(vec![0.1; 784], 1, (1, 28, 28)).unwrap();
        assert!((mse_images(&zeros, &tenth).unwrap() - 0.01).abs() < 1e-9);
        let mut one = vec![0.0; 784];
        one[17] = 1.0;
        let one = ImageBatch::new(one, 1, (1, 28, 28)).unwrap();
        assert!((mse_images(&zeros, &one).unwrap() - 1.0 / 784.0).abs() < 1e-15);
        let small = ImageBatch::new(vec![0.0; 64], 1, (1, 8, 8)).unwrap();
        assert!(mse_images(&zeros, &small).is_err());
    }

    #[test]
    fn pearson_examples() {
        let xs = [1.0, 2.0, 3.0];
        assert!((pearson(&xs, &xs).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&xs, &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-15);
        // Deviations (−1, 0, 1) and (−4/3, −1/3, 5/3): r = 3 / √(2 · 14/3).
        let oracle = 3.0 / (2.0f64 * 14.0 / 3.0).sqrt();
        let r = pearson(&xs, &[1.0, 2.0, 4.0]).unwrap();
        assert!((r - oracle).abs() < 1e-12);
        assert!((r - 0.98198).abs() < 1e-5);
        assert!(pearson(&xs, &[1.0, 1.0, 1.0]).is_err());
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn binned_examples() {
        assert_eq!(bin_index(0.5, 12).unwrap(), 6);
        assert_eq!(bin_index(0.52, 12).unwrap(), 6);
        assert_eq!(bin_index(1.0, 12).unwrap(), 11);
        assert_eq!(binned_accuracy(&[0.5], &[0.52], 12).unwrap(), 1.0);
        assert_eq!(binned_accuracy(&[0.05], &[0.95], 12).unwrap(), 0.0);
        let grid = confidence_grid();
        assert_eq!(binned_accuracy(&grid, &grid, 12).unwrap(), 1.0);
        assert!(binned_accuracy(&[1.2], &[0.5], 12).is_err());
    }

    #[test]
    fn grid_has_nineteen_values() {
        let g = confidence_grid();
        assert_eq!(g.len(), 19);
        assert!((g[0] - 0.05).abs() < 1e-15 && (g[18] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn frechet_closed_forms() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        let zero = DVector::from_vec(vec![0.0, 0.0]);
        let shifted = DVector::from_vec(vec![3.0, 4.0]);
        let d = frechet_from_moments(&zero, &i2, &shifted, &i2).unwrap();
        assert!((d - 25.0).abs() < 1e-9);
        let one = DMatrix::from_element(1, 1, 1.0);
        let four = DMatrix::from_element(1, 1, 4.0);
        let m = DVector::from_vec(vec![0.0]);
        assert!((frechet_from_moments(&m, &one, &m, &four).unwrap() - 1.0).abs() < 1e-12);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(frechet_from_moments(&zero, &bad, &zero, &i2).is_err());
    }

    #[test]
    fn frechet_needs_enough_samples() {
        let few = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!(frechet_distance(&few, &few).is_err());
    }
}
