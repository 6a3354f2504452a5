//! Training loop: Adam on the full objective with seeded shuffling and
//! gradient accumulation over fixed-size chunks of each batch.

use std::io::Write;
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::predictive_metrics;
use crate::nets::{gda_params, GdvaeModel, GdvaeNet};
use crate::objectives::{total_loss_with_noise, LossBreakdown, LossNoise};
use crate::seeding::stream_u64;

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub acc: f64,
    pub mse: f64,
    pub rec: f64,
    pub kl_cvae: f64,
    pub kl_vae: f64,
    pub cls: f64,
    pub prior: f64,
    pub consistency: f64,
    pub total: f64,
}

pub const METRICS_HEADER: [&str; 10] = [
    "epoch",
    "acc",
    "mse",
    "rec",
    "kl_cvae",
    "kl_vae",
    "cls",
    "prior",
    "consistency",
    "total",
];

/// Writes the log as CSV. Values use the shortest round-trip formatting, so
/// equal runs give equal files.
pub fn write_metrics_csv<W: Write>(rows: &[EpochMetrics], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(METRICS_HEADER)?;
    for r in rows {
        wr.write_record([
            r.epoch.to_string(),
            r.acc.to_string(),
            r.mse.to_string(),
            r.rec.to_string(),
            r.kl_cvae.to_string(),
            r.kl_vae.to_string(),
            r.cls.to_string(),
            r.prior.to_string(),
            r.consistency.to_string(),
            r.total.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Default)]
struct Running {
    sum: LossBreakdown,
    count: f64,
}

impl Running {
    fn add(&mut self, b: &LossBreakdown, weight: f64) {
        let s = &mut self.sum;
        s.rec += weight * b.rec;
        s.kl_cvae += weight * b.kl_cvae;
        s.prior_term += weight * b.prior_term;
        s.kl_vae += weight * b.kl_vae;
        s.cls += weight * b.cls;
        s.consistency += weight * b.consistency;
        s.total += weight * b.total;
        self.count += weight;
    }

    fn mean(&self) -> LossBreakdown {
        let n = self.count.max(1.0);
        let s = &self.sum;
        LossBreakdown {
            rec: s.rec / n,
            kl_cvae: s.kl_cvae / n,
            prior_term: s.prior_term / n,
            kl_vae: s.kl_vae / n,
            cls: s.cls / n,
            consistency: s.consistency / n,
            total: s.total / n,
        }
    }
}

fn accumulate(acc: &mut GradStore, grads: &GradStore, model: &GdvaeModel) -> Result<()> {
    for var in model.params().vars() {
        let t = var.as_tensor();
        if let Some(g) = grads.get(t) {
            let next = match acc.get(t) {
                Some(prev) => (prev + g)?,
                None => g.clone(),
            };
            acc.insert(t, next);
        }
    }
    Ok(())
}

/// Trains `model` in place and returns one [`EpochMetrics`] per epoch.
///
/// Accuracy and reconstruction error are measured on `eval` (or on the
/// training set when `eval` is `None`), limited to `cfg.eval_limit` images.
/// The class prior is fixed to the training label frequencies. A non-finite
/// loss stops training with [`Error::Diverged`]; the model then holds the
/// parameters from before the failing step.
pub fn fit(
    model: &mut GdvaeModel,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    model.set_class_log_prior(train.class_log_prior()?)?;
    let (c, h, w) = model.image_shape();
    let settings = cfg.loss_settings(c * h * w)?;
    let params = ParamsAdamW {
        lr: cfg.learning_rate,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    let mut opt = AdamW::new(model.vars(), params)?;
    let m = model.latent_dim();
    let eval_set = eval.unwrap_or(train);
    let eval_set = match cfg.eval_limit {
        Some(n) => eval_set.head(n.min(eval_set.len())),
        None => eval_set.clone(),
    };

    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_u64(cfg.seed, &[0x5348_5546, epoch as u64]));
        let mut running = Running::default();
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = GradStore::default();
            let mut batch_running = Running::default();
            for (ci, chunk) in batch.chunks(cfg.chunk_size).enumerate() {
                let sub = train.select(chunk);
                let x = sub.images.to_tensor(model.dtype(), model.device())?;
                let noise = LossNoise::for_step(cfg.seed, epoch, step, ci, chunk.len(), m, cfg);
                let out = total_loss_with_noise(&*model, &x, &sub.labels, cfg, &settings, &noise)?;
                if !out.breakdown.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        detail: serde_json::to_string(&out.breakdown)?,
                    });
                }
                let weight = chunk.len() as f64 / batch.len() as f64;
                let g = (out.total * weight)?.backward()?;
                accumulate(&mut grads, &g, model)?;
                running.add(&out.breakdown, chunk.len() as f64);
                batch_running.add(&out.breakdown, chunk.len() as f64);
            }
            opt.step(&grads)?;
            if step % 10 == 0 {
                let b = batch_running.mean();
                log::debug!(
                    "epoch {} step {step}: total {:.3} rec {:.3} kl_cvae {:.3} cls {:.4} consistency {:.3}",
                    epoch + 1,
                    b.total,
                    b.rec,
                    b.kl_cvae,
                    b.cls,
                    b.consistency
                );
            }
        }
        let gda = gda_params(&*model)?;
        let (acc, mse) = predictive_metrics(&*model, &gda, &eval_set, &cfg.em)?;
        let mean = running.mean();
        let row = EpochMetrics {
            epoch: epoch + 1,
            acc,
            mse,
            rec: mean.rec,
            kl_cvae: mean.kl_cvae,
            kl_vae: mean.kl_vae,
            cls: mean.cls,
            prior: mean.prior_term,
            consistency: mean.consistency,
            total: mean.total,
        };
        log::info!(
            "epoch {}/{}: acc {:.4} mse {:.5} total {:.2} ({:.1}s)",
            row.epoch,
            cfg.epochs,
            acc,
            mse,
            mean.total,
            started.elapsed().as_secs_f64()
        );
        on_epoch(&row);
        log.push(row);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_blobs, ImageBatch};
    use crate::nets::{ArchKind, ModelConfig};
    use candle_core::{DType, Device};

    fn tiny_data(n: usize) -> Dataset {
        // 8×8 images: a bright left half for class 0, right half for class 1.
        let mut values = Vec::with_capacity(n * 64);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % 2;
            for _r in 0..8 {
                for col in 0..8 {
                    let on = (col < 4) == (y == 0);
                    values.push(if on { 0.9 } else { 0.05 });
                }
            }
            labels.push(y);
        }
        Dataset::new(ImageBatch::new(values, n, (1, 8, 8)).unwrap(), labels, 2).unwrap()
    }

    #[test]
    fn short_run_is_finite_and_logs_each_epoch() {
        let cfg = ModelConfig {
            arch: ArchKind::Tiny,
            ..ModelConfig::default()
        };
        let mut model = GdvaeModel::new(cfg, 1, DType::F32, &Device::Cpu).unwrap();
        let train = TrainConfig {
            epochs: 2,
            batch_size: 8,
            chunk_size: 4,
            consistency_samples: 2,
            ..TrainConfig::default()
        };
        let mut seen = 0;
        let rows = fit(&mut model, &tiny_data(16), None, &train, |_| seen += 1).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(seen, 2);
        assert!(rows.iter().all(|r| r.total.is_finite() && r.acc >= 0.0));
        let mut csv = Vec::new();
        write_metrics_csv(&rows, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("epoch,acc,mse,rec,kl_cvae,kl_vae,cls,prior,consistency,total\n"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn rejects_empty_and_invalid_configs() {
        let cfg = ModelConfig {
            arch: ArchKind::Tiny,
            ..ModelConfig::default()
        };
        let mut model = GdvaeModel::new(cfg, 1, DType::F32, &Device::Cpu).unwrap();
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(fit(&mut model, &tiny_data(4), None, &bad, |_| {}).is_err());
        // Blob images are 16×16; the tiny model expects 8×8.
        let (images, labels) = make_synthetic_blobs(2, 0).unwrap();
        let blobs = Dataset::new(images, labels, 2).unwrap();
        assert!(fit(&mut model, &blobs, None, &TrainConfig::default(), |_| {}).is_err());
    }
}
