use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arch::{ArchKind, Architecture};
use super::ops::{conv2d, conv_transpose2d};
use super::{one_hot, GdvaeNet};
use crate::error::{Error, Result};
use crate::gaussian::{LOG_VAR_MAX, LOG_VAR_MIN};

/// Sizes that define a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ArchKind,
    /// Number of classes `K`.
    pub num_classes: usize,
    /// Latent dimension `M`.
    pub latent_dim: usize,
    /// Width `L` of the prior encoder's hidden layers.
    pub prior_width: usize,
    /// One class-independent covariance produced by its own small network.
    pub shared_covariance: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: ArchKind::Mnist,
            num_classes: 2,
            latent_dim: 10,
            prior_width: 4,
            shared_covariance: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.latent_dim == 0 || self.prior_width == 0 {
            return Err(Error::InvalidArgument(
                "num_classes, latent_dim and prior_width must be positive".into(),
            ));
        }
        Architecture::preset(self.arch).validate()
    }
}

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }
}

struct Init<'a> {
    rng: ChaCha8Rng,
    store: &'a mut ParamStore,
    dtype: DType,
    device: &'a Device,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, shape: (usize, usize), fan_in: usize) -> Result<()> {
        self.uniform_gain(name, shape, fan_in, 1.0)
    }

    fn uniform_gain(&mut self, name: String, shape: (usize, usize), fan_in: usize, gain: f64) -> Result<()> {
        let bound = gain / (fan_in.max(1) as f64).sqrt();
        let n = shape.0 * shape.1;
        let data: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        let t = Tensor::from_vec(data, shape, self.device)?.to_dtype(self.dtype)?;
        self.store.insert(name, Var::from_tensor(&t)?);
        Ok(())
    }

    fn linear(&mut self, name: &str, input: usize, output: usize) -> Result<()> {
        self.uniform(format!("{name}.weight"), (output, input), input)?;
        self.uniform(format!("{name}.bias"), (1, output), input)?;
        Ok(())
    }

    /// Linear layer whose weight bound is scaled by `gain`.
    fn linear_gain(&mut self, name: &str, input: usize, output: usize, gain: f64) -> Result<()> {
        self.uniform_gain(format!("{name}.weight"), (output, input), input, gain)?;
        self.uniform(format!("{name}.bias"), (1, output), input)?;
        Ok(())
    }

    fn conv(&mut self, name: &str, rows: usize, cols: usize, bias: usize, fan_in: usize) -> Result<()> {
        self.uniform(format!("{name}.weight"), (rows, cols), fan_in)?;
        self.uniform(format!("{name}.bias"), (1, bias), fan_in)?;
        Ok(())
    }
}

/// Encoder, decoder, prior encoder and label embeddings.
#[derive(Clone, Debug)]
pub struct GdvaeModel {
    config: ModelConfig,
    arch: Architecture,
    params: ParamStore,
    class_log_prior: Vec<f64>,
    dtype: DType,
    device: Device,
}

const PRIOR_LAYERS: usize = 3;
/// Negative slope of the prior encoder's activations.
const PRIOR_LEAK: f64 = 0.2;

impl GdvaeModel {
    /// Fresh model with fan-in scaled uniform weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let arch = Architecture::preset(config.arch);
        let (k, m, l) = (config.num_classes, config.latent_dim, config.prior_width);
        let (c, h, w) = arch.image;
        let mut params = ParamStore::default();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            store: &mut params,
            dtype,
            device,
        };

        init.linear("enc.label", k, h * w)?;
        let mut ch = c + 1;
        for (i, layer) in arch.encoder.iter().enumerate() {
            let ckk = ch * layer.kernel * layer.kernel;
            init.conv(&format!("enc.conv{i}"), layer.channels, ckk, layer.channels, ckk)?;
            ch = layer.channels;
        }
        let (ec, eh, ew) = arch.encoder_output()?;
        let features = ec * eh * ew;
        init.linear("enc.mean", features, m)?;
        init.linear("enc.log_var", features, m)?;

        init.linear("dec.label", k, 1)?;
        let (sc, sh, sw) = arch.decoder_seed;
        init.linear("dec.fc", m + 1, sc * sh * sw)?;
        let mut ch = sc;
        for (i, layer) in arch.decoder.iter().enumerate() {
            let kk = layer.kernel * layer.kernel;
            let fan_in = ch * kk / (layer.stride * layer.stride);
            init.conv(&format!("dec.convt{i}"), ch, layer.channels * kk, layer.channels, fan_in)?;
            ch = layer.channels;
        }

        let mlp = |init: &mut Init, name: &str, gain: f64| -> Result<()> {
            let mut width = k;
            for j in 0..PRIOR_LAYERS {
                init.linear_gain(&format!("{name}.fc{j}"), width, l, gain)?;
                width = l;
            }
            Ok(())
        };
        // The default bound shrinks the gap between the one-hot inputs at
        // every width-L layer, so the prototypes start nearly on top of each
        // other and the explainer shift behind the consistency loss is huge.
        // He gains keep the classes apart from the first step.
        let he = (6.0 / (1.0 + PRIOR_LEAK * PRIOR_LEAK)).sqrt();
        mlp(&mut init, "prior.loc", he)?;
        init.linear_gain("prior.loc.mean", l, m, 3f64.sqrt())?;
        if config.shared_covariance {
            mlp(&mut init, "prior.scale", 1.0)?;
            init.linear("prior.scale.log_var", l, m)?;
        } else {
            init.linear("prior.loc.log_var", l, m)?;
        }

        Ok(Self {
            class_log_prior: vec![-(k as f64).ln(); k],
            config,
            arch,
            params,
            dtype,
            device: device.clone(),
        })
    }

    /// Rebuilds a model around previously stored parameters, checking that
    /// every expected tensor is present with the right shape.
    pub fn from_params(
        config: ModelConfig,
        params: ParamStore,
        class_log_prior: Vec<f64>,
        device: &Device,
    ) -> Result<Self> {
        let reference = Self::new(config.clone(), 0, DType::F32, device)?;
        if reference.params.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        let mut dtype = None;
        for (name, var) in reference.params.iter() {
            let got = params.get(name)?;
            if got.dims() != var.dims() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.dims(),
                    var.dims()
                )));
            }
            match dtype {
                None => dtype = Some(got.dtype()),
                Some(d) if d != got.dtype() => {
                    return Err(Error::Format("parameters have mixed dtypes".into()))
                }
                _ => {}
            }
        }
        let mut model = Self {
            config,
            arch: reference.arch,
            params,
            class_log_prior: reference.class_log_prior,
            dtype: dtype.unwrap_or(DType::F32),
            device: device.clone(),
        };
        model.set_class_log_prior(class_log_prior)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.vars()
    }

    /// Sets the fixed class prior `log p(y)`; it must normalize.
    pub fn set_class_log_prior(&mut self, log_prior: Vec<f64>) -> Result<()> {
        crate::error::check_dim(self.config.num_classes, log_prior.len())?;
        let mass: f64 = log_prior.iter().map(|v| v.exp()).sum();
        if !mass.is_finite() || (mass - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "class priors sum to {mass}, expected 1"
            )));
        }
        self.class_log_prior = log_prior;
        Ok(())
    }

    /// Same weights converted to another floating point type.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut params = ParamStore::default();
        for (name, var) in self.params.iter() {
            params.insert(name.clone(), Var::from_tensor(&var.to_dtype(dtype)?)?);
        }
        Ok(Self {
            params,
            dtype,
            ..self.clone()
        })
    }

    /// Deep copy with detached parameters that share no storage with `self`.
    pub fn deep_clone(&self) -> Result<Self> {
        self.to_dtype(self.dtype)
    }

    fn linear(&self, name: &str, x: &Tensor) -> Result<Tensor> {
        let w = self.params.get(&format!("{name}.weight"))?;
        let b = self.params.get(&format!("{name}.bias"))?;
        Ok(x.matmul(&w.t()?)?.broadcast_add(b)?)
    }

    fn prior_mlp(&self, name: &str, input: &Tensor) -> Result<Tensor> {
        let mut h = input.clone();
        for j in 0..PRIOR_LAYERS {
            let a = self.linear(&format!("{name}.fc{j}"), &h)?;
            // Leaky: with width L = 4 a plain ReLU layer can die for every
            // class at once and freeze the prototypes.
            h = (a.relu()? * (1.0 - PRIOR_LEAK))?.add(&(a * PRIOR_LEAK)?)?;
        }
        Ok(h)
    }

    fn check_labels(&self, y: &[usize], batch: usize) -> Result<()> {
        crate::error::check_dim(batch, y.len())?;
        let k = self.config.num_classes;
        match y.iter().find(|&&c| c >= k) {
            Some(&index) => Err(Error::ClassOutOfRange { index, classes: k }),
            None => Ok(()),
        }
    }

    /// Flattened output of the last encoder convolution.
    pub fn encoder_features(&self, x: &Tensor, y: &[usize]) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if (c, h, w) != self.arch.image {
            return Err(Error::InvalidArgument(format!(
                "image shape {:?} does not match model input {:?}",
                (c, h, w),
                self.arch.image
            )));
        }
        self.check_labels(y, b)?;
        let onehot = one_hot(y, self.config.num_classes, self.dtype, &self.device)?;
        let emb = self.linear("enc.label", &onehot)?.reshape((b, 1, h, w))?;
        let mut hcur = Tensor::cat(&[&x.to_dtype(self.dtype)?, &emb], 1)?;
        for (i, layer) in self.arch.encoder.iter().enumerate() {
            let wt = self.params.get(&format!("enc.conv{i}.weight"))?;
            let bs = self.params.get(&format!("enc.conv{i}.bias"))?;
            hcur = conv2d(&hcur, wt, &bs.flatten_all()?, layer.kernel, layer.stride)?.relu()?;
        }
        Ok(hcur.flatten_from(1)?)
    }
}

impl GdvaeNet for GdvaeModel {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn image_shape(&self) -> (usize, usize, usize) {
        self.arch.image
    }

    fn device(&self) -> &Device {
        &self.device
    }

    fn dtype(&self) -> DType {
        self.dtype
    }

    fn shared_covariance(&self) -> bool {
        self.config.shared_covariance
    }

    fn class_log_prior(&self) -> Vec<f64> {
        self.class_log_prior.clone()
    }

    fn encode(&self, x: &Tensor, y: &[usize]) -> Result<(Tensor, Tensor)> {
        let feats = self.encoder_features(x, y)?;
        let mean = self.linear("enc.mean", &feats)?;
        let log_var = self
            .linear("enc.log_var", &feats)?
            .clamp(LOG_VAR_MIN, LOG_VAR_MAX)?;
        Ok((mean, log_var))
    }

    fn decode_raw(&self, z: &Tensor, y: &[usize]) -> Result<Tensor> {
        let (b, m) = z.dims2()?;
        crate::error::check_dim(self.config.latent_dim, m)?;
        self.check_labels(y, b)?;
        let onehot = one_hot(y, self.config.num_classes, self.dtype, &self.device)?;
        let emb = self.linear("dec.label", &onehot)?;
        let input = Tensor::cat(&[&z.to_dtype(self.dtype)?, &emb], D::Minus1)?;
        let (sc, sh, sw) = self.arch.decoder_seed;
        let mut h = self
            .linear("dec.fc", &input)?
            .relu()?
            .reshape((b, sc, sh, sw))?;
        for (i, layer) in self.arch.decoder.iter().enumerate() {
            let wt = self.params.get(&format!("dec.convt{i}.weight"))?;
            let bs = self.params.get(&format!("dec.convt{i}.bias"))?;
            let bias = bs.flatten_all()?;
            h = conv_transpose2d(&h, wt, &bias, layer.channels, layer.kernel, layer.stride)?
                .relu()?;
        }
        Ok(h)
    }

    fn prior(&self) -> Result<(Tensor, Tensor)> {
        let k = self.config.num_classes;
        let all: Vec<usize> = (0..k).collect();
        let onehot = one_hot(&all, k, self.dtype, &self.device)?;
        let h = self.prior_mlp("prior.loc", &onehot)?;
        let mean = self.linear("prior.loc.mean", &h)?;
        let log_var = if self.config.shared_covariance {
            // The covariance network always sees the same one-hot input.
            let constant = one_hot(&[1.min(k - 1)], k, self.dtype, &self.device)?;
            let hs = self.prior_mlp("prior.scale", &constant)?;
            self.linear("prior.scale.log_var", &hs)?
                .broadcast_as((k, self.config.latent_dim))?
                .contiguous()?
        } else {
            self.linear("prior.loc.log_var", &h)?
        };
        Ok((mean, log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX)?))
    }
}
