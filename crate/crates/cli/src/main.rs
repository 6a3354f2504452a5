use std::fs;
use std::io::BufWriter;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand};

use gdvae::checkpoint::{self, CheckpointMeta};
use gdvae::config::RunConfig;
use gdvae::counterfactual::{cf_image, prototype_path, CfMethod, CfRequest, CfTarget};
use gdvae::data::png::{decode_gray, encode_gray};
use gdvae::data::{ImageBatch, Split};
use gdvae::em::{EmConfig, EmMode};
use gdvae::gaussian::{argmax, gda_posterior};
use gdvae::metrics::{consistency_sweep, evaluate_model, write_sweep_csv, EvalConfig};
use gdvae::nets::{decode, gda_params, latents_tensor, prototypes, GdvaeModel, GdvaeNet};
use gdvae::train::{fit, write_metrics_csv};
use gdvae::Error;

#[derive(Parser)]
#[command(name = "gdvae", version, about = "Train and explain a Gaussian discriminant VAE")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration (dataset, model, train sections).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Output directory; every file written goes here.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics.csv, model.ckpt and config.json.
    Train {
        #[command(flatten)]
        common: Common,
        /// Use only the first N training images.
        #[arg(long)]
        train_limit: Option<usize>,
    },
    /// Accuracy, reconstruction and counterfactual scores on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Restrict the counterfactual scores to one explainer.
        #[arg(long)]
        method: Option<CfMethod>,
        #[arg(long, default_value_t = 100)]
        sweep_images: usize,
        /// Evaluate on the first N test images only.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        no_frechet: bool,
    },
    /// Counterfactual for one image.
    Cf {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "local_m")]
        method: CfMethod,
        /// Requested confidence for the predicted class.
        #[arg(long = "p-c", default_value_t = 0.95)]
        p_c: f64,
        /// Query image as a grayscale PNG; defaults to a test image.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Index of the test image used when `--image` is absent.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// 19 counterfactuals per image for p_c = 0.05 … 0.95.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        method: Option<CfMethod>,
        #[arg(long, default_value_t = 10)]
        images: usize,
    },
    /// Decoded class prototypes and the path between them.
    Prototypes {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        steps: usize,
    },
    /// HTTP API for the explorer.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Allowed CORS origin; any origin when absent.
        #[arg(long)]
        cors_origin: Option<String>,
    },
}

fn base_config(common: &Common, meta: Option<&CheckpointMeta>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, meta.and_then(|m| m.run.clone())) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(run)) => run,
        (None, None) => {
            let mut cfg = RunConfig::default();
            if let Some(m) = meta {
                cfg.model = m.model.clone();
            }
            cfg
        }
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(epochs) = common.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(gamma) = common.gamma {
        cfg.train.gamma = gamma;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn em_for(cfg: &RunConfig) -> EmConfig {
    let mut em = cfg.train.em;
    if let EmMode::Stochastic { .. } = em.mode {
        em.mode = EmMode::Stochastic { seed: cfg.train.seed };
    }
    em
}

fn out_dir(common: &Common) -> Result<&Path> {
    fs::create_dir_all(&common.out)
        .with_context(|| format!("cannot create {}", common.out.display()))?;
    Ok(&common.out)
}

fn load_checkpoint(path: &Path) -> Result<(GdvaeModel, CheckpointMeta, String)> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    let (model, meta) = checkpoint::from_bytes(&bytes, &Device::Cpu)?;
    Ok((model, meta, checkpoint::sha256_hex(&bytes)))
}

fn write_png(path: &Path, batch: &ImageBatch, i: usize) -> Result<()> {
    let (_, h, w) = batch.shape();
    fs::write(path, encode_gray(batch.image(i), h, w)?)?;
    Ok(())
}

/// Lays out single-channel images side by side.
fn strip(batch: &ImageBatch) -> Result<ImageBatch> {
    let (c, h, w) = batch.shape();
    let n = batch.len();
    let mut values = vec![0f32; h * w * n];
    for i in 0..n {
        let img = batch.image(i);
        for r in 0..h {
            for col in 0..w {
                values[r * w * n + i * w + col] = img[r * w + col];
            }
        }
    }
    Ok(ImageBatch::new(values, 1, (c, h, w * n))?)
}

fn train(common: &Common, train_limit: Option<usize>) -> Result<()> {
    let cfg = base_config(common, None)?;
    let out = out_dir(common)?;
    let started = Instant::now();
    let mut train_set = cfg.dataset.load(Split::Train)?;
    if let Some(n) = train_limit {
        train_set = train_set.head(n.min(train_set.len()));
    }
    let test_set = cfg.dataset.load(Split::Test)?;
    let mut model = GdvaeModel::new(cfg.model.clone(), cfg.train.seed, DType::F32, &Device::Cpu)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.em = em_for(&cfg);
    log::info!(
        "training on {} images ({} test), {} parameters",
        train_set.len(),
        test_set.len(),
        model.params().num_scalars()
    );
    let rows = match fit(&mut model, &train_set, Some(&test_set), &train_cfg, |_| {}) {
        Ok(rows) => rows,
        Err(e @ Error::Diverged { .. }) => {
            let dump = out.join("diverged.ckpt");
            checkpoint::save(&dump, &model, 0, Some(&cfg))?;
            bail!("{e}; parameters before the failing step saved to {}", dump.display());
        }
        Err(e) => return Err(e.into()),
    };
    write_metrics_csv(&rows, BufWriter::new(fs::File::create(out.join("metrics.csv"))?))?;
    let bytes = checkpoint::to_bytes(&model, rows.len(), Some(&cfg))?;
    fs::write(out.join("model.ckpt"), &bytes)?;
    let hash = checkpoint::sha256_hex(&bytes);
    fs::write(out.join("model.ckpt.sha256"), format!("{hash}  model.ckpt\n"))?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    if let Some(last) = rows.last() {
        println!("acc {:.4} mse {:.5}", last.acc, last.mse);
    }
    println!("checkpoint sha256 {hash}");
    println!("elapsed {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn eval(
    common: &Common,
    checkpoint: &Path,
    method: Option<CfMethod>,
    sweep_images: usize,
    limit: Option<usize>,
    no_frechet: bool,
) -> Result<()> {
    let (model, meta, _) = load_checkpoint(checkpoint)?;
    let cfg = base_config(common, Some(&meta))?;
    let out = out_dir(common)?;
    let mut test = cfg.dataset.load(Split::Test)?;
    if let Some(n) = limit {
        test = test.head(n.min(test.len()));
    }
    let gda = gda_params(&model)?;
    let methods = match method {
        Some(m) => vec![m],
        None if model.num_classes() == 2 => CfMethod::ALL.to_vec(),
        None => Vec::new(),
    };
    let eval_cfg = EvalConfig {
        em: em_for(&cfg),
        methods,
        sweep_images,
        frechet: !no_frechet,
    };
    let report = evaluate_model(&model, &gda, &test, &eval_cfg)?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    report.write_csv(BufWriter::new(fs::File::create(out.join("report.csv"))?))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn query_image(cfg: &RunConfig, model: &GdvaeModel, image: Option<&Path>, index: usize) -> Result<ImageBatch> {
    match image {
        Some(path) => {
            let (h, w, px) = decode_gray(&fs::read(path)?)?;
            let shape = model.image_shape();
            if (1, h, w) != shape {
                bail!("{} is {h}×{w}, the model expects {}×{}", path.display(), shape.1, shape.2);
            }
            Ok(ImageBatch::new(px, 1, shape)?)
        }
        None => {
            let test = cfg.dataset.load(Split::Test)?;
            if index >= test.len() {
                bail!("test split has {} images, index {index} is out of range", test.len());
            }
            Ok(test.images.select(&[index]))
        }
    }
}

fn cf(common: &Common, checkpoint: &Path, method: CfMethod, p_c: f64, image: Option<&Path>, index: usize) -> Result<()> {
    let (model, meta, _) = load_checkpoint(checkpoint)?;
    let cfg = base_config(common, Some(&meta))?;
    let out = out_dir(common)?;
    let query = query_image(&cfg, &model, image, index)?;
    let gda = gda_params(&model)?;
    let req = CfRequest {
        method,
        target: CfTarget::Confidence(p_c),
        counter_class: None,
        reference_class: None,
    };
    let x = query.to_tensor(model.dtype(), model.device())?;
    let r = cf_image(&model, &gda, &x, &req, &EmConfig::mean_only(), None)?;
    write_png(&out.join("query.png"), &query, 0)?;
    write_png(&out.join("x_star.png"), &r.x_star, 0)?;
    write_png(&out.join("x_delta.png"), &r.x_delta, 0)?;
    let summary = serde_json::json!({
        "method": method,
        "p_c": p_c,
        "class": r.class,
        "counter_class": r.counter_class,
        "class_probs": r.class_probs,
        "delta": r.delta,
        "f_delta": r.f_delta,
        "constraint_error": (r.f_delta - r.delta).abs(),
        "kappa": r.kappa,
        "p_hat": r.p_hat,
    });
    fs::write(out.join("cf.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn sweep(common: &Common, checkpoint: &Path, method: Option<CfMethod>, images: usize) -> Result<()> {
    let (model, meta, _) = load_checkpoint(checkpoint)?;
    let cfg = base_config(common, Some(&meta))?;
    let out = out_dir(common)?;
    let test = cfg.dataset.load(Split::Test)?;
    let subset = test.head(images.min(test.len()));
    let methods = method.map_or_else(|| CfMethod::ALL.to_vec(), |m| vec![m]);
    let gda = gda_params(&model)?;
    let records = consistency_sweep(&model, &gda, &subset.images, &methods, &em_for(&cfg), false)?;
    write_sweep_csv(&records, BufWriter::new(fs::File::create(out.join("sweep.csv"))?))?;
    let failures = records.iter().filter(|r| r.error.is_some()).count();
    println!("{} records ({failures} failed) written to {}", records.len(), out.join("sweep.csv").display());
    Ok(())
}

fn prototypes_cmd(common: &Common, checkpoint: &Path, steps: usize) -> Result<()> {
    let (model, _, _) = load_checkpoint(checkpoint)?;
    let out = out_dir(common)?;
    let protos = ImageBatch::from_tensor(&prototypes(&model)?)?;
    for k in 0..protos.len() {
        write_png(&out.join(format!("prototype_{k}.png")), &protos, k)?;
    }
    let gda = gda_params(&model)?;
    let path = prototype_path(&gda, 0, 1, steps)?;
    let labels = path
        .iter()
        .map(|z| gda_posterior(&gda, z).map(|p| argmax(&p)))
        .collect::<gdvae::Result<Vec<_>>>()?;
    let z = latents_tensor(&path, model.dtype(), model.device())?;
    let imgs = ImageBatch::from_tensor(&decode(&model, &z, &labels)?)?;
    write_png(&out.join("path.png"), &strip(&imgs)?, 0)?;
    println!("{} prototypes and a {steps}-step path written to {}", protos.len(), out.display());
    Ok(())
}

fn serve(checkpoint: &Path, host: &str, port: u16, cors_origin: Option<&str>) -> Result<()> {
    let (model, _, hash) = load_checkpoint(checkpoint)?;
    let state = Arc::new(gdvae_service::AppState::new(model, hash)?);
    let addr: SocketAddr = format!("{host}:{port}").parse().context("invalid host or port")?;
    let cors = gdvae_service::cors(cors_origin).map_err(anyhow::Error::msg)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(gdvae_service::serve(state, addr, cors))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train { common, train_limit } => train(common, *train_limit),
        Command::Eval {
            common,
            checkpoint,
            method,
            sweep_images,
            limit,
            no_frechet,
        } => eval(common, checkpoint, *method, *sweep_images, *limit, *no_frechet),
        Command::Cf {
            common,
            checkpoint,
            method,
            p_c,
            image,
            index,
        } => cf(common, checkpoint, *method, *p_c, image.as_deref(), *index),
        Command::Sweep {
            common,
            checkpoint,
            method,
            images,
        } => sweep(common, checkpoint, *method, *images),
        Command::Prototypes {
            common,
            checkpoint,
            steps,
        } => prototypes_cmd(common, checkpoint, *steps),
        Command::Serve {
            checkpoint,
            port,
            host,
            cors_origin,
            ..
        } => serve(checkpoint, host, *port, cors_origin.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap prints usage and exits with status 2 on bad arguments.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
