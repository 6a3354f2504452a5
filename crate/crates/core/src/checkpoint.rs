//! Checkpoints: a tar archive with `meta.json` and `weights.safetensors`.
//!
//! Archive headers carry no timestamps or owners, so the same weights always
//! produce the same bytes.

use std::io::{Cursor, Read};
use std::path::Path;

use candle_core::{DType, Device, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nets::{GdvaeModel, GdvaeNet, ModelConfig, ParamStore};

pub const FORMAT: &str = "gdvae-ckpt-1";
const META: &str = "meta.json";
const WEIGHTS: &str = "weights.safetensors";
/// Upper bound on a single archive member.
const MAX_MEMBER: u64 = 1 << 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    pub model: ModelConfig,
    pub class_log_prior: Vec<f64>,
    pub dtype: String,
    pub epochs: usize,
    #[serde(default)]
    pub run: Option<RunConfig>,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Format(format!("unsupported weight dtype {other:?}"))),
    }
}

fn append(builder: &mut tar::Builder<Vec<u8>>, name: &str, data: &[u8]) -> Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(data.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_uid(0);
    header.set_gid(0);
    header.set_entry_type(tar::EntryType::Regular);
    builder.append_data(&mut header, name, data)?;
    Ok(())
}

/// Serializes a model with its metadata.
pub fn to_bytes(model: &GdvaeModel, epochs: usize, run: Option<&RunConfig>) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        format: FORMAT.to_string(),
        model: model.config().clone(),
        class_log_prior: model.class_log_prior(),
        dtype: dtype_name(model.dtype())?.to_string(),
        epochs,
        run: run.cloned(),
    };
    let meta_bytes = serde_json::to_vec_pretty(&meta)?;
    let tensors: Vec<(String, candle_core::Tensor)> = model
        .params()
        .iter()
        .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
        .collect();
    let weights = safetensors::serialize(tensors, None)
        .map_err(|e| Error::Format(format!("safetensors: {e}")))?;
    let mut builder = tar::Builder::new(Vec::new());
    builder.mode(tar::HeaderMode::Deterministic);
    append(&mut builder, META, &meta_bytes)?;
    append(&mut builder, WEIGHTS, &weights)?;
    Ok(builder.into_inner()?)
}

/// Parses an archive produced by [`to_bytes`].
pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<(GdvaeModel, CheckpointMeta)> {
    let mut archive = tar::Archive::new(Cursor::new(bytes));
    let mut meta_bytes = None;
    let mut weight_bytes = None;
    let entries = archive
        .entries()
        .map_err(|e| Error::Format(format!("not a checkpoint archive: {e}")))?;
    for entry in entries {
        let mut entry = entry.map_err(|e| Error::Format(format!("corrupt archive: {e}")))?;
        let name = entry
            .path()
            .map_err(|e| Error::Format(format!("bad member name: {e}")))?
            .to_string_lossy()
            .into_owned();
        let size = entry.header().size().map_err(|e| Error::Format(e.to_string()))?;
        if size > MAX_MEMBER {
            return Err(Error::Format(format!("member {name} is too large")));
        }
        let mut buf = Vec::with_capacity(size as usize);
        entry
            .read_to_end(&mut buf)
            .map_err(|e| Error::Format(format!("truncated member {name}: {e}")))?;
        if buf.len() as u64 != size {
            return Err(Error::Format(format!("truncated member {name}")));
        }
        match name.as_str() {
            META => meta_bytes = Some(buf),
            WEIGHTS => weight_bytes = Some(buf),
            _ => {}
        }
    }
    let meta_bytes = meta_bytes.ok_or_else(|| Error::Format(format!("missing {META}")))?;
    let weight_bytes = weight_bytes.ok_or_else(|| Error::Format(format!("missing {WEIGHTS}")))?;

    // Check the version before the full schema so old files get a clear error.
    let raw: serde_json::Value = serde_json::from_slice(&meta_bytes)?;
    let found = raw.get("format").and_then(|v| v.as_str()).unwrap_or("");
    if found != FORMAT {
        return Err(Error::Version {
            expected: FORMAT.to_string(),
            found: found.to_string(),
        });
    }
    let meta: CheckpointMeta = serde_json::from_value(raw)?;
    meta.model.validate()?;

    let tensors = candle_core::safetensors::load_buffer(&weight_bytes, device)
        .map_err(|e| Error::Format(format!("weights: {e}")))?;
    let mut params = ParamStore::default();
    for (name, t) in tensors {
        params.insert(name, Var::from_tensor(&t)?);
    }
    let model = GdvaeModel::from_params(meta.model.clone(), params, meta.class_log_prior.clone(), device)?;
    if dtype_name(model.dtype())? != meta.dtype {
        return Err(Error::Format(format!(
            "metadata says {}, weights are {:?}",
            meta.dtype,
            model.dtype()
        )));
    }
    Ok((model, meta))
}

pub fn save(path: &Path, model: &GdvaeModel, epochs: usize, run: Option<&RunConfig>) -> Result<()> {
    std::fs::write(path, to_bytes(model, epochs, run)?)?;
    Ok(())
}

pub fn load(path: &Path, device: &Device) -> Result<(GdvaeModel, CheckpointMeta)> {
    from_bytes(&std::fs::read(path)?, device)
}

/// Lower-case hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ArchKind;

    fn tiny() -> GdvaeModel {
        let cfg = ModelConfig {
            arch: ArchKind::Tiny,
            ..ModelConfig::default()
        };
        GdvaeModel::new(cfg, 11, DType::F32, &Device::Cpu).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let mut model = tiny();
        model.set_class_log_prior(vec![0.25f64.ln(), 0.75f64.ln()]).unwrap();
        let bytes = to_bytes(&model, 3, None).unwrap();
        assert_eq!(bytes, to_bytes(&model, 3, None).unwrap());
        let (back, meta) = from_bytes(&bytes, &Device::Cpu).unwrap();
        assert_eq!(meta.epochs, 3);
        assert_eq!(back.class_log_prior(), model.class_log_prior());
        assert_eq!(to_bytes(&back, 3, None).unwrap(), bytes);
    }

    #[test]
    fn rejects_other_versions() {
        let model = tiny();
        let bytes = to_bytes(&model, 0, None).unwrap();
        let needle = FORMAT.as_bytes();
        let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        let mut old = bytes.clone();
        old[at + needle.len() - 1] = b'0';
        match from_bytes(&old, &Device::Cpu) {
            Err(Error::Version { found, .. }) => assert_eq!(found, "gdvae-ckpt-0"),
            other => panic!("expected version error, got {:?}", other.map(|(_, m)| m)),
        }
    }

    #[test]
    fn rejects_truncated_archives() {
        let bytes = to_bytes(&tiny(), 0, None).unwrap();
        for cut in [0, 100, 600, bytes.len() / 2, bytes.len() - 1100] {
            assert!(from_bytes(&bytes[..cut], &Device::Cpu).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn hash_is_hex_sha256() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
