//! Binary container for named `f64` tensors:
//!
//! ```text
//! magic (8 bytes) | version u32 LE | manifest length u64 LE | manifest JSON
//! | tensor blobs, row-major f64 LE, in manifest order
//! ```
//!
//! The manifest is a JSON object whose `"tensors"` entry lists
//! `{"name", "shape"}` for every blob.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::ModelConfig;
use super::net::Model;
use super::params::ParamStore;
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GLATTSCK";
pub const BUNDLE_MAGIC: &[u8; 8] = b"GLATTSST";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::contract(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_container(magic: &[u8; 8], mut manifest: Value, tensors: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let entries: Vec<Entry> = tensors
        .iter()
        .map(|(n, t)| Entry {
            name: n.to_string(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let obj = manifest
        .as_object_mut()
        .ok_or_else(|| Error::contract("container manifest must be a JSON object"))?;
    obj.insert("tensors".into(), serde_json::to_value(entries)?);
    let text = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(20 + text.len() + tensors.iter().map(|(_, t)| t.numel() * 8).sum::<usize>());
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_container(magic: &[u8; 8], bytes: &[u8]) -> Result<(Value, Vec<(String, Tensor)>)> {
    ensure_len(bytes, 20)?;
    if &bytes[..8] != magic {
        return Err(Error::format(format!(
            "bad magic: expected {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::format(format!("unsupported format version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    ensure_len(bytes, 20 + mlen)?;
    let manifest: Value = serde_json::from_slice(&bytes[20..20 + mlen])?;
    let entries: Vec<Entry> = serde_json::from_value(
        manifest
            .get("tensors")
            .cloned()
            .ok_or_else(|| Error::format("manifest lacks a tensor table"))?,
    )?;
    let mut pos = 20 + mlen;
    let mut tensors = Vec::with_capacity(entries.len());
    for e in entries {
        let n: usize = e.shape.iter().product();
        ensure_len(bytes, pos + 8 * n)?;
        let data = bytes[pos..pos + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        pos += 8 * n;
        let t = Tensor::new(e.shape, data).map_err(|err| Error::format(format!("{}: {err}", e.name)))?;
        tensors.push((e.name, t));
    }
    if pos != bytes.len() {
        return Err(Error::format(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok((manifest, tensors))
}

fn ensure_len(bytes: &[u8], need: usize) -> Result<()> {
    if bytes.len() < need {
        return Err(Error::format(format!("truncated file: {} of {need} bytes", bytes.len())));
    }
    Ok(())
}

/// Serializes the model configuration and every parameter.
pub fn checkpoint_bytes(model: &Model) -> Result<Vec<u8>> {
    let p = model.params();
    let tensors: Vec<(&str, &Tensor)> = p.names().iter().map(String::as_str).zip(p.tensors()).collect();
    let manifest = json!({
        "kind": "model",
        "config": model.config(),
        "param_hash": p.content_hash(),
    });
    encode_container(CHECKPOINT_MAGIC, manifest, &tensors)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &checkpoint_bytes(model)?)
}

/// Loads a checkpoint, validating every parameter name and shape against
/// the stored configuration.
pub fn load_checkpoint_bytes(bytes: &[u8]) -> Result<Model> {
    let (manifest, tensors) = decode_container(CHECKPOINT_MAGIC, bytes)?;
    let config: ModelConfig = serde_json::from_value(
        manifest
            .get("config")
            .cloned()
            .ok_or_else(|| Error::format("checkpoint manifest lacks a config"))?,
    )?;
    config.validate()?;
    let expected = Model::expected_params(&config);
    ensure!(
        expected.len() == tensors.len(),
        "checkpoint holds {} tensors, configuration expects {}",
        tensors.len(),
        expected.len()
    );
    let mut store = ParamStore::new();
    for ((name, t), (ename, eshape, decay)) in tensors.into_iter().zip(expected) {
        if name != ename || t.shape() != eshape.as_slice() {
            return Err(Error::format(format!(
                "checkpoint tensor {name} {:?} does not match expected {ename} {eshape:?}",
                t.shape()
            )));
        }
        store.insert(name, t, decay)?;
    }
    Model::from_params(config, store)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    load_checkpoint_bytes(&std::fs::read(path)?)
}

/// SHA-256 of a checkpoint's parameters, as stored in bundles.
pub fn model_hash(model: &Model) -> String {
    model.params().content_hash()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let m = Model::new(ModelConfig::tiny(), 3).unwrap();
        let bytes = checkpoint_bytes(&m).unwrap();
        let back = load_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());
        assert_eq!(checkpoint_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = Model::new(ModelConfig::tiny(), 3).unwrap();
        let bytes = checkpoint_bytes(&m).unwrap();
        assert!(load_checkpoint_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(load_checkpoint_bytes(&wrong).is_err());
        assert!(decode_container(BUNDLE_MAGIC, &bytes).is_err());
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let m = Model::new(ModelConfig::tiny(), 3).unwrap();
        let p = m.params();
        let mut tensors: Vec<(&str, Tensor)> = p
            .names()
            .iter()
            .map(String::as_str)
            .zip(p.tensors().iter().cloned())
            .collect();
        tensors[1].1 = Tensor::zeros([2, 2]);
        let refs: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, t)| (*n, t)).collect();
        let manifest = json!({"kind": "model", "config": m.config()});
        let bytes = encode_container(CHECKPOINT_MAGIC, manifest, &refs).unwrap();
        let err = load_checkpoint_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains(p.names()[1].as_str()), "{err}");
    }
}
