//! Checkpoints: a JSON manifest next to a raw little-endian `f64` blob.
//!
//! `name.json` lists every parameter (name, shape, element offset) in blob
//! order plus the kind, seed, and the configuration needed to rebuild the
//! weight structure; `name.bin` holds the values back to back.

use std::path::{Path, PathBuf};

use diffcore::Array;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TokenizerConfig;
use crate::error::{Error, Result};
use crate::maskmodel::{BaseWeights, ControlWeights, ModelDims};
use crate::nn::{named_arrays, Tree};
use crate::tokenizer::TokenizerWeights;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub kind: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub blob: String,
    pub blob_sha256: String,
    pub params: Vec<ParamEntry>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

/// Writes `stem.json` and `stem.bin`.
pub fn write(
    stem: impl AsRef<Path>,
    kind: &str,
    seed: u64,
    config: serde_json::Value,
    arrays: &[(String, Array)],
) -> Result<Manifest> {
    let (json, bin) = paths(stem.as_ref());
    let mut blob = Vec::new();
    let mut params = Vec::with_capacity(arrays.len());
    let mut offset = 0;
    for (name, a) in arrays {
        params.push(ParamEntry {
            name: name.clone(),
            shape: a.shape().to_vec(),
            offset,
        });
        offset += a.len();
        for x in a.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        kind: kind.to_string(),
        seed,
        config,
        blob: bin.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string(),
        blob_sha256: hex::encode(Sha256::digest(&blob)),
        params,
    };
    if let Some(dir) = json.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    Ok(manifest)
}

/// Reads a manifest and its arrays, verifying the blob hash and length.
pub fn read(stem: impl AsRef<Path>, kind: &str) -> Result<(Manifest, Vec<(String, Array)>)> {
    let (json, _) = paths(stem.as_ref());
    let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            manifest.version
        )));
    }
    if manifest.kind != kind {
        return Err(Error::Checkpoint(format!(
            "expected a {kind} checkpoint, found {}",
            manifest.kind
        )));
    }
    let bin = json.with_file_name(&manifest.blob);
    let blob = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if hex::encode(Sha256::digest(&blob)) != manifest.blob_sha256 {
        return Err(Error::Checkpoint(format!(
            "{} does not match its manifest hash",
            bin.display()
        )));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut arrays = Vec::with_capacity(manifest.params.len());
    for p in &manifest.params {
        let n: usize = p.shape.iter().product();
        let data = values
            .get(p.offset..p.offset + n)
            .ok_or_else(|| Error::Checkpoint(format!("blob too short for {}", p.name)))?;
        arrays.push((p.name.clone(), Array::new(p.shape.clone(), data.to_vec())?));
    }
    let expected: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if expected * 8 != blob.len() {
        return Err(Error::Checkpoint(format!(
            "blob holds {} values, manifest lists {expected}",
            values.len()
        )));
    }
    Ok((manifest, arrays))
}

/// Overwrites the leaves of `template` from `arrays`, matching names and
/// shapes exactly; every leaf must be present.
pub fn fill_tree<W: Tree<Array>>(template: &mut W, prefix: &str, arrays: &[(String, Array)]) -> Result<()> {
    let lookup: std::collections::HashMap<&str, &Array> = arrays.iter().map(|(n, a)| (n.as_str(), a)).collect();
    let mut err = None;
    template.visit_mut(prefix, &mut |name, leaf| {
        if err.is_some() {
            return;
        }
        match lookup.get(name) {
            Some(a) if a.shape() == leaf.shape() => *leaf = (*a).clone(),
            Some(a) => {
                err = Some(Error::Checkpoint(format!(
                    "{name}: shape {:?} does not match expected {:?}",
                    a.shape(),
                    leaf.shape()
                )))
            }
            None => err = Some(Error::Checkpoint(format!("missing parameter {name}"))),
        }
    });
    err.map_or(Ok(()), Err)
}

fn find(arrays: &[(String, Array)], name: &str) -> Result<Array> {
    arrays
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, a)| a.clone())
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
}

#[derive(Serialize, Deserialize)]
struct TokenizerMeta {
    tokenizer: TokenizerConfig,
    joints: usize,
}

pub fn save_tokenizer(stem: impl AsRef<Path>, w: &TokenizerWeights, seed: u64) -> Result<Manifest> {
    let mut arrays = vec![("mean".to_string(), w.mean.clone()), ("std".to_string(), w.std.clone())];
    arrays.extend(named_arrays(&w.net, "net"));
    let meta = TokenizerMeta {
        tokenizer: w.config.clone(),
        joints: w.joints,
    };
    write(stem, "tokenizer", seed, serde_json::to_value(meta)?, &arrays)
}

pub fn load_tokenizer(stem: impl AsRef<Path>) -> Result<TokenizerWeights> {
    let (m, arrays) = read(stem, "tokenizer")?;
    let meta: TokenizerMeta = serde_json::from_value(m.config)?;
    let mut w = TokenizerWeights::init(&meta.tokenizer, meta.joints, 0);
    w.mean = find(&arrays, "mean")?;
    w.std = find(&arrays, "std")?;
    if w.mean.shape() != [w.feature_dim()] || w.std.shape() != [w.feature_dim()] {
        return Err(Error::Checkpoint(
            "standardization statistics have the wrong width".into(),
        ));
    }
    fill_tree(&mut w.net, "net", &arrays)?;
    Ok(w)
}

pub fn save_base(stem: impl AsRef<Path>, w: &BaseWeights, seed: u64) -> Result<Manifest> {
    write(
        stem,
        "base",
        seed,
        serde_json::to_value(&w.dims)?,
        &named_arrays(&w.net, "net"),
    )
}

pub fn load_base(stem: impl AsRef<Path>) -> Result<BaseWeights> {
    let (m, arrays) = read(stem, "base")?;
    let dims: ModelDims = serde_json::from_value(m.config)?;
    let mut w = BaseWeights::init(&dims, 0);
    fill_tree(&mut w.net, "net", &arrays)?;
    Ok(w)
}

pub fn save_control(stem: impl AsRef<Path>, w: &ControlWeights, seed: u64) -> Result<Manifest> {
    write(
        stem,
        "control",
        seed,
        serde_json::to_value(&w.dims)?,
        &named_arrays(&w.net, "net"),
    )
}

pub fn load_control(stem: impl AsRef<Path>) -> Result<ControlWeights> {
    let (m, arrays) = read(stem, "control")?;
    let dims: ModelDims = serde_json::from_value(m.config)?;
    let mut w = ControlWeights::init(&BaseWeights::init(&dims, 0));
    fill_tree(&mut w.net, "net", &arrays)?;
    Ok(w)
}

/// SHA-256 of a checkpoint's blob, hex encoded.
pub fn blob_hash(stem: impl AsRef<Path>) -> Result<String> {
    let (_, bin) = paths(stem.as_ref());
    let blob = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    Ok(hex::encode(Sha256::digest(&blob)))
}
