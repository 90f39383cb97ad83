//! Binary checkpoint container.
//!
//! ```text
//! magic     8 bytes  b"ATOPCKPT"
//! version   u32 LE
//! hlen      u32 LE   length of the JSON header
//! header    hlen bytes of UTF-8 JSON (CheckpointHeader)
//! blen      u64 LE   length of the parameter blob in bytes
//! blob      blen bytes: every parameter as f32 LE, in header order
//! checksum  32 bytes SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use atop_tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::nets::{ClassifierArch, ClassifierNet, DiscriminatorArch, DiscriminatorNet, PurifierArch, PurifierNet};
use super::params::Params;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ATOPCKPT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Classifier,
    Purifier,
    Discriminator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: ModelKind,
    /// Serialized architecture descriptor of `kind`.
    pub arch: serde_json::Value,
    pub hyperparameters: serde_json::Value,
    pub seed: u64,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Params<f32>,
}

impl Checkpoint {
    fn build(
        kind: ModelKind,
        arch: serde_json::Value,
        params: &Params<f32>,
        hyperparameters: serde_json::Value,
        seed: u64,
    ) -> Self {
        let entries = params
            .names()
            .iter()
            .zip(params.tensors())
            .map(|(n, t)| ParamEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect();
        Self {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                kind,
                arch,
                hyperparameters,
                seed,
                params: entries,
            },
            params: params.clone(),
        }
    }

    pub fn classifier(net: &ClassifierNet<f32>, hyperparameters: serde_json::Value, seed: u64) -> Self {
        let arch = serde_json::to_value(&net.arch).expect("arch serializes");
        Self::build(ModelKind::Classifier, arch, &net.params, hyperparameters, seed)
    }

    pub fn purifier(net: &PurifierNet<f32>, hyperparameters: serde_json::Value, seed: u64) -> Self {
        let arch = serde_json::to_value(&net.arch).expect("arch serializes");
        Self::build(ModelKind::Purifier, arch, &net.params, hyperparameters, seed)
    }

    pub fn discriminator(net: &DiscriminatorNet<f32>, hyperparameters: serde_json::Value, seed: u64) -> Self {
        let arch = serde_json::to_value(&net.arch).expect("arch serializes");
        Self::build(ModelKind::Discriminator, arch, &net.params, hyperparameters, seed)
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::ArchMismatch(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.header.kind
            )));
        }
        Ok(())
    }

    fn arch<A: for<'de> Deserialize<'de> + PartialEq + std::fmt::Debug>(&self, expected: Option<&A>) -> Result<A> {
        let arch: A = serde_json::from_value(self.header.arch.clone())
            .map_err(|e| Error::ArchMismatch(format!("unreadable descriptor: {e}")))?;
        if let Some(exp) = expected {
            if &arch != exp {
                return Err(Error::ArchMismatch(format!("expected {exp:?}, found {arch:?}")));
            }
        }
        Ok(arch)
    }

    /// Rebuilds the classifier; `expected` rejects a differing descriptor.
    pub fn into_classifier(self, expected: Option<&ClassifierArch>) -> Result<ClassifierNet<f32>> {
        self.expect_kind(ModelKind::Classifier)?;
        let arch = self.arch(expected)?;
        ClassifierNet::from_params(arch, self.params)
    }

    pub fn into_purifier(self, expected: Option<&PurifierArch>) -> Result<PurifierNet<f32>> {
        self.expect_kind(ModelKind::Purifier)?;
        let arch = self.arch(expected)?;
        PurifierNet::from_params(arch, self.params)
    }

    pub fn into_discriminator(self, expected: Option<&DiscriminatorArch>) -> Result<DiscriminatorNet<f32>> {
        self.expect_kind(ModelKind::Discriminator)?;
        let arch = self.arch(expected)?;
        DiscriminatorNet::from_params(arch, self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let blob_len: usize = self.params.count() * 4;
        let mut out = Vec::with_capacity(8 + 4 + 4 + header.len() + 8 + blob_len + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.header.format_version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(blob_len as u64).to_le_bytes());
        for t in self.params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < 8 + 4 + 4 + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic or truncated file"));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(corrupt("checksum mismatch"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let hlen = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
        let hend = 16 + hlen;
        if body.len() < hend + 8 {
            return Err(corrupt("header overruns file"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&body[16..hend]).map_err(|e| corrupt(&format!("header: {e}")))?;
        if header.format_version != version {
            return Err(corrupt("header version disagrees with preamble"));
        }
        let blen = u64::from_le_bytes(body[hend..hend + 8].try_into().unwrap()) as usize;
        let blob = &body[hend + 8..];
        let expected: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
        if blob.len() != blen || blen != expected * 4 {
            return Err(corrupt("parameter blob length mismatch"));
        }
        let mut params = Params::new();
        let mut off = 0;
        for entry in &header.params {
            let n: usize = entry.shape.iter().product();
            let data = blob[off..off + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            off += 4 * n;
            params.push(entry.name.clone(), Tensor::new(entry.shape.clone(), data));
        }
        Ok(Self { header, params })
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, ck.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
