//! Checkpoint directories: `manifest.json` plus one STLS1 file per parameter.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{LayeredNetwork, ARCH_ID};
use crate::nn::ParamGroup;
use crate::stls;
use crate::style::LayerId;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub arch: String,
    pub widths: [usize; 4],
    /// Layer names in forward order.
    pub layers: Vec<String>,
    pub parameters: Vec<ParamEntry>,
    /// Residual block index → layer id of the StyleLess layer that follows it.
    pub insertion_map: BTreeMap<usize, LayerId>,
    pub stage: u8,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub network: LayeredNetwork<f32>,
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a serializable configuration in its compact JSON form.
pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(config)?))
}

fn layer_names(net: &LayeredNetwork<f32>) -> Vec<String> {
    let mut names = Vec::new();
    for p in net.parameters() {
        let layer = p.name.split('.').next().unwrap_or_default().to_string();
        if !names.contains(&layer) {
            names.push(layer);
        }
    }
    names
}

impl Checkpoint {
    pub fn new(network: LayeredNetwork<f32>, stage: u8, seed: u64, config_hash: String) -> Self {
        let parameters = network
            .parameters()
            .into_iter()
            .map(|p| ParamEntry {
                file: format!("{}.stls", p.name),
                shape: p.value.shape().to_vec(),
                group: p.group,
                name: p.name,
            })
            .collect();
        let manifest = CheckpointManifest {
            arch: ARCH_ID.into(),
            widths: network.widths(),
            layers: layer_names(&network),
            parameters,
            insertion_map: network.insertion_map(),
            stage,
            seed,
            config_hash,
        };
        Self { manifest, network }
    }

    fn manifest_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(&self.manifest)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    /// `(file name, contents)` for every file of the checkpoint directory.
    pub fn files(&self) -> Result<Vec<(String, Vec<u8>)>> {
        let mut files = vec![(MANIFEST.to_string(), self.manifest_bytes()?)];
        for (entry, p) in self.manifest.parameters.iter().zip(self.network.parameters()) {
            files.push((entry.file.clone(), stls::encode(p.value)?));
        }
        Ok(files)
    }

    /// SHA-256 over all files in manifest order.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, bytes) in self.files()? {
            h.update(name.as_bytes());
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (name, bytes) in self.files()? {
            fs::write(dir.join(name), bytes)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let fail = |reason: String| Error::Checkpoint { path: dir.to_path_buf(), reason };
        let text = fs::read_to_string(dir.join(MANIFEST)).map_err(|e| fail(format!("{MANIFEST}: {e}")))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| fail(format!("{MANIFEST}: {e}")))?;
        if manifest.arch != ARCH_ID {
            return Err(Error::ArchitectureMismatch { expected: ARCH_ID.into(), found: manifest.arch });
        }
        let mut network = LayeredNetwork::<f32>::zeros(manifest.widths)?;
        if !manifest.insertion_map.is_empty() {
            network.insert_styleless(0)?;
            if network.insertion_map() != manifest.insertion_map {
                return Err(fail(format!("unsupported insertion map {:?}", manifest.insertion_map)));
            }
        }
        let entries: BTreeMap<&str, &ParamEntry> = manifest.parameters.iter().map(|e| (e.name.as_str(), e)).collect();
        let mut params = network.parameters_mut();
        if params.len() != entries.len() {
            return Err(fail(format!("manifest lists {} parameters, architecture has {}", entries.len(), params.len())));
        }
        for p in &mut params {
            let entry = entries.get(p.name.as_str()).ok_or_else(|| fail(format!("missing parameter {}", p.name)))?;
            if entry.group != p.group {
                return Err(fail(format!("{} tagged {} but belongs to {}", p.name, entry.group, p.group)));
            }
            let value: Tensor<f32> = stls::load(dir.join(&entry.file)).map_err(|e| fail(format!("{}: {e}", entry.file)))?;
            if value.shape() != p.value.shape() || entry.shape != value.shape() {
                return Err(fail(format!("{}: shape {:?}, expected {:?}", p.name, value.shape(), p.value.shape())));
            }
            *p.value = value;
        }
        drop(params);
        Ok(Self { manifest, network })
    }
}

/// Path of the training log written next to a checkpoint directory.
pub fn trainlog_path(checkpoint_dir: impl AsRef<Path>) -> PathBuf {
    let dir = checkpoint_dir.as_ref();
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into());
    dir.with_file_name(format!("{name}.trainlog.jsonl"))
}
