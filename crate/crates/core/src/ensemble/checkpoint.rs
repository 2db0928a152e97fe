//! Binary checkpoints. Layout, all integers little-endian:
//!
//! ```text
//! "DPE1" | version u32 | E u32 | group count u32
//! [version 2: metadata length u32 | metadata JSON]
//! per group: name length u16 | name | role u8 | rank u8 | dims u32 x rank
//!            | E payloads (f32 in version 1, f64 in version 2)
//! ```
//!
//! Roles 0 to 3 are trainable tensors; 4 and 5 hold batchnorm running means
//! and variances. Version 2 metadata records the layer specs and the
//! regularizer, so it loads without outside information.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kl::ParamRole;
use crate::nn::{LayerSpec, Network};
use crate::tensor::Tensor;

use super::{Dpe, Regularizer};

pub const MAGIC: &[u8; 4] = b"DPE1";
const ROLE_RUNNING_MEAN: u8 = 4;
const ROLE_RUNNING_VAR: u8 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub layers: Vec<LayerSpec>,
    pub regularizer: Regularizer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointGroup {
    pub name: String,
    pub role: u8,
    pub dims: Vec<usize>,
    /// One flattened payload per member.
    pub members: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub ensemble: usize,
    pub metadata: Option<Metadata>,
    pub groups: Vec<CheckpointGroup>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    if !matches!(ckpt.version, 1 | 2) {
        return Err(Error::Config(format!("unknown checkpoint version {}", ckpt.version)));
    }
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&ckpt.version.to_le_bytes());
    out.extend_from_slice(&(ckpt.ensemble as u32).to_le_bytes());
    out.extend_from_slice(&(ckpt.groups.len() as u32).to_le_bytes());
    if ckpt.version == 2 {
        let meta = ckpt
            .metadata
            .as_ref()
            .ok_or_else(|| Error::Config("version 2 checkpoints need metadata".into()))?;
        let json = serde_json::to_vec(meta)?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
    }
    for g in &ckpt.groups {
        let name = g.name.as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| Error::Config(format!("group name too long: {}", g.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(g.role);
        out.push(u8::try_from(g.dims.len()).map_err(|_| Error::Config("rank above 255".into()))?);
        for &d in &g.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let len: usize = g.dims.iter().product();
        if g.members.len() != ckpt.ensemble || g.members.iter().any(|m| m.len() != len) {
            return Err(Error::Shape(format!("group {}: payloads do not match dims and E", g.name)));
        }
        for m in &g.members {
            for &v in m {
                if ckpt.version == 1 {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                } else {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(corrupt(format!("truncated at byte {} while reading {what}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u32("version")?;
    if !matches!(version, 1 | 2) {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let ensemble = r.u32("ensemble size")? as usize;
    if ensemble == 0 {
        return Err(corrupt("ensemble size 0"));
    }
    let count = r.u32("group count")? as usize;
    let metadata = if version == 2 {
        let len = r.u32("metadata length")? as usize;
        let json = r.take(len, "metadata")?;
        Some(serde_json::from_slice(json).map_err(|e| corrupt(format!("metadata: {e}")))?)
    } else {
        None
    };
    let width = if version == 1 { 4 } else { 8 };
    let mut groups = Vec::new();
    for gi in 0..count {
        let name_len = r.u16("group name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "group name")?)
            .map_err(|_| corrupt(format!("group {gi}: name is not UTF-8")))?
            .to_owned();
        let role = r.u8("role")?;
        if role > ROLE_RUNNING_VAR {
            return Err(corrupt(format!("group {name}: unknown role {role}")));
        }
        let rank = r.u8("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&l| l.checked_mul(width * ensemble).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| corrupt(format!("group {name}: payload larger than the file")))?;
        let mut members = Vec::with_capacity(ensemble);
        for _ in 0..ensemble {
            let raw = r.take(len * width, "payload")?;
            let values = if version == 1 {
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect()
            } else {
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect()
            };
            members.push(values);
        }
        groups.push(CheckpointGroup {
            name,
            role,
            dims,
            members,
        });
    }
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        version,
        ensemble,
        metadata,
        groups,
    })
}

impl Dpe {
    pub fn to_checkpoint(&self, version: u32) -> Checkpoint {
        let first = &self.members[0];
        let mut groups: Vec<CheckpointGroup> = first
            .param_infos()
            .iter()
            .enumerate()
            .map(|(i, info)| CheckpointGroup {
                name: info.name.clone(),
                role: info.role.code(),
                dims: info.shape.clone(),
                members: self.members.iter().map(|m| m.params()[i].data().to_vec()).collect(),
            })
            .collect();
        for (i, r) in first.running_stats().iter().enumerate() {
            for (role, suffix) in [(ROLE_RUNNING_MEAN, "mean"), (ROLE_RUNNING_VAR, "var")] {
                groups.push(CheckpointGroup {
                    name: format!("running.{i}.{suffix}"),
                    role,
                    dims: vec![r.mean.len()],
                    members: self
                        .members
                        .iter()
                        .map(|m| {
                            let r = &m.running_stats()[i];
                            if role == ROLE_RUNNING_MEAN { r.mean.clone() } else { r.var.clone() }
                        })
                        .collect(),
                });
            }
        }
        Checkpoint {
            version,
            ensemble: self.ensemble_size(),
            metadata: (version == 2).then(|| Metadata {
                layers: self.layers().to_vec(),
                regularizer: self.regularizer,
            }),
            groups,
        }
    }

    /// Rebuild an ensemble. Version 1 checkpoints carry no architecture, so
    /// `layers` and `regularizer` must be given; for version 2 they default
    /// to the recorded metadata.
    pub fn from_checkpoint(
        ckpt: &Checkpoint,
        layers: Option<Vec<LayerSpec>>,
        regularizer: Option<Regularizer>,
    ) -> Result<Dpe> {
        let layers = layers
            .or_else(|| ckpt.metadata.as_ref().map(|m| m.layers.clone()))
            .ok_or_else(|| Error::Usage("version 1 checkpoints need the layer specs to load".into()))?;
        let regularizer = regularizer
            .or_else(|| ckpt.metadata.as_ref().map(|m| m.regularizer))
            .ok_or_else(|| Error::Usage("version 1 checkpoints need the regularizer to load".into()))?;
        let template = Network::new(layers)?;
        let infos = template.param_infos().to_vec();
        let n_running = template.running_stats().len();
        if ckpt.groups.len() != infos.len() + 2 * n_running {
            return Err(corrupt(format!(
                "{} groups for an architecture with {} tensors and {n_running} batchnorm layers",
                ckpt.groups.len(),
                infos.len()
            )));
        }
        let mut members = vec![template; ckpt.ensemble];
        for (i, info) in infos.iter().enumerate() {
            let g = &ckpt.groups[i];
            if g.name != info.name || ParamRole::from_code(g.role) != Some(info.role) || g.dims != info.shape {
                return Err(corrupt(format!(
                    "group {i} is {} (role {}, dims {:?}), architecture expects {} ({:?}, {:?})",
                    g.name, g.role, g.dims, info.name, info.role, info.shape
                )));
            }
            for (m, payload) in members.iter_mut().zip(&g.members) {
                m.params_mut()[i] = Tensor::new(g.dims.clone(), payload.clone())?;
            }
        }
        for j in 0..n_running {
            for (k, role) in [ROLE_RUNNING_MEAN, ROLE_RUNNING_VAR].into_iter().enumerate() {
                let g = &ckpt.groups[infos.len() + 2 * j + k];
                let channels = members[0].running_stats()[j].mean.len();
                if g.role != role || g.dims != [channels] {
                    return Err(corrupt(format!("group {} does not hold running statistics of layer {j}", g.name)));
                }
                for (m, payload) in members.iter_mut().zip(&g.members) {
                    let r = &mut m.running_stats_mut()[j];
                    if role == ROLE_RUNNING_MEAN {
                        r.mean.clone_from(payload);
                    } else {
                        r.var.clone_from(payload);
                    }
                }
            }
        }
        Dpe::from_members(members, regularizer)
    }

    /// Lossless save (version 2, f64 payloads, self-describing).
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = encode_checkpoint(&self.to_checkpoint(2))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Compact save (version 1, f32 payloads).
    pub fn save_compact(&self, path: &Path) -> Result<()> {
        let bytes = encode_checkpoint(&self.to_checkpoint(1))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Load a version 2 checkpoint.
    pub fn load(path: &Path) -> Result<Dpe> {
        Self::from_checkpoint(&read_checkpoint(path)?, None, None)
    }

    /// Load any checkpoint version against known layer specs.
    pub fn load_with(path: &Path, layers: Vec<LayerSpec>, regularizer: Regularizer) -> Result<Dpe> {
        Self::from_checkpoint(&read_checkpoint(path)?, Some(layers), Some(regularizer))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
