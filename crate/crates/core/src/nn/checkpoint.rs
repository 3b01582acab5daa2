//! `NMFC` checkpoint container.
//!
//! Layout (little-endian): magic `NMFC`, u8 version = 1, u8 architecture tag,
//! u32 class count, u32 tensor count, then per tensor a u16 name length, the
//! UTF-8 name, u8 rank, rank × u32 dims and the float32 values.

use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::layers::Param;
use super::model::{Architecture, Layer, Model};
use crate::features::write_atomic;

const MAGIC: &[u8; 4] = b"NMFC";
const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic: not an NMFC checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u8),
    #[error("unknown architecture tag {0}")]
    UnknownArchitecture(u8),
    #[error("architecture mismatch: expected {expected}, checkpoint holds {found}")]
    ArchitectureMismatch {
        expected: Architecture,
        found: Architecture,
    },
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("tensor mismatch: {0}")]
    Tensor(String),
}

struct NamedTensor {
    name: String,
    dims: Vec<usize>,
    values: Vec<f32>,
}

fn collect(model: &Model<f32>) -> Vec<NamedTensor> {
    let t = |name: &str, dims: Vec<usize>, values: &[f32]| NamedTensor {
        name: name.to_string(),
        dims,
        values: values.to_vec(),
    };
    let p = |param: &Param<f32>| t(&param.name, param.shape.clone(), &param.value);
    let mut out = Vec::new();
    for layer in &model.layers {
        match layer {
            Layer::Conv(c) => {
                out.push(p(&c.weight));
                out.push(p(&c.bias));
            }
            Layer::BatchNorm(bn) => {
                let stem = bn.gain.name.trim_end_matches(".gain");
                out.push(p(&bn.gain));
                out.push(p(&bn.bias));
                out.push(t(&format!("{stem}.running_mean"), vec![bn.channels()], &bn.running_mean));
                out.push(t(&format!("{stem}.running_var"), vec![bn.channels()], &bn.running_var));
            }
            _ => {}
        }
    }
    out.push(p(&model.dense_weight));
    out.push(p(&model.dense_bias));
    out.push(t("norm.mean", vec![model.input_bins()], &model.feature_mean));
    out.push(t("norm.std", vec![model.input_bins()], &model.feature_std));
    out
}

pub fn encode_checkpoint(model: &Model<f32>) -> Vec<u8> {
    let tensors = collect(model);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(model.arch.tag());
    out.extend_from_slice(&(model.n_classes as u32).to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in &tensors {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dims.len() as u8);
        for &d in &t.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated(self.bytes.len()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decodes a checkpoint, validating every tensor against the architecture
/// named in the header (and against `expected`, when given).
pub fn decode_checkpoint(bytes: &[u8], expected: Option<Architecture>) -> Result<Model<f32>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let tag = r.u8()?;
    let arch = Architecture::from_tag(tag).ok_or(CheckpointError::UnknownArchitecture(tag))?;
    if let Some(e) = expected {
        if e != arch {
            return Err(CheckpointError::ArchitectureMismatch {
                expected: e,
                found: arch,
            });
        }
    }
    let n_classes = r.u32()? as usize;
    if n_classes == 0 {
        return Err(CheckpointError::Tensor("zero classes".into()));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Tensor("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(4 * n)?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(NamedTensor { name, dims, values });
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Tensor(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let bins = tensors
        .iter()
        .find(|t| t.name == "norm.mean")
        .map(|t| t.values.len())
        .ok_or_else(|| CheckpointError::Tensor("missing norm.mean".into()))?;
    let mut model = Model::<f32>::with_input_bins(arch, n_classes, bins, 0);
    let template = collect(&model);
    if template.len() != tensors.len() {
        return Err(CheckpointError::Tensor(format!(
            "{arch} with {n_classes} classes has {} tensors, checkpoint has {}",
            template.len(),
            tensors.len()
        )));
    }
    for (want, got) in template.iter().zip(&tensors) {
        if want.name != got.name || want.dims != got.dims {
            return Err(CheckpointError::Tensor(format!(
                "expected {} {:?}, found {} {:?}",
                want.name, want.dims, got.name, got.dims
            )));
        }
    }
    let mut it = tensors.into_iter().map(|t| t.values);
    for layer in &mut model.layers {
        match layer {
            Layer::Conv(c) => {
                c.weight.value = it.next().unwrap();
                c.bias.value = it.next().unwrap();
            }
            Layer::BatchNorm(bn) => {
                bn.gain.value = it.next().unwrap();
                bn.bias.value = it.next().unwrap();
                bn.running_mean = it.next().unwrap();
                bn.running_var = it.next().unwrap();
            }
            _ => {}
        }
    }
    model.dense_weight.value = it.next().unwrap();
    model.dense_bias.value = it.next().unwrap();
    model.feature_mean = it.next().unwrap();
    model.feature_std = it.next().unwrap();
    Ok(model)
}

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<(), CheckpointError> {
    write_atomic(path, &encode_checkpoint(model)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path, expected: Option<Architecture>) -> Result<Model<f32>, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes, expected)
}
