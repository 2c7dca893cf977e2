//! Named-tensor checkpoint container.
//!
//! Layout: 8-byte magic, u32 format version, u32 header length, a JSON
//! header (config, step, tensor names and shapes, optimizer flag), then the
//! tensors as little-endian f32 in header order. With optimizer state, each
//! parameter's first and second moments follow the parameters.

use std::fs;
use std::path::Path;

use polyglot_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::model::{Model, ModelConfig};

const MAGIC: &[u8; 8] = b"PGCKPT\0\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    tensors: Vec<(String, Vec<usize>)>,
    has_optimizer: bool,
}

/// Adam moments stored alongside the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerMoments {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<f32>>,
    pub optimizer: Option<OptimizerMoments>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Model<T>, step: u64, optimizer: Option<OptimizerMoments>) -> Self {
        Self {
            config: model.config().clone(),
            step,
            names: model.specs().iter().map(|s| s.name.clone()).collect(),
            tensors: model.params().iter().map(Tensor::cast).collect(),
            optimizer,
        }
    }

    pub fn to_model<T: Scalar>(&self) -> Result<Model<T>> {
        Model::from_params(
            self.config.clone(),
            self.tensors.iter().map(Tensor::cast).collect(),
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            tensors: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(n, t)| (n.clone(), t.shape().to_vec()))
                .collect(),
            has_optimizer: self.optimizer.is_some(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |data: &[f32]| {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for t in &self.tensors {
            put(t.data());
        }
        if let Some(opt) = &self.optimizer {
            for buf in opt.m.iter().chain(&opt.v) {
                put(buf);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut pos = 16 + hlen;
        let mut take = |n: usize| -> Result<Vec<f32>> {
            let end = pos + 4 * n;
            let raw = bytes.get(pos..end).ok_or_else(|| bad("truncated payload"))?;
            pos = end;
            Ok(raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in &header.tensors {
            let n = shape.iter().product();
            tensors.push(Tensor::new(shape, take(n)?)?);
            names.push(name.clone());
        }
        let optimizer = if header.has_optimizer {
            let sizes: Vec<usize> = tensors.iter().map(Tensor::numel).collect();
            let m = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
            let v = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
            Some(OptimizerMoments { m, v })
        } else {
            None
        };
        if pos != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self {
            config: header.config,
            step: header.step,
            names,
            tensors,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).at(path)?)
    }
}

/// Element-wise mean of checkpoints sharing one configuration; optimizer
/// state is dropped and the step is the latest one.
pub fn average_checkpoints(ckpts: &[Checkpoint]) -> Result<Checkpoint> {
    let first = ckpts
        .first()
        .ok_or_else(|| Error::Checkpoint("nothing to average".into()))?;
    for c in &ckpts[1..] {
        if c.config != first.config || c.names != first.names {
            return Err(Error::Checkpoint(
                "checkpoints do not share a configuration".into(),
            ));
        }
    }
    let k = ckpts.len() as f64;
    let tensors = (0..first.tensors.len())
        .map(|i| {
            let n = first.tensors[i].numel();
            let data = (0..n)
                .map(|j| (ckpts.iter().map(|c| c.tensors[i].data()[j] as f64).sum::<f64>() / k) as f32)
                .collect();
            Tensor::new(first.tensors[i].shape(), data)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Checkpoint {
        config: first.config.clone(),
        step: ckpts.iter().map(|c| c.step).max().unwrap_or(0),
        names: first.names.clone(),
        tensors,
        optimizer: None,
    })
}

pub fn average_checkpoint_files(paths: &[impl AsRef<Path>]) -> Result<Checkpoint> {
    let ckpts = paths
        .iter()
        .map(|p| Checkpoint::load(p.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    average_checkpoints(&ckpts)
}
