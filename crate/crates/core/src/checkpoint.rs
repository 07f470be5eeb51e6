//! Model checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "FPRUNE\0\x01"
//! desc_len     u64
//! descriptor   desc_len bytes of UTF-8 JSON (architecture, no weights)
//! blob_count   u32
//! blob*        name_len u16 | name | ndim u8 | dims u32 × ndim | f32 × prod(dims)
//! ```
//!
//! Blobs appear in canonical parameter order and are named `<layer>.weight`
//! and `<layer>.bias`. Values are stored as 32-bit floats, so a model whose
//! parameters are already f32-representable round-trips bit for bit.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Branch, ConvLayer, DenseLayer, Family, InceptionBlock, ModelGraph, Node, ResidualBlock};
use crate::ops::{Padding, PoolSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FPRUNE\0\x01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvDesc {
    pub name: String,
    pub filters: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub padding: Padding,
    pub stride: usize,
    pub prunable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchDesc {
    pub pool: Option<PoolSpec>,
    pub convs: Vec<ConvDesc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NodeDesc {
    Conv(ConvDesc),
    Relu,
    Pool(PoolSpec),
    Flatten,
    Dense { name: String, inputs: usize, outputs: usize },
    Residual { conv1: ConvDesc, conv2: ConvDesc },
    Inception { name: String, branches: Vec<BranchDesc> },
}

/// Architecture without weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub family: Family,
    pub input_shape: [usize; 3],
    pub classes: usize,
    pub nodes: Vec<NodeDesc>,
}

fn conv_desc(c: &ConvLayer) -> ConvDesc {
    ConvDesc {
        name: c.name.clone(),
        filters: c.filters(),
        in_channels: c.in_channels(),
        kernel: c.kernel(),
        padding: c.padding,
        stride: c.stride,
        prunable: c.prunable,
    }
}

fn conv_from(d: &ConvDesc) -> ConvLayer {
    let mut c = ConvLayer::new(d.name.clone(), d.filters, d.in_channels, d.kernel, d.prunable);
    c.padding = d.padding;
    c.stride = d.stride;
    c
}

impl Descriptor {
    pub fn of(model: &ModelGraph) -> Self {
        let nodes = model
            .nodes
            .iter()
            .map(|n| match n {
                Node::Conv(c) => NodeDesc::Conv(conv_desc(c)),
                Node::Relu => NodeDesc::Relu,
                Node::Pool(p) => NodeDesc::Pool(*p),
                Node::Flatten => NodeDesc::Flatten,
                Node::Dense(d) => NodeDesc::Dense {
                    name: d.name.clone(),
                    inputs: d.inputs(),
                    outputs: d.outputs(),
                },
                Node::Residual(b) => NodeDesc::Residual {
                    conv1: conv_desc(&b.conv1),
                    conv2: conv_desc(&b.conv2),
                },
                Node::Inception(b) => NodeDesc::Inception {
                    name: b.name.clone(),
                    branches: b
                        .branches
                        .iter()
                        .map(|br| BranchDesc {
                            pool: br.pool,
                            convs: br.convs.iter().map(conv_desc).collect(),
                        })
                        .collect(),
                },
            })
            .collect();
        Descriptor {
            family: model.family,
            input_shape: model.input_shape,
            classes: model.classes,
            nodes,
        }
    }

    /// Zero-weight graph with this architecture.
    pub fn build(&self) -> Result<ModelGraph> {
        if self
            .nodes
            .iter()
            .any(|n| matches!(n, NodeDesc::Conv(c) if c.filters == 0 || c.in_channels == 0 || c.kernel == 0))
        {
            return Err(Error::Checkpoint("descriptor has an empty conv layer".into()));
        }
        let nodes = self
            .nodes
            .iter()
            .map(|n| match n {
                NodeDesc::Conv(c) => Node::Conv(conv_from(c)),
                NodeDesc::Relu => Node::Relu,
                NodeDesc::Pool(p) => Node::Pool(*p),
                NodeDesc::Flatten => Node::Flatten,
                NodeDesc::Dense { name, inputs, outputs } => {
                    Node::Dense(DenseLayer::new(name.clone(), *inputs, *outputs))
                }
                NodeDesc::Residual { conv1, conv2 } => Node::Residual(ResidualBlock {
                    conv1: conv_from(conv1),
                    conv2: conv_from(conv2),
                }),
                NodeDesc::Inception { name, branches } => Node::Inception(InceptionBlock {
                    name: name.clone(),
                    branches: branches
                        .iter()
                        .map(|b| Branch {
                            pool: b.pool,
                            convs: b.convs.iter().map(conv_from).collect(),
                        })
                        .collect(),
                }),
            })
            .collect();
        let g = ModelGraph {
            family: self.family,
            nodes,
            input_shape: self.input_shape,
            classes: self.classes,
        };
        g.validate()
            .map_err(|e| Error::Checkpoint(format!("descriptor fails shape inference: {e}")))?;
        Ok(g)
    }
}

pub fn write_checkpoint<W: Write>(model: &ModelGraph, mut out: W) -> Result<()> {
    let desc = serde_json::to_vec(&Descriptor::of(model))?;
    out.write_all(MAGIC)?;
    out.write_all(&(desc.len() as u64).to_le_bytes())?;
    out.write_all(&desc)?;
    let params = model.named_params();
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params {
        let name = name.as_bytes();
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&[t.shape().len() as u8])?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint, returning the model and its descriptor.
pub fn read_checkpoint_bytes(bytes: &[u8]) -> Result<(ModelGraph, Descriptor)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let len = r.u64("descriptor length")? as usize;
    let desc: Descriptor = serde_json::from_slice(r.take(len, "descriptor")?)
        .map_err(|e| Error::Checkpoint(format!("descriptor: {e}")))?;
    let mut model = desc.build()?;
    let count = r.u32("blob count")? as usize;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    if count != names.len() {
        return Err(Error::Checkpoint(format!(
            "{count} blobs for an architecture with {} parameter tensors",
            names.len()
        )));
    }
    for (expected, slot) in names.iter().zip(model.params_mut()) {
        let name_len = r.u16("blob name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "blob name")?)
            .map_err(|_| Error::Checkpoint("blob name is not UTF-8".into()))?;
        if name != expected {
            return Err(Error::Checkpoint(format!("expected blob {expected}, found {name}")));
        }
        let ndim = r.u8("blob rank")? as usize;
        let dims = (0..ndim)
            .map(|_| r.u32("blob dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "blob {name} has shape {dims:?}, descriptor implies {:?}",
                slot.shape()
            )));
        }
        let raw = r.take(slot.len() * 4, name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        *slot = Tensor::new(dims, data)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last blob",
            bytes.len() - r.pos
        )));
    }
    Ok((model, desc))
}

pub fn save_checkpoint(model: &ModelGraph, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelGraph> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(read_checkpoint_bytes(&bytes)?.0)
}
