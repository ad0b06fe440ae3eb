//! Binary checkpoint format.
//!
//! ```text
//! "RLAT"                      4 bytes magic
//! version                     u32
//! header_len, header          u32 + UTF-8 JSON {spec, method, seed, epoch}
//! tensor_count                u32
//! per tensor:
//!   name_len, name            u16 + UTF-8
//!   dtype                     u8 (1 = f32)
//!   ndim, dims                u8 + u32 * ndim
//!   values                    f32 * prod(dims)
//! ```
//!
//! All integers and floats are little-endian. Parameters come first in graph
//! order, followed by batch-norm running statistics named
//! `bn{i}.running_mean` / `bn{i}.running_var`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_model, ModelGraph, ModelSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RLAT";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub method: String,
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    method: String,
    seed: u64,
    epoch: usize,
}

fn named_tensors(model: &ModelGraph) -> Vec<(String, Tensor<f32>)> {
    let mut out: Vec<(String, Tensor<f32>)> = model
        .graph
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    for (i, rs) in model.graph.running_stats().iter().enumerate() {
        let c = rs.mean.len();
        out.push((
            format!("bn{i}.running_mean"),
            Tensor::new(vec![c], rs.mean.clone()).expect("1-d"),
        ));
        out.push((
            format!("bn{i}.running_var"),
            Tensor::new(vec![c], rs.var.clone()).expect("1-d"),
        ));
    }
    out
}

pub fn encode_checkpoint(model: &ModelGraph, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let spec = model.spec.clone().ok_or_else(|| Error::Checkpoint {
        field: "spec",
        detail: "only models built from a spec can be saved".into(),
    })?;
    let header = serde_json::to_vec(&Header {
        spec,
        method: meta.method.clone(),
        seed: meta.seed,
        epoch: meta.epoch,
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let tensors = named_tensors(model);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(model: &ModelGraph, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model, meta)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint {
                field,
                detail: format!("unexpected end of file at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u16(&mut self, field: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().expect("2 bytes")))
    }

    fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelGraph, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint {
            field: "magic",
            detail: "file does not start with \"RLAT\"".into(),
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint {
            field: "version",
            detail: format!("format version {version}, expected {FORMAT_VERSION}"),
        });
    }
    let hlen = r.u32("header")? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen, "header")?).map_err(|e| Error::Checkpoint {
        field: "header",
        detail: e.to_string(),
    })?;
    let mut model = build_model(&header.spec, 0)?;
    let count = r.u32("tensor_count")? as usize;
    let mut seen = BTreeSet::new();
    let n_stats = model.graph.running_stats().len();
    for _ in 0..count {
        let nlen = r.u16("name")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "name")?)
            .map_err(|_| Error::Checkpoint {
                field: "name",
                detail: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint {
                field: "name",
                detail: format!("duplicate tensor name {name}"),
            });
        }
        if r.u8("dtype")? != DTYPE_F32 {
            return Err(Error::Checkpoint {
                field: "dtype",
                detail: format!("tensor {name} has an unsupported dtype"),
            });
        }
        let ndim = r.u8("dims")? as usize;
        let dims = (0..ndim)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(4 * n, "values")?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(dims, values)?;
        assign(&mut model, &name, t, n_stats)?;
    }
    let expected = named_tensors(&model).len();
    if seen.len() != expected {
        return Err(Error::Checkpoint {
            field: "tensor_count",
            detail: format!("{} tensors, model needs {expected}", seen.len()),
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint {
            field: "values",
            detail: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok((
        model,
        CheckpointMeta {
            method: header.method,
            seed: header.seed,
            epoch: header.epoch,
        },
    ))
}

fn assign(model: &mut ModelGraph, name: &str, t: Tensor<f32>, n_stats: usize) -> Result<()> {
    let stat = name
        .strip_prefix("bn")
        .and_then(|rest| rest.split_once(".running_"))
        .and_then(|(i, which)| i.parse::<usize>().ok().map(|i| (i, which)));
    if let Some((i, which)) = stat {
        if i >= n_stats {
            return Err(Error::Checkpoint {
                field: "name",
                detail: format!("unknown running statistics {name}"),
            });
        }
        let rs = &mut model.graph.running_stats_mut()[i];
        let slot = match which {
            "mean" => &mut rs.mean,
            "var" => &mut rs.var,
            _ => {
                return Err(Error::Checkpoint {
                    field: "name",
                    detail: format!("unknown running statistics {name}"),
                })
            }
        };
        if t.shape() != [slot.len()] {
            return Err(Error::Checkpoint {
                field: "dims",
                detail: format!("{name} has shape {:?}", t.shape()),
            });
        }
        *slot = t.into_data();
        return Ok(());
    }
    let p = model.graph.param_value_mut(name).map_err(|_| Error::Checkpoint {
        field: "name",
        detail: format!("model has no parameter {name}"),
    })?;
    if p.shape() != t.shape() {
        return Err(Error::Checkpoint {
            field: "dims",
            detail: format!("{name}: stored {:?}, model {:?}", t.shape(), p.shape()),
        });
    }
    *p = t;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelGraph, CheckpointMeta)> {
    decode_checkpoint(&fs::read(path)?)
}
