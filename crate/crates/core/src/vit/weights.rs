//! `VITW` weight files.
//!
//! Layout (little-endian): magic `VITW`, `u32` version (1), `u32` tensor
//! count, then per tensor `u16` name length, UTF-8 name, `u8` rank, `u32`
//! dims, and `f32` data. The model configuration travels as a rank-1 tensor
//! named `config` holding
//! `[h, w, c, patch, embed_dim, heads, layers, mlp_dim, classes]`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::config::ViTConfig;
use super::params::ViTParams;
use crate::error::{Error, Result};

pub const VITW_MAGIC: &[u8; 4] = b"VITW";
pub const VITW_VERSION: u32 = 1;
const CONFIG_TENSOR: &str = "config";

fn config_values(cfg: &ViTConfig) -> [usize; 9] {
    [
        cfg.image_h,
        cfg.image_w,
        cfg.channels,
        cfg.patch_size,
        cfg.embed_dim,
        cfg.heads,
        cfg.layers,
        cfg.mlp_dim,
        cfg.classes,
    ]
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_params(cfg: &ViTConfig, params: &ViTParams<f32>) -> Result<Vec<u8>> {
    params.check(cfg)?;
    let tensors = params.tensors();
    let mut out = Vec::with_capacity(12 + 4 * params.num_params());
    out.extend_from_slice(VITW_MAGIC);
    out.extend_from_slice(&VITW_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32 + 1).to_le_bytes());
    let cfg_data: Vec<f32> = config_values(cfg).iter().map(|&v| v as f32).collect();
    put_tensor(&mut out, CONFIG_TENSOR, &[cfg_data.len()], &cfg_data);
    for t in tensors {
        put_tensor(&mut out, &t.name, &t.shape, t.data);
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated {what}"),
            }),
        }
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
}

struct RawTensor {
    offset: usize,
    shape: Vec<usize>,
    data: Vec<f32>,
}

pub fn decode_params(bytes: &[u8]) -> Result<(ViTConfig, ViTParams<f32>)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != VITW_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "missing VITW magic".into(),
        });
    }
    let version = cur.u32("version")?;
    if version != VITW_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let count = cur.u32("tensor count")?;
    let mut raw: HashMap<String, RawTensor> = HashMap::new();
    for _ in 0..count {
        let offset = cur.pos;
        let len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| Error::Format {
                offset: offset + 2,
                msg: "tensor name is not UTF-8".into(),
            })?
            .to_owned();
        let rank = cur.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| cur.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = cur
            .take(numel.saturating_mul(4), "tensor data")?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if raw
            .insert(
                name.clone(),
                RawTensor {
                    offset,
                    shape,
                    data,
                },
            )
            .is_some()
        {
            return Err(Error::Format {
                offset,
                msg: format!("duplicate tensor {name}"),
            });
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            offset: cur.pos,
            msg: "trailing bytes".into(),
        });
    }

    let cfg_t = raw.remove(CONFIG_TENSOR).ok_or_else(|| Error::Format {
        offset: 12,
        msg: "missing config tensor".into(),
    })?;
    if cfg_t.data.len() != 9 || cfg_t.data.iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
        return Err(Error::Format {
            offset: cfg_t.offset,
            msg: "malformed config tensor".into(),
        });
    }
    let c: Vec<usize> = cfg_t.data.iter().map(|&v| v as usize).collect();
    let cfg = ViTConfig {
        image_h: c[0],
        image_w: c[1],
        channels: c[2],
        patch_size: c[3],
        embed_dim: c[4],
        heads: c[5],
        layers: c[6],
        mlp_dim: c[7],
        classes: c[8],
    };
    cfg.validate()?;

    let mut params = ViTParams::<f32>::zeros(&cfg);
    let names: Vec<(String, Vec<usize>)> = params
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.shape))
        .collect();
    for ((name, shape), dst) in names.into_iter().zip(params.tensors_mut()) {
        let t = raw.remove(&name).ok_or_else(|| Error::Format {
            offset: bytes.len(),
            msg: format!("missing tensor {name}"),
        })?;
        if t.shape != shape {
            return Err(Error::Format {
                offset: t.offset,
                msg: format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape),
            });
        }
        dst.copy_from_slice(&t.data);
    }
    if let Some((name, t)) = raw.into_iter().min_by_key(|(_, t)| t.offset) {
        return Err(Error::Format {
            offset: t.offset,
            msg: format!("unexpected tensor {name}"),
        });
    }
    Ok((cfg, params))
}

pub fn save_params(path: &Path, cfg: &ViTConfig, params: &ViTParams<f32>) -> Result<()> {
    fs::write(path, encode_params(cfg, params)?)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<(ViTConfig, ViTParams<f32>)> {
    decode_params(&fs::read(path)?)
}
