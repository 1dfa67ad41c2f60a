//! Versioned binary parameter checkpoints.
//!
//! Layout: magic "MVQC", format version, architecture tag, resolution and
//! view count, then the layer table with raw little-endian f64 weights.
//! Round-trips bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use super::{ArchitectureId, ParamsBody, QBlock, QNetworkParams};
use crate::nn::{Layer, Sequential, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"MVQC";
const VERSION: u32 = 1;

fn fmt_err(path: &Path, reason: &str) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

struct Enc {
    bytes: Vec<u8>,
}

impl Enc {
    fn u32(&mut self, v: u32) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }
    fn u8(&mut self, v: u8) {
        self.bytes.push(v);
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for v in t.data() {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn sequential(&mut self, s: &Sequential) {
        self.u32(s.layers.len() as u32);
        for l in &s.layers {
            match l {
                Layer::Conv2d { weight, bias, stride } => {
                    self.u8(0);
                    self.u32(*stride as u32);
                    self.tensor(weight);
                    self.tensor(bias);
                }
                Layer::Dense { weight, bias } => {
                    self.u8(1);
                    self.tensor(weight);
                    self.tensor(bias);
                }
                Layer::Relu => self.u8(2),
                Layer::MaxPool { size, stride } => {
                    self.u8(3);
                    self.u32(*size as u32);
                    self.u32(*stride as u32);
                }
                Layer::Flatten => self.u8(4),
            }
        }
    }
    fn block(&mut self, b: &QBlock) {
        self.u32(b.towers.len() as u32);
        for t in &b.towers {
            self.sequential(t);
        }
        self.sequential(&b.gripper);
        self.sequential(&b.action);
        self.sequential(&b.trunk);
    }
}

/// Serialize params to the checkpoint byte format.
pub fn encode_checkpoint(params: &QNetworkParams) -> Vec<u8> {
    let mut e = Enc { bytes: Vec::new() };
    e.bytes.extend_from_slice(MAGIC);
    e.u32(VERSION);
    e.str(params.arch.tag());
    e.u32(params.resolution as u32);
    e.u32(params.n_views as u32);
    match &params.body {
        ParamsBody::Fused(b) => {
            e.u8(0);
            e.u32(1);
            e.block(b);
        }
        ParamsBody::Agg(bs) => {
            e.u8(1);
            e.u32(bs.len() as u32);
            for b in bs {
                e.block(b);
            }
        }
    }
    e.bytes
}

struct Dec<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(fmt_err(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| fmt_err(self.path, "bad utf-8 in tag"))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::from_vec(&shape, data)
    }
    fn sequential(&mut self) -> Result<Sequential> {
        let n = self.u32()? as usize;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let kind = self.u8()?;
            layers.push(match kind {
                0 => {
                    let stride = self.u32()? as usize;
                    Layer::Conv2d {
                        stride,
                        weight: self.tensor()?,
                        bias: self.tensor()?,
                    }
                }
                1 => Layer::Dense {
                    weight: self.tensor()?,
                    bias: self.tensor()?,
                },
                2 => Layer::Relu,
                3 => Layer::MaxPool {
                    size: self.u32()? as usize,
                    stride: self.u32()? as usize,
                },
                4 => Layer::Flatten,
                k => return Err(fmt_err(self.path, &format!("unknown layer kind {k}"))),
            });
        }
        Ok(Sequential::new(layers))
    }
    fn block(&mut self) -> Result<QBlock> {
        let nt = self.u32()? as usize;
        let mut towers = Vec::with_capacity(nt);
        for _ in 0..nt {
            towers.push(self.sequential()?);
        }
        Ok(QBlock {
            towers,
            gripper: self.sequential()?,
            action: self.sequential()?,
            trunk: self.sequential()?,
        })
    }
}

/// Parse a checkpoint from bytes.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<QNetworkParams> {
    let mut d = Dec { bytes, pos: 0, path };
    if d.take(4)? != MAGIC {
        return Err(fmt_err(path, "bad magic"));
    }
    let version = d.u32()?;
    if version != VERSION {
        return Err(fmt_err(path, &format!("unsupported version {version}")));
    }
    let arch = ArchitectureId::from_tag(&d.str()?)?;
    let resolution = d.u32()? as usize;
    let n_views = d.u32()? as usize;
    let kind = d.u8()?;
    let n_blocks = d.u32()? as usize;
    let body = match kind {
        0 => {
            if n_blocks != 1 {
                return Err(fmt_err(path, "fused body must have one block"));
            }
            ParamsBody::Fused(d.block()?)
        }
        1 => {
            let mut bs = Vec::with_capacity(n_blocks);
            for _ in 0..n_blocks {
                bs.push(d.block()?);
            }
            ParamsBody::Agg(bs)
        }
        k => return Err(fmt_err(path, &format!("unknown body kind {k}"))),
    };
    if d.pos != bytes.len() {
        return Err(fmt_err(path, "trailing bytes"));
    }
    Ok(QNetworkParams {
        arch,
        resolution,
        n_views,
        body,
    })
}

pub fn save_checkpoint(params: &QNetworkParams, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<QNetworkParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        for arch in ArchitectureId::ALL {
            let params = QNetworkParams::init(arch, 3, 32, 42);
            let bytes = encode_checkpoint(&params);
            let decoded = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
            assert_eq!(decoded, params, "{}", arch.tag());
            assert_eq!(encode_checkpoint(&decoded), bytes, "{}", arch.tag());
        }
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let params = QNetworkParams::init(ArchitectureId::SvShoulder, 3, 32, 1);
        let mut bytes = encode_checkpoint(&params);
        bytes[0] = b'X';
        assert!(decode_checkpoint(&bytes, Path::new("mem")).is_err());
    }
}
