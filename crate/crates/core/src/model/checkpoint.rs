//! Binary checkpoint archive.
//!
//! ```text
//! "MSPF" | version u32 = 1 | count u32
//! count × ( name_len u16 | name utf-8 | ndim u8 | ndim × extent u32 | f32 data )
//! then zero or more sections: tag [4] | payload_len u32 | payload
//!   "CONF"  model configuration as TOML text
//!   "OPTM"  count u32 | tensors as above (names end in .m / .v) | t u64
//!   "META"  epoch u64
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::{Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"MSPF";
pub const VERSION: u32 = 1;

/// Optimizer moments stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimSection {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub t: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub config: Option<ModelConfig>,
    pub optim: Option<OptimSection>,
    pub epoch: Option<u64>,
}

fn put_tensors(out: &mut Vec<u8>, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::input(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let ndim = u8::try_from(t.ndim()).map_err(|_| Error::input(format!("{name} has too many axes")))?;
        out.push(ndim);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| Error::input(format!("{name} extent overflows u32")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(format!("truncated: wanted {n} more bytes"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensors(&mut self, count: u32) -> Result<Vec<(String, Tensor<f32>)>> {
        let mut out = Vec::new();
        for _ in 0..count {
            let len = self.u16()? as usize;
            let at = self.pos;
            let name = match std::str::from_utf8(self.take(len)?) {
                Ok(s) => s.to_string(),
                Err(_) => {
                    return Err(Error::Format {
                        offset: at,
                        message: "tensor name is not UTF-8".into(),
                    })
                }
            };
            let ndim = self.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(self.u32()? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
            let Some(n) = n.filter(|n| n.checked_mul(4).is_some()) else {
                return self.fail(format!("{name}: extents overflow"));
            };
            let data = self
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            out.push((name, Tensor::new(&shape, data)?));
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        put_tensors(&mut out, &self.tensors)?;
        let mut section = |tag: &[u8; 4], payload: Vec<u8>| {
            out.extend_from_slice(tag);
            out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
            out.extend_from_slice(&payload);
        };
        if let Some(cfg) = &self.config {
            let text = toml::to_string(cfg).map_err(|e| Error::config(e.to_string()))?;
            section(b"CONF", text.into_bytes());
        }
        if let Some(opt) = &self.optim {
            let mut p = (opt.tensors.len() as u32).to_le_bytes().to_vec();
            put_tensors(&mut p, &opt.tensors)?;
            p.extend_from_slice(&opt.t.to_le_bytes());
            section(b"OPTM", p);
        }
        if let Some(epoch) = self.epoch {
            section(b"META", epoch.to_le_bytes().to_vec());
        }
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            r.pos = 0;
            return r.fail("bad magic, expected MSPF");
        }
        let version = r.u32()?;
        if version != VERSION {
            r.pos -= 4;
            return r.fail(format!("unsupported version {version}"));
        }
        let count = r.u32()?;
        let mut ck = Checkpoint {
            tensors: r.tensors(count)?,
            ..Checkpoint::default()
        };
        while r.pos < buf.len() {
            let start = r.pos;
            let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
            let len = r.u32()? as usize;
            let end = r.pos + len;
            match &tag {
                b"CONF" => {
                    let at = r.pos;
                    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format {
                        offset: at,
                        message: "config section is not UTF-8".into(),
                    })?;
                    ck.config = Some(toml::from_str(text).map_err(|e| Error::Format {
                        offset: at,
                        message: format!("config section: {e}"),
                    })?);
                }
                b"OPTM" => {
                    let n = r.u32()?;
                    let tensors = r.tensors(n)?;
                    let t = r.u64()?;
                    ck.optim = Some(OptimSection { tensors, t });
                }
                b"META" => ck.epoch = Some(r.u64()?),
                _ => {
                    r.pos = start;
                    return r.fail(format!("unknown section {:?}", String::from_utf8_lossy(&tag)));
                }
            }
            if r.pos != end {
                r.pos = start;
                return r.fail("section length does not match its contents");
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.encode()?;
        let path = path.as_ref();
        // Write-then-rename keeps the previous file intact on failure.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn from_model<S: Scalar>(model: &Model<S>) -> Self {
        Checkpoint {
            tensors: model.params.iter().map(|(n, t)| (n.to_string(), t.cast())).collect(),
            config: Some(model.cfg.clone()),
            optim: None,
            epoch: None,
        }
    }

    /// Rebuilds the model from the stored configuration (or `cfg`) and
    /// copies every tensor in by name; names and shapes must match exactly.
    pub fn to_model<S: Scalar>(&self, cfg: Option<&ModelConfig>) -> Result<Model<S>> {
        let cfg = cfg
            .or(self.config.as_ref())
            .ok_or_else(|| Error::input("checkpoint has no model configuration"))?;
        let mut model = Model::build(cfg, 0)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    pub fn load_into<S: Scalar>(&self, model: &mut Model<S>) -> Result<()> {
        if self.tensors.len() != model.params.len() {
            return Err(Error::input(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                model.params.len()
            )));
        }
        for (name, t) in &self.tensors {
            let id = model
                .params
                .id(name)
                .ok_or_else(|| Error::input(format!("unexpected tensor {name}")))?;
            let dst = model.params.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(Error::shape(format!(
                    "{name}: checkpoint {:?} vs model {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            for (d, s) in dst.data_mut().iter_mut().zip(t.data()) {
                *d = S::of(*s as f64);
            }
        }
        Ok(())
    }
}
