//! Binary probe checkpoints.
//!
//! Layout, little-endian:
//!
//! ```text
//! magic   "OPCKP\0"   6 bytes
//! version u8 = 1
//! mode    u8          A=0 B=1 C=2 D=3 E=4 I=5 II=6
//! dim     u32
//! count   u32         number of objectives
//! orthogonal modes:  V (dim × dim f64, row-major), then per objective: u8 tag, d̄ (dim f64)
//! mode II:           per objective: u8 tag, B (dim × dim f64, row-major)
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::objective::ObjectiveId;
use crate::probe::{LinearProbeParams, OrthogonalProbeParams, ProbeParams};
use crate::trainer::Mode;

pub const MAGIC: &[u8; 6] = b"OPCKP\0";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub mode: Mode,
    pub params: ProbeParams,
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, mut w: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(ckpt.mode.tag());
    let dim = ckpt.params.dim();
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    let put = |buf: &mut Vec<u8>, xs: &[f64]| {
        for x in xs {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    };
    match (&ckpt.params, ckpt.mode.is_linear()) {
        (ProbeParams::Orthogonal(p), false) => {
            buf.extend_from_slice(&(p.scalers.len() as u32).to_le_bytes());
            put(&mut buf, p.v.data());
            for (o, d) in &p.scalers {
                buf.push(o.tag());
                put(&mut buf, d);
            }
        }
        (ProbeParams::Linear(p), true) => {
            buf.extend_from_slice(&(p.maps.len() as u32).to_le_bytes());
            for (o, b) in &p.maps {
                buf.push(o.tag());
                put(&mut buf, b.data());
            }
        }
        _ => {
            return Err(Error::InvalidArgument(format!(
                "mode {} does not match the probe parameterization",
                ckpt.mode
            )))
        }
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                reason: format!("truncated while reading {}", what),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn objective(&mut self) -> Result<ObjectiveId> {
        let offset = self.pos as u64;
        let tag = self.u8("objective tag")?;
        ObjectiveId::from_tag(tag).ok_or_else(|| Error::Format {
            offset,
            reason: format!("unknown objective tag {}", tag),
        })
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(6, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad checkpoint magic".into(),
        });
    }
    let version = c.u8("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 6,
            reason: format!("unsupported checkpoint version {}", version),
        });
    }
    let mode_tag = c.u8("mode")?;
    let mode = Mode::from_tag(mode_tag).ok_or_else(|| Error::Format {
        offset: 7,
        reason: format!("unknown mode tag {}", mode_tag),
    })?;
    let dim = c.u32("dim")?;
    let count = c.u32("objective count")?;
    let params = if mode.is_linear() {
        let mut maps = BTreeMap::new();
        for _ in 0..count {
            let o = c.objective()?;
            maps.insert(o, Matrix::from_vec(dim, dim, c.floats(dim * dim, "B")?)?);
        }
        ProbeParams::Linear(LinearProbeParams { maps })
    } else {
        let v = Matrix::from_vec(dim, dim, c.floats(dim * dim, "V")?)?;
        let mut scalers = BTreeMap::new();
        for _ in 0..count {
            let o = c.objective()?;
            scalers.insert(o, c.floats(dim, "scaling vector")?);
        }
        ProbeParams::Orthogonal(OrthogonalProbeParams { v, scalers })
    };
    if c.pos != bytes.len() {
        return Err(Error::Format {
            offset: c.pos as u64,
            reason: "trailing bytes after checkpoint".into(),
        });
    }
    Ok(Checkpoint { mode, params })
}
