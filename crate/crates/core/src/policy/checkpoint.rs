//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic       8 bytes  "EXPGNCKP"
//! version     u32      1
//! encoding    u32      0 = flat, 1 = egocentric
//! radius      u32      egocentric window radius (0 for flat)
//! position    u32      1 if the absolute agent channel is appended
//! grid_w      u32
//! grid_h      u32
//! n_hidden    u32      followed by n_hidden u32 widths
//! recurrent   u32      recurrent width, 0 for none
//! n_actions   u32
//! n_weights   u64      followed by n_weights f64
//! has_opt     u8       1 if optimizer state follows
//!   t         u64
//!   beta1, beta2, eps  f64
//!   m, v      n_weights f64 each
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{AdamState, Architecture, ObsEncoding, PolicyParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"EXPGNCKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub optimizer: Option<AdamState>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    params: &PolicyParams,
    optimizer: Option<&AdamState>,
) -> std::io::Result<()> {
    let a = &params.arch;
    let mut out = Vec::with_capacity(64 + params.len() * 24);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    match a.encoding {
        ObsEncoding::Flat => {
            put_u32(&mut out, 0);
            put_u32(&mut out, 0);
            put_u32(&mut out, 0);
        }
        ObsEncoding::Egocentric {
            radius,
            include_position,
        } => {
            put_u32(&mut out, 1);
            put_u32(&mut out, radius);
            put_u32(&mut out, include_position as usize);
        }
    }
    put_u32(&mut out, a.grid_width);
    put_u32(&mut out, a.grid_height);
    put_u32(&mut out, a.hidden.len());
    for &h in &a.hidden {
        put_u32(&mut out, h);
    }
    put_u32(&mut out, a.recurrent.unwrap_or(0));
    put_u32(&mut out, a.n_actions);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    put_f64s(&mut out, &params.weights);
    match optimizer {
        None => out.push(0),
        Some(st) => {
            out.push(1);
            out.extend_from_slice(&st.t.to_le_bytes());
            put_f64s(&mut out, &[st.beta1, st.beta2, st.eps]);
            put_f64s(&mut out, &st.m);
            put_f64s(&mut out, &st.v);
        }
    }
    w.write_all(&out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut rd = Reader { buf: &buf, pos: 0 };
    if rd.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = rd.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let encoding = match (rd.u32()?, rd.u32()?, rd.u32()?) {
        (0, _, _) => ObsEncoding::Flat,
        (1, radius, pos) => ObsEncoding::Egocentric {
            radius,
            include_position: pos != 0,
        },
        (tag, _, _) => return Err(Error::Checkpoint(format!("unknown encoding {tag}"))),
    };
    let grid_width = rd.u32()?;
    let grid_height = rd.u32()?;
    let n_hidden = rd.u32()?;
    let hidden = (0..n_hidden).map(|_| rd.u32()).collect::<Result<Vec<_>>>()?;
    let recurrent = match rd.u32()? {
        0 => None,
        w => Some(w),
    };
    let n_actions = rd.u32()?;
    let arch = Architecture::new(encoding, grid_width, grid_height, hidden, recurrent, n_actions);
    let n = rd.u64()? as usize;
    if n != arch.param_count() {
        return Err(Error::Checkpoint(format!(
            "weight count {n} does not match architecture ({})",
            arch.param_count()
        )));
    }
    let weights = rd.f64s(n)?;
    let params = PolicyParams::from_weights(arch, weights)?;
    let optimizer = match rd.take(1)?[0] {
        0 => None,
        1 => {
            let t = rd.u64()?;
            let h = rd.f64s(3)?;
            Some(AdamState {
                beta1: h[0],
                beta2: h[1],
                eps: h[2],
                t,
                m: rd.f64s(n)?,
                v: rd.f64s(n)?,
            })
        }
        other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
    };
    if rd.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint { params, optimizer })
}

pub fn save_checkpoint(path: &Path, params: &PolicyParams, optimizer: Option<&AdamState>) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(std::io::BufWriter::new(f), params, optimizer).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(f))
}
