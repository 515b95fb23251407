//! Binary model checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic     8 bytes  "LRCKPT\0\0"
//! version   u32
//! entries   u32      number of named slices
//! per entry u32 name length, name bytes (UTF-8), u32 group, u64 length
//! momentum  f64
//! data      f64 * sum(lengths), entries in order
//! ```
//!
//! Loading checks the table against the compiled architecture and rejects any
//! difference.

use std::io::{Read, Write};
use std::path::Path;

use super::model::{layer_map, Group, LayerEntry, RestorationModel};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LRCKPT\0\0";
pub const VERSION: u32 = 1;

fn group_code(g: Group) -> u32 {
    match g {
        Group::Encoder => 0,
        Group::Decoder => 1,
        Group::Head => 2,
        Group::NormStats => 3,
    }
}

fn norm_slices(model: &RestorationModel) -> Vec<f64> {
    let mut out = Vec::new();
    for s in model.norm_stats() {
        out.extend_from_slice(&s.mean);
        out.extend_from_slice(&s.var);
    }
    out
}

impl RestorationModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let map = layer_map();
        out.extend_from_slice(&(map.len() as u32).to_le_bytes());
        for e in map {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&group_code(e.group).to_le_bytes());
            out.extend_from_slice(&(e.len as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.momentum.to_le_bytes());
        let norm = norm_slices(self);
        for e in map {
            let src: &[f64] = match e.group {
                Group::NormStats => &norm,
                g => self.params(g),
            };
            for v in &src[e.offset..e.offset + e.len] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader {
            path,
            bytes,
            pos: 0,
        };
        if r.take(8)? != MAGIC {
            return Err(r.err(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(8, &format!("unsupported version {version}")));
        }
        let map = layer_map();
        let n = r.u32()? as usize;
        if n != map.len() {
            return Err(r.err(12, &format!("{n} layers, architecture has {}", map.len())));
        }
        for e in map {
            let at = r.pos as u64;
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.err(at, "layer name is not UTF-8"))?
                .to_owned();
            let group = r.u32()?;
            let len = r.u64()? as usize;
            let got = LayerEntry {
                name,
                group: e.group,
                offset: e.offset,
                len,
            };
            if got.name != e.name || group != group_code(e.group) || len != e.len {
                return Err(r.err(
                    at,
                    &format!(
                        "layer {:?} (len {len}) does not match {:?} (len {})",
                        got.name, e.name, e.len
                    ),
                ));
            }
        }
        let at = r.pos as u64;
        let momentum = r.f64()?;
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(r.err(at, &format!("momentum {momentum} outside (0, 1)")));
        }
        let mut model = RestorationModel::zeroed();
        model.momentum = momentum;
        let mut norm = Vec::new();
        for e in map {
            let at = r.pos as u64;
            let vals = (0..e.len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(r.err(at, &format!("non-finite value in {}", e.name)));
            }
            match e.group {
                Group::NormStats => norm.extend(vals),
                g => model.params_mut(g)[e.offset..e.offset + e.len].copy_from_slice(&vals),
            }
        }
        let mut it = norm.into_iter();
        for s in model.norm_stats_mut() {
            s.mean
                .iter_mut()
                .for_each(|v| *v = it.next().expect("sized by map"));
            s.var
                .iter_mut()
                .for_each(|v| *v = it.next().expect("sized by map"));
        }
        if r.pos != bytes.len() {
            return Err(r.err(r.pos as u64, "trailing bytes"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: u64, msg: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset,
            msg: msg.to_owned(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(self.pos as u64, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
