//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "POEMCKPT"
//! version  u32
//! seed     u64
//! dtype    u8       0 = f64, 1 = f32
//! step     u64      optimizer steps taken
//! count    u32      number of entries
//! entries  count x { name_len u32, name bytes, rank u32, extents u64 x rank, data }
//! ```
//!
//! Adam moments are stored as extra entries named `@m:<param>` and
//! `@v:<param>` following the parameter values.

use std::io::Read;
use std::path::Path;

use super::params::Param;
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"POEMCKPT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub dtype: Dtype,
    pub params: ParamStore,
}

fn write_entry(out: &mut Vec<u8>, name: &str, t: &Tensor, dtype: Dtype) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend((e as u64).to_le_bytes());
    }
    for &v in t.data() {
        match dtype {
            Dtype::F64 => out.extend(v.to_le_bytes()),
            Dtype::F32 => out.extend((v as f32).to_le_bytes()),
        }
    }
}

pub(crate) fn encode(store: &ParamStore, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    out.extend(store.seed().to_le_bytes());
    out.push(dtype.code());
    out.extend(store.step().to_le_bytes());
    out.extend((3 * store.len() as u32).to_le_bytes());
    for (name, p) in store.iter_state() {
        write_entry(&mut out, name, &p.value, dtype);
    }
    for (name, p) in store.iter_state() {
        write_entry(&mut out, &format!("@m:{name}"), &p.m, dtype);
        write_entry(&mut out, &format!("@v:{name}"), &p.v, dtype);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.buf.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub(crate) fn decode(buf: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let seed = r.u64()?;
    let dtype = match r.take(1)?[0] {
        0 => Dtype::F64,
        1 => Dtype::F32,
        other => return Err(format!("unknown dtype code {other}")),
    };
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let mut entries: Vec<(String, Tensor)> = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| e.to_string())?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|e| e as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let data = match dtype {
            Dtype::F64 => r
                .take(8 * n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::F32 => r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        entries.push((name, Tensor::new(&shape, data).map_err(|e| e.to_string())?));
    }
    if r.pos != buf.len() {
        return Err(format!("{} trailing bytes", buf.len() - r.pos));
    }
    let mut store = ParamStore::new(seed);
    store.set_step(step);
    let mut moments = std::collections::HashMap::new();
    for (name, t) in entries {
        if let Some(rest) = name.strip_prefix("@m:") {
            moments.entry(rest.to_string()).or_insert((None, None)).0 = Some(t);
        } else if let Some(rest) = name.strip_prefix("@v:") {
            moments.entry(rest.to_string()).or_insert((None, None)).1 = Some(t);
        } else {
            store.insert(&name, t).map_err(|e| e.to_string())?;
        }
    }
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let value = store.get(&name).unwrap().clone();
        let (m, v) = moments.remove(&name).unwrap_or((None, None));
        let zeros = Tensor::zeros(value.shape());
        store.insert_with_state(
            &name,
            Param {
                m: m.unwrap_or_else(|| zeros.clone()),
                v: v.unwrap_or(zeros),
                value,
            },
        );
    }
    if let Some(orphan) = moments.keys().next() {
        return Err(format!("optimizer state for unknown parameter {orphan}"));
    }
    Ok(Checkpoint { dtype, params: store })
}

/// Writes a checkpoint atomically (temp file + rename).
pub fn save_checkpoint(path: &Path, store: &ParamStore, dtype: Dtype) -> Result<()> {
    let bytes = encode(store, dtype);
    crate::io::write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    decode(&buf).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}
