//! Binary parameter files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "BVAP1"  u32 version  u32 entry_count
//! per entry: u32 name_len, name (utf-8), u8 dtype (0 = f64), u8 rank,
//!            rank × u64 dims, product(dims) × f64
//! ```
//!
//! Optimizer accumulators follow the parameters as entries named
//! `<param>#sq` and `<param>#mom`.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Dims, Tensor};

pub const MAGIC: &[u8; 5] = b"BVAP1";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 0;

const SQ_SUFFIX: &str = "#sq";
const MOM_SUFFIX: &str = "#mom";

/// Serializes every parameter and its optimizer state.
pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 3 * 8 * store.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&((3 * store.len()) as u32).to_le_bytes());
    for (name, t) in store.iter() {
        write_entry(&mut out, name, t.dims(), t.data());
    }
    for (name, t) in store.iter() {
        let st = store.state(name).expect("entry has state");
        write_entry(&mut out, &format!("{name}{SQ_SUFFIX}"), t.dims(), &st.square_avg);
        write_entry(&mut out, &format!("{name}{MOM_SUFFIX}"), t.dims(), &st.momentum);
    }
    out
}

fn write_entry(out: &mut Vec<u8>, name: &str, dims: Dims, values: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F64);
    out.push(dims.len() as u8);
    for d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end =
            self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
                Error::Checkpoint(format!("truncated file: {what} at byte {} needs {n} bytes", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses a checkpoint. Tensors of rank below 4 are padded with leading 1s.
pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a BVAP1 checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32("entry count")? as usize;
    let mut seen = HashSet::new();
    let mut params = Vec::new();
    let mut states = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("entry name is not utf-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("duplicate entry `{name}`")));
        }
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F64 {
            return Err(Error::Checkpoint(format!("`{name}`: unknown dtype code {dtype}")));
        }
        let rank = r.u8("rank")? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::Checkpoint(format!("`{name}`: unsupported rank {rank}")));
        }
        let mut dims = [1usize; 4];
        for k in 0..rank {
            dims[4 - rank + k] = usize::try_from(r.u64("dims")?)
                .map_err(|_| Error::Checkpoint(format!("`{name}`: dimension overflow")))?;
        }
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes_needed = n
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint(format!("`{name}`: dims {dims:?} overflow")))?;
        let raw = r.take(bytes_needed, &format!("values of `{name}`"))?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(dims, data)?;
        if name.ends_with(SQ_SUFFIX) || name.ends_with(MOM_SUFFIX) {
            states.push((name, t));
        } else {
            params.push((name, t));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let mut store = ParamStore::new();
    for (name, t) in params {
        store.insert(name, t)?;
    }
    for (key, t) in states {
        let (base, is_sq) = match key.strip_suffix(SQ_SUFFIX) {
            Some(b) => (b, true),
            None => (key.strip_suffix(MOM_SUFFIX).expect("suffix checked"), false),
        };
        let expected = store
            .get(base)
            .map(|p| p.dims())
            .ok_or_else(|| Error::Checkpoint(format!("optimizer state `{key}` has no parameter")))?;
        if expected != t.dims() {
            return Err(Error::Checkpoint(format!(
                "optimizer state `{key}` is {:?}, parameter is {expected:?}",
                t.dims()
            )));
        }
        let st = store.state_mut(base).expect("checked above");
        if is_sq {
            st.square_avg = t.into_data();
        } else {
            st.momentum = t.into_data();
        }
    }
    Ok(store)
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let bytes = encode(store);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::OpenOptions::new().write(true).create_new(true).open(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
