//! Flat binary checkpoint: magic `RSEG`, version, then named parameter
//! blocks. Per block: name length (u16 LE) + UTF-8 name, rank (u8), extents
//! (u32 LE each), data as f64 LE. Blocks are sorted by name, so identical
//! parameters serialize to identical bytes regardless of training precision.

use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::scalar::{fl, Scalar};
use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 4] = b"RSEG";
const VERSION: u32 = 1;

pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let mut entries: Vec<_> = store.entries().collect();
    entries.sort_by(|a, b| a.name.cmp(&b.name));
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(e.value.shape.len() as u8);
        for &d in &e.value.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &e.value.data {
            buf.extend_from_slice(&v.to_f64().to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse(format!("{}: truncated checkpoint", self.path.display())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("len checked")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("len checked")))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("len checked")))
    }
}

/// Loads a checkpoint into an already-constructed store; every parameter
/// must be present with a matching shape, and no extras are allowed.
pub fn load_into<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::Parse(format!("{}: not a checkpoint (bad magic)", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Parse(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let count = r.u32()? as usize;
    let mut blocks: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Parse(format!("{}: bad parameter name", path.display())))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64()?);
        }
        blocks.insert(name, (shape, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse(format!("{}: trailing bytes", path.display())));
    }
    if blocks.len() != store.len() {
        return Err(Error::Parse(format!(
            "{}: checkpoint has {} parameters, model expects {}",
            path.display(),
            blocks.len(),
            store.len()
        )));
    }
    let names: Vec<String> = store.entries().map(|e| e.name.clone()).collect();
    for name in names {
        let (shape, data) = blocks.remove(&name).ok_or_else(|| {
            Error::Parse(format!("{}: missing parameter '{name}'", path.display()))
        })?;
        let id = store.id(&name).expect("name from store");
        let t = store.value_mut(id);
        if t.shape != shape {
            return Err(Error::Parse(format!(
                "{}: parameter '{name}' has shape {shape:?}, model expects {:?}",
                path.display(),
                t.shape
            )));
        }
        for (slot, v) in t.data.iter_mut().zip(data) {
            *slot = fl(v);
        }
    }
    Ok(())
}
