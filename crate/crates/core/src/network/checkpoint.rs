//! Flat little-endian parameter files.
//!
//! Layout: `b"CJPA"`, version `u32`, array count `u32`, then for each array
//! its name length `u16`, name bytes, rank `u8`, one `u32` per dimension and
//! the `f64` payload in row-major order.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::network::params::NetworkParams;

pub const MAGIC: &[u8; 4] = b"CJPA";
pub const VERSION: u32 = 1;

/// One named array as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn write_checkpoint<W: Write>(params: &NetworkParams, mut w: W) -> Result<()> {
    let arrays = params.arrays();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for a in arrays {
        let name = a.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {}", a.name)))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[a.shape.len() as u8])?;
        for &d in &a.shape {
            let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("dimension too large in {}", a.name)))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for &v in a.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn take<const N: usize, R: Read>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| Error::Checkpoint(format!("truncated while reading {what}: {e}")))?;
    Ok(buf)
}

/// Reads every array without interpreting names.
pub fn read_arrays<R: Read>(mut r: R) -> Result<Vec<StoredArray>> {
    if &take::<4, _>(&mut r, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut r, "version")?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut r, "array count")?);
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(take(&mut r, "name length")?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let rank = take::<1, _>(&mut r, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut r, "dimension")?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = f64::from_le_bytes(take(&mut r, &name)?);
            if !v.is_finite() {
                return Err(Error::Checkpoint(format!("non-finite value in {name}")));
            }
            data.push(v);
        }
        out.push(StoredArray { name, shape, data });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last array".into()));
    }
    Ok(out)
}

/// Loads a checkpoint into parameters laid out like `template`.
pub fn read_checkpoint<R: Read>(template: &NetworkParams, r: R) -> Result<NetworkParams> {
    let stored = read_arrays(r)?;
    let mut params = template.clone();
    let mut views = params.arrays_mut();
    if views.len() != stored.len() {
        return Err(Error::Checkpoint(format!("expected {} arrays, found {}", views.len(), stored.len())));
    }
    for (v, s) in views.iter_mut().zip(stored) {
        if v.name != s.name || v.shape != s.shape {
            return Err(Error::Checkpoint(format!(
                "expected {} {:?}, found {} {:?}",
                v.name, v.shape, s.name, s.shape
            )));
        }
        v.data.copy_from_slice(&s.data);
    }
    drop(views);
    Ok(params)
}
