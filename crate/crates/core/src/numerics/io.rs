//! Binary tensor and checkpoint files.
//!
//! Tensor: `"STPT"`, `u8` version (1), `u8` dtype (0 = f32, 1 = f64), `u8`
//! ndim, `ndim` little-endian `u32` dims, then little-endian values.
//!
//! Checkpoint: `"STPK"`, `u8` version (1), `u32` record count, then per
//! record a `u32` byte length, the UTF-8 path, and one tensor encoding.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"STPT";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STPK";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor, dtype: DType) -> Result<()> {
    if t.ndim() > u8::MAX as usize {
        return Err(Error::Format(format!("{} dimensions do not fit the header", t.ndim())));
    }
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&[FORMAT_VERSION, dtype as u8, t.ndim() as u8])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 8);
    match dtype {
        DType::F32 => t.data().iter().for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t.data().iter().for_each(|&v| buf.extend_from_slice(&v.to_le_bytes())),
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated file: {e}")))?;
    Ok(buf)
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let magic: [u8; 4] = read_exact(r)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let [version, dtype, ndim] = read_exact::<_, 3>(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    let mut shape = Vec::with_capacity(ndim as usize);
    for _ in 0..ndim {
        shape.push(u32::from_le_bytes(read_exact(r)?) as usize);
    }
    let n: usize = shape.iter().product();
    let data = match dtype {
        0 => {
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)
                .map_err(|e| Error::Format(format!("truncated tensor data: {e}")))?;
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        }
        1 => {
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)
                .map_err(|e| Error::Format(format!("truncated tensor data: {e}")))?;
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        }
        other => return Err(Error::Format(format!("unknown dtype code {other}"))),
    };
    Tensor::new(shape, data)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t, DType::F64)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    read_tensor(&mut bytes.as_slice())
}

/// Serialize named tensors as a checkpoint container.
pub fn write_records<W: Write>(w: &mut W, records: &[(&str, &Tensor)]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&[FORMAT_VERSION])?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (path, t) in records {
        w.write_all(&(path.len() as u32).to_le_bytes())?;
        w.write_all(path.as_bytes())?;
        write_tensor(w, t, DType::F64)?;
    }
    Ok(())
}

pub fn read_records<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let magic: [u8; 4] = read_exact(r)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let [version] = read_exact::<_, 1>(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(r)?) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32::from_le_bytes(read_exact(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated record name: {e}")))?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(format!("record name: {e}")))?;
        out.push((name, read_tensor(r)?));
    }
    Ok(out)
}

pub fn save_params(path: &Path, store: &ParamStore) -> Result<()> {
    let records: Vec<(&str, &Tensor)> = store.iter().map(|(k, p)| (k, &p.value)).collect();
    let mut buf = Vec::new();
    write_records(&mut buf, &records)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path)?;
    let mut store = ParamStore::new();
    for (name, t) in read_records(&mut bytes.as_slice())? {
        store.insert(name, t);
    }
    Ok(store)
}
