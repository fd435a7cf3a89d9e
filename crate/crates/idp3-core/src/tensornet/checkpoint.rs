//! Flat binary checkpoints: parameter names, shapes, flags, and values.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"TNCK"
//! version  u32
//! tag      u64      caller-chosen run identifier
//! count    u64
//! repeated count times:
//!   name_len u32, name utf-8, flags u8 (bit 0: trainable),
//!   ndim u32, dims u64 * ndim, values f64 * numel
//! ```
//!
//! Values are written bit for bit, so save -> load -> save reproduces the
//! file exactly. Optimizer moments are transient and not persisted.

use super::optim::ParamSet;
use super::tensor::Tensor;
use super::TensornetError;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: [u8; 4] = *b"TNCK";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, params: &ParamSet, tag: u64) -> Result<(), TensornetError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&tag.to_le_bytes())?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for p in params.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[p.trainable as u8])?;
        let shape = p.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint into a fresh [`ParamSet`] (zeroed gradients and
/// moments) and returns it with the stored tag.
pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, u64), TensornetError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(TensornetError::BadCheckpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(TensornetError::BadCheckpoint(format!("unsupported version {version}")));
    }
    let tag = read_u64(&mut r)?;
    let count = read_u64(&mut r)? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 1 << 16 {
            return Err(TensornetError::BadCheckpoint(format!("name length {name_len}")));
        }
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| TensornetError::BadCheckpoint("name not utf-8".into()))?;
        let mut flags = [0u8; 1];
        r.read_exact(&mut flags)?;
        let ndim = read_u32(&mut r)? as usize;
        if ndim > 8 {
            return Err(TensornetError::BadCheckpoint(format!("rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel > 1 << 28 {
            return Err(TensornetError::BadCheckpoint(format!("parameter with {numel} elements")));
        }
        let mut data = vec![0.0f64; numel];
        let mut buf = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        let value = Tensor::from_vec(&shape, data);
        if flags[0] & 1 != 0 {
            params.add(&name, value);
        } else {
            params.add_frozen(&name, value);
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(TensornetError::BadCheckpoint("trailing bytes".into()));
    }
    Ok((params, tag))
}

/// Loads a checkpoint into an existing parameter set, requiring identical
/// names, shapes, and flags in identical order. Use this to restore weights
/// into a model freshly built from its configuration.
pub fn load_checkpoint_into(path: &Path, params: &mut ParamSet) -> Result<u64, TensornetError> {
    let (loaded, tag) = load_checkpoint(path)?;
    if loaded.len() != params.len() {
        return Err(TensornetError::BadCheckpoint(format!(
            "parameter count {} in file, {} expected",
            loaded.len(),
            params.len()
        )));
    }
    for (have, want) in loaded.iter().zip(params.iter()) {
        if have.name != want.name || have.value.shape() != want.value.shape() || have.trainable != want.trainable {
            return Err(TensornetError::BadCheckpoint(format!(
                "parameter mismatch: file has {:?} {:?}, model expects {:?} {:?}",
                have.name,
                have.value.shape(),
                want.name,
                want.value.shape()
            )));
        }
    }
    for (id, have) in params.ids().collect::<Vec<_>>().into_iter().zip(loaded.iter()) {
        params.get_mut(id).value = have.value.clone();
    }
    Ok(tag)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TensornetError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, TensornetError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
