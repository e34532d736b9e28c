//! Versioned little-endian binary checkpoints.
//!
//! Layout: magic `TTAQ`, u32 version, u32-length-prefixed JSON of the
//! architecture, u32 tensor count, then per tensor a name, role byte,
//! rank, u64 dims and raw f64 bits; finally per BN layer the running mean
//! and variance. Floats are stored by bit pattern, so round trips are exact.

use super::{ArchConfig, ParamRole, QualityModel, RunningStats};
use crate::tensor::Tensor;
use crate::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"TTAQ";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    put_u32(w, vs.len() as u32)?;
    for v in vs {
        w.write_all(&v.to_bits().to_le_bytes())?;
    }
    Ok(())
}

fn put_bytes(w: &mut impl Write, b: &[u8]) -> Result<()> {
    put_u32(w, b.len() as u32)?;
    Ok(w.write_all(b)?)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_bytes(r: &mut impl Read, limit: usize) -> Result<Vec<u8>> {
    let n = get_u32(r)? as usize;
    if n > limit {
        return Err(Error::Checkpoint(format!("field length {n} exceeds {limit}")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn get_f64s(r: &mut impl Read) -> Result<Vec<f64>> {
    let n = get_u32(r)? as usize;
    if n > 1 << 28 {
        return Err(Error::Checkpoint(format!("array length {n} is implausible")));
    }
    (0..n).map(|_| get_u64(r).map(f64::from_bits)).collect()
}

pub fn write_checkpoint(model: &QualityModel, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION)?;
    put_bytes(w, &serde_json::to_vec(model.arch())?)?;
    put_u32(w, model.params().len() as u32)?;
    for ((t, name), role) in model.params().iter().zip(model.param_names()).zip(model.roles()) {
        put_bytes(w, name.as_bytes())?;
        w.write_all(&[role.code()])?;
        put_u32(w, t.shape().len() as u32)?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        put_f64s(w, t.data())?;
    }
    put_u32(w, model.running_stats().len() as u32)?;
    for s in model.running_stats() {
        put_f64s(w, &s.mean)?;
        put_f64s(w, &s.var)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<QualityModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let arch: ArchConfig = serde_json::from_slice(&get_bytes(r, 1 << 16)?)?;
    let count = get_u32(r)? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = String::from_utf8(get_bytes(r, 1024)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut role = [0u8; 1];
        r.read_exact(&mut role)?;
        let role = ParamRole::from_code(role[0]).ok_or_else(|| Error::Checkpoint(format!("bad role byte {}", role[0])))?;
        let rank = get_u32(r)? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("tensor `{name}` has rank {rank}")));
        }
        let shape = (0..rank).map(|_| get_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let data = get_f64s(r)?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        tensors.push((name, role, t));
    }
    let layers = get_u32(r)? as usize;
    let mut running = Vec::with_capacity(layers.min(4096));
    for _ in 0..layers {
        let mean = get_f64s(r)?;
        let var = get_f64s(r)?;
        running.push(RunningStats { mean, var });
    }
    QualityModel::from_parts(arch, tensors, running)
}

pub fn save_checkpoint(model: &QualityModel, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(model, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<QualityModel> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut f)
}
