//! Binary checkpoint: magic, version, config JSON, then named f32 tensors,
//! all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{MbmdModel, ModelConfig, ModelError, ParamStore};
use crate::diffcore::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MBMD";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u32(r: &mut impl Read) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| bad(format!("truncated: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| bad(format!("truncated: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_checkpoint<F: Scalar>(model: &MbmdModel<F>, w: &mut impl Write) -> Result<(), ModelError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION)?;
    let json = serde_json::to_vec(model.config()).map_err(|e| bad(e.to_string()))?;
    put_u32(w, json.len() as u32)?;
    w.write_all(&json)?;
    put_u32(w, model.params().len() as u32)?;
    for (name, t) in model.params().iter() {
        put_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.shape().len() as u32)?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&(x.as_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<F: Scalar>(r: &mut impl Read) -> Result<MbmdModel<F>, ModelError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let json_len = get_u32(r)? as usize;
    if json_len > 1 << 20 {
        return Err(bad("config blob too large"));
    }
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json).map_err(|_| bad("truncated config"))?;
    let config: ModelConfig = serde_json::from_slice(&json).map_err(|e| bad(format!("config: {e}")))?;
    config.validate()?;
    let count = get_u32(r)? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = get_u32(r)? as usize;
        if name_len > MAX_NAME {
            return Err(bad("tensor name too long"));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rank = get_u32(r)? as usize;
        if rank > MAX_RANK {
            return Err(bad(format!("{name}: rank {rank}")));
        }
        let shape = (0..rank).map(|_| get_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("shape overflow"))?;
        if n > 1 << 28 {
            return Err(bad(format!("{name}: tensor too large")));
        }
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw).map_err(|_| bad(format!("{name}: truncated data")))?;
        let data = raw.chunks_exact(4).map(|c| F::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect();
        if params.id(&name).is_some() {
            return Err(bad(format!("duplicate tensor {name}")));
        }
        params.add(name, Tensor::new(shape, data)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes"));
    }
    MbmdModel::from_params(config, params)
}

pub fn save_checkpoint<F: Scalar>(model: &MbmdModel<F>, path: &Path) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<MbmdModel<F>, ModelError> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
