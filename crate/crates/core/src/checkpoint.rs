//! Versioned, bit-exact checkpoint files.
//!
//! Layout (all integers little-endian):
//!   magic "MECC" | version u32 | stage (u32 len + utf8) | step u64 |
//!   seed u64 | config_hash (u32 len + utf8) | param_count u64 |
//!   per parameter: name (u32 len + utf8) | dtype tag u8 | rank u32 |
//!   dims u64 each | raw values (f32/f64 LE) | frozen u8.
//!
//! `load(save(x))` is bitwise identical; version mismatch and truncation
//! are rejected.

use std::io::{Read, Write};
use std::path::Path;

use crate::params::{Param, ParamStore};
use crate::tensor::{Dtype, Tensor};
use crate::Error;

const MAGIC: &[u8; 4] = b"MECC";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub stage: String,
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

fn write_str(w: &mut impl Write, s: &str) -> Result<(), Error> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>, Error> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("truncated checkpoint file".into()))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32, Error> {
    Ok(u32::from_le_bytes(read_bytes(r, 4)?.try_into().unwrap()))
}

fn read_u64(r: &mut impl Read) -> Result<u64, Error> {
    Ok(u64::from_le_bytes(read_bytes(r, 8)?.try_into().unwrap()))
}

fn read_str(r: &mut impl Read) -> Result<String, Error> {
    let n = read_u32(r)? as usize;
    String::from_utf8(read_bytes(r, n)?).map_err(|_| Error::Checkpoint("invalid utf8 in checkpoint".into()))
}

pub fn save(path: &Path, meta: &CheckpointMeta, params: &ParamStore) -> Result<(), Error> {
    let mut buf = Vec::new();
    buf.write_all(MAGIC)?;
    buf.write_all(&VERSION.to_le_bytes())?;
    write_str(&mut buf, &meta.stage)?;
    buf.write_all(&meta.step.to_le_bytes())?;
    buf.write_all(&meta.seed.to_le_bytes())?;
    write_str(&mut buf, &meta.config_hash)?;
    buf.write_all(&(params.len() as u64).to_le_bytes())?;
    for (name, p) in params.iter() {
        write_str(&mut buf, name)?;
        buf.push(p.tensor.dtype.tag());
        buf.write_all(&(p.tensor.rank() as u32).to_le_bytes())?;
        for &d in &p.tensor.shape {
            buf.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &p.tensor.data {
            match p.tensor.dtype {
                Dtype::F32 => buf.write_all(&(v as f32).to_le_bytes())?,
                Dtype::F64 => buf.write_all(&v.to_le_bytes())?,
            }
        }
        buf.push(u8::from(p.frozen));
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, Error> {
    let bytes = std::fs::read(path)?;
    let mut r = bytes.as_slice();
    let magic = read_bytes(&mut r, 4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic in {}", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let stage = read_str(&mut r)?;
    let step = read_u64(&mut r)?;
    let seed = read_u64(&mut r)?;
    let config_hash = read_str(&mut r)?;
    let count = read_u64(&mut r)?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = read_str(&mut r)?;
        let tag = read_bytes(&mut r, 1)?[0];
        let dtype = Dtype::from_tag(tag)
            .ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag}")))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = match dtype {
                Dtype::F32 => f32::from_le_bytes(read_bytes(&mut r, 4)?.try_into().unwrap()) as f64,
                Dtype::F64 => f64::from_le_bytes(read_bytes(&mut r, 8)?.try_into().unwrap()),
            };
            data.push(v);
        }
        let frozen = read_bytes(&mut r, 1)?[0] != 0;
        params.insert(&name, Tensor::new(shape, data, dtype));
        params.set_frozen(&name, frozen);
    }
    if !r.is_empty() {
        return Err(Error::Checkpoint("trailing bytes after last parameter".into()));
    }
    Ok(Checkpoint { meta: CheckpointMeta { stage, step, seed, config_hash }, params })
}

/// Listing used by `inspect-ckpt`.
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub frozen: bool,
    pub hash: String,
}

pub fn inspect(ckpt: &Checkpoint) -> Vec<ParamInfo> {
    ckpt.params
        .iter()
        .map(|(name, p): (&String, &Param)| ParamInfo {
            name: name.clone(),
            shape: p.tensor.shape.clone(),
            dtype: p.tensor.dtype,
            frozen: p.frozen,
            hash: ParamStore::tensor_hash(&p.tensor),
        })
        .collect()
}
