//! Flat binary checkpoints.
//!
//! Layout (little-endian): magic `MQCK`, `u32` version, `u32` spec length and
//! the model spec as JSON, `u32` tensor count, then per tensor a `u32` name
//! length, the name, `u64` rows, `u64` cols and `rows · cols` `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::SeqTensor;
use crate::training::model::{Model, ModelSpec, Params};

const MAGIC: &[u8; 4] = b"MQCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(model: &Model, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let spec = serde_json::to_vec(&model.spec).map_err(|e| Error::invalid(e.to_string()))?;
    w.write_all(&(spec.len() as u32).to_le_bytes())?;
    w.write_all(&spec)?;
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (name, t) in model.params.names.iter().zip(&model.params.tensors) {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rows() as u64).to_le_bytes())?;
        w.write_all(&(t.cols() as u64).to_le_bytes())?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read, len: usize) -> Result<Vec<u8>> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Model> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::invalid("not a checkpoint file"));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::invalid(format!("unsupported checkpoint version {version}")));
    }
    let len = read_u32(r)? as usize;
    let spec: ModelSpec = serde_json::from_slice(&read_bytes(r, len)?).map_err(|e| Error::invalid(e.to_string()))?;
    let count = read_u32(r)? as usize;
    let mut params = Params { names: Vec::with_capacity(count), tensors: Vec::with_capacity(count) };
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let name = String::from_utf8(read_bytes(r, len)?).map_err(|e| Error::invalid(e.to_string()))?;
        let (rows, cols) = (read_u64(r)? as usize, read_u64(r)? as usize);
        let raw = read_bytes(r, rows * cols * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        params.names.push(name);
        params.tensors.push(SeqTensor::from_vec(rows, cols, data)?);
    }
    Model::from_params(spec, params)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    read_checkpoint(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::model::Variant;

    #[test]
    fn round_trip() {
        for v in [Variant::Attention, Variant::BaseConv] {
            let m = Model::init(ModelSpec::new(v, 8, 4, 6), 9).unwrap();
            let mut buf = Vec::new();
            write_checkpoint(&m, &mut buf).unwrap();
            let back = read_checkpoint(&mut buf.as_slice()).unwrap();
            assert_eq!(back.params, m.params);
            assert_eq!(back.spec, m.spec);
            assert!(read_checkpoint(&mut &buf[..buf.len() - 3]).is_err());
        }
        assert!(read_checkpoint(&mut &b"XXXX"[..]).is_err());
    }
}
