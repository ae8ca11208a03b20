//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//! `"T1CKPT1\n"`, `u64` config length, config JSON, `u64` tensor count, then per
//! tensor `u32` name length, name, `u32` rank, `rank x u64` dims, `f64` payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::ModelConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"T1CKPT1\n";

/// Upper bound on any length field, to reject corrupt files before allocating.
const MAX_FIELD: u64 = 1 << 32;

pub fn write_checkpoint(out: &mut impl Write, config: &ModelConfig, params: &ParamStore) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    let json = serde_json::to_vec(config)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    out.write_all(&(params.len() as u64).to_le_bytes())?;
    for (_, name, entry) in params.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        let shape = entry.value.shape();
        out.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in entry.value.data() {
            out.write_all(&v.to_le_bytes())?;
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
    let v = u64::from_le_bytes(b);
    Ok(v)
}

fn read_len(r: &mut impl Read, what: &str) -> Result<usize> {
    let v = read_u64(r)?;
    if v > MAX_FIELD {
        return Err(Error::Checkpoint(format!("{what} {v} is implausibly large")));
    }
    Ok(v as usize)
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<(ModelConfig, ParamStore)> {
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad header, expected T1CKPT1".into()));
    }
    let n = read_len(input, "config length")?;
    let mut json = vec![0u8; n];
    input.read_exact(&mut json)?;
    let config: ModelConfig = serde_json::from_slice(&json)?;
    let count = read_len(input, "tensor count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(input)? as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = read_u32(input)? as usize;
        let shape = (0..rank).map(|_| read_len(input, "dimension")).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        if len as u64 > MAX_FIELD {
            return Err(Error::Checkpoint(format!("{name}: {len} elements is implausibly large")));
        }
        let mut bytes = vec![0u8; len * 8];
        input.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok((config, store))
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ParamStore) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut out, config, params)?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParamStore)> {
    let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut input).map_err(|e| match e {
        Error::Io(io) => Error::Checkpoint(format!("{}: {io}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let config = ModelConfig::default();
        let mut params = ParamStore::new();
        params.insert("a", Tensor::new([2], vec![1.5, -0.25]).unwrap()).unwrap();
        params.insert("b.c", Tensor::new([1, 1, 3], vec![f64::MIN_POSITIVE, 0.0, 1e300]).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &config, &params).unwrap();
        let (cfg, back) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(cfg, config);
        assert_eq!(back.value("b.c"), params.value("b.c"));
        assert_eq!(back.value("a"), params.value("a"));
    }

    #[test]
    fn rejects_bad_header_and_truncation() {
        assert!(read_checkpoint(&mut &b"T1CKPT2\n"[..]).is_err());
        let mut buf = Vec::new();
        let mut params = ParamStore::new();
        params.insert("a", Tensor::ones([4])).unwrap();
        write_checkpoint(&mut buf, &ModelConfig::default(), &params).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }
}
