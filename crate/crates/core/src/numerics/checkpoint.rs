//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "BFCKPT01"
//! u32 len + bytes   config JSON (self-describing reload)
//! u32 len + bytes   meta JSON   (epoch, optimizer step)
//! u32 n_params
//!   per tensor: u32 name len + name bytes, u32 rows, u32 cols, rows*cols f64
//! u8 has_opt; if 1: first moments then second moments as raw f64 runs,
//!   sizes taken from the parameter table
//! ```
//!
//! f64 values are stored as raw IEEE-754 bits, so a save/load round trip
//! is bit-exact.

use crate::error::{Error, Result};
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"BFCKPT01";

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    /// Epochs already completed when this checkpoint was written.
    pub epochs_done: Option<usize>,
    pub adam_step: Option<u64>,
}

/// Optimizer moment buffers, aligned with `ParamStore` insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_json: String,
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub opt: Option<OptState>,
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::data("checkpoint section too large"))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_bytes(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    write_u32(w, bytes.len())?;
    w.write_all(bytes)?;
    Ok(())
}

fn write_f64s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_bytes(r: &mut impl Read) -> Result<Vec<u8>> {
    let len = read_u32(r)?;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_bytes(&mut w, ckpt.config_json.as_bytes())?;
    let meta = serde_json::to_string(&ckpt.meta)
        .map_err(|e| Error::data(format!("meta encode: {e}")))?;
    write_bytes(&mut w, meta.as_bytes())?;

    write_u32(&mut w, ckpt.params.len())?;
    for (name, t) in ckpt.params.iter() {
        write_bytes(&mut w, name.as_bytes())?;
        write_u32(&mut w, t.rows())?;
        write_u32(&mut w, t.cols())?;
        write_f64s(&mut w, t.values())?;
    }

    match &ckpt.opt {
        None => w.write_all(&[0u8])?,
        Some(opt) => {
            if opt.m.len() != ckpt.params.len() || opt.v.len() != ckpt.params.len() {
                return Err(Error::shape("optimizer state/parameter count mismatch"));
            }
            w.write_all(&[1u8])?;
            for buf in opt.m.iter().chain(opt.v.iter()) {
                write_f64s(&mut w, buf)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::data(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let config_json = String::from_utf8(read_bytes(&mut r)?)
        .map_err(|_| Error::data("checkpoint config is not UTF-8"))?;
    let meta_bytes = read_bytes(&mut r)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::data(format!("checkpoint meta: {e}")))?;

    let n_params = read_u32(&mut r)?;
    let mut params = ParamStore::new();
    let mut sizes = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = String::from_utf8(read_bytes(&mut r)?)
            .map_err(|_| Error::data("parameter name is not UTF-8"))?;
        let rows = read_u32(&mut r)?;
        let cols = read_u32(&mut r)?;
        let values = read_f64s(&mut r, rows * cols)?;
        sizes.push(rows * cols);
        params.insert(name, Tensor::from_vec(rows, cols, values)?);
    }

    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let opt = if flag[0] == 1 {
        let mut m = Vec::with_capacity(n_params);
        for &n in &sizes {
            m.push(read_f64s(&mut r, n)?);
        }
        let mut v = Vec::with_capacity(n_params);
        for &n in &sizes {
            v.push(read_f64s(&mut r, n)?);
        }
        Some(OptState { m, v })
    } else {
        None
    };

    Ok(Checkpoint {
        config_json,
        meta,
        params,
        opt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bfc");

        let mut params = ParamStore::new();
        params.insert(
            "w1",
            Tensor::from_vec(2, 3, vec![0.1, -0.2, 1.0 / 3.0, f64::MIN_POSITIVE, 1e300, -0.0])
                .unwrap(),
        );
        params.insert("b1", Tensor::row_vector(vec![2.0f64.sqrt()]));

        let ckpt = Checkpoint {
            config_json: r#"{"m":32}"#.to_string(),
            meta: CheckpointMeta {
                epochs_done: Some(7),
                adam_step: Some(423),
            },
            params,
            opt: Some(OptState {
                m: vec![vec![0.5; 6], vec![0.25]],
                v: vec![vec![0.125; 6], vec![1e-9]],
            }),
        };
        save(&path, &ckpt).unwrap();
        let loaded = load(&path).unwrap();

        assert_eq!(loaded.config_json, ckpt.config_json);
        assert_eq!(loaded.meta, ckpt.meta);
        for ((na, ta), (nb, tb)) in loaded.params.iter().zip(ckpt.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let bits_a: Vec<u64> = ta.values().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.values().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(loaded.opt, ckpt.opt);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bfc");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load(&path).is_err());
    }
}
