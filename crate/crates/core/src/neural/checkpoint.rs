//! Binary checkpoints: magic, version, a JSON header, then each parameter
//! as name, shape and little-endian f64 payload.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NeuralError, ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"RLYNCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Architecture dimensions, e.g. `obs`, `hidden`.
    pub dims: BTreeMap<String, usize>,
    pub seed: u64,
    pub step: u64,
}

fn io(e: std::io::Error) -> NeuralError {
    NeuralError::Checkpoint(e.to_string())
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<(), NeuralError> {
    w.write_all(&v.to_le_bytes()).map_err(io)
}

fn get_u32(r: &mut impl Read) -> Result<u32, NeuralError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_checkpoint(w: &mut impl Write, header: &CheckpointHeader, ps: &ParamSet) -> Result<(), NeuralError> {
    w.write_all(MAGIC).map_err(io)?;
    put_u32(w, VERSION)?;
    let h = serde_json::to_vec(header).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
    put_u32(w, h.len() as u32)?;
    w.write_all(&h).map_err(io)?;
    put_u32(w, ps.len() as u32)?;
    for (name, t) in ps.iter() {
        put_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        put_u32(w, t.rows as u32)?;
        put_u32(w, t.cols as u32)?;
        for v in &t.data {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<(CheckpointHeader, ParamSet), NeuralError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(NeuralError::Checkpoint("bad magic".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(NeuralError::Checkpoint(format!("unsupported version {version}")));
    }
    let hl = get_u32(r)? as usize;
    let mut hb = vec![0u8; hl];
    r.read_exact(&mut hb).map_err(io)?;
    let header: CheckpointHeader = serde_json::from_slice(&hb).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
    let n = get_u32(r)?;
    let mut ps = ParamSet::new();
    for _ in 0..n {
        let nl = get_u32(r)? as usize;
        let mut nb = vec![0u8; nl];
        r.read_exact(&mut nb).map_err(io)?;
        let name = String::from_utf8(nb).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
        let rows = get_u32(r)? as usize;
        let cols = get_u32(r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut b = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut b).map_err(io)?;
            data.push(f64::from_le_bytes(b));
        }
        ps.insert(&name, Tensor { rows, cols, data })?;
    }
    Ok((header, ps))
}

pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, ps: &ParamSet) -> Result<(), NeuralError> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, header, ps)?;
    std::fs::write(path, buf).map_err(io)
}

/// Loads a checkpoint and checks it against the expected architecture.
pub fn load_checkpoint(path: &Path, expect: &ParamSet) -> Result<(CheckpointHeader, ParamSet), NeuralError> {
    let bytes = std::fs::read(path).map_err(io)?;
    let (h, ps) = read_checkpoint(&mut bytes.as_slice())?;
    let theirs: Vec<&str> = ps.names().collect();
    let ours: Vec<&str> = expect.names().collect();
    if theirs != ours {
        return Err(NeuralError::Checkpoint("parameter names differ".into()));
    }
    for name in ours {
        let (a, b) = (ps.value(name)?.shape(), expect.value(name)?.shape());
        if a != b {
            return Err(NeuralError::Checkpoint(format!("{name}: shape {a:?}, expected {b:?}")));
        }
    }
    Ok((h, ps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn ps(rows: usize) -> ParamSet {
        let mut r = rng::stream(1, "ck");
        let mut p = ParamSet::new();
        p.add_uniform("a.w", rows, 3, &mut r).unwrap();
        p.add_uniform("a.b", 1, 3, &mut r).unwrap();
        p
    }

    #[test]
    fn round_trip_is_bitwise() {
        let p = ps(4);
        let h = CheckpointHeader { dims: [("obs".to_string(), 4)].into(), seed: 9, step: 12 };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        save_checkpoint(&path, &h, &p).unwrap();
        let (h2, p2) = load_checkpoint(&path, &p).unwrap();
        assert_eq!(h2, h);
        assert_eq!(p2, p);
    }

    #[test]
    fn rejects_mismatch_and_garbage() {
        let h = CheckpointHeader { dims: BTreeMap::new(), seed: 0, step: 0 };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        save_checkpoint(&path, &h, &ps(4)).unwrap();
        assert!(load_checkpoint(&path, &ps(5)).is_err());
        std::fs::write(&path, b"nope").unwrap();
        assert!(load_checkpoint(&path, &ps(4)).is_err());
    }
}
