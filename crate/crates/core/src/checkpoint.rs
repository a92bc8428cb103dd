//! Versioned named-tensor checkpoint container.
//!
//! Layout: magic `ONSR`, a u32 format version, a u64 length-prefixed JSON
//! manifest (kind, counters, seed, tensor names and shapes in order, plus
//! free-form metadata), then the tensor payloads as little-endian `f64`
//! in manifest order.

use crate::error::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"ONSR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: String,
    epoch: usize,
    global_step: u64,
    rng_seed: u64,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

/// In-memory checkpoint contents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub epoch: usize,
    pub global_step: u64,
    pub rng_seed: u64,
    pub tensors: BTreeMap<String, ArrayD<f64>>,
    /// Structured extras: network specs, config echo, loss history.
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(kind: &str, epoch: usize, global_step: u64, rng_seed: u64) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            epoch,
            global_step,
            rng_seed,
            tensors: BTreeMap::new(),
            meta: serde_json::Value::Null,
        }
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: ckpt.kind.clone(),
        epoch: ckpt.epoch,
        global_step: ckpt.global_step,
        rng_seed: ckpt.rng_seed,
        tensors: ckpt
            .tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta: ckpt.meta.clone(),
    };
    let mjson = serde_json::to_vec(&manifest).expect("manifest serializes");
    let io_err = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION).map_err(io_err)?;
    w.write_u64::<LittleEndian>(mjson.len() as u64).map_err(io_err)?;
    w.write_all(&mjson).map_err(io_err)?;
    for t in ckpt.tensors.values() {
        for &v in t.as_slice().expect("standard layout") {
            w.write_f64::<LittleEndian>(v).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |reason: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let io_err = |e| Error::io(path, e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(bad("bad magic; not a checkpoint file"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io_err)?;
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {version} (expected {FORMAT_VERSION})")));
    }
    let mlen = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
    let mut mjson = vec![0u8; mlen];
    r.read_exact(&mut mjson).map_err(io_err)?;
    let manifest: Manifest =
        serde_json::from_slice(&mjson).map_err(|e| bad(&format!("manifest parse failure: {e}")))?;

    let mut tensors = BTreeMap::new();
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let mut data = vec![0.0f64; n];
        r.read_f64_into::<LittleEndian>(&mut data).map_err(io_err)?;
        let t = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
            .map_err(|_| bad(&format!("tensor {} shape mismatch", entry.name)))?;
        if tensors.insert(entry.name.clone(), t).is_some() {
            return Err(bad(&format!("duplicate tensor {}", entry.name)));
        }
    }
    Ok(Checkpoint {
        kind: manifest.kind,
        epoch: manifest.epoch,
        global_step: manifest.global_step,
        rng_seed: manifest.rng_seed,
        tensors,
        meta: manifest.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let mut ck = Checkpoint::new("rae", 3, 77, 42);
        ck.tensors.insert(
            "a.w".into(),
            crate::rng::normal_tensor(&mut crate::rng::stream_rng(1, "t", 0), &[2, 3, 1]),
        );
        ck.tensors.insert(
            "b".into(),
            crate::rng::normal_tensor(&mut crate::rng::stream_rng(1, "t", 1), &[4]),
        );
        ck.meta = serde_json::json!({"note": "hello", "history": [[1, 0.5]]});
        save(&path, &ck).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.kind, "rae");
        assert_eq!(back.epoch, 3);
        assert_eq!(back.global_step, 77);
        assert_eq!(back.rng_seed, 42);
        assert_eq!(back.tensors, ck.tensors);
        assert_eq!(back.meta, ck.meta);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"XXXXnope").unwrap();
        assert!(load(&path).is_err());
    }
}
