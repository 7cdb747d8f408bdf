//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "DBSFM01\n"                  8 bytes
//! header_len: u64              8 bytes
//! header: UTF-8 JSON           header_len bytes
//!     {"format_version": 1, "config": {..}, "tensors": [{"name", "shape", "offset"}]}
//! payload: f64 LE values       tensors in table order, offsets relative to payload start
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ParamStore, Tensor};
use super::ModelConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DBSFM01\n";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

fn format_err(e: impl std::fmt::Display) -> Error {
    Error::CheckpointFormat(e.to_string())
}

pub fn write_checkpoint<W: Write>(mut w: W, cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
    let mut offset = 0u64;
    let tensors = store
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.to_string(),
                shape: t.shape.clone(),
                offset,
            };
            offset += 8 * t.numel() as u64;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        tensors,
    })
    .map_err(format_err)?;

    let mut bytes = Vec::with_capacity(16 + header.len() + offset as usize);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for (_, t) in store.iter() {
        for v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&bytes).map_err(format_err)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ModelConfig, ParamStore)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::CheckpointFormat("file shorter than the magic bytes".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointFormat("bad magic bytes".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| Error::CheckpointFormat("truncated header length".into()))?;
    let len = u64::from_le_bytes(len);
    let mut header = vec![0u8; usize::try_from(len).map_err(format_err)?];
    r.read_exact(&mut header).map_err(|_| Error::CheckpointFormat("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&header).map_err(format_err)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::CheckpointFormat(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(format_err)?;

    let mut store = ParamStore::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let start = usize::try_from(e.offset).map_err(format_err)?;
        let end = start + 8 * n;
        let bytes = payload
            .get(start..end)
            .ok_or_else(|| Error::CheckpointFormat(format!("payload for `{}` out of range", e.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.insert(e.name, Tensor { shape: e.shape, data });
    }
    Ok((header.config, store))
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(&mut w, cfg, store)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParamStore)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{encoder_forward, init_params};
    use crate::tensor::Matrix;

    #[test]
    fn round_trip_gives_identical_forward() {
        let cfg = ModelConfig::default();
        let store = init_params(&cfg, 21).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &cfg, &store).unwrap();
        assert_eq!(&buf[..8], CHECKPOINT_MAGIC);
        let (cfg2, store2) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(store, store2);
        let x = Matrix::from_vec(15, 125, (0..15 * 125).map(|i| (i as f64).sqrt()).collect());
        let a = encoder_forward(&x, None, &store, &cfg).unwrap();
        let b = encoder_forward(&x, None, &store2, &cfg2).unwrap();
        assert_eq!(a.embeddings.data, b.embeddings.data);
    }

    #[test]
    fn corrupt_magic_rejected() {
        let cfg = ModelConfig::toy();
        let store = init_params(&cfg, 0).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &cfg, &store).unwrap();
        buf[3] = b'X';
        assert!(matches!(read_checkpoint(buf.as_slice()), Err(Error::CheckpointFormat(_))));
        assert!(matches!(read_checkpoint(&b"DBS"[..]), Err(Error::CheckpointFormat(_))));
    }

    #[test]
    fn truncated_payload_rejected() {
        let cfg = ModelConfig::toy();
        let store = init_params(&cfg, 0).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &cfg, &store).unwrap();
        buf.truncate(buf.len() - 4);
        assert!(matches!(read_checkpoint(buf.as_slice()), Err(Error::CheckpointFormat(_))));
    }
}
