//! Checkpoint files.
//!
//! Layout: the 8-byte magic `POSEKIT1`, a little-endian `u64` header length, a JSON header
//! holding the model config and the parameter manifest, then raw little-endian `f32`
//! parameter data. Manifest offsets are byte offsets into the data section.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"POSEKIT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    params: Vec<Entry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn write_checkpoint(model: &Model, w: &mut impl Write) -> Result<()> {
    let mut entries = Vec::new();
    let mut offset = 0;
    for p in model.params.params() {
        entries.push(Entry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
        });
        offset += 4 * p.value.len();
    }
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        params: entries,
    })?;
    let mut buf = Vec::with_capacity(16 + header.len() + offset);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for p in model.params.params() {
        for v in p.value.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)
        .map_err(|e| Error::Checkpoint(format!("write: {e}")))
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Model> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Checkpoint(format!("read: {e}")))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("missing POSEKIT1 magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize
        .checked_add(hlen)
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..data_start])
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let data = &bytes[data_start..];

    let mut model = Model::build_uninit(header.config)?;
    if header.params.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "{} parameters in file, architecture has {}",
            header.params.len(),
            model.params.len()
        )));
    }
    for e in &header.params {
        let id = model
            .params
            .id(&e.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", e.name)))?;
        let target = model.params.value_mut(id);
        if target.shape() != e.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{}: shape {:?} in file, {:?} expected",
                e.name,
                e.shape,
                target.shape()
            )));
        }
        let n = target.len();
        let chunk = data
            .get(e.offset..e.offset + 4 * n)
            .ok_or_else(|| Error::Checkpoint(format!("{}: data out of range", e.name)))?;
        for (v, b) in target.data_mut().iter_mut().zip(chunk.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64;
        }
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(model, &mut f)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn roundtrip_preserves_single_precision_model() {
        let cfg = ModelConfig::toy(4).with_hidden(16);
        let m = Model::build(cfg, 7).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.params.checksum(), m.params.checksum());
        let img = Tensor::full(&[3, 64, 48], 0.2);
        assert_eq!(back.forward(&img).unwrap(), m.forward(&img).unwrap());
    }

    #[test]
    fn rejects_corrupt_files() {
        assert!(read_checkpoint(&mut &b"NOTMAGIC\0\0\0\0\0\0\0\0"[..]).is_err());
        let m = Model::build(ModelConfig::toy(2).with_hidden(8), 1).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        buf.truncate(buf.len() - 4);
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }
}
