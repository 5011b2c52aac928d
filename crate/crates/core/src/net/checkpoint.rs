//! Binary checkpoint: magic, format version, a JSON header with the network
//! config and tensor table, then little-endian f32 data.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NetConfig, UNet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SEMDCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: NetConfig,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A loaded network plus free-form metadata stored alongside it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub net: UNet,
    pub meta: serde_json::Value,
}

pub fn save_checkpoint(net: &UNet, meta: &serde_json::Value, path: &Path) -> Result<()> {
    let mut offset = 0;
    let tensors = net
        .params
        .names
        .iter()
        .zip(&net.params.shapes)
        .zip(&net.params.tensors)
        .map(|((name, shape), t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
            };
            offset += t.len();
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        config: net.config,
        meta: meta.clone(),
        tensors,
    })
    .map_err(|e| Error::format(path, e))?;
    let mut buf = Vec::with_capacity(24 + header.len() + 4 * offset);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for t in &net.params.tensors {
        for v in t {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = 20usize
        .checked_add(hlen)
        .filter(|end| *end <= bytes.len())
        .ok_or_else(|| Error::format(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..body]).map_err(|e| Error::format(path, e))?;
    let data = &bytes[body..];
    let mut net = UNet::new(header.config, 0)?;
    if header.tensors.len() != net.params.len() {
        return Err(Error::shape(format!(
            "checkpoint has {} tensors, config implies {}",
            header.tensors.len(),
            net.params.len()
        )));
    }
    for (i, entry) in header.tensors.iter().enumerate() {
        if entry.name != net.params.names[i] || entry.shape != net.params.shapes[i] {
            return Err(Error::shape(format!(
                "checkpoint tensor {} {:?} does not match expected {} {:?}",
                entry.name, entry.shape, net.params.names[i], net.params.shapes[i]
            )));
        }
        let n = net.params.tensors[i].len();
        let chunk = data
            .get(4 * entry.offset..4 * (entry.offset + n))
            .ok_or_else(|| Error::format(path, format!("data for {} is truncated", entry.name)))?;
        for (v, b) in net.params.tensors[i].iter_mut().zip(chunk.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
        }
    }
    Ok(Checkpoint { net, meta: header.meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Tensor;

    fn cfg() -> NetConfig {
        NetConfig {
            depth: 2,
            base_channels: 8,
            embed_dim: 4,
            ..NetConfig::default()
        }
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let net = UNet::new(cfg(), 11).unwrap();
        let path = dir.path().join("m.ckpt");
        let meta = serde_json::json!({"mode": "wbce"});
        save_checkpoint(&net, &meta, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.meta, meta);
        assert_eq!(back.net.params.tensors, net.params.tensors);
        let x = Tensor {
            channels: 1,
            height: 8,
            width: 8,
            data: (0..64).map(|i| (i as f32) / 64.0).collect(),
        };
        assert_eq!(net.forward_one(&x).unwrap(), back.net.forward_one(&x).unwrap());
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad");
        std::fs::write(&p, b"hello world, not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Format { .. })));
        let net = UNet::new(cfg(), 1).unwrap();
        save_checkpoint(&net, &serde_json::Value::Null, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_checkpoint(&p).is_err());
    }
}
