//! Binary checkpoint format:
//!
//! ```text
//! "FCXS" | version: u32 LE | header_len: u64 LE | header: UTF-8 JSON | f32 LE data
//! ```
//!
//! The JSON header holds the [`ArchConfig`] and the ordered parameter
//! manifest (`name`, `shape`); the data section is every tensor flattened in
//! manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, Network};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FCXS";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Refuse headers larger than this; a corrupt length field would otherwise
/// trigger a huge allocation.
const MAX_HEADER_BYTES: u64 = 64 << 20;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ArchConfig,
    parameters: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn write_checkpoint<T: Real, W: Write>(net: &Network<T>, mut out: W) -> Result<()> {
    let header = Header {
        config: net.config().clone(),
        parameters: net
            .graph()
            .parameters()
            .iter()
            .map(|p| ManifestEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
    out.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    out.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    out.write_all(&json).map_err(io)?;
    for p in net.graph().parameters() {
        let mut buf = Vec::with_capacity(4 * p.value.len());
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
        out.write_all(&buf).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Network<f32>> {
    let io = |e: std::io::Error| Error::Checkpoint(format!("truncated checkpoint: {e}"));
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word).map_err(io)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len).map_err(io)?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER_BYTES {
        return Err(Error::Checkpoint(format!("header length {len} too large")));
    }
    let mut json = vec![0u8; len as usize];
    input.read_exact(&mut json).map_err(io)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;

    let mut params = Vec::with_capacity(header.parameters.len());
    for entry in header.parameters {
        let count: usize = entry.shape.iter().product();
        let mut raw = vec![0u8; 4 * count];
        input.read_exact(&mut raw).map_err(io)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(entry.shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        tensor.ensure_finite(&entry.name)?;
        params.push((entry.name, tensor));
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest).map_err(io)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after parameter data".into()));
    }
    Network::from_parameters(header.config, params)
}

pub fn save_checkpoint<T: Real>(net: &Network<T>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(net, BufWriter::new(file))
}

pub fn load_checkpoint(path: &Path) -> Result<Network<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, Head};

    fn net() -> Network<f32> {
        Network::new(ArchConfig::new(Architecture::Invertednet, 16, Head::Sigmoid).with_base_channels(4), 5).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let a = net();
        let mut bytes = Vec::new();
        write_checkpoint(&a, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"FCXS");
        let b = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(a.config(), b.config());
        for (p, q) in a.graph().parameters().iter().zip(b.graph().parameters()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value, q.value);
        }
        let mut again = Vec::new();
        write_checkpoint(&b, &mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn size_is_four_bytes_per_parameter_plus_header() {
        let a = net();
        let mut bytes = Vec::new();
        write_checkpoint(&a, &mut bytes).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 16 + header_len + 4 * a.parameter_count() as usize);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = Vec::new();
        write_checkpoint(&net(), &mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(Error::Checkpoint(_))));
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(read_checkpoint(truncated), Err(Error::Checkpoint(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(read_checkpoint(long.as_slice()).is_err());
        let mut version = bytes;
        version[4] = 9;
        assert!(read_checkpoint(version.as_slice()).is_err());
    }
}
