//! Binary checkpoint format.
//!
//! Layout (all integers unsigned 32-bit little-endian):
//!   magic "COIP" | version | spec_json_len | spec JSON bytes |
//!   record_count | records
//! Each record: name_len | UTF-8 name | rank | dims... | raw LE f32 data.
//! Round-trips are bit-exact.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::net::{NetSpec, Network};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"COIP";
const VERSION: u32 = 1;

pub fn save(network: &Network, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_bytes(network, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(network: &Network, out: &mut Vec<u8>) -> Result<()> {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let spec_json = serde_json::to_vec(&network.spec)
        .map_err(|e| Error::Checkpoint(format!("spec serialization failed: {e}")))?;
    out.extend_from_slice(&(spec_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&spec_json);

    let records: Vec<(String, &Tensor<f32>)> = network
        .layers
        .iter()
        .flat_map(|l| {
            std::iter::once((format!("{}.weight", l.name), &l.weight)).chain(
                l.bias
                    .as_ref()
                    .map(|b| (format!("{}.bias", l.name), b)),
            )
        })
        .collect();
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Network> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    read_bytes(&bytes)
}

pub fn read_bytes(bytes: &[u8]) -> Result<Network> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a COIP checkpoint".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let spec_len = cur.u32()? as usize;
    let spec: NetSpec = serde_json::from_slice(cur.take(spec_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad embedded spec: {e}")))?;
    // the spec determines layer names and shapes; records fill the values
    let mut network = Network::build(spec, 0)?;
    let count = cur.u32()? as usize;
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| Error::Checkpoint(format!("bad parameter name: {e}")))?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(n * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let (layer_name, is_bias) = match name.strip_suffix(".weight") {
            Some(base) => (base.to_string(), false),
            None => match name.strip_suffix(".bias") {
                Some(base) => (base.to_string(), true),
                None => {
                    return Err(Error::Checkpoint(format!(
                        "record '{name}' is neither a weight nor a bias"
                    )))
                }
            },
        };
        let layer = network
            .layer_mut(&layer_name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown layer '{layer_name}'")))?;
        let target = if is_bias {
            layer
                .bias
                .as_mut()
                .ok_or_else(|| Error::Checkpoint(format!("layer '{layer_name}' has no bias")))?
        } else {
            &mut layer.weight
        };
        if target.shape != shape {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for '{name}': checkpoint {shape:?}, spec {:?}",
                target.shape
            )));
        }
        target.data = data;
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last record".into()));
    }
    Ok(network)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
