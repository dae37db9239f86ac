//! Checkpoint container: a versioned named-array archive.
//!
//! Layout: 8-byte magic `CRSEGCK1`, a little-endian u64 header length, a
//! JSON header (version, seed, config echo, array index), then the raw
//! array payloads as little-endian f32 in index order. Parameters round-trip
//! bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_crseg, CrSeg, CrSegConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CRSEGCK1";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    seed: u64,
    config: CrSegConfig,
    arrays: Vec<ArrayEntry>,
}

pub fn save_checkpoint(model: &CrSeg, path: &Path) -> Result<()> {
    let named = model.params.named_arrays();
    let header = Header {
        version: VERSION,
        seed: model.seed(),
        config: model.config().clone(),
        arrays: named
            .iter()
            .map(|(name, shape, data)| ArrayEntry {
                name: name.clone(),
                shape: shape.clone(),
                len: data.len(),
            })
            .collect(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::format(path, format!("header: {e}")))?;

    let payload_len: usize = named.iter().map(|(_, _, d)| d.len() * 4).sum();
    let mut bytes = Vec::with_capacity(16 + header_json.len() + payload_len);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for (_, _, data) in &named {
        for v in *data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<CrSeg> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a checkpoint file (bad magic)"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16 + header_len;
    if bytes.len() < payload_start {
        return Err(Error::format(path, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| Error::format(path, format!("header: {e}")))?;
    if header.version != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {}", header.version),
        ));
    }

    let mut model = build_crseg(&header.config, header.seed)?;
    let mut offset = payload_start;
    let mut named_mut = model.params.named_arrays_mut();
    if named_mut.len() != header.arrays.len() {
        return Err(Error::format(
            path,
            format!(
                "array count mismatch: checkpoint has {}, model wants {}",
                header.arrays.len(),
                named_mut.len()
            ),
        ));
    }
    for (entry, (name, shape, data)) in header.arrays.iter().zip(named_mut.iter_mut()) {
        if &entry.name != name {
            return Err(Error::format(
                path,
                format!("array order mismatch: '{}' vs '{}'", entry.name, name),
            ));
        }
        if &entry.shape != shape || entry.len != data.len() {
            return Err(Error::format(
                path,
                format!("array '{}' shape mismatch", entry.name),
            ));
        }
        let end = offset + entry.len * 4;
        if bytes.len() < end {
            return Err(Error::format(path, "truncated payload"));
        }
        for (i, v) in data.iter_mut().enumerate() {
            let at = offset + i * 4;
            *v = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        }
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    Ok(model)
}

impl super::ParamSet {
    /// Canonical (name, shape, data) triples with mutable payloads, in the
    /// same order as [`super::ParamSet::named_arrays`].
    pub(crate) fn named_arrays_mut(&mut self) -> Vec<(String, Vec<usize>, &mut [f32])> {
        fn push<'a>(
            out: &mut Vec<(String, Vec<usize>, &'a mut [f32])>,
            name: String,
            conv: &'a mut super::layers::Conv,
        ) {
            let w_shape = conv.w.shape().to_vec();
            let b_shape = conv.b.shape().to_vec();
            let super::layers::Conv { w, b } = conv;
            out.push((name.clone() + ".weight", w_shape, w.as_slice_mut().unwrap()));
            out.push((name + ".bias", b_shape, b.as_slice_mut().unwrap()));
        }
        let mut out: Vec<(String, Vec<usize>, &mut [f32])> = Vec::new();
        for (m, s) in self.stages.iter_mut().enumerate() {
            for (i, conv) in s.convs.iter_mut().enumerate() {
                push(&mut out, format!("stage{}.conv{}", m + 1, i + 1), conv);
            }
            push(&mut out, format!("stage{}.side", m + 1), &mut s.side);
            push(&mut out, format!("stage{}.proj1", m + 1), &mut s.proj_hidden);
            push(&mut out, format!("stage{}.proj2", m + 1), &mut s.proj_out);
        }
        push(&mut out, "fuse".into(), &mut self.fuse);
        out
    }
}
