//! Single-file checkpoint format, readable from any language.
//!
//! Layout, all multi-byte values little-endian:
//!
//! ```text
//! bytes 0..8    magic b"MDUNETW1"
//! bytes 8..12   u32 header length L
//! bytes 12..12+L  UTF-8 JSON header:
//!                 { "config": <ModelConfig>,
//!                   "dtype": "f32-le",
//!                   "total": <scalar count>,
//!                   "params": [ {"name", "shape", "offset", "len"}, .. ] }
//! remainder     total * 4 bytes of IEEE-754 f32 weights, in offset order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, MultiDecoderNet};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"MDUNETW1";

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    dtype: String,
    total: usize,
    params: Vec<ParamEntry>,
}

pub fn save_checkpoint(path: impl AsRef<Path>, net: &MultiDecoderNet) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        config: net.config().clone(),
        dtype: "f32-le".into(),
        total: net.parameter_count(),
        params: net
            .param_specs()
            .iter()
            .map(|s| ParamEntry {
                name: s.name.clone(),
                shape: s.shape.clone(),
                offset: s.offset,
                len: s.len,
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header).expect("serializable header");
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())
        .map_err(io)?;
    w.write_all(&header_json).map_err(io)?;
    for &v in net.params() {
        w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MultiDecoderNet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::InvalidConfig(format!(
            "{} is not a model checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4).map_err(io)?;
    let hlen = u32::from_le_bytes(len4) as usize;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf).map_err(io)?;
    let header: Header = serde_json::from_slice(&hbuf).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    if header.dtype != "f32-le" {
        return Err(Error::InvalidConfig(format!(
            "unsupported checkpoint dtype `{}`",
            header.dtype
        )));
    }

    let mut net = MultiDecoderNet::build(&header.config, 0)?;
    if net.parameter_count() != header.total {
        return Err(Error::InvalidConfig(format!(
            "checkpoint declares {} scalars but the config builds {}",
            header.total,
            net.parameter_count()
        )));
    }
    let mut raw = vec![0u8; header.total * 4];
    r.read_exact(&mut raw).map_err(io)?;
    let params: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    net.set_params(params)?;
    Ok(net)
}
