//! Versioned binary checkpoint: magic, version, a JSON header carrying the
//! config and a shape manifest, then row-major little-endian `f64` blocks in
//! manifest order. Byte-identical across platforms for identical models.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MiniLvlm, ModelConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FSCP";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    image_block_from: Option<usize>,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize, PartialEq)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(model: &MiniLvlm, path: impl AsRef<Path>) -> Result<()> {
    let entries = model.weights().param_entries();
    let header = Header {
        config: *model.config(),
        image_block_from: model.image_block_from(),
        params: entries
            .iter()
            .map(|(name, t)| ParamEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("header encode: {e}")))?;

    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    out.write_all(&header_bytes)?;
    for (_, t) in entries {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MiniLvlm> {
    let mut reader = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let mut word = [0u8; 4];
    reader.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    reader.read_exact(&mut word)?;
    let header_len = u32::from_le_bytes(word) as usize;
    let mut header_bytes = vec![0u8; header_len];
    reader.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Format(format!("header decode: {e}")))?;
    header.config.validate()?;

    // Shape manifest must match what the config implies, entry for entry.
    let mut model = MiniLvlm::new(header.config)?;
    {
        let expected: Vec<ParamEntry> = model
            .weights()
            .param_entries()
            .iter()
            .map(|(name, t)| ParamEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect();
        if expected.len() != header.params.len()
            || expected.iter().zip(&header.params).any(|(a, b)| a != b)
        {
            return Err(Error::Format(
                "parameter manifest does not match the config".into(),
            ));
        }
    }

    let weights: &mut ModelWeights = model.weights_mut();
    for (name, tensor) in weights.param_entries_mut() {
        let mut data = vec![0.0f64; tensor.numel()];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            reader
                .read_exact(&mut buf)
                .map_err(|_| Error::Format(format!("truncated data for {name}")))?;
            *v = f64::from_le_bytes(buf);
        }
        *tensor = Tensor::new(tensor.shape().to_vec(), data)?;
    }
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after parameter data".into()));
    }
    model.set_image_block_from(header.image_block_from)?;
    Ok(model)
}
