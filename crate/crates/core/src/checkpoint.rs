//! Self-describing model checkpoints.
//!
//! Layout: the 8-byte magic `TSRMCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a UTF-8 JSON header, then
//! the raw little-endian parameter payload. The header records the model
//! config, element type, and every parameter's name, shape and byte offset
//! into the payload, plus free-form metadata.

use crate::error::{config_err, Result};
use crate::model::{ModelConfig, Tsrm};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"TSRMCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn native() -> Self {
        if std::mem::size_of::<Scalar>() == 8 {
            Dtype::F64
        } else {
            Dtype::F32
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub dtype: Dtype,
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// Serializes `model` with optional `metadata` into `out`.
pub fn write<W: Write>(mut out: W, model: &Tsrm, metadata: serde_json::Value) -> Result<()> {
    let dtype = Dtype::native();
    let mut params = Vec::with_capacity(model.params.len());
    let mut offset = 0;
    for (_, p) in model.params.iter() {
        params.push(ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), trainable: p.trainable, offset });
        offset += p.value.numel() * dtype.width();
    }
    let header = Header { format_version: FORMAT_VERSION, dtype, config: model.config.clone(), params, metadata };
    let json = serde_json::to_vec(&header).map_err(|e| config_err!("checkpoint header: {e}"))?;
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    let mut payload = Vec::with_capacity(offset);
    for (_, p) in model.params.iter() {
        for v in p.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&payload)?;
    Ok(())
}

pub fn save(path: &Path, model: &Tsrm, metadata: serde_json::Value) -> Result<()> {
    let mut buf = Vec::new();
    write(&mut buf, model, metadata)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Reads only the header.
pub fn read_header<R: Read>(mut input: R) -> Result<Header> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|_| config_err!("not a checkpoint: file too short"))?;
    if &magic != MAGIC {
        return Err(config_err!("not a checkpoint: bad magic bytes"));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(config_err!("unsupported checkpoint format version {version} (expected {FORMAT_VERSION})"));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    input.read_exact(&mut json).map_err(|_| config_err!("checkpoint header truncated"))?;
    serde_json::from_slice(&json).map_err(|e| config_err!("checkpoint header: {e}"))
}

/// Rebuilds the model and returns it with the header.
pub fn read<R: Read>(mut input: R) -> Result<(Tsrm, Header)> {
    let header = read_header(&mut input)?;
    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;
    let mut model = Tsrm::new(header.config.clone(), 0)?;
    if model.params.len() != header.params.len() {
        return Err(config_err!(
            "checkpoint lists {} parameters but its config builds {}",
            header.params.len(),
            model.params.len()
        ));
    }
    let width = header.dtype.width();
    for entry in &header.params {
        let id = model
            .params
            .find(&entry.name)
            .ok_or_else(|| config_err!("checkpoint parameter {} does not exist in the model", entry.name))?;
        let p = model.params.get_mut(id);
        if p.value.shape() != entry.shape.as_slice() {
            return Err(config_err!("parameter {}: checkpoint shape {:?}, model shape {:?}", entry.name, entry.shape, p.value.shape()));
        }
        let bytes = payload
            .get(entry.offset..entry.offset + p.value.numel() * width)
            .ok_or_else(|| config_err!("checkpoint payload truncated at parameter {}", entry.name))?;
        let data: Vec<Scalar> = match header.dtype {
            Dtype::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Scalar).collect(),
            Dtype::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Scalar).collect(),
        };
        p.value = Tensor::new(entry.shape.clone(), data)?;
        p.trainable = entry.trainable;
    }
    Ok((model, header))
}

pub fn load(path: &Path) -> Result<(Tsrm, Header)> {
    let file = std::fs::File::open(path).map_err(|e| config_err!("cannot open checkpoint {}: {e}", path.display()))?;
    read(std::io::BufReader::new(file))
}
