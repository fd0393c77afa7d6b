//! Weight files: a JSON header followed by little-endian `f32` tensors, or
//! a pure JSON variant for small models.
//!
//! Binary layout: an 8-byte little-endian header length, the UTF-8 JSON
//! header, then every tensor's values in row-major order at the byte
//! offset the header records (relative to the end of the header).

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::encoders::Vocab;
use crate::error::{Error, Result};
use crate::model::Model;

pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    model: ModelConfig,
    vocab: Vocab,
    #[serde(default)]
    beta: Option<f64>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct JsonTensor {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct JsonWeights {
    version: u32,
    model: ModelConfig,
    vocab: Vocab,
    #[serde(default)]
    beta: Option<f64>,
    tensors: Vec<JsonTensor>,
}

/// A trained model with the balance weight chosen for it, if any.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub beta: Option<f64>,
}

fn check_version(version: u32) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported weight format version {version}")));
    }
    Ok(())
}

pub fn to_bytes(model: &Model, beta: Option<f64>) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(model.store.len());
    let mut payload = Vec::with_capacity(model.store.num_scalars() * 4);
    for id in model.store.ids() {
        let value = model.store.get(id);
        let (r, c) = value.dim();
        tensors.push(TensorEntry { name: model.store.name(id).to_owned(), shape: [r, c], offset: payload.len() });
        for v in value.iter() {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let header = Header {
        version: FORMAT_VERSION,
        dtype: DTYPE.to_owned(),
        model: model.config.clone(),
        vocab: model.vocab.clone(),
        beta,
        tensors,
    };
    let head = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + head.len() + payload.len());
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let len_bytes: [u8; 8] = bytes.get(..8).and_then(|b| b.try_into().ok()).ok_or_else(|| Error::Format("truncated header length".into()))?;
    let head_len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| Error::Format("header length overflows".into()))?;
    let head_end = 8usize.checked_add(head_len).filter(|e| *e <= bytes.len()).ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[8..head_end])?;
    check_version(header.version)?;
    if header.dtype != DTYPE {
        return Err(Error::Format(format!("unsupported dtype {:?}", header.dtype)));
    }
    let payload = &bytes[head_end..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let count = t.shape[0] * t.shape[1];
        let end = t.offset.checked_add(count * 4).filter(|e| *e <= payload.len());
        let raw = &payload[t.offset..end.ok_or_else(|| Error::Format(format!("tensor {:?} runs past the payload", t.name)))?];
        let values: Vec<f64> =
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as f64).collect();
        let array = Array2::from_shape_vec((t.shape[0], t.shape[1]), values).map_err(|e| Error::Format(e.to_string()))?;
        tensors.push((t.name.clone(), array));
    }
    let model = Model::from_tensors(header.model, header.vocab, &tensors)?;
    Ok(Checkpoint { model, beta: header.beta })
}

pub fn to_json(model: &Model, beta: Option<f64>) -> Result<String> {
    let tensors = model
        .store
        .ids()
        .map(|id| {
            let value = model.store.get(id);
            let (r, c) = value.dim();
            JsonTensor { name: model.store.name(id).to_owned(), shape: [r, c], data: value.iter().copied().collect() }
        })
        .collect();
    let w = JsonWeights { version: FORMAT_VERSION, model: model.config.clone(), vocab: model.vocab.clone(), beta, tensors };
    Ok(serde_json::to_string(&w)?)
}

pub fn from_json(text: &str) -> Result<Checkpoint> {
    let w: JsonWeights = serde_json::from_str(text)?;
    check_version(w.version)?;
    let tensors = w
        .tensors
        .into_iter()
        .map(|t| {
            Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data)
                .map(|a| (t.name, a))
                .map_err(|e| Error::Format(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let model = Model::from_tensors(w.model, w.vocab, &tensors)?;
    Ok(Checkpoint { model, beta: w.beta })
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// Write `model` to `path`; a `.json` extension selects the JSON variant.
pub fn save(model: &Model, beta: Option<f64>, path: &Path) -> Result<()> {
    if is_json(path) {
        std::fs::write(path, to_json(model, beta)?)?;
    } else {
        std::fs::write(path, to_bytes(model, beta)?)?;
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    if is_json(path) {
        from_json(&std::fs::read_to_string(path)?)
    } else {
        from_bytes(&std::fs::read(path)?)
    }
}
