//! Checkpoint container.
//!
//! Byte layout:
//!
//! ```text
//! offset  size          field
//! 0       4             magic "CSCK"
//! 4       4             format version, u32 little-endian (currently 1)
//! 8       8             header length H, u64 little-endian
//! 16      H             header JSON (kind, config, param_count, tensor directory)
//! 16+H    ...           payload: raw little-endian f64 tensor data
//! ```
//!
//! Directory offsets are relative to the payload start, must be sorted,
//! non-overlapping and cover the payload exactly; all of that is checked
//! before any tensor is decoded.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use coscale_core::model::{ModelBundle, ModelConfig};
use coscale_core::quantizer::{Codebook, DecoderWeights};
use coscale_core::tensor::Mat;

use crate::error::{CliError, CliResult};

pub const MAGIC: [u8; 4] = *b"CSCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len_bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub param_count: u64,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// The quantizer side of a run: codebook plus toy image decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct VqvaePack {
    pub codebook: Codebook,
    pub decoder: DecoderWeights,
}

impl VqvaePack {
    /// Reproducible test-style initialization: unit-Gaussian codebook rows
    /// with row 0 zeroed and a small random channel mix.
    pub fn random(vocab: usize, channels: usize, seed: u64) -> Self {
        Self {
            codebook: Codebook::random(vocab, channels, seed),
            decoder: DecoderWeights::random(channels, seed.wrapping_add(1)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VqConfig {
    pub vocab: usize,
    pub channels: usize,
}

fn encode(kind: &str, param_count: u64, config: serde_json::Value, tensors: &[(String, Vec<usize>, &[f64])]) -> Vec<u8> {
    let mut directory = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, shape, data) in tensors {
        let offset = payload.len() as u64;
        for v in *data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        directory.push(TensorEntry {
            name: name.clone(),
            dtype: "f64".into(),
            shape: shape.clone(),
            offset,
            len_bytes: (data.len() * 8) as u64,
        });
    }
    let header = Header {
        kind: kind.into(),
        param_count,
        config,
        tensors: directory,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header_json.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    out
}

fn corrupt(msg: impl Into<String>) -> CliError {
    CliError::Invariant(msg.into())
}

/// Parses and validates the container, returning the header and payload.
fn decode<'a>(bytes: &'a [u8], path: &Path) -> CliResult<(Header, &'a [u8])> {
    let ctx = path.display();
    if bytes.len() < 16 || bytes[..4] != MAGIC {
        return Err(corrupt(format!("{ctx}: not a checkpoint (bad magic)")));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(format!("{ctx}: unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(corrupt(format!("{ctx}: truncated header")));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| corrupt(format!("{ctx}: bad header JSON: {e}")))?;
    let payload = &bytes[16 + header_len..];

    // directory audit before any tensor is read
    let mut end = 0u64;
    for t in &header.tensors {
        if t.dtype != "f64" {
            return Err(corrupt(format!("{ctx}: tensor {} has dtype {}", t.name, t.dtype)));
        }
        let count: usize = t.shape.iter().product();
        if t.len_bytes != (count * 8) as u64 {
            return Err(corrupt(format!(
                "{ctx}: tensor {} length {} disagrees with shape {:?}",
                t.name, t.len_bytes, t.shape
            )));
        }
        if t.offset < end {
            return Err(corrupt(format!(
                "{ctx}: tensor {} overlaps the previous entry",
                t.name
            )));
        }
        end = t
            .offset
            .checked_add(t.len_bytes)
            .ok_or_else(|| corrupt(format!("{ctx}: tensor {} offset overflow", t.name)))?;
    }
    if end != payload.len() as u64 {
        return Err(corrupt(format!(
            "{ctx}: directory covers {end} bytes, payload has {}",
            payload.len()
        )));
    }
    Ok((header, payload))
}

fn tensor_data(payload: &[u8], entry: &TensorEntry) -> Vec<f64> {
    payload[entry.offset as usize..(entry.offset + entry.len_bytes) as usize]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    if !path.exists() {
        return Err(CliError::Missing(path.display().to_string()));
    }
    Ok(fs::read(path)?)
}

pub fn save_model(path: &Path, bundle: &ModelBundle) -> CliResult<()> {
    let config = serde_json::to_value(&bundle.config).expect("config serializes");
    let bytes = encode(
        "model",
        bundle.config.param_count(),
        config,
        &bundle.tensors(),
    );
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_model(path: &Path) -> CliResult<ModelBundle> {
    let bytes = read_file(path)?;
    let (header, payload) = decode(&bytes, path)?;
    if header.kind != "model" {
        return Err(corrupt(format!(
            "{}: expected a model checkpoint, found kind {}",
            path.display(),
            header.kind
        )));
    }
    let config: ModelConfig = serde_json::from_value(header.config.clone())
        .map_err(|e| corrupt(format!("{}: bad model config: {e}", path.display())))?;
    let tensors: HashMap<String, Vec<f64>> = header
        .tensors
        .iter()
        .map(|t| (t.name.clone(), tensor_data(payload, t)))
        .collect();
    Ok(ModelBundle::from_tensors(config, tensors)?)
}

pub fn save_vqvae(path: &Path, pack: &VqvaePack) -> CliResult<()> {
    let cfg = VqConfig {
        vocab: pack.codebook.vocab(),
        channels: pack.codebook.channels(),
    };
    let bias = pack.decoder.bias.to_vec();
    let tensors: Vec<(String, Vec<usize>, &[f64])> = vec![
        (
            "codebook.vectors".into(),
            vec![cfg.vocab, cfg.channels],
            pack.codebook.vectors.data(),
        ),
        (
            "decoder.weight".into(),
            vec![cfg.channels, 3],
            pack.decoder.weight.data(),
        ),
        ("decoder.bias".into(), vec![3], bias.as_slice()),
    ];
    let param_count = tensors
        .iter()
        .map(|(_, shape, _)| shape.iter().product::<usize>() as u64)
        .sum();
    let bytes = encode(
        "vqvae",
        param_count,
        serde_json::to_value(&cfg).expect("config serializes"),
        &tensors,
    );
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_vqvae(path: &Path) -> CliResult<VqvaePack> {
    let bytes = read_file(path)?;
    let (header, payload) = decode(&bytes, path)?;
    if header.kind != "vqvae" {
        return Err(corrupt(format!(
            "{}: expected a vqvae checkpoint, found kind {}",
            path.display(),
            header.kind
        )));
    }
    let cfg: VqConfig = serde_json::from_value(header.config.clone())
        .map_err(|e| corrupt(format!("{}: bad vqvae config: {e}", path.display())))?;
    let mut by_name: HashMap<String, (Vec<usize>, Vec<f64>)> = header
        .tensors
        .iter()
        .map(|t| (t.name.clone(), (t.shape.clone(), tensor_data(payload, t))))
        .collect();
    let mut take = |name: &str, shape: &[usize]| -> CliResult<Vec<f64>> {
        let (s, data) = by_name
            .remove(name)
            .ok_or_else(|| corrupt(format!("{}: missing tensor {name}", path.display())))?;
        if s != shape {
            return Err(corrupt(format!(
                "{}: tensor {name} has shape {s:?}, expected {shape:?}",
                path.display()
            )));
        }
        Ok(data)
    };
    let vectors = take("codebook.vectors", &[cfg.vocab, cfg.channels])?;
    let weight = take("decoder.weight", &[cfg.channels, 3])?;
    let bias = take("decoder.bias", &[3])?;
    let codebook = Codebook::new(Mat::from_vec(cfg.vocab, cfg.channels, vectors)?)?;
    let decoder = DecoderWeights {
        weight: Mat::from_vec(cfg.channels, 3, weight)?,
        bias: [bias[0], bias[1], bias[2]],
    };
    Ok(VqvaePack { codebook, decoder })
}

/// Reads only the header (format audits, `param_count` checks).
pub fn read_header(path: &Path) -> CliResult<Header> {
    let bytes = read_file(path)?;
    let (header, _) = decode(&bytes, path)?;
    Ok(header)
}
