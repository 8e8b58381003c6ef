//! The "GNSC" weight container shared with the trainer.
//!
//! Layout, little-endian: magic `GNSC`, `u32` version, `u32` header length,
//! a UTF-8 JSON header, the f32 tensor payloads in manifest order, and a
//! `u64` FNV-1a checksum of the payload bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use super::spec::GeneratorSpec;
use super::weights::{manifest, GeneratorWeights};
use super::Generator;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"GNSC";
pub const VERSION: u32 = 1;
pub const GENERATOR_KIND: &str = "generator";

#[derive(Debug, Error)]
pub enum WeightFileError {
    #[error("bad magic: expected \"GNSC\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported weight file version {0} (expected {VERSION})")]
    Version(u32),
    #[error("truncated weight file: {0}")]
    Truncated(String),
    #[error("payload checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("header and payload are inconsistent: {0}")]
    Inconsistent(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Decoded header. Architecture fields sit at the top level next to the
/// bookkeeping fields and are collected into `spec`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    #[serde(default = "default_kind")]
    pub kind: String,
    #[serde(flatten)]
    pub spec: Map<String, Value>,
    pub tensors: Vec<TensorEntry>,
    pub calibrated: bool,
    pub creator: String,
}

fn default_kind() -> String {
    GENERATOR_KIND.into()
}

pub fn creator() -> String {
    format!("mosaic-engine {}", env!("CARGO_PKG_VERSION"))
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn spec_map<S: Serialize>(spec: &S) -> Map<String, Value> {
    match serde_json::to_value(spec) {
        Ok(Value::Object(map)) => map,
        _ => unreachable!("specs serialize to JSON objects"),
    }
}

/// Serializes any tensor list with its architecture description.
pub(crate) fn encode<S: Serialize>(
    kind: &str,
    spec: &S,
    entries: &[(String, Vec<usize>)],
    tensors: &[&[f32]],
    calibrated: bool,
) -> Vec<u8> {
    let header = Header {
        kind: kind.into(),
        spec: spec_map(spec),
        tensors: entries
            .iter()
            .map(|(name, shape)| TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
        calibrated,
        creator: creator(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let payload_len: usize = tensors.iter().map(|t| t.len() * 4).sum();
    let mut out = Vec::with_capacity(12 + json.len() + payload_len + 8);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let start = out.len();
    for t in tensors {
        for v in *t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = fnv1a(&out[start..]);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

/// Parses the fixed prefix and header; returns the header and the offset of
/// the payload.
pub fn read_header(bytes: &[u8]) -> std::result::Result<(Header, usize), WeightFileError> {
    if bytes.len() < 4 {
        return Err(WeightFileError::Truncated(format!(
            "{} bytes is shorter than the magic",
            bytes.len()
        )));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(WeightFileError::BadMagic(magic));
    }
    if bytes.len() < 12 {
        return Err(WeightFileError::Truncated("file ends inside the preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(WeightFileError::Version(version));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let end = 12 + header_len;
    if bytes.len() < end {
        return Err(WeightFileError::Truncated(format!(
            "header declares {header_len} bytes, {} available",
            bytes.len() - 12
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[12..end])
        .map_err(|e| WeightFileError::Header(e.to_string()))?;
    Ok((header, end))
}

/// Reads the payload described by `expected`, verifying the header's own
/// manifest, the length and the checksum.
pub(crate) fn read_payload(
    bytes: &[u8],
    header: &Header,
    offset: usize,
    expected: &[(String, Vec<usize>)],
) -> std::result::Result<Vec<Vec<f32>>, WeightFileError> {
    let counts: Vec<usize> = expected.iter().map(|(_, s)| s.iter().product()).collect();
    let payload_len = counts.iter().sum::<usize>() * 4;
    let available = bytes.len() - offset;
    if available < payload_len + 8 {
        return Err(WeightFileError::Truncated(format!(
            "architecture needs {payload_len} payload bytes plus checksum, {available} bytes remain"
        )));
    }
    if header.tensors.len() != expected.len() {
        return Err(WeightFileError::Inconsistent(format!(
            "header lists {} tensors, architecture has {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    for (entry, (name, shape)) in header.tensors.iter().zip(expected) {
        if &entry.name != name || &entry.shape != shape {
            return Err(WeightFileError::Inconsistent(format!(
                "header entry {} {:?} where {name} {shape:?} is expected",
                entry.name, entry.shape
            )));
        }
    }
    if available > payload_len + 8 {
        return Err(WeightFileError::Inconsistent(format!(
            "{} trailing bytes after the checksum",
            available - payload_len - 8
        )));
    }
    let payload = &bytes[offset..offset + payload_len];
    let stored = u64::from_le_bytes(bytes[offset + payload_len..].try_into().unwrap());
    let computed = fnv1a(payload);
    if stored != computed {
        return Err(WeightFileError::Checksum { stored, computed });
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    Ok(counts
        .iter()
        .map(|&n| floats.by_ref().take(n).collect())
        .collect())
}

pub(crate) fn parse_spec<S: for<'de> Deserialize<'de>>(
    header: &Header,
    kind: &str,
) -> std::result::Result<S, WeightFileError> {
    if header.kind != kind {
        return Err(WeightFileError::Header(format!(
            "file holds a {}, expected a {kind}",
            header.kind
        )));
    }
    serde_json::from_value(Value::Object(header.spec.clone()))
        .map_err(|e| WeightFileError::Header(format!("architecture fields: {e}")))
}

pub fn encode_generator(spec: &GeneratorSpec, weights: &GeneratorWeights) -> Vec<u8> {
    encode(
        GENERATOR_KIND,
        spec,
        &manifest(spec),
        &weights.tensors(),
        weights.calibrated,
    )
}

pub fn decode_generator(bytes: &[u8]) -> Result<(GeneratorSpec, GeneratorWeights)> {
    let (header, offset) = read_header(bytes)?;
    let spec: GeneratorSpec = parse_spec(&header, GENERATOR_KIND)?;
    spec.validate()
        .map_err(|e| WeightFileError::Header(e.to_string()))?;
    let tensors = read_payload(bytes, &header, offset, &manifest(&spec))?;
    let weights = GeneratorWeights::from_tensors(&spec, tensors, header.calibrated)?;
    Ok((spec, weights))
}

pub fn save_weights(path: &Path, spec: &GeneratorSpec, weights: &GeneratorWeights) -> Result<()> {
    fs::write(path, encode_generator(spec, weights)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<(GeneratorSpec, GeneratorWeights)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_generator(&bytes)
}

impl Generator {
    pub fn load(path: &Path) -> Result<Generator> {
        let (spec, weights) = load_weights(path)?;
        Generator::new(spec, weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_weights(path, self.spec(), self.weights())
    }
}

/// Summary of a file of any kind, with the payload verified.
#[derive(Clone, Debug, PartialEq)]
pub struct Inspection {
    pub header: Header,
    pub payload_bytes: usize,
    pub checksum: u64,
}

/// Validates framing, manifest and checksum without interpreting the
/// architecture beyond the header's own tensor list.
pub fn inspect(bytes: &[u8]) -> Result<Inspection> {
    let (header, offset) = read_header(bytes)?;
    let expected: Vec<(String, Vec<usize>)> = if header.kind == GENERATOR_KIND {
        let spec: GeneratorSpec = parse_spec(&header, GENERATOR_KIND)?;
        spec.validate()
            .map_err(|e| WeightFileError::Header(e.to_string()))?;
        manifest(&spec)
    } else {
        header
            .tensors
            .iter()
            .map(|t| (t.name.clone(), t.shape.clone()))
            .collect()
    };
    let payload = read_payload(bytes, &header, offset, &expected)?;
    let payload_bytes = payload.iter().map(|t| t.len() * 4).sum::<usize>();
    let checksum = fnv1a(&bytes[offset..offset + payload_bytes]);
    Ok(Inspection {
        header,
        payload_bytes,
        checksum,
    })
}
