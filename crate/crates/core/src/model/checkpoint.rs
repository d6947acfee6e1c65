//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `TIPSEGCK`, a little-endian `u32` format
//! version, a little-endian `u32` header length, a JSON header, then every
//! named array as little-endian `f32` values in header order. The header
//! carries the model spec, array names and shapes, and a SHA-256 digest of
//! the array payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::tensor::Parameterized;

pub const MAGIC: &[u8; 8] = b"TIPSEGCK";
pub const FORMAT_VERSION: u32 = 1;

/// What a checkpoint file stands for. The two stub kinds carry no weights
/// and exist to exercise the evaluation path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Model,
    /// Returns the ground-truth mask.
    Oracle,
    /// Predicts background everywhere.
    Background,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    kind: CheckpointKind,
    spec: Option<ModelSpec>,
    arrays: Vec<ArrayEntry>,
    sha256: String,
}

/// A decoded checkpoint.
pub enum Checkpoint {
    Model(Box<Model>),
    Oracle,
    Background,
}

impl Checkpoint {
    pub fn kind(&self) -> CheckpointKind {
        match self {
            Checkpoint::Model(_) => CheckpointKind::Model,
            Checkpoint::Oracle => CheckpointKind::Oracle,
            Checkpoint::Background => CheckpointKind::Background,
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn encode(header: &Header, payload: &[u8]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    out
}

/// Serializes all parameters and norm statistics of `model`.
pub fn checkpoint_bytes(model: &Model) -> Vec<u8> {
    let mut arrays = Vec::new();
    let mut payload = Vec::new();
    model.visit("", &mut |name, p| {
        arrays.push(ArrayEntry {
            name: name.to_string(),
            shape: p.shape.clone(),
        });
        for v in &p.value {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    });
    let header = Header {
        kind: CheckpointKind::Model,
        spec: Some(model.spec.clone()),
        arrays,
        sha256: hex(&Sha256::digest(&payload)),
    };
    encode(&header, &payload)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_weights(model: &Model, path: &Path) -> Result<()> {
    write(path, &checkpoint_bytes(model))
}

/// Writes a weightless oracle or background checkpoint.
pub fn save_stub(kind: CheckpointKind, path: &Path) -> Result<()> {
    if kind == CheckpointKind::Model {
        return Err(Error::Config("model checkpoints need weights".into()));
    }
    let header = Header {
        kind,
        spec: None,
        arrays: Vec::new(),
        sha256: hex(&Sha256::digest([])),
    };
    write(path, &encode(&header, &[]))
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

/// Decodes a checkpoint from memory.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    let payload = &bytes[header_end..];
    if hex(&Sha256::digest(payload)) != header.sha256 {
        return Err(corrupt("payload digest mismatch"));
    }
    match header.kind {
        CheckpointKind::Oracle => return Ok(Checkpoint::Oracle),
        CheckpointKind::Background => return Ok(Checkpoint::Background),
        CheckpointKind::Model => {}
    }
    let spec = header.spec.ok_or_else(|| corrupt("model checkpoint without spec"))?;
    let mut model = Model::build(&spec, 0).map_err(|e| corrupt(format!("stored spec is invalid: {e}")))?;

    let mut expected = Vec::new();
    model.visit("", &mut |name, p| {
        expected.push(ArrayEntry {
            name: name.to_string(),
            shape: p.shape.clone(),
        })
    });
    if expected != header.arrays {
        return Err(corrupt("array table does not match the stored spec"));
    }
    let total: usize = expected.iter().map(|a| a.shape.iter().product::<usize>()).sum();
    if payload.len() != total * 4 {
        return Err(corrupt(format!(
            "payload holds {} bytes, arrays need {}",
            payload.len(),
            total * 4
        )));
    }
    let mut offset = 0;
    model.visit_mut("", &mut |_, p| {
        for v in p.value.iter_mut() {
            *v = f32::from_le_bytes(payload[offset..offset + 4].try_into().expect("4 bytes"));
            offset += 4;
        }
    });
    Ok(Checkpoint::Model(Box::new(model)))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Missing(path.display().to_string()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a model checkpoint, optionally insisting on a particular spec.
pub fn load_weights(path: &Path, expected: Option<&ModelSpec>) -> Result<Model> {
    let model = match read_checkpoint(path)? {
        Checkpoint::Model(m) => *m,
        other => {
            return Err(Error::SpecMismatch(format!(
                "{} holds a {:?} stub, not model weights",
                path.display(),
                other.kind()
            )))
        }
    };
    if let Some(spec) = expected {
        if spec != &model.spec {
            return Err(Error::SpecMismatch(describe_mismatch(spec, &model.spec)));
        }
    }
    Ok(model)
}

fn describe_mismatch(want: &ModelSpec, got: &ModelSpec) -> String {
    if want.num_classes != got.num_classes {
        format!("expected {} classes, checkpoint has {}", want.num_classes, got.num_classes)
    } else if want.backbone != got.backbone {
        "backbone differs from the checkpoint".into()
    } else if want.decoder != got.decoder {
        "decoder differs from the checkpoint".into()
    } else {
        format!("expected input size {}, checkpoint has {}", want.input_size, got.input_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tiny() -> ModelSpec {
        ModelSpec::preset("resnext_tiny").unwrap()
    }

    #[test]
    fn round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = Model::build(&tiny(), 3).unwrap();
        model.visit_mut("", &mut |name, p| {
            if name.starts_with("head") {
                for (i, v) in p.value.iter_mut().enumerate() {
                    *v = (i % 5) as f32 * 0.1 - 0.2;
                }
            }
        });
        // move the norm statistics away from their initial values
        let s = model.spec.input_size;
        let x = Tensor::from_vec([2, 3, s, s], (0..2 * 3 * s * s).map(|i| (i % 13) as f32 / 13.0).collect()).unwrap();
        model.forward_train(x.clone()).unwrap();
        let path = dir.path().join("ckpt");
        save_weights(&model, &path).unwrap();
        let loaded = load_weights(&path, Some(&tiny())).unwrap();
        assert_eq!(model.forward(&x).unwrap(), loaded.forward(&x).unwrap());
        assert_eq!(checkpoint_bytes(&model), checkpoint_bytes(&loaded));
    }

    #[test]
    fn spec_mismatch_and_corruption_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::build(&tiny(), 0).unwrap();
        let path = dir.path().join("ckpt");
        save_weights(&model, &path).unwrap();
        let mut two = tiny();
        two.num_classes = 2;
        assert!(matches!(load_weights(&path, Some(&two)), Err(Error::SpecMismatch(_))));

        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(decode_checkpoint(&bytes[..100]), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(decode_checkpoint(b"not a checkpoint"), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(
            read_checkpoint(&dir.path().join("absent")),
            Err(Error::Missing(_))
        ));
    }

    #[test]
    fn stubs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("oracle");
        save_stub(CheckpointKind::Oracle, &path).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap().kind(), CheckpointKind::Oracle);
        assert!(load_weights(&path, None).is_err());
    }

    #[test]
    fn payload_is_little_endian() {
        let model = Model::build(&tiny(), 1).unwrap();
        let bytes = checkpoint_bytes(&model);
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let mut first = None;
        model.visit("", &mut |_, p| {
            if first.is_none() {
                first = Some(p.value[0]);
            }
        });
        let at = 16 + header_len;
        assert_eq!(&bytes[at..at + 4], &first.unwrap().to_le_bytes());
    }
}
