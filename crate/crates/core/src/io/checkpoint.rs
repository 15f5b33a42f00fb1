//! Checkpoint files.
//!
//! ```text
//! "HAUG"            4 bytes
//! version           u32 LE
//! config digest     32 bytes, SHA-256 of ModelConfig::describe()
//! entry count       u32 LE
//! entries           named tensors (haug_tensor::serialize layout)
//! crc32             u32 LE over every preceding byte
//! ```
//!
//! Model entries use their parameter names; optimizer velocity entries are
//! named `optim.velocity.<parameter>`.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use haug_tensor::serialize::{read_named, write_named};
use haug_tensor::Tensor;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamRole};

pub const MAGIC: &[u8; 4] = b"HAUG";
pub const VERSION: u32 = 1;
pub const VELOCITY_PREFIX: &str = "optim.velocity.";

pub fn config_digest(cfg: &ModelConfig) -> [u8; 32] {
    Sha256::digest(cfg.describe().as_bytes()).into()
}

/// Parsed contents of a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCheckpoint {
    pub digest: [u8; 32],
    pub entries: Vec<(String, Tensor)>,
}

impl RawCheckpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// `velocity`, when given, is aligned with `model.params`; buffer entries
/// are skipped.
pub fn encode_checkpoint(model: &Model, velocity: Option<&[Tensor]>) -> Result<Vec<u8>> {
    let mut entries: Vec<(String, &Tensor)> = model.params.iter().map(|(n, t, _)| (n.to_string(), t)).collect();
    if let Some(vel) = velocity {
        for (id, (name, _, role)) in model.params.iter().enumerate() {
            if role != ParamRole::Buffer {
                entries.push((format!("{VELOCITY_PREFIX}{name}"), &vel[id]));
            }
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&config_digest(&model.config));
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        write_named(&mut out, &name, t)?;
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<RawCheckpoint> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let short = || haug_tensor::TensorError::Format("checkpoint header is truncated".into());
    if bytes.len() < 4 + 4 + 32 + 4 + 4 {
        return Err(short().into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::VersionMismatch { found: version, expected: VERSION });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::CrcMismatch { stored, computed });
    }
    let digest: [u8; 32] = body[8..40].try_into().expect("32 bytes");
    let count = u32::from_le_bytes(body[40..44].try_into().expect("4 bytes")) as usize;
    let mut cursor = Cursor::new(&body[44..]);
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        entries.push(read_named(&mut cursor)?);
    }
    if cursor.position() as usize != body.len() - 44 {
        return Err(haug_tensor::TensorError::Format("trailing bytes after the last entry".into()).into());
    }
    Ok(RawCheckpoint { digest, entries })
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, velocity: Option<&[Tensor]>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, velocity)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Copies entries into `model` (and `velocity`, if given). Shapes are
/// checked before the config digest so an architecture mismatch names the
/// first offending parameter.
pub fn restore(raw: &RawCheckpoint, model: &mut Model, velocity: Option<&mut Vec<Tensor>>) -> Result<()> {
    let find = |name: &str, expected: &[usize]| -> Result<Tensor> {
        let t = raw.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if t.shape() != expected {
            return Err(Error::ParamShape {
                name: name.to_string(),
                expected: expected.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        Ok(t.clone())
    };
    let mut params = Vec::with_capacity(model.params.len());
    for (name, t, _) in model.params.iter() {
        params.push(find(name, t.shape())?);
    }
    let mut vel = Vec::new();
    if velocity.is_some() {
        for (name, t, role) in model.params.iter() {
            vel.push(if role == ParamRole::Buffer {
                Tensor::zeros(t.shape())
            } else {
                find(&format!("{VELOCITY_PREFIX}{name}"), t.shape())?
            });
        }
    }
    if raw.digest != config_digest(&model.config) {
        return Err(Error::DigestMismatch);
    }
    for (id, t) in params.into_iter().enumerate() {
        *model.params.tensor_mut(id) = t;
    }
    if let Some(v) = velocity {
        *v = vel;
    }
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>, model: &mut Model, velocity: Option<&mut Vec<Tensor>>) -> Result<()> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    restore(&decode_checkpoint(&bytes)?, model, velocity)
}
