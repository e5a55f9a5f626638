//! Self-describing binary checkpoint container.
//!
//! ```text
//! magic   8 bytes   "DSKDCKPT"
//! version u32 LE
//! hlen    u64 LE    length of the JSON header
//! header  hlen bytes
//! payload f32 LE values of every tensor, in header order
//! ```
//!
//! Tensors are listed in name order, so equal models produce equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{build_teacher, TeacherDescriptor};
use crate::config::TrainConfig;
use crate::decoders::StudentRole;
use crate::error::{Error, Result};
use crate::nn::TensorData;
use crate::scoring::Normalizer;
use crate::trainer::{log_digest, Checkpoint, EpochRecord};

pub const MAGIC: &[u8; 8] = b"DSKDCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    teacher: TeacherDescriptor,
    normalizer: Normalizer,
    log: Vec<EpochRecord>,
    log_digest: String,
    payload_sha256: String,
    tensors: Vec<TensorEntry>,
}

fn student_tensors(ckpt: &Checkpoint) -> Result<BTreeMap<String, TensorData>> {
    let mut all = BTreeMap::new();
    for role in [StudentRole::Local, StudentRole::Global] {
        if let Some(s) = ckpt.student(role) {
            all.extend(s.store().snapshot()?);
        }
    }
    Ok(all)
}

pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let tensors = student_tensors(ckpt)?;
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in &tensors {
        for v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape.clone(),
        });
    }
    let header = Header {
        config: ckpt.config.clone(),
        teacher: ckpt.teacher.descriptor(),
        normalizer: ckpt.normalizer.clone(),
        log: ckpt.log.clone(),
        log_digest: log_digest(&ckpt.log)?,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported checkpoint version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])
        .map_err(|e| bad(format!("malformed header: {e}")))?;
    let payload = &body[hlen..];
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(bad("tensor payload does not match its digest"));
    }
    if log_digest(&header.log)? != header.log_digest {
        return Err(bad("training log does not match its digest"));
    }

    let mut tensors = BTreeMap::new();
    let mut offset = 0usize;
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let end = offset + 4 * n;
        if end > payload.len() {
            return Err(bad(format!("payload too short for tensor {}", e.name)));
        }
        let data = payload[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(
            e.name.clone(),
            TensorData {
                shape: e.shape.clone(),
                data,
            },
        );
        offset = end;
    }
    if offset != payload.len() {
        return Err(bad("trailing bytes after the last tensor"));
    }

    let teacher = build_teacher(&header.teacher.config, header.teacher.seed)?;
    if teacher.descriptor() != header.teacher {
        return Err(bad("rebuilt teacher does not match the stored descriptor (weights changed?)"));
    }
    let mut ckpt = Checkpoint::with_teacher(&header.config, teacher)?;
    for role in [StudentRole::Local, StudentRole::Global] {
        if let Some(s) = ckpt.student(role) {
            let prefix = format!("{}.", role.name());
            let mine: BTreeMap<String, TensorData> = tensors
                .iter()
                .filter(|(k, _)| k.starts_with(&prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect();
            s.store().restore(&mine)?;
        }
    }
    let restored: usize = [StudentRole::Local, StudentRole::Global]
        .iter()
        .filter_map(|r| ckpt.student(*r))
        .map(|s| s.store().names().count())
        .sum();
    if restored != tensors.len() {
        return Err(bad("checkpoint holds tensors for a student its config does not select"));
    }
    ckpt.normalizer = header.normalizer;
    ckpt.log = header.log;
    Ok(ckpt)
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(ckpt)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Checkpoint;

    fn fresh() -> Checkpoint {
        Checkpoint::initialize(&TrainConfig::toy()).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let a = to_bytes(&fresh()).unwrap();
        let b = to_bytes(&from_bytes(&a).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn version_and_magic_are_checked() {
        let mut a = to_bytes(&fresh()).unwrap();
        a[8] = 9;
        assert!(matches!(from_bytes(&a), Err(Error::Checkpoint(m)) if m.contains("version")));
        a[0] = b'X';
        assert!(matches!(from_bytes(&a), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn corrupted_payload_is_detected() {
        let mut a = to_bytes(&fresh()).unwrap();
        let last = a.len() - 1;
        a[last] ^= 1;
        assert!(matches!(from_bytes(&a), Err(Error::Checkpoint(_))));
        assert!(matches!(from_bytes(&a[..a.len() - 4]), Err(Error::Checkpoint(_))));
    }
}
