//! Checkpoints: a JSON manifest next to a raw little-endian f64 payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numkernel::{KernelError, Matrix, ParamStore};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "params.bin";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint version {0} unsupported")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("config hash mismatch: checkpoint {found}, run {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: u32,
    /// Completed stages, oldest first.
    pub stages: Vec<String>,
    pub seed: u64,
    pub config_hash: String,
    /// SHA-256 of the payload.
    pub model_hash: String,
    pub tensors: Vec<TensorInfo>,
}

impl CheckpointManifest {
    pub fn require_config(&self, expected: &str) -> Result<(), CheckpointError> {
        if self.config_hash == expected {
            Ok(())
        } else {
            Err(CheckpointError::ConfigMismatch { expected: expected.into(), found: self.config_hash.clone() })
        }
    }

    pub fn has_stage(&self, stage: &str) -> bool {
        self.stages.iter().any(|s| s == stage)
    }
}

/// Parameter values in registration order, 8 bytes each.
pub fn payload(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(store.scalar_count() * 8);
    for e in store.entries() {
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn model_hash(store: &ParamStore) -> String {
    sha256_hex(&payload(store))
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

pub fn save(store: &ParamStore, dir: &Path, stages: &[String], seed: u64, config_hash: &str) -> Result<CheckpointManifest, CheckpointError> {
    fs::create_dir_all(dir)?;
    let bytes = payload(store);
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        stages: stages.to_vec(),
        seed,
        config_hash: config_hash.to_string(),
        model_hash: sha256_hex(&bytes),
        tensors: store
            .entries()
            .iter()
            .map(|e| TensorInfo { name: e.name.clone(), rows: e.value.rows(), cols: e.value.cols() })
            .collect(),
    };
    write_atomic(&dir.join(PAYLOAD_FILE), &bytes)?;
    write_atomic(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest, CheckpointError> {
    let m: CheckpointManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if m.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(m.version));
    }
    Ok(m)
}

/// Rebuilds the parameter store; every tensor starts trainable with fresh
/// optimizer state.
pub fn load(dir: &Path) -> Result<(ParamStore, CheckpointManifest), CheckpointError> {
    let m = read_manifest(dir)?;
    let bytes = fs::read(dir.join(PAYLOAD_FILE))?;
    let expected: usize = m.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
    if bytes.len() != expected {
        return Err(CheckpointError::Corrupt(format!("payload has {} bytes, manifest implies {expected}", bytes.len())));
    }
    let hash = sha256_hex(&bytes);
    if hash != m.model_hash {
        return Err(CheckpointError::Corrupt(format!("payload hash {hash} differs from manifest {}", m.model_hash)));
    }
    let mut store = ParamStore::new();
    let mut at = 0;
    for t in &m.tensors {
        let n = t.rows * t.cols;
        let data = bytes[at..at + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        at += n * 8;
        store.insert(t.name.clone(), Matrix::new(t.rows, t.cols, data)?)?;
    }
    Ok((store, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        let mut rng = substream(3, "t");
        s.insert_normal("a", 3, 4, 1.0, &mut rng).unwrap();
        s.insert("b", Matrix::new(1, 2, vec![f64::MIN_POSITIVE, -0.0]).unwrap()).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = store();
        let m = save(&s, dir.path(), &["s1-dense".into()], 7, "abc").unwrap();
        let (back, m2) = load(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(payload(&back), payload(&s));
        assert_eq!(model_hash(&back), m.model_hash);
        assert_eq!(back.get("b").unwrap().data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn tampered_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save(&store(), dir.path(), &[], 0, "h").unwrap();
        let p = dir.path().join(PAYLOAD_FILE);
        let mut b = fs::read(&p).unwrap();
        b[3] ^= 1;
        fs::write(&p, &b).unwrap();
        assert!(matches!(load(dir.path()), Err(CheckpointError::Corrupt(_))));
        b.pop();
        fs::write(&p, &b).unwrap();
        assert!(matches!(load(dir.path()), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn config_hash_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let m = save(&store(), dir.path(), &[], 0, "h1").unwrap();
        assert!(m.require_config("h1").is_ok());
        assert!(matches!(m.require_config("h2"), Err(CheckpointError::ConfigMismatch { .. })));
    }
}
