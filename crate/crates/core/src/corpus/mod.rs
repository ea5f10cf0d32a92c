//! Feature sequences, query specs, binary persistence, window segmentation
//! and the synthetic long-video generator.

mod concat;
mod io;
mod synth;
mod window;

pub use concat::{concat_for_retrieval, ConcatIndex};
pub use io::{read_features, read_queries, write_features, write_queries, FEATURE_MAGIC, FORMAT_VERSION, QUERY_MAGIC};
pub use synth::{synth_corpus, SynthConfig};
pub use window::{make_windows, sample_frames, segments, Segment, WindowConfig};

use serde::{Deserialize, Serialize};

use crate::numkernel::{KernelError, Matrix};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    VersionUnsupported(u16),
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("window starting at {start}s holds no frames")]
    EmptyWindow { start: f64 },
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("empty input")]
    EmptyInput,
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Frame features of one video, `T × D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    pub video_id: String,
    pub fps: f64,
    pub frames: Matrix,
}

impl FeatureSequence {
    pub fn new(video_id: impl Into<String>, fps: f64, frames: Matrix) -> Result<Self, CorpusError> {
        if !(fps.is_finite() && fps > 0.0) {
            return Err(CorpusError::BadConfig(format!("fps must be positive, got {fps}")));
        }
        Ok(Self { video_id: video_id.into(), fps, frames })
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.fps
    }
}

/// A query: pseudo-word embedding rows plus an optional ground-truth
/// interval in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub query_id: String,
    pub video_id: String,
    pub embedding: Matrix,
    pub span: Option<(f64, f64)>,
}

impl QuerySpec {
    pub fn words(&self) -> usize {
        self.embedding.rows()
    }
}
