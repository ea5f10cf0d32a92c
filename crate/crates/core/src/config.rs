//! Run configuration: every tunable in one TOML document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::AdapterConfig;
use crate::corpus::{FeatureSequence, QuerySpec, SynthConfig, WindowConfig};
use crate::decoder::DecoderConfig;
use crate::numkernel::OptimHyper;
use crate::recursion::HierarchyConfig;
use crate::trainer::{Stage, StagePlan};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("serialize: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlans {
    pub s1_dense: StagePlan,
    pub s1_adapter: StagePlan,
    pub s2_long: StagePlan,
    pub unified: StagePlan,
}

impl TrainPlans {
    pub fn get(&self, stage: Stage) -> &StagePlan {
        match stage {
            Stage::S1Dense => &self.s1_dense,
            Stage::S1Adapter => &self.s1_adapter,
            Stage::S2Long => &self.s2_long,
            Stage::Unified => &self.unified,
        }
    }
}

impl Default for TrainPlans {
    fn default() -> Self {
        let p = StagePlan::default();
        Self { s1_dense: p.clone(), s1_adapter: p.clone(), s2_long: p.clone(), unified: p }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub thetas: Vec<f64>,
    /// IoU thresholds that define a correct prediction for calibration.
    pub ece_thresholds: Vec<f64>,
    pub bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ks: vec![1, 5], thetas: vec![0.1, 0.3, 0.5, 0.7, 0.9], ece_thresholds: vec![0.1, 0.3, 0.5], bins: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    pub frames_per_video: usize,
    /// Videos per WHICH call.
    pub group: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { frames_per_video: 250, group: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { data_dir: "data".into(), out_dir: "out".into() }
    }
}

/// The root `seed` feeds every named sub-stream; nested `seed` keys are
/// overwritten by it. `paths` do not enter the config hash. The last
/// `test_videos` videos and their queries form the held-out split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub test_videos: usize,
    pub synth: SynthConfig,
    pub window: WindowConfig,
    pub adapter: AdapterConfig,
    pub decoder: DecoderConfig,
    pub hierarchy: HierarchyConfig,
    pub train: TrainPlans,
    pub eval: EvalConfig,
    pub retrieval: RetrievalConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            test_videos: 2,
            synth: SynthConfig::default(),
            window: WindowConfig::default(),
            adapter: AdapterConfig::default(),
            decoder: DecoderConfig::default(),
            hierarchy: HierarchyConfig::default(),
            train: TrainPlans::default(),
            eval: EvalConfig::default(),
            retrieval: RetrievalConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Desk-scale setup: one-hour videos at 1 fps, 32-second windows with a
    /// 16-second stride and one frame per second.
    pub fn toy() -> Self {
        let plan = |epochs: usize, lr: f64| StagePlan { epochs, hyper: OptimHyper { lr, ..OptimHyper::default() }, ..StagePlan::default() };
        Self {
            seed: 1,
            test_videos: 10,
            synth: SynthConfig {
                videos: 50,
                duration_secs: 3600.0,
                dim: 16,
                snr: 5.0,
                noise: 0.3,
                queries_per_video: 5,
                words_per_query: 2,
                ..SynthConfig::default()
            },
            window: WindowConfig { window_secs: 32.0, stride_secs: 16.0, frames_per_window: 32 },
            adapter: AdapterConfig { dim: 16, dec_dim: 32, ..AdapterConfig::default() },
            decoder: DecoderConfig { dec_dim: 32, capacity: 160, int_tokens: 128, ..DecoderConfig::default() },
            hierarchy: HierarchyConfig { group_sizes: vec![56, 8], keep: vec![3, 5], ..HierarchyConfig::default() },
            train: TrainPlans {
                s1_dense: plan(50, 6e-3),
                s1_adapter: plan(20, 6e-3),
                s2_long: plan(40, 6e-3),
                unified: plan(10, 3e-3),
            },
            eval: EvalConfig::default(),
            retrieval: RetrievalConfig { frames_per_video: 32, group: 20 },
            paths: Paths::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let c: RunConfig = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.synth.validate().map_err(|e| bad(&e))?;
        self.window.validate().map_err(|e| bad(&e))?;
        self.hierarchy.validate().map_err(|e| bad(&e))?;
        for s in Stage::ALL {
            self.train.get(s).validate().map_err(|e| bad(&e))?;
        }
        if self.test_videos >= self.synth.videos {
            return Err(ConfigError::Invalid(format!("{} test videos leave none of {} for training", self.test_videos, self.synth.videos)));
        }
        if self.synth.dim != self.adapter.dim {
            return Err(ConfigError::Invalid(format!("feature dim {} != adapter dim {}", self.synth.dim, self.adapter.dim)));
        }
        if self.adapter.dec_dim != self.decoder.dec_dim {
            return Err(ConfigError::Invalid("adapter and decoder widths differ".into()));
        }
        let ints = self.decoder.int_tokens;
        let need = (self.window.frames_per_window + 1).max(self.hierarchy.flat_frames + 1);
        if ints < need {
            return Err(ConfigError::Invalid(format!("{ints} integer tokens cannot express boundaries up to {}", need - 1)));
        }
        if self.hierarchy.group_sizes.iter().any(|&g| g > ints) || self.retrieval.group > ints {
            return Err(ConfigError::Invalid("group sizes exceed the integer tokens".into()));
        }
        if self.eval.bins == 0 || self.eval.ks.contains(&0) {
            return Err(ConfigError::Invalid("bins and k must be positive".into()));
        }
        if self.retrieval.frames_per_video < 2 || self.retrieval.group == 0 {
            return Err(ConfigError::Invalid("retrieval needs at least 2 frames per video and a positive group".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form, paths excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn synth_seeded(&self) -> SynthConfig {
        SynthConfig { seed: self.seed, ..self.synth.clone() }
    }

    /// Videos and queries of one split, in corpus order.
    pub fn split(&self, videos: &[FeatureSequence], queries: &[QuerySpec], split: Split) -> (Vec<FeatureSequence>, Vec<QuerySpec>) {
        let cut = videos.len().saturating_sub(self.test_videos);
        let range = match split {
            Split::Train => 0..cut,
            Split::Test => cut..videos.len(),
            Split::All => 0..videos.len(),
        };
        let vs: Vec<FeatureSequence> = videos[range].to_vec();
        let qs = queries.iter().filter(|q| vs.iter().any(|v| v.video_id == q.video_id)).cloned().collect();
        (vs, qs)
    }

    pub fn plan(&self, stage: Stage) -> StagePlan {
        StagePlan { seed: self.seed, ..self.train.get(stage).clone() }
    }
}
