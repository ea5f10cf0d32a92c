use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{CorpusError, FeatureSequence, QuerySpec};
use crate::numkernel::Matrix;
use crate::rng::substream;

const PLACEMENT_TRIES: usize = 10_000;

/// Generator settings. Background frames are isotropic Gaussian with scale
/// `noise`; each query owns a centroid of norm √D and its event frames are
/// the centroid plus Gaussian noise of scale `1/snr` per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub videos: usize,
    pub duration_secs: f64,
    pub fps: f64,
    pub dim: usize,
    pub event_secs_min: f64,
    pub event_secs_max: f64,
    pub snr: f64,
    pub noise: f64,
    pub queries_per_video: usize,
    pub words_per_query: usize,
    pub word_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            videos: 10,
            duration_secs: 3600.0,
            fps: 1.0,
            dim: 32,
            event_secs_min: 4.0,
            event_secs_max: 8.0,
            snr: 5.0,
            noise: 1.0,
            queries_per_video: 5,
            words_per_query: 4,
            word_noise: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn frames(&self) -> usize {
        (self.duration_secs * self.fps).round() as usize
    }

    fn event_frames(&self) -> (usize, usize) {
        ((self.event_secs_min * self.fps).ceil() as usize, (self.event_secs_max * self.fps).floor() as usize)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::BadConfig(m.to_string()));
        if self.videos == 0 {
            return bad("at least one video is required");
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) || self.dim == 0 || self.frames() == 0 {
            return bad("fps, dim and duration must be positive");
        }
        let (lo, hi) = self.event_frames();
        if lo == 0 || lo > hi {
            return bad("event length range holds no whole frame count");
        }
        if self.event_secs_max >= self.duration_secs {
            return bad("event length must be shorter than the video");
        }
        if self.queries_per_video * (hi + 1) > self.frames() {
            return bad("events do not fit into the video");
        }
        if self.words_per_query == 0 {
            return bad("queries need at least one word");
        }
        if !(self.snr > 0.0) || !(self.noise >= 0.0) || !(self.word_noise >= 0.0) {
            return bad("snr must be positive and noise scales non-negative");
        }
        Ok(())
    }
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

fn narrow(v: f64) -> f64 {
    v as f32 as f64
}

/// Deterministic corpus: each video draws from its own named sub-stream.
/// Events within a video are pairwise separated by at least one frame.
/// Every value is representable as a 32-bit real.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<(Vec<FeatureSequence>, Vec<QuerySpec>), CorpusError> {
    cfg.validate()?;
    let t = cfg.frames();
    let d = cfg.dim;
    let (lo, hi) = cfg.event_frames();
    let mut videos = Vec::with_capacity(cfg.videos);
    let mut queries = Vec::with_capacity(cfg.videos * cfg.queries_per_video);
    for v in 0..cfg.videos {
        let mut rng = substream(cfg.seed, &format!("corpus/video/{v}"));
        let video_id = format!("v{v:04}");
        let mut data: Vec<f64> = (0..t * d).map(|_| narrow(cfg.noise * gaussian(&mut rng))).collect();
        let mut placed: Vec<(usize, usize)> = Vec::new();
        for q in 0..cfg.queries_per_video {
            let len = rng.gen_range(lo..=hi);
            let mut start = None;
            for _ in 0..PLACEMENT_TRIES {
                let s = rng.gen_range(0..=t - len);
                if placed.iter().all(|&(a, b)| s + len < a || s > b) {
                    start = Some(s);
                    break;
                }
            }
            let s = start.ok_or_else(|| CorpusError::BadConfig("could not place disjoint events".into()))?;
            placed.push((s, s + len));

            let mut c: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
            let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let scale = (d as f64).sqrt() / norm;
            c.iter_mut().for_each(|x| *x = narrow(*x * scale));

            let sigma = 1.0 / cfg.snr;
            for f in s..s + len {
                for k in 0..d {
                    data[f * d + k] = narrow(c[k] + sigma * gaussian(&mut rng));
                }
            }

            let n = cfg.words_per_query;
            let mut words: Vec<f64> = (0..n * d).map(|_| cfg.word_noise * gaussian(&mut rng)).collect();
            for k in 0..d {
                let mean = (0..n).map(|r| words[r * d + k]).sum::<f64>() / n as f64;
                (0..n).for_each(|r| words[r * d + k] -= mean);
            }
            let emb: Vec<f64> = (0..n * d).map(|i| narrow(c[i % d] + words[i])).collect();
            queries.push(QuerySpec {
                query_id: format!("{video_id}_q{q}"),
                video_id: video_id.clone(),
                embedding: Matrix::new(n, d, emb)?,
                span: Some((s as f64 / cfg.fps, (s + len) as f64 / cfg.fps)),
            });
        }
        videos.push(FeatureSequence::new(video_id, cfg.fps, Matrix::new(t, d, data)?)?);
    }
    Ok((videos, queries))
}
