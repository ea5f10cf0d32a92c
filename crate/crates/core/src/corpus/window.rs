use serde::{Deserialize, Serialize};

use super::{CorpusError, FeatureSequence};
use crate::numkernel::Matrix;

const TIME_EPS: f64 = 1e-9;

/// Sliding-window geometry in seconds plus frames sampled per window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub window_secs: f64,
    pub stride_secs: f64,
    pub frames_per_window: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { window_secs: 125.0, stride_secs: 25.0, frames_per_window: 250 }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let ok = self.window_secs.is_finite()
            && self.stride_secs > 0.0
            && self.stride_secs <= self.window_secs
            && self.frames_per_window >= 2;
        if ok {
            Ok(())
        } else {
            Err(CorpusError::BadConfig(format!("invalid window config {self:?}")))
        }
    }

    /// Seconds covered by one frame token.
    pub fn secs_per_token(&self) -> f64 {
        self.window_secs / self.frames_per_window as f64
    }
}

/// One sliding window with its sampled frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub index: usize,
    pub start: f64,
    pub frames: Matrix,
}

/// Window starts at 0, σ, 2σ, … while the window fits, plus one tail window
/// ending at the video end when the regular grid stops short of it.
pub fn make_windows(total_frames: usize, fps: f64, cfg: &WindowConfig) -> Result<Vec<(usize, f64)>, CorpusError> {
    cfg.validate()?;
    if !(fps > 0.0) {
        return Err(CorpusError::BadConfig(format!("fps must be positive, got {fps}")));
    }
    let duration = total_frames as f64 / fps;
    let mut starts = Vec::new();
    let mut k = 0usize;
    loop {
        let s = k as f64 * cfg.stride_secs;
        if s + cfg.window_secs > duration + TIME_EPS {
            break;
        }
        starts.push(s);
        k += 1;
    }
    match starts.last() {
        None => starts.push(0.0),
        Some(&last) if last + cfg.window_secs < duration - TIME_EPS => {
            starts.push((duration - cfg.window_secs).max(0.0));
        }
        Some(_) => {}
    }
    Ok(starts.into_iter().enumerate().collect())
}

/// `n_f` rows at frame indexes `round(start·fps) + round(j·L_w·fps/n_f)`,
/// clamped to the last frame.
pub fn sample_frames(seq: &FeatureSequence, start: f64, cfg: &WindowConfig) -> Result<Matrix, CorpusError> {
    cfg.validate()?;
    let base = (start * seq.fps).round();
    if !(base >= 0.0) || base as usize >= seq.len() {
        return Err(CorpusError::EmptyWindow { start });
    }
    let base = base as usize;
    let step = cfg.window_secs * seq.fps / cfg.frames_per_window as f64;
    let last = seq.len() - 1;
    let idx: Vec<usize> =
        (0..cfg.frames_per_window).map(|j| (base + (j as f64 * step).round() as usize).min(last)).collect();
    Ok(seq.frames.select_rows(&idx))
}

pub fn segments(seq: &FeatureSequence, cfg: &WindowConfig) -> Result<Vec<Segment>, CorpusError> {
    make_windows(seq.len(), seq.fps, cfg)?
        .into_iter()
        .map(|(index, start)| Ok(Segment { index, start, frames: sample_frames(seq, start, cfg)? }))
        .collect()
}
