//! Hierarchy controller: top-down and bottom-up recursive inference,
//! candidate selection, coordinate mapping and frame accounting.
//!
//! Decoding is abstracted behind [`Grounder`] so the same controller runs
//! the trained model and the ground-truth oracle.

mod model;
mod oracle;
mod retrieval;

pub use model::{ModelGrounder, ModelScope};
pub use oracle::{OracleGrounder, OracleScope};
pub use retrieval::{retrieve, RetrievalOutput};

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::calibrank::{rank_order, rank_topk, CalibError, RankKey};
use crate::corpus::{segments, CorpusError, FeatureSequence, QuerySpec, Segment, WindowConfig};
use crate::decoder::{Answer, DecoderError, ParamSet};

#[derive(Debug, thiserror::Error)]
pub enum RecursionError {
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error("token {index} outside 0..={bound}")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("confidence chain is empty")]
    EmptyChain,
    #[error("invalid hierarchy configuration: {0}")]
    BadConfig(String),
}

impl From<crate::numkernel::KernelError> for RecursionError {
    fn from(e: crate::numkernel::KernelError) -> Self {
        RecursionError::Decoder(DecoderError::Kernel(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Default,
    Unified,
    Inverse,
    UnifiedInverse,
}

impl Variant {
    pub fn is_inverse(self) -> bool {
        matches!(self, Variant::Inverse | Variant::UnifiedInverse)
    }

    pub fn upper_set(self) -> ParamSet {
        match self {
            Variant::Unified | Variant::UnifiedInverse => ParamSet::Bottom,
            _ => ParamSet::Upper,
        }
    }

    pub const ALL: [Variant; 4] = [Variant::Default, Variant::Unified, Variant::Inverse, Variant::UnifiedInverse];
}

/// `levels = 0` is the flat baseline: one dense call over frames sampled
/// across the whole video. `group_sizes` and `keep` are listed from the top
/// level down; missing entries repeat the last one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierarchyConfig {
    pub levels: usize,
    pub group_sizes: Vec<usize>,
    pub keep: Vec<usize>,
    pub variant: Variant,
    /// Segments added on each side of an upper-level range before it is
    /// passed down.
    pub margin: usize,
    /// Predictions returned per query.
    pub top_k: usize,
    /// Frames sampled across the whole video by the flat baseline.
    pub flat_frames: usize,
    pub max_answer_len: usize,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            group_sizes: vec![100, 33],
            keep: vec![5, 10],
            variant: Variant::Default,
            margin: 1,
            top_k: 10,
            flat_frames: 100,
            max_answer_len: 8,
        }
    }
}

impl HierarchyConfig {
    pub fn validate(&self) -> Result<(), RecursionError> {
        let bad = |m: &str| Err(RecursionError::BadConfig(m.into()));
        if self.group_sizes.is_empty() || self.group_sizes.contains(&0) {
            return bad("group sizes must be non-empty and positive");
        }
        if self.keep.is_empty() || self.keep.contains(&0) {
            return bad("candidate caps must be non-empty and positive");
        }
        if self.top_k == 0 || self.max_answer_len < 2 || self.flat_frames < 2 {
            return bad("top_k, max_answer_len and flat_frames must be positive");
        }
        Ok(())
    }

    /// Group size of `level` (2..=levels).
    pub fn group_size(&self, level: usize) -> usize {
        let i = self.levels - level;
        self.group_sizes[i.min(self.group_sizes.len() - 1)]
    }

    pub fn keep_at(&self, level: usize) -> usize {
        let i = self.levels - level;
        self.keep[i.min(self.keep.len() - 1)]
    }
}

/// A decoded answer with its confidence. `answer` is `None` when the token
/// sequence did not parse; such outcomes carry zero confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutcome {
    pub answer: Option<Answer>,
    pub entropies: Vec<f64>,
    pub confidence: f64,
}

/// Source of decoder answers for the controller.
pub trait Grounder: Sync {
    type Scope: Sync;

    /// Per-query state. `need_sparse` is set when upper levels will be used.
    fn scope(
        &self,
        video: &FeatureSequence,
        query: &QuerySpec,
        segments: &[Segment],
        window: &WindowConfig,
        need_sparse: bool,
    ) -> Result<Self::Scope, RecursionError>;

    /// GROUND over the frames of `[start, start + window)` with the bottom set.
    fn dense(&self, scope: &Self::Scope, video: &FeatureSequence, start: f64, window: &WindowConfig) -> Result<DecodeOutcome, RecursionError>;

    /// GROUND over the sparse tokens of `range` at an upper level.
    fn sparse(&self, scope: &Self::Scope, range: Range<usize>, set: ParamSet) -> Result<DecodeOutcome, RecursionError>;

    /// PRESENT over the sparse token of one segment with the bottom set.
    fn present(&self, scope: &Self::Scope, segment: usize) -> Result<DecodeOutcome, RecursionError>;

    /// WHICH over the sparse tokens of `range`.
    fn which(&self, scope: &Self::Scope, range: Range<usize>, set: ParamSet) -> Result<DecodeOutcome, RecursionError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRegion {
    pub level: usize,
    /// Inclusive segment index range.
    pub first: usize,
    pub last: usize,
    pub start: f64,
    pub end: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub video_id: String,
    pub start: f64,
    pub end: f64,
    pub confidence: f64,
    pub segment: usize,
    pub provenance: Vec<CandidateRegion>,
}

impl RankKey for Prediction {
    fn confidence(&self) -> f64 {
        self.confidence
    }
    fn video_id(&self) -> &str {
        &self.video_id
    }
    fn segment_index(&self) -> usize {
        self.segment
    }
    fn start(&self) -> f64 {
        self.start
    }
}

/// One decoder call of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub level: usize,
    pub base: usize,
    pub group: usize,
    pub answer: Option<Answer>,
    pub confidence: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub total_segments: usize,
    pub records: Vec<TraceRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferOutput {
    pub predictions: Vec<Prediction>,
    pub trace: RunTrace,
}

/// `start + token · L_w / n_f`. Tokens up to `n_f` are accepted because
/// boundary ends are exclusive.
pub fn map_local_global(segment_start: f64, token: usize, cfg: &WindowConfig) -> Result<f64, RecursionError> {
    if token > cfg.frames_per_window {
        return Err(RecursionError::IndexOutOfRange { index: token, bound: cfg.frames_per_window });
    }
    Ok(segment_start + token as f64 * cfg.secs_per_token())
}

/// Token whose span contains global second `t` (floor).
pub fn map_global_local(segment_start: f64, t: f64, cfg: &WindowConfig) -> usize {
    ((t - segment_start) / cfg.secs_per_token()).floor().max(0.0) as usize
}

/// Event interval clipped to a window, in tokens `[s, e)` rounded to the
/// nearest token boundary. `None` when less than one token overlaps.
pub fn clip_tokens(span: (f64, f64), window_start: f64, cfg: &WindowConfig) -> Option<(usize, usize)> {
    let spt = cfg.secs_per_token();
    let lo = span.0.max(window_start);
    let hi = span.1.min(window_start + cfg.window_secs);
    if hi <= lo {
        return None;
    }
    let s = ((lo - window_start) / spt).round() as usize;
    let e = (((hi - window_start) / spt).round() as usize).min(cfg.frames_per_window);
    (e > s).then_some((s, e))
}

/// Geometric mean of a confidence chain.
pub fn combine_confidence(chain: &[f64]) -> Result<f64, RecursionError> {
    if chain.is_empty() {
        return Err(RecursionError::EmptyChain);
    }
    if let Some(&c) = chain.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
        return Err(RecursionError::Calib(CalibError::InvalidDistribution(format!("confidence {c}"))));
    }
    Ok((chain.iter().map(|c| c.ln()).sum::<f64>() / chain.len() as f64).exp())
}

/// Fraction of segments decoded densely at level 1.
pub fn frames_accounting(trace: &RunTrace) -> f64 {
    if trace.total_segments == 0 {
        return 0.0;
    }
    let dense: BTreeSet<usize> = trace.records.iter().filter(|r| r.level == 1).map(|r| r.base).collect();
    dense.len() as f64 / trace.total_segments as f64
}

fn region(level: usize, first: usize, last: usize, segs: &[Segment], cfg: &WindowConfig, duration: f64, confidence: f64) -> CandidateRegion {
    CandidateRegion {
        level,
        first,
        last,
        start: segs[first].start,
        end: (segs[last].start + cfg.window_secs).min(duration),
        confidence,
    }
}

fn region_order(a: &CandidateRegion, b: &CandidateRegion) -> std::cmp::Ordering {
    b.confidence.total_cmp(&a.confidence).then(a.first.cmp(&b.first)).then(a.last.cmp(&b.last))
}

/// Scans `range` in consecutive calls of at most `group` tokens. Each
/// affirmative answer becomes a candidate over absolute segment indexes.
#[allow(clippy::too_many_arguments)]
pub fn scan_level<G: Grounder>(
    grounder: &G,
    scope: &G::Scope,
    level: usize,
    range: Range<usize>,
    group: usize,
    set: ParamSet,
    segs: &[Segment],
    cfg: &WindowConfig,
    duration: f64,
    trace: &mut RunTrace,
) -> Result<Vec<CandidateRegion>, RecursionError> {
    let mut out = Vec::new();
    let mut base = range.start;
    while base < range.end {
        let len = group.min(range.end - base);
        let o = grounder.sparse(scope, base..base + len, set)?;
        trace.records.push(TraceRecord { level, base, group: len, answer: o.answer, confidence: o.confidence });
        if let Some(Answer::Boundary(s, e)) = o.answer {
            if s < len {
                let e = e.min(len - 1);
                out.push(region(level, base + s, base + e, segs, cfg, duration, o.confidence));
            }
        }
        base += len;
    }
    Ok(out)
}

/// Global interval of a bottom-level boundary answer `(s, e)` in the window
/// starting at `seg_start`. `e = s` widens to one token; `None` when the
/// answer leaves the window or the video.
pub fn bottom_interval(seg_start: f64, s: usize, e: usize, cfg: &WindowConfig, duration: f64) -> Option<(f64, f64)> {
    let e = if e == s { s + 1 } else { e };
    if e > cfg.frames_per_window {
        return None;
    }
    let start = map_local_global(seg_start, s, cfg).ok()?;
    let end = map_local_global(seg_start, e, cfg).ok()?.min(duration);
    (start < end).then_some((start, end))
}

/// Dense decode of each distinct segment in `wanted`; affirmative answers
/// become predictions carrying `chain_of(segment)` as provenance.
#[allow(clippy::too_many_arguments)]
pub fn refine_bottom<G: Grounder>(
    grounder: &G,
    scope: &G::Scope,
    video: &FeatureSequence,
    wanted: &BTreeSet<usize>,
    segs: &[Segment],
    cfg: &WindowConfig,
    provenance: &dyn Fn(usize) -> Vec<CandidateRegion>,
    trace: &mut RunTrace,
) -> Result<Vec<Prediction>, RecursionError> {
    let duration = video.duration();
    let mut out = Vec::new();
    for &i in wanted {
        let seg = &segs[i];
        let o = grounder.dense(scope, video, seg.start, cfg)?;
        trace.records.push(TraceRecord { level: 1, base: i, group: 1, answer: o.answer, confidence: o.confidence });
        let Some(Answer::Boundary(s, e)) = o.answer else {
            if o.answer.is_none() {
                log::debug!("segment {i}: malformed answer dropped");
            }
            continue;
        };
        let Some((start, end)) = bottom_interval(seg.start, s, e, cfg, duration) else {
            continue;
        };
        out.push(Prediction {
            video_id: video.video_id.clone(),
            start,
            end,
            confidence: o.confidence,
            segment: i,
            provenance: provenance(i),
        });
    }
    Ok(out)
}

fn expand(first: usize, last: usize, margin: usize, n: usize) -> Range<usize> {
    first.saturating_sub(margin)..(last + margin + 1).min(n)
}

/// Recursive grounding of one query in one video.
pub fn infer<G: Grounder>(
    grounder: &G,
    video: &FeatureSequence,
    query: &QuerySpec,
    window: &WindowConfig,
    cfg: &HierarchyConfig,
) -> Result<InferOutput, RecursionError> {
    cfg.validate()?;
    let segs = segments(video, window)?;
    let n = segs.len();
    let mut trace = RunTrace { total_segments: n, records: Vec::new() };
    let scope = grounder.scope(video, query, &segs, window, cfg.levels >= 2)?;

    let predictions = if cfg.levels == 0 {
        flat(grounder, &scope, video, cfg, &mut trace)?
    } else if cfg.levels == 1 {
        let all: BTreeSet<usize> = (0..n).collect();
        refine_bottom(grounder, &scope, video, &all, &segs, window, &|_| Vec::new(), &mut trace)?
    } else if cfg.variant.is_inverse() {
        bottom_up(grounder, &scope, video, &segs, window, cfg, &mut trace)?
    } else {
        top_down(grounder, &scope, video, &segs, window, cfg, &mut trace)?
    };
    Ok(InferOutput { predictions: rank_topk(predictions, cfg.top_k), trace })
}

fn flat<G: Grounder>(
    grounder: &G,
    scope: &G::Scope,
    video: &FeatureSequence,
    cfg: &HierarchyConfig,
    trace: &mut RunTrace,
) -> Result<Vec<Prediction>, RecursionError> {
    let d = video.duration();
    let w = WindowConfig { window_secs: d, stride_secs: d, frames_per_window: cfg.flat_frames };
    let o = grounder.dense(scope, video, 0.0, &w)?;
    trace.records.push(TraceRecord { level: 0, base: 0, group: cfg.flat_frames, answer: o.answer, confidence: o.confidence });
    let mut out = Vec::new();
    if let Some(Answer::Boundary(s, e)) = o.answer {
        let e = if e == s { s + 1 } else { e };
        if e <= cfg.flat_frames {
            let start = map_local_global(0.0, s, &w)?;
            let end = map_local_global(0.0, e, &w)?;
            out.push(Prediction { video_id: video.video_id.clone(), start, end, confidence: o.confidence, segment: 0, provenance: Vec::new() });
        }
    }
    Ok(out)
}

fn top_down<G: Grounder>(
    grounder: &G,
    scope: &G::Scope,
    video: &FeatureSequence,
    segs: &[Segment],
    window: &WindowConfig,
    cfg: &HierarchyConfig,
    trace: &mut RunTrace,
) -> Result<Vec<Prediction>, RecursionError> {
    let n = segs.len();
    let duration = video.duration();
    let set = cfg.variant.upper_set();
    // Each frontier entry is a chain of regions from the top level down.
    let mut frontier: Vec<Vec<CandidateRegion>> = vec![Vec::new()];
    for level in (2..=cfg.levels).rev() {
        let group = cfg.group_size(level);
        let mut next: Vec<Vec<CandidateRegion>> = Vec::new();
        for chain in &frontier {
            let range = match chain.last() {
                Some(r) => r.first..r.last + 1,
                None => 0..n,
            };
            for c in scan_level(grounder, scope, level, range, group, set, segs, window, duration, trace)? {
                let r = expand(c.first, c.last, cfg.margin, n);
                let c = region(level, r.start, r.end - 1, segs, window, duration, c.confidence);
                let mut ch = chain.clone();
                ch.push(c);
                next.push(ch);
            }
        }
        next.sort_by(|a, b| region_order(a.last().expect("non-empty"), b.last().expect("non-empty")));
        next.truncate(cfg.keep_at(level));
        frontier = next;
    }
    // Each segment keeps the chain of its most confident final region.
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for (ci, chain) in frontier.iter().enumerate() {
        let r = chain.last().expect("non-empty");
        for slot in &mut owner[r.first..=r.last] {
            slot.get_or_insert(ci);
        }
    }
    let wanted: BTreeSet<usize> = (0..n).filter(|&i| owner[i].is_some()).collect();
    let prov = |i: usize| owner[i].map(|c| frontier[c].clone()).unwrap_or_default();
    refine_bottom(grounder, scope, video, &wanted, segs, window, &prov, trace)
}

fn bottom_up<G: Grounder>(
    grounder: &G,
    scope: &G::Scope,
    video: &FeatureSequence,
    segs: &[Segment],
    window: &WindowConfig,
    cfg: &HierarchyConfig,
    trace: &mut RunTrace,
) -> Result<Vec<Prediction>, RecursionError> {
    let n = segs.len();
    let duration = video.duration();
    let set = cfg.variant.upper_set();
    let all: BTreeSet<usize> = (0..n).collect();
    let mut survivors = refine_bottom(grounder, scope, video, &all, segs, window, &|_| Vec::new(), trace)?;
    let mut chains: Vec<Vec<f64>> = survivors.iter().map(|p| vec![p.confidence]).collect();
    for level in 2..=cfg.levels {
        if survivors.is_empty() {
            break;
        }
        let group = cfg.group_size(level);
        let alive: BTreeSet<usize> = survivors.iter().map(|p| p.segment).collect();
        let mut cands = Vec::new();
        let chunks: BTreeSet<usize> = alive.iter().map(|s| s / group).collect();
        for c in chunks {
            let base = c * group;
            let end = (base + group).min(n);
            for c in scan_level(grounder, scope, level, base..end, group, set, segs, window, duration, trace)? {
                let r = expand(c.first, c.last, cfg.margin, n);
                cands.push(region(level, r.start, r.end - 1, segs, window, duration, c.confidence));
            }
        }
        cands.sort_by(region_order);
        cands.truncate(cfg.keep_at(level));
        let mut kept_p = Vec::new();
        let mut kept_c = Vec::new();
        for (mut p, mut ch) in survivors.into_iter().zip(chains) {
            let hit = cands.iter().filter(|c| (c.first..=c.last).contains(&p.segment)).min_by(|a, b| region_order(a, b));
            if let Some(c) = hit {
                ch.push(c.confidence);
                p.provenance.insert(0, c.clone());
                kept_p.push(p);
                kept_c.push(ch);
            }
        }
        survivors = kept_p;
        chains = kept_c;
    }
    for (p, ch) in survivors.iter_mut().zip(&chains) {
        p.confidence = combine_confidence(ch)?;
    }
    survivors.sort_by(rank_order);
    Ok(survivors)
}

#[cfg(test)]
mod tests;
