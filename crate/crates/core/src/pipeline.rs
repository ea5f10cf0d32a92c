//! Corpus-level inference, evaluation and retrieval over many queries.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrank::{ece, min_max_normalize, CalibError, CalibrationReport};
use crate::config::EvalConfig;
use crate::corpus::{segments, FeatureSequence, QuerySpec, WindowConfig};
use crate::decoder::Answer;
use crate::decoder::ParamSet;
use crate::metrics::{iou, recall_k_iou, retrieval_recall, EvalResult, MetricsError};
use crate::recursion::{bottom_interval, frames_accounting, infer, retrieve, CandidateRegion, Grounder, HierarchyConfig, RecursionError, RunTrace};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Recursion(#[from] RecursionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error("query {query} refers to unknown video {video}")]
    UnknownVideo { query: String, video: String },
    #[error("malformed predictions: {0}")]
    Schema(String),
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionLine {
    pub query_id: String,
    pub video_id: String,
    pub rank: usize,
    pub start: f64,
    pub end: f64,
    pub confidence: f64,
    pub provenance: Vec<CandidateRegion>,
}

/// One bottom-level dense decode. `interval` is `None` for a "not present"
/// answer; malformed decodes are not recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentLine {
    pub query_id: String,
    pub video_id: String,
    pub segment: usize,
    pub window: (f64, f64),
    pub interval: Option<(f64, f64)>,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub query_id: String,
    pub lines: Vec<PredictionLine>,
    pub segments: Vec<SegmentLine>,
    pub frames_fraction: f64,
    pub trace: RunTrace,
}

fn video_index<'a>(videos: &'a [FeatureSequence], q: &QuerySpec) -> Result<&'a FeatureSequence, PipelineError> {
    videos
        .iter()
        .find(|v| v.video_id == q.video_id)
        .ok_or_else(|| PipelineError::UnknownVideo { query: q.query_id.clone(), video: q.video_id.clone() })
}

/// Runs `infer` for every query. Queries are processed in parallel and
/// returned in input order.
pub fn infer_all<G: Grounder>(
    grounder: &G,
    videos: &[FeatureSequence],
    queries: &[QuerySpec],
    window: &WindowConfig,
    cfg: &HierarchyConfig,
) -> Result<Vec<QueryOutcome>, PipelineError> {
    queries
        .par_iter()
        .map(|q| {
            let v = video_index(videos, q)?;
            let out = infer(grounder, v, q, window, cfg)?;
            let segments = segment_lines(v, q, window, &out.trace)?;
            let lines = out
                .predictions
                .into_iter()
                .enumerate()
                .map(|(rank, p)| PredictionLine {
                    query_id: q.query_id.clone(),
                    video_id: p.video_id,
                    rank,
                    start: p.start,
                    end: p.end,
                    confidence: p.confidence,
                    provenance: p.provenance,
                })
                .collect();
            Ok(QueryOutcome { query_id: q.query_id.clone(), lines, segments, frames_fraction: frames_accounting(&out.trace), trace: out.trace })
        })
        .collect()
}

fn segment_lines(video: &FeatureSequence, q: &QuerySpec, window: &WindowConfig, trace: &RunTrace) -> Result<Vec<SegmentLine>, PipelineError> {
    let segs = segments(video, window).map_err(RecursionError::from)?;
    let mut out = Vec::new();
    for r in trace.records.iter().filter(|r| r.level == 1) {
        let start = segs[r.base].start;
        let interval = match r.answer {
            Some(Answer::Boundary(s, e)) => match bottom_interval(start, s, e, window, video.duration()) {
                Some(iv) => Some(iv),
                None => continue,
            },
            Some(Answer::NotPresent) => None,
            _ => continue,
        };
        out.push(SegmentLine {
            query_id: q.query_id.clone(),
            video_id: video.video_id.clone(),
            segment: r.base,
            window: (start, start + window.window_secs),
            interval,
            confidence: r.confidence,
        });
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(lines: &[T]) -> String {
    let mut s = String::new();
    for l in lines {
        s.push_str(&serde_json::to_string(l).expect("line serializes"));
        s.push('\n');
    }
    s
}

pub fn from_jsonl<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>, PipelineError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| PipelineError::Schema(format!("line {}: {e}", i + 1))))
        .collect()
}

/// Predicted intervals per query in rank order, aligned with `queries`.
pub fn ranked_intervals(lines: &[PredictionLine], queries: &[QuerySpec]) -> Vec<Vec<(f64, f64)>> {
    let mut by: BTreeMap<&str, Vec<&PredictionLine>> = BTreeMap::new();
    for l in lines {
        by.entry(l.query_id.as_str()).or_default().push(l);
    }
    queries
        .iter()
        .map(|q| {
            let mut v = by.remove(q.query_id.as_str()).unwrap_or_default();
            v.sort_by_key(|l| l.rank);
            v.into_iter().map(|l| (l.start, l.end)).collect()
        })
        .collect()
}

/// Whether a bottom-level decode is right at IoU threshold `tau`: an
/// interval must exceed it against the truth, a "not present" answer must
/// come from a window disjoint from the truth.
pub fn segment_correct(l: &SegmentLine, truth: (f64, f64), tau: f64) -> Result<bool, PipelineError> {
    Ok(match l.interval {
        Some(iv) => iou(iv, truth)? > tau,
        None => l.window.1 <= truth.0 || l.window.0 >= truth.1,
    })
}

/// Calibration over bottom-level decodes: confidences min-max normalized
/// over the set, correctness per `segment_correct`.
pub fn calibration(segments: &[SegmentLine], queries: &[QuerySpec], tau: f64, bins: usize) -> Result<CalibrationReport, PipelineError> {
    let truth: BTreeMap<&str, Option<(f64, f64)>> = queries.iter().map(|q| (q.query_id.as_str(), q.span)).collect();
    let mut conf = Vec::new();
    let mut ok = Vec::new();
    for l in segments {
        if let Some(Some(span)) = truth.get(l.query_id.as_str()) {
            conf.push(l.confidence);
            ok.push(segment_correct(l, *span, tau)?);
        }
    }
    let scored: Vec<(f64, bool)> = min_max_normalize(&conf).into_iter().zip(ok).collect();
    let mut r = ece(&scored, bins)?;
    r.iou_threshold = Some(tau);
    Ok(r)
}

/// Recall table of a predictions set, plus calibration reports when the
/// bottom-level decodes are given.
pub fn evaluate(
    name: &str,
    lines: &[PredictionLine],
    segments: Option<&[SegmentLine]>,
    queries: &[QuerySpec],
    cfg: &EvalConfig,
) -> Result<(EvalResult, Vec<CalibrationReport>), PipelineError> {
    let ranked = ranked_intervals(lines, queries);
    let truths: Vec<Option<(f64, f64)>> = queries.iter().map(|q| q.span).collect();
    let mut metrics = BTreeMap::new();
    for &k in &cfg.ks {
        for &t in &cfg.thetas {
            metrics.insert(format!("R{k}@{t}"), recall_k_iou(&ranked, &truths, k, t)?);
        }
    }
    let mut reports = Vec::new();
    if let Some(segs) = segments.filter(|s| s.iter().any(|l| queries.iter().any(|q| q.query_id == l.query_id))) {
        for &t in &cfg.ece_thresholds {
            let r = calibration(segs, queries, t, cfg.bins)?;
            metrics.insert(format!("ECE@{t}"), r.ece);
            reports.push(r);
        }
    }
    let fingerprint = crate::checkpoint::sha256_hex(to_jsonl(lines).as_bytes());
    Ok((EvalResult { name: name.to_string(), queries: queries.len(), fingerprint, metrics }, reports))
}

/// One retrieval ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankingLine {
    pub query_id: String,
    pub ranking: Vec<String>,
}

/// Ranks `videos` for every query; queries run in parallel, output in
/// input order.
pub fn retrieve_all<G: Grounder>(
    grounder: &G,
    videos: &[FeatureSequence],
    queries: &[QuerySpec],
    frames_per_video: usize,
    group: usize,
    set: ParamSet,
) -> Result<Vec<RankingLine>, PipelineError> {
    queries
        .par_iter()
        .map(|q| {
            let r = retrieve(grounder, videos, q, frames_per_video, group, set)?;
            Ok(RankingLine { query_id: q.query_id.clone(), ranking: r.ranking })
        })
        .collect()
}

/// Recall@k of retrieval rankings against each query's own video.
pub fn retrieval_recall_at(rankings: &[RankingLine], queries: &[QuerySpec], k: usize) -> Result<f64, PipelineError> {
    let ranked: Vec<Vec<String>> = rankings.iter().map(|r| r.ranking.clone()).collect();
    let truths: Vec<Option<String>> = queries.iter().map(|q| Some(q.video_id.clone())).collect();
    Ok(retrieval_recall(&ranked, &truths, k)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Matrix;
    use approx::assert_abs_diff_eq;

    fn q(id: &str, span: (f64, f64)) -> QuerySpec {
        QuerySpec { query_id: id.into(), video_id: "v".into(), embedding: Matrix::zeros(1, 1), span: Some(span) }
    }

    fn line(query: &str, rank: usize, start: f64, end: f64, confidence: f64) -> PredictionLine {
        PredictionLine { query_id: query.into(), video_id: "v".into(), rank, start, end, confidence, provenance: Vec::new() }
    }

    fn seg(query: &str, window: (f64, f64), interval: Option<(f64, f64)>, confidence: f64) -> SegmentLine {
        SegmentLine { query_id: query.into(), video_id: "v".into(), segment: 0, window, interval, confidence }
    }

    #[test]
    fn perfect_predictions_score_one_and_none_score_zero() {
        let qs = vec![q("a", (0.0, 4.0)), q("b", (10.0, 12.0))];
        let lines = vec![line("a", 0, 0.0, 4.0, 2.0), line("b", 0, 10.0, 12.0, 3.0)];
        let segs = vec![seg("a", (0.0, 8.0), Some((0.0, 4.0)), 2.0), seg("a", (8.0, 16.0), None, 3.0)];
        let cfg = EvalConfig::default();
        let (r, cal) = evaluate("p", &lines, Some(&segs), &qs, &cfg).unwrap();
        for (k, v) in &r.metrics {
            if k.starts_with('R') {
                assert_eq!(*v, 1.0, "{k}");
            }
        }
        assert_eq!(cal.len(), 3);
        let (r, cal) = evaluate("none", &[], None, &qs, &cfg).unwrap();
        assert!(r.metrics.values().all(|v| *v == 0.0));
        assert!(cal.is_empty());
    }

    #[test]
    fn hand_fixture_matches_brute_force() {
        let qs = vec![q("a", (0.0, 10.0)), q("b", (20.0, 30.0))];
        // a: rank0 IoU 0.6, rank1 IoU 1.0; b: rank0 IoU 0.2.
        let lines = vec![line("a", 1, 0.0, 10.0, 1.0), line("a", 0, 0.0, 6.0, 4.0), line("b", 0, 28.0, 30.0, 2.0)];
        let (r, _) = evaluate("h", &lines, None, &qs, &EvalConfig::default()).unwrap();
        assert_eq!(r.metrics["R1@0.5"], 0.5);
        assert_eq!(r.metrics["R1@0.7"], 0.0);
        assert_eq!(r.metrics["R5@0.7"], 0.5);
        assert_eq!(r.metrics["R1@0.1"], 1.0);
        let tie = vec![line("a", 0, 0.0, 5.0, 1.0)];
        assert_eq!(evaluate("t", &tie, None, &qs[..1], &EvalConfig::default()).unwrap().0.metrics["R1@0.5"], 0.0);
    }

    #[test]
    fn calibration_hand_fixture() {
        let qs = vec![q("a", (0.0, 10.0))];
        let segs = vec![
            // IoU 0.6, confidence 4 → 1.
            seg("a", (0.0, 32.0), Some((0.0, 6.0)), 4.0),
            // Not present in a window touching only at the boundary: right.
            seg("a", (10.0, 42.0), None, 1.0),
            // Not present in an overlapping window: wrong. 2 → 1/3.
            seg("a", (5.0, 37.0), None, 2.0),
        ];
        // τ = 0.5: flags (1, 1, 0); bins 9, 0, 3.
        let r = calibration(&segs, &qs, 0.5, 10).unwrap();
        assert_abs_diff_eq!(r.ece, (0.0 + 1.0 + 1.0 / 3.0) / 3.0, epsilon = 1e-12);
        // τ = 0.7: the interval turns wrong.
        let r = calibration(&segs, &qs, 0.7, 10).unwrap();
        assert_abs_diff_eq!(r.ece, (1.0 + 1.0 + 1.0 / 3.0) / 3.0, epsilon = 1e-12);
        assert_eq!(r.total, 3);
    }

    #[test]
    fn jsonl_round_trip() {
        let lines = vec![line("a", 0, 0.5, 1.25, 3.0)];
        assert_eq!(from_jsonl::<PredictionLine>(&to_jsonl(&lines)).unwrap(), lines);
        assert!(matches!(from_jsonl::<PredictionLine>("{\"x\":1}"), Err(PipelineError::Schema(_))));
    }
}
