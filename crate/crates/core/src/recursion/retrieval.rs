use super::{Grounder, RecursionError, RunTrace, TraceRecord};
use crate::corpus::{concat_for_retrieval, segments, FeatureSequence, QuerySpec, WindowConfig};
use crate::decoder::{Answer, ParamSet};

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalOutput {
    /// Video ids, best first.
    pub ranking: Vec<String>,
    pub trace: RunTrace,
}

/// Ranks `videos` for `query` after concatenating them with
/// `frames_per_video` frames each. Every video is first asked PRESENT with
/// the bottom set; WHICH then runs over groups of at most `group` videos.
/// Order: WHICH picks, then YES answers by falling confidence, then NO
/// answers by rising confidence, then unparsed answers.
pub fn retrieve<G: Grounder>(
    grounder: &G,
    videos: &[FeatureSequence],
    query: &QuerySpec,
    frames_per_video: usize,
    group: usize,
    set: ParamSet,
) -> Result<RetrievalOutput, RecursionError> {
    let (joined, index) = concat_for_retrieval(videos, frames_per_video)?;
    let f = frames_per_video as f64;
    let window = WindowConfig { window_secs: f, stride_secs: f, frames_per_window: frames_per_video.max(2) };
    let segs = segments(&joined, &window)?;
    let n = videos.len();
    let truth = index.video_ids.iter().position(|v| *v == query.video_id);
    let mut q = query.clone();
    q.span = truth.map(|g| (g as f64 * f, (g + 1) as f64 * f));
    let scope = grounder.scope(&joined, &q, &segs[..n], &window, true)?;
    let mut trace = RunTrace { total_segments: n, records: Vec::new() };

    // (tier, score) with lower tier first and higher score first.
    let mut keys: Vec<(u8, f64)> = vec![(3, 0.0); n];
    for (v, key) in keys.iter_mut().enumerate() {
        let o = grounder.present(&scope, v)?;
        trace.records.push(TraceRecord { level: 1, base: v, group: 1, answer: o.answer, confidence: o.confidence });
        *key = match o.answer {
            Some(Answer::Yes) => (1, o.confidence),
            Some(_) => (2, -o.confidence),
            None => (3, 0.0),
        };
    }
    let group = group.max(1);
    let mut base = 0;
    while base < n {
        let len = group.min(n - base);
        let o = grounder.which(&scope, base..base + len, set)?;
        trace.records.push(TraceRecord { level: 2, base, group: len, answer: o.answer, confidence: o.confidence });
        if let Some(Answer::VideoIndex(i)) = o.answer {
            if i < len {
                keys[base + i] = (0, o.confidence);
            }
        }
        base += len;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| keys[a].0.cmp(&keys[b].0).then(keys[b].1.total_cmp(&keys[a].1)).then(a.cmp(&b)));
    Ok(RetrievalOutput { ranking: order.into_iter().map(|i| index.video_ids[i].clone()).collect(), trace })
}
