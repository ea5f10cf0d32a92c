use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{Polarity, Source, StagePlan, TrainError, TrainExample};
use crate::corpus::{make_windows, FeatureSequence, QuerySpec, WindowConfig};
use crate::decoder::{Answer, Template};
use crate::recursion::clip_tokens;

/// Labeled videos and queries plus the short-window geometry.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub videos: &'a [FeatureSequence],
    pub queries: &'a [QuerySpec],
    pub window: WindowConfig,
}

impl<'a> TrainData<'a> {
    /// Video index of every query; unlabeled or orphaned queries are errors.
    pub fn video_of(&self) -> Result<Vec<usize>, TrainError> {
        self.queries
            .iter()
            .map(|q| {
                if q.span.is_none() {
                    return Err(TrainError::NoData(format!("query {} has no interval", q.query_id)));
                }
                self.videos
                    .iter()
                    .position(|v| v.video_id == q.video_id)
                    .ok_or_else(|| TrainError::NoData(format!("query {} refers to unknown video {}", q.query_id, q.video_id)))
            })
            .collect()
    }

    fn span(&self, q: usize) -> (f64, f64) {
        self.queries[q].span.expect("checked by video_of")
    }

    fn last_start(&self, v: usize) -> usize {
        (self.videos[v].duration() - self.window.window_secs).floor().max(0.0) as usize
    }
}

fn disjoint(span: (f64, f64), start: f64, len: f64) -> bool {
    start + len <= span.0 || start >= span.1
}

/// Window starts in `v` that never intersect `span`.
fn contrastive_starts(data: &TrainData<'_>, v: usize, span: (f64, f64)) -> Vec<f64> {
    (0..=data.last_start(v)).map(|s| s as f64).filter(|&s| disjoint(span, s, data.window.window_secs)).collect()
}

/// Draws one contrastive window for query `q`. A `hard` draw prefers windows
/// holding another query's event in the same video. Videos without any
/// disjoint window fall back to the other videos in order.
fn draw_contrastive<R: Rng>(
    data: &TrainData<'_>,
    video_of: &[usize],
    q: usize,
    hard: bool,
    rng: &mut R,
) -> Result<(usize, f64), TrainError> {
    let v = video_of[q];
    let span = data.span(q);
    let l = data.window.window_secs;
    if hard {
        let others: Vec<(f64, f64)> =
            (0..data.queries.len()).filter(|&o| o != q && video_of[o] == v).map(|o| data.span(o)).collect();
        if let Some(&(a, b)) = others.choose(rng) {
            // Starts in (a − L_w, b) see part of the other event.
            let lo = ((a - l).floor() + 1.0).max(0.0) as usize;
            let hi = ((b.ceil() as usize).saturating_sub(1)).min(data.last_start(v));
            let ok: Vec<f64> = (lo..=hi).map(|s| s as f64).filter(|&s| disjoint(span, s, l)).collect();
            if let Some(&s) = ok.choose(rng) {
                return Ok((v, s));
            }
        }
    }
    let own = contrastive_starts(data, v, span);
    if let Some(&s) = own.choose(rng) {
        return Ok((v, s));
    }
    log::warn!("no contrastive window in {}; sampling another video", data.videos[v].video_id);
    for w in (0..data.videos.len()).filter(|&w| w != v) {
        let starts: Vec<f64> = (0..=data.last_start(w)).map(|s| s as f64).collect();
        if let Some(&s) = starts.choose(rng) {
            return Ok((w, s));
        }
    }
    Err(TrainError::NoData("no contrastive window anywhere".into()))
}

/// Positive window starts of query `q`: every grid window overlapping the
/// event by at least one token, then `jitter` random starts that do.
fn positive_starts<R: Rng>(data: &TrainData<'_>, v: usize, span: (f64, f64), jitter: usize, rng: &mut R) -> Result<Vec<f64>, TrainError> {
    let video = &data.videos[v];
    let grid: Vec<f64> = make_windows(video.len(), video.fps, &data.window)?.into_iter().map(|(_, s)| s).collect();
    let all: Vec<f64> = (0..=data.last_start(v)).map(|s| s as f64).collect();
    let w = data.window.window_secs;
    let holds = |s: f64| span.0 >= s && span.1 <= s + w;
    let meets = |s: f64| clip_tokens(span, s, &data.window).is_some();
    // Windows holding the whole event; overlapping ones only when none does.
    let keep: &dyn Fn(f64) -> bool = if all.iter().any(|&s| holds(s)) { &holds } else { &meets };
    let mut out: Vec<f64> = grid.into_iter().filter(|&s| keep(s)).collect();
    let pool: Vec<f64> = all.into_iter().filter(|&s| keep(s)).collect();
    for _ in 0..jitter {
        if let Some(&s) = pool.choose(rng) {
            out.push(s);
        }
    }
    Ok(out)
}

/// Crop `(lo, len)` of an `n_f`-row window. With `tokens = Some((a, b))`
/// the crop overlaps `[a, b)`.
fn draw_crop<R: Rng>(n_f: usize, tokens: Option<(usize, usize)>, rng: &mut R) -> (usize, usize) {
    let len = rng.gen_range(1..=n_f);
    let lo = match tokens {
        Some((a, b)) => {
            let first = (a + 1).saturating_sub(len);
            let last = (b - 1).min(n_f - len);
            rng.gen_range(first..=last.max(first))
        }
        None => rng.gen_range(0..=n_f - len),
    };
    (lo, len)
}

fn chunk(mut examples: Vec<TrainExample>, batch: usize) -> Vec<Vec<TrainExample>> {
    let mut out = Vec::new();
    while !examples.is_empty() {
        let rest = examples.split_off(batch.min(examples.len()));
        out.push(std::mem::replace(&mut examples, rest));
    }
    out
}

/// One shuffled epoch of short-window examples. Each positive (GROUND,
/// clipped-token target) is paired with `contrastive_ratio` contrastive
/// windows on average. A `present_mix` share of the examples is replaced
/// by PRESENT questions over a random crop of the same window.
pub fn build_stage1_batches<R: Rng>(data: &TrainData<'_>, plan: &StagePlan, rng: &mut R) -> Result<Vec<Vec<TrainExample>>, TrainError> {
    let video_of = data.video_of()?;
    let n_f = data.window.frames_per_window;
    let mut examples = Vec::new();
    for q in 0..data.queries.len() {
        let v = video_of[q];
        let span = data.span(q);
        for start in positive_starts(data, v, span, plan.jitter, rng)? {
            let (s, e) = clip_tokens(span, start, &data.window).expect("positive window");
            examples.push(TrainExample {
                query: q,
                template: Template::Ground,
                level: 1,
                source: Source::Dense { video: v, start, crop: None },
                target: Answer::Boundary(s, e),
                polarity: Polarity::Positive,
                augment: None,
            });
            let whole = plan.contrastive_ratio.floor() as usize;
            let extra = rng.gen_bool(plan.contrastive_ratio.fract());
            for _ in 0..whole + usize::from(extra) {
                let hard = rng.gen_bool(plan.hard_fraction);
                let (w, start) = draw_contrastive(data, &video_of, q, hard, rng)?;
                examples.push(TrainExample {
                    query: q,
                    template: Template::Ground,
                    level: 1,
                    source: Source::Dense { video: w, start, crop: None },
                    target: Answer::NotPresent,
                    polarity: Polarity::Contrastive,
                    augment: None,
                });
            }
        }
    }
    for ex in &mut examples {
        if !rng.gen_bool(plan.present_mix) {
            continue;
        }
        let Source::Dense { video, start, .. } = ex.source else { unreachable!() };
        let tokens = match ex.target {
            Answer::Boundary(s, e) => Some((s, e)),
            _ => None,
        };
        ex.template = Template::Present;
        ex.source = Source::Dense { video, start, crop: Some(draw_crop(n_f, tokens, rng)) };
        ex.target = if tokens.is_some() { Answer::Yes } else { Answer::No };
    }
    examples.shuffle(rng);
    Ok(chunk(examples, plan.batch))
}

/// PRESENT examples over the sparse feature of whole windows, one per
/// GROUND example of a stage-1 epoch.
pub fn build_adapter_batches<R: Rng>(data: &TrainData<'_>, plan: &StagePlan, rng: &mut R) -> Result<Vec<Vec<TrainExample>>, TrainError> {
    let plan = StagePlan { present_mix: 0.0, ..plan.clone() };
    let mut batches = build_stage1_batches(data, &plan, rng)?;
    for ex in batches.iter_mut().flatten() {
        ex.template = Template::Present;
        ex.level = 2;
        ex.target = if ex.target.is_affirmative() { Answer::Yes } else { Answer::No };
    }
    Ok(batches)
}

/// Segment indexes of a video whose window overlaps `span` by a token.
pub fn overlapping_segments(starts: &[f64], span: (f64, f64), window: &WindowConfig) -> Vec<usize> {
    (0..starts.len()).filter(|&i| clip_tokens(span, starts[i], window).is_some()).collect()
}

fn long_target(template: Template, hits: &[usize], range: &Range<usize>) -> Answer {
    let inside: Vec<usize> = hits.iter().copied().filter(|i| range.contains(i)).collect();
    match (inside.first(), inside.last()) {
        (Some(&a), Some(_)) if template == Template::Which => Answer::VideoIndex(a - range.start),
        (Some(&a), Some(&b)) => Answer::Boundary(a - range.start, b - range.start),
        _ => Answer::NotPresent,
    }
}

/// One shuffled epoch of sparse-token examples. For every query,
/// `long_per_query` ranges of random length in `1..=max_group` contain the
/// event and as many (times `contrastive_ratio`) avoid it. A `which_mix`
/// share asks WHICH instead of GROUND.
pub fn build_stage2_batches<R: Rng>(
    data: &TrainData<'_>,
    starts: &[Vec<f64>],
    plan: &StagePlan,
    rng: &mut R,
) -> Result<Vec<Vec<TrainExample>>, TrainError> {
    let video_of = data.video_of()?;
    let mut examples = Vec::new();
    for q in 0..data.queries.len() {
        let n = starts[video_of[q]].len();
        let hits = overlapping_segments(&starts[video_of[q]], data.span(q), &data.window);
        if hits.is_empty() {
            continue;
        }
        let (first, last) = (hits[0], hits[hits.len() - 1]);
        let mut push = |range: Range<usize>, rng: &mut R| {
            let template = if rng.gen_bool(plan.which_mix) { Template::Which } else { Template::Ground };
            let target = long_target(template, &hits, &range);
            let polarity = if target.is_affirmative() { Polarity::Positive } else { Polarity::Contrastive };
            examples.push(TrainExample { query: q, template, level: 2, source: Source::Sparse { range }, target, polarity, augment: None });
        };
        for _ in 0..plan.long_per_query {
            let len = rng.gen_range(1..=plan.max_group.min(n));
            // Any base whose range meets [first, last].
            let lo = first.saturating_sub(len - 1);
            let hi = last.min(n - len);
            let base = rng.gen_range(lo..=hi.max(lo));
            push(base..base + len, rng);
        }
        let negatives = (plan.long_per_query as f64 * plan.contrastive_ratio).round() as usize;
        for _ in 0..negatives {
            let len = rng.gen_range(1..=plan.max_group.min(n));
            let bases: Vec<usize> = (0..=n - len).filter(|&b| b + len <= first || b > last).collect();
            if let Some(&base) = bases.choose(rng) {
                push(base..base + len, rng);
            }
        }
    }
    examples.shuffle(rng);
    Ok(chunk(examples, plan.batch))
}
