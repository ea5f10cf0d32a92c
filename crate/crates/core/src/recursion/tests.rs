use super::*;
use crate::corpus::{synth_corpus, SynthConfig};
use crate::decoder::Vocab;
use crate::metrics::iou;
use approx::assert_abs_diff_eq;

fn mad() -> WindowConfig {
    WindowConfig { window_secs: 125.0, stride_secs: 25.0, frames_per_window: 250 }
}

struct Silent;

impl Grounder for Silent {
    type Scope = ();
    fn scope(&self, _: &FeatureSequence, _: &QuerySpec, _: &[Segment], _: &WindowConfig, _: bool) -> Result<(), RecursionError> {
        Ok(())
    }
    fn dense(&self, _: &(), _: &FeatureSequence, _: f64, _: &WindowConfig) -> Result<DecodeOutcome, RecursionError> {
        Ok(DecodeOutcome { answer: Some(Answer::NotPresent), entropies: vec![0.1], confidence: 10.0 })
    }
    fn sparse(&self, s: &(), _: Range<usize>, _: ParamSet) -> Result<DecodeOutcome, RecursionError> {
        self.dense(s, &dummy(), 0.0, &mad())
    }
    fn present(&self, s: &(), _: usize) -> Result<DecodeOutcome, RecursionError> {
        self.dense(s, &dummy(), 0.0, &mad())
    }
    fn which(&self, s: &(), _: Range<usize>, _: ParamSet) -> Result<DecodeOutcome, RecursionError> {
        self.dense(s, &dummy(), 0.0, &mad())
    }
}

fn dummy() -> FeatureSequence {
    FeatureSequence::new("d", 1.0, crate::numkernel::Matrix::zeros(1, 1)).unwrap()
}

fn noiseless(videos: usize, secs: f64, seed: u64) -> (Vec<FeatureSequence>, Vec<QuerySpec>) {
    let cfg = SynthConfig {
        videos,
        duration_secs: secs,
        dim: 4,
        snr: f64::INFINITY,
        noise: 0.0,
        queries_per_video: 1,
        words_per_query: 1,
        seed,
        ..SynthConfig::default()
    };
    synth_corpus(&cfg).unwrap()
}

#[test]
fn mapping_examples() {
    let w = mad();
    assert_eq!(map_local_global(475.0, 0, &w).unwrap(), 475.0);
    assert_eq!(map_local_global(475.0, 249, &w).unwrap(), 475.0 + 125.0 * 249.0 / 250.0);
    assert_eq!(map_local_global(475.0, 100, &w).unwrap(), 525.0);
    assert_eq!(map_local_global(475.0, 107, &w).unwrap(), 528.5);
    assert!(map_local_global(0.0, 251, &w).is_err());
    for t in [0.0, 3.3, 60.26, 124.9] {
        let tok = map_global_local(0.0, t, &w);
        assert!((map_local_global(0.0, tok, &w).unwrap() - t).abs() < w.secs_per_token());
    }
}

#[test]
fn combine_examples() {
    assert_eq!(combine_confidence(&[3.5]).unwrap(), 3.5);
    assert_abs_diff_eq!(combine_confidence(&[0.7, 0.7]).unwrap(), 0.7, epsilon = 1e-15);
    assert_abs_diff_eq!(combine_confidence(&[1.0, 4.0]).unwrap(), 2.0, epsilon = 1e-15);
    assert!(matches!(combine_confidence(&[]), Err(RecursionError::EmptyChain)));
}

#[test]
fn accounting_examples() {
    let rec = |level, base| TraceRecord { level, base, group: 1, answer: None, confidence: 0.0 };
    let all = RunTrace { total_segments: 4, records: (0..4).map(|i| rec(1, i)).collect() };
    assert_eq!(frames_accounting(&all), 1.0);
    let half = RunTrace { total_segments: 4, records: vec![rec(2, 0), rec(1, 0), rec(1, 3), rec(1, 3)] };
    assert_eq!(frames_accounting(&half), 0.5);
}

#[test]
fn silent_decoder_yields_nothing() {
    let segs: Vec<Segment> =
        (0..120).map(|i| Segment { index: i, start: i as f64 * 25.0, frames: crate::numkernel::Matrix::zeros(1, 1) }).collect();
    let mut trace = RunTrace::default();
    let c = scan_level(&Silent, &(), 2, 0..120, 100, ParamSet::Upper, &segs, &mad(), 3100.0, &mut trace).unwrap();
    assert!(c.is_empty());
    assert_eq!(trace.records.iter().map(|r| r.group).collect::<Vec<_>>(), vec![100, 20]);
    let none = refine_bottom(&Silent, &(), &dummy(), &BTreeSet::new(), &segs, &mad(), &|_| Vec::new(), &mut trace).unwrap();
    assert!(none.is_empty());
}

#[test]
fn oracle_scan_matches_overlap() {
    let (videos, queries) = noiseless(1, 3600.0, 4);
    let (v, q) = (&videos[0], &queries[0]);
    let w = mad();
    let segs = segments(v, &w).unwrap();
    let oracle = OracleGrounder::new(Vocab::new(256));
    let scope = oracle.scope(v, q, &segs, &w, true).unwrap();
    let mut trace = RunTrace::default();
    let c = scan_level(&oracle, &scope, 2, 0..segs.len(), 33, ParamSet::Upper, &segs, &w, v.duration(), &mut trace).unwrap();
    let span = q.span.unwrap();
    let truth: Vec<usize> = segs.iter().filter(|s| s.start < span.1 && span.0 < s.start + 125.0).map(|s| s.index).collect();
    let found: Vec<usize> = c.iter().flat_map(|r| r.first..=r.last).collect();
    assert_eq!(found, truth);
}

#[test]
fn oracle_infers_exact_interval_for_all_variants_and_depths() {
    let (videos, queries) = noiseless(3, 7200.0, 8);
    let oracle = OracleGrounder::new(Vocab::new(256));
    for variant in Variant::ALL {
        for levels in 1..=3 {
            let cfg = HierarchyConfig { levels, variant, ..HierarchyConfig::default() };
            for (v, q) in videos.iter().zip(&queries) {
                let out = infer(&oracle, v, q, &mad(), &cfg).unwrap();
                let top = &out.predictions[0];
                assert_eq!(iou((top.start, top.end), q.span.unwrap()).unwrap(), 1.0, "{variant:?} L={levels}");
                for p in &out.predictions {
                    for r in &p.provenance {
                        assert!(r.start <= p.start && p.end <= r.end);
                    }
                }
                let frac = frames_accounting(&out.trace);
                if variant.is_inverse() || levels == 1 {
                    assert_eq!(frac, 1.0);
                } else {
                    assert!(frac < 0.25, "{frac}");
                }
            }
        }
    }
}

#[test]
fn oracle_retrieval_ranks_truth_first() {
    let (videos, queries) = noiseless(5, 32.0, 2);
    let oracle = OracleGrounder::new(Vocab::new(256));
    for q in &queries {
        let r = retrieve(&oracle, &videos, q, 32, 100, ParamSet::Upper).unwrap();
        assert_eq!(r.ranking[0], q.video_id);
        assert_eq!(r.ranking.len(), 5);
    }
}
