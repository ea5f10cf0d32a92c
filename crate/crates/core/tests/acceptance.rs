//! End-to-end acceptance run. Prints one pass/fail line per criterion and
//! exits nonzero when any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rgrounding::calibrank::{confidence, ece, token_entropy};
use rgrounding::checkpoint;
use rgrounding::config::{RunConfig, Split};
use rgrounding::corpus::{read_features, read_queries, synth_corpus, write_features, write_queries, FeatureSequence, QuerySpec, SynthConfig, WindowConfig};
use rgrounding::decoder::Vocab;
use rgrounding::gradsuite::run_suite;
use rgrounding::metrics::{iou, recall_k_iou, retrieval_recall};
use rgrounding::numkernel::gradcheck::{DEFAULT_STEP, DEFAULT_TOLERANCE};
use rgrounding::numkernel::ParamStore;
use rgrounding::pipeline::{calibration, infer_all, ranked_intervals, retrieval_recall_at, retrieve_all, to_jsonl, QueryOutcome};
use rgrounding::recursion::{HierarchyConfig, OracleGrounder, Variant};
use rgrounding::trainer::{self, Model, Stage, TrainData};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * (1.0 + b.abs())
}

// ---------------------------------------------------------------- 1

fn gradients() -> Outcome {
    let t = Instant::now();
    let cases = run_suite(20, RunConfig::toy().seed, DEFAULT_STEP).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let worst = cases.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).ok_or("no cases")?;
    let bad = cases.iter().filter(|c| c.max_rel_error > DEFAULT_TOLERANCE).count();
    ensure(
        bad == 0 && secs < 60.0,
        format!(
            "{} cases over 20 configs, {bad} above {DEFAULT_TOLERANCE:e}, worst {:.2e} ({} #{}), {secs:.1}s",
            cases.len(),
            worst.max_rel_error,
            worst.name,
            worst.config
        ),
    )
}

// ---------------------------------------------------------------- 2

fn entropy_oracle(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &x in p {
        if x > 0.0 {
            h -= x * x.ln();
        }
    }
    h
}

/// Overlap by walking the sorted endpoints.
fn iou_oracle(a: (f64, f64), b: (f64, f64)) -> f64 {
    let mut pts = [a.0, a.1, b.0, b.1];
    pts.sort_by(f64::total_cmp);
    let (mut inter, mut union) = (0.0, 0.0);
    for w in pts.windows(2) {
        let mid = (w[0] + w[1]) / 2.0;
        let ina = a.0 <= mid && mid <= a.1;
        let inb = b.0 <= mid && mid <= b.1;
        if ina && inb {
            inter += w[1] - w[0];
        }
        if ina || inb {
            union += w[1] - w[0];
        }
    }
    inter / union
}

fn recall_oracle(ranked: &[Vec<(f64, f64)>], truths: &[(f64, f64)], k: usize, theta: f64) -> f64 {
    let mut hits = 0;
    for (preds, &gt) in ranked.iter().zip(truths) {
        if preds.iter().take(k).any(|&p| iou_oracle(p, gt) > theta) {
            hits += 1;
        }
    }
    hits as f64 / ranked.len() as f64
}

fn ece_oracle(scored: &[(f64, bool)], bins: usize) -> f64 {
    let mut total = 0.0;
    for b in 0..bins {
        let members: Vec<&(f64, bool)> = scored
            .iter()
            .filter(|(c, _)| {
                let idx = ((c * bins as f64).floor() as usize).min(bins - 1);
                idx == b
            })
            .collect();
        if members.is_empty() {
            continue;
        }
        let n = members.len() as f64;
        let conf = members.iter().map(|(c, _)| c).sum::<f64>() / n;
        let acc = members.iter().filter(|(_, ok)| *ok).count() as f64 / n;
        total += n / scored.len() as f64 * (acc - conf).abs();
    }
    total
}

fn metric_oracles() -> Outcome {
    let mut notes = Vec::new();

    let uniform = vec![1.0 / 300.0; 300];
    let h = token_entropy(&uniform).map_err(|e| e.to_string())?;
    if !(close(h, 300f64.ln()) && (h - 5.7038).abs() < 1e-4 && close(h, entropy_oracle(&uniform))) {
        return Err(format!("uniform entropy {h}"));
    }
    let peaked = [0.7, 0.2, 0.1, 0.0];
    let hp = token_entropy(&peaked).map_err(|e| e.to_string())?;
    if !close(hp, entropy_oracle(&peaked)) {
        return Err(format!("entropy {hp} vs {}", entropy_oracle(&peaked)));
    }
    let half = [0.5, 0.5];
    let eighth = [0.125; 8];
    let c = confidence(&[&half[..], &eighth[..]]).map_err(|e| e.to_string())?;
    let want = 1.0 / ((2f64.ln() + 8f64.ln()) / 2.0);
    if !(close(c, want) && (c - 0.7213).abs() < 1e-4) {
        return Err(format!("confidence {c} vs {want}"));
    }
    notes.push(format!("H(U300)={h:.4}, conf={c:.4}"));

    let pairs = [((0.0, 10.0), (5.0, 15.0), 1.0 / 3.0), ((0.0, 4.0), (1.0, 3.0), 0.5), ((0.0, 1.0), (2.0, 3.0), 0.0), ((2.0, 6.0), (2.0, 6.0), 1.0)];
    for (a, b, want) in pairs {
        let got = iou(a, b).map_err(|e| e.to_string())?;
        if !(close(got, want) && close(got, iou_oracle(a, b)) && close(got, iou(b, a).unwrap())) {
            return Err(format!("iou {a:?} {b:?} = {got}, expected {want}"));
        }
    }

    let truths = [(10.0, 20.0), (0.0, 4.0), (50.0, 60.0)];
    let ranked = vec![
        vec![(30.0, 40.0), (11.0, 20.0), (10.0, 20.0)],
        vec![(0.0, 4.0)],
        vec![(52.0, 60.0), (0.0, 1.0)],
    ];
    let opt: Vec<Option<(f64, f64)>> = truths.iter().map(|&t| Some(t)).collect();
    for (k, theta, want) in [(1, 0.5, 2.0 / 3.0), (2, 0.5, 1.0), (1, 0.8, 1.0 / 3.0), (2, 0.9, 1.0 / 3.0), (3, 0.99, 2.0 / 3.0), (1, 1.0, 0.0)] {
        let got = recall_k_iou(&ranked, &opt, k, theta).map_err(|e| e.to_string())?;
        let brute = recall_oracle(&ranked, &truths, k, theta);
        if !(close(got, want) && close(got, brute)) {
            return Err(format!("R{k}@{theta} = {got}, oracle {brute}, expected {want}"));
        }
    }

    let rankings = vec![vec!["a", "b", "c"], vec!["c", "a", "b"], vec!["b", "c", "a"]];
    let gts = [Some("a"), Some("a"), Some("a")];
    for (k, want) in [(1, 1.0 / 3.0), (2, 2.0 / 3.0), (3, 1.0)] {
        let got = retrieval_recall(&rankings, &gts, k).map_err(|e| e.to_string())?;
        if !close(got, want) {
            return Err(format!("retrieval R@{k} = {got}, expected {want}"));
        }
    }

    let scored = [(0.2, false), (0.3, true), (0.8, true), (0.9, true)];
    let r = ece(&scored, 2).map_err(|e| e.to_string())?;
    if !(close(r.ece, 0.2) && close(r.ece, ece_oracle(&scored, 2))) {
        return Err(format!("ece {} vs 0.2", r.ece));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let n = rng.gen_range(1..40);
        let bins = rng.gen_range(1..15);
        let s: Vec<(f64, bool)> = (0..n).map(|_| (rng.gen_range(0.0..=1.0), rng.gen_bool(0.6))).collect();
        let got = ece(&s, bins).map_err(|e| e.to_string())?.ece;
        let brute = ece_oracle(&s, bins);
        if (got - brute).abs() > 1e-12 {
            return Err(format!("random ece {got} vs oracle {brute}"));
        }
    }
    notes.push("iou, recall, retrieval, ece match oracles".into());
    Ok(notes.join("; "))
}

// ---------------------------------------------------------------- 3

fn mad_window() -> WindowConfig {
    WindowConfig { window_secs: 125.0, stride_secs: 25.0, frames_per_window: 250 }
}

fn oracle_recursion() -> Outcome {
    let t = Instant::now();
    let (videos, queries) = synth_corpus(&SynthConfig {
        videos: 50,
        duration_secs: 7200.0,
        dim: 4,
        snr: f64::INFINITY,
        noise: 0.0,
        queries_per_video: 1,
        words_per_query: 1,
        seed: 3,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let oracle = OracleGrounder::new(Vocab::new(256));
    let truths: Vec<Option<(f64, f64)>> = queries.iter().map(|q| q.span).collect();
    let mut worst = 1.0f64;
    let mut sparse_frac = 0.0f64;
    let mut inverse_frac = 1.0f64;
    for variant in Variant::ALL {
        for levels in 1..=3 {
            let cfg = HierarchyConfig { levels, variant, ..HierarchyConfig::default() };
            let out = infer_all(&oracle, &videos, &queries, &mad_window(), &cfg).map_err(|e| e.to_string())?;
            let lines: Vec<_> = out.iter().flat_map(|o| o.lines.clone()).collect();
            let r1 = recall_k_iou(&ranked_intervals(&lines, &queries), &truths, 1, 0.7).map_err(|e| e.to_string())?;
            worst = worst.min(r1);
            let frac = out.iter().map(|o| o.frames_fraction).fold(0.0, f64::max);
            if variant.is_inverse() {
                inverse_frac = inverse_frac.min(out.iter().map(|o| o.frames_fraction).fold(1.0, f64::min));
            } else if levels >= 2 {
                sparse_frac = sparse_frac.max(frac);
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(
        worst == 1.0 && sparse_frac < 0.25 && inverse_frac == 1.0 && secs < 120.0,
        format!("min R1@0.7 {worst:.3} over 4 variants x L1..3; frames fraction: default max {sparse_frac:.4}, inverse min {inverse_frac:.2}; {secs:.1}s"),
    )
}

// ---------------------------------------------------------------- shared toy training

struct Toy {
    cfg: RunConfig,
    test_videos: Vec<FeatureSequence>,
    test_queries: Vec<QuerySpec>,
    after_dense: ParamStore,
    model: Model,
    train_secs: f64,
    /// Per stage: parameters outside the trainable prefixes kept bit-identical.
    frozen_ok: Vec<(Stage, bool)>,
}

fn bits_outside(store: &ParamStore, stage: Stage) -> Vec<(String, Vec<u64>)> {
    let train = stage.trainable();
    store
        .entries()
        .iter()
        .filter(|e| !train.iter().any(|p| e.name.starts_with(p)))
        .map(|e| (e.name.clone(), e.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn run_stage(model: &mut Model, cfg: &RunConfig, stage: Stage, data: &TrainData<'_>) -> bool {
    let before = bits_outside(&model.store, stage);
    let plan = cfg.plan(stage);
    match stage {
        Stage::S1Dense => trainer::train_stage1_dense(model, &plan, data),
        Stage::S1Adapter => trainer::train_stage1_adapter(model, &plan, data),
        Stage::S2Long => trainer::train_stage2_long(model, &plan, data),
        Stage::Unified => trainer::train_unified_alternating(model, &plan, data, true),
    }
    .expect("stage trains");
    before == bits_outside(&model.store, stage)
}

fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let cfg = RunConfig::toy();
        let (videos, queries) = synth_corpus(&cfg.synth_seeded()).expect("toy corpus");
        let (tv, tq) = cfg.split(&videos, &queries, Split::Train);
        let (test_videos, test_queries) = cfg.split(&videos, &queries, Split::Test);
        let data = TrainData { videos: &tv, queries: &tq, window: cfg.window };
        let t = Instant::now();
        let mut model = Model::init(cfg.adapter.clone(), cfg.decoder.clone(), cfg.seed).expect("init");
        let mut frozen_ok = vec![(Stage::S1Dense, run_stage(&mut model, &cfg, Stage::S1Dense, &data))];
        let after_dense = model.store.clone();
        for stage in [Stage::S1Adapter, Stage::S2Long] {
            frozen_ok.push((stage, run_stage(&mut model, &cfg, stage, &data)));
        }
        let train_secs = t.elapsed().as_secs_f64();
        Toy { cfg, test_videos, test_queries, after_dense, model, train_secs, frozen_ok }
    })
}

fn grounding_r1(model: &Model, toy: &Toy, levels: usize, theta: f64) -> Result<f64, String> {
    let hier = HierarchyConfig { levels, ..toy.cfg.hierarchy.clone() };
    let out = infer_all(&model.grounder(), &toy.test_videos, &toy.test_queries, &toy.cfg.window, &hier).map_err(|e| e.to_string())?;
    let lines: Vec<_> = out.iter().flat_map(|o| o.lines.clone()).collect();
    let truths: Vec<Option<(f64, f64)>> = toy.test_queries.iter().map(|q| q.span).collect();
    recall_k_iou(&ranked_intervals(&lines, &toy.test_queries), &truths, 1, theta).map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- 4

fn hierarchy_gain() -> Outcome {
    let toy = toy();
    let l3 = grounding_r1(&toy.model, toy, 3, 0.5)?;
    let l1 = grounding_r1(&toy.model, toy, 1, 0.5)?;
    let l0 = grounding_r1(&toy.model, toy, 0, 0.5)?;
    ensure(
        l3 >= 0.9 && l0 <= 0.1 && l3 >= l1 && toy.train_secs < 600.0,
        format!(
            "R1@0.5 on {} test queries: L3 {l3:.3}, L1 {l1:.3}, L0 {l0:.3}; training {:.0}s",
            toy.test_queries.len(),
            toy.train_secs
        ),
    )
}

// ---------------------------------------------------------------- 5

fn segment_ece(model: &Model, toy: &Toy) -> Result<(f64, usize), String> {
    let hier = HierarchyConfig { levels: 1, ..toy.cfg.hierarchy.clone() };
    let out = infer_all(&model.grounder(), &toy.test_videos, &toy.test_queries, &toy.cfg.window, &hier).map_err(|e| e.to_string())?;
    let segs: Vec<_> = out.iter().flat_map(|o| o.segments.clone()).collect();
    let r = calibration(&segs, &toy.test_queries, 0.1, 10).map_err(|e| e.to_string())?;
    Ok((r.ece, r.total))
}

fn contrastive_calibration() -> Outcome {
    let toy = toy();
    let with = Model::from_store(toy.after_dense.clone(), toy.cfg.adapter.clone(), toy.cfg.decoder.clone()).map_err(|e| e.to_string())?;

    let (videos, queries) = synth_corpus(&toy.cfg.synth_seeded()).map_err(|e| e.to_string())?;
    let (tv, tq) = toy.cfg.split(&videos, &queries, Split::Train);
    let data = TrainData { videos: &tv, queries: &tq, window: toy.cfg.window };
    let mut plan = toy.cfg.plan(Stage::S1Dense);
    plan.contrastive_ratio = 0.0;
    plan.present_mix = 0.0;
    let mut without = Model::init(toy.cfg.adapter.clone(), toy.cfg.decoder.clone(), toy.cfg.seed).map_err(|e| e.to_string())?;
    trainer::train_stage1_dense(&mut without, &plan, &data).map_err(|e| e.to_string())?;

    let (e_with, n_with) = segment_ece(&with, toy)?;
    let (e_without, n_without) = segment_ece(&without, toy)?;
    ensure(
        e_with < e_without,
        format!(
            "ECE@0.1 over segment decodes: with contrastive {e_with:.4} (n={n_with}), without {e_without:.4} (n={n_without}), gap {:.4}",
            e_without - e_with
        ),
    )
}

// ---------------------------------------------------------------- 6

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.synth.videos = 4;
    cfg.synth.duration_secs = 240.0;
    cfg.test_videos = 1;
    cfg.train.s1_dense.epochs = 1;
    cfg
}

fn tiny_checkpoint(dir: &std::path::Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    let cfg = tiny_config();
    let (videos, queries) = synth_corpus(&cfg.synth_seeded()).map_err(|e| e.to_string())?;
    let (tv, tq) = cfg.split(&videos, &queries, Split::Train);
    let data = TrainData { videos: &tv, queries: &tq, window: cfg.window };
    let mut model = Model::init(cfg.adapter.clone(), cfg.decoder.clone(), cfg.seed).map_err(|e| e.to_string())?;
    trainer::train_stage1_dense(&mut model, &cfg.plan(Stage::S1Dense), &data).map_err(|e| e.to_string())?;
    checkpoint::save(&model.store, dir, &["s1-dense".into()], cfg.seed, &cfg.hash()).map_err(|e| e.to_string())?;
    let read = |f: &str| std::fs::read(dir.join(f)).map_err(|e| e.to_string());
    Ok((read(checkpoint::PAYLOAD_FILE)?, read(checkpoint::MANIFEST_FILE)?))
}

fn corpus_bytes(dir: &std::path::Path) -> Result<Vec<Vec<u8>>, String> {
    let cfg = tiny_config();
    let (videos, queries) = synth_corpus(&cfg.synth_seeded()).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    for v in &videos {
        let p = dir.join(format!("{}.rvff", v.video_id));
        write_features(v, &p).map_err(|e| e.to_string())?;
        out.push(std::fs::read(&p).map_err(|e| e.to_string())?);
        let back = read_features(&p).map_err(|e| e.to_string())?;
        if back != *v {
            return Err(format!("feature round trip changed {}", v.video_id));
        }
    }
    let p = dir.join("queries.rvqf");
    write_queries(&queries, cfg.synth.dim, &p).map_err(|e| e.to_string())?;
    out.push(std::fs::read(&p).map_err(|e| e.to_string())?);
    let (back, dim) = read_queries(&p).map_err(|e| e.to_string())?;
    if back != queries || dim != cfg.synth.dim {
        return Err("query round trip changed the set".into());
    }
    Ok(out)
}

fn predictions_with_threads(threads: usize) -> Result<(String, Vec<QueryOutcome>), String> {
    let toy = toy();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| e.to_string())?;
    let out = pool
        .install(|| infer_all(&toy.model.grounder(), &toy.test_videos, &toy.test_queries, &toy.cfg.window, &toy.cfg.hierarchy))
        .map_err(|e| e.to_string())?;
    let lines: Vec<_> = out.iter().flat_map(|o| o.lines.clone()).collect();
    Ok((to_jsonl(&lines), out))
}

fn determinism() -> Outcome {
    let mut notes = Vec::new();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    std::fs::create_dir_all(&a).map_err(|e| e.to_string())?;
    std::fs::create_dir_all(&b).map_err(|e| e.to_string())?;

    let ca = corpus_bytes(&a)?;
    if ca != corpus_bytes(&b)? {
        return Err("corpus files differ between runs".into());
    }
    notes.push(format!("{} corpus files identical", ca.len()));

    let ka = tiny_checkpoint(&a.join("ckpt"))?;
    if ka != tiny_checkpoint(&b.join("ckpt"))? {
        return Err("checkpoints differ between runs".into());
    }
    let (store, manifest) = checkpoint::load(&a.join("ckpt")).map_err(|e| e.to_string())?;
    if checkpoint::payload(&store) != ka.0 || manifest.model_hash != checkpoint::model_hash(&store) {
        return Err("checkpoint round trip changed the payload".into());
    }
    notes.push("checkpoints identical and round-trip".into());

    let (p1, o1) = predictions_with_threads(1)?;
    let (p4, o4) = predictions_with_threads(4)?;
    if p1 != p4 || o1 != o4 {
        return Err("predictions differ between 1 and 4 threads".into());
    }
    notes.push(format!("predictions identical at 1 and 4 threads ({} bytes)", p1.len()));

    let toy = toy();
    let frozen: Vec<String> = toy.frozen_ok.iter().filter(|(_, ok)| !ok).map(|(s, _)| s.name().to_string()).collect();
    if !frozen.is_empty() {
        return Err(format!("frozen parameters changed in {frozen:?}"));
    }
    notes.push("frozen parameters bit-exact in every stage".into());

    let text = RunConfig::toy().to_toml().map_err(|e| e.to_string())?;
    if RunConfig::from_toml(&text).map_err(|e| e.to_string())? != RunConfig::toy() {
        return Err("config TOML round trip changed the config".into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..300 {
        let n = rng.gen_range(1..8);
        let truths: Vec<Option<(f64, f64)>> = (0..n)
            .map(|_| {
                let s = rng.gen_range(0.0..100.0);
                Some((s, s + rng.gen_range(1.0..20.0)))
            })
            .collect();
        let ranked: Vec<Vec<(f64, f64)>> = (0..n)
            .map(|_| {
                (0..rng.gen_range(0..6))
                    .map(|_| {
                        let s = rng.gen_range(0.0..100.0);
                        (s, s + rng.gen_range(1.0..20.0))
                    })
                    .collect()
            })
            .collect();
        let r = |k, t| recall_k_iou(&ranked, &truths, k, t).unwrap();
        for k in 1..6 {
            for t in [0.0, 0.1, 0.3, 0.5, 0.7, 0.9] {
                if r(k, t) > r(k + 1, t) || r(k, t + 0.05) > r(k, t) {
                    return Err(format!("recall not monotone at k={k}, theta={t}"));
                }
            }
        }
    }
    notes.push("config round trip, recall monotone in k and theta".into());
    Ok(notes.join("; "))
}

// ---------------------------------------------------------------- 7

fn short_videos(seed: u64, dim: usize, snr: f64, noise: f64) -> Result<(Vec<FeatureSequence>, Vec<QuerySpec>), String> {
    synth_corpus(&SynthConfig {
        videos: 20,
        duration_secs: 32.0,
        dim,
        snr,
        noise,
        queries_per_video: 1,
        words_per_query: 2,
        seed,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())
}

fn retrieval() -> Outcome {
    let toy = toy();
    let rc = toy.cfg.retrieval;
    let set = Variant::Default.upper_set();

    let (ov, oq) = short_videos(41, 4, f64::INFINITY, 0.0)?;
    let oracle = OracleGrounder::new(Vocab::new(toy.cfg.decoder.int_tokens));
    let ranks = retrieve_all(&oracle, &ov, &oq, rc.frames_per_video, rc.group, set).map_err(|e| e.to_string())?;
    let oracle_r1 = retrieval_recall_at(&ranks, &oq, 1).map_err(|e| e.to_string())?;

    let s = &toy.cfg.synth;
    let (mv, mq) = short_videos(toy.cfg.seed + 100, s.dim, s.snr, s.noise)?;
    let ranks = retrieve_all(&toy.model.grounder(), &mv, &mq, rc.frames_per_video, rc.group, set).map_err(|e| e.to_string())?;
    let model_r5 = retrieval_recall_at(&ranks, &mq, 5).map_err(|e| e.to_string())?;
    let model_r1 = retrieval_recall_at(&ranks, &mq, 1).map_err(|e| e.to_string())?;
    ensure(
        oracle_r1 == 1.0 && model_r5 >= 0.9,
        format!("oracle R@1 {oracle_r1:.3}; trained R@5 {model_r5:.3} (R@1 {model_r1:.3}) over 20 videos"),
    )
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("gradient checks", gradients),
        ("metric oracles", metric_oracles),
        ("oracle recursion", oracle_recursion),
        ("hierarchy beats flat", hierarchy_gain),
        ("contrastive calibration", contrastive_calibration),
        ("determinism and contracts", determinism),
        ("video retrieval", retrieval),
    ];
    let quiet = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let took = Duration::from_secs_f64(t.elapsed().as_secs_f64());
        match r {
            Ok(d) => println!("[PASS] {} {name}: {d} [{took:.1?}]", i + 1),
            Err(d) => {
                failed += 1;
                println!("[FAIL] {} {name}: {d} [{took:.1?}]", i + 1);
            }
        }
    }
    std::panic::set_hook(quiet);
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
