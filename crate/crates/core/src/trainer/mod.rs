//! Progressive training: dense boundaries, then the sparse adapter against a
//! frozen decoder, then upper-level grounding over sparse tokens, plus the
//! alternating single-set schedule.

mod data;

pub use data::{build_adapter_batches, build_stage1_batches, build_stage2_batches, overlapping_segments, TrainData};

use std::fmt::Write as _;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, AdapterConfig, DENSE_PREFIXES, SPARSE_PREFIXES};
use crate::corpus::{make_windows, sample_frames, segments, CorpusError};
use crate::decoder::{Answer, Decoder, DecoderConfig, DecoderError, ParamSet, Template};
use crate::numkernel::{adamw_step, cosine_warmup_lr, Graph, KernelError, Matrix, OptimHyper, ParamStore, Var};
use crate::recursion::ModelGrounder;
use crate::rng::substream;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("loss diverged in {stage:?} at step {step}")]
    DivergenceDetected { stage: Stage, step: u64 },
    #[error("no training data: {0}")]
    NoData(String),
    #[error("invalid stage plan: {0}")]
    BadPlan(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    S1Dense,
    S1Adapter,
    S2Long,
    Unified,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::S1Dense, Stage::S1Adapter, Stage::S2Long, Stage::Unified];

    pub fn name(self) -> &'static str {
        match self {
            Stage::S1Dense => "s1-dense",
            Stage::S1Adapter => "s1-adapter",
            Stage::S2Long => "s2-long",
            Stage::Unified => "unified",
        }
    }

    /// Name prefixes of the parameters this stage updates. Everything else
    /// is frozen.
    pub fn trainable(self) -> Vec<&'static str> {
        match self {
            Stage::S1Dense => {
                let mut p = DENSE_PREFIXES.to_vec();
                p.push(ParamSet::Bottom.prefix());
                p
            }
            Stage::S1Adapter => SPARSE_PREFIXES.to_vec(),
            Stage::S2Long => vec![ParamSet::Upper.prefix()],
            Stage::Unified => vec![ParamSet::Bottom.prefix()],
        }
    }

    /// Decoder set whose loss this stage minimizes.
    pub fn set(self) -> ParamSet {
        match self {
            Stage::S2Long => ParamSet::Upper,
            _ => ParamSet::Bottom,
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self, TrainError> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| TrainError::BadPlan(format!("unknown stage {s}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Polarity {
    Positive,
    Contrastive,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    /// The short window at `start` seconds of `video`, optionally cropped to
    /// rows `lo..lo + len`.
    Dense { video: usize, start: f64, crop: Option<(usize, usize)> },
    /// Sparse tokens of segments `range` in the query's own video.
    Sparse { range: Range<usize> },
}

/// Level 1 feeds dense rows; level 2 with a dense source condenses the
/// window through the adapter; a sparse source uses cached sparse tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub query: usize,
    pub template: Template,
    pub level: usize,
    pub source: Source,
    pub target: Answer,
    pub polarity: Polarity,
    /// Seed of a signed permutation applied to the feature axis of both
    /// frames and query.
    pub augment: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagePlan {
    pub epochs: usize,
    pub batch: usize,
    /// `total_steps` is derived from the epochs and is ignored here.
    pub hyper: OptimHyper,
    /// Contrastive examples per positive.
    pub contrastive_ratio: f64,
    /// Share of contrastive windows showing another query's event.
    pub hard_fraction: f64,
    /// Random-start positives per query and epoch, on top of the grid.
    pub jitter: usize,
    /// Share of stage-1 examples asked as PRESENT over a crop.
    pub present_mix: f64,
    /// Share of stage-2 examples asked as WHICH.
    pub which_mix: f64,
    /// Event-bearing sparse ranges per query and epoch.
    pub long_per_query: usize,
    /// Longest sparse range.
    pub max_group: usize,
    /// Signed feature permutations on dense examples.
    pub augment: bool,
    pub seed: u64,
}

impl Default for StagePlan {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch: 16,
            hyper: OptimHyper { lr: 3e-3, ..OptimHyper::default() },
            contrastive_ratio: 1.0,
            hard_fraction: 0.5,
            jitter: 3,
            present_mix: 0.25,
            which_mix: 0.2,
            long_per_query: 4,
            max_group: 64,
            augment: true,
            seed: 0,
        }
    }
}

impl StagePlan {
    pub fn validate(&self) -> Result<(), TrainError> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if self.epochs == 0 || self.batch == 0 || self.max_group == 0 {
            return Err(TrainError::BadPlan("epochs, batch and max_group must be positive".into()));
        }
        if !(self.contrastive_ratio >= 0.0 && self.contrastive_ratio.is_finite()) {
            return Err(TrainError::BadPlan(format!("contrastive ratio {}", self.contrastive_ratio)));
        }
        if !(unit(self.hard_fraction) && unit(self.present_mix) && unit(self.which_mix)) {
            return Err(TrainError::BadPlan("mix fractions must lie in [0, 1]".into()));
        }
        Ok(OptimHyper { total_steps: 1, ..self.hyper }.validate()?)
    }
}

/// Adapter and decoder weights in one store.
#[derive(Debug, Clone)]
pub struct Model {
    pub store: ParamStore,
    pub adapter: Adapter,
    pub decoder: Decoder,
}

impl Model {
    /// Fresh weights drawn from the `init` sub-stream of `seed`.
    pub fn init(adapter: AdapterConfig, decoder: DecoderConfig, seed: u64) -> Result<Self, TrainError> {
        let mut rng = substream(seed, "init");
        let mut store = ParamStore::new();
        let adapter = Adapter::init(&mut store, adapter, &mut rng)?;
        let decoder = Decoder::init(&mut store, decoder, &mut rng)?;
        Ok(Self { store, adapter, decoder })
    }

    pub fn from_store(store: ParamStore, adapter: AdapterConfig, decoder: DecoderConfig) -> Result<Self, TrainError> {
        let adapter = Adapter::lookup(&store, adapter)?;
        let decoder = Decoder::lookup(&store, decoder)?;
        Ok(Self { store, adapter, decoder })
    }

    pub fn grounder(&self) -> ModelGrounder<'_> {
        ModelGrounder::new(&self.store, &self.adapter, &self.decoder)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    /// `short`, `long` or `main`.
    pub stream: String,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<LossRecord>,
}

impl TrainReport {
    pub fn stream(&self, name: &str) -> Vec<f64> {
        self.records.iter().filter(|r| r.stream == name).map(|r| r.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,stream,lr,loss\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{:e},{:e}", r.step, r.stream, r.lr, r.loss);
        }
        s
    }
}

/// Sparse tokens of every segment of each query's video, one `n × D`
/// matrix per query, from the current adapter weights.
pub fn sparse_cache(model: &Model, data: &TrainData<'_>) -> Result<Vec<Matrix>, TrainError> {
    let video_of = data.video_of()?;
    let mut segs = Vec::with_capacity(data.videos.len());
    for v in data.videos {
        segs.push(segments(v, &data.window)?);
    }
    data.queries
        .iter()
        .zip(&video_of)
        .map(|(q, &v)| {
            let rows = model.adapter.sparse_batch(&model.store, &segs[v], &q.embedding)?;
            let refs: Vec<&Matrix> = rows.iter().collect();
            Ok(Matrix::vstack(&refs)?)
        })
        .collect()
}

/// Window starts of every video.
pub fn window_starts(data: &TrainData<'_>) -> Result<Vec<Vec<f64>>, TrainError> {
    data.videos
        .iter()
        .map(|v| Ok(make_windows(v.len(), v.fps, &data.window)?.into_iter().map(|(_, s)| s).collect()))
        .collect()
}

/// Column permutation with random signs, drawn from `seed`.
pub fn signed_permutation(dim: usize, seed: u64) -> (Vec<usize>, Vec<f64>) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..dim).collect();
    perm.shuffle(&mut rng);
    let signs = (0..dim).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
    (perm, signs)
}

/// Column `j` of the result is `signs[j] · m[:, perm[j]]`.
pub fn permute_cols(m: &Matrix, perm: &[usize], signs: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        for (j, (&p, &s)) in perm.iter().zip(signs).enumerate() {
            out.set(r, j, s * m.get(r, p));
        }
    }
    out
}

/// Loss of one example on `g`.
pub fn example_loss(
    g: &mut Graph<'_>,
    model: &Model,
    data: &TrainData<'_>,
    sparse: &[Matrix],
    set: ParamSet,
    ex: &TrainExample,
) -> Result<Var, TrainError> {
    let mut query = data.queries[ex.query].embedding.clone();
    let visual = match (&ex.source, ex.level) {
        (Source::Dense { video, start, crop }, level) => {
            let mut frames = sample_frames(&data.videos[*video], *start, &data.window)?;
            if let Some((lo, len)) = crop {
                frames = frames.slice_rows(*lo, *len);
            }
            if let Some(seed) = ex.augment {
                let (perm, signs) = signed_permutation(frames.cols(), seed);
                frames = permute_cols(&frames, &perm, &signs);
                query = permute_cols(&query, &perm, &signs);
            }
            let x = g.input(frames);
            let query = g.input(query.clone());
            if level == 1 {
                model.adapter.g_dense_project(g, x)?
            } else {
                let s = model.adapter.g_sparse_feature(g, x, query)?;
                model.adapter.g_sparse_project(g, s)?
            }
        }
        (Source::Sparse { range }, _) => {
            let m = &sparse[ex.query];
            if range.is_empty() || range.end > m.rows() {
                return Err(TrainError::NoData(format!("sparse range {range:?} outside {} segments", m.rows())));
            }
            let x = g.input(m.slice_rows(range.start, range.len()));
            model.adapter.g_sparse_project(g, x)?
        }
    };
    let query = g.input(query);
    let q = model.adapter.g_query_project(g, query)?;
    let prompt = model.decoder.g_prompt(g, set, visual, q, ex.template)?;
    let target = ex.target.tokens(model.decoder.vocab())?;
    Ok(model.decoder.g_loss(g, set, prompt, &target)?)
}

/// Mean loss of `batch` without touching gradients.
pub fn batch_loss(model: &Model, data: &TrainData<'_>, sparse: &[Matrix], set: ParamSet, batch: &[TrainExample]) -> Result<f64, TrainError> {
    let losses = batch
        .par_iter()
        .map(|ex| {
            let mut g = Graph::new(&model.store);
            let l = example_loss(&mut g, model, data, sparse, set, ex)?;
            Ok(g.value(l).get(0, 0))
        })
        .collect::<Result<Vec<f64>, TrainError>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// One optimizer step on `batch`. Per-example gradients are computed in
/// parallel and summed in batch order, so the update matches a sequential
/// pass bit for bit.
fn train_step(model: &mut Model, data: &TrainData<'_>, sparse: &[Matrix], set: ParamSet, batch: &[TrainExample], hyper: &OptimHyper, lr: f64) -> Result<f64, TrainError> {
    let results = batch
        .par_iter()
        .map(|ex| {
            let mut g = Graph::new(&model.store);
            let l = example_loss(&mut g, model, data, sparse, set, ex)?;
            Ok((g.value(l).get(0, 0), g.backward(l)?))
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    model.store.zero_grads();
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for (l, grads) in &results {
        loss += l * scale;
        grads.accumulate_into(&mut model.store, scale)?;
    }
    if loss.is_finite() {
        adamw_step(&mut model.store, hyper, lr);
    }
    Ok(loss)
}

/// Runs `steps` (stream name, batch) pairs under one warmup/cosine
/// schedule with only `stage`'s parameters trainable.
fn optimize(
    model: &mut Model,
    stage: Stage,
    plan: &StagePlan,
    data: &TrainData<'_>,
    sparse: &[Matrix],
    steps: &[(&'static str, Vec<TrainExample>)],
) -> Result<TrainReport, TrainError> {
    if steps.is_empty() {
        return Err(TrainError::NoData(format!("{} has no batches", stage.name())));
    }
    let hyper = OptimHyper { total_steps: steps.len() as u64, ..plan.hyper };
    model.store.set_trainable_prefixes(&stage.trainable());
    model.store.reset_optimizer_state();
    let mut report = TrainReport::default();
    for (i, (stream, batch)) in steps.iter().enumerate() {
        let step = i as u64;
        let lr = cosine_warmup_lr(step, &hyper)?;
        let loss = train_step(model, data, sparse, stage.set(), batch, &hyper, lr)?;
        if !loss.is_finite() {
            return Err(TrainError::DivergenceDetected { stage, step });
        }
        report.records.push(LossRecord { step, stream: (*stream).to_string(), lr, loss });
        if step % 100 == 0 {
            log::info!("{} step {step}/{} {stream} loss {loss:.4}", stage.name(), steps.len());
        }
    }
    model.store.set_all_trainable(true);
    Ok(report)
}

fn epochs<F>(plan: &StagePlan, stage: Stage, mut build: F) -> Result<Vec<Vec<TrainExample>>, TrainError>
where
    F: FnMut(&mut rand_chacha::ChaCha8Rng) -> Result<Vec<Vec<TrainExample>>, TrainError>,
{
    let mut out = Vec::new();
    for e in 0..plan.epochs {
        let mut rng = substream(plan.seed, &format!("sampler/{}/{e}", stage.name()));
        let mut batches = build(&mut rng)?;
        if plan.augment {
            for ex in batches.iter_mut().flatten().filter(|ex| matches!(ex.source, Source::Dense { .. })) {
                ex.augment = Some(rng.gen());
            }
        }
        out.extend(batches);
    }
    Ok(out)
}

fn tag(batches: Vec<Vec<TrainExample>>, stream: &'static str) -> Vec<(&'static str, Vec<TrainExample>)> {
    batches.into_iter().map(|b| (stream, b)).collect()
}

/// Dense GROUND training (with PRESENT crops) of the dense projections and
/// the bottom decoder set.
pub fn train_stage1_dense(model: &mut Model, plan: &StagePlan, data: &TrainData<'_>) -> Result<TrainReport, TrainError> {
    plan.validate()?;
    let batches = epochs(plan, Stage::S1Dense, |rng| build_stage1_batches(data, plan, rng))?;
    optimize(model, Stage::S1Dense, plan, data, &[], &tag(batches, "main"))
}

/// PRESENT training of the sparse path against the frozen decoder.
pub fn train_stage1_adapter(model: &mut Model, plan: &StagePlan, data: &TrainData<'_>) -> Result<TrainReport, TrainError> {
    plan.validate()?;
    let batches = epochs(plan, Stage::S1Adapter, |rng| build_adapter_batches(data, plan, rng))?;
    optimize(model, Stage::S1Adapter, plan, data, &[], &tag(batches, "main"))
}

/// Upper-set GROUND/WHICH training over cached sparse tokens. The upper set
/// starts as a copy of the bottom set.
pub fn train_stage2_long(model: &mut Model, plan: &StagePlan, data: &TrainData<'_>) -> Result<TrainReport, TrainError> {
    plan.validate()?;
    check_group(model, plan)?;
    model.store.copy_prefix(ParamSet::Bottom.prefix(), ParamSet::Upper.prefix())?;
    let sparse = sparse_cache(model, data)?;
    let starts = window_starts(data)?;
    let batches = epochs(plan, Stage::S2Long, |rng| build_stage2_batches(data, &starts, plan, rng))?;
    optimize(model, Stage::S2Long, plan, data, &sparse, &tag(batches, "main"))
}

/// Alternating schedule on the bottom set alone: even steps draw short
/// windows, odd steps sparse ranges. With `alternate = false` every step is
/// a long batch.
pub fn train_unified_alternating(
    model: &mut Model,
    plan: &StagePlan,
    data: &TrainData<'_>,
    alternate: bool,
) -> Result<TrainReport, TrainError> {
    plan.validate()?;
    check_group(model, plan)?;
    let sparse = sparse_cache(model, data)?;
    let starts = window_starts(data)?;
    let long = epochs(plan, Stage::Unified, |rng| build_stage2_batches(data, &starts, plan, rng))?;
    let steps = if alternate {
        let short = epochs(plan, Stage::S1Dense, |rng| build_stage1_batches(data, plan, rng))?;
        let n = short.len().min(long.len());
        let mut steps = Vec::with_capacity(2 * n);
        for (s, l) in short.into_iter().zip(long).take(n) {
            steps.push(("short", s));
            steps.push(("long", l));
        }
        steps
    } else {
        tag(long, "long")
    };
    optimize(model, Stage::Unified, plan, data, &sparse, &steps)
}

fn check_group(model: &Model, plan: &StagePlan) -> Result<(), TrainError> {
    if plan.max_group > model.decoder.config().int_tokens {
        return Err(TrainError::BadPlan(format!(
            "max_group {} exceeds {} integer tokens",
            plan.max_group,
            model.decoder.config().int_tokens
        )));
    }
    Ok(())
}
