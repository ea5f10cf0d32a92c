//! Toy causal decoder standing in for the language model.
//!
//! A prompt is `[visual rows; BOS, marker, query rows, marker]` followed by
//! the answer tokens. Every row gets a learned positional embedding. Two
//! independent parameter sets exist: `bottom` for frame-level decoding and
//! `upper` for sparse-token levels.

mod vocab;

pub use vocab::{parse_answer, Answer, Special, Template, Vocab, SPECIAL_COUNT};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::Adapter;
use crate::numkernel::block::{block_forward, block_forward_cached, init_block, lookup_block, norm, BlockIds, KvCache, NormIds, LN_EPS};
use crate::numkernel::{ops, Graph, KernelError, Matrix, ParamId, ParamStore, Var};

#[derive(Debug, thiserror::Error)]
pub enum DecoderError {
    #[error("sequence of length {len} exceeds positional capacity {capacity}")]
    CapacityExceeded { len: usize, capacity: usize },
    #[error("malformed answer: {0}")]
    MalformedAnswer(String),
    #[error("loss needs at least one target token")]
    EmptyTarget,
    #[error("integer token {value} outside vocabulary range 0..{bound}")]
    TokenOutOfRange { value: usize, bound: usize },
    #[error("level {level} expects {expected} visual features")]
    LevelMismatch { level: usize, expected: &'static str },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub dec_dim: usize,
    pub blocks: usize,
    pub capacity: usize,
    pub int_tokens: usize,
    pub ffn_expansion: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { dec_dim: 64, blocks: 2, capacity: 512, int_tokens: 256, ffn_expansion: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamSet {
    Bottom,
    Upper,
}

impl ParamSet {
    pub fn prefix(self) -> &'static str {
        match self {
            ParamSet::Bottom => "decoder.bottom.",
            ParamSet::Upper => "decoder.upper.",
        }
    }
}

#[derive(Debug, Clone)]
struct SetIds {
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<BlockIds>,
    final_norm: NormIds,
    out_w: ParamId,
    out_b: ParamId,
}

/// Sinusoidal table used to initialize positions and integer tokens.
fn sinusoid(rows: usize, d: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, d);
    for p in 0..rows {
        for i in 0..d {
            let freq = (-(100f64.ln()) * (2 * (i / 2)) as f64 / d as f64).exp();
            let a = p as f64 * freq;
            m.set(p, i, if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    m
}

/// Embedding rows fed to the decoder, before positional embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub rows: Matrix,
    pub visual_len: usize,
}

impl Prompt {
    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Visual input of one decoder call.
#[derive(Debug, Clone, Copy)]
pub enum Visual<'a> {
    /// Already projected dense features, `n_f × D_dec` (level 1 only).
    Dense(&'a Matrix),
    /// Sparse features, `k × D`, projected by the adapter (levels ≥ 2).
    Sparse(&'a Matrix),
}

/// Greedy decode result: tokens and the full distribution at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub dists: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    cfg: DecoderConfig,
    vocab: Vocab,
    bottom: SetIds,
    upper: SetIds,
}

impl Decoder {
    pub fn init<R: Rng>(store: &mut ParamStore, cfg: DecoderConfig, rng: &mut R) -> Result<Self, KernelError> {
        let vocab = Vocab::new(cfg.int_tokens);
        let bottom = Self::init_set(store, ParamSet::Bottom, &cfg, &vocab, rng)?;
        let upper = Self::init_set(store, ParamSet::Upper, &cfg, &vocab, rng)?;
        Ok(Self { cfg, vocab, bottom, upper })
    }

    fn init_set<R: Rng>(
        store: &mut ParamStore,
        set: ParamSet,
        cfg: &DecoderConfig,
        vocab: &Vocab,
        rng: &mut R,
    ) -> Result<SetIds, KernelError> {
        let p = set.prefix();
        let d = cfg.dec_dim;
        let v = vocab.size();
        let table = sinusoid(cfg.capacity.max(cfg.int_tokens), d);
        let tok = store.insert_normal(format!("{p}tok"), v, d, 1.0, rng)?;
        let pos = store.insert(format!("{p}pos"), table.slice_rows(0, cfg.capacity))?;
        let blocks = (0..cfg.blocks)
            .map(|i| init_block(store, &format!("{p}blk.{i}"), d, cfg.ffn_expansion, false, rng))
            .collect::<Result<Vec<_>, _>>()?;
        let final_norm = NormIds {
            gain: store.insert(format!("{p}lnf.g"), Matrix::filled(1, d, 1.0))?,
            bias: store.insert(format!("{p}lnf.b"), Matrix::zeros(1, d))?,
        };
        let out_w = store.insert_normal(format!("{p}out.w"), d, v, 0.5 / (d as f64).sqrt(), rng)?;
        let out_b = store.insert(format!("{p}out.b"), Matrix::zeros(1, v))?;
        // Integer tokens start aligned with positions: embedding row k and
        // output column k follow positional row k.
        for k in 0..cfg.int_tokens {
            let t = SPECIAL_COUNT + k;
            store.value_mut(tok).row_mut(t).copy_from_slice(table.row(k));
            for j in 0..d {
                store.value_mut(out_w).set(j, t, 0.3 * table.get(k, j));
            }
        }
        Ok(SetIds { tok, pos, blocks, final_norm, out_w, out_b })
    }

    pub fn lookup(store: &ParamStore, cfg: DecoderConfig) -> Result<Self, KernelError> {
        let set = |s: ParamSet| -> Result<SetIds, KernelError> {
            let p = s.prefix();
            Ok(SetIds {
                tok: store.id(&format!("{p}tok"))?,
                pos: store.id(&format!("{p}pos"))?,
                blocks: (0..cfg.blocks).map(|i| lookup_block(store, &format!("{p}blk.{i}"), false)).collect::<Result<_, _>>()?,
                final_norm: NormIds { gain: store.id(&format!("{p}lnf.g"))?, bias: store.id(&format!("{p}lnf.b"))? },
                out_w: store.id(&format!("{p}out.w"))?,
                out_b: store.id(&format!("{p}out.b"))?,
            })
        };
        Ok(Self { cfg, vocab: Vocab::new(cfg.int_tokens), bottom: set(ParamSet::Bottom)?, upper: set(ParamSet::Upper)? })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn ids(&self, set: ParamSet) -> &SetIds {
        match set {
            ParamSet::Bottom => &self.bottom,
            ParamSet::Upper => &self.upper,
        }
    }

    /// Number of template rows around `query_words` query rows.
    pub fn template_len(query_words: usize) -> usize {
        query_words + 3
    }

    fn check_capacity(&self, len: usize) -> Result<(), DecoderError> {
        if len > self.cfg.capacity {
            Err(DecoderError::CapacityExceeded { len, capacity: self.cfg.capacity })
        } else {
            Ok(())
        }
    }

    /// Prompt rows `[BOS, marker, query + QSLOT, visual, marker]` on the graph.
    pub fn g_prompt(
        &self,
        g: &mut Graph<'_>,
        set: ParamSet,
        visual: Var,
        query: Var,
        template: Template,
    ) -> Result<Var, DecoderError> {
        let ids = self.ids(set);
        let m = template.marker();
        let head = g.gather(ids.tok, &[Special::Bos as usize, m])?;
        let slot = g.gather(ids.tok, &[Special::QSlot as usize])?;
        let q = g.add_row(query, slot)?;
        let tail = g.gather(ids.tok, &[m])?;
        Ok(g.concat_rows(&[head, q, visual, tail])?)
    }

    /// Runs the decoder on `prompt` followed by `answer_prefix` tokens and
    /// returns logits for rows `from..` of the combined sequence.
    pub fn g_logits(
        &self,
        g: &mut Graph<'_>,
        set: ParamSet,
        prompt: Var,
        answer_prefix: &[usize],
        from: usize,
    ) -> Result<Var, DecoderError> {
        let ids = self.ids(set);
        let p = g.value(prompt).rows();
        let len = p + answer_prefix.len();
        self.check_capacity(len)?;
        let mut x = if answer_prefix.is_empty() {
            prompt
        } else {
            let a = g.gather(ids.tok, answer_prefix)?;
            g.concat_rows(&[prompt, a])?
        };
        let pos_rows: Vec<usize> = (0..len).collect();
        let pos = g.gather(ids.pos, &pos_rows)?;
        x = g.add(x, pos)?;
        for b in &ids.blocks {
            x = block_forward(g, b, x, None, Some(0))?;
        }
        let x = g.slice_rows(x, from, len - from)?;
        let x = norm(g, ids.final_norm, x)?;
        let (w, bias) = (g.param(ids.out_w), g.param(ids.out_b));
        Ok(g.linear(x, w, bias)?)
    }

    /// Mean negative log-likelihood of `answer` (full token sequence,
    /// `EOS` included) after `prompt`.
    pub fn g_loss(&self, g: &mut Graph<'_>, set: ParamSet, prompt: Var, answer: &[usize]) -> Result<Var, DecoderError> {
        if answer.is_empty() {
            return Err(DecoderError::EmptyTarget);
        }
        let p = g.value(prompt).rows();
        let logits = self.g_logits(g, set, prompt, &answer[..answer.len() - 1], p - 1)?;
        Ok(g.cross_entropy(logits, answer)?)
    }

    /// Logits at every position of `prompt` followed by `answer_prefix`.
    pub fn forward(&self, store: &ParamStore, set: ParamSet, prompt: &Prompt, answer_prefix: &[usize]) -> Result<Matrix, DecoderError> {
        let mut g = Graph::new(store);
        let p = g.input(prompt.rows.clone());
        let l = self.g_logits(&mut g, set, p, answer_prefix, 0)?;
        Ok(g.value(l).clone())
    }

    fn embed_step(&self, store: &ParamStore, ids: &SetIds, rows: &Matrix, start: usize) -> Result<Matrix, DecoderError> {
        self.check_capacity(start + rows.rows())?;
        let pos = store.value(ids.pos).slice_rows(start, rows.rows());
        Ok(rows.add(&pos)?)
    }

    fn head(&self, store: &ParamStore, ids: &SetIds, hidden_row: &Matrix) -> Result<Vec<f64>, DecoderError> {
        let fnorm = ops::layer_norm(
            hidden_row,
            store.value(ids.final_norm.gain).row(0),
            store.value(ids.final_norm.bias).row(0),
            LN_EPS,
        )?;
        let logits = ops::linear(&fnorm, store.value(ids.out_w), store.value(ids.out_b).row(0))?;
        Ok(ops::softmax_rows(&logits).row(0).to_vec())
    }

    /// Greedy decoding with cached keys and values. Ties go to the lowest
    /// token id; decoding stops after `EOS` or `max_len` tokens.
    pub fn greedy_decode(&self, store: &ParamStore, set: ParamSet, prompt: &Prompt, max_len: usize) -> Result<Decoded, DecoderError> {
        let ids = self.ids(set);
        let mut caches = vec![KvCache::default(); ids.blocks.len()];
        let mut x = self.embed_step(store, ids, &prompt.rows, 0)?;
        let mut len = prompt.len();
        let mut out = Decoded { tokens: Vec::new(), dists: Vec::new() };
        for step in 0..max_len {
            for (b, c) in ids.blocks.iter().zip(caches.iter_mut()) {
                x = block_forward_cached(store, b, &x, c)?;
            }
            let last = x.slice_rows(x.rows() - 1, 1);
            let dist = self.head(store, ids, &last)?;
            let tok = dist.iter().enumerate().fold(0, |best, (i, &p)| if p > dist[best] { i } else { best });
            out.tokens.push(tok);
            out.dists.push(dist);
            if tok == Special::Eos as usize || step + 1 == max_len {
                break;
            }
            let row = store.value(ids.tok).slice_rows(tok, 1);
            x = self.embed_step(store, ids, &row, len)?;
            len += 1;
        }
        Ok(out)
    }

    /// Assembles a prompt. Dense features belong to level 1 and sparse
    /// features to levels ≥ 2.
    pub fn build_prompt(
        &self,
        store: &ParamStore,
        adapter: &Adapter,
        set: ParamSet,
        level: usize,
        visual: Visual<'_>,
        query: &Matrix,
        template: Template,
    ) -> Result<Prompt, DecoderError> {
        let mut g = Graph::new(store);
        let (vis, visual_len) = match (level, visual) {
            (1, Visual::Dense(m)) => (g.input(m.clone()), m.rows()),
            (l, Visual::Sparse(m)) if l >= 2 => {
                let s = g.input(m.clone());
                (adapter.g_sparse_project(&mut g, s)?, m.rows())
            }
            (1, _) => return Err(DecoderError::LevelMismatch { level, expected: "dense" }),
            _ => return Err(DecoderError::LevelMismatch { level, expected: "sparse" }),
        };
        let q = g.input(query.clone());
        let q = adapter.g_query_project(&mut g, q)?;
        let p = self.g_prompt(&mut g, set, vis, q, template)?;
        let rows = g.value(p).clone();
        self.check_capacity(rows.rows())?;
        Ok(Prompt { rows, visual_len })
    }

    /// Prompt for the bottom level from raw `n_f × D` frames.
    pub fn dense_prompt(
        &self,
        store: &ParamStore,
        adapter: &Adapter,
        set: ParamSet,
        frames: &Matrix,
        query: &Matrix,
        template: Template,
    ) -> Result<Prompt, DecoderError> {
        let dense = adapter.dense_project(store, frames)?;
        self.build_prompt(store, adapter, set, 1, Visual::Dense(&dense), query, template)
    }
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits` (one row per answer token).
pub fn loss_eq3(logits: &Matrix, targets: &[usize]) -> Result<f64, DecoderError> {
    if targets.is_empty() {
        return Err(DecoderError::EmptyTarget);
    }
    Ok(ops::cross_entropy(logits, targets)?.0)
}
