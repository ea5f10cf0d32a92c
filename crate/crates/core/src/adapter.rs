//! Hierarchical adapter: per-frame dense projection for the bottom level and
//! a text-aligned condensation of each segment into one sparse token.
//!
//! No positional encodings are used, so text alignment is equivariant and
//! condensation invariant under frame permutations.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Segment;
use crate::numkernel::block::{block_forward, init_block, lookup_block, BlockIds};
use crate::numkernel::{Graph, KernelError, Matrix, ParamId, ParamStore, Var};

pub const PREFIX: &str = "adapter.";
/// Parameters trained with the bottom decoder: dense and query projections.
pub const DENSE_PREFIXES: [&str; 2] = ["adapter.dense.", "adapter.query."];
/// Parameters trained on the yes/no objective.
pub const SPARSE_PREFIXES: [&str; 4] = ["adapter.cross.", "adapter.self.", "adapter.seed", "adapter.sparse."];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub dim: usize,
    pub dec_dim: usize,
    pub cross_blocks: usize,
    pub self_blocks: usize,
    pub ffn_expansion: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { dim: 32, dec_dim: 64, cross_blocks: 2, self_blocks: 2, ffn_expansion: 2 }
    }
}

#[derive(Debug, Clone, Copy)]
struct Projection {
    w: ParamId,
    b: ParamId,
}

/// Handles to the adapter parameters inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adapter {
    cfg: AdapterConfig,
    cross: Vec<BlockIds>,
    selfs: Vec<BlockIds>,
    seed: ParamId,
    dense: Projection,
    sparse: Projection,
    query: Projection,
}

fn init_projection<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    cfg: &AdapterConfig,
    rng: &mut R,
) -> Result<Projection, KernelError> {
    let std = 1.0 / (cfg.dim as f64).sqrt();
    Ok(Projection {
        w: store.insert_normal(format!("{PREFIX}{name}.w"), cfg.dim, cfg.dec_dim, std, rng)?,
        b: store.insert(format!("{PREFIX}{name}.b"), Matrix::zeros(1, cfg.dec_dim))?,
    })
}

fn lookup_projection(store: &ParamStore, name: &str) -> Result<Projection, KernelError> {
    Ok(Projection { w: store.id(&format!("{PREFIX}{name}.w"))?, b: store.id(&format!("{PREFIX}{name}.b"))? })
}

fn check_cols(op: &'static str, m: &Matrix, d: usize) -> Result<(), KernelError> {
    if m.cols() == d {
        Ok(())
    } else {
        Err(KernelError::Shape { op, left: m.shape(), right: (m.rows(), d) })
    }
}

impl Adapter {
    pub fn init<R: Rng>(store: &mut ParamStore, cfg: AdapterConfig, rng: &mut R) -> Result<Self, KernelError> {
        let cross = (0..cfg.cross_blocks)
            .map(|i| init_block(store, &format!("{PREFIX}cross.{i}"), cfg.dim, cfg.ffn_expansion, true, rng))
            .collect::<Result<_, _>>()?;
        let selfs = (0..cfg.self_blocks)
            .map(|i| init_block(store, &format!("{PREFIX}self.{i}"), cfg.dim, cfg.ffn_expansion, false, rng))
            .collect::<Result<_, _>>()?;
        let seed = store.insert_normal(format!("{PREFIX}seed"), 1, cfg.dim, 1.0, rng)?;
        let dense = init_projection(store, "dense", &cfg, rng)?;
        let sparse = init_projection(store, "sparse", &cfg, rng)?;
        let query = init_projection(store, "query", &cfg, rng)?;
        Ok(Self { cfg, cross, selfs, seed, dense, sparse, query })
    }

    pub fn lookup(store: &ParamStore, cfg: AdapterConfig) -> Result<Self, KernelError> {
        Ok(Self {
            cfg,
            cross: (0..cfg.cross_blocks)
                .map(|i| lookup_block(store, &format!("{PREFIX}cross.{i}"), true))
                .collect::<Result<_, _>>()?,
            selfs: (0..cfg.self_blocks)
                .map(|i| lookup_block(store, &format!("{PREFIX}self.{i}"), false))
                .collect::<Result<_, _>>()?,
            seed: store.id(&format!("{PREFIX}seed"))?,
            dense: lookup_projection(store, "dense")?,
            sparse: lookup_projection(store, "sparse")?,
            query: lookup_projection(store, "query")?,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.cfg
    }

    fn project(g: &mut Graph<'_>, p: Projection, x: Var) -> Result<Var, KernelError> {
        let (w, b) = (g.param(p.w), g.param(p.b));
        g.linear(x, w, b)
    }

    /// `n_f × D` frames to `n_f × D_dec`, row by row.
    pub fn g_dense_project(&self, g: &mut Graph<'_>, frames: Var) -> Result<Var, KernelError> {
        Self::project(g, self.dense, frames)
    }

    /// Query rows `N_s × D` to decoder width.
    pub fn g_query_project(&self, g: &mut Graph<'_>, query: Var) -> Result<Var, KernelError> {
        Self::project(g, self.query, query)
    }

    /// Sparse tokens `k × D` to decoder width.
    pub fn g_sparse_project(&self, g: &mut Graph<'_>, tokens: Var) -> Result<Var, KernelError> {
        Self::project(g, self.sparse, tokens)
    }

    /// Frames attend to query rows only; no frame-to-frame mixing.
    pub fn g_text_align(&self, g: &mut Graph<'_>, frames: Var, query: Var) -> Result<Var, KernelError> {
        let mut x = frames;
        for b in &self.cross {
            x = block_forward(g, b, x, Some(query), None)?;
        }
        Ok(x)
    }

    /// Self-attention over `[seed; aligned]`, returning row 0 (`1 × D`).
    pub fn g_sparse_condense(&self, g: &mut Graph<'_>, aligned: Var) -> Result<Var, KernelError> {
        let seed = g.param(self.seed);
        let mut x = g.concat_rows(&[seed, aligned])?;
        for b in &self.selfs {
            x = block_forward(g, b, x, None, None)?;
        }
        g.slice_rows(x, 0, 1)
    }

    pub fn g_sparse_feature(&self, g: &mut Graph<'_>, frames: Var, query: Var) -> Result<Var, KernelError> {
        let aligned = self.g_text_align(g, frames, query)?;
        self.g_sparse_condense(g, aligned)
    }

    pub fn dense_project(&self, store: &ParamStore, frames: &Matrix) -> Result<Matrix, KernelError> {
        check_cols("dense_project", frames, self.cfg.dim)?;
        let mut g = Graph::new(store);
        let x = g.input(frames.clone());
        let y = self.g_dense_project(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    pub fn text_align(&self, store: &ParamStore, frames: &Matrix, query: &Matrix) -> Result<Matrix, KernelError> {
        check_cols("text_align", frames, self.cfg.dim)?;
        check_cols("text_align", query, self.cfg.dim)?;
        let mut g = Graph::new(store);
        let (x, q) = (g.input(frames.clone()), g.input(query.clone()));
        let y = self.g_text_align(&mut g, x, q)?;
        Ok(g.value(y).clone())
    }

    pub fn sparse_condense(&self, store: &ParamStore, aligned: &Matrix) -> Result<Matrix, KernelError> {
        check_cols("sparse_condense", aligned, self.cfg.dim)?;
        let mut g = Graph::new(store);
        let x = g.input(aligned.clone());
        let y = self.g_sparse_condense(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    /// Sparse feature (`1 × D`) of one segment under one query.
    pub fn sparse_feature(&self, store: &ParamStore, frames: &Matrix, query: &Matrix) -> Result<Matrix, KernelError> {
        check_cols("sparse_feature", frames, self.cfg.dim)?;
        check_cols("sparse_feature", query, self.cfg.dim)?;
        let mut g = Graph::new(store);
        let (x, q) = (g.input(frames.clone()), g.input(query.clone()));
        let y = self.g_sparse_feature(&mut g, x, q)?;
        Ok(g.value(y).clone())
    }

    /// One sparse feature per segment, in input order. Segments are
    /// processed in parallel; each result depends only on its own segment.
    pub fn sparse_batch(&self, store: &ParamStore, segments: &[Segment], query: &Matrix) -> Result<Vec<Matrix>, KernelError> {
        segments.par_iter().map(|s| self.sparse_feature(store, &s.frames, query)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::gradcheck::{check_params, DEFAULT_STEP, DEFAULT_TOLERANCE};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize, dd: usize) -> (ParamStore, Adapter, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        let cfg = AdapterConfig { dim: d, dec_dim: dd, ..AdapterConfig::default() };
        let a = Adapter::init(&mut s, cfg, &mut rng).unwrap();
        (s, a, rng)
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        let mut s = ParamStore::new();
        s.insert_normal("m", r, c, 1.0, rng).unwrap();
        s.get("m").unwrap().clone()
    }

    #[test]
    fn dense_identity_is_passthrough() {
        let (mut s, a, mut rng) = setup(3, 3);
        *s.value_mut(a.dense.w) = Matrix::identity(3);
        let x = random(&mut rng, 4, 3);
        assert_eq!(a.dense_project(&s, &x).unwrap(), x);
    }

    #[test]
    fn dense_hand_projection() {
        let (mut s, a, _) = setup(2, 2);
        *s.value_mut(a.dense.w) = Matrix::from_rows(&[[1.0, 2.0], [0.0, -1.0]]).unwrap();
        let x = Matrix::from_rows(&[[1.0, 1.0], [2.0, 0.0], [0.0, 3.0]]).unwrap();
        let y = a.dense_project(&s, &x).unwrap();
        assert_eq!(y, Matrix::from_rows(&[[1.0, 1.0], [2.0, 4.0], [0.0, -3.0]]).unwrap());
    }

    #[test]
    fn permutation_laws() {
        let (s, a, mut rng) = setup(4, 6);
        let x = random(&mut rng, 5, 4);
        let q = random(&mut rng, 3, 4);
        let perm = [3, 0, 4, 1, 2];
        let xp = x.select_rows(&perm);
        let ta = a.text_align(&s, &x, &q).unwrap();
        let tp = a.text_align(&s, &xp, &q).unwrap();
        assert!(ta.select_rows(&perm).max_abs_diff(&tp) < 1e-9);
        let sa = a.sparse_condense(&s, &ta).unwrap();
        let sp = a.sparse_condense(&s, &tp).unwrap();
        assert!(sa.max_abs_diff(&sp) < 1e-9);
        assert_eq!(sa.shape(), (1, 4));
    }

    #[test]
    fn single_word_gives_identical_attention_term() {
        // With one key the attention output is the projected value row for
        // every frame, so equal frames stay equal and distinct frames differ
        // only through their residual and FFN paths.
        let (s, a, mut rng) = setup(4, 4);
        let row = random(&mut rng, 1, 4);
        let x = Matrix::vstack(&[&row, &row, &row]).unwrap();
        let q = random(&mut rng, 1, 4);
        let y = a.text_align(&s, &x, &q).unwrap();
        assert!(y.row(0) == y.row(1) && y.row(1) == y.row(2));
    }

    #[test]
    fn batch_matches_loop() {
        let (s, a, mut rng) = setup(4, 4);
        let q = random(&mut rng, 2, 4);
        let segs: Vec<Segment> = (0..5).map(|i| Segment { index: i, start: i as f64, frames: random(&mut rng, 6, 4) }).collect();
        let batch = a.sparse_batch(&s, &segs, &q).unwrap();
        for (seg, b) in segs.iter().zip(&batch) {
            assert_eq!(&a.sparse_feature(&s, &seg.frames, &q).unwrap(), b);
        }
        assert!(a.sparse_batch(&s, &[], &q).unwrap().is_empty());
    }

    #[test]
    fn shape_errors() {
        let (s, a, mut rng) = setup(4, 4);
        let bad = random(&mut rng, 3, 5);
        assert!(matches!(a.dense_project(&s, &bad), Err(KernelError::Shape { .. })));
    }

    #[test]
    fn full_adapter_gradcheck() {
        let (s, a, mut rng) = setup(4, 3);
        let x = random(&mut rng, 5, 4);
        let q = random(&mut rng, 2, 4);
        let probe = random(&mut rng, 1, 3);
        let dprobe = random(&mut rng, 5, 3);
        let r = check_params(&s, DEFAULT_STEP, None, |g| {
            let xv = g.input(x.clone());
            let qv = g.input(q.clone());
            let sp = a.g_sparse_feature(g, xv, qv)?;
            let sp = a.g_sparse_project(g, sp)?;
            let pv = g.input(probe.clone());
            let l1 = g.inner(sp, pv)?;
            let d = a.g_dense_project(g, xv)?;
            let qp = a.g_query_project(g, qv)?;
            let qs = g.slice_rows(qp, 0, 1)?;
            let dp = g.input(dprobe.clone());
            let l2 = g.inner(d, dp)?;
            let l3 = g.inner(qs, pv)?;
            let l = g.add(l1, l2)?;
            g.add(l, l3)
        })
        .unwrap();
        assert_eq!(r.tensors.len(), s.len());
        assert!(r.passes(DEFAULT_TOLERANCE), "{:?}", r.worst());
    }
}
