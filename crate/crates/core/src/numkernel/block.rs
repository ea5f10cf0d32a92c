//! Pre-norm transformer block: norm → attention → residual → norm → FFN →
//! residual. Single head; FFN uses tanh-GELU.

use rand::Rng;

use super::{ops, Graph, KernelError, Matrix, ParamId, ParamStore, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

/// Parameter handles of one block.
#[derive(Debug, Clone, Copy)]
pub struct BlockIds {
    pub ln1: NormIds,
    /// Norm applied to the key/value context of a cross-attention block.
    pub ln_ctx: Option<NormIds>,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2: NormIds,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

fn norm_init(store: &mut ParamStore, prefix: &str, d: usize) -> Result<NormIds, KernelError> {
    Ok(NormIds {
        gain: store.insert(format!("{prefix}.g"), Matrix::filled(1, d, 1.0))?,
        bias: store.insert(format!("{prefix}.b"), Matrix::zeros(1, d))?,
    })
}

fn norm_lookup(store: &ParamStore, prefix: &str) -> Result<NormIds, KernelError> {
    Ok(NormIds { gain: store.id(&format!("{prefix}.g"))?, bias: store.id(&format!("{prefix}.b"))? })
}

/// Registers a block under `prefix`. `expansion` is the FFN width multiplier.
pub fn init_block<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    expansion: usize,
    cross: bool,
    rng: &mut R,
) -> Result<BlockIds, KernelError> {
    let s = 1.0 / (d as f64).sqrt();
    let h = d * expansion;
    let ln1 = norm_init(store, &format!("{prefix}.ln1"), d)?;
    let ln_ctx = if cross { Some(norm_init(store, &format!("{prefix}.lnc"), d)?) } else { None };
    let wq = store.insert_normal(format!("{prefix}.attn.wq"), d, d, s, rng)?;
    let wk = store.insert_normal(format!("{prefix}.attn.wk"), d, d, s, rng)?;
    let wv = store.insert_normal(format!("{prefix}.attn.wv"), d, d, s, rng)?;
    let wo = store.insert_normal(format!("{prefix}.attn.wo"), d, d, s * 0.5, rng)?;
    let ln2 = norm_init(store, &format!("{prefix}.ln2"), d)?;
    let w1 = store.insert_normal(format!("{prefix}.ffn.w1"), d, h, s, rng)?;
    let b1 = store.insert(format!("{prefix}.ffn.b1"), Matrix::zeros(1, h))?;
    let w2 = store.insert_normal(format!("{prefix}.ffn.w2"), h, d, 0.5 / (h as f64).sqrt(), rng)?;
    let b2 = store.insert(format!("{prefix}.ffn.b2"), Matrix::zeros(1, d))?;
    Ok(BlockIds { ln1, ln_ctx, wq, wk, wv, wo, ln2, w1, b1, w2, b2 })
}

pub fn lookup_block(store: &ParamStore, prefix: &str, cross: bool) -> Result<BlockIds, KernelError> {
    Ok(BlockIds {
        ln1: norm_lookup(store, &format!("{prefix}.ln1"))?,
        ln_ctx: if cross { Some(norm_lookup(store, &format!("{prefix}.lnc"))?) } else { None },
        wq: store.id(&format!("{prefix}.attn.wq"))?,
        wk: store.id(&format!("{prefix}.attn.wk"))?,
        wv: store.id(&format!("{prefix}.attn.wv"))?,
        wo: store.id(&format!("{prefix}.attn.wo"))?,
        ln2: norm_lookup(store, &format!("{prefix}.ln2"))?,
        w1: store.id(&format!("{prefix}.ffn.w1"))?,
        b1: store.id(&format!("{prefix}.ffn.b1"))?,
        w2: store.id(&format!("{prefix}.ffn.w2"))?,
        b2: store.id(&format!("{prefix}.ffn.b2"))?,
    })
}

pub fn norm(g: &mut Graph<'_>, ids: NormIds, x: Var) -> Result<Var, KernelError> {
    let gain = g.param(ids.gain);
    let bias = g.param(ids.bias);
    g.layer_norm(x, gain, bias, LN_EPS)
}

/// Runs one block. With `context`, attention keys/values come from the
/// (normalized) context rows instead of `x`.
pub fn block_forward(
    g: &mut Graph<'_>,
    ids: &BlockIds,
    x: Var,
    context: Option<Var>,
    causal: Option<usize>,
) -> Result<Var, KernelError> {
    let h = norm(g, ids.ln1, x)?;
    let kv = match (context, ids.ln_ctx) {
        (Some(c), Some(n)) => norm(g, n, c)?,
        (Some(c), None) => c,
        (None, _) => h,
    };
    let (wq, wk, wv, wo) = (g.param(ids.wq), g.param(ids.wk), g.param(ids.wv), g.param(ids.wo));
    let q = g.matmul(h, wq)?;
    let k = g.matmul(kv, wk)?;
    let v = g.matmul(kv, wv)?;
    let a = g.attention(q, k, v, causal)?;
    let o = g.matmul(a, wo)?;
    let x = g.add(x, o)?;
    let h = norm(g, ids.ln2, x)?;
    let (w1, b1, w2, b2) = (g.param(ids.w1), g.param(ids.b1), g.param(ids.w2), g.param(ids.b2));
    let f = g.linear(h, w1, b1)?;
    let f = g.gelu(f);
    let f = g.linear(f, w2, b2)?;
    g.add(x, f)
}

/// Keys and values of all positions processed so far by one causal block.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    keys: Option<Matrix>,
    values: Option<Matrix>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.keys.as_ref().map_or(0, Matrix::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn append(slot: &mut Option<Matrix>, new: Matrix) -> Result<(), KernelError> {
        *slot = Some(match slot.take() {
            Some(old) => Matrix::vstack(&[&old, &new])?,
            None => new,
        });
        Ok(())
    }
}

fn plain_norm(store: &ParamStore, ids: NormIds, x: &Matrix) -> Result<Matrix, KernelError> {
    ops::layer_norm(x, store.value(ids.gain).row(0), store.value(ids.bias).row(0), LN_EPS)
}

/// Causal self-attention block over new rows `x`, which follow the
/// positions already held in `cache`. Matches [`block_forward`] with
/// `causal = Some(0)` on the full sequence.
pub fn block_forward_cached(
    store: &ParamStore,
    ids: &BlockIds,
    x: &Matrix,
    cache: &mut KvCache,
) -> Result<Matrix, KernelError> {
    let offset = cache.len();
    let h = plain_norm(store, ids.ln1, x)?;
    let q = ops::matmul(&h, store.value(ids.wq))?;
    KvCache::append(&mut cache.keys, ops::matmul(&h, store.value(ids.wk))?)?;
    KvCache::append(&mut cache.values, ops::matmul(&h, store.value(ids.wv))?)?;
    let (k, v) = (cache.keys.as_ref().expect("appended"), cache.values.as_ref().expect("appended"));
    let a = ops::attention_masked(&q, k, v, Some(offset))?;
    let x = x.add(&ops::matmul(&a, store.value(ids.wo))?)?;
    let h = plain_norm(store, ids.ln2, &x)?;
    let f = ops::gelu(&ops::linear(&h, store.value(ids.w1), store.value(ids.b1).row(0))?);
    let f = ops::linear(&f, store.value(ids.w2), store.value(ids.b2).row(0))?;
    x.add(&f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::gradcheck::{check_params, DEFAULT_STEP, DEFAULT_TOLERANCE};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn self_cross_and_causal_blocks_pass_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = ParamStore::new();
        let a = init_block(&mut s, "a", 4, 2, false, &mut rng).unwrap();
        let c = init_block(&mut s, "c", 4, 2, true, &mut rng).unwrap();
        let x = s.insert_normal("x", 3, 4, 1.0, &mut rng).unwrap();
        let ctx = s.insert_normal("ctx", 2, 4, 1.0, &mut rng).unwrap();
        let probe = s.insert_normal("probe", 3, 4, 1.0, &mut rng).unwrap();
        s.set_trainable_prefixes(&["a.", "c.", "x", "ctx"]);
        let r = check_params(&s, DEFAULT_STEP, None, |g| {
            let xv = g.param(x);
            let cv = g.param(ctx);
            let h = block_forward(g, &a, xv, None, Some(0))?;
            let h = block_forward(g, &c, h, Some(cv), None)?;
            let p = g.param(probe);
            g.inner(h, p)
        })
        .unwrap();
        assert!(r.passes(DEFAULT_TOLERANCE), "{:?}", r.worst());
    }

    #[test]
    fn cached_rows_match_full_causal_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = ParamStore::new();
        let b = init_block(&mut s, "b", 4, 2, false, &mut rng).unwrap();
        let x = s.insert_normal("x", 5, 4, 1.0, &mut rng).unwrap();
        let full = {
            let mut g = Graph::new(&s);
            let xv = g.param(x);
            let y = block_forward(&mut g, &b, xv, None, Some(0)).unwrap();
            g.value(y).clone()
        };
        let xm = s.value(x).clone();
        let mut cache = KvCache::default();
        let head = block_forward_cached(&s, &b, &xm.slice_rows(0, 3), &mut cache).unwrap();
        let t3 = block_forward_cached(&s, &b, &xm.slice_rows(3, 1), &mut cache).unwrap();
        let t4 = block_forward_cached(&s, &b, &xm.slice_rows(4, 1), &mut cache).unwrap();
        let stepped = Matrix::vstack(&[&head, &t3, &t4]).unwrap();
        assert!(stepped.max_abs_diff(&full) < 1e-12);
        assert_eq!(cache.len(), 5);
    }
}
