//! Finite-difference suite over every parameterized graph op and the full
//! adapter + decoder loss, on randomly drawn toy shapes.

use rand::Rng;
use serde::Serialize;

use crate::adapter::{Adapter, AdapterConfig};
use crate::decoder::{Answer, Decoder, DecoderConfig, DecoderError, ParamSet, Template};
use crate::numkernel::block::{block_forward, init_block};
use crate::numkernel::gradcheck::check_params;
use crate::numkernel::{Graph, KernelError, ParamId, ParamStore, Var};
use crate::rng::substream;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteCase {
    pub config: usize,
    pub name: String,
    pub max_rel_error: f64,
    /// Tensor with the largest relative error.
    pub worst: String,
}

type Loss = dyn Fn(&mut Graph<'_>, &[ParamId]) -> Result<Var, KernelError>;

struct OpCase {
    name: &'static str,
    /// Operand shapes; all operands are trainable.
    shapes: Vec<(usize, usize)>,
    loss: Box<Loss>,
}

/// Contracts `out` with a fixed pseudo-random probe of the same shape.
fn probe(g: &mut Graph<'_>, out: Var) -> Result<Var, KernelError> {
    let (r, c) = g.value(out).shape();
    let data = (0..r * c).map(|i| ((i as f64 * 0.7548776662466927).fract() - 0.5) * 2.0).collect();
    let p = g.input(crate::numkernel::Matrix::new(r, c, data)?);
    g.inner(out, p)
}

fn op_cases<R: Rng>(rng: &mut R) -> Vec<OpCase> {
    let n = rng.gen_range(2..=5);
    let m = rng.gen_range(2..=4);
    let d = rng.gen_range(2..=5);
    let take = rng.gen_range(1..n);
    let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..m)).collect();
    let rows: Vec<usize> = (0..m + 1).map(|_| rng.gen_range(0..n)).collect();
    let causal = rng.gen_range(0..n);
    vec![
        OpCase {
            name: "matmul",
            shapes: vec![(n, d), (d, m)],
            loss: Box::new(|g, p| {
                let (a, b) = (g.param(p[0]), g.param(p[1]));
                let y = g.matmul(a, b)?;
                probe(g, y)
            }),
        },
        OpCase {
            name: "matmul_nt",
            shapes: vec![(n, d), (m, d)],
            loss: Box::new(|g, p| {
                let (a, b) = (g.param(p[0]), g.param(p[1]));
                let y = g.matmul_nt(a, b)?;
                probe(g, y)
            }),
        },
        OpCase {
            name: "add",
            shapes: vec![(n, d), (n, d)],
            loss: Box::new(|g, p| {
                let (a, b) = (g.param(p[0]), g.param(p[1]));
                let y = g.add(a, b)?;
                probe(g, y)
            }),
        },
        OpCase {
            name: "add_row",
            shapes: vec![(n, d), (1, d)],
            loss: Box::new(|g, p| {
                let (a, b) = (g.param(p[0]), g.param(p[1]));
                let y = g.add_row(a, b)?;
                probe(g, y)
            }),
        },
        OpCase {
            name: "scale",
            shapes: vec![(n, d)],
            loss: Box::new(|g, p| {
                let a = g.param(p[0]);
                let y = g.scale(a, -1.7);
                probe(g, y)
            }),
        },
        OpCase {
            name: "linear",
            shapes: vec![(n, d), (d, m), (1, m)],
            loss: Box::new(|g, p| {
                let (x, w, b) = (g.param(p[0]), g.param(p[1]), g.param(p[2]));
                let y = g.linear(x, w, b)?;
                probe(g, y)
            }),
        },
        OpCase {
            name: "layer_norm",
            shapes: vec![(n, d), (1, d), (1, d)],
            loss: Box::new(|g, p| {
                let (x, w, b) = (g.param(p[0]), g.param(p[1]), g.param(p[2]));
                let y = g.layer_norm(x, w, b, 1e-5)?;
                probe(g, y)
            }),
        },
        OpCase {
            name: "softmax_rows",
            shapes: vec![(n, n)],
            loss: Box::new(|g, p| {
                let x = g.param(p[0]);
                let y = g.softmax_rows(x, None);
                probe(g, y)
            }),
        },
        OpCase {
            name: "softmax_rows_causal",
            shapes: vec![(n, n)],
            loss: Box::new(move |g, p| {
                let x = g.param(p[0]);
                let y = g.softmax_rows(x, Some(causal));
                probe(g, y)
            }),
        },
        OpCase {
            name: "gelu",
            shapes: vec![(n, d)],
            loss: Box::new(|g, p| {
                let x = g.param(p[0]);
                let y = g.gelu(x);
                probe(g, y)
            }),
        },
        OpCase {
            name: "concat_slice",
            shapes: vec![(n, d), (m, d)],
            loss: Box::new(move |g, p| {
                let (a, b) = (g.param(p[0]), g.param(p[1]));
                let c = g.concat_rows(&[a, b])?;
                let y = g.slice_rows(c, take, n + m - take)?;
                probe(g, y)
            }),
        },
        OpCase {
            name: "attention",
            shapes: vec![(n, d), (m, d), (m, d)],
            loss: Box::new(|g, p| {
                let (q, k, v) = (g.param(p[0]), g.param(p[1]), g.param(p[2]));
                let y = g.attention(q, k, v, None)?;
                probe(g, y)
            }),
        },
        OpCase {
            name: "attention_causal",
            shapes: vec![(n, d), (n, d), (n, d)],
            loss: Box::new(move |g, p| {
                let (q, k, v) = (g.param(p[0]), g.param(p[1]), g.param(p[2]));
                let y = g.attention(q, k, v, Some(causal))?;
                probe(g, y)
            }),
        },
        OpCase {
            name: "cross_entropy",
            shapes: vec![(n, m)],
            loss: Box::new(move |g, p| {
                let x = g.param(p[0]);
                g.cross_entropy(x, &targets)
            }),
        },
        OpCase {
            name: "gather",
            shapes: vec![(n, d)],
            loss: Box::new(move |g, p| {
                let y = g.gather(p[0], &rows)?;
                probe(g, y)
            }),
        },
        OpCase {
            name: "inner",
            shapes: vec![(n, d), (n, d)],
            loss: Box::new(|g, p| {
                let (a, b) = (g.param(p[0]), g.param(p[1]));
                g.inner(a, b)
            }),
        },
    ]
}

fn case(config: usize, name: &str, r: crate::numkernel::gradcheck::GradCheckReport) -> SuiteCase {
    SuiteCase {
        config,
        name: name.to_string(),
        max_rel_error: r.max_rel_error(),
        worst: r.worst().map(|t| t.name.clone()).unwrap_or_default(),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SuiteError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
}

/// Suite prompts fit the decoder capacity, so only kernel errors remain.
fn kernel(e: DecoderError) -> KernelError {
    match e {
        DecoderError::Kernel(k) => k,
        other => panic!("suite prompt rejected: {other}"),
    }
}

/// Runs every op case, a self/cross block pair and the composite loss for
/// each of `configs` random configurations.
pub fn run_suite(configs: usize, seed: u64, h: f64) -> Result<Vec<SuiteCase>, SuiteError> {
    let mut out = Vec::new();
    for c in 0..configs {
        let mut rng = substream(seed, &format!("gradsuite/{c}"));
        for op in op_cases(&mut rng) {
            let mut s = ParamStore::new();
            let ids = op
                .shapes
                .iter()
                .enumerate()
                .map(|(i, &(r, k))| s.insert_normal(format!("x{i}"), r, k, 1.0, &mut rng))
                .collect::<Result<Vec<_>, _>>()?;
            let r = check_params(&s, h, None, |g| (op.loss)(g, &ids))?;
            out.push(case(c, op.name, r));
        }

        let d = rng.gen_range(3..=5);
        let (n, m) = (rng.gen_range(2..=4), rng.gen_range(2..=3));
        let mut s = ParamStore::new();
        let a = init_block(&mut s, "self", d, 2, false, &mut rng)?;
        let b = init_block(&mut s, "cross", d, 2, true, &mut rng)?;
        let x = s.insert_normal("x", n, d, 1.0, &mut rng)?;
        let ctx = s.insert_normal("ctx", m, d, 1.0, &mut rng)?;
        let causal = rng.gen_range(0..n);
        let r = check_params(&s, h, None, |g| {
            let (xv, cv) = (g.param(x), g.param(ctx));
            let y = block_forward(g, &a, xv, None, Some(causal))?;
            let y = block_forward(g, &b, y, Some(cv), None)?;
            probe(g, y)
        })?;
        out.push(case(c, "blocks", r));

        let dim = rng.gen_range(3..=5);
        let dec_dim = rng.gen_range(3..=6);
        let acfg = AdapterConfig {
            dim,
            dec_dim,
            cross_blocks: rng.gen_range(1..=2),
            self_blocks: rng.gen_range(1..=2),
            ffn_expansion: 2,
        };
        let dcfg = DecoderConfig { dec_dim, blocks: rng.gen_range(1..=2), capacity: 40, int_tokens: 12, ffn_expansion: 2 };
        let mut s = ParamStore::new();
        let ad = Adapter::init(&mut s, acfg, &mut rng)?;
        let dec = Decoder::init(&mut s, dcfg, &mut rng)?;
        let frames = rng.gen_range(3..=6);
        let fx = s.insert_normal("frames", frames, dim, 1.0, &mut rng)?;
        let qx = s.insert_normal("query", rng.gen_range(2..=3), dim, 1.0, &mut rng)?;
        s.set_trainable_prefixes(&["adapter.", "decoder."]);
        let lo = rng.gen_range(0..frames - 1);
        let hi = rng.gen_range(lo + 1..=frames);
        let voc = *dec.vocab();
        let ground = Answer::Boundary(lo, hi).tokens(&voc)?;
        let present = Answer::Yes.tokens(&voc)?;
        let r = check_params(&s, h, None, |g| {
            let (xv, qv) = (g.param(fx), g.param(qx));
            let dense = ad.g_dense_project(g, xv)?;
            let aligned = ad.g_text_align(g, xv, qv)?;
            let feature = ad.g_sparse_condense(g, aligned)?;
            let sparse = ad.g_sparse_project(g, feature)?;
            let qp = ad.g_query_project(g, qv)?;
            let p1 = dec.g_prompt(g, ParamSet::Bottom, dense, qp, Template::Ground).map_err(kernel)?;
            let l1 = dec.g_loss(g, ParamSet::Bottom, p1, &ground).map_err(kernel)?;
            let p2 = dec.g_prompt(g, ParamSet::Upper, sparse, qp, Template::Present).map_err(kernel)?;
            let l2 = dec.g_loss(g, ParamSet::Upper, p2, &present).map_err(kernel)?;
            // Direct probe keeps the adapter gradients above difference noise.
            let (pa, pf) = (probe(g, aligned)?, probe(g, feature)?);
            let l = g.add(l1, l2)?;
            let l = g.add(l, pa)?;
            g.add(l, pf)
        })?;
        out.push(case(c, "adapter+decoder", r));
    }
    Ok(out)
}
