//! Batched forward and backward passes.
//!
//! Sequences of a batch are packed row-wise into one `[rows x d_model]`
//! matrix. Norms, projections and the feed-forward layer act on all rows
//! at once; attention runs per sequence and per head with a causal mask.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::params::{BlockParams, ParamGroup, Params, TrainMask};
use super::ModelConfig;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Packed token rows with per-sequence `(start, len)` spans.
#[derive(Debug, Clone)]
pub struct Packed {
    pub tokens: Vec<u32>,
    pub spans: Vec<(usize, usize)>,
}

impl Packed {
    pub fn new(seqs: &[Vec<u32>]) -> Self {
        let mut tokens = Vec::new();
        let mut spans = Vec::with_capacity(seqs.len());
        for s in seqs {
            spans.push((tokens.len(), s.len()));
            tokens.extend_from_slice(s);
        }
        Packed { tokens, spans }
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    /// Row index of the final position of every sequence.
    pub fn last_rows(&self) -> Vec<usize> {
        self.spans.iter().map(|&(st, len)| st + len - 1).collect()
    }
}

pub(crate) struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let inv = *r;
        row.mapv_inplace(|v| v * inv);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

/// Returns `dx`; accumulates `dg`, `db` when given.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: &Array1<f64>,
    grads: Option<(&mut Array1<f64>, &mut Array1<f64>)>,
) -> Array2<f64> {
    if let Some((dg, db)) = grads {
        *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
        *db += &dy.sum_axis(Axis(0));
    }
    let d = dy.ncols() as f64;
    let dxhat = dy * g;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (i, mut out) in dx.rows_mut().into_iter().enumerate() {
        let dxh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_d = dxh.sum() / d;
        let mean_dx = dxh.dot(&xh) / d;
        let r = cache.rstd[i];
        for ((o, &a), &b) in out.iter_mut().zip(dxh.iter()).zip(xh.iter()) {
            *o = r * (a - mean_d - b * mean_dx);
        }
    }
    dx
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

/// Row-wise softmax of a score matrix restricted to the causal triangle.
fn causal_softmax(scores: &mut Array2<f64>) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let max = row.iter().take(i + 1).cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j <= i {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub(crate) struct BlockCache {
    pub x_in: Array2<f64>,
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention probabilities per (sequence, head), sequence-major.
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    ln2: LnCache,
    m: Array2<f64>,
    u: Array2<f64>,
    gu: Array2<f64>,
}

/// Activations of one batched forward pass.
pub struct ForwardPass {
    pub packed: Packed,
    pub(crate) blocks: Vec<BlockCache>,
    pub h_final: Array2<f64>,
    lnf: LnCache,
    zf: Array2<f64>,
    pub logits: Array2<f64>,
}

impl ForwardPass {
    /// Residual stream entering block `i` (`i == n_blocks` gives the
    /// output of the last block).
    pub fn hidden(&self, i: usize) -> &Array2<f64> {
        if i < self.blocks.len() {
            &self.blocks[i].x_in
        } else {
            &self.h_final
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }
}

fn block_forward(
    cfg: &ModelConfig,
    bp: &BlockParams,
    x: Array2<f64>,
    packed: &Packed,
) -> (Array2<f64>, BlockCache) {
    let dh = cfg.d_model / cfg.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (a, ln1) = layer_norm(&x, &bp.att.ln_g, &bp.att.ln_b);
    let q = a.dot(&bp.att.wq);
    let k = a.dot(&bp.att.wk);
    let v = a.dot(&bp.att.wv);
    let mut attn = Array2::zeros(x.raw_dim());
    let mut probs = Vec::with_capacity(packed.spans.len() * cfg.n_heads);
    for &(st, len) in &packed.spans {
        for h in 0..cfg.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let qs = q.slice(s![st..st + len, cols.clone()]);
            let ks = k.slice(s![st..st + len, cols.clone()]);
            let vs = v.slice(s![st..st + len, cols.clone()]);
            let mut sc = qs.dot(&ks.t()) * scale;
            causal_softmax(&mut sc);
            attn.slice_mut(s![st..st + len, cols]).assign(&sc.dot(&vs));
            probs.push(sc);
        }
    }
    let h_mid = &x + &attn.dot(&bp.att.wo);
    let (m, ln2) = layer_norm(&h_mid, &bp.mlp.ln_g, &bp.mlp.ln_b);
    let u = m.dot(&bp.mlp.w1) + &bp.mlp.b1;
    let gu = u.mapv(gelu);
    let out = &h_mid + &(gu.dot(&bp.mlp.w2) + &bp.mlp.b2);
    let cache = BlockCache {
        x_in: x,
        ln1,
        a,
        q,
        k,
        v,
        probs,
        attn,
        ln2,
        m,
        u,
        gu,
    };
    (out, cache)
}

pub(crate) fn embed(params: &Params, packed: &Packed) -> Array2<f64> {
    let d = params.tok_emb.ncols();
    let mut x = Array2::zeros((packed.rows(), d));
    for &(st, len) in &packed.spans {
        for p in 0..len {
            let tok = packed.tokens[st + p] as usize;
            let mut row = x.row_mut(st + p);
            row.assign(&params.tok_emb.row(tok));
            row += &params.pos_emb.row(p);
        }
    }
    x
}

/// Runs blocks `from..n_blocks` on residual input `x`, then the head.
pub(crate) fn forward_from(
    cfg: &ModelConfig,
    params: &Params,
    packed: Packed,
    mut x: Array2<f64>,
    from: usize,
) -> ForwardPass {
    let mut blocks = Vec::with_capacity(params.blocks.len() - from);
    for bp in &params.blocks[from..] {
        let (next, cache) = block_forward(cfg, bp, x, &packed);
        blocks.push(cache);
        x = next;
    }
    let (zf, lnf) = layer_norm(&x, &params.lnf_g, &params.lnf_b);
    let logits = zf.dot(&params.head);
    ForwardPass {
        packed,
        blocks,
        h_final: x,
        lnf,
        zf,
        logits,
    }
}

pub(crate) fn forward(cfg: &ModelConfig, params: &Params, packed: Packed) -> ForwardPass {
    let x = embed(params, &packed);
    forward_from(cfg, params, packed, x, 0)
}

fn acc_matmul_tn(dst: &mut Array2<f64>, a: &Array2<f64>, b: &Array2<f64>) {
    ndarray::linalg::general_mat_mul(1.0, &a.t(), b, 1.0, dst);
}

/// Backpropagates `dlogits` through a full forward pass (one that started
/// at block 0) and returns gradients for every group enabled in `mask`.
/// Disabled groups are left at zero and their weight gradients are never
/// computed; propagation stops below the lowest trainable block.
pub(crate) fn backward(
    cfg: &ModelConfig,
    params: &Params,
    pass: &ForwardPass,
    dlogits: &Array2<f64>,
    mask: &TrainMask,
) -> Params {
    let mut g = Params::zeros(cfg);
    let head_on = mask.enabled(ParamGroup::Head);
    if head_on {
        acc_matmul_tn(&mut g.head, &pass.zf, dlogits);
    }
    let Some(lowest) = mask.lowest_block() else {
        if head_on {
            let dzf = dlogits.dot(&params.head.t());
            layer_norm_backward(
                &dzf,
                &pass.lnf,
                &params.lnf_g,
                Some((&mut g.lnf_g, &mut g.lnf_b)),
            );
        }
        return g;
    };
    let dzf = dlogits.dot(&params.head.t());
    let head_grads = head_on.then_some((&mut g.lnf_g, &mut g.lnf_b));
    let mut dx = layer_norm_backward(&dzf, &pass.lnf, &params.lnf_g, head_grads);

    let dh = cfg.d_model / cfg.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for i in (lowest..cfg.n_blocks).rev() {
        let bp = &params.blocks[i];
        let c = &pass.blocks[i];
        let gb = &mut g.blocks[i];
        let att_on = mask.enabled(ParamGroup::Att(i));
        let mlp_on = mask.enabled(ParamGroup::Mlp(i));

        // feed-forward
        if mlp_on {
            acc_matmul_tn(&mut gb.mlp.w2, &c.gu, &dx);
            gb.mlp.b2 += &dx.sum_axis(Axis(0));
        }
        let mut du = dx.dot(&bp.mlp.w2.t());
        ndarray::Zip::from(&mut du)
            .and(&c.u)
            .for_each(|d, &u| *d *= gelu_grad(u));
        if mlp_on {
            acc_matmul_tn(&mut gb.mlp.w1, &c.m, &du);
            gb.mlp.b1 += &du.sum_axis(Axis(0));
        }
        let dm = du.dot(&bp.mlp.w1.t());
        let ln2_grads = mlp_on.then_some((&mut gb.mlp.ln_g, &mut gb.mlp.ln_b));
        let dh_mid = &dx + &layer_norm_backward(&dm, &c.ln2, &bp.mlp.ln_g, ln2_grads);

        // attention
        if att_on {
            acc_matmul_tn(&mut gb.att.wo, &c.attn, &dh_mid);
        }
        let dattn = dh_mid.dot(&bp.att.wo.t());
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        let mut pi = 0;
        for &(st, len) in &pass.packed.spans {
            for h in 0..cfg.n_heads {
                let cols = h * dh..(h + 1) * dh;
                let rows = st..st + len;
                let p = &c.probs[pi];
                pi += 1;
                let d_o: ArrayView2<f64> = dattn.slice(s![rows.clone(), cols.clone()]);
                let vs = c.v.slice(s![rows.clone(), cols.clone()]);
                let qs = c.q.slice(s![rows.clone(), cols.clone()]);
                let ks = c.k.slice(s![rows.clone(), cols.clone()]);
                let dp = d_o.dot(&vs.t());
                dv.slice_mut(s![rows.clone(), cols.clone()])
                    .assign(&p.t().dot(&d_o));
                let mut ds = p * &dp;
                for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot: f64 = row.sum();
                    row.zip_mut_with(&prow, |d, &pv| *d -= pv * dot);
                }
                ds *= scale;
                dq.slice_mut(s![rows.clone(), cols.clone()])
                    .assign(&ds.dot(&ks));
                dk.slice_mut(s![rows, cols]).assign(&ds.t().dot(&qs));
            }
        }
        if att_on {
            acc_matmul_tn(&mut gb.att.wq, &c.a, &dq);
            acc_matmul_tn(&mut gb.att.wk, &c.a, &dk);
            acc_matmul_tn(&mut gb.att.wv, &c.a, &dv);
        }
        let da = dq.dot(&bp.att.wq.t()) + dk.dot(&bp.att.wk.t()) + dv.dot(&bp.att.wv.t());
        let ln1_grads = att_on.then_some((&mut gb.att.ln_g, &mut gb.att.ln_b));
        dx = &dh_mid + &layer_norm_backward(&da, &c.ln1, &bp.att.ln_g, ln1_grads);
    }

    if mask.enabled(ParamGroup::Embedding) {
        for &(st, len) in &pass.packed.spans {
            for p in 0..len {
                let tok = pass.packed.tokens[st + p] as usize;
                let row = dx.row(st + p);
                let mut te = g.tok_emb.row_mut(tok);
                te += &row;
                let mut pe = g.pos_emb.row_mut(p);
                pe += &row;
            }
        }
    }
    g
}
