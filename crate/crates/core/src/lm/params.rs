use std::fmt;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelConfig;

/// Which part of the network a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Token and position embeddings.
    Embedding,
    /// Attention sub-module (pre-norm, Q/K/V/O projections) of a block.
    Att(usize),
    /// Feed-forward sub-module (pre-norm, two projections) of a block.
    Mlp(usize),
    /// Final norm and output projection.
    Head,
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamGroup::Embedding => write!(f, "embedding"),
            ParamGroup::Att(i) => write!(f, "block{i}.att"),
            ParamGroup::Mlp(i) => write!(f, "block{i}.mlp"),
            ParamGroup::Head => write!(f, "head"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttParams {
    pub ln_g: Array1<f64>,
    pub ln_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub ln_g: Array1<f64>,
    pub ln_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub att: AttParams,
    pub mlp: MlpParams,
}

/// Every trainable tensor of the model. Gradients and optimizer moments
/// use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    pub head: Array2<f64>,
}

pub struct TensorRef<'a> {
    pub group: ParamGroup,
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub group: ParamGroup,
    pub name: &'static str,
    pub data: &'a mut [f64],
}

impl Params {
    pub fn zeros(c: &ModelConfig) -> Self {
        let (d, f) = (c.d_model, c.d_ff);
        let block = || BlockParams {
            att: AttParams {
                ln_g: Array1::zeros(d),
                ln_b: Array1::zeros(d),
                wq: Array2::zeros((d, d)),
                wk: Array2::zeros((d, d)),
                wv: Array2::zeros((d, d)),
                wo: Array2::zeros((d, d)),
            },
            mlp: MlpParams {
                ln_g: Array1::zeros(d),
                ln_b: Array1::zeros(d),
                w1: Array2::zeros((d, f)),
                b1: Array1::zeros(f),
                w2: Array2::zeros((f, d)),
                b2: Array1::zeros(d),
            },
        };
        Params {
            tok_emb: Array2::zeros((c.vocab_size, d)),
            pos_emb: Array2::zeros((c.max_context, d)),
            blocks: (0..c.n_blocks).map(|_| block()).collect(),
            lnf_g: Array1::zeros(d),
            lnf_b: Array1::zeros(d),
            head: Array2::zeros((d, c.vocab_size)),
        }
    }

    /// Gaussian init (std 0.02, output projections scaled down by
    /// `sqrt(2 * n_blocks)`), unit norm gains, zero biases.
    pub fn init(c: &ModelConfig) -> Self {
        let mut p = Params::zeros(c);
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let std = 0.02;
        let normal = Normal::new(0.0, std).expect("valid std");
        let proj = Normal::new(0.0, std / (2.0 * c.n_blocks as f64).sqrt()).expect("valid std");
        let mut fill = |a: &mut [f64], dist: &Normal<f64>| {
            for x in a.iter_mut() {
                *x = dist.sample(&mut rng);
            }
        };
        fill(slice_mut(&mut p.tok_emb), &normal);
        fill(slice_mut(&mut p.pos_emb), &normal);
        for b in &mut p.blocks {
            fill(slice_mut(&mut b.att.wq), &normal);
            fill(slice_mut(&mut b.att.wk), &normal);
            fill(slice_mut(&mut b.att.wv), &normal);
            fill(slice_mut(&mut b.att.wo), &proj);
            fill(slice_mut(&mut b.mlp.w1), &normal);
            fill(slice_mut(&mut b.mlp.w2), &proj);
            b.att.ln_g.fill(1.0);
            b.mlp.ln_g.fill(1.0);
        }
        p.lnf_g.fill(1.0);
        fill(slice_mut(&mut p.head), &normal);
        p
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        fn r<'a, D: ndarray::Dimension>(
            group: ParamGroup,
            name: &'static str,
            a: &'a ndarray::Array<f64, D>,
        ) -> TensorRef<'a> {
            TensorRef {
                group,
                name,
                shape: a.shape().to_vec(),
                data: a.as_slice().expect("standard layout"),
            }
        }
        let mut out = vec![
            r(ParamGroup::Embedding, "tok_emb", &self.tok_emb),
            r(ParamGroup::Embedding, "pos_emb", &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let (att, mlp) = (ParamGroup::Att(i), ParamGroup::Mlp(i));
            out.extend([
                r(att, "ln_g", &b.att.ln_g),
                r(att, "ln_b", &b.att.ln_b),
                r(att, "wq", &b.att.wq),
                r(att, "wk", &b.att.wk),
                r(att, "wv", &b.att.wv),
                r(att, "wo", &b.att.wo),
                r(mlp, "ln_g", &b.mlp.ln_g),
                r(mlp, "ln_b", &b.mlp.ln_b),
                r(mlp, "w1", &b.mlp.w1),
                r(mlp, "b1", &b.mlp.b1),
                r(mlp, "w2", &b.mlp.w2),
                r(mlp, "b2", &b.mlp.b2),
            ]);
        }
        out.extend([
            r(ParamGroup::Head, "lnf_g", &self.lnf_g),
            r(ParamGroup::Head, "lnf_b", &self.lnf_b),
            r(ParamGroup::Head, "head", &self.head),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        fn m<'a, D: ndarray::Dimension>(
            group: ParamGroup,
            name: &'static str,
            a: &'a mut ndarray::Array<f64, D>,
        ) -> TensorMut<'a> {
            TensorMut {
                group,
                name,
                data: a.as_slice_mut().expect("standard layout"),
            }
        }
        let mut out = vec![
            m(ParamGroup::Embedding, "tok_emb", &mut self.tok_emb),
            m(ParamGroup::Embedding, "pos_emb", &mut self.pos_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let (att, mlp) = (ParamGroup::Att(i), ParamGroup::Mlp(i));
            out.extend([
                m(att, "ln_g", &mut b.att.ln_g),
                m(att, "ln_b", &mut b.att.ln_b),
                m(att, "wq", &mut b.att.wq),
                m(att, "wk", &mut b.att.wk),
                m(att, "wv", &mut b.att.wv),
                m(att, "wo", &mut b.att.wo),
                m(mlp, "ln_g", &mut b.mlp.ln_g),
                m(mlp, "ln_b", &mut b.mlp.ln_b),
                m(mlp, "w1", &mut b.mlp.w1),
                m(mlp, "b1", &mut b.mlp.b1),
                m(mlp, "w2", &mut b.mlp.w2),
                m(mlp, "b2", &mut b.mlp.b2),
            ]);
        }
        out.extend([
            m(ParamGroup::Head, "lnf_g", &mut self.lnf_g),
            m(ParamGroup::Head, "lnf_b", &mut self.lnf_b),
            m(ParamGroup::Head, "head", &mut self.head),
        ]);
        out
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut g = vec![ParamGroup::Embedding];
        for i in 0..self.blocks.len() {
            g.push(ParamGroup::Att(i));
            g.push(ParamGroup::Mlp(i));
        }
        g.push(ParamGroup::Head);
        g
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// SHA-256 over the raw little-endian bytes of every tensor accepted
    /// by `select`, in canonical order.
    pub fn digest(&self, mut select: impl FnMut(ParamGroup) -> bool) -> String {
        let mut h = Sha256::new();
        for t in self.tensors() {
            if !select(t.group) {
                continue;
            }
            h.update(t.group.to_string().as_bytes());
            h.update(t.name.as_bytes());
            for x in t.data {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn group_digest(&self, group: ParamGroup) -> String {
        self.digest(|g| g == group)
    }
}

fn slice_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

/// Per-group trainability flags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainMask {
    pub embedding: bool,
    /// `(att, mlp)` per block.
    pub blocks: Vec<(bool, bool)>,
    pub head: bool,
}

impl TrainMask {
    pub fn frozen(n_blocks: usize) -> Self {
        TrainMask {
            embedding: false,
            blocks: vec![(false, false); n_blocks],
            head: false,
        }
    }

    pub fn all(n_blocks: usize) -> Self {
        TrainMask {
            embedding: true,
            blocks: vec![(true, true); n_blocks],
            head: true,
        }
    }

    pub fn single_block(n_blocks: usize, block: usize, att: bool, mlp: bool) -> Self {
        let mut m = TrainMask::frozen(n_blocks);
        if let Some(b) = m.blocks.get_mut(block) {
            *b = (att, mlp);
        }
        m
    }

    pub fn enabled(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Embedding => self.embedding,
            ParamGroup::Att(i) => self.blocks.get(i).is_some_and(|b| b.0),
            ParamGroup::Mlp(i) => self.blocks.get(i).is_some_and(|b| b.1),
            ParamGroup::Head => self.head,
        }
    }

    pub fn is_frozen(&self) -> bool {
        !self.embedding && !self.head && self.blocks.iter().all(|&(a, m)| !a && !m)
    }

    /// Lowest block whose input gradient is needed, or `None` when
    /// nothing below the head is trainable.
    pub(crate) fn lowest_block(&self) -> Option<usize> {
        if self.embedding {
            return Some(0);
        }
        self.blocks.iter().position(|&(a, m)| a || m)
    }
}
