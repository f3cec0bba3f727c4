//! A small decoder-only transformer with hand-written backpropagation.
//!
//! Pre-norm blocks (attention then feed-forward, both residual), learned
//! position embeddings, a final norm and an untied output projection.
//! Everything is computed in `f64`.

pub mod checkpoint;
pub mod forward;
pub mod params;
pub mod pretrain;
pub mod train;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::TermSet;
use crate::vocab::Vocab;
use forward::{ForwardPass, Packed};
pub use params::{ParamGroup, Params, TensorRef, TrainMask};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_ff: usize,
    pub max_context: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// The default testbed shape for a given vocabulary size.
    pub fn micro(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_blocks: 8,
            d_ff: 256,
            max_context: 32,
            seed: 7,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.d_ff == 0 || self.max_context == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_blocks < 2 {
            return bad(format!("n_blocks must be at least 2, got {}", self.n_blocks));
        }
        Ok(())
    }
}

/// Residual-stream states of one prompt: entry 0 is the embedding output,
/// entry `i + 1` the output of block `i`. Each is `[tokens x d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrace {
    pub states: Vec<Array2<f64>>,
}

impl HiddenTrace {
    pub fn n_blocks(&self) -> usize {
        self.states.len() - 1
    }

    pub fn seq_len(&self) -> usize {
        self.states[0].nrows()
    }
}

/// Next-token distribution. `full` is present for in-process models;
/// remote scorers only return the term view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbDist {
    pub full: Option<Vec<f64>>,
    pub term_view: Vec<(String, f64)>,
}

impl ProbDist {
    pub fn prob(&self, term: &str) -> Option<f64> {
        self.term_view
            .iter()
            .find(|(t, _)| t == term)
            .map(|&(_, p)| p)
    }

    pub fn from_logits(logits: &[f64], terms: &TermSet, ids: &[u32]) -> Self {
        let full = forward::softmax(logits);
        let term_view = terms
            .terms()
            .iter()
            .zip(ids)
            .map(|(t, &id)| (t.clone(), full[id as usize]))
            .collect();
        ProbDist {
            full: Some(full),
            term_view,
        }
    }
}

/// A differentiable scalar of the output logits.
pub trait Objective {
    /// Loss value and its gradient with respect to `pass.logits`.
    fn evaluate(&self, pass: &ForwardPass) -> (f64, Array2<f64>);
}

/// Mean next-token cross-entropy over every position that has a successor.
pub struct NextTokenLoss;

impl Objective for NextTokenLoss {
    fn evaluate(&self, pass: &ForwardPass) -> (f64, Array2<f64>) {
        let mut dlogits = Array2::zeros(pass.logits.raw_dim());
        let count: usize = pass.packed.spans.iter().map(|&(_, len)| len - 1).sum();
        if count == 0 {
            return (0.0, dlogits);
        }
        let mut nll = 0.0;
        for &(st, len) in &pass.packed.spans {
            for p in 0..len - 1 {
                let row = st + p;
                let target = pass.packed.tokens[row + 1] as usize;
                let probs = forward::softmax(pass.logits.row(row).as_slice().expect("row"));
                nll -= probs[target].ln();
                let mut d = dlogits.row_mut(row);
                for (dv, pv) in d.iter_mut().zip(&probs) {
                    *dv = pv / count as f64;
                }
                d[target] -= 1.0 / count as f64;
            }
        }
        (nll / count as f64, dlogits)
    }
}

/// Gradients restricted to the groups enabled by a mask.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Params,
    mask: TrainMask,
}

impl Gradients {
    pub fn get(&self, group: ParamGroup) -> Option<Vec<TensorRef<'_>>> {
        if !self.mask.enabled(group) {
            return None;
        }
        Some(
            self.grads
                .tensors()
                .into_iter()
                .filter(|t| t.group == group)
                .collect(),
        )
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        self.grads
            .groups()
            .into_iter()
            .filter(|&g| self.mask.enabled(g))
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_frozen()
    }

    pub fn mask(&self) -> &TrainMask {
        &self.mask
    }

    pub(crate) fn params(&self) -> &Params {
        &self.grads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: Params,
    pub mask: TrainMask,
}

impl ModelState {
    /// Deterministic initialization from `config.seed`; everything frozen.
    pub fn init(config: ModelConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Config(format!(
                "vocab_size {} does not match vocabulary of {} words",
                config.vocab_size,
                vocab.len()
            )));
        }
        Ok(ModelState {
            params: Params::init(&config),
            mask: TrainMask::frozen(config.n_blocks),
            config,
            vocab,
        })
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let tokens = self.vocab.encode(text)?;
        self.check_len(tokens.len())?;
        Ok(tokens)
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len == 0 || len > self.config.max_context {
            return Err(Error::ContextOverflow {
                len,
                max: self.config.max_context,
            });
        }
        Ok(())
    }

    pub fn forward_batch(&self, seqs: &[Vec<u32>]) -> Result<ForwardPass> {
        for s in seqs {
            self.check_len(s.len())?;
            if let Some(&bad) = s.iter().find(|&&t| t as usize >= self.config.vocab_size) {
                return Err(Error::UnknownToken(format!("#{bad}")));
            }
        }
        Ok(forward::forward(&self.config, &self.params, Packed::new(seqs)))
    }

    /// Final-position logits and the full hidden trace of one sequence.
    pub fn forward(&self, tokens: &[u32]) -> Result<(Array1<f64>, HiddenTrace)> {
        let pass = self.forward_batch(&[tokens.to_vec()])?;
        let last = tokens.len() - 1;
        let logits = pass.logits.row(last).to_owned();
        let states = (0..=self.config.n_blocks)
            .map(|i| pass.hidden(i).clone())
            .collect();
        Ok((logits, HiddenTrace { states }))
    }

    /// Re-runs blocks `block..` from a recorded residual state and returns
    /// the final-position logits.
    pub fn logits_from(&self, block: usize, state: &Array2<f64>) -> Result<Array1<f64>> {
        if block > self.config.n_blocks || state.ncols() != self.config.d_model {
            return Err(Error::Validation(format!("bad resume point {block}")));
        }
        let rows = state.nrows();
        self.check_len(rows)?;
        let packed = Packed {
            tokens: vec![0; rows],
            spans: vec![(0, rows)],
        };
        let pass = forward::forward_from(&self.config, &self.params, packed, state.clone(), block);
        Ok(pass.logits.row(rows - 1).to_owned())
    }

    pub fn term_ids(&self, terms: &TermSet) -> Result<Vec<u32>> {
        terms
            .terms()
            .iter()
            .map(|t| {
                self.vocab
                    .id(&t.to_lowercase())
                    .ok_or_else(|| Error::UnresolvableTerm(t.clone()))
            })
            .collect()
    }

    pub fn next_token_distribution(&self, prompt: &str, terms: &TermSet) -> Result<ProbDist> {
        let ids = self.term_ids(terms)?;
        let tokens = self.encode(prompt)?;
        let (logits, _) = self.forward(&tokens)?;
        Ok(ProbDist::from_logits(
            logits.as_slice().expect("contiguous"),
            terms,
            &ids,
        ))
    }

    /// Final-position distributions for many prompts, batched.
    pub fn distributions(&self, prompts: &[&str], terms: &TermSet) -> Result<Vec<ProbDist>> {
        let ids = self.term_ids(terms)?;
        let seqs = prompts
            .iter()
            .map(|p| self.encode(p))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(64) {
            let pass = self.forward_batch(chunk)?;
            for row in pass.packed.last_rows() {
                let logits = pass.logits.row(row);
                out.push(ProbDist::from_logits(
                    logits.as_slice().expect("row"),
                    terms,
                    &ids,
                ));
            }
        }
        Ok(out)
    }

    /// Loss and gradients for the groups enabled in `mask`.
    pub fn param_gradients(
        &self,
        seqs: &[Vec<u32>],
        objective: &dyn Objective,
        mask: &TrainMask,
    ) -> Result<(f64, Gradients)> {
        let pass = self.forward_batch(seqs)?;
        let (loss, dlogits) = objective.evaluate(&pass);
        let grads = if mask.is_frozen() {
            Params::zeros(&self.config)
        } else {
            forward::backward(&self.config, &self.params, &pass, &dlogits, mask)
        };
        Ok((
            loss,
            Gradients {
                grads,
                mask: mask.clone(),
            },
        ))
    }

    pub fn digest(&self) -> String {
        self.params.digest(|_| true)
    }
}
