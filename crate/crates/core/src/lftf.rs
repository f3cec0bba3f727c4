//! Locate-then-fine-tune: rank blocks by BMI, then train only the
//! top-ranked block to balance the pronoun probabilities.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{HintSample, PromptSample};
use crate::error::{Error, Result};
use crate::gateway::LocalScorer;
use crate::lm::forward::{softmax, ForwardPass};
use crate::lm::train::{fit, perplexity, TrainHyper};
use crate::lm::{ModelState, Objective, ParamGroup, TrainMask};
use crate::locator::{aggregate_bmi, Aggregation, BlockScore};
use crate::metrics::{
    afgb_score, detect_anti_bias, ub_score, AntiBiasVerdict, BiasReport, HintReport, TermSet,
    DEFAULT_ANTI_BIAS_THRESHOLD,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// `P(t1) + P(t2)`.
    #[default]
    #[serde(rename = "eq8_sum")]
    PairSum,
    AbsDiff,
    SqDiff,
    /// `P(t1)` alone.
    OnlyHe,
    /// `P(t2)` alone.
    OnlyShe,
    /// `sum_k P(t_k)` over every term of the set.
    TermsetSum,
}

impl LossVariant {
    pub const ALL: [LossVariant; 6] = [
        LossVariant::PairSum,
        LossVariant::AbsDiff,
        LossVariant::SqDiff,
        LossVariant::OnlyHe,
        LossVariant::OnlyShe,
        LossVariant::TermsetSum,
    ];

    fn needs_pair(self) -> bool {
        !matches!(self, LossVariant::TermsetSum)
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossVariant::PairSum => "eq8_sum",
            LossVariant::AbsDiff => "abs_diff",
            LossVariant::SqDiff => "sq_diff",
            LossVariant::OnlyHe => "only_he",
            LossVariant::OnlyShe => "only_she",
            LossVariant::TermsetSum => "termset_sum",
        })
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossVariant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::Validation(format!("unknown loss variant `{s}`")))
    }
}

/// Loss value and its gradient with respect to the term probabilities.
fn loss_and_grad(p: &[f64], variant: LossVariant) -> (f64, Vec<f64>) {
    match variant {
        LossVariant::PairSum => (p[0] + p[1], vec![1.0, 1.0]),
        LossVariant::AbsDiff => {
            let d = p[0] - p[1];
            let s = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            (d.abs(), vec![s, -s])
        }
        LossVariant::SqDiff => {
            let d = p[0] - p[1];
            (d * d, vec![2.0 * d, -2.0 * d])
        }
        LossVariant::OnlyHe => (p[0], vec![1.0, 0.0]),
        LossVariant::OnlyShe => (p[1], vec![0.0, 1.0]),
        LossVariant::TermsetSum => (p.iter().sum(), vec![1.0; p.len()]),
    }
}

fn check_variant(terms: &TermSet, variant: LossVariant) -> Result<()> {
    if variant.needs_pair() && !terms.is_pair() {
        return Err(Error::Validation(format!(
            "loss variant {variant} needs a two-term set"
        )));
    }
    Ok(())
}

/// Loss on a term-probability view, in term-set order.
pub fn lftf_loss(term_probs: &[f64], terms: &TermSet, variant: LossVariant) -> Result<f64> {
    check_variant(terms, variant)?;
    if term_probs.len() != terms.terms().len() {
        return Err(Error::Validation("one probability per term is required".into()));
    }
    Ok(loss_and_grad(term_probs, variant).0)
}

/// Batch-mean LFTF loss at the final position of every prompt.
pub struct LftfObjective {
    pub variant: LossVariant,
    pub term_ids: Vec<usize>,
}

impl LftfObjective {
    pub fn new(model: &ModelState, terms: &TermSet, variant: LossVariant) -> Result<Self> {
        check_variant(terms, variant)?;
        Ok(LftfObjective {
            variant,
            term_ids: model
                .term_ids(terms)?
                .into_iter()
                .map(|i| i as usize)
                .collect(),
        })
    }
}

impl Objective for LftfObjective {
    fn evaluate(&self, pass: &ForwardPass) -> (f64, Array2<f64>) {
        let mut dlogits = Array2::zeros(pass.logits.raw_dim());
        let rows = pass.packed.last_rows();
        let n = rows.len() as f64;
        let mut total = 0.0;
        for row in rows {
            let probs = softmax(pass.logits.row(row).as_slice().expect("row"));
            let p: Vec<f64> = self.term_ids.iter().map(|&i| probs[i]).collect();
            let (loss, g) = loss_and_grad(&p, self.variant);
            total += loss;
            // dL/dz_j = sum_k g_k p_k (1[j = k] - p_j)
            let gp: f64 = g.iter().zip(&p).map(|(a, b)| a * b).sum();
            let mut d = dlogits.row_mut(row);
            for (dv, &pj) in d.iter_mut().zip(&probs) {
                *dv = -pj * gp / n;
            }
            for (&id, (&gk, &pk)) in self.term_ids.iter().zip(g.iter().zip(&p)) {
                d[id] += gk * pk / n;
            }
        }
        (total / n, dlogits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetBlock {
    Auto,
    Index(usize),
}

impl FromStr for TargetBlock {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(TargetBlock::Auto);
        }
        s.parse()
            .map(TargetBlock::Index)
            .map_err(|_| Error::Validation(format!("target block must be `auto` or an index, got `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LftfConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub loss_variant: LossVariant,
    pub tune_att: bool,
    pub tune_mlp: bool,
    pub target_block: TargetBlock,
    pub aggregation: Aggregation,
    pub anti_bias_threshold: f64,
}

impl Default for LftfConfig {
    fn default() -> Self {
        LftfConfig {
            learning_rate: 1e-5,
            epochs: 2,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            loss_variant: LossVariant::PairSum,
            tune_att: true,
            tune_mlp: true,
            target_block: TargetBlock::Auto,
            aggregation: Aggregation::SumAllPositions,
            anti_bias_threshold: DEFAULT_ANTI_BIAS_THRESHOLD,
        }
    }
}

impl LftfConfig {
    pub fn hyper(&self) -> TrainHyper {
        TrainHyper {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            seed: self.seed,
            clip_norm: None,
            final_lr_fraction: 1.0,
        }
    }
}

/// Datasets every run is scored on.
#[derive(Debug, Clone)]
pub struct EvalSuite {
    pub terms: TermSet,
    /// Held-out bias prompts (the test split).
    pub bias: Vec<PromptSample>,
    pub hint: Vec<HintSample>,
    /// Neutral text for perplexity.
    pub neutral: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub bias: BiasReport,
    pub hint: HintReport,
    pub perplexity: f64,
}

pub fn evaluate(model: &ModelState, suite: &EvalSuite) -> Result<Evaluation> {
    let scorer = LocalScorer::new(model);
    Ok(Evaluation {
        bias: afgb_score(&scorer, &suite.bias, &suite.terms)?,
        hint: ub_score(&scorer, &suite.hint, &suite.terms)?,
        perplexity: perplexity(model, &suite.neutral)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub method: String,
    pub config: LftfConfig,
    /// The fine-tuned block, `None` for full-parameter runs.
    pub block: Option<usize>,
    pub block_scores: Option<Vec<BlockScore>>,
    pub mask: TrainMask,
    pub before: Evaluation,
    pub after: Evaluation,
    pub loss_curve: Vec<f64>,
    pub tuned_digest_before: String,
    pub tuned_digest_after: String,
    pub frozen_digest_before: String,
    pub frozen_digest_after: String,
    pub anti_bias: AntiBiasVerdict,
}

fn train_with_mask(
    method: &str,
    model: &ModelState,
    train_set: &[PromptSample],
    config: &LftfConfig,
    suite: &EvalSuite,
    mask: TrainMask,
    block: Option<usize>,
) -> Result<(ModelState, TrainRun)> {
    if train_set.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let objective = LftfObjective::new(model, &suite.terms, config.loss_variant)?;
    let seqs = train_set
        .iter()
        .map(|s| model.encode(&s.text).map_err(|e| Error::at_sample(s.id, e)))
        .collect::<Result<Vec<_>>>()?;
    let before = evaluate(model, suite)?;
    let (mut tuned, log) = fit(model, &seqs, &objective, &mask, &config.hyper())?;
    tuned.mask = TrainMask::frozen(model.config.n_blocks);
    let after = evaluate(&tuned, suite)?;
    let anti_bias = detect_anti_bias(&before.bias, &after.bias, config.anti_bias_threshold)?;
    let is_tuned = |g: ParamGroup| mask.enabled(g);
    let run = TrainRun {
        method: method.to_string(),
        config: config.clone(),
        block,
        block_scores: None,
        tuned_digest_before: model.params.digest(is_tuned),
        tuned_digest_after: tuned.params.digest(is_tuned),
        frozen_digest_before: model.params.digest(|g| !is_tuned(g)),
        frozen_digest_after: tuned.params.digest(|g| !is_tuned(g)),
        mask,
        before,
        after,
        loss_curve: log.step_losses,
        anti_bias,
    };
    Ok((tuned, run))
}

/// Fine-tunes the enabled submodules of one block; everything else stays
/// bit-identical.
pub fn fine_tune_block(
    model: &ModelState,
    block: usize,
    train_set: &[PromptSample],
    config: &LftfConfig,
    suite: &EvalSuite,
) -> Result<(ModelState, TrainRun)> {
    let n = model.config.n_blocks;
    if block >= n {
        return Err(Error::Validation(format!(
            "block {block} out of range for {n} blocks"
        )));
    }
    let mask = TrainMask::single_block(n, block, config.tune_att, config.tune_mlp);
    train_with_mask("LFTF", model, train_set, config, suite, mask, Some(block))
}

/// Locates the rank-1 block on `train_set` (unless a block is pinned) and
/// fine-tunes it.
pub fn run_lftf(
    model: &ModelState,
    train_set: &[PromptSample],
    config: &LftfConfig,
    suite: &EvalSuite,
) -> Result<(ModelState, TrainRun)> {
    let (block, scores) = match config.target_block {
        TargetBlock::Index(b) => (b, None),
        TargetBlock::Auto => {
            let table = aggregate_bmi(&LocalScorer::new(model), train_set, config.aggregation)?;
            (table.top_block(), Some(table.scores))
        }
    };
    let (tuned, mut run) = fine_tune_block(model, block, train_set, config, suite)?;
    run.block_scores = scores;
    Ok((tuned, run))
}

/// Full-parameter fine-tuning with the same loop and loss.
pub fn fpft(
    model: &ModelState,
    train_set: &[PromptSample],
    config: &LftfConfig,
    suite: &EvalSuite,
) -> Result<(ModelState, TrainRun)> {
    let mask = TrainMask::all(model.config.n_blocks);
    train_with_mask("FPFT", model, train_set, config, suite, mask, None)
}
