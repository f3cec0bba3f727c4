//! Prompt-prefix baseline and the side-by-side comparison of methods.

use serde::{Deserialize, Serialize};

use crate::corpus::{HintSample, PromptSample, Scale};
use crate::error::{Error, Result};
use crate::gateway::Scorer;
use crate::lftf::TrainRun;
use crate::metrics::{
    afgb_score, bias_dataset_digest, hint_dataset_digest, ub_score, BiasReport, HintReport,
    TermSet,
};

/// Instruction prepended to every evaluation prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPrefix {
    text: String,
}

impl PromptPrefix {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Validation("prompt prefix is empty".into()));
        }
        if text.contains("{profession}") {
            return Err(Error::Validation(
                "prompt prefix must not contain a {profession} placeholder".into(),
            ));
        }
        Ok(PromptPrefix { text })
    }

    /// No-op prefix, for checking that prefixing itself changes nothing.
    pub fn identity() -> Self {
        PromptPrefix {
            text: String::new(),
        }
    }

    pub fn shipped() -> Self {
        Self::new(crate::assets::pb_prefix()).expect("shipped prefix is valid")
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn apply(&self, prompt: &str) -> String {
        if self.text.is_empty() {
            prompt.to_string()
        } else {
            format!("{} {}", self.text.trim_end(), prompt)
        }
    }
}

/// Scores prefixed prompts. Reports keep the digests of the unprefixed
/// datasets so they compare against plain evaluations.
pub fn pb_eval(
    scorer: &dyn Scorer,
    prefix: &PromptPrefix,
    bias_set: &[PromptSample],
    hint_set: &[HintSample],
    terms: &TermSet,
) -> Result<(BiasReport, HintReport)> {
    let bias: Vec<PromptSample> = bias_set
        .iter()
        .map(|s| PromptSample {
            text: prefix.apply(&s.text),
            ..s.clone()
        })
        .collect();
    let hint: Vec<HintSample> = hint_set
        .iter()
        .map(|s| HintSample {
            text: prefix.apply(&s.text),
            ..s.clone()
        })
        .collect();
    let mut b = afgb_score(scorer, &bias, terms)?;
    let mut h = ub_score(scorer, &hint, terms)?;
    b.dataset_digest = bias_dataset_digest(bias_set);
    h.dataset_digest = hint_dataset_digest(hint_set);
    if !prefix.text.is_empty() {
        b.scorer = format!("{} +prefix", b.scorer);
        h.scorer = format!("{} +prefix", h.scorer);
    }
    Ok((b, h))
}

/// One method's scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub bias: BiasReport,
    pub hint: HintReport,
    pub perplexity: Option<f64>,
    pub params_digest: Option<String>,
}

impl MethodResult {
    pub fn original(run: &TrainRun) -> Self {
        MethodResult {
            method: "Original".into(),
            bias: run.before.bias.clone(),
            hint: run.before.hint.clone(),
            perplexity: Some(run.before.perplexity),
            params_digest: None,
        }
    }

    pub fn tuned(run: &TrainRun) -> Self {
        MethodResult {
            method: run.method.clone(),
            bias: run.after.bias.clone(),
            hint: run.after.hint.clone(),
            perplexity: Some(run.after.perplexity),
            params_digest: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub afgb: Vec<(Scale, f64)>,
    pub afgb_overall: f64,
    pub ub: f64,
    pub perplexity: Option<f64>,
    /// Method value minus original value, same order as `afgb`.
    pub afgb_delta: Vec<(Scale, f64)>,
    pub afgb_overall_delta: f64,
    pub ub_delta: f64,
    pub perplexity_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub bias_digest: String,
    pub hint_digest: String,
    pub rows: Vec<ComparisonRow>,
}

/// Builds the comparison with deltas against the first result.
pub fn compare_methods(results: &[MethodResult]) -> Result<ComparisonTable> {
    let base = results
        .first()
        .ok_or_else(|| Error::Validation("nothing to compare".into()))?;
    for r in results {
        if r.bias.dataset_digest != base.bias.dataset_digest
            || r.hint.dataset_digest != base.hint.dataset_digest
        {
            return Err(Error::DatasetMismatch(format!(
                "`{}` was scored on different datasets than `{}`",
                r.method, base.method
            )));
        }
    }
    let rows = results
        .iter()
        .map(|r| {
            let afgb: Vec<(Scale, f64)> =
                r.bias.afgb_by_scale.iter().map(|(&s, &v)| (s, v)).collect();
            let afgb_delta = afgb
                .iter()
                .map(|&(s, v)| (s, v - base.bias.afgb_by_scale.get(&s).copied().unwrap_or(0.0)))
                .collect();
            ComparisonRow {
                method: r.method.clone(),
                afgb_overall: r.bias.afgb_overall,
                ub: r.hint.ub_overall,
                perplexity: r.perplexity,
                afgb_overall_delta: r.bias.afgb_overall - base.bias.afgb_overall,
                ub_delta: r.hint.ub_overall - base.hint.ub_overall,
                perplexity_delta: r.perplexity.zip(base.perplexity).map(|(a, b)| a - b),
                afgb,
                afgb_delta,
            }
        })
        .collect();
    Ok(ComparisonTable {
        bias_digest: base.bias.dataset_digest.clone(),
        hint_digest: base.hint.dataset_digest.clone(),
        rows,
    })
}

impl ComparisonTable {
    pub fn row(&self, method: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let scales: Vec<Scale> = self
            .rows
            .first()
            .map(|r| r.afgb.iter().map(|&(s, _)| s).collect())
            .unwrap_or_default();
        let mut out = String::from("method");
        for s in &scales {
            out.push_str(&format!(",afgb_{s:?},afgb_{s:?}_delta"));
        }
        out.push_str(",afgb_avg,afgb_avg_delta,ub,ub_delta,perplexity,perplexity_delta\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            out.push_str(&r.method);
            for ((_, v), (_, d)) in r.afgb.iter().zip(&r.afgb_delta) {
                out.push_str(&format!(",{v},{d}"));
            }
            out.push_str(&format!(
                ",{},{},{},{},{},{}\n",
                r.afgb_overall,
                r.afgb_overall_delta,
                r.ub,
                r.ub_delta,
                opt(r.perplexity),
                opt(r.perplexity_delta)
            ));
        }
        out
    }
}
