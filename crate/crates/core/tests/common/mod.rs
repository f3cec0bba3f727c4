#![allow(dead_code)]

pub mod mock_http;

use std::collections::HashMap;

use biaslab::corpus::{Gender, HintSample, PromptSample, Scale};
use biaslab::gateway::{ResolvedTerm, Scorer, ScorerCapabilities, TermResolution, VocabResolution};
use biaslab::lm::ProbDist;
use biaslab::metrics::TermSet;
use biaslab::Error;

/// Scorer backed by a fixed prompt -> term-probabilities table.
pub struct TableScorer {
    pub table: HashMap<String, Vec<f64>>,
}

impl TableScorer {
    pub fn new(rows: impl IntoIterator<Item = (String, Vec<f64>)>) -> Self {
        TableScorer {
            table: rows.into_iter().collect(),
        }
    }
}

impl Scorer for TableScorer {
    fn identity(&self) -> String {
        "table".into()
    }

    fn capabilities(&self) -> ScorerCapabilities {
        ScorerCapabilities {
            has_hidden_traces: false,
            vocab_resolution: VocabResolution::ExactToken,
        }
    }

    fn resolve_terms(&self, terms: &TermSet) -> biaslab::Result<TermResolution> {
        Ok(TermResolution {
            terms: terms
                .terms()
                .iter()
                .map(|t| ResolvedTerm {
                    term: t.clone(),
                    token: t.clone(),
                    token_id: None,
                    resolution: VocabResolution::ExactToken,
                })
                .collect(),
            notes: vec![],
        })
    }

    fn score_batch(&self, prompts: &[&str], terms: &TermSet) -> Vec<biaslab::Result<ProbDist>> {
        prompts
            .iter()
            .map(|p| {
                let probs = self
                    .table
                    .get(*p)
                    .ok_or_else(|| Error::UnknownToken(p.to_string()))?;
                Ok(ProbDist {
                    full: None,
                    term_view: terms.terms().iter().cloned().zip(probs.iter().copied()).collect(),
                })
            })
            .collect()
    }
}

pub fn bias_sample(id: u64, scale: Scale) -> PromptSample {
    PromptSample {
        id,
        profession: format!("p{id}"),
        template_id: "t".into(),
        text: format!("prompt {id}"),
        scale,
    }
}

pub fn hint_sample(id: u64, gender: Gender) -> HintSample {
    HintSample {
        id,
        profession: format!("p{id}"),
        template_id: "t".into(),
        text: format!("hint {id}"),
        hint_gender: gender,
    }
}
