//! Scorer abstraction over the in-process model and remote endpoints.
//!
//! Remote wire protocol: `POST {base}/v1/score` with body
//! `{"prompt": text, "terms": [text]}`; the response is
//! `{"model_id": text, "probs": {term: real}}`. `probs` carries an entry
//! for every requested term the remote model can score as a single token
//! and omits the rest; that is how term resolution discovers
//! leading-space variants.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{HiddenTrace, ModelState, ProbDist};
use crate::metrics::TermSet;

pub const AUTH_TOKEN_ENV: &str = "BIASLAB_API_TOKEN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabResolution {
    ExactToken,
    LeadingSpaceVariant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerCapabilities {
    pub has_hidden_traces: bool,
    pub vocab_resolution: VocabResolution,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedTerm {
    pub term: String,
    /// The token string actually scored (may carry a leading space).
    pub token: String,
    pub token_id: Option<u32>,
    pub resolution: VocabResolution,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermResolution {
    pub terms: Vec<ResolvedTerm>,
    pub notes: Vec<String>,
}

impl TermResolution {
    pub fn tokens(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.token.clone()).collect()
    }
}

pub trait Scorer: Sync {
    fn identity(&self) -> String;

    fn capabilities(&self) -> ScorerCapabilities;

    fn resolve_terms(&self, terms: &TermSet) -> Result<TermResolution>;

    /// One result per prompt, in prompt order.
    fn score_batch(&self, prompts: &[&str], terms: &TermSet) -> Vec<Result<ProbDist>>;

    /// Hidden-state access, when the scorer runs in process.
    fn traced(&self) -> Option<&dyn TracedScorer> {
        None
    }
}

pub trait TracedScorer {
    fn n_blocks(&self) -> usize;

    fn traces(&self, prompts: &[&str]) -> Result<Vec<HiddenTrace>>;
}

/// The in-process micro model.
pub struct LocalScorer<'a> {
    pub model: &'a ModelState,
    pub name: String,
}

impl<'a> LocalScorer<'a> {
    pub fn new(model: &'a ModelState) -> Self {
        LocalScorer {
            name: format!("micro-lm:{}", &model.digest()[..12]),
            model,
        }
    }
}

impl Scorer for LocalScorer<'_> {
    fn identity(&self) -> String {
        self.name.clone()
    }

    fn capabilities(&self) -> ScorerCapabilities {
        ScorerCapabilities {
            has_hidden_traces: true,
            vocab_resolution: VocabResolution::ExactToken,
        }
    }

    fn resolve_terms(&self, terms: &TermSet) -> Result<TermResolution> {
        let ids = self.model.term_ids(terms)?;
        Ok(TermResolution {
            terms: terms
                .terms()
                .iter()
                .zip(ids)
                .map(|(t, id)| ResolvedTerm {
                    term: t.clone(),
                    token: t.to_lowercase(),
                    token_id: Some(id),
                    resolution: VocabResolution::ExactToken,
                })
                .collect(),
            notes: vec!["word-level vocabulary: every term is a dedicated token".into()],
        })
    }

    fn score_batch(&self, prompts: &[&str], terms: &TermSet) -> Vec<Result<ProbDist>> {
        match self.model.distributions(prompts, terms) {
            Ok(d) => d.into_iter().map(Ok).collect(),
            // fall back to one-by-one so the failing prompt is identified
            Err(_) => prompts
                .iter()
                .map(|p| self.model.next_token_distribution(p, terms))
                .collect(),
        }
    }

    fn traced(&self) -> Option<&dyn TracedScorer> {
        Some(self)
    }
}

impl TracedScorer for LocalScorer<'_> {
    fn n_blocks(&self) -> usize {
        self.model.config.n_blocks
    }

    fn traces(&self, prompts: &[&str]) -> Result<Vec<HiddenTrace>> {
        let seqs = prompts
            .iter()
            .map(|p| self.model.encode(p))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(64) {
            let pass = self.model.forward_batch(chunk)?;
            for &(st, len) in &pass.packed.spans {
                let states = (0..=pass.n_blocks())
                    .map(|i| pass.hidden(i).slice(ndarray::s![st..st + len, ..]).to_owned())
                    .collect();
                out.push(HiddenTrace { states });
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Base URL, e.g. `http://127.0.0.1:8080`.
    pub endpoint: String,
    pub timeout_ms: u64,
    /// Attempts per request, including the first.
    pub attempts: usize,
    pub backoff_ms: u64,
    pub concurrency: usize,
    #[serde(skip)]
    pub auth_token: Option<String>,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        RemoteConfig {
            endpoint: endpoint.into(),
            timeout_ms: 10_000,
            attempts: 3,
            backoff_ms: 100,
            concurrency: 4,
            auth_token: std::env::var(AUTH_TOKEN_ENV).ok(),
        }
    }
}

#[derive(Debug, Serialize)]
struct ScoreRequest<'a> {
    prompt: &'a str,
    terms: &'a [String],
}

#[derive(Debug, Deserialize)]
pub struct ScoreResponse {
    pub model_id: String,
    pub probs: std::collections::BTreeMap<String, f64>,
}

/// Any scorer reachable over the wire protocol above.
pub struct RemoteScorer {
    config: RemoteConfig,
    agent: ureq::Agent,
    resolution: std::sync::OnceLock<(TermSet, TermResolution)>,
}

const PROBE_PROMPT: &str = "The";

impl RemoteScorer {
    pub fn new(config: RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteScorer {
            config,
            agent,
            resolution: std::sync::OnceLock::new(),
        }
    }

    fn url(&self) -> String {
        format!("{}/v1/score", self.config.endpoint.trim_end_matches('/'))
    }

    fn post_once(&self, prompt: &str, terms: &[String]) -> std::result::Result<ScoreResponse, Attempt> {
        let mut req = self.agent.post(&self.url());
        if let Some(tok) = &self.config.auth_token {
            req = req.header("Authorization", &format!("Bearer {tok}"));
        }
        let mut resp = req
            .send_json(ScoreRequest { prompt, terms })
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        if status >= 500 || status == 429 {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if status != 200 {
            return Err(Attempt::Fatal(Error::Protocol(format!("HTTP {status}: {body}"))));
        }
        serde_json::from_str(&body)
            .map_err(|e| Attempt::Fatal(Error::Protocol(format!("malformed response: {e}"))))
    }

    /// Posts with retries and exponential backoff on transport failures.
    pub fn post(&self, prompt: &str, terms: &[String]) -> Result<ScoreResponse> {
        let attempts = self.config.attempts.max(1);
        let mut last = String::new();
        for i in 0..attempts {
            match self.post_once(prompt, terms) {
                Ok(r) => return Ok(r),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => {
                    last = msg;
                    if i + 1 < attempts {
                        thread::sleep(Duration::from_millis(self.config.backoff_ms << i));
                    }
                }
            }
        }
        Err(Error::Transport {
            attempts,
            message: last,
        })
    }

    fn resolution_for(&self, terms: &TermSet) -> Result<TermResolution> {
        if let Some((t, r)) = self.resolution.get() {
            if t == terms {
                return Ok(r.clone());
            }
        }
        let r = self.resolve_terms(terms)?;
        let _ = self.resolution.set((terms.clone(), r.clone()));
        Ok(r)
    }

    fn score_one(&self, prompt: &str, terms: &TermSet, res: &TermResolution) -> Result<ProbDist> {
        let tokens = res.tokens();
        let resp = self.post(prompt, &tokens)?;
        term_view_from_response(&resp, terms, &tokens)
    }
}

enum Attempt {
    Retry(String),
    Fatal(Error),
}

/// Validates a response and maps token probabilities back to terms.
pub fn term_view_from_response(
    resp: &ScoreResponse,
    terms: &TermSet,
    tokens: &[String],
) -> Result<ProbDist> {
    let mut view = Vec::with_capacity(tokens.len());
    let mut sum = 0.0;
    for (term, tok) in terms.terms().iter().zip(tokens) {
        let p = *resp
            .probs
            .get(tok)
            .ok_or_else(|| Error::Protocol(format!("response has no probability for `{tok}`")))?;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Protocol(format!("probability {p} for `{tok}` is outside [0, 1]")));
        }
        sum += p;
        view.push((term.clone(), p));
    }
    if sum > 1.0 + 1e-9 {
        return Err(Error::Protocol(format!("term probabilities sum to {sum} > 1")));
    }
    Ok(ProbDist {
        full: None,
        term_view: view,
    })
}

impl Scorer for RemoteScorer {
    fn identity(&self) -> String {
        format!("remote:{}", self.config.endpoint)
    }

    fn capabilities(&self) -> ScorerCapabilities {
        ScorerCapabilities {
            has_hidden_traces: false,
            vocab_resolution: VocabResolution::LeadingSpaceVariant,
        }
    }

    fn resolve_terms(&self, terms: &TermSet) -> Result<TermResolution> {
        let mut probe = Vec::new();
        for t in terms.terms() {
            probe.push(t.clone());
            probe.push(format!(" {t}"));
        }
        let resp = self.post(PROBE_PROMPT, &probe)?;
        let mut out = TermResolution::default();
        for t in terms.terms() {
            let spaced = format!(" {t}");
            let (token, resolution) = if resp.probs.contains_key(t) {
                (t.clone(), VocabResolution::ExactToken)
            } else if resp.probs.contains_key(&spaced) {
                out.notes.push(format!(
                    "`{t}` is not a single token for {}; using leading-space variant `{spaced}`",
                    resp.model_id
                ));
                (spaced, VocabResolution::LeadingSpaceVariant)
            } else {
                return Err(Error::UnresolvableTerm(t.clone()));
            };
            out.terms.push(ResolvedTerm {
                term: t.clone(),
                token,
                token_id: None,
                resolution,
            });
        }
        Ok(out)
    }

    fn score_batch(&self, prompts: &[&str], terms: &TermSet) -> Vec<Result<ProbDist>> {
        let res = match self.resolution_for(terms) {
            Ok(r) => r,
            Err(e) => {
                let msg = e.to_string();
                return prompts
                    .iter()
                    .map(|_| Err(Error::Protocol(msg.clone())))
                    .collect();
            }
        };
        let width = self.config.concurrency.max(1);
        let mut out = Vec::with_capacity(prompts.len());
        for chunk in prompts.chunks(width) {
            let results: Vec<Result<ProbDist>> = thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|p| s.spawn(|| self.score_one(p, terms, &res)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("scoring thread panicked"))
                    .collect()
            });
            out.extend(results);
        }
        out
    }
}
