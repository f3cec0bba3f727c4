//! Synthetic pretraining text that plants a profession-gender association
//! in the testbed model.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Gender, Profession, PromptTemplate};
use crate::error::{Error, Result};

/// Profession -> probability that a completion uses "she".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SkewTable(BTreeMap<String, f64>);

impl SkewTable {
    pub fn new(map: BTreeMap<String, f64>) -> Result<Self> {
        for (p, &v) in &map {
            if !(0.0..=1.0).contains(&v) || v.is_nan() {
                return Err(Error::Validation(format!(
                    "skew for `{p}` is {v}, outside [0, 1]"
                )));
            }
        }
        Ok(SkewTable(map))
    }

    pub fn uniform(professions: &[Profession], value: f64) -> Result<Self> {
        Self::new(
            professions
                .iter()
                .map(|p| (p.surface.clone(), value))
                .collect(),
        )
    }

    /// Roughly 60% of professions lean male (P(she) in [0.05, 0.2]), the
    /// rest lean female (P(she) in [0.8, 0.95]). A handful of professions
    /// get fixed values so case tables are stable.
    pub fn stereotyped(professions: &[Profession], seed: u64) -> Self {
        const FIXED: &[(&str, f64)] = &[
            ("nurse", 0.9),
            ("caretaker", 0.85),
            ("mobster", 0.1),
            ("preacher", 0.12),
            ("footballer", 0.08),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = professions
            .iter()
            .map(|p| {
                let male = rng.random_bool(0.6);
                let jitter: f64 = rng.random_range(0.05..0.2);
                let v = if male { jitter } else { 1.0 - jitter };
                let v = FIXED
                    .iter()
                    .find(|(name, _)| *name == p.surface)
                    .map_or(v, |&(_, f)| f);
                (p.surface.clone(), v)
            })
            .collect();
        SkewTable(map)
    }

    pub fn get(&self, profession: &str) -> Option<f64> {
        self.0.get(profession).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&String, &f64)> {
        self.0.iter()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: BTreeMap<String, f64> = serde_json::from_str(&text)?;
        Self::new(map)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeutralGrammar {
    pub subjects: Vec<String>,
    pub predicates: Vec<String>,
    pub endings: Vec<String>,
}

impl NeutralGrammar {
    pub fn combinations(&self) -> usize {
        self.subjects.len() * self.predicates.len() * self.endings.len()
    }

    pub fn sentence(&self, index: usize) -> String {
        let e = index % self.endings.len();
        let rest = index / self.endings.len();
        let p = rest % self.predicates.len();
        let s = rest / self.predicates.len();
        format!(
            "{} {} {} .",
            self.subjects[s], self.predicates[p], self.endings[e]
        )
    }

    /// One combination in five is held out of training. The rule mixes
    /// all three parts so every subject, predicate and ending still occurs
    /// in training.
    fn is_heldout(&self, index: usize) -> bool {
        let e = index % self.endings.len();
        let rest = index / self.endings.len();
        let p = rest % self.predicates.len();
        let s = rest / self.predicates.len();
        (s + p + e).is_multiple_of(5)
    }

    fn draw(&self, n: usize, seed: u64, heldout: bool) -> Vec<String> {
        let pool: Vec<usize> = (0..self.combinations())
            .filter(|&i| self.is_heldout(i) == heldout)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| self.sentence(*pool.choose(&mut rng).expect("non-empty grammar")))
            .collect()
    }

    pub fn training_lines(&self, n: usize, seed: u64) -> Vec<String> {
        self.draw(n, seed, false)
    }

    pub fn heldout_lines(&self, n: usize, seed: u64) -> Vec<String> {
        self.draw(n, seed, true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainAssets {
    pub version: u32,
    pub pronoun_tails: Vec<String>,
    pub neutral: NeutralGrammar,
}

impl PretrainAssets {
    pub fn shipped() -> Self {
        serde_json::from_str(crate::assets::PRETRAIN).expect("shipped pretrain asset parses")
    }
}

/// What goes into a synthetic corpus besides the biased lines.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainPlan {
    pub bias_templates: Vec<PromptTemplate>,
    pub hint_templates: Vec<PromptTemplate>,
    pub assets: PretrainAssets,
    /// Hint-template lines, as a fraction of `size`.
    pub hint_fraction: f64,
    /// Neutral filler lines, as a fraction of `size`.
    pub neutral_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LineKind {
    Bias,
    Hint,
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusLine {
    pub kind: LineKind,
    pub profession: Option<String>,
    pub pronoun: Option<Gender>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub lines: Vec<CorpusLine>,
}

impl Corpus {
    pub fn texts(&self) -> Vec<String> {
        self.lines.iter().map(|l| l.text.clone()).collect()
    }
}

fn pronoun(g: Gender) -> &'static str {
    match g {
        Gender::Male => "he",
        Gender::Female => "she",
    }
}

/// `size` biased lines cycling through `professions`, each a random bias
/// template completed with "she" at the profession's skew (otherwise "he")
/// and a short tail; plus hint lines whose pronoun follows the hint, and
/// neutral filler sentences.
pub fn synthesize_pretraining_corpus(
    professions: &[Profession],
    skew: &SkewTable,
    size: usize,
    seed: u64,
    plan: &PretrainPlan,
) -> Result<Corpus> {
    if professions.is_empty() {
        return Err(Error::Validation("no professions to synthesize from".into()));
    }
    if plan.bias_templates.is_empty() {
        return Err(Error::Validation("no bias templates".into()));
    }
    let skews = professions
        .iter()
        .map(|p| {
            skew.get(&p.surface)
                .ok_or_else(|| Error::Validation(format!("no skew for `{}`", p.surface)))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tails = &plan.assets.pronoun_tails;
    let mut lines = Vec::new();
    let tail = |rng: &mut ChaCha8Rng| tails.choose(rng).map_or("", String::as_str).to_string();
    for j in 0..size {
        let k = j % professions.len();
        let prof = &professions[k].surface;
        let t = plan.bias_templates.choose(&mut rng).expect("non-empty");
        let g = if rng.random_bool(skews[k]) {
            Gender::Female
        } else {
            Gender::Male
        };
        let text = format!("{} {} {} .", t.render(prof), pronoun(g), tail(&mut rng));
        lines.push(CorpusLine {
            kind: LineKind::Bias,
            profession: Some(prof.clone()),
            pronoun: Some(g),
            text,
        });
    }
    let n_hint = (size as f64 * plan.hint_fraction).round() as usize;
    if n_hint > 0 && !plan.hint_templates.is_empty() {
        for j in 0..n_hint {
            let prof = &professions[j % professions.len()].surface;
            let t = plan.hint_templates.choose(&mut rng).expect("non-empty");
            let g = t
                .hint_gender
                .ok_or_else(|| Error::BadTemplate(t.id.clone(), "no hint_gender".into()))?;
            let text = format!("{} {} {} .", t.render(prof), pronoun(g), tail(&mut rng));
            lines.push(CorpusLine {
                kind: LineKind::Hint,
                profession: Some(prof.clone()),
                pronoun: Some(g),
                text,
            });
        }
    }
    let n_neutral = (size as f64 * plan.neutral_fraction).round() as usize;
    let neutral_seed: u64 = rng.random();
    for text in plan.assets.neutral.training_lines(n_neutral, neutral_seed) {
        lines.push(CorpusLine {
            kind: LineKind::Neutral,
            profession: None,
            pronoun: None,
            text,
        });
    }
    Ok(Corpus { lines })
}
