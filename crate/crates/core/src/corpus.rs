//! Prompt corpora: profession filtering, template composition and the
//! train/dev/test split.
//!
//! The bias corpus is the Cartesian product of filtered professions and
//! bias templates; the hint corpus uses templates that carry an explicit
//! gendered possessive. Both are persisted as JSONL, one sample per line.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PLACEHOLDER: &str = "{profession}";

/// Seed that, with the shipped assets, reproduces the reference split sizes.
pub const SHIPPED_SPLIT_SEED: u64 = 3_521_575;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scale {
    Word,
    Phrase,
    Sentence,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::Word, Scale::Phrase, Scale::Sentence];
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Scale::Word => "Word-Scale",
            Scale::Phrase => "Phrase-Scale",
            Scale::Sentence => "Sentence-Scale",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    Bias,
    Hint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    /// The hint factor: +1 for male hints, -1 for female hints.
    pub fn hint_factor(self) -> f64 {
        match self {
            Gender::Male => 1.0,
            Gender::Female => -1.0,
        }
    }

    pub fn flipped(self) -> Gender {
        match self {
            Gender::Male => Gender::Female,
            Gender::Female => Gender::Male,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    SemanticGender,
    MorphologicalGender,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Profession {
    pub surface: String,
    pub excluded: bool,
    pub exclusion_reason: ExclusionReason,
}

impl Profession {
    pub fn retained(surface: impl Into<String>) -> Self {
        Profession {
            surface: surface.into(),
            excluded: false,
            exclusion_reason: ExclusionReason::None,
        }
    }
}

/// Rule file for the profession filter. A word matching an entry in
/// `semantic` excludes the profession outright; otherwise any word ending
/// in one of `morphological_suffixes` excludes it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionRules {
    #[serde(default)]
    pub version: u32,
    #[serde(default)]
    pub morphological_suffixes: Vec<String>,
    #[serde(default)]
    pub semantic: Vec<String>,
}

impl ExclusionRules {
    fn classify(&self, surface: &str) -> ExclusionReason {
        let words: Vec<&str> = surface.split_whitespace().collect();
        if words
            .iter()
            .any(|w| self.semantic.iter().any(|s| s == w))
        {
            return ExclusionReason::SemanticGender;
        }
        if words.iter().any(|w| {
            self.morphological_suffixes
                .iter()
                .any(|suffix| w.ends_with(suffix.as_str()))
        }) {
            return ExclusionReason::MorphologicalGender;
        }
        ExclusionReason::None
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub pattern: String,
    pub scale: Scale,
    pub kind: TemplateKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hint_gender: Option<Gender>,
}

const MALE_HINTS: &[&str] = &["his", "him", "he", "himself"];
const FEMALE_HINTS: &[&str] = &["her", "hers", "she", "herself"];

impl PromptTemplate {
    pub fn render(&self, profession: &str) -> String {
        self.pattern.replacen(PLACEHOLDER, profession, 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::BadTemplate(self.id.clone(), msg.to_string()));
        match self.pattern.matches(PLACEHOLDER).count() {
            0 => return Err(Error::MissingPlaceholder(self.id.clone())),
            1 => {}
            _ => return bad("more than one placeholder"),
        }
        if !self.pattern.starts_with("The {profession}") {
            return bad("pattern must start with \"The {profession}\"");
        }
        if !self.pattern.ends_with("because") {
            return bad("pattern must end with \"because\"");
        }
        let words: Vec<String> = self
            .pattern
            .split_whitespace()
            .map(|w| w.to_lowercase())
            .collect();
        let has = |list: &[&str]| words.iter().any(|w| list.contains(&w.as_str()));
        match (self.kind, self.hint_gender) {
            (TemplateKind::Bias, None) => Ok(()),
            (TemplateKind::Bias, Some(_)) => bad("bias template must not carry a hint gender"),
            (TemplateKind::Hint, None) => bad("hint template has no hint_gender"),
            (TemplateKind::Hint, Some(Gender::Male)) if has(MALE_HINTS) => Ok(()),
            (TemplateKind::Hint, Some(Gender::Female)) if has(FEMALE_HINTS) => Ok(()),
            (TemplateKind::Hint, Some(_)) => bad("hint template has no matching gendered hint word"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateManifest {
    pub version: u32,
    /// False for the shipped stand-in templates.
    pub canonical: bool,
    #[serde(default)]
    pub note: String,
    pub templates: Vec<PromptTemplate>,
}

impl TemplateManifest {
    pub fn bias_templates(&self) -> Vec<PromptTemplate> {
        self.of_kind(TemplateKind::Bias)
    }

    pub fn hint_templates(&self) -> Vec<PromptTemplate> {
        self.of_kind(TemplateKind::Hint)
    }

    fn of_kind(&self, kind: TemplateKind) -> Vec<PromptTemplate> {
        self.templates
            .iter()
            .filter(|t| t.kind == kind)
            .cloned()
            .collect()
    }

    /// (male, female) hint template counts declared by the manifest.
    pub fn hint_gender_ratio(&self) -> (usize, usize) {
        self.templates
            .iter()
            .fold((0, 0), |(m, f), t| match t.hint_gender {
                Some(Gender::Male) => (m + 1, f),
                Some(Gender::Female) => (m, f + 1),
                None => (m, f),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSample {
    pub id: u64,
    pub profession: String,
    pub template_id: String,
    pub text: String,
    pub scale: Scale,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HintSample {
    pub id: u64,
    pub profession: String,
    pub template_id: String,
    pub text: String,
    pub hint_gender: Gender,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitStrategy {
    /// One seeded shuffle over the whole corpus, then 2:1:2 cut.
    Global,
    /// Seeded shuffle and 2:1:2 cut inside each scale stratum.
    Stratified,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<PromptSample>,
    pub dev: Vec<PromptSample>,
    pub test: Vec<PromptSample>,
    pub seed: u64,
    pub ratio: [u32; 3],
    pub strategy: SplitStrategy,
}

/// Per-scale counts of a split, in (train, dev, test) order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitCounts {
    pub by_scale: BTreeMap<Scale, [usize; 3]>,
    pub total: [usize; 3],
}

impl CorpusSplit {
    pub fn counts(&self) -> SplitCounts {
        let mut by_scale: BTreeMap<Scale, [usize; 3]> =
            Scale::ALL.iter().map(|&s| (s, [0; 3])).collect();
        for (part, samples) in [&self.train, &self.dev, &self.test].into_iter().enumerate() {
            for s in samples {
                by_scale.get_mut(&s.scale).expect("all scales present")[part] += 1;
            }
        }
        SplitCounts {
            by_scale,
            total: [self.train.len(), self.dev.len(), self.test.len()],
        }
    }
}

impl fmt::Display for SplitCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16}{:>10}{:>13}{:>9}", "Category", "Training", "Development", "Testing")?;
        for (scale, [a, b, c]) in &self.by_scale {
            writeln!(f, "{:<16}{:>10}{:>13}{:>9}", scale.to_string(), a, b, c)?;
        }
        let [a, b, c] = self.total;
        write!(f, "{:<16}{:>10}{:>13}{:>9}", "Total", a, b, c)
    }
}

pub fn filter_professions(lexicon: &[String], rules: &ExclusionRules) -> Result<Vec<Profession>> {
    if lexicon.is_empty() {
        return Err(Error::Validation("profession lexicon is empty".into()));
    }
    let mut seen = HashSet::new();
    let mut duplicates = Vec::new();
    for entry in lexicon {
        if !seen.insert(entry.as_str()) && !duplicates.contains(entry) {
            duplicates.push(entry.clone());
        }
    }
    if !duplicates.is_empty() {
        return Err(Error::DuplicateEntries(duplicates));
    }
    lexicon
        .iter()
        .map(|surface| {
            if surface.trim().is_empty() {
                return Err(Error::Validation("empty profession entry".into()));
            }
            if surface.contains('{') || surface.contains('}') {
                return Err(Error::Validation(format!(
                    "profession `{surface}` contains template braces"
                )));
            }
            let reason = rules.classify(surface);
            Ok(Profession {
                surface: surface.clone(),
                excluded: reason != ExclusionReason::None,
                exclusion_reason: reason,
            })
        })
        .collect()
}

pub fn retained(professions: &[Profession]) -> Vec<Profession> {
    professions.iter().filter(|p| !p.excluded).cloned().collect()
}

fn check_professions(professions: &[Profession]) -> Result<()> {
    match professions.iter().find(|p| p.excluded) {
        Some(p) => Err(Error::Validation(format!(
            "profession `{}` is excluded and cannot be composed",
            p.surface
        ))),
        None => Ok(()),
    }
}

fn check_templates(templates: &[PromptTemplate], kind: TemplateKind) -> Result<()> {
    for t in templates {
        if t.kind != kind {
            return Err(Error::BadTemplate(
                t.id.clone(),
                format!("expected a {kind:?} template"),
            ));
        }
        t.validate()?;
    }
    Ok(())
}

/// Profession-major Cartesian product: sample `p * |T| + t` renders
/// profession `p` into template `t`.
pub fn compose_bias_corpus(
    professions: &[Profession],
    templates: &[PromptTemplate],
) -> Result<Vec<PromptSample>> {
    check_professions(professions)?;
    check_templates(templates, TemplateKind::Bias)?;
    let mut out = Vec::with_capacity(professions.len() * templates.len());
    for p in professions {
        for t in templates {
            out.push(PromptSample {
                id: out.len() as u64,
                profession: p.surface.clone(),
                template_id: t.id.clone(),
                text: t.render(&p.surface),
                scale: t.scale,
            });
        }
    }
    Ok(out)
}

pub fn compose_hint_corpus(
    professions: &[Profession],
    hint_templates: &[PromptTemplate],
) -> Result<Vec<HintSample>> {
    check_professions(professions)?;
    check_templates(hint_templates, TemplateKind::Hint)?;
    let mut out = Vec::with_capacity(professions.len() * hint_templates.len());
    for p in professions {
        for t in hint_templates {
            let hint_gender = t
                .hint_gender
                .ok_or_else(|| Error::BadTemplate(t.id.clone(), "no hint_gender".into()))?;
            out.push(HintSample {
                id: out.len() as u64,
                profession: p.surface.clone(),
                template_id: t.id.clone(),
                text: t.render(&p.surface),
                hint_gender,
            });
        }
    }
    Ok(out)
}

/// (male, female) sample counts.
pub fn hint_gender_counts(samples: &[HintSample]) -> (usize, usize) {
    let male = samples
        .iter()
        .filter(|s| s.hint_gender == Gender::Male)
        .count();
    (male, samples.len() - male)
}

/// Sizes of a 2:1:2 cut of `n` items: train and dev are rounded down,
/// test takes the remainder.
pub fn split_sizes(n: usize) -> [usize; 3] {
    let train = 2 * n / 5;
    let dev = n / 5;
    [train, dev, n - train - dev]
}

pub fn split_corpus(samples: &[PromptSample], seed: u64) -> Result<CorpusSplit> {
    split_corpus_with(samples, seed, SplitStrategy::Global)
}

pub fn split_corpus_with(
    samples: &[PromptSample],
    seed: u64,
    strategy: SplitStrategy,
) -> Result<CorpusSplit> {
    if samples.is_empty() {
        return Err(Error::Validation("cannot split an empty corpus".into()));
    }
    let mut ordered: Vec<&PromptSample> = samples.iter().collect();
    ordered.sort_by_key(|s| s.id);
    if ordered.windows(2).any(|w| w[0].id == w[1].id) {
        return Err(Error::Validation("sample ids are not unique".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<PromptSample>; 3] = Default::default();
    let mut cut = |mut group: Vec<&PromptSample>, rng: &mut ChaCha8Rng| {
        group.shuffle(rng);
        let [train, dev, _] = split_sizes(group.len());
        for (i, s) in group.into_iter().enumerate() {
            let part = if i < train {
                0
            } else if i < train + dev {
                1
            } else {
                2
            };
            parts[part].push(s.clone());
        }
    };
    match strategy {
        SplitStrategy::Global => cut(ordered, &mut rng),
        SplitStrategy::Stratified => {
            for scale in Scale::ALL {
                let stratum: Vec<&PromptSample> =
                    ordered.iter().copied().filter(|s| s.scale == scale).collect();
                if !stratum.is_empty() {
                    cut(stratum, &mut rng);
                }
            }
        }
    }
    for part in &mut parts {
        part.sort_by_key(|s| s.id);
    }
    let [train, dev, test] = parts;
    Ok(CorpusSplit {
        train,
        dev,
        test,
        seed,
        ratio: [2, 1, 2],
        strategy,
    })
}

/// One line of a corpus JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: u64,
    pub text: String,
    pub scale: Scale,
    pub profession: String,
    pub template_id: String,
    pub kind: TemplateKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hint_gender: Option<Gender>,
}

impl From<&PromptSample> for SampleRecord {
    fn from(s: &PromptSample) -> Self {
        SampleRecord {
            id: s.id,
            text: s.text.clone(),
            scale: s.scale,
            profession: s.profession.clone(),
            template_id: s.template_id.clone(),
            kind: TemplateKind::Bias,
            hint_gender: None,
        }
    }
}

impl SampleRecord {
    pub fn from_hint(s: &HintSample, scale: Scale) -> Self {
        SampleRecord {
            id: s.id,
            text: s.text.clone(),
            scale,
            profession: s.profession.clone(),
            template_id: s.template_id.clone(),
            kind: TemplateKind::Hint,
            hint_gender: Some(s.hint_gender),
        }
    }

    pub fn into_prompt(self) -> Result<PromptSample> {
        if self.kind != TemplateKind::Bias {
            return Err(Error::Validation(format!("record {} is not a bias sample", self.id)));
        }
        Ok(PromptSample {
            id: self.id,
            profession: self.profession,
            template_id: self.template_id,
            text: self.text,
            scale: self.scale,
        })
    }

    pub fn into_hint(self) -> Result<HintSample> {
        match (self.kind, self.hint_gender) {
            (TemplateKind::Hint, Some(hint_gender)) => Ok(HintSample {
                id: self.id,
                profession: self.profession,
                template_id: self.template_id,
                text: self.text,
                hint_gender,
            }),
            _ => Err(Error::Validation(format!("record {} is not a hint sample", self.id))),
        }
    }
}

pub fn write_jsonl(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn read_bias_jsonl(path: &Path) -> Result<Vec<PromptSample>> {
    read_jsonl(path)?.into_iter().map(SampleRecord::into_prompt).collect()
}

pub fn read_hint_jsonl(path: &Path) -> Result<Vec<HintSample>> {
    read_jsonl(path)?.into_iter().map(SampleRecord::into_hint).collect()
}

pub fn to_jsonl_string(records: &[SampleRecord]) -> Result<String> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.write_all(b"\n").expect("vec write");
    }
    Ok(String::from_utf8(buf).expect("json is utf-8"))
}
