//! Asset files shipped with the crate, plus loaders for user-supplied ones.

use std::path::Path;

use crate::corpus::{
    self, CorpusSplit, ExclusionRules, HintSample, Profession, PromptSample, TemplateManifest,
};
use crate::error::{Error, Result};

pub const PROFESSIONS: &str = include_str!("../assets/professions.txt");
pub const EXCLUSION_RULES: &str = include_str!("../assets/exclusion_rules.json");
pub const TEMPLATES: &str = include_str!("../assets/templates.json");
pub const PB_PREFIX: &str = include_str!("../assets/pb_prefix.txt");
pub const PRETRAIN: &str = include_str!("../assets/pretrain.json");

pub fn parse_lexicon(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect()
}

pub fn lexicon() -> Vec<String> {
    parse_lexicon(PROFESSIONS)
}

pub fn exclusion_rules() -> ExclusionRules {
    serde_json::from_str(EXCLUSION_RULES).expect("shipped exclusion rules parse")
}

pub fn template_manifest() -> TemplateManifest {
    serde_json::from_str(TEMPLATES).expect("shipped template manifest parses")
}

pub fn pb_prefix() -> String {
    PB_PREFIX.trim().to_string()
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_lexicon(path: &Path) -> Result<Vec<String>> {
    Ok(parse_lexicon(&read(path)?))
}

pub fn load_rules(path: &Path) -> Result<ExclusionRules> {
    Ok(serde_json::from_str(&read(path)?)?)
}

pub fn load_manifest(path: &Path) -> Result<TemplateManifest> {
    Ok(serde_json::from_str(&read(path)?)?)
}

/// Both corpora built from one set of assets.
#[derive(Debug, Clone)]
pub struct Corpora {
    pub professions: Vec<Profession>,
    pub bias: Vec<PromptSample>,
    pub split: CorpusSplit,
    pub hint: Vec<HintSample>,
}

impl Corpora {
    pub fn build(
        lexicon: &[String],
        rules: &ExclusionRules,
        manifest: &TemplateManifest,
        seed: u64,
    ) -> Result<Self> {
        let professions = corpus::filter_professions(lexicon, rules)?;
        let kept = corpus::retained(&professions);
        let bias = corpus::compose_bias_corpus(&kept, &manifest.bias_templates())?;
        let split = corpus::split_corpus(&bias, seed)?;
        let hint = corpus::compose_hint_corpus(&kept, &manifest.hint_templates())?;
        Ok(Corpora {
            professions,
            bias,
            split,
            hint,
        })
    }

    pub fn shipped() -> Self {
        Self::build(
            &lexicon(),
            &exclusion_rules(),
            &template_manifest(),
            corpus::SHIPPED_SPLIT_SEED,
        )
        .expect("shipped assets are valid")
    }

    pub fn retained(&self) -> Vec<Profession> {
        corpus::retained(&self.professions)
    }
}
