//! The biased micro-LM used as a stand-in for a pretrained model.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assets::Corpora;
use crate::baselines::PromptPrefix;
use crate::error::Result;
use crate::lftf::{EvalSuite, LftfConfig, LossVariant};
use crate::lm::checkpoint;
use crate::lm::pretrain::{
    synthesize_pretraining_corpus, Corpus, PretrainAssets, PretrainPlan, SkewTable,
};
use crate::lm::train::{train_lm, TrainHyper, TrainLog};
use crate::lm::{ModelConfig, ModelState};
use crate::metrics::TermSet;
use crate::vocab::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestbedConfig {
    /// `vocab_size` is overwritten with the size of the built vocabulary.
    pub model: ModelConfig,
    /// Number of biased lines.
    pub corpus_size: usize,
    pub hint_fraction: f64,
    pub neutral_fraction: f64,
    pub corpus_seed: u64,
    pub skew_seed: u64,
    pub neutral_heldout: usize,
    pub neutral_heldout_seed: u64,
    pub train: TrainHyper,
}

impl Default for TestbedConfig {
    fn default() -> Self {
        TestbedConfig {
            model: ModelConfig::micro(0),
            corpus_size: 4716,
            hint_fraction: 0.25,
            neutral_fraction: 0.5,
            corpus_seed: 5,
            skew_seed: 3,
            neutral_heldout: 300,
            neutral_heldout_seed: 99,
            train: TrainHyper::pretrain(),
        }
    }
}

impl TestbedConfig {
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Everything the pretrained testbed was built from.
#[derive(Debug, Clone)]
pub struct Testbed {
    pub config: TestbedConfig,
    pub skew: SkewTable,
    pub corpus: Corpus,
    pub neutral_heldout: Vec<String>,
    pub model: ModelState,
    pub log: Option<TrainLog>,
}

pub fn plan(config: &TestbedConfig) -> PretrainPlan {
    let manifest = crate::assets::template_manifest();
    PretrainPlan {
        bias_templates: manifest.bias_templates(),
        hint_templates: manifest.hint_templates(),
        assets: PretrainAssets::shipped(),
        hint_fraction: config.hint_fraction,
        neutral_fraction: config.neutral_fraction,
    }
}

/// Closed vocabulary over every text the testbed will ever see.
pub fn testbed_vocab(corpora: &Corpora, corpus: &Corpus, extra: &[String]) -> Vocab {
    let texts = corpus
        .lines
        .iter()
        .map(|l| l.text.as_str())
        .chain(corpora.bias.iter().map(|s| s.text.as_str()))
        .chain(corpora.hint.iter().map(|s| s.text.as_str()))
        .chain(extra.iter().map(String::as_str))
        .chain(["he she"]);
    Vocab::build(texts)
}

/// Synthesizes the corpus and vocabulary and initializes the model,
/// without training.
pub fn prepare(corpora: &Corpora, skew: &SkewTable, config: &TestbedConfig) -> Result<Testbed> {
    let kept = corpora.retained();
    let plan = plan(config);
    let corpus =
        synthesize_pretraining_corpus(&kept, skew, config.corpus_size, config.corpus_seed, &plan)?;
    let neutral_heldout = plan
        .assets
        .neutral
        .heldout_lines(config.neutral_heldout, config.neutral_heldout_seed);
    let mut extra = neutral_heldout.clone();
    extra.push(PromptPrefix::shipped().text().to_string());
    let vocab = testbed_vocab(corpora, &corpus, &extra);
    let mut config = config.clone();
    config.model.vocab_size = vocab.len();
    let model = ModelState::init(config.model.clone(), vocab)?;
    Ok(Testbed {
        config,
        skew: skew.clone(),
        corpus,
        neutral_heldout,
        model,
        log: None,
    })
}

/// Prepares and pretrains the testbed.
pub fn build(corpora: &Corpora, skew: &SkewTable, config: &TestbedConfig) -> Result<Testbed> {
    let mut tb = prepare(corpora, skew, config)?;
    let (model, log) = train_lm(&tb.model, &tb.corpus.texts(), &tb.config.train)?;
    tb.model = model;
    tb.log = Some(log);
    Ok(tb)
}

/// Like [`build`], but reuses a checkpoint in `cache_dir` keyed by the
/// config and skew digests.
pub fn build_cached(
    corpora: &Corpora,
    skew: &SkewTable,
    config: &TestbedConfig,
    cache_dir: &Path,
) -> Result<Testbed> {
    let skew_json = serde_json::to_vec(skew)?;
    let key = hex::encode(Sha256::digest(
        [config.digest().as_bytes(), &skew_json].concat(),
    ));
    let path = cache_dir.join(format!("testbed-{}.ckpt", &key[..16]));
    if let Ok(model) = checkpoint::load(&path) {
        let mut tb = prepare(corpora, skew, config)?;
        if model.vocab == tb.model.vocab {
            tb.model = model;
            return Ok(tb);
        }
    }
    let tb = build(corpora, skew, config)?;
    std::fs::create_dir_all(cache_dir).map_err(|e| crate::Error::io(cache_dir, e))?;
    checkpoint::save(&tb.model, &path)?;
    Ok(tb)
}

/// The stereotyped skew table drawn with `config.skew_seed`.
pub fn skew(corpora: &Corpora, config: &TestbedConfig) -> SkewTable {
    SkewTable::stereotyped(&corpora.retained(), config.skew_seed)
}

/// Fine-tuning settings for the testbed. The step size is the default; the
/// testbed's training split gives only 30 steps per epoch, so it runs 11 epochs.
pub fn lftf_config() -> LftfConfig {
    LftfConfig {
        epochs: 11,
        ..LftfConfig::default()
    }
}

/// Settings for the single-pronoun ablations: twice the epochs of
/// [`lftf_config`], as the one-sided objectives saturate more slowly.
pub fn ablation_config(variant: LossVariant) -> LftfConfig {
    LftfConfig {
        epochs: 22,
        loss_variant: variant,
        ..lftf_config()
    }
}

/// Test split, full hint corpus and held-out neutral lines.
pub fn eval_suite(corpora: &Corpora, neutral: &[String]) -> EvalSuite {
    EvalSuite {
        terms: TermSet::gender(),
        bias: corpora.split.test.clone(),
        hint: corpora.hint.clone(),
        neutral: neutral.to_vec(),
    }
}
