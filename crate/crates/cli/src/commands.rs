use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use biaslab::assets::{self, Corpora};
use biaslab::baselines::{compare_methods, pb_eval, MethodResult, PromptPrefix};
use biaslab::corpus::{
    self, read_bias_jsonl, read_hint_jsonl, to_jsonl_string, HintSample, PromptSample,
    SampleRecord, Scale,
};
use biaslab::gateway::{LocalScorer, RemoteConfig, RemoteScorer, Scorer};
use biaslab::lftf::{evaluate, fpft, run_lftf, EvalSuite, LftfConfig, LossVariant, TargetBlock, TrainRun};
use biaslab::lm::pretrain::SkewTable;
use biaslab::lm::train::perplexity;
use biaslab::lm::{checkpoint, ModelState};
use biaslab::locator::{aggregate_bmi, bmi_stability, Aggregation, STABILITY_SAMPLES, STABILITY_SEEDS};
use biaslab::metrics::{afgb_score, bias_report_csv, case_table, read_json, ub_score, CaseRow, TermSet};
use biaslab::testbed::{self, TestbedConfig};
use clap::{Args, ValueEnum};
use serde::Serialize;

use crate::manifest::{file_digest, sha256_hex, Recorder};

/// A metric gate requested with an `--assert-*` flag did not hold.
#[derive(Debug)]
pub struct GateFailure(pub String);

impl fmt::Display for GateFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for GateFailure {}

fn load_model(path: &Path) -> Result<ModelState> {
    checkpoint::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_bias(path: &Path) -> Result<Vec<PromptSample>> {
    read_bias_jsonl(path).with_context(|| format!("reading bias set {}", path.display()))
}

fn load_hint(path: &Path) -> Result<Vec<HintSample>> {
    read_hint_jsonl(path).with_context(|| format!("reading hint set {}", path.display()))
}

fn load_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
}

fn bias_jsonl(samples: &[PromptSample]) -> Result<String> {
    let records: Vec<SampleRecord> = samples.iter().map(SampleRecord::from).collect();
    Ok(to_jsonl_string(&records)?)
}

#[derive(Args, Serialize)]
pub struct GenDataArgs {
    /// Profession lexicon, one entry per line [default: shipped]
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Exclusion rules JSON [default: shipped]
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Template manifest JSON [default: shipped]
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Split seed
    #[arg(long, default_value_t = corpus::SHIPPED_SPLIT_SEED)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut rec = Recorder::new("gen-data", &args.out, &args)?;
    let lexicon = match &args.lexicon {
        Some(p) => {
            rec.input_file(p)?;
            assets::load_lexicon(p)?
        }
        None => {
            rec.input_named("lexicon", sha256_hex(assets::PROFESSIONS.as_bytes()));
            assets::lexicon()
        }
    };
    let rules = match &args.rules {
        Some(p) => {
            rec.input_file(p)?;
            assets::load_rules(p)?
        }
        None => {
            rec.input_named("rules", sha256_hex(assets::EXCLUSION_RULES.as_bytes()));
            assets::exclusion_rules()
        }
    };
    let manifest = match &args.templates {
        Some(p) => {
            rec.input_file(p)?;
            assets::load_manifest(p)?
        }
        None => {
            rec.input_named("templates", sha256_hex(assets::TEMPLATES.as_bytes()));
            assets::template_manifest()
        }
    };
    let c = Corpora::build(&lexicon, &rules, &manifest, args.seed)?;

    rec.write("bias.jsonl", bias_jsonl(&c.bias)?.as_bytes())?;
    rec.write("train.jsonl", bias_jsonl(&c.split.train)?.as_bytes())?;
    rec.write("dev.jsonl", bias_jsonl(&c.split.dev)?.as_bytes())?;
    rec.write("test.jsonl", bias_jsonl(&c.split.test)?.as_bytes())?;
    let hint: Vec<SampleRecord> = c
        .hint
        .iter()
        .map(|h| SampleRecord::from_hint(h, Scale::Phrase))
        .collect();
    rec.write("hint.jsonl", to_jsonl_string(&hint)?.as_bytes())?;
    rec.write_json("professions.json", &c.professions)?;
    let counts = c.split.counts();
    rec.write_json("counts.json", &counts)?;

    let kept = c.retained().len();
    let (male, female) = corpus::hint_gender_counts(&c.hint);
    println!("{counts}");
    println!("professions: {kept} kept, {} excluded", c.professions.len() - kept);
    println!("bias samples: {}", c.bias.len());
    println!("hint samples: {} ({male} male-hint, {female} female-hint)", c.hint.len());
    rec.finish()
}

#[derive(Args, Serialize)]
pub struct PretrainArgs {
    /// Testbed config JSON [default: built-in]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Profession to P(she) table JSON [default: stereotyped table]
    #[arg(long)]
    skew: Option<PathBuf>,
    /// Overrides the pretraining epochs of the config
    #[arg(long)]
    epochs: Option<usize>,
    /// Fail with exit code 1 when the test-split AFGB is below this value
    #[arg(long)]
    assert_afgb: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct PretrainSettings<'a> {
    config: &'a TestbedConfig,
    skew: &'a SkewTable,
}

pub fn pretrain(args: PretrainArgs) -> Result<()> {
    let corpora = Corpora::shipped();
    let mut config = match &args.config {
        Some(p) => read_json::<TestbedConfig>(p).with_context(|| format!("config {}", p.display()))?,
        None => TestbedConfig::default(),
    };
    if let Some(e) = args.epochs {
        config.train.epochs = e;
    }
    let skew = match &args.skew {
        Some(p) => SkewTable::load(p).with_context(|| format!("skew table {}", p.display()))?,
        None => testbed::skew(&corpora, &config),
    };
    let mut rec = Recorder::new("pretrain", &args.out, &PretrainSettings { config: &config, skew: &skew })?;
    for p in [&args.config, &args.skew].into_iter().flatten() {
        rec.input_file(p)?;
    }
    rec.input_named("assets", sha256_hex(
        [assets::PROFESSIONS, assets::EXCLUSION_RULES, assets::TEMPLATES, assets::PRETRAIN].concat().as_bytes(),
    ));

    let tb = testbed::build(&corpora, &skew, &config)?;
    let suite = testbed::eval_suite(&corpora, &tb.neutral_heldout);
    let baseline = evaluate(&tb.model, &suite)?;

    rec.write("model.ckpt", &checkpoint::to_bytes(&tb.model))?;
    rec.write_json("testbed_config.json", &tb.config)?;
    rec.write_json("skew.json", &tb.skew)?;
    rec.write("neutral_heldout.txt", (tb.neutral_heldout.join("\n") + "\n").as_bytes())?;
    rec.write_json("train_log.json", &tb.log)?;
    rec.write_json("baseline.json", &baseline)?;

    if let Some(log) = &tb.log {
        let losses: Vec<String> = log.epoch_losses.iter().map(|l| format!("{l:.4}")).collect();
        println!("epoch losses: {}", losses.join(" "));
    }
    println!(
        "test AFGB {:.4}  UB {:.4}  neutral perplexity {:.3}",
        baseline.bias.afgb_overall, baseline.hint.ub_overall, baseline.perplexity
    );
    rec.finish()?;
    if let Some(min) = args.assert_afgb {
        if baseline.bias.afgb_overall < min {
            return Err(GateFailure(format!(
                "test AFGB {:.4} is below {min}",
                baseline.bias.afgb_overall
            ))
            .into());
        }
    }
    Ok(())
}

#[derive(Args, Serialize)]
#[group(id = "source", required = true, multiple = false, args = ["model", "endpoint"])]
pub struct ScorerArgs {
    /// Local checkpoint
    #[arg(long)]
    model: Option<PathBuf>,
    /// Remote scoring endpoint base URL
    #[arg(long)]
    endpoint: Option<String>,
    /// Remote request timeout
    #[arg(long, default_value_t = 10_000)]
    timeout_ms: u64,
    /// Remote attempts per request, including the first
    #[arg(long, default_value_t = 3)]
    attempts: usize,
    /// Remote requests in flight
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
}

enum Source {
    Local(Box<ModelState>),
    Remote(RemoteScorer),
}

impl Source {
    fn open(args: &ScorerArgs, rec: &mut Recorder) -> Result<Source> {
        match (&args.model, &args.endpoint) {
            (Some(p), _) => {
                rec.input_file(p)?;
                Ok(Source::Local(Box::new(load_model(p)?)))
            }
            (None, Some(url)) => {
                rec.input_named("endpoint", url.clone());
                let config = RemoteConfig {
                    timeout_ms: args.timeout_ms,
                    attempts: args.attempts,
                    concurrency: args.concurrency,
                    ..RemoteConfig::new(url.clone())
                };
                Ok(Source::Remote(RemoteScorer::new(config)))
            }
            (None, None) => bail!("one of --model or --endpoint is required"),
        }
    }

    fn with_scorer<T>(&self, f: impl FnOnce(&dyn Scorer) -> Result<T>) -> Result<T> {
        match self {
            Source::Local(m) => f(&LocalScorer::new(m)),
            Source::Remote(r) => f(r),
        }
    }
}

#[derive(Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    scorer: ScorerArgs,
    #[arg(long)]
    bias_set: PathBuf,
    #[arg(long)]
    hint_set: PathBuf,
    /// Held-out neutral lines for perplexity (local models only)
    #[arg(long)]
    neutral: Option<PathBuf>,
    /// Prepend the shipped debiasing prefix to every prompt
    #[arg(long, conflicts_with = "prefix_text")]
    prefix: bool,
    /// Prepend this text to every prompt
    #[arg(long)]
    prefix_text: Option<String>,
    /// Row label in comparison tables [default: Original, or PB with a prefix]
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let mut rec = Recorder::new("eval", &args.out, &args)?;
    let source = Source::open(&args.scorer, &mut rec)?;
    rec.input_file(&args.bias_set)?;
    rec.input_file(&args.hint_set)?;
    let bias = load_bias(&args.bias_set)?;
    let hint = load_hint(&args.hint_set)?;
    let terms = TermSet::gender();
    let prefix = match (&args.prefix_text, args.prefix) {
        (Some(t), _) => Some(PromptPrefix::new(t.clone())?),
        (None, true) => Some(PromptPrefix::shipped()),
        (None, false) => None,
    };
    let (b, h) = source.with_scorer(|s| match &prefix {
        Some(p) => Ok(pb_eval(s, p, &bias, &hint, &terms)?),
        None => Ok((afgb_score(s, &bias, &terms)?, ub_score(s, &hint, &terms)?)),
    })?;
    let ppl = match (&args.neutral, &source) {
        (Some(p), Source::Local(m)) => {
            rec.input_file(p)?;
            Some(perplexity(m, &load_lines(p)?)?)
        }
        (Some(_), Source::Remote(_)) => bail!("--neutral needs a local --model"),
        (None, _) => None,
    };
    let label = args
        .label
        .clone()
        .unwrap_or_else(|| if prefix.is_some() { "PB" } else { "Original" }.to_string());
    let params_digest = match &source {
        Source::Local(m) => Some(m.digest()),
        Source::Remote(_) => None,
    };

    rec.write_json("bias_report.json", &b)?;
    rec.write_json("hint_report.json", &h)?;
    rec.write("bias_samples.csv", bias_report_csv(&b).as_bytes())?;
    let result = MethodResult {
        method: label,
        bias: b,
        hint: h,
        perplexity: ppl,
        params_digest,
    };
    rec.write_json("method.json", &result)?;

    let (b, h) = (&result.bias, &result.hint);
    for (scale, v) in &b.afgb_by_scale {
        println!("AFGB {scale:<10}{v:.4}");
    }
    println!("AFGB avg       {:.4}", b.afgb_overall);
    println!("UB             {:.4}", h.ub_overall);
    if let Some(p) = ppl {
        println!("perplexity     {p:.3}");
    }
    if h.unbalanced {
        println!("warning: hint set is unbalanced ({} male-hint, {} female-hint)", h.n_male, h.n_female);
    }
    rec.finish()
}

#[derive(Args, Serialize)]
pub struct LocateArgs {
    #[command(flatten)]
    scorer: ScorerArgs,
    #[arg(long)]
    train_set: PathBuf,
    #[arg(long, default_value_t = Aggregation::SumAllPositions)]
    aggregation: Aggregation,
    /// Subsampling seeds for the stability check
    #[arg(long, value_delimiter = ',', default_values_t = STABILITY_SEEDS)]
    seeds: Vec<u64>,
    /// Subsample size for the stability check
    #[arg(long, default_value_t = STABILITY_SAMPLES)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
}

pub fn locate(args: LocateArgs) -> Result<()> {
    let mut rec = Recorder::new("locate", &args.out, &args)?;
    let source = Source::open(&args.scorer, &mut rec)?;
    rec.input_file(&args.train_set)?;
    let data = load_bias(&args.train_set)?;
    let (table, stability) = source.with_scorer(|s| {
        let table = aggregate_bmi(s, &data, args.aggregation)?;
        let stability = bmi_stability(s, &data, &args.seeds, args.n, args.aggregation)?;
        Ok((table, stability))
    })?;

    rec.write("bmi.csv", table.to_csv().as_bytes())?;
    rec.write_json("bmi.json", &table)?;
    rec.write_json("heatmap.json", &table.heatmap())?;
    rec.write_json("stability.json", &stability)?;

    print!("{}", table.to_csv());
    println!("top block: {}", table.top_block());
    println!(
        "stability over seeds {:?}: top blocks {:?}, agreement {}, mean variance {:.6}",
        stability.seeds, stability.top_blocks, stability.top1_agreement, stability.mean_variance
    );
    rec.finish()
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lftf,
    Fpft,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    NoAtt,
    NoMlp,
}

#[derive(Args, Serialize)]
pub struct FinetuneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    train_set: PathBuf,
    /// Bias set scored before and after
    #[arg(long)]
    test_set: PathBuf,
    #[arg(long)]
    hint_set: PathBuf,
    /// Neutral lines for perplexity [default: neutral_heldout.txt next to the model]
    #[arg(long)]
    neutral: Option<PathBuf>,
    /// Fine-tuning config JSON; flags below override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Method::Lftf)]
    method: Method,
    /// `auto` or a block index (LFTF only)
    #[arg(long)]
    block: Option<TargetBlock>,
    #[arg(long)]
    variant: Option<LossVariant>,
    #[arg(long, value_enum)]
    ablate: Option<Ablation>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fail with exit code 1 unless AFGB falls by at least this fraction
    #[arg(long)]
    assert_reduction: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

impl FinetuneArgs {
    fn lftf_config(&self) -> Result<LftfConfig> {
        let mut c = match &self.config {
            Some(p) => read_json::<LftfConfig>(p).with_context(|| format!("config {}", p.display()))?,
            None => LftfConfig::default(),
        };
        if let Some(b) = self.block {
            c.target_block = b;
        }
        if let Some(v) = self.variant {
            c.loss_variant = v;
        }
        match self.ablate {
            Some(Ablation::NoAtt) => c.tune_att = false,
            Some(Ablation::NoMlp) => c.tune_mlp = false,
            None => {}
        }
        if let Some(lr) = self.lr {
            c.learning_rate = lr;
        }
        if let Some(e) = self.epochs {
            c.epochs = e;
        }
        if let Some(b) = self.batch_size {
            c.batch_size = b;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        Ok(c)
    }
}

/// Row label: the method, with the variant and ablation when they differ
/// from the defaults.
fn run_label(run: &TrainRun) -> String {
    let mut extras = Vec::new();
    if run.config.loss_variant != LossVariant::default() {
        extras.push(run.config.loss_variant.to_string());
    }
    if !run.config.tune_att {
        extras.push("no-att".into());
    }
    if !run.config.tune_mlp {
        extras.push("no-mlp".into());
    }
    if extras.is_empty() {
        run.method.clone()
    } else {
        format!("{}[{}]", run.method, extras.join(","))
    }
}

pub fn finetune(args: FinetuneArgs) -> Result<()> {
    let config = args.lftf_config()?;
    if matches!(args.method, Method::Fpft) && (args.block.is_some() || args.ablate.is_some()) {
        bail!("--block and --ablate apply to LFTF only");
    }
    let mut rec = Recorder::new("finetune", &args.out, &(&args, &config))?;
    let neutral_path = match &args.neutral {
        Some(p) => p.clone(),
        None => args
            .model
            .parent()
            .unwrap_or(Path::new("."))
            .join("neutral_heldout.txt"),
    };
    for p in [&args.model, &args.train_set, &args.test_set, &args.hint_set, &neutral_path] {
        rec.input_file(p)?;
    }
    for p in args.config.iter() {
        rec.input_file(p)?;
    }
    let model = load_model(&args.model)?;
    let train = load_bias(&args.train_set)?;
    let suite = EvalSuite {
        terms: TermSet::gender(),
        bias: load_bias(&args.test_set)?,
        hint: load_hint(&args.hint_set)?,
        neutral: load_lines(&neutral_path)?,
    };
    let (tuned, mut run) = match args.method {
        Method::Lftf => run_lftf(&model, &train, &config, &suite)?,
        Method::Fpft => fpft(&model, &train, &config, &suite)?,
    };
    run.method = run_label(&run);

    let mut original = MethodResult::original(&run);
    original.params_digest = Some(model.digest());
    let mut after = MethodResult::tuned(&run);
    after.params_digest = Some(tuned.digest());

    rec.write("model.ckpt", &checkpoint::to_bytes(&tuned))?;
    rec.write_json("run.json", &run)?;
    rec.write_json("original.json", &original)?;
    rec.write_json("method.json", &after)?;
    let mut curve = String::from("step,loss\n");
    for (i, l) in run.loss_curve.iter().enumerate() {
        curve.push_str(&format!("{i},{l}\n"));
    }
    rec.write("loss_curve.csv", curve.as_bytes())?;

    if let Some(b) = run.block {
        println!("tuned block: {b}");
    }
    let (b0, b1) = (run.before.bias.afgb_overall, run.after.bias.afgb_overall);
    println!("AFGB        {b0:.4} -> {b1:.4}");
    println!("UB          {:.4} -> {:.4}", run.before.hint.ub_overall, run.after.hint.ub_overall);
    println!("perplexity  {:.3} -> {:.3}", run.before.perplexity, run.after.perplexity);
    let v = &run.anti_bias;
    if v.flagged {
        println!(
            "anti-bias flag: AFGB {:.4} above {} with {:.0}% of gaps reversed",
            v.afgb_after,
            v.threshold,
            100.0 * v.reversed_fraction
        );
    }
    rec.finish()?;
    if let Some(min) = args.assert_reduction {
        let reduction = if b0 > 0.0 { 1.0 - b1 / b0 } else { 0.0 };
        if reduction < min {
            return Err(GateFailure(format!("AFGB fell by {reduction:.4}, less than {min}")).into());
        }
    }
    Ok(())
}

#[derive(Args, Serialize)]
pub struct ReportArgs {
    /// `run.json` from finetune or `method.json` from eval/finetune; the
    /// first one is the baseline for deltas
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// `label=checkpoint` models for the per-profession case table
    #[arg(long = "case-model")]
    case_models: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "nurse,secretary,receptionist,mechanic,carpenter,lifeguard")]
    professions: Vec<String>,
    /// Bias template id rendered for the case table
    #[arg(long, default_value = "word-1")]
    case_template: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct CaseEntry {
    model: String,
    rows: Vec<CaseRow>,
}

#[derive(Serialize)]
struct BarSeries {
    name: String,
    values: Vec<f64>,
}

#[derive(Serialize)]
struct BarPlot {
    title: String,
    categories: Vec<String>,
    series: Vec<BarSeries>,
}

fn collect_results(paths: &[PathBuf]) -> Result<Vec<MethodResult>> {
    let mut out: Vec<MethodResult> = Vec::new();
    let push = |r: MethodResult, out: &mut Vec<MethodResult>| {
        if !out.contains(&r) {
            out.push(r);
        }
    };
    for p in paths {
        let value: serde_json::Value = read_json(p)?;
        if value.get("before").is_some() {
            let run: TrainRun = serde_json::from_value(value).with_context(|| format!("run {}", p.display()))?;
            push(MethodResult::original(&run), &mut out);
            push(MethodResult::tuned(&run), &mut out);
        } else {
            let r: MethodResult =
                serde_json::from_value(value).with_context(|| format!("method result {}", p.display()))?;
            push(r, &mut out);
        }
    }
    Ok(out)
}

pub fn report(args: ReportArgs) -> Result<()> {
    let mut rec = Recorder::new("report", &args.out, &args)?;
    for p in &args.runs {
        rec.input_file(p)?;
    }
    let results = collect_results(&args.runs)?;
    let table = compare_methods(&results)?;
    rec.write_json("comparison.json", &table)?;
    rec.write("comparison.csv", table.to_csv().as_bytes())?;
    let plot = BarPlot {
        title: "AFGB and UB by method".into(),
        categories: vec!["AFGB".into(), "UB".into()],
        series: table
            .rows
            .iter()
            .map(|r| BarSeries {
                name: r.method.clone(),
                values: vec![r.afgb_overall, r.ub],
            })
            .collect(),
    };
    rec.write_json("comparison_plot.json", &plot)?;
    print!("{}", table.to_csv());

    if !args.case_models.is_empty() {
        let template = assets::template_manifest()
            .bias_templates()
            .into_iter()
            .find(|t| t.id == args.case_template)
            .with_context(|| format!("no bias template `{}`", args.case_template))?;
        let terms = TermSet::gender();
        let professions: Vec<&str> = args.professions.iter().map(String::as_str).collect();
        let mut entries = Vec::new();
        for entry in &args.case_models {
            let (label, path) = entry
                .split_once('=')
                .with_context(|| format!("--case-model `{entry}` is not label=path"))?;
            let path = Path::new(path);
            rec.input_named(&format!("case-model:{label}"), file_digest(path)?);
            let model = load_model(path)?;
            let rows = case_table(&LocalScorer::new(&model), &professions, &template, &terms)?;
            entries.push(CaseEntry {
                model: label.to_string(),
                rows,
            });
        }
        let mut csv = String::from("model,profession,prompt");
        for t in terms.terms() {
            csv.push_str(&format!(",p_{t}"));
        }
        csv.push('\n');
        for e in &entries {
            for r in &e.rows {
                csv.push_str(&format!("{},{},{}", e.model, r.profession, r.prompt));
                for (_, p) in &r.probs {
                    csv.push_str(&format!(",{p}"));
                }
                csv.push('\n');
            }
        }
        rec.write_json("case_table.json", &entries)?;
        rec.write("case_table.csv", csv.as_bytes())?;
        let series = entries
            .iter()
            .flat_map(|e| {
                terms.terms().iter().enumerate().map(move |(k, t)| BarSeries {
                    name: format!("{} P({t})", e.model),
                    values: e.rows.iter().map(|r| r.probs[k].1).collect(),
                })
            })
            .collect();
        rec.write_json(
            "case_plot.json",
            &BarPlot {
                title: format!("P(he) and P(she) after \"{}\"", template.pattern),
                categories: args.professions.clone(),
                series,
            },
        )?;
    }
    rec.finish()
}
