//! The acceptance suite: one pass/fail line per criterion.
//!
//! The testbed checkpoint is cached under the cargo target tmpdir, so only
//! the first run pays for pretraining.

mod common;

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use biaslab::assets::Corpora;
use biaslab::baselines::{pb_eval, PromptPrefix};
use biaslab::corpus::{Gender, HintSample, PromptSample, Scale};
use biaslab::gateway::{
    LocalScorer, RemoteConfig, RemoteScorer, ResolvedTerm, Scorer, ScorerCapabilities,
    TermResolution, VocabResolution,
};
use biaslab::lftf::{fine_tune_block, fpft, run_lftf, EvalSuite, LftfConfig, LftfObjective, LossVariant};
use biaslab::lm::{ModelConfig, ModelState, Objective, ProbDist, TrainMask};
use biaslab::locator::{bmi_stability, cosine_distance, Aggregation, STABILITY_SAMPLES, STABILITY_SEEDS};
use biaslab::metrics::{afgb_score, ub_score, TermSet};
use biaslab::testbed::{self, Testbed, TestbedConfig};
use biaslab::vocab::Vocab;
use biaslab::Error;
use common::mock_http::{table_reply, MockServer, Reply};
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Duration);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T>(r: biaslab::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

struct World {
    corpora: Corpora,
    testbed: Testbed,
    suite: EvalSuite,
}

fn world() -> &'static World {
    static W: std::sync::OnceLock<World> = std::sync::OnceLock::new();
    W.get_or_init(|| {
        let corpora = Corpora::shipped();
        let config = TestbedConfig::default();
        let skew = testbed::skew(&corpora, &config);
        let cache = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("testbed");
        let testbed = testbed::build_cached(&corpora, &skew, &config, &cache).unwrap();
        let suite = testbed::eval_suite(&corpora, &testbed.neutral_heldout);
        World {
            corpora,
            testbed,
            suite,
        }
    })
}

// Scores prompts from a fixed (P(he), P(she)) table, standing in for a model.
struct TableScorer(HashMap<String, (f64, f64)>);

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
                let &(a, b) = self.0.get(*p).ok_or_else(|| Error::UnknownToken(p.to_string()))?;
                let prob = |t: &str| match t {
                    "he" => a,
                    "she" => b,
                    _ => 0.0,
                };
                Ok(ProbDist {
                    full: None,
                    term_view: terms.terms().iter().map(|t| (t.clone(), prob(t))).collect(),
                })
            })
            .collect()
    }
}

struct Table {
    bias: Vec<PromptSample>,
    hint: Vec<HintSample>,
    pairs: Vec<(f64, f64)>,
    male: Vec<bool>,
}

impl Table {
    fn random(rng: &mut ChaCha8Rng, n: usize) -> Table {
        let pairs: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                let a: f64 = rng.random();
                let b = rng.random::<f64>() * (1.0 - a);
                if rng.random_bool(0.5) {
                    (a, b)
                } else {
                    (b, a)
                }
            })
            .collect();
        let male: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let bias = (0..n)
            .map(|i| PromptSample {
                id: i as u64,
                profession: format!("p{i}"),
                template_id: "t".into(),
                text: format!("prompt {i}"),
                scale: Scale::ALL[rng.random_range(0..3)],
            })
            .collect();
        let hint = (0..n)
            .map(|i| HintSample {
                id: i as u64,
                profession: format!("p{i}"),
                template_id: "t".into(),
                text: format!("hint {i}"),
                hint_gender: if male[i] { Gender::Male } else { Gender::Female },
            })
            .collect();
        Table {
            bias,
            hint,
            pairs,
            male,
        }
    }

    fn scorer(&self) -> TableScorer {
        let mut m = HashMap::new();
        for (i, &p) in self.pairs.iter().enumerate() {
            m.insert(format!("prompt {i}"), p);
            m.insert(format!("hint {i}"), p);
        }
        TableScorer(m)
    }
}

fn corpus_fidelity() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = Command::new(env!("CARGO_BIN_EXE_biaslab"))
        .args(["gen-data", "--out"])
        .arg(dir.path())
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
    let counts: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("counts.json")).unwrap()).unwrap();
    let lines = |f: &str| std::fs::read_to_string(dir.path().join(f)).unwrap().lines().count();
    let want = json!({
        "by_scale": {"Word": [326, 152, 308], "Phrase": [299, 157, 330], "Sentence": [318, 162, 306]},
        "total": [943, 471, 944]
    });
    ensure(counts == want, || format!("split counts {counts}"))?;
    ensure(lines("bias.jsonl") == 2358, || format!("{} bias samples", lines("bias.jsonl")))?;
    ensure(lines("hint.jsonl") == 786, || format!("{} hint samples", lines("hint.jsonl")))?;
    Ok("2358 = 943/471/944 with the target per-scale counts; 786 hint samples".into())
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let terms = TermSet::gender();
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(1..300);
        let t = Table::random(&mut rng, n);
        let scorer = t.scorer();
        let afgb = ok(afgb_score(&scorer, &t.bias, &terms))?.afgb_overall;
        let ub = ok(ub_score(&scorer, &t.hint, &terms))?.ub_overall;
        let mut a = 0.0;
        let mut u = 0.0;
        for (i, (he, she)) in t.pairs.iter().enumerate() {
            a += (he - she).abs();
            u += if t.male[i] { he - she } else { she - he };
        }
        worst = worst.max((afgb - a / n as f64).abs()).max((ub - u / n as f64).abs());
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("50 tables, max deviation {worst:.1e}"))
}

fn metric_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let terms = TermSet::gender();
    let swapped = terms.swapped();
    let mut violations = [0usize; 4];
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let mut t = Table::random(&mut rng, n);
        let s = t.scorer();
        let b = ok(afgb_score(&s, &t.bias, &terms))?;
        let h = ok(ub_score(&s, &t.hint, &terms))?;
        if !(0.0..=1.0).contains(&b.afgb_overall) || !(-1.0..=1.0).contains(&h.ub_overall) {
            violations[0] += 1;
        }
        let bs = ok(afgb_score(&s, &t.bias, &swapped))?;
        let hs = ok(ub_score(&s, &t.hint, &swapped))?;
        if bs.afgb_overall != b.afgb_overall || hs.ub_overall != -h.ub_overall {
            violations[1] += 1;
        }
        let flipped: Vec<HintSample> = t
            .hint
            .iter()
            .map(|x| HintSample {
                hint_gender: x.hint_gender.flipped(),
                ..x.clone()
            })
            .collect();
        if ok(ub_score(&s, &flipped, &terms))?.ub_overall != -h.ub_overall {
            violations[2] += 1;
        }
        t.bias.shuffle(&mut rng);
        t.hint.shuffle(&mut rng);
        let bp = ok(afgb_score(&s, &t.bias, &terms))?;
        let hp = ok(ub_score(&s, &t.hint, &terms))?;
        if bp.afgb_overall != b.afgb_overall || hp.ub_overall != h.ub_overall {
            violations[3] += 1;
        }
    }
    ensure(violations.iter().all(|&v| v == 0), || format!("violations {violations:?}"))?;
    Ok("1000 trials each: range, label swap, F-negation, permutation; 0 violations".into())
}

fn bmi_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut worst_scale = 0.0f64;
    for _ in 0..1000 {
        let d = rng.random_range(1..128);
        let a: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
        let got = cosine_distance(Array1::from(a.clone()).view(), Array1::from(b.clone()).view());
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for i in 0..d {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        let want = 1.0 - dot / (na.sqrt() * nb.sqrt());
        ensure((0.0..=2.0).contains(&got), || format!("BMI {got} outside [0, 2]"))?;
        worst = worst.max((got - want).abs());
        let k = rng.random_range(1e-3..1e3);
        let scaled = Array1::from(a).mapv(|x| x * k);
        let again = cosine_distance(scaled.view(), Array1::from(b).view());
        worst_scale = worst_scale.max((again - got).abs());
    }
    ensure(worst <= 1e-12 && worst_scale <= 1e-12, || {
        format!("oracle deviation {worst:e}, scale deviation {worst_scale:e}")
    })?;
    Ok(format!("1000 pairs, oracle deviation {worst:.1e}, scale deviation {worst_scale:.1e}"))
}

fn locating_stability() -> Outcome {
    let w = world();
    let scorer = LocalScorer::new(&w.testbed.model);
    let r = ok(bmi_stability(
        &scorer,
        &w.corpora.split.train,
        &STABILITY_SEEDS,
        STABILITY_SAMPLES,
        Aggregation::default(),
    ))?;
    ensure(r.top1_agreement, || format!("top blocks {:?}", r.top_blocks))?;
    Ok(format!(
        "seeds {:?} x {} samples: top block {} on every seed, mean normalized variance {:.6}",
        r.seeds, r.n, r.top_blocks[0], r.mean_variance
    ))
}

fn gradient_integrity() -> Outcome {
    let cfg = ModelConfig {
        vocab_size: 7,
        d_model: 8,
        n_heads: 2,
        n_blocks: 2,
        d_ff: 12,
        max_context: 6,
        seed: 5,
    };
    let vocab = Vocab::from(["a", "b", "c", "d", "e", "he", "she"].map(String::from).to_vec());
    let mut m = ok(ModelState::init(cfg, vocab))?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for t in m.params.tensors_mut() {
        for x in t.data.iter_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    let seqs = vec![vec![0, 1, 2, 3], vec![4, 2], vec![3, 3, 0, 1, 4, 2]];
    let mask = TrainMask::all(2);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for variant in LossVariant::ALL {
        let terms = if variant == LossVariant::TermsetSum {
            ok(TermSet::new(["he", "she", "c"]))?
        } else {
            TermSet::gender()
        };
        let obj = ok(LftfObjective::new(&m, &terms, variant))?;
        let loss = |p: &ModelState| obj.evaluate(&p.forward_batch(&seqs).unwrap()).0;
        let (_, grads) = ok(m.param_gradients(&seqs, &obj, &mask))?;
        for group in grads.groups() {
            for g in grads.get(group).unwrap() {
                for i in 0..g.data.len() {
                    let bump = |delta: f64| {
                        let mut p = m.clone();
                        for t in p.params.tensors_mut() {
                            if t.group == group && t.name == g.name {
                                t.data[i] += delta;
                            }
                        }
                        loss(&p)
                    };
                    let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                    let analytic = g.data[i];
                    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
                    worst = worst.max((analytic - numeric).abs() / scale);
                    checked += 1;
                }
            }
        }
    }
    ensure(worst < 1e-4, || format!("max relative error {worst:e}"))?;
    Ok(format!(
        "{} variants, {checked} entries, max relative error {worst:.1e}",
        LossVariant::ALL.len()
    ))
}

fn small_suite(w: &World) -> EvalSuite {
    EvalSuite {
        terms: TermSet::gender(),
        bias: w.suite.bias[..60].to_vec(),
        hint: w.suite.hint[..60].to_vec(),
        neutral: w.suite.neutral[..60].to_vec(),
    }
}

fn freeze_integrity() -> Outcome {
    let w = world();
    let model = &w.testbed.model;
    let suite = small_suite(w);
    let train = &w.corpora.split.train[..64];
    let n_blocks = model.config.n_blocks;
    let mut runs = 0;
    for block in 0..n_blocks {
        for (att, mlp) in [(true, true), (false, true), (true, false)] {
            let variant = LossVariant::ALL[(block + runs) % 5];
            let config = LftfConfig {
                learning_rate: 1e-3,
                epochs: 1,
                loss_variant: variant,
                tune_att: att,
                tune_mlp: mlp,
                ..LftfConfig::default()
            };
            let (tuned, _) = ok(fine_tune_block(model, block, train, &config, &suite))?;
            let mask = TrainMask::single_block(n_blocks, block, att, mlp);
            for (a, b) in model.params.tensors().iter().zip(tuned.params.tensors()) {
                if mask.enabled(a.group) {
                    continue;
                }
                let same = a.data.iter().zip(b.data).all(|(x, y)| x.to_bits() == y.to_bits());
                ensure(same, || format!("{:?}/{} changed in block {block} run", a.group, a.name))?;
            }
            runs += 1;
        }
    }
    Ok(format!("{runs} runs over {n_blocks} blocks and both ablations; frozen tensors bit-identical"))
}

fn testbed_mitigation() -> Outcome {
    let w = world();
    let (_, run) = ok(run_lftf(
        &w.testbed.model,
        &w.corpora.split.train,
        &testbed::lftf_config(),
        &w.suite,
    ))?;
    let (a0, a1) = (run.before.bias.afgb_overall, run.after.bias.afgb_overall);
    let (p0, p1) = (run.before.perplexity, run.after.perplexity);
    let reduction = 1.0 - a1 / a0;
    let ppl_rise = p1 / p0 - 1.0;
    let detail = format!(
        "block {:?}: AFGB {a0:.4} -> {a1:.4} ({:.1}% reduction), perplexity {p0:.3} -> {p1:.3} ({:+.1}%)",
        run.block,
        100.0 * reduction,
        100.0 * ppl_rise
    );
    ensure(a0 >= 0.2, || format!("baseline AFGB {a0:.4} below 0.2"))?;
    ensure(reduction >= 0.5 && ppl_rise <= 0.05, || detail.clone())?;
    Ok(detail)
}

fn ablation_signatures() -> Outcome {
    let w = world();
    let mut parts = Vec::new();
    let mut failed = false;
    for variant in [LossVariant::OnlyHe, LossVariant::OnlyShe] {
        let (_, run) = ok(run_lftf(
            &w.testbed.model,
            &w.corpora.split.train,
            &testbed::ablation_config(variant),
            &w.suite,
        ))?;
        let v = &run.anti_bias;
        failed |= !(v.afgb_after > 0.9 && v.flagged);
        parts.push(format!(
            "{variant}: AFGB {:.4}, flagged {}, reversed {:.2}, uniform {}",
            v.afgb_after, v.flagged, v.reversed_fraction, v.uniform_after
        ));
    }
    let detail = parts.join("; ");
    ensure(!failed, || detail.clone())?;
    Ok(detail)
}

fn comparative_ordering() -> Outcome {
    let w = world();
    let model = &w.testbed.model;
    let config = testbed::lftf_config();
    let (_, lftf) = ok(run_lftf(model, &w.corpora.split.train, &config, &w.suite))?;
    let (_, full) = ok(fpft(model, &w.corpora.split.train, &config, &w.suite))?;
    let digest = model.digest();
    let scorer = LocalScorer::new(model);
    let (pb, _) = ok(pb_eval(
        &scorer,
        &PromptPrefix::shipped(),
        &w.suite.bias,
        &w.suite.hint,
        &w.suite.terms,
    ))?;
    let (la, lu) = (lftf.after.bias.afgb_overall, lftf.after.hint.ub_overall);
    let (fa, fu) = (full.after.bias.afgb_overall, full.after.hint.ub_overall);
    let detail = format!(
        "FPFT AFGB {fa:.4} / UB {fu:.4}, LFTF AFGB {la:.4} / UB {lu:.4}, PB AFGB {:.4}",
        pb.afgb_overall
    );
    ensure(fa < la && fu < lu, || detail.clone())?;
    ensure(model.digest() == digest, || "PB changed the parameters".into())?;
    Ok(detail + ", PB parameters unchanged")
}

fn remote(server: &MockServer) -> RemoteScorer {
    RemoteScorer::new(RemoteConfig {
        backoff_ms: 1,
        timeout_ms: 2_000,
        auth_token: None,
        ..RemoteConfig::new(server.base.clone())
    })
}

fn gateway_conformance() -> Outcome {
    const LIFEGUARD: &[(&str, f64)] = &[("he", 0.2612), ("she", 0.1234)];
    let sample = PromptSample {
        id: 0,
        profession: "lifeguard".into(),
        template_id: "word-1".into(),
        text: "The lifeguard smiled because".into(),
        scale: Scale::Word,
    };
    let server = MockServer::start(|r| table_reply(r, LIFEGUARD));
    let report = ok(afgb_score(&remote(&server), std::slice::from_ref(&sample), &TermSet::gender()))?;
    let gap = report.per_sample[0].1.gap.unwrap_or(f64::NAN);
    ensure((gap - 0.1378).abs() <= 1e-12, || format!("signed gap {gap}"))?;
    ensure((report.afgb_overall - 0.1378).abs() <= 1e-12, || format!("AFGB {}", report.afgb_overall))?;

    let bad: Vec<(&str, Reply)> = vec![
        ("truncated JSON", Reply::status(200, "{\"probs\": [1, 2")),
        ("no probs", Reply::json(json!({"model_id": "m"}))),
        ("sum above one", Reply::json(json!({"model_id": "m", "probs": {"he": 0.7, "she": 0.5}}))),
        ("negative", Reply::json(json!({"model_id": "m", "probs": {"he": -0.1, "she": 0.5}}))),
        ("missing term", Reply::json(json!({"model_id": "m", "probs": {"he": 0.1}}))),
    ];
    let n_bad = bad.len();
    for (name, reply) in bad {
        let (status, body) = (reply.status, reply.body.clone());
        let server = MockServer::start(move |r| {
            if r.body["prompt"] == "The" {
                table_reply(r, LIFEGUARD)
            } else {
                Reply::status(status, &body)
            }
        });
        let err = afgb_score(&remote(&server), std::slice::from_ref(&sample), &TermSet::gender());
        let rejected = matches!(
            err,
            Err(Error::Sample { ref source, .. }) if matches!(**source, Error::Protocol(_))
        );
        ensure(rejected, || format!("{name} response was not rejected: {err:?}"))?;
    }
    Ok(format!("signed gap {gap:.4} (|err| {:.1e}); {n_bad} malformed responses rejected", (gap - 0.1378).abs()))
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 11] = [
        ("corpus fidelity", corpus_fidelity, Duration::from_secs(1)),
        ("metric oracle equivalence", metric_oracle, Duration::from_secs(1)),
        ("metric properties", metric_properties, Duration::from_secs(10)),
        ("BMI correctness", bmi_correctness, Duration::from_secs(5)),
        ("locating stability", locating_stability, Duration::from_secs(120)),
        ("gradient integrity", gradient_integrity, Duration::from_secs(60)),
        ("freeze integrity", freeze_integrity, Duration::from_secs(60)),
        ("testbed mitigation", testbed_mitigation, Duration::from_secs(600)),
        ("ablation signatures", ablation_signatures, Duration::from_secs(600)),
        ("comparative ordering", comparative_ordering, Duration::from_secs(900)),
        ("gateway conformance", gateway_conformance, Duration::from_secs(5)),
    ];
    // Pretraining (or loading the cached checkpoint) is shared setup; its
    // time is reported on its own line and counted toward the mitigation budget.
    let t = Instant::now();
    let base = &world().testbed;
    let setup = t.elapsed();
    println!(
        "setup: testbed ready in {:.1}s (test AFGB {:.4})",
        setup.as_secs_f64(),
        biaslab::lftf::evaluate(&base.model, &world().suite).unwrap().bias.afgb_overall
    );
    let mut failures = Vec::new();
    for (i, (name, run, budget)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        let outcome = run();
        let mut took = t.elapsed();
        if name == "testbed mitigation" {
            took += setup;
        }
        let outcome = outcome.and_then(|d| {
            if took <= budget {
                Ok(d)
            } else {
                Err(format!("{d}; took {took:.1?}, budget {budget:?}"))
            }
        });
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("[{tag}] {:>2}. {name}: {detail} ({:.2}s)", i + 1, took.as_secs_f64());
        if outcome.is_err() {
            failures.push(name);
        }
    }
    assert!(failures.is_empty(), "failed: {failures:?}");
}
