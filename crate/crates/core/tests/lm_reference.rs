//! The batched forward pass against a naive scalar-loop reimplementation.

use biaslab::lm::forward::softmax;
use biaslab::lm::train::perplexity;
use biaslab::lm::{ModelConfig, ModelState, Params};
use biaslab::metrics::TermSet;
use biaslab::vocab::Vocab;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        vocab_size: 7,
        d_model: 6,
        n_heads: 2,
        n_blocks: 3,
        d_ff: 10,
        max_context: 8,
        seed: 21,
    }
}

fn vocab(n: usize) -> Vocab {
    Vocab::from((0..n).map(|i| format!("w{i}")).collect::<Vec<_>>())
}

/// Random parameters with a larger spread than the default init, so every
/// path through the network matters.
fn noisy_model(cfg: ModelConfig, seed: u64) -> ModelState {
    let mut m = ModelState::init(cfg.clone(), vocab(cfg.vocab_size)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in m.params.tensors_mut() {
        for x in t.data.iter_mut() {
            *x += rng.random_range(-0.4..0.4);
        }
    }
    m
}

type Mat = Vec<Vec<f64>>;

fn mat(a: &ndarray::Array2<f64>) -> Mat {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn vecmat(x: &[f64], w: &Mat) -> Vec<f64> {
    let cols = w[0].len();
    (0..cols)
        .map(|j| x.iter().zip(w).map(|(xi, row)| xi * row[j]).sum())
        .collect()
}

fn norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let s = (var + 1e-5).sqrt();
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(v, (gi, bi))| (v - mean) / s * gi + bi)
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Returns every residual state and the final-position logits.
fn reference(p: &Params, cfg: &ModelConfig, tokens: &[u32]) -> (Vec<Mat>, Vec<f64>) {
    let d = cfg.d_model;
    let dh = d / cfg.n_heads;
    let mut h: Mat = tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| {
            (0..d)
                .map(|j| p.tok_emb[[tok as usize, j]] + p.pos_emb[[t, j]])
                .collect()
        })
        .collect();
    let mut states = vec![h.clone()];
    for b in &p.blocks {
        let a = &b.att;
        let normed: Mat = h
            .iter()
            .map(|x| norm(x, a.ln_g.as_slice().unwrap(), a.ln_b.as_slice().unwrap()))
            .collect();
        let q: Mat = normed.iter().map(|x| vecmat(x, &mat(&a.wq))).collect();
        let k: Mat = normed.iter().map(|x| vecmat(x, &mat(&a.wk))).collect();
        let v: Mat = normed.iter().map(|x| vecmat(x, &mat(&a.wv))).collect();
        let mut ctx: Mat = vec![vec![0.0; d]; h.len()];
        for head in 0..cfg.n_heads {
            let r = head * dh..(head + 1) * dh;
            for t in 0..h.len() {
                let scores: Vec<f64> = (0..=t)
                    .map(|s| {
                        q[t][r.clone()]
                            .iter()
                            .zip(&k[s][r.clone()])
                            .map(|(x, y)| x * y)
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let w = softmax(&scores);
                for (s, ws) in w.iter().enumerate() {
                    for j in r.clone() {
                        ctx[t][j] += ws * v[s][j];
                    }
                }
            }
        }
        for t in 0..h.len() {
            let o = vecmat(&ctx[t], &mat(&a.wo));
            for j in 0..d {
                h[t][j] += o[j];
            }
        }
        let m = &b.mlp;
        for row in h.iter_mut() {
            let x = norm(row, m.ln_g.as_slice().unwrap(), m.ln_b.as_slice().unwrap());
            let u: Vec<f64> = vecmat(&x, &mat(&m.w1))
                .iter()
                .zip(m.b1.iter())
                .map(|(v, b)| gelu(v + b))
                .collect();
            let y = vecmat(&u, &mat(&m.w2));
            for j in 0..d {
                row[j] += y[j] + m.b2[j];
            }
        }
        states.push(h.clone());
    }
    let last = h.last().unwrap();
    let z = norm(last, p.lnf_g.as_slice().unwrap(), p.lnf_b.as_slice().unwrap());
    (states, vecmat(&z, &mat(&p.head)))
}

#[test]
fn forward_matches_naive_reference() {
    let cfg = tiny();
    let m = noisy_model(cfg.clone(), 1);
    for tokens in [vec![3u32], vec![0, 6, 2, 2, 5], vec![1, 2, 3, 4, 5, 6, 0, 1]] {
        let (logits, trace) = m.forward(&tokens).unwrap();
        let (states, ref_logits) = reference(&m.params, &cfg, &tokens);
        for (a, b) in logits.iter().zip(&ref_logits) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        for (h, r) in trace.states.iter().zip(&states) {
            for (row, rrow) in h.rows().into_iter().zip(r) {
                for (a, b) in row.iter().zip(rrow) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn batched_and_single_passes_agree() {
    let m = noisy_model(tiny(), 2);
    let seqs = vec![vec![1u32, 2, 3], vec![4, 5], vec![6, 0, 1, 2]];
    let pass = m.forward_batch(&seqs).unwrap();
    for (s, row) in seqs.iter().zip(pass.packed.last_rows()) {
        let (single, _) = m.forward(s).unwrap();
        for (a, b) in single.iter().zip(pass.logits.row(row)) {
            assert_eq!(a, b);
        }
    }
}

#[test]
fn resuming_from_any_state_reproduces_logits() {
    let m = noisy_model(tiny(), 3);
    let tokens = [5u32, 1, 4, 4, 0];
    let (logits, trace) = m.forward(&tokens).unwrap();
    for i in 0..=m.config.n_blocks {
        let again = m.logits_from(i, &trace.states[i]).unwrap();
        for (a, b) in logits.iter().zip(&again) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn distributions_are_normalized() {
    let m = noisy_model(tiny(), 4);
    let terms = TermSet::new(["w0", "w1"]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let len = rng.random_range(1..=8);
        let text: Vec<String> = (0..len)
            .map(|_| format!("w{}", rng.random_range(0..7)))
            .collect();
        let d = m.next_token_distribution(&text.join(" "), &terms).unwrap();
        let full = d.full.unwrap();
        assert!((full.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(full.iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(d.term_view[0].1, full[0]);
        assert_eq!(d.term_view[1].1, full[1]);
    }
}

#[test]
fn hand_softmax() {
    let logits = [1.0, 2.0, 0.5, -1.0, 0.0];
    let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
    let p = softmax(&logits);
    for (pi, l) in p.iter().zip(&logits) {
        assert!((pi - l.exp() / z).abs() < 1e-15);
    }
    assert_eq!(softmax(&[0.3, 0.3]), vec![0.5, 0.5]);
}

#[test]
fn uniform_model_perplexity_is_vocab_size() {
    let cfg = tiny();
    let mut m = ModelState::init(cfg.clone(), vocab(cfg.vocab_size)).unwrap();
    m.params = Params::zeros(&cfg);
    let lines = vec!["w1 w2 w3".to_string(), "w0 w6".to_string()];
    let ppl = perplexity(&m, &lines).unwrap();
    assert!((ppl - 7.0).abs() < 1e-9);
    assert!(perplexity(&m, &[]).is_err());
    let trained = noisy_model(cfg, 6);
    assert!(perplexity(&trained, &lines).unwrap() >= 1.0);
}

#[test]
fn unknown_term_is_an_error() {
    let m = noisy_model(tiny(), 7);
    let terms = TermSet::gender();
    assert!(m.next_token_distribution("w1 w2", &terms).is_err());
}
