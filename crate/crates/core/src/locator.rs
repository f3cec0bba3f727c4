//! Block Mitigating Importance: how much each block rotates the residual
//! stream on bias prompts, `1 - cos(H_i, H_{i+1})` per position.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::ArrayView1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{PromptSample, Scale};
use crate::error::{Error, Result};
use crate::gateway::Scorer;
use crate::lm::HiddenTrace;

/// Below this norm a hidden vector is treated as zero.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    SumLastPosition,
    #[default]
    SumAllPositions,
    MeanLastPosition,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::SumLastPosition => "sum_last_position",
            Aggregation::SumAllPositions => "sum_all_positions",
            Aggregation::MeanLastPosition => "mean_last_position",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum_last_position" => Ok(Aggregation::SumLastPosition),
            "sum_all_positions" => Ok(Aggregation::SumAllPositions),
            "mean_last_position" => Ok(Aggregation::MeanLastPosition),
            other => Err(Error::Validation(format!("unknown aggregation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockScore {
    pub block_index: usize,
    pub bmi: f64,
    /// 1 is the highest BMI.
    pub rank: usize,
}

/// `1 - cos(a, b)`, or 0 when either vector is (numerically) zero.
pub fn cosine_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na < NORM_FLOOR || nb < NORM_FLOOR {
        return 0.0;
    }
    let cos = (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0);
    1.0 - cos
}

pub fn per_position_bmi(trace: &HiddenTrace, block: usize, position: usize) -> Result<f64> {
    if block >= trace.n_blocks() {
        return Err(Error::Validation(format!(
            "block {block} out of range for {} blocks",
            trace.n_blocks()
        )));
    }
    if position >= trace.seq_len() {
        return Err(Error::Validation(format!(
            "position {position} out of range for {} tokens",
            trace.seq_len()
        )));
    }
    Ok(cosine_distance(
        trace.states[block].row(position),
        trace.states[block + 1].row(position),
    ))
}

/// One sample's contribution to every block's BMI under `aggregation`
/// (before any dataset-level averaging).
fn trace_contribution(trace: &HiddenTrace, aggregation: Aggregation) -> Vec<f64> {
    let last = trace.seq_len() - 1;
    (0..trace.n_blocks())
        .map(|i| {
            let at = |l: usize| {
                cosine_distance(trace.states[i].row(l), trace.states[i + 1].row(l))
            };
            match aggregation {
                Aggregation::SumAllPositions => (0..trace.seq_len()).map(at).sum(),
                Aggregation::SumLastPosition | Aggregation::MeanLastPosition => at(last),
            }
        })
        .collect()
}

/// Block indices by descending BMI; ties go to the lower index.
pub fn rank_blocks(bmi: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..bmi.len()).collect();
    order.sort_by(|&a, &b| bmi[b].total_cmp(&bmi[a]).then(a.cmp(&b)));
    order
}

pub fn block_scores(bmi: &[f64]) -> Vec<BlockScore> {
    let mut scores: Vec<BlockScore> = bmi
        .iter()
        .enumerate()
        .map(|(i, &v)| BlockScore {
            block_index: i,
            bmi: v,
            rank: 0,
        })
        .collect();
    for (r, i) in rank_blocks(bmi).into_iter().enumerate() {
        scores[i].rank = r + 1;
    }
    scores
}

/// Block-level BMI of a dataset, with per-scale totals for the heatmap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmiTable {
    pub aggregation: Aggregation,
    pub n_samples: usize,
    pub scores: Vec<BlockScore>,
    pub by_scale: BTreeMap<Scale, Vec<f64>>,
}

impl BmiTable {
    pub fn values(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.bmi).collect()
    }

    /// The rank-1 block.
    pub fn top_block(&self) -> usize {
        rank_blocks(&self.values())[0]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("block_index,bmi,rank\n");
        for s in &self.scores {
            out.push_str(&format!("{},{},{}\n", s.block_index, s.bmi, s.rank));
        }
        out
    }

    /// Rows are scales plus an overall row, columns are blocks.
    pub fn heatmap(&self) -> Heatmap {
        let mut rows: Vec<String> = self.by_scale.keys().map(|s| s.to_string()).collect();
        let mut values: Vec<Vec<f64>> = self.by_scale.values().cloned().collect();
        rows.push("All".into());
        values.push(self.values());
        Heatmap {
            title: format!("BMI per block ({})", self.aggregation),
            x_label: "block".into(),
            x: (0..self.scores.len()).collect(),
            y: rows,
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub title: String,
    pub x_label: String,
    pub x: Vec<usize>,
    pub y: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

/// Sums block contributions over `samples` in the order given.
pub fn aggregate_bmi(
    scorer: &dyn Scorer,
    samples: &[PromptSample],
    aggregation: Aggregation,
) -> Result<BmiTable> {
    let traced = scorer
        .traced()
        .ok_or_else(|| Error::NoTraces(scorer.identity()))?;
    if samples.is_empty() {
        return Err(Error::Validation("BMI needs a non-empty dataset".into()));
    }
    let n_blocks = traced.n_blocks();
    let mut total = vec![0.0; n_blocks];
    let mut by_scale: BTreeMap<Scale, Vec<f64>> = BTreeMap::new();
    let mut counts: BTreeMap<Scale, usize> = BTreeMap::new();
    for chunk in samples.chunks(64) {
        let prompts: Vec<&str> = chunk.iter().map(|s| s.text.as_str()).collect();
        let traces = traced.traces(&prompts)?;
        for (s, trace) in chunk.iter().zip(&traces) {
            let c = trace_contribution(trace, aggregation);
            let bucket = by_scale.entry(s.scale).or_insert_with(|| vec![0.0; n_blocks]);
            for i in 0..n_blocks {
                total[i] += c[i];
                bucket[i] += c[i];
            }
            *counts.entry(s.scale).or_default() += 1;
        }
    }
    if aggregation == Aggregation::MeanLastPosition {
        let n = samples.len() as f64;
        total.iter_mut().for_each(|v| *v /= n);
        for (scale, v) in by_scale.iter_mut() {
            let n = counts[scale] as f64;
            v.iter_mut().for_each(|x| *x /= n);
        }
    }
    Ok(BmiTable {
        aggregation,
        n_samples: samples.len(),
        scores: block_scores(&total),
        by_scale,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub seeds: Vec<u64>,
    pub n: usize,
    pub aggregation: Aggregation,
    /// Mean-normalized BMI per seed (each row averages to 1).
    pub normalized: Vec<Vec<f64>>,
    pub top_blocks: Vec<usize>,
    /// Population variance across seeds, per block.
    pub variance: Vec<f64>,
    pub mean_variance: f64,
    pub top1_agreement: bool,
}

pub const STABILITY_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
pub const STABILITY_SAMPLES: usize = 100;

/// `bmi / mean(bmi)`; all zeros stay zeros.
pub fn mean_normalize(bmi: &[f64]) -> Vec<f64> {
    let mean = bmi.iter().sum::<f64>() / bmi.len() as f64;
    if mean == 0.0 {
        return vec![0.0; bmi.len()];
    }
    bmi.iter().map(|v| v / mean).collect()
}

/// Re-runs the locator on `n`-sample subsets drawn with each seed.
/// Subsets keep dataset order so a full-size draw reproduces the same sum.
pub fn bmi_stability(
    scorer: &dyn Scorer,
    samples: &[PromptSample],
    seeds: &[u64],
    n: usize,
    aggregation: Aggregation,
) -> Result<StabilityReport> {
    if n == 0 || n > samples.len() {
        return Err(Error::Validation(format!(
            "subsample of {n} from a dataset of {}",
            samples.len()
        )));
    }
    if seeds.is_empty() {
        return Err(Error::Validation("at least one seed is required".into()));
    }
    let mut normalized = Vec::with_capacity(seeds.len());
    let mut top_blocks = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, samples.len(), n).into_vec();
        idx.sort_unstable();
        let subset: Vec<PromptSample> = idx.iter().map(|&i| samples[i].clone()).collect();
        let table = aggregate_bmi(scorer, &subset, aggregation)?;
        top_blocks.push(table.top_block());
        normalized.push(mean_normalize(&table.values()));
    }
    let n_blocks = normalized[0].len();
    let k = seeds.len() as f64;
    let variance: Vec<f64> = (0..n_blocks)
        .map(|b| {
            let mean = normalized.iter().map(|r| r[b]).sum::<f64>() / k;
            normalized.iter().map(|r| (r[b] - mean).powi(2)).sum::<f64>() / k
        })
        .collect();
    let mean_variance = variance.iter().sum::<f64>() / n_blocks as f64;
    Ok(StabilityReport {
        seeds: seeds.to_vec(),
        n,
        aggregation,
        top1_agreement: top_blocks.iter().all(|&b| b == top_blocks[0]),
        normalized,
        top_blocks,
        variance,
        mean_variance,
    })
}
