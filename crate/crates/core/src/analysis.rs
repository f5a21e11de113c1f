//! Balance curves, previous-token specialization tables and a throughput harness.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::assignment::AuctionSettings;
use crate::error::{Error, Result};
use crate::rng::{derived_rng, streams};
use crate::routing::{route_and_apply, Mode};
use crate::trainer::{routing_purity, Checkpoint, LabeledBatch};
use crate::types::{Assignment, ExpertSet, Matrix, TokenBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceMode {
    Training,
    Testing,
}

impl From<Mode> for BalanceMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Train => BalanceMode::Training,
            Mode::Test => BalanceMode::Testing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    /// Fraction of tokens per expert, most used first.
    pub usage: Vec<f64>,
    pub mode: BalanceMode,
}

impl BalanceReport {
    /// One row per rank: `rank,fraction`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,fraction\n");
        for (i, u) in self.usage.iter().enumerate() {
            out.push_str(&format!("{},{u}\n", i + 1));
        }
        out
    }

    /// Sorted-usage curve as `x,y` pairs: rank against percentage of tokens.
    pub fn plot_data(&self) -> String {
        let mut out = String::from("x,y\n");
        for (i, u) in self.usage.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, 100.0 * u));
        }
        out
    }
}

/// Pools `assignments` and reports each expert's share of tokens, sorted descending.
pub fn balance_report(
    assignments: &[Assignment],
    num_experts: usize,
    mode: BalanceMode,
) -> Result<BalanceReport> {
    if num_experts == 0 {
        return Err(Error::InvalidParameter("need at least one expert".into()));
    }
    let mut counts = vec![0usize; num_experts];
    for a in assignments {
        if a.num_experts() != num_experts {
            return Err(Error::DimensionMismatch {
                context: "assignment expert count",
                expected: num_experts,
                found: a.num_experts(),
            });
        }
        for &e in a.expert_of() {
            counts[e] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::InvalidParameter(
            "balance report needs at least one token".into(),
        ));
    }
    let mut usage: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    usage.sort_by(|a, b| b.total_cmp(a));
    Ok(BalanceReport { usage, mode })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreviousToken {
    pub token: u32,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecializationTable {
    pub k: usize,
    pub bos_id: u32,
    /// `experts[e]`: most frequent previous ids for expert `e`, by count then id.
    pub experts: Vec<Vec<PreviousToken>>,
}

impl SpecializationTable {
    pub const DEFAULT_K: usize = 5;

    /// One row per entry: `expert,rank,previous_token,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("expert,rank,previous_token,count\n");
        for (e, list) in self.experts.iter().enumerate() {
            for (r, p) in list.iter().enumerate() {
                out.push_str(&format!("{e},{},{},{}\n", r + 1, p.token, p.count));
            }
        }
        out
    }
}

/// For every expert, the `k` most common ids preceding the tokens routed to it.
/// The first token of a sequence is preceded by `bos_id`.
pub fn specialization_table(
    sequences: &[Vec<u32>],
    assignments: &[Vec<usize>],
    num_experts: usize,
    k: usize,
    bos_id: u32,
) -> Result<SpecializationTable> {
    if sequences.len() != assignments.len() {
        return Err(Error::DimensionMismatch {
            context: "sequences vs assignments",
            expected: sequences.len(),
            found: assignments.len(),
        });
    }
    let mut counts: Vec<HashMap<u32, usize>> = vec![HashMap::new(); num_experts];
    for (seq, experts) in sequences.iter().zip(assignments) {
        if seq.len() != experts.len() {
            return Err(Error::DimensionMismatch {
                context: "sequence length vs assignment length",
                expected: seq.len(),
                found: experts.len(),
            });
        }
        for (t, &e) in experts.iter().enumerate() {
            if e >= num_experts {
                return Err(Error::ExpertOutOfRange {
                    index: e,
                    experts: num_experts,
                });
            }
            let prev = if t == 0 { bos_id } else { seq[t - 1] };
            *counts[e].entry(prev).or_default() += 1;
        }
    }
    let experts = counts
        .into_iter()
        .map(|m| {
            let mut list: Vec<PreviousToken> = m
                .into_iter()
                .map(|(token, count)| PreviousToken { token, count })
                .collect();
            list.sort_by(|a, b| b.count.cmp(&a.count).then(a.token.cmp(&b.token)));
            list.truncate(k);
            list
        })
        .collect();
    Ok(SpecializationTable { k, bos_id, experts })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThroughputSetting {
    pub experts: usize,
    pub blocks: usize,
    pub dim: usize,
    pub tokens_per_worker: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    pub setting: ThroughputSetting,
    pub tokens_per_second: Vec<f64>,
    pub median_tokens_per_second: f64,
    /// Smallest and largest repetition.
    pub band: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub repetitions: usize,
    pub rows: Vec<ThroughputRow>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Times training-mode `route_and_apply` on random tokens, `repetitions` times per setting.
pub fn throughput_report(
    settings: &[ThroughputSetting],
    repetitions: usize,
    seed: u64,
) -> Result<ThroughputReport> {
    if repetitions < 3 {
        return Err(Error::InvalidParameter(format!(
            "need at least 3 repetitions, got {repetitions}"
        )));
    }
    let mut rows = Vec::with_capacity(settings.len());
    for s in settings {
        let experts = ExpertSet::init(seed, s.experts, s.dim, s.blocks)?;
        let mut r = derived_rng(seed, streams::DATA);
        let batches: Vec<TokenBatch> = (0..s.experts)
            .map(|w| {
                let m = Matrix::random_normal(s.tokens_per_worker, s.dim, 1.0, &mut r);
                TokenBatch::from_features(m, w)
            })
            .collect::<Result<_>>()?;
        let total = (s.experts * s.tokens_per_worker) as f64;
        let mut rates = Vec::with_capacity(repetitions);
        for rep in 0..repetitions {
            let start = Instant::now();
            route_and_apply(
                &batches,
                &experts,
                &AuctionSettings::default(),
                seed.wrapping_add(rep as u64),
                Mode::Train,
            )?;
            rates.push(total / start.elapsed().as_secs_f64().max(1e-12));
        }
        let lo = rates.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        rows.push(ThroughputRow {
            setting: *s,
            median_tokens_per_second: median(&rates),
            tokens_per_second: rates,
            band: (lo, hi),
        });
    }
    Ok(ThroughputReport { repetitions, rows })
}

/// Reports computed from a trained checkpoint on fresh streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointAnalysis {
    pub training_balance: BalanceReport,
    pub testing_balance: BalanceReport,
    pub specialization: SpecializationTable,
    pub testing_purity: f64,
}

/// Routes fresh streams from the checkpoint's task both ways and tabulates the results.
pub fn analyze_checkpoint(ckpt: &Checkpoint, k: usize, seed: u64) -> Result<CheckpointAnalysis> {
    let experts = &ckpt.experts;
    let workers = experts.num_experts();
    let t = ckpt.config.tokens_per_worker;
    let mut r = derived_rng(seed, streams::EVAL);
    let streams: Vec<LabeledBatch> = (0..workers)
        .map(|w| ckpt.task.sample_stream(t, w, &mut r))
        .collect::<Result<_>>()?;
    let tokens: Vec<TokenBatch> = streams.iter().map(|s| s.tokens.clone()).collect();

    let mut reports = Vec::with_capacity(2);
    let mut test_routes = Vec::new();
    for mode in [Mode::Train, Mode::Test] {
        let routed = route_and_apply(&tokens, experts, &ckpt.config.auction, seed, mode)?;
        let assignments: Vec<Assignment> = routed
            .expert_of
            .iter()
            .map(|v| Assignment::greedy(v.clone(), workers))
            .collect::<Result<_>>()?;
        reports.push(balance_report(&assignments, workers, mode.into())?);
        test_routes = routed.expert_of;
    }
    let testing_balance = reports.pop().expect("two reports");
    let training_balance = reports.pop().expect("two reports");

    let sequences: Vec<Vec<u32>> = tokens.iter().map(|b| b.token_ids().to_vec()).collect();
    let bos_id = (ckpt.task.num_clusters * ckpt.task.tokens_per_cluster) as u32;
    let specialization = specialization_table(&sequences, &test_routes, workers, k, bos_id)?;
    let flat_experts: Vec<usize> = test_routes.concat();
    let flat_clusters: Vec<usize> = streams
        .iter()
        .flat_map(|s| s.clusters.iter().copied())
        .collect();
    let testing_purity = routing_purity(
        &flat_experts,
        &flat_clusters,
        ckpt.task.num_clusters,
        workers,
    );
    Ok(CheckpointAnalysis {
        training_balance,
        testing_balance,
        specialization,
        testing_purity,
    })
}
