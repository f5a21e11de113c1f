//! Simulated multi-worker routing.
//!
//! `E` workers each hold `T` tokens and one expert. A training-mode pass is:
//!
//! 1. shuffle: every worker sends `T/E` random tokens to every worker;
//! 2. each worker scores its tokens and solves its own balanced assignment;
//! 3. tokens are stably sorted by assigned expert and `all_to_all` sends row
//!    `t` to worker `⌊tE/T⌋`;
//! 4. each worker applies its expert to the tokens it received;
//! 5. the results travel back along the inverse of steps 3, 2 and 1.
//!
//! Test mode skips the shuffle and routes each token to its best expert,
//! so shard sizes are unconstrained.
//!
//! Workers run concurrently between exchange points. All randomness comes
//! from per-worker streams of the master seed, so results do not depend on
//! scheduling.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{assign_greedy, compute_scores, solve_balanced, AuctionSettings};
use crate::error::{Error, Result};
use crate::layer::{base_forward, LayerOutput};
use crate::rng::{derived_rng, streams};
use crate::types::{Assignment, ExpertSet, Matrix, TokenBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerTopology {
    num_workers: usize,
    tokens_per_worker: usize,
}

impl WorkerTopology {
    pub fn new(num_workers: usize, tokens_per_worker: usize) -> Result<Self> {
        if num_workers == 0 || tokens_per_worker == 0 {
            return Err(Error::InvalidParameter(
                "topology needs at least one worker and one token".into(),
            ));
        }
        if !tokens_per_worker.is_multiple_of(num_workers) {
            return Err(Error::Indivisible {
                tokens: tokens_per_worker,
                experts: num_workers,
            });
        }
        Ok(WorkerTopology {
            num_workers,
            tokens_per_worker,
        })
    }

    pub fn num_workers(&self) -> usize {
        self.num_workers
    }

    pub fn tokens_per_worker(&self) -> usize {
        self.tokens_per_worker
    }

    /// Tokens each worker exchanges with each other worker.
    pub fn block_size(&self) -> usize {
        self.tokens_per_worker / self.num_workers
    }

    fn check_batches(&self, batches: &[TokenBatch]) -> Result<()> {
        if batches.len() != self.num_workers {
            return Err(Error::DimensionMismatch {
                context: "number of worker batches",
                expected: self.num_workers,
                found: batches.len(),
            });
        }
        if let Some(b) = batches.iter().find(|b| b.len() != self.tokens_per_worker) {
            return Err(Error::DimensionMismatch {
                context: "worker batch size",
                expected: self.tokens_per_worker,
                found: b.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Test,
}

/// A row of a worker's batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RowRef {
    pub worker: usize,
    pub row: usize,
}

/// Where every row of every post-shuffle batch came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShufflePlan {
    /// `sources[w][r]` is the pre-shuffle row that became row `r` of worker `w`.
    pub sources: Vec<Vec<RowRef>>,
    /// `counts[i][j]` tokens moved from worker `i` to worker `j`.
    pub counts: Vec<Vec<usize>>,
}

impl ShufflePlan {
    fn identity(workers: usize, tokens: usize) -> Self {
        let mut counts = vec![vec![0; workers]; workers];
        for (w, row) in counts.iter_mut().enumerate() {
            row[w] = tokens;
        }
        ShufflePlan {
            sources: (0..workers)
                .map(|worker| (0..tokens).map(|row| RowRef { worker, row }).collect())
                .collect(),
            counts,
        }
    }

    /// `inverse()[w][r]` is the post-shuffle row holding pre-shuffle row `r` of worker `w`.
    pub fn inverse(&self) -> Vec<Vec<RowRef>> {
        let mut back: Vec<Vec<Option<RowRef>>> =
            self.sources.iter().map(|s| vec![None; s.len()]).collect();
        for (worker, rows) in self.sources.iter().enumerate() {
            for (row, src) in rows.iter().enumerate() {
                back[src.worker][src.row] = Some(RowRef { worker, row });
            }
        }
        back.into_iter()
            .map(|v| {
                v.into_iter()
                    .map(|r| r.expect("shuffle plan is a bijection"))
                    .collect()
            })
            .collect()
    }
}

/// Per-worker solver outcome in training mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerSolve {
    pub objective: f64,
    pub iterations_used: usize,
    pub fell_back_to_greedy: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub mode: Mode,
    pub shuffle_plan: ShufflePlan,
    /// `dispatch_counts[i][e]` tokens sent by worker `i` to expert `e`.
    pub dispatch_counts: Vec<Vec<usize>>,
    /// Largest number of tokens any expert processed.
    pub max_shard_size: usize,
    /// Empty in test mode.
    pub solves: Vec<WorkerSolve>,
    /// `return_plan[w][r]`: the post-shuffle row whose result became output row `r` of worker `w`.
    pub return_plan: Vec<Vec<RowRef>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutedOutput {
    /// One output per worker, rows in the worker's input order.
    pub outputs: Vec<LayerOutput>,
    /// Expert of every input token, per worker, in input order.
    pub expert_of: Vec<Vec<usize>>,
    pub trace: RoutingTrace,
}

/// Randomly exchanges `T/E` tokens between every pair of workers.
///
/// Worker `i` permutes its rows with its own stream and splits them into `E`
/// groups; group `j` goes to worker `j`. A receiving worker lays out groups by
/// sender, each group in ascending source-row order.
pub fn shuffle(batches: &[TokenBatch], seed: u64) -> Result<(Vec<TokenBatch>, ShufflePlan)> {
    let topo = WorkerTopology::new(batches.len(), batches.first().map_or(0, TokenBatch::len))?;
    topo.check_batches(batches)?;
    let (e, t, block) = (
        topo.num_workers(),
        topo.tokens_per_worker(),
        topo.block_size(),
    );

    let groups: Vec<Vec<Vec<usize>>> = (0..e)
        .into_par_iter()
        .map(|i| {
            let mut rng = derived_rng(seed, streams::SHUFFLE_BASE + i as u64);
            let mut rows: Vec<usize> = (0..t).collect();
            rows.shuffle(&mut rng);
            rows.chunks(block)
                .map(|c| {
                    let mut g = c.to_vec();
                    g.sort_unstable();
                    g
                })
                .collect()
        })
        .collect();

    let sources: Vec<Vec<RowRef>> = (0..e)
        .map(|j| {
            (0..e)
                .flat_map(|i| {
                    groups[i][j]
                        .iter()
                        .map(move |&row| RowRef { worker: i, row })
                })
                .collect()
        })
        .collect();
    let shuffled = sources
        .iter()
        .map(|srcs| gather(batches, srcs))
        .collect::<Result<Vec<_>>>()?;
    let counts = vec![vec![block; e]; e];
    Ok((shuffled, ShufflePlan { sources, counts }))
}

fn gather(batches: &[TokenBatch], rows: &[RowRef]) -> Result<TokenBatch> {
    let parts: Vec<TokenBatch> = rows
        .chunk_by(|a, b| a.worker == b.worker)
        .map(|run| {
            let local: Vec<usize> = run.iter().map(|r| r.row).collect();
            batches[run[0].worker].select(&local)
        })
        .collect();
    TokenBatch::concat(&parts)
}

/// Worker that row `t` of a `T`-row batch is sent to: `⌊tE/T⌋`.
pub fn all_to_all_destination(t: usize, tokens: usize, workers: usize) -> usize {
    t * workers / tokens
}

/// Splits a batch sorted by expert into `E` contiguous shards of `T/E` rows;
/// shard `e` goes to worker `e`.
pub fn all_to_all(batch: &TokenBatch, workers: usize) -> Result<Vec<TokenBatch>> {
    let topo = WorkerTopology::new(workers, batch.len())?;
    let block = topo.block_size();
    Ok((0..workers)
        .map(|e| batch.select(&(e * block..(e + 1) * block).collect::<Vec<_>>()))
        .collect())
}

/// Stable sort of tokens by assigned expert.
///
/// Returns the sorted batch and `order`, where sorted row `i` is input row
/// `order[i]`. The assignment must give every expert the same number of tokens.
pub fn sort_by_expert(
    batch: &TokenBatch,
    assignment: &Assignment,
) -> Result<(TokenBatch, Vec<usize>)> {
    let counts = assignment.counts();
    let expected = assignment.len() / assignment.num_experts().max(1);
    if let Some((expert, &count)) = counts.iter().enumerate().find(|(_, &c)| c != expected) {
        return Err(Error::Unbalanced {
            expert,
            count,
            expected,
        });
    }
    group_by_expert(batch, assignment)
}

/// Stable sort of tokens by assigned expert, without a balance requirement.
pub fn group_by_expert(
    batch: &TokenBatch,
    assignment: &Assignment,
) -> Result<(TokenBatch, Vec<usize>)> {
    if assignment.len() != batch.len() {
        return Err(Error::DimensionMismatch {
            context: "assignment length",
            expected: batch.len(),
            found: assignment.len(),
        });
    }
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by_key(|&t| assignment.expert_of()[t]);
    Ok((batch.select(&order), order))
}

/// The inverse of a permutation given as `order[i] = source index`.
pub fn invert_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &src) in order.iter().enumerate() {
        inv[src] = i;
    }
    inv
}

/// What one worker holds after local assignment and sorting.
struct LocalRoute {
    sorted: TokenBatch,
    order: Vec<usize>,
    assignment: Assignment,
    /// Rows sent to each expert, as contiguous lengths of `sorted`.
    shard_sizes: Vec<usize>,
    solve: Option<WorkerSolve>,
}

fn route_locally(
    batch: &TokenBatch,
    experts: &ExpertSet,
    settings: &AuctionSettings,
    mode: Mode,
) -> Result<LocalRoute> {
    let e = experts.num_experts();
    let scores = compute_scores(batch, experts).map_err(|err| err.in_stage("score"))?;
    let (assignment, solve) = match mode {
        Mode::Train => {
            let config = settings
                .resolve(&scores)
                .map_err(|err| err.in_stage("assign"))?;
            let r = solve_balanced(&scores, &config).map_err(|err| err.in_stage("assign"))?;
            let solve = WorkerSolve {
                objective: r.objective,
                iterations_used: r.iterations_used,
                fell_back_to_greedy: r.fell_back_to_greedy,
            };
            (r.assignment, Some(solve))
        }
        Mode::Test => (assign_greedy(&scores), None),
    };
    let (sorted, order) = match mode {
        Mode::Train => sort_by_expert(batch, &assignment),
        Mode::Test => group_by_expert(batch, &assignment),
    }
    .map_err(|err| err.in_stage("sort"))?;
    let shard_sizes = match mode {
        Mode::Train => {
            // all_to_all contract: row t goes to worker ⌊tE/T⌋
            let mut sizes = vec![0; e];
            for t in 0..sorted.len() {
                sizes[all_to_all_destination(t, sorted.len(), e)] += 1;
            }
            sizes
        }
        Mode::Test => assignment.counts(),
    };
    Ok(LocalRoute {
        sorted,
        order,
        assignment,
        shard_sizes,
        solve,
    })
}

/// Runs the full routing pipeline and returns per-worker outputs in input order.
///
/// The number of workers equals the number of experts; worker `e` hosts expert `e`.
pub fn route_and_apply(
    batches: &[TokenBatch],
    experts: &ExpertSet,
    settings: &AuctionSettings,
    seed: u64,
    mode: Mode,
) -> Result<RoutedOutput> {
    let workers = experts.num_experts();
    let topo = WorkerTopology::new(workers, batches.first().map_or(0, TokenBatch::len))
        .map_err(|err| err.in_stage("topology"))?;
    topo.check_batches(batches)
        .map_err(|err| err.in_stage("topology"))?;
    let t = topo.tokens_per_worker();

    let (local_batches, shuffle_plan) = match mode {
        Mode::Train => shuffle(batches, seed).map_err(|err| err.in_stage("shuffle"))?,
        Mode::Test => (batches.to_vec(), ShufflePlan::identity(workers, t)),
    };

    let routes: Vec<LocalRoute> = local_batches
        .par_iter()
        .map(|b| route_locally(b, experts, settings, mode))
        .collect::<Result<_>>()?;

    // Dispatch: worker i's sorted batch is cut into consecutive shards, shard e to expert e.
    let mut offsets: Vec<Vec<usize>> = Vec::with_capacity(workers);
    for r in &routes {
        let mut acc = 0;
        offsets.push(
            r.shard_sizes
                .iter()
                .map(|s| {
                    let o = acc;
                    acc += s;
                    o
                })
                .collect(),
        );
    }
    let dispatch_counts: Vec<Vec<usize>> = routes.iter().map(|r| r.shard_sizes.clone()).collect();
    if mode == Mode::Train
        && dispatch_counts
            .iter()
            .flatten()
            .any(|&c| c != topo.block_size())
    {
        return Err(
            Error::InvalidParameter("all_to_all received uneven shards".into())
                .in_stage("dispatch"),
        );
    }

    // Expert e's inbox holds the shards of workers 0..E in sender order.
    let inboxes: Vec<Option<TokenBatch>> = (0..workers)
        .map(|e| {
            let parts: Vec<TokenBatch> = routes
                .iter()
                .zip(&offsets)
                .filter(|(r, _)| r.shard_sizes[e] > 0)
                .map(|(r, off)| {
                    r.sorted
                        .select(&(off[e]..off[e] + r.shard_sizes[e]).collect::<Vec<_>>())
                })
                .collect();
            if parts.is_empty() {
                Ok(None)
            } else {
                TokenBatch::concat(&parts).map(Some)
            }
        })
        .collect::<Result<_>>()
        .map_err(|err| err.in_stage("dispatch"))?;
    let max_shard_size = inboxes
        .iter()
        .flatten()
        .map(TokenBatch::len)
        .max()
        .unwrap_or(0);

    let applied: Vec<Option<LayerOutput>> = inboxes
        .par_iter()
        .enumerate()
        .map(|(e, inbox)| {
            inbox
                .as_ref()
                .map(|inbox| {
                    let a = Assignment::greedy(vec![e; inbox.len()], workers)?;
                    base_forward(inbox, experts, &a)
                })
                .transpose()
        })
        .collect::<Result<_>>()
        .map_err(|err| err.in_stage("apply"))?;

    // Inverse all_to_all: expert e returns each sender's rows in the order received.
    let d = experts.dim();
    let mut local_outputs: Vec<(Matrix, Vec<f64>)> = Vec::with_capacity(workers);
    for (i, r) in routes.iter().enumerate() {
        let mut sorted_out = Matrix::zeros(t, d);
        let mut sorted_gates = vec![0.0; t];
        for e in 0..workers {
            let size = r.shard_sizes[e];
            if size == 0 {
                continue;
            }
            let (Some(inbox), Some(done)) = (&inboxes[e], &applied[e]) else {
                unreachable!("expert with tokens has an inbox");
            };
            // Offset of sender i's block inside expert e's inbox.
            let start: usize = routes[..i].iter().map(|p| p.shard_sizes[e]).sum();
            for s in 0..size {
                let dst = offsets[i][e] + s;
                sorted_out
                    .row_mut(dst)
                    .copy_from_slice(done.outputs.row(start + s));
                sorted_gates[dst] = done.gate_values[start + s];
                if inbox.origin()[start + s] != r.sorted.origin()[dst] {
                    return Err(Error::InvalidParameter(
                        "returned row does not match its origin".into(),
                    )
                    .in_stage("return"));
                }
            }
        }
        // Unsort: sorted row s is local row order[s].
        let mut out = Matrix::zeros(t, d);
        let mut gates = vec![0.0; t];
        for (s, &row) in r.order.iter().enumerate() {
            out.row_mut(row).copy_from_slice(sorted_out.row(s));
            gates[row] = sorted_gates[s];
        }
        local_outputs.push((out, gates));
    }

    // Unshuffle back to the originating workers.
    let return_plan = shuffle_plan.inverse();
    let mut outputs = Vec::with_capacity(workers);
    let mut expert_of = Vec::with_capacity(workers);
    for (w, back) in return_plan.iter().enumerate() {
        let mut out = Matrix::zeros(t, d);
        let mut gates = vec![0.0; t];
        let mut experts_here = vec![0; t];
        for (row, src) in back.iter().enumerate() {
            if local_batches[src.worker].origin()[src.row] != batches[w].origin()[row] {
                return Err(Error::InvalidParameter(
                    "unshuffled row does not match its origin".into(),
                )
                .in_stage("unshuffle"));
            }
            let (m, g) = &local_outputs[src.worker];
            out.row_mut(row).copy_from_slice(m.row(src.row));
            gates[row] = g[src.row];
            experts_here[row] = routes[src.worker].assignment.expert_of()[src.row];
        }
        outputs.push(LayerOutput {
            outputs: out,
            gate_values: gates,
        });
        expert_of.push(experts_here);
    }

    let solves = routes.into_iter().filter_map(|r| r.solve).collect();
    Ok(RoutedOutput {
        outputs,
        expert_of,
        trace: RoutingTrace {
            mode,
            shuffle_plan,
            dispatch_counts,
            max_shard_size,
            solves,
            return_plan,
        },
    })
}
