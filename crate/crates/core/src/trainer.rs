//! Toy training on clustered synthetic tokens.
//!
//! Tokens are drawn around `K` centroids; the target for token `x` of
//! cluster `k` is `x + target_map_k`. The model is one BASE layer followed by
//! an optional shared linear readout. Training routes every step through the
//! balanced pipeline, backpropagates, clips, and applies plain gradient
//! descent.
//!
//! Clipping follows the shared-parameter rule: the l2 norm is taken over the
//! shared (readout) gradients only, and the resulting scale is applied to all
//! gradients, expert ones included. Expert gradient norms are never checked.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::assignment::{assign_greedy, compute_scores, AuctionSettings};
use crate::error::{Error, Result};
use crate::io::Persist;
use crate::layer::base_backward;
use crate::rng::{self, derived_rng, streams, Rng};
use crate::routing::{route_and_apply, Mode, WorkerTopology};
use crate::types::{dot, Assignment, ExpertNetwork, ExpertSet, Matrix, Origin, TokenBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub num_clusters: usize,
    /// `K × D`
    pub cluster_centroids: Matrix,
    /// Vocabulary ids per cluster; cluster `k` owns ids `k * n .. (k + 1) * n`.
    pub tokens_per_cluster: usize,
    pub noise_scale: f64,
    /// `K × D`: the correction an ideal expert adds for each cluster.
    pub target_map: Matrix,
    /// Probability that the next token of a stream stays in the current cluster.
    pub stickiness: f64,
}

/// Parameters for [`SyntheticTask::generate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub num_clusters: usize,
    pub dim: usize,
    /// Norm of every centroid.
    pub separation: f64,
    pub noise_scale: f64,
    /// Standard deviation of the target-map entries.
    pub target_scale: f64,
    pub tokens_per_cluster: usize,
    pub stickiness: f64,
}

impl Default for TaskParams {
    fn default() -> Self {
        TaskParams {
            num_clusters: 4,
            dim: 8,
            separation: 3.0,
            noise_scale: 1.0,
            target_scale: 1.0,
            tokens_per_cluster: 16,
            stickiness: 0.9,
        }
    }
}

/// Samples of a task: a token batch plus the cluster of every token.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub tokens: TokenBatch,
    pub clusters: Vec<usize>,
}

impl SyntheticTask {
    pub fn new(
        cluster_centroids: Matrix,
        target_map: Matrix,
        tokens_per_cluster: usize,
        noise_scale: f64,
        stickiness: f64,
    ) -> Result<Self> {
        let k = cluster_centroids.rows();
        if k == 0 || target_map.rows() != k || target_map.cols() != cluster_centroids.cols() {
            return Err(Error::InvalidParameter(
                "centroids and target map must be K × D".into(),
            ));
        }
        if noise_scale.is_nan()
            || noise_scale <= 0.0
            || tokens_per_cluster == 0
            || !(0.0..=1.0).contains(&stickiness)
        {
            return Err(Error::InvalidParameter(
                "noise must be positive, ids per cluster nonzero, stickiness in [0, 1]".into(),
            ));
        }
        for a in 0..k {
            for b in a + 1..k {
                if cluster_centroids.row(a) == cluster_centroids.row(b) {
                    return Err(Error::InvalidParameter(format!(
                        "centroids {a} and {b} coincide"
                    )));
                }
            }
        }
        Ok(SyntheticTask {
            num_clusters: k,
            cluster_centroids,
            tokens_per_cluster,
            noise_scale,
            target_map,
            stickiness,
        })
    }

    pub fn generate(params: &TaskParams, seed: u64) -> Result<Self> {
        let mut r = derived_rng(seed, streams::DATA);
        let mut centroids = Matrix::random_normal(params.num_clusters, params.dim, 1.0, &mut r);
        for k in 0..params.num_clusters {
            let row = centroids.row_mut(k);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v *= params.separation / norm);
        }
        let target_map =
            Matrix::random_normal(params.num_clusters, params.dim, params.target_scale, &mut r);
        SyntheticTask::new(
            centroids,
            target_map,
            params.tokens_per_cluster,
            params.noise_scale,
            params.stickiness,
        )
    }

    pub fn dim(&self) -> usize {
        self.cluster_centroids.cols()
    }

    fn draw_token(&self, k: usize, r: &mut Rng) -> (Vec<f64>, u32) {
        let noise = rng::normal_vec(r, self.dim(), self.noise_scale);
        let x = self
            .cluster_centroids
            .row(k)
            .iter()
            .zip(noise)
            .map(|(c, n)| c + n)
            .collect();
        let id = k * self.tokens_per_cluster + r.random_range(0..self.tokens_per_cluster);
        (x, id as u32)
    }

    /// A stream of `len` tokens whose cluster follows a sticky Markov chain.
    pub fn sample_stream(&self, len: usize, worker: usize, r: &mut Rng) -> Result<LabeledBatch> {
        let mut k = r.random_range(0..self.num_clusters);
        let mut data = Vec::with_capacity(len * self.dim());
        let mut ids = Vec::with_capacity(len);
        let mut clusters = Vec::with_capacity(len);
        for _ in 0..len {
            if !r.random_bool(self.stickiness) {
                k = r.random_range(0..self.num_clusters);
            }
            let (x, id) = self.draw_token(k, r);
            data.extend(x);
            ids.push(id);
            clusters.push(k);
        }
        let origin = (0..len)
            .map(|position| Origin { worker, position })
            .collect();
        let tokens = TokenBatch::new(Matrix::new(len, self.dim(), data)?, ids, origin)?;
        Ok(LabeledBatch { tokens, clusters })
    }

    /// `per_cluster` independent tokens from every cluster, grouped by cluster.
    pub fn sample_balanced(&self, per_cluster: usize, r: &mut Rng) -> Result<LabeledBatch> {
        let n = per_cluster * self.num_clusters;
        let mut data = Vec::with_capacity(n * self.dim());
        let mut ids = Vec::with_capacity(n);
        let mut clusters = Vec::with_capacity(n);
        for k in 0..self.num_clusters {
            for _ in 0..per_cluster {
                let (x, id) = self.draw_token(k, r);
                data.extend(x);
                ids.push(id);
                clusters.push(k);
            }
        }
        let origin = (0..n)
            .map(|position| Origin {
                worker: 0,
                position,
            })
            .collect();
        let tokens = TokenBatch::new(Matrix::new(n, self.dim(), data)?, ids, origin)?;
        Ok(LabeledBatch { tokens, clusters })
    }

    /// Regression target of a token: the token corrected by its cluster's map.
    pub fn target(&self, token: &[f64], cluster: usize) -> Vec<f64> {
        token
            .iter()
            .zip(self.target_map.row(cluster))
            .map(|(x, m)| x + m)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    threshold: f64,
}

impl ClipConfig {
    pub const DEFAULT_THRESHOLD: f64 = 0.1;

    pub fn new(threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "clip threshold must be positive, got {threshold}"
            )));
        }
        Ok(ClipConfig { threshold })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig {
            threshold: Self::DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clipped {
    pub shared: Vec<f64>,
    pub experts: Vec<Vec<f64>>,
    pub scale_factor: f64,
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales every gradient by `min(1, threshold / ||shared||)`.
pub fn clip_gradients(
    shared: &[f64],
    experts: &[Vec<f64>],
    config: &ClipConfig,
) -> Result<Clipped> {
    if !shared.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("shared gradients".into()));
    }
    if let Some(e) = experts
        .iter()
        .position(|g| !g.iter().all(|v| v.is_finite()))
    {
        return Err(Error::NonFinite(format!("gradients of expert {e}")));
    }
    let norm = l2_norm(shared);
    let scale_factor = if norm <= config.threshold {
        1.0
    } else {
        config.threshold / norm
    };
    let scale = |g: &[f64]| g.iter().map(|v| v * scale_factor).collect::<Vec<_>>();
    Ok(Clipped {
        shared: scale(shared),
        experts: experts.iter().map(|g| scale(g)).collect(),
        scale_factor,
    })
}

/// Shared linear readout `pred = out · weight + bias`, replicated on every worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Readout {
    /// `D × D`, initialized to the identity.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Readout {
    pub fn identity(dim: usize) -> Self {
        let mut weight = Matrix::zeros(dim, dim);
        for i in 0..dim {
            weight.set(i, i, 1.0);
        }
        Readout {
            weight,
            bias: vec![0.0; dim],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (i, xi) in x.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.weight.row(i)) {
                *o += xi * w;
            }
        }
        out
    }

    fn descend(&mut self, grad: &[f64], lr: f64) {
        let n = self.weight.data().len();
        for (p, g) in self.weight.data_mut().iter_mut().zip(&grad[..n]) {
            *p -= lr * g;
        }
        for (p, g) in self.bias.iter_mut().zip(&grad[n..]) {
            *p -= lr * g;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub clip: ClipConfig,
    pub seed: u64,
    /// Tokens per worker per step; the number of workers equals the number of experts.
    pub tokens_per_worker: usize,
    pub shared_readout: bool,
    pub auction: AuctionSettings,
    /// Held-out tokens per cluster used for purity and evaluation loss.
    pub eval_per_cluster: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            learning_rate: 0.3,
            clip: ClipConfig::default(),
            seed: 0,
            tokens_per_worker: 32,
            shared_readout: true,
            auction: AuctionSettings::default(),
            eval_per_cluster: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Mean squared error on this step's training batch, before the update.
    pub loss: f64,
    pub scale_factor: f64,
    /// Greedy routing purity on the held-out set, before the update.
    pub purity: f64,
    /// Largest per-expert load if this step's batch were routed greedily.
    pub max_greedy_shard: usize,
    /// Mean squared error on the held-out set, before the update.
    pub eval_loss: f64,
    /// Training tokens routed to each expert this step.
    pub usage: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub initial_purity: f64,
    pub final_purity: f64,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<StepRecord>,
    pub summary: TrainSummary,
}

impl TrainingLog {
    pub const CSV_HEADER: &'static str = "step,loss,scale_factor,purity,max_greedy_shard,eval_loss";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.loss, r.scale_factor, r.purity, r.max_greedy_shard, r.eval_loss
            ));
        }
        out
    }
}

/// Trained parameters plus everything needed to rebuild the evaluation setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub seed: u64,
    pub task: SyntheticTask,
    pub experts: ExpertSet,
    pub readout: Option<Readout>,
    pub config: TrainConfig,
}

impl Persist for Checkpoint {
    const KIND: &'static str = "checkpoint";
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub log: TrainingLog,
    pub checkpoint: Checkpoint,
}

/// Fraction of tokens routed to their cluster's plurality expert.
/// Plurality ties go to the lowest expert index.
pub fn routing_purity(
    expert_of: &[usize],
    clusters: &[usize],
    num_clusters: usize,
    num_experts: usize,
) -> f64 {
    let mut counts = vec![vec![0usize; num_experts]; num_clusters];
    for (&e, &k) in expert_of.iter().zip(clusters) {
        counts[k][e] += 1;
    }
    let matched: usize = counts
        .iter()
        .map(|row| {
            let mut best = 0;
            for e in 1..row.len() {
                if row[e] > row[best] {
                    best = e;
                }
            }
            row[best]
        })
        .sum();
    matched as f64 / expert_of.len() as f64
}

/// Greedy routing purity of `experts` on a labeled batch.
pub fn greedy_purity(experts: &ExpertSet, data: &LabeledBatch, num_clusters: usize) -> Result<f64> {
    let a = assign_greedy(&compute_scores(&data.tokens, experts)?);
    Ok(routing_purity(
        a.expert_of(),
        &data.clusters,
        num_clusters,
        experts.num_experts(),
    ))
}

struct Model<'a> {
    task: &'a SyntheticTask,
    experts: &'a ExpertSet,
    readout: Option<&'a Readout>,
}

impl Model<'_> {
    fn predict(&self, out: &[f64]) -> Vec<f64> {
        match self.readout {
            Some(r) => r.apply(out),
            None => out.to_vec(),
        }
    }

    /// Mean squared error of layer outputs against their cluster targets.
    fn loss(&self, inputs: &Matrix, outputs: &Matrix, clusters: &[usize]) -> f64 {
        let n = outputs.rows() as f64;
        outputs
            .iter_rows()
            .zip(inputs.iter_rows())
            .zip(clusters)
            .map(|((o, x), &k)| {
                let p = self.predict(o);
                p.iter()
                    .zip(self.task.target(x, k))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / n
    }

    fn eval_loss(&self, data: &LabeledBatch) -> Result<f64> {
        let a = assign_greedy(&compute_scores(&data.tokens, self.experts)?);
        let out = crate::layer::base_forward(&data.tokens, self.experts, &a)?;
        Ok(self.loss(data.tokens.features(), &out.outputs, &data.clusters))
    }
}

/// Runs `config.steps` steps of routed training and returns the log and the
/// final parameters.
pub fn train_toy(
    task: &SyntheticTask,
    experts: ExpertSet,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let e_count = experts.num_experts();
    let d = experts.dim();
    if task.num_clusters > e_count {
        return Err(Error::InvalidParameter(format!(
            "{} clusters need at least as many experts, got {e_count}",
            task.num_clusters
        )));
    }
    if task.dim() != d {
        return Err(Error::DimensionMismatch {
            context: "task dimension vs expert dimension",
            expected: d,
            found: task.dim(),
        });
    }
    if !(config.learning_rate >= 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::InvalidParameter(
            "learning rate must be finite and non-negative".into(),
        ));
    }
    let topo = WorkerTopology::new(e_count, config.tokens_per_worker)?;

    let mut experts = experts;
    let mut readout = config.shared_readout.then(|| Readout::identity(d));
    let mut data_rng = derived_rng(config.seed, streams::DATA);
    let eval = task.sample_balanced(
        config.eval_per_cluster,
        &mut derived_rng(config.seed, streams::EVAL),
    )?;
    let initial_purity = greedy_purity(&experts, &eval, task.num_clusters)?;
    let initial_eval_loss = Model {
        task,
        experts: &experts,
        readout: readout.as_ref(),
    }
    .eval_loss(&eval)?;

    let mut records = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batches: Vec<LabeledBatch> = (0..topo.num_workers())
            .map(|w| task.sample_stream(topo.tokens_per_worker(), w, &mut data_rng))
            .collect::<Result<_>>()?;
        let tokens: Vec<TokenBatch> = batches.iter().map(|b| b.tokens.clone()).collect();
        let routed = route_and_apply(
            &tokens,
            &experts,
            &config.auction,
            config.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            Mode::Train,
        )?;

        let model = Model {
            task,
            experts: &experts,
            readout: readout.as_ref(),
        };
        let purity = greedy_purity(&experts, &eval, task.num_clusters)?;
        let eval_loss = model.eval_loss(&eval)?;

        let n_total = (topo.num_workers() * topo.tokens_per_worker()) as f64;
        let mut loss = 0.0;
        let mut d_readout_w = Matrix::zeros(d, d);
        let mut d_readout_b = vec![0.0; d];
        let mut d_embeddings = Matrix::zeros(e_count, d);
        let mut d_networks: Vec<ExpertNetwork> = experts
            .networks()
            .iter()
            .map(ExpertNetwork::zeroed_like)
            .collect();
        let mut usage = vec![0usize; e_count];
        let mut greedy_load = vec![0usize; e_count];

        for (w, batch) in batches.iter().enumerate() {
            let out = &routed.outputs[w].outputs;
            let mut upstream = Matrix::zeros(out.rows(), d);
            for (t, &k) in batch.clusters.iter().enumerate() {
                let o = out.row(t);
                let pred = model.predict(o);
                let target = task.target(batch.tokens.features().row(t), k);
                let d_pred: Vec<f64> = pred
                    .iter()
                    .zip(&target)
                    .map(|(p, y)| 2.0 * (p - y) / n_total)
                    .collect();
                loss += pred
                    .iter()
                    .zip(&target)
                    .map(|(p, y)| (p - y) * (p - y))
                    .sum::<f64>()
                    / n_total;
                let u = upstream.row_mut(t);
                match &readout {
                    Some(r) => {
                        for i in 0..d {
                            for (g, dp) in d_readout_w.row_mut(i).iter_mut().zip(&d_pred) {
                                *g += o[i] * dp;
                            }
                            u[i] = dot(r.weight.row(i), &d_pred);
                        }
                        for (g, dp) in d_readout_b.iter_mut().zip(&d_pred) {
                            *g += dp;
                        }
                    }
                    None => u.copy_from_slice(&d_pred),
                }
            }
            let a = Assignment::greedy(routed.expert_of[w].clone(), e_count)?;
            a.expert_of().iter().for_each(|&e| usage[e] += 1);
            let grads = base_backward(&batch.tokens, &experts, &a, &upstream)?;
            for (g, v) in d_embeddings
                .data_mut()
                .iter_mut()
                .zip(grads.d_embeddings.data())
            {
                *g += v;
            }
            for (acc, g) in d_networks.iter_mut().zip(&grads.d_networks) {
                acc.add_scaled(g, 1.0);
            }
            let greedy = assign_greedy(&compute_scores(&batch.tokens, &experts)?);
            greedy.expert_of().iter().for_each(|&e| greedy_load[e] += 1);
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }

        let shared: Vec<f64> = if readout.is_some() {
            d_readout_w
                .data()
                .iter()
                .chain(&d_readout_b)
                .copied()
                .collect()
        } else {
            Vec::new()
        };
        let expert_flat: Vec<Vec<f64>> = (0..e_count)
            .map(|e| {
                let mut v = d_embeddings.row(e).to_vec();
                v.extend(d_networks[e].params());
                v
            })
            .collect();
        let clipped =
            clip_gradients(&shared, &expert_flat, &config.clip).map_err(|err| match err {
                Error::NonFinite(_) => Error::Diverged { step, loss },
                other => other,
            })?;

        if let Some(r) = readout.as_mut() {
            r.descend(&clipped.shared, config.learning_rate);
        }
        for (e, flat) in clipped.experts.iter().enumerate() {
            d_embeddings.row_mut(e).copy_from_slice(&flat[..d]);
            d_networks[e].assign_flat(&flat[d..])?;
        }
        experts
            .descend(&d_embeddings, &d_networks, config.learning_rate)
            .map_err(|_| Error::Diverged { step, loss })?;

        records.push(StepRecord {
            step,
            loss,
            scale_factor: clipped.scale_factor,
            purity,
            max_greedy_shard: greedy_load.iter().copied().max().unwrap_or(0),
            eval_loss,
            usage,
        });
    }

    let final_model = Model {
        task,
        experts: &experts,
        readout: readout.as_ref(),
    };
    let summary = TrainSummary {
        steps: config.steps,
        initial_purity,
        final_purity: greedy_purity(&experts, &eval, task.num_clusters)?,
        initial_eval_loss,
        final_eval_loss: final_model.eval_loss(&eval)?,
    };
    Ok(TrainOutcome {
        log: TrainingLog { records, summary },
        checkpoint: Checkpoint {
            seed: config.seed,
            task: task.clone(),
            experts,
            readout,
            config: config.clone(),
        },
    })
}
