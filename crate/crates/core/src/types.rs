//! Shared domain types.

use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Hidden width of every feedforward block, as a multiple of the model dimension.
pub const HIDDEN_MULTIPLIER: usize = 4;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;
    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "matrix data length",
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    context: "matrix row length",
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        Matrix {
            rows,
            cols,
            data: rng::normal_vec(rng, rows * cols, std),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Builds a matrix whose row `i` is row `order[i]` of `self`.
    pub fn select_rows(&self, order: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(order.len() * self.cols);
        for &i in order {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: order.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack<'a>(parts: impl IntoIterator<Item = &'a Matrix>, cols: usize) -> Matrix {
        let mut data = Vec::new();
        let mut rows = 0;
        for m in parts {
            debug_assert_eq!(m.cols, cols);
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        Matrix { rows, cols, data }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Where a token entered the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Origin {
    pub worker: usize,
    pub position: usize,
}

/// `T` token feature vectors of dimension `D`, with vocabulary ids and origins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTokenBatch")]
pub struct TokenBatch {
    features: Matrix,
    token_ids: Vec<u32>,
    origin: Vec<Origin>,
}

#[derive(Deserialize)]
struct RawTokenBatch {
    features: Matrix,
    token_ids: Vec<u32>,
    origin: Vec<Origin>,
}

impl TryFrom<RawTokenBatch> for TokenBatch {
    type Error = Error;
    fn try_from(raw: RawTokenBatch) -> Result<Self> {
        TokenBatch::new(raw.features, raw.token_ids, raw.origin)
    }
}

impl TokenBatch {
    pub fn new(features: Matrix, token_ids: Vec<u32>, origin: Vec<Origin>) -> Result<Self> {
        if features.rows() == 0 || features.cols() == 0 {
            return Err(Error::InvalidParameter(
                "token batch needs at least one token and one feature".into(),
            ));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("token features".into()));
        }
        for (context, len) in [
            ("token ids", token_ids.len()),
            ("token origins", origin.len()),
        ] {
            if len != features.rows() {
                return Err(Error::DimensionMismatch {
                    context,
                    expected: features.rows(),
                    found: len,
                });
            }
        }
        let mut seen = HashSet::with_capacity(origin.len());
        for o in &origin {
            if !seen.insert(*o) {
                return Err(Error::DuplicateOrigin {
                    worker: o.worker,
                    position: o.position,
                });
            }
        }
        Ok(TokenBatch {
            features,
            token_ids,
            origin,
        })
    }

    /// A batch for `worker` whose origins are positions `0..T` and ids are zero.
    pub fn from_features(features: Matrix, worker: usize) -> Result<Self> {
        let t = features.rows();
        let origin = (0..t).map(|position| Origin { worker, position }).collect();
        TokenBatch::new(features, vec![0; t], origin)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    pub fn origin(&self) -> &[Origin] {
        &self.origin
    }

    /// Reorders rows: row `i` of the result is row `order[i]` of `self`.
    /// `order` must be a permutation (or an injective selection) of row indices.
    pub fn select(&self, order: &[usize]) -> TokenBatch {
        TokenBatch {
            features: self.features.select_rows(order),
            token_ids: order.iter().map(|&i| self.token_ids[i]).collect(),
            origin: order.iter().map(|&i| self.origin[i]).collect(),
        }
    }

    /// Concatenates batches. Origins must remain unique.
    pub fn concat(parts: &[TokenBatch]) -> Result<TokenBatch> {
        let dim = parts.first().map_or(0, TokenBatch::dim);
        if let Some(p) = parts.iter().find(|p| p.dim() != dim) {
            return Err(Error::DimensionMismatch {
                context: "concatenated batch dimension",
                expected: dim,
                found: p.dim(),
            });
        }
        let features = Matrix::vstack(parts.iter().map(|p| &p.features), dim);
        let token_ids = parts
            .iter()
            .flat_map(|p| p.token_ids.iter().copied())
            .collect();
        let origin = parts
            .iter()
            .flat_map(|p| p.origin.iter().copied())
            .collect();
        TokenBatch::new(features, token_ids, origin)
    }
}

/// One residual feedforward block: layer norm, up-projection to `4D`, ReLU,
/// down-projection to `D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedForwardBlock {
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
    /// `D × 4D`
    pub up: Matrix,
    pub up_bias: Vec<f64>,
    /// `4D × D`
    pub down: Matrix,
    pub down_bias: Vec<f64>,
}

impl FeedForwardBlock {
    /// Block whose residual branch is identically zero.
    pub fn zeros(dim: usize) -> Self {
        let hidden = HIDDEN_MULTIPLIER * dim;
        FeedForwardBlock {
            ln_gain: vec![1.0; dim],
            ln_bias: vec![0.0; dim],
            up: Matrix::zeros(dim, hidden),
            up_bias: vec![0.0; hidden],
            down: Matrix::zeros(hidden, dim),
            down_bias: vec![0.0; dim],
        }
    }

    pub fn init(dim: usize, std: f64, rng: &mut Rng) -> Self {
        let hidden = HIDDEN_MULTIPLIER * dim;
        FeedForwardBlock {
            ln_gain: vec![1.0; dim],
            ln_bias: vec![0.0; dim],
            up: Matrix::random_normal(dim, hidden, std, rng),
            up_bias: vec![0.0; hidden],
            down: Matrix::random_normal(hidden, dim, std, rng),
            down_bias: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.ln_gain.len()
    }

    pub fn hidden(&self) -> usize {
        self.up_bias.len()
    }

    fn shape_ok(&self) -> bool {
        let d = self.dim();
        let h = self.hidden();
        self.ln_bias.len() == d
            && self.up.rows() == d
            && self.up.cols() == h
            && self.down.rows() == h
            && self.down.cols() == d
            && self.down_bias.len() == d
    }

    fn slices(&self) -> [&[f64]; 6] {
        [
            &self.ln_gain,
            &self.ln_bias,
            self.up.data(),
            &self.up_bias,
            self.down.data(),
            &self.down_bias,
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 6] {
        [
            &mut self.ln_gain,
            &mut self.ln_bias,
            self.up.data_mut(),
            &mut self.up_bias,
            self.down.data_mut(),
            &mut self.down_bias,
        ]
    }
}

/// The position-wise function of one expert: a stack of feedforward blocks.
///
/// The same type carries parameter gradients, which share its shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertNetwork {
    pub blocks: Vec<FeedForwardBlock>,
}

impl ExpertNetwork {
    pub fn zeros(dim: usize, blocks: usize) -> Self {
        ExpertNetwork {
            blocks: (0..blocks).map(|_| FeedForwardBlock::zeros(dim)).collect(),
        }
    }

    pub fn init(dim: usize, blocks: usize, std: f64, rng: &mut Rng) -> Self {
        ExpertNetwork {
            blocks: (0..blocks)
                .map(|_| FeedForwardBlock::init(dim, std, rng))
                .collect(),
        }
    }

    /// A network of the same shape with every parameter set to zero.
    pub fn zeroed_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|v| *v = 0.0);
        z
    }

    pub fn dim(&self) -> usize {
        self.blocks.first().map_or(0, FeedForwardBlock::dim)
    }

    pub fn num_params(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.slices())
            .map(<[f64]>::len)
            .sum()
    }

    fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::InvalidParameter(
                "expert network needs at least one block".into(),
            ));
        }
        let d = self.dim();
        for b in &self.blocks {
            if b.dim() != d || b.hidden() != HIDDEN_MULTIPLIER * d || !b.shape_ok() {
                return Err(Error::InvalidParameter(
                    "inconsistent feedforward block shapes".into(),
                ));
            }
        }
        if !self.params().all(f64::is_finite) {
            return Err(Error::NonFinite("expert network parameters".into()));
        }
        Ok(())
    }

    fn same_shape(&self, other: &ExpertNetwork) -> bool {
        self.blocks.len() == other.blocks.len()
            && self.blocks.iter().zip(&other.blocks).all(|(a, b)| {
                a.slices()
                    .iter()
                    .zip(b.slices())
                    .all(|(x, y)| x.len() == y.len())
            })
    }

    /// All parameters in a fixed order: per block gain, bias, up, up bias, down, down bias.
    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.blocks
            .iter()
            .flat_map(|b| b.slices())
            .flat_map(|s| s.iter().copied())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.params().collect()
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for b in &mut self.blocks {
            for s in b.slices_mut() {
                s.iter_mut().for_each(&mut f);
            }
        }
    }

    /// Overwrites parameters from a flat vector in [`ExpertNetwork::params`] order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                context: "flat expert parameters",
                expected: self.num_params(),
                found: flat.len(),
            });
        }
        let mut it = flat.iter();
        self.for_each_mut(|v| *v = *it.next().unwrap());
        Ok(())
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, other: &ExpertNetwork, alpha: f64) {
        let mut it = other.params();
        self.for_each_mut(|v| *v += alpha * it.next().unwrap());
    }
}

/// `E` expert embeddings plus their networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawExpertSet")]
pub struct ExpertSet {
    embeddings: Matrix,
    networks: Vec<ExpertNetwork>,
}

#[derive(Deserialize)]
struct RawExpertSet {
    embeddings: Matrix,
    networks: Vec<ExpertNetwork>,
}

impl TryFrom<RawExpertSet> for ExpertSet {
    type Error = Error;
    fn try_from(raw: RawExpertSet) -> Result<Self> {
        ExpertSet::new(raw.embeddings, raw.networks)
    }
}

/// Standard deviation of the normal initializer for embeddings and projections.
pub const INIT_STD: f64 = 0.02;

impl ExpertSet {
    pub fn new(embeddings: Matrix, networks: Vec<ExpertNetwork>) -> Result<Self> {
        if embeddings.rows() == 0 || embeddings.cols() == 0 {
            return Err(Error::InvalidParameter(
                "expert set needs at least one expert".into(),
            ));
        }
        if !embeddings.is_finite() {
            return Err(Error::NonFinite("expert embeddings".into()));
        }
        if networks.len() != embeddings.rows() {
            return Err(Error::DimensionMismatch {
                context: "expert network count",
                expected: embeddings.rows(),
                found: networks.len(),
            });
        }
        for n in &networks {
            n.validate()?;
            if n.dim() != embeddings.cols() {
                return Err(Error::DimensionMismatch {
                    context: "expert network dimension",
                    expected: embeddings.cols(),
                    found: n.dim(),
                });
            }
            if !n.same_shape(&networks[0]) {
                return Err(Error::InvalidParameter(
                    "expert networks differ in shape".into(),
                ));
            }
        }
        Ok(ExpertSet {
            embeddings,
            networks,
        })
    }

    /// Seeded initialization: embeddings and projections `N(0, 0.02²)`,
    /// layer-norm gain 1 and bias 0, projection biases 0.
    pub fn init(seed: u64, experts: usize, dim: usize, blocks: usize) -> Result<Self> {
        let mut rng = rng::derived_rng(seed, rng::streams::INIT);
        let embeddings = Matrix::random_normal(experts, dim, INIT_STD, &mut rng);
        let networks = (0..experts)
            .map(|_| ExpertNetwork::init(dim, blocks, INIT_STD, &mut rng))
            .collect();
        ExpertSet::new(embeddings, networks)
    }

    /// Same embeddings, every network replaced by an all-zero network.
    pub fn with_zero_networks(&self) -> Self {
        ExpertSet {
            embeddings: self.embeddings.clone(),
            networks: self
                .networks
                .iter()
                .map(ExpertNetwork::zeroed_like)
                .collect(),
        }
    }

    pub fn num_experts(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn num_blocks(&self) -> usize {
        self.networks[0].blocks.len()
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn embedding(&self, e: usize) -> &[f64] {
        self.embeddings.row(e)
    }

    pub fn networks(&self) -> &[ExpertNetwork] {
        &self.networks
    }

    pub fn network(&self, e: usize) -> &ExpertNetwork {
        &self.networks[e]
    }

    /// Flat parameter vector of expert `e`: embedding followed by network parameters.
    pub fn expert_params(&self, e: usize) -> Vec<f64> {
        let mut v = self.embeddings.row(e).to_vec();
        v.extend(self.networks[e].params());
        v
    }

    /// Applies `params -= lr * grads` for embeddings and networks.
    pub fn descend(
        &mut self,
        d_embeddings: &Matrix,
        d_networks: &[ExpertNetwork],
        lr: f64,
    ) -> Result<()> {
        if d_embeddings.rows() != self.embeddings.rows()
            || d_embeddings.cols() != self.embeddings.cols()
        {
            return Err(Error::DimensionMismatch {
                context: "embedding gradient",
                expected: self.embeddings.data().len(),
                found: d_embeddings.data().len(),
            });
        }
        for (p, g) in self
            .embeddings
            .data_mut()
            .iter_mut()
            .zip(d_embeddings.data())
        {
            *p -= lr * g;
        }
        for (n, g) in self.networks.iter_mut().zip(d_networks) {
            n.add_scaled(g, -lr);
        }
        if !self.embeddings.is_finite()
            || !self.networks.iter().all(|n| n.params().all(f64::is_finite))
        {
            return Err(Error::NonFinite("expert parameters after update".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentMode {
    Balanced,
    Greedy,
}

/// Token-to-expert assignment `a_t`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawAssignment")]
pub struct Assignment {
    expert_of: Vec<usize>,
    num_experts: usize,
    mode: AssignmentMode,
}

#[derive(Deserialize)]
struct RawAssignment {
    expert_of: Vec<usize>,
    num_experts: usize,
    mode: AssignmentMode,
}

impl TryFrom<RawAssignment> for Assignment {
    type Error = Error;
    fn try_from(raw: RawAssignment) -> Result<Self> {
        match raw.mode {
            AssignmentMode::Balanced => Assignment::balanced(raw.expert_of, raw.num_experts),
            AssignmentMode::Greedy => Assignment::greedy(raw.expert_of, raw.num_experts),
        }
    }
}

impl Assignment {
    /// A balanced assignment: every expert receives exactly `T/E` tokens.
    pub fn balanced(expert_of: Vec<usize>, num_experts: usize) -> Result<Self> {
        let counts = count_experts(&expert_of, num_experts)?;
        let t = expert_of.len();
        if num_experts == 0 || !t.is_multiple_of(num_experts) {
            return Err(Error::Indivisible {
                tokens: t,
                experts: num_experts,
            });
        }
        let expected = t / num_experts;
        if let Some((expert, &count)) = counts.iter().enumerate().find(|(_, &c)| c != expected) {
            return Err(Error::Unbalanced {
                expert,
                count,
                expected,
            });
        }
        Ok(Assignment {
            expert_of,
            num_experts,
            mode: AssignmentMode::Balanced,
        })
    }

    /// An assignment with no count constraint.
    pub fn greedy(expert_of: Vec<usize>, num_experts: usize) -> Result<Self> {
        count_experts(&expert_of, num_experts)?;
        Ok(Assignment {
            expert_of,
            num_experts,
            mode: AssignmentMode::Greedy,
        })
    }

    pub fn expert_of(&self) -> &[usize] {
        &self.expert_of
    }

    pub fn len(&self) -> usize {
        self.expert_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.expert_of.is_empty()
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn mode(&self) -> AssignmentMode {
        self.mode
    }

    pub fn counts(&self) -> Vec<usize> {
        count_experts(&self.expert_of, self.num_experts).expect("validated at construction")
    }
}

fn count_experts(expert_of: &[usize], num_experts: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0; num_experts];
    for &e in expert_of {
        *counts.get_mut(e).ok_or(Error::ExpertOutOfRange {
            index: e,
            experts: num_experts,
        })? += 1;
    }
    Ok(counts)
}

/// `T × E` token-expert affinities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix", into = "Matrix")]
pub struct ScoreMatrix {
    values: Matrix,
}

impl TryFrom<Matrix> for ScoreMatrix {
    type Error = Error;
    fn try_from(values: Matrix) -> Result<Self> {
        ScoreMatrix::new(values)
    }
}

impl From<ScoreMatrix> for Matrix {
    fn from(s: ScoreMatrix) -> Matrix {
        s.values
    }
}

impl ScoreMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::InvalidParameter(
                "score matrix must be non-empty".into(),
            ));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("score matrix".into()));
        }
        Ok(ScoreMatrix { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        ScoreMatrix::new(Matrix::from_rows(rows)?)
    }

    pub fn num_tokens(&self) -> usize {
        self.values.rows()
    }

    pub fn num_experts(&self) -> usize {
        self.values.cols()
    }

    pub fn get(&self, t: usize, e: usize) -> f64 {
        self.values.get(t, e)
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.values.row(t)
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[Vec<f64>]) -> Result<TokenBatch> {
        TokenBatch::from_features(Matrix::from_rows(rows)?, 0)
    }

    #[test]
    fn duplicate_origin_rejected_at_construction() {
        let f = Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let o = Origin {
            worker: 0,
            position: 3,
        };
        let err = TokenBatch::new(f, vec![0, 0], vec![o, o]).unwrap_err();
        assert_eq!(
            err,
            Error::DuplicateOrigin {
                worker: 0,
                position: 3
            }
        );
    }

    #[test]
    fn non_finite_features_rejected() {
        assert!(matches!(batch(&[vec![f64::NAN]]), Err(Error::NonFinite(_))));
        assert!(batch(&[vec![1.0, 2.0]]).is_ok());
    }

    #[test]
    fn empty_batch_rejected() {
        assert!(TokenBatch::from_features(Matrix::zeros(0, 3), 0).is_err());
    }

    #[test]
    fn balanced_assignment_checks_counts() {
        assert!(Assignment::balanced(vec![0, 1, 1, 0], 2).is_ok());
        assert_eq!(
            Assignment::balanced(vec![0, 0, 1, 0], 2).unwrap_err(),
            Error::Unbalanced {
                expert: 0,
                count: 3,
                expected: 2
            }
        );
        assert!(matches!(
            Assignment::balanced(vec![0, 1, 0], 2),
            Err(Error::Indivisible { .. })
        ));
        assert!(Assignment::greedy(vec![0, 0, 0], 2).is_ok());
        assert!(matches!(
            Assignment::greedy(vec![2], 2),
            Err(Error::ExpertOutOfRange { .. })
        ));
    }

    #[test]
    fn expert_set_rejects_mismatched_networks() {
        let emb = Matrix::zeros(2, 3);
        let nets = vec![ExpertNetwork::zeros(3, 1), ExpertNetwork::zeros(3, 2)];
        assert!(ExpertSet::new(emb.clone(), nets).is_err());
        let nets = vec![ExpertNetwork::zeros(3, 1), ExpertNetwork::zeros(4, 1)];
        assert!(ExpertSet::new(emb.clone(), nets).is_err());
        let nets = vec![ExpertNetwork::zeros(3, 1); 2];
        assert!(ExpertSet::new(emb, nets).is_ok());
    }

    #[test]
    fn init_is_deterministic() {
        let a = ExpertSet::init(5, 3, 4, 2).unwrap();
        let b = ExpertSet::init(5, 3, 4, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, ExpertSet::init(6, 3, 4, 2).unwrap());
        assert_eq!(a.network(0).blocks[0].ln_gain, vec![1.0; 4]);
    }

    #[test]
    fn flat_params_roundtrip() {
        let set = ExpertSet::init(1, 1, 2, 2).unwrap();
        let net = set.network(0);
        let flat = net.flatten();
        assert_eq!(flat.len(), net.num_params());
        let mut other = net.zeroed_like();
        other.assign_flat(&flat).unwrap();
        assert_eq!(&other, net);
    }
}
