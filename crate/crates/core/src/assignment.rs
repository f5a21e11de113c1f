//! Token-to-expert assignment.
//!
//! Training uses a balanced assignment: every expert receives exactly `T/E`
//! tokens and the total token-expert affinity is maximized. [`solve_balanced`]
//! solves it with a forward auction in which each expert owns `T/E` slots,
//! each slot carrying its own price. A bidding token takes the cheapest slot
//! of its best expert and raises that slot's price by the gap between its best
//! and second-best net values plus `epsilon`. The result satisfies
//! epsilon-complementary slackness, so its objective is within `T * epsilon`
//! of the optimum. Prices are warmed up by a few coarser epsilon phases
//! before the final phase runs at the configured epsilon.
//!
//! If the auction has not finished after `max_iterations` bids, the remaining
//! tokens are placed greedily in descending score order, which keeps the
//! assignment exactly balanced.
//!
//! [`solve_oracle`] computes the exact optimum with the Hungarian algorithm on
//! the expert-replicated square problem and is used to check the auction.

use serde::{Deserialize, Serialize, Serializer};
use std::cmp::Ordering;
use std::collections::{BTreeSet, VecDeque};

use crate::error::{Error, Result};
use crate::types::{dot, Assignment, ExpertSet, Matrix, ScoreMatrix, TokenBatch};

/// Largest instance [`solve_oracle`] accepts.
pub const ORACLE_MAX_TOKENS: usize = 512;

const MIN_EPSILON: f64 = 1e-9;
const EPSILON_SCALING: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AuctionConfig {
    epsilon: f64,
    max_iterations: usize,
}

impl AuctionConfig {
    pub fn new(epsilon: f64, max_iterations: usize) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        if max_iterations == 0 {
            return Err(Error::InvalidParameter(
                "max_iterations must be at least 1".into(),
            ));
        }
        Ok(AuctionConfig {
            epsilon,
            max_iterations,
        })
    }

    /// `epsilon = max((max - min) / 2T, 1e-9)` and `max_iterations = 200 T`.
    pub fn for_scores(scores: &ScoreMatrix) -> Self {
        AuctionConfig {
            epsilon: default_epsilon(scores),
            max_iterations: 200 * scores.num_tokens(),
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn max_iterations(&self) -> usize {
        self.max_iterations
    }
}

/// Auction parameters that may be left to the per-instance defaults of
/// [`AuctionConfig::for_scores`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AuctionSettings {
    pub epsilon: Option<f64>,
    pub max_iterations: Option<usize>,
}

impl AuctionSettings {
    pub fn resolve(&self, scores: &ScoreMatrix) -> Result<AuctionConfig> {
        let defaults = AuctionConfig::for_scores(scores);
        AuctionConfig::new(
            self.epsilon.unwrap_or(defaults.epsilon),
            self.max_iterations.unwrap_or(defaults.max_iterations),
        )
    }
}

fn score_range(scores: &ScoreMatrix) -> f64 {
    let (lo, hi) = scores
        .values()
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    hi - lo
}

pub fn default_epsilon(scores: &ScoreMatrix) -> f64 {
    (score_range(scores) / (2.0 * scores.num_tokens() as f64)).max(MIN_EPSILON)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssignmentResult {
    #[serde(serialize_with = "serialize_experts")]
    pub assignment: Assignment,
    pub objective: f64,
    pub iterations_used: usize,
    pub fell_back_to_greedy: bool,
}

fn serialize_experts<S: Serializer>(a: &Assignment, s: S) -> std::result::Result<S::Ok, S::Error> {
    a.expert_of().serialize(s)
}

/// `values[t][e] = features[t] · embeddings[e]`.
pub fn compute_scores(tokens: &TokenBatch, experts: &ExpertSet) -> Result<ScoreMatrix> {
    if tokens.dim() != experts.dim() {
        return Err(Error::DimensionMismatch {
            context: "token features vs expert embeddings",
            expected: experts.dim(),
            found: tokens.dim(),
        });
    }
    let e = experts.num_experts();
    let mut data = Vec::with_capacity(tokens.len() * e);
    for h in tokens.features().iter_rows() {
        data.extend(experts.embeddings().iter_rows().map(|w| dot(h, w)));
    }
    ScoreMatrix::new(Matrix::new(tokens.len(), e, data)?)
}

/// Row-wise argmax, ties to the lowest expert index.
pub fn assign_greedy(scores: &ScoreMatrix) -> Assignment {
    let expert_of = (0..scores.num_tokens())
        .map(|t| {
            let row = scores.row(t);
            let mut best = 0;
            for e in 1..row.len() {
                if row[e] > row[best] {
                    best = e;
                }
            }
            best
        })
        .collect();
    Assignment::greedy(expert_of, scores.num_experts()).expect("argmax indices are in range")
}

/// `Σ_t scores[t][a_t]`.
pub fn objective_of(scores: &ScoreMatrix, assignment: &Assignment) -> Result<f64> {
    if assignment.len() != scores.num_tokens() {
        return Err(Error::DimensionMismatch {
            context: "assignment length",
            expected: scores.num_tokens(),
            found: assignment.len(),
        });
    }
    let mut total = 0.0;
    for (t, &e) in assignment.expert_of().iter().enumerate() {
        if e >= scores.num_experts() {
            return Err(Error::ExpertOutOfRange {
                index: e,
                experts: scores.num_experts(),
            });
        }
        total += scores.get(t, e);
    }
    Ok(total)
}

fn capacity(scores: &ScoreMatrix) -> Result<usize> {
    let (t, e) = (scores.num_tokens(), scores.num_experts());
    if t % e != 0 {
        return Err(Error::Indivisible {
            tokens: t,
            experts: e,
        });
    }
    Ok(t / e)
}

/// Price key with a total order; slot index breaks ties.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Price(f64);

impl Eq for Price {}

impl PartialOrd for Price {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Price {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

struct Auction<'a> {
    scores: &'a ScoreMatrix,
    capacity: usize,
    /// Slot `s` belongs to expert `s / capacity`.
    price: Vec<f64>,
    owner: Vec<Option<usize>>,
    /// Per expert, its slots ordered by (price, slot).
    by_price: Vec<BTreeSet<(Price, usize)>>,
    slot_of: Vec<Option<usize>>,
}

impl<'a> Auction<'a> {
    fn new(scores: &'a ScoreMatrix, capacity: usize) -> Self {
        let e = scores.num_experts();
        let slots = e * capacity;
        let by_price = (0..e)
            .map(|x| {
                (x * capacity..(x + 1) * capacity)
                    .map(|s| (Price(0.0), s))
                    .collect()
            })
            .collect();
        Auction {
            scores,
            capacity,
            price: vec![0.0; slots],
            owner: vec![None; slots],
            by_price,
            slot_of: vec![None; scores.num_tokens()],
        }
    }

    fn clear_assignment(&mut self) {
        self.owner.iter_mut().for_each(|o| *o = None);
        self.slot_of.iter_mut().for_each(|s| *s = None);
    }

    /// One bid by token `t`. Returns the evicted token, if any.
    fn bid(&mut self, t: usize, epsilon: f64) -> Option<usize> {
        let row = self.scores.row(t);
        let mut best: Option<(usize, f64)> = None;
        let mut second = f64::NEG_INFINITY;
        for (e, slots) in self.by_price.iter().enumerate() {
            let (Price(p), _) = *slots.first().expect("every expert has a slot");
            let v = row[e] - p;
            match best {
                Some((_, bv)) if v <= bv => second = second.max(v),
                _ => {
                    if let Some((_, bv)) = best {
                        second = second.max(bv);
                    }
                    best = Some((e, v));
                }
            }
        }
        let (e, best_value) = best.expect("at least one expert");
        let slots = &mut self.by_price[e];
        if let Some(&(Price(p2), _)) = slots.iter().nth(1) {
            second = second.max(row[e] - p2);
        }
        let increment = if second.is_finite() {
            best_value - second + epsilon
        } else {
            epsilon
        };
        let (Price(p1), slot) = slots.pop_first().expect("every expert has a slot");
        let new_price = p1 + increment;
        slots.insert((Price(new_price), slot));
        self.price[slot] = new_price;

        let evicted = self.owner[slot].replace(t);
        if let Some(prev) = evicted {
            self.slot_of[prev] = None;
        }
        self.slot_of[t] = Some(slot);
        evicted
    }

    fn expert_of_slot(&self, slot: usize) -> usize {
        slot / self.capacity
    }
}

/// Balanced assignment maximizing `Σ_t scores[t][a_t]` with exactly `T/E`
/// tokens per expert.
pub fn solve_balanced(scores: &ScoreMatrix, config: &AuctionConfig) -> Result<AssignmentResult> {
    let capacity = capacity(scores)?;
    let t_count = scores.num_tokens();
    let mut auction = Auction::new(scores, capacity);

    let mut phases = Vec::new();
    let mut eps = config.epsilon;
    let start = score_range(scores) / 2.0;
    while eps < start {
        phases.push(eps);
        eps *= EPSILON_SCALING;
    }
    phases.push(config.epsilon);
    phases.sort_by(|a, b| b.total_cmp(a));
    phases.dedup();

    let mut iterations = 0;
    let mut fell_back = false;
    'phases: for (i, &eps) in phases.iter().enumerate() {
        if i > 0 {
            auction.clear_assignment();
        }
        let mut queue: VecDeque<usize> = (0..t_count).collect();
        while let Some(t) = queue.pop_front() {
            if iterations >= config.max_iterations {
                fell_back = true;
                break 'phases;
            }
            iterations += 1;
            if let Some(evicted) = auction.bid(t, eps) {
                queue.push_back(evicted);
            }
        }
    }

    let mut expert_of: Vec<Option<usize>> = auction
        .slot_of
        .iter()
        .map(|s| s.map(|s| auction.expert_of_slot(s)))
        .collect();
    if fell_back {
        greedy_fill(scores, capacity, &mut expert_of);
    }
    let expert_of: Vec<usize> = expert_of
        .into_iter()
        .map(|e| e.expect("every token is placed"))
        .collect();
    let assignment = Assignment::balanced(expert_of, scores.num_experts())?;
    let objective = objective_of(scores, &assignment)?;
    Ok(AssignmentResult {
        assignment,
        objective,
        iterations_used: iterations,
        fell_back_to_greedy: fell_back,
    })
}

/// Places unassigned tokens by descending score, ties by (token, expert),
/// into experts with remaining capacity.
fn greedy_fill(scores: &ScoreMatrix, capacity: usize, expert_of: &mut [Option<usize>]) {
    let mut load = vec![0usize; scores.num_experts()];
    for e in expert_of.iter().flatten() {
        load[*e] += 1;
    }
    let mut pairs: Vec<(usize, usize)> = expert_of
        .iter()
        .enumerate()
        .filter(|(_, e)| e.is_none())
        .flat_map(|(t, _)| (0..scores.num_experts()).map(move |e| (t, e)))
        .collect();
    pairs.sort_by(|&(t1, e1), &(t2, e2)| {
        scores
            .get(t2, e2)
            .total_cmp(&scores.get(t1, e1))
            .then((t1, e1).cmp(&(t2, e2)))
    });
    for (t, e) in pairs {
        if expert_of[t].is_none() && load[e] < capacity {
            expert_of[t] = Some(e);
            load[e] += 1;
        }
    }
}

/// Exact optimum of the balanced problem, for instances up to
/// [`ORACLE_MAX_TOKENS`] tokens.
///
/// Each expert column is replicated `T/E` times and the resulting square
/// problem is solved with the Hungarian algorithm.
pub fn solve_oracle(scores: &ScoreMatrix) -> Result<AssignmentResult> {
    let capacity = capacity(scores)?;
    let n = scores.num_tokens();
    if n > ORACLE_MAX_TOKENS {
        return Err(Error::TooLarge {
            tokens: n,
            limit: ORACLE_MAX_TOKENS,
        });
    }
    let cost = |t: usize, slot: usize| -scores.get(t, slot / capacity);
    let slot_of = hungarian_min(n, cost);
    let expert_of = slot_of.into_iter().map(|s| s / capacity).collect();
    let assignment = Assignment::balanced(expert_of, scores.num_experts())?;
    let objective = objective_of(scores, &assignment)?;
    Ok(AssignmentResult {
        assignment,
        objective,
        iterations_used: 0,
        fell_back_to_greedy: false,
    })
}

/// Minimum-cost perfect matching on an `n × n` cost function, O(n³).
/// Returns the column matched to each row.
fn hungarian_min(n: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    // 1-based potentials; column 0 is a virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=n {
        col_of_row[row_of_col[j] - 1] = j - 1;
    }
    col_of_row
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::types::{ExpertNetwork, Origin};
    use proptest::prelude::*;
    use rand::Rng as _;

    fn scores(rows: &[Vec<f64>]) -> ScoreMatrix {
        ScoreMatrix::from_rows(rows).unwrap()
    }

    fn random_scores(seed: u64, t: usize, e: usize) -> ScoreMatrix {
        let mut r = rng::seeded_rng(seed);
        ScoreMatrix::new(Matrix::random_normal(t, e, 1.0, &mut r)).unwrap()
    }

    /// Exhaustive search over balanced assignments.
    fn brute_force_optimum(s: &ScoreMatrix) -> f64 {
        fn go(s: &ScoreMatrix, t: usize, load: &mut [usize], cap: usize, acc: f64, best: &mut f64) {
            if t == s.num_tokens() {
                *best = best.max(acc);
                return;
            }
            for e in 0..s.num_experts() {
                if load[e] < cap {
                    load[e] += 1;
                    go(s, t + 1, load, cap, acc + s.get(t, e), best);
                    load[e] -= 1;
                }
            }
        }
        let cap = s.num_tokens() / s.num_experts();
        let mut best = f64::NEG_INFINITY;
        go(s, 0, &mut vec![0; s.num_experts()], cap, 0.0, &mut best);
        best
    }

    fn batch(rows: &[Vec<f64>]) -> TokenBatch {
        TokenBatch::from_features(Matrix::from_rows(rows).unwrap(), 0).unwrap()
    }

    fn experts(rows: &[Vec<f64>]) -> ExpertSet {
        let d = rows[0].len();
        ExpertSet::new(
            Matrix::from_rows(rows).unwrap(),
            vec![ExpertNetwork::zeros(d, 1); rows.len()],
        )
        .unwrap()
    }

    #[test]
    fn identity_features_give_identity_scores() {
        let eye: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..3).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let s = compute_scores(&batch(&eye), &experts(&eye)).unwrap();
        assert_eq!(s.values(), &Matrix::from_rows(&eye).unwrap());
    }

    #[test]
    fn zero_features_give_zero_scores() {
        let s = compute_scores(
            &batch(&vec![vec![0.0; 2]; 3]),
            &experts(&[vec![1.0, 2.0], vec![-3.0, 4.0]]),
        )
        .unwrap();
        assert!(s.values().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scores_match_naive_dot_products() {
        let mut r = rng::seeded_rng(7);
        let f = Matrix::random_normal(4, 3, 1.0, &mut r);
        let w = Matrix::random_normal(2, 3, 1.0, &mut r);
        let tokens = TokenBatch::from_features(f.clone(), 0).unwrap();
        let set = ExpertSet::new(w.clone(), vec![ExpertNetwork::zeros(3, 1); 2]).unwrap();
        let s = compute_scores(&tokens, &set).unwrap();
        for t in 0..4 {
            for e in 0..2 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += f.get(t, k) * w.get(e, k);
                }
                assert_eq!(s.get(t, e), acc);
            }
        }
    }

    #[test]
    fn dimension_mismatch_reports_both() {
        let err = compute_scores(&batch(&[vec![1.0, 2.0]]), &experts(&[vec![1.0, 2.0, 3.0]]))
            .unwrap_err();
        assert_eq!(
            err,
            Error::DimensionMismatch {
                context: "token features vs expert embeddings",
                expected: 3,
                found: 2
            }
        );
        assert!(err.to_string().contains('3') && err.to_string().contains('2'));
    }

    #[test]
    fn unique_optimum() {
        let s = scores(&[vec![10.0, 0.0], vec![0.0, 10.0]]);
        let r = solve_balanced(&s, &AuctionConfig::for_scores(&s)).unwrap();
        assert_eq!(r.assignment.expert_of(), &[0, 1]);
        assert_eq!(r.objective, 20.0);
        assert!(!r.fell_back_to_greedy);
    }

    #[test]
    fn balanced_beats_greedy_stranding() {
        let s = scores(&[vec![10.0, 9.0], vec![10.0, 0.0]]);
        // the other balanced assignment, [0, 1], scores 10 + 0
        assert_eq!(brute_force_optimum(&s), 19.0);
        let r = solve_balanced(&s, &AuctionConfig::for_scores(&s)).unwrap();
        assert_eq!(r.assignment.expert_of(), &[1, 0]);
        assert_eq!(r.objective, 19.0);
        let o = solve_oracle(&s).unwrap();
        assert_eq!(o.objective, 19.0);
        assert_eq!(o.assignment, r.assignment);
    }

    #[test]
    fn eight_tokens_four_experts_within_bound_of_enumeration() {
        for seed in 0..20 {
            let s = random_scores(seed, 8, 4);
            let cfg = AuctionConfig::for_scores(&s);
            let r = solve_balanced(&s, &cfg).unwrap();
            assert!(!r.fell_back_to_greedy);
            let best = brute_force_optimum(&s);
            assert!(r.objective >= best - 8.0 * cfg.epsilon() - 1e-12);
            assert!((solve_oracle(&s).unwrap().objective - best).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_indivisible_and_oversized() {
        let s = scores(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![0.0, 0.0]]);
        let cfg = AuctionConfig::new(0.1, 10).unwrap();
        assert!(matches!(
            solve_balanced(&s, &cfg),
            Err(Error::Indivisible {
                tokens: 3,
                experts: 2
            })
        ));
        assert!(matches!(solve_oracle(&s), Err(Error::Indivisible { .. })));
        let big = ScoreMatrix::new(Matrix::zeros(ORACLE_MAX_TOKENS + 2, 2)).unwrap();
        assert!(matches!(solve_oracle(&big), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn non_finite_scores_rejected() {
        assert!(ScoreMatrix::from_rows(&[vec![1.0, f64::INFINITY]]).is_err());
    }

    #[test]
    fn config_validation_and_defaults() {
        assert!(AuctionConfig::new(0.0, 1).is_err());
        assert!(AuctionConfig::new(1.0, 0).is_err());
        let s = scores(&[vec![0.0, 4.0], vec![1.0, 2.0]]);
        let cfg = AuctionConfig::for_scores(&s);
        assert_eq!(cfg.epsilon(), 1.0);
        assert_eq!(cfg.max_iterations(), 400);
        let flat = scores(&vec![vec![3.0; 2]; 2]);
        assert_eq!(AuctionConfig::for_scores(&flat).epsilon(), 1e-9);
    }

    #[test]
    fn oracle_identity() {
        let n = 5;
        let eye: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let r = solve_oracle(&scores(&eye)).unwrap();
        assert_eq!(r.assignment.expert_of(), &[0, 1, 2, 3, 4]);
        assert_eq!(r.objective, 5.0);
    }

    #[test]
    fn all_equal_scores_terminate() {
        for (t, e) in [(4, 4), (8, 4), (6, 1), (1, 1)] {
            let s = ScoreMatrix::new(Matrix::new(t, e, vec![2.5; t * e]).unwrap()).unwrap();
            let r = solve_balanced(&s, &AuctionConfig::for_scores(&s)).unwrap();
            assert!(!r.fell_back_to_greedy);
            assert_eq!(r.objective, 2.5 * t as f64);
        }
    }

    #[test]
    fn fallback_stays_balanced() {
        let s = random_scores(3, 16, 4);
        let cfg = AuctionConfig::new(1e-6, 5).unwrap();
        let r = solve_balanced(&s, &cfg).unwrap();
        assert!(r.fell_back_to_greedy);
        assert_eq!(r.iterations_used, 5);
        assert_eq!(r.assignment.counts(), vec![4; 4]);
    }

    #[test]
    fn greedy_fallback_from_scratch_orders_by_score() {
        // One bid: token 0 takes expert 1. Fill order: (2,1)=9, (1,0)=8,
        // then (3,1)=6 is blocked because expert 1 is full, leaving (3,0).
        let s = scores(&[
            vec![1.0, 5.0],
            vec![8.0, 0.0],
            vec![7.0, 9.0],
            vec![0.0, 6.0],
        ]);
        let r = solve_balanced(&s, &AuctionConfig::new(0.5, 1).unwrap()).unwrap();
        assert!(r.fell_back_to_greedy);
        assert_eq!(r.assignment.expert_of(), &[1, 0, 1, 0]);
    }

    #[test]
    fn greedy_rows_and_ties() {
        assert_eq!(
            assign_greedy(&scores(&[vec![1.0, 2.0], vec![3.0, 0.0]])).expert_of(),
            &[1, 0]
        );
        assert_eq!(
            assign_greedy(&scores(&vec![vec![0.5; 4]; 3])).expert_of(),
            &[0, 0, 0]
        );
    }

    #[test]
    fn greedy_matches_row_max_scan() {
        let s = random_scores(11, 100, 8);
        let a = assign_greedy(&s);
        for t in 0..100 {
            let row = s.row(t);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let first = row.iter().position(|&v| v == max).unwrap();
            assert_eq!(a.expert_of()[t], first);
        }
    }

    #[test]
    fn objective_cases() {
        let eye = scores(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(
            objective_of(&eye, &Assignment::balanced(vec![0, 1], 2).unwrap()).unwrap(),
            2.0
        );
        let zero = ScoreMatrix::new(Matrix::zeros(2, 2)).unwrap();
        assert_eq!(
            objective_of(&zero, &Assignment::greedy(vec![1, 1], 2).unwrap()).unwrap(),
            0.0
        );
        let s = random_scores(4, 6, 3);
        let a = Assignment::greedy(vec![2, 0, 1, 1, 0, 2], 3).unwrap();
        let mut acc = 0.0;
        for (t, e) in [2, 0, 1, 1, 0, 2].iter().enumerate() {
            acc += s.values().data()[t * 3 + e];
        }
        assert_eq!(objective_of(&s, &a).unwrap(), acc);
        let wide = Assignment::greedy(vec![4, 0, 0, 0, 0, 0], 5).unwrap();
        assert!(matches!(
            objective_of(&s, &wide),
            Err(Error::ExpertOutOfRange { .. })
        ));
        let short = Assignment::greedy(vec![0], 3).unwrap();
        assert!(objective_of(&s, &short).is_err());
    }

    #[test]
    fn origins_are_independent_of_scores() {
        // compute_scores only reads features
        let f = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let a = TokenBatch::new(
            f.clone(),
            vec![3],
            vec![Origin {
                worker: 5,
                position: 9,
            }],
        )
        .unwrap();
        let b = TokenBatch::from_features(f, 0).unwrap();
        let set = experts(&[vec![0.5, -1.0]]);
        assert_eq!(
            compute_scores(&a, &set).unwrap(),
            compute_scores(&b, &set).unwrap()
        );
    }

    fn instance() -> impl Strategy<Value = (u64, usize, usize)> {
        (
            any::<u64>(),
            prop::sample::select(vec![1usize, 2, 4]),
            1usize..=4,
        )
            .prop_map(|(seed, e, k)| (seed, e * k, e))
    }

    proptest! {
        #[test]
        fn balance_holds(seed in any::<u64>(), e in 1usize..6, k in 1usize..6, max_it in 1usize..200) {
            let s = random_scores(seed, e * k, e);
            let cfg = AuctionConfig::new(default_epsilon(&s), max_it).unwrap();
            let r = solve_balanced(&s, &cfg).unwrap();
            prop_assert_eq!(r.assignment.counts(), vec![k; e]);
            prop_assert_eq!(r.objective, objective_of(&s, &r.assignment).unwrap());
        }

        #[test]
        fn epsilon_optimal_against_oracle((seed, t, e) in instance()) {
            let s = random_scores(seed, t, e);
            let cfg = AuctionConfig::for_scores(&s);
            let r = solve_balanced(&s, &cfg).unwrap();
            let o = solve_oracle(&s).unwrap();
            prop_assert!(o.objective >= r.objective - 1e-9);
            if !r.fell_back_to_greedy {
                prop_assert!(r.objective >= o.objective - t as f64 * cfg.epsilon() - 1e-9);
            }
        }

        #[test]
        fn greedy_row_shift_invariant(seed in any::<u64>(), shifts in prop::collection::vec(-50.0f64..50.0, 10)) {
            let s = random_scores(seed, 10, 5);
            let mut shifted = s.values().clone();
            for (t, c) in shifts.iter().enumerate() {
                shifted.row_mut(t).iter_mut().for_each(|v| *v += c);
            }
            let shifted = ScoreMatrix::new(shifted).unwrap();
            prop_assert_eq!(assign_greedy(&s), assign_greedy(&shifted));
        }

        #[test]
        fn permutation_equivariant(seed in any::<u64>(), perm_seed in any::<u64>()) {
            // A small epsilon makes the auction land on the (almost surely unique) optimum.
            let s = random_scores(seed, 12, 3);
            let mut order: Vec<usize> = (0..12).collect();
            let mut r = rng::seeded_rng(perm_seed);
            for i in (1..12).rev() {
                order.swap(i, r.random_range(0..=i));
            }
            let permuted = ScoreMatrix::new(s.values().select_rows(&order)).unwrap();
            let cfg = AuctionConfig::new(1e-7, 1_000_000).unwrap();
            let a = solve_balanced(&s, &cfg).unwrap();
            let b = solve_balanced(&permuted, &cfg).unwrap();
            for (i, &src) in order.iter().enumerate() {
                prop_assert_eq!(b.assignment.expert_of()[i], a.assignment.expert_of()[src]);
            }
        }

        #[test]
        fn deterministic(seed in any::<u64>()) {
            let s = random_scores(seed, 16, 4);
            let cfg = AuctionConfig::for_scores(&s);
            prop_assert_eq!(solve_balanced(&s, &cfg).unwrap(), solve_balanced(&s, &cfg).unwrap());
        }
    }
}
