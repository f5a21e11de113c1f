//! Benchmark fixtures.

use baselayer::rng::derived_rng;
use baselayer::rng::streams;
use baselayer::{ExpertSet, Matrix, ScoreMatrix, TokenBatch};

/// Standard-normal `tokens × experts` scores.
pub fn random_scores(tokens: usize, experts: usize, seed: u64) -> ScoreMatrix {
    let mut r = derived_rng(seed, streams::DATA);
    ScoreMatrix::new(Matrix::random_normal(tokens, experts, 1.0, &mut r)).expect("finite scores")
}

/// One batch per worker plus a freshly initialized expert set.
pub fn routing_fixture(
    experts: usize,
    tokens_per_worker: usize,
    dim: usize,
    blocks: usize,
) -> (Vec<TokenBatch>, ExpertSet) {
    let set = ExpertSet::init(0, experts, dim, blocks).expect("valid sizes");
    let mut r = derived_rng(0, streams::DATA);
    let batches = (0..experts)
        .map(|w| {
            TokenBatch::from_features(
                Matrix::random_normal(tokens_per_worker, dim, 1.0, &mut r),
                w,
            )
            .expect("valid batch")
        })
        .collect();
    (batches, set)
}
