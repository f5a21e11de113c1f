//! Balanced expert routing.
//!
//! A BASE layer routes every token to exactly one expert. During training the
//! token-to-expert assignment is a balanced linear assignment (each expert
//! gets the same number of tokens) solved with an auction algorithm; at test
//! time each token goes to its highest-scoring expert. The expert output is
//! mixed into the residual stream through a sigmoid gate on the token-expert
//! affinity.
//!
//! Modules:
//! - [`types`], [`rng`], [`io`]: shared data types, seeded randomness, file formats
//! - [`assignment`]: balanced auction solver, exact oracle, greedy routing
//! - [`layer`]: expert feedforward stack, gated mixing, analytic gradients
//! - [`routing`]: simulated multi-worker shuffle / assign / all-to-all pipeline
//! - [`trainer`]: toy clustered regression task and shared-norm gradient clipping
//! - [`analysis`]: balance and specialization reports, throughput harness

pub mod analysis;
pub mod assignment;
pub mod error;
pub mod io;
pub mod layer;
pub mod rng;
pub mod routing;
pub mod trainer;
pub mod types;

pub use analysis::{
    balance_report, specialization_table, throughput_report, BalanceMode, BalanceReport,
    SpecializationTable,
};
pub use assignment::{
    assign_greedy, compute_scores, objective_of, solve_balanced, solve_oracle, AssignmentResult,
    AuctionConfig, AuctionSettings,
};
pub use error::{Error, Result};
pub use layer::{
    base_backward, base_forward, expert_forward, expert_transform, LayerGradients, LayerOutput,
};
pub use routing::{route_and_apply, Mode, RoutedOutput, RoutingTrace, WorkerTopology};
pub use trainer::{clip_gradients, train_toy, ClipConfig, SyntheticTask, TrainConfig, TrainingLog};
pub use types::{
    Assignment, AssignmentMode, ExpertNetwork, ExpertSet, FeedForwardBlock, Matrix, Origin,
    ScoreMatrix, TokenBatch,
};
