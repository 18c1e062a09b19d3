//! Training, evaluation, multi-seed runs, benchmarks and self-checks.

pub mod bench;
pub mod config;
pub mod optim;
pub mod seeds;
pub mod train;
pub mod verify;

pub use bench::{bench_scaling, BenchConfig, BenchReport};
pub use config::{TaskData, TrainConfig};
pub use seeds::{run_seeds, SeedSummary};
pub use train::{evaluate, train, EvalResult, MetricsRecord, RunOptions, TrainOutcome};
