//! Benchmark data, ranking metrics, from-scratch evaluation and the
//! experiment suite.

mod data;
mod harness;
mod metrics;
pub mod suite;

pub use data::{
    column_moments, generate_benchmark, BenchmarkSpec, Dataset, SplitDataset, SPLIT_FRACTIONS,
};
pub use harness::{evaluate_params, evaluate_synthetic, train_from_scratch, EvalConfig};
pub use metrics::{auprc, auroc, summarize, MetricReport, MetricSummary};
