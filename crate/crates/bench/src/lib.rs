//! Load-step benchmark harness for the gateway.
//!
//! A [`BenchPlan`] names one target operation, a list of load steps and a
//! repeat count. Each repeat of a step issues `n` requests and is timed end
//! to end; [`metrics`] turns the repeats into mean, standard deviation,
//! throughput and coefficient of variation.

mod client;
pub mod metrics;
pub mod plan;
pub mod report;
pub mod runner;

pub use metrics::{compute_metrics, summarize, MetricsError, MetricsSummary, TimingSample};
pub use plan::{parse_steps, BenchPlan, PlanError, Target};
pub use report::emit_csv;
pub use runner::{run_bench, BenchError, BenchResults};
