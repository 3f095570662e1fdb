//! Traffic experiments, metric records and report files.

pub mod experiments;
pub mod metrics;
pub mod report;

pub use experiments::{
    measure_rtt, run_experiment1, run_experiment2, Exp1Config, Exp2Config, RttConfig, RttSample,
};
pub use metrics::{LinkRow, MetricsRecord, TopicRate};
pub use report::{emit_report, ReportFiles};
