//! Synthetic corpora with planted truth, the cached end-to-end pipeline,
//! evaluation metrics and experiment reports.

pub mod cache;
pub mod config;
pub mod data;
pub mod downstream;
pub mod evaluate;
pub mod pipeline;
pub mod report;
pub mod synthetic;

pub use cache::Cache;
pub use config::{ModeName, PipelineConfig, SourceConfig};
pub use data::{read_downstream_jsonl, DownstreamVideo, ExperimentData, Split};
pub use downstream::{attach_kb, classify_videos, forecast_steps, DownstreamConfig};
pub use evaluate::{evaluate, Metric};
pub use pipeline::{load_source, run_pipeline, run_pipeline_with_cache};
pub use report::{ExperimentReport, MetricSummary, Metrics, ReportFormat};
pub use synthetic::{generate_synthetic, kb_pair_task, order_task, KbPairSpec, OrderTaskSpec, SyntheticSpec};
