//! Training orchestration: source pretraining, offline and streaming
//! target adaptation, the dense-map variant, evaluation, metrics, and run
//! configuration.

pub mod adapt;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod pretrain;
pub mod seg;

pub use adapt::{adapt, adapt_online, AdaptOutcome};
pub use config::RunConfig;
pub use eval::{evaluate, Evaluation};
pub use metrics::{format_metric, write_metrics_csv, MetricsRecord, CSV_HEADER};
pub use pretrain::{pretrain, PretrainOutcome};
pub use seg::adapt_segmentation;
