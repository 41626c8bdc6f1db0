//! Desk-scale experiment harness: procedural hand template, synthetic data,
//! the assembled network, training, evaluation and file export.

pub mod config;
pub mod export;
pub mod metrics;
pub mod model;
pub mod raster;
pub mod synth;
pub mod template;
pub mod train;

pub use config::{AugmentConfig, DataConfig, LrSchedule, RunConfig, SynthConfig};
pub use export::{export_metrics, export_obj};
pub use metrics::{compute_metrics, pck_auc, pck_curve, pck_thresholds, procrustes_align, Alignment, EvalResult, Metrics, MetricsSummary, PckSpace};
pub use model::{resolve_topology, Batch, HandMeshModel, ModelOutput, Prediction};
pub use raster::rasterize_mesh;
pub use synth::{gen_synthetic_dataset, load_dataset, load_sample, read_pgm, write_pgm, Dataset, Sample};
pub use template::{HandPose, HandTemplate};
pub use train::{evaluate, load_run, train, LoadedRun, StepRecord, TrainReport};
