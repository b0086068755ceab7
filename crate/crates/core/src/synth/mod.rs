//! Synthetic segmentation benchmark: large blobs against thin structures,
//! plus the confusion-matrix metrics and on-disk dataset format.

mod dataset;
mod metrics;
mod scene;

pub use dataset::{load_dataset, save_dataset, DatasetIndex};
pub use metrics::EvalReport;
pub use scene::{class_shares, generate, generate_one, stack_batch, SceneSpec, SegSample};
