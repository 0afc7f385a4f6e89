//! Expert trajectory generation and supervised dataset assembly.

mod dataset;
mod expert;
mod slice;

pub use dataset::{
    build_dataset, meta_path_for, validate_sample, Dataset, DatasetConfig, DatasetMeta,
};
pub use expert::{build_trajectory, plan_expert_path, Trajectory};
pub use slice::{
    context_indices, denormalize_actions, slice_samples, ReplayInfo, SliceParams, TrainingSample,
};
