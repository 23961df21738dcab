//! Training-free semantic and panoptic voxel occupancy from per-view depth,
//! confidence and open-vocabulary label priors.
//!
//! The flow for one sample is ingest, lift, window fusion, instance
//! identification, voxelization and refinement; [`pipeline`] wires the stages
//! together and [`metrics`] scores the resulting grids.

// `!(a <= b)` style guards are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod grid;
pub mod ingest;
pub mod instances;
pub mod lift;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod refine;
pub mod synth;
pub mod taxonomy;
pub mod voxelize;

pub use nalgebra;

pub use grid::{GridSpec, OccupancyGrid};
pub use ingest::{CameraId, Dataset, FrameIndex};
pub use lift::{LabeledPoint, LabeledPointCloud, WindowMode};
pub use pipeline::{evaluate_dirs, run_pipeline, PipelineConfig, RunOptions};
pub use taxonomy::{ClassId, Taxonomy};
