//! Segmentation-guided PatchMatch multi-view stereo.
//!
//! Per-view depth and normal maps are estimated with checkerboard PatchMatch
//! over plane hypotheses. Instance label maps deform the matching windows
//! and the propagation pattern, every pyramid level is optimized jointly,
//! normals are refined by rotations on the unit sphere, and the cost
//! weights are re-fitted between iterations on feature-anchored pixels.
//! Finished maps are fused into a point cloud.
//!
//! ```no_run
//! use segmvs_core::{synth, Config, Reconstruction};
//!
//! let scene = synth::generate(synth::Preset::ThreePlanes, 0);
//! let mut rec = Reconstruction::new(scene.view_inputs(true), scene.depth_range, Config::synthetic()).unwrap();
//! rec.run();
//! let maps = rec.depth_maps();
//! let metrics = synth::score(&maps, &scene.gt_depth_maps(), &synth::DEFAULT_THRESHOLDS).unwrap();
//! println!("{metrics:?}");
//! ```

// `!(x > 0.0)` is used on purpose so NaN falls into the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod cost;
pub mod emopt;
pub mod error;
pub mod geometry;
pub mod imaging;
pub mod io;
pub mod pipeline;
pub mod propagation;
pub mod refinement;
pub mod segmentation;
pub mod synth;

pub use config::{Ablation, Config};
pub use cost::{CostComponents, Hyperparameters};
pub use error::{Error, Result};
pub use geometry::{CameraModel, HypothesisMap, PlaneHypothesis};
pub use imaging::{ImageGrid, ScalePyramid};
pub use pipeline::{fuse, DepthMap, FuseParams, FuseView, FusedPointCloud, Reconstruction, ViewInput};
pub use segmentation::{BoundaryDistances, DeformedPatch, InstanceLabelMap, PropagationPattern};
