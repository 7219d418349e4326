//! Differentiable 3D Gaussian splatting with pluggable depth-prior
//! supervision.
//!
//! The crate is `no_std` (it needs `alloc`). Everything here is pure
//! computation: scene geometry, forward rasterization and its analytic
//! backward pass, the Adam-based training loop, a census block-matching
//! stereo matcher, depth-prior providers (self-evolving stereo, sparse SfM
//! depth, affinely aligned dense maps), losses and evaluation metrics, and a
//! ray-traced synthetic scene generator. File formats and the command line
//! live in the `gsdepth` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

mod error;
pub mod math;

pub mod dataset;
pub mod grad;
pub mod image;
pub mod loss;
pub mod optim;
pub mod priors;
pub mod raster;
pub mod scene;
pub mod sh;
pub mod stereo;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

pub use dataset::{Dataset, View};
pub use grad::{backward_render, ParamGrads};
pub use image::{Image, ScalarMap};
pub use loss::{dssim, eval_depth, eval_view_synthesis, total_loss, DepthMetrics, LossBreakdown};
pub use priors::{DepthPrior, PriorCache, PriorProvider, PriorSource};
pub use raster::{project_gaussian_2d, render_frame, RenderedFrame, Splat2D};
pub use scene::{Camera, Gaussian, GaussianCloud, Observation, SparsePoint};
pub use stereo::{compute_disparity, lr_consistency, DisparityMap, StereoParams};
pub use train::{train, TrainConfig, Trainer};
