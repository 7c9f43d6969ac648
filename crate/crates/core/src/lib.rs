//! Layout-aware diffusion sampling: per-object noise estimation, masked
//! cross-attention and crop-and-merge noise compositing.
//!
//! Two estimator backends are provided. The analytic backend predicts the
//! noise exactly for per-pixel Gaussian targets, which makes sampled
//! statistics checkable in closed form. The UNet backend is a small
//! forward-only cross-attention network used to exercise the masked
//! attention path.

pub mod attention;
pub mod cli;
pub mod collage;
pub mod error;
pub mod estimators;
pub mod eval;
pub mod geometry;
pub mod numerics;
pub mod pnm;
pub mod rng;
pub mod sampler;
pub mod scene;
pub mod scheduler;

pub use collage::{merge_noises, MergeConfig};
pub use error::{Error, Result};
pub use estimators::{AnalyticTarget, Condition, HintMap};
pub use geometry::{rasterize, Mask, RegionSpec};
pub use numerics::Tensor;
pub use sampler::{
    generate, generate_parallel, generate_with, Backend, RunReport, SceneObject, SceneSpec,
};
pub use scene::SceneFile;
pub use scheduler::{make_schedule, GuidanceConfig, NoiseSchedule, StepKind};
