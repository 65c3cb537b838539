//! A software model of an explicit-data-reuse neural rendering pipeline.
//!
//! Scenes are occupancy-grid radiance fields: a four-tier occupancy
//! hierarchy (coarse, fine, leaf, micro), INT4 vertex features stored per
//! fine voxel, and one tiny INT8 MLP per coarse voxel. Rays are generated in
//! Z-order and marched as four-ray packets through the hierarchy; a
//! scheduler (lag-first selection, coarse-voxel reorder buffer, out-of-order
//! sample issue) feeds an instrumented memory model so data-reuse effects can
//! be measured against naive baselines. An independent per-pixel reference
//! renderer serves as the correctness oracle.

pub mod hrm;
pub mod image;
pub mod math;
pub mod memory;
pub mod pipeline;
pub mod ray;
pub mod reference;
pub mod scene;
pub mod sched;
pub mod shading;

pub use image::RgbImage;
pub use pipeline::{render, PipelineConfig, RenderResult};
pub use ray::Camera;
pub use scene::{Scene, SceneSpec};
