//! Annotation engine for equirectangular (360°) video: run-length masks on a
//! wrapping grid, panorama geometry, model backends, labeling agents, the
//! initial and refinement phases, a durable store and VOS metrics.

pub mod agents;
pub mod annotation;
pub mod backend;
pub mod geometry;
pub mod mask;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod scene;
pub mod sdr;
pub mod store;
pub mod textio;
mod union_find;

pub use union_find::UnionFind;
