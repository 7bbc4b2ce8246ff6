//! Sparse-voxel volumetric neural rendering engine.
//!
//! Converts a semantically labeled block world into view-consistent rendered
//! images: exact grid traversal produces in-voxel ray intervals, a
//! style-conditioned implicit field is evaluated at stratified sample points,
//! and discrete volumetric quadrature composites per-pixel features that a
//! shallow image-space CNN turns into RGB. The whole pipeline is trainable
//! end-to-end with the reverse-mode tape in [`tape`].

pub mod config;
pub mod error;
pub mod fixtures;
pub mod image_refiner;
pub mod label_semantics;
pub mod neural_field;
pub mod params;
pub mod ray_traversal;
pub mod tape;
pub mod trainer;
pub mod volume_renderer;
pub mod voxel_world;

pub use ndarray;

pub use config::Config;
pub use error::{Error, Result};
pub use label_semantics::{AbstractClass, LabelScheme};
pub use params::ParameterStore;
pub use ray_traversal::{Ray, SampleSet, SegmentList};
pub use volume_renderer::{CameraPose, FrameBuffers};
pub use voxel_world::{FeatureTable, VoxelCoord, VoxelWorld};
