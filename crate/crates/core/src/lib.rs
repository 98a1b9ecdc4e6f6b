//! Volumetric shape refinement and texture weaving on dense voxel grids.
//!
//! The pipeline converts a coarse triangle mesh into a signed distance field,
//! fuses per-view normal maps into a target normal field, refines the field
//! with gradient descent, and finally bakes a volumetric color field by
//! projecting (inpainted) views one after another.
//!
//! Inner loops run on rayon when the `parallel` feature is enabled (the
//! default); every reduction uses a fixed partition so outputs are bitwise
//! identical for any thread count, including the sequential build.

pub mod camera;
pub mod coarse;
pub mod error;
pub mod exec;
pub mod fusion;
pub mod gateway;
pub mod grid;
pub mod mesh;
pub mod opt;
pub mod raster;
pub mod texture;
pub mod trace;

pub use camera::{orbit_camera, Camera};
pub use error::{Error, Result};
pub use grid::{ColorGrid3, ColorVoxel, Grid3, GridHeader, NormalVoxel, ScalarGrid3, VectorGrid3};
pub use mesh::TriMesh;
pub use raster::Raster;
pub use trace::ViewRender;
