//! RGB-D SLAM built around two scene representations that feed each other:
//! a trainable multi-resolution voxel radiance field used for camera
//! tracking, and an anisotropic Gaussian-splat map seeded from the field's
//! density for fine-grained rendering. The back end adds loop closure,
//! pose-only bundle adjustment, BA-induced map refinement, and submap
//! division/fusion. Everything is verifiable against a ray-traced synthetic
//! oracle.

pub mod error;
pub mod field;
pub mod geometry;
pub mod optim;
pub mod pipeline;
pub mod sampling;
pub mod scene;
pub mod slam;
pub mod splat;

pub use error::Error;
pub type Result<T> = std::result::Result<T, Error>;
