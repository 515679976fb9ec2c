//! Bin-picking perception for densely piled objects.
//!
//! The pipeline converts a depth capture into a point cloud, strips the bin
//! floor, segments the pile with an octree-accelerated DBSCAN whose border
//! points are assigned by surface-normal agreement, registers a CAD template
//! to every cluster (PCA frames, then point-to-point ICP) and ranks the
//! objects by a grasp risk score.
//!
//! Geometry is generic over [`Real`] (`f32` or `f64`); the aliases at the
//! crate root fix the common double-precision instantiations.

pub mod cloud;
pub mod error;
pub mod features;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod octree;
pub mod pipeline;
pub mod policy;
pub mod preprocess;
pub mod register;
pub mod scalar;
pub mod segment;
pub mod synth;
pub mod transform;

pub use cloud::{apply_transform, centroid, Aabb, PointCloud, NOISE_LABEL};
pub use error::{Error, Result};
pub use geometry::{Mat3, Point3, Vec3};
pub use octree::{LinearScan, NeighborSearch, Octree};
pub use scalar::Real;
pub use transform::RigidTransform;

pub type Vec3d = Vec3<f64>;
pub type Vec3f = Vec3<f32>;
pub type Point3d = Point3<f64>;
pub type Point3f = Point3<f32>;
pub type PointCloud64 = PointCloud<f64>;
pub type PointCloud32 = PointCloud<f32>;
pub type RigidTransform64 = RigidTransform<f64>;
pub type RigidTransform32 = RigidTransform<f32>;
pub type Octree64 = Octree<f64>;
pub type Octree32 = Octree<f32>;
pub type Aabb64 = Aabb<f64>;
