//! Extrinsic calibration of a multi-LiDAR rig against a master sensor.
//!
//! A slave cloud is aligned to the master in two stages. The rough stage
//! levels both ground planes (pitch, roll, z) and then searches yaw and the
//! horizontal offset. The refinement stage runs point-to-plane ICP with PCA
//! normals and finishes with a coordinate scan that minimises the octree
//! occupancy volume of the merged clouds.
//!
//! Geometry is generic over the scalar type through [`Real`]; the aliases
//! below fix it to `f64` (the default) or `f32`.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod eigen;
pub mod error;
pub mod geometry;
pub mod ground;
pub mod icpn;
pub mod octree;
pub mod pcd;
pub mod pipeline;
pub mod planar;
pub mod report;
pub mod scalar;
pub mod sim;
pub mod spatial;

pub use error::{CalibError, Result};
pub use geometry::{apply, euler_to_transform, rodrigues, transform_to_euler};
pub use ground::{align_ground, fit_ground_plane, verify_ground_side};
pub use icpn::{icpn_refine, IcpnConfig};
pub use octree::{octree_refine, octree_volume, OctreeScanConfig};
pub use pipeline::{calibrate_pair, run_experiment, PipelineConfig};
pub use planar::{remove_ground, search_planar, PlanarSearchConfig};
pub use report::{read_report, write_report, CalibrationReport, FailureReason};
pub use scalar::Real;
pub use sim::{capture, generate_scene, perturb, PerturbationSpec, RigSpec, SceneSpec};
pub use spatial::{estimate_normals, NeighborIndex};

pub type PointCloud = geometry::PointCloud<f64>;
pub type RigidTransform = geometry::RigidTransform<f64>;
pub type EulerPose = geometry::EulerPose<f64>;
pub type Plane = ground::Plane<f64>;

pub type PointCloudF32 = geometry::PointCloud<f32>;
pub type RigidTransformF32 = geometry::RigidTransform<f32>;
pub type EulerPoseF32 = geometry::EulerPose<f32>;
pub type PlaneF32 = ground::Plane<f32>;
