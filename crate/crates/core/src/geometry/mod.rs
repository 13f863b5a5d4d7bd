//! Rigid-body poses, pinhole projection, triangle meshes and raster maps.
//!
//! Conventions used across the whole crate:
//!
//! * Poses are world-from-body: `p_world = R * p_body + t`.
//! * Camera poses are world-from-camera; camera frame is +z forward,
//!   +x right, +y down, matching the pinhole equations
//!   `u = fx * x / z + cx`, `v = fy * y / z + cy`.
//! * Pixel `(i, j)` samples the projected plane at integer coordinates
//!   `(i, j)`; a point projecting to `(50.0, 50.0)` lands on the center of
//!   pixel `(50, 50)`.
//! * All distances are meters, all angles radians.

mod camera;
mod image;
mod mesh;
mod pose;

pub use camera::{PinholeCamera, ProjectError, MIN_PROJECT_DEPTH};
pub use image::{BinaryMask, DepthMap, GrayImage, ImageError, INVALID_DEPTH};
pub use mesh::{box_mesh, Aabb, MeshError, TriMesh};
pub use pose::{
    interpolate_pose, orthonormalize, se3_exp, se3_log, so3_exp, so3_hat, so3_log, Pose6D,
    PoseError,
};
