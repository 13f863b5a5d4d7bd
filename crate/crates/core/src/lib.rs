//! Numerical core for turning tracked hand-object demonstrations into robot
//! end-effector trajectories.

pub mod bundle;
pub mod geometry;
pub mod hand;
pub mod joint_refine;
pub mod losses;
pub mod object_track;
pub mod optim;
pub mod rasterizer;
pub mod retarget;
pub mod scale_align;
pub mod sdf;
mod util;
