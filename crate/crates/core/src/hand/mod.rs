//! Hand kinematics and two-stage hand refinement.
//!
//! `model` owns the forward pass (parameters to mesh plus named
//! keypoints), `refine` fits per-frame parameters to 2D keypoint tracks
//! and depth observations.

mod model;
mod refine;

pub use model::{
    hand_forward, HandError, HandKeypoints, HandOutput, HandParams, JOINT_COUNT, JOINT_LIMITS,
    JOINT_LIMIT_SLACK, KEYPOINT_NAMES, SHAPE_COUNT, TIP_RADIUS,
};
pub use refine::{
    hand_init_from_observations, refine_hand_coarse, refine_hand_fine, HandRefineError,
    RefineOutcome,
};
pub(crate) use refine::{clamp_theta, keypoint_reprojection};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Detected 2D keypoints for one frame. A keypoint absent from the map is
/// missing (out of frame or undetected) and contributes nothing to the
/// reprojection objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HandObservation {
    pub keypoints: BTreeMap<String, [f64; 2]>,
    /// Detector-side joint angle estimate used as the fine-stage prior.
    #[serde(default)]
    pub theta_prior: Vec<f64>,
}

impl HandObservation {
    pub fn keypoint(&self, name: &str) -> Option<Vector2<f64>> {
        self.keypoints.get(name).map(|p| Vector2::new(p[0], p[1]))
    }
}

/// One JSON object per line, one line per frame.
pub fn write_hand_params_jsonl(path: &Path, frames: &[HandParams]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in frames {
        serde_json::to_writer(&mut f, p)?;
        f.write_all(b"\n")?;
    }
    f.flush()
}

pub fn read_hand_params_jsonl(path: &Path) -> std::io::Result<Vec<HandParams>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
