//! Scalar objective terms shared by every refinement stage.
//!
//! All losses are pure functions, non-negative, and exactly zero at their
//! declared zero case. Window-gated terms (contact, resting) treat the
//! contact window as the closed interval [t_s, t_e]. Analytic gradients are
//! provided for the funnel, smoothness, contact and pose-regularization
//! terms; everything else is differentiated by finite differences in the
//! optimizer.

mod features;

pub use features::{FeatureExtractor, HogExtractor};

use crate::geometry::{so3_log, BinaryMask, DepthMap, GrayImage, Pose6D};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("funnel weights sum to {0}, expected 1 within 1e-9")]
    WeightSumViolation(f64),
}

/// Term weights for every composite objective; all non-negative.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_mask: f64,
    pub lambda_depth: f64,
    pub lambda_feature: f64,
    pub lambda_mask_obj: f64,
    pub lambda_depth_obj: f64,
    pub lambda_contact: f64,
    pub lambda_collision: f64,
    pub lambda_stable_grasp: f64,
    pub lambda_scene: f64,
    pub lambda_rest: f64,
    pub lambda_2d: f64,
    pub lambda_hand_pose: f64,
    pub lambda_funnel: f64,
    pub lambda_smooth: f64,
    pub lambda_width: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_mask: 1.0,
            lambda_depth: 10.0,
            lambda_feature: 0.5,
            lambda_mask_obj: 1.0,
            lambda_depth_obj: 10.0,
            lambda_contact: 10.0,
            lambda_collision: 100.0,
            lambda_stable_grasp: 1.0,
            lambda_scene: 100.0,
            lambda_rest: 10.0,
            lambda_2d: 0.01,
            lambda_hand_pose: 0.1,
            lambda_funnel: 1.0,
            lambda_smooth: 0.1,
            lambda_width: 0.01,
        }
    }
}

fn check_dims(aw: usize, ah: usize, bw: usize, bh: usize) -> Result<(), LossError> {
    if (aw, ah) != (bw, bh) {
        return Err(LossError::DimensionMismatch(aw, ah, bw, bh));
    }
    Ok(())
}

/// Occlusion-aware silhouette discrepancy: mean absolute mask difference
/// over pixels not covered by the occluder.
pub fn mask_loss(
    rendered: &BinaryMask,
    predicted: &BinaryMask,
    occluder: &BinaryMask,
) -> Result<f64, LossError> {
    check_dims(rendered.width, rendered.height, predicted.width, predicted.height)?;
    check_dims(rendered.width, rendered.height, occluder.width, occluder.height)?;
    let mut sum = 0.0;
    for y in 0..rendered.height {
        for x in 0..rendered.width {
            if occluder.get(x, y) == 0 {
                sum += (rendered.get(x, y) as f64 - predicted.get(x, y) as f64).abs();
            }
        }
    }
    Ok(sum / (rendered.width * rendered.height) as f64)
}

/// Mean squared depth error over pixels valid in both maps and outside the
/// occluder; 0 when no pixel qualifies.
pub fn depth_loss(
    rendered: &DepthMap,
    predicted: &DepthMap,
    occluder: &BinaryMask,
) -> Result<f64, LossError> {
    check_dims(rendered.width, rendered.height, predicted.width, predicted.height)?;
    check_dims(rendered.width, rendered.height, occluder.width, occluder.height)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..rendered.height {
        for x in 0..rendered.width {
            if occluder.get(x, y) == 0 && rendered.is_valid(x, y) && predicted.is_valid(x, y) {
                let d = rendered.get(x, y) - predicted.get(x, y);
                sum += d * d;
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Mean per-patch cosine mismatch, (1/P) sum (1 - cos). A featureless
/// patch (zero-norm descriptor, e.g. flat image content) counts as
/// identical to another featureless patch and as a full mismatch (1)
/// against any patch with features, so identical images always score 0.
pub fn feature_loss(
    rendered: &GrayImage,
    observed: &GrayImage,
    extractor: &dyn FeatureExtractor,
) -> f64 {
    let fa = extractor.patch_features(rendered);
    let fb = extractor.patch_features(observed);
    debug_assert_eq!(fa.len(), fb.len());
    let p = fa.len().min(fb.len());
    if p == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for (a, b) in fa.iter().zip(fb.iter()) {
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 && nb == 0.0 {
            continue;
        }
        if na == 0.0 || nb == 0.0 {
            sum += 1.0;
            continue;
        }
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        sum += 1.0 - dot / (na * nb);
    }
    sum / p as f64
}

fn in_window(t: usize, window: (usize, usize)) -> bool {
    t >= window.0 && t <= window.1
}

/// Inside the contact window, each tip vertex is pulled to its nearest
/// object vertex (squared distance); outside the window the term is
/// exactly 0.
pub fn contact_loss(
    tip_vertices: &[Vector3<f64>],
    object_vertices: &[Vector3<f64>],
    t: usize,
    window: (usize, usize),
) -> f64 {
    if !in_window(t, window) || object_vertices.is_empty() {
        return 0.0;
    }
    tip_vertices
        .iter()
        .map(|v| {
            object_vertices
                .iter()
                .map(|o| (v - o).norm_squared())
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// d/dv of `contact_loss` per tip vertex: 2(v - o*) toward the nearest
/// object vertex (a subgradient at nearest-neighbor ties).
pub fn contact_loss_gradient(
    tip_vertices: &[Vector3<f64>],
    object_vertices: &[Vector3<f64>],
    t: usize,
    window: (usize, usize),
) -> Vec<Vector3<f64>> {
    if !in_window(t, window) || object_vertices.is_empty() {
        return vec![Vector3::zeros(); tip_vertices.len()];
    }
    tip_vertices
        .iter()
        .map(|v| {
            let nearest = object_vertices
                .iter()
                .min_by(|a, b| {
                    (v - *a).norm_squared().partial_cmp(&(v - *b).norm_squared()).unwrap()
                })
                .unwrap();
            2.0 * (v - nearest)
        })
        .collect()
}

/// Caps keeping the stable-grasp pair sums tractable; selection is
/// deterministic (fixed seed, fixed stride).
const STABLE_GRASP_MAX_POINTS: usize = 64;
const STABLE_GRASP_MAX_FRAMES: usize = 16;
const STABLE_GRASP_SEED: u64 = 0x5747;

/// Variation of tip-to-object squared distances across contact-window frame
/// pairs: sum over (tip, object vertex) pairs and ordered frame pairs of
/// |d_n - d_m|. Zero iff every pair keeps a constant distance over the
/// window.
pub fn stable_grasp_loss(
    tip_positions: &[Vec<Vector3<f64>>],
    object_positions: &[Vec<Vector3<f64>>],
    window: (usize, usize),
) -> f64 {
    let (t_s, t_e) = window;
    assert!(t_e < tip_positions.len() && t_e < object_positions.len());
    if t_s >= t_e {
        return 0.0;
    }
    let frames: Vec<usize> = crate::util::strided_indices(t_e - t_s + 1, STABLE_GRASP_MAX_FRAMES)
        .into_iter()
        .map(|i| t_s + i)
        .collect();
    let n_tip = tip_positions[t_s].len();
    let n_obj = object_positions[t_s].len();
    let tips = crate::util::subsample_indices(n_tip, STABLE_GRASP_MAX_POINTS, STABLE_GRASP_SEED);
    let objs =
        crate::util::subsample_indices(n_obj, STABLE_GRASP_MAX_POINTS, STABLE_GRASP_SEED ^ 1);

    let mut total = 0.0;
    let mut d = vec![0.0; frames.len()];
    for &ti in &tips {
        for &oi in &objs {
            for (fi, &f) in frames.iter().enumerate() {
                d[fi] = (tip_positions[f][ti] - object_positions[f][oi]).norm_squared();
            }
            let mut pair_sum = 0.0;
            for n in 0..d.len() {
                for m in (n + 1)..d.len() {
                    pair_sum += (d[n] - d[m]).abs();
                }
            }
            total += 2.0 * pair_sum; // ordered pairs
        }
    }
    total
}

/// Outside the contact window the object should rest on the scene: each
/// object vertex is pulled to its nearest scene point (squared distance).
/// Inside the window the term is exactly 0.
pub fn resting_loss(
    object_vertices: &[Vector3<f64>],
    scene_points: &[Vector3<f64>],
    t: usize,
    window: (usize, usize),
) -> f64 {
    if in_window(t, window) || scene_points.is_empty() {
        return 0.0;
    }
    object_vertices
        .iter()
        .map(|v| {
            scene_points
                .iter()
                .map(|p| (v - p).norm_squared())
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// Euclidean norm of the joint-angle deviation from the prior.
pub fn pose_reg_loss(theta: &[f64], theta_prior: &[f64]) -> f64 {
    assert_eq!(theta.len(), theta_prior.len());
    theta
        .iter()
        .zip(theta_prior)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// d/dtheta of `pose_reg_loss`: the unit deviation direction (undefined at
/// zero deviation, where the zero vector is returned).
pub fn pose_reg_gradient(theta: &[f64], theta_prior: &[f64]) -> Vec<f64> {
    let norm = pose_reg_loss(theta, theta_prior);
    if norm == 0.0 {
        return vec![0.0; theta.len()];
    }
    theta.iter().zip(theta_prior).map(|(a, b)| (a - b) / norm).collect()
}

/// Squared step sizes between consecutive poses, translation plus rotation
/// log-map.
pub fn se3_smoothness_loss(trajectory: &[Pose6D]) -> f64 {
    trajectory
        .windows(2)
        .map(|w| {
            let dt = w[1].translation() - w[0].translation();
            let dr = so3_log(&(w[0].rotation().transpose() * w[1].rotation()));
            dt.norm_squared() + dr.norm_squared()
        })
        .sum()
}

/// Gradient of `se3_smoothness_loss` per pose, in the optimizer's local
/// chart: rotation component with respect to a right-multiplied exp-map
/// perturbation of that pose, translation component with respect to the
/// raw translation. For the edge (t, t+1) with phi = log(R_t^T R_{t+1}),
/// the rotation gradients are -2 phi on pose t and +2 phi on pose t+1
/// (the inverse right Jacobian drops against phi).
pub fn se3_smoothness_gradient(trajectory: &[Pose6D]) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let mut grads = vec![(Vector3::zeros(), Vector3::zeros()); trajectory.len()];
    for t in 0..trajectory.len().saturating_sub(1) {
        let dt = trajectory[t + 1].translation() - trajectory[t].translation();
        let phi = so3_log(&(trajectory[t].rotation().transpose() * trajectory[t + 1].rotation()));
        grads[t].0 -= 2.0 * phi;
        grads[t].1 -= 2.0 * dt;
        grads[t + 1].0 += 2.0 * phi;
        grads[t + 1].1 += 2.0 * dt;
    }
    grads
}

/// Weighted squared deviation from a reference translation track.
pub fn funnel_loss(
    trajectory: &[Vector3<f64>],
    reference: &[Vector3<f64>],
    weights: &[f64],
) -> Result<f64, LossError> {
    assert_eq!(trajectory.len(), reference.len());
    assert_eq!(trajectory.len(), weights.len());
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(LossError::WeightSumViolation(sum));
    }
    Ok(trajectory
        .iter()
        .zip(reference)
        .zip(weights)
        .map(|((t, r), w)| w * (t - r).norm_squared())
        .sum())
}

/// d/dt_t of `funnel_loss`: 2 w_t (t_t - ref_t).
pub fn funnel_gradient(
    trajectory: &[Vector3<f64>],
    reference: &[Vector3<f64>],
    weights: &[f64],
) -> Vec<Vector3<f64>> {
    trajectory
        .iter()
        .zip(reference)
        .zip(weights)
        .map(|((t, r), w)| 2.0 * *w * (t - r))
        .collect()
}

/// Cubic time weights w_min + (w_max - w_min)(t/(T-1))^3, normalized to sum
/// exactly 1; a degenerate (all-zero) raw profile falls back to uniform.
pub fn funnel_weights(frame_count: usize, w_min: f64, w_max: f64) -> Vec<f64> {
    assert!(frame_count >= 2);
    assert!(0.0 <= w_min && w_min <= w_max);
    let raw: Vec<f64> = (0..frame_count)
        .map(|t| {
            let u = t as f64 / (frame_count - 1) as f64;
            w_min + (w_max - w_min) * u * u * u
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    if sum <= 0.0 {
        return vec![1.0 / frame_count as f64; frame_count];
    }
    raw.into_iter().map(|w| w / sum).collect()
}
