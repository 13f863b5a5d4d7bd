//! Metric scale recovery: fit the affine relation between reconstruction
//! depth and metric monocular depth, then rescale the reconstruction.
//!
//! The fitted map is z_sfm = A + B * z_pred. Only B has a geometric meaning
//! for the reconstruction (a uniform scale); A is a depth-domain offset used
//! when comparing depths and is never applied as a rigid transform.

use crate::geometry::{BinaryMask, DepthMap, Pose6D, TriMesh};
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_HUBER_DELTA: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ScaleAlignError {
    #[error("need {needed} correspondences outside the mask, found {available}")]
    InsufficientCorrespondences { needed: usize, available: usize },
    #[error("all predicted depths equal; scale is unidentifiable")]
    DegenerateFit,
    #[error("fitted scale {0} is not positive")]
    NegativeScale(f64),
}

/// A 2D keypoint with its reconstruction depth in some camera frame.
#[derive(Clone, Copy, Debug)]
pub struct SfmKeypoint {
    pub pixel: Vector2<f64>,
    pub z_sfm: f64,
}

/// One correspondence between the two depth sources at a pixel.
#[derive(Clone, Copy, Debug)]
pub struct DepthPair {
    pub z_pred: f64,
    pub z_sfm: f64,
    pub pixel: Vector2<f64>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AffineScale {
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "inliers")]
    pub inlier_count: usize,
}

impl AffineScale {
    pub fn identity() -> AffineScale {
        AffineScale { a: 0.0, b: 1.0, inlier_count: 0 }
    }
}

/// Picks the `n` keypoints nearest to (but strictly outside) the object mask
/// and pairs them with nearest-pixel samples of the predicted depth map.
/// Keypoints inside the mask, off the image, with invalid predicted depth,
/// or with non-positive reconstruction depth are not candidates.
pub fn select_correspondences(
    keypoints: &[SfmKeypoint],
    pred_depth: &DepthMap,
    object_mask: &BinaryMask,
    n: usize,
) -> Result<Vec<DepthPair>, ScaleAlignError> {
    let boundary = object_mask.boundary_pixels();
    let mut candidates: Vec<(f64, usize, DepthPair)> = Vec::new();
    for (idx, kp) in keypoints.iter().enumerate() {
        if kp.z_sfm <= 0.0 {
            continue;
        }
        let px = kp.pixel.x.round();
        let py = kp.pixel.y.round();
        if px < 0.0 || py < 0.0 || px >= object_mask.width as f64 || py >= object_mask.height as f64
        {
            continue;
        }
        let (xi, yi) = (px as usize, py as usize);
        if object_mask.get(xi, yi) != 0 {
            continue;
        }
        if !pred_depth.is_valid(xi, yi) {
            continue;
        }
        // Distance to the mask boundary; an empty mask leaves all
        // candidates tied and selection falls back to keypoint order.
        let dist = if boundary.is_empty() {
            0.0
        } else {
            boundary
                .iter()
                .map(|&(bx, by)| {
                    let (dx, dy) = (bx as f64 - kp.pixel.x, by as f64 - kp.pixel.y);
                    (dx * dx + dy * dy).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        };
        candidates.push((
            dist,
            idx,
            DepthPair { z_pred: pred_depth.get(xi, yi), z_sfm: kp.z_sfm, pixel: kp.pixel },
        ));
    }
    if candidates.len() < n || n < 2 {
        return Err(ScaleAlignError::InsufficientCorrespondences {
            needed: n.max(2),
            available: candidates.len(),
        });
    }
    candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(candidates.into_iter().take(n).map(|(_, _, p)| p).collect())
}

/// Huber loss in the squared-residual convention: rho(s) = s for s <= d^2,
/// else 2*d*sqrt(s) - d^2.
fn huber_objective(pairs: &[DepthPair], a: f64, b: f64, delta: f64) -> f64 {
    let d2 = delta * delta;
    0.5 * pairs
        .iter()
        .map(|p| {
            let s = (a + b * p.z_pred - p.z_sfm).powi(2);
            if s <= d2 {
                s
            } else {
                2.0 * delta * s.sqrt() - d2
            }
        })
        .sum::<f64>()
}

fn weighted_normal_solve(pairs: &[DepthPair], weights: &[f64]) -> Option<(f64, f64)> {
    let (mut sw, mut sz, mut szz, mut sy, mut szy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (p, &w) in pairs.iter().zip(weights) {
        sw += w;
        sz += w * p.z_pred;
        szz += w * p.z_pred * p.z_pred;
        sy += w * p.z_sfm;
        szy += w * p.z_pred * p.z_sfm;
    }
    let det = sw * szz - sz * sz;
    if det.abs() < 1e-12 * sw.max(1.0) * szz.max(1.0) {
        return None;
    }
    Some(((szz * sy - sz * szy) / det, (sw * szy - sz * sy) / det))
}

/// Iteratively reweighted least squares from the ordinary-least-squares
/// start. Returns the fit and the per-iteration Huber objective (which is
/// non-increasing: each reweighted solve minimizes a majorizer).
pub(crate) fn fit_affine_depth_traced(
    pairs: &[DepthPair],
    huber_delta: f64,
) -> Result<(AffineScale, Vec<f64>), ScaleAlignError> {
    if pairs.len() < 2 {
        return Err(ScaleAlignError::InsufficientCorrespondences {
            needed: 2,
            available: pairs.len(),
        });
    }
    let spread = pairs.iter().map(|p| p.z_pred).fold(f64::NEG_INFINITY, f64::max)
        - pairs.iter().map(|p| p.z_pred).fold(f64::INFINITY, f64::min);
    if spread < 1e-12 {
        return Err(ScaleAlignError::DegenerateFit);
    }

    let mut weights = vec![1.0; pairs.len()];
    let (mut a, mut b) =
        weighted_normal_solve(pairs, &weights).ok_or(ScaleAlignError::DegenerateFit)?;
    let mut trace = vec![huber_objective(pairs, a, b, huber_delta)];
    for _ in 0..100 {
        for (w, p) in weights.iter_mut().zip(pairs) {
            let r = (a + b * p.z_pred - p.z_sfm).abs();
            *w = if r <= huber_delta { 1.0 } else { huber_delta / r };
        }
        let (na, nb) =
            weighted_normal_solve(pairs, &weights).ok_or(ScaleAlignError::DegenerateFit)?;
        let change = (na - a).abs() + (nb - b).abs();
        a = na;
        b = nb;
        trace.push(huber_objective(pairs, a, b, huber_delta));
        if change < 1e-10 {
            break;
        }
    }
    // Gross outliers leave a constant delta-sized pull on the converged
    // M-estimate; an ordinary refit on the detected inliers removes it.
    let inliers: Vec<DepthPair> = pairs
        .iter()
        .filter(|p| (a + b * p.z_pred - p.z_sfm).abs() <= huber_delta)
        .copied()
        .collect();
    let in_spread = inliers.iter().map(|p| p.z_pred).fold(f64::NEG_INFINITY, f64::max)
        - inliers.iter().map(|p| p.z_pred).fold(f64::INFINITY, f64::min);
    if inliers.len() >= 2 && in_spread > 1e-12 {
        if let Some((ra, rb)) = weighted_normal_solve(&inliers, &vec![1.0; inliers.len()]) {
            a = ra;
            b = rb;
        }
    }
    if b <= 0.0 {
        return Err(ScaleAlignError::NegativeScale(b));
    }
    let inlier_count = pairs
        .iter()
        .filter(|p| (a + b * p.z_pred - p.z_sfm).abs() <= huber_delta)
        .count();
    Ok((AffineScale { a, b, inlier_count }, trace))
}

pub fn fit_affine_depth(
    pairs: &[DepthPair],
    huber_delta: f64,
) -> Result<AffineScale, ScaleAlignError> {
    fit_affine_depth_traced(pairs, huber_delta).map(|(s, _)| s)
}

/// Independent fits per frame, for diagnostics or per-frame alignment.
pub fn fit_affine_depth_per_frame(
    frames: &[Vec<DepthPair>],
    huber_delta: f64,
) -> Vec<Result<AffineScale, ScaleAlignError>> {
    frames.iter().map(|f| fit_affine_depth(f, huber_delta)).collect()
}

/// A reconstruction in its own (pre-metric) units: geometry plus the
/// world-from-camera pose of every frame.
#[derive(Clone, Debug)]
pub struct SceneReconstruction {
    pub mesh: TriMesh,
    pub camera_poses: Vec<Pose6D>,
}

/// Rescales geometry and camera translations by 1/B; rotations are
/// unchanged. The offset A deliberately does not move geometry, it only
/// enters depth comparisons through `map_sfm_depth`.
pub fn apply_scale(scene: &SceneReconstruction, scale: &AffineScale) -> SceneReconstruction {
    let inv = 1.0 / scale.b;
    SceneReconstruction {
        mesh: scene.mesh.scaled(inv),
        camera_poses: scene
            .camera_poses
            .iter()
            .map(|p| Pose6D::from_parts_unchecked(*p.rotation(), p.translation() * inv))
            .collect(),
    }
}

/// Maps a reconstruction depth sample into the metric (predicted-depth)
/// domain.
pub fn map_sfm_depth(z_sfm: f64, scale: &AffineScale) -> f64 {
    (z_sfm - scale.a) / scale.b
}

/// Scale from one externally measured length: an object of true metric
/// length measured as `reconstructed_length` in scene units.
pub fn rescale_by_known_length(
    reconstructed_length: f64,
    true_length: f64,
) -> Result<AffineScale, ScaleAlignError> {
    let b = reconstructed_length / true_length;
    if !(b > 0.0) {
        return Err(ScaleAlignError::NegativeScale(b));
    }
    Ok(AffineScale { a: 0.0, b, inlier_count: 0 })
}
