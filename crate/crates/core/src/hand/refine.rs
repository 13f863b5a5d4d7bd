//! Two-stage hand sequence refinement.
//!
//! Stage 1 (coarse) fits per-frame global pose plus shared shape to 2D
//! keypoint tracks with joint angles frozen. Stage 2 (fine) additionally
//! frees the joint angles and adds occlusion-masked depth supervision.
//! Both stages share one objective assembler; per-frame forward passes
//! and renders are memoized so finite-difference probes only pay for the
//! frames they touch.

use crate::geometry::{BinaryMask, DepthMap, PinholeCamera, Pose6D};
use crate::hand::model::{
    hand_forward, HandError, HandKeypoints, HandParams, JOINT_COUNT, JOINT_LIMITS, KEYPOINT_NAMES,
};
use crate::hand::HandObservation;
use crate::losses::{depth_loss, LossWeights};
use crate::optim::{minimize_annealed, BlockId, OptimConfig, OptimError, OptimReport, ParamVector, PoseBlock};
use crate::rasterizer::{rasterize_allow_empty, RASTERIZED_FD_STEP};
use crate::util::{hash_f64s, Memo};
use nalgebra::{Matrix3, Vector3};
use std::sync::Arc;
use thiserror::Error;

/// Reprojection charge for a keypoint that lands at or behind the camera
/// plane; large enough that hiding keypoints is never cheaper than any
/// in-frame fit.
const INVALID_PROJECTION_PENALTY: f64 = 1e4;

/// Step-annealing phases for both refinement stages. The reprojection sum
/// is a cone near an exact fit, where a fixed trust step stalls well short
/// of the minimum.
const STEP_PHASES: usize = 3;

/// Sum of per-keypoint Euclidean reprojection errors for one frame.
/// Keypoints absent from the observation contribute nothing; keypoints
/// that fail to project are charged a flat penalty.
pub(crate) fn keypoint_reprojection(
    obs: &HandObservation,
    keypoints: &HandKeypoints,
    camera: &PinholeCamera,
    cam_from_world: &Pose6D,
) -> f64 {
    let mut sum = 0.0;
    for name in KEYPOINT_NAMES {
        let Some(observed) = obs.keypoint(name) else { continue };
        let world = keypoints.get(name).expect("canonical keypoint name");
        let cam = cam_from_world.apply(&world);
        match camera.project_point(&cam, 0) {
            Ok(px) => sum += (px - observed).norm(),
            Err(_) => sum += INVALID_PROJECTION_PENALTY,
        }
    }
    sum
}


#[derive(Debug, Error)]
pub enum HandRefineError {
    #[error("{what}: got {got} frames, expected {expected}")]
    LengthMismatch { what: &'static str, got: usize, expected: usize },
    #[error("invalid hand parameters at frame {frame}: {source}")]
    Hand { frame: usize, source: HandError },
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("cannot initialize hand: {0}")]
    InsufficientData(&'static str),
}

/// Refined sequence plus the optimizer's account of how it got there.
#[derive(Clone, Debug)]
pub struct RefineOutcome {
    pub params: Vec<HandParams>,
    pub report: OptimReport,
}

/// Per-frame cached evaluation: world-space mesh vertices (for the
/// temporal smoothness sum) and the frame's own weighted loss.
struct FrameEval {
    verts: Vec<Vector3<f64>>,
    loss: f64,
}

struct DepthSupervision<'a> {
    /// Observed depth restricted to the hand mask, one map per frame.
    observed: Vec<DepthMap>,
    object_masks: &'a [BinaryMask],
}

struct Stage<'a> {
    obs: &'a [HandObservation],
    camera: &'a PinholeCamera,
    cam_poses: &'a [Pose6D],
    cam_from_world: Vec<Pose6D>,
    weights: &'a LossWeights,
    depth: Option<DepthSupervision<'a>>,
    memo: Memo<Arc<FrameEval>>,
}

impl<'a> Stage<'a> {
    fn new(
        obs: &'a [HandObservation],
        camera: &'a PinholeCamera,
        cam_poses: &'a [Pose6D],
        weights: &'a LossWeights,
        depth: Option<DepthSupervision<'a>>,
    ) -> Stage<'a> {
        Stage {
            obs,
            camera,
            cam_poses,
            cam_from_world: cam_poses.iter().map(Pose6D::invert).collect(),
            weights,
            depth,
            memo: Memo::default(),
        }
    }

    /// Sum of per-keypoint Euclidean reprojection errors for one frame.
    fn reprojection(&self, t: usize, keypoints: &HandKeypoints) -> f64 {
        keypoint_reprojection(&self.obs[t], keypoints, self.camera, &self.cam_from_world[t])
    }

    fn frame_eval(
        &self,
        t: usize,
        rotation: &Matrix3<f64>,
        translation: &Vector3<f64>,
        theta: &[f64],
        beta: &[f64],
    ) -> Arc<FrameEval> {
        let mut key = Vec::with_capacity(9 + 3 + theta.len() + beta.len());
        key.extend_from_slice(rotation.as_slice());
        key.extend_from_slice(translation.as_slice());
        key.extend_from_slice(theta);
        key.extend_from_slice(beta);
        self.memo.get_or_insert_with(hash_f64s(t, &key), || {
            let params = HandParams {
                rotation: *rotation,
                translation: *translation,
                theta: theta.to_vec(),
                beta: beta.to_vec(),
            };
            let out = hand_forward(&params).expect("probe stays inside validated domain");
            let mut loss = self.weights.lambda_2d * self.reprojection(t, &out.keypoints);
            if let Some(depth) = &self.depth {
                let render = rasterize_allow_empty(
                    &out.mesh,
                    &Pose6D::identity(),
                    &self.cam_poses[t],
                    self.camera,
                );
                let ld = depth_loss(&render.depth, &depth.observed[t], &depth.object_masks[t])
                    .expect("frame dimensions validated on entry");
                loss += self.weights.lambda_depth * ld;
            }
            Arc::new(FrameEval { verts: out.mesh.vertices, loss })
        })
    }

    /// Total objective given a per-frame decode of the parameter vector.
    fn objective(&self, frames: impl Iterator<Item = Arc<FrameEval>>) -> f64 {
        let mut total = 0.0;
        let mut prev: Option<Arc<FrameEval>> = None;
        for eval in frames {
            total += eval.loss;
            if let Some(p) = prev {
                let mut smooth = 0.0;
                for (a, b) in eval.verts.iter().zip(&p.verts) {
                    smooth += (a - b).norm_squared();
                }
                total += self.weights.lambda_smooth * smooth;
            }
            prev = Some(eval);
        }
        total
    }
}

pub(crate) fn clamp_theta(theta: &mut [f64]) {
    for (v, (lo, hi)) in theta.iter_mut().zip(JOINT_LIMITS) {
        *v = v.clamp(lo, hi);
    }
}

fn validate_frames(
    what: &'static str,
    got: usize,
    expected: usize,
) -> Result<(), HandRefineError> {
    if got != expected {
        return Err(HandRefineError::LengthMismatch { what, got, expected });
    }
    Ok(())
}

fn validate_init(init: &[HandParams]) -> Result<(), HandRefineError> {
    for (frame, p) in init.iter().enumerate() {
        hand_forward(p).map_err(|source| HandRefineError::Hand { frame, source })?;
    }
    Ok(())
}

/// Stage 1: fits per-frame global pose and shared shape to 2D keypoints,
/// joint angles frozen at their initial values.
pub fn refine_hand_coarse(
    obs: &[HandObservation],
    init: &[HandParams],
    camera: &PinholeCamera,
    cam_poses: &[Pose6D],
    weights: &LossWeights,
    config: &OptimConfig,
) -> Result<RefineOutcome, HandRefineError> {
    let n = obs.len();
    if n == 0 {
        return Err(HandRefineError::InsufficientData("empty frame sequence"));
    }
    validate_frames("init params", init.len(), n)?;
    validate_frames("camera poses", cam_poses.len(), n)?;
    validate_init(init)?;

    let stage = Stage::new(obs, camera, cam_poses, weights, None);
    let mut params = ParamVector::new();
    let pose_blocks: Vec<PoseBlock> =
        init.iter().map(|p| params.push_pose(&p.global_pose())).collect();
    // Shape is shared across the sequence; the first frame's beta seeds it.
    let beta_block = params.push_scalars(&init[0].beta);
    let thetas: Vec<Vec<f64>> = init.iter().map(|p| p.theta.clone()).collect();

    let objective = |pv: &ParamVector| {
        let beta = pv.scalars(beta_block);
        stage.objective((0..n).map(|t| {
            let pose = pv.pose(&pose_blocks[t]);
            stage.frame_eval(t, pose.rotation(), pose.translation(), &thetas[t], beta)
        }))
    };

    let (best, report) = minimize_annealed(objective, params, config, STEP_PHASES)?;
    let beta = best.scalars(beta_block).to_vec();
    let out = (0..n)
        .map(|t| {
            let pose = best.pose(&pose_blocks[t]);
            HandParams {
                rotation: *pose.rotation(),
                translation: *pose.translation(),
                theta: thetas[t].clone(),
                beta: beta.clone(),
            }
        })
        .collect();
    Ok(RefineOutcome { params: out, report })
}

/// Stage 2: frees the joint angles and adds occlusion-masked depth
/// supervision on the rendered hand. Joint angles are box-projected onto
/// their limits inside the objective, so probe steps cannot leave the
/// valid domain.
pub fn refine_hand_fine(
    obs: &[HandObservation],
    depth_maps: &[DepthMap],
    hand_masks: &[BinaryMask],
    object_masks: &[BinaryMask],
    init: &[HandParams],
    camera: &PinholeCamera,
    cam_poses: &[Pose6D],
    weights: &LossWeights,
    config: &OptimConfig,
) -> Result<RefineOutcome, HandRefineError> {
    let n = obs.len();
    if n == 0 {
        return Err(HandRefineError::InsufficientData("empty frame sequence"));
    }
    validate_frames("init params", init.len(), n)?;
    validate_frames("camera poses", cam_poses.len(), n)?;
    validate_frames("depth maps", depth_maps.len(), n)?;
    validate_frames("hand masks", hand_masks.len(), n)?;
    validate_frames("object masks", object_masks.len(), n)?;
    validate_init(init)?;

    let observed: Vec<DepthMap> = depth_maps
        .iter()
        .zip(hand_masks)
        .map(|(d, m)| d.masked(m))
        .collect();
    let supervision = DepthSupervision { observed, object_masks };
    let stage = Stage::new(obs, camera, cam_poses, weights, Some(supervision));
    let config = &OptimConfig { fd_step: RASTERIZED_FD_STEP, ..*config };

    let mut params = ParamVector::new();
    let pose_blocks: Vec<PoseBlock> =
        init.iter().map(|p| params.push_pose(&p.global_pose())).collect();
    let theta_blocks: Vec<BlockId> = init.iter().map(|p| params.push_scalars(&p.theta)).collect();
    let beta_block = params.push_scalars(&init[0].beta);

    let objective = |pv: &ParamVector| {
        let beta = pv.scalars(beta_block);
        stage.objective((0..n).map(|t| {
            let pose = pv.pose(&pose_blocks[t]);
            let mut theta = pv.scalars(theta_blocks[t]).to_vec();
            clamp_theta(&mut theta);
            stage.frame_eval(t, pose.rotation(), pose.translation(), &theta, beta)
        }))
    };

    let (best, report) = minimize_annealed(objective, params, config, STEP_PHASES)?;
    let beta = best.scalars(beta_block).to_vec();
    let out = (0..n)
        .map(|t| {
            let pose = best.pose(&pose_blocks[t]);
            let mut theta = best.scalars(theta_blocks[t]).to_vec();
            clamp_theta(&mut theta);
            HandParams {
                rotation: *pose.rotation(),
                translation: *pose.translation(),
                theta,
                beta: beta.clone(),
            }
        })
        .collect();
    Ok(RefineOutcome { params: out, report })
}

/// Stage-1 objective evaluated at explicit parameters (test hook).
#[cfg(test)]
fn coarse_objective_value(
    obs: &[HandObservation],
    camera: &PinholeCamera,
    cam_poses: &[Pose6D],
    weights: &LossWeights,
    frames: &[HandParams],
) -> f64 {
    let stage = Stage::new(obs, camera, cam_poses, weights, None);
    stage.objective(frames.iter().enumerate().map(|(t, p)| {
        stage.frame_eval(t, &p.rotation, &p.translation, &p.theta, &p.beta)
    }))
}

/// Stage-2 objective evaluated at explicit parameters (test hook).
#[cfg(test)]
#[allow(clippy::too_many_arguments)]
fn fine_objective_value(
    obs: &[HandObservation],
    depth_maps: &[DepthMap],
    hand_masks: &[BinaryMask],
    object_masks: &[BinaryMask],
    camera: &PinholeCamera,
    cam_poses: &[Pose6D],
    weights: &LossWeights,
    frames: &[HandParams],
) -> f64 {
    let observed: Vec<DepthMap> = depth_maps
        .iter()
        .zip(hand_masks)
        .map(|(d, m)| d.masked(m))
        .collect();
    let supervision = DepthSupervision { observed, object_masks };
    let stage = Stage::new(obs, camera, cam_poses, weights, Some(supervision));
    stage.objective(frames.iter().enumerate().map(|(t, p)| {
        stage.frame_eval(t, &p.rotation, &p.translation, &p.theta, &p.beta)
    }))
}

/// Rigid alignment of model keypoints to back-projected detections.
///
/// Every visible keypoint is back-projected at the median hand depth, so
/// the fit is a similarity-free Procrustes solve against a slightly
/// flattened point cloud; good enough to start stage 1.
pub fn hand_init_from_observations(
    obs: &HandObservation,
    camera: &PinholeCamera,
    cam_pose: &Pose6D,
    depth: &DepthMap,
    hand_mask: &BinaryMask,
) -> Result<HandParams, HandRefineError> {
    let mut zs: Vec<f64> = Vec::new();
    for y in 0..depth.height {
        for x in 0..depth.width {
            if hand_mask.get(x, y) != 0 && depth.is_valid(x, y) {
                zs.push(depth.get(x, y));
            }
        }
    }
    if zs.is_empty() {
        return Err(HandRefineError::InsufficientData(
            "no valid depth inside the hand mask",
        ));
    }
    zs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let z_med = if zs.len() % 2 == 1 {
        zs[zs.len() / 2]
    } else {
        0.5 * (zs[zs.len() / 2 - 1] + zs[zs.len() / 2])
    };

    let mut theta = if obs.theta_prior.len() == JOINT_COUNT {
        obs.theta_prior.clone()
    } else {
        vec![0.0; JOINT_COUNT]
    };
    clamp_theta(&mut theta);
    let mut rest = HandParams::rest();
    rest.theta = theta.clone();
    let model = hand_forward(&rest).expect("rest params valid");

    let mut model_pts = Vec::new();
    let mut world_pts = Vec::new();
    for name in KEYPOINT_NAMES {
        let Some(px) = obs.keypoint(name) else { continue };
        model_pts.push(model.keypoints.get(name).unwrap());
        world_pts.push(cam_pose.apply(&camera.back_project(&px, z_med)));
    }
    if model_pts.len() < 3 {
        return Err(HandRefineError::InsufficientData(
            "fewer than 3 visible keypoints",
        ));
    }

    let (rotation, translation) = rigid_fit(&model_pts, &world_pts);
    Ok(HandParams { rotation, translation, theta, beta: rest.beta })
}

/// Least-squares rigid transform taking `from` onto `to` (Kabsch).
fn rigid_fit(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = from.len() as f64;
    let fc: Vector3<f64> = from.iter().sum::<Vector3<f64>>() / n;
    let tc: Vector3<f64> = to.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (f, t) in from.iter().zip(to) {
        h += (f - fc) * (t - tc).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let v = vt.transpose();
    let mut s = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = crate::geometry::orthonormalize(&(v * s * u.transpose()));
    (r, tc - r * fc)
}
