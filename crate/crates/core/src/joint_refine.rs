//! Joint batch refinement of the hand sequence and the object trajectory.
//!
//! Per-entity tracking leaves the two estimates free to disagree exactly
//! where they interact: fingers hover off the surface or sink into it,
//! and the object drifts while "held". This stage re-optimizes every
//! frame at once against both the image evidence and the grasp geometry.
//! Object poses in the stationary segments (before the contact window
//! opens, and after it closes) share one parameter block each, so the
//! rest-pose equality is structural rather than penalized.

use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::DemoBundle;
use crate::geometry::{DepthMap, Pose6D, TriMesh};
use crate::hand::{
    clamp_theta, hand_forward, keypoint_reprojection, HandParams, JOINT_COUNT, SHAPE_COUNT,
};
use crate::losses::{
    contact_loss, depth_loss, mask_loss, pose_reg_loss, resting_loss, stable_grasp_loss,
    LossWeights,
};
use crate::object_track::{ObjectTrajectory, SCALE_FLOOR};
use crate::optim::{
    minimize_annealed, BlockId, OptimConfig, OptimError, OptimReport, ParamVector, PoseBlock,
};
use crate::rasterizer::{rasterize_allow_empty, RASTERIZED_FD_STEP};
use crate::sdf::{build_tsdf_default, SdfError, TsdfGrid};
use crate::util::{hash_f64s, subsample_indices, Memo};

/// Step-annealing phases; matches the hand refiners.
const STEP_PHASES: usize = 3;

/// Seed for the resting-term vertex subsample, fixed so repeated runs
/// score the same vertices.
const REST_SEED: u64 = 7;

/// Hand and object state over one demonstration, as refined jointly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JointState {
    pub object: ObjectTrajectory,
    pub hand: Vec<HandParams>,
}

/// Cost/fidelity knobs for the joint stage.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct JointOptions {
    /// Render-backed terms (mask, depth, 2D keypoints) are evaluated on
    /// every `frame_stride`-th frame. Geometric terms always run on every
    /// frame they apply to.
    pub frame_stride: usize,
    /// Number of object vertices scored by the resting term. The
    /// nearest-scene-point scan is quadratic, so the full mesh would
    /// dominate runtime on dense reconstructions.
    pub rest_vertex_cap: usize,
}

impl Default for JointOptions {
    fn default() -> Self {
        JointOptions {
            frame_stride: 2,
            rest_vertex_cap: 64,
        }
    }
}

#[derive(Debug, Error)]
pub enum JointError {
    #[error("object trajectory has no contact window; run contact detection first")]
    MissingContactWindow,
    #[error("contact window ({t_s}, {t_e}) does not fit {frames} frames")]
    BadWindow { t_s: usize, t_e: usize, frames: usize },
    #[error("{what}: got {got} frames, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("hand frame {frame}: expected {expected} values for {what}, got {got}")]
    BadHandArity {
        frame: usize,
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Sdf(#[from] SdfError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Unweighted objective terms, summed over the frames each term applies
/// to. `weighted_total` is the single place the weights are applied, so
/// an optimizer report and an independent re-evaluation agree exactly.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct JointTerms {
    pub mask_hand: f64,
    pub mask_obj: f64,
    pub depth_hand: f64,
    pub depth_obj: f64,
    pub reproj_2d: f64,
    pub hand_pose_reg: f64,
    pub contact: f64,
    pub collision: f64,
    pub stable_grasp: f64,
    pub scene: f64,
    pub rest: f64,
}

impl JointTerms {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.lambda_mask * self.mask_hand
            + w.lambda_mask_obj * self.mask_obj
            + w.lambda_depth * self.depth_hand
            + w.lambda_depth_obj * self.depth_obj
            + w.lambda_2d * self.reproj_2d
            + w.lambda_hand_pose * self.hand_pose_reg
            + w.lambda_contact * self.contact
            + w.lambda_collision * self.collision
            + w.lambda_stable_grasp * self.stable_grasp
            + w.lambda_scene * self.scene
            + w.lambda_rest * self.rest
    }
}

/// Jointly refines hand parameters and object poses over all frames.
///
/// The objective combines, per frame: occlusion-masked silhouette and
/// depth terms for both entities (each masked by the other's observed
/// mask), 2D keypoint reprojection, a joint-angle prior, tip-to-object
/// contact and hand/object interpenetration inside the contact window,
/// grasp rigidity across the window, scene interpenetration everywhere,
/// and a resting prior outside the window. Object poses at `t <= t_s`
/// share one parameter block and poses at `t >= t_e` share another, so
/// the stationary segments stay exactly constant by construction. Hand
/// shape is one block shared across frames; joint angles are boxed to
/// their limits.
///
/// The joint-angle prior for frame `t` is the bundle's detector estimate
/// when present; frames without one contribute nothing to that term.
#[allow(clippy::too_many_arguments)]
pub fn refine_joint(
    state0: &JointState,
    bundle: &DemoBundle,
    object_mesh: &TriMesh,
    scene_tsdf: &TsdfGrid,
    scene_points: &[Vector3<f64>],
    weights: &LossWeights,
    config: &OptimConfig,
    options: &JointOptions,
) -> Result<(JointState, OptimReport), JointError> {
    let window = validate(state0, bundle)?;
    let frames = bundle.frame_count();
    let object_tsdf = build_tsdf_default(object_mesh)?;
    let ctx = Ctx::new(
        bundle,
        object_mesh,
        &object_tsdf,
        scene_tsdf,
        scene_points,
        window,
        options,
    );

    let (params0, layout) = encode(state0, window);
    let objective = |p: &ParamVector| {
        let (obj_poses, scale, hands) = decode(p, &layout, window, frames);
        ctx.terms(&obj_poses, scale, &hands).weighted_total(weights)
    };
    // Mask coverage changes in whole pixels; probe above that granularity.
    let cfg = OptimConfig {
        fd_step: RASTERIZED_FD_STEP,
        ..*config
    };
    let (best, report) = minimize_annealed(objective, params0, &cfg, STEP_PHASES)?;

    let (obj_poses, scale, hands) = decode(&best, &layout, window, frames);
    let state = JointState {
        object: ObjectTrajectory {
            scale,
            contact: Some(window),
            poses: obj_poses,
        },
        hand: hands,
    };
    Ok((state, report))
}

/// Re-evaluates every objective term for `state` as given (no clamping,
/// no optimization). `JointTerms::weighted_total` over this result equals
/// the objective `refine_joint` reports for the same state.
pub fn evaluate_joint_terms(
    state: &JointState,
    bundle: &DemoBundle,
    object_mesh: &TriMesh,
    scene_tsdf: &TsdfGrid,
    scene_points: &[Vector3<f64>],
    options: &JointOptions,
) -> Result<JointTerms, JointError> {
    let window = validate(state, bundle)?;
    let object_tsdf = build_tsdf_default(object_mesh)?;
    let ctx = Ctx::new(
        bundle,
        object_mesh,
        &object_tsdf,
        scene_tsdf,
        scene_points,
        window,
        options,
    );
    Ok(ctx.terms(&state.object.poses, state.object.scale, &state.hand))
}

fn validate(state: &JointState, bundle: &DemoBundle) -> Result<(usize, usize), JointError> {
    let frames = bundle.frame_count();
    if state.object.poses.len() != frames {
        return Err(JointError::LengthMismatch {
            what: "object poses",
            got: state.object.poses.len(),
            expected: frames,
        });
    }
    if state.hand.len() != frames {
        return Err(JointError::LengthMismatch {
            what: "hand parameters",
            got: state.hand.len(),
            expected: frames,
        });
    }
    for (t, h) in state.hand.iter().enumerate() {
        if h.theta.len() != JOINT_COUNT {
            return Err(JointError::BadHandArity {
                frame: t,
                what: "theta",
                expected: JOINT_COUNT,
                got: h.theta.len(),
            });
        }
        if h.beta.len() != SHAPE_COUNT {
            return Err(JointError::BadHandArity {
                frame: t,
                what: "beta",
                expected: SHAPE_COUNT,
                got: h.beta.len(),
            });
        }
    }
    let (t_s, t_e) = state.object.contact.ok_or(JointError::MissingContactWindow)?;
    // t_s == t_e would tie every pose through the overlapping segments.
    if t_s >= t_e || t_e >= frames {
        return Err(JointError::BadWindow { t_s, t_e, frames });
    }
    Ok((t_s, t_e))
}

struct Layout {
    pre: PoseBlock,
    inner: Vec<PoseBlock>,
    post: PoseBlock,
    scale: BlockId,
    hand_poses: Vec<PoseBlock>,
    thetas: Vec<BlockId>,
    beta: BlockId,
}

fn encode(state: &JointState, window: (usize, usize)) -> (ParamVector, Layout) {
    let (t_s, t_e) = window;
    let frames = state.object.poses.len();
    let mut params = ParamVector::new();
    // Segment blocks seed from their boundary frames; the tracker's
    // per-frame estimates inside a segment may differ slightly but the
    // objective re-fits the shared pose anyway.
    let pre = params.push_pose(&state.object.poses[0]);
    let inner = (t_s + 1..t_e)
        .map(|t| params.push_pose(&state.object.poses[t]))
        .collect();
    let post = params.push_pose(&state.object.poses[frames - 1]);
    let scale = params.push_scalar(state.object.scale);
    let mut hand_poses = Vec::with_capacity(frames);
    let mut thetas = Vec::with_capacity(frames);
    for h in &state.hand {
        hand_poses.push(params.push_pose(&h.global_pose()));
        thetas.push(params.push_scalars(&h.theta));
    }
    let beta = params.push_scalars(&state.hand[0].beta);
    (
        params,
        Layout {
            pre,
            inner,
            post,
            scale,
            hand_poses,
            thetas,
            beta,
        },
    )
}

fn decode(
    params: &ParamVector,
    layout: &Layout,
    window: (usize, usize),
    frames: usize,
) -> (Vec<Pose6D>, f64, Vec<HandParams>) {
    let (t_s, t_e) = window;
    let pre = params.pose(&layout.pre);
    let post = params.pose(&layout.post);
    let obj_poses = (0..frames)
        .map(|t| {
            if t <= t_s {
                pre
            } else if t >= t_e {
                post
            } else {
                params.pose(&layout.inner[t - t_s - 1])
            }
        })
        .collect();
    let scale = params.scalar(layout.scale).max(SCALE_FLOOR);
    let beta = params.scalars(layout.beta).to_vec();
    let hands = (0..frames)
        .map(|t| {
            let pose = params.pose(&layout.hand_poses[t]);
            let mut theta = params.scalars(layout.thetas[t]).to_vec();
            clamp_theta(&mut theta);
            HandParams {
                rotation: *pose.rotation(),
                translation: *pose.translation(),
                theta,
                beta: beta.clone(),
            }
        })
        .collect();
    (obj_poses, scale, hands)
}

struct HandEval {
    verts: Vec<Vector3<f64>>,
    tips: Vec<Vector3<f64>>,
    reproj: f64,
    theta_reg: f64,
    scene_pen: f64,
    mask: f64,
    depth: f64,
}

struct ObjEval {
    verts: Vec<Vector3<f64>>,
    scene_pen: f64,
    rest: f64,
    mask: f64,
    depth: f64,
}

struct Ctx<'a> {
    bundle: &'a DemoBundle,
    mesh: &'a TriMesh,
    object_tsdf: &'a TsdfGrid,
    scene_tsdf: &'a TsdfGrid,
    scene_points: &'a [Vector3<f64>],
    window: (usize, usize),
    strided: Vec<bool>,
    rest_ids: Vec<usize>,
    theta_priors: Vec<Option<Vec<f64>>>,
    masked_hand_depths: Vec<DepthMap>,
    masked_object_depths: Vec<DepthMap>,
    cam_from_world: Vec<Pose6D>,
    hand_memo: Memo<Arc<HandEval>>,
    obj_memo: Memo<Arc<ObjEval>>,
}

impl<'a> Ctx<'a> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        bundle: &'a DemoBundle,
        mesh: &'a TriMesh,
        object_tsdf: &'a TsdfGrid,
        scene_tsdf: &'a TsdfGrid,
        scene_points: &'a [Vector3<f64>],
        window: (usize, usize),
        options: &JointOptions,
    ) -> Ctx<'a> {
        let frames = bundle.frame_count();
        let stride = options.frame_stride.max(1);
        let theta_priors = bundle
            .keypoints
            .iter()
            .map(|obs| (obs.theta_prior.len() == JOINT_COUNT).then(|| obs.theta_prior.clone()))
            .collect();
        Ctx {
            bundle,
            mesh,
            object_tsdf,
            scene_tsdf,
            scene_points,
            window,
            strided: (0..frames).map(|t| t % stride == 0).collect(),
            rest_ids: subsample_indices(mesh.vertices.len(), options.rest_vertex_cap, REST_SEED),
            theta_priors,
            masked_hand_depths: (0..frames)
                .map(|t| bundle.depths[t].masked(&bundle.hand_masks[t]))
                .collect(),
            masked_object_depths: (0..frames)
                .map(|t| bundle.depths[t].masked(&bundle.object_masks[t]))
                .collect(),
            cam_from_world: bundle.cam_poses.iter().map(Pose6D::invert).collect(),
            hand_memo: Memo::default(),
            obj_memo: Memo::default(),
        }
    }

    fn in_window(&self, t: usize) -> bool {
        t >= self.window.0 && t <= self.window.1
    }

    fn hand_eval(&self, t: usize, params: &HandParams) -> Arc<HandEval> {
        let mut key = Vec::with_capacity(12 + params.theta.len() + params.beta.len());
        key.extend_from_slice(params.rotation.as_slice());
        key.extend_from_slice(params.translation.as_slice());
        key.extend_from_slice(&params.theta);
        key.extend_from_slice(&params.beta);
        self.hand_memo.get_or_insert_with(hash_f64s(t, &key), || {
            let out = hand_forward(params).expect("probe stays inside validated domain");
            let tips: Vec<Vector3<f64>> = out
                .tip_vertex_ids
                .iter()
                .map(|&i| out.mesh.vertices[i])
                .collect();
            let reproj = keypoint_reprojection(
                &self.bundle.keypoints[t],
                &out.keypoints,
                &self.bundle.camera,
                &self.cam_from_world[t],
            );
            let theta_reg = match &self.theta_priors[t] {
                Some(prior) => pose_reg_loss(&params.theta, prior),
                None => 0.0,
            };
            let scene_pen = self.scene_tsdf.penetration_loss(&out.mesh.vertices);
            let (mask, depth) = if self.strided[t] {
                let render = rasterize_allow_empty(
                    &out.mesh,
                    &Pose6D::identity(),
                    &self.bundle.cam_poses[t],
                    &self.bundle.camera,
                );
                (
                    mask_loss(
                        &render.mask,
                        &self.bundle.hand_masks[t],
                        &self.bundle.object_masks[t],
                    )
                    .expect("bundle dimensions validated"),
                    depth_loss(
                        &render.depth,
                        &self.masked_hand_depths[t],
                        &self.bundle.object_masks[t],
                    )
                    .expect("bundle dimensions validated"),
                )
            } else {
                (0.0, 0.0)
            };
            Arc::new(HandEval {
                verts: out.mesh.vertices,
                tips,
                reproj,
                theta_reg,
                scene_pen,
                mask,
                depth,
            })
        })
    }

    fn obj_eval(&self, t: usize, pose: &Pose6D, scale: f64) -> Arc<ObjEval> {
        let mut key = [0.0; 13];
        key[..9].copy_from_slice(pose.rotation().as_slice());
        key[9..12].copy_from_slice(pose.translation().as_slice());
        key[12] = scale;
        self.obj_memo.get_or_insert_with(hash_f64s(t, &key), || {
            let verts: Vec<Vector3<f64>> = self
                .mesh
                .vertices
                .iter()
                .map(|v| pose.apply(&(v * scale)))
                .collect();
            let scene_pen = self.scene_tsdf.penetration_loss(&verts);
            let rest = if self.in_window(t) {
                0.0
            } else {
                let rest_verts: Vec<Vector3<f64>> =
                    self.rest_ids.iter().map(|&i| verts[i]).collect();
                resting_loss(&rest_verts, self.scene_points, t, self.window)
            };
            let (mask, depth) = if self.strided[t] {
                let scaled = self.mesh.scaled(scale);
                let render = rasterize_allow_empty(
                    &scaled,
                    pose,
                    &self.bundle.cam_poses[t],
                    &self.bundle.camera,
                );
                (
                    mask_loss(
                        &render.mask,
                        &self.bundle.object_masks[t],
                        &self.bundle.hand_masks[t],
                    )
                    .expect("bundle dimensions validated"),
                    depth_loss(
                        &render.depth,
                        &self.masked_object_depths[t],
                        &self.bundle.hand_masks[t],
                    )
                    .expect("bundle dimensions validated"),
                )
            } else {
                (0.0, 0.0)
            };
            Arc::new(ObjEval {
                verts,
                scene_pen,
                rest,
                mask,
                depth,
            })
        })
    }

    fn terms(&self, obj_poses: &[Pose6D], scale: f64, hands: &[HandParams]) -> JointTerms {
        let frames = obj_poses.len();
        let mut terms = JointTerms::default();
        let mut tip_seq: Vec<Vec<Vector3<f64>>> = vec![Vec::new(); frames];
        let mut obj_seq: Vec<Vec<Vector3<f64>>> = vec![Vec::new(); frames];
        for t in 0..frames {
            let hand = self.hand_eval(t, &hands[t]);
            let obj = self.obj_eval(t, &obj_poses[t], scale);
            terms.mask_hand += hand.mask;
            terms.mask_obj += obj.mask;
            terms.depth_hand += hand.depth;
            terms.depth_obj += obj.depth;
            if self.strided[t] {
                terms.reproj_2d += hand.reproj;
            }
            terms.hand_pose_reg += hand.theta_reg;
            terms.scene += hand.scene_pen + obj.scene_pen;
            terms.rest += obj.rest;
            if self.in_window(t) {
                terms.contact += contact_loss(&hand.tips, &obj.verts, t, self.window);
                terms.collision += hand
                    .verts
                    .iter()
                    .map(|v| (-self.object_tsdf.eval_world(&obj_poses[t], scale, v)).max(0.0))
                    .sum::<f64>();
                tip_seq[t] = hand.tips.clone();
                obj_seq[t] = obj.verts.clone();
            }
        }
        terms.stable_grasp = stable_grasp_loss(&tip_seq, &obj_seq, self.window);
        terms
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::GripperSpec;
    use crate::geometry::{box_mesh, BinaryMask, PinholeCamera, INVALID_DEPTH};
    use crate::hand::KEYPOINT_NAMES;
    use crate::rasterizer::rasterize;
    use nalgebra::Matrix3;
    use std::collections::BTreeMap;

    fn camera() -> PinholeCamera {
        PinholeCamera::new(120.0, 120.0, 48.0, 48.0, 96, 96)
    }

    /// Axis-aligned box tessellated n x n per face, so nearest-vertex
    /// distances in the contact term stay well below the box extent.
    fn dense_box(min: Vector3<f64>, max: Vector3<f64>, n: usize) -> TriMesh {
        let mut vertices: Vec<Vector3<f64>> = Vec::new();
        let mut faces: Vec<[usize; 3]> = Vec::new();
        for axis in 0..3 {
            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
            for &at in &[min[axis], max[axis]] {
                let base = vertices.len();
                for i in 0..=n {
                    for j in 0..=n {
                        let mut p = Vector3::zeros();
                        p[axis] = at;
                        p[u] = min[u] + (max[u] - min[u]) * i as f64 / n as f64;
                        p[v] = min[v] + (max[v] - min[v]) * j as f64 / n as f64;
                        vertices.push(p);
                    }
                }
                for i in 0..n {
                    for j in 0..n {
                        let a = base + i * (n + 1) + j;
                        let b = a + n + 1;
                        faces.push([a, b, a + 1]);
                        faces.push([b, b + 1, a + 1]);
                    }
                }
            }
        }
        TriMesh::new(vertices, faces).unwrap()
    }

    struct Scene {
        bundle: DemoBundle,
        object_mesh: TriMesh,
        scene_tsdf: TsdfGrid,
        scene_points: Vec<Vector3<f64>>,
        truth: JointState,
    }

    const FRAMES: usize = 8;
    const WINDOW: (usize, usize) = (2, 5);

    fn truth_theta() -> Vec<f64> {
        // A fairly open pinch: mild flexion, thumb abducted, so the
        // tip-to-tip spread comfortably straddles the test object.
        vec![0.6, 0.2, 0.3, 0.2, 0.1, 0.25, 0.2, 0.1]
    }

    /// Object rests on a table, is carried between frames 2 and 5, and
    /// rests again. The hand pinches the object across its side faces
    /// with a small clearance (truth is collision-free), holds a constant
    /// grip during the window, and retreats upward outside it.
    /// Observations are rendered from the truth with mutual z-buffer
    /// occlusion.
    fn make_scene() -> Scene {
        let camera = camera();
        let table = box_mesh(Vector3::new(-0.4, 0.12, 0.2), Vector3::new(0.4, 0.2, 1.0));
        let scene_tsdf = build_tsdf_default(&table).unwrap();
        let mut scene_points = Vec::new();
        for i in 0..16 {
            for j in 0..16 {
                scene_points.push(Vector3::new(
                    -0.16 + 0.02 * i as f64,
                    0.12,
                    0.40 + 0.02 * j as f64,
                ));
            }
        }

        // Probe the hand once to find where the tips actually are, then
        // build the grasp around them: rotate the tip-to-tip axis level
        // (fingers pointing down, +y) and size the box to straddle the
        // pinch, nudging it down until every hand vertex clears it.
        let theta = truth_theta();
        let probe = hand_forward(&HandParams {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            theta: theta.clone(),
            beta: vec![0.0, 0.0],
        })
        .unwrap();
        let thumb = probe.keypoints.get("thumb_tip").unwrap();
        let index = probe.keypoints.get("index_tip").unwrap();
        let spread = index - thumb;
        // Two z-rotations level the tip axis onto x; take the one that
        // leaves the fingers pointing toward the table (+y).
        let phi = spread.y.atan2(spread.x);
        let mut angle = std::f64::consts::PI - phi;
        if angle.cos() < 0.0 {
            angle = -phi;
        }
        let (s, c) = angle.sin_cos();
        let rotation = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        assert!(
            (rotation * Vector3::y()).y > 0.0,
            "fingers should point toward the table (+y)"
        );
        let tip_mid = (rotation * thumb + rotation * index) / 2.0;
        // Hand vertices relative to the tip midpoint, tips level in x.
        let rel: Vec<Vector3<f64>> = probe
            .mesh
            .vertices
            .iter()
            .map(|v| rotation * v - tip_mid)
            .collect();
        let half_x = spread.norm() / 2.0 - 0.017;
        assert!(half_x > 0.015, "pinch too closed for the test object: {half_x}");
        let half = Vector3::new(half_x, 0.02, 0.015);
        // Smallest clearance of any hand vertex from an axis-aligned box
        // centered at `center` (positive: outside by that much).
        let clearance = |offset_y: f64, center_y: f64| -> f64 {
            rel.iter()
                .map(|v| {
                    let d = Vector3::new(v.x, v.y + offset_y - center_y, v.z);
                    (d.x.abs() - half.x)
                        .max(d.y.abs() - half.y)
                        .max(d.z.abs() - half.z)
                })
                .fold(f64::INFINITY, f64::min)
        };
        let mut drop = 0.0;
        while clearance(0.0, drop) < 0.003 {
            drop += 0.001;
            assert!(drop < 0.03, "no collision-free grasp placement found");
        }
        // Retreat must stay collision-free too.
        for pb in [0.02, 0.04] {
            assert!(clearance(-pb, drop) >= 0.003);
        }
        let object_mesh = dense_box(-half, half, 5);

        let rest_a = Vector3::new(-0.05, 0.12 - half.y, 0.55);
        let rest_b = Vector3::new(0.07, 0.12 - half.y, 0.55);
        let obj_poses: Vec<Pose6D> = (0..FRAMES)
            .map(|t| {
                let s = ((t as f64 - WINDOW.0 as f64) / (WINDOW.1 - WINDOW.0) as f64)
                    .clamp(0.0, 1.0);
                Pose6D::from_translation(rest_a + s * (rest_b - rest_a))
            })
            .collect();

        let pullback = |t: usize| -> f64 {
            match t {
                0 => 0.04,
                1 => 0.02,
                6 => 0.02,
                _ if t >= 7 => 0.04,
                _ => 0.0,
            }
        };
        let hand: Vec<HandParams> = (0..FRAMES)
            .map(|t| {
                let center = obj_poses[t].translation();
                HandParams {
                    rotation,
                    translation: center - Vector3::new(0.0, drop + pullback(t), 0.0) - tip_mid,
                    theta: theta.clone(),
                    beta: vec![0.0, 0.0],
                }
            })
            .collect();

        let cam_pose = Pose6D::identity();
        let mut object_masks = Vec::new();
        let mut hand_masks = Vec::new();
        let mut depths = Vec::new();
        let mut keypoints = Vec::new();
        for t in 0..FRAMES {
            let hand_out = hand_forward(&hand[t]).unwrap();
            let rh = rasterize(&hand_out.mesh, &Pose6D::identity(), &cam_pose, &camera).unwrap();
            let ro = rasterize(&object_mesh, &obj_poses[t], &cam_pose, &camera).unwrap();
            let mut hm = BinaryMask::zeros(camera.width, camera.height);
            let mut om = BinaryMask::zeros(camera.width, camera.height);
            let mut depth = DepthMap::empty(camera.width, camera.height);
            for y in 0..camera.height {
                for x in 0..camera.width {
                    let hd = rh.depth.get(x, y);
                    let od = ro.depth.get(x, y);
                    let hv = hd != INVALID_DEPTH;
                    let ov = od != INVALID_DEPTH;
                    if hv && (!ov || hd <= od) {
                        hm.set(x, y, 1);
                    }
                    if ov && (!hv || od < hd) {
                        om.set(x, y, 1);
                    }
                    if hv || ov {
                        depth.set(x, y, hd.min(od));
                    }
                }
            }
            object_masks.push(om);
            hand_masks.push(hm);
            depths.push(depth);

            let cam_from_world = cam_pose.invert();
            let mut kp = BTreeMap::new();
            for name in KEYPOINT_NAMES {
                let world = hand_out.keypoints.get(name).unwrap();
                let px = camera.project_point(&cam_from_world.apply(&world), 0).unwrap();
                kp.insert(name.to_string(), [px.x, px.y]);
            }
            keypoints.push(crate::hand::HandObservation {
                keypoints: kp,
                theta_prior: theta.clone(),
            });
        }

        let bundle = DemoBundle {
            camera,
            cam_poses: vec![cam_pose; FRAMES],
            object_masks,
            hand_masks,
            depths,
            keypoints,
            object_mesh: object_mesh.clone(),
            scene_mesh: table,
            gripper_mesh: box_mesh(Vector3::new(-0.01, -0.01, 0.0), Vector3::new(0.01, 0.01, 0.1)),
            gripper_spec: GripperSpec {
                tcp_offset: [0.0, 0.0, 0.1],
                base_offset: [0.0, 0.0, 0.0],
                closing_axis: [1.0, 0.0, 0.0],
                max_width: 0.08,
                finger_vertex_ids: [vec![0], vec![1]],
            },
            init_pose: None,
        };
        let truth = JointState {
            object: ObjectTrajectory {
                scale: 1.0,
                contact: Some(WINDOW),
                poses: obj_poses,
            },
            hand,
        };
        Scene {
            bundle,
            object_mesh,
            scene_tsdf,
            scene_points,
            truth,
        }
    }

    fn no_geometry_weights() -> LossWeights {
        LossWeights {
            lambda_contact: 0.0,
            lambda_collision: 0.0,
            lambda_stable_grasp: 0.0,
            lambda_scene: 0.0,
            lambda_rest: 0.0,
            ..LossWeights::default()
        }
    }

    fn mean_tip_distance(scene: &Scene, state: &JointState) -> f64 {
        let (t_s, t_e) = WINDOW;
        let mut total = 0.0;
        let mut count = 0;
        for t in t_s..=t_e {
            let out = hand_forward(&state.hand[t]).unwrap();
            let verts: Vec<Vector3<f64>> = scene
                .object_mesh
                .vertices
                .iter()
                .map(|v| state.object.poses[t].apply(&(v * state.object.scale)))
                .collect();
            for &i in &out.tip_vertex_ids {
                let tip = out.mesh.vertices[i];
                total += verts
                    .iter()
                    .map(|o| (tip - o).norm())
                    .fold(f64::INFINITY, f64::min);
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn truth_is_a_bitwise_fixed_point_without_geometric_terms() {
        let scene = make_scene();
        let weights = no_geometry_weights();
        let config = OptimConfig {
            max_iters: 20,
            ..OptimConfig::default()
        };
        let options = JointOptions {
            frame_stride: 1,
            ..JointOptions::default()
        };
        let (state, report) = refine_joint(
            &scene.truth,
            &scene.bundle,
            &scene.object_mesh,
            &scene.scene_tsdf,
            &scene.scene_points,
            &weights,
            &config,
            &options,
        )
        .unwrap();
        assert_eq!(report.initial_obj, 0.0);
        assert_eq!(report.final_obj, 0.0);
        for t in 0..FRAMES {
            assert_eq!(
                state.object.poses[t].translation(),
                scene.truth.object.poses[t].translation()
            );
            assert_eq!(
                state.object.poses[t].rotation(),
                scene.truth.object.poses[t].rotation()
            );
            assert_eq!(state.hand[t].translation, scene.truth.hand[t].translation);
            assert_eq!(state.hand[t].theta, scene.truth.hand[t].theta);
        }
        assert_eq!(state.object.scale, 1.0);
    }

    #[test]
    fn visual_objective_matches_direct_loss_sums() {
        let scene = make_scene();
        let weights = no_geometry_weights();
        let options = JointOptions {
            frame_stride: 1,
            ..JointOptions::default()
        };

        // Corrupt the state so every remaining term is nonzero.
        let mut state = scene.truth.clone();
        for t in 0..FRAMES {
            let t_new = state.object.poses[t].translation() + Vector3::new(0.004, -0.002, 0.003);
            state.object.poses[t] = Pose6D::from_parts_unchecked(*state.object.poses[t].rotation(), t_new);
            state.hand[t].translation += Vector3::new(-0.003, 0.005, 0.002);
            state.hand[t].theta[1] += 0.05;
        }

        let terms = evaluate_joint_terms(
            &state,
            &scene.bundle,
            &scene.object_mesh,
            &scene.scene_tsdf,
            &scene.scene_points,
            &options,
        )
        .unwrap();

        let cam = &scene.bundle.camera;
        let cam_from_world = scene.bundle.cam_poses[0].invert();
        let mut direct = 0.0;
        for t in 0..FRAMES {
            let out = hand_forward(&state.hand[t]).unwrap();
            let rh = rasterize_allow_empty(
                &out.mesh,
                &Pose6D::identity(),
                &scene.bundle.cam_poses[t],
                cam,
            );
            let ro = rasterize_allow_empty(
                &scene.object_mesh.scaled(state.object.scale),
                &state.object.poses[t],
                &scene.bundle.cam_poses[t],
                cam,
            );
            let hand_depth = scene.bundle.depths[t].masked(&scene.bundle.hand_masks[t]);
            let obj_depth = scene.bundle.depths[t].masked(&scene.bundle.object_masks[t]);
            direct += weights.lambda_mask
                * mask_loss(
                    &rh.mask,
                    &scene.bundle.hand_masks[t],
                    &scene.bundle.object_masks[t],
                )
                .unwrap();
            direct += weights.lambda_mask_obj
                * mask_loss(
                    &ro.mask,
                    &scene.bundle.object_masks[t],
                    &scene.bundle.hand_masks[t],
                )
                .unwrap();
            direct += weights.lambda_depth
                * depth_loss(&rh.depth, &hand_depth, &scene.bundle.object_masks[t]).unwrap();
            direct += weights.lambda_depth_obj
                * depth_loss(&ro.depth, &obj_depth, &scene.bundle.hand_masks[t]).unwrap();
            direct += weights.lambda_2d
                * keypoint_reprojection(
                    &scene.bundle.keypoints[t],
                    &out.keypoints,
                    cam,
                    &cam_from_world,
                );
            direct += weights.lambda_hand_pose
                * pose_reg_loss(&state.hand[t].theta, &scene.bundle.keypoints[t].theta_prior);
        }
        assert!(direct > 0.0);
        assert!((terms.weighted_total(&weights) - direct).abs() < 1e-12);
    }

    #[test]
    fn refinement_recovers_interpenetrating_grasp() {
        let scene = make_scene();
        let weights = LossWeights::default();
        let options = JointOptions {
            frame_stride: 1,
            ..JointOptions::default()
        };
        let config = OptimConfig {
            max_iters: 60,
            ..OptimConfig::default()
        };

        // Corrupt the object poses, then slide the whole hand along the
        // pinch axis until the leading fingertip sinks 2 mm through the
        // shifted object's side face. The distance to the face depends on
        // where the leveling roll leaves the finger vertices, so measure
        // it against the corrupted pose instead of guessing.
        let mut state0 = scene.truth.clone();
        for t in 0..FRAMES {
            let t_new = state0.object.poses[t].translation() + Vector3::new(0.003, -0.002, 0.003);
            state0.object.poses[t] =
                Pose6D::from_parts_unchecked(*state0.object.poses[t].rotation(), t_new);
        }
        let half = scene.object_mesh.aabb().max;
        let c = *state0.object.poses[3].translation();
        let probe = hand_forward(&state0.hand[3]).unwrap();
        let gap = probe
            .mesh
            .vertices
            .iter()
            .filter(|v| {
                v.x >= c.x + half.x
                    && (v.y - c.y).abs() < half.y - 0.0025
                    && (v.z - c.z).abs() < half.z - 0.0025
            })
            .map(|v| v.x - (c.x + half.x))
            .fold(f64::INFINITY, f64::min);
        assert!(gap > 0.0 && gap < 0.02, "pinch gap {gap}");
        let slide = gap + 0.002;
        for t in 0..FRAMES {
            state0.hand[t].translation += Vector3::new(-slide, 0.0, 0.0);
        }

        let initial_terms = evaluate_joint_terms(
            &state0,
            &scene.bundle,
            &scene.object_mesh,
            &scene.scene_tsdf,
            &scene.scene_points,
            &options,
        )
        .unwrap();
        assert!(initial_terms.collision > 1e-4, "setup should interpenetrate");

        let (state, report) = refine_joint(
            &state0,
            &scene.bundle,
            &scene.object_mesh,
            &scene.scene_tsdf,
            &scene.scene_points,
            &weights,
            &config,
            &options,
        )
        .unwrap();

        assert!(
            report.final_obj <= 0.5 * report.initial_obj,
            "objective {} -> {}",
            report.initial_obj,
            report.final_obj
        );
        for pair in report.trace.windows(2) {
            assert!(pair[1] <= pair[0]);
        }

        let final_terms = evaluate_joint_terms(
            &state,
            &scene.bundle,
            &scene.object_mesh,
            &scene.scene_tsdf,
            &scene.scene_points,
            &options,
        )
        .unwrap();
        assert!(final_terms.collision < 1e-6, "collision {}", final_terms.collision);
        assert!(
            (final_terms.weighted_total(&weights) - report.final_obj).abs() < 1e-9,
            "reported {} vs re-summed {}",
            report.final_obj,
            final_terms.weighted_total(&weights)
        );

        let d0 = mean_tip_distance(&scene, &state0);
        let d1 = mean_tip_distance(&scene, &state);
        assert!(d1 <= d0 + 1e-9, "tip distance {d0} -> {d1}");

        // Stationary segments are tied exactly, not approximately.
        let (t_s, t_e) = WINDOW;
        for t in 0..=t_s {
            assert_eq!(
                state.object.poses[t].translation(),
                state.object.poses[0].translation()
            );
            assert_eq!(state.object.poses[t].rotation(), state.object.poses[0].rotation());
        }
        for t in t_e..FRAMES {
            assert_eq!(
                state.object.poses[t].translation(),
                state.object.poses[FRAMES - 1].translation()
            );
            assert_eq!(
                state.object.poses[t].rotation(),
                state.object.poses[FRAMES - 1].rotation()
            );
        }
    }

    #[test]
    fn missing_contact_window_is_rejected() {
        let scene = make_scene();
        let mut state = scene.truth.clone();
        state.object.contact = None;
        let err = refine_joint(
            &state,
            &scene.bundle,
            &scene.object_mesh,
            &scene.scene_tsdf,
            &scene.scene_points,
            &LossWeights::default(),
            &OptimConfig::default(),
            &JointOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, JointError::MissingContactWindow));
    }

    #[test]
    fn frame_count_mismatch_is_rejected() {
        let scene = make_scene();
        let mut state = scene.truth.clone();
        state.hand.pop();
        let err = refine_joint(
            &state,
            &scene.bundle,
            &scene.object_mesh,
            &scene.scene_tsdf,
            &scene.scene_points,
            &LossWeights::default(),
            &OptimConfig::default(),
            &JointOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            JointError::LengthMismatch {
                what: "hand parameters",
                ..
            }
        ));
    }

    #[test]
    fn joint_state_json_round_trips() {
        let scene = make_scene();
        let json = serde_json::to_string(&scene.truth).unwrap();
        let back: JointState = serde_json::from_str(&json).unwrap();
        assert_eq!(back.object.contact, Some(WINDOW));
        assert_eq!(back.hand.len(), FRAMES);
        assert_eq!(back.hand[3].theta, scene.truth.hand[3].theta);
        assert_eq!(
            back.object.poses[4].translation(),
            scene.truth.object.poses[4].translation()
        );
    }
}
