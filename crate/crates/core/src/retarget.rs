//! Hand-to-gripper retargeting: keyframe extraction, fingertip-to-TCP pose
//! mapping, pre-contact collision avoidance, grasp refinement, rigid object
//! following, trajectory interpolation, wrist-view rendering, and geometric
//! augmentation of finished demonstrations.
//!
//! All object TSDFs passed to the per-frame solvers here live in world
//! coordinates (built from the posed object mesh); the object is stationary
//! over the segments those solvers touch, so one grid serves every frame.

use std::io;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::GripperSpec;
use crate::geometry::{
    interpolate_pose, orthonormalize, so3_exp, MeshError, PinholeCamera, Pose6D, TriMesh,
};
use crate::hand::HandOutput;
use crate::losses::{funnel_loss, funnel_weights, se3_smoothness_loss, LossWeights};
use crate::optim::{
    minimize_annealed, ConvergedBy, OptimConfig, OptimError, OptimReport, ParamVector,
};
use crate::rasterizer::{rasterize_meshes, RenderError, RenderOutput};
use crate::sdf::{build_tsdf_default, SdfError, TsdfGrid};
use crate::util::seeded_rng;

/// Contact points harvested around each fingertip for grasp refinement.
pub const CONTACT_POINTS_PER_TIP: usize = 50;

/// Maximum grasp-frame penetration an augmentation pass may introduce.
const AUGMENT_PENETRATION_LIMIT: f64 = 1e-3;
const AUGMENT_MAX_TRIES: usize = 10;

const PRECONTACT_PHASES: usize = 2;
const GRASP_PHASES: usize = 3;

#[derive(Debug, Error)]
pub enum RetargetError {
    #[error("thumb and index tips coincide; closing axis undefined")]
    DegenerateHand,
    #[error("invalid gripper model: {0}")]
    BadGripper(&'static str),
    #[error("invalid augmentation config: {0}")]
    BadConfig(&'static str),
    #[error("invalid trajectory: {0}")]
    BadTrajectory(&'static str),
    #[error("augmentation pass {pass} rejected: grasp penetration above 1 mm after {tries} resamples")]
    AugmentationRejected { pass: usize, tries: usize },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Sdf(#[from] SdfError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("gripper sidecar: {0}")]
    Json(#[from] serde_json::Error),
}

/// Parallel-jaw gripper geometry. The mesh is authored fully open
/// (jaw gap = `max_width`); `opened_mesh` translates the two finger vertex
/// sets toward each other along `closing_axis` to reach a narrower width.
#[derive(Debug, Clone)]
pub struct GripperModel {
    pub mesh: TriMesh,
    pub tcp_offset: Vector3<f64>,
    pub base_offset: Vector3<f64>,
    pub closing_axis: Vector3<f64>,
    pub max_width: f64,
    pub finger_vertex_ids: [Vec<usize>; 2],
    // +1 for the jaw on the +closing_axis side, -1 for the other;
    // inferred from the mesh so asset order does not matter.
    jaw_signs: [f64; 2],
}

impl GripperModel {
    pub fn new(mesh: TriMesh, spec: &GripperSpec) -> Result<Self, RetargetError> {
        if !(spec.max_width > 0.0) {
            return Err(RetargetError::BadGripper("max_width must be positive"));
        }
        let tcp_offset = Vector3::from(spec.tcp_offset);
        let base_offset = Vector3::from(spec.base_offset);
        if (tcp_offset - base_offset).norm() < 1e-12 {
            return Err(RetargetError::BadGripper("tcp_offset equals base_offset"));
        }
        let axis = Vector3::from(spec.closing_axis);
        if axis.norm() < 1e-9 {
            return Err(RetargetError::BadGripper("closing_axis has zero length"));
        }
        let closing_axis = axis.normalize();
        for ids in &spec.finger_vertex_ids {
            if ids.is_empty() {
                return Err(RetargetError::BadGripper("empty finger vertex set"));
            }
            if ids.iter().any(|&i| i >= mesh.vertices.len()) {
                return Err(RetargetError::BadGripper("finger vertex id out of range"));
            }
        }
        let mean_along = |ids: &[usize]| -> f64 {
            ids.iter().map(|&i| mesh.vertices[i].dot(&closing_axis)).sum::<f64>()
                / ids.len() as f64
        };
        let sign0 = if mean_along(&spec.finger_vertex_ids[0])
            >= mean_along(&spec.finger_vertex_ids[1])
        {
            1.0
        } else {
            -1.0
        };
        Ok(GripperModel {
            mesh,
            tcp_offset,
            base_offset,
            closing_axis,
            max_width: spec.max_width,
            finger_vertex_ids: spec.finger_vertex_ids.clone(),
            jaw_signs: [sign0, -sign0],
        })
    }

    pub fn load(
        mesh_path: impl AsRef<Path>,
        spec_path: impl AsRef<Path>,
    ) -> Result<Self, RetargetError> {
        let mesh = TriMesh::read_ply(std::fs::File::open(mesh_path)?)?;
        let spec: GripperSpec = serde_json::from_reader(std::fs::File::open(spec_path)?)?;
        GripperModel::new(mesh, &spec)
    }

    /// Per-vertex displacement closing the jaws from `max_width` to `width`,
    /// in the gripper frame.
    fn jaw_shift(&self, jaw: usize, width: f64) -> Vector3<f64> {
        let width = width.clamp(0.0, self.max_width);
        -self.jaw_signs[jaw] * 0.5 * (self.max_width - width) * self.closing_axis
    }

    /// Gripper mesh with the jaws set to `width` (clamped to the valid range).
    pub fn opened_mesh(&self, width: f64) -> TriMesh {
        let mut mesh = self.mesh.clone();
        for (jaw, ids) in self.finger_vertex_ids.iter().enumerate() {
            let shift = self.jaw_shift(jaw, width);
            for &i in ids {
                mesh.vertices[i] += shift;
            }
        }
        mesh
    }

    /// Both jaws' vertices at the given width, in the gripper frame.
    pub fn finger_vertices(&self, width: f64) -> Vec<Vector3<f64>> {
        let mut out = Vec::with_capacity(
            self.finger_vertex_ids[0].len() + self.finger_vertex_ids[1].len(),
        );
        for (jaw, ids) in self.finger_vertex_ids.iter().enumerate() {
            let shift = self.jaw_shift(jaw, width);
            out.extend(ids.iter().map(|&i| self.mesh.vertices[i] + shift));
        }
        out
    }

    /// Both jaws' vertices at the given width, posed into the world.
    pub fn finger_vertices_world(&self, pose: &Pose6D, width: f64) -> Vec<Vector3<f64>> {
        self.finger_vertices(width).iter().map(|v| pose.apply(v)).collect()
    }
}

/// End-effector state at one frame: gripper pose in the world, jaw width,
/// and the commanded open/closed flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EePose {
    pub pose: Pose6D,
    pub width: f64,
    pub gripper_closed: bool,
}

/// A full retargeted end-effector trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EeTrajectory {
    pub frames: Vec<EePose>,
    pub keyframe_ids: Vec<usize>,
    pub contact: (usize, usize),
}

impl EeTrajectory {
    pub fn validate(&self) -> Result<(), RetargetError> {
        if self.frames.is_empty() {
            return Err(RetargetError::BadTrajectory("no frames"));
        }
        if self.keyframe_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(RetargetError::BadTrajectory("keyframe ids not strictly increasing"));
        }
        if self.keyframe_ids.first() != Some(&0)
            || self.keyframe_ids.last() != Some(&(self.frames.len() - 1))
        {
            return Err(RetargetError::BadTrajectory("endpoints must be keyframes"));
        }
        let (t_s, t_e) = self.contact;
        if t_s > t_e || t_e >= self.frames.len() {
            return Err(RetargetError::BadTrajectory("contact window out of range"));
        }
        Ok(())
    }

    pub fn write_json<W: io::Write>(&self, writer: W) -> Result<(), RetargetError> {
        serde_json::to_writer_pretty(writer, self)?;
        Ok(())
    }

    pub fn read_json<R: io::Read>(reader: R) -> Result<Self, RetargetError> {
        let traj: EeTrajectory = serde_json::from_reader(reader)?;
        traj.validate()?;
        Ok(traj)
    }

    /// Flat CSV for downstream policy tooling:
    /// frame, tx, ty, tz, qw, qx, qy, qz, width, closed. The quaternion is
    /// sign-canonicalized to qw >= 0.
    pub fn write_csv<W: io::Write>(&self, mut writer: W) -> io::Result<()> {
        writeln!(writer, "frame,tx,ty,tz,qw,qx,qy,qz,width,closed")?;
        for (t, ee) in self.frames.iter().enumerate() {
            let p = ee.pose.translation();
            let q = quat_wxyz(ee.pose.rotation());
            writeln!(
                writer,
                "{},{},{},{},{},{},{},{},{},{}",
                t,
                p.x,
                p.y,
                p.z,
                q[0],
                q[1],
                q[2],
                q[3],
                ee.width,
                u8::from(ee.gripper_closed)
            )?;
        }
        Ok(())
    }
}

fn quat_wxyz(rotation: &Matrix3<f64>) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*rotation));
    let mut out = [q.w, q.i, q.j, q.k];
    if out[0] < 0.0 {
        for c in &mut out {
            *c = -*c;
        }
    }
    out
}

/// Geometric augmentation ranges. All ranges are half-widths of symmetric
/// uniform distributions except `scene_scale_range`, which is an absolute
/// interval; zero ranges (and a unit scale interval) reproduce the input
/// exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub object_translation_range: f64,
    pub gripper_pose_noise: (f64, f64),
    pub scene_scale_range: (f64, f64),
    pub camera_intrinsic_jitter: f64,
    pub camera_extrinsic_noise: (f64, f64),
    pub image_noise_sigma: f64,
    pub passes: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            object_translation_range: 0.0,
            gripper_pose_noise: (0.0, 0.0),
            scene_scale_range: (1.0, 1.0),
            camera_intrinsic_jitter: 0.0,
            camera_extrinsic_noise: (0.0, 0.0),
            image_noise_sigma: 0.0,
            passes: 10,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), RetargetError> {
        let nonneg = [
            self.object_translation_range,
            self.gripper_pose_noise.0,
            self.gripper_pose_noise.1,
            self.camera_intrinsic_jitter,
            self.camera_extrinsic_noise.0,
            self.camera_extrinsic_noise.1,
            self.image_noise_sigma,
        ];
        if nonneg.iter().any(|r| !(*r >= 0.0)) {
            return Err(RetargetError::BadConfig("ranges must be non-negative"));
        }
        let (lo, hi) = self.scene_scale_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(RetargetError::BadConfig("scale interval must be positive"));
        }
        Ok(())
    }
}

/// Everything a wrist-view render of one demonstration needs, bundled so
/// augmentation can transform it wholesale.
#[derive(Debug, Clone)]
pub struct RetargetedDemo {
    pub ee: EeTrajectory,
    /// World object pose per frame, same length as `ee.frames`.
    pub object_poses: Vec<Pose6D>,
    /// Metric-scale object mesh in its body frame.
    pub object_mesh: TriMesh,
    pub scene_mesh: TriMesh,
    pub camera: PinholeCamera,
    /// Camera pose in the gripper frame.
    pub wrist_offset: Pose6D,
    /// Recorded for the downstream renderer; geometry is untouched.
    pub image_noise_sigma: f64,
}

/// Evenly spaced keyframes plus the contact endpoints and both trajectory
/// endpoints: {0, spacing, 2 spacing, ...} ∪ {t_s, t_e, T-1}.
pub fn extract_keyframes(frame_count: usize, spacing: usize, contact: (usize, usize)) -> Vec<usize> {
    assert!(spacing >= 1, "keyframe spacing must be at least 1");
    assert!(frame_count >= 1);
    let mut ids: Vec<usize> = (0..frame_count).step_by(spacing).collect();
    ids.push(contact.0);
    ids.push(contact.1);
    ids.push(frame_count - 1);
    ids.retain(|&t| t < frame_count);
    ids.sort_unstable();
    ids.dedup();
    ids
}

// Minimum-angle rotation taking `from` onto `to` (both unit); falls back to
// a half-turn about a perpendicular axis when they are antiparallel.
fn rotation_taking(from: &Vector3<f64>, to: &Vector3<f64>) -> Matrix3<f64> {
    if let Some(r) = Rotation3::rotation_between(from, to) {
        return *r.matrix();
    }
    let helper = if from.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let perp = from.cross(&helper).normalize();
    so3_exp(&(perp * std::f64::consts::PI))
}

/// Map a hand state to a gripper pose: the TCP lands on the fingertip
/// midpoint, the closing axis lies along the tip-to-tip line, and the
/// rotation about that line (and the line's sign) minimizes the distance
/// from the gripper base to the MCP midpoint. Width is the fingertip
/// separation clamped to the jaw range; the gripper is reported open.
pub fn map_hand_to_ee(hand: &HandOutput, gripper: &GripperModel) -> Result<EePose, RetargetError> {
    let kp = &hand.keypoints;
    let sep = kp.index_tip - kp.thumb_tip;
    if sep.norm() < 1e-6 {
        return Err(RetargetError::DegenerateHand);
    }
    let h_tcp = (kp.thumb_tip + kp.index_tip) / 2.0;
    let h_base = (kp.thumb_mcp + kp.index_mcp) / 2.0;
    let dir = sep.normalize();
    let arm = gripper.base_offset - gripper.tcp_offset;

    let mut best: Option<(f64, Matrix3<f64>)> = None;
    for sign in [1.0, -1.0] {
        let target = dir * sign;
        let r0 = rotation_taking(&gripper.closing_axis, &target);
        let u = r0 * arm;
        let u_perp = u - target * u.dot(&target);
        let v = h_base - h_tcp;
        let v_perp = v - target * v.dot(&target);
        let rotation = if u_perp.norm() < 1e-12 || v_perp.norm() < 1e-12 {
            // The base circle degenerates to a point or the target sits on
            // the closing line; every angle attains the minimum.
            r0
        } else {
            let psi = target.cross(&u_perp).dot(&v_perp).atan2(u_perp.dot(&v_perp));
            so3_exp(&(target * psi)) * r0
        };
        let base_world = h_tcp + rotation * arm;
        let d = (base_world - h_base).norm();
        // Margin keeps the thumb-to-index orientation on exact ties (a base
        // directly behind the TCP ties for any tip line), where float noise
        // would otherwise flip the gripper between nearby hand states.
        if best.as_ref().map_or(true, |(bd, _)| d + 1e-9 < *bd) {
            best = Some((d, rotation));
        }
    }
    let (_, rotation) = best.expect("both sign branches evaluated");
    let rotation = orthonormalize(&rotation);
    let translation = h_tcp - rotation * gripper.tcp_offset;
    Ok(EePose {
        pose: Pose6D::from_parts_unchecked(rotation, translation),
        width: sep.norm().clamp(0.0, gripper.max_width),
        gripper_closed: false,
    })
}

/// Smooth the pre-contact approach out of collision with the object.
///
/// Minimizes funnel deviation from the reference translations (cubic time
/// weights from `w_min` to `w_max`), jaw-vertex penetration of the
/// world-frame object TSDF, and pose smoothness. A reference whose jaw
/// vertices never penetrate is returned unchanged: there is nothing to
/// avoid, and re-solving would only trade reference fidelity for smoothing.
/// The collision hinge activates one voxel outside the surface so converged
/// trajectories are strictly penetration-free.
pub fn optimize_precontact(
    reference: &[EePose],
    object_tsdf: &TsdfGrid,
    gripper: &GripperModel,
    weights: &LossWeights,
    config: &OptimConfig,
    w_min: f64,
    w_max: f64,
) -> Result<(Vec<EePose>, OptimReport), RetargetError> {
    if reference.is_empty() {
        return Err(RetargetError::BadTrajectory("empty pre-contact window"));
    }
    let n = reference.len();
    let finger_sets: Vec<Vec<Vector3<f64>>> =
        reference.iter().map(|ee| gripper.finger_vertices(ee.width)).collect();
    let margin = object_tsdf.voxel_size();

    let collision = |poses: &[Pose6D]| -> f64 {
        let mut sum = 0.0;
        for (pose, verts) in poses.iter().zip(&finger_sets) {
            for v in verts {
                sum += (margin - object_tsdf.eval(&pose.apply(v))).max(0.0);
            }
        }
        sum
    };
    let true_penetration = |poses: &[Pose6D]| -> f64 {
        poses
            .iter()
            .zip(&finger_sets)
            .map(|(pose, verts)| {
                let world: Vec<Vector3<f64>> = verts.iter().map(|v| pose.apply(v)).collect();
                object_tsdf.penetration_loss(&world)
            })
            .sum()
    };

    let ref_poses: Vec<Pose6D> = reference.iter().map(|ee| ee.pose).collect();
    let ref_translations: Vec<Vector3<f64>> =
        ref_poses.iter().map(|p| *p.translation()).collect();
    let fw = if n >= 2 { funnel_weights(n, w_min, w_max) } else { vec![1.0] };

    let objective_of = |poses: &[Pose6D]| -> f64 {
        let translations: Vec<Vector3<f64>> = poses.iter().map(|p| *p.translation()).collect();
        let funnel = funnel_loss(&translations, &ref_translations, &fw)
            .expect("normalized funnel weights sum to 1");
        weights.lambda_funnel * funnel
            + weights.lambda_collision * collision(poses)
            + weights.lambda_smooth * se3_smoothness_loss(poses)
    };

    if true_penetration(&ref_poses) == 0.0 {
        let obj = objective_of(&ref_poses);
        let report = OptimReport {
            initial_obj: obj,
            final_obj: obj,
            iterations: 0,
            converged_by: ConvergedBy::ObjTol,
            trace: vec![obj],
        };
        return Ok((reference.to_vec(), report));
    }

    let mut params = ParamVector::new();
    let blocks: Vec<_> = ref_poses.iter().map(|p| params.push_pose(p)).collect();
    let decode = |params: &ParamVector| -> Vec<Pose6D> {
        blocks.iter().map(|b| params.pose(b)).collect()
    };
    let (best, report) = minimize_annealed(
        |p: &ParamVector| objective_of(&decode(p)),
        params,
        config,
        PRECONTACT_PHASES,
    )?;
    let out = decode(&best)
        .into_iter()
        .zip(reference)
        .map(|(pose, ee)| EePose { pose, ..ee.clone() })
        .collect();
    Ok((out, report))
}

/// Refine the grasp-frame gripper pose and width against contact points
/// harvested from the object surface: the nearest object vertices to each
/// fingertip (50 per tip) attract the jaw vertices, the width term closes
/// the jaws, and the TSDF hinge keeps them outside the object.
pub fn refine_grasp(
    ee0: &EePose,
    hand: &HandOutput,
    object_mesh: &TriMesh,
    object_tsdf: &TsdfGrid,
    gripper: &GripperModel,
    weights: &LossWeights,
    config: &OptimConfig,
) -> Result<(EePose, OptimReport), RetargetError> {
    let contacts = contact_points(object_mesh, hand);

    let mut params = ParamVector::new();
    let pose_block = params.push_pose(&ee0.pose);
    let width_block = params.push_scalar(ee0.width.clamp(0.0, gripper.max_width));

    let objective = |p: &ParamVector| -> f64 {
        let pose = p.pose(&pose_block);
        let width = p.scalar(width_block).clamp(0.0, gripper.max_width);
        let verts = gripper.finger_vertices_world(&pose, width);
        let contact: f64 = verts
            .iter()
            .map(|v| {
                contacts
                    .iter()
                    .map(|c| (v - c).norm_squared())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        weights.lambda_contact * contact
            + weights.lambda_width * width
            + weights.lambda_collision * object_tsdf.penetration_loss(&verts)
    };

    let (best, report) = minimize_annealed(objective, params, config, GRASP_PHASES)?;
    Ok((
        EePose {
            pose: best.pose(&pose_block),
            width: best.scalar(width_block).clamp(0.0, gripper.max_width),
            gripper_closed: true,
        },
        report,
    ))
}

// The 50 object vertices nearest each fingertip (union of both sets). A
// mesh with fewer than 50 vertices contributes everything it has.
fn contact_points(object_mesh: &TriMesh, hand: &HandOutput) -> Vec<Vector3<f64>> {
    if object_mesh.vertices.len() < CONTACT_POINTS_PER_TIP {
        log::warn!(
            "object mesh has {} vertices, fewer than the {} contact points per fingertip; using all",
            object_mesh.vertices.len(),
            CONTACT_POINTS_PER_TIP
        );
    }
    let mut out = Vec::with_capacity(2 * CONTACT_POINTS_PER_TIP);
    for tip in [hand.keypoints.thumb_tip, hand.keypoints.index_tip] {
        let mut order: Vec<usize> = (0..object_mesh.vertices.len()).collect();
        order.sort_by(|&a, &b| {
            let da = (object_mesh.vertices[a] - tip).norm_squared();
            let db = (object_mesh.vertices[b] - tip).norm_squared();
            da.partial_cmp(&db).expect("finite distances").then(a.cmp(&b))
        });
        out.extend(order.iter().take(CONTACT_POINTS_PER_TIP).map(|&i| object_mesh.vertices[i]));
    }
    out
}

/// Propagate the refined grasp through the contact window: the gripper
/// rigidly follows the object, T^ee_t = T^ee_{t_s} (T^obj_{t_s})^-1 T^obj_t,
/// with width and closed-state held at the grasp values. `object_poses[0]`
/// is the object pose at the contact start.
pub fn follow_object(ee_contact: &EePose, object_poses: &[Pose6D]) -> Vec<EePose> {
    assert!(!object_poses.is_empty(), "object pose at contact start required");
    let grasp = ee_contact.pose.compose(&object_poses[0].invert());
    object_poses
        .iter()
        .map(|obj| EePose { pose: grasp.compose(obj), ..ee_contact.clone() })
        .collect()
}

/// Densify keyframes into a full trajectory: geodesic pose interpolation and
/// linear width between consecutive keyframes, exact at the nodes. The
/// closed flag is derived from the contact window (closed on [t_s, t_e]);
/// keyframe flags are ignored.
pub fn interpolate_trajectory(
    keyframes: &[(usize, EePose)],
    frame_count: usize,
    contact: (usize, usize),
) -> Result<EeTrajectory, RetargetError> {
    if keyframes.len() < 2 {
        return Err(RetargetError::BadTrajectory("need at least two keyframes"));
    }
    if keyframes.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(RetargetError::BadTrajectory("keyframe ids not strictly increasing"));
    }
    if keyframes[0].0 != 0 || keyframes[keyframes.len() - 1].0 != frame_count - 1 {
        return Err(RetargetError::BadTrajectory("endpoints must be keyframes"));
    }
    let (t_s, t_e) = contact;
    if t_s > t_e || t_e >= frame_count {
        return Err(RetargetError::BadTrajectory("contact window out of range"));
    }

    let mut frames = Vec::with_capacity(frame_count);
    for pair in keyframes.windows(2) {
        let (ta, ref a) = pair[0];
        let (tb, ref b) = pair[1];
        for t in ta..tb {
            let alpha = (t - ta) as f64 / (tb - ta) as f64;
            frames.push(EePose {
                pose: interpolate_pose(&a.pose, &b.pose, alpha),
                width: a.width * (1.0 - alpha) + b.width * alpha,
                gripper_closed: false,
            });
        }
    }
    frames.push(keyframes[keyframes.len() - 1].1.clone());
    for (t, ee) in frames.iter_mut().enumerate() {
        ee.gripper_closed = t >= t_s && t <= t_e;
    }
    let traj = EeTrajectory {
        frames,
        keyframe_ids: keyframes.iter().map(|(t, _)| *t).collect(),
        contact,
    };
    traj.validate()?;
    Ok(traj)
}

/// Render the wrist camera view for every frame: the camera rides the
/// gripper at `wrist_offset`, and the scene mesh, posed object, and the
/// gripper opened to the frame's width share one z-buffer.
pub fn render_wrist_views(
    trajectory: &EeTrajectory,
    wrist_offset: &Pose6D,
    scene_mesh: &TriMesh,
    object_mesh: &TriMesh,
    object_poses: &[Pose6D],
    gripper: &GripperModel,
    camera: &PinholeCamera,
) -> Result<Vec<RenderOutput>, RetargetError> {
    trajectory.validate()?;
    if object_poses.len() != trajectory.frames.len() {
        return Err(RetargetError::BadTrajectory("object pose count mismatch"));
    }
    trajectory
        .frames
        .par_iter()
        .zip(object_poses)
        .map(|(ee, obj_pose)| {
            let cam_pose = ee.pose.compose(wrist_offset);
            let gripper_mesh = gripper.opened_mesh(ee.width);
            let out = rasterize_meshes(
                &[
                    (scene_mesh, Pose6D::identity()),
                    (object_mesh, *obj_pose),
                    (&gripper_mesh, ee.pose),
                ],
                &cam_pose,
                camera,
            );
            if out.mask.count_ones() == 0 {
                return Err(RetargetError::Render(RenderError::EmptyRender));
            }
            Ok(out)
        })
        .collect()
}

fn random_direction(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

// One sampled geometric perturbation. Zero ranges sample as exact zeros
// (and a degenerate scale interval as exactly its endpoint), so a null
// config leaves every field untouched.
struct AugmentSample {
    object_offset: Vector3<f64>,
    ee_rot: Vector3<f64>,
    ee_trans: Vector3<f64>,
    scale: f64,
    intrinsic: [f64; 4],
    wrist_rot: Vector3<f64>,
    wrist_trans: Vector3<f64>,
}

fn sym_uniform<R: Rng>(rng: &mut R, r: f64) -> f64 {
    if r > 0.0 {
        rng.gen_range(-r..=r)
    } else {
        0.0
    }
}

fn pose_noise<R: Rng>(rng: &mut R, (m, rad): (f64, f64)) -> (Vector3<f64>, Vector3<f64>) {
    let rot = if rad > 0.0 {
        random_direction(rng) * rng.gen_range(0.0..=rad)
    } else {
        Vector3::zeros()
    };
    let trans = if m > 0.0 {
        random_direction(rng) * rng.gen_range(0.0..=m)
    } else {
        Vector3::zeros()
    };
    (rot, trans)
}

impl AugmentSample {
    fn draw<R: Rng>(config: &AugmentConfig, rng: &mut R) -> AugmentSample {
        let sym = sym_uniform::<R>;
        let r = config.object_translation_range;
        let object_offset = Vector3::new(sym(rng, r), 0.0, sym(rng, r));
        let (ee_rot, ee_trans) = pose_noise(rng, config.gripper_pose_noise);
        let (lo, hi) = config.scene_scale_range;
        let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let j = config.camera_intrinsic_jitter;
        let intrinsic = [
            1.0 + sym(rng, j),
            1.0 + sym(rng, j),
            1.0 + sym(rng, j),
            1.0 + sym(rng, j),
        ];
        let (wrist_rot, wrist_trans) = pose_noise(rng, config.camera_extrinsic_noise);
        AugmentSample {
            object_offset,
            ee_rot,
            ee_trans,
            scale,
            intrinsic,
            wrist_rot,
            wrist_trans,
        }
    }
}

fn translate_pose(pose: &Pose6D, delta: &Vector3<f64>) -> Pose6D {
    Pose6D::from_parts_unchecked(*pose.rotation(), pose.translation() + delta)
}

fn apply_sample(
    demo: &RetargetedDemo,
    gripper: &GripperModel,
    sample: &AugmentSample,
) -> RetargetedDemo {
    let mut out = demo.clone();
    let (t_s, _) = out.ee.contact;

    // Object offset: the full trajectory and the post-contact gripper move
    // together (the grasp transform conjugates by a pure translation and
    // stays constant); the approach blends from the untouched start pose.
    if sample.object_offset != Vector3::zeros() {
        for pose in &mut out.object_poses {
            *pose = translate_pose(pose, &sample.object_offset);
        }
        for (t, ee) in out.ee.frames.iter_mut().enumerate() {
            let blend = if t >= t_s { 1.0 } else { t as f64 / t_s as f64 };
            ee.pose = translate_pose(&ee.pose, &(sample.object_offset * blend));
        }
    }

    // Start-pose noise fades to zero at the grasp frame.
    if sample.ee_rot != Vector3::zeros() || sample.ee_trans != Vector3::zeros() {
        for (t, ee) in out.ee.frames.iter_mut().enumerate().take(t_s) {
            let fade = 1.0 - t as f64 / t_s as f64;
            ee.pose = Pose6D::from_parts_unchecked(
                so3_exp(&(sample.ee_rot * fade)) * ee.pose.rotation(),
                ee.pose.translation() + sample.ee_trans * fade,
            );
        }
    }

    // Scene scale multiplies every world translation and mesh vertex. The
    // gripper is physical hardware and keeps its size; jaw widths co-scale
    // (clamped) so parallel grasps keep touching the scaled surfaces.
    if sample.scale != 1.0 {
        let s = sample.scale;
        for pose in &mut out.object_poses {
            *pose = Pose6D::from_parts_unchecked(*pose.rotation(), pose.translation() * s);
        }
        for ee in &mut out.ee.frames {
            ee.pose =
                Pose6D::from_parts_unchecked(*ee.pose.rotation(), ee.pose.translation() * s);
            ee.width = (ee.width * s).clamp(0.0, gripper.max_width);
        }
        out.object_mesh = out.object_mesh.scaled(s);
        out.scene_mesh = out.scene_mesh.scaled(s);
    }

    if sample.intrinsic != [1.0; 4] {
        out.camera.fx *= sample.intrinsic[0];
        out.camera.fy *= sample.intrinsic[1];
        out.camera.cx *= sample.intrinsic[2];
        out.camera.cy *= sample.intrinsic[3];
    }

    if sample.wrist_rot != Vector3::zeros() || sample.wrist_trans != Vector3::zeros() {
        let delta =
            Pose6D::from_parts_unchecked(so3_exp(&sample.wrist_rot), sample.wrist_trans);
        out.wrist_offset = out.wrist_offset.compose(&delta);
    }

    out
}

// Deepest grasp-frame penetration of the jaw vertices into the (possibly
// rescaled) object, in meters.
fn grasp_penetration_depth(demo: &RetargetedDemo, gripper: &GripperModel, tsdf: &TsdfGrid, scale: f64) -> f64 {
    let (t_s, _) = demo.ee.contact;
    let ee = &demo.ee.frames[t_s];
    let obj_pose = &demo.object_poses[t_s];
    gripper
        .finger_vertices_world(&ee.pose, ee.width)
        .iter()
        .map(|v| -tsdf.eval_world(obj_pose, scale, v))
        .fold(0.0, f64::max)
}

/// Produce `config.passes` geometrically perturbed copies of a retargeted
/// demonstration. Each pass draws from its own stream seeded with
/// `seed ⊕ pass`, and resamples (up to 10 times) any draw whose grasp frame
/// would leave the jaws more than 1 mm inside the object.
pub fn augment(
    demo: &RetargetedDemo,
    gripper: &GripperModel,
    config: &AugmentConfig,
) -> Result<Vec<RetargetedDemo>, RetargetError> {
    config.validate()?;
    demo.ee.validate()?;
    if demo.object_poses.len() != demo.ee.frames.len() {
        return Err(RetargetError::BadTrajectory("object pose count mismatch"));
    }
    let tsdf = build_tsdf_default(&demo.object_mesh)?;

    (0..config.passes)
        .into_par_iter()
        .map(|pass| {
            let mut rng = seeded_rng(config.seed ^ pass as u64);
            for _ in 0..AUGMENT_MAX_TRIES {
                let sample = AugmentSample::draw(config, &mut rng);
                let candidate = apply_sample(demo, gripper, &sample);
                let depth =
                    grasp_penetration_depth(&candidate, gripper, &tsdf, sample.scale);
                if depth <= AUGMENT_PENETRATION_LIMIT {
                    let mut out = candidate;
                    out.image_noise_sigma = config.image_noise_sigma;
                    return Ok(out);
                }
            }
            Err(RetargetError::AugmentationRejected { pass, tries: AUGMENT_MAX_TRIES })
        })
        .collect()
}
