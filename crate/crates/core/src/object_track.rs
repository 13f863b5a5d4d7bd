//! Object scale/pose initialization, sequential pose tracking, and
//! contact-window detection.
//!
//! The object is observed through per-frame segmentation masks and depth
//! maps; the hand mask acts as an occluder so pixels covered by the hand
//! never vote. `init_object` solves for a global mesh scale together with
//! the starting pose over the pre-contact frames (where the object is
//! assumed stationary), `track_object` then refines one rigid pose per
//! frame in order, and `detect_contact` extracts the moving window from
//! the resulting pose sequence.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    so3_log, BinaryMask, DepthMap, GrayImage, PinholeCamera, Pose6D, TriMesh,
};
use crate::losses::{depth_loss, feature_loss, mask_loss, FeatureExtractor, LossWeights};
use crate::optim::{minimize_annealed, OptimConfig, OptimError, OptimReport, ParamVector};
use crate::rasterizer::{rasterize, rasterize_allow_empty, RenderError, RASTERIZED_FD_STEP};

/// Frame-to-frame translation threshold (meters) below which the object
/// counts as resting, at 30 Hz input.
pub const DEFAULT_EPS_O: f64 = 0.003;
/// Frame-to-frame rotation threshold (radians) below which the object
/// counts as resting.
pub const DEFAULT_EPS_R: f64 = std::f64::consts::PI / 180.0;
/// Frames of sustained motion (or rest) required before a contact
/// transition is accepted.
pub const DEFAULT_CONTACT_WINDOW: usize = 3;
/// Hand/object mask overlap, as a fraction of the object mask area, above
/// which a frame counts as a grasp candidate.
pub const DEFAULT_OVERLAP_FRAC: f64 = 0.05;
/// Consecutive grasp-candidate frames required before the pre-contact
/// estimate commits.
pub const DEFAULT_OVERLAP_RUN: usize = 3;
/// A frame whose converged objective exceeds this multiple of the median
/// over already-tracked frames is declared lost.
pub const DEFAULT_LOST_MULTIPLE: f64 = 20.0;

/// Tracking quality is only judged against the running median once this
/// many frames contribute to it; earlier frames cannot be declared lost.
const MIN_TRACK_HISTORY: usize = 10;

/// Step-size annealing passes used by both object solvers.
const STEP_PHASES: usize = 3;

/// Lower clamp for the scale parameter during optimization so probe steps
/// can never mirror the mesh through the origin.
pub(crate) const SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ObjectError {
    #[error("initial pose renders no pixels in frame {frame}")]
    EmptyRender { frame: usize },
    #[error(
        "tracking lost at frame {frame}: objective {objective:.3e} exceeds \
         {multiple:.1}x running median {median:.3e}"
    )]
    TrackingLost {
        frame: usize,
        objective: f64,
        median: f64,
        multiple: f64,
    },
    #[error("no motion window found: the object never moves beyond threshold")]
    NoMotion,
    #[error("motion never settles after onset at frame {onset}; last frame is {last}")]
    NoRest { onset: usize, last: usize },
    #[error("hand and object masks never overlap enough to suggest a grasp")]
    NoContactOverlap,
    #[error("{got} frames given, at least {needed} required")]
    TooShort { got: usize, needed: usize },
    #[error("{what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("{what} is {got}x{goth}, camera expects {expw}x{exph}")]
    DimensionMismatch {
        what: &'static str,
        got: usize,
        goth: usize,
        expw: usize,
        exph: usize,
    },
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// A tracked object: per-frame world-from-object poses, the recovered
/// metric scale of the canonical mesh, and (once detected) the contact
/// window during which the hand moves it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectTrajectory {
    pub scale: f64,
    pub contact: Option<(usize, usize)>,
    pub poses: Vec<Pose6D>,
}

impl ObjectTrajectory {
    pub fn frame_count(&self) -> usize {
        self.poses.len()
    }
}

/// Report for one tracked frame: the converged objective and the
/// optimizer trace behind it. Useful for diagnosing drift.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackFrameReport {
    pub frame: usize,
    pub objective: f64,
    pub iterations: usize,
}

fn check_image_dims(
    what: &'static str,
    dims: (usize, usize),
    camera: &PinholeCamera,
) -> Result<(), ObjectError> {
    if dims.0 != camera.width || dims.1 != camera.height {
        return Err(ObjectError::DimensionMismatch {
            what,
            got: dims.0,
            goth: dims.1,
            expw: camera.width,
            exph: camera.height,
        });
    }
    Ok(())
}

fn check_len(what: &'static str, got: usize, expected: usize) -> Result<(), ObjectError> {
    if got != expected {
        return Err(ObjectError::LengthMismatch {
            what,
            got,
            expected,
        });
    }
    Ok(())
}

/// Weighted render-vs-observation objective for one frame. The hand mask
/// occludes both the silhouette and depth terms; the feature term (when an
/// image is supplied) compares patch descriptors of the depth-shaded
/// render against the observed image.
#[allow(clippy::too_many_arguments)]
fn frame_objective(
    mesh: &TriMesh,
    pose: &Pose6D,
    object_mask: &BinaryMask,
    depth: &DepthMap,
    hand_mask: &BinaryMask,
    image: Option<(&GrayImage, &dyn FeatureExtractor)>,
    camera: &PinholeCamera,
    cam_pose: &Pose6D,
    weights: &LossWeights,
) -> f64 {
    let render = rasterize_allow_empty(mesh, pose, cam_pose, camera);
    let lm = mask_loss(&render.mask, object_mask, hand_mask).expect("dims validated at entry");
    let ld = depth_loss(&render.depth, depth, hand_mask).expect("dims validated at entry");
    let mut total = weights.lambda_mask_obj * lm + weights.lambda_depth_obj * ld;
    if let Some((observed, extractor)) = image {
        let shaded = GrayImage::from_depth(&render.depth);
        total += weights.lambda_feature * feature_loss(&shaded, observed, extractor);
    }
    total
}

/// First frame of the first run of `run_len` consecutive frames in which
/// the hand mask covers more than `overlap_frac` of the object mask. Used
/// to bound the stationary window handed to [`init_object`]: the run
/// itself may already touch the object, but the occluder masking inside
/// the losses absorbs a grazing first contact.
pub fn estimate_precontact_frame(
    object_masks: &[BinaryMask],
    hand_masks: &[BinaryMask],
    overlap_frac: f64,
    run_len: usize,
) -> Result<usize, ObjectError> {
    assert!(run_len >= 1, "run_len must be positive");
    check_len("hand_masks", hand_masks.len(), object_masks.len())?;
    let mut run_start = None;
    let mut run = 0usize;
    for (t, (om, hm)) in object_masks.iter().zip(hand_masks).enumerate() {
        let area = om.count_ones();
        let overlap = om.overlap_count(hm);
        let grasping = area > 0 && (overlap as f64) > overlap_frac * area as f64;
        if grasping {
            if run == 0 {
                run_start = Some(t);
            }
            run += 1;
            if run >= run_len {
                return Ok(run_start.expect("run_start set when run > 0"));
            }
        } else {
            run = 0;
            run_start = None;
        }
    }
    Err(ObjectError::NoContactOverlap)
}

/// Jointly recover the starting pose and the metric scale of the canonical
/// mesh from the frames `0..=precontact_frame`, over which the object is
/// assumed stationary. The scale always starts from 1 regardless of the
/// pose guess. Fails with [`ObjectError::EmptyRender`] if the guess
/// renders no pixels in one of the participating frames.
#[allow(clippy::too_many_arguments)]
pub fn init_object(
    mesh_canonical: &TriMesh,
    pose0_guess: &Pose6D,
    object_masks: &[BinaryMask],
    depths: &[DepthMap],
    hand_masks: &[BinaryMask],
    camera: &PinholeCamera,
    cam_poses: &[Pose6D],
    precontact_frame: usize,
    weights: &LossWeights,
    config: &OptimConfig,
) -> Result<(Pose6D, f64), ObjectError> {
    let frames = precontact_frame + 1;
    if object_masks.len() < frames {
        return Err(ObjectError::TooShort {
            got: object_masks.len(),
            needed: frames,
        });
    }
    check_len("depths", depths.len(), object_masks.len())?;
    check_len("hand_masks", hand_masks.len(), object_masks.len())?;
    check_len("camera poses", cam_poses.len(), object_masks.len())?;
    for t in 0..frames {
        check_image_dims("object mask", (object_masks[t].width, object_masks[t].height), camera)?;
        check_image_dims("depth map", (depths[t].width, depths[t].height), camera)?;
        check_image_dims("hand mask", (hand_masks[t].width, hand_masks[t].height), camera)?;
        rasterize(mesh_canonical, pose0_guess, &cam_poses[t], camera).map_err(|e| match e {
            RenderError::EmptyRender => ObjectError::EmptyRender { frame: t },
        })?;
    }

    let eval = |pose: &Pose6D, scale: f64| {
        let scaled = mesh_canonical.scaled(scale);
        (0..frames)
            .map(|t| {
                frame_objective(
                    &scaled,
                    pose,
                    &object_masks[t],
                    &depths[t],
                    &hand_masks[t],
                    None,
                    camera,
                    &cam_poses[t],
                    weights,
                )
            })
            .sum()
    };

    let config = OptimConfig {
        fd_step: RASTERIZED_FD_STEP,
        ..*config
    };
    let mut pose = *pose0_guess;
    let mut scale = 1.0;
    for free in INIT_SCHEDULE {
        let (p, sc, _report) = subsolve(&eval, &pose, scale, free, &config)?;
        pose = p;
        scale = sc;
    }
    let (pose, scale, _obj) =
        pattern_polish(&eval, pose, scale, FREE_ALL, cam_poses[0].translation());
    Ok((pose, scale))
}

/// Which parameter groups a sub-solve may move. Rasterized losses are
/// pixel-quantized, so finite differences on low-leverage coordinates are
/// dominated by single-pixel flips once the strong coordinates converge;
/// freeing one group at a time lets each group descend its own staircase
/// without being held hostage by probe noise in the others.
#[derive(Clone, Copy)]
struct FreeGroups {
    rot: bool,
    trans: bool,
    scale: bool,
}

const FREE_ALL: FreeGroups = FreeGroups {
    rot: true,
    trans: true,
    scale: true,
};
const FREE_ROT: FreeGroups = FreeGroups {
    rot: true,
    trans: false,
    scale: false,
};
const FREE_TRANS: FreeGroups = FreeGroups {
    rot: false,
    trans: true,
    scale: false,
};
const FREE_SCALE: FreeGroups = FreeGroups {
    rot: false,
    trans: false,
    scale: true,
};
const FREE_POSE: FreeGroups = FreeGroups {
    rot: true,
    trans: true,
    scale: false,
};

/// Joint pass followed by two rounds of per-group polish.
const INIT_SCHEDULE: [FreeGroups; 7] = [
    FREE_ALL, FREE_ROT, FREE_TRANS, FREE_SCALE, FREE_ROT, FREE_TRANS, FREE_SCALE,
];
const TRACK_SCHEDULE: [FreeGroups; 5] = [FREE_POSE, FREE_ROT, FREE_TRANS, FREE_ROT, FREE_TRANS];

/// One annealed descent over the selected parameter groups; fixed groups
/// are held at their incoming values.
fn subsolve<F>(
    eval: &F,
    pose: &Pose6D,
    scale: f64,
    free: FreeGroups,
    config: &OptimConfig,
) -> Result<(Pose6D, f64, OptimReport), OptimError>
where
    F: Fn(&Pose6D, f64) -> f64 + Sync,
{
    let base = *pose;
    let mut params = ParamVector::new();
    let rot_id = free.rot.then(|| params.push_rotation(*base.rotation()));
    let trans_id = free
        .trans
        .then(|| params.push_scalars(base.translation().as_slice()));
    let scale_id = free.scale.then(|| params.push_scalar(scale));
    let decode = move |p: &ParamVector| {
        let r = match rot_id {
            Some(id) => p.rotation(id),
            None => *base.rotation(),
        };
        let t = match trans_id {
            Some(id) => p.vector3(id),
            None => *base.translation(),
        };
        let s = match scale_id {
            Some(id) => p.scalar(id).max(SCALE_FLOOR),
            None => scale,
        };
        (Pose6D::from_parts_unchecked(r, t), s)
    };
    let objective = |p: &ParamVector| {
        let (pose, s) = decode(p);
        eval(&pose, s)
    };
    let (best, report) = minimize_annealed(objective, params, config, STEP_PHASES)?;
    let (pose, s) = decode(&best);
    Ok((pose, s, report))
}

/// Trial steps for the pattern polish, largest first. The top rung must
/// exceed the width of the pixel-flip local minima left behind by the
/// gradient stage; the bottom rung sets the final resolution.
const POLISH_STEPS: [f64; 7] = [8e-3, 4e-3, 2e-3, 1e-3, 5e-4, 2.5e-4, 1.25e-4];

/// Deterministic coordinate pattern search. Gradient probes on a hard
/// rasterization cannot see across iso-coverage plateaus, so descent
/// stalls in minima a few pixel flips deep; trying explicit +/- moves per
/// coordinate over a decreasing step ladder walks the remaining staircase
/// down. Accepts strictly improving moves only, so exact data is a
/// bitwise fixed point.
///
/// When scale is free, an extra combined move scales the mesh and its
/// distance from `ray_center` together. That direction leaves the
/// silhouette (almost) fixed while the depth term selects the true metric
/// scale; without it, single-coordinate moves cannot walk the
/// scale-vs-distance valley.
fn pattern_polish<F>(
    eval: &F,
    mut pose: Pose6D,
    mut scale: f64,
    free: FreeGroups,
    ray_center: &Vector3<f64>,
) -> (Pose6D, f64, f64)
where
    F: Fn(&Pose6D, f64) -> f64 + Sync,
{
    let mut best = eval(&pose, scale);
    loop {
        let mut ladder_moved = false;
        for &h in POLISH_STEPS.iter() {
            loop {
                let mut improved = false;
                for coord in 0..8 {
                    let group_on = match coord {
                        0..=2 => free.rot,
                        3..=5 => free.trans,
                        _ => free.scale,
                    };
                    if !group_on {
                        continue;
                    }
                    for sign in [1.0, -1.0] {
                        let (cand_pose, cand_scale) =
                            nudge(&pose, scale, coord, sign * h, ray_center);
                        let f = eval(&cand_pose, cand_scale);
                        if f < best {
                            pose = cand_pose;
                            scale = cand_scale;
                            best = f;
                            improved = true;
                        }
                    }
                }
                if !improved {
                    break;
                }
                ladder_moved = true;
            }
        }
        // Greedy descent is path dependent: a move found at a fine rung can
        // open improvements back at a coarse one, so rerun the ladder until
        // a full pass stands still.
        if !ladder_moved {
            break;
        }
    }
    (pose, scale, best)
}

/// Move one pose/scale coordinate: rotations via the local exponential
/// chart, translation and scale additively. Coordinate 7 is the combined
/// similarity move described on [`pattern_polish`].
fn nudge(
    pose: &Pose6D,
    scale: f64,
    coord: usize,
    delta: f64,
    ray_center: &Vector3<f64>,
) -> (Pose6D, f64) {
    use crate::geometry::so3_exp;
    match coord {
        0..=2 => {
            let mut axis = Vector3::zeros();
            axis[coord] = delta;
            let rot = pose.rotation() * so3_exp(&axis);
            (
                Pose6D::from_parts_unchecked(
                    crate::geometry::orthonormalize(&rot),
                    *pose.translation(),
                ),
                scale,
            )
        }
        3..=5 => {
            let mut t = *pose.translation();
            t[coord - 3] += delta;
            (Pose6D::from_parts_unchecked(*pose.rotation(), t), scale)
        }
        6 => (*pose, (scale + delta).max(SCALE_FLOOR)),
        _ => {
            let grown = 1.0 + delta;
            let t = ray_center + grown * (pose.translation() - ray_center);
            (
                Pose6D::from_parts_unchecked(*pose.rotation(), t),
                (scale * grown).max(SCALE_FLOOR),
            )
        }
    }
}

/// Track one rigid pose per frame, strictly in frame order, each solve
/// starting from the previous frame's result (frame 0 from `pose0`, which
/// is itself refined). `images` adds a patch-feature term on top of the
/// silhouette and depth terms. Frames are declared lost when their
/// converged objective exceeds `lost_multiple` times the median objective
/// of the frames tracked so far (judged only once the median is backed by
/// enough history).
#[allow(clippy::too_many_arguments)]
pub fn track_object(
    mesh: &TriMesh,
    pose0: &Pose6D,
    object_masks: &[BinaryMask],
    depths: &[DepthMap],
    hand_masks: &[BinaryMask],
    images: &[GrayImage],
    camera: &PinholeCamera,
    cam_poses: &[Pose6D],
    extractor: &dyn FeatureExtractor,
    weights: &LossWeights,
    config: &OptimConfig,
    lost_multiple: f64,
) -> Result<(Vec<Pose6D>, Vec<TrackFrameReport>), ObjectError> {
    let frames = object_masks.len();
    if frames == 0 {
        return Err(ObjectError::TooShort { got: 0, needed: 1 });
    }
    check_len("depths", depths.len(), frames)?;
    check_len("hand_masks", hand_masks.len(), frames)?;
    check_len("images", images.len(), frames)?;
    check_len("camera poses", cam_poses.len(), frames)?;
    for t in 0..frames {
        check_image_dims("object mask", (object_masks[t].width, object_masks[t].height), camera)?;
        check_image_dims("depth map", (depths[t].width, depths[t].height), camera)?;
        check_image_dims("hand mask", (hand_masks[t].width, hand_masks[t].height), camera)?;
        check_image_dims("image", (images[t].width, images[t].height), camera)?;
    }

    let config = OptimConfig {
        fd_step: RASTERIZED_FD_STEP,
        ..*config
    };
    let mut poses = Vec::with_capacity(frames);
    let mut reports = Vec::with_capacity(frames);
    let mut finals = Vec::with_capacity(frames);
    let mut prev = *pose0;
    for t in 0..frames {
        let (pose, objective, iterations) = track_frame(
            mesh,
            &prev,
            &object_masks[t],
            &depths[t],
            &hand_masks[t],
            &images[t],
            camera,
            &cam_poses[t],
            extractor,
            weights,
            &config,
        )?;
        if finals.len() >= MIN_TRACK_HISTORY {
            let med = median(&finals);
            if objective > lost_multiple * med {
                return Err(ObjectError::TrackingLost {
                    frame: t,
                    objective,
                    median: med,
                    multiple: lost_multiple,
                });
            }
        }
        finals.push(objective);
        reports.push(TrackFrameReport {
            frame: t,
            objective,
            iterations,
        });
        prev = pose;
        poses.push(pose);
    }
    Ok((poses, reports))
}

#[allow(clippy::too_many_arguments)]
fn track_frame(
    mesh: &TriMesh,
    init: &Pose6D,
    object_mask: &BinaryMask,
    depth: &DepthMap,
    hand_mask: &BinaryMask,
    image: &GrayImage,
    camera: &PinholeCamera,
    cam_pose: &Pose6D,
    extractor: &dyn FeatureExtractor,
    weights: &LossWeights,
    config: &OptimConfig,
) -> Result<(Pose6D, f64, usize), ObjectError> {
    let eval = |pose: &Pose6D, _scale: f64| {
        frame_objective(
            mesh,
            pose,
            object_mask,
            depth,
            hand_mask,
            Some((image, extractor)),
            camera,
            cam_pose,
            weights,
        )
    };
    let mut pose = *init;
    let mut iterations = 0;
    for free in TRACK_SCHEDULE {
        let (p, _s, report) = subsolve(&eval, &pose, 1.0, free, config)?;
        pose = p;
        iterations += report.iterations;
    }
    let (pose, _scale, objective) =
        pattern_polish(&eval, pose, 1.0, FREE_POSE, &Vector3::zeros());
    Ok((pose, objective, iterations))
}

fn median(values: &[f64]) -> f64 {
    debug_assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("objectives are finite"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Per-frame motion deltas of a pose sequence. Entry 0 is zero by
/// convention; entry t holds the translation distance and the rotation
/// log-map angle between poses t-1 and t.
fn motion_deltas(poses: &[Pose6D]) -> (Vec<f64>, Vec<f64>) {
    let mut d_trans = vec![0.0; poses.len()];
    let mut d_rot = vec![0.0; poses.len()];
    for t in 1..poses.len() {
        d_trans[t] = (poses[t].translation() - poses[t - 1].translation()).norm();
        let rel = poses[t - 1].rotation().transpose() * poses[t].rotation();
        d_rot[t] = so3_log(&rel).norm();
    }
    (d_trans, d_rot)
}

/// First index whose forward window of `m` deltas all reach `eps`, per
/// motion channel; `None` when the channel never sustains motion.
fn onset(deltas: &[f64], eps: f64, m: usize) -> Option<usize> {
    (1..=deltas.len().saturating_sub(m))
        .find(|&t| deltas[t..t + m].iter().all(|&d| d >= eps))
}

/// First index at or after `start` whose trailing window of `m` deltas all
/// sit strictly below `eps`, per channel.
fn settle(deltas: &[f64], eps: f64, m: usize, start: usize) -> Option<usize> {
    (start..deltas.len()).find(|&t| deltas[t + 1 - m..=t].iter().all(|&d| d < eps))
}

/// Detect the contact window (t_s, t_e) of a pose sequence: t_s is the
/// first frame of sustained motion in either channel (translation beyond
/// `eps_o` or rotation beyond `eps_r`, sustained for `m` frames), t_e the
/// frame by which both channels have settled back below threshold for `m`
/// consecutive frames. Returns [`ObjectError::NoMotion`] when nothing ever
/// moves and [`ObjectError::NoRest`] when motion never settles.
pub fn detect_contact(
    poses: &[Pose6D],
    eps_o: f64,
    eps_r: f64,
    m: usize,
) -> Result<(usize, usize), ObjectError> {
    assert!(m >= 1, "window length must be positive");
    assert!(eps_o > 0.0 && eps_r > 0.0, "thresholds must be positive");
    if poses.len() < 2 * m {
        return Err(ObjectError::TooShort {
            got: poses.len(),
            needed: 2 * m,
        });
    }
    let (d_trans, d_rot) = motion_deltas(poses);
    let onset_o = onset(&d_trans, eps_o, m);
    let onset_r = onset(&d_rot, eps_r, m);
    let t_s = match (onset_o, onset_r) {
        (Some(a), Some(b)) => a.min(b),
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => return Err(ObjectError::NoMotion),
    };
    // Both channels must be at rest simultaneously, hence the max of the
    // per-channel settle frames searched from t_s + m onward.
    let settle_o = settle(&d_trans, eps_o, m, t_s + m);
    let settle_r = settle(&d_rot, eps_r, m, t_s + m);
    let t_e = match (settle_o, settle_r) {
        (Some(a), Some(b)) => a.max(b),
        _ => {
            return Err(ObjectError::NoRest {
                onset: t_s,
                last: poses.len() - 1,
            })
        }
    };
    Ok((t_s, t_e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::box_mesh;
    use crate::losses::HogExtractor;
    use crate::rasterizer::rasterize;
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;

    fn camera() -> PinholeCamera {
        PinholeCamera::new(120.0, 120.0, 48.0, 48.0, 96, 96)
    }

    fn rot_z(a: f64) -> Matrix3<f64> {
        let (s, c) = a.sin_cos();
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    fn rot_x(a: f64) -> Matrix3<f64> {
        let (s, c) = a.sin_cos();
        Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
    }

    fn object_mesh() -> TriMesh {
        box_mesh(
            Vector3::new(-0.04, -0.04, -0.04),
            Vector3::new(0.04, 0.04, 0.04),
        )
    }

    fn pose_at(t: &Vector3<f64>, rot: Matrix3<f64>) -> Pose6D {
        Pose6D::from_parts(rot, *t).expect("rotation valid")
    }

    /// Render ground-truth observations for a pose sequence: exact masks,
    /// exact depth, shaded images, empty hand masks.
    fn render_truth(
        mesh: &TriMesh,
        poses: &[Pose6D],
        camera: &PinholeCamera,
    ) -> (Vec<BinaryMask>, Vec<DepthMap>, Vec<GrayImage>, Vec<BinaryMask>) {
        let cam_pose = Pose6D::identity();
        let mut masks = Vec::new();
        let mut depths = Vec::new();
        let mut images = Vec::new();
        let mut hands = Vec::new();
        for pose in poses {
            let render = rasterize(mesh, pose, &cam_pose, camera).expect("truth visible");
            images.push(GrayImage::from_depth(&render.depth));
            masks.push(render.mask);
            depths.push(render.depth);
            hands.push(BinaryMask::zeros(camera.width, camera.height));
        }
        (masks, depths, images, hands)
    }

    fn quick_config() -> OptimConfig {
        OptimConfig {
            max_iters: 400,
            ..OptimConfig::default()
        }
    }

    fn square_mask(w: usize, h: usize, x0: usize, y0: usize, side: usize) -> BinaryMask {
        let mut m = BinaryMask::zeros(w, h);
        for y in y0..(y0 + side).min(h) {
            for x in x0..(x0 + side).min(w) {
                m.set(x, y, 1);
            }
        }
        m
    }

    #[test]
    fn contact_worked_profile_is_exact() {
        // Translation profile 0,0,.01,.01,.01,.01,0,0,0 with eps 0.005 and
        // window 3: onset at 2, settled (three quiet frames) by 8.
        let steps = [0.0, 0.0, 0.01, 0.01, 0.01, 0.01, 0.0, 0.0, 0.0];
        let mut x = 0.0;
        let poses: Vec<Pose6D> = steps
            .iter()
            .map(|&dx| {
                x += dx;
                Pose6D::from_translation(Vector3::new(x, 0.0, 0.0))
            })
            .collect();
        let (t_s, t_e) = detect_contact(&poses, 0.005, DEFAULT_EPS_R, 3).unwrap();
        assert_eq!((t_s, t_e), (2, 8));
    }

    #[test]
    fn contact_onset_can_be_first_delta() {
        // Motion from the very first transition, then rest.
        let xs = [0.0, 0.01, 0.02, 0.03, 0.03, 0.03, 0.03];
        let poses: Vec<Pose6D> = xs
            .iter()
            .map(|&x| Pose6D::from_translation(Vector3::new(x, 0.0, 0.0)))
            .collect();
        let (t_s, t_e) = detect_contact(&poses, 0.005, DEFAULT_EPS_R, 3).unwrap();
        assert_eq!(t_s, 1);
        assert_eq!(t_e, 6);
    }

    #[test]
    fn stationary_sequence_reports_no_motion() {
        let poses = vec![Pose6D::identity(); 12];
        assert!(matches!(
            detect_contact(&poses, DEFAULT_EPS_O, DEFAULT_EPS_R, 3),
            Err(ObjectError::NoMotion)
        ));
    }

    #[test]
    fn unsettled_motion_reports_no_rest() {
        let poses: Vec<Pose6D> = (0..10)
            .map(|t| Pose6D::from_translation(Vector3::new(0.05 * t as f64, 0.0, 0.0)))
            .collect();
        match detect_contact(&poses, DEFAULT_EPS_O, DEFAULT_EPS_R, 3) {
            Err(ObjectError::NoRest { onset, last }) => {
                assert_eq!(onset, 1);
                assert_eq!(last, 9);
            }
            other => panic!("expected NoRest, got {other:?}"),
        }
    }

    #[test]
    fn short_sequences_are_rejected() {
        let poses = vec![Pose6D::identity(); 5];
        assert!(matches!(
            detect_contact(&poses, DEFAULT_EPS_O, DEFAULT_EPS_R, 3),
            Err(ObjectError::TooShort { got: 5, needed: 6 })
        ));
    }

    #[test]
    fn precontact_estimate_takes_first_full_run() {
        let w = 20;
        let object = square_mask(w, w, 5, 5, 10); // area 100
        let far = square_mask(w, w, 0, 0, 3); // no overlap
        let touch = square_mask(w, w, 5, 5, 4); // overlap 16 > 5
        let object_masks = vec![object; 11];
        // Overlap runs: frames 5-6 (too short), frames 8-10 (commits at 8).
        let hand_masks: Vec<BinaryMask> = (0..11)
            .map(|t| match t {
                5 | 6 | 8 | 9 | 10 => touch.clone(),
                _ => far.clone(),
            })
            .collect();
        let t = estimate_precontact_frame(
            &object_masks,
            &hand_masks,
            DEFAULT_OVERLAP_FRAC,
            DEFAULT_OVERLAP_RUN,
        )
        .unwrap();
        assert_eq!(t, 8);
    }

    #[test]
    fn precontact_estimate_ignores_boundary_overlap() {
        let w = 20;
        let object = square_mask(w, w, 5, 5, 10); // area 100
        // Overlap of exactly 5 pixels: a 5x1 strip inside the object.
        let mut strip = BinaryMask::zeros(w, w);
        for x in 5..10 {
            strip.set(x, 5, 1);
        }
        let object_masks = vec![object; 4];
        let hand_masks = vec![strip; 4];
        // 5 / 100 is not strictly greater than 0.05, so no grasp is found.
        assert!(matches!(
            estimate_precontact_frame(&object_masks, &hand_masks, 0.05, 3),
            Err(ObjectError::NoContactOverlap)
        ));
    }

    #[test]
    fn init_recovers_scale_within_two_percent() {
        let camera = camera();
        let mesh = object_mesh();
        let true_scale = 1.3;
        let true_pose = pose_at(&Vector3::new(0.01, -0.01, 0.45), rot_z(0.3) * rot_x(0.2));
        let scaled_truth = mesh.scaled(true_scale);
        let (masks, depths, _imgs, hands) = render_truth(&scaled_truth, &[true_pose; 3], &camera);
        let guess = pose_at(
            &(true_pose.translation() + Vector3::new(0.004, -0.003, 0.008)),
            rot_z(0.03) * true_pose.rotation(),
        );
        let weights = LossWeights::default();
        let (pose, scale) = init_object(
            &mesh,
            &guess,
            &masks,
            &depths,
            &hands,
            &camera,
            &[Pose6D::identity(); 3],
            2,
            &weights,
            &quick_config(),
        )
        .unwrap();
        assert!(
            (scale - true_scale).abs() / true_scale < 0.02,
            "scale {scale} vs {true_scale}"
        );
        assert!(pose.translation_distance(&true_pose) < 0.01);
    }

    #[test]
    fn init_is_a_fixed_point_on_exact_data() {
        let camera = camera();
        let mesh = object_mesh();
        let true_pose = pose_at(&Vector3::new(0.0, 0.0, 0.5), rot_z(0.2));
        let (masks, depths, _imgs, hands) = render_truth(&mesh, &[true_pose; 2], &camera);
        let (pose, scale) = init_object(
            &mesh,
            &true_pose,
            &masks,
            &depths,
            &hands,
            &camera,
            &[Pose6D::identity(); 2],
            1,
            &LossWeights::default(),
            &quick_config(),
        )
        .unwrap();
        assert_relative_eq!(scale, 1.0, max_relative = 1e-12);
        assert_eq!(pose.translation(), true_pose.translation());
        assert_eq!(pose.rotation(), true_pose.rotation());
    }

    #[test]
    fn init_rejects_offscreen_guess() {
        let camera = camera();
        let mesh = object_mesh();
        let true_pose = pose_at(&Vector3::new(0.0, 0.0, 0.5), rot_z(0.0));
        let (masks, depths, _imgs, hands) = render_truth(&mesh, &[true_pose; 2], &camera);
        let behind = Pose6D::from_translation(Vector3::new(0.0, 0.0, -1.0));
        match init_object(
            &mesh,
            &behind,
            &masks,
            &depths,
            &hands,
            &camera,
            &[Pose6D::identity(); 2],
            1,
            &LossWeights::default(),
            &quick_config(),
        ) {
            Err(ObjectError::EmptyRender { frame: 0 }) => {}
            other => panic!("expected EmptyRender, got {other:?}"),
        }
    }

    #[test]
    fn tracking_recovers_stationary_pose_to_submillimeter() {
        let camera = camera();
        let mesh = object_mesh();
        let truth = pose_at(&Vector3::new(0.0, 0.01, 0.5), rot_z(0.25) * rot_x(-0.15));
        let frames = 4;
        let (masks, depths, images, hands) = render_truth(&mesh, &vec![truth; frames], &camera);
        let pose0 = pose_at(
            &(truth.translation() + Vector3::new(0.002, -0.002, 0.003)),
            rot_z(0.02) * truth.rotation(),
        );
        let extractor = HogExtractor::default();
        let (poses, reports) = track_object(
            &mesh,
            &pose0,
            &masks,
            &depths,
            &hands,
            &images,
            &camera,
            &vec![Pose6D::identity(); frames],
            &extractor,
            &LossWeights::default(),
            &quick_config(),
            DEFAULT_LOST_MULTIPLE,
        )
        .unwrap();
        assert_eq!(poses.len(), frames);
        assert_eq!(reports.len(), frames);
        for pose in &poses {
            assert!(
                pose.translation_distance(&truth) < 1e-3,
                "translation error {}",
                pose.translation_distance(&truth)
            );
            assert!(
                pose.rotation_distance(&truth) < 0.5_f64.to_radians(),
                "rotation error {}",
                pose.rotation_distance(&truth)
            );
        }
    }

    #[test]
    fn single_frame_returns_one_refined_pose() {
        let camera = camera();
        let mesh = object_mesh();
        let truth = pose_at(&Vector3::new(0.0, 0.0, 0.5), rot_z(0.1) * rot_x(-0.2));
        let (masks, depths, images, hands) = render_truth(&mesh, &[truth], &camera);
        let pose0 = pose_at(
            &(truth.translation() + Vector3::new(0.003, 0.0, 0.0)),
            *truth.rotation(),
        );
        let extractor = HogExtractor::default();
        let (poses, _) = track_object(
            &mesh,
            &pose0,
            &masks,
            &depths,
            &hands,
            &images,
            &camera,
            &[Pose6D::identity()],
            &extractor,
            &LossWeights::default(),
            &quick_config(),
            DEFAULT_LOST_MULTIPLE,
        )
        .unwrap();
        assert_eq!(poses.len(), 1);
        assert!(poses[0].translation_distance(&truth) < 1e-3);
    }

    #[test]
    fn occluded_motion_tracks_to_millimeters() {
        let camera = camera();
        let mesh = object_mesh();
        let frames = 12;
        let truth: Vec<Pose6D> = (0..frames)
            .map(|t| {
                pose_at(
                    &Vector3::new(0.0025 * t as f64, 0.0, 0.5),
                    rot_z(0.2),
                )
            })
            .collect();
        let (mut masks, mut depths, images, mut hands) = render_truth(&mesh, &truth, &camera);
        // Occlude a vertical band over the left part of the object in every
        // frame: the hand mask marks it, the object mask loses it, and the
        // depth there is invalidated (the sensor sees the hand instead).
        for t in 0..frames {
            let mut min_x = usize::MAX;
            let mut max_x = 0usize;
            for y in 0..camera.height {
                for x in 0..camera.width {
                    if masks[t].get(x, y) == 1 {
                        min_x = min_x.min(x);
                        max_x = max_x.max(x);
                    }
                }
            }
            let band_end = min_x + (max_x - min_x + 1) * 2 / 5;
            for y in 0..camera.height {
                for x in min_x..=band_end {
                    if masks[t].get(x, y) == 1 {
                        hands[t].set(x, y, 1);
                        masks[t].set(x, y, 0);
                        depths[t].set(x, y, crate::geometry::INVALID_DEPTH);
                    }
                }
            }
        }
        let extractor = HogExtractor::default();
        let (poses, _) = track_object(
            &mesh,
            &truth[0],
            &masks,
            &depths,
            &hands,
            &images,
            &camera,
            &vec![Pose6D::identity(); frames],
            &extractor,
            &LossWeights::default(),
            &quick_config(),
            DEFAULT_LOST_MULTIPLE,
        )
        .unwrap();
        let mut errors: Vec<f64> = poses
            .iter()
            .zip(&truth)
            .map(|(p, t)| p.translation_distance(t))
            .collect();
        errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = errors[frames / 2];
        assert!(med < 5e-3, "median translation error {med}");
    }

    #[test]
    fn teleporting_target_is_declared_lost() {
        let camera = camera();
        let mesh = object_mesh();
        let frames = 14;
        let truth = pose_at(&Vector3::new(0.0, 0.0, 0.5), rot_z(0.1));
        let (mut masks, mut depths, images, hands) = render_truth(&mesh, &vec![truth; frames], &camera);
        // From frame 12 on the observations jump to a far-away pose the
        // optimizer cannot reach across the flat loss plateau.
        let jumped = pose_at(&Vector3::new(0.15, 0.12, 0.5), rot_z(0.1));
        let cam_pose = Pose6D::identity();
        for t in 12..frames {
            let render = rasterize(&mesh, &jumped, &cam_pose, &camera).unwrap();
            masks[t] = render.mask;
            depths[t] = render.depth;
        }
        let extractor = HogExtractor::default();
        match track_object(
            &mesh,
            &truth,
            &masks,
            &depths,
            &hands,
            &images,
            &camera,
            &vec![Pose6D::identity(); frames],
            &extractor,
            &LossWeights::default(),
            &quick_config(),
            DEFAULT_LOST_MULTIPLE,
        ) {
            Err(ObjectError::TrackingLost { frame, .. }) => assert_eq!(frame, 12),
            other => panic!("expected TrackingLost, got {other:?}"),
        }
    }

    #[test]
    fn tracked_poses_rerender_with_high_iou() {
        let camera = camera();
        let mesh = object_mesh();
        let frames = 3;
        let truth: Vec<Pose6D> = (0..frames)
            .map(|t| pose_at(&Vector3::new(0.002 * t as f64, 0.0, 0.5), rot_z(0.15)))
            .collect();
        let (masks, depths, images, hands) = render_truth(&mesh, &truth, &camera);
        let pose0 = pose_at(
            &(truth[0].translation() + Vector3::new(0.002, 0.001, 0.0)),
            *truth[0].rotation(),
        );
        let extractor = HogExtractor::default();
        let (poses, _) = track_object(
            &mesh,
            &pose0,
            &masks,
            &depths,
            &hands,
            &images,
            &camera,
            &vec![Pose6D::identity(); frames],
            &extractor,
            &LossWeights::default(),
            &quick_config(),
            DEFAULT_LOST_MULTIPLE,
        )
        .unwrap();
        let cam_pose = Pose6D::identity();
        for (pose, mask) in poses.iter().zip(&masks) {
            let render = rasterize(&mesh, pose, &cam_pose, &camera).unwrap();
            let inter = render.mask.overlap_count(mask);
            let union = render.mask.count_ones() + mask.count_ones() - inter;
            let iou = inter as f64 / union as f64;
            assert!(iou >= 0.9, "IoU {iou}");
        }
    }

    #[test]
    fn trajectory_json_round_trips() {
        let traj = ObjectTrajectory {
            scale: 1.25,
            contact: Some((3, 17)),
            poses: vec![
                Pose6D::from_translation(Vector3::new(0.1, 0.2, 0.3)),
                pose_at(&Vector3::new(0.0, 0.0, 0.5), rot_z(0.4)),
            ],
        };
        let json = serde_json::to_string(&traj).unwrap();
        let back: ObjectTrajectory = serde_json::from_str(&json).unwrap();
        assert_eq!(back.scale, traj.scale);
        assert_eq!(back.contact, traj.contact);
        assert_eq!(back.poses.len(), 2);
        assert_eq!(back.poses[1].translation(), traj.poses[1].translation());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        /// Step profiles: each entry is either quiet (zero) or a definite
        /// move, so thresholds are never grazed.
        fn step_profile() -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(
                prop_oneof![Just(0.0), (0.01f64..0.08)],
                8..24,
            )
        }

        proptest! {
            #[test]
            fn translation_and_rotation_channels_agree(steps in step_profile()) {
                let eps = 0.005;
                let mut x = 0.0;
                let trans: Vec<Pose6D> = std::iter::once(0.0)
                    .chain(steps.iter().copied())
                    .map(|dx| {
                        x += dx;
                        Pose6D::from_translation(Vector3::new(x, 0.0, 0.0))
                    })
                    .collect();
                // Same profile as pure z-rotations of the same magnitude;
                // per-step angles stay far below pi so the log-map norm
                // reproduces each step exactly.
                let mut a = 0.0;
                let rots: Vec<Pose6D> = std::iter::once(0.0)
                    .chain(steps.iter().copied())
                    .map(|da| {
                        a += da;
                        Pose6D::from_parts_unchecked(rot_z(a), Vector3::zeros())
                    })
                    .collect();
                let big = 1e6; // parks the other channel far above any profile
                let via_trans = detect_contact(&trans, eps, big, 3);
                let via_rot = detect_contact(&rots, big, eps, 3);
                match (via_trans, via_rot) {
                    (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
                    (Err(ObjectError::NoMotion), Err(ObjectError::NoMotion)) => {}
                    (Err(ObjectError::NoRest { onset: a, .. }), Err(ObjectError::NoRest { onset: b, .. })) => {
                        prop_assert_eq!(a, b)
                    }
                    (a, b) => prop_assert!(false, "channel mismatch: {:?} vs {:?}", a, b),
                }
            }

            #[test]
            fn contact_window_is_ordered(steps in step_profile()) {
                let mut x = 0.0;
                let poses: Vec<Pose6D> = std::iter::once(0.0)
                    .chain(steps.iter().copied())
                    .map(|dx| {
                        x += dx;
                        Pose6D::from_translation(Vector3::new(x, 0.0, 0.0))
                    })
                    .collect();
                if let Ok((t_s, t_e)) = detect_contact(&poses, 0.005, DEFAULT_EPS_R, 3) {
                    prop_assert!(t_s <= t_e);
                    prop_assert!(t_e < poses.len());
                }
            }
        }
    }
}
