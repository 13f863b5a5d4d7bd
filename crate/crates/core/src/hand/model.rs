//! Two-digit parametric hand: palm block plus thumb and index chains.
//!
//! Palm frame: origin at the wrist, +y toward the fingers, +x toward the
//! thumb side, +z out the back of the hand. Flexion of angle theta rotates
//! a segment about its local x axis by -theta, curling toward the palm
//! (-z); abduction rotates about z in the palm plane. All dimensions are
//! meters at beta = 0; beta[0] scales finger segment lengths and beta[1]
//! scales palm width, both by (1 + 0.1*beta).

use crate::geometry::{Pose6D, TriMesh};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const JOINT_COUNT: usize = 8;
pub const SHAPE_COUNT: usize = 2;

/// (min, max) per joint angle, radians. The thumb's two base joints carry
/// abduction+flexion pairs and its distal joint flexion only; the index
/// finger flexes at MCP/PIP/DIP without abduction. Abduction swings
/// +-0.9; flexion hyperextends slightly and curls past 120 degrees.
pub const JOINT_LIMITS: [(f64, f64); JOINT_COUNT] = [
    (-0.9, 0.9),   // 0 thumb base abduction
    (-0.35, 2.1),  // 1 thumb base flexion
    (-0.9, 0.9),   // 2 thumb proximal abduction
    (-0.35, 2.1),  // 3 thumb proximal flexion
    (-0.35, 2.1),  // 4 thumb distal flexion
    (-0.35, 2.1),  // 5 index MCP flexion
    (-0.35, 2.1),  // 6 index PIP flexion
    (-0.35, 2.1),  // 7 index DIP flexion
];

/// Tolerance on joint-limit violation before hand_forward errors.
pub const JOINT_LIMIT_SLACK: f64 = 1e-6;

/// Rest-pose radius around each fingertip whose vertices form the
/// frequently-contacting tip set.
pub const TIP_RADIUS: f64 = 0.008;

const PALM_HALF_WIDTH: f64 = 0.040;
const PALM_LENGTH: f64 = 0.080;
const PALM_HALF_DEPTH: f64 = 0.012;

const INDEX_ROOT_X: f64 = 0.022;
const INDEX_SEGMENTS: [f64; 3] = [0.042, 0.026, 0.020];
const INDEX_HALF_WIDTH: f64 = 0.009;

const THUMB_ROOT: [f64; 2] = [0.040, 0.015];
const THUMB_BASE_YAW: f64 = -55.0 * std::f64::consts::PI / 180.0;
const THUMB_SEGMENTS: [f64; 3] = [0.040, 0.032, 0.024];
const THUMB_HALF_WIDTH: f64 = 0.010;

/// Offset of the tip apex vertex beyond the distal segment's end face.
const TIP_APEX_OFFSET: f64 = 0.006;

#[derive(Debug, Error)]
pub enum HandError {
    #[error("theta[{joint}] = {value} outside limits [{lo}, {hi}]")]
    JointLimit { joint: usize, value: f64, lo: f64, hi: f64 },
    #[error("expected {expected} values for {what}, got {got}")]
    WrongArity { what: &'static str, expected: usize, got: usize },
    #[error("rotation matrix is not orthonormal")]
    BadRotation,
}

/// Per-frame hand state; `beta` is shared across a sequence by convention
/// (the refiners keep one beta block for all frames).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HandParamsJson", into = "HandParamsJson")]
pub struct HandParams {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct HandParamsJson {
    rotation: [f64; 9],
    translation: [f64; 3],
    theta: Vec<f64>,
    beta: Vec<f64>,
}

impl From<HandParams> for HandParamsJson {
    fn from(p: HandParams) -> Self {
        let r = p.rotation;
        HandParamsJson {
            rotation: [
                r[(0, 0)], r[(0, 1)], r[(0, 2)],
                r[(1, 0)], r[(1, 1)], r[(1, 2)],
                r[(2, 0)], r[(2, 1)], r[(2, 2)],
            ],
            translation: [p.translation.x, p.translation.y, p.translation.z],
            theta: p.theta,
            beta: p.beta,
        }
    }
}

impl TryFrom<HandParamsJson> for HandParams {
    type Error = String;
    fn try_from(j: HandParamsJson) -> Result<Self, String> {
        let r = j.rotation;
        let rotation = Matrix3::new(r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8]);
        let pose = Pose6D::from_parts(rotation, Vector3::from(j.translation))
            .map_err(|e| e.to_string())?;
        Ok(HandParams {
            rotation: *pose.rotation(),
            translation: *pose.translation(),
            theta: j.theta,
            beta: j.beta,
        })
    }
}

impl HandParams {
    pub fn rest() -> HandParams {
        HandParams {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            theta: vec![0.0; JOINT_COUNT],
            beta: vec![0.0; SHAPE_COUNT],
        }
    }

    pub fn global_pose(&self) -> Pose6D {
        Pose6D::from_parts_unchecked(self.rotation, self.translation)
    }
}

pub const KEYPOINT_NAMES: [&str; 8] = [
    "wrist",
    "thumb_mcp",
    "thumb_ip",
    "thumb_tip",
    "index_mcp",
    "index_pip",
    "index_dip",
    "index_tip",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HandKeypoints {
    pub wrist: Vector3<f64>,
    pub thumb_mcp: Vector3<f64>,
    pub thumb_ip: Vector3<f64>,
    pub thumb_tip: Vector3<f64>,
    pub index_mcp: Vector3<f64>,
    pub index_pip: Vector3<f64>,
    pub index_dip: Vector3<f64>,
    pub index_tip: Vector3<f64>,
}

impl HandKeypoints {
    pub fn get(&self, name: &str) -> Option<Vector3<f64>> {
        match name {
            "wrist" => Some(self.wrist),
            "thumb_mcp" => Some(self.thumb_mcp),
            "thumb_ip" => Some(self.thumb_ip),
            "thumb_tip" => Some(self.thumb_tip),
            "index_mcp" => Some(self.index_mcp),
            "index_pip" => Some(self.index_pip),
            "index_dip" => Some(self.index_dip),
            "index_tip" => Some(self.index_tip),
            _ => None,
        }
    }

    pub fn named(&self) -> [(&'static str, Vector3<f64>); 8] {
        [
            ("wrist", self.wrist),
            ("thumb_mcp", self.thumb_mcp),
            ("thumb_ip", self.thumb_ip),
            ("thumb_tip", self.thumb_tip),
            ("index_mcp", self.index_mcp),
            ("index_pip", self.index_pip),
            ("index_dip", self.index_dip),
            ("index_tip", self.index_tip),
        ]
    }

    fn map(&self, f: impl Fn(&Vector3<f64>) -> Vector3<f64>) -> HandKeypoints {
        HandKeypoints {
            wrist: f(&self.wrist),
            thumb_mcp: f(&self.thumb_mcp),
            thumb_ip: f(&self.thumb_ip),
            thumb_tip: f(&self.thumb_tip),
            index_mcp: f(&self.index_mcp),
            index_pip: f(&self.index_pip),
            index_dip: f(&self.index_dip),
            index_tip: f(&self.index_tip),
        }
    }
}

#[derive(Clone, Debug)]
pub struct HandOutput {
    pub mesh: TriMesh,
    pub keypoints: HandKeypoints,
    /// Mesh vertex indices within TIP_RADIUS of a fingertip in rest pose;
    /// always contains the two apex vertices.
    pub tip_vertex_ids: Vec<usize>,
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Emits one posed segment box (origin at the segment base, +y along the
/// segment). `apex` adds a pyramid tip and returns its vertex index.
fn push_segment(
    verts: &mut Vec<Vector3<f64>>,
    faces: &mut Vec<[usize; 3]>,
    origin: &Vector3<f64>,
    rot: &Matrix3<f64>,
    half_width: f64,
    length: f64,
    apex: bool,
) -> Option<usize> {
    let base = verts.len();
    let corners = [
        Vector3::new(-half_width, 0.0, -half_width),
        Vector3::new(half_width, 0.0, -half_width),
        Vector3::new(half_width, length, -half_width),
        Vector3::new(-half_width, length, -half_width),
        Vector3::new(-half_width, 0.0, half_width),
        Vector3::new(half_width, 0.0, half_width),
        Vector3::new(half_width, length, half_width),
        Vector3::new(-half_width, length, half_width),
    ];
    for c in corners {
        verts.push(origin + rot * c);
    }
    let f = |a: usize, b: usize, c: usize| [base + a, base + b, base + c];
    faces.extend_from_slice(&[
        f(0, 1, 5),
        f(0, 5, 4), // base cap (y = 0)
        f(0, 3, 2),
        f(0, 2, 1), // palmar-side quad (z = -hw)
        f(4, 5, 6),
        f(4, 6, 7), // dorsal-side quad (z = +hw)
        f(0, 4, 7),
        f(0, 7, 3), // -x side
        f(1, 2, 6),
        f(1, 6, 5), // +x side
    ]);
    if apex {
        let apex_id = verts.len();
        verts.push(origin + rot * Vector3::new(0.0, length + TIP_APEX_OFFSET, 0.0));
        faces.extend_from_slice(&[
            f(3, 7, 8),
            f(7, 6, 8),
            f(6, 2, 8),
            f(2, 3, 8),
        ]);
        Some(apex_id)
    } else {
        faces.extend_from_slice(&[f(3, 7, 6), f(3, 6, 2)]);
        None
    }
}

struct PalmFrameHand {
    verts: Vec<Vector3<f64>>,
    faces: Vec<[usize; 3]>,
    keypoints: HandKeypoints,
    thumb_apex: usize,
    index_apex: usize,
}

/// Builds the hand in the palm frame (before the global rigid transform).
fn build_palm_frame(theta: &[f64], beta: &[f64]) -> PalmFrameHand {
    let fl = 1.0 + 0.1 * beta[0];
    let pw = 1.0 + 0.1 * beta[1];

    let mut verts = Vec::with_capacity(64);
    let mut faces = Vec::with_capacity(80);

    // Palm block.
    push_segment(
        &mut verts,
        &mut faces,
        &Vector3::zeros(),
        &Matrix3::identity(),
        PALM_HALF_WIDTH * pw,
        PALM_LENGTH,
        false,
    );
    // The palm box is wider than deep; rebuild its z extent by squashing
    // the pushed corners (half_width applied to both x and z above).
    for v in verts.iter_mut() {
        v.z = v.z.signum() * PALM_HALF_DEPTH;
    }

    // Index chain: pure flexion at MCP, PIP, DIP.
    let mut origin = Vector3::new(INDEX_ROOT_X * pw, PALM_LENGTH, 0.0);
    let index_mcp = origin;
    let mut rot = rot_x(-theta[5]);
    push_segment(&mut verts, &mut faces, &origin, &rot, INDEX_HALF_WIDTH, INDEX_SEGMENTS[0] * fl, false);
    origin += rot * Vector3::new(0.0, INDEX_SEGMENTS[0] * fl, 0.0);
    let index_pip = origin;
    rot *= rot_x(-theta[6]);
    push_segment(&mut verts, &mut faces, &origin, &rot, INDEX_HALF_WIDTH, INDEX_SEGMENTS[1] * fl, false);
    origin += rot * Vector3::new(0.0, INDEX_SEGMENTS[1] * fl, 0.0);
    let index_dip = origin;
    rot *= rot_x(-theta[7]);
    let index_apex = push_segment(
        &mut verts,
        &mut faces,
        &origin,
        &rot,
        INDEX_HALF_WIDTH,
        INDEX_SEGMENTS[2] * fl,
        true,
    )
    .unwrap();
    let index_tip = verts[index_apex];

    // Thumb chain: abduction+flexion at the two base joints, flexion at
    // the distal joint.
    let mut origin = Vector3::new(THUMB_ROOT[0] * pw, THUMB_ROOT[1], 0.0);
    let mut rot = rot_z(THUMB_BASE_YAW) * rot_z(theta[0]) * rot_x(-theta[1]);
    push_segment(&mut verts, &mut faces, &origin, &rot, THUMB_HALF_WIDTH, THUMB_SEGMENTS[0] * fl, false);
    origin += rot * Vector3::new(0.0, THUMB_SEGMENTS[0] * fl, 0.0);
    let thumb_mcp = origin;
    rot *= rot_z(theta[2]) * rot_x(-theta[3]);
    push_segment(&mut verts, &mut faces, &origin, &rot, THUMB_HALF_WIDTH, THUMB_SEGMENTS[1] * fl, false);
    origin += rot * Vector3::new(0.0, THUMB_SEGMENTS[1] * fl, 0.0);
    let thumb_ip = origin;
    rot *= rot_x(-theta[4]);
    let thumb_apex = push_segment(
        &mut verts,
        &mut faces,
        &origin,
        &rot,
        THUMB_HALF_WIDTH,
        THUMB_SEGMENTS[2] * fl,
        true,
    )
    .unwrap();
    let thumb_tip = verts[thumb_apex];

    PalmFrameHand {
        verts,
        faces,
        keypoints: HandKeypoints {
            wrist: Vector3::zeros(),
            thumb_mcp,
            thumb_ip,
            thumb_tip,
            index_mcp,
            index_pip,
            index_dip,
            index_tip,
        },
        thumb_apex,
        index_apex,
    }
}

/// Deterministic forward kinematics: palm-frame skeleton, then the global
/// rigid transform applied last to every vertex and keypoint.
pub fn hand_forward(params: &HandParams) -> Result<HandOutput, HandError> {
    if params.theta.len() != JOINT_COUNT {
        return Err(HandError::WrongArity {
            what: "theta",
            expected: JOINT_COUNT,
            got: params.theta.len(),
        });
    }
    if params.beta.len() != SHAPE_COUNT {
        return Err(HandError::WrongArity {
            what: "beta",
            expected: SHAPE_COUNT,
            got: params.beta.len(),
        });
    }
    for (j, (&v, &(lo, hi))) in params.theta.iter().zip(JOINT_LIMITS.iter()).enumerate() {
        if v < lo - JOINT_LIMIT_SLACK || v > hi + JOINT_LIMIT_SLACK {
            return Err(HandError::JointLimit { joint: j, value: v, lo, hi });
        }
    }

    let posed = build_palm_frame(&params.theta, &params.beta);

    // Tip vertex ids come from the rest pose (same shape, zero angles).
    let rest = build_palm_frame(&vec![0.0; JOINT_COUNT], &params.beta);
    let tip_vertex_ids: Vec<usize> = rest
        .verts
        .iter()
        .enumerate()
        .filter(|(_, v)| {
            (*v - rest.keypoints.thumb_tip).norm() <= TIP_RADIUS
                || (*v - rest.keypoints.index_tip).norm() <= TIP_RADIUS
        })
        .map(|(i, _)| i)
        .collect();
    debug_assert!(tip_vertex_ids.contains(&rest.thumb_apex));
    debug_assert!(tip_vertex_ids.contains(&rest.index_apex));

    let (r, t) = (&params.rotation, &params.translation);
    let vertices: Vec<Vector3<f64>> = posed.verts.iter().map(|v| r * v + t).collect();
    let keypoints = posed.keypoints.map(|k| r * k + t);
    let mesh = TriMesh::new(vertices, posed.faces).expect("hand mesh is structurally valid");

    Ok(HandOutput { mesh, keypoints, tip_vertex_ids })
}
