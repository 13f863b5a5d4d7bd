//! Demonstration bundle: the on-disk directory layout every pipeline
//! stage reads and writes, and its in-memory form.
//!
//! Layout under the bundle directory:
//!
//! ```text
//! camera.json              intrinsics + per-frame world-from-camera poses
//! masks/object_0000.pgm    binary object segmentation per frame
//! masks/hand_0000.pgm      binary hand segmentation per frame
//! depth/0000.pfm           metric depth per frame (little-endian PFM)
//! keypoints/0000.json      named 2D hand keypoints per frame
//! meshes/object.ply        canonical object mesh (unit scale)
//! meshes/scene.ply         static scene mesh
//! meshes/gripper.ply       gripper mesh, fully open
//! meshes/gripper.json      gripper geometry sidecar
//! poses/init.json          optional initial object pose guess
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BinaryMask, DepthMap, MeshError, PinholeCamera, Pose6D, TriMesh};
use crate::hand::HandObservation;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("missing bundle file {path}")]
    Missing { path: PathBuf },
    #[error("failed reading {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("failed writing {path}: {message}")]
    WriteFailed { path: PathBuf, message: String },
    #[error("{what} has {got} frames, camera.json declares {expected}")]
    FrameCountMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("{what} frame {frame} is {got_w}x{got_h}, camera is {cam_w}x{cam_h}")]
    DimensionMismatch {
        what: &'static str,
        frame: usize,
        got_w: usize,
        got_h: usize,
        cam_w: usize,
        cam_h: usize,
    },
    #[error("bundle has no frames")]
    Empty,
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Gripper geometry sidecar stored next to the gripper mesh. The mesh is
/// stored fully open; `finger_vertex_ids` name the two jaw vertex sets
/// that translate along `closing_axis` when the gripper closes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GripperSpec {
    pub tcp_offset: [f64; 3],
    pub base_offset: [f64; 3],
    pub closing_axis: [f64; 3],
    pub max_width: f64,
    pub finger_vertex_ids: [Vec<usize>; 2],
}

#[derive(Serialize, Deserialize)]
struct CameraJson {
    intrinsics: PinholeCamera,
    poses: Vec<Pose6D>,
}

/// A demonstration loaded into memory.
#[derive(Debug, Clone)]
pub struct DemoBundle {
    pub camera: PinholeCamera,
    pub cam_poses: Vec<Pose6D>,
    pub object_masks: Vec<BinaryMask>,
    pub hand_masks: Vec<BinaryMask>,
    pub depths: Vec<DepthMap>,
    pub keypoints: Vec<HandObservation>,
    pub object_mesh: TriMesh,
    pub scene_mesh: TriMesh,
    pub gripper_mesh: TriMesh,
    pub gripper_spec: GripperSpec,
    pub init_pose: Option<Pose6D>,
}

fn missing(path: &Path) -> BundleError {
    BundleError::Missing {
        path: path.to_path_buf(),
    }
}

fn malformed(path: &Path, err: impl std::fmt::Display) -> BundleError {
    BundleError::Malformed {
        path: path.to_path_buf(),
        message: err.to_string(),
    }
}

fn write_failed(path: &Path, err: impl std::fmt::Display) -> BundleError {
    BundleError::WriteFailed {
        path: path.to_path_buf(),
        message: err.to_string(),
    }
}

fn open(path: &Path) -> Result<BufReader<File>, BundleError> {
    if !path.exists() {
        return Err(missing(path));
    }
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| malformed(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, BundleError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| write_failed(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, BundleError> {
    serde_json::from_reader(open(path)?).map_err(|e| malformed(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), BundleError> {
    serde_json::to_writer_pretty(create(path)?, value).map_err(|e| write_failed(path, e))
}

fn read_mesh(path: &Path) -> Result<TriMesh, BundleError> {
    TriMesh::read_ply(open(path)?).map_err(|e| malformed(path, e))
}

impl DemoBundle {
    pub fn frame_count(&self) -> usize {
        self.cam_poses.len()
    }

    /// Load a bundle directory, validating frame counts and image
    /// dimensions against camera.json.
    pub fn load(dir: &Path) -> Result<DemoBundle, BundleError> {
        let cam: CameraJson = read_json(&dir.join("camera.json"))?;
        let frames = cam.poses.len();
        if frames == 0 {
            return Err(BundleError::Empty);
        }
        let mut object_masks = Vec::with_capacity(frames);
        let mut hand_masks = Vec::with_capacity(frames);
        let mut depths = Vec::with_capacity(frames);
        let mut keypoints = Vec::with_capacity(frames);
        for t in 0..frames {
            let p = dir.join(format!("masks/object_{t:04}.pgm"));
            object_masks.push(BinaryMask::read_pgm(open(&p)?).map_err(|e| malformed(&p, e))?);
            let p = dir.join(format!("masks/hand_{t:04}.pgm"));
            hand_masks.push(BinaryMask::read_pgm(open(&p)?).map_err(|e| malformed(&p, e))?);
            let p = dir.join(format!("depth/{t:04}.pfm"));
            depths.push(DepthMap::read_pfm(open(&p)?).map_err(|e| malformed(&p, e))?);
            keypoints.push(read_json(&dir.join(format!("keypoints/{t:04}.json")))?);
        }
        let init_path = dir.join("poses/init.json");
        let init_pose = if init_path.exists() {
            Some(read_json(&init_path)?)
        } else {
            None
        };
        let bundle = DemoBundle {
            camera: cam.intrinsics,
            cam_poses: cam.poses,
            object_masks,
            hand_masks,
            depths,
            keypoints,
            object_mesh: read_mesh(&dir.join("meshes/object.ply"))?,
            scene_mesh: read_mesh(&dir.join("meshes/scene.ply"))?,
            gripper_mesh: read_mesh(&dir.join("meshes/gripper.ply"))?,
            gripper_spec: read_json(&dir.join("meshes/gripper.json"))?,
            init_pose,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Write the bundle directory, creating subdirectories as needed.
    /// Existing files are overwritten.
    pub fn save(&self, dir: &Path) -> Result<(), BundleError> {
        self.validate()?;
        for sub in ["masks", "depth", "keypoints", "meshes", "poses"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| write_failed(&p, e))?;
        }
        write_json(
            &dir.join("camera.json"),
            &CameraJson {
                intrinsics: self.camera,
                poses: self.cam_poses.clone(),
            },
        )?;
        for t in 0..self.frame_count() {
            let p = dir.join(format!("masks/object_{t:04}.pgm"));
            self.object_masks[t]
                .write_pgm(create(&p)?)
                .map_err(|e| write_failed(&p, e))?;
            let p = dir.join(format!("masks/hand_{t:04}.pgm"));
            self.hand_masks[t]
                .write_pgm(create(&p)?)
                .map_err(|e| write_failed(&p, e))?;
            let p = dir.join(format!("depth/{t:04}.pfm"));
            self.depths[t]
                .write_pfm(create(&p)?)
                .map_err(|e| write_failed(&p, e))?;
            write_json(&dir.join(format!("keypoints/{t:04}.json")), &self.keypoints[t])?;
        }
        let p = dir.join("meshes/object.ply");
        self.object_mesh
            .write_ply(create(&p)?)
            .map_err(|e| write_failed(&p, e))?;
        let p = dir.join("meshes/scene.ply");
        self.scene_mesh
            .write_ply(create(&p)?)
            .map_err(|e| write_failed(&p, e))?;
        let p = dir.join("meshes/gripper.ply");
        self.gripper_mesh
            .write_ply(create(&p)?)
            .map_err(|e| write_failed(&p, e))?;
        write_json(&dir.join("meshes/gripper.json"), &self.gripper_spec)?;
        match &self.init_pose {
            Some(pose) => write_json(&dir.join("poses/init.json"), pose)?,
            None => {
                let p = dir.join("poses/init.json");
                if p.exists() {
                    std::fs::remove_file(&p).map_err(|e| write_failed(&p, e))?;
                }
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), BundleError> {
        let frames = self.frame_count();
        if frames == 0 {
            return Err(BundleError::Empty);
        }
        let checks: [(&'static str, usize); 4] = [
            ("object masks", self.object_masks.len()),
            ("hand masks", self.hand_masks.len()),
            ("depth maps", self.depths.len()),
            ("keypoint files", self.keypoints.len()),
        ];
        for (what, got) in checks {
            if got != frames {
                return Err(BundleError::FrameCountMismatch {
                    what,
                    got,
                    expected: frames,
                });
            }
        }
        let (cw, ch) = (self.camera.width, self.camera.height);
        for t in 0..frames {
            let dims: [(&'static str, usize, usize); 3] = [
                ("object mask", self.object_masks[t].width, self.object_masks[t].height),
                ("hand mask", self.hand_masks[t].width, self.hand_masks[t].height),
                ("depth map", self.depths[t].width, self.depths[t].height),
            ];
            for (what, w, h) in dims {
                if (w, h) != (cw, ch) {
                    return Err(BundleError::DimensionMismatch {
                        what,
                        frame: t,
                        got_w: w,
                        got_h: h,
                        cam_w: cw,
                        cam_h: ch,
                    });
                }
            }
        }
        Ok(())
    }
}
