use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Points closer than this to the principal plane cannot be projected.
pub const MIN_PROJECT_DEPTH: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ProjectError {
    #[error("point {index} has non-positive depth z = {z:.3e}")]
    NonPositiveDepth { index: usize, z: f64 },
}

/// Pinhole intrinsics; no distortion model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl PinholeCamera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        assert!(width > 0 && height > 0, "image dimensions must be nonzero");
        PinholeCamera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    /// Projects a camera-frame point to pixel coordinates.
    pub fn project_point(&self, p: &Vector3<f64>, index: usize) -> Result<Vector2<f64>, ProjectError> {
        if p.z <= MIN_PROJECT_DEPTH {
            return Err(ProjectError::NonPositiveDepth { index, z: p.z });
        }
        Ok(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Projects a batch of camera-frame points; fails on the first point at
    /// or behind the principal plane.
    pub fn project(&self, points: &[Vector3<f64>]) -> Result<Vec<Vector2<f64>>, ProjectError> {
        points
            .iter()
            .enumerate()
            .map(|(i, p)| self.project_point(p, i))
            .collect()
    }

    /// Camera-frame point on the ray through `pixel` at depth `z`.
    pub fn back_project(&self, pixel: &Vector2<f64>, z: f64) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx * z,
            (pixel.y - self.cy) / self.fy * z,
            z,
        )
    }

    /// Unit-depth ray direction through `pixel` (z component is 1).
    pub fn ray_direction(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0)
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x <= (self.width - 1) as f64
            && pixel.y <= (self.height - 1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cam() -> PinholeCamera {
        PinholeCamera::new(100.0, 100.0, 50.0, 50.0, 100, 100)
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let px = cam().project(&[Vector3::new(0.0, 0.0, 1.0)]).unwrap();
        assert_relative_eq!(px[0], Vector2::new(50.0, 50.0), epsilon = 1e-15);
    }

    #[test]
    fn scalar_projection_oracle() {
        // Oracle: plain scalar arithmetic, no vector code paths.
        let c = PinholeCamera::new(320.0, 240.0, 160.5, 120.5, 640, 480);
        let p = Vector3::new(0.3, -0.2, 1.7);
        let u = 320.0 * 0.3 / 1.7 + 160.5;
        let v = 240.0 * -0.2 / 1.7 + 120.5;
        let px = c.project(&[p]).unwrap();
        assert_relative_eq!(px[0], Vector2::new(u, v), epsilon = 1e-12);
    }

    #[test]
    fn rejects_point_behind_camera() {
        let err = cam().project(&[Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.1, 0.1, 0.0)]);
        match err {
            Err(ProjectError::NonPositiveDepth { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected NonPositiveDepth, got {other:?}"),
        }
    }

    #[test]
    fn rejects_depth_at_threshold() {
        assert!(cam().project(&[Vector3::new(0.0, 0.0, 1e-9)]).is_err());
        assert!(cam().project(&[Vector3::new(0.0, 0.0, 1.1e-9)]).is_ok());
    }

    proptest! {
        #[test]
        fn back_project_inverts_project(
            x in -0.5f64..0.5, y in -0.5f64..0.5, z in 0.1f64..10.0,
        ) {
            let c = cam();
            let p = Vector3::new(x, y, z);
            let px = c.project_point(&p, 0).unwrap();
            let q = c.back_project(&px, z);
            prop_assert!((q - p).norm() < 1e-9 * z.max(1.0));
        }
    }
}
