//! Software z-buffer rasterizer and a per-pixel ray-casting reference.
//!
//! Both render the same scene description (mesh in body frame, world-from-body
//! pose, world-from-camera pose, pinhole intrinsics) to a coverage mask and a
//! camera-frame depth map. The rasterizer is the fast path used inside loss
//! evaluation; the ray caster exists to cross-check it and is kept
//! algorithmically independent (Moller-Trumbore intersection, no shared
//! coverage logic).

use crate::geometry::{BinaryMask, DepthMap, PinholeCamera, Pose6D, TriMesh, INVALID_DEPTH};
use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

/// Geometry closer than this to the principal plane is clipped.
pub const NEAR_PLANE: f64 = 1e-4;

/// Finite-difference step for objectives that include a hard
/// rasterization. Coverage changes in whole pixels, so probes below the
/// footprint of one pixel see a piecewise-constant mask term.
pub(crate) const RASTERIZED_FD_STEP: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("no triangle projects onto the image (pose/camera mismatch)")]
    EmptyRender,
}

/// Coverage mask plus camera-frame depth; depth is finite exactly where the
/// mask is 1.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub mask: BinaryMask,
    pub depth: DepthMap,
}

impl RenderOutput {
    fn from_zbuffer(width: usize, height: usize, z: Vec<f64>) -> RenderOutput {
        let mut mask = BinaryMask::zeros(width, height);
        let mut depth = DepthMap::empty(width, height);
        for y in 0..height {
            for x in 0..width {
                let v = z[y * width + x];
                if v.is_finite() {
                    mask.set(x, y, 1);
                    depth.set(x, y, v);
                }
            }
        }
        RenderOutput { mask, depth }
    }
}

/// Renders one mesh; errors if nothing lands on the image.
pub fn rasterize(
    mesh: &TriMesh,
    pose: &Pose6D,
    camera_pose: &Pose6D,
    camera: &PinholeCamera,
) -> Result<RenderOutput, RenderError> {
    let out = rasterize_meshes(&[(mesh, *pose)], camera_pose, camera);
    if out.mask.count_ones() == 0 {
        return Err(RenderError::EmptyRender);
    }
    Ok(out)
}

/// Renders one mesh, returning an all-invalid output when it misses the
/// image entirely. Used inside loss evaluation where an off-screen probe is
/// a legitimate (high-loss) state, not an error.
pub fn rasterize_allow_empty(
    mesh: &TriMesh,
    pose: &Pose6D,
    camera_pose: &Pose6D,
    camera: &PinholeCamera,
) -> RenderOutput {
    rasterize_meshes(&[(mesh, *pose)], camera_pose, camera)
}

/// Renders several posed meshes into one shared z-buffer (mutual occlusion).
pub fn rasterize_meshes(
    meshes: &[(&TriMesh, Pose6D)],
    camera_pose: &Pose6D,
    camera: &PinholeCamera,
) -> RenderOutput {
    let (w, h) = (camera.width, camera.height);
    let mut z = vec![INVALID_DEPTH; w * h];
    let cam_from_world = camera_pose.invert();
    for (mesh, pose) in meshes {
        let cam_from_body = cam_from_world.compose(pose);
        rasterize_into(&mut z, mesh, &cam_from_body, camera);
    }
    RenderOutput::from_zbuffer(w, h, z)
}

fn rasterize_into(z: &mut [f64], mesh: &TriMesh, cam_from_body: &Pose6D, camera: &PinholeCamera) {
    let cam_verts: Vec<Vector3<f64>> =
        mesh.vertices.iter().map(|v| cam_from_body.apply(v)).collect();
    for face in &mesh.faces {
        let tri = [cam_verts[face[0]], cam_verts[face[1]], cam_verts[face[2]]];
        for clipped in clip_near(&tri) {
            raster_triangle(z, &clipped, camera);
        }
    }
}

/// Sutherland-Hodgman clip of one triangle against z = NEAR_PLANE; yields
/// zero, one, or two triangles.
fn clip_near(tri: &[Vector3<f64>; 3]) -> Vec<[Vector3<f64>; 3]> {
    let inside = |p: &Vector3<f64>| p.z >= NEAR_PLANE;
    if tri.iter().all(inside) {
        return vec![*tri];
    }
    let mut poly: Vec<Vector3<f64>> = Vec::with_capacity(4);
    for i in 0..3 {
        let cur = tri[i];
        let next = tri[(i + 1) % 3];
        if inside(&cur) {
            poly.push(cur);
        }
        if inside(&cur) != inside(&next) {
            let t = (NEAR_PLANE - cur.z) / (next.z - cur.z);
            poly.push(cur + (next - cur) * t);
        }
    }
    match poly.len() {
        3 => vec![[poly[0], poly[1], poly[2]]],
        4 => vec![[poly[0], poly[1], poly[2]], [poly[0], poly[2], poly[3]]],
        _ => Vec::new(),
    }
}

#[inline]
fn edge(a: &Vector2<f64>, b: &Vector2<f64>, p: &Vector2<f64>) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

fn raster_triangle(z: &mut [f64], tri: &[Vector3<f64>; 3], camera: &PinholeCamera) {
    // All vertices are at z >= NEAR_PLANE after clipping.
    let p: Vec<Vector2<f64>> = tri
        .iter()
        .map(|v| Vector2::new(camera.fx * v.x / v.z + camera.cx, camera.fy * v.y / v.z + camera.cy))
        .collect();
    let inv_z = [1.0 / tri[0].z, 1.0 / tri[1].z, 1.0 / tri[2].z];

    let area = edge(&p[0], &p[1], &p[2]);
    if area == 0.0 {
        return;
    }
    let flip = if area < 0.0 { -1.0 } else { 1.0 };
    let area = area * flip;

    let min_x = p.iter().map(|q| q.x).fold(f64::INFINITY, f64::min);
    let max_x = p.iter().map(|q| q.x).fold(f64::NEG_INFINITY, f64::max);
    let min_y = p.iter().map(|q| q.y).fold(f64::INFINITY, f64::min);
    let max_y = p.iter().map(|q| q.y).fold(f64::NEG_INFINITY, f64::max);
    let x0 = min_x.ceil().max(0.0) as usize;
    let x1 = max_x.floor().min((camera.width - 1) as f64);
    let y0 = min_y.ceil().max(0.0) as usize;
    let y1 = max_y.floor().min((camera.height - 1) as f64);
    if x1 < 0.0 || y1 < 0.0 || min_x > (camera.width - 1) as f64 || min_y > (camera.height - 1) as f64
    {
        return;
    }
    let (x1, y1) = (x1 as usize, y1 as usize);

    for py in y0..=y1 {
        for px in x0..=x1 {
            // Pixel (px, py) samples the projection plane at integer coords.
            let q = Vector2::new(px as f64, py as f64);
            let w0 = edge(&p[1], &p[2], &q) * flip;
            let w1 = edge(&p[2], &p[0], &q) * flip;
            let w2 = edge(&p[0], &p[1], &q) * flip;
            if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                continue;
            }
            // Perspective-correct depth: 1/z interpolates linearly in screen
            // space, so this is the exact plane depth along the pixel ray.
            let zi = 1.0 / ((w0 * inv_z[0] + w1 * inv_z[1] + w2 * inv_z[2]) / area);
            let idx = py * camera.width + px;
            if zi < z[idx] {
                z[idx] = zi;
            }
        }
    }
}

/// Ray-casting reference renderer: one ray per pixel center, nearest
/// Moller-Trumbore intersection at or beyond the near plane.
pub fn raycast_depth(
    mesh: &TriMesh,
    pose: &Pose6D,
    camera_pose: &Pose6D,
    camera: &PinholeCamera,
) -> RenderOutput {
    let cam_from_body = camera_pose.invert().compose(pose);
    let cam_verts: Vec<Vector3<f64>> =
        mesh.vertices.iter().map(|v| cam_from_body.apply(v)).collect();
    let tris: Vec<[Vector3<f64>; 3]> = mesh
        .faces
        .iter()
        .map(|f| [cam_verts[f[0]], cam_verts[f[1]], cam_verts[f[2]]])
        .collect();

    let (w, h) = (camera.width, camera.height);
    let z: Vec<f64> = (0..h)
        .into_par_iter()
        .flat_map_iter(|py| {
            let tris = &tris;
            (0..w).map(move |px| {
                let dir = camera.ray_direction(&Vector2::new(px as f64, py as f64));
                let mut best = INVALID_DEPTH;
                for tri in tris {
                    if let Some(t) = ray_triangle(&dir, tri) {
                        // dir.z == 1, so the parameter t is the depth.
                        if t >= NEAR_PLANE && t < best {
                            best = t;
                        }
                    }
                }
                best
            })
        })
        .collect();
    RenderOutput::from_zbuffer(w, h, z)
}

/// Moller-Trumbore for a ray from the origin; returns the ray parameter.
fn ray_triangle(dir: &Vector3<f64>, tri: &[Vector3<f64>; 3]) -> Option<f64> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let pvec = dir.cross(&e2);
    let det = e1.dot(&pvec);
    if det.abs() < 1e-16 {
        return None;
    }
    let inv_det = 1.0 / det;
    let tvec = -tri[0];
    let u = tvec.dot(&pvec) * inv_det;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qvec = tvec.cross(&e1);
    let v = dir.dot(&qvec) * inv_det;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&qvec) * inv_det;
    (t > 0.0).then_some(t)
}

/// Minimum distance from a pixel center to any projected triangle edge;
/// used to verify that rasterize/raycast coverage disagreements only occur
/// on edge-touching pixels.
pub fn min_edge_distance(
    mesh: &TriMesh,
    pose: &Pose6D,
    camera_pose: &Pose6D,
    camera: &PinholeCamera,
    pixel: (usize, usize),
) -> f64 {
    let cam_from_body = camera_pose.invert().compose(pose);
    let q = Vector2::new(pixel.0 as f64, pixel.1 as f64);
    let mut best = f64::INFINITY;
    for face in &mesh.faces {
        let tri = [
            cam_from_body.apply(&mesh.vertices[face[0]]),
            cam_from_body.apply(&mesh.vertices[face[1]]),
            cam_from_body.apply(&mesh.vertices[face[2]]),
        ];
        if tri.iter().any(|v| v.z < NEAR_PLANE) {
            continue;
        }
        let p: Vec<Vector2<f64>> = tri
            .iter()
            .map(|v| {
                Vector2::new(camera.fx * v.x / v.z + camera.cx, camera.fy * v.y / v.z + camera.cy)
            })
            .collect();
        for i in 0..3 {
            best = best.min(point_segment_distance(&q, &p[i], &p[(i + 1) % 3]));
        }
    }
    best
}

fn point_segment_distance(q: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return (q - a).norm();
    }
    let t = ((q - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (q - (a + ab * t)).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_exp;
    use approx::assert_relative_eq;

    fn cam() -> PinholeCamera {
        PinholeCamera::new(100.0, 100.0, 50.0, 50.0, 100, 100)
    }

    fn identity() -> Pose6D {
        Pose6D::identity()
    }

    fn tri_mesh(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> TriMesh {
        TriMesh::new(
            vec![Vector3::from(a), Vector3::from(b), Vector3::from(c)],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    #[test]
    fn single_triangle_covers_center_pixel_at_unit_depth() {
        let mesh = tri_mesh([-0.02, -0.02, 1.0], [0.04, -0.02, 1.0], [-0.02, 0.04, 1.0]);
        let out = rasterize(&mesh, &identity(), &identity(), &cam()).unwrap();
        assert_eq!(out.mask.get(50, 50), 1);
        assert_relative_eq!(out.depth.get(50, 50), 1.0, epsilon = 1e-12);
        // A pixel far outside the projected triangle stays invalid.
        assert_eq!(out.mask.get(90, 90), 0);
        assert!(!out.depth.is_valid(90, 90));
    }

    #[test]
    fn depth_finite_exactly_where_mask_set() {
        let mesh = tri_mesh([-0.1, -0.1, 2.0], [0.3, -0.1, 2.0], [-0.1, 0.3, 1.0]);
        let out = rasterize(&mesh, &identity(), &identity(), &cam()).unwrap();
        for y in 0..100 {
            for x in 0..100 {
                assert_eq!(out.mask.get(x, y) == 1, out.depth.is_valid(x, y));
            }
        }
    }

    #[test]
    fn nearer_triangle_wins_zbuffer() {
        let far = tri_mesh([-0.3, -0.3, 2.0], [0.3, -0.3, 2.0], [0.0, 0.45, 2.0]);
        let near = tri_mesh([-0.1, -0.1, 1.0], [0.1, -0.1, 1.0], [0.0, 0.15, 1.0]);
        let out = rasterize_meshes(
            &[(&far, identity()), (&near, identity())],
            &identity(),
            &cam(),
        );
        assert_relative_eq!(out.depth.get(50, 50), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn mesh_behind_camera_is_empty_render() {
        let mesh = tri_mesh([-0.1, -0.1, -1.0], [0.1, -0.1, -1.0], [0.0, 0.1, -1.0]);
        let err = rasterize(&mesh, &identity(), &identity(), &cam());
        assert!(matches!(err, Err(RenderError::EmptyRender)));
    }

    #[test]
    fn translating_along_optical_axis_shifts_depth_exactly() {
        // Fronto-parallel square: every ray hits the same plane, so depth
        // must increase by exactly the translation.
        let mesh = crate::geometry::TriMesh::new(
            vec![
                Vector3::new(-0.2, -0.2, 1.0),
                Vector3::new(0.2, -0.2, 1.0),
                Vector3::new(0.2, 0.2, 1.0),
                Vector3::new(-0.2, 0.2, 1.0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        let out0 = rasterize(&mesh, &identity(), &identity(), &cam()).unwrap();
        let delta = 0.35;
        let shifted = Pose6D::from_translation(Vector3::new(0.0, 0.0, delta));
        let out1 = rasterize(&mesh, &shifted, &identity(), &cam()).unwrap();
        let mut common = 0;
        for y in 0..100 {
            for x in 0..100 {
                match (out0.mask.get(x, y) == 1, out1.mask.get(x, y) == 1) {
                    (true, true) => {
                        common += 1;
                        assert!((out1.depth.get(x, y) - (out0.depth.get(x, y) + delta)).abs() < 1e-9);
                    }
                    (a, b) if a != b => {
                        // Coverage may only change at the shrinking silhouette.
                        let d = out0
                            .mask
                            .boundary_pixels()
                            .iter()
                            .map(|&(bx, by)| {
                                let (dx, dy) = (bx as f64 - x as f64, by as f64 - y as f64);
                                (dx * dx + dy * dy).sqrt()
                            })
                            .fold(f64::INFINITY, f64::min);
                        assert!(d <= 16.0, "coverage changed far from silhouette: ({x},{y})");
                    }
                    _ => {}
                }
            }
        }
        assert!(common > 100);
        // The farther square covers strictly fewer pixels.
        assert!(out1.mask.count_ones() < out0.mask.count_ones());
    }

    fn cylinder_along_z(radius: f64, z0: f64, z1: f64, segments: usize) -> TriMesh {
        let mut verts = Vec::new();
        for &zc in &[z0, z1] {
            for i in 0..segments {
                let a = 2.0 * std::f64::consts::PI * i as f64 / segments as f64;
                verts.push(Vector3::new(radius * a.cos(), radius * a.sin(), zc));
            }
        }
        verts.push(Vector3::new(0.0, 0.0, z0));
        verts.push(Vector3::new(0.0, 0.0, z1));
        let (c0, c1) = (2 * segments, 2 * segments + 1);
        let mut faces = Vec::new();
        for i in 0..segments {
            let j = (i + 1) % segments;
            faces.push([i, j, segments + i]);
            faces.push([j, segments + j, segments + i]);
            faces.push([j, i, c0]);
            faces.push([segments + i, segments + j, c1]);
        }
        TriMesh::new(verts, faces).unwrap()
    }

    #[test]
    fn surface_of_revolution_mask_invariant_under_axis_rotation() {
        let mesh = cylinder_along_z(0.3, 1.0, 1.5, 64);
        let out0 = rasterize(&mesh, &identity(), &identity(), &cam()).unwrap();
        let rot = Pose6D::from_rotation(so3_exp(&Vector3::new(0.0, 0.0, 0.4)));
        let out1 = rasterize(&mesh, &rot, &identity(), &cam()).unwrap();
        let boundary = out0.mask.boundary_pixels();
        let near_boundary = |x: usize, y: usize| {
            boundary.iter().any(|&(bx, by)| {
                (bx as i64 - x as i64).abs() <= 1 && (by as i64 - y as i64).abs() <= 1
            })
        };
        for y in 0..100 {
            for x in 0..100 {
                if out0.mask.get(x, y) != out1.mask.get(x, y) {
                    assert!(near_boundary(x, y), "difference away from silhouette at ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn raycast_matches_rasterizer_on_simple_scene() {
        let mesh = tri_mesh([-0.15, -0.1, 1.2], [0.2, -0.05, 1.8], [0.0, 0.25, 1.4]);
        let ras = rasterize(&mesh, &identity(), &identity(), &cam()).unwrap();
        let ray = raycast_depth(&mesh, &identity(), &identity(), &cam());
        for y in 0..100 {
            for x in 0..100 {
                let (a, b) = (ras.mask.get(x, y), ray.mask.get(x, y));
                if a == b && a == 1 {
                    assert!(
                        (ras.depth.get(x, y) - ray.depth.get(x, y)).abs() < 1e-6,
                        "depth mismatch at ({x},{y})"
                    );
                } else if a != b {
                    let d = min_edge_distance(&mesh, &identity(), &identity(), &cam(), (x, y));
                    assert!(d < 1e-6, "coverage mismatch {d} px from an edge at ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn near_plane_clipping_keeps_front_part() {
        // Triangle pierces the near plane; the part in front must render
        // and agree with the ray caster away from the clip seam.
        let mesh = tri_mesh([0.0, -0.05, -0.5], [0.05, 0.05, 1.0], [-0.05, 0.05, 1.0]);
        let ras = rasterize_allow_empty(&mesh, &identity(), &identity(), &cam());
        let ray = raycast_depth(&mesh, &identity(), &identity(), &cam());
        assert!(ras.mask.count_ones() > 0);
        let mut checked = 0;
        for y in 0..100 {
            for x in 0..100 {
                if ras.mask.get(x, y) == 1 && ray.mask.get(x, y) == 1 {
                    assert!((ras.depth.get(x, y) - ray.depth.get(x, y)).abs() < 1e-6);
                    checked += 1;
                }
            }
        }
        assert!(checked > 10);
    }
}
