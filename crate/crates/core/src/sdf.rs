//! Truncated signed distance fields over triangle meshes.
//!
//! A `TsdfGrid` stores clamped signed distances (negative inside) on a dense
//! voxel grid covering the mesh AABB plus padding. Distances are exact
//! point-to-triangle distances inside a band of `truncation + voxel_size`
//! around each triangle; the sign comes from axis-parallel ray parity along
//! all three axes with a majority vote. Queries interpolate trilinearly and
//! clamp to `+truncation` outside the grid, so the field is bounded and
//! Lipschitz, which keeps the hinge penetration loss well behaved under
//! finite-difference gradients.

use crate::geometry::{Pose6D, TriMesh};
use nalgebra::Vector3;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"TSDFGRID";
const VERSION: u32 = 1;
/// Fraction of voxels whose three axis votes may disagree before the mesh is
/// rejected as non-watertight.
const MAX_AMBIGUOUS_FRACTION: f64 = 0.01;

#[derive(Debug, Error)]
pub enum SdfError {
    #[error("voxel_size, truncation and padding must be positive")]
    InvalidConfig,
    #[error("mesh is not watertight: {ambiguous_fraction:.4} of sign probes ambiguous")]
    NonWatertight { ambiguous_fraction: f64 },
    #[error("tsdf io: {0}")]
    Io(#[from] std::io::Error),
    #[error("tsdf format: {0}")]
    Format(String),
}

/// Dense truncated signed distance field. Immutable once built; shareable
/// across threads.
#[derive(Clone, Debug)]
pub struct TsdfGrid {
    origin: Vector3<f64>,
    voxel_size: f64,
    dims: [usize; 3],
    truncation: f64,
    values: Vec<f32>,
}

/// Defaults used when a configuration does not pin the grid resolution:
/// voxel = longest AABB edge / 64, truncation = 4 voxels, padding = truncation.
pub fn default_tsdf_params(mesh: &TriMesh) -> (f64, f64, f64) {
    let voxel = mesh.aabb().longest_edge() / 64.0;
    let tau = 4.0 * voxel;
    (voxel, tau, tau)
}

pub fn build_tsdf_default(mesh: &TriMesh) -> Result<TsdfGrid, SdfError> {
    let (voxel, tau, padding) = default_tsdf_params(mesh);
    build_tsdf(mesh, voxel, tau, padding)
}

pub fn build_tsdf(
    mesh: &TriMesh,
    voxel_size: f64,
    truncation: f64,
    padding: f64,
) -> Result<TsdfGrid, SdfError> {
    if voxel_size <= 0.0 || truncation <= 0.0 || padding < 0.0 {
        return Err(SdfError::InvalidConfig);
    }
    let aabb = mesh.aabb();
    let origin = aabb.min - Vector3::repeat(padding);
    let extent = aabb.extent();
    let h = voxel_size;
    let dim = |e: f64| ((e + 2.0 * padding) / h).ceil() as usize + 1;
    let dims = [dim(extent.x), dim(extent.y), dim(extent.z)];
    let n = dims[0] * dims[1] * dims[2];

    let tris: Vec<[Vector3<f64>; 3]> = (0..mesh.faces.len()).map(|i| mesh.triangle(i)).collect();

    // Pass 1: unsigned distance inside the band. Parallel over z-planes so
    // each thread owns a disjoint slice; min is order-independent.
    let mut dist = vec![f64::INFINITY; n];
    let band = truncation + h;
    let plane = dims[0] * dims[1];
    {
        use rayon::prelude::*;
        let tri_aabbs: Vec<(Vector3<f64>, Vector3<f64>)> = tris
            .iter()
            .map(|t| {
                let mut lo = t[0];
                let mut hi = t[0];
                for v in &t[1..] {
                    lo = lo.inf(v);
                    hi = hi.sup(v);
                }
                (lo.add_scalar(-band), hi.add_scalar(band))
            })
            .collect();
        dist.par_chunks_mut(plane).enumerate().for_each(|(k, slab)| {
            let z = origin.z + (k as f64 + 0.5) * h;
            for (ti, tri) in tris.iter().enumerate() {
                let (lo, hi) = &tri_aabbs[ti];
                if z < lo.z || z > hi.z {
                    continue;
                }
                let lo_i = (((lo.x - origin.x) / h - 0.5).ceil().max(0.0)) as usize;
                let lo_j = (((lo.y - origin.y) / h - 0.5).ceil().max(0.0)) as usize;
                let hi_i = ((hi.x - origin.x) / h - 0.5).floor().min(dims[0] as f64 - 1.0);
                let hi_j = ((hi.y - origin.y) / h - 0.5).floor().min(dims[1] as f64 - 1.0);
                if hi_i < lo_i as f64 || hi_j < lo_j as f64 {
                    continue;
                }
                for j in lo_j..=hi_j as usize {
                    let y = origin.y + (j as f64 + 0.5) * h;
                    for i in lo_i..=hi_i as usize {
                        let x = origin.x + (i as f64 + 0.5) * h;
                        let d = point_triangle_distance(&Vector3::new(x, y, z), tri);
                        let cell = &mut slab[j * dims[0] + i];
                        if d < *cell {
                            *cell = d;
                        }
                    }
                }
            }
        });
    }

    // Pass 2: inside/outside by ray parity along each axis, majority vote.
    let votes: Vec<Vec<bool>> = {
        use rayon::prelude::*;
        (0..3usize)
            .into_par_iter()
            .map(|axis| axis_parity(&tris, &origin, h, &dims, axis))
            .collect()
    };
    let mut ambiguous = 0usize;
    let mut values = vec![0.0f32; n];
    for idx in 0..n {
        let inside_votes =
            votes[0][idx] as u8 + votes[1][idx] as u8 + votes[2][idx] as u8;
        if inside_votes != 0 && inside_votes != 3 {
            ambiguous += 1;
        }
        let sign = if inside_votes >= 2 { -1.0 } else { 1.0 };
        values[idx] = (sign * dist[idx].min(truncation)) as f32;
    }
    let ambiguous_fraction = ambiguous as f64 / n as f64;
    if ambiguous_fraction > MAX_AMBIGUOUS_FRACTION {
        return Err(SdfError::NonWatertight { ambiguous_fraction });
    }

    Ok(TsdfGrid { origin, voxel_size: h, dims, truncation, values })
}

/// Inside flags for every voxel from parity of surface crossings along one
/// axis. Rays are jittered off the voxel-center lattice by a fixed
/// sub-voxel amount so they miss edge/vertex tangencies; crossings closer
/// than 1e-9 (duplicate hits on shared edges) collapse to one.
fn axis_parity(
    tris: &[[Vector3<f64>; 3]],
    origin: &Vector3<f64>,
    h: f64,
    dims: &[usize; 3],
    axis: usize,
) -> Vec<bool> {
    let (ua, va) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (nu, nv, na) = (dims[ua], dims[va], dims[axis]);
    let jitter_u = 3.1e-5 * h;
    let jitter_v = 1.7e-5 * h;

    // Bin triangles by the rows their (u,v) projection can touch.
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); nu * nv];
    for (ti, tri) in tris.iter().enumerate() {
        let (mut lo_u, mut hi_u) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut lo_v, mut hi_v) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in tri {
            lo_u = lo_u.min(p[ua]);
            hi_u = hi_u.max(p[ua]);
            lo_v = lo_v.min(p[va]);
            hi_v = hi_v.max(p[va]);
        }
        let r = |lo: f64, o: f64| ((lo - o) / h - 0.5).floor().max(0.0) as usize;
        let u0 = r(lo_u, origin[ua]);
        let v0 = r(lo_v, origin[va]);
        let u1 = (((hi_u - origin[ua]) / h - 0.5).ceil() as usize).min(nu - 1);
        let v1 = (((hi_v - origin[va]) / h - 0.5).ceil() as usize).min(nv - 1);
        for v in v0..=v1 {
            for u in u0..=u1 {
                bins[v * nu + u].push(ti);
            }
        }
    }

    let stride = |i: usize, j: usize, k: usize| {
        let mut c = [0usize; 3];
        c[ua] = i;
        c[va] = j;
        c[axis] = k;
        (c[2] * dims[1] + c[1]) * dims[0] + c[0]
    };

    let mut inside = vec![false; dims[0] * dims[1] * dims[2]];
    let mut crossings: Vec<f64> = Vec::new();
    for v in 0..nv {
        for u in 0..nu {
            let ru = origin[ua] + (u as f64 + 0.5) * h + jitter_u;
            let rv = origin[va] + (v as f64 + 0.5) * h + jitter_v;
            crossings.clear();
            for &ti in &bins[v * nu + u] {
                if let Some(t) = ray_axis_crossing(&tris[ti], ua, va, axis, ru, rv) {
                    crossings.push(t);
                }
            }
            crossings.sort_by(|a, b| a.partial_cmp(b).unwrap());
            crossings.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
            let mut next = 0usize;
            let mut parity = false;
            for k in 0..na {
                let c = origin[axis] + (k as f64 + 0.5) * h;
                while next < crossings.len() && crossings[next] < c {
                    parity = !parity;
                    next += 1;
                }
                if parity {
                    inside[stride(u, v, k)] = true;
                }
            }
        }
    }
    inside
}

/// Axis coordinate where the axis-parallel line through (ru, rv) pierces the
/// triangle, if it does.
fn ray_axis_crossing(
    tri: &[Vector3<f64>; 3],
    ua: usize,
    va: usize,
    axis: usize,
    ru: f64,
    rv: f64,
) -> Option<f64> {
    let (a, b, c) = (&tri[0], &tri[1], &tri[2]);
    let e = |p: &Vector3<f64>, q: &Vector3<f64>| (q[ua] - p[ua]) * (rv - p[va]) - (q[va] - p[va]) * (ru - p[ua]);
    let w0 = e(b, c);
    let w1 = e(c, a);
    let w2 = e(a, b);
    let area = w0 + w1 + w2;
    if area == 0.0 {
        return None; // projected triangle degenerate: parallel to the ray
    }
    let (w0, w1, w2, area) = if area < 0.0 { (-w0, -w1, -w2, -area) } else { (w0, w1, w2, area) };
    if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
        return None;
    }
    Some((w0 * a[axis] + w1 * b[axis] + w2 * c[axis]) / area)
}

/// Closest distance from a point to a triangle (Ericson's region test).
fn point_triangle_distance(p: &Vector3<f64>, tri: &[Vector3<f64>; 3]) -> f64 {
    let (a, b, c) = (tri[0], tri[1], tri[2]);
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (p - a).norm();
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (p - b).norm();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let t = d1 / (d1 - d3);
        return (p - (a + ab * t)).norm();
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (p - c).norm();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let t = d2 / (d2 - d6);
        return (p - (a + ac * t)).norm();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (p - (b + (c - b) * t)).norm();
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (p - (a + ab * v + ac * w)).norm()
}

impl TsdfGrid {
    pub fn origin(&self) -> Vector3<f64> {
        self.origin
    }
    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }
    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[(k * self.dims[1] + j) * self.dims[0] + i] as f64
    }

    /// Trilinear interpolation over voxel centers; +truncation outside the
    /// interpolation support.
    pub fn eval(&self, point: &Vector3<f64>) -> f64 {
        let g = (point - self.origin) / self.voxel_size - Vector3::repeat(0.5);
        let i0 = g.map(f64::floor);
        for a in 0..3 {
            if i0[a] < 0.0 || i0[a] + 1.0 > self.dims[a] as f64 - 1.0 {
                return self.truncation;
            }
        }
        let (i, j, k) = (i0.x as usize, i0.y as usize, i0.z as usize);
        let f = g - i0;
        let mut acc = 0.0;
        for dk in 0..2 {
            for dj in 0..2 {
                for di in 0..2 {
                    let w = (if di == 0 { 1.0 - f.x } else { f.x })
                        * (if dj == 0 { 1.0 - f.y } else { f.y })
                        * (if dk == 0 { 1.0 - f.z } else { f.z });
                    acc += w * self.value(i + di, j + dj, k + dk);
                }
            }
        }
        acc
    }

    /// Field of the posed, uniformly scaled mesh: world point -> body frame
    /// -> canonical (unscaled) frame, distance scaled back to meters.
    pub fn eval_world(&self, world_from_body: &Pose6D, scale: f64, point: &Vector3<f64>) -> f64 {
        let body = world_from_body.invert().apply(point);
        scale * self.eval(&(body / scale))
    }

    /// Hinge penetration: only points inside the surface contribute.
    pub fn penetration_loss(&self, points: &[Vector3<f64>]) -> f64 {
        points.iter().map(|p| (-self.eval(p)).max(0.0)).sum()
    }

    /// Central-difference gradient of one point's hinge term, step = voxel/4.
    pub fn penetration_gradient(&self, point: &Vector3<f64>) -> Vector3<f64> {
        let h = self.voxel_size / 4.0;
        let mut g = Vector3::zeros();
        for a in 0..3 {
            let mut hi = *point;
            let mut lo = *point;
            hi[a] += h;
            lo[a] -= h;
            let f_hi = (-self.eval(&hi)).max(0.0);
            let f_lo = (-self.eval(&lo)).max(0.0);
            g[a] = (f_hi - f_lo) / (2.0 * h);
        }
        g
    }

    /// Centers of voxels where the field changes sign against any axis
    /// neighbor; a cheap, deterministic surface sampling.
    pub fn zero_crossing_points(&self) -> Vec<Vector3<f64>> {
        let mut out = Vec::new();
        let [nx, ny, nz] = self.dims;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let v = self.value(i, j, k);
                    let mut crossing = false;
                    if i + 1 < nx && (v < 0.0) != (self.value(i + 1, j, k) < 0.0) {
                        crossing = true;
                    }
                    if j + 1 < ny && (v < 0.0) != (self.value(i, j + 1, k) < 0.0) {
                        crossing = true;
                    }
                    if k + 1 < nz && (v < 0.0) != (self.value(i, j, k + 1) < 0.0) {
                        crossing = true;
                    }
                    if crossing && v >= 0.0 {
                        out.push(
                            self.origin
                                + Vector3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5)
                                    * self.voxel_size,
                        );
                    }
                }
            }
        }
        out
    }

    pub fn write_to(&self, path: &Path) -> Result<(), SdfError> {
        let mut buf = Vec::with_capacity(64 + self.values.len() * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&[0u8; 4]);
        for a in 0..3 {
            buf.extend_from_slice(&self.origin[a].to_le_bytes());
        }
        buf.extend_from_slice(&self.voxel_size.to_le_bytes());
        for d in self.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&self.truncation.to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<TsdfGrid, SdfError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 16 + 24 + 8 + 12 + 8 {
            return Err(SdfError::Format("file too short".into()));
        }
        if &bytes[0..8] != MAGIC {
            return Err(SdfError::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(SdfError::Format(format!("unsupported version {version}")));
        }
        let mut off = 16;
        let f64_at = |o: &mut usize| {
            let v = f64::from_le_bytes(bytes[*o..*o + 8].try_into().unwrap());
            *o += 8;
            v
        };
        let origin = Vector3::new(f64_at(&mut off), f64_at(&mut off), f64_at(&mut off));
        let voxel_size = f64_at(&mut off);
        let mut dims = [0usize; 3];
        for d in &mut dims {
            *d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
            off += 4;
        }
        let truncation = f64_at(&mut off);
        let n = dims[0] * dims[1] * dims[2];
        if bytes.len() != off + 4 * n {
            return Err(SdfError::Format(format!(
                "expected {} value bytes, found {}",
                4 * n,
                bytes.len() - off
            )));
        }
        let values = bytes[off..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(TsdfGrid { origin, voxel_size, dims, truncation, values })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_exp;
    use rand::Rng;

    fn unit_cube() -> TriMesh {
        crate::geometry::box_mesh(Vector3::new(-0.5, -0.5, -0.5), Vector3::new(0.5, 0.5, 0.5))
    }

    fn analytic_box_sdf(p: &Vector3<f64>, half: f64) -> f64 {
        let q = Vector3::new(p.x.abs() - half, p.y.abs() - half, p.z.abs() - half);
        let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
        let inside = q.x.max(q.y).max(q.z).min(0.0);
        outside + inside
    }

    fn cube_grid() -> TsdfGrid {
        build_tsdf(&unit_cube(), 0.01, 0.2, 0.2).unwrap()
    }

    #[test]
    fn cube_center_clamps_to_negative_truncation() {
        let g = cube_grid();
        assert!((g.eval(&Vector3::zeros()) + 0.2).abs() < 1e-6);
    }

    #[test]
    fn cube_exterior_point_has_analytic_distance() {
        let g = cube_grid();
        assert!((g.eval(&Vector3::new(0.6, 0.0, 0.0)) - 0.1).abs() < 1e-4);
    }

    #[test]
    fn mesh_vertex_is_within_voxel_diagonal_of_zero() {
        let g = cube_grid();
        let bound = 0.01 * 3f64.sqrt();
        for v in &unit_cube().vertices {
            assert!(g.eval(v).abs() <= bound, "vertex {v:?}: {}", g.eval(v));
        }
    }

    #[test]
    fn far_exterior_returns_positive_truncation() {
        let g = cube_grid();
        assert_eq!(g.eval(&Vector3::new(10.0, 0.0, 0.0)), 0.2);
    }

    #[test]
    fn voxel_center_and_midpoint_interpolation() {
        let g = cube_grid();
        let center = |i: usize, j: usize, k: usize| {
            g.origin() + Vector3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * g.voxel_size()
        };
        let (i, j, k) = (30, 40, 50);
        let stored = g.value(i, j, k);
        assert!((g.eval(&center(i, j, k)) - stored).abs() < 1e-6);
        let mid = (center(i, j, k) + center(i + 1, j, k)) * 0.5;
        let mean = 0.5 * (g.value(i, j, k) + g.value(i + 1, j, k));
        assert!((g.eval(&mid) - mean).abs() < 1e-6);
    }

    #[test]
    fn penetration_loss_examples() {
        let g = cube_grid();
        let outside = vec![Vector3::new(0.8, 0.0, 0.0), Vector3::new(0.0, -0.9, 0.3)];
        assert_eq!(g.penetration_loss(&outside), 0.0);
        let center = vec![Vector3::zeros()];
        assert!((g.penetration_loss(&center) - 0.2).abs() < 1e-6);
    }

    #[test]
    fn penetration_loss_non_increasing_moving_out() {
        let g = cube_grid();
        let mut prev = f64::INFINITY;
        for step in 0..70 {
            let p = Vector3::new(0.01 * step as f64, 0.0, 0.0);
            let loss = g.penetration_loss(&[p]);
            assert!(loss <= prev + 1e-7, "loss rose at x={}", p.x);
            prev = loss;
        }
        assert_eq!(prev, 0.0);
    }

    #[test]
    fn penetration_gradient_points_toward_nearest_face() {
        let g = cube_grid();
        // Inside near the +x face: moving +x reduces penetration.
        let grad = g.penetration_gradient(&Vector3::new(0.45, 0.0, 0.0));
        assert!(grad.x < -1e-3, "grad {grad:?}");
        assert!(grad.y.abs() < 1e-6 && grad.z.abs() < 1e-6);
        // Well outside: flat.
        let flat = g.penetration_gradient(&Vector3::new(0.9, 0.0, 0.0));
        assert_eq!(flat, Vector3::zeros());
    }

    #[test]
    fn sign_agrees_with_analytic_classification_away_from_surface() {
        let g = cube_grid();
        let mut rng = crate::util::seeded_rng(7);
        let mut checked = 0;
        for _ in 0..10_000 {
            let p = Vector3::new(
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.8..0.8),
            );
            let true_d = analytic_box_sdf(&p, 0.5);
            if true_d.abs() <= g.voxel_size() {
                continue; // within one voxel of the surface: sign may flip
            }
            checked += 1;
            assert_eq!(g.eval(&p) < 0.0, true_d < 0.0, "sign mismatch at {p:?}");
        }
        assert!(checked > 9_000);
    }

    #[test]
    fn field_is_lipschitz_sqrt3_inside_support() {
        let g = cube_grid();
        let lo = g.origin() + Vector3::repeat(1.5 * g.voxel_size());
        let hi = g.origin()
            + Vector3::new(
                (g.dims()[0] as f64 - 1.5) * g.voxel_size(),
                (g.dims()[1] as f64 - 1.5) * g.voxel_size(),
                (g.dims()[2] as f64 - 1.5) * g.voxel_size(),
            );
        let mut rng = crate::util::seeded_rng(11);
        let sample = |rng: &mut rand_chacha::ChaCha8Rng| {
            Vector3::new(
                rng.gen_range(lo.x..hi.x),
                rng.gen_range(lo.y..hi.y),
                rng.gen_range(lo.z..hi.z),
            )
        };
        for _ in 0..5_000 {
            let a = sample(&mut rng);
            let b = sample(&mut rng);
            let lhs = (g.eval(&a) - g.eval(&b)).abs();
            assert!(
                lhs <= 3f64.sqrt() * (a - b).norm() + 1e-5,
                "|{} - {}| over {}",
                g.eval(&a),
                g.eval(&b),
                (a - b).norm()
            );
        }
    }

    #[test]
    fn open_mesh_is_rejected_as_non_watertight() {
        let tri = TriMesh::new(
            vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        match build_tsdf(&tri, 0.05, 0.2, 0.2) {
            Err(SdfError::NonWatertight { ambiguous_fraction }) => {
                assert!(ambiguous_fraction > MAX_AMBIGUOUS_FRACTION);
            }
            other => panic!("expected NonWatertight, got {other:?}"),
        }
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let g = build_tsdf(&unit_cube(), 0.05, 0.2, 0.2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cube.tsdf");
        g.write_to(&path).unwrap();
        let back = TsdfGrid::read_from(&path).unwrap();
        assert_eq!(g.dims(), back.dims());
        assert_eq!(g.origin(), back.origin());
        assert_eq!(g.voxel_size(), back.voxel_size());
        assert_eq!(g.truncation(), back.truncation());
        assert_eq!(g.values, back.values);
    }

    #[test]
    fn corrupt_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsdf");
        std::fs::write(&path, vec![0u8; 256]).unwrap();
        assert!(matches!(TsdfGrid::read_from(&path), Err(SdfError::Format(_))));
    }

    #[test]
    fn world_query_respects_pose_and_scale() {
        let g = build_tsdf(&unit_cube(), 0.01, 0.2, 0.2).unwrap();
        let pose = Pose6D::from_parts(
            so3_exp(&Vector3::new(0.0, 0.0, 0.7)),
            Vector3::new(1.0, -2.0, 0.5),
        )
        .unwrap();
        let scale = 2.0;
        // Body-frame point 0.04 beyond the +x face of the scaled cube.
        let body = Vector3::new(scale * 0.54, 0.0, 0.0);
        let world = pose.apply(&body);
        let d = g.eval_world(&pose, scale, &world);
        assert!((d - scale * 0.04).abs() < 1e-3, "d = {d}");
    }

    #[test]
    fn zero_crossings_lie_near_surface() {
        let g = cube_grid();
        let pts = g.zero_crossing_points();
        assert!(!pts.is_empty());
        for p in &pts {
            assert!(analytic_box_sdf(p, 0.5).abs() <= 2.0 * g.voxel_size());
        }
    }
}
