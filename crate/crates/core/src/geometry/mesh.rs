use super::pose::Pose6D;
use nalgebra::Vector3;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("face {face} references vertex {index} out of {count}")]
    FaceIndexOutOfBounds { face: usize, index: usize, count: usize },
    #[error("face {face} is degenerate (area {area:.3e})")]
    DegenerateFace { face: usize, area: f64 },
    #[error("PLY parse error: {0}")]
    Ply(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn longest_edge(&self) -> f64 {
        let e = self.extent();
        e.x.max(e.y).max(e.z)
    }

    pub fn expanded(&self, margin: f64) -> Aabb {
        let m = Vector3::repeat(margin);
        Aabb {
            min: self.min - m,
            max: self.max + m,
        }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// Indexed triangle mesh. Faces are triples of vertex indices; every face is
/// validated in-bounds and non-degenerate at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
}

/// Faces with twice-the-area below this are rejected as degenerate.
const MIN_FACE_CROSS_NORM: f64 = 2e-14;

impl TriMesh {
    pub fn new(vertices: Vec<Vector3<f64>>, faces: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                if v >= vertices.len() {
                    return Err(MeshError::FaceIndexOutOfBounds {
                        face: fi,
                        index: v,
                        count: vertices.len(),
                    });
                }
            }
            let cross = (vertices[f[1]] - vertices[f[0]]).cross(&(vertices[f[2]] - vertices[f[0]]));
            if !(cross.norm() > MIN_FACE_CROSS_NORM) {
                return Err(MeshError::DegenerateFace {
                    face: fi,
                    area: cross.norm() * 0.5,
                });
            }
        }
        Ok(TriMesh { vertices, faces })
    }

    pub fn triangle(&self, face: usize) -> [Vector3<f64>; 3] {
        let f = self.faces[face];
        [self.vertices[f[0]], self.vertices[f[1]], self.vertices[f[2]]]
    }

    pub fn aabb(&self) -> Aabb {
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            for i in 0..3 {
                min[i] = min[i].min(v[i]);
                max[i] = max[i].max(v[i]);
            }
        }
        Aabb { min, max }
    }

    pub fn transformed(&self, pose: &Pose6D) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(|v| pose.apply(v)).collect(),
            faces: self.faces.clone(),
        }
    }

    /// Uniform scale about the origin of the mesh frame.
    pub fn scaled(&self, s: f64) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(|v| v * s).collect(),
            faces: self.faces.clone(),
        }
    }

    pub fn write_ply<W: Write>(&self, mut w: W) -> Result<(), MeshError> {
        writeln!(w, "ply")?;
        writeln!(w, "format ascii 1.0")?;
        writeln!(w, "element vertex {}", self.vertices.len())?;
        writeln!(w, "property double x")?;
        writeln!(w, "property double y")?;
        writeln!(w, "property double z")?;
        writeln!(w, "element face {}", self.faces.len())?;
        writeln!(w, "property list uchar int vertex_indices")?;
        writeln!(w, "end_header")?;
        for v in &self.vertices {
            writeln!(w, "{} {} {}", v.x, v.y, v.z)?;
        }
        for f in &self.faces {
            writeln!(w, "3 {} {} {}", f[0], f[1], f[2])?;
        }
        Ok(())
    }

    pub fn save_ply(&self, path: &Path) -> Result<(), MeshError> {
        let file = std::fs::File::create(path)?;
        self.write_ply(std::io::BufWriter::new(file))
    }

    pub fn read_ply<R: Read>(r: R) -> Result<Self, MeshError> {
        let mut lines = BufReader::new(r).lines();
        let mut next = || -> Result<String, MeshError> {
            loop {
                match lines.next() {
                    Some(line) => {
                        let line = line?;
                        if !line.trim().is_empty() && !line.starts_with("comment") {
                            return Ok(line);
                        }
                    }
                    None => return Err(MeshError::Ply("unexpected end of file".into())),
                }
            }
        };

        if next()?.trim() != "ply" {
            return Err(MeshError::Ply("missing ply magic".into()));
        }
        if next()?.trim() != "format ascii 1.0" {
            return Err(MeshError::Ply("only ascii 1.0 format is supported".into()));
        }

        let mut vertex_count = 0usize;
        let mut face_count = 0usize;
        let mut vertex_props: Vec<String> = Vec::new();
        let mut current: Option<&str> = None;
        loop {
            let line = next()?;
            let line = line.trim().to_string();
            if line == "end_header" {
                break;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["element", "vertex", n] => {
                    vertex_count = n
                        .parse()
                        .map_err(|_| MeshError::Ply(format!("bad vertex count {n}")))?;
                    current = Some("vertex");
                }
                ["element", "face", n] => {
                    face_count = n
                        .parse()
                        .map_err(|_| MeshError::Ply(format!("bad face count {n}")))?;
                    current = Some("face");
                }
                ["element", ..] => current = Some("other"),
                ["property", "list", ..] => {}
                ["property", _ty, name] if current == Some("vertex") => {
                    vertex_props.push((*name).to_string());
                }
                ["property", ..] => {}
                _ => return Err(MeshError::Ply(format!("unrecognized header line: {line}"))),
            }
        }

        let idx_of = |n: &str| -> Result<usize, MeshError> {
            vertex_props
                .iter()
                .position(|p| p == n)
                .ok_or_else(|| MeshError::Ply(format!("missing vertex property {n}")))
        };
        let (xi, yi, zi) = (idx_of("x")?, idx_of("y")?, idx_of("z")?);

        let mut vertices = Vec::with_capacity(vertex_count);
        for _ in 0..vertex_count {
            let line = next()?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| MeshError::Ply(format!("bad vertex line '{line}': {e}")))?;
            if vals.len() < vertex_props.len() {
                return Err(MeshError::Ply(format!("short vertex line '{line}'")));
            }
            vertices.push(Vector3::new(vals[xi], vals[yi], vals[zi]));
        }

        let mut faces = Vec::with_capacity(face_count);
        for _ in 0..face_count {
            let line = next()?;
            let vals: Vec<usize> = line
                .split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|e| MeshError::Ply(format!("bad face line '{line}': {e}")))?;
            if vals.first() != Some(&3) || vals.len() != 4 {
                return Err(MeshError::Ply(format!("only triangle faces supported: '{line}'")));
            }
            faces.push([vals[1], vals[2], vals[3]]);
        }

        TriMesh::new(vertices, faces)
    }

    pub fn load_ply(path: &Path) -> Result<Self, MeshError> {
        let file = std::fs::File::open(path)?;
        Self::read_ply(file)
    }
}

/// Axis-aligned box mesh spanning `min..max`; 8 vertices, 12 triangles,
/// watertight, outward-facing.
pub fn box_mesh(min: Vector3<f64>, max: Vector3<f64>) -> TriMesh {
    let v = vec![
        Vector3::new(min.x, min.y, min.z),
        Vector3::new(max.x, min.y, min.z),
        Vector3::new(max.x, max.y, min.z),
        Vector3::new(min.x, max.y, min.z),
        Vector3::new(min.x, min.y, max.z),
        Vector3::new(max.x, min.y, max.z),
        Vector3::new(max.x, max.y, max.z),
        Vector3::new(min.x, max.y, max.z),
    ];
    let faces = vec![
        [0, 2, 1],
        [0, 3, 2],
        [4, 5, 6],
        [4, 6, 7],
        [0, 1, 5],
        [0, 5, 4],
        [2, 3, 7],
        [2, 7, 6],
        [1, 2, 6],
        [1, 6, 5],
        [3, 0, 4],
        [3, 4, 7],
    ];
    TriMesh::new(v, faces).expect("box mesh is valid")
}
