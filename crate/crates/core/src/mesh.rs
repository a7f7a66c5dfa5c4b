//! Triangle meshes and Wavefront OBJ I/O.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Face = [usize; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<Face>,
}

impl Mesh {
    /// Builds a mesh, checking index bounds and that no face repeats a vertex.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<Face>) -> Result<Self> {
        let m = Self { vertices, faces };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (fi, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&i| i >= n) {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} {f:?} references a vertex >= {n}"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} {f:?} repeats a vertex"
                )));
            }
        }
        if let Some(i) = self
            .vertices
            .iter()
            .position(|v| !v.iter().all(|c| c.is_finite()))
        {
            return Err(Error::InvalidMesh(format!("vertex {i} is not finite")));
        }
        Ok(())
    }

    pub fn same_topology(&self, other: &Mesh) -> bool {
        self.vertices.len() == other.vertices.len() && self.faces == other.faces
    }

    /// Copy of this mesh with new vertex positions; topology is shared.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Mesh> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::TopologyMismatch(format!(
                "vertex count {} != {}",
                vertices.len(),
                self.vertices.len()
            )));
        }
        Ok(Mesh {
            vertices,
            faces: self.faces.clone(),
        })
    }

    pub fn map_vertices(&self, f: impl Fn(&Vec3) -> Vec3) -> Mesh {
        Mesh {
            vertices: self.vertices.iter().map(f).collect(),
            faces: self.faces.clone(),
        }
    }

    pub fn centroid(&self) -> Vec3 {
        centroid(&self.vertices)
    }

    pub fn face_area(&self, fi: usize) -> f64 {
        let [a, b, c] = self.faces[fi];
        let (a, b, c) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// Largest per-vertex distance to another mesh with the same vertex count.
    pub fn max_vertex_distance(&self, other: &Mesh) -> f64 {
        self.vertices
            .iter()
            .zip(&other.vertices)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn to_obj_string(&self, header: Option<&str>) -> String {
        let mut s = String::with_capacity(self.vertices.len() * 40 + self.faces.len() * 20);
        if let Some(h) = header {
            for line in h.lines() {
                let _ = writeln!(s, "# {line}");
            }
        }
        for v in &self.vertices {
            let _ = writeln!(s, "v {:.6} {:.6} {:.6}", v.x, v.y, v.z);
        }
        for f in &self.faces {
            let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        s
    }

    pub fn write_obj(&self, path: &Path, header: Option<&str>) -> Result<()> {
        std::fs::write(path, self.to_obj_string(header)).map_err(|e| Error::io(path, e))
    }

    pub fn read_obj(path: &Path) -> Result<Mesh> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_obj(&text).map_err(|e| match e {
            Error::Parse { msg, .. } => Error::parse(path.display(), msg),
            other => other,
        })
    }

    /// Parses `v` and triangular `f` records. Normals, texture coordinates
    /// and every other record type are skipped.
    pub fn parse_obj(text: &str) -> Result<Mesh> {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let mut c = [0.0; 3];
                    for slot in &mut c {
                        let tok = it.next().ok_or_else(|| {
                            Error::parse("obj", format!("line {}: short vertex", ln + 1))
                        })?;
                        *slot = tok.parse().map_err(|_| {
                            Error::parse("obj", format!("line {}: bad number '{tok}'", ln + 1))
                        })?;
                    }
                    vertices.push(Vec3::new(c[0], c[1], c[2]));
                }
                Some("f") => {
                    let idx: Vec<&str> = it.collect();
                    if idx.len() != 3 {
                        return Err(Error::parse(
                            "obj",
                            format!(
                                "line {}: only triangles are supported ({} corners)",
                                ln + 1,
                                idx.len()
                            ),
                        ));
                    }
                    let mut f = [0usize; 3];
                    for (slot, tok) in f.iter_mut().zip(idx) {
                        let head = tok.split('/').next().unwrap_or("");
                        let i: i64 = head.parse().map_err(|_| {
                            Error::parse("obj", format!("line {}: bad index '{tok}'", ln + 1))
                        })?;
                        let resolved = if i > 0 {
                            i - 1
                        } else if i < 0 {
                            vertices.len() as i64 + i
                        } else {
                            -1
                        };
                        if resolved < 0 {
                            return Err(Error::parse(
                                "obj",
                                format!("line {}: invalid index {i}", ln + 1),
                            ));
                        }
                        *slot = resolved as usize;
                    }
                    faces.push(f);
                }
                _ => {}
            }
        }
        Mesh::new(vertices, faces)
    }
}

pub fn centroid(points: &[Vec3]) -> Vec3 {
    if points.is_empty() {
        return Vec3::zeros();
    }
    points.iter().fold(Vec3::zeros(), |a, p| a + p) / points.len() as f64
}
