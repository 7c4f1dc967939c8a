//! Lifting UV positional maps to a textured triangle mesh.
//!
//! Shape-map pixels already hold 3D positions sampled on the cylindrical
//! face parameterization, so pixel `(i, j)` becomes vertex `i * W + j`
//! directly. Seams are left open.

use std::fmt;

use crate::error::{Error, Result};
use crate::maps::{Image, UvMapSet};

pub type Vec3 = [f64; 3];

/// Grid connectivity and UV layout; depends only on `(height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshTopology {
    pub height: usize,
    pub width: usize,
    pub faces: Vec<[usize; 3]>,
    pub uvs: Vec<[f64; 2]>,
}

impl MeshTopology {
    pub fn grid(height: usize, width: usize) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(Error::invalid(format!("grid {height}x{width} is smaller than 2x2")));
        }
        let mut faces = Vec::with_capacity(2 * (height - 1) * (width - 1));
        for i in 0..height - 1 {
            for j in 0..width - 1 {
                let a = i * width + j;
                let b = a + 1;
                let c = a + width;
                let d = c + 1;
                faces.push([a, c, b]);
                faces.push([b, c, d]);
            }
        }
        let mut uvs = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                uvs.push([
                    j as f64 / (width - 1) as f64,
                    i as f64 / (height - 1) as f64,
                ]);
            }
        }
        Ok(Self {
            height,
            width,
            faces,
            uvs,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TexturedMesh {
    pub vertices: Vec<Vec3>,
    /// Unit vertex normals.
    pub normals: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub uvs: Vec<[f64; 2]>,
    /// The texture UV map; its pixel `(i, j)` is the base color of vertex `i * W + j`.
    pub texture: Image,
}

impl TexturedMesh {
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    /// Base color sampled at the vertex's own texel.
    pub fn vertex_color(&self, k: usize) -> Vec3 {
        let w = self.texture.width;
        self.texture.pixel(k / w, k % w)
    }

    pub fn vertex_colors(&self) -> Vec<Vec3> {
        (0..self.vertex_count()).map(|k| self.vertex_color(k)).collect()
    }

    /// Rotates vertices and normals about the vertical axis.
    pub fn rotated_y(&self, degrees: f64) -> Self {
        let r = RotationY::new(degrees);
        Self {
            vertices: self.vertices.iter().map(|v| r.apply(v)).collect(),
            normals: self.normals.iter().map(|n| r.apply(n)).collect(),
            ..self.clone()
        }
    }
}

/// Rotation about +y by a yaw angle.
#[derive(Debug, Clone, Copy)]
pub struct RotationY {
    pub cos: f64,
    pub sin: f64,
}

impl RotationY {
    pub fn new(degrees: f64) -> Self {
        let (sin, cos) = degrees.to_radians().sin_cos();
        Self { cos, sin }
    }

    #[inline]
    pub fn apply(&self, v: &Vec3) -> Vec3 {
        [
            self.cos * v[0] + self.sin * v[2],
            v[1],
            -self.sin * v[0] + self.cos * v[2],
        ]
    }

    /// Transpose (inverse) rotation, used to pull gradients back.
    #[inline]
    pub fn apply_transpose(&self, v: &Vec3) -> Vec3 {
        [
            self.cos * v[0] - self.sin * v[2],
            v[1],
            self.sin * v[0] + self.cos * v[2],
        ]
    }
}

pub fn assemble_mesh(uvset: &UvMapSet, topo: &MeshTopology) -> Result<TexturedMesh> {
    if (uvset.height(), uvset.width()) != (topo.height, topo.width) {
        return Err(Error::invalid(format!(
            "maps are {}x{} but topology is {}x{}",
            uvset.height(),
            uvset.width(),
            topo.height,
            topo.width
        )));
    }
    for (name, map) in ["shape", "normal", "texture"].iter().zip(uvset.maps()) {
        if let Some(pos) = map.data.iter().position(|v| !v.is_finite()) {
            let k = pos / 3;
            return Err(Error::data(format!(
                "{name} map has a non-finite value at pixel ({}, {})",
                k / map.width,
                k % map.width
            )));
        }
    }
    let vertices = uvset.shape.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
    let normals = uvset
        .normal
        .data
        .chunks_exact(3)
        .map(|n| {
            let len = norm(&[n[0], n[1], n[2]]);
            if len > 0.0 {
                [n[0] / len, n[1] / len, n[2] / len]
            } else {
                [0.0, 0.0, 1.0]
            }
        })
        .collect();
    Ok(TexturedMesh {
        vertices,
        normals,
        faces: topo.faces.clone(),
        uvs: topo.uvs.clone(),
        texture: uvset.texture.clone(),
    })
}

/// Gradients with respect to mesh attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshGrad {
    pub vertices: Vec<Vec3>,
    /// Gradient with respect to the unit normals.
    pub normals: Vec<Vec3>,
    /// Gradient with respect to per-vertex base colors.
    pub colors: Vec<Vec3>,
}

impl MeshGrad {
    pub fn zeros(n: usize) -> Self {
        Self {
            vertices: vec![[0.0; 3]; n],
            normals: vec![[0.0; 3]; n],
            colors: vec![[0.0; 3]; n],
        }
    }

    pub fn accumulate(&mut self, other: &MeshGrad) {
        for (dst, src) in [
            (&mut self.vertices, &other.vertices),
            (&mut self.normals, &other.normals),
            (&mut self.colors, &other.colors),
        ] {
            for (a, b) in dst.iter_mut().zip(src) {
                for k in 0..3 {
                    a[k] += b[k];
                }
            }
        }
    }
}

/// Pulls mesh-attribute gradients back onto the UV maps.
///
/// Positions and colors map one-to-one; normals go through the Jacobian of
/// the normalization `n / |n|`.
pub fn assemble_mesh_backward(uvset: &UvMapSet, grad: &MeshGrad) -> Result<UvMapSet> {
    let n = uvset.height() * uvset.width();
    if grad.vertices.len() != n || grad.normals.len() != n || grad.colors.len() != n {
        return Err(Error::invalid("mesh gradient size does not match maps"));
    }
    let flat = |v: &[Vec3]| v.iter().flatten().copied().collect::<Vec<_>>();
    let mut normal_grad = Vec::with_capacity(n * 3);
    for (raw, g) in uvset.normal.data.chunks_exact(3).zip(&grad.normals) {
        let raw = [raw[0], raw[1], raw[2]];
        let len = norm(&raw);
        if len > 0.0 {
            let unit = [raw[0] / len, raw[1] / len, raw[2] / len];
            let along = dot(g, &unit);
            normal_grad.extend((0..3).map(|k| (g[k] - along * unit[k]) / len));
        } else {
            normal_grad.extend([0.0; 3]);
        }
    }
    let (h, w) = (uvset.height(), uvset.width());
    UvMapSet::new(
        Image::from_data(w, h, flat(&grad.vertices))?,
        Image::from_data(w, h, normal_grad)?,
        Image::from_data(w, h, flat(&grad.colors))?,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    IndexOutOfRange { face: usize, index: usize },
    NonFiniteVertex { vertex: usize },
    DegenerateFace { face: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::IndexOutOfRange { face, index } => {
                write!(f, "face {face} references missing vertex {index}")
            }
            Violation::NonFiniteVertex { vertex } => write!(f, "vertex {vertex} is not finite"),
            Violation::DegenerateFace { face } => write!(f, "face {face} has zero area"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeshReport {
    pub violations: Vec<Violation>,
}

impl MeshReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn degenerate_count(&self) -> usize {
        self.violations
            .iter()
            .filter(|v| matches!(v, Violation::DegenerateFace { .. }))
            .count()
    }

    /// True if the mesh has structural errors (bad indices or coordinates).
    /// Degenerate faces alone do not count.
    pub fn has_errors(&self) -> bool {
        self.violations
            .iter()
            .any(|v| !matches!(v, Violation::DegenerateFace { .. }))
    }
}

const DEGENERATE_AREA: f64 = 1e-12;

pub fn validate_mesh(mesh: &TexturedMesh) -> MeshReport {
    let mut violations = Vec::new();
    let n = mesh.vertices.len();
    for (k, v) in mesh.vertices.iter().enumerate() {
        if v.iter().any(|x| !x.is_finite()) {
            violations.push(Violation::NonFiniteVertex { vertex: k });
        }
    }
    for (fi, face) in mesh.faces.iter().enumerate() {
        if let Some(&index) = face.iter().find(|&&i| i >= n) {
            violations.push(Violation::IndexOutOfRange { face: fi, index });
            continue;
        }
        let [a, b, c] = face.map(|i| mesh.vertices[i]);
        let area = 0.5 * norm(&cross(&sub(&b, &a), &sub(&c, &a)));
        // NaN areas are already covered by the vertex check.
        if area < DEGENERATE_AREA {
            violations.push(Violation::DegenerateFace { face: fi });
        }
    }
    MeshReport { violations }
}

#[inline]
pub(crate) fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub(crate) fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}
