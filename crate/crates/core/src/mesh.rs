//! Triangle meshes with ASCII STL / OBJ I/O.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;
use crate::shapes::Obb;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported mesh format: {0}")]
    Format(String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
}

/// Ray hit on a mesh: distance along the ray and the triangle index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayHit {
    pub distance: f64,
    pub triangle: usize,
}

impl Mesh {
    /// Closed, outward-wound box.
    pub fn from_obb(b: &Obb) -> Mesh {
        let c = b.corners();
        // corner index bits: x = 1, y = 2, z = 4
        let faces: [[usize; 4]; 6] = [
            [0, 2, 3, 1], // -z
            [4, 5, 7, 6], // +z
            [0, 1, 5, 4], // -y
            [2, 6, 7, 3], // +y
            [0, 4, 6, 2], // -x
            [1, 3, 7, 5], // +x
        ];
        let mut triangles = Vec::with_capacity(12);
        for f in faces {
            triangles.push([f[0] as u32, f[1] as u32, f[2] as u32]);
            triangles.push([f[0] as u32, f[2] as u32, f[3] as u32]);
        }
        Mesh {
            vertices: c.to_vec(),
            triangles,
        }
    }

    pub fn from_boxes(boxes: &[Obb]) -> Mesh {
        let mut m = Mesh::default();
        for b in boxes {
            m.append(&Mesh::from_obb(b));
        }
        m
    }

    pub fn append(&mut self, other: &Mesh) {
        let base = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles.extend(
            other
                .triangles
                .iter()
                .map(|t| [t[0] + base, t[1] + base, t[2] + base]),
        );
    }

    pub fn transformed(&self, pose: &Pose) -> Mesh {
        Mesh {
            vertices: self
                .vertices
                .iter()
                .map(|v| pose.transform_point(v))
                .collect(),
            triangles: self.triangles.clone(),
        }
    }

    pub fn triangle(&self, i: usize) -> [Vector3<f64>; 3] {
        let t = self.triangles[i];
        [
            self.vertices[t[0] as usize],
            self.vertices[t[1] as usize],
            self.vertices[t[2] as usize],
        ]
    }

    /// Outward unit normal of triangle `i` (by winding).
    pub fn triangle_normal(&self, i: usize) -> Vector3<f64> {
        let [a, b, c] = self.triangle(i);
        (b - a).cross(&(c - a)).normalize()
    }

    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    /// Every undirected edge is shared by exactly two triangles with opposite
    /// orientation.
    pub fn is_watertight(&self) -> bool {
        if self.triangles.is_empty() {
            return false;
        }
        let mut edges: BTreeMap<(u32, u32), i32> = BTreeMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                *edges.entry(key).or_default() += if a < b { 1 } else { -1 };
            }
        }
        let mut counts: BTreeMap<(u32, u32), u32> = BTreeMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        edges.values().all(|v| *v == 0) && counts.values().all(|c| *c == 2)
    }

    /// Signed volume and centroid from the divergence theorem. Valid for a
    /// union of disjoint closed shells.
    pub fn volume_and_centroid(&self) -> (f64, Vector3<f64>) {
        let mut vol = 0.0;
        let mut acc = Vector3::zeros();
        for i in 0..self.triangles.len() {
            let [a, b, c] = self.triangle(i);
            let v = a.dot(&b.cross(&c)) / 6.0;
            vol += v;
            acc += (a + b + c) * (v / 4.0);
        }
        if vol.abs() < 1e-15 {
            let (lo, hi) = self.bounds();
            return (0.0, (lo + hi) * 0.5);
        }
        (vol, acc / vol)
    }

    /// Möller–Trumbore against a single triangle.
    pub fn ray_triangle(
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        tri: &[Vector3<f64>; 3],
    ) -> Option<f64> {
        let e1 = tri[1] - tri[0];
        let e2 = tri[2] - tri[0];
        let p = dir.cross(&e2);
        let det = e1.dot(&p);
        if det.abs() < 1e-14 {
            return None;
        }
        let inv = 1.0 / det;
        let s = origin - tri[0];
        let u = s.dot(&p) * inv;
        if !(-1e-12..=1.0 + 1e-12).contains(&u) {
            return None;
        }
        let q = s.cross(&e1);
        let v = dir.dot(&q) * inv;
        if v < -1e-12 || u + v > 1.0 + 1e-12 {
            return None;
        }
        let t = e2.dot(&q) * inv;
        (t > 1e-12).then_some(t)
    }

    /// Nearest hit along the ray (in units of `dir`).
    pub fn ray_cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<RayHit> {
        let mut best: Option<RayHit> = None;
        for i in 0..self.triangles.len() {
            if let Some(t) = Self::ray_triangle(origin, dir, &self.triangle(i)) {
                if best.is_none_or(|b| t < b.distance) {
                    best = Some(RayHit {
                        distance: t,
                        triangle: i,
                    });
                }
            }
        }
        best
    }

    pub fn to_stl(&self, name: &str) -> String {
        let mut s = format!("solid {name}\n");
        for i in 0..self.triangles.len() {
            let n = self.triangle_normal(i);
            let [a, b, c] = self.triangle(i);
            let _ = writeln!(s, "  facet normal {} {} {}", n.x, n.y, n.z);
            s.push_str("    outer loop\n");
            for v in [a, b, c] {
                let _ = writeln!(s, "      vertex {} {} {}", v.x, v.y, v.z);
            }
            s.push_str("    endloop\n  endfacet\n");
        }
        let _ = writeln!(s, "endsolid {name}");
        s
    }

    /// ASCII STL; coincident vertices are merged exactly.
    pub fn from_stl(text: &str) -> Result<Mesh, MeshError> {
        let mut mesh = Mesh::default();
        let mut index: BTreeMap<[u64; 3], u32> = BTreeMap::new();
        let mut pending: Vec<u32> = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            if it.next() != Some("vertex") {
                continue;
            }
            let v = parse3(&mut it, ln + 1)?;
            let key = [v.x.to_bits(), v.y.to_bits(), v.z.to_bits()];
            let id = *index.entry(key).or_insert_with(|| {
                mesh.vertices.push(v);
                (mesh.vertices.len() - 1) as u32
            });
            pending.push(id);
            if pending.len() == 3 {
                mesh.triangles.push([pending[0], pending[1], pending[2]]);
                pending.clear();
            }
        }
        if !pending.is_empty() {
            return Err(MeshError::Parse {
                line: text.lines().count(),
                message: "facet with fewer than three vertices".into(),
            });
        }
        Ok(mesh)
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }

    /// Wavefront OBJ (`v` and `f` records; polygons are fan-triangulated).
    pub fn from_obj(text: &str) -> Result<Mesh, MeshError> {
        let mut mesh = Mesh::default();
        for (ln, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => mesh.vertices.push(parse3(&mut it, ln + 1)?),
                Some("f") => {
                    let idx: Result<Vec<u32>, MeshError> = it
                        .map(|tok| {
                            let first = tok.split('/').next().unwrap_or("");
                            let i: i64 = first.parse().map_err(|_| MeshError::Parse {
                                line: ln + 1,
                                message: format!("bad face index '{tok}'"),
                            })?;
                            let n = mesh.vertices.len() as i64;
                            let i = if i < 0 { n + i } else { i - 1 };
                            if i < 0 || i >= n {
                                return Err(MeshError::Parse {
                                    line: ln + 1,
                                    message: format!("face index {tok} out of range"),
                                });
                            }
                            Ok(i as u32)
                        })
                        .collect();
                    let idx = idx?;
                    if idx.len() < 3 {
                        return Err(MeshError::Parse {
                            line: ln + 1,
                            message: "face with fewer than three vertices".into(),
                        });
                    }
                    for k in 1..idx.len() - 1 {
                        mesh.triangles.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        Ok(mesh)
    }

    /// Reads `.stl` or `.obj` by extension.
    pub fn load(path: &std::path::Path) -> Result<Mesh, MeshError> {
        let text = std::fs::read_to_string(path).map_err(|source| MeshError::Io {
            path: path.display().to_string(),
            source,
        })?;
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
        {
            Some(e) if e == "stl" => Mesh::from_stl(&text),
            Some(e) if e == "obj" => Mesh::from_obj(&text),
            other => Err(MeshError::Format(other.unwrap_or_default())),
        }
    }
}

fn parse3<'a>(
    it: &mut impl Iterator<Item = &'a str>,
    line: usize,
) -> Result<Vector3<f64>, MeshError> {
    let mut v = [0.0; 3];
    for slot in &mut v {
        let tok = it.next().ok_or(MeshError::Parse {
            line,
            message: "expected three coordinates".into(),
        })?;
        *slot = tok.parse().map_err(|_| MeshError::Parse {
            line,
            message: format!("bad number '{tok}'"),
        })?;
    }
    Ok(Vector3::from(v))
}

/// Point-to-triangle distance (Ericson, "Real-Time Collision Detection").
pub fn point_triangle_distance(p: &Vector3<f64>, tri: &[Vector3<f64>; 3]) -> f64 {
    let [a, b, c] = tri;
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return ap.norm();
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return bp.norm();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (p - (a + ab * v)).norm();
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return cp.norm();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (p - (a + ac * w)).norm();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (p - (b + (c - b) * w)).norm();
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (p - (a + ab * v + ac * w)).norm()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box() -> Mesh {
        Mesh::from_obb(&Obb::axis_aligned(
            Vector3::new(-0.5, -0.5, -0.5),
            Vector3::new(0.5, 0.5, 0.5),
        ))
    }

    #[test]
    fn box_mesh_is_closed_with_outward_normals() {
        let m = unit_box();
        assert!(m.is_watertight());
        let (vol, c) = m.volume_and_centroid();
        assert!((vol - 1.0).abs() < 1e-12);
        assert!(c.norm() < 1e-12);
        for i in 0..m.triangles.len() {
            let [a, b, cc] = m.triangle(i);
            let center = (a + b + cc) / 3.0;
            assert!(m.triangle_normal(i).dot(&center) > 0.0);
        }
    }

    #[test]
    fn stl_and_obj_round_trip() {
        let m = unit_box();
        let s = Mesh::from_stl(&m.to_stl("box")).unwrap();
        assert_eq!(s.triangles.len(), 12);
        assert_eq!(s.vertices.len(), 8);
        assert!(s.is_watertight());
        let o = Mesh::from_obj(&m.to_obj()).unwrap();
        assert_eq!(o, m);
        assert!(Mesh::from_obj("v 0 0 0\nf 1 2 3\n").is_err());
    }

    #[test]
    fn ray_cast_box() {
        let m = unit_box();
        let hit = m
            .ray_cast(&Vector3::new(0.1, 0.2, -3.0), &Vector3::z())
            .unwrap();
        assert!((hit.distance - 2.5).abs() < 1e-12);
        assert!(m
            .ray_cast(&Vector3::new(2.0, 0.0, -3.0), &Vector3::z())
            .is_none());
    }

    #[test]
    fn point_triangle_regions() {
        let tri = [Vector3::zeros(), Vector3::x(), Vector3::y()];
        assert!((point_triangle_distance(&Vector3::new(0.2, 0.2, 1.0), &tri) - 1.0).abs() < 1e-12);
        assert!((point_triangle_distance(&Vector3::new(-1.0, 0.0, 0.0), &tri) - 1.0).abs() < 1e-12);
        assert!(
            (point_triangle_distance(&Vector3::new(1.0, 1.0, 0.0), &tri) - 0.5f64.sqrt()).abs()
                < 1e-12
        );
    }
}
