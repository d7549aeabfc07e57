//! Point clouds, ASCII PLY, voxel downsampling and a uniform-grid index.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose;

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("ply: {0}")]
    Ply(String),
}

/// Points with optional normals. `sources[i]` indexes `viewpoints`, the
/// camera centre that observed point `i`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    #[serde(default)]
    pub normals: Option<Vec<Vector3<f64>>>,
    #[serde(default)]
    pub sources: Option<Vec<u32>>,
    #[serde(default)]
    pub viewpoints: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn from_points(points: Vec<Vector3<f64>>) -> Self {
        PointCloud {
            points,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Keeps the listed indices, in the given order.
    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|n| idx.iter().map(|&i| n[i]).collect()),
            sources: self
                .sources
                .as_ref()
                .map(|s| idx.iter().map(|&i| s[i]).collect()),
            viewpoints: self.viewpoints.clone(),
        }
    }

    pub fn transformed(&self, pose: &Pose) -> PointCloud {
        PointCloud {
            points: self
                .points
                .iter()
                .map(|p| pose.transform_point(p))
                .collect(),
            normals: self
                .normals
                .as_ref()
                .map(|n| n.iter().map(|v| pose.transform_vector(v)).collect()),
            sources: self.sources.clone(),
            viewpoints: self
                .viewpoints
                .iter()
                .map(|p| pose.transform_point(p))
                .collect(),
        }
    }

    /// Appends `other`, re-indexing its viewpoints.
    pub fn extend(&mut self, other: &PointCloud) {
        let offset = self.viewpoints.len() as u32;
        let had = self.points.len();
        self.points.extend_from_slice(&other.points);
        match (&mut self.normals, &other.normals) {
            (Some(a), Some(b)) => a.extend_from_slice(b),
            (None, Some(b)) if had == 0 => self.normals = Some(b.clone()),
            _ => self.normals = None,
        }
        match (&mut self.sources, &other.sources) {
            (Some(a), Some(b)) => a.extend(b.iter().map(|s| s + offset)),
            (None, Some(b)) if had == 0 => {
                self.sources = Some(b.iter().map(|s| s + offset).collect())
            }
            _ => self.sources = None,
        }
        self.viewpoints.extend_from_slice(&other.viewpoints);
    }

    pub fn centroid(&self) -> Vector3<f64> {
        if self.points.is_empty() {
            return Vector3::zeros();
        }
        self.points.iter().sum::<Vector3<f64>>() / self.points.len() as f64
    }

    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in &self.points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }

    /// Index of the point nearest `q` (lowest index on ties).
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in self.points.iter().enumerate() {
            let d = (p - q).norm_squared();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i)
    }

    /// One point per voxel: the first point, in index order, to land in it.
    pub fn voxel_downsample(&self, voxel: f64) -> PointCloud {
        if voxel <= 0.0 {
            return self.clone();
        }
        let mut seen: HashMap<(i64, i64, i64), ()> = HashMap::new();
        let mut keep = Vec::new();
        for (i, p) in self.points.iter().enumerate() {
            if seen.insert(cell_of(p, voxel), ()).is_none() {
                keep.push(i);
            }
        }
        self.select(&keep)
    }

    pub fn to_ply(&self) -> String {
        let mut s = String::from("ply\nformat ascii 1.0\n");
        let _ = writeln!(s, "element vertex {}", self.points.len());
        for a in ["x", "y", "z"] {
            let _ = writeln!(s, "property double {a}");
        }
        if self.normals.is_some() {
            for a in ["nx", "ny", "nz"] {
                let _ = writeln!(s, "property double {a}");
            }
        }
        if self.sources.is_some() {
            s.push_str("property int view\n");
        }
        s.push_str("end_header\n");
        for i in 0..self.points.len() {
            let p = self.points[i];
            let _ = write!(s, "{} {} {}", p.x, p.y, p.z);
            if let Some(n) = &self.normals {
                let _ = write!(s, " {} {} {}", n[i].x, n[i].y, n[i].z);
            }
            if let Some(src) = &self.sources {
                let _ = write!(s, " {}", src[i]);
            }
            s.push('\n');
        }
        s
    }

    /// ASCII PLY with any subset of x y z nx ny nz view properties.
    pub fn from_ply(text: &str) -> Result<PointCloud, CloudError> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("ply") {
            return Err(CloudError::Ply("missing magic".into()));
        }
        let mut count = None;
        let mut props: Vec<String> = Vec::new();
        let mut in_vertex = false;
        loop {
            let line = lines
                .next()
                .ok_or_else(|| CloudError::Ply("unterminated header".into()))?;
            let tok: Vec<&str> = line.split_whitespace().collect();
            match tok.as_slice() {
                ["format", fmt, ..] if *fmt != "ascii" => {
                    return Err(CloudError::Ply(format!("unsupported format {fmt}")))
                }
                ["element", name, n] => {
                    in_vertex = *name == "vertex";
                    if in_vertex {
                        count = Some(
                            n.parse::<usize>()
                                .map_err(|_| CloudError::Ply("bad count".into()))?,
                        );
                    }
                }
                ["property", _, name] if in_vertex => props.push(name.to_string()),
                ["end_header"] => break,
                _ => {}
            }
        }
        let count = count.ok_or_else(|| CloudError::Ply("no vertex element".into()))?;
        let col = |n: &str| props.iter().position(|p| p == n);
        let (ix, iy, iz) = match (col("x"), col("y"), col("z")) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(CloudError::Ply("missing x/y/z".into())),
        };
        let nc = match (col("nx"), col("ny"), col("nz")) {
            (Some(a), Some(b), Some(c)) => Some((a, b, c)),
            _ => None,
        };
        let vc = col("view");
        let mut cloud = PointCloud {
            normals: nc.map(|_| Vec::with_capacity(count)),
            sources: vc.map(|_| Vec::with_capacity(count)),
            ..Default::default()
        };
        for k in 0..count {
            let line = lines
                .next()
                .ok_or_else(|| CloudError::Ply(format!("expected {count} vertices, got {k}")))?;
            let vals: Result<Vec<f64>, _> =
                line.split_whitespace().map(str::parse::<f64>).collect();
            let vals = vals.map_err(|_| CloudError::Ply(format!("bad vertex line {}", k + 1)))?;
            if vals.len() < props.len() {
                return Err(CloudError::Ply(format!("short vertex line {}", k + 1)));
            }
            cloud
                .points
                .push(Vector3::new(vals[ix], vals[iy], vals[iz]));
            if let (Some((a, b, c)), Some(n)) = (nc, cloud.normals.as_mut()) {
                n.push(Vector3::new(vals[a], vals[b], vals[c]));
            }
            if let (Some(v), Some(s)) = (vc, cloud.sources.as_mut()) {
                s.push(vals[v] as u32);
            }
        }
        Ok(cloud)
    }

    pub fn save_ply(&self, path: &std::path::Path) -> Result<(), CloudError> {
        std::fs::write(path, self.to_ply()).map_err(|source| CloudError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load_ply(path: &std::path::Path) -> Result<PointCloud, CloudError> {
        let text = std::fs::read_to_string(path).map_err(|source| CloudError::Io {
            path: path.display().to_string(),
            source,
        })?;
        PointCloud::from_ply(&text)
    }
}

fn cell_of(p: &Vector3<f64>, h: f64) -> (i64, i64, i64) {
    (
        (p.x / h).floor() as i64,
        (p.y / h).floor() as i64,
        (p.z / h).floor() as i64,
    )
}

/// Uniform hash grid over a fixed point set.
#[derive(Clone, Debug)]
pub struct SpatialGrid {
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<u32>>,
}

impl SpatialGrid {
    pub fn new(points: &[Vector3<f64>], cell: f64) -> Self {
        assert!(cell > 0.0, "grid cell must be positive");
        let mut cells: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(cell_of(p, cell)).or_default().push(i as u32);
        }
        SpatialGrid { cell, cells }
    }

    /// Indices within `radius` of `q`, ascending.
    pub fn within(&self, points: &[Vector3<f64>], q: &Vector3<f64>, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.visit(q, radius, |i| {
            if (points[i] - q).norm_squared() <= radius * radius {
                out.push(i);
            }
        });
        out.sort_unstable();
        out
    }

    /// Whether any point lies in the axis-aligned region `[lo, hi]` and
    /// satisfies `pred`.
    pub fn any_in_region(
        &self,
        lo: &Vector3<f64>,
        hi: &Vector3<f64>,
        mut pred: impl FnMut(usize) -> bool,
    ) -> bool {
        let a = cell_of(lo, self.cell);
        let b = cell_of(hi, self.cell);
        let span = (b.0 - a.0 + 1) * (b.1 - a.1 + 1) * (b.2 - a.2 + 1);
        if span > self.cells.len() as i64 * 4 {
            return self.cells.values().flatten().any(|&i| pred(i as usize));
        }
        for x in a.0..=b.0 {
            for y in a.1..=b.1 {
                for z in a.2..=b.2 {
                    if let Some(v) = self.cells.get(&(x, y, z)) {
                        if v.iter().any(|&i| pred(i as usize)) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }

    fn visit(&self, q: &Vector3<f64>, radius: f64, mut f: impl FnMut(usize)) {
        let r = Vector3::repeat(radius);
        let a = cell_of(&(q - r), self.cell);
        let b = cell_of(&(q + r), self.cell);
        for x in a.0..=b.0 {
            for y in a.1..=b.1 {
                for z in a.2..=b.2 {
                    if let Some(v) = self.cells.get(&(x, y, z)) {
                        for &i in v {
                            f(i as usize);
                        }
                    }
                }
            }
        }
    }

    /// `k` nearest neighbours of `q` (ascending distance, then index),
    /// searching outward ring by ring.
    pub fn k_nearest(
        &self,
        points: &[Vector3<f64>],
        q: &Vector3<f64>,
        k: usize,
        max_radius: f64,
    ) -> Vec<usize> {
        let mut r = self.cell;
        loop {
            let mut found: Vec<(f64, usize)> = Vec::new();
            self.visit(q, r, |i| {
                let d = (points[i] - q).norm_squared();
                if d <= r * r {
                    found.push((d, i));
                }
            });
            if found.len() >= k || r >= max_radius {
                found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                found.truncate(k);
                return found.into_iter().map(|(_, i)| i).collect();
            }
            r = (r * 2.0).min(max_radius);
        }
    }
}
