//! Virtual depth cameras: ray-cast rendering with ground-truth label images,
//! and masked back-projection into world-frame clouds.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::geometry::Pose;
use crate::mesh::Mesh;
use crate::rng::SeedStream;
use crate::scene::{Scene, SceneError};

/// Pinhole intrinsics. Pixel `(u, v)` covers `[u, u+1) × [v, v+1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Intrinsics {
            fx: 560.0,
            fy: 560.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        }
    }
}

impl Intrinsics {
    pub fn is_valid(&self) -> bool {
        self.fx > 0.0 && self.fy > 0.0 && self.width > 0 && self.height > 0
    }

    /// Camera-frame point for pixel coordinates (continuous) at z-depth `z`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z)
    }

    /// Continuous pixel coordinates of a camera-frame point.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        (p.z > 0.0).then(|| (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }
}

/// Rendered depth (z along the optical axis, 0 where nothing was hit) and
/// per-pixel object ids (0 = background). Camera frame: x right, y down,
/// z forward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub depth: Vec<f64>,
    pub labels: Vec<u32>,
    /// Object id → label string for ids that may appear in `labels`.
    pub vocabulary: Vec<(u32, String)>,
}

impl CameraView {
    pub fn index(&self, u: u32, v: u32) -> usize {
        (v * self.intrinsics.width + u) as usize
    }

    pub fn depth_at(&self, u: u32, v: u32) -> Option<f64> {
        let d = self.depth[self.index(u, v)];
        (d > 0.0).then_some(d)
    }

    pub fn label_at(&self, u: u32, v: u32) -> u32 {
        self.labels[self.index(u, v)]
    }

    pub fn id_for(&self, label: &str) -> Option<u32> {
        self.vocabulary
            .iter()
            .find(|(_, l)| l == label)
            .map(|(id, _)| *id)
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.translation
    }

    /// World point seen at pixel `(u, v)`, if any.
    pub fn back_project(&self, u: u32, v: u32) -> Option<Vector3<f64>> {
        let z = self.depth_at(u, v)?;
        let pc = self.intrinsics.unproject(u as f64 + 0.5, v as f64 + 0.5, z);
        Some(self.pose.transform_point(&pc))
    }

    /// Continuous pixel coordinates of a world point.
    pub fn project_world(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        self.intrinsics
            .project(&self.pose.inverse_transform_point(p))
    }

    /// Rigidly moves the camera (depth and labels are unchanged).
    pub fn transformed(&self, t: &Pose) -> CameraView {
        CameraView {
            pose: t.compose(&self.pose),
            ..self.clone()
        }
    }

    /// Number of pixels carrying object `id`.
    pub fn pixel_count(&self, id: u32) -> usize {
        self.labels.iter().filter(|l| **l == id).count()
    }
}

/// Camera pose at `eye` looking at `target`, with world +z as "up".
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> Pose {
    let f = (target - eye).normalize();
    let mut right = f.cross(&Vector3::z());
    if right.norm() < 1e-9 {
        right = f.cross(&Vector3::y());
    }
    let x = right.normalize();
    let y = f.cross(&x);
    let m = Matrix3::from_columns(&[x, y, f]);
    Pose::new(Rotation3::from_matrix_unchecked(m), eye)
}

/// `count` cameras evenly spaced in azimuth around `target`, cycling
/// through the given (radius, height) placements.
pub fn ring_cameras(target: Vector3<f64>, placements: &[(f64, f64)], count: usize) -> Vec<Pose> {
    (0..count)
        .map(|k| {
            let a = std::f64::consts::FRAC_PI_4 + k as f64 * std::f64::consts::TAU / count as f64;
            let (radius, h) = placements[k % placements.len().max(1)];
            let eye = Vector3::new(target.x + radius * a.cos(), target.y + radius * a.sin(), h);
            look_at(eye, target)
        })
        .collect()
}

/// Default four-view ring around an object: distant high views alternate
/// with close low views so both the top and the underside of overhanging
/// parts are observed.
pub fn default_ring(scene: &Scene, object_id: u32) -> Result<Vec<Pose>, SceneError> {
    let o = scene.object(object_id)?;
    let m = o.world_mesh();
    let (lo, hi) = m.bounds();
    let target = (lo + hi) * 0.5;
    let size = (hi - lo).norm();
    let high = ((1.6 * size).max(1.5), hi.z + 0.9 * size);
    let low = ((0.9 * size).max(1.0), scene.floor_height + 0.15);
    Ok(ring_cameras(target, &[high, low], 4))
}

/// Optional Gaussian depth noise.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RenderNoise {
    pub sigma: f64,
    pub seed: u64,
}

struct WorldMesh {
    id: u32,
    mesh: Mesh,
    lo: Vector3<f64>,
    hi: Vector3<f64>,
}

fn ray_aabb(
    o: &Vector3<f64>,
    d: &Vector3<f64>,
    lo: &Vector3<f64>,
    hi: &Vector3<f64>,
) -> Option<f64> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for i in 0..3 {
        if d[i].abs() < 1e-15 {
            if o[i] < lo[i] || o[i] > hi[i] {
                return None;
            }
            continue;
        }
        let a = (lo[i] - o[i]) / d[i];
        let b = (hi[i] - o[i]) / d[i];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t0 <= t1 + 1e-12).then_some(t0)
}

pub fn render_view(scene: &Scene, cam: &Pose, intrinsics: &Intrinsics) -> CameraView {
    render_view_noisy(scene, cam, intrinsics, &RenderNoise::default())
}

/// Ray-casts one view. Rows render in parallel; output does not depend on
/// the thread count.
pub fn render_view_noisy(
    scene: &Scene,
    cam: &Pose,
    intrinsics: &Intrinsics,
    noise: &RenderNoise,
) -> CameraView {
    let meshes: Vec<WorldMesh> = scene
        .objects
        .iter()
        .map(|o| {
            let mesh = o.world_mesh();
            let (lo, hi) = mesh.bounds();
            WorldMesh {
                id: o.id,
                mesh,
                lo,
                hi,
            }
        })
        .collect();
    let w = intrinsics.width as usize;
    let h = intrinsics.height as usize;
    let origin = cam.translation;
    let rows: Vec<(Vec<f64>, Vec<u32>)> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut depth = vec![0.0; w];
            let mut labels = vec![0u32; w];
            for u in 0..w {
                let dc = intrinsics.unproject(u as f64 + 0.5, v as f64 + 0.5, 1.0);
                let dir = cam.transform_vector(&dc);
                let mut best = f64::INFINITY;
                let mut best_id = 0;
                for m in &meshes {
                    match ray_aabb(&origin, &dir, &m.lo, &m.hi) {
                        Some(t) if t < best => {}
                        _ => continue,
                    }
                    if let Some(hit) = m.mesh.ray_cast(&origin, &dir) {
                        if hit.distance < best {
                            best = hit.distance;
                            best_id = m.id;
                        }
                    }
                }
                if best.is_finite() {
                    // dir has unit z in the camera frame, so t is z-depth
                    depth[u] = best;
                    labels[u] = best_id;
                }
            }
            (depth, labels)
        })
        .collect();
    let mut depth = Vec::with_capacity(w * h);
    let mut labels = Vec::with_capacity(w * h);
    for (d, l) in rows {
        depth.extend(d);
        labels.extend(l);
    }
    if noise.sigma > 0.0 {
        let mut rng = SeedStream::new(noise.seed).rng("depth-noise");
        let n = Normal::new(0.0, noise.sigma).expect("finite sigma");
        for d in depth.iter_mut().filter(|d| **d > 0.0) {
            *d = (*d + n.sample(&mut rng)).max(1e-6);
        }
    }
    CameraView {
        pose: *cam,
        intrinsics: *intrinsics,
        depth,
        labels,
        vocabulary: scene
            .objects
            .iter()
            .map(|o| (o.id, o.label.clone()))
            .collect(),
    }
}

pub fn render_views(scene: &Scene, cams: &[Pose], intrinsics: &Intrinsics) -> Vec<CameraView> {
    cams.iter()
        .map(|c| render_view(scene, c, intrinsics))
        .collect()
}

/// Back-projects the pixels labelled `label` in each view and concatenates
/// them in view order. `sources` holds the view index of every point.
pub fn extract_object_cloud(views: &[CameraView], label: &str) -> Result<PointCloud, SceneError> {
    let mut cloud = PointCloud {
        sources: Some(Vec::new()),
        ..Default::default()
    };
    for (k, view) in views.iter().enumerate() {
        cloud.viewpoints.push(view.center());
        let Some(id) = view.id_for(label) else {
            continue;
        };
        for v in 0..view.intrinsics.height {
            for u in 0..view.intrinsics.width {
                if view.label_at(u, v) != id {
                    continue;
                }
                if let Some(p) = view.back_project(u, v) {
                    cloud.points.push(p);
                    if let Some(s) = cloud.sources.as_mut() {
                        s.push(k as u32);
                    }
                }
            }
        }
    }
    if cloud.points.is_empty() {
        return Err(SceneError::EmptyCloud(label.to_string()));
    }
    Ok(cloud)
}

/// Per-view voxel downsampling followed by concatenation, so each point
/// keeps a source view that actually observed it.
pub fn downsample_per_view(cloud: &PointCloud, voxel: f64) -> PointCloud {
    let Some(sources) = &cloud.sources else {
        return cloud.voxel_downsample(voxel);
    };
    let mut out = PointCloud {
        sources: Some(Vec::new()),
        viewpoints: cloud.viewpoints.clone(),
        normals: cloud.normals.as_ref().map(|_| Vec::new()),
        ..Default::default()
    };
    for k in 0..cloud.viewpoints.len() as u32 {
        let idx: Vec<usize> = (0..cloud.len()).filter(|&i| sources[i] == k).collect();
        let part = cloud.select(&idx).voxel_downsample(voxel);
        out.points.extend(part.points);
        if let (Some(a), Some(b)) = (out.normals.as_mut(), part.normals) {
            a.extend(b);
        }
        if let (Some(a), Some(b)) = (out.sources.as_mut(), part.sources) {
            a.extend(b);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::point_triangle_distance;
    use crate::scene::{ObjectSpec, SceneSpec};

    fn cube_scene() -> Scene {
        Scene::generate(&SceneSpec {
            seed: 0,
            floor_height: -10.0,
            objects: vec![ObjectSpec {
                id: 3,
                label: "cube".into(),
                template: "box".into(),
                dimensions: [1.0, 1.0, 1.0],
                mesh_path: None,
                position: [0.0, 0.0, -0.5],
                rpy: [0.0; 3],
                mass: 1.0,
                friction: 0.5,
                jitter: 0.0,
            }],
        })
        .unwrap()
    }

    #[test]
    fn empty_view_has_no_depth() {
        let s = cube_scene();
        let cam = look_at(Vector3::new(0.0, 0.0, 5.0), Vector3::new(0.0, 0.0, 10.0));
        let v = render_view(&s, &cam, &Intrinsics::default());
        assert!(v.depth.iter().all(|d| *d == 0.0));
        assert!(v.labels.iter().all(|l| *l == 0));
    }

    #[test]
    fn face_on_depth() {
        let s = cube_scene();
        let cam = look_at(Vector3::new(-2.0, 0.0, 0.0), Vector3::zeros());
        let v = render_view(&s, &cam, &Intrinsics::default());
        let d = v.depth_at(320, 240).unwrap();
        assert!((d - 1.5).abs() < 1e-6, "{d}");
        assert_eq!(v.label_at(320, 240), 3);
    }

    #[test]
    fn cloud_points_lie_on_cube() {
        let s = cube_scene();
        let cam = look_at(Vector3::new(-2.0, 1.5, 1.2), Vector3::zeros());
        let v = render_view(&s, &cam, &Intrinsics::default());
        let c = extract_object_cloud(&[v], "cube").unwrap();
        assert!(c.len() > 1000);
        let m = s.objects[0].world_mesh();
        for p in c.points.iter().step_by(7) {
            let d = (0..m.triangles.len())
                .map(|i| point_triangle_distance(p, &m.triangle(i)))
                .fold(f64::INFINITY, f64::min);
            assert!(d < 1e-6);
        }
        assert!(matches!(
            extract_object_cloud(&[], "cube"),
            Err(SceneError::EmptyCloud(_))
        ));
    }
}
