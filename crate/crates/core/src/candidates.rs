//! Collision-free grasp-point candidates on a fused object cloud: normal
//! estimation, gripper-feasibility filtering, K-means clustering and label
//! projection onto a single view.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{
    default_ring, downsample_per_view, extract_object_cloud, render_views, CameraView, Intrinsics,
};
use crate::cloud::{PointCloud, SpatialGrid};
use crate::geometry::GraspPose;
use crate::kinematics::RobotModel;
use crate::rng::SeedStream;
use crate::scene::{CloudObstacle, CollisionFilter, CollisionGeometry, Scene};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CandidateError {
    #[error("cloud has no normals")]
    MissingNormals,
    #[error("no graspable region: no point admits a collision-free gripper pose")]
    NoGraspableRegion,
    #[error("only {available} points for K = {k}; use K <= {available}")]
    TooFewPoints { available: usize, k: usize },
    #[error("K must be at least 1")]
    ZeroK,
    #[error("labels {a} and {b} are {distance:.1} px apart (minimum {min:.1} px)")]
    Overlap {
        a: u32,
        b: u32,
        distance: f64,
        min: f64,
    },
    #[error("label {0} projects outside the image")]
    OutsideImage(u32),
    #[error("no view sees any collision-free point")]
    NoView,
    #[error("perception: {0}")]
    Perception(String),
}

/// Normals with per-point validity and surface variation
/// (`λ_min / Σλ`, 0 for a perfect plane).
#[derive(Clone, Debug, PartialEq)]
pub struct NormalEstimate {
    pub cloud: PointCloud,
    pub valid: Vec<bool>,
    pub flatness: Vec<f64>,
}

impl NormalEstimate {
    /// The cloud restricted to valid normals, plus the kept indices.
    pub fn valid_cloud(&self) -> (PointCloud, Vec<usize>) {
        let idx: Vec<usize> = (0..self.valid.len()).filter(|&i| self.valid[i]).collect();
        (self.cloud.select(&idx), idx)
    }
}

/// PCA normals over a radius neighbourhood, oriented toward the camera that
/// observed each point (or away from the centroid without provenance).
pub fn estimate_normals(cloud: &PointCloud, radius: f64) -> NormalEstimate {
    let grid = SpatialGrid::new(&cloud.points, radius.max(1e-6));
    let centroid = cloud.centroid();
    let results: Vec<(Vector3<f64>, bool, f64)> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let p = cloud.points[i];
            let nb = grid.within(&cloud.points, &p, radius);
            if nb.len() < 3 {
                return (Vector3::zeros(), false, 1.0);
            }
            let mean = nb.iter().map(|&j| cloud.points[j]).sum::<Vector3<f64>>() / nb.len() as f64;
            let mut cov = Matrix3::zeros();
            for &j in &nb {
                let d = cloud.points[j] - mean;
                cov += d * d.transpose();
            }
            let eig = cov.symmetric_eigen();
            let mut order = [0usize, 1, 2];
            order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
            let (l0, l1, l2) = (
                eig.eigenvalues[order[0]].max(0.0),
                eig.eigenvalues[order[1]].max(0.0),
                eig.eigenvalues[order[2]].max(0.0),
            );
            // collinear or coincident neighbourhoods have no plane
            if l1 <= 1e-12 * l2.max(1e-300) || l2 <= 0.0 {
                return (Vector3::zeros(), false, 1.0);
            }
            let mut n: Vector3<f64> = eig.eigenvectors.column(order[0]).into_owned().normalize();
            let toward = match (&cloud.sources, cloud.viewpoints.is_empty()) {
                (Some(s), false) => cloud.viewpoints[s[i] as usize] - p,
                _ => p - centroid,
            };
            if n.dot(&toward) < 0.0 {
                n = -n;
            }
            (n, true, l0 / (l0 + l1 + l2))
        })
        .collect();
    let mut out = cloud.clone();
    out.normals = Some(results.iter().map(|r| r.0).collect());
    NormalEstimate {
        cloud: out,
        valid: results.iter().map(|r| r.1).collect(),
        flatness: results.iter().map(|r| r.2).collect(),
    }
}

/// Parameters of the gripper-feasibility filter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    /// Allowed deviation of the pad normal from anti-parallel (radians).
    pub angular_tolerance: f64,
    pub approach_samples: usize,
    /// Gap between the finger pad and the surface (metres).
    pub pad_gap: f64,
    /// Clearance to objects other than the target.
    pub scene_clearance: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams {
            angular_tolerance: 15f64.to_radians(),
            approach_samples: 8,
            pad_gap: 0.002,
            scene_clearance: 0.01,
        }
    }
}

/// Surviving points (P_CF) with the collision-free grasp found for each.
#[derive(Clone, Debug, PartialEq)]
pub struct FilteredCloud {
    pub cloud: PointCloud,
    pub grasps: Vec<GraspPose>,
    pub flatness: Vec<f64>,
    /// Index of each survivor in the input cloud.
    pub indices: Vec<usize>,
}

/// Gripper poses tried at a surface point, in order: closing axis along the
/// normal, then tilted by ± the tolerance toward the approach direction; for
/// each, `samples` approach angles about the closing axis.
pub fn sampled_grasps(
    point: &Vector3<f64>,
    normal: &Vector3<f64>,
    robot: &RobotModel,
    params: &FilterParams,
) -> Vec<GraspPose> {
    let n = Unit::new_normalize(*normal);
    let half_open = robot.gripper.max_opening * 0.5;
    let reference = crate::geometry::inplane_reference(&n);
    let mut out = Vec::new();
    for tilt in [0.0, params.angular_tolerance, -params.angular_tolerance] {
        for k in 0..params.approach_samples {
            let a = k as f64 * std::f64::consts::TAU / params.approach_samples as f64;
            let approach = Rotation3::from_axis_angle(&n, a) * reference.into_inner();
            let side = n.cross(&approach);
            let r = Rotation3::from_axis_angle(&Unit::new_normalize(side), tilt);
            let x = r * n.into_inner();
            let v = r * approach;
            // +x finger pad sits `pad_gap` outside the surface
            let t = point + normal * params.pad_gap - x * half_open;
            let alpha = crate::geometry::tva_from_pose(&crate::geometry::Pose::new(
                Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, v.cross(&x), v])),
                t,
            ));
            if let Ok(g) = alpha {
                out.push(g);
            }
        }
    }
    out
}

/// Keeps points where some sampled gripper pose is free of the cloud itself
/// and of every scene object except `object_id`.
pub fn filter_collision_free(
    est: &NormalEstimate,
    robot: &RobotModel,
    scene: &Scene,
    object_id: u32,
    params: &FilterParams,
) -> Result<FilteredCloud, CandidateError> {
    let normals = est
        .cloud
        .normals
        .as_ref()
        .ok_or(CandidateError::MissingNormals)?;
    let obstacle = CloudObstacle::new(&est.cloud);
    let filter = CollisionFilter::ignoring([object_id], true);
    let geom = CollisionGeometry::Gripper {
        robot,
        opening: robot.gripper.max_opening,
        sweep: 0.0,
    };
    let found: Vec<Option<GraspPose>> = (0..est.cloud.len())
        .into_par_iter()
        .map(|i| {
            if !est.valid[i] {
                return None;
            }
            sampled_grasps(&est.cloud.points[i], &normals[i], robot, params)
                .into_iter()
                .find(|g| {
                    let pose = g.to_pose();
                    !obstacle.collides(&geom, &pose, 0.0)
                        && !scene.collides_filtered(&geom, &pose, params.scene_clearance, &filter)
                })
        })
        .collect();
    let indices: Vec<usize> = (0..found.len()).filter(|&i| found[i].is_some()).collect();
    if indices.is_empty() {
        return Err(CandidateError::NoGraspableRegion);
    }
    Ok(FilteredCloud {
        cloud: est.cloud.select(&indices),
        grasps: indices.iter().map(|&i| found[i].unwrap()).collect(),
        flatness: indices.iter().map(|&i| est.flatness[i]).collect(),
        indices,
    })
}

/// View that contributed the most points (lowest index on ties).
pub fn best_view(cloud: &PointCloud) -> Result<u32, CandidateError> {
    let sources = cloud.sources.as_ref().ok_or(CandidateError::NoView)?;
    let mut counts = vec![0usize; cloud.viewpoints.len().max(1)];
    for &s in sources {
        if (s as usize) < counts.len() {
            counts[s as usize] += 1;
        }
    }
    let (best, n) = counts
        .iter()
        .enumerate()
        .fold((0, 0), |acc, (i, &c)| if c > acc.1 { (i, c) } else { acc });
    if n == 0 {
        return Err(CandidateError::NoView);
    }
    Ok(best as u32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub label: u32,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub view: u32,
    /// Continuous pixel coordinates in the labelling view, once projected.
    pub pixel: Option<[f64; 2]>,
    /// Collision-free gripper pose found by the filter.
    pub grasp: GraspPose,
    pub flatness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub object_id: u32,
    pub view: u32,
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn k(&self) -> usize {
        self.candidates.len()
    }

    pub fn get(&self, label: u32) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.label == label)
    }

    pub fn labels(&self) -> Vec<u32> {
        self.candidates.iter().map(|c| c.label).collect()
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, a) in self.candidates.iter().enumerate() {
            for b in &self.candidates[i + 1..] {
                best = best.min((a.point - b.point).norm());
            }
        }
        best
    }
}

fn lex(a: &Vector3<f64>, b: &Vector3<f64>) -> std::cmp::Ordering {
    a.x.total_cmp(&b.x)
        .then(a.y.total_cmp(&b.y))
        .then(a.z.total_cmp(&b.z))
}

/// K-means on positions. Returns, per cluster, the member nearest its
/// centroid. Input order does not matter: points are sorted first, the first
/// centre is the extreme point along a seeded direction and the rest are
/// chosen farthest-first.
pub fn kmeans_representatives(
    points: &[Vector3<f64>],
    k: usize,
    seed: u64,
) -> Result<Vec<usize>, CandidateError> {
    if k == 0 {
        return Err(CandidateError::ZeroK);
    }
    if points.len() < k {
        return Err(CandidateError::TooFewPoints {
            available: points.len(),
            k,
        });
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| lex(&points[a], &points[b]).then(a.cmp(&b)));
    let pts: Vec<Vector3<f64>> = order.iter().map(|&i| points[i]).collect();

    let mut rng = SeedStream::new(seed).rng("kmeans");
    let dir = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let mut first = 0;
    for i in 1..pts.len() {
        if pts[i].dot(&dir) > pts[first].dot(&dir) {
            first = i;
        }
    }
    let mut centers = vec![pts[first]];
    let mut d2: Vec<f64> = pts
        .iter()
        .map(|p| (p - pts[first]).norm_squared())
        .collect();
    while centers.len() < k {
        let mut far = 0;
        for i in 1..pts.len() {
            if d2[i] > d2[far] {
                far = i;
            }
        }
        centers.push(pts[far]);
        for (i, p) in pts.iter().enumerate() {
            d2[i] = d2[i].min((p - pts[far]).norm_squared());
        }
    }

    let assign = |centers: &[Vector3<f64>]| -> Vec<usize> {
        pts.iter()
            .map(|p| {
                let mut best = 0;
                let mut bd = f64::INFINITY;
                for (c, center) in centers.iter().enumerate() {
                    let d = (p - center).norm_squared();
                    if d < bd {
                        bd = d;
                        best = c;
                    }
                }
                best
            })
            .collect()
    };
    let mut labels = assign(&centers);
    for _ in 0..100 {
        let mut sums = vec![Vector3::zeros(); k];
        let mut counts = vec![0usize; k];
        for (p, &l) in pts.iter().zip(&labels) {
            sums[l] += p;
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c] / counts[c] as f64;
            } else {
                // re-seed an empty cluster at the worst-fit point
                let mut worst = 0;
                let mut wd = -1.0;
                for (i, p) in pts.iter().enumerate() {
                    let d = (p - centers[labels[i]]).norm_squared();
                    if d > wd {
                        wd = d;
                        worst = i;
                    }
                }
                centers[c] = pts[worst];
            }
        }
        let next = assign(&centers);
        if next == labels {
            break;
        }
        labels = next;
    }
    let mut reps = Vec::with_capacity(k);
    for c in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in pts.iter().enumerate() {
            if labels[i] != c {
                continue;
            }
            let d = (p - centers[c]).norm_squared();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        match best {
            Some((i, _)) => reps.push(order[i]),
            None => {
                // cluster emptied on the final assignment: nearest point to its centre
                let i = (0..pts.len())
                    .min_by(|&a, &b| {
                        (pts[a] - centers[c])
                            .norm_squared()
                            .total_cmp(&(pts[b] - centers[c]).norm_squared())
                    })
                    .unwrap_or(0);
                reps.push(order[i]);
            }
        }
    }
    reps.sort_unstable();
    reps.dedup();
    if reps.len() < k {
        return Err(CandidateError::TooFewPoints {
            available: reps.len(),
            k,
        });
    }
    Ok(reps)
}

/// Clusters the collision-free points seen by `view` into `k` candidates,
/// labelled 1..K by increasing azimuth about their centroid.
pub fn cluster_candidates(
    filtered: &FilteredCloud,
    object_id: u32,
    view: u32,
    k: usize,
    seed: u64,
) -> Result<CandidateSet, CandidateError> {
    let sources = filtered
        .cloud
        .sources
        .as_ref()
        .ok_or(CandidateError::NoView)?;
    let idx: Vec<usize> = (0..filtered.cloud.len())
        .filter(|&i| sources[i] == view)
        .collect();
    let pts: Vec<Vector3<f64>> = idx.iter().map(|&i| filtered.cloud.points[i]).collect();
    let reps = kmeans_representatives(&pts, k, seed)?;
    let normals = filtered
        .cloud
        .normals
        .as_ref()
        .ok_or(CandidateError::MissingNormals)?;
    let chosen: Vec<usize> = reps.iter().map(|&r| idx[r]).collect();
    let centroid = chosen
        .iter()
        .map(|&i| filtered.cloud.points[i])
        .sum::<Vector3<f64>>()
        / chosen.len() as f64;
    let mut with_angle: Vec<(f64, usize)> = chosen
        .iter()
        .map(|&i| {
            let d = filtered.cloud.points[i] - centroid;
            (d.y.atan2(d.x), i)
        })
        .collect();
    with_angle.sort_by(|a, b| {
        a.0.total_cmp(&b.0).then(lex(
            &filtered.cloud.points[a.1],
            &filtered.cloud.points[b.1],
        ))
    });
    let candidates = with_angle
        .iter()
        .enumerate()
        .map(|(n, &(_, i))| Candidate {
            label: n as u32 + 1,
            point: filtered.cloud.points[i],
            normal: normals[i],
            view,
            pixel: None,
            grasp: filtered.grasps[i],
            flatness: filtered.flatness[i],
        })
        .collect();
    Ok(CandidateSet {
        object_id,
        view,
        candidates,
    })
}

/// Label positions on the labelling view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage {
    pub view: u32,
    pub width: u32,
    pub height: u32,
    /// (label, u, v) in continuous pixel coordinates.
    pub labels: Vec<(u32, f64, f64)>,
    pub min_distance: f64,
}

pub const DEFAULT_LABEL_SPACING: f64 = 10.0;

/// Projects every candidate into `view`; fails if a label leaves the image
/// or two labels are closer than `min_distance` pixels.
pub fn project_labels(
    cands: &CandidateSet,
    view: &CameraView,
    min_distance: f64,
) -> Result<(CandidateSet, LabeledImage), CandidateError> {
    let mut out = cands.clone();
    let mut labels = Vec::new();
    let (w, h) = (view.intrinsics.width as f64, view.intrinsics.height as f64);
    for c in &mut out.candidates {
        let (u, v) = view
            .project_world(&c.point)
            .filter(|(u, v)| *u >= 0.0 && *v >= 0.0 && *u < w && *v < h)
            .ok_or(CandidateError::OutsideImage(c.label))?;
        c.pixel = Some([u, v]);
        labels.push((c.label, u, v));
    }
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            let d =
                ((labels[i].1 - labels[j].1).powi(2) + (labels[i].2 - labels[j].2).powi(2)).sqrt();
            if d < min_distance {
                return Err(CandidateError::Overlap {
                    a: labels[i].0,
                    b: labels[j].0,
                    distance: d,
                    min: min_distance,
                });
            }
        }
    }
    Ok((
        out,
        LabeledImage {
            view: cands.view,
            width: view.intrinsics.width,
            height: view.intrinsics.height,
            labels,
            min_distance,
        },
    ))
}

/// Settings for the whole candidate stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateParams {
    pub intrinsics: Intrinsics,
    /// Per-view voxel size applied to the fused cloud.
    pub voxel: f64,
    pub normal_radius: f64,
    pub filter: FilterParams,
    pub k: usize,
    pub label_spacing: f64,
}

impl Default for CandidateParams {
    fn default() -> Self {
        Self {
            intrinsics: Intrinsics::default(),
            voxel: 0.01,
            normal_radius: 0.015,
            filter: FilterParams::default(),
            k: 10,
            label_spacing: DEFAULT_LABEL_SPACING,
        }
    }
}

/// Everything the candidate stage produces.
#[derive(Clone, Debug)]
pub struct CandidateRun {
    pub views: Vec<CameraView>,
    /// Fused, downsampled object cloud with valid normals (P_obj).
    pub cloud: PointCloud,
    pub filtered: FilteredCloud,
    pub set: CandidateSet,
    pub image: LabeledImage,
}

/// Render the default camera ring, extract and fuse the object's cloud,
/// filter it and cluster the best view's share into labelled candidates.
pub fn generate_candidates(
    scene: &Scene,
    object_id: u32,
    robot: &RobotModel,
    params: &CandidateParams,
    seed: u64,
) -> Result<CandidateRun, CandidateError> {
    let perception = |e: crate::scene::SceneError| CandidateError::Perception(e.to_string());
    let object = scene.object(object_id).map_err(perception)?;
    let cams = default_ring(scene, object_id).map_err(perception)?;
    let views = render_views(scene, &cams, &params.intrinsics);
    let fused = extract_object_cloud(&views, &object.label).map_err(perception)?;
    let cloud = downsample_per_view(&fused, params.voxel);
    let est = estimate_normals(&cloud, params.normal_radius);
    let (valid, _) = est.valid_cloud();
    let est = NormalEstimate {
        flatness: est
            .valid
            .iter()
            .zip(&est.flatness)
            .filter(|(v, _)| **v)
            .map(|(_, f)| *f)
            .collect(),
        valid: vec![true; valid.len()],
        cloud: valid,
    };
    let filtered = filter_collision_free(&est, robot, scene, object_id, &params.filter)?;
    let view = best_view(&filtered.cloud)?;
    let set = cluster_candidates(&filtered, object_id, view, params.k, seed)?;
    let (set, image) = project_labels(&set, &views[view as usize], params.label_spacing)?;
    Ok(CandidateRun {
        views,
        cloud: est.cloud,
        filtered,
        set,
        image,
    })
}
