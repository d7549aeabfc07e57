//! Local crops around a reference point and a deterministic antipodal grasp
//! synthesizer that maps a centred crop to a full 6-DoF grasp.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand_distr::{Distribution, UnitBall};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::candidates::estimate_normals;
use crate::cloud::{PointCloud, SpatialGrid};
use crate::geometry::{GraspPose, Pose};
use crate::kinematics::RobotModel;
use crate::rng::SeedStream;
use crate::scene::{CloudObstacle, CollisionGeometry};

pub const CROP_SIZE: usize = 2048;
/// Crop half-width in metres (L∞ ball).
pub const CROP_RADIUS: f64 = 1.0;
pub const DEFAULT_VISIBILITY_THRESHOLD: f64 = 0.01;
pub const DEFAULT_PERTURB_RADIUS: f64 = 0.05;
/// Half the finger pad width; contacts farther than this from the closing
/// line are not touched by the pads.
pub const PAD_HALF_WIDTH: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LocalGraspError {
    #[error("no points within the crop region around the reference")]
    EmptyCrop,
    #[error("reference is not finite")]
    NonFinite,
    #[error("no local grasp: {0}")]
    NoLocalGrasp(String),
}

/// Points in the crop frame (reference at the origin).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalCrop {
    pub points: Vec<Vector3<f64>>,
    pub normals: Option<Vec<Vector3<f64>>>,
    /// Reference point in the source frame.
    pub reference: Vector3<f64>,
    /// Crop frame expressed in the source frame.
    pub frame: Pose,
    /// Viewpoint in crop coordinates, used to orient normals.
    pub viewpoint: Option<Vector3<f64>>,
}

impl LocalCrop {
    pub fn to_cloud(&self) -> PointCloud {
        PointCloud {
            points: self.points.clone(),
            normals: self.normals.clone(),
            sources: None,
            viewpoints: Vec::new(),
        }
    }

    /// Rigidly rotates the crop about its origin.
    pub fn rotated(&self, r: &Rotation3<f64>) -> LocalCrop {
        LocalCrop {
            points: self.points.iter().map(|p| r * p).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|n| n.iter().map(|v| r * v).collect()),
            reference: self.reference,
            frame: self
                .frame
                .compose(&Pose::new(r.inverse(), Vector3::zeros())),
            viewpoint: self.viewpoint.map(|v| r * v),
        }
    }
}

/// Farthest-point sampling starting from `start`; returns indices.
pub fn farthest_point_sample(points: &[Vector3<f64>], count: usize, start: usize) -> Vec<usize> {
    let n = points.len();
    if count >= n {
        return (0..n).collect();
    }
    let mut chosen = Vec::with_capacity(count);
    let mut d2 = vec![f64::INFINITY; n];
    let mut cur = start;
    for _ in 0..count {
        chosen.push(cur);
        let c = points[cur];
        let mut next = 0;
        let mut best = -1.0;
        for (i, p) in points.iter().enumerate() {
            let d = (p - c).norm_squared();
            if d < d2[i] {
                d2[i] = d;
            }
            if d2[i] > best {
                best = d2[i];
                next = i;
            }
        }
        cur = next;
    }
    chosen
}

/// Crop with the identity frame rotation (source-frame axes).
pub fn crop_local(
    cloud: &PointCloud,
    reference: &Vector3<f64>,
) -> Result<LocalCrop, LocalGraspError> {
    crop_local_in_frame(cloud, reference, &nalgebra::Rotation3::identity(), None)
}

/// Expresses points in a frame at the reference with axes `axes` (e.g. the
/// camera rotation), keeps those with ‖x‖∞ < 1 m in that frame, then reduces
/// to exactly [`CROP_SIZE`] points: farthest-point sampling from the point
/// nearest the reference when larger, cyclic repetition when smaller.
pub fn crop_local_in_frame(
    cloud: &PointCloud,
    reference: &Vector3<f64>,
    axes: &Rotation3<f64>,
    viewpoint: Option<Vector3<f64>>,
) -> Result<LocalCrop, LocalGraspError> {
    if !reference.iter().all(|x| x.is_finite()) {
        return Err(LocalGraspError::NonFinite);
    }
    let inv = axes.inverse();
    let keep: Vec<usize> = (0..cloud.len())
        .filter(|&i| (inv * (cloud.points[i] - reference)).amax() < CROP_RADIUS)
        .collect();
    if keep.is_empty() {
        return Err(LocalGraspError::EmptyCrop);
    }
    let pts: Vec<Vector3<f64>> = keep
        .iter()
        .map(|&i| inv * (cloud.points[i] - reference))
        .collect();
    let nrm: Option<Vec<Vector3<f64>>> = cloud
        .normals
        .as_ref()
        .map(|n| keep.iter().map(|&i| inv * n[i]).collect());
    let order: Vec<usize> = if pts.len() > CROP_SIZE {
        let start = (0..pts.len())
            .min_by(|&a, &b| pts[a].norm_squared().total_cmp(&pts[b].norm_squared()))
            .unwrap_or(0);
        farthest_point_sample(&pts, CROP_SIZE, start)
    } else {
        (0..CROP_SIZE).map(|i| i % pts.len()).collect()
    };
    Ok(LocalCrop {
        points: order.iter().map(|&i| pts[i]).collect(),
        normals: nrm.map(|n| order.iter().map(|&i| n[i]).collect()),
        reference: *reference,
        frame: Pose::new(*axes, *reference),
        viewpoint: viewpoint.map(|v| inv * (v - reference)),
    })
}

/// A labelled grasp in the object frame with its two finger contacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspAnnotation {
    pub grasp: GraspPose,
    pub contacts: [Vector3<f64>; 2],
}

/// Annotations whose nearer contact lies within `threshold` of the rendered
/// cloud (both in the object frame).
pub fn filter_visible_grasps(
    annotations: &[GraspAnnotation],
    cloud: &PointCloud,
    threshold: f64,
) -> Vec<GraspAnnotation> {
    if threshold == f64::INFINITY {
        return annotations.to_vec();
    }
    if cloud.is_empty() || threshold < 0.0 {
        return Vec::new();
    }
    let grid = SpatialGrid::new(&cloud.points, threshold.max(0.005));
    annotations
        .iter()
        .filter(|a| {
            a.contacts.iter().any(|c| {
                if threshold == 0.0 {
                    return cloud.points.iter().any(|p| p == c);
                }
                !grid.within(&cloud.points, c, threshold).is_empty()
            })
        })
        .cloned()
        .collect()
}

/// Uniform offset inside a ball of `radius`.
pub fn perturb_reference(contact: &Vector3<f64>, radius: f64, seed: u64) -> Vector3<f64> {
    if radius <= 0.0 {
        return *contact;
    }
    let mut rng = SeedStream::new(seed).rng("perturb-reference");
    let u: [f64; 3] = UnitBall.sample(&mut rng);
    contact + Vector3::from(u) * radius
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisParams {
    /// First contacts are searched within this distance of the reference.
    pub max_reference_distance: f64,
    /// Opposing normals must be anti-parallel within this angle.
    pub antipodal_tolerance: f64,
    /// Maximum distance of the second contact from the first contact's
    /// normal line.
    pub max_lateral_offset: f64,
    pub approach_samples: usize,
    pub pad_gap: f64,
    pub normal_radius: f64,
}

impl Default for SynthesisParams {
    fn default() -> Self {
        SynthesisParams {
            max_reference_distance: 0.02,
            antipodal_tolerance: 30f64.to_radians(),
            max_lateral_offset: PAD_HALF_WIDTH,
            approach_samples: 16,
            pad_gap: 0.002,
            normal_radius: 0.015,
        }
    }
}

pub fn synthesize_grasp(
    crop: &LocalCrop,
    robot: &RobotModel,
) -> Result<GraspPose, LocalGraspError> {
    synthesize_grasp_with(crop, robot, &SynthesisParams::default())
}

/// Antipodal grasp on the crop, in crop coordinates.
///
/// The first contact is the crop point nearest the origin that has an
/// opposing point along its normal; the second is the best such point. The closing axis bisects the two
/// normals and the approach starts from the direction of the nearby
/// material, trying evenly spaced angles about the closing axis until the
/// gripper is free of the crop.
pub fn synthesize_grasp_with(
    crop: &LocalCrop,
    robot: &RobotModel,
    params: &SynthesisParams,
) -> Result<GraspPose, LocalGraspError> {
    if crop.points.is_empty() {
        return Err(LocalGraspError::EmptyCrop);
    }
    // deduplicate padding repeats (exact copies) while keeping order
    let mut uniq: Vec<usize> = Vec::new();
    {
        let mut seen = std::collections::HashSet::new();
        for (i, p) in crop.points.iter().enumerate() {
            if seen.insert([p.x.to_bits(), p.y.to_bits(), p.z.to_bits()]) {
                uniq.push(i);
            }
        }
    }
    let pts: Vec<Vector3<f64>> = uniq.iter().map(|&i| crop.points[i]).collect();
    let (normals, valid) = match &crop.normals {
        Some(n) => (
            uniq.iter().map(|&i| n[i]).collect::<Vec<_>>(),
            vec![true; pts.len()],
        ),
        None => {
            let cloud = PointCloud {
                points: pts.clone(),
                normals: None,
                sources: crop.viewpoint.map(|_| vec![0; pts.len()]),
                viewpoints: crop.viewpoint.into_iter().collect(),
            };
            let est = estimate_normals(&cloud, params.normal_radius);
            (est.cloud.normals.unwrap_or_default(), est.valid)
        }
    };
    let max_sep = robot.gripper.max_opening - 2.0 * params.pad_gap;
    let cos_tol = params.antipodal_tolerance.cos();
    let mut firsts: Vec<usize> = (0..pts.len())
        .filter(|&i| {
            valid[i] && normals[i].norm() > 0.5 && pts[i].norm() <= params.max_reference_distance
        })
        .collect();
    if firsts.is_empty() {
        return Err(LocalGraspError::NoLocalGrasp(format!(
            "no surface point within {:.3} m of the reference",
            params.max_reference_distance
        )));
    }
    firsts.sort_by(|&a, &b| pts[a].norm_squared().total_cmp(&pts[b].norm_squared()));

    // first contact: nearest to the reference that has an opposing point;
    // second: smallest lateral offset from the first normal, then nearest
    let mut pair = None;
    for &i1 in &firsts {
        let p1 = pts[i1];
        let n1 = normals[i1].normalize();
        let mut best: Option<(f64, f64, usize)> = None;
        for i in 0..pts.len() {
            if !valid[i] || i == i1 {
                continue;
            }
            let n2 = normals[i];
            if n2.norm() < 0.5 || n2.normalize().dot(&-n1) < cos_tol {
                continue;
            }
            let d = pts[i] - p1;
            let depth = -d.dot(&n1);
            if depth <= 1e-4 || d.norm() > max_sep {
                continue;
            }
            let lateral = (d + n1 * depth).norm();
            if lateral > params.max_lateral_offset {
                continue;
            }
            if best.is_none_or(|b| (lateral, depth) < (b.0, b.1)) {
                best = Some((lateral, depth, i));
            }
        }
        if let Some((_, _, i2)) = best {
            pair = Some((i1, i2));
            break;
        }
    }
    let (i1, i2) = pair.ok_or_else(|| {
        LocalGraspError::NoLocalGrasp("no opposing surface within the gripper width".into())
    })?;
    let (p1, n1) = (pts[i1], normals[i1].normalize());
    let p2 = pts[i2];
    let n2 = normals[i2].normalize();
    let u = (n1 - n2).normalize();
    let sep = (p1 - p2).dot(&u);
    let center = p1 - u * (sep * 0.5);
    if sep > max_sep {
        return Err(LocalGraspError::NoLocalGrasp(
            "contacts wider than the gripper".into(),
        ));
    }

    // material direction: mean offset of nearby points, perpendicular to u
    let mut toward = Vector3::zeros();
    for p in &pts {
        let d = p - center;
        if d.norm() < 0.1 {
            toward += d - u * d.dot(&u);
        }
    }
    let start = if toward.norm() > 1e-9 {
        toward.normalize()
    } else {
        crate::geometry::inplane_reference(&Unit::new_normalize(u)).into_inner()
    };
    let obstacle = CloudObstacle::new(&PointCloud::from_points(pts.clone()));
    let geom = CollisionGeometry::Gripper {
        robot,
        opening: robot.gripper.max_opening,
        sweep: 0.0,
    };
    let axis = Unit::new_normalize(u);
    let n = params.approach_samples.max(1);
    let step = std::f64::consts::TAU / n as f64;
    for k in 0..n {
        // 0, +1, -1, +2, -2, ...
        let j = k.div_ceil(2) as f64 * if k % 2 == 1 { 1.0 } else { -1.0 };
        let v = Rotation3::from_axis_angle(&axis, j * step) * start;
        let pose = Pose::new(
            Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[u, v.cross(&u), v])),
            center,
        );
        if !obstacle.collides(&geom, &pose, 0.0) {
            return crate::geometry::tva_from_pose(&pose)
                .map_err(|e| LocalGraspError::NoLocalGrasp(e.to_string()));
        }
    }
    Err(LocalGraspError::NoLocalGrasp(
        "every sampled approach collides with the crop".into(),
    ))
}

/// The two fingertip contacts implied by a synthesized grasp: on either side
/// of the centre, the outermost crop point under the pads, i.e. the first
/// surface a closing finger touches.
pub fn implied_contacts(
    grasp: &GraspPose,
    crop: &LocalCrop,
    max_opening: f64,
) -> Option<[Vector3<f64>; 2]> {
    let u = grasp.closing_axis();
    let mut best = [None::<(f64, Vector3<f64>)>; 2];
    for p in &crop.points {
        let d = p - grasp.translation;
        let along = d.dot(&u);
        let lateral = (d - u * along).norm();
        if lateral > PAD_HALF_WIDTH || along.abs() > max_opening * 0.5 {
            continue;
        }
        let side = usize::from(along < 0.0);
        let key = along.abs();
        if best[side].is_none_or(|b| key > b.0) {
            best[side] = Some((key, *p));
        }
    }
    Some([best[0]?.1, best[1]?.1])
}
