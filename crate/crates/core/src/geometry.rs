//! Rigid transforms and the (translation, approach, in-plane angle) grasp
//! parameterization.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate rotation: {0}")]
    DegenerateRotation(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("configuration has {got} values, robot model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("target unreachable: best residual {position_error:.3e} m / {rotation_error:.3e} rad")]
    Unreachable {
        position_error: f64,
        rotation_error: f64,
    },
    #[error("invalid robot model: {0}")]
    InvalidModel(String),
}

/// Cross-product matrix, `skew(a) * b == a.cross(&b)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rigid transform: rotation (orthonormal, det +1) then translation, in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRepr", into = "PoseRepr")]
pub struct Pose {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

/// Row-major rotation keeps the JSON form exact (no quaternion round trip).
#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        let m = p.rotation.matrix();
        let mut rotation = [[0.0; 3]; 3];
        for (r, row) in rotation.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = m[(r, c)];
            }
        }
        PoseRepr {
            rotation,
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl TryFrom<PoseRepr> for Pose {
    type Error = GeometryError;

    fn try_from(r: PoseRepr) -> Result<Self, Self::Error> {
        let m = Matrix3::from_fn(|i, j| r.rotation[i][j]);
        Pose::from_matrix(m, Vector3::from(r.translation))
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(Rotation3::identity(), translation)
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self::new(q.to_rotation_matrix(), translation)
    }

    /// Validates orthonormality (1e-9) and handedness.
    pub fn from_matrix(m: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("rotation"));
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("translation"));
        }
        let err = (m.transpose() * m - Matrix3::identity()).amax();
        if err > 1e-9 {
            return Err(GeometryError::DegenerateRotation(format!(
                "not orthonormal (deviation {err:.3e})"
            )));
        }
        if m.determinant() <= 0.0 {
            return Err(GeometryError::DegenerateRotation(
                "determinant is not +1".into(),
            ));
        }
        Ok(Self::new(Rotation3::from_matrix_unchecked(m), translation))
    }

    /// Planar pose: translation plus rotation about world z.
    pub fn from_xyz_yaw(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self::new(
            Rotation3::from_axis_angle(&Vector3::z_axis(), yaw),
            Vector3::new(x, y, z),
        )
    }

    pub fn from_xyz_rpy(xyz: [f64; 3], rpy: [f64; 3]) -> Self {
        Self::new(
            Rotation3::from_euler_angles(rpy[0], rpy[1], rpy[2]),
            Vector3::from(xyz),
        )
    }

    /// `self` applied after `other`: `(self ∘ other)(x) = self(other(x))`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut rotation = self.rotation * other.rotation;
        rotation.renormalize();
        Pose::new(
            rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let r = self.rotation.inverse();
        Pose::new(r, -(r * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p - self.translation)
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&self.rotation)
    }

    /// Body axis (0 = x, 1 = y, 2 = z) expressed in the parent frame.
    pub fn axis(&self, i: usize) -> Vector3<f64> {
        self.rotation.matrix().column(i).into_owned()
    }

    pub fn yaw(&self) -> f64 {
        let x = self.axis(0);
        x.y.atan2(x.x)
    }

    /// Translation distance and rotation angle between two poses.
    pub fn distance(&self, other: &Pose) -> (f64, f64) {
        let dt = (self.translation - other.translation).norm();
        let dr = UnitQuaternion::from_rotation_matrix(&(self.rotation.inverse() * other.rotation))
            .angle();
        (dt, dr)
    }

    /// Interpolation: linear in translation, geodesic in rotation.
    pub fn interpolate(&self, other: &Pose, s: f64) -> Pose {
        let qa = self.quaternion();
        let qb = other.quaternion();
        let q = qa
            .try_slerp(&qb, s, 1e-12)
            .unwrap_or(if s < 0.5 { qa } else { qb });
        Pose::new(
            q.to_rotation_matrix(),
            self.translation + (other.translation - self.translation) * s,
        )
    }

    /// Max-abs deviation of `RᵀR` from identity.
    pub fn orthonormality_error(&self) -> f64 {
        let m = self.rotation.matrix();
        (m.transpose() * m - Matrix3::identity()).amax()
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.matrix().iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
    }
}

/// Uniformly distributed rotation in SO(3) (Shoemake's subgroup algorithm).
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation3<f64> {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random::<f64>() * 2.0 * PI;
    let u3: f64 = rng.random::<f64>() * 2.0 * PI;
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let q = nalgebra::Quaternion::new(b * u3.cos(), a * u2.sin(), a * u2.cos(), b * u3.sin());
    UnitQuaternion::from_quaternion(q).to_rotation_matrix()
}

/// Reduce an in-plane angle to `[0, π)`.
pub fn wrap_inplane(alpha: f64) -> f64 {
    let a = alpha.rem_euclid(PI);
    if a >= PI {
        0.0
    } else {
        a
    }
}

/// Wrap an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Two-finger grasp as translation `t`, approach direction `v` (palm to
/// fingertips) and in-plane rotation `α` of the closing direction about `v`.
///
/// Gripper frame convention: z = approach, x = closing direction (the line
/// between the finger pads), y = z × x. The closing direction at `α = 0` is
/// the world axis least aligned with `v` (lowest index on ties), projected
/// onto the plane orthogonal to `v`. `α` lives in `[0, π)` because the two
/// fingers are interchangeable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspPose {
    pub translation: Vector3<f64>,
    pub approach: Unit<Vector3<f64>>,
    pub inplane: f64,
}

/// Closing direction at `α = 0` for the approach `v`.
pub fn inplane_reference(v: &Unit<Vector3<f64>>) -> Unit<Vector3<f64>> {
    let mut axis = 0;
    for i in 1..3 {
        if v[i].abs() < v[axis].abs() {
            axis = i;
        }
    }
    let mut h = Vector3::zeros();
    h[axis] = 1.0;
    Unit::new_normalize(h - v.as_ref() * v.dot(&h))
}

impl GraspPose {
    pub fn new(
        translation: Vector3<f64>,
        approach: Vector3<f64>,
        inplane: f64,
    ) -> Result<Self, GeometryError> {
        if translation.iter().any(|v| !v.is_finite()) || !inplane.is_finite() {
            return Err(GeometryError::NonFinite("grasp pose"));
        }
        let n = approach.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(GeometryError::DegenerateRotation(
                "approach vector has zero length".into(),
            ));
        }
        Ok(Self {
            translation,
            approach: Unit::new_unchecked(approach / n),
            inplane: wrap_inplane(inplane),
        })
    }

    /// Closing (finger-to-finger) direction in the parent frame.
    pub fn closing_axis(&self) -> Vector3<f64> {
        let u0 = inplane_reference(&self.approach);
        let w0 = self.approach.cross(&u0);
        u0.as_ref() * self.inplane.cos() + w0 * self.inplane.sin()
    }

    pub fn to_pose(&self) -> Pose {
        let v = self.approach.into_inner();
        let x = self.closing_axis().normalize();
        let y = v.cross(&x);
        let m = Matrix3::from_columns(&[x, y, v]);
        Pose::new(Rotation3::from_matrix_unchecked(m), self.translation)
    }

    pub fn from_pose(p: &Pose) -> Result<Self, GeometryError> {
        if !p.is_finite() {
            return Err(GeometryError::NonFinite("pose"));
        }
        let err = p.orthonormality_error();
        if err > 1e-6 || p.rotation.matrix().determinant() <= 0.0 {
            return Err(GeometryError::DegenerateRotation(format!(
                "approach vector undefined (orthonormality error {err:.3e})"
            )));
        }
        let v = Unit::new_normalize(p.axis(2));
        let x = p.axis(0);
        let u0 = inplane_reference(&v);
        let w0 = v.cross(&u0);
        let alpha = x.dot(&w0).atan2(x.dot(&u0));
        Ok(Self {
            translation: p.translation,
            approach: v,
            inplane: wrap_inplane(alpha),
        })
    }

    /// Rigidly move the grasp.
    pub fn transformed(&self, by: &Pose) -> GraspPose {
        let p = by.compose(&self.to_pose());
        GraspPose::from_pose(&p).expect("rigid transform preserves a valid grasp frame")
    }
}

/// `pose_from_tva`.
pub fn pose_from_tva(g: &GraspPose) -> Pose {
    g.to_pose()
}

/// `tva_from_pose`.
pub fn tva_from_pose(p: &Pose) -> Result<GraspPose, GeometryError> {
    GraspPose::from_pose(p)
}

/// Weights of the approach, translation and in-plane terms of the pose loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub approach: f64,
    pub translation: f64,
    pub inplane: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            approach: 1.0,
            translation: 1.0,
            inplane: 1.0,
        }
    }
}

/// `λ1‖v̂−v‖ + λ2‖t̂−t‖ + λ3 sin²(α̂−α)`; zero iff the grasps coincide up to
/// the π symmetry of α.
pub fn pose_loss(predicted: &GraspPose, truth: &GraspPose, w: &LossWeights) -> f64 {
    let dv = (predicted.approach.into_inner() - truth.approach.into_inner()).norm();
    let dt = (predicted.translation - truth.translation).norm();
    let da = (predicted.inplane - truth.inplane).sin();
    w.approach * dv + w.translation * dt + w.inplane * da * da
}
