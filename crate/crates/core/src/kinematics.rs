//! Mobile manipulator model: planar base (x, y, heading) carrying a serial
//! revolute arm with a parallel-jaw gripper.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Rotation3, Unit, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::geometry::{GeometryError, Pose};
use crate::shapes::{Obb, Sphere};

/// Number of base degrees of freedom prepended to the arm joints.
pub const BASE_DOF: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    /// Rotation axis in the joint's own frame.
    pub axis: [f64; 3],
    /// Translation from the previous joint frame to this joint (meters).
    pub offset: [f64; 3],
    /// `[lower, upper]` in radians.
    pub limits: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseModel {
    /// Footprint half extents (x, y) in meters.
    pub half_extents: [f64; 2],
    pub height: f64,
    /// Arm mount point in the base frame.
    pub mount: [f64; 3],
    pub x_limits: [f64; 2],
    pub y_limits: [f64; 2],
    pub heading_limits: [f64; 2],
}

/// Parallel-jaw gripper, in the tool frame (z = approach, x = closing).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GripperModel {
    pub finger_length: f64,
    pub finger_thickness: f64,
    pub finger_width: f64,
    pub max_opening: f64,
    pub palm_depth: f64,
    /// Palm extent along the finger-width axis.
    #[serde(default = "default_palm_width")]
    pub palm_width: f64,
    /// Pad normal of the +x finger, pointing into the closing region.
    pub pad_normal: [f64; 3],
}

fn default_palm_width() -> f64 {
    0.06
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotModel {
    pub name: String,
    pub base: BaseModel,
    pub joints: Vec<Joint>,
    /// Flange to grasp-center offset in the flange frame.
    pub tool_offset: [f64; 3],
    pub gripper: GripperModel,
    /// Radius of the spheres approximating the arm links.
    pub link_radius: f64,
}

/// Base pose followed by arm joint angles: `[x, y, heading, q1..qk]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Configuration {
    pub values: Vec<f64>,
}

impl Configuration {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(robot: &RobotModel) -> Self {
        Self::new(vec![0.0; robot.dof()])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn base_pose(&self) -> Pose {
        Pose::from_xyz_yaw(self.values[0], self.values[1], 0.0, self.values[2])
    }

    pub fn as_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }

    pub fn distance(&self, other: &Configuration) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn interpolate(&self, other: &Configuration, s: f64) -> Configuration {
        Configuration::new(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + (b - a) * s)
                .collect(),
        )
    }
}

/// Collision geometry of a posed robot.
#[derive(Clone, Debug)]
pub struct RobotBody {
    pub base: Obb,
    pub links: Vec<Sphere>,
    /// Two fingers then the palm, followed by the wrist connector.
    pub gripper: Vec<Obb>,
}

impl RobotBody {
    pub fn boxes(&self) -> impl Iterator<Item = &Obb> {
        std::iter::once(&self.base).chain(self.gripper.iter())
    }
}

/// Joint frames produced by forward kinematics.
#[derive(Clone, Debug)]
pub struct ChainFrames {
    pub base: Pose,
    /// World pose of each arm joint frame (after its rotation).
    pub joints: Vec<Pose>,
    pub flange: Pose,
    pub tool: Pose,
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

impl Default for RobotModel {
    fn default() -> Self {
        Self::mobile_manipulator()
    }
}

impl RobotModel {
    /// Default stand-in: 3-DoF planar base with a 6-DoF arm (spherical wrist).
    ///
    /// At the zero configuration the arm points straight up and the grasp
    /// center (home pose) sits at `(0, 0, 1.55)` with identity orientation.
    pub fn mobile_manipulator() -> Self {
        let j = |axis: [f64; 3], offset: [f64; 3], lim: f64| Joint {
            axis,
            offset,
            limits: [-lim, lim],
        };
        Self {
            name: "mobile-6dof".into(),
            base: BaseModel {
                half_extents: [0.25, 0.2],
                height: 0.4,
                mount: [0.0, 0.0, 0.4],
                x_limits: [-20.0, 20.0],
                y_limits: [-20.0, 20.0],
                heading_limits: [-2.0 * std::f64::consts::PI, 2.0 * std::f64::consts::PI],
            },
            joints: vec![
                j([0.0, 0.0, 1.0], [0.0, 0.0, 0.10], 2.9),
                j([0.0, 1.0, 0.0], [0.0, 0.0, 0.0], 2.0),
                j([0.0, 1.0, 0.0], [0.0, 0.0, 0.45], 2.6),
                j([0.0, 0.0, 1.0], [0.0, 0.0, 0.40], 2.9),
                j([0.0, 1.0, 0.0], [0.0, 0.0, 0.0], 2.1),
                j([0.0, 0.0, 1.0], [0.0, 0.0, 0.08], 2.9),
            ],
            tool_offset: [0.0, 0.0, 0.12],
            gripper: GripperModel {
                finger_length: 0.06,
                finger_thickness: 0.012,
                finger_width: 0.02,
                max_opening: 0.08,
                palm_depth: 0.03,
                palm_width: 0.06,
                pad_normal: [-1.0, 0.0, 0.0],
            },
            link_radius: 0.05,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self, GeometryError> {
        let model: RobotModel =
            toml::from_str(s).map_err(|e| GeometryError::InvalidModel(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| GeometryError::InvalidModel(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("robot model serializes")
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.joints.is_empty() {
            return Err(GeometryError::InvalidModel(
                "at least one arm joint required".into(),
            ));
        }
        for (i, j) in self.joints.iter().enumerate() {
            if !(j.limits[0] < j.limits[1]) {
                return Err(GeometryError::InvalidModel(format!(
                    "joint {i}: lower limit must be below upper limit"
                )));
            }
            if v3(j.axis).norm() < 1e-9 {
                return Err(GeometryError::InvalidModel(format!("joint {i}: zero axis")));
            }
        }
        for (name, l) in [
            ("x", self.base.x_limits),
            ("y", self.base.y_limits),
            ("heading", self.base.heading_limits),
        ] {
            if !(l[0] < l[1]) {
                return Err(GeometryError::InvalidModel(format!(
                    "base {name} limits inverted"
                )));
            }
        }
        let g = &self.gripper;
        if g.max_opening <= 0.0 || g.finger_length <= 0.0 || g.finger_thickness <= 0.0 {
            return Err(GeometryError::InvalidModel(
                "gripper dimensions must be positive".into(),
            ));
        }
        let home = self.forward_kinematics(&Configuration::zeros(self))?;
        if !home.is_finite() {
            return Err(GeometryError::InvalidModel(
                "home pose is not finite".into(),
            ));
        }
        Ok(())
    }

    /// Total configuration dimension (base + arm).
    pub fn dof(&self) -> usize {
        BASE_DOF + self.joints.len()
    }

    pub fn limits(&self) -> Vec<[f64; 2]> {
        let mut out = vec![
            self.base.x_limits,
            self.base.y_limits,
            self.base.heading_limits,
        ];
        out.extend(self.joints.iter().map(|j| j.limits));
        out
    }

    pub fn within_limits(&self, q: &Configuration) -> bool {
        q.len() == self.dof()
            && q.values
                .iter()
                .zip(self.limits())
                .all(|(v, l)| *v >= l[0] - 1e-12 && *v <= l[1] + 1e-12)
    }

    pub fn clamp(&self, q: &mut Configuration) {
        for (v, l) in q.values.iter_mut().zip(self.limits()) {
            *v = v.clamp(l[0], l[1]);
        }
    }

    fn check_dim(&self, q: &Configuration) -> Result<(), GeometryError> {
        if q.len() != self.dof() {
            return Err(GeometryError::DimensionMismatch {
                expected: self.dof(),
                got: q.len(),
            });
        }
        Ok(())
    }

    pub fn frames(&self, q: &Configuration) -> Result<ChainFrames, GeometryError> {
        self.check_dim(q)?;
        let base = q.base_pose();
        let mut t = base.compose(&Pose::from_translation(v3(self.base.mount)));
        let mut joints = Vec::with_capacity(self.joints.len());
        for (j, angle) in self.joints.iter().zip(&q.values[BASE_DOF..]) {
            let axis = Unit::new_normalize(v3(j.axis));
            t = t
                .compose(&Pose::from_translation(v3(j.offset)))
                .compose(&Pose::new(
                    Rotation3::from_axis_angle(&axis, *angle),
                    Vector3::zeros(),
                ));
            joints.push(t);
        }
        let flange = t;
        let tool = flange.compose(&Pose::from_translation(v3(self.tool_offset)));
        Ok(ChainFrames {
            base,
            joints,
            flange,
            tool,
        })
    }

    /// Grasp-center pose in the world frame.
    pub fn forward_kinematics(&self, q: &Configuration) -> Result<Pose, GeometryError> {
        Ok(self.frames(q)?.tool)
    }

    /// Geometric Jacobian (6 × dof, linear rows first) of a world point
    /// rigidly attached after arm joint `last_joint` (use `joints.len()` for
    /// the tool).
    pub fn point_jacobian(
        &self,
        frames: &ChainFrames,
        point: &Vector3<f64>,
        last_joint: usize,
    ) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(6, self.dof());
        jac[(0, 0)] = 1.0;
        jac[(1, 1)] = 1.0;
        let z = Vector3::z();
        let lever = point - frames.base.translation;
        let lin = z.cross(&lever);
        jac.fixed_view_mut::<3, 1>(0, 2).copy_from(&lin);
        jac.fixed_view_mut::<3, 1>(3, 2).copy_from(&z);
        for (i, (joint, frame)) in self.joints.iter().zip(&frames.joints).enumerate() {
            if i >= last_joint {
                break;
            }
            let axis = frame.rotation * v3(joint.axis).normalize();
            let lin = axis.cross(&(point - frame.translation));
            jac.fixed_view_mut::<3, 1>(0, BASE_DOF + i).copy_from(&lin);
            jac.fixed_view_mut::<3, 1>(3, BASE_DOF + i).copy_from(&axis);
        }
        jac
    }

    pub fn jacobian(&self, q: &Configuration) -> Result<DMatrix<f64>, GeometryError> {
        let f = self.frames(q)?;
        Ok(self.point_jacobian(&f, &f.tool.translation, self.joints.len()))
    }

    /// Collision boxes of the gripper in the tool frame at full opening.
    pub fn gripper_boxes_local(&self) -> Vec<Obb> {
        self.gripper_boxes_at(self.gripper.max_opening)
    }

    /// Gripper boxes with the fingers `opening` apart (inner faces).
    pub fn gripper_boxes_at(&self, opening: f64) -> Vec<Obb> {
        let g = &self.gripper;
        let half_open = opening * 0.5;
        let finger_half = Vector3::new(
            g.finger_thickness * 0.5,
            g.finger_width * 0.5,
            g.finger_length * 0.5,
        );
        let palm_half = Vector3::new(
            half_open + g.finger_thickness,
            g.palm_width.max(g.finger_width) * 0.5,
            g.palm_depth * 0.5,
        );
        let palm_center = Vector3::new(0.0, 0.0, -g.finger_length * 0.5 - g.palm_depth * 0.5);
        let mut out = vec![
            Obb::new(
                Vector3::new(half_open + g.finger_thickness * 0.5, 0.0, 0.0),
                Rotation3::identity(),
                finger_half,
            ),
            Obb::new(
                Vector3::new(-half_open - g.finger_thickness * 0.5, 0.0, 0.0),
                Rotation3::identity(),
                finger_half,
            ),
            Obb::new(palm_center, Rotation3::identity(), palm_half),
        ];
        let palm_back = -g.finger_length * 0.5 - g.palm_depth;
        let flange = -v3(self.tool_offset).norm();
        if palm_back - flange > 1e-6 {
            let half = (palm_back - flange) * 0.5;
            out.push(Obb::new(
                Vector3::new(0.0, 0.0, flange + half),
                Rotation3::identity(),
                Vector3::new(0.03, 0.03, half),
            ));
        }
        out
    }

    /// The gripper's two fingers and palm only (no wrist connector).
    pub fn gripper_jaw_boxes_local(&self) -> Vec<Obb> {
        self.gripper_jaw_boxes_at(self.gripper.max_opening)
    }

    pub fn gripper_jaw_boxes_at(&self, opening: f64) -> Vec<Obb> {
        self.gripper_boxes_at(opening).into_iter().take(3).collect()
    }

    /// Posed collision geometry. Link spheres run from the shoulder to the
    /// flange.
    pub fn body(&self, q: &Configuration) -> Result<RobotBody, GeometryError> {
        let f = self.frames(q)?;
        Ok(self.body_from_frames(&f))
    }

    pub fn body_from_frames(&self, f: &ChainFrames) -> RobotBody {
        let h = self.base.height;
        let base = Obb::new(
            Vector3::new(0.0, 0.0, h * 0.5),
            Rotation3::identity(),
            Vector3::new(
                self.base.half_extents[0],
                self.base.half_extents[1],
                h * 0.5,
            ),
        )
        .transformed(&f.base);
        let mut points: Vec<Vector3<f64>> = f.joints.iter().map(|p| p.translation).collect();
        points.push(f.flange.translation);
        points.dedup_by(|a, b| (*a - *b).norm() < 1e-9);
        let r = self.link_radius;
        let mut links = Vec::new();
        for w in points.windows(2) {
            let seg = w[1] - w[0];
            let n = ((seg.norm() / r).ceil() as usize).max(1);
            for s in 0..n {
                links.push(Sphere {
                    center: w[0] + seg * (s as f64 / n as f64),
                    radius: r,
                });
            }
        }
        if let Some(last) = points.last() {
            links.push(Sphere {
                center: *last,
                radius: r,
            });
        }
        let gripper = self
            .gripper_boxes_local()
            .iter()
            .map(|b| b.transformed(&f.tool))
            .collect();
        RobotBody {
            base,
            links,
            gripper,
        }
    }
}

/// Options for the damped least-squares solver.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IkOptions {
    pub position_tolerance: f64,
    pub rotation_tolerance: f64,
    pub max_iterations: usize,
    pub damping: f64,
}

impl Default for IkOptions {
    fn default() -> Self {
        Self {
            position_tolerance: 1e-4,
            rotation_tolerance: 1e-3,
            max_iterations: 400,
            damping: 0.05,
        }
    }
}

/// Rotation vector, accurate for small angles (acos-free).
pub fn rotation_log(r: &Rotation3<f64>) -> Vector3<f64> {
    UnitQuaternion::from_rotation_matrix(r).scaled_axis()
}

/// Task-space error `[Δp; Δθ]` taking `current` onto `target`.
pub fn pose_error(current: &Pose, target: &Pose) -> Vector6<f64> {
    let dp = target.translation - current.translation;
    let dr = rotation_log(&(target.rotation * current.rotation.inverse()));
    Vector6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z)
}

/// One damped least-squares step `Jᵀ(JJᵀ + λ²I)⁻¹ e`.
pub fn dls_step(jac: &DMatrix<f64>, err: &DVector<f64>, damping: f64) -> DVector<f64> {
    let rows = jac.nrows();
    let jjt = jac * jac.transpose() + DMatrix::identity(rows, rows) * (damping * damping);
    let y = jjt
        .cholesky()
        .map(|c| c.solve(err))
        .unwrap_or_else(|| DVector::zeros(rows));
    jac.transpose() * y
}

/// Damped least squares on the 6-D pose error with joint-limit clamping and
/// adaptive (Levenberg–Marquardt style) damping.
pub fn inverse_kinematics(
    robot: &RobotModel,
    target: &Pose,
    seed: &Configuration,
    opts: &IkOptions,
) -> Result<Configuration, GeometryError> {
    if !target.is_finite() {
        return Err(GeometryError::NonFinite("IK target"));
    }
    robot.check_dim(seed)?;
    let mut q = seed.clone();
    robot.clamp(&mut q);
    let mut pose = robot.forward_kinematics(&q)?;
    let mut err = pose_error(&pose, target);
    let cost = |e: &Vector6<f64>| {
        e.fixed_rows::<3>(0).norm_squared() + 0.25 * e.fixed_rows::<3>(3).norm_squared()
    };
    let mut damping = opts.damping;
    let mut current_cost = cost(&err);
    for _ in 0..opts.max_iterations {
        let pos_err = err.fixed_rows::<3>(0).norm();
        let rot_err = err.fixed_rows::<3>(3).norm();
        if pos_err < opts.position_tolerance * 0.1 && rot_err < opts.rotation_tolerance * 0.1 {
            break;
        }
        let jac = robot.jacobian(&q)?;
        // Cap the requested displacement so linearization stays meaningful.
        let mut e = DVector::from_column_slice(err.as_slice());
        let lin = e.rows(0, 3).norm();
        if lin > 0.2 {
            e.rows_mut(0, 3).scale_mut(0.2 / lin);
        }
        let ang = e.rows(3, 3).norm();
        if ang > 0.5 {
            e.rows_mut(3, 3).scale_mut(0.5 / ang);
        }
        let dq = dls_step(&jac, &e, damping);
        let mut cand =
            Configuration::new(q.values.iter().zip(dq.iter()).map(|(a, b)| a + b).collect());
        robot.clamp(&mut cand);
        let cand_pose = robot.forward_kinematics(&cand)?;
        let cand_err = pose_error(&cand_pose, target);
        let c = cost(&cand_err);
        if c < current_cost {
            q = cand;
            pose = cand_pose;
            err = cand_err;
            current_cost = c;
            damping = (damping * 0.5).max(1e-4);
        } else {
            damping = (damping * 4.0).min(10.0);
            if damping >= 10.0 {
                break;
            }
        }
    }
    let _ = pose;
    let pos_err = err.fixed_rows::<3>(0).norm();
    let rot_err = err.fixed_rows::<3>(3).norm();
    if pos_err <= opts.position_tolerance && rot_err <= opts.rotation_tolerance {
        Ok(q)
    } else {
        Err(GeometryError::Unreachable {
            position_error: pos_err,
            rotation_error: rot_err,
        })
    }
}
