//! Two-stage collaborative motion planning.
//!
//! Stage 1 drives the robots to their grasps with RRT*, one robot at a time in
//! index order. Earlier robots are moving obstacles along their timed paths;
//! later robots sit at their initial configurations. Stage 2 plans the object
//! path in the constraint-reduced pose space, derives end-effector paths through
//! the fixed grasp offsets and tracks them with a damped least-squares follower.
//! Object poses where tracking fails are blocked and the object path is
//! replanned.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Rotation3, Unit, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{random_rotation, Pose};
use crate::kinematics::{
    dls_step, inverse_kinematics, pose_error, rotation_log, Configuration, IkOptions, RobotBody,
    RobotModel,
};
use crate::rng::{SeedStream, StageRng};
use crate::scene::Scene;
use crate::select::{MotionConstraint, Task};
use crate::shapes::{Obb, Sphere};

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("invalid planning input: {0}")]
    Precondition(String),
    #[error("robot {robot}: no collision-free inverse-kinematics solution for its grasp")]
    GraspUnreachable { robot: usize },
    #[error("stage-1 infeasible: robot {robot}: {reason}")]
    Stage1Infeasible { robot: usize, reason: String },
    #[error("object path infeasible: {0}")]
    ObjectPath(String),
    #[error("stage-2 infeasible after {replans} replans ({} blocked poses): {reason}", blocked.len())]
    Stage2Infeasible {
        replans: usize,
        blocked: BlockedPoseSet,
        reason: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RrtConfig {
    /// Extension step in normalized units (meters and radians).
    pub step: f64,
    pub goal_bias: f64,
    pub max_iterations: usize,
    /// Iterations spent improving the first solution.
    pub refine_iterations: usize,
    /// Edge collision-check spacing.
    pub resolution: f64,
    pub shortcut_attempts: usize,
}

impl Default for RrtConfig {
    fn default() -> Self {
        Self {
            step: 0.1,
            goal_bias: 0.1,
            max_iterations: 20_000,
            refine_iterations: 300,
            resolution: 0.01,
            shortcut_attempts: 150,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FollowConfig {
    pub damping: f64,
    pub max_iterations: usize,
    pub position_tolerance: f64,
    pub rotation_tolerance: f64,
    /// Distance at which the velocity dampers engage.
    pub influence: f64,
    /// Distance the dampers try to keep.
    pub safety: f64,
    /// Approach speed allowed at the influence distance, per iteration.
    pub damper_gain: f64,
    /// Pull of the arm joints toward their stage-1 posture (null space).
    pub posture_gain: f64,
    pub clearance: f64,
}

impl Default for FollowConfig {
    fn default() -> Self {
        Self {
            damping: 0.03,
            max_iterations: 30,
            position_tolerance: 0.005,
            rotation_tolerance: 0.01,
            influence: 0.15,
            safety: 0.03,
            damper_gain: 0.01,
            posture_gain: 0.3,
            clearance: 0.005,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub robot_rrt: RrtConfig,
    pub object_rrt: RrtConfig,
    /// Clearance kept by stage-1 paths and object paths.
    pub clearance: f64,
    /// Stage-1 speed in configuration units per second.
    pub robot_speed: f64,
    /// Spacing of the shared stage-1 time grid (s).
    pub grid_dt: f64,
    /// Object speed in pose-distance units per second.
    pub object_speed: f64,
    /// Meters charged per radian of object rotation.
    pub angular_weight: f64,
    /// Object path sample spacing in pose-distance units.
    pub object_spacing: f64,
    /// Back-off along the approach axis for the pre-grasp configuration.
    pub pregrasp_offset: f64,
    /// How far the object sampler may stray beyond start and goal (m).
    pub object_margin: f64,
    pub follow: FollowConfig,
    /// Blocked-pose rejection radius: meters, radians.
    pub blocked_radius: [f64; 2],
    pub max_replans: usize,
    pub stage1_attempts: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            robot_rrt: RrtConfig::default(),
            object_rrt: RrtConfig {
                resolution: 0.01,
                ..RrtConfig::default()
            },
            clearance: 0.01,
            robot_speed: 0.5,
            grid_dt: 0.1,
            object_speed: 0.1,
            angular_weight: 0.5,
            object_spacing: 0.01,
            pregrasp_offset: 0.1,
            object_margin: 1.5,
            follow: FollowConfig::default(),
            blocked_radius: [0.1, 0.2],
            max_replans: 5,
            stage1_attempts: 3,
        }
    }
}

/// Serde helpers writing poses as `{q: [w, x, y, z], t: [x, y, z]}`.
mod quat_poses {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    pub struct QuatPose {
        q: [f64; 4],
        t: [f64; 3],
    }

    impl From<&Pose> for QuatPose {
        fn from(p: &Pose) -> Self {
            let q = p.quaternion();
            QuatPose {
                q: [q.w, q.i, q.j, q.k],
                t: [p.translation.x, p.translation.y, p.translation.z],
            }
        }
    }

    impl QuatPose {
        pub fn pose(&self) -> Result<Pose, String> {
            let q = nalgebra::Quaternion::new(self.q[0], self.q[1], self.q[2], self.q[3]);
            let n = q.norm();
            if !n.is_finite() || (n - 1.0).abs() > 1e-6 || self.t.iter().any(|v| !v.is_finite()) {
                return Err(format!("invalid pose quaternion {:?}", self.q));
            }
            Ok(Pose::from_quaternion(
                UnitQuaternion::from_quaternion(q),
                Vector3::from(self.t),
            ))
        }
    }

    pub fn serialize<S: Serializer>(poses: &[Pose], s: S) -> Result<S::Ok, S::Error> {
        let v: Vec<QuatPose> = poses.iter().map(QuatPose::from).collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Pose>, D::Error> {
        let v = Vec::<QuatPose>::deserialize(d)?;
        v.iter()
            .map(|q| q.pose().map_err(serde::de::Error::custom))
            .collect()
    }
}

/// Object poses marked infeasible, with a rejection radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockedPoseSet {
    #[serde(with = "quat_poses")]
    pub poses: Vec<Pose>,
    /// Meters, radians.
    pub radius: [f64; 2],
}

impl Default for BlockedPoseSet {
    fn default() -> Self {
        Self::new([0.1, 0.2])
    }
}

impl BlockedPoseSet {
    pub fn new(radius: [f64; 2]) -> Self {
        Self {
            poses: Vec::new(),
            radius,
        }
    }

    pub fn contains(&self, p: &Pose) -> bool {
        self.poses.iter().any(|b| {
            let (dt, dr) = b.distance(p);
            dt <= self.radius[0] && dr <= self.radius[1]
        })
    }

    /// Adds `p` unless an existing entry already covers it.
    pub fn insert(&mut self, p: Pose) -> bool {
        if self.contains(&p) {
            return false;
        }
        self.poses.push(p);
        true
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Collision world seen by the planner: static boxes plus the target object,
/// whose boxes are posed per query.
#[derive(Clone, Debug)]
pub struct World {
    pub floor: f64,
    pub statics: Vec<Obb>,
    static_aabbs: Vec<(Vector3<f64>, Vector3<f64>)>,
    /// Target boxes in the object frame.
    pub target_local: Vec<Obb>,
    pub target_id: u32,
    pub target_pose: Pose,
}

fn aabb_gap(
    a: &(Vector3<f64>, Vector3<f64>),
    b: &(Vector3<f64>, Vector3<f64>),
    clearance: f64,
) -> bool {
    (0..3).any(|k| a.0[k] > b.1[k] + clearance || b.0[k] > a.1[k] + clearance)
}

fn body_aabb(body: &RobotBody) -> (Vector3<f64>, Vector3<f64>) {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for b in body.boxes() {
        let (l, h) = b.aabb();
        lo = lo.inf(&l);
        hi = hi.sup(&h);
    }
    for s in &body.links {
        lo = lo.inf(&s.center.add_scalar(-s.radius));
        hi = hi.sup(&s.center.add_scalar(s.radius));
    }
    (lo, hi)
}

fn body_hits_box(body: &RobotBody, b: &Obb, clearance: f64, gripper: Option<f64>) -> bool {
    b.intersects(&body.base, clearance)
        || body.links.iter().any(|l| b.intersects_sphere(l, clearance))
        || gripper.is_some_and(|c| body.gripper.iter().any(|g| g.intersects(b, c)))
}

/// Whether two robot bodies come within `clearance`.
pub fn bodies_collide(a: &RobotBody, b: &RobotBody, clearance: f64) -> bool {
    if aabb_gap(&body_aabb(a), &body_aabb(b), clearance) {
        return false;
    }
    for ba in a.boxes() {
        if b.boxes().any(|bb| ba.intersects(bb, clearance))
            || b.links.iter().any(|s| ba.intersects_sphere(s, clearance))
        {
            return true;
        }
    }
    a.links.iter().any(|sa| {
        b.boxes().any(|bb| bb.intersects_sphere(sa, clearance))
            || b.links.iter().any(|sb| sa.intersects(sb, clearance))
    })
}

impl World {
    pub fn new(scene: &Scene, target_id: u32) -> Result<Self, PlanError> {
        let target = scene
            .object(target_id)
            .map_err(|e| PlanError::Precondition(e.to_string()))?;
        let statics: Vec<Obb> = scene
            .objects
            .iter()
            .filter(|o| o.id != target_id)
            .flat_map(|o| o.world_shapes())
            .collect();
        let static_aabbs = statics.iter().map(|b| b.aabb()).collect();
        Ok(World {
            floor: scene.floor_height,
            statics,
            static_aabbs,
            target_local: target.shapes.clone(),
            target_id,
            target_pose: target.pose,
        })
    }

    pub fn target_boxes(&self, pose: &Pose) -> Vec<Obb> {
        self.target_local
            .iter()
            .map(|b| b.transformed(pose))
            .collect()
    }

    /// Robot body against the floor, the static boxes and the posed target.
    /// `gripper_target` is the gripper-vs-target clearance, `None` to skip it
    /// (the object is held).
    pub fn robot_hits(
        &self,
        body: &RobotBody,
        clearance: f64,
        target: &[Obb],
        gripper_target: Option<f64>,
    ) -> bool {
        if body
            .links
            .iter()
            .any(|s| s.center.z - s.radius < self.floor + clearance)
            || body
                .gripper
                .iter()
                .any(|b| b.min_z() < self.floor + clearance)
        {
            return true;
        }
        let bb = body_aabb(body);
        for (b, ab) in self.statics.iter().zip(&self.static_aabbs) {
            if !aabb_gap(&bb, ab, clearance) && body_hits_box(body, b, clearance, Some(clearance)) {
                return true;
            }
        }
        target.iter().any(|b| {
            b.intersects(&body.base, clearance)
                || body.links.iter().any(|l| b.intersects_sphere(l, clearance))
                || gripper_target.is_some_and(|c| body.gripper.iter().any(|g| g.intersects(b, c)))
        })
    }

    /// Object at `pose` against static boxes; resting on the floor is allowed.
    pub fn object_hits(&self, pose: &Pose, clearance: f64) -> bool {
        let boxes = self.target_boxes(pose);
        if boxes.iter().any(|b| b.min_z() < self.floor - 1e-6) {
            return true;
        }
        boxes.iter().any(|b| {
            let ab = b.aabb();
            self.statics
                .iter()
                .zip(&self.static_aabbs)
                .any(|(s, sb)| !aabb_gap(&ab, sb, clearance) && s.intersects(b, clearance))
        })
    }
}

/// State space searched by [`rrt_star`].
pub trait SearchSpace {
    fn dim(&self) -> usize;
    /// Lebesgue measure of the sampled region (for the rewiring radius).
    fn measure(&self) -> f64;
    fn sample(&self, rng: &mut StageRng) -> Vec<f64>;
    fn distance(&self, a: &[f64], b: &[f64]) -> f64;
    fn interpolate(&self, a: &[f64], b: &[f64], s: f64) -> Vec<f64>;
    /// Validity of state `x` reached after path length `arc`.
    fn valid(&self, x: &[f64], arc: f64) -> bool;
}

pub fn edge_valid<S: SearchSpace + ?Sized>(
    space: &S,
    a: &[f64],
    b: &[f64],
    arc: f64,
    resolution: f64,
) -> bool {
    let d = space.distance(a, b);
    let n = ((d / resolution).ceil() as usize).max(1);
    (1..=n).all(|k| {
        let s = k as f64 / n as f64;
        space.valid(&space.interpolate(a, b, s), arc + d * s)
    })
}

/// Whole-path validity, including the start state.
pub fn path_valid<S: SearchSpace + ?Sized>(space: &S, path: &[Vec<f64>], resolution: f64) -> bool {
    let Some(first) = path.first() else {
        return false;
    };
    if !space.valid(first, 0.0) {
        return false;
    }
    let mut arc = 0.0;
    for w in path.windows(2) {
        if !edge_valid(space, &w[0], &w[1], arc, resolution) {
            return false;
        }
        arc += space.distance(&w[0], &w[1]);
    }
    true
}

fn unit_ball_volume(d: usize) -> f64 {
    let mut v = [1.0, 2.0];
    for k in 2..=d {
        v[k % 2] *= 2.0 * PI / k as f64;
    }
    v[d % 2]
}

#[derive(Clone, Debug)]
pub struct RrtSolution {
    pub path: Vec<Vec<f64>>,
    pub cost: f64,
    pub iterations: usize,
    pub nodes: usize,
}

struct Node {
    x: Vec<f64>,
    parent: Option<usize>,
    cost: f64,
}

/// RRT* with goal biasing, choose-parent and rewiring. The near radius is the
/// shrinking-ball radius capped at twice the step; the nearest node is always
/// a parent candidate.
pub fn rrt_star<S: SearchSpace + ?Sized>(
    space: &S,
    start: &[f64],
    goal: &[f64],
    cfg: &RrtConfig,
    rng: &mut StageRng,
) -> Option<RrtSolution> {
    if !space.valid(start, 0.0) {
        return None;
    }
    if space.distance(start, goal) < 1e-12 {
        return Some(RrtSolution {
            path: vec![start.to_vec()],
            cost: 0.0,
            iterations: 0,
            nodes: 1,
        });
    }
    let d = space.dim();
    let df = d as f64;
    let gamma = 2.0
        * (1.0 + 1.0 / df).powf(1.0 / df)
        * (space.measure() / unit_ball_volume(d)).powf(1.0 / df);
    let mut nodes = vec![Node {
        x: start.to_vec(),
        parent: None,
        cost: 0.0,
    }];
    let mut children: Vec<Vec<usize>> = vec![Vec::new()];
    let mut goal_links: Vec<usize> = Vec::new();
    let mut solved_at: Option<usize> = None;
    let mut iterations = 0;
    for it in 0..cfg.max_iterations {
        if solved_at.is_some_and(|s| it >= s + cfg.refine_iterations) {
            break;
        }
        iterations = it + 1;
        let target = if rng.random::<f64>() < cfg.goal_bias {
            goal.to_vec()
        } else {
            space.sample(rng)
        };
        let n = nodes.len() as f64 + 1.0;
        let radius = (gamma * (n.ln() / n).powf(1.0 / df)).min(2.0 * cfg.step);
        let (nearest, dn) = nodes
            .iter()
            .enumerate()
            .map(|(i, nd)| (i, space.distance(&nd.x, &target)))
            .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
        if dn < 1e-12 {
            continue;
        }
        let new = if dn > cfg.step {
            space.interpolate(&nodes[nearest].x, &target, cfg.step / dn)
        } else {
            target
        };
        let mut near: Vec<(usize, f64)> = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, nd)| {
                let dist = space.distance(&nd.x, &new);
                (dist <= radius || i == nearest).then_some((i, dist))
            })
            .collect();
        near.sort_by(|a, b| {
            (nodes[a.0].cost + a.1)
                .total_cmp(&(nodes[b.0].cost + b.1))
                .then(a.0.cmp(&b.0))
        });
        let Some(&(parent, pd)) = near.iter().find(|(i, dist)| {
            *dist > 1e-12 && edge_valid(space, &nodes[*i].x, &new, nodes[*i].cost, cfg.resolution)
        }) else {
            continue;
        };
        let new_cost = nodes[parent].cost + pd;
        let idx = nodes.len();
        nodes.push(Node {
            x: new.clone(),
            parent: Some(parent),
            cost: new_cost,
        });
        children.push(Vec::new());
        children[parent].push(idx);

        for &(j, dist) in &near {
            if j == parent || nodes[j].parent.is_none() || dist < 1e-12 {
                continue;
            }
            let c = new_cost + dist;
            if c + 1e-12 < nodes[j].cost
                && edge_valid(space, &new, &nodes[j].x, new_cost, cfg.resolution)
            {
                let old = nodes[j].parent.unwrap();
                children[old].retain(|&k| k != j);
                children[idx].push(j);
                nodes[j].parent = Some(idx);
                let delta = c - nodes[j].cost;
                let mut stack = vec![j];
                while let Some(k) = stack.pop() {
                    nodes[k].cost += delta;
                    stack.extend(children[k].iter().copied());
                }
            }
        }

        let dg = space.distance(&new, goal);
        if dg <= cfg.step && (dg < 1e-12 || edge_valid(space, &new, goal, new_cost, cfg.resolution))
        {
            goal_links.push(idx);
            solved_at.get_or_insert(it);
        }
    }
    let best = goal_links
        .iter()
        .map(|&i| (i, nodes[i].cost + space.distance(&nodes[i].x, goal)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))?;
    let mut path = Vec::new();
    let mut k = Some(best.0);
    while let Some(i) = k {
        path.push(nodes[i].x.clone());
        k = nodes[i].parent;
    }
    path.reverse();
    if space.distance(path.last().unwrap(), goal) > 1e-12 {
        path.push(goal.to_vec());
    } else {
        *path.last_mut().unwrap() = goal.to_vec();
    }
    Some(RrtSolution {
        path,
        cost: best.1,
        iterations,
        nodes: nodes.len(),
    })
}

/// Random shortcutting. Accepted shortcuts are checked with the arc length
/// at their start; time-dependent spaces must re-validate the result.
pub fn shortcut<S: SearchSpace + ?Sized>(
    space: &S,
    mut path: Vec<Vec<f64>>,
    attempts: usize,
    resolution: f64,
    rng: &mut StageRng,
) -> Vec<Vec<f64>> {
    for _ in 0..attempts {
        if path.len() < 3 {
            break;
        }
        let i = rng.random_range(0..path.len() - 2);
        let j = rng.random_range(i + 2..path.len());
        let arc: f64 = path[..=i]
            .windows(2)
            .map(|w| space.distance(&w[0], &w[1]))
            .sum();
        if edge_valid(space, &path[i], &path[j], arc, resolution) {
            path.drain(i + 1..j);
        }
    }
    path
}

/// Piecewise-linear configuration path over time; held at its ends.
#[derive(Clone, Debug)]
pub struct TimedPath {
    pub times: Vec<f64>,
    pub configs: Vec<Configuration>,
}

impl TimedPath {
    /// Times proportional to arc length at `speed`.
    pub fn from_waypoints(configs: Vec<Configuration>, speed: f64) -> Self {
        let mut times = vec![0.0];
        for w in configs.windows(2) {
            times.push(times.last().unwrap() + w[0].distance(&w[1]) / speed);
        }
        TimedPath { times, configs }
    }

    pub fn duration(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    pub fn at(&self, t: f64) -> Configuration {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.configs[0].clone();
        }
        if t >= self.times[n - 1] {
            return self.configs[n - 1].clone();
        }
        let k = self.times.partition_point(|&x| x <= t).clamp(1, n - 1);
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let s = if t1 > t0 { (t - t0) / (t1 - t0) } else { 1.0 };
        self.configs[k - 1].interpolate(&self.configs[k], s)
    }
}

struct RobotSpace<'a> {
    robot: &'a RobotModel,
    world: &'a World,
    target: Vec<Obb>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    clearance: f64,
    gripper_target: f64,
    fixed: Vec<RobotBody>,
    moving: Vec<(&'a RobotModel, &'a TimedPath)>,
    speed: f64,
    /// Arc length already travelled before this space's paths begin.
    arc_offset: f64,
}

impl RobotSpace<'_> {
    fn config_valid(&self, q: &Configuration, t: f64) -> bool {
        if !self.robot.within_limits(q) {
            return false;
        }
        let Ok(body) = self.robot.body(q) else {
            return false;
        };
        if self.world.robot_hits(
            &body,
            self.clearance,
            &self.target,
            Some(self.gripper_target),
        ) {
            return false;
        }
        if self
            .fixed
            .iter()
            .any(|b| bodies_collide(&body, b, self.clearance))
        {
            return false;
        }
        self.moving.iter().all(|(m, p)| match m.body(&p.at(t)) {
            Ok(b) => !bodies_collide(&body, &b, self.clearance),
            Err(_) => false,
        })
    }
}

impl SearchSpace for RobotSpace<'_> {
    fn dim(&self) -> usize {
        self.lo.len()
    }

    fn measure(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| (h - l).max(1e-6))
            .product()
    }

    fn sample(&self, rng: &mut StageRng) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| if h > l { rng.random_range(*l..*h) } else { *l })
            .collect()
    }

    fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    fn interpolate(&self, a: &[f64], b: &[f64], s: f64) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + (y - x) * s).collect()
    }

    fn valid(&self, x: &[f64], arc: f64) -> bool {
        self.config_valid(
            &Configuration::new(x.to_vec()),
            (arc + self.arc_offset) / self.speed,
        )
    }
}

/// A robot space restricted to some coordinates; the others stay at `full`.
struct Restricted<'a, 'b> {
    space: &'a RobotSpace<'b>,
    dims: Vec<usize>,
    full: Vec<f64>,
    arc_offset: f64,
}

impl Restricted<'_, '_> {
    fn lift(&self, x: &[f64]) -> Vec<f64> {
        let mut q = self.full.clone();
        for (&d, v) in self.dims.iter().zip(x) {
            q[d] = *v;
        }
        q
    }

    fn project(&self, q: &[f64]) -> Vec<f64> {
        self.dims.iter().map(|&d| q[d]).collect()
    }
}

impl SearchSpace for Restricted<'_, '_> {
    fn dim(&self) -> usize {
        self.dims.len()
    }

    fn measure(&self) -> f64 {
        self.dims
            .iter()
            .map(|&d| (self.space.hi[d] - self.space.lo[d]).max(1e-6))
            .product()
    }

    fn sample(&self, rng: &mut StageRng) -> Vec<f64> {
        self.dims
            .iter()
            .map(|&d| {
                let (l, h) = (self.space.lo[d], self.space.hi[d]);
                if h > l {
                    rng.random_range(l..h)
                } else {
                    l
                }
            })
            .collect()
    }

    fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        self.space.distance(a, b)
    }

    fn interpolate(&self, a: &[f64], b: &[f64], s: f64) -> Vec<f64> {
        self.space.interpolate(a, b, s)
    }

    fn valid(&self, x: &[f64], arc: f64) -> bool {
        self.space.valid(&self.lift(x), arc + self.arc_offset)
    }
}

/// Straight line if free, RRT* otherwise; the path is lifted to full
/// configurations.
fn connect(
    sub: &Restricted,
    from: &[f64],
    to: &[f64],
    cfg: &RrtConfig,
    rng: &mut StageRng,
) -> Option<Vec<Vec<f64>>> {
    let (a, b) = (sub.project(from), sub.project(to));
    let path = if edge_valid(sub, &a, &b, 0.0, cfg.resolution) {
        vec![a, b]
    } else {
        // A tree grown from a cramped goal often finds the way out when one
        // grown towards it does not. Validity is timed, so recheck forwards.
        let sol = match rrt_star(sub, &a, &b, cfg, rng) {
            Some(sol) => sol.path,
            None => {
                let mut path = rrt_star(sub, &b, &a, cfg, rng)?.path;
                path.reverse();
                if !path_valid(sub, &path, cfg.resolution) {
                    return None;
                }
                path
            }
        };
        shortcut(sub, sol, cfg.shortcut_attempts, cfg.resolution, rng)
    };
    Some(path.iter().map(|x| sub.lift(x)).collect())
}

/// Drive the base with the arm in its initial posture, then move the arm
/// with the base parked.
fn drive_then_reach(
    space: &RobotSpace,
    start: &[f64],
    goal: &[f64],
    cfg: &RrtConfig,
    rng: &mut StageRng,
) -> Option<Vec<Vec<f64>>> {
    let n = start.len();
    let mut parked = goal[..3].to_vec();
    parked.extend_from_slice(&start[3..]);
    let base = Restricted {
        space,
        dims: vec![0, 1, 2],
        full: start.to_vec(),
        arc_offset: 0.0,
    };
    let mut path = connect(&base, start, &parked, cfg, rng)?;
    let arc: f64 = path.windows(2).map(|w| space.distance(&w[0], &w[1])).sum();
    let arm = Restricted {
        space,
        dims: (3..n).collect(),
        full: parked.clone(),
        arc_offset: arc,
    };
    let reach = connect(&arm, &parked, goal, cfg, rng)?;
    path.extend(reach.into_iter().skip(1));
    path.dedup_by(|a, b| space.distance(a, b) < 1e-12);
    Some(path)
}

/// Result of stage 1 on the shared time grid.
#[derive(Clone, Debug)]
pub struct Stage1Plan {
    pub times: Vec<f64>,
    pub paths: Vec<Vec<Configuration>>,
    pub grasp_configs: Vec<Configuration>,
    pub pregrasp_configs: Vec<Configuration>,
    /// Per-robot waypoint paths with their own timing.
    pub timed: Vec<TimedPath>,
}

fn arm_seed(robot: &RobotModel, approach: &Vector3<f64>, roll: f64) -> Vec<f64> {
    let mut arm = vec![0.0; robot.joints.len()];
    if arm.len() == 6 {
        let pitch = approach.z.clamp(-1.0, 1.0).acos();
        arm[1] = 0.5;
        arm[2] = 1.2;
        arm[4] = (pitch - 1.7).clamp(-2.0, 2.0);
        arm[5] = roll;
    }
    arm
}

/// Clearance a preferred stance keeps from the scene at the goal.
const GOAL_STANCE_MARGIN: f64 = 0.1;

/// Collision-free grasp and pre-grasp configurations. Bases are seeded at a
/// few standoffs behind the grasp, facing along the horizontal approach.
/// With an upright `goal` for the object, a stance whose base stays clear of
/// the static scene when carried to the goal is preferred.
#[allow(clippy::too_many_arguments)]
pub fn grasp_configuration(
    robot: &RobotModel,
    grasp: &Pose,
    world: &World,
    blockers: &[RobotBody],
    clearance: f64,
    pregrasp_offset: f64,
    resolution: f64,
    goal: Option<&Pose>,
) -> Option<(Configuration, Configuration)> {
    let target = world.target_boxes(&world.target_pose);
    let v = grasp.axis(2);
    let mut dir = Vector3::new(v.x, v.y, 0.0);
    if dir.norm() < 0.2 {
        let c = world.target_pose.translation;
        dir = Vector3::new(grasp.translation.x - c.x, grasp.translation.y - c.y, 0.0) * -1.0;
        if dir.norm() < 1e-6 {
            dir = Vector3::x();
        }
    }
    dir.normalize_mut();
    let pre = Pose::new(grasp.rotation, grasp.translation - v * pregrasp_offset);
    let opts = IkOptions::default();
    let ok = |q: &Configuration, gripper: f64| -> bool {
        robot.within_limits(q)
            && robot.body(q).is_ok_and(|b| {
                !world.robot_hits(&b, clearance, &target, Some(gripper))
                    && !blockers.iter().any(|o| bodies_collide(&b, o, clearance))
            })
    };
    let goal = goal.filter(|g| g.axis(2).z > 0.2f64.cos());
    let goal_target = goal.map(|g| world.target_boxes(g)).unwrap_or_default();
    let clear_at_goal = |q: &Configuration, margin: f64| -> bool {
        let Some(g) = goal else {
            return true;
        };
        let moved = carried(q, &world.target_pose, g);
        robot.within_limits(&moved)
            && robot
                .body(&moved)
                .is_ok_and(|b| !world.robot_hits(&b, margin, &goal_target, Some(0.0)))
    };
    let mut stances = Vec::new();
    for standoff in [0.7, 0.55, 0.85, 0.45, 1.0] {
        for dyaw in [0.0, 0.4, -0.4, 0.8, -0.8] {
            let d = Rotation3::from_axis_angle(&Vector3::z_axis(), dyaw) * dir;
            let base = grasp.translation - d * standoff;
            let heading = d.y.atan2(d.x);
            for roll in [0.0, PI / 2.0, -PI / 2.0] {
                let mut seed = vec![base.x, base.y, heading];
                seed.extend(arm_seed(robot, &v, roll));
                let seed = Configuration::new(seed);
                let Ok(q) = inverse_kinematics(robot, grasp, &seed, &opts) else {
                    continue;
                };
                if !ok(&q, 0.0) {
                    continue;
                }
                let Ok(q_pre) = inverse_kinematics(robot, &pre, &q, &opts) else {
                    continue;
                };
                if !ok(&q_pre, clearance) {
                    continue;
                }
                let d = q.distance(&q_pre);
                let n = ((d / resolution).ceil() as usize).max(1);
                if (1..n).all(|k| ok(&q_pre.interpolate(&q, k as f64 / n as f64), 0.0)) {
                    if goal.is_none() {
                        return Some((q_pre, q));
                    }
                    stances.push((q_pre, q));
                }
            }
        }
    }
    let pick = [GOAL_STANCE_MARGIN, clearance]
        .iter()
        .find_map(|&m| stances.iter().position(|(_, q)| clear_at_goal(q, m)))
        .unwrap_or(0);
    (!stances.is_empty()).then(|| stances.swap_remove(pick))
}

fn sampling_bounds(
    robot: &RobotModel,
    a: &Configuration,
    b: &Configuration,
) -> (Vec<f64>, Vec<f64>) {
    let limits = robot.limits();
    let mut lo = Vec::with_capacity(limits.len());
    let mut hi = Vec::with_capacity(limits.len());
    for (k, l) in limits.iter().enumerate() {
        let (x, y) = (a.values[k], b.values[k]);
        let margin = match k {
            0 | 1 => 1.5,
            2 => PI,
            _ => f64::INFINITY,
        };
        lo.push((x.min(y) - margin).max(l[0]));
        hi.push((x.max(y) + margin).min(l[1]));
    }
    (lo, hi)
}

/// Shared grid: uniform `dt` steps plus every waypoint time.
fn shared_grid(paths: &[TimedPath], dt: f64) -> Vec<f64> {
    let end = paths.iter().map(TimedPath::duration).fold(0.0, f64::max);
    let mut times: Vec<f64> = (0..)
        .map(|k| k as f64 * dt)
        .take_while(|t| *t < end)
        .chain(paths.iter().flat_map(|p| p.times.iter().copied()))
        .chain(std::iter::once(end))
        .collect();
    times.sort_by(f64::total_cmp);
    times.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    times
}

/// Prioritized stage-1 planning: each robot goes to its pre-grasp with RRT*
/// and then straight in to its grasp.
pub fn plan_to_grasps(
    world: &World,
    robots: &[RobotModel],
    initial: &[Configuration],
    grasps: &[Pose],
    goal: Option<&Pose>,
    seed: u64,
    cfg: &PlannerConfig,
) -> Result<Stage1Plan, PlanError> {
    if robots.len() != initial.len() || robots.len() != grasps.len() || robots.is_empty() {
        return Err(PlanError::Precondition(format!(
            "{} robots, {} initial configurations, {} grasps",
            robots.len(),
            initial.len(),
            grasps.len()
        )));
    }
    for (i, (r, q)) in robots.iter().zip(initial).enumerate() {
        if !r.within_limits(q) {
            return Err(PlanError::Precondition(format!(
                "robot {i}: initial configuration invalid"
            )));
        }
    }
    let seeds = SeedStream::new(seed);
    let target = world.target_boxes(&world.target_pose);
    let mut timed: Vec<TimedPath> = Vec::new();
    let mut grasp_configs = Vec::new();
    let mut pregrasp_configs = Vec::new();
    for i in 0..robots.len() {
        let robot = &robots[i];
        let initial_bodies: Vec<RobotBody> = (i + 1..robots.len())
            .filter_map(|j| robots[j].body(&initial[j]).ok())
            .collect();
        let final_bodies: Vec<RobotBody> = (0..i)
            .filter_map(|j| robots[j].body(timed[j].configs.last().unwrap()).ok())
            .collect();
        let blockers: Vec<RobotBody> = initial_bodies
            .iter()
            .chain(&final_bodies)
            .cloned()
            .collect();
        let (q_pre, q_grasp) = grasp_configuration(
            robot,
            &grasps[i],
            world,
            &blockers,
            cfg.clearance,
            cfg.pregrasp_offset,
            cfg.robot_rrt.resolution,
            goal,
        )
        .ok_or(PlanError::GraspUnreachable { robot: i })?;
        let (lo, hi) = sampling_bounds(robot, &initial[i], &q_pre);
        let moving: Vec<(&RobotModel, &TimedPath)> =
            (0..i).map(|j| (&robots[j], &timed[j])).collect();
        let space = RobotSpace {
            robot,
            world,
            target: target.clone(),
            lo,
            hi,
            clearance: cfg.clearance,
            gripper_target: cfg.clearance,
            fixed: initial_bodies.clone(),
            moving: moving.clone(),
            speed: cfg.robot_speed,
            arc_offset: 0.0,
        };
        if !space.valid(&initial[i].values, 0.0) {
            return Err(PlanError::Stage1Infeasible {
                robot: i,
                reason: "initial configuration in collision".into(),
            });
        }
        // Failing that, the robot waits at its start until the others have arrived.
        let last_arrival = timed.iter().map(TimedPath::duration).fold(0.0, f64::max);
        let delays = if last_arrival > 0.0 {
            vec![0.0, last_arrival]
        } else {
            vec![0.0]
        };
        let mut found = None;
        'delays: for &delay in &delays {
            let space = RobotSpace {
                arc_offset: delay * cfg.robot_speed,
                lo: space.lo.clone(),
                hi: space.hi.clone(),
                target: target.clone(),
                fixed: initial_bodies.clone(),
                moving: moving.clone(),
                ..space
            };
            for attempt in 0..=cfg.stage1_attempts.max(1) {
                let candidates = if attempt == 0 {
                    let mut rng = seeds.rng(&format!("stage1/robot{i}/decomposed"));
                    match drive_then_reach(
                        &space,
                        &initial[i].values,
                        &q_pre.values,
                        &cfg.robot_rrt,
                        &mut rng,
                    ) {
                        Some(p) => vec![p],
                        None => continue,
                    }
                } else {
                    let mut rng = seeds.rng(&format!("stage1/robot{i}/attempt{}", attempt - 1));
                    let Some(sol) = rrt_star(
                        &space,
                        &initial[i].values,
                        &q_pre.values,
                        &cfg.robot_rrt,
                        &mut rng,
                    ) else {
                        continue;
                    };
                    let short = shortcut(
                        &space,
                        sol.path.clone(),
                        cfg.robot_rrt.shortcut_attempts,
                        cfg.robot_rrt.resolution,
                        &mut rng,
                    );
                    vec![short, sol.path]
                };
                for path in candidates {
                    let arc: f64 = path.windows(2).map(|w| space.distance(&w[0], &w[1])).sum();
                    let approach = RobotSpace {
                        gripper_target: 0.0,
                        arc_offset: space.arc_offset + arc,
                        lo: space.lo.clone(),
                        hi: space.hi.clone(),
                        target: target.clone(),
                        fixed: initial_bodies.clone(),
                        moving: moving.clone(),
                        ..space
                    };
                    if path_valid(&space, &path, cfg.robot_rrt.resolution)
                        && edge_valid(
                            &approach,
                            &q_pre.values,
                            &q_grasp.values,
                            0.0,
                            cfg.robot_rrt.resolution,
                        )
                    {
                        found = Some((delay, path));
                        break 'delays;
                    }
                }
            }
        }
        let (delay, path) = found.ok_or_else(|| PlanError::Stage1Infeasible {
            robot: i,
            reason: format!(
                "RRT* found no path within {} iterations ({} attempts)",
                cfg.robot_rrt.max_iterations, cfg.stage1_attempts
            ),
        })?;
        let mut configs: Vec<Configuration> = path.into_iter().map(Configuration::new).collect();
        if configs.last().unwrap().distance(&q_grasp) > 1e-12 {
            configs.push(q_grasp.clone());
        }
        let mut path = TimedPath::from_waypoints(configs, cfg.robot_speed);
        if delay > 0.0 {
            path.times.iter_mut().for_each(|t| *t += delay);
            path.times.insert(0, 0.0);
            path.configs.insert(0, path.configs[0].clone());
        }
        timed.push(path);
        grasp_configs.push(q_grasp);
        pregrasp_configs.push(q_pre);
    }
    let times = shared_grid(&timed, cfg.grid_dt);
    let paths = timed
        .iter()
        .map(|p| times.iter().map(|&t| p.at(t)).collect())
        .collect();
    Ok(Stage1Plan {
        times,
        paths,
        grasp_configs,
        pregrasp_configs,
        timed,
    })
}

#[derive(Clone, Debug)]
enum Rotations {
    /// `R(θ) = Rot(axis, θ) · base`.
    Axis {
        axis: Unit<Vector3<f64>>,
        base: Rotation3<f64>,
    },
    Free,
}

struct ObjectSpace<'a> {
    world: &'a World,
    task: &'a Task,
    blocked: &'a BlockedPoseSet,
    rot: Rotations,
    lo: [f64; 4],
    hi: [f64; 4],
    angular_weight: f64,
    clearance: f64,
    exempt: [Vec<f64>; 2],
}

impl ObjectSpace<'_> {
    fn pose(&self, x: &[f64]) -> Pose {
        let t = Vector3::new(x[0], x[1], x[2]);
        match &self.rot {
            Rotations::Axis { axis, base } => {
                Pose::new(Rotation3::from_axis_angle(axis, x[3]) * base, t)
            }
            Rotations::Free => Pose::from_quaternion(
                UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(x[3], x[4], x[5], x[6])),
                t,
            ),
        }
    }

    fn pose_valid(&self, p: &Pose) -> bool {
        self.task.satisfied_at(p) && !self.world.object_hits(p, self.clearance)
    }
}

fn quat_of(x: &[f64]) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(x[3], x[4], x[5], x[6]))
}

impl SearchSpace for ObjectSpace<'_> {
    fn dim(&self) -> usize {
        match self.rot {
            Rotations::Axis { .. } => 4,
            Rotations::Free => 6,
        }
    }

    fn measure(&self) -> f64 {
        let v: f64 = (0..3)
            .map(|k| (self.hi[k] - self.lo[k]).max(1e-3))
            .product();
        match self.rot {
            Rotations::Axis { .. } => {
                v * ((self.hi[3] - self.lo[3]) * self.angular_weight).max(1e-3)
            }
            Rotations::Free => v * (PI * self.angular_weight).powi(3),
        }
    }

    fn sample(&self, rng: &mut StageRng) -> Vec<f64> {
        let mut x: Vec<f64> = (0..3)
            .map(|k| {
                if self.hi[k] > self.lo[k] {
                    rng.random_range(self.lo[k]..self.hi[k])
                } else {
                    self.lo[k]
                }
            })
            .collect();
        match self.rot {
            Rotations::Axis { .. } => x.push(rng.random_range(self.lo[3]..self.hi[3])),
            Rotations::Free => {
                let q = UnitQuaternion::from_rotation_matrix(&random_rotation(rng));
                x.extend([q.w, q.i, q.j, q.k]);
            }
        }
        x
    }

    fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let dt = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
        let dr = match self.rot {
            Rotations::Axis { .. } => (a[3] - b[3]).abs(),
            Rotations::Free => quat_of(a).angle_to(&quat_of(b)),
        };
        dt + self.angular_weight * dr
    }

    fn interpolate(&self, a: &[f64], b: &[f64], s: f64) -> Vec<f64> {
        match self.rot {
            Rotations::Axis { .. } => a.iter().zip(b).map(|(x, y)| x + (y - x) * s).collect(),
            Rotations::Free => {
                let (qa, qb) = (quat_of(a), quat_of(b));
                let q = qa
                    .try_slerp(&qb, s, 1e-12)
                    .unwrap_or(if s < 0.5 { qa } else { qb });
                vec![
                    a[0] + (b[0] - a[0]) * s,
                    a[1] + (b[1] - a[1]) * s,
                    a[2] + (b[2] - a[2]) * s,
                    q.w,
                    q.i,
                    q.j,
                    q.k,
                ]
            }
        }
    }

    fn valid(&self, x: &[f64], _arc: f64) -> bool {
        if (0..3).any(|k| x[k] < self.lo[k] - 1e-9 || x[k] > self.hi[k] + 1e-9) {
            return false;
        }
        let p = self.pose(x);
        if !self.pose_valid(&p) {
            return false;
        }
        let exempt = self.exempt.iter().any(|e| self.distance(e, x) < 1e-9);
        exempt || !self.blocked.contains(&p)
    }
}

/// Object poses from `p_init` to `p_end`, sampled at most `object_spacing`
/// apart. Axis-alignment constraints restrict rotation to the constrained
/// world axis; height bands and workspace boxes bound the sampler.
pub fn plan_object_path(
    task: &Task,
    world: &World,
    blocked: &BlockedPoseSet,
    seed: u64,
    cfg: &PlannerConfig,
) -> Result<Vec<Pose>, PlanError> {
    task.validate()
        .map_err(|e| PlanError::Precondition(e.to_string()))?;
    let (start, goal) = (task.p_init, task.p_end);
    if !task.satisfied_at(&start) {
        return Err(PlanError::Precondition(
            "p_init violates a motion constraint".into(),
        ));
    }
    if !task.satisfied_at(&goal) {
        return Err(PlanError::Precondition(
            "p_end violates a motion constraint".into(),
        ));
    }
    let (dt, dr) = start.distance(&goal);
    if dt < 1e-12 && dr < 1e-12 {
        return Ok(vec![start]);
    }
    let axis = task.constraints.iter().find_map(|c| match c {
        MotionConstraint::AxisAlignment { world_axis, .. } => {
            Some(Unit::new_normalize(Vector3::from(*world_axis)))
        }
        _ => None,
    });
    let (rot, theta_goal, tail) = match axis {
        Some(axis) => {
            let delta = rotation_log(&(goal.rotation * start.rotation.inverse()));
            let theta = delta.dot(&axis);
            let reduced = Rotation3::from_axis_angle(&axis, theta) * start.rotation;
            let residual =
                UnitQuaternion::from_rotation_matrix(&(reduced.inverse() * goal.rotation)).angle();
            // A residual tilt within tolerance is closed by a final slerp.
            let tail = (residual > 1e-9).then(|| Pose::new(reduced, goal.translation));
            (
                Rotations::Axis {
                    axis,
                    base: start.rotation,
                },
                theta,
                tail,
            )
        }
        None => (Rotations::Free, 0.0, None),
    };
    let m = cfg.object_margin;
    let mut lo = [
        start.translation.x.min(goal.translation.x) - m,
        start.translation.y.min(goal.translation.y) - m,
        start.translation.z.min(goal.translation.z),
        theta_goal.min(0.0) - PI,
    ];
    let mut hi = [
        start.translation.x.max(goal.translation.x) + m,
        start.translation.y.max(goal.translation.y) + m,
        start.translation.z.max(goal.translation.z) + 0.3,
        theta_goal.max(0.0) + PI,
    ];
    for c in &task.constraints {
        match c {
            MotionConstraint::HeightBand { min, max } => {
                lo[2] = lo[2].max(*min);
                hi[2] = hi[2].min(*max);
            }
            MotionConstraint::WorkspaceBox { min, max } => {
                for k in 0..3 {
                    lo[k] = lo[k].max(min[k]);
                    hi[k] = hi[k].min(max[k]);
                }
            }
            MotionConstraint::AxisAlignment { .. } => {}
        }
    }
    let encode = |p: &Pose, theta: f64| -> Vec<f64> {
        let t = p.translation;
        match rot {
            Rotations::Axis { .. } => vec![t.x, t.y, t.z, theta],
            Rotations::Free => {
                let q = p.quaternion();
                vec![t.x, t.y, t.z, q.w, q.i, q.j, q.k]
            }
        }
    };
    let x_start = encode(&start, 0.0);
    let x_goal = match &tail {
        Some(p) => encode(p, theta_goal),
        None => {
            let mut g = encode(&goal, theta_goal);
            if let Rotations::Free = rot {
                // Same hemisphere as the start so slerp takes the short way.
                let (qs, qg) = (quat_of(&x_start), quat_of(&g));
                if qs.coords.dot(&qg.coords) < 0.0 {
                    for v in &mut g[3..] {
                        *v = -*v;
                    }
                }
            }
            g
        }
    };
    let space = ObjectSpace {
        world,
        task,
        blocked,
        rot: rot.clone(),
        lo,
        hi,
        angular_weight: cfg.angular_weight,
        clearance: cfg.clearance,
        exempt: [x_start.clone(), x_goal.clone()],
    };
    if !space.valid(&x_start, 0.0) {
        return Err(PlanError::ObjectPath(
            "start pose in collision or outside the constraint bounds".into(),
        ));
    }
    if !space.valid(&x_goal, 0.0) {
        return Err(PlanError::ObjectPath(
            "goal pose in collision or outside the constraint bounds".into(),
        ));
    }
    let mut rng = SeedStream::new(seed).rng("object-path");
    let sol = rrt_star(&space, &x_start, &x_goal, &cfg.object_rrt, &mut rng).ok_or_else(|| {
        PlanError::ObjectPath(format!(
            "RRT* found no object path within {} iterations",
            cfg.object_rrt.max_iterations
        ))
    })?;
    let path = shortcut(
        &space,
        sol.path,
        cfg.object_rrt.shortcut_attempts,
        cfg.object_rrt.resolution,
        &mut rng,
    );
    let mut poses = vec![start];
    for w in path.windows(2) {
        let d = space.distance(&w[0], &w[1]);
        let n = ((d / cfg.object_spacing).ceil() as usize).max(1);
        for k in 1..=n {
            poses.push(space.pose(&space.interpolate(&w[0], &w[1], k as f64 / n as f64)));
        }
    }
    if let Some(reduced) = tail {
        let (dt, dr) = reduced.distance(&goal);
        let n = (((dt + cfg.angular_weight * dr) / cfg.object_spacing).ceil() as usize).max(1);
        for k in 1..=n {
            let p = reduced.interpolate(&goal, k as f64 / n as f64);
            if !space.pose_valid(&p) {
                return Err(PlanError::Precondition(
                    "goal orientation is not reachable by rotating about the constrained axis"
                        .into(),
                ));
            }
            poses.push(p);
        }
    }
    *poses.last_mut().unwrap() = goal;
    Ok(poses)
}

/// Arc-length-proportional times starting at `t1`.
pub fn object_times(poses: &[Pose], t1: f64, cfg: &PlannerConfig) -> Vec<f64> {
    let mut times = vec![t1];
    for w in poses.windows(2) {
        let (dt, dr) = w[0].distance(&w[1]);
        times.push(times.last().unwrap() + (dt + cfg.angular_weight * dr) / cfg.object_speed);
    }
    times
}

/// Grasp offsets `F_i = p(t₁)⁻¹ · e_i(t₁)` and end-effector paths
/// `e_i(t) = p(t) · F_i`.
pub fn derive_ee_trajectories(
    object_poses: &[Pose],
    grasps: &[Pose],
) -> (Vec<Pose>, Vec<Vec<Pose>>) {
    let Some(p0) = object_poses.first() else {
        return (Vec::new(), vec![Vec::new(); grasps.len()]);
    };
    let inv = p0.inverse();
    let offsets: Vec<Pose> = grasps.iter().map(|e| inv.compose(e)).collect();
    let paths = offsets
        .iter()
        .map(|f| object_poses.iter().map(|p| p.compose(f)).collect())
        .collect();
    (offsets, paths)
}

#[derive(Clone, Debug)]
pub struct FollowOutcome {
    pub paths: Vec<Vec<Configuration>>,
    /// Sample indices where tracking or collision checks failed.
    pub failures: BTreeSet<usize>,
    pub max_position_error: f64,
    pub max_rotation_error: f64,
}

enum Obstacle<'a> {
    Box(&'a Obb),
    Ball(&'a Sphere),
}

impl Obstacle<'_> {
    /// Distance and closest point.
    fn query(&self, p: &Vector3<f64>) -> (f64, Vector3<f64>) {
        match self {
            Obstacle::Box(b) => (b.distance_to_point(p), b.closest_point(p)),
            Obstacle::Ball(s) => {
                let d = p - s.center;
                let n = d.norm();
                let c = if n > 1e-12 {
                    s.center + d * (s.radius / n)
                } else {
                    s.center
                };
                (n - s.radius, c)
            }
        }
    }
}

/// Control points on the robot: (point, radius, joints that move it).
fn control_points(
    robot: &RobotModel,
    f: &crate::kinematics::ChainFrames,
) -> Vec<(Vector3<f64>, f64, usize)> {
    let mut out = Vec::new();
    let r = robot.link_radius;
    for (j, pose) in f.joints.iter().enumerate().skip(1) {
        out.push((pose.translation, r, j + 1));
    }
    let n = robot.joints.len();
    out.push((f.flange.translation, r, n));
    out.push((f.tool.translation, robot.gripper.palm_width * 0.5, n));
    let hb = robot.base.half_extents;
    let centre = f.base.translation + Vector3::new(0.0, 0.0, robot.base.height * 0.5);
    out.push((centre, hb[0].hypot(hb[1]), 0));
    out
}

fn track_sample(
    robot: &RobotModel,
    q: &mut Configuration,
    target: &Pose,
    posture: &Configuration,
    obstacles: &[Obstacle],
    cfg: &FollowConfig,
) -> (f64, f64) {
    let dof = robot.dof();
    let n = robot.joints.len();
    let mut err_out = (f64::INFINITY, f64::INFINITY);
    for _ in 0..=cfg.max_iterations {
        let Ok(f) = robot.frames(q) else {
            break;
        };
        let err = pose_error(&f.tool, target);
        let (pe, re) = (err.fixed_rows::<3>(0).norm(), err.fixed_rows::<3>(3).norm());
        err_out = (pe, re);
        if pe < cfg.position_tolerance * 0.1 && re < cfg.rotation_tolerance * 0.1 {
            break;
        }
        let jac = robot.point_jacobian(&f, &f.tool.translation, n);
        let mut e = DVector::from_column_slice(err.as_slice());
        if pe > 0.05 {
            e.rows_mut(0, 3).scale_mut(0.05 / pe);
        }
        if re > 0.1 {
            e.rows_mut(3, 3).scale_mut(0.1 / re);
        }
        let mut dq = dls_step(&jac, &e, cfg.damping);
        let mut post = DVector::zeros(dof);
        for k in 3..dof {
            post[k] = cfg.posture_gain * (posture.values[k] - q.values[k]);
        }
        let jp = &jac * &post;
        dq += &post - dls_step(&jac, &jp, cfg.damping);

        for (p, r, last) in control_points(robot, &f) {
            let Some((d, c)) = obstacles
                .iter()
                .map(|o| o.query(&p))
                .min_by(|a, b| a.0.total_cmp(&b.0))
            else {
                continue;
            };
            let d = d - r;
            if d >= cfg.influence {
                continue;
            }
            let away = p - c;
            let nrm = away.norm();
            if nrm < 1e-9 {
                continue;
            }
            let nvec = away / nrm;
            let jp: DMatrix<f64> = robot.point_jacobian(&f, &p, last).rows(0, 3).into_owned();
            let jn = jp.transpose() * nvec;
            let jn2 = jn.norm_squared();
            if jn2 < 1e-12 {
                continue;
            }
            let v = jn.dot(&dq);
            let limit = -cfg.damper_gain * (d - cfg.safety) / (cfg.influence - cfg.safety);
            if v < limit {
                dq += &jn * ((limit - v) / jn2);
            }
        }
        for (v, d) in q.values.iter_mut().zip(dq.iter()) {
            *v += d;
        }
        robot.clamp(q);
    }
    err_out
}

/// `q` with its base moved by the planar part of the object motion `from → to`.
fn carried(q: &Configuration, from: &Pose, to: &Pose) -> Configuration {
    let dyaw = to.yaw() - from.yaw();
    let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), dyaw);
    let rel = Vector3::new(q.values[0], q.values[1], 0.0)
        - Vector3::new(from.translation.x, from.translation.y, 0.0);
    let base = rot * rel + Vector3::new(to.translation.x, to.translation.y, 0.0);
    let mut out = q.clone();
    out.values[0] = base.x;
    out.values[1] = base.y;
    out.values[2] += dyaw;
    out
}

/// Tracks the end-effector paths sample by sample. Failures are returned as
/// sample indices; tracking continues past them so every failing index is
/// reported.
pub fn follow_trajectory(
    robots: &[RobotModel],
    start: &[Configuration],
    ee_paths: &[Vec<Pose>],
    object_poses: &[Pose],
    world: &World,
    cfg: &FollowConfig,
) -> FollowOutcome {
    let m = robots.len();
    let samples = object_poses.len();
    let mut paths: Vec<Vec<Configuration>> = start.iter().map(|q| vec![q.clone()]).collect();
    let mut failures = BTreeSet::new();
    let (mut max_p, mut max_r) = (0.0f64, 0.0f64);
    let check = |k: usize, configs: &[&Configuration], failures: &mut BTreeSet<usize>| {
        let target = world.target_boxes(&object_poses[k]);
        let bodies: Vec<Option<RobotBody>> = robots
            .iter()
            .zip(configs)
            .map(|(r, q)| r.body(q).ok())
            .collect();
        let mut bad = bodies.iter().any(|b| match b {
            Some(b) => world.robot_hits(b, cfg.clearance, &target, None),
            None => true,
        });
        for i in 0..m {
            for j in i + 1..m {
                if let (Some(a), Some(b)) = (&bodies[i], &bodies[j]) {
                    bad |= bodies_collide(a, b, cfg.clearance);
                }
            }
        }
        if bad {
            failures.insert(k);
        }
    };
    if samples == 0 {
        return FollowOutcome {
            paths,
            failures,
            max_position_error: 0.0,
            max_rotation_error: 0.0,
        };
    }
    for i in 0..m {
        let e = robots[i]
            .forward_kinematics(&start[i])
            .map(|p| pose_error(&p, &ee_paths[i][0]))
            .ok();
        match e {
            Some(e) => {
                let (pe, re) = (e.fixed_rows::<3>(0).norm(), e.fixed_rows::<3>(3).norm());
                max_p = max_p.max(pe);
                max_r = max_r.max(re);
                if pe > cfg.position_tolerance || re > cfg.rotation_tolerance {
                    failures.insert(0);
                }
            }
            None => {
                failures.insert(0);
            }
        }
    }
    check(0, &start.iter().collect::<Vec<_>>(), &mut failures);
    for k in 1..samples {
        let recover = failures.contains(&(k - 1));
        for i in 0..m {
            let mut q = paths[i][k - 1].clone();
            if recover {
                // Restart from the stage-1 posture carried along with the
                // object, so one bad pose does not poison the rest.
                let seed = carried(&start[i], &object_poses[0], &object_poses[k]);
                q = inverse_kinematics(&robots[i], &ee_paths[i][k], &seed, &IkOptions::default())
                    .unwrap_or(seed);
            }
            let others: Vec<RobotBody> = (0..m)
                .filter(|&j| j != i)
                .filter_map(|j| {
                    robots[j]
                        .body(if j < i {
                            &paths[j][k]
                        } else {
                            &paths[j][k - 1]
                        })
                        .ok()
                })
                .collect();
            let mut obstacles: Vec<Obstacle> = world.statics.iter().map(Obstacle::Box).collect();
            for b in &others {
                obstacles.extend(b.boxes().map(Obstacle::Box));
                obstacles.extend(b.links.iter().map(Obstacle::Ball));
            }
            let (pe, re) = track_sample(
                &robots[i],
                &mut q,
                &ee_paths[i][k],
                &start[i],
                &obstacles,
                cfg,
            );
            max_p = max_p.max(pe);
            max_r = max_r.max(re);
            if pe > cfg.position_tolerance || re > cfg.rotation_tolerance {
                failures.insert(k);
            }
            paths[i].push(q);
        }
        let configs: Vec<&Configuration> = paths.iter().map(|p| &p[k]).collect();
        check(k, &configs, &mut failures);
    }
    FollowOutcome {
        paths,
        failures,
        max_position_error: max_p,
        max_rotation_error: max_r,
    }
}

/// Complete two-stage plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Stage-1 time grid, from 0 to `t₁`.
    pub stage1_times: Vec<f64>,
    pub stage1_paths: Vec<Vec<Configuration>>,
    /// Stage-2 times `t₁..t_e`.
    pub times: Vec<f64>,
    #[serde(with = "quat_poses")]
    pub object_poses: Vec<Pose>,
    /// Per-robot configurations at `times`.
    pub paths: Vec<Vec<Configuration>>,
    /// End-effector poses in the object frame.
    #[serde(with = "quat_poses")]
    pub grasp_offsets: Vec<Pose>,
    pub replans: usize,
    pub blocked: BlockedPoseSet,
}

impl Trajectory {
    pub fn ee_pose(&self, robot: usize, k: usize) -> Pose {
        self.object_poses[k].compose(&self.grasp_offsets[robot])
    }

    pub fn duration(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }

    /// One row per sample: `t,stage,q0..qn`.
    pub fn to_csv(&self, robot: usize) -> String {
        let dof = self.paths[robot].first().map_or(0, Configuration::len);
        let mut out = String::from("t,stage");
        for k in 0..dof {
            out.push_str(&format!(",q{k}"));
        }
        out.push('\n');
        let rows = self
            .stage1_times
            .iter()
            .zip(&self.stage1_paths[robot])
            .map(|(t, q)| (1, t, q))
            .chain(
                self.times
                    .iter()
                    .zip(&self.paths[robot])
                    .map(|(t, q)| (2, t, q)),
            );
        for (stage, t, q) in rows {
            out.push_str(&format!("{t},{stage}"));
            for v in &q.values {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Inputs of [`plan_collaborative`].
#[derive(Clone, Copy, Debug)]
pub struct PlanRequest<'a> {
    pub task: &'a Task,
    pub scene: &'a Scene,
    pub robots: &'a [RobotModel],
    pub initial: &'a [Configuration],
    /// World grasp poses at `t₁`, one per robot.
    pub grasps: &'a [Pose],
}

/// Wall-clock seconds spent in each planning stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanTimings {
    pub stage1: f64,
    pub stage2: f64,
}

/// Stage 1, then object path, derivation and following with replanning on
/// collision-prone object poses.
pub fn plan_collaborative(
    req: &PlanRequest,
    seed: u64,
    cfg: &PlannerConfig,
) -> Result<Trajectory, PlanError> {
    plan_collaborative_timed(req, seed, cfg).0
}

/// [`plan_collaborative`] plus the time spent in each stage.
pub fn plan_collaborative_timed(
    req: &PlanRequest,
    seed: u64,
    cfg: &PlannerConfig,
) -> (Result<Trajectory, PlanError>, PlanTimings) {
    let mut timings = PlanTimings::default();
    let result = plan_stages(req, seed, cfg, &mut timings);
    (result, timings)
}

fn plan_stages(
    req: &PlanRequest,
    seed: u64,
    cfg: &PlannerConfig,
    timings: &mut PlanTimings,
) -> Result<Trajectory, PlanError> {
    req.task
        .validate()
        .map_err(|e| PlanError::Precondition(e.to_string()))?;
    let world = World::new(req.scene, req.task.object_id)?;
    let (dt, dr) = world.target_pose.distance(&req.task.p_init);
    if dt > 1e-4 || dr > 1e-3 {
        return Err(PlanError::Precondition(
            "p_init does not match the object's pose in the scene".into(),
        ));
    }
    let seeds = SeedStream::new(seed);
    let clock = Instant::now();
    let stage1 = plan_to_grasps(
        &world,
        req.robots,
        req.initial,
        req.grasps,
        Some(&req.task.p_end),
        seeds.child("stage1", 0).seed(),
        cfg,
    );
    timings.stage1 = clock.elapsed().as_secs_f64();
    let stage1 = stage1?;
    let clock = Instant::now();
    let result = plan_stage2(req, &world, &stage1, &seeds, cfg);
    timings.stage2 = clock.elapsed().as_secs_f64();
    result
}

fn plan_stage2(
    req: &PlanRequest,
    world: &World,
    stage1: &Stage1Plan,
    seeds: &SeedStream,
    cfg: &PlannerConfig,
) -> Result<Trajectory, PlanError> {
    let t1 = *stage1.times.last().unwrap();
    let ee_start: Vec<Pose> = req
        .robots
        .iter()
        .zip(&stage1.grasp_configs)
        .map(|(r, q)| r.forward_kinematics(q))
        .collect::<Result<_, _>>()
        .map_err(|e| PlanError::Precondition(e.to_string()))?;
    let mut blocked = BlockedPoseSet::new(cfg.blocked_radius);
    let mut reason = String::new();
    for replan in 0..=cfg.max_replans {
        let object_seed = seeds.child("object-path", replan as u64).seed();
        let poses = match plan_object_path(req.task, world, &blocked, object_seed, cfg) {
            Ok(p) => p,
            Err(e @ PlanError::Precondition(_)) => return Err(e),
            Err(e) => {
                return Err(PlanError::Stage2Infeasible {
                    replans: replan,
                    blocked,
                    reason: e.to_string(),
                })
            }
        };
        let (offsets, ee) = derive_ee_trajectories(&poses, &ee_start);
        let follow = follow_trajectory(
            req.robots,
            &stage1.grasp_configs,
            &ee,
            &poses,
            world,
            &cfg.follow,
        );
        if follow.failures.is_empty() {
            return Ok(Trajectory {
                stage1_times: stage1.times.clone(),
                stage1_paths: stage1.paths.clone(),
                times: object_times(&poses, t1, cfg),
                object_poses: poses,
                paths: follow.paths,
                grasp_offsets: offsets,
                replans: replan,
                blocked,
            });
        }
        reason = format!(
            "{} of {} object poses could not be followed",
            follow.failures.len(),
            poses.len()
        );
        for &k in &follow.failures {
            blocked.insert(poses[k]);
        }
    }
    Err(PlanError::Stage2Infeasible {
        replans: cfg.max_replans,
        blocked,
        reason,
    })
}

/// Pass/fail thresholds for [`check_trajectory`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckTolerances {
    pub closed_chain: f64,
    pub endpoint: [f64; 2],
    pub tracking: [f64; 2],
    /// Subdivisions per sample interval in the collision re-check.
    pub dense: usize,
}

impl Default for CheckTolerances {
    fn default() -> Self {
        Self {
            closed_chain: 1e-6,
            endpoint: [1e-4, 1e-3],
            tracking: [0.005, 0.01],
            dense: 10,
        }
    }
}

/// Invariant measurements over a trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryCheck {
    /// Max deviation of any pairwise relative end-effector pose from its
    /// `t₁` value (homogeneous matrix max-abs).
    pub closed_chain: f64,
    pub constraint_violations: usize,
    pub max_axis_deviation: f64,
    pub start_error: [f64; 2],
    pub end_error: [f64; 2],
    pub max_tracking: [f64; 2],
    pub collisions: Vec<String>,
    pub dense_samples: usize,
}

impl TrajectoryCheck {
    pub fn passes(&self, tol: &CheckTolerances) -> bool {
        self.closed_chain < tol.closed_chain
            && self.constraint_violations == 0
            && self.start_error[0] <= tol.endpoint[0]
            && self.start_error[1] <= tol.endpoint[1]
            && self.end_error[0] <= tol.endpoint[0]
            && self.end_error[1] <= tol.endpoint[1]
            && self.max_tracking[0] <= tol.tracking[0]
            && self.max_tracking[1] <= tol.tracking[1]
            && self.collisions.is_empty()
    }
}

/// Re-checks a trajectory: closed chain, constraints, endpoints, tracking and
/// collisions on a grid `dense` times finer than the stored samples (zero
/// clearance).
pub fn check_trajectory(
    traj: &Trajectory,
    task: &Task,
    robots: &[RobotModel],
    world: &World,
    dense: usize,
) -> TrajectoryCheck {
    let m = robots.len();
    let n = traj.object_poses.len();
    let mut closed_chain = 0.0f64;
    if n > 0 {
        for i in 0..m {
            for j in i + 1..m {
                let rel = |k: usize| {
                    traj.ee_pose(i, k)
                        .inverse()
                        .compose(&traj.ee_pose(j, k))
                        .to_homogeneous()
                };
                let r0 = rel(0);
                for k in 0..n {
                    closed_chain = closed_chain.max((rel(k) - r0).amax());
                }
            }
        }
    }
    let constraint_violations = traj
        .object_poses
        .iter()
        .filter(|p| !task.satisfied_at(p))
        .count();
    let max_axis_deviation = traj
        .object_poses
        .iter()
        .flat_map(|p| task.constraints.iter().map(move |c| c.axis_deviation(p)))
        .fold(0.0, f64::max);
    let pair = |a: Option<&Pose>, b: &Pose| {
        a.map_or([f64::INFINITY; 2], |a| {
            let (t, r) = a.distance(b);
            [t, r]
        })
    };
    let start_error = pair(traj.object_poses.first(), &task.p_init);
    let end_error = pair(traj.object_poses.last(), &task.p_end);
    let mut max_tracking = [0.0f64; 2];
    for i in 0..m {
        for k in 0..n.min(traj.paths[i].len()) {
            if let Ok(p) = robots[i].forward_kinematics(&traj.paths[i][k]) {
                let e = pose_error(&p, &traj.ee_pose(i, k));
                max_tracking[0] = max_tracking[0].max(e.fixed_rows::<3>(0).norm());
                max_tracking[1] = max_tracking[1].max(e.fixed_rows::<3>(3).norm());
            }
        }
    }

    let dense = dense.max(1);
    let mut collisions = Vec::new();
    let mut dense_samples = 0;
    let mut robots_at =
        |stage: &str, t: f64, configs: &[Configuration], object: &Pose, held: bool| {
            dense_samples += 1;
            let target = world.target_boxes(object);
            let bodies: Vec<Option<RobotBody>> = robots
                .iter()
                .zip(configs)
                .map(|(r, q)| r.body(q).ok())
                .collect();
            for (i, b) in bodies.iter().enumerate() {
                match b {
                    Some(b) if !world.robot_hits(b, 0.0, &target, (!held).then_some(0.0)) => {}
                    _ => collisions.push(format!("{stage} t={t:.3}: robot {i} vs scene")),
                }
            }
            for i in 0..m {
                for j in i + 1..m {
                    if let (Some(a), Some(b)) = (&bodies[i], &bodies[j]) {
                        if bodies_collide(a, b, 0.0) {
                            collisions.push(format!("{stage} t={t:.3}: robot {i} vs robot {j}"));
                        }
                    }
                }
            }
            if held && world.object_hits(object, 0.0) {
                collisions.push(format!("{stage} t={t:.3}: object vs scene"));
            }
        };
    let stage1_n = traj.stage1_times.len();
    for k in 0..stage1_n {
        let subs = if k + 1 < stage1_n { dense } else { 1 };
        for s in 0..subs {
            let u = s as f64 / dense as f64;
            let configs: Vec<Configuration> = traj
                .stage1_paths
                .iter()
                .map(|p| {
                    if s == 0 {
                        p[k].clone()
                    } else {
                        p[k].interpolate(&p[k + 1], u)
                    }
                })
                .collect();
            let t = if s == 0 {
                traj.stage1_times[k]
            } else {
                traj.stage1_times[k] + (traj.stage1_times[k + 1] - traj.stage1_times[k]) * u
            };
            robots_at("stage 1", t, &configs, &world.target_pose, false);
        }
    }
    for k in 0..n {
        let subs = if k + 1 < n { dense } else { 1 };
        for s in 0..subs {
            let u = s as f64 / dense as f64;
            let configs: Vec<Configuration> = traj
                .paths
                .iter()
                .map(|p| {
                    if s == 0 {
                        p[k].clone()
                    } else {
                        p[k].interpolate(&p[k + 1], u)
                    }
                })
                .collect();
            let (object, t) = if s == 0 {
                (traj.object_poses[k], traj.times[k])
            } else {
                (
                    traj.object_poses[k].interpolate(&traj.object_poses[k + 1], u),
                    traj.times[k] + (traj.times[k + 1] - traj.times[k]) * u,
                )
            };
            robots_at("stage 2", t, &configs, &object, true);
        }
    }
    TrajectoryCheck {
        closed_chain,
        constraint_violations,
        max_axis_deviation,
        start_error,
        end_error,
        max_tracking,
        collisions,
        dense_samples,
    }
}
