use std::f64::consts::{FRAC_PI_2, PI};

use collab_core::geometry::{GraspPose, Pose};
use collab_core::planner::{
    check_trajectory, derive_ee_trajectories, follow_trajectory, plan_collaborative,
    plan_object_path, plan_to_grasps, BlockedPoseSet, CheckTolerances, FollowConfig, PlanError,
    PlanRequest, PlannerConfig, Trajectory, World,
};
use collab_core::rng::rng_from_seed;
use collab_core::scene::{ObjectSpec, Scene, SceneSpec};
use collab_core::select::{MotionConstraint, Task};
use collab_core::shapes::Obb;
use collab_core::{Configuration, RobotModel};
use nalgebra::{Isometry3, Translation3, Unit, UnitQuaternion, Vector3};
use rand::Rng;

fn object(id: u32, template: &str, dims: [f64; 3], pos: [f64; 3], yaw: f64) -> ObjectSpec {
    ObjectSpec {
        id,
        label: format!("{template}{id}"),
        template: template.into(),
        dimensions: dims,
        mesh_path: None,
        position: pos,
        rpy: [0.0, 0.0, yaw],
        mass: 20.0,
        friction: 0.5,
        jitter: 0.0,
    }
}

fn scene(objects: Vec<ObjectSpec>) -> Scene {
    Scene::generate(&SceneSpec {
        seed: 0,
        floor_height: 0.0,
        objects,
    })
    .unwrap()
}

fn table() -> ObjectSpec {
    object(1, "table", [1.5, 0.8, 0.75], [0.0; 3], 0.0)
}

fn config(x: f64, y: f64, heading: f64) -> Configuration {
    let mut q = vec![0.0; 9];
    q[0] = x;
    q[1] = y;
    q[2] = heading;
    Configuration::new(q)
}

/// Vertical pinch on the table-top slab, approaching along `v`.
fn slab_grasp(p: [f64; 3], v: [f64; 3]) -> Pose {
    let g = GraspPose::new(Vector3::from(p), Vector3::from(v), FRAC_PI_2).unwrap();
    assert!(g.closing_axis().z.abs() > 1.0 - 1e-9);
    g.to_pose()
}

fn upright_task(p_end: Pose) -> Task {
    Task {
        object_id: 1,
        p_init: Pose::identity(),
        p_end,
        constraints: vec![MotionConstraint::upright(0.05)],
        budget: 2,
        allocated: Some(2),
    }
}

// Chain product written out directly from the model description.
fn fk_oracle(r: &RobotModel, q: &Configuration) -> Isometry3<f64> {
    let q = &q.values;
    let mut t = Isometry3::new(Vector3::new(q[0], q[1], 0.0), Vector3::z() * q[2]);
    t *= Translation3::from(Vector3::from(r.base.mount));
    for (j, a) in r.joints.iter().zip(&q[3..]) {
        t *= Translation3::from(Vector3::from(j.offset));
        t *= UnitQuaternion::from_axis_angle(&Unit::new_normalize(Vector3::from(j.axis)), *a);
    }
    t * Translation3::from(Vector3::from(r.tool_offset))
}

fn iso(p: &Pose) -> Isometry3<f64> {
    Isometry3::from_parts(
        Translation3::from(p.translation),
        UnitQuaternion::from_rotation_matrix(&p.rotation),
    )
}

// Surface samples of a box, at most `step` apart along each face.
fn surface_points(b: &Obb, step: f64) -> Vec<Vector3<f64>> {
    let h = b.half_extents;
    let n: Vec<usize> = (0..3)
        .map(|k| ((2.0 * h[k] / step).ceil() as usize).max(1))
        .collect();
    let mut out = Vec::new();
    for i in 0..=n[0] {
        for j in 0..=n[1] {
            for k in 0..=n[2] {
                let on_face = i == 0 || i == n[0] || j == 0 || j == n[1] || k == 0 || k == n[2];
                if !on_face {
                    continue;
                }
                let l = Vector3::new(
                    -h.x + 2.0 * h.x * i as f64 / n[0] as f64,
                    -h.y + 2.0 * h.y * j as f64 / n[1] as f64,
                    -h.z + 2.0 * h.z * k as f64 / n[2] as f64,
                );
                out.push(b.center + b.rotation * l);
            }
        }
    }
    out
}

fn inside(b: &Obb, p: &Vector3<f64>) -> bool {
    let l = b.rotation.inverse() * (p - b.center);
    (0..3).all(|k| l[k].abs() < b.half_extents[k])
}

fn edge_points(b: &Obb, step: f64) -> Vec<Vector3<f64>> {
    let h = b.half_extents;
    let mut out = Vec::new();
    for axis in 0..3 {
        let n = ((2.0 * h[axis] / step).ceil() as usize).max(1);
        for corner in 0..4 {
            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
            for i in 0..=n {
                let mut l = Vector3::zeros();
                l[axis] = -h[axis] + 2.0 * h[axis] * i as f64 / n as f64;
                l[u] = if corner & 1 == 0 { -h[u] } else { h[u] };
                l[v] = if corner & 2 == 0 { -h[v] } else { h[v] };
                out.push(b.center + b.rotation * l);
            }
        }
    }
    out
}

// Two boxes overlap iff the surface of one enters the other or an edge of the
// other passes through the first.
fn boxes_overlap_oracle(a: &Obb, b: &Obb) -> bool {
    if (a.center - b.center).norm() > a.half_extents.norm() + b.half_extents.norm() {
        return false;
    }
    let (small, large) = if a.half_extents.product() <= b.half_extents.product() {
        (a, b)
    } else {
        (b, a)
    };
    surface_points(small, 0.01).iter().any(|p| inside(large, p))
        || edge_points(large, 0.01).iter().any(|p| inside(small, p))
}

// Sphere/box distances evaluated from scratch; gripper boxes checked through
// their surface samples.
fn robots_touch_oracle(
    a: &collab_core::kinematics::RobotBody,
    b: &collab_core::kinematics::RobotBody,
) -> bool {
    let sphere_box = |s: &collab_core::shapes::Sphere, o: &Obb| {
        let l = o.rotation.inverse() * (s.center - o.center);
        let c = Vector3::new(
            l.x.clamp(-o.half_extents.x, o.half_extents.x),
            l.y.clamp(-o.half_extents.y, o.half_extents.y),
            l.z.clamp(-o.half_extents.z, o.half_extents.z),
        );
        (l - c).norm() < s.radius
    };
    let a_boxes: Vec<&Obb> = std::iter::once(&a.base).chain(&a.gripper).collect();
    let b_boxes: Vec<&Obb> = std::iter::once(&b.base).chain(&b.gripper).collect();
    a.links.iter().any(|sa| {
        b.links
            .iter()
            .any(|sb| (sa.center - sb.center).norm() < sa.radius + sb.radius)
            || b_boxes.iter().any(|o| sphere_box(sa, o))
    }) || b
        .links
        .iter()
        .any(|sb| a_boxes.iter().any(|o| sphere_box(sb, o)))
        || a_boxes
            .iter()
            .any(|x| b_boxes.iter().any(|y| boxes_overlap_oracle(x, y)))
}

#[test]
fn single_robot_corridor_reaches_its_grasp() {
    // A thin upright plate pinched across its thickness from the -x side.
    let s = scene(vec![object(
        1,
        "box",
        [0.3, 0.03, 0.6],
        [3.0, 0.0, 0.0],
        0.0,
    )]);
    let world = World::new(&s, 1).unwrap();
    let robot = RobotModel::default();
    let grasp = GraspPose::new(Vector3::new(2.87, 0.0, 0.5), Vector3::x(), 0.0)
        .unwrap()
        .to_pose();
    let init = config(0.0, 0.0, 0.0);
    let plan = plan_to_grasps(
        &world,
        &[robot.clone()],
        &[init.clone()],
        &[grasp],
        None,
        3,
        &PlannerConfig::default(),
    )
    .unwrap();
    let path = &plan.paths[0];
    assert_eq!(path.first().unwrap(), &init);
    assert_eq!(path.last().unwrap(), &plan.grasp_configs[0]);
    let reached = fk_oracle(&robot, path.last().unwrap());
    assert!((reached.translation.vector - grasp.translation).norm() < 1e-4);
    for q in &plan.timed[0].configs {
        let body = robot.body(q).unwrap();
        assert!(!s.robot_collides(&body, 0.0, &Default::default(), &Default::default()));
    }
}

#[test]
fn two_robots_exchanging_sides_keep_apart() {
    let s = scene(vec![table()]);
    let world = World::new(&s, 1).unwrap();
    let robots = vec![RobotModel::default(); 2];
    // Each robot starts on the opposite side of its grasp.
    let init = [config(2.2, 0.6, PI), config(-2.2, -0.6, 0.0)];
    let grasps = [
        slab_grasp([-0.73, 0.0, 0.73], [1.0, 0.0, 0.0]),
        slab_grasp([0.73, 0.0, 0.73], [-1.0, 0.0, 0.0]),
    ];
    let plan = plan_to_grasps(
        &world,
        &robots,
        &init,
        &grasps,
        None,
        11,
        &PlannerConfig::default(),
    )
    .unwrap();
    assert!(plan.paths[0][0].distance(plan.paths[0].last().unwrap()) > 1.0);
    let times = &plan.times;
    let mut checked = 0;
    for k in 0..times.len() - 1 {
        for s in 0..10 {
            let t = times[k] + (times[k + 1] - times[k]) * s as f64 / 10.0;
            let a = robots[0].body(&plan.timed[0].at(t)).unwrap();
            let b = robots[1].body(&plan.timed[1].at(t)).unwrap();
            assert!(!robots_touch_oracle(&a, &b), "robots touch at t = {t}");
            checked += 1;
        }
    }
    assert!(checked > 100);
    for (i, p) in plan.paths.iter().enumerate() {
        for q in p {
            let body = robots[i].body(q).unwrap();
            assert!(!s.robot_collides(&body, 0.0, &Default::default(), &Default::default()));
        }
    }
}

#[test]
fn grasp_inside_a_wall_is_unreachable() {
    let s = scene(vec![
        object(1, "table", [1.5, 0.8, 0.75], [0.0; 3], 0.0),
        object(2, "box", [0.2, 3.0, 1.5], [1.5, 0.0, 0.0], 0.0),
    ]);
    let world = World::new(&s, 1).unwrap();
    let grasp = slab_grasp([1.5, 0.0, 0.8], [-1.0, 0.0, 0.0]);
    let err = plan_to_grasps(
        &world,
        &[RobotModel::default()],
        &[config(3.0, 0.0, PI)],
        &[grasp],
        None,
        0,
        &PlannerConfig::default(),
    )
    .unwrap_err();
    assert!(
        matches!(err, PlanError::GraspUnreachable { robot: 0 }),
        "{err}"
    );
    assert!(err.to_string().contains("inverse-kinematics"));
}

#[test]
fn null_motion_gives_one_pose() {
    let s = scene(vec![table()]);
    let world = World::new(&s, 1).unwrap();
    let task = upright_task(Pose::identity());
    let path = plan_object_path(
        &task,
        &world,
        &BlockedPoseSet::default(),
        0,
        &PlannerConfig::default(),
    )
    .unwrap();
    assert_eq!(path, vec![Pose::identity()]);
}

#[test]
fn tilted_goal_under_upright_constraint_is_rejected() {
    let s = scene(vec![table()]);
    let world = World::new(&s, 1).unwrap();
    let task = upright_task(Pose::from_xyz_rpy(
        [1.0, 0.0, 0.3],
        [30f64.to_radians(), 0.0, 0.0],
    ));
    let err = plan_object_path(
        &task,
        &world,
        &BlockedPoseSet::default(),
        0,
        &PlannerConfig::default(),
    )
    .unwrap_err();
    assert!(matches!(err, PlanError::Precondition(_)), "{err}");
}

#[test]
fn table_through_doorway_sweep_is_clear() {
    // Wall at y = 2 with a 1.1 m door: the 1.5 m table must turn to pass.
    let s = scene(vec![
        table(),
        object(2, "box", [3.0, 0.1, 2.0], [-2.05, 2.0, 0.0], 0.0),
        object(3, "box", [3.0, 0.1, 2.0], [2.05, 2.0, 0.0], 0.0),
    ]);
    let world = World::new(&s, 1).unwrap();
    let task = upright_task(Pose::from_xyz_yaw(0.0, 4.0, 0.0, 0.0));
    let path = plan_object_path(
        &task,
        &world,
        &BlockedPoseSet::default(),
        4,
        &PlannerConfig::default(),
    )
    .unwrap();
    assert_eq!(path[0], task.p_init);
    assert_eq!(*path.last().unwrap(), task.p_end);
    let walls: Vec<Obb> = s.objects[1..]
        .iter()
        .flat_map(|o| o.world_shapes())
        .collect();
    let shapes = &s.objects[0].shapes;
    let mut turned = false;
    for w in path.windows(2) {
        for k in 0..10 {
            let p = w[0].interpolate(&w[1], k as f64 / 10.0);
            assert!(p.axis(2).z > 0.05f64.cos());
            for b in shapes {
                let b = b.transformed(&p);
                for wall in &walls {
                    assert!(
                        !boxes_overlap_oracle(&b, wall),
                        "object meets wall at {:?}",
                        p.translation
                    );
                }
            }
            if (p.translation.y - 2.0).abs() < 0.05 {
                turned |= p.yaw().sin().abs() > 0.5;
            }
        }
    }
    assert!(turned, "table passed the door without turning");
}

#[test]
fn derived_paths_identity_and_translation() {
    let grasps = [
        Pose::from_xyz_yaw(0.7, 0.0, 0.7, PI),
        Pose::from_xyz_yaw(-0.7, 0.1, 0.7, 0.0),
    ];
    let still = vec![Pose::identity(); 5];
    let (_, paths) = derive_ee_trajectories(&still, &grasps);
    for (g, p) in grasps.iter().zip(&paths) {
        assert!(p.iter().all(|e| e == g));
    }
    let d = Vector3::new(0.3, -1.2, 0.05);
    let moved = vec![Pose::identity(), Pose::from_translation(d)];
    let (_, paths) = derive_ee_trajectories(&moved, &grasps);
    for (g, p) in grasps.iter().zip(&paths) {
        assert!((p[1].translation - g.translation - d).norm() < 1e-12);
        assert!(p[1].distance(g).1 < 1e-12);
    }
}

#[test]
fn derived_paths_keep_relative_poses() {
    let mut rng = rng_from_seed(21);
    let rand_pose = |rng: &mut collab_core::rng::StageRng| {
        Pose::from_xyz_rpy(
            [
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(0.0..1.0),
            ],
            [
                rng.random_range(-PI..PI),
                rng.random_range(-1.5..1.5),
                rng.random_range(-PI..PI),
            ],
        )
    };
    let object: Vec<Pose> = (0..50).map(|_| rand_pose(&mut rng)).collect();
    let grasps: Vec<Pose> = (0..3).map(|_| rand_pose(&mut rng)).collect();
    let (_, paths) = derive_ee_trajectories(&object, &grasps);
    let mut worst = 0.0f64;
    for i in 0..3 {
        for j in i + 1..3 {
            let rel = |k: usize| (iso(&paths[i][k]).inverse() * iso(&paths[j][k])).to_homogeneous();
            let r0 = rel(0);
            for k in 0..object.len() {
                worst = worst.max((rel(k) - r0).amax());
            }
        }
    }
    assert!(worst < 1e-9, "{worst}");
}

fn follow_fixture() -> (Scene, RobotModel, Configuration, Pose) {
    let robot = RobotModel::default();
    let q = Configuration::new(vec![0.0, 0.0, 0.0, 0.0, 0.6, 1.1, 0.0, -0.2, 0.0]);
    let tool = robot.forward_kinematics(&q).unwrap();
    // A small held box just beyond the fingertips.
    let held = tool.transform_point(&Vector3::new(0.0, 0.0, 0.06));
    let s = scene(vec![object(
        1,
        "box",
        [0.05, 0.05, 0.05],
        [held.x, held.y, held.z - 0.025],
        0.0,
    )]);
    (s, robot, q, tool)
}

#[test]
fn free_space_slow_path_is_tracked() {
    let (s, robot, q, tool) = follow_fixture();
    let world = World::new(&s, 1).unwrap();
    let p0 = s.objects[0].pose;
    let object: Vec<Pose> = (0..=60)
        .map(|k| {
            let u = k as f64 / 60.0;
            Pose::from_xyz_yaw(
                p0.translation.x + 0.3 * u,
                p0.translation.y + 0.2 * u,
                p0.translation.z + 0.1 * u,
                0.4 * u,
            )
        })
        .collect();
    let (_, ee) = derive_ee_trajectories(&object, &[tool]);
    let out = follow_trajectory(
        &[robot.clone()],
        &[q],
        &ee,
        &object,
        &world,
        &FollowConfig::default(),
    );
    assert!(out.failures.is_empty(), "{:?}", out.failures);
    for (qk, e) in out.paths[0].iter().zip(&ee[0]) {
        let f = fk_oracle(&robot, qk);
        assert!((f.translation.vector - e.translation).norm() <= 0.005);
        assert!(f.rotation.angle_to(&e.quaternion()) <= 0.01);
    }
}

#[test]
fn path_through_a_pillar_fails_over_the_pillar() {
    let (s0, robot, q, tool) = follow_fixture();
    let p0 = s0.objects[0].pose;
    let t = tool.translation;
    let pillar = object(2, "box", [0.1, 0.1, 2.0], [t.x, t.y + 0.4, 0.0], 0.0);
    let mut specs = vec![object(
        1,
        "box",
        [0.05, 0.05, 0.05],
        [p0.translation.x, p0.translation.y, p0.translation.z],
        0.0,
    )];
    specs.push(pillar);
    let s = scene(specs);
    let world = World::new(&s, 1).unwrap();
    let object: Vec<Pose> = (0..=80)
        .map(|k| {
            Pose::from_translation(p0.translation + Vector3::new(0.0, 0.8 * k as f64 / 80.0, 0.0))
        })
        .collect();
    let (_, ee) = derive_ee_trajectories(&object, &[tool]);
    let out = follow_trajectory(
        &[robot.clone()],
        &[q],
        &ee,
        &object,
        &world,
        &FollowConfig::default(),
    );
    let pillar_box = s.objects[1].world_shapes()[0];
    let blocked: Vec<usize> = ee[0]
        .iter()
        .enumerate()
        .filter(|(_, e)| {
            robot
                .gripper_boxes_local()
                .iter()
                .any(|g| boxes_overlap_oracle(&g.transformed(e), &pillar_box))
        })
        .map(|(k, _)| k)
        .collect();
    assert!(!blocked.is_empty());
    for k in &blocked {
        assert!(
            out.failures.contains(k),
            "sample {k} inside the pillar not reported"
        );
    }
}

#[test]
fn zero_length_trajectory_is_a_no_op() {
    let (s, robot, q, tool) = follow_fixture();
    let world = World::new(&s, 1).unwrap();
    let object = vec![s.objects[0].pose];
    let (_, ee) = derive_ee_trajectories(&object, &[tool]);
    let out = follow_trajectory(
        &[robot],
        &[q.clone()],
        &ee,
        &object,
        &world,
        &FollowConfig::default(),
    );
    assert!(out.failures.is_empty());
    assert_eq!(out.paths, vec![vec![q]]);
}

fn two_robot_request_parts() -> (Vec<RobotModel>, Vec<Configuration>, Vec<Pose>) {
    (
        vec![RobotModel::default(); 2],
        vec![config(2.2, 0.0, PI), config(-2.2, 0.0, 0.0)],
        vec![
            slab_grasp([0.73, 0.0, 0.73], [-1.0, 0.0, 0.0]),
            slab_grasp([-0.73, 0.0, 0.73], [1.0, 0.0, 0.0]),
        ],
    )
}

fn assert_invariants(traj: &Trajectory, task: &Task, robots: &[RobotModel], s: &Scene) {
    let world = World::new(s, task.object_id).unwrap();
    let check = check_trajectory(traj, task, robots, &world, 10);
    assert!(check.passes(&CheckTolerances::default()), "{check:?}");
    // Closed chain recomputed from forward kinematics of the stored
    // configurations: bounded by twice the tracking tolerance.
    let n = traj.times.len();
    let rel = |k: usize| {
        (fk_oracle(&robots[0], &traj.paths[0][k]).inverse()
            * fk_oracle(&robots[1], &traj.paths[1][k]))
        .translation
        .vector
    };
    let r0 = rel(0);
    for k in 0..n {
        assert!((rel(k) - r0).norm() < 0.02);
        assert!(task.satisfied_at(&traj.object_poses[k]));
    }
}

#[test]
fn benign_table_move_succeeds_first_time() {
    let s = scene(vec![table()]);
    let (robots, init, grasps) = two_robot_request_parts();
    let task = upright_task(Pose::from_xyz_yaw(0.3, 1.5, 0.0, 0.5));
    let req = PlanRequest {
        task: &task,
        scene: &s,
        robots: &robots,
        initial: &init,
        grasps: &grasps,
    };
    let traj = plan_collaborative(&req, 5, &PlannerConfig::default()).unwrap();
    assert_eq!(traj.replans, 0);
    assert!(traj.blocked.is_empty());
    assert_invariants(&traj, &task, &robots, &s);
    let again = plan_collaborative(&req, 5, &PlannerConfig::default()).unwrap();
    assert_eq!(
        serde_json::to_string(&traj).unwrap(),
        serde_json::to_string(&again).unwrap()
    );
    let back: Trajectory = serde_json::from_str(&serde_json::to_string(&traj).unwrap()).unwrap();
    assert_eq!(back.times, traj.times);
    assert!(back
        .object_poses
        .iter()
        .zip(&traj.object_poses)
        .all(|(a, b)| {
            let (dt, dr) = a.distance(b);
            dt < 1e-12 && dr < 1e-9
        }));
    let csv = traj.to_csv(0);
    assert_eq!(
        csv.lines().count(),
        1 + traj.stage1_times.len() + traj.times.len()
    );
}

#[test]
fn narrow_passage_forces_a_replan() {
    // Robots hold the long sides; two posts leave a gap the table fits
    // through but the robots do not.
    let s = scene(vec![
        table(),
        object(2, "box", [0.1, 0.3, 1.5], [2.0, 0.75, 0.0], 0.0),
        object(3, "box", [0.1, 0.3, 1.5], [2.0, -0.75, 0.0], 0.0),
    ]);
    let robots = vec![RobotModel::default(); 2];
    let init = vec![config(0.0, 2.2, -FRAC_PI_2), config(0.0, -2.2, FRAC_PI_2)];
    let grasps = vec![
        slab_grasp([0.0, 0.38, 0.73], [0.0, -1.0, 0.0]),
        slab_grasp([0.0, -0.38, 0.73], [0.0, 1.0, 0.0]),
    ];
    let task = upright_task(Pose::from_xyz_yaw(4.0, 0.0, 0.0, 0.0));
    let cfg = PlannerConfig {
        object_margin: 3.0,
        max_replans: 12,
        ..PlannerConfig::default()
    };
    let req = PlanRequest {
        task: &task,
        scene: &s,
        robots: &robots,
        initial: &init,
        grasps: &grasps,
    };
    let traj = plan_collaborative(&req, 2, &cfg).unwrap();
    assert!(traj.replans >= 1);
    assert!(!traj.blocked.is_empty());
    assert_invariants(&traj, &task, &robots, &s);
}

#[test]
fn walled_goal_is_stage2_infeasible() {
    // Goal footprint enclosed on all four sides.
    let s = scene(vec![
        table(),
        object(2, "box", [2.4, 0.1, 1.2], [0.0, 2.2, 0.0], 0.0),
        object(3, "box", [2.4, 0.1, 1.2], [0.0, 3.8, 0.0], 0.0),
        object(4, "box", [0.1, 1.7, 1.2], [-1.15, 3.0, 0.0], 0.0),
        object(5, "box", [0.1, 1.7, 1.2], [1.15, 3.0, 0.0], 0.0),
    ]);
    let (robots, init, grasps) = two_robot_request_parts();
    let task = upright_task(Pose::from_xyz_yaw(0.0, 3.0, 0.0, 0.0));
    let cfg = PlannerConfig {
        object_rrt: collab_core::planner::RrtConfig {
            max_iterations: 3000,
            ..PlannerConfig::default().object_rrt
        },
        ..PlannerConfig::default()
    };
    let req = PlanRequest {
        task: &task,
        scene: &s,
        robots: &robots,
        initial: &init,
        grasps: &grasps,
    };
    let err = plan_collaborative(&req, 1, &cfg).unwrap_err();
    assert!(matches!(err, PlanError::Stage2Infeasible { .. }), "{err}");
    assert!(err.to_string().starts_with("stage-2 infeasible"));
}
