use std::time::Instant;

use collab_core::camera::{
    default_ring, downsample_per_view, extract_object_cloud, render_views, Intrinsics,
};
use collab_core::candidates::estimate_normals;
use collab_core::cloud::PointCloud;
use collab_core::dataset::{
    generate_dataset, read_manifest, AnnotatedObject, DatasetOptions, Split,
};
use collab_core::geometry::{random_rotation, GraspPose};
use collab_core::local_grasp::{
    crop_local, filter_visible_grasps, implied_contacts, perturb_reference, synthesize_grasp,
    GraspAnnotation, CROP_SIZE,
};
use collab_core::mesh::Mesh;
use collab_core::scene::{CloudObstacle, CollisionGeometry, ObjectSpec, Scene, SceneSpec};
use collab_core::shapes::Obb;
use collab_core::RobotModel;
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 30 × 20 × 3 cm plate with pinch grasps across its thickness along the
/// long edges, approaching horizontally.
fn annotated_plate() -> AnnotatedObject {
    let mesh = Mesh::from_obb(&Obb::axis_aligned(
        Vector3::new(-0.15, -0.1, -0.015),
        Vector3::new(0.15, 0.1, 0.015),
    ));
    let mut annotations = Vec::new();
    for k in 0..6 {
        let x = -0.125 + k as f64 * 0.05;
        for side in [-1.0, 1.0] {
            let y = side * 0.09;
            let approach = Vector3::new(0.0, -side, 0.0);
            let g = GraspPose::new(Vector3::new(x, y, 0.0), approach, 0.0).unwrap();
            // rotate α until the closing axis is vertical
            let alpha = (0..180)
                .map(|d| d as f64 * std::f64::consts::PI / 180.0)
                .max_by(|a, b| {
                    let ca = GraspPose { inplane: *a, ..g }.closing_axis().z.abs();
                    let cb = GraspPose { inplane: *b, ..g }.closing_axis().z.abs();
                    ca.total_cmp(&cb)
                })
                .unwrap();
            annotations.push(GraspAnnotation {
                grasp: GraspPose {
                    inplane: alpha,
                    ..g
                },
                contacts: [Vector3::new(x, y, 0.015), Vector3::new(x, y, -0.015)],
            });
        }
    }
    AnnotatedObject {
        id: 4,
        mesh,
        annotations,
    }
}

#[test]
fn dataset_one_object_ten_rotations() {
    let dir = tempfile::tempdir().unwrap();
    let obj = annotated_plate();
    let start = Instant::now();
    let summary = generate_dataset(
        std::slice::from_ref(&obj),
        &DatasetOptions::default(),
        dir.path(),
    )
    .unwrap();
    assert!(start.elapsed().as_secs_f64() < 10.0);
    assert!(summary.samples >= 10, "{summary:?}");
    let records = read_manifest(&dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(records.len(), summary.samples);
    for r in &records {
        let crop = PointCloud::load_ply(&dir.path().join(&r.crop)).unwrap();
        assert_eq!(crop.len(), CROP_SIZE);
        assert!(crop.points.iter().all(|p| p.amax() < 1.0));
        assert!((r.v.norm() - 1.0).abs() < 1e-9);
        assert!((0.0..std::f64::consts::PI).contains(&r.alpha));
    }
}

#[test]
fn dataset_split_has_no_overlap() {
    let dir = tempfile::tempdir().unwrap();
    let objects: Vec<AnnotatedObject> = (0..10)
        .map(|i| AnnotatedObject {
            id: 100 + i,
            ..annotated_plate()
        })
        .collect();
    let opts = DatasetOptions {
        rotations: 1,
        ..Default::default()
    };
    let summary = generate_dataset(&objects, &opts, dir.path()).unwrap();
    assert_eq!(summary.train_objects.len(), 7);
    let records = read_manifest(&dir.path().join("manifest.jsonl")).unwrap();
    for r in &records {
        let in_train = summary.train_objects.contains(&r.object_id);
        assert_eq!(in_train, r.split == Split::Train);
    }
    let train: std::collections::BTreeSet<u32> = records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| r.object_id)
        .collect();
    let test: std::collections::BTreeSet<u32> = records
        .iter()
        .filter(|r| r.split == Split::Test)
        .map(|r| r.object_id)
        .collect();
    assert!(train.is_disjoint(&test));
}

#[test]
fn visibility_filter() {
    let obj = annotated_plate();
    // only the top face observed
    let top: Vec<Vector3<f64>> = (0..31)
        .flat_map(|i| {
            (0..21)
                .map(move |j| Vector3::new(-0.15 + i as f64 * 0.01, -0.1 + j as f64 * 0.01, 0.015))
        })
        .collect();
    let cloud = PointCloud::from_points(top);
    assert_eq!(
        filter_visible_grasps(&obj.annotations, &cloud, 0.01).len(),
        obj.annotations.len()
    );
    let bottom_only: Vec<GraspAnnotation> = obj
        .annotations
        .iter()
        .map(|a| GraspAnnotation {
            contacts: [a.contacts[1], a.contacts[1]],
            ..a.clone()
        })
        .collect();
    assert!(filter_visible_grasps(&bottom_only, &cloud, 0.01).is_empty());
    assert_eq!(
        filter_visible_grasps(&bottom_only, &cloud, f64::INFINITY).len(),
        bottom_only.len()
    );
    // exact contact on an observed point
    let exact = vec![GraspAnnotation {
        contacts: [cloud.points[5], cloud.points[5]],
        ..obj.annotations[0].clone()
    }];
    assert_eq!(filter_visible_grasps(&exact, &cloud, 1e-9).len(), 1);
}

#[test]
fn perturbation_statistics() {
    let c = Vector3::new(0.3, -0.2, 1.0);
    let r = 0.05;
    let mut sum = Vector3::zeros();
    let n = 10_000;
    for s in 0..n {
        let d = perturb_reference(&c, r, s) - c;
        assert!(d.norm() <= r + 1e-15);
        sum += d;
    }
    let mean = sum / n as f64;
    // per-axis std of a uniform ball is r / sqrt(5)
    let sigma = r / 5f64.sqrt() / (n as f64).sqrt();
    assert!(mean.amax() < 3.0 * sigma, "{mean:?}");
}

fn table_cloud() -> (Scene, PointCloud) {
    let spec = SceneSpec {
        seed: 0,
        floor_height: 0.0,
        objects: vec![ObjectSpec {
            id: 1,
            label: "table".into(),
            template: "table".into(),
            dimensions: [1.5, 0.8, 0.75],
            mesh_path: None,
            position: [0.0; 3],
            rpy: [0.0; 3],
            mass: 20.0,
            friction: 0.5,
            jitter: 0.0,
        }],
    };
    let scene = Scene::generate(&spec).unwrap();
    let views = render_views(
        &scene,
        &default_ring(&scene, 1).unwrap(),
        &Intrinsics::default(),
    );
    let cloud = downsample_per_view(&extract_object_cloud(&views, "table").unwrap(), 0.01);
    let est = estimate_normals(&cloud, 0.015);
    let (valid, _) = est.valid_cloud();
    (scene, valid)
}

// Nearest face of a box, as (axis, sign) in the box frame.
fn nearest_face(b: &Obb, p: &Vector3<f64>) -> (usize, i32) {
    let l = b.local_point(p);
    (0..3)
        .flat_map(|k| [(k, 1), (k, -1)])
        .min_by(|x, y| {
            let d = |(k, s): (usize, i32)| (b.half_extents[k] - s as f64 * l[k]).abs();
            d(*x).total_cmp(&d(*y))
        })
        .unwrap()
}

#[test]
fn table_edge_grasp_contacts_top_and_bottom() {
    let (scene, cloud) = table_cloud();
    let robot = RobotModel::default();
    // top surface, 1 cm in from the long edge
    let reference = cloud.points[cloud.nearest(&Vector3::new(0.2, 0.39, 0.75)).unwrap()];
    let crop = crop_local(&cloud, &reference).unwrap();
    let g = synthesize_grasp(&crop, &robot).unwrap();
    let [a, b] = implied_contacts(&g, &crop, robot.gripper.max_opening).unwrap();
    let top = scene.object(1).unwrap().world_shapes()[0];
    assert!(
        (top.center.z - 0.73).abs() < 1e-9,
        "first shape is the slab"
    );
    let mut faces = [a, b].map(|c| {
        let w = c + reference;
        assert!(top.distance_to_point(&w) < 2e-3, "{w:?} off the slab");
        nearest_face(&top, &w)
    });
    faces.sort();
    assert_eq!(faces, [(2, -1), (2, 1)]);
}

fn plates_crop() -> collab_core::local_grasp::LocalCrop {
    let mut pts = Vec::new();
    let mut nrm = Vec::new();
    for i in 0..25 {
        for j in 0..25 {
            let x = -0.12 + i as f64 * 0.01;
            let y = -0.24 + j as f64 * 0.01;
            pts.push(Vector3::new(x, y, 0.02));
            nrm.push(Vector3::z());
            pts.push(Vector3::new(x, y, -0.02));
            nrm.push(-Vector3::z());
        }
    }
    let cloud = PointCloud {
        points: pts,
        normals: Some(nrm),
        sources: None,
        viewpoints: Vec::new(),
    };
    crop_local(&cloud, &Vector3::new(0.0, 0.0, 0.02)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn synthesis_is_rotation_equivariant(seed in any::<u64>()) {
        let robot = RobotModel::default();
        let crop = plates_crop();
        let g = synthesize_grasp(&crop, &robot).unwrap();
        let r = random_rotation(&mut ChaCha8Rng::seed_from_u64(seed));
        let gr = synthesize_grasp(&crop.rotated(&r), &robot).unwrap();
        prop_assert!((gr.translation - r * g.translation).norm() < 1e-6);
        prop_assert!((gr.approach.into_inner() - r * g.approach.into_inner()).norm() < 1e-6);
        let x = r * g.closing_axis();
        prop_assert!(gr.closing_axis().dot(&x).abs() > 1.0 - 1e-6);
    }

    #[test]
    fn synthesis_is_collision_free_and_width_feasible(dx in -0.08f64..0.08, dy in -0.2f64..0.0) {
        let robot = RobotModel::default();
        let base = plates_crop();
        let reference = Vector3::new(dx, dy, 0.02);
        let cloud = PointCloud { points: base.points.clone(), normals: base.normals.clone(), sources: None, viewpoints: Vec::new() };
        let crop = crop_local(&cloud, &reference).unwrap();
        if let Ok(g) = synthesize_grasp(&crop, &robot) {
            let obstacle = CloudObstacle::new(&crop.to_cloud());
            let geom = CollisionGeometry::Gripper { robot: &robot, opening: robot.gripper.max_opening, sweep: 0.0 };
            prop_assert!(!obstacle.collides(&geom, &g.to_pose(), 0.0));
            let [a, b] = implied_contacts(&g, &crop, robot.gripper.max_opening).unwrap();
            prop_assert!((a - b).norm() <= robot.gripper.max_opening);
        }
    }
}
