//! Synthetic candidate sets and the prompt fixture behind the golden files.

use collab_core::advisor::{build_advisor_prompt, AblationArm, PromptConfig, PromptDocument};
use collab_core::candidates::{Candidate, CandidateSet, LabeledImage};
use collab_core::geometry::{tva_from_pose, Pose};
use collab_core::select::{MotionConstraint, Task};
use nalgebra::{Matrix3, Rotation3, Vector3};

pub fn grasp_with_axis(
    t: Vector3<f64>,
    x: Vector3<f64>,
    v: Vector3<f64>,
) -> collab_core::GraspPose {
    tva_from_pose(&Pose::new(
        Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, v.cross(&x), v])),
        t,
    ))
    .unwrap()
}

/// One candidate per point, approaching horizontally toward the vertical axis.
pub fn synthetic(points: &[[f64; 3]], vertical: bool) -> CandidateSet {
    let candidates = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let p = Vector3::from(*p);
            let out = Vector3::new(p.x, p.y, 0.0).normalize();
            let x = if vertical {
                Vector3::z()
            } else {
                out.cross(&Vector3::z())
            };
            Candidate {
                label: i as u32 + 1,
                point: p,
                normal: Vector3::z(),
                view: 0,
                pixel: None,
                grasp: grasp_with_axis(p, x, -out),
                flatness: 0.0,
            }
        })
        .collect();
    CandidateSet {
        object_id: 1,
        view: 0,
        candidates,
    }
}

pub fn task() -> Task {
    Task {
        object_id: 1,
        p_init: Pose::identity(),
        p_end: Pose::from_xyz_yaw(2.0, 0.0, 0.0, 0.0),
        constraints: vec![MotionConstraint::upright(0.05)],
        budget: 3,
        allocated: Some(2),
    }
}

pub fn image_for(set: &CandidateSet) -> LabeledImage {
    LabeledImage {
        view: set.view,
        width: 640,
        height: 480,
        labels: set
            .candidates
            .iter()
            .map(|c| (c.label, 10.0 * c.label as f64, 20.0))
            .collect(),
        min_distance: 10.0,
    }
}

pub fn golden_set() -> CandidateSet {
    synthetic(
        &[
            [0.7, -0.4, 0.75],
            [0.0, -0.4, 0.75],
            [-0.7, -0.4, 0.75],
            [-0.7, 0.4, 0.75],
            [0.0, 0.4, 0.75],
            [0.7, 0.4, 0.75],
        ],
        true,
    )
}

pub fn arm_prompt(arm: AblationArm) -> PromptDocument {
    let set = golden_set();
    build_advisor_prompt(
        &set,
        &task(),
        2,
        &image_for(&set),
        None,
        &PromptConfig::arm(arm, "table"),
    )
}
