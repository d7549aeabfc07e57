//! Pipeline stages and the artifacts they exchange. Every stage returns the
//! exact bytes of its artifacts so the standalone subcommands and `run`
//! write identical files.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use collab_core::advisor::{AdvisorConfig, PromptConfig};
use collab_core::candidates::{
    generate_candidates, CandidateError, CandidateParams, CandidateSet, LabeledImage,
};
use collab_core::geometry::{wrap_angle, GraspPose, Pose};
use collab_core::kinematics::RobotBody;
use collab_core::local_grasp::{crop_local, synthesize_grasp};
use collab_core::planner::{
    bodies_collide, check_trajectory, plan_collaborative_timed, CheckTolerances, PlanError,
    PlanRequest, PlanTimings, PlannerConfig, Trajectory, TrajectoryCheck, World,
};
use collab_core::rng::SeedStream;
use collab_core::select::{
    infer_robot_count, select_grasps, CountRule, ObjectProps, ScorerConfig, SelectMode,
    SelectionReport, Task,
};
use collab_core::{Configuration, PointCloud, RobotModel, Scene, SceneSpec};
use nalgebra::Vector2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, FailureCategory};
use crate::image::label_image;
use crate::io::{read_json, to_json};

pub const SCENE_FILE: &str = "scene.json";
pub const OBJECTS_FILE: &str = "objects.json";
pub const CANDIDATES_FILE: &str = "candidates.json";
pub const CLOUD_FILE: &str = "object-cloud.ply";
pub const LABELS_IMAGE_FILE: &str = "labels.ppm";
pub const SELECTION_FILE: &str = "selection.json";
pub const GRASPS_FILE: &str = "grasps.json";
pub const TRAJECTORY_FILE: &str = "trajectory.json";
pub const CHECK_FILE: &str = "check.json";

pub fn robot_csv_file(robot: usize) -> String {
    format!("robot-{robot}.csv")
}

/// Artifact name and contents.
pub type Artifact = (String, Vec<u8>);

fn json_artifact<T: Serialize>(name: &str, value: &T) -> Artifact {
    (name.to_string(), to_json(value).into_bytes())
}

/// Seed of a named stage, derived from the run seed.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    SeedStream::new(seed).child(stage, 0).seed()
}

/// Random initial robot poses: on a ring around the object, roughly facing it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlacementConfig {
    /// Base distance band beyond the object's horizontal half-diagonal (m).
    pub ring: [f64; 2],
    /// Uniform heading noise around facing the object centre (rad).
    pub heading_jitter: f64,
    /// Required clearance to the scene and to other robots (m).
    pub clearance: f64,
    pub attempts: usize,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        Self {
            ring: [0.7, 1.5],
            heading_jitter: 0.5,
            clearance: 0.05,
            attempts: 500,
        }
    }
}

/// Tunables of a whole run; every field defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub candidates: CandidateParams,
    pub scorer: ScorerConfig,
    pub count_rule: CountRule,
    pub planner: PlannerConfig,
    pub placement: PlacementConfig,
}

/// Scene spec with relative mesh paths made absolute against `base`, so the
/// written spec can be loaded from any directory.
pub fn resolve_mesh_paths(spec: &mut SceneSpec, base: &Path) {
    for o in &mut spec.objects {
        if let Some(p) = &mut o.mesh_path {
            let joined = base.join(&*p);
            *p = std::path::absolute(&joined)
                .unwrap_or(joined)
                .display()
                .to_string();
        }
    }
}

pub fn build_scene(spec: &SceneSpec) -> Result<Scene, CliError> {
    Scene::generate(spec).map_err(|e| CliError::input(e.to_string()))
}

pub fn load_scene(file: &Path) -> Result<(SceneSpec, Scene), CliError> {
    let mut spec: SceneSpec = read_json(file)?;
    resolve_mesh_paths(&mut spec, file.parent().unwrap_or(Path::new(".")));
    let scene = build_scene(&spec).map_err(|e| e.in_file(file))?;
    Ok((spec, scene))
}

/// Checks the task against the scene: target exists and `p_init` is its pose.
pub fn validate_task(task: &Task, scene: &Scene) -> Result<(), CliError> {
    task.validate()
        .map_err(|e| CliError::input(e.to_string()))?;
    let object = scene
        .object(task.object_id)
        .map_err(|e| CliError::input(e.to_string()))?;
    let (dt, dr) = object.pose.distance(&task.p_init);
    if dt > 1e-4 || dr > 1e-3 {
        return Err(CliError::input(format!(
            "p_init is {dt:.4} m / {dr:.4} rad away from object {}'s pose in the scene",
            task.object_id
        ))
        .at_path("p_init"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSummary {
    pub id: u32,
    pub label: String,
    pub template: String,
    pub pose: Pose,
    /// Object-frame bounding-box extents after jitter.
    pub extents: [f64; 3],
    pub mass: f64,
    pub friction: f64,
    pub com: [f64; 3],
}

pub fn scene_artifacts(spec: &SceneSpec, scene: &Scene) -> Vec<Artifact> {
    let objects: Vec<ObjectSummary> = scene
        .objects
        .iter()
        .map(|o| ObjectSummary {
            id: o.id,
            label: o.label.clone(),
            template: o.template.clone(),
            pose: o.pose,
            extents: o.extents().into(),
            mass: o.mass,
            friction: o.friction,
            com: o.com_world().into(),
        })
        .collect();
    vec![
        json_artifact(SCENE_FILE, spec),
        json_artifact(OBJECTS_FILE, &objects),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidatesArtifact {
    pub object_id: u32,
    pub seed: u64,
    /// Object cloud file (PLY), relative to this artifact.
    pub cloud: String,
    /// Numbered label image (PPM), relative to this artifact.
    pub image: String,
    pub cloud_points: usize,
    pub filtered_points: usize,
    pub labeled: LabeledImage,
    pub set: CandidateSet,
}

pub struct CandidateOutput {
    pub artifact: CandidatesArtifact,
    pub cloud: PointCloud,
    pub image: Vec<u8>,
}

impl CandidateOutput {
    pub fn artifacts(&self) -> Vec<Artifact> {
        vec![
            json_artifact(CANDIDATES_FILE, &self.artifact),
            (CLOUD_FILE.into(), self.cloud.to_ply().into_bytes()),
            (LABELS_IMAGE_FILE.into(), self.image.clone()),
        ]
    }
}

pub fn candidate_failure(e: &CandidateError) -> FailureCategory {
    match e {
        CandidateError::Perception(_)
        | CandidateError::NoView
        | CandidateError::OutsideImage(_)
        | CandidateError::Overlap { .. } => FailureCategory::Perception,
        CandidateError::MissingNormals
        | CandidateError::NoGraspableRegion
        | CandidateError::TooFewPoints { .. }
        | CandidateError::ZeroK => FailureCategory::GraspGeneration,
    }
}

pub fn candidates_stage(
    scene: &Scene,
    task: &Task,
    robot: &RobotModel,
    cfg: &RunConfig,
    seed: u64,
) -> Result<CandidateOutput, CliError> {
    let run = generate_candidates(
        scene,
        task.object_id,
        robot,
        &cfg.candidates,
        stage_seed(seed, "candidates"),
    )
    .map_err(|e| CliError::stage(candidate_failure(&e), e.to_string()))?;
    let image = label_image(
        &run.views[run.image.view as usize],
        &run.image,
        task.object_id,
    )
    .to_ppm();
    Ok(CandidateOutput {
        artifact: CandidatesArtifact {
            object_id: task.object_id,
            seed,
            cloud: CLOUD_FILE.into(),
            image: LABELS_IMAGE_FILE.into(),
            cloud_points: run.cloud.len(),
            filtered_points: run.filtered.cloud.len(),
            labeled: run.image,
            set: run.set,
        },
        cloud: run.cloud,
        image,
    })
}

/// Reads a candidates artifact and the cloud it points to.
pub fn load_candidates(file: &Path) -> Result<(CandidatesArtifact, PointCloud, PathBuf), CliError> {
    let artifact: CandidatesArtifact = read_json(file)?;
    let dir = file.parent().unwrap_or(Path::new("."));
    let cloud_path = dir.join(&artifact.cloud);
    let cloud = PointCloud::load_ply(&cloud_path)
        .map_err(|e| CliError::input(e.to_string()).in_file(&cloud_path))?;
    let image = dir.join(&artifact.image);
    Ok((artifact, cloud, image))
}

/// External advisor selection settings.
#[derive(Clone, Debug)]
pub struct AdvisorSetup {
    pub config: AdvisorConfig,
    pub prompt: Option<PromptConfig>,
    pub image_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionArtifact {
    /// The task with the robot count filled in.
    pub task: Task,
    pub robots: usize,
    pub report: SelectionReport,
}

impl SelectionArtifact {
    pub fn artifacts(&self) -> Vec<Artifact> {
        vec![json_artifact(SELECTION_FILE, self)]
    }
}

pub fn selection_stage(
    scene: &Scene,
    task: &Task,
    robot: &RobotModel,
    cands: &CandidatesArtifact,
    advisor: Option<&AdvisorSetup>,
    cfg: &RunConfig,
) -> Result<SelectionArtifact, CliError> {
    let grasp_failure = |e: collab_core::select::SelectError| {
        CliError::stage(FailureCategory::GraspGeneration, e.to_string())
    };
    let object = scene
        .object(task.object_id)
        .map_err(|e| CliError::input(e.to_string()))?;
    let mut task = task.clone();
    let m = match task.allocated {
        Some(m) => {
            task.validate().map_err(grasp_failure)?;
            m
        }
        None => infer_robot_count(&mut task, object.mass, &object.extents(), &cfg.count_rule)
            .map_err(grasp_failure)?,
    };
    let props = ObjectProps::from_object(object, robot.gripper.max_opening);
    let prompt;
    let mode = match advisor {
        None => SelectMode::Scorer,
        Some(a) => {
            prompt = a.prompt.clone().unwrap_or_else(|| {
                PromptConfig::arm(collab_core::advisor::AblationArm::Full, &object.label)
            });
            SelectMode::Advisor {
                endpoint: &a.config,
                prompt: &prompt,
                image: &cands.labeled,
                image_path: a.image_path.as_deref(),
                task: &task,
            }
        }
    };
    let report = select_grasps(&cands.set, m, &mode, &props, &cfg.scorer).map_err(grasp_failure)?;
    Ok(SelectionArtifact {
        task,
        robots: m,
        report,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraspSource {
    /// Synthesized from the local crop around the candidate point.
    Local,
    /// The filter's collision-free pose, used when synthesis found nothing.
    Filter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspChoice {
    pub label: u32,
    pub source: GraspSource,
    pub grasp: GraspPose,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_error: Option<String>,
}

/// One local grasp per selected label.
pub fn local_grasps(
    cloud: &PointCloud,
    set: &CandidateSet,
    labels: &[u32],
    robot: &RobotModel,
) -> Result<Vec<GraspChoice>, CliError> {
    labels
        .iter()
        .map(|&label| {
            let c = set
                .get(label)
                .ok_or_else(|| CliError::input(format!("label {label} is not a candidate")))?;
            let synth = crop_local(cloud, &c.point)
                .and_then(|crop| Ok(synthesize_grasp(&crop, robot)?.transformed(&crop.frame)));
            Ok(match synth {
                Ok(grasp) => GraspChoice {
                    label,
                    source: GraspSource::Local,
                    grasp,
                    local_error: None,
                },
                Err(e) => GraspChoice {
                    label,
                    source: GraspSource::Filter,
                    grasp: c.grasp,
                    local_error: Some(e.to_string()),
                },
            })
        })
        .collect()
}

/// Samples `m` collision-free base poses around the target.
pub fn place_robots(
    scene: &Scene,
    task: &Task,
    robot: &RobotModel,
    m: usize,
    cfg: &PlacementConfig,
    seed: u64,
) -> Result<Vec<Configuration>, CliError> {
    let planning = |msg: String| CliError::stage(FailureCategory::Planning, msg);
    let world = World::new(scene, task.object_id).map_err(|e| CliError::input(e.to_string()))?;
    let object = scene
        .object(task.object_id)
        .map_err(|e| CliError::input(e.to_string()))?;
    let (lo, hi) = object.world_mesh().bounds();
    let centre = (lo + hi) * 0.5;
    let half_diagonal = 0.5 * (hi.x - lo.x).hypot(hi.y - lo.y);
    let target = world.target_boxes(&world.target_pose);
    let mut rng = SeedStream::new(seed).rng("robots");
    let mut placed: Vec<(Configuration, RobotBody)> = Vec::new();
    for i in 0..m {
        let mut found = None;
        for _ in 0..cfg.attempts.max(1) {
            let angle = rng.random_range(-PI..PI);
            let r = half_diagonal + rng.random_range(cfg.ring[0]..=cfg.ring[1]);
            let jitter = rng.random_range(-cfg.heading_jitter..=cfg.heading_jitter);
            let mut values = vec![0.0; robot.dof()];
            values[0] = centre.x + r * angle.cos();
            values[1] = centre.y + r * angle.sin();
            values[2] = wrap_angle(angle + PI + jitter);
            let q = Configuration::new(values);
            if !robot.within_limits(&q) {
                continue;
            }
            let Ok(body) = robot.body(&q) else { continue };
            if world.robot_hits(&body, cfg.clearance, &target, Some(cfg.clearance))
                || placed
                    .iter()
                    .any(|(_, b)| bodies_collide(b, &body, cfg.clearance))
            {
                continue;
            }
            found = Some((q, body));
            break;
        }
        placed.push(
            found.ok_or_else(|| planning(format!("no collision-free start pose for robot {i}")))?,
        );
    }
    Ok(placed.into_iter().map(|(q, _)| q).collect())
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// Grasp index for each robot, minimizing the summed horizontal distance from
/// base to grasp (first permutation in lexicographic order on ties).
pub fn assign_grasps(initial: &[Configuration], grasps: &[Pose]) -> Vec<usize> {
    let n = initial.len().min(grasps.len());
    let cost = |r: usize, g: usize| {
        let b = Vector2::new(initial[r].values[0], initial[r].values[1]);
        (b - grasps[g].translation.xy()).norm()
    };
    let mut best = (f64::INFINITY, (0..n).collect::<Vec<_>>());
    for p in permutations(n) {
        let c: f64 = p.iter().enumerate().map(|(r, &g)| cost(r, g)).sum();
        if c < best.0 - 1e-12 {
            best = (c, p);
        }
    }
    best.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotGrasp {
    pub robot: usize,
    pub initial: Configuration,
    pub label: u32,
    pub source: GraspSource,
    pub grasp: GraspPose,
    /// Gripper pose (z = approach, x = closing).
    pub pose: Pose,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspsArtifact {
    /// One entry per robot, in planning priority order.
    pub robots: Vec<RobotGrasp>,
}

impl GraspsArtifact {
    pub fn artifacts(&self) -> Vec<Artifact> {
        vec![json_artifact(GRASPS_FILE, self)]
    }
}

/// Local grasps for the selection, random start poses and the assignment of
/// grasps to robots.
pub fn grasps_stage(
    scene: &Scene,
    selection: &SelectionArtifact,
    robot: &RobotModel,
    cloud: &PointCloud,
    set: &CandidateSet,
    cfg: &RunConfig,
    seed: u64,
) -> Result<GraspsArtifact, CliError> {
    let choices = local_grasps(cloud, set, &selection.report.labels, robot)?;
    let m = choices.len();
    let initial = place_robots(
        scene,
        &selection.task,
        robot,
        m,
        &cfg.placement,
        stage_seed(seed, "robots"),
    )?;
    let poses: Vec<Pose> = choices.iter().map(|c| c.grasp.to_pose()).collect();
    let order = assign_grasps(&initial, &poses);
    let robots = initial
        .into_iter()
        .zip(order)
        .enumerate()
        .map(|(i, (q, g))| RobotGrasp {
            robot: i,
            initial: q,
            label: choices[g].label,
            source: choices[g].source,
            grasp: choices[g].grasp,
            pose: poses[g],
            local_error: choices[g].local_error.clone(),
        })
        .collect();
    Ok(GraspsArtifact { robots })
}

pub struct PlanOutput {
    pub trajectory: Trajectory,
    pub check: TrajectoryCheck,
}

impl PlanOutput {
    pub fn artifacts(&self) -> Vec<Artifact> {
        let mut out = vec![
            json_artifact(TRAJECTORY_FILE, &self.trajectory),
            json_artifact(CHECK_FILE, &self.check),
        ];
        for i in 0..self.trajectory.paths.len() {
            out.push((robot_csv_file(i), self.trajectory.to_csv(i).into_bytes()));
        }
        out
    }
}

pub fn plan_failure(e: &PlanError) -> FailureCategory {
    match e {
        PlanError::GraspUnreachable { .. } => FailureCategory::GraspGeneration,
        _ => FailureCategory::Planning,
    }
}

/// Two-stage planning followed by the invariant re-check. A trajectory that
/// fails the check counts as a planning failure.
pub fn plan_stage(
    scene: &Scene,
    task: &Task,
    robot: &RobotModel,
    grasps: &GraspsArtifact,
    cfg: &RunConfig,
    seed: u64,
) -> (Result<PlanOutput, CliError>, PlanTimings) {
    let robots = vec![robot.clone(); grasps.robots.len()];
    let initial: Vec<Configuration> = grasps.robots.iter().map(|g| g.initial.clone()).collect();
    let poses: Vec<Pose> = grasps.robots.iter().map(|g| g.pose).collect();
    let req = PlanRequest {
        task,
        scene,
        robots: &robots,
        initial: &initial,
        grasps: &poses,
    };
    let (result, timings) =
        plan_collaborative_timed(&req, stage_seed(seed, "planning"), &cfg.planner);
    let result = result
        .map_err(|e| CliError::stage(plan_failure(&e), e.to_string()))
        .and_then(|trajectory| {
            let world =
                World::new(scene, task.object_id).map_err(|e| CliError::input(e.to_string()))?;
            let tol = CheckTolerances::default();
            let check = check_trajectory(&trajectory, task, &robots, &world, tol.dense);
            if !check.passes(&tol) {
                return Err(CliError::stage(
                    FailureCategory::Planning,
                    format!("trajectory failed the invariant re-check: {check:?}"),
                ));
            }
            Ok(PlanOutput { trajectory, check })
        });
    (result, timings)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutation_count_and_order() {
        let p = permutations(3);
        assert_eq!(p.len(), 6);
        assert_eq!(p[0], vec![0, 1, 2]);
        assert_eq!(p[5], vec![2, 1, 0]);
        assert_eq!(permutations(0), vec![Vec::<usize>::new()]);
    }

    #[test]
    fn assignment_pairs_nearest() {
        let q = |x: f64, y: f64| Configuration::new(vec![x, y, 0.0]);
        let initial = [q(2.0, 0.0), q(-2.0, 0.0), q(0.0, 2.0)];
        let grasps = [
            Pose::from_xyz_yaw(0.0, 0.5, 0.7, 0.0),
            Pose::from_xyz_yaw(0.7, 0.0, 0.7, 0.0),
            Pose::from_xyz_yaw(-0.7, 0.0, 0.7, 0.0),
        ];
        assert_eq!(assign_grasps(&initial, &grasps), vec![1, 2, 0]);
    }

    #[test]
    fn stage_seeds_differ() {
        assert_ne!(stage_seed(3, "robots"), stage_seed(3, "candidates"));
        assert_eq!(stage_seed(3, "robots"), stage_seed(3, "robots"));
    }
}
