//! Full pipeline runs and their records.

use std::time::Instant;

use collab_core::planner::TrajectoryCheck;
use collab_core::select::Task;
use collab_core::{RobotModel, Scene, SceneSpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, FailureCategory};
use crate::pipeline::{
    candidates_stage, grasps_stage, plan_stage, scene_artifacts, selection_stage, AdvisorSetup,
    Artifact, GraspSource, RunConfig,
};

pub const RECORD_FILE: &str = "run-record.json";
pub const TIMINGS_FILE: &str = "timings.json";

/// Wall-clock seconds per pipeline stage; zero for stages never reached.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub candidates: f64,
    pub selection: f64,
    pub local_grasps: f64,
    pub stage1: f64,
    pub stage2: f64,
}

impl StageTimings {
    pub const STAGES: [&'static str; 5] = [
        "candidates",
        "selection",
        "local_grasps",
        "stage1",
        "stage2",
    ];

    pub fn values(&self) -> [f64; 5] {
        [
            self.candidates,
            self.selection,
            self.local_grasps,
            self.stage1,
            self.stage2,
        ]
    }

    pub fn total(&self) -> f64 {
        self.values().iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidatesOutcome {
    pub k: usize,
    pub view: u32,
    pub cloud_points: usize,
    pub filtered_points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub robots: usize,
    pub labels: Vec<u32>,
    pub mode: String,
    pub total: f64,
    pub omega: Option<f64>,
    pub msv: Option<f64>,
    pub f_max: Option<f64>,
    pub grounding_success: Option<bool>,
    pub fallback: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Outcome {
    /// Planned duration (s), not wall clock.
    pub duration: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Outcome {
    pub duration: f64,
    pub samples: usize,
    pub replans: usize,
    pub blocked: usize,
    pub check: TrajectoryCheck,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageOutcomes {
    pub candidates: Option<CandidatesOutcome>,
    pub selection: Option<SelectionOutcome>,
    /// Source of each robot's grasp.
    pub local_grasps: Option<Vec<GraspSource>>,
    pub stage1: Option<Stage1Outcome>,
    pub stage2: Option<Stage2Outcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: Task,
    pub scene_seed: u64,
    pub seed: u64,
    pub mode: String,
    pub success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<FailureCategory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub stages: StageOutcomes,
    /// Kept out of the written record so it stays reproducible; stored in
    /// its own file instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<StageTimings>,
}

impl RunRecord {
    /// The record without wall-clock data.
    pub fn reproducible(&self) -> RunRecord {
        RunRecord {
            timings: None,
            ..self.clone()
        }
    }
}

pub struct RunInputs<'a> {
    pub spec: &'a SceneSpec,
    pub scene: &'a Scene,
    pub task: &'a Task,
    pub robot: &'a RobotModel,
    pub advisor: Option<&'a AdvisorSetup>,
    pub config: &'a RunConfig,
    pub seed: u64,
}

pub struct RunOutput {
    pub record: RunRecord,
    /// Stage artifacts in pipeline order (empty unless requested).
    pub artifacts: Vec<Artifact>,
}

/// Runs every stage, recording outcomes until the first failure. Stage
/// failures end up in the record; only input errors are returned.
pub fn execute_run(inputs: &RunInputs, keep_artifacts: bool) -> Result<RunOutput, CliError> {
    crate::pipeline::validate_task(inputs.task, inputs.scene)?;
    let mut record = RunRecord {
        task: inputs.task.clone(),
        scene_seed: inputs.spec.seed,
        seed: inputs.seed,
        mode: if inputs.advisor.is_some() {
            "advisor"
        } else {
            "scorer"
        }
        .into(),
        success: false,
        failure: None,
        error: None,
        stages: StageOutcomes::default(),
        timings: None,
    };
    let mut timings = StageTimings::default();
    let mut artifacts = Vec::new();
    let result = run_stages(
        inputs,
        &mut record,
        &mut timings,
        &mut artifacts,
        keep_artifacts,
    );
    match result {
        Ok(()) => record.success = true,
        Err(e) => match e.category.failure() {
            Some(f) => {
                record.failure = Some(f);
                record.error = Some(e.message);
            }
            None => return Err(e),
        },
    }
    record.timings = Some(timings);
    Ok(RunOutput { record, artifacts })
}

fn run_stages(
    inputs: &RunInputs,
    record: &mut RunRecord,
    timings: &mut StageTimings,
    artifacts: &mut Vec<Artifact>,
    keep: bool,
) -> Result<(), CliError> {
    let mut keep_all = |a: Vec<Artifact>| {
        if keep {
            artifacts.extend(a);
        }
    };
    keep_all(scene_artifacts(inputs.spec, inputs.scene));

    let clock = Instant::now();
    let cands = candidates_stage(
        inputs.scene,
        inputs.task,
        inputs.robot,
        inputs.config,
        inputs.seed,
    );
    timings.candidates = clock.elapsed().as_secs_f64();
    let cands = cands?;
    record.stages.candidates = Some(CandidatesOutcome {
        k: cands.artifact.set.k(),
        view: cands.artifact.set.view,
        cloud_points: cands.artifact.cloud_points,
        filtered_points: cands.artifact.filtered_points,
    });
    if keep {
        keep_all(cands.artifacts());
    }

    let clock = Instant::now();
    let selection = selection_stage(
        inputs.scene,
        inputs.task,
        inputs.robot,
        &cands.artifact,
        inputs.advisor,
        inputs.config,
    );
    timings.selection = clock.elapsed().as_secs_f64();
    let selection = selection?;
    let s = &selection.report.scores;
    record.task = selection.task.clone();
    record.stages.selection = Some(SelectionOutcome {
        robots: selection.robots,
        labels: selection.report.labels.clone(),
        mode: selection.report.mode.clone(),
        total: selection.report.total,
        omega: s.omega,
        msv: s.msv,
        f_max: s.f_max,
        grounding_success: selection.report.grounding_success,
        fallback: selection.report.fallback.clone(),
    });
    keep_all(selection.artifacts());

    let clock = Instant::now();
    let grasps = grasps_stage(
        inputs.scene,
        &selection,
        inputs.robot,
        &cands.cloud,
        &cands.artifact.set,
        inputs.config,
        inputs.seed,
    );
    timings.local_grasps = clock.elapsed().as_secs_f64();
    let grasps = grasps?;
    record.stages.local_grasps = Some(grasps.robots.iter().map(|g| g.source).collect());
    keep_all(grasps.artifacts());

    let (plan, t) = plan_stage(
        inputs.scene,
        &selection.task,
        inputs.robot,
        &grasps,
        inputs.config,
        inputs.seed,
    );
    timings.stage1 = t.stage1;
    timings.stage2 = t.stage2;
    let plan = plan?;
    let traj = &plan.trajectory;
    record.stages.stage1 = Some(Stage1Outcome {
        duration: traj.stage1_times.last().copied().unwrap_or(0.0),
        samples: traj.stage1_times.len(),
    });
    record.stages.stage2 = Some(Stage2Outcome {
        duration: traj.duration() - traj.times.first().copied().unwrap_or(0.0),
        samples: traj.times.len(),
        replans: traj.replans,
        blocked: traj.blocked.len(),
        check: plan.check.clone(),
    });
    keep_all(plan.artifacts());
    Ok(())
}
