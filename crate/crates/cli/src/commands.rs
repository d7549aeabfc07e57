//! Subcommand implementations. Each writes its artifacts under the output
//! directory and merges them into the manifest.

use std::path::{Path, PathBuf};

use collab_core::advisor::{AblationArm, AdvisorConfig, PromptConfig};
use collab_core::metrics::{evaluate, ContactSet};
use collab_core::planner::Trajectory;
use collab_core::select::Task;
use collab_core::RobotModel;

use crate::bench::{
    run_bench, BenchOptions, Suite, REPORT_FILE, TIMINGS_FILE as BENCH_TIMINGS_FILE,
};
use crate::error::{CliError, ErrorCategory};
use crate::io::{read_json, OutDir};
use crate::pipeline::{
    candidates_stage, grasps_stage, load_candidates, load_scene, plan_stage, scene_artifacts,
    selection_stage, validate_task, AdvisorSetup, Artifact, GraspsArtifact, RunConfig,
    SelectionArtifact,
};
use crate::plot::plot_svg;
use crate::record::{execute_run, RunInputs, RunRecord, RECORD_FILE, TIMINGS_FILE};

pub const METRICS_FILE: &str = "metrics.json";
pub const PLOT_FILE: &str = "plot.svg";
pub const ERROR_FILE: &str = "error.json";

/// Options shared by the pipeline subcommands.
#[derive(Clone, Debug, Default)]
pub struct Common {
    pub robot: Option<PathBuf>,
    pub config: Option<PathBuf>,
}

impl Common {
    pub fn robot(&self) -> Result<RobotModel, CliError> {
        match &self.robot {
            Some(p) => RobotModel::load(p).map_err(|e| CliError::input(e.to_string()).in_file(p)),
            None => Ok(RobotModel::default()),
        }
    }

    pub fn config(&self) -> Result<RunConfig, CliError> {
        match &self.config {
            Some(p) => read_json(p),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct AdvisorArgs {
    pub endpoint: Option<String>,
    pub arm: Option<AblationArm>,
}

impl AdvisorArgs {
    fn setup(
        &self,
        use_advisor: bool,
        image_path: Option<PathBuf>,
        object_label: &str,
    ) -> Result<Option<AdvisorSetup>, CliError> {
        if !use_advisor {
            return Ok(None);
        }
        let url = self
            .endpoint
            .as_deref()
            .ok_or_else(|| CliError::input("--mode advisor requires --advisor-endpoint"))?;
        Ok(Some(AdvisorSetup {
            config: AdvisorConfig::new(url),
            prompt: self.arm.map(|a| PromptConfig::arm(a, object_label)),
            image_path,
        }))
    }
}

fn write_all(out: &mut OutDir, artifacts: &[Artifact]) -> Result<(), CliError> {
    artifacts
        .iter()
        .try_for_each(|(name, bytes)| out.write(name, bytes))
}

fn load_task(file: &Path) -> Result<Task, CliError> {
    read_json(file)
}

pub fn cmd_scene(scene: &Path, out_dir: &Path) -> Result<(), CliError> {
    let (spec, scene) = load_scene(scene)?;
    let mut out = OutDir::create(out_dir, "scene")?;
    write_all(&mut out, &scene_artifacts(&spec, &scene))?;
    out.finish()?;
    Ok(())
}

pub fn cmd_candidates(
    scene: &Path,
    task: &Path,
    seed: u64,
    out_dir: &Path,
    common: &Common,
) -> Result<(), CliError> {
    let (_, scene) = load_scene(scene)?;
    let task = load_task(task)?;
    validate_task(&task, &scene)?;
    let output = candidates_stage(&scene, &task, &common.robot()?, &common.config()?, seed)?;
    let mut out = OutDir::create(out_dir, "candidates")?;
    write_all(&mut out, &output.artifacts())?;
    out.finish()?;
    Ok(())
}

pub fn cmd_select(
    scene: &Path,
    task: &Path,
    candidates: &Path,
    use_advisor: bool,
    advisor: &AdvisorArgs,
    out_dir: &Path,
    common: &Common,
) -> Result<(), CliError> {
    let (_, scene) = load_scene(scene)?;
    let task = load_task(task)?;
    validate_task(&task, &scene)?;
    let (cands, _, image_path) = load_candidates(candidates)?;
    let label = scene
        .object(task.object_id)
        .map(|o| o.label.clone())
        .unwrap_or_default();
    let setup = advisor.setup(use_advisor, Some(image_path), &label)?;
    let selection = selection_stage(
        &scene,
        &task,
        &common.robot()?,
        &cands,
        setup.as_ref(),
        &common.config()?,
    )?;
    let mut out = OutDir::create(out_dir, "select")?;
    write_all(&mut out, &selection.artifacts())?;
    out.finish()?;
    Ok(())
}

pub fn cmd_eval(contacts: &Path, out_dir: &Path) -> Result<(), CliError> {
    let cs: ContactSet = read_json(contacts)?;
    let report = evaluate(&cs).map_err(|e| CliError::input(e.to_string()).in_file(contacts))?;
    let mut out = OutDir::create(out_dir, "eval")?;
    out.write_json(METRICS_FILE, &report)?;
    out.finish()?;
    Ok(())
}

/// Local grasps, start poses, IK and both planning stages for a saved
/// selection. `grasps.json` is written before planning so a failed plan
/// can still be inspected.
pub fn cmd_plan(
    scene: &Path,
    selection: &Path,
    candidates: &Path,
    seed: u64,
    out_dir: &Path,
    common: &Common,
) -> Result<(), CliError> {
    let (_, scene) = load_scene(scene)?;
    let selection: SelectionArtifact = read_json(selection)?;
    validate_task(&selection.task, &scene)?;
    let (cands, cloud, _) = load_candidates(candidates)?;
    let robot = common.robot()?;
    let config = common.config()?;
    let mut out = OutDir::create(out_dir, "plan")?;
    let grasps = grasps_stage(
        &scene, &selection, &robot, &cloud, &cands.set, &config, seed,
    );
    let grasps = match grasps {
        Ok(g) => g,
        Err(e) => {
            out.finish()?;
            return Err(e);
        }
    };
    write_all(&mut out, &grasps.artifacts())?;
    let (plan, _) = plan_stage(&scene, &selection.task, &robot, &grasps, &config, seed);
    let result = plan.and_then(|p| write_all(&mut out, &p.artifacts()));
    out.finish()?;
    result
}

pub struct RunArgs<'a> {
    pub scene: &'a Path,
    pub task: &'a Path,
    pub seed: u64,
    pub out_dir: &'a Path,
    pub use_advisor: bool,
    pub advisor: &'a AdvisorArgs,
    pub common: &'a Common,
}

/// The whole pipeline. Stage failures are recorded in the run record and
/// reported through the returned category; the artifacts of every stage
/// that completed are still written.
pub fn cmd_run(args: &RunArgs) -> Result<RunRecord, CliError> {
    let (spec, scene) = load_scene(args.scene)?;
    let task = load_task(args.task)?;
    let label = scene
        .object(task.object_id)
        .map(|o| o.label.clone())
        .unwrap_or_default();
    let image = args.out_dir.join(crate::pipeline::LABELS_IMAGE_FILE);
    let setup = args.advisor.setup(args.use_advisor, Some(image), &label)?;
    let robot = args.common.robot()?;
    let config = args.common.config()?;
    let mut out = OutDir::create(args.out_dir, "run")?;
    let inputs = RunInputs {
        spec: &spec,
        scene: &scene,
        task: &task,
        robot: &robot,
        advisor: setup.as_ref(),
        config: &config,
        seed: args.seed,
    };
    let output = execute_run(&inputs, true)?;
    write_all(&mut out, &output.artifacts)?;
    out.write_json(RECORD_FILE, &output.record.reproducible())?;
    out.write_volatile_json(TIMINGS_FILE, &output.record.timings.unwrap_or_default())?;
    out.finish()?;
    Ok(output.record)
}

pub fn cmd_bench(
    suite: Option<&Path>,
    trials: usize,
    seed: u64,
    threads: usize,
    only: &[String],
    out_dir: &Path,
    common: &Common,
) -> Result<crate::bench::BenchReport, CliError> {
    let mut suite = match suite {
        Some(p) => read_json::<Suite>(p)?,
        None => Suite::builtin(),
    };
    if !only.is_empty() {
        if let Some(bad) = only
            .iter()
            .find(|n| !suite.tasks.iter().any(|t| &t.name == *n))
        {
            return Err(CliError::input(format!("suite has no task named '{bad}'")));
        }
        suite.tasks.retain(|t| only.contains(&t.name));
    }
    let opts = BenchOptions {
        trials,
        seed,
        threads,
        config: common.config()?,
    };
    let (report, timings) = run_bench(&suite, &opts, &common.robot()?)?;
    let mut out = OutDir::create(out_dir, "bench")?;
    out.write_json(REPORT_FILE, &report)?;
    out.write_volatile_json(BENCH_TIMINGS_FILE, &timings)?;
    out.finish()?;
    Ok(report)
}

pub fn cmd_plot(
    scene: &Path,
    task: &Path,
    trajectory: Option<&Path>,
    grasps: Option<&Path>,
    out_dir: &Path,
) -> Result<(), CliError> {
    let (_, scene) = load_scene(scene)?;
    let task = load_task(task)?;
    let trajectory: Option<Trajectory> = trajectory.map(read_json).transpose()?;
    let grasps: Option<GraspsArtifact> = grasps.map(read_json).transpose()?;
    let svg = plot_svg(&scene, &task, trajectory.as_ref(), grasps.as_ref());
    let mut out = OutDir::create(out_dir, "plot")?;
    out.write(PLOT_FILE, svg.as_bytes())?;
    out.finish()?;
    Ok(())
}

/// Exit status for a finished run: 0 on success, the stage category's code
/// otherwise.
pub fn run_exit_code(record: &RunRecord) -> i32 {
    match record.failure {
        None => 0,
        Some(f) => ErrorCategory::from(f).exit_code(),
    }
}
