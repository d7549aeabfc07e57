//! Randomized benchmark suite: every task is run for a number of trials,
//! each with its own scene jitter, candidate clustering and robot start poses.

use std::collections::BTreeMap;

use collab_core::rng::SeedStream;
use collab_core::select::Task;
use collab_core::{RobotModel, SceneSpec};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, FailureCategory};
use crate::pipeline::{build_scene, PlacementConfig, RunConfig};
use crate::record::{execute_run, RunInputs, RunRecord, StageTimings};

pub const REPORT_FILE: &str = "bench-report.json";
pub const TIMINGS_FILE: &str = "bench-timings.json";

/// The built-in five-task suite.
pub const DEFAULT_SUITE: &str = include_str!("../suites/default.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Suite {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub tasks: Vec<SuiteTask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteTask {
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// Base scene; its seed is replaced per trial so object jitter varies.
    pub scene: SceneSpec,
    pub task: Task,
    /// Number of candidate grasp points, K.
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub placement: PlacementConfig,
    /// Extra success criterion on the final object pose: (m, rad) from the
    /// goal.
    #[serde(default)]
    pub goal_tolerance: Option<[f64; 2]>,
}

impl Suite {
    pub fn builtin() -> Suite {
        crate::io::parse_json(DEFAULT_SUITE, std::path::Path::new("suites/default.json"))
            .expect("built-in suite parses")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaperReference {
    pub overall_success: f64,
    pub per_task: BTreeMap<String, String>,
    pub note: String,
}

impl Default for PaperReference {
    fn default() -> Self {
        let per_task = [
            ("TABLE", "3/5"),
            ("CHAIR", "3/5"),
            ("Flip TABLE", "1/5"),
            ("Align", "4/5"),
            ("TABLE-3", "2/5"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        Self {
            overall_success: 0.52,
            per_task,
            note: "Published success with real foundation models and hardware. Context only: not reproducible here and not a target."
                .into(),
        }
    }
}

/// Failure counts in the three fixed buckets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FailureHistogram {
    pub grasp_generation: usize,
    pub planning: usize,
    pub perception: usize,
}

impl FailureHistogram {
    pub fn add(&mut self, f: FailureCategory) {
        match f {
            FailureCategory::GraspGeneration => self.grasp_generation += 1,
            FailureCategory::Planning => self.planning += 1,
            FailureCategory::Perception => self.perception += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.grasp_generation + self.planning + self.perception
    }
}

/// Order statistics of a sample; all `None` when empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub count: usize,
    pub min: Option<f64>,
    pub median: Option<f64>,
    pub mean: Option<f64>,
    pub max: Option<f64>,
}

impl Distribution {
    pub fn of(values: &[f64]) -> Self {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n == 0 {
            return Self::default();
        }
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        Self {
            count: n,
            min: Some(v[0]),
            median: Some(median),
            mean: Some(v.iter().sum::<f64>() / n as f64),
            max: Some(v[n - 1]),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricDistributions {
    pub f_max: Distribution,
    pub omega: Distribution,
    pub msv: Distribution,
    pub replans: Distribution,
    /// Planned stage-2 duration (s) of successful runs.
    pub stage2_duration: Distribution,
}

impl MetricDistributions {
    fn of<'a>(records: impl Iterator<Item = &'a RunRecord> + Clone) -> Self {
        let sel = |f: fn(&crate::record::SelectionOutcome) -> Option<f64>| -> Vec<f64> {
            records
                .clone()
                .filter_map(|r| r.stages.selection.as_ref().and_then(f))
                .collect()
        };
        let s2 = |f: fn(&crate::record::Stage2Outcome) -> f64| -> Vec<f64> {
            records
                .clone()
                .filter_map(|r| r.stages.stage2.as_ref().map(f))
                .collect()
        };
        Self {
            f_max: Distribution::of(&sel(|s| s.f_max)),
            omega: Distribution::of(&sel(|s| s.omega)),
            msv: Distribution::of(&sel(|s| s.msv)),
            replans: Distribution::of(&s2(|s| s.replans as f64)),
            stage2_duration: Distribution::of(&s2(|s| s.duration)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial: usize,
    pub seed: u64,
    pub success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<FailureCategory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub name: String,
    pub robots: Option<usize>,
    pub successes: usize,
    pub trials: usize,
    pub success_rate: f64,
    pub failures: FailureHistogram,
    pub metrics: MetricDistributions,
    pub runs: Vec<TrialSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub suite: String,
    pub paper_reference: PaperReference,
    pub seed: u64,
    pub trials: usize,
    pub mode: String,
    pub successes: usize,
    pub runs: usize,
    pub success_rate: f64,
    /// Failure counts and their shares of all failures.
    pub failures: FailureHistogram,
    pub failure_shares: BTreeMap<FailureCategory, f64>,
    pub metrics: MetricDistributions,
    pub tasks: Vec<TaskReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialTimings {
    pub task: String,
    pub trial: usize,
    pub timings: StageTimings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchTimings {
    pub stages: Vec<String>,
    /// Mean seconds per stage over all trials.
    pub mean: StageTimings,
    pub per_task_mean: BTreeMap<String, StageTimings>,
    pub trials: Vec<TrialTimings>,
    pub threads: usize,
    pub wall_clock: f64,
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub trials: usize,
    pub seed: u64,
    pub threads: usize,
    pub config: RunConfig,
}

pub fn trial_seed(seed: u64, task: &str, trial: usize) -> u64 {
    SeedStream::new(seed).child(task, trial as u64).seed()
}

/// One isolated trial.
pub fn run_trial(
    task: &SuiteTask,
    trial: usize,
    opts: &BenchOptions,
    robot: &RobotModel,
) -> Result<RunRecord, CliError> {
    let seed = trial_seed(opts.seed, &task.name, trial);
    let mut spec = task.scene.clone();
    spec.seed = SeedStream::new(seed).child("scene", 0).seed();
    let scene = build_scene(&spec)?;
    let mut config = opts.config.clone();
    if let Some(k) = task.k {
        config.candidates.k = k;
    }
    config.placement = task.placement.clone();
    let inputs = RunInputs {
        spec: &spec,
        scene: &scene,
        task: &task.task,
        robot,
        advisor: None,
        config: &config,
        seed,
    };
    let mut record = execute_run(&inputs, false)?.record;
    if let (true, Some(tol), Some(s2)) =
        (record.success, task.goal_tolerance, &record.stages.stage2)
    {
        let [dt, dr] = s2.check.end_error;
        if dt > tol[0] || dr > tol[1] {
            record.success = false;
            record.failure = Some(FailureCategory::Planning);
            record.error = Some(format!("final pose {dt:.3} m / {dr:.3} rad from the goal"));
        }
    }
    Ok(record)
}

fn mean_timings<'a>(t: impl Iterator<Item = &'a StageTimings>) -> StageTimings {
    let mut sum = [0.0; 5];
    let mut n = 0usize;
    for x in t {
        for (s, v) in sum.iter_mut().zip(x.values()) {
            *s += v;
        }
        n += 1;
    }
    let d = n.max(1) as f64;
    StageTimings {
        candidates: sum[0] / d,
        selection: sum[1] / d,
        local_grasps: sum[2] / d,
        stage1: sum[3] / d,
        stage2: sum[4] / d,
    }
}

/// Runs the suite. Trials execute in a pool of `threads` workers; results
/// are aggregated in task/trial order so the report is independent of
/// scheduling.
pub fn run_bench(
    suite: &Suite,
    opts: &BenchOptions,
    robot: &RobotModel,
) -> Result<(BenchReport, BenchTimings), CliError> {
    for t in &suite.tasks {
        let scene =
            build_scene(&t.scene).map_err(|e| e.at_path(format!("tasks.{}.scene", t.name)))?;
        crate::pipeline::validate_task(&t.task, &scene)
            .map_err(|e| e.at_path(format!("tasks.{}.task", t.name)))?;
    }
    let jobs: Vec<(usize, usize)> = (0..suite.tasks.len())
        .flat_map(|i| (0..opts.trials).map(move |k| (i, k)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.max(1))
        .build()
        .map_err(|e| CliError::input(e.to_string()))?;
    let clock = std::time::Instant::now();
    let results: Vec<Result<RunRecord, CliError>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, k)| run_trial(&suite.tasks[i], k, opts, robot))
            .collect()
    });
    let wall_clock = clock.elapsed().as_secs_f64();
    let records: Vec<RunRecord> = results.into_iter().collect::<Result<_, _>>()?;

    let mut tasks = Vec::new();
    let mut trial_timings = Vec::new();
    let mut per_task_mean = BTreeMap::new();
    let mut failures = FailureHistogram::default();
    for (i, task) in suite.tasks.iter().enumerate() {
        let recs: Vec<&RunRecord> = records[i * opts.trials..(i + 1) * opts.trials]
            .iter()
            .collect();
        let mut hist = FailureHistogram::default();
        for r in &recs {
            if let Some(f) = r.failure {
                hist.add(f);
                failures.add(f);
            }
        }
        let successes = recs.iter().filter(|r| r.success).count();
        tasks.push(TaskReport {
            name: task.name.clone(),
            robots: recs
                .iter()
                .find_map(|r| r.task.allocated)
                .or(task.task.allocated),
            successes,
            trials: opts.trials,
            success_rate: successes as f64 / opts.trials.max(1) as f64,
            failures: hist,
            metrics: MetricDistributions::of(recs.iter().copied()),
            runs: recs
                .iter()
                .enumerate()
                .map(|(k, r)| TrialSummary {
                    trial: k,
                    seed: r.seed,
                    success: r.success,
                    failure: r.failure,
                    error: r.error.clone(),
                    labels: r.stages.selection.as_ref().map(|s| s.labels.clone()),
                })
                .collect(),
        });
        for (k, r) in recs.iter().enumerate() {
            trial_timings.push(TrialTimings {
                task: task.name.clone(),
                trial: k,
                timings: r.timings.unwrap_or_default(),
            });
        }
        per_task_mean.insert(
            task.name.clone(),
            mean_timings(recs.iter().filter_map(|r| r.timings.as_ref())),
        );
    }
    let successes = records.iter().filter(|r| r.success).count();
    let total_failures = failures.total().max(1) as f64;
    let failure_shares = [
        (FailureCategory::GraspGeneration, failures.grasp_generation),
        (FailureCategory::Planning, failures.planning),
        (FailureCategory::Perception, failures.perception),
    ]
    .into_iter()
    .map(|(k, n)| (k, n as f64 / total_failures))
    .collect();
    let report = BenchReport {
        suite: suite.name.clone(),
        paper_reference: PaperReference::default(),
        seed: opts.seed,
        trials: opts.trials,
        mode: "scorer".into(),
        successes,
        runs: records.len(),
        success_rate: successes as f64 / records.len().max(1) as f64,
        failures,
        failure_shares,
        metrics: MetricDistributions::of(records.iter()),
        tasks,
    };
    let timings = BenchTimings {
        stages: StageTimings::STAGES.iter().map(|s| s.to_string()).collect(),
        mean: mean_timings(records.iter().filter_map(|r| r.timings.as_ref())),
        per_task_mean,
        trials: trial_timings,
        threads: opts.threads.max(1),
        wall_clock,
    };
    Ok((report, timings))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_suite_has_five_tasks() {
        let s = Suite::builtin();
        let names: Vec<&str> = s.tasks.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, ["TABLE", "CHAIR", "Flip TABLE", "Align", "TABLE-3"]);
        for t in &s.tasks {
            let scene = build_scene(&t.scene).unwrap();
            crate::pipeline::validate_task(&t.task, &scene).unwrap();
        }
        assert_eq!(s.tasks[4].k, Some(15));
        assert_eq!(s.tasks[4].task.allocated, Some(3));
        assert_eq!(s.tasks[3].goal_tolerance, Some([0.1, 0.2]));
    }

    #[test]
    fn distribution_statistics() {
        let d = Distribution::of(&[3.0, 1.0, 2.0, f64::NAN, 10.0]);
        assert_eq!(d.count, 4);
        assert_eq!(d.min, Some(1.0));
        assert_eq!(d.median, Some(2.5));
        assert_eq!(d.mean, Some(4.0));
        assert_eq!(d.max, Some(10.0));
        assert_eq!(Distribution::of(&[]), Distribution::default());
    }

    #[test]
    fn histogram_buckets() {
        let mut h = FailureHistogram::default();
        h.add(FailureCategory::Planning);
        h.add(FailureCategory::Planning);
        h.add(FailureCategory::Perception);
        assert_eq!(
            (h.grasp_generation, h.planning, h.perception, h.total()),
            (0, 2, 1, 3)
        );
    }
}
