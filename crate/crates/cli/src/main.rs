use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use collab_cli::collab_core::advisor::AblationArm;
use collab_cli::commands::{self, AdvisorArgs, Common, RunArgs, ERROR_FILE};
use collab_cli::CliError;

#[derive(Parser)]
#[command(
    name = "collab",
    version,
    about = "Collaborative multi-robot grasping and transport pipeline"
)]
struct Cli {
    /// Worker threads (1 = single-threaded, bit-reproducible).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Robot model (TOML); defaults to the built-in mobile manipulator.
    #[arg(long, global = true)]
    robot: Option<PathBuf>,
    /// Run configuration (JSON); every field is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Scorer,
    Advisor,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arm {
    WithoutAbc,
    WithoutBc,
    WithoutB,
    WithoutC,
    Full,
}

impl From<Arm> for AblationArm {
    fn from(a: Arm) -> Self {
        match a {
            Arm::WithoutAbc => AblationArm::WithoutAbc,
            Arm::WithoutBc => AblationArm::WithoutBc,
            Arm::WithoutB => AblationArm::WithoutB,
            Arm::WithoutC => AblationArm::WithoutC,
            Arm::Full => AblationArm::Full,
        }
    }
}

#[derive(clap::Args)]
struct Selector {
    #[arg(long, value_enum, default_value = "scorer")]
    mode: Mode,
    /// HTTP endpoint of the external advisor (token from COLLAB_ADVISOR_TOKEN).
    #[arg(long)]
    advisor_endpoint: Option<String>,
    /// Prompt blocks sent to the advisor.
    #[arg(long, value_enum)]
    arm: Option<Arm>,
}

impl Selector {
    fn args(&self) -> AdvisorArgs {
        AdvisorArgs {
            endpoint: self.advisor_endpoint.clone(),
            arm: self.arm.map(Into::into),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a scene and write its normalized spec and object summary.
    Scene {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Render, extract the object cloud and produce labelled grasp candidates.
    Candidates {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Choose one candidate per robot.
    Select {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[command(flatten)]
        selector: Selector,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Wrench-space metrics of a saved contact set.
    Eval {
        #[arg(long)]
        contacts: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Local grasps, start poses and the two-stage motion plan.
    Plan {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        selection: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// The whole pipeline with a run record.
    Run {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        selector: Selector,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Randomized benchmark over a task suite (the built-in five-task suite by default).
    Bench {
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Restrict to these task names.
        #[arg(long = "only", value_delimiter = ',')]
        only: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Top-view SVG of the scene, object path, robot paths and grasps.
    Plot {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        trajectory: Option<PathBuf>,
        #[arg(long)]
        grasps: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

impl Command {
    fn out_dir(&self) -> &PathBuf {
        match self {
            Command::Scene { out_dir, .. }
            | Command::Candidates { out_dir, .. }
            | Command::Select { out_dir, .. }
            | Command::Eval { out_dir, .. }
            | Command::Plan { out_dir, .. }
            | Command::Run { out_dir, .. }
            | Command::Bench { out_dir, .. }
            | Command::Plot { out_dir, .. } => out_dir,
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32, CliError> {
    let common = Common {
        robot: cli.robot.clone(),
        config: cli.config.clone(),
    };
    match &cli.command {
        Command::Scene { scene, out_dir } => commands::cmd_scene(scene, out_dir)?,
        Command::Candidates {
            scene,
            task,
            seed,
            out_dir,
        } => commands::cmd_candidates(scene, task, *seed, out_dir, &common)?,
        Command::Select {
            scene,
            task,
            candidates,
            selector,
            out_dir,
        } => commands::cmd_select(
            scene,
            task,
            candidates,
            selector.mode == Mode::Advisor,
            &selector.args(),
            out_dir,
            &common,
        )?,
        Command::Eval { contacts, out_dir } => commands::cmd_eval(contacts, out_dir)?,
        Command::Plan {
            scene,
            selection,
            candidates,
            seed,
            out_dir,
        } => commands::cmd_plan(scene, selection, candidates, *seed, out_dir, &common)?,
        Command::Run {
            scene,
            task,
            seed,
            selector,
            out_dir,
        } => {
            let record = commands::cmd_run(&RunArgs {
                scene,
                task,
                seed: *seed,
                out_dir,
                use_advisor: selector.mode == Mode::Advisor,
                advisor: &selector.args(),
                common: &common,
            })?;
            match (&record.failure, &record.error) {
                (Some(f), Some(e)) => eprintln!("run failed ({}): {e}", f.as_str()),
                _ => eprintln!("run succeeded"),
            }
            return Ok(commands::run_exit_code(&record));
        }
        Command::Bench {
            suite,
            trials,
            seed,
            only,
            out_dir,
        } => {
            let report = commands::cmd_bench(
                suite.as_deref(),
                *trials,
                *seed,
                cli.threads,
                only,
                out_dir,
                &common,
            )?;
            for t in &report.tasks {
                eprintln!("{:<12} {}/{}", t.name, t.successes, t.trials);
            }
            eprintln!("overall      {}/{}", report.successes, report.runs);
        }
        Command::Plot {
            scene,
            task,
            trajectory,
            grasps,
            out_dir,
        } => commands::cmd_plot(
            scene,
            task,
            trajectory.as_deref(),
            grasps.as_deref(),
            out_dir,
        )?,
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
    {
        eprintln!("thread pool: {e}");
    }
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            let json = e.to_json();
            eprint!("{json}");
            let dir = cli.command.out_dir();
            if dir.is_dir() {
                let _ = std::fs::write(dir.join(ERROR_FILE), &json);
            }
            ExitCode::from(e.category.exit_code() as u8)
        }
    }
}
