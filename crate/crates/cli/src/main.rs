use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use agps_core::env::{EnvConfig, Task};
use agps_core::harness::{self, Baseline, ExperimentSpec};
use agps_core::orchestrator::{AgentKind, RunConfig};
use agps_core::Error;

#[derive(Parser)]
#[command(name = "agps", version, about = "Agent-guided policy search experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate scripted expert demonstrations.
    DemoGen {
        #[arg(long, default_value = "insertion")]
        task: Task,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "demos.jsonl")]
        out: PathBuf,
    },
    /// Train one baseline over a list of seeds.
    Train(RunArgs),
    /// Evaluate a checkpoint, or the scripted expert, with the deterministic policy.
    Eval {
        #[arg(long, required_unless_present = "expert")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        expert: bool,
        #[arg(long, default_value = "insertion")]
        task: Task,
        /// Resolved run config; defaults to `config.json` next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Paired runs with the episodic memory on and off.
    AblateMemory(RunArgs),
    /// Q landscape of a checkpoint with the oracle box overlaid.
    ExportQmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 41)]
        grid: usize,
        #[arg(long, default_value = "qmap")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "insertion")]
    task: Task,
    #[arg(long, default_value = "agps")]
    baseline: Baseline,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    agent: Option<AgentKind>,
    #[arg(long)]
    remote_url: Option<String>,
    /// Run the learner inline; forced on for reproducible output.
    #[arg(long, default_missing_value = "true", num_args = 0..=1)]
    single_threaded: Option<bool>,
    /// TOML config layers, applied in order over the task defaults.
    #[arg(long = "config")]
    configs: Vec<PathBuf>,
    /// Demo file; generated from each seed when absent.
    #[arg(long)]
    demos: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

impl RunArgs {
    fn spec(&self, name: &str) -> agps_core::Result<ExperimentSpec> {
        let mut cfg = harness::load_run_config(self.task, &self.configs)?;
        if let Some(b) = self.budget {
            cfg.budget_steps = b;
        }
        if let Some(a) = self.agent {
            cfg.agent = a;
        }
        if let Some(u) = &self.remote_url {
            cfg.remote.base_url = u.clone();
        }
        if let Some(s) = self.single_threaded {
            cfg.single_threaded = s;
        }
        let mut spec = ExperimentSpec::new(name, cfg, self.seeds.clone(), self.baseline);
        spec.out_dir = Some(self.out.clone());
        spec.validate()?;
        Ok(spec)
    }

    fn demos(&self) -> agps_core::Result<Option<agps_core::env::DemoSet>> {
        self.demos.as_deref().map(harness::load_demos).transpose()
    }
}

fn run_config_near(checkpoint: &Path, explicit: Option<&Path>) -> agps_core::Result<Option<RunConfig>> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => match checkpoint.parent() {
            Some(dir) if dir.join("config.json").exists() => dir.join("config.json"),
            _ => return Ok(None),
        },
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(Some(serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?))
}

fn run(cli: Cli) -> agps_core::Result<ExitCode> {
    match cli.cmd {
        Cmd::DemoGen { task, n, seed, out } => {
            let d = harness::cmd_demo_gen(task, n, seed, &out)?;
            println!("wrote {} demos ({} transitions) to {}", d.episodes.len(), d.len(), out.display());
        }
        Cmd::Train(args) => {
            let spec = args.spec(&format!("train_{}", args.baseline))?;
            let archive = harness::cmd_train(&spec, args.demos()?.as_ref())?;
            for r in &archive.runs {
                println!(
                    "seed {}: final success {:?}, {} triggers, {} env steps",
                    r.seed,
                    r.metrics.final_success_rate(),
                    r.metrics.triggers.len(),
                    r.metrics.env_steps
                );
            }
            let f = archive.final_success;
            println!("median final success {:.2} (IQR {:.2}); outputs in {}", f.median, f.iqr(), args.out.display());
            let aborted = archive.aborted();
            if !aborted.is_empty() {
                for (seed, why) in aborted {
                    eprintln!("seed {seed} aborted: {why}");
                }
                return Ok(ExitCode::from(1));
            }
        }
        Cmd::Eval { checkpoint, expert, task, config, n, seed } => {
            let rate = if expert {
                let env = match config {
                    Some(p) => run_config_near(&p, Some(&p))?.map(|c| c.env).unwrap_or_else(|| EnvConfig::for_task(task)),
                    None => EnvConfig::for_task(task),
                };
                harness::cmd_eval_expert(&env, n, seed)?
            } else {
                let ck = checkpoint.expect("clap enforces --checkpoint");
                let env = run_config_near(&ck, config.as_deref())?.map(|c| c.env);
                harness::cmd_eval(&ck, env.as_ref(), n, seed)?
            };
            println!("success rate {rate:.3} over {n} episodes");
        }
        Cmd::AblateMemory(args) => {
            let spec = args.spec("ablate_memory")?;
            let ab = harness::cmd_ablate_memory(&spec, args.demos()?.as_ref())?;
            for s in &ab.seeds {
                println!(
                    "seed {}: fresh calls {} (memory) vs {} (no memory), speedup {:?}",
                    s.seed, s.fresh_calls_on, s.fresh_calls_off, s.speedup
                );
            }
        }
        Cmd::ExportQmap { checkpoint, config, grid, out } => {
            if !checkpoint.exists() {
                return Err(Error::Config(format!("checkpoint {} does not exist", checkpoint.display())));
            }
            let cfg = run_config_near(&checkpoint, config.as_deref())?.unwrap_or_default();
            let r = harness::cmd_export_qmap(&checkpoint, &cfg, None, grid)?;
            r.write(&out)?;
            println!(
                "argmax ({:.4}, {:.4}, {:.4}) is {:.4} m from the box centre (half-diagonal {:.4}); wrote {}",
                r.argmax[0],
                r.argmax[1],
                r.argmax[2],
                r.distance,
                r.half_diagonal,
                out.display()
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
