//! `atr`: train and evaluate task-randomization curricula from the command line.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use atr_core::harness::eval::{evaluate_actor, LearnedActor, OracleActors, SkillActor};
use atr_core::harness::gradcheck::{run_gradcheck, TOLERANCE};
use atr_core::harness::sequential::{families, run_sequential_eval, MAX_STEPS};
use atr_core::harness::{continue_training, load_policies, replay_log, EvalSuite, ExperimentConfig, Trainer};
use atr_core::policy::ActMode;
use atr_core::rng::seeded;
use atr_core::sampler::SamplerMode;
use atr_core::symbolic::{plan, PlanProblem};
use atr_core::taskspace::{sample_prior, Skill};

#[derive(Parser)]
#[command(name = "atr", version, about = "Active task randomization for tabletop skill learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// atr, uniform, feasibility-only or diversity-only.
    #[arg(long)]
    mode: Option<SamplerMode>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(m) = self.mode {
            c.mode = m;
        }
        if let Some(o) = &self.out {
            c.out_dir = Some(o.clone());
        }
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train skill policies and the task sampler.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        checkpoint_interval: Option<usize>,
        /// Continue from a checkpoint written with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-skill success on the shipped single-step suite.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint holding the policies.
        #[arg(long, conflicts_with = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the geometric oracle instead.
        #[arg(long)]
        oracle: bool,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
    },
    /// Closed-loop success on the sequential benchmark families.
    SeqEval {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        oracle: bool,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = MAX_STEPS)]
        max_steps: usize,
    },
    /// Print tasks drawn from the prior, one JSON record per line.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, short = 'n', default_value_t = 10)]
        count: usize,
    },
    /// Plan for a scene and goal given in a TOML file.
    Plan { problem: PathBuf },
    /// Re-execute an episode log and check every recorded outcome.
    Replay {
        #[command(flatten)]
        common: Common,
        log: PathBuf,
    },
    /// Finite-difference check of the sampler and policy gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
}

fn write_out(dir: Option<&Path>, name: &str, text: &str) -> Result<()> {
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
        fs::write(d.join(name), text)?;
    }
    Ok(())
}

fn actor<'a>(checkpoint: Option<&Path>, oracle: bool, store: &'a mut Vec<atr_core::policy::PolicyModel>) -> Result<Box<dyn SkillActor + 'a>> {
    if oracle {
        return Ok(Box::new(OracleActors));
    }
    let Some(path) = checkpoint else { bail!("give --checkpoint <file> or --oracle") };
    *store = load_policies(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Box::new(LearnedActor { policies: store, mode: ActMode::Sample }))
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Train { common, iterations, checkpoint_interval, resume } => {
            let mut c = common.config()?;
            if let Some(n) = iterations {
                c.iterations = n;
            }
            if let Some(n) = checkpoint_interval {
                c.checkpoint_interval = n;
            }
            let trainer = match &resume {
                Some(p) => Trainer::load_checkpoint(p, c).with_context(|| format!("resuming from {}", p.display()))?,
                None => Trainer::new(c)?,
            };
            let out = continue_training(trainer)?;
            if out.trainer.config.out_dir.is_none() {
                print!("{}", atr_core::harness::metrics_csv(&out.metrics));
            }
            if let Some(last) = out.metrics.last() {
                for s in Skill::ALL {
                    eprintln!("{:<13} {:.3}", s.name(), last.success[s.index()]);
                }
            }
        }
        Command::Eval { common, checkpoint, oracle, episodes } => {
            let c = common.config()?;
            let mut store = Vec::new();
            let a = actor(checkpoint.as_deref(), oracle, &mut store)?;
            let suite = EvalSuite::shipped()?;
            let rates = evaluate_actor(a.as_ref(), &suite, episodes, c.seed, &c.world);
            let mut text = String::from("skill,success\n");
            for s in Skill::ALL {
                text += &format!("{},{:.4}\n", s.name(), rates[s.index()]);
            }
            print!("{text}");
            write_out(c.out_dir.as_deref(), "eval.csv", &text)?;
        }
        Command::SeqEval { common, checkpoint, oracle, trials, max_steps } => {
            let c = common.config()?;
            let mut store = Vec::new();
            let a = actor(checkpoint.as_deref(), oracle, &mut store)?;
            let results = run_sequential_eval(a.as_ref(), &families(), trials, c.seed, &c.world, max_steps);
            let text = serde_json::to_string_pretty(&results)?;
            println!("{text}");
            write_out(c.out_dir.as_deref(), "seq_eval.json", &text)?;
        }
        Command::Sample { common, count } => {
            let c = common.config()?;
            let mut rng = seeded(c.seed);
            let stdout = io::stdout();
            let mut out = BufWriter::new(stdout.lock());
            for _ in 0..count {
                writeln!(out, "{}", serde_json::to_string(&sample_prior(&mut rng, &c.prior)?)?)?;
            }
        }
        Command::Plan { problem } => {
            let text = fs::read_to_string(&problem).with_context(|| format!("reading {}", problem.display()))?;
            let p = PlanProblem::from_toml(&text)?;
            for step in plan(&p.graph, &p.goal)? {
                println!("{step}");
            }
        }
        Command::Replay { common, log } => {
            let c = common.config()?;
            let n = replay_log(&log, &c.world)?;
            println!("replayed {n} episodes");
        }
        Command::Gradcheck { seed, instances } => {
            let report = run_gradcheck(instances, seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.passed() {
                eprintln!("max relative error {:.3e} exceeds {TOLERANCE:e}", report.max_rel_err);
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
