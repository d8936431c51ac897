use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use i2rl_core::budget::Deadline;
use i2rl_core::confidence::{confidence_latent, trajectories_for_delta, ConfidenceParams};
use i2rl_core::experiment::{run_experiment, summarize, write_csv, ExperimentConfig};
use i2rl_core::latent::{em_solve, EmConfig};
use i2rl_core::maxent::RewardWeights;
use i2rl_core::patrol::sim::Method;
use i2rl_core::patrol::{PatrolConfig, PatrolDomain};
use i2rl_core::session::{
    run_i2rl, I2rlConfig, LlNormalization, Problem, SessionConfig, StopCriterion,
};
use i2rl_core::trajio;

#[derive(Parser)]
#[command(
    name = "i2rl",
    version,
    about = "Incremental inverse reinforcement learning on the patrol domain"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment grid and write results.csv.
    Run(RunArgs),
    /// Evaluate the confidence bounds, or the trajectories needed for a target δ.
    Confidence(ConfidenceArgs),
    /// Generate a patrol demonstration file.
    DemoGen(DemoGenArgs),
    /// Learn from a demonstration file.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct DeadlineArgs {
    /// Per-learning-call deadline in seconds of wall-clock time.
    #[arg(long, conflicts_with = "deadline_work")]
    deadline_secs: Option<f64>,
    /// Per-learning-call deadline in work units.
    #[arg(long)]
    deadline_work: Option<u64>,
}

impl DeadlineArgs {
    fn get(&self) -> Option<Deadline> {
        match (self.deadline_secs, self.deadline_work) {
            (Some(s), _) => Some(Deadline::WallSeconds(s)),
            (_, Some(w)) => Some(Deadline::Work(w)),
            _ => None,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML). Defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    #[command(flatten)]
    deadline: DeadlineArgs,
}

#[derive(Args)]
struct ConfidenceArgs {
    #[arg(long)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.0)]
    epsilon_sampling: f64,
    /// Samples per hidden completion.
    #[arg(long, default_value_t = 1000)]
    samples: u64,
    /// Number of features.
    #[arg(long)]
    k: usize,
    #[arg(long)]
    discount: f64,
    /// Demonstrated trajectories.
    #[arg(long, default_value_t = 0)]
    trajectories: u64,
    /// Report the trajectories needed to reach this δ instead.
    #[arg(long)]
    target_delta: Option<f64>,
}

#[derive(Args)]
struct DomainArgs {
    /// Experiment or domain config (TOML); the `[domain]` table is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Percentage of route cells visible to the learner.
    #[arg(long, default_value_t = 100.0)]
    observability: f64,
}

impl DomainArgs {
    fn domain(&self) -> Result<PatrolDomain> {
        let cfg = match &self.config {
            Some(p) => ExperimentConfig::from_path(p)?.domain,
            None => PatrolConfig::default(),
        };
        Ok(PatrolDomain::new(&cfg)?)
    }

    fn em(&self) -> Result<EmConfig> {
        Ok(match &self.config {
            Some(p) => ExperimentConfig::from_path(p)?.em,
            None => EmConfig::default(),
        })
    }
}

#[derive(Args)]
struct DemoGenArgs {
    #[command(flatten)]
    domain: DomainArgs,
    #[arg(long, default_value_t = 8)]
    trajectories: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    #[command(flatten)]
    domain: DomainArgs,
    /// Demonstration file.
    #[arg(long)]
    input: PathBuf,
    /// batch, incremental or incremental_random_weights.
    #[arg(long, default_value = "incremental")]
    method: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stop on a log-likelihood change at most this large.
    #[arg(long, conflicts_with = "stop_ile")]
    stop_ll: Option<f64>,
    /// Stop on an ILE improvement at most this large.
    #[arg(long)]
    stop_ile: Option<f64>,
    /// Session history CSV.
    #[arg(long)]
    history: Option<PathBuf>,
    #[command(flatten)]
    deadline: DeadlineArgs,
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => {
            ExperimentConfig::from_path(p).with_context(|| format!("loading {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.trials {
        cfg.trials = t;
    }
    if let Some(t) = args.threads {
        cfg.threads = Some(t);
    }
    if let Some(d) = args.deadline.get() {
        cfg.deadline = d;
    }
    cfg.validate()?;
    let rows = run_experiment(&cfg)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let path = args.out.join("results.csv");
    write_csv(
        &rows,
        fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    )?;

    let mut out = io::stdout().lock();
    writeln!(
        out,
        "{:<28} {:>6} {:>6} {:>8} {:>8} {:>8} {:>8} {:>10}",
        "method", "obs%", "pairs", "success%", "timeout%", "LBA", "ILE", "duration_s"
    )?;
    let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.2}"));
    for c in summarize(&rows) {
        let s = &c.summary;
        writeln!(
            out,
            "{:<28} {:>6.1} {:>6} {:>8.1} {:>8.1} {:>8} {:>8} {:>10.4}",
            c.method,
            c.observability,
            c.demo_pairs,
            s.success_rate,
            s.timeout_rate,
            fmt(s.mean_lba),
            fmt(s.mean_ile),
            s.mean_duration_s
        )?;
    }
    writeln!(out, "wrote {} rows to {}", rows.len(), path.display())?;
    Ok(())
}

fn cmd_confidence(args: ConfidenceArgs) -> Result<()> {
    if let Some(target) = args.target_delta {
        let n = trajectories_for_delta(target, args.epsilon, args.discount, args.k)?;
        println!("trajectories_needed = {n}");
        return Ok(());
    }
    let p = ConfidenceParams {
        epsilon: args.epsilon,
        epsilon_sampling: args.epsilon_sampling,
        samples: args.samples,
        k: args.k,
        discount: args.discount,
        trajectories: args.trajectories,
    };
    let r = confidence_latent(&p)?;
    println!("delta = {:e}", r.delta);
    println!("delta_sampling = {:e}", r.delta_sampling);
    println!("epsilon_latent = {}", r.epsilon_latent);
    println!("delta_latent = {:e}", r.delta_latent);
    Ok(())
}

fn cmd_demo_gen(args: DemoGenArgs) -> Result<()> {
    let domain = args.domain.domain()?;
    let ys =
        domain.seeded_demonstration(args.trajectories, args.domain.observability, args.seed)?;
    trajio::save(&args.out, &ys).with_context(|| format!("writing {}", args.out.display()))?;
    let hidden: usize = ys.iter().map(|y| y.hidden_count()).sum();
    let steps: usize = ys.iter().map(|y| y.len()).sum();
    println!(
        "wrote {} trajectories ({steps} steps, {hidden} hidden) to {}",
        ys.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_replay(args: ReplayArgs) -> Result<()> {
    let domain = args.domain.domain()?;
    let em = EmConfig {
        seed: args.seed,
        ..args.domain.em()?
    };
    let occlusion = domain.occlusion(args.domain.observability);
    let ys =
        trajio::load(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let method: Method = args.method.parse()?;
    let deadline = args.deadline.get().unwrap_or_default();
    let theta0 = RewardWeights::new(vec![0.5; domain.features.len()])?;
    let problem = Problem {
        mdp: &domain.mdp,
        features: &domain.features,
        occlusion: &occlusion,
    };
    let theta: RewardWeights = match method {
        Method::Batch => {
            let budget = deadline.start();
            let res = em_solve(
                &domain.mdp,
                &ys,
                Some(&theta0),
                &domain.features,
                &occlusion,
                &em,
                &budget,
            )?;
            println!(
                "status = {:?}, em_iterations = {}",
                res.status, res.em_iterations
            );
            res.theta
        }
        Method::Incremental | Method::IncrementalRandomWeights => {
            let criterion = match (args.stop_ll, args.stop_ile) {
                (Some(e), _) => StopCriterion::LogLikelihood(e),
                (_, Some(e)) => StopCriterion::Ile(e),
                _ => StopCriterion::None,
            };
            let cfg = I2rlConfig {
                session: SessionConfig {
                    em: EmConfig {
                        restarts: 1,
                        ..em.clone()
                    },
                    warm_start: method == Method::Incremental,
                    ll_normalization: LlNormalization::PerTrajectory,
                    deadline,
                },
                criterion,
                max_sessions: None,
                track_ll: true,
            };
            let ile = |t: &RewardWeights| domain.ile_of(t);
            let run = run_i2rl(
                &problem,
                ys.iter().map(|y| vec![y.clone()]),
                theta0,
                &cfg,
                Some(&ile),
            )?;
            if let Some(path) = &args.history {
                let mut w = fs::File::create(path)
                    .with_context(|| format!("creating {}", path.display()))?;
                writeln!(w, "session,trajectories,ll,ile,duration_s,work_units,timeout,em_iterations,m_step_iterations")?;
                for r in &run.history {
                    writeln!(
                        w,
                        "{},{},{},{},{},{},{},{},{}",
                        r.index,
                        r.trajectories,
                        r.ll.map(|v| v.to_string()).unwrap_or_default(),
                        r.ile.map(|v| v.to_string()).unwrap_or_default(),
                        r.duration.as_secs_f64(),
                        r.work_units,
                        u8::from(r.timeout),
                        r.em_iterations,
                        r.m_step_iterations
                    )?;
                }
            }
            println!("sessions = {}, stop = {:?}", run.history.len(), run.stop);
            run.statistic.last_theta
        }
        Method::RandomBaseline => bail!("random_baseline does not learn"),
    };
    let ll = problem.log_likelihood(&ys, &theta, &em, LlNormalization::PerTrajectory)?;
    let weights: Vec<String> = theta.as_slice().iter().map(|v| format!("{v:.4}")).collect();
    println!("theta = [{}]", weights.join(", "));
    println!("ll_per_trajectory = {ll:.6}");
    println!("lba = {:.2}", domain.lba_of(&theta)?);
    println!("ile = {:.6}", domain.ile_of(&theta)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Confidence(a) => cmd_confidence(a),
        Command::DemoGen(a) => cmd_demo_gen(a),
        Command::Replay(a) => cmd_replay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
