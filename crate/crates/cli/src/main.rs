use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use cbfcert::verifier::{ScheduleMode, Target};
use cbfcert_cli::{cmd_refine, cmd_simulate, cmd_sweep, cmd_synth, cmd_verify, cmd_verify_prob, error_code, out_dir, Outcome, RunConfig, SweepSpec};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cbfcert", version, about = "Synthesize and certify neural control barrier functions")]
struct Cli {
    /// JSON run configuration; defaults apply to absent fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every randomized stage (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; all cores when absent.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a barrier and controller.
    Synth,
    /// Certify a model on grid ε-nets.
    Verify(VerifyArgs),
    /// Certify a model with sampled confidence bounds.
    VerifyProb {
        #[command(flatten)]
        verify: VerifyArgs,
        #[arg(long)]
        theta: Option<f64>,
        #[arg(long)]
        volume_samples: Option<u64>,
    },
    /// Sample counts across ᾱ values and schedules.
    Sweep {
        #[command(flatten)]
        verify: VerifyArgs,
        /// Comma-separated ᾱ values.
        #[arg(long, value_delimiter = ',', default_value = "0.4,0.6,0.8")]
        alpha_bars: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        q_min: usize,
        #[arg(long, default_value_t = 8)]
        q_max: usize,
        #[arg(long, value_delimiter = ',', default_value = "uniform,recursion")]
        modes: Vec<Mode>,
    },
    /// Retrain on counterexamples until certified or out of rounds.
    Refine {
        #[command(flatten)]
        verify: VerifyArgs,
        #[arg(long)]
        counterexamples: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        max_rounds: Option<usize>,
    },
    /// Simulate closed-loop trajectories from the certified sublevel set.
    Simulate {
        #[command(flatten)]
        verify: VerifyArgs,
        #[arg(long)]
        starts: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// Start level (default: γ̂).
        #[arg(long, allow_hyphen_values = true)]
        level: Option<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Uniform,
    Recursion,
}

impl From<Mode> for ScheduleMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Uniform => ScheduleMode::Uniform,
            Mode::Recursion => ScheduleMode::Recursion,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    GammaHat,
    Zero,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    alpha_bar: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    schedule: Option<Mode>,
    /// Segment count for the uniform schedule.
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    target: Option<TargetArg>,
    #[arg(long)]
    lip_h: Option<f64>,
    #[arg(long)]
    lip_f: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    gamma0: Option<f64>,
    #[arg(long)]
    fail_fast: bool,
    /// Skip counting the single-segment baseline.
    #[arg(long)]
    no_base: bool,
}

impl VerifyArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let v = &mut cfg.verify;
        macro_rules! set {
            ($($field:ident),*) => { $(if let Some(x) = self.$field { v.$field = x; })* };
        }
        set!(alpha, alpha_bar, delta, q);
        if let Some(m) = self.schedule {
            v.schedule = m.into();
        }
        if self.q.is_some() && self.schedule.is_none() {
            v.schedule = ScheduleMode::Uniform;
        }
        if let Some(t) = self.target {
            v.target = match t {
                TargetArg::GammaHat => Target::GammaHat,
                TargetArg::Zero => Target::Zero,
            };
        }
        v.lip_h = self.lip_h.or(v.lip_h);
        v.lip_f = self.lip_f.or(v.lip_f);
        v.gamma0 = self.gamma0.or(v.gamma0);
        v.fail_fast |= self.fail_fast;
        if self.no_base {
            v.compute_base = false;
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot configure the worker pool")?;
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_seed(cli.seed);
    let out = out_dir(cli.out);
    match &cli.command {
        Command::Synth => {
            cfg.validate()?;
            cmd_synth(&cfg, &out)
        }
        Command::Verify(a) => {
            a.apply(&mut cfg);
            cfg.validate()?;
            cmd_verify(&cfg, &a.model, &out)
        }
        Command::VerifyProb {
            verify,
            theta,
            volume_samples,
        } => {
            verify.apply(&mut cfg);
            cfg.prob.theta = theta.unwrap_or(cfg.prob.theta);
            cfg.prob.volume_samples = volume_samples.unwrap_or(cfg.prob.volume_samples);
            cfg.validate()?;
            cmd_verify_prob(&cfg, &verify.model, &out)
        }
        Command::Sweep {
            verify,
            alpha_bars,
            q_min,
            q_max,
            modes,
        } => {
            verify.apply(&mut cfg);
            cfg.validate()?;
            let spec = SweepSpec {
                alpha_bars: alpha_bars.clone(),
                q_min: *q_min,
                q_max: *q_max,
                modes: modes.iter().map(|&m| m.into()).collect(),
            };
            cmd_sweep(&cfg, &verify.model, &spec, &out).map(|_| Outcome::Success)
        }
        Command::Refine {
            verify,
            counterexamples,
            steps,
            max_rounds,
        } => {
            verify.apply(&mut cfg);
            cfg.refine.steps = steps.unwrap_or(cfg.refine.steps);
            cfg.refine.max_rounds = max_rounds.unwrap_or(cfg.refine.max_rounds);
            cfg.validate()?;
            cmd_refine(&cfg, &verify.model, counterexamples, &out)
        }
        Command::Simulate {
            verify,
            starts,
            steps,
            level,
        } => {
            verify.apply(&mut cfg);
            cfg.simulate.starts = starts.unwrap_or(cfg.simulate.starts);
            cfg.simulate.steps = steps.unwrap_or(cfg.simulate.steps);
            cfg.simulate.level = level.or(cfg.simulate.level);
            cfg.validate()?;
            let s = cmd_simulate(&cfg, &verify.model, &out)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
            Ok(Outcome::Success)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(o) => ExitCode::from(o.code() as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(error_code(&e) as u8)
        }
    }
}
