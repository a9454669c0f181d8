//! Command implementations behind the `cbfcert` binary.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use cbfcert::dynamics::{simulate, ClosedLoop, Dynamics};
use cbfcert::model::ModelFile;
use cbfcert::neural::Barrier;
use cbfcert::probabilistic::verify_probabilistic;
use cbfcert::synthesis::{run_stage, sample_datasets, train, violation_report, LogEntry, ViolationReport};
use cbfcert::verifier::{self, check_condition, count_samples, resolve_lipschitz, Counterexample, ScheduleMode, Verdict, VerifyConfig};
use cbfcert::{lipschitz::SampleRegion, rng_from_seed, BenchmarkSystem, Error};
use log::{info, warn};
use serde::Serialize;

pub use config::RunConfig;

/// Process exit status of a command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    CertificationFailed,
}

impl Outcome {
    pub fn code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::CertificationFailed => 3,
        }
    }
}

/// Exit code for an error: 2 for aborted training, 1 otherwise.
pub fn error_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(Error::NonFiniteLoss { .. }) => 2,
        _ => 1,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn load_model(path: &Path) -> anyhow::Result<(ModelFile, BenchmarkSystem)> {
    let model = ModelFile::load(path).with_context(|| format!("cannot load model {}", path.display()))?;
    let sys = model.system.build()?;
    Ok((model, sys))
}

pub fn write_log(path: &Path, log: &[LogEntry]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    for e in log {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct SynthSummary {
    samples_safe: usize,
    samples_unsafe: usize,
    samples_decay: usize,
    violations: ViolationReport,
    wall_time_s: f64,
}

/// Trains a model; writes `model.json`, `training_log.csv` and
/// `synth_summary.json` into `out`.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> anyhow::Result<Outcome> {
    let start = Instant::now();
    let sys = cfg.system.build()?;
    ensure_dir(out)?;
    let trained = train(&sys, &cfg.synth)?;
    let violations = violation_report(&trained.barrier, &trained.controller, &sys.dynamics, &trained.sets, &cfg.synth.objective());
    info!(
        "final violations: unsafe {}/{}, safe {}/{}, decay {}/{}",
        violations.unsafe_violations,
        violations.n_unsafe,
        violations.safe_violations,
        violations.n_safe,
        violations.decay_violations,
        violations.n_decay
    );
    ModelFile::new(cfg.system.clone(), trained.barrier, trained.controller)?.save(out.join("model.json"))?;
    write_log(&out.join("training_log.csv"), &trained.log)?;
    write_json(
        &out.join("synth_summary.json"),
        &SynthSummary {
            samples_safe: trained.sets.safe.len(),
            samples_unsafe: trained.sets.unsafe_points.len(),
            samples_decay: trained.sets.decay.len(),
            violations,
            wall_time_s: start.elapsed().as_secs_f64(),
        },
    )?;
    Ok(Outcome::Success)
}

/// Deterministic certification; writes `report.json` and, on failure,
/// `counterexamples.json`.
pub fn cmd_verify(cfg: &RunConfig, model: &Path, out: &Path) -> anyhow::Result<Outcome> {
    let (m, sys) = load_model(model)?;
    ensure_dir(out)?;
    let cl = ClosedLoop::new(&sys.dynamics, &m.controller)?;
    let report = verifier::verify(&cl, &m.barrier, &cfg.verify)?;
    write_json(&out.join("report.json"), &report)?;
    info!(
        "verdict {:?}: q = {}, N_tot = {}, N_base = {:?}, {} failures",
        report.verdict,
        report.segments.len(),
        report.n_tot,
        report.n_base,
        report.n_failures
    );
    finish(report.verdict, &report.counterexamples, out)
}

fn finish(verdict: Verdict, cex: &[Counterexample], out: &Path) -> anyhow::Result<Outcome> {
    match verdict {
        Verdict::Certified => Ok(Outcome::Success),
        Verdict::Failed => {
            write_json(&out.join("counterexamples.json"), &cex)?;
            Ok(Outcome::CertificationFailed)
        }
    }
}

/// Probabilistic certification; writes `prob_report.json` and, on failure,
/// `counterexamples.json`.
pub fn cmd_verify_prob(cfg: &RunConfig, model: &Path, out: &Path) -> anyhow::Result<Outcome> {
    let (m, sys) = load_model(model)?;
    ensure_dir(out)?;
    let cl = ClosedLoop::new(&sys.dynamics, &m.controller)?;
    let report = verify_probabilistic(&cl, &m.barrier, &cfg.verify, &cfg.prob)?;
    write_json(&out.join("prob_report.json"), &report)?;
    info!("verdict {:?} with confidence {}", report.verdict, report.confidence);
    finish(report.verdict, &report.counterexamples, out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub alpha_bar: f64,
    pub q_mode: String,
    pub q: usize,
    pub gamma_hat: f64,
    pub n_tot: u64,
    pub n_base: u64,
    pub wall_time_s: f64,
}

pub struct SweepSpec {
    pub alpha_bars: Vec<f64>,
    pub q_min: usize,
    pub q_max: usize,
    pub modes: Vec<ScheduleMode>,
}

/// Sample counts over a grid of `ᾱ` values and schedules; the decay check
/// itself is not run. Writes `sweep.csv`.
pub fn cmd_sweep(cfg: &RunConfig, model: &Path, spec: &SweepSpec, out: &Path) -> anyhow::Result<Vec<SweepRow>> {
    if spec.alpha_bars.is_empty() {
        bail!("alpha_bar list is empty");
    }
    if spec.modes.is_empty() {
        bail!("no schedule modes selected");
    }
    if spec.q_min == 0 || spec.q_min > spec.q_max {
        bail!("q range {}..={} is empty", spec.q_min, spec.q_max);
    }
    let (m, sys) = load_model(model)?;
    ensure_dir(out)?;
    let cl = ClosedLoop::new(&sys.dynamics, &m.controller)?;
    // Quantities independent of the cell are resolved once.
    let mut base = cfg.verify.clone();
    let lip = resolve_lipschitz(&cl, &m.barrier, &base)?;
    base.lip_h = Some(lip.l_h);
    base.lip_f = Some(lip.l_f);
    if base.gamma0.is_none() {
        base.gamma0 = Some(verifier::gamma0(&m.barrier, &base.bounds, base.gamma0_starts, base.gamma0_iters)?);
    }
    let mut rows = Vec::new();
    for &alpha_bar in &spec.alpha_bars {
        // The baseline depends on ᾱ only.
        let mut n_base = None;
        for &mode in &spec.modes {
            let qs: Vec<usize> = match mode {
                ScheduleMode::Uniform => (spec.q_min..=spec.q_max).collect(),
                ScheduleMode::Recursion => vec![0],
            };
            for q in qs {
                let cell = VerifyConfig {
                    alpha_bar,
                    schedule: mode,
                    q: q.max(1),
                    compute_base: n_base.is_none(),
                    ..base.clone()
                };
                let c = count_samples(&cl, &m.barrier, &cell)?;
                let n_base = *n_base.get_or_insert_with(|| c.n_base.expect("baseline requested"));
                let row = SweepRow {
                    alpha_bar,
                    q_mode: match mode {
                        ScheduleMode::Uniform => "uniform".into(),
                        ScheduleMode::Recursion => "recursion".into(),
                    },
                    q: c.schedule.len() - 1,
                    gamma_hat: c.gamma_hat,
                    n_tot: c.n_tot,
                    n_base,
                    wall_time_s: c.wall_time_s,
                };
                info!("{row:?}");
                rows.push(row);
            }
        }
    }
    let path = out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("cannot write {}", path.display()))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

#[derive(Debug, Serialize)]
struct RefineRound {
    round: usize,
    appended: usize,
    verdict: Option<Verdict>,
    n_failures: Option<u64>,
}

/// Counterexample-guided retraining: appends counterexamples to the decay
/// set, continues stage 2 from the model's parameters, and re-verifies, for
/// at most `refine.max_rounds` rounds. Writes `model_refined.json`,
/// `refine_log.csv` and `refine_summary.json`.
pub fn cmd_refine(cfg: &RunConfig, model: &Path, cex_path: &Path, out: &Path) -> anyhow::Result<Outcome> {
    let (m, sys) = load_model(model)?;
    ensure_dir(out)?;
    let text = fs::read_to_string(cex_path).with_context(|| format!("cannot read {}", cex_path.display()))?;
    let mut cex: Vec<Counterexample> = serde_json::from_str(&text).with_context(|| format!("invalid counterexample file {}", cex_path.display()))?;
    let out_model = out.join("model_refined.json");
    if cex.is_empty() {
        warn!("counterexample file is empty; model left unchanged");
        m.save(&out_model)?;
        return Ok(Outcome::Success);
    }
    let mut rng = rng_from_seed(cfg.synth.seed);
    let mut sets = sample_datasets(&sys, &cfg.synth, &mut rng)?;
    let (mut h, mut ctrl) = (m.barrier.clone(), m.controller.clone());
    let obj = cfg.synth.objective();
    let mut log = Vec::new();
    let mut rounds = Vec::new();
    let mut outcome = Outcome::CertificationFailed;
    for round in 1..=cfg.refine.max_rounds {
        for c in &cex {
            if c.state.len() != sys.dynamics.state_dim() {
                bail!("counterexample state has dimension {}", c.state.len());
            }
            for _ in 0..cfg.refine.repeat {
                sets.decay.push(c.state.clone());
            }
        }
        let offset = round_offset(&log);
        run_stage(&mut h, &mut ctrl, &sys.dynamics, &sets, &obj, &cfg.synth, 2, cfg.refine.steps, offset, &mut rng, &mut log)?;
        let cl = ClosedLoop::new(&sys.dynamics, &ctrl)?;
        let report = verifier::verify(&cl, &h, &cfg.verify)?;
        info!("refine round {round}: {:?} with {} failures", report.verdict, report.n_failures);
        rounds.push(RefineRound {
            round,
            appended: cex.len() * cfg.refine.repeat,
            verdict: Some(report.verdict),
            n_failures: Some(report.n_failures),
        });
        if report.verdict == Verdict::Certified {
            outcome = Outcome::Success;
            break;
        }
        cex = report.counterexamples;
    }
    if outcome != Outcome::Success {
        warn!("refinement did not converge within {} rounds", cfg.refine.max_rounds);
    }
    ModelFile::new(m.system.clone(), h, ctrl)?.save(&out_model)?;
    write_log(&out.join("refine_log.csv"), &log)?;
    write_json(&out.join("refine_summary.json"), &rounds)?;
    Ok(outcome)
}

fn round_offset(log: &[LogEntry]) -> usize {
    log.last().map_or(0, |e| e.step)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationSummary {
    pub starts: usize,
    pub steps: usize,
    pub start_level: f64,
    pub gamma_hat: f64,
    pub max_h: f64,
    pub max_h_after_start: f64,
    pub unsafe_hits: usize,
    pub trajectories_leaving_start_level: usize,
    pub trajectories_leaving_zero_level: usize,
}

/// Closed-loop trajectories from uniform starts in `{h ≤ level}`; writes
/// `trajectories.csv` and `simulate_summary.json`.
pub fn cmd_simulate(cfg: &RunConfig, model: &Path, out: &Path) -> anyhow::Result<SimulationSummary> {
    let (m, sys) = load_model(model)?;
    ensure_dir(out)?;
    let cl = ClosedLoop::new(&sys.dynamics, &m.controller)?;
    let lip = resolve_lipschitz(&cl, &m.barrier, &cfg.verify)?;
    let g_hat = verifier::gamma_hat(cfg.verify.alpha, cfg.verify.alpha_bar, cfg.verify.delta, lip.l_f)?;
    let level = cfg.simulate.level.unwrap_or(g_hat);
    let region = SampleRegion::sublevel(cfg.verify.bounds.clone(), &m.barrier, level);
    let mut rng = rng_from_seed(cfg.verify.seed);
    let starts = region.draw(cfg.simulate.starts, 1000 * cfg.simulate.starts.max(1) as u64, &mut rng)?;
    let path = out.join("trajectories.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("cannot write {}", path.display()))?;
    w.write_record(["start", "t", "x1", "x2", "u", "h", "unsafe"])?;
    let mut summary = SimulationSummary {
        starts: starts.len(),
        steps: cfg.simulate.steps,
        start_level: level,
        gamma_hat: g_hat,
        max_h: f64::NEG_INFINITY,
        max_h_after_start: f64::NEG_INFINITY,
        unsafe_hits: 0,
        trajectories_leaving_start_level: 0,
        trajectories_leaving_zero_level: 0,
    };
    for (k, x0) in starts.iter().enumerate() {
        let traj = simulate(&cl, x0, cfg.simulate.steps);
        let (mut left_start, mut left_zero) = (false, false);
        for (t, x) in traj.iter().enumerate() {
            let hx = m.barrier.value(x);
            let u = m.controller.control_law(x);
            let bad = sys.is_unsafe(x);
            summary.max_h = summary.max_h.max(hx);
            if t > 0 {
                summary.max_h_after_start = summary.max_h_after_start.max(hx);
            }
            summary.unsafe_hits += bad as usize;
            left_start |= hx > level;
            left_zero |= hx > 0.0;
            w.write_record([
                k.to_string(),
                t.to_string(),
                x[0].to_string(),
                x[1].to_string(),
                u[0].to_string(),
                hx.to_string(),
                (bad as u8).to_string(),
            ])?;
        }
        summary.trajectories_leaving_start_level += left_start as usize;
        summary.trajectories_leaving_zero_level += left_zero as usize;
    }
    w.flush()?;
    write_json(&out.join("simulate_summary.json"), &summary)?;
    Ok(summary)
}

/// Largest residual `v(x)` over the given points, for targeted re-checks.
pub fn max_residual(model: &ModelFile, points: &[Vec<f64>], alpha: f64, delta: f64) -> anyhow::Result<f64> {
    let sys = model.system.build()?;
    let cl = ClosedLoop::new(&sys.dynamics, &model.controller)?;
    Ok(points
        .iter()
        .map(|x| check_condition(&cl, &model.barrier, x, alpha, delta))
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Resolves an output directory, defaulting to the working directory.
pub fn out_dir(out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| PathBuf::from("."))
}
