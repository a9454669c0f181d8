//! Sample generation and penalized training of the barrier and controller.
//!
//! The objective is
//!
//! ```text
//! τ_r‖θ‖² + τ_u/|Z_u| Σ max(l_u − h(x), 0)
//!         + τ_s/|Z_s| Σ max(h(x), 0)
//!         + τ_d/|Z_d| Σ max(h(f(x, u(x))) − (1 − α)h(x) + δ, 0)
//! ```
//!
//! minimized by Adam, first with `τ_d = 0` (classification warm start) and
//! then with the full decay penalty.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::Controller;
use crate::dynamics::{AxisBox, BenchmarkSystem, Dynamics};
use crate::error::{Error, Result};
use crate::neural::{Mlp, Trace};
use crate::Rng;

/// Membership predicates for the safe set, unsafe set and decay region.
pub trait SafetySets: Sync {
    fn is_safe(&self, x: &[f64]) -> bool;
    fn is_unsafe(&self, x: &[f64]) -> bool;
    fn in_decay_region(&self, x: &[f64]) -> bool;
}

impl SafetySets for BenchmarkSystem {
    fn is_safe(&self, x: &[f64]) -> bool {
        BenchmarkSystem::is_safe(self, x)
    }

    fn is_unsafe(&self, x: &[f64]) -> bool {
        BenchmarkSystem::is_unsafe(self, x)
    }

    fn in_decay_region(&self, x: &[f64]) -> bool {
        BenchmarkSystem::in_decay_region(self, x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub alpha: f64,
    pub delta: f64,
    pub l_u: f64,
    pub tau_u: f64,
    pub tau_s: f64,
    pub tau_d: f64,
    pub tau_r: f64,
    /// Total number of uniform draws from `sampling_box`.
    pub samples: usize,
    pub sampling_box: AxisBox,
    pub barrier_hidden: Vec<usize>,
    pub controller_hidden: Vec<usize>,
    pub q_diag: Vec<f64>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warm_start_steps: usize,
    pub steps: usize,
    /// Per-class mini-batch size; full batch when absent.
    pub batch_size: Option<usize>,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            alpha: 0.01,
            delta: 0.01,
            l_u: 0.1,
            tau_u: 2.0,
            tau_s: 1.0,
            tau_d: 10.0,
            tau_r: 0.00025,
            samples: 20_000,
            sampling_box: AxisBox::cube(2, 3.0),
            barrier_hidden: vec![10, 10],
            controller_hidden: vec![10],
            q_diag: vec![1.0],
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warm_start_steps: 5_000,
            steps: 20_000,
            batch_size: None,
            log_every: 50,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::config(msg)) };
        check((0.0..=1.0).contains(&self.alpha), "alpha must lie in [0, 1]")?;
        check(self.delta >= 0.0, "delta must be non-negative")?;
        check(self.l_u > 0.0, "l_u must be positive")?;
        check(self.tau_u > 0.0 && self.tau_s > 0.0 && self.tau_d > 0.0, "tau_u, tau_s, tau_d must be positive")?;
        check(self.tau_r >= 0.0, "tau_r must be non-negative")?;
        check(self.samples >= 1, "sample budget must be at least 1")?;
        check(self.learning_rate > 0.0, "learning_rate must be positive")?;
        check((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), "Adam betas must lie in [0, 1)")?;
        check(self.adam_eps > 0.0, "adam_eps must be positive")?;
        check(self.log_every >= 1, "log_every must be at least 1")?;
        check(self.batch_size != Some(0), "batch_size must be positive")?;
        check(self.q_diag.iter().all(|q| *q > 0.0), "q_diag must be positive")?;
        check(
            self.barrier_hidden.iter().chain(&self.controller_hidden).all(|w| *w > 0),
            "hidden widths must be positive",
        )?;
        self.sampling_box.validate()
    }

    pub fn objective(&self) -> Objective {
        Objective {
            alpha: self.alpha,
            delta: self.delta,
            l_u: self.l_u,
            tau_u: self.tau_u,
            tau_s: self.tau_s,
            tau_d: self.tau_d,
            tau_r: self.tau_r,
        }
    }
}

/// Constants of the penalized objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub alpha: f64,
    pub delta: f64,
    pub l_u: f64,
    pub tau_u: f64,
    pub tau_s: f64,
    pub tau_d: f64,
    pub tau_r: f64,
}

impl Objective {
    /// The classification problem used for the warm start.
    pub fn warm_start(self) -> Self {
        Objective { tau_d: 0.0, ..self }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleSets {
    pub safe: Vec<Vec<f64>>,
    pub unsafe_points: Vec<Vec<f64>>,
    pub decay: Vec<Vec<f64>>,
}

/// Draws `cfg.samples` uniform points in the sampling box and routes each:
/// unsafe points to `Z_u`; otherwise safe points to `Z_s` and points in the
/// decay region to `Z_d` (a safe point may land in both).
pub fn sample_datasets<S: SafetySets + ?Sized>(sets: &S, cfg: &SynthConfig, rng: &mut Rng) -> Result<SampleSets> {
    if cfg.samples == 0 {
        return Err(Error::config("sample budget must be at least 1"));
    }
    let mut out = SampleSets::default();
    for _ in 0..cfg.samples {
        let x = cfg.sampling_box.sample(rng);
        if sets.is_unsafe(&x) {
            out.unsafe_points.push(x);
            continue;
        }
        if sets.is_safe(&x) {
            out.safe.push(x.clone());
        }
        if sets.in_decay_region(&x) {
            out.decay.push(x);
        }
    }
    if out.safe.is_empty() {
        return Err(Error::EmptyClass("Z_s"));
    }
    if out.unsafe_points.is_empty() {
        return Err(Error::EmptyClass("Z_u"));
    }
    if out.decay.is_empty() {
        return Err(Error::EmptyClass("Z_d"));
    }
    Ok(out)
}

/// Decay residual `h(f(x, u(x))) − (1 − α)h(x) + δ`; the sampled decay
/// condition holds when it is `≤ 0`.
pub fn decay_residual(h: &Mlp, ctrl: &Controller, dynamics: &dyn Dynamics, x: &[f64], alpha: f64, delta: f64) -> f64 {
    let u = ctrl.control_law(x);
    let xp = dynamics.step(x, &u);
    h.forward(&xp)[0] - (1.0 - alpha) * h.forward(x)[0] + delta
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ViolationCounts {
    pub unsafe_points: usize,
    pub safe: usize,
    pub decay: usize,
}

/// Value and gradient of the penalized objective.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: f64,
    pub regularizer: f64,
    pub unsafe_term: f64,
    pub safe_term: f64,
    pub decay_term: f64,
    pub grad_barrier: Vec<f64>,
    pub grad_controller: Vec<f64>,
    pub violations: ViolationCounts,
}

#[derive(Clone)]
struct Partial {
    unsafe_sum: f64,
    safe_sum: f64,
    decay_sum: f64,
    grad_h: Vec<f64>,
    grad_u: Vec<f64>,
    counts: ViolationCounts,
}

impl Partial {
    fn new(ph: usize, pu: usize) -> Self {
        Partial {
            unsafe_sum: 0.0,
            safe_sum: 0.0,
            decay_sum: 0.0,
            grad_h: vec![0.0; ph],
            grad_u: vec![0.0; pu],
            counts: ViolationCounts::default(),
        }
    }

    fn absorb(&mut self, o: &Partial) {
        self.unsafe_sum += o.unsafe_sum;
        self.safe_sum += o.safe_sum;
        self.decay_sum += o.decay_sum;
        self.grad_h.iter_mut().zip(&o.grad_h).for_each(|(a, b)| *a += b);
        self.grad_u.iter_mut().zip(&o.grad_u).for_each(|(a, b)| *a += b);
        self.counts.unsafe_points += o.counts.unsafe_points;
        self.counts.safe += o.counts.safe;
        self.counts.decay += o.counts.decay;
    }
}

const CHUNK: usize = 256;

#[derive(Clone, Copy)]
enum Family {
    Unsafe,
    Safe,
    Decay,
}

/// Borrowed view of the three families, possibly subsampled.
pub struct Batch<'a> {
    pub safe: Vec<&'a [f64]>,
    pub unsafe_points: Vec<&'a [f64]>,
    pub decay: Vec<&'a [f64]>,
}

impl<'a> Batch<'a> {
    pub fn full(sets: &'a SampleSets) -> Self {
        Batch {
            safe: sets.safe.iter().map(Vec::as_slice).collect(),
            unsafe_points: sets.unsafe_points.iter().map(Vec::as_slice).collect(),
            decay: sets.decay.iter().map(Vec::as_slice).collect(),
        }
    }

    /// `size` draws with replacement from each family.
    pub fn sampled(sets: &'a SampleSets, size: usize, rng: &mut Rng) -> Self {
        let mut pick = |v: &'a [Vec<f64>]| -> Vec<&'a [f64]> {
            if v.len() <= size {
                return v.iter().map(Vec::as_slice).collect();
            }
            (0..size).map(|_| v[rng.gen_range(0..v.len())].as_slice()).collect()
        };
        Batch {
            safe: pick(&sets.safe),
            unsafe_points: pick(&sets.unsafe_points),
            decay: pick(&sets.decay),
        }
    }
}

/// Evaluates the penalized objective and its exact gradient with respect to
/// both parameter vectors. Per-sample work runs in parallel over fixed
/// chunks and is reduced in index order, so results do not depend on the
/// thread count.
pub fn penalized_loss(h: &Mlp, ctrl: &Controller, dynamics: &dyn Dynamics, batch: &Batch<'_>, obj: &Objective) -> LossEval {
    let ph = h.param_count();
    let pu = ctrl.feature_net().param_count();

    let mut work: Vec<(Family, &[&[f64]])> = Vec::new();
    for (fam, pts) in [
        (Family::Unsafe, &batch.unsafe_points),
        (Family::Safe, &batch.safe),
        (Family::Decay, &batch.decay),
    ] {
        for chunk in pts.chunks(CHUNK) {
            work.push((fam, chunk));
        }
    }
    let w_u = if batch.unsafe_points.is_empty() { 0.0 } else { obj.tau_u / batch.unsafe_points.len() as f64 };
    let w_s = if batch.safe.is_empty() { 0.0 } else { obj.tau_s / batch.safe.len() as f64 };
    let w_d = if batch.decay.is_empty() { 0.0 } else { obj.tau_d / batch.decay.len() as f64 };

    let partials: Vec<Partial> = work
        .par_iter()
        .map(|(fam, pts)| {
            let mut p = Partial::new(ph, pu);
            let (mut tr, mut tr_xp, mut tr_c) = (Trace::default(), Trace::default(), Trace::default());
            for x in pts.iter() {
                match fam {
                    Family::Unsafe => {
                        h.forward_trace_into(x, &mut tr);
                        let hx = tr.output()[0];
                        let viol = obj.l_u - hx;
                        if viol > 0.0 {
                            p.unsafe_sum += viol;
                            p.counts.unsafe_points += 1;
                            h.backprop(&tr, &[1.0], Some(&mut p.grad_h), -w_u);
                        }
                    }
                    Family::Safe => {
                        h.forward_trace_into(x, &mut tr);
                        let hx = tr.output()[0];
                        if hx > 0.0 {
                            p.safe_sum += hx;
                            p.counts.safe += 1;
                            h.backprop(&tr, &[1.0], Some(&mut p.grad_h), w_s);
                        }
                    }
                    Family::Decay => {
                        h.forward_trace_into(x, &mut tr);
                        ctrl.feature_net().forward_trace_into(x, &mut tr_c);
                        let u = ctrl.law_from_trace(&tr_c);
                        let xp = dynamics.step(x, &u);
                        h.forward_trace_into(&xp, &mut tr_xp);
                        let r = tr_xp.output()[0] - (1.0 - obj.alpha) * tr.output()[0] + obj.delta;
                        if r > 0.0 {
                            p.counts.decay += 1;
                            p.decay_sum += r;
                            if w_d > 0.0 {
                                h.backprop(&tr, &[1.0], Some(&mut p.grad_h), -w_d * (1.0 - obj.alpha));
                                let cot_xp = h.backprop(&tr_xp, &[1.0], Some(&mut p.grad_h), w_d);
                                let ju = dynamics.input_jacobian(x, &u);
                                let (n, m) = (xp.len(), u.len());
                                let cot_u: Vec<f64> = (0..m).map(|j| (0..n).map(|i| ju[i * m + j] * cot_xp[i]).sum()).collect();
                                ctrl.vjp_params_traced(&tr_c, &cot_u, &mut p.grad_u, w_d);
                            }
                        }
                    }
                }
            }
            p
        })
        .collect();

    let mut total = Partial::new(ph, pu);
    for p in &partials {
        total.absorb(p);
    }

    let th = h.params();
    let tu = ctrl.feature_net().params();
    let sq: f64 = th.iter().chain(&tu).map(|v| v * v).sum();
    let regularizer = obj.tau_r * sq;
    total.grad_h.iter_mut().zip(&th).for_each(|(g, v)| *g += 2.0 * obj.tau_r * v);
    total.grad_u.iter_mut().zip(&tu).for_each(|(g, v)| *g += 2.0 * obj.tau_r * v);

    let unsafe_term = w_u * total.unsafe_sum;
    let safe_term = w_s * total.safe_sum;
    let decay_term = w_d * total.decay_sum;
    LossEval {
        loss: regularizer + unsafe_term + safe_term + decay_term,
        regularizer,
        unsafe_term,
        safe_term,
        decay_term,
        grad_barrier: total.grad_h,
        grad_controller: total.grad_u,
        violations: total.counts,
    }
}

/// Violation counts and worst margins of the sampled constraints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub n_unsafe: usize,
    pub n_safe: usize,
    pub n_decay: usize,
    /// Points of `Z_u` with `h < l_u`.
    pub unsafe_violations: usize,
    /// Points of `Z_s` with `h > 0`.
    pub safe_violations: usize,
    /// Points of `Z_d` with `Δh + δ > 0`.
    pub decay_violations: usize,
    /// `min h − l_u` over `Z_u`.
    pub worst_unsafe_margin: f64,
    /// `max h` over `Z_s`.
    pub worst_safe_value: f64,
    /// `max Δh + δ` over `Z_d`.
    pub worst_decay_residual: f64,
}

pub fn violation_report(h: &Mlp, ctrl: &Controller, dynamics: &dyn Dynamics, sets: &SampleSets, obj: &Objective) -> ViolationReport {
    let hu: Vec<f64> = sets.unsafe_points.iter().map(|x| h.forward(x)[0]).collect();
    let hs: Vec<f64> = sets.safe.iter().map(|x| h.forward(x)[0]).collect();
    let rd: Vec<f64> = sets
        .decay
        .par_iter()
        .map(|x| decay_residual(h, ctrl, dynamics, x, obj.alpha, obj.delta))
        .collect();
    ViolationReport {
        n_unsafe: hu.len(),
        n_safe: hs.len(),
        n_decay: rd.len(),
        unsafe_violations: hu.iter().filter(|v| **v < obj.l_u).count(),
        safe_violations: hs.iter().filter(|v| **v > 0.0).count(),
        decay_violations: rd.iter().filter(|v| **v > 0.0).count(),
        worst_unsafe_margin: hu.iter().map(|v| v - obj.l_u).fold(f64::INFINITY, f64::min),
        worst_safe_value: hs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        worst_decay_residual: rd.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub stage: u8,
    pub loss: f64,
    pub unsafe_violations: usize,
    pub safe_violations: usize,
    pub decay_violations: usize,
}

/// Trained networks and the loss trace.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub barrier: Mlp,
    pub controller: Controller,
    pub sets: SampleSets,
    pub log: Vec<LogEntry>,
}

/// Runs `steps` Adam iterations on `obj` starting from the given networks,
/// appending log entries (every `cfg.log_every` steps and at the end).
///
/// With `τ_d = 0` the controller does not enter the hinges, so only the
/// barrier is updated; otherwise Adam would walk the controller to zero on
/// the ridge gradient alone and erase the random initialization.
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    h: &mut Mlp,
    ctrl: &mut Controller,
    dynamics: &dyn Dynamics,
    sets: &SampleSets,
    obj: &Objective,
    cfg: &SynthConfig,
    stage: u8,
    steps: usize,
    step_offset: usize,
    rng: &mut Rng,
    log: &mut Vec<LogEntry>,
) -> Result<()> {
    let ph = h.param_count();
    let train_ctrl = obj.tau_d > 0.0;
    let mut theta: Vec<f64> = h.params();
    if train_ctrl {
        theta.extend(ctrl.feature_net().params());
    }
    let mut adam = Adam::new(theta.len(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut grad = vec![0.0; theta.len()];
    for k in 0..steps {
        let batch = match cfg.batch_size {
            Some(b) => Batch::sampled(sets, b, rng),
            None => Batch::full(sets),
        };
        let ev = penalized_loss(h, ctrl, dynamics, &batch, obj);
        if !ev.loss.is_finite() || ev.grad_barrier.iter().chain(&ev.grad_controller).any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                stage,
                step: step_offset + k,
            });
        }
        if k % cfg.log_every == 0 {
            log.push(LogEntry {
                step: step_offset + k,
                stage,
                loss: ev.loss,
                unsafe_violations: ev.violations.unsafe_points,
                safe_violations: ev.violations.safe,
                decay_violations: ev.violations.decay,
            });
        }
        grad[..ph].copy_from_slice(&ev.grad_barrier);
        if train_ctrl {
            grad[ph..].copy_from_slice(&ev.grad_controller);
        }
        adam.step(&mut theta, &grad);
        h.set_params(&theta[..ph])?;
        if train_ctrl {
            ctrl.feature_net_mut().set_params(&theta[ph..])?;
        }
    }
    let ev = penalized_loss(h, ctrl, dynamics, &Batch::full(sets), obj);
    if !ev.loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            stage,
            step: step_offset + steps,
        });
    }
    log.push(LogEntry {
        step: step_offset + steps,
        stage,
        loss: ev.loss,
        unsafe_violations: ev.violations.unsafe_points,
        safe_violations: ev.violations.safe,
        decay_violations: ev.violations.decay,
    });
    Ok(())
}

fn widths(n_in: usize, hidden: &[usize], n_out: usize) -> Vec<usize> {
    let mut w = vec![n_in];
    w.extend_from_slice(hidden);
    w.push(n_out);
    w
}

/// Fresh networks initialized from `rng`.
pub fn init_networks(cfg: &SynthConfig, n_x: usize, u_lo: Vec<f64>, u_hi: Vec<f64>, rng: &mut Rng) -> Result<(Mlp, Controller)> {
    let n_u = u_lo.len();
    if cfg.q_diag.len() != n_u {
        return Err(Error::config(format!("q_diag has {} entries, input dimension is {n_u}", cfg.q_diag.len())));
    }
    let h = Mlp::random(&widths(n_x, &cfg.barrier_hidden, 1), rng)?;
    let c = Mlp::random(&widths(n_x, &cfg.controller_hidden, n_u), rng)?;
    let ctrl = Controller::new(c, cfg.q_diag.clone(), u_lo, u_hi)?;
    Ok((h, ctrl))
}

/// Samples the datasets, then trains: warm start with `τ_d = 0`, followed
/// by the full objective. Deterministic given `cfg.seed`.
pub fn train(sys: &BenchmarkSystem, cfg: &SynthConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = crate::rng_from_seed(cfg.seed);
    let sets = sample_datasets(sys, cfg, &mut rng)?;
    let (mut h, mut ctrl) = init_networks(cfg, 2, vec![sys.u_lo], vec![sys.u_hi], &mut rng)?;
    let obj = cfg.objective();
    let mut log = Vec::new();
    log::info!(
        "training on |Z_s|={} |Z_u|={} |Z_d|={}",
        sets.safe.len(),
        sets.unsafe_points.len(),
        sets.decay.len()
    );
    run_stage(&mut h, &mut ctrl, &sys.dynamics, &sets, &obj.warm_start(), cfg, 1, cfg.warm_start_steps, 0, &mut rng, &mut log)?;
    run_stage(&mut h, &mut ctrl, &sys.dynamics, &sets, &obj, cfg, 2, cfg.steps, cfg.warm_start_steps, &mut rng, &mut log)?;
    Ok(TrainOutcome {
        barrier: h,
        controller: ctrl,
        sets,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::LinearMap;
    use crate::neural::{Activation, Layer};
    use crate::rng_from_seed;

    fn small_sets(rng: &mut Rng) -> SampleSets {
        let cfg = SynthConfig {
            samples: 300,
            ..Default::default()
        };
        sample_datasets(&BenchmarkSystem::default(), &cfg, rng).unwrap()
    }

    fn constant_barrier(c: f64) -> Mlp {
        Mlp::new(vec![Layer {
            rows: 1,
            cols: 2,
            weights: vec![0.0, 0.0],
            bias: vec![c],
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    fn zero_controller() -> Controller {
        Controller::new(Mlp::zeros(&[2, 10, 1]).unwrap(), vec![1.0], vec![-2.0], vec![2.0]).unwrap()
    }

    struct Everywhere<const SAFE: bool, const UNSAFE: bool>;
    impl<const SAFE: bool, const UNSAFE: bool> SafetySets for Everywhere<SAFE, UNSAFE> {
        fn is_safe(&self, _x: &[f64]) -> bool {
            SAFE
        }
        fn is_unsafe(&self, _x: &[f64]) -> bool {
            UNSAFE
        }
        fn in_decay_region(&self, _x: &[f64]) -> bool {
            true
        }
    }

    #[test]
    fn all_unsafe_box_leaves_safe_set_empty() {
        let cfg = SynthConfig {
            samples: 100,
            ..Default::default()
        };
        let err = sample_datasets(&Everywhere::<false, true>, &cfg, &mut rng_from_seed(0)).unwrap_err();
        assert!(matches!(err, Error::EmptyClass("Z_s")));
    }

    #[test]
    fn benchmark_routing_is_predicate_consistent_and_deterministic() {
        let sys = BenchmarkSystem::default();
        let cfg = SynthConfig::default();
        let a = sample_datasets(&sys, &cfg, &mut rng_from_seed(42)).unwrap();
        let b = sample_datasets(&sys, &cfg, &mut rng_from_seed(42)).unwrap();
        assert_eq!(a, b);
        assert!(a.safe.len() + a.unsafe_points.len() + a.decay.len() >= cfg.samples);
        assert!(a.safe.iter().all(|x| sys.is_safe(x)));
        assert!(a.unsafe_points.iter().all(|x| sys.is_unsafe(x)));
        assert!(a.decay.iter().all(|x| sys.in_decay_region(x) && !sys.is_unsafe(x)));
    }

    #[test]
    fn hinges_vanish_when_constraints_hold_with_margin() {
        // h ≡ -2 on Z_s and Z_d, h ≡ 5 on Z_u:
        // evaluate each family against the constant that satisfies it.
        let sys = BenchmarkSystem::default();
        let ctrl = zero_controller();
        let obj = SynthConfig::default().objective();
        let mut rng = rng_from_seed(1);
        let sets = small_sets(&mut rng);

        let neg = constant_barrier(-2.0);
        let only_s_d = SampleSets {
            unsafe_points: vec![],
            ..sets.clone()
        };
        // Constant h: Δh + δ = αh + δ = −0.02 + 0.01 < 0.
        let ev = penalized_loss(&neg, &ctrl, &sys.dynamics, &Batch::full(&only_s_d), &obj);
        let th: f64 = neg.params().iter().map(|v| v * v).sum();
        assert_eq!(ev.loss, obj.tau_r * th);

        let pos = constant_barrier(5.0);
        let only_u = SampleSets {
            safe: vec![],
            decay: vec![],
            ..sets
        };
        let ev = penalized_loss(&pos, &ctrl, &sys.dynamics, &Batch::full(&only_u), &obj);
        assert_eq!(ev.unsafe_term, 0.0);
        assert_eq!(ev.loss, ev.regularizer);
    }

    #[test]
    fn single_unsafe_sample_hinge() {
        let sys = BenchmarkSystem::default();
        let sets = SampleSets {
            safe: vec![],
            unsafe_points: vec![vec![0.0, 0.1]],
            decay: vec![],
        };
        let obj = SynthConfig::default().objective();
        let ev = penalized_loss(&constant_barrier(0.0), &zero_controller(), &sys.dynamics, &Batch::full(&sets), &obj);
        assert!((ev.unsafe_term - 0.2).abs() < 1e-15);
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (1e-7 + a.abs().max(b.abs()))
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let sys = BenchmarkSystem::default();
        let mut rng = rng_from_seed(7);
        let sets = small_sets(&mut rng);
        let obj = SynthConfig::default().objective();
        let batch = Batch::full(&sets);
        for trial in 0..5 {
            let h = Mlp::random(&[2, 10, 10, 1], &mut rng).unwrap();
            let c = Mlp::random(&[2, 10, 1], &mut rng).unwrap();
            let ctrl = Controller::new(c, vec![0.5], vec![-2.0], vec![2.0]).unwrap();
            let ev = penalized_loss(&h, &ctrl, &sys.dynamics, &batch, &obj);
            assert!(ev.violations.decay > 0, "trial {trial} exercises no decay hinge");
            let loss_at = |th: &[f64], tu: &[f64]| {
                let hh = h.with_params(th).unwrap();
                let cc = ctrl.with_params(tu).unwrap();
                penalized_loss(&hh, &cc, &sys.dynamics, &batch, &obj).loss
            };
            let th = h.params();
            let tu = ctrl.feature_net().params();
            // Directional derivative along a random direction.
            let dir_h: Vec<f64> = (0..th.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dir_u: Vec<f64> = (0..tu.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t = 1e-6;
            let plus_h: Vec<f64> = th.iter().zip(&dir_h).map(|(a, d)| a + t * d).collect();
            let minus_h: Vec<f64> = th.iter().zip(&dir_h).map(|(a, d)| a - t * d).collect();
            let plus_u: Vec<f64> = tu.iter().zip(&dir_u).map(|(a, d)| a + t * d).collect();
            let minus_u: Vec<f64> = tu.iter().zip(&dir_u).map(|(a, d)| a - t * d).collect();
            let fd = (loss_at(&plus_h, &plus_u) - loss_at(&minus_h, &minus_u)) / (2.0 * t);
            let an: f64 = ev.grad_barrier.iter().zip(&dir_h).map(|(g, d)| g * d).sum::<f64>()
                + ev.grad_controller.iter().zip(&dir_u).map(|(g, d)| g * d).sum::<f64>();
            assert!(rel_err(fd, an) < 1e-5, "trial {trial}: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn loss_is_non_negative_and_hinges_are_monotone() {
        let sys = BenchmarkSystem::default();
        let mut rng = rng_from_seed(9);
        let sets = small_sets(&mut rng);
        let obj = SynthConfig::default().objective();
        let batch = Batch::full(&sets);
        let ctrl = zero_controller();
        let mut prev_unsafe = f64::INFINITY;
        // Raising a constant h shrinks the unsafe hinge and grows the safe one.
        let mut prev_safe = -1.0;
        for k in 0..10 {
            let h = constant_barrier(-0.5 + 0.1 * k as f64);
            let ev = penalized_loss(&h, &ctrl, &sys.dynamics, &batch, &obj);
            assert!(ev.loss >= 0.0);
            assert!(ev.unsafe_term <= prev_unsafe);
            assert!(ev.safe_term >= prev_safe);
            prev_unsafe = ev.unsafe_term;
            prev_safe = ev.safe_term;
        }
    }

    #[test]
    fn ridge_only_objective_shrinks_the_barrier_and_freezes_the_controller() {
        let sys = BenchmarkSystem::default();
        let mut rng = rng_from_seed(10);
        let sets = small_sets(&mut rng);
        let cfg = SynthConfig {
            learning_rate: 1e-2,
            log_every: 1,
            ..Default::default()
        };
        let obj = Objective {
            tau_u: 0.0,
            tau_s: 0.0,
            tau_d: 0.0,
            ..cfg.objective()
        };
        let (mut h, mut ctrl) = init_networks(&cfg, 2, vec![-2.0], vec![2.0], &mut rng).unwrap();
        let sq = |p: Vec<f64>| p.iter().map(|v| v * v).sum::<f64>();
        let (h0, u0) = (sq(h.params()), ctrl.feature_net().params());
        let mut log = Vec::new();
        run_stage(&mut h, &mut ctrl, &sys.dynamics, &sets, &obj, &cfg, 2, 200, 0, &mut rng, &mut log).unwrap();
        assert_eq!(ctrl.feature_net().params(), u0);
        let h1 = sq(h.params());
        assert!(h1 < 0.2 * h0, "{h0} -> {h1}");
        assert!(log.windows(2).filter(|w| w[1].loss > w[0].loss).count() < 5);
    }

    #[test]
    fn zero_nets_violate_every_unsafe_sample() {
        let sys = BenchmarkSystem::default();
        let sets = small_sets(&mut rng_from_seed(11));
        let h = Mlp::zeros(&[2, 10, 10, 1]).unwrap();
        let rep = violation_report(&h, &zero_controller(), &sys.dynamics, &sets, &SynthConfig::default().objective());
        assert_eq!(rep.unsafe_violations, rep.n_unsafe);
        assert_eq!(rep.safe_violations, 0);
    }

    #[test]
    fn violation_counts_match_brute_force() {
        let sys = BenchmarkSystem::default();
        let mut rng = rng_from_seed(12);
        let cfg = SynthConfig {
            samples: 100,
            ..Default::default()
        };
        let sets = sample_datasets(&sys, &cfg, &mut rng).unwrap();
        let (h, ctrl) = init_networks(&cfg, 2, vec![-2.0], vec![2.0], &mut rng).unwrap();
        let obj = cfg.objective();
        let rep = violation_report(&h, &ctrl, &sys.dynamics, &sets, &obj);
        // Independent recomputation straight from the definitions.
        let mut du = 0;
        for x in &sets.unsafe_points {
            if h.forward(x)[0] < obj.l_u {
                du += 1;
            }
        }
        let mut ds = 0;
        for x in &sets.safe {
            if h.forward(x)[0] > 0.0 {
                ds += 1;
            }
        }
        let mut dd = 0;
        for x in &sets.decay {
            let c = ctrl.feature_net().forward(x)[0];
            let u = (-c / 1.0).clamp(-2.0, 2.0);
            let xp = crate::dynamics::rk4_step(&crate::dynamics::BenchmarkField, x, &[u], 0.1);
            if h.forward(&xp)[0] - (1.0 - obj.alpha) * h.forward(x)[0] + obj.delta > 0.0 {
                dd += 1;
            }
        }
        assert_eq!((rep.unsafe_violations, rep.safe_violations, rep.decay_violations), (du, ds, dd));
    }

    #[test]
    fn perfect_model_has_no_violations() {
        // x+ = 0.5x and h(x) = x₁: decay holds wherever x₁ ≥ δ/(0.5 − α).
        let dynamics = LinearMap::new(2, 1, vec![0.5, 0.0, 0.0, 0.5], vec![0.0, 0.0]).unwrap();
        let h = Mlp::new(vec![Layer {
            rows: 1,
            cols: 2,
            weights: vec![1.0, 0.0],
            bias: vec![0.0],
            activation: Activation::Identity,
        }])
        .unwrap();
        let sets = SampleSets {
            safe: vec![vec![-1.0, 0.0]],
            unsafe_points: vec![vec![1.0, 0.0]],
            decay: vec![vec![1.0, 3.0]],
        };
        let obj = Objective {
            alpha: 0.1,
            delta: 0.01,
            l_u: 0.1,
            tau_u: 1.0,
            tau_s: 1.0,
            tau_d: 1.0,
            tau_r: 0.0,
        };
        let rep = violation_report(&h, &zero_controller(), &dynamics, &sets, &obj);
        assert_eq!((rep.unsafe_violations, rep.safe_violations, rep.decay_violations), (0, 0, 0));
    }

    #[test]
    fn adam_training_is_deterministic() {
        let cfg = SynthConfig {
            samples: 400,
            warm_start_steps: 20,
            steps: 20,
            log_every: 5,
            seed: 3,
            ..Default::default()
        };
        let sys = BenchmarkSystem::default();
        let a = train(&sys, &cfg).unwrap();
        let b = train(&sys, &cfg).unwrap();
        assert_eq!(a.barrier, b.barrier);
        assert_eq!(a.controller, b.controller);
        assert_eq!(a.log, b.log);
        assert!(a.log.iter().any(|e| e.stage == 1) && a.log.iter().any(|e| e.stage == 2));
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig { alpha: 1.5, ..Default::default() }.validate().is_err());
        assert!(SynthConfig { l_u: 0.0, ..Default::default() }.validate().is_err());
        assert!(SynthConfig::default().validate().is_ok());
        let bad: std::result::Result<SynthConfig, _> = serde_json::from_str(r#"{"alpha": 0.1, "bogus": 1}"#);
        assert!(bad.is_err());
    }
}
