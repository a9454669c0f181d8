//! Probabilistic certification: empirical-Bernstein risk bounds, Monte
//! Carlo segment volumes and per-segment sample counts.

use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{AxisBox, ClosedLoopMap};
use crate::error::{Error, Result};
use crate::lipschitz::{LipschitzEstimates, SampleRegion};
use crate::neural::Barrier;
use crate::verifier::{prepare, Counterexample, ScheduleMode, Target, Verdict, VerifyConfig, REPORT_SCHEMA_VERSION};
use crate::{rng_from_seed, Rng};

/// Risk bound `κ_θ(N) = 7 ln(2/θ) / (3(N − 1))`.
pub fn kappa(theta: f64, n: u64) -> Result<f64> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::config("theta must lie in (0, 1)"));
    }
    if n < 2 {
        return Err(Error::config("kappa needs at least two samples"));
    }
    Ok(7.0 * (2.0 / theta).ln() / (3.0 * (n - 1) as f64))
}

/// Volume of the Euclidean unit ball in `n` dimensions.
pub fn ball_volume(n: usize) -> f64 {
    match n {
        0 => 1.0,
        1 => 2.0,
        _ => 2.0 * std::f64::consts::PI / n as f64 * ball_volume(n - 2),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeEstimate {
    pub volume: f64,
    /// 95% normal-approximation half-width.
    pub half_width: f64,
    pub hits: u64,
    pub samples: u64,
}

impl VolumeEstimate {
    /// Upper end of the confidence interval.
    pub fn upper(&self) -> f64 {
        self.volume + self.half_width
    }
}

/// Lebesgue measure of `{x ∈ bounds : lo ≤ h(x) ≤ hi}` from `m` uniform draws.
pub fn estimate_segment_volume(h: &dyn Barrier, bounds: &AxisBox, lo: f64, hi: f64, m: u64, rng: &mut Rng) -> Result<VolumeEstimate> {
    if m < 1000 {
        return Err(Error::config("volume estimation needs at least 1000 samples"));
    }
    const CHUNK: u64 = 1 << 16;
    let mut hits = 0u64;
    let mut drawn = 0u64;
    while drawn < m {
        let k = CHUNK.min(m - drawn);
        let pts: Vec<Vec<f64>> = (0..k).map(|_| bounds.sample(rng)).collect();
        hits += pts
            .par_iter()
            .filter(|x| {
                let v = h.value(x);
                v >= lo && v <= hi
            })
            .count() as u64;
        drawn += k;
    }
    let p = hits as f64 / m as f64;
    let vol = bounds.volume();
    Ok(VolumeEstimate {
        volume: vol * p,
        half_width: 1.96 * vol * (p * (1.0 - p) / m as f64).sqrt(),
        hits,
        samples: m,
    })
}

/// Radius bound `(κ_θ(N) vol_C / vol_B)^{1/n}` on the largest sample-free ball.
pub fn eps_hat_bound(theta: f64, n_samples: u64, vol_c: f64, n: usize) -> Result<f64> {
    Ok((kappa(theta, n_samples)? * vol_c / ball_volume(n)).powf(1.0 / n as f64))
}

/// Smallest `N ≥ 2` whose bound [`eps_hat_bound`] is at most `zeta`.
pub fn required_samples(theta: f64, vol_c: f64, n: usize, zeta: f64) -> Result<u64> {
    if !(zeta > 0.0) {
        return Err(Error::config("zeta must be positive"));
    }
    if !(vol_c > 0.0 && vol_c.is_finite()) {
        return Err(Error::config("segment volume must be positive and finite"));
    }
    let ok = |m: u64| eps_hat_bound(theta, m, vol_c, n).map(|e| e <= zeta);
    let closed = 1.0 + 7.0 * (2.0 / theta).ln() * vol_c / (3.0 * ball_volume(n) * zeta.powi(n as i32));
    if !(closed < 1e18) {
        return Err(Error::config(format!("required sample count {closed:e} is not representable")));
    }
    // The closed form can be off by one through rounding; settle it exactly.
    let mut m = (closed.ceil() as u64).max(2);
    while !ok(m)? {
        m += 1;
    }
    while m > 2 && ok(m - 1)? {
        m -= 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbConfig {
    pub theta: f64,
    pub volume_samples: u64,
}

impl Default for ProbConfig {
    fn default() -> Self {
        ProbConfig {
            theta: 0.05,
            volume_samples: 100_000,
        }
    }
}

impl ProbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::config("theta must lie in (0, 1)"));
        }
        if self.volume_samples < 1000 {
            return Err(Error::config("volume_samples must be at least 1000"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbSegmentReport {
    pub i: usize,
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    pub zeta: f64,
    pub volume: VolumeEstimate,
    pub required_n: u64,
    pub eps_hat: Option<f64>,
    pub n_failures: u64,
    pub worst_residual: Option<f64>,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbReport {
    pub schema_version: u32,
    pub verdict: Verdict,
    pub theta: f64,
    pub confidence: f64,
    pub alpha: f64,
    pub alpha_bar: f64,
    pub delta: f64,
    pub gamma0: f64,
    pub gamma_hat: f64,
    pub schedule_mode: ScheduleMode,
    pub target: Target,
    pub schedule: Vec<f64>,
    pub segments: Vec<ProbSegmentReport>,
    pub volumes: Vec<f64>,
    pub required_n: Vec<u64>,
    pub counterexamples: Vec<Counterexample>,
    pub n_failures: u64,
    pub n_tot: u64,
    pub l_h: f64,
    pub l_f: f64,
    pub lipschitz: LipschitzEstimates,
    pub notes: Vec<String>,
    pub wall_time_s: f64,
}

/// Samples each segment `C_i` i.i.d. with the count that makes a clean run
/// certify it with confidence `1 − θ`; all segments clean gives `(1 − θ)^q`.
pub fn verify_probabilistic(map: &dyn ClosedLoopMap, h: &dyn Barrier, cfg: &VerifyConfig, prob: &ProbConfig) -> Result<ProbReport> {
    let start = Instant::now();
    prob.validate()?;
    let p = prepare(map, h, cfg)?;
    let n = cfg.bounds.dim();
    let box_volume = cfg.bounds.volume();
    let mut notes = Vec::new();
    let mut segments = Vec::with_capacity(p.plans.len());
    let mut counterexamples = Vec::new();
    for plan in &p.plans {
        let mut rng = rng_from_seed(cfg.seed ^ plan.i as u64);
        let volume = estimate_segment_volume(h, &cfg.bounds, plan.gamma_lo, plan.gamma_hi, prob.volume_samples, &mut rng)?;
        let mut seg = ProbSegmentReport {
            i: plan.i,
            gamma_lo: plan.gamma_lo,
            gamma_hi: plan.gamma_hi,
            zeta: plan.eps,
            volume,
            required_n: 0,
            eps_hat: None,
            n_failures: 0,
            worst_residual: None,
            skipped: false,
        };
        if volume.hits == 0 {
            warn!("segment {}: no volume samples hit the segment, skipping", plan.i);
            notes.push(format!("segment {} skipped: no volume sample hit it", plan.i));
            seg.skipped = true;
            segments.push(seg);
            continue;
        }
        if volume.volume < 1e-6 * box_volume {
            warn!("segment {} may not be full-dimensional (volume {:.3e})", plan.i, volume.volume);
            notes.push(format!("segment {} has tiny estimated volume {:e}", plan.i, volume.volume));
        }
        let vol_used = volume.upper().min(box_volume);
        seg.required_n = required_samples(prob.theta, vol_used, n, plan.eps)?;
        seg.eps_hat = Some(eps_hat_bound(prob.theta, seg.required_n, vol_used, n)?);
        let region = SampleRegion::with_predicate(
            cfg.bounds.clone(),
            |x: &[f64]| {
                let v = h.value(x);
                v >= plan.gamma_lo && v <= plan.gamma_hi
            },
            "segment",
        );
        let pts = region.draw(seg.required_n as usize, 1000 * seg.required_n, &mut rng)?;
        let residuals: Vec<(f64, f64)> = pts
            .par_iter()
            .map(|x| {
                let hx = h.value(x);
                (hx, h.value(&map.step(x)) - (1.0 - cfg.alpha) * hx + cfg.delta)
            })
            .collect();
        for (x, (hx, v)) in pts.into_iter().zip(residuals) {
            seg.worst_residual = Some(seg.worst_residual.map_or(v, |w: f64| w.max(v)));
            if v > 0.0 {
                seg.n_failures += 1;
                if counterexamples.len() < cfg.max_counterexamples {
                    counterexamples.push(Counterexample {
                        state: x,
                        h: hx,
                        residual: v,
                        segment: plan.i,
                    });
                }
            }
        }
        info!(
            "segment {}: volume {:.4e} (+{:.1e}), {} samples, {} failures",
            plan.i, volume.volume, volume.half_width, seg.required_n, seg.n_failures
        );
        segments.push(seg);
    }
    let n_failures: u64 = segments.iter().map(|s| s.n_failures).sum();
    let q = p.plans.len();
    Ok(ProbReport {
        schema_version: REPORT_SCHEMA_VERSION,
        verdict: if n_failures == 0 { Verdict::Certified } else { Verdict::Failed },
        theta: prob.theta,
        confidence: (1.0 - prob.theta).powi(q as i32),
        alpha: cfg.alpha,
        alpha_bar: cfg.alpha_bar,
        delta: cfg.delta,
        gamma0: p.gamma0,
        gamma_hat: p.gamma_hat,
        schedule_mode: cfg.schedule,
        target: cfg.target,
        schedule: p.schedule,
        volumes: segments.iter().map(|s| s.volume.volume).collect(),
        required_n: segments.iter().map(|s| s.required_n).collect(),
        n_tot: segments.iter().map(|s| s.required_n).sum(),
        segments,
        counterexamples,
        n_failures,
        l_h: p.lip.l_h,
        l_f: p.lip.l_f,
        lipschitz: p.lip,
        notes,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}
