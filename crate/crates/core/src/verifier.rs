//! Deterministic certification of the 0-sublevel set: level schedules,
//! resolution bounds, grid ε-nets restricted to level segments, and the
//! sampled decay check.

use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{AxisBox, ClosedLoopMap};
use crate::error::{Error, Result};
use crate::linalg::norm2;
use crate::lipschitz::{LipMethod, LipschitzEstimates, SampleRegion};
use crate::neural::Barrier;
use crate::rng_from_seed;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

const CORRECTED_B_NOTE: &str = "recursion uses b = -(1-alpha_bar) L_h / (L_h L_f + (1-alpha_bar) L_h), whose fixed point b delta / (1-a) equals gamma_hat";
const BAND_NOTE: &str = "grid points are retained on the band [gamma_lo - L_h eps, gamma_hi + L_h eps]; points above gamma_hi are checked with the extra margin (alpha_bar - alpha)(h - gamma_hi)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleMode {
    Recursion,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    GammaHat,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub alpha: f64,
    pub alpha_bar: f64,
    pub delta: f64,
    pub schedule: ScheduleMode,
    /// Segment count for uniform schedules.
    pub q: usize,
    pub target: Target,
    pub bounds: AxisBox,
    pub lip_h: Option<f64>,
    pub lip_f: Option<f64>,
    pub lip_pairs: usize,
    pub lip_inflation: f64,
    pub fail_fast: bool,
    pub seed: u64,
    pub max_counterexamples: usize,
    /// Also count the single-segment baseline.
    pub compute_base: bool,
    pub gamma0: Option<f64>,
    pub gamma0_starts: usize,
    pub gamma0_iters: usize,
    pub recursion_tol: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            alpha: 0.2,
            alpha_bar: 0.4,
            delta: 0.01,
            schedule: ScheduleMode::Recursion,
            q: 1,
            target: Target::GammaHat,
            bounds: AxisBox::cube(2, 2.5),
            lip_h: None,
            lip_f: None,
            lip_pairs: 10_000,
            lip_inflation: 1.1,
            fail_fast: false,
            seed: 0,
            max_counterexamples: 1000,
            compute_base: true,
            gamma0: None,
            gamma0_starts: 100,
            gamma0_iters: 500,
            recursion_tol: 1e-6,
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(self.alpha..=1.0).contains(&self.alpha_bar) {
            return bad("alpha_bar must lie in [alpha, 1]");
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad("delta must be finite and non-negative");
        }
        if self.schedule == ScheduleMode::Uniform && self.q == 0 {
            return bad("q must be at least 1");
        }
        self.bounds.validate()?;
        for (name, v) in [("lip_h", self.lip_h), ("lip_f", self.lip_f)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::config(format!("{name} must be positive and finite")));
                }
            }
        }
        if self.lip_pairs == 0 {
            return bad("lip_pairs must be positive");
        }
        if !(self.lip_inflation >= 1.0) {
            return bad("lip_inflation must be at least 1");
        }
        if self.max_counterexamples == 0 {
            return bad("max_counterexamples must be positive");
        }
        if self.gamma0_starts == 0 {
            return bad("gamma0_starts must be positive");
        }
        if !(self.recursion_tol > 0.0) {
            return bad("recursion_tol must be positive");
        }
        Ok(())
    }
}

/// `min h` over `{h ≤ 0}` within `bounds`, by projected gradient descent from
/// starts spread over the sub-zero points of a coarse grid.
pub fn gamma0(h: &dyn Barrier, bounds: &AxisBox, starts: usize, iters: usize) -> Result<f64> {
    let n = bounds.dim();
    if h.dim() != n {
        return Err(Error::Dimension { expected: n, got: h.dim() });
    }
    let target = (400 * starts).clamp(10_000, 1_000_000) as f64;
    let per_axis = (target.powf(1.0 / n as f64).ceil() as u64).max(2);
    let grid = Grid::with_counts(bounds, vec![per_axis; n])?;
    let mut below: Vec<(f64, u64)> = (0..grid.len())
        .into_par_iter()
        .filter_map(|idx| {
            let v = h.value(&grid.point(idx));
            (v <= 0.0).then_some((v, idx))
        })
        .collect();
    if below.is_empty() {
        return Err(Error::EmptySublevelSet);
    }
    below.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let k = starts.min(below.len());
    let picks: Vec<u64> = (0..k).map(|i| below[i * below.len() / k].1).collect();
    let max_side = (0..n).map(|j| bounds.side(j)).fold(0.0, f64::max);
    let best = picks
        .par_iter()
        .map(|&idx| descend(h, bounds, grid.point(idx), iters, 0.1 * max_side))
        .reduce(|| f64::INFINITY, f64::min);
    Ok(best.min(below[0].0))
}

fn descend(h: &dyn Barrier, bounds: &AxisBox, mut x: Vec<f64>, iters: usize, mut step: f64) -> f64 {
    let mut hx = h.value(&x);
    for _ in 0..iters {
        let g = h.gradient(&x);
        if norm2(&g) == 0.0 {
            break;
        }
        let mut moved = false;
        while step > 1e-14 {
            let mut y: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - step * b).collect();
            bounds.project(&mut y);
            let decrease: f64 = g.iter().zip(x.iter().zip(&y)).map(|(gi, (a, b))| gi * (a - b)).sum();
            let hy = h.value(&y);
            if hy <= hx - 1e-4 * decrease && hy < hx {
                x = y;
                hx = hy;
                step *= 2.0;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    hx
}

/// `γ̂ = −(1−ᾱ)δ / (α(1−ᾱ) + ᾱL_f)`.
pub fn gamma_hat(alpha: f64, alpha_bar: f64, delta: f64, l_f: f64) -> Result<f64> {
    let den = alpha * (1.0 - alpha_bar) + alpha_bar * l_f;
    if den == 0.0 {
        return Err(Error::config("gamma_hat denominator vanishes (alpha = alpha_bar = 0)"));
    }
    Ok(-(1.0 - alpha_bar) * delta / den)
}

/// Constants `(a, b)` of the worst-case level recursion `γ⁺ = aγ + bδ`.
pub fn recursion_constants(alpha: f64, alpha_bar: f64, l_h: f64, l_f: f64) -> (f64, f64) {
    let den = l_h * l_f + (1.0 - alpha_bar) * l_h;
    let a = (1.0 - alpha_bar) * (l_h * l_f + (1.0 - alpha) * l_h) / den;
    let b = -(1.0 - alpha_bar) * l_h / den;
    (a, b)
}

/// Largest admissible ε for a segment ending at level `gamma_i`.
pub fn zeta(alpha: f64, alpha_bar: f64, delta: f64, gamma_i: f64, l_h: f64, l_f: f64) -> f64 {
    (delta + (alpha_bar - alpha) * gamma_i.abs()) / (l_h * l_f + (1.0 - alpha_bar) * l_h)
}

/// Iterates the level recursion from `gamma0` until it is within `tol` of
/// `γ̂`; the last entry is then `γ̂` exactly.
pub fn schedule_recursive(gamma0: f64, alpha: f64, alpha_bar: f64, delta: f64, l_h: f64, l_f: f64, tol: f64) -> Result<Vec<f64>> {
    let target = gamma_hat(alpha, alpha_bar, delta, l_f)?;
    if gamma0 >= target {
        return Err(Error::DegenerateSchedule { gamma0, target });
    }
    let (a, b) = recursion_constants(alpha, alpha_bar, l_h, l_f);
    let mut out = vec![gamma0];
    loop {
        let next = a * out[out.len() - 1] + b * delta;
        if (next - target).abs() < tol || next >= target {
            out.push(target);
            return Ok(out);
        }
        if next <= out[out.len() - 1] || out.len() > 1_000_000 {
            return Err(Error::config("level recursion does not approach gamma_hat"));
        }
        out.push(next);
    }
}

/// `q + 1` equally spaced levels from `gamma0` to `target`.
pub fn schedule_uniform(gamma0: f64, target: f64, q: usize) -> Result<Vec<f64>> {
    if q == 0 {
        return Err(Error::config("q must be at least 1"));
    }
    if gamma0 >= target {
        return Err(Error::DegenerateSchedule { gamma0, target });
    }
    let step = (target - gamma0) / q as f64;
    let mut out: Vec<f64> = (0..q).map(|k| gamma0 + k as f64 * step).collect();
    out.push(target);
    Ok(out)
}

/// Grid spacing that makes a cubic grid an ε-net: `2ε/√n`.
pub fn grid_resolution(eps: f64, n: usize) -> f64 {
    2.0 * eps / (n as f64).sqrt()
}

/// Cell-centred axis-aligned grid; points are numbered lexicographically
/// with the first axis most significant.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    lower: Vec<f64>,
    spacing: Vec<f64>,
    counts: Vec<u64>,
    len: u64,
}

impl Grid {
    /// Grid of resolution `2ε/√n` over `bounds`: every point of the box is
    /// within `ε` of a grid point.
    pub fn epsilon_net(bounds: &AxisBox, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::config("eps must be positive and finite"));
        }
        let d = grid_resolution(eps, bounds.dim());
        let counts = (0..bounds.dim())
            .map(|k| {
                let c = (bounds.side(k) / d).ceil().max(1.0);
                if c > 1e15 {
                    Err(Error::config(format!("grid with spacing {d:e} is too large")))
                } else {
                    Ok(c as u64)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::with_counts(bounds, counts)
    }

    pub fn with_counts(bounds: &AxisBox, counts: Vec<u64>) -> Result<Self> {
        let len = counts
            .iter()
            .try_fold(1u64, |acc, &c| acc.checked_mul(c))
            .ok_or_else(|| Error::config("grid point count overflows"))?;
        let spacing = counts.iter().enumerate().map(|(k, &c)| bounds.side(k) / c as f64).collect();
        Ok(Grid {
            lower: bounds.lower.clone(),
            spacing,
            counts,
            len,
        })
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    fn coord(&self, k: usize, j: f64) -> f64 {
        self.lower[k] + (j + 0.5) * self.spacing[k]
    }

    pub fn point(&self, mut idx: u64) -> Vec<f64> {
        let n = self.counts.len();
        let mut x = vec![0.0; n];
        for k in (0..n).rev() {
            x[k] = self.coord(k, (idx % self.counts[k]) as f64);
            idx /= self.counts[k];
        }
        x
    }

    fn linear(&self, j: &[u64]) -> u64 {
        j.iter().zip(&self.counts).fold(0, |acc, (&jk, &c)| acc * c + jk)
    }

    /// Indices of grid points with `h ∈ [lo, hi]`, in lexicographic order.
    /// With `lip` a valid bound on the Lipschitz constant of `h`, whole
    /// blocks are accepted or discarded from their centre value, tightened
    /// by the barrier's interval bounds when it has them; `None` evaluates
    /// every point.
    pub fn retain(&self, h: &dyn Barrier, lo: f64, hi: f64, lip: Option<f64>) -> Vec<u64> {
        let mut out = Vec::new();
        self.scan(h, lo, hi, lip, &self.full_block(), &mut Emit::Collect(&mut out));
        out.par_sort_unstable();
        out
    }

    /// Number of grid points with `h ∈ [lo, hi]`.
    pub fn count(&self, h: &dyn Barrier, lo: f64, hi: f64, lip: Option<f64>) -> u64 {
        let mut n = 0;
        self.scan(h, lo, hi, lip, &self.full_block(), &mut Emit::Count(&mut n));
        n
    }

    fn full_block(&self) -> Vec<(u64, u64)> {
        self.counts.iter().map(|&c| (0, c)).collect()
    }

    fn block_len(block: &[(u64, u64)]) -> u64 {
        block.iter().map(|(a, b)| b - a).product()
    }

    fn scan(&self, h: &dyn Barrier, lo: f64, hi: f64, lip: Option<f64>, block: &[(u64, u64)], emit: &mut Emit<'_>) {
        let size = Self::block_len(block);
        if size == 0 {
            return;
        }
        if let Some(l) = lip {
            let centre: Vec<f64> = block
                .iter()
                .enumerate()
                .map(|(k, &(a, b))| self.coord(k, (a + b - 1) as f64 / 2.0))
                .collect();
            let radius = norm2(
                &block
                    .iter()
                    .enumerate()
                    .map(|(k, &(a, b))| (b - 1 - a) as f64 / 2.0 * self.spacing[k])
                    .collect::<Vec<_>>(),
            );
            let hc = h.value(&centre);
            let spread = l * radius * (1.0 + 1e-12) + 1e-12 * (1.0 + hc.abs());
            let (mut vmin, mut vmax) = (hc - spread, hc + spread);
            let lower: Vec<f64> = block.iter().enumerate().map(|(k, &(a, _))| self.coord(k, a as f64)).collect();
            let upper: Vec<f64> = block.iter().enumerate().map(|(k, &(_, b))| self.coord(k, (b - 1) as f64)).collect();
            if let Some((a, b)) = h.value_bounds(&lower, &upper) {
                let slack = 1e-9 * (1.0 + a.abs().max(b.abs()));
                vmin = vmin.max(a - slack);
                vmax = vmax.min(b + slack);
            }
            if vmax < lo || vmin > hi {
                return;
            }
            if vmin >= lo && vmax <= hi {
                emit.all(self, block);
                return;
            }
        }
        if size <= 64 {
            self.leaf(h, lo, hi, block, emit);
            return;
        }
        let (k, _) = block
            .iter()
            .enumerate()
            .max_by_key(|(k, (a, b))| (b - a, std::cmp::Reverse(*k)))
            .expect("non-empty block");
        let (a, b) = block[k];
        let mid = a + (b - a) / 2;
        let mut left = block.to_vec();
        left[k].1 = mid;
        let mut right = block.to_vec();
        right[k].0 = mid;
        if size >= 1 << 14 {
            let (mut l_out, mut r_out) = emit.split();
            rayon::join(
                || self.scan(h, lo, hi, lip, &left, &mut l_out.as_emit()),
                || self.scan(h, lo, hi, lip, &right, &mut r_out.as_emit()),
            );
            emit.merge(l_out, r_out);
        } else {
            self.scan(h, lo, hi, lip, &left, emit);
            self.scan(h, lo, hi, lip, &right, emit);
        }
    }

    fn leaf(&self, h: &dyn Barrier, lo: f64, hi: f64, block: &[(u64, u64)], emit: &mut Emit<'_>) {
        let mut xs = Vec::with_capacity(64 * block.len());
        let mut idx = Vec::with_capacity(64);
        for_each_index(block, |j| {
            xs.extend(j.iter().enumerate().map(|(k, &jk)| self.coord(k, jk as f64)));
            idx.push(self.linear(j));
        });
        let mut vals = Vec::with_capacity(idx.len());
        h.values(&xs, &mut vals);
        for (v, i) in vals.into_iter().zip(idx) {
            if v >= lo && v <= hi {
                emit.one(i);
            }
        }
    }
}

fn for_each_index(block: &[(u64, u64)], mut f: impl FnMut(&[u64])) {
    let mut j: Vec<u64> = block.iter().map(|r| r.0).collect();
    if block.iter().any(|(a, b)| a >= b) {
        return;
    }
    loop {
        f(&j);
        let mut k = block.len();
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            j[k] += 1;
            if j[k] < block[k].1 {
                break;
            }
            j[k] = block[k].0;
        }
    }
}

enum Emit<'a> {
    Collect(&'a mut Vec<u64>),
    Count(&'a mut u64),
}

enum Owned {
    Collect(Vec<u64>),
    Count(u64),
}

impl Owned {
    fn as_emit(&mut self) -> Emit<'_> {
        match self {
            Owned::Collect(v) => Emit::Collect(v),
            Owned::Count(n) => Emit::Count(n),
        }
    }
}

impl Emit<'_> {
    fn one(&mut self, idx: u64) {
        match self {
            Emit::Collect(v) => v.push(idx),
            Emit::Count(n) => **n += 1,
        }
    }

    fn all(&mut self, grid: &Grid, block: &[(u64, u64)]) {
        match self {
            Emit::Collect(v) => for_each_index(block, |j| v.push(grid.linear(j))),
            Emit::Count(n) => **n += Grid::block_len(block),
        }
    }

    fn split(&self) -> (Owned, Owned) {
        match self {
            Emit::Collect(_) => (Owned::Collect(Vec::new()), Owned::Collect(Vec::new())),
            Emit::Count(_) => (Owned::Count(0), Owned::Count(0)),
        }
    }

    fn merge(&mut self, a: Owned, b: Owned) {
        for part in [a, b] {
            match (&mut *self, part) {
                (Emit::Collect(v), Owned::Collect(p)) => v.extend(p),
                (Emit::Count(n), Owned::Count(p)) => **n += p,
                _ => unreachable!("emitters of one scan share a kind"),
            }
        }
    }
}

/// `v(x) = h(f(x)) − (1−α)h(x) + δ`; the sample passes when `v ≤ 0`.
pub fn check_condition(map: &dyn ClosedLoopMap, h: &dyn Barrier, x: &[f64], alpha: f64, delta: f64) -> f64 {
    h.value(&map.step(x)) - (1.0 - alpha) * h.value(x) + delta
}

/// Level bands and grid resolution of one segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentPlan {
    pub i: usize,
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    pub eps: f64,
    pub d: f64,
    pub band_lo: f64,
    pub band_hi: f64,
}

pub fn plan_segments(schedule: &[f64], alpha: f64, alpha_bar: f64, delta: f64, l_h: f64, l_f: f64, n: usize) -> Result<Vec<SegmentPlan>> {
    schedule
        .windows(2)
        .enumerate()
        .map(|(k, w)| {
            let eps = zeta(alpha, alpha_bar, delta, w[1], l_h, l_f);
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(Error::config(format!(
                    "segment {} has non-positive resolution bound {eps}; delta must be positive",
                    k + 1
                )));
            }
            Ok(SegmentPlan {
                i: k + 1,
                gamma_lo: w[0],
                gamma_hi: w[1],
                eps,
                d: grid_resolution(eps, n),
                band_lo: w[0] - l_h * eps,
                band_hi: w[1] + l_h * eps,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Certified,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub i: usize,
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    pub eps: f64,
    pub d: f64,
    /// Retained grid points (after rejection).
    pub n_samples: u64,
    /// Grid points over the whole box (before rejection).
    pub n_grid: u64,
    pub n_failures: u64,
    /// Largest effective residual; absent for empty segments.
    pub worst_residual: Option<f64>,
}

/// One failing sample, in the format the refine step consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counterexample {
    pub state: Vec<f64>,
    pub h: f64,
    pub residual: f64,
    pub segment: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub schema_version: u32,
    pub verdict: Verdict,
    pub alpha: f64,
    pub alpha_bar: f64,
    pub delta: f64,
    pub gamma0: f64,
    pub gamma_hat: f64,
    pub schedule_mode: ScheduleMode,
    pub target: Target,
    pub schedule: Vec<f64>,
    pub segments: Vec<SegmentReport>,
    pub counterexamples: Vec<Counterexample>,
    pub n_failures: u64,
    pub n_tot: u64,
    pub n_tot_grid: u64,
    pub n_base: Option<u64>,
    pub n_base_grid: Option<u64>,
    pub l_h: f64,
    pub l_f: f64,
    pub lipschitz: LipschitzEstimates,
    pub empty_segments: Vec<usize>,
    pub notes: Vec<String>,
    pub wall_time_s: f64,
}

/// Sample counts of a schedule without running the decay check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleCount {
    pub gamma0: f64,
    pub gamma_hat: f64,
    pub schedule: Vec<f64>,
    pub n_tot: u64,
    pub n_tot_grid: u64,
    /// `None` unless `compute_base` is set.
    pub n_base: Option<u64>,
    pub n_base_grid: Option<u64>,
    pub l_h: f64,
    pub l_f: f64,
    pub wall_time_s: f64,
}

/// Lipschitz constants used for certification: overrides when given,
/// otherwise the barrier's analytic bound and the map's composed bound over
/// the verification box.
pub fn resolve_lipschitz(map: &dyn ClosedLoopMap, h: &dyn Barrier, cfg: &VerifyConfig) -> Result<LipschitzEstimates> {
    let region = SampleRegion::whole(cfg.bounds.clone());
    let (l_h, method_h) = match (cfg.lip_h, h.lipschitz_bound()) {
        (Some(v), _) => (v, LipMethod::Manual),
        (None, Some(v)) => (v, LipMethod::Analytic),
        (None, None) => return Err(Error::config("barrier has no analytic Lipschitz bound; set lip_h")),
    };
    let (l_f, method_f, pairs) = match cfg.lip_f {
        Some(v) => (v, LipMethod::Manual, 0),
        None => {
            let mut rng = rng_from_seed(cfg.seed);
            (map.lipschitz_upper(&region, cfg.lip_pairs, cfg.lip_inflation, &mut rng)?, LipMethod::Sampled, cfg.lip_pairs)
        }
    };
    if !(l_h > 0.0 && l_f > 0.0) {
        return Err(Error::config(format!("Lipschitz constants must be positive (L_h = {l_h}, L_f = {l_f})")));
    }
    Ok(LipschitzEstimates {
        l_h,
        l_f,
        method_h,
        method_f,
        pairs,
        region: region.description().to_string(),
    })
}

pub(crate) struct Prepared {
    pub lip: LipschitzEstimates,
    pub gamma0: f64,
    pub gamma_hat: f64,
    pub schedule: Vec<f64>,
    pub plans: Vec<SegmentPlan>,
    pub base: SegmentPlan,
}

pub(crate) fn prepare(map: &dyn ClosedLoopMap, h: &dyn Barrier, cfg: &VerifyConfig) -> Result<Prepared> {
    cfg.validate()?;
    let n = cfg.bounds.dim();
    if map.dim() != n {
        return Err(Error::Dimension { expected: n, got: map.dim() });
    }
    if h.dim() != n {
        return Err(Error::Dimension { expected: n, got: h.dim() });
    }
    let lip = resolve_lipschitz(map, h, cfg)?;
    let g0 = match cfg.gamma0 {
        Some(g) => g,
        None => gamma0(h, &cfg.bounds, cfg.gamma0_starts, cfg.gamma0_iters)?,
    };
    let g_hat = gamma_hat(cfg.alpha, cfg.alpha_bar, cfg.delta, lip.l_f)?;
    let target = match cfg.target {
        Target::GammaHat => g_hat,
        Target::Zero => 0.0,
    };
    let schedule = match (cfg.schedule, cfg.target) {
        (ScheduleMode::Uniform, _) => schedule_uniform(g0, target, cfg.q)?,
        (ScheduleMode::Recursion, Target::GammaHat) => {
            schedule_recursive(g0, cfg.alpha, cfg.alpha_bar, cfg.delta, lip.l_h, lip.l_f, cfg.recursion_tol)?
        }
        (ScheduleMode::Recursion, Target::Zero) => {
            let mut s = schedule_recursive(g0, cfg.alpha, cfg.alpha_bar, cfg.delta, lip.l_h, lip.l_f, cfg.recursion_tol)?;
            if g_hat < 0.0 {
                s.push(0.0);
            }
            s
        }
    };
    let plans = plan_segments(&schedule, cfg.alpha, cfg.alpha_bar, cfg.delta, lip.l_h, lip.l_f, n)?;
    let base = plan_segments(&[g0, target], cfg.alpha, cfg.alpha_bar, cfg.delta, lip.l_h, lip.l_f, n)?.remove(0);
    info!(
        "gamma0 = {g0:.6}, gamma_hat = {g_hat:.6}, q = {}, L_h = {:.4}, L_f = {:.4}",
        plans.len(),
        lip.l_h,
        lip.l_f
    );
    Ok(Prepared {
        lip,
        gamma0: g0,
        gamma_hat: g_hat,
        schedule,
        plans,
        base,
    })
}

/// Counts retained samples per segment and, with `compute_base`, for the
/// single-segment baseline.
pub fn count_samples(map: &dyn ClosedLoopMap, h: &dyn Barrier, cfg: &VerifyConfig) -> Result<SampleCount> {
    let start = Instant::now();
    let p = prepare(map, h, cfg)?;
    let prune = h.lipschitz_bound();
    let mut n_tot = 0;
    let mut n_tot_grid = 0;
    for plan in &p.plans {
        let grid = Grid::epsilon_net(&cfg.bounds, plan.eps)?;
        n_tot += grid.count(h, plan.band_lo, plan.band_hi, prune);
        n_tot_grid += grid.len();
    }
    let (n_base, n_base_grid) = if cfg.compute_base {
        let grid = Grid::epsilon_net(&cfg.bounds, p.base.eps)?;
        (Some(grid.count(h, p.base.band_lo, p.base.band_hi, prune)), Some(grid.len()))
    } else {
        (None, None)
    };
    Ok(SampleCount {
        gamma0: p.gamma0,
        gamma_hat: p.gamma_hat,
        schedule: p.schedule,
        n_tot,
        n_tot_grid,
        n_base,
        n_base_grid,
        l_h: p.lip.l_h,
        l_f: p.lip.l_f,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Residual the segment check compares against zero: `v(x)`, plus the
/// margin `(ᾱ−α)(h(x)−γ_hi)` for band points above the segment.
pub fn effective_residual(v: f64, h: f64, gamma_hi: f64, alpha: f64, alpha_bar: f64) -> f64 {
    v + (alpha_bar - alpha) * (h - gamma_hi).max(0.0)
}

const CHECK_BLOCK: usize = 1 << 16;

/// Grid-based certification of the sublevel set of `h` for the closed loop.
pub fn verify(map: &dyn ClosedLoopMap, h: &dyn Barrier, cfg: &VerifyConfig) -> Result<VerificationReport> {
    let start = Instant::now();
    let p = prepare(map, h, cfg)?;
    let prune = h.lipschitz_bound();
    let mut segments = Vec::with_capacity(p.plans.len());
    let mut counterexamples = Vec::new();
    let mut n_failures = 0u64;
    let mut empty_segments = Vec::new();
    let mut stopped = false;
    for plan in &p.plans {
        let grid = Grid::epsilon_net(&cfg.bounds, plan.eps)?;
        let mut seg = SegmentReport {
            i: plan.i,
            gamma_lo: plan.gamma_lo,
            gamma_hi: plan.gamma_hi,
            eps: plan.eps,
            d: plan.d,
            n_samples: 0,
            n_grid: grid.len(),
            n_failures: 0,
            worst_residual: None,
        };
        if stopped {
            seg.n_samples = grid.count(h, plan.band_lo, plan.band_hi, prune);
            segments.push(seg);
            continue;
        }
        let idx = grid.retain(h, plan.band_lo, plan.band_hi, prune);
        seg.n_samples = idx.len() as u64;
        if idx.is_empty() {
            warn!("segment {} retained no grid points", plan.i);
            empty_segments.push(plan.i);
        }
        for block in idx.chunks(CHECK_BLOCK) {
            let results: Vec<(f64, Option<Counterexample>)> = block
                .par_iter()
                .map(|&j| {
                    let x = grid.point(j);
                    let hx = h.value(&x);
                    let v = h.value(&map.step(&x)) - (1.0 - cfg.alpha) * hx + cfg.delta;
                    let r = effective_residual(v, hx, plan.gamma_hi, cfg.alpha, cfg.alpha_bar);
                    let cex = (r > 0.0).then(|| Counterexample {
                        state: x,
                        h: hx,
                        residual: r,
                        segment: plan.i,
                    });
                    (r, cex)
                })
                .collect();
            for (r, cex) in results {
                seg.worst_residual = Some(seg.worst_residual.map_or(r, |w: f64| w.max(r)));
                if let Some(c) = cex {
                    seg.n_failures += 1;
                    if counterexamples.len() < cfg.max_counterexamples {
                        counterexamples.push(c);
                    }
                    if cfg.fail_fast {
                        stopped = true;
                        break;
                    }
                }
            }
            if stopped {
                break;
            }
        }
        n_failures += seg.n_failures;
        info!(
            "segment {}: [{:.6}, {:.6}] eps = {:.3e}, {} samples, {} failures",
            plan.i, plan.gamma_lo, plan.gamma_hi, plan.eps, seg.n_samples, seg.n_failures
        );
        segments.push(seg);
    }
    let (n_base, n_base_grid) = if cfg.compute_base {
        let grid = Grid::epsilon_net(&cfg.bounds, p.base.eps)?;
        (Some(grid.count(h, p.base.band_lo, p.base.band_hi, prune)), Some(grid.len()))
    } else {
        (None, None)
    };
    let mut notes = vec![CORRECTED_B_NOTE.to_string(), BAND_NOTE.to_string()];
    if cfg.fail_fast && stopped {
        notes.push("stopped at the first failing sample".to_string());
    }
    Ok(VerificationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        verdict: if n_failures == 0 { Verdict::Certified } else { Verdict::Failed },
        alpha: cfg.alpha,
        alpha_bar: cfg.alpha_bar,
        delta: cfg.delta,
        gamma0: p.gamma0,
        gamma_hat: p.gamma_hat,
        schedule_mode: cfg.schedule,
        target: cfg.target,
        schedule: p.schedule,
        n_tot: segments.iter().map(|s| s.n_samples).sum(),
        n_tot_grid: segments.iter().map(|s| s.n_grid).sum(),
        segments,
        counterexamples,
        n_failures,
        n_base,
        n_base_grid,
        l_h: p.lip.l_h,
        l_f: p.lip.l_f,
        lipschitz: p.lip,
        empty_segments,
        notes,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::FnMap;
    use crate::neural::FnBarrier;
    use proptest::prelude::*;
    use rand::Rng;

    const REF_LH: f64 = 1.6854;
    const REF_LF: f64 = 1.4325;

    fn quadratic() -> impl Barrier {
        // ‖x‖² − 1 with its Lipschitz constant over the 2.5-cube.
        FnBarrier {
            dim: 2,
            value: |x: &[f64]| x[0] * x[0] + x[1] * x[1] - 1.0,
            gradient: |x: &[f64]| vec![2.0 * x[0], 2.0 * x[1]],
            lipschitz: Some(2.0 * 2.5 * 2f64.sqrt()),
        }
    }

    fn first_coordinate() -> impl Barrier {
        FnBarrier {
            dim: 2,
            value: |x: &[f64]| x[0],
            gradient: |_: &[f64]| vec![1.0, 0.0],
            lipschitz: Some(1.0),
        }
    }

    fn scaling(s: f64) -> impl ClosedLoopMap {
        FnMap {
            dim: 2,
            map: move |x: &[f64]| vec![s * x[0], s * x[1]],
            jac: move |_: &[f64]| vec![s, 0.0, 0.0, s],
        }
    }

    #[test]
    fn gamma0_examples() {
        let b = AxisBox::cube(2, 2.0);
        let g = gamma0(&quadratic(), &b, 100, 500).unwrap();
        assert!((g + 1.0).abs() < 1e-6, "{g}");
        let g = gamma0(&first_coordinate(), &b, 100, 500).unwrap();
        assert!((g + 2.0).abs() < 1e-12, "{g}");
        let positive = FnBarrier {
            dim: 2,
            value: |x: &[f64]| 1.0 + x[0] * x[0],
            gradient: |x: &[f64]| vec![2.0 * x[0], 0.0],
            lipschitz: None,
        };
        assert!(matches!(gamma0(&positive, &b, 10, 10), Err(Error::EmptySublevelSet)));
    }

    #[test]
    fn gamma_hat_examples() {
        assert!((gamma_hat(0.2, 0.4, 0.01, REF_LF).unwrap() + 0.00866).abs() < 1e-5);
        assert!((gamma_hat(0.2, 0.8, 0.01, REF_LF).unwrap() + 0.00169).abs() < 1e-5);
        assert_eq!(gamma_hat(0.2, 1.0, 0.01, REF_LF).unwrap(), 0.0);
        assert!(gamma_hat(0.0, 0.0, 0.01, 1.0).is_err());
    }

    #[test]
    fn recursion_constants_examples() {
        let (a, b) = recursion_constants(0.2, 0.4, REF_LH, REF_LF);
        assert!((a - 0.65904).abs() < 1e-5, "{a}");
        assert!((b + 0.29520).abs() < 1e-5, "{b}");
        let fixed = b * 0.01 / (1.0 - a);
        assert!((fixed + 0.008658).abs() < 1e-6);
        assert!((fixed - gamma_hat(0.2, 0.4, 0.01, REF_LF).unwrap()).abs() < 1e-12);
        let (a, b) = recursion_constants(0.2, 1.0 - 1e-12, REF_LH, REF_LF);
        assert!(a.abs() < 1e-10 && b.abs() < 1e-10);
    }

    #[test]
    fn recursive_schedule_matches_reference_counts() {
        for (alpha_bar, q_ref) in [(0.4, 32), (0.6, 20), (0.8, 11)] {
            let s = schedule_recursive(-1.003, 0.2, alpha_bar, 0.01, REF_LH, REF_LF, 1e-6).unwrap();
            let q = s.len() as i64 - 1;
            assert!((q - q_ref).abs() <= 3, "alpha_bar {alpha_bar}: q = {q}");
            assert!(s.windows(2).all(|w| w[1] > w[0]));
            assert_eq!(*s.last().unwrap(), gamma_hat(0.2, alpha_bar, 0.01, REF_LF).unwrap());
        }
        let s = schedule_recursive(-1.0, 0.2, 1.0, 0.01, REF_LH, REF_LF, 1e-6).unwrap();
        assert_eq!(s, vec![-1.0, 0.0]);
        let err = schedule_recursive(-0.001, 0.2, 0.4, 0.01, REF_LH, REF_LF, 1e-6).unwrap_err();
        assert!(matches!(err, Error::DegenerateSchedule { .. }));
    }

    #[test]
    fn uniform_schedule_examples() {
        assert_eq!(schedule_uniform(-1.0, 0.0, 2).unwrap(), vec![-1.0, -0.5, 0.0]);
        assert_eq!(schedule_uniform(-1.3, 0.0, 1).unwrap(), vec![-1.3, 0.0]);
        let s = schedule_uniform(-1.003, -0.004, 7).unwrap();
        for w in s.windows(2) {
            assert!(((w[1] - w[0]) - 0.999 / 7.0).abs() < 1e-12);
        }
        assert!(schedule_uniform(0.0, 0.0, 3).is_err());
        assert!(schedule_uniform(-1.0, 0.0, 0).is_err());
    }

    #[test]
    fn zeta_examples() {
        let z = zeta(0.2, 0.4, 0.01, -1.003, REF_LH, REF_LF);
        assert!((z - 0.06148).abs() < 1e-5, "{z}");
        let a = zeta(0.2, 0.2, 0.01, -1.0, REF_LH, REF_LF);
        let b = zeta(0.2, 0.2, 0.01, -0.1, REF_LH, REF_LF);
        assert_eq!(a, b);
        assert_eq!(zeta(0.2, 0.4, 0.0, 0.0, REF_LH, REF_LF), 0.0);
    }

    #[test]
    fn grid_examples() {
        let d = grid_resolution(0.05, 2);
        assert!((d - 0.070711).abs() < 1e-6);
        let g = Grid::epsilon_net(&AxisBox::cube(2, 2.5), 0.05).unwrap();
        assert_eq!(g.counts(), &[71, 71]);

        let unit = AxisBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let g = Grid::epsilon_net(&unit, 0.05).unwrap();
        let per_axis = (1.0 / grid_resolution(0.05, 2)).ceil() as u64;
        let idx = g.retain(&first_coordinate(), 0.0, 1.0, Some(1.0));
        assert_eq!(idx.len() as u64, per_axis * per_axis);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn pruned_scan_matches_exhaustive_scan() {
        let h = quadratic();
        let g = Grid::epsilon_net(&AxisBox::cube(2, 2.5), 0.01).unwrap();
        for (lo, hi) in [(-1.0, -0.5), (-0.2, 0.05), (2.0, 100.0), (-5.0, -2.0)] {
            let fast = g.retain(&h, lo, hi, h.lipschitz_bound());
            let slow = g.retain(&h, lo, hi, None);
            assert_eq!(fast, slow);
            assert_eq!(g.count(&h, lo, hi, h.lipschitz_bound()), slow.len() as u64);
        }
    }

    #[test]
    fn epsilon_net_audit() {
        let h = quadratic();
        let bounds = AxisBox::cube(2, 2.5);
        let (lo, hi, eps, l) = (-0.6, -0.2, 0.04, h.lipschitz_bound().unwrap());
        let g = Grid::epsilon_net(&bounds, eps).unwrap();
        let pts: Vec<Vec<f64>> = g.retain(&h, lo - l * eps, hi + l * eps, Some(l)).into_iter().map(|j| g.point(j)).collect();
        let mut rng = rng_from_seed(11);
        let mut audited = 0;
        while audited < 1000 {
            let x = bounds.sample(&mut rng);
            let v = h.value(&x);
            if v < lo || v > hi {
                continue;
            }
            audited += 1;
            let near = pts.iter().map(|p| crate::linalg::dist2(p, &x)).fold(f64::INFINITY, f64::min);
            assert!(near <= eps, "{x:?} is {near} from the net");
        }
    }

    #[test]
    fn check_condition_examples() {
        let id = scaling(1.0);
        let h = quadratic();
        assert_eq!(check_condition(&id, &h, &[0.3, 0.4], 0.0, 0.0), 0.0);
        assert!((check_condition(&id, &h, &[0.3, 0.4], 0.0, 0.01) - 0.01).abs() < 1e-15);
    }

    fn synthetic_cfg(alpha: f64, alpha_bar: f64, delta: f64) -> VerifyConfig {
        VerifyConfig {
            alpha,
            alpha_bar,
            delta,
            lip_f: Some(0.5),
            bounds: AxisBox::cube(2, 2.5),
            ..VerifyConfig::default()
        }
    }

    #[test]
    fn contracting_quadratic_is_certified() {
        let h = quadratic();
        let cfg = synthetic_cfg(0.5, 1.0, 0.05);
        let rep = verify(&scaling(0.5), &h, &cfg).unwrap();
        assert_eq!(rep.verdict, Verdict::Certified);
        assert!(rep.counterexamples.is_empty());
        assert!((rep.gamma0 + 1.0).abs() < 1e-6);
        assert_eq!(rep.schedule.len(), 2);
        assert!(rep.n_tot > 0);
    }

    #[test]
    fn expanding_quadratic_fails_with_real_counterexamples() {
        let h = quadratic();
        let map = scaling(1.05);
        let cfg = VerifyConfig {
            lip_f: Some(1.05),
            ..synthetic_cfg(0.5, 1.0, 0.05)
        };
        let rep = verify(&map, &h, &cfg).unwrap();
        assert_eq!(rep.verdict, Verdict::Failed);
        assert!(!rep.counterexamples.is_empty());
        for c in &rep.counterexamples {
            let v = check_condition(&map, &h, &c.state, cfg.alpha, cfg.delta);
            assert!(v > 0.0 || effective_residual(v, c.h, 0.0, cfg.alpha, cfg.alpha_bar) > 0.0);
        }
    }

    #[test]
    fn fail_fast_stops_at_first_counterexample() {
        let h = quadratic();
        let cfg = VerifyConfig {
            lip_f: Some(1.05),
            fail_fast: true,
            ..synthetic_cfg(0.5, 1.0, 0.05)
        };
        let rep = verify(&scaling(1.05), &h, &cfg).unwrap();
        assert_eq!(rep.verdict, Verdict::Failed);
        assert_eq!(rep.n_failures, 1);
        assert_eq!(rep.counterexamples.len(), 1);
    }

    #[test]
    fn perturbed_barrier_fails() {
        // Shifting h up by c raises v by αc; near the origin v = 0.5c − 0.45.
        let h = FnBarrier {
            dim: 2,
            value: |x: &[f64]| x[0] * x[0] + x[1] * x[1] - 1.0 + 0.95,
            gradient: |x: &[f64]| vec![2.0 * x[0], 2.0 * x[1]],
            lipschitz: Some(2.0 * 2.5 * 2f64.sqrt()),
        };
        let rep = verify(&scaling(0.5), &h, &synthetic_cfg(0.5, 1.0, 0.05)).unwrap();
        assert_eq!(rep.verdict, Verdict::Failed);
        assert!(!rep.counterexamples.is_empty());
    }

    #[test]
    fn oversized_delta_makes_schedule_degenerate() {
        // γ̂ = −0.6·2/(0.2·0.6 + 0.4·0.5) = −3.75 lies below γ₀ = −1.
        let cfg = VerifyConfig {
            lip_h: Some(1.0),
            ..synthetic_cfg(0.2, 0.4, 2.0)
        };
        let err = verify(&scaling(0.5), &quadratic(), &cfg).unwrap_err();
        assert!(matches!(err, Error::DegenerateSchedule { .. }));
    }

    #[test]
    fn segmentation_reduces_uniform_sample_count() {
        let h = quadratic();
        let count = |q| {
            let cfg = VerifyConfig {
                schedule: ScheduleMode::Uniform,
                q,
                ..synthetic_cfg(0.2, 0.6, 0.05)
            };
            count_samples(&scaling(0.5), &h, &cfg).unwrap()
        };
        let one = count(1);
        let eight = count(8);
        assert_eq!(Some(one.n_tot), one.n_base);
        assert!(eight.n_tot < one.n_tot, "{} vs {}", eight.n_tot, one.n_tot);
    }

    #[test]
    fn report_is_reproducible() {
        let h = quadratic();
        let cfg = synthetic_cfg(0.5, 1.0, 0.05);
        let mut a = verify(&scaling(0.5), &h, &cfg).unwrap();
        let mut b = verify(&scaling(0.5), &h, &cfg).unwrap();
        a.wall_time_s = 0.0;
        b.wall_time_s = 0.0;
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(VerifyConfig::default().validate().is_ok());
        let bad = VerifyConfig {
            alpha_bar: 0.1,
            ..VerifyConfig::default()
        };
        assert!(bad.validate().is_err());
        let json = r#"{"alpha": 0.2, "bogus": 1}"#;
        assert!(serde_json::from_str::<VerifyConfig>(json).is_err());
        let json = r#"{"schedule": "uniform", "q": 4, "target": "zero"}"#;
        let cfg: VerifyConfig = serde_json::from_str(json).unwrap();
        assert_eq!((cfg.schedule, cfg.q, cfg.target), (ScheduleMode::Uniform, 4, Target::Zero));
    }

    #[test]
    fn zeta_grows_with_level_magnitude() {
        let mut rng = rng_from_seed(9);
        for _ in 0..1000 {
            let alpha = rng.gen_range(0.0..1.0);
            let alpha_bar = rng.gen_range(alpha..=1.0);
            let delta = rng.gen_range(0.0..0.1);
            let (l_h, l_f) = (rng.gen_range(0.1..10.0), rng.gen_range(0.1..10.0));
            let g1: f64 = rng.gen_range(-2.0..0.0);
            let g2: f64 = rng.gen_range(-2.0..0.0);
            let (small, large) = if g1.abs() <= g2.abs() { (g1, g2) } else { (g2, g1) };
            assert!(zeta(alpha, alpha_bar, delta, large, l_h, l_f) >= zeta(alpha, alpha_bar, delta, small, l_h, l_f));
        }
    }

    proptest! {
        #[test]
        fn schedules_are_strictly_increasing(
            g0 in -5.0f64..-0.05,
            alpha in 0.01f64..0.5,
            frac in 0.0f64..0.99,
            l_h in 0.5f64..5.0,
            l_f in 0.5f64..3.0,
            q in 1usize..20,
        ) {
            let alpha_bar = alpha + frac * (1.0 - alpha);
            let s = schedule_recursive(g0, alpha, alpha_bar, 0.01, l_h, l_f, 1e-6).unwrap();
            prop_assert!(s.windows(2).all(|w| w[1] > w[0]));
            prop_assert_eq!(*s.last().unwrap(), gamma_hat(alpha, alpha_bar, 0.01, l_f).unwrap());
            let u = schedule_uniform(g0, 0.0, q).unwrap();
            prop_assert_eq!(u.len(), q + 1);
            prop_assert!(u.windows(2).all(|w| w[1] > w[0]));
            prop_assert_eq!(*u.last().unwrap(), 0.0);
        }

        #[test]
        fn grid_is_an_epsilon_net(
            lo0 in -3.0f64..0.0, lo1 in -3.0f64..0.0,
            w0 in 0.1f64..3.0, w1 in 0.1f64..3.0,
            eps in 0.02f64..0.5,
            seed in 0u64..1000,
        ) {
            let b = AxisBox::new(vec![lo0, lo1], vec![lo0 + w0, lo1 + w1]).unwrap();
            let g = Grid::epsilon_net(&b, eps).unwrap();
            let mut rng = rng_from_seed(seed);
            for _ in 0..200 {
                let x = b.sample(&mut rng);
                let j: Vec<u64> = (0..2)
                    .map(|k| (((x[k] - b.lower[k]) / g.spacing()[k]).floor() as u64).min(g.counts()[k] - 1))
                    .collect();
                let p = g.point(g.linear(&j));
                prop_assert!(crate::linalg::dist2(&p, &x) <= eps);
            }
        }
    }
}
