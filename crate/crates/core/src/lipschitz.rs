//! Lipschitz constants of the barrier and the closed loop: sampled lower
//! bounds from difference quotients and composed upper bounds.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::controller::Controller;
use crate::dynamics::{AxisBox, ClosedLoopMap, Dynamics};
use crate::error::{Error, Result};
use crate::linalg::{dist2, spectral_norm};
use crate::neural::{Barrier, Mlp};
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LipMethod {
    Sampled,
    Analytic,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimates {
    pub l_h: f64,
    pub l_f: f64,
    pub method_h: LipMethod,
    pub method_f: LipMethod,
    /// Pairs drawn for the sampled estimate (0 when none was run).
    pub pairs: usize,
    pub region: String,
}

/// A box, optionally restricted by a membership predicate, sampled by
/// rejection.
pub struct SampleRegion<'a> {
    pub bounds: AxisBox,
    accept: Option<Box<dyn Fn(&[f64]) -> bool + Sync + 'a>>,
    description: String,
}

impl<'a> SampleRegion<'a> {
    pub fn whole(bounds: AxisBox) -> Self {
        let description = format!("box {:?}..{:?}", bounds.lower, bounds.upper);
        SampleRegion {
            bounds,
            accept: None,
            description,
        }
    }

    /// `{x ∈ bounds : h(x) ≤ level}`.
    pub fn sublevel(bounds: AxisBox, h: &'a dyn Barrier, level: f64) -> Self {
        let description = format!("sublevel h <= {level} within box {:?}..{:?}", bounds.lower, bounds.upper);
        SampleRegion {
            bounds,
            accept: Some(Box::new(move |x: &[f64]| h.value(x) <= level)),
            description,
        }
    }

    pub fn with_predicate(bounds: AxisBox, accept: impl Fn(&[f64]) -> bool + Sync + 'a, description: impl Into<String>) -> Self {
        SampleRegion {
            bounds,
            accept: Some(Box::new(accept)),
            description: description.into(),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.bounds.contains(x) && self.accept.as_ref().is_none_or(|f| f(x))
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    /// Draws `n` points, giving up after `budget` box draws in total.
    pub fn draw(&self, n: usize, budget: u64, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(n);
        let mut used = 0u64;
        while out.len() < n {
            if used >= budget {
                return Err(Error::RejectionBudget {
                    budget,
                    accepted: out.len() as u64,
                });
            }
            used += 1;
            let x = self.bounds.sample(rng);
            if self.accept.as_ref().is_none_or(|f| f(&x)) {
                out.push(x);
            }
        }
        Ok(out)
    }
}

/// `max ‖f(x₁) − f(x₂)‖ / ‖x₁ − x₂‖` over `n_pairs` i.i.d. uniform pairs in
/// the region. A lower bound on the Lipschitz constant of `f` there.
pub fn sampled_lip_lower(f: &dyn Fn(&[f64]) -> Vec<f64>, region: &SampleRegion<'_>, n_pairs: usize, rng: &mut Rng) -> Result<f64> {
    if n_pairs == 0 {
        return Err(Error::config("need at least one pair"));
    }
    let budget = 100 * n_pairs as u64;
    let mut best = 0.0f64;
    let mut used = 0u64;
    for _ in 0..n_pairs {
        // Pairs are drawn one after the other so a run with more pairs extends
        // the sequence of a shorter run with the same seed.
        let pair = region.draw(2, budget.saturating_sub(used).max(2), rng)?;
        used += 2;
        let dx = dist2(&pair[0], &pair[1]);
        if dx == 0.0 {
            continue;
        }
        let q = dist2(&f(&pair[0]), &f(&pair[1])) / dx;
        best = best.max(q);
    }
    Ok(best)
}

/// Sample points covering the convex hull of the region: each pair of region
/// points contributes both endpoints and one uniform point on their segment.
fn hull_points(region: &SampleRegion<'_>, n_pairs: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    let pts = region.draw(2 * n_pairs, 100 * 2 * n_pairs as u64, rng)?;
    let mut out = Vec::with_capacity(3 * n_pairs);
    for pair in pts.chunks(2) {
        let t: f64 = rng.gen_range(0.0..=1.0);
        let mid: Vec<f64> = pair[0].iter().zip(&pair[1]).map(|(a, b)| a + t * (b - a)).collect();
        out.push(pair[0].clone());
        out.push(pair[1].clone());
        out.push(mid);
    }
    Ok(out)
}

/// Upper bound for a general closed-loop map: inflated maximum of the
/// sampled Jacobian norm over the convex hull of the region.
pub fn map_lip_upper<M: ClosedLoopMap + ?Sized>(map: &M, region: &SampleRegion<'_>, n_pairs: usize, inflation: f64, rng: &mut Rng) -> Result<f64> {
    let n = map.dim();
    let mut best = 0.0f64;
    for z in hull_points(region, n_pairs, rng)? {
        best = best.max(spectral_norm(&map.jacobian(&z), n, n));
    }
    Ok(inflation * best)
}

/// Composed bounds `(L_f, L_h)`: `L_h = ∏‖W‖₂` for the barrier and
/// `L_f = L_x + L_u_gain · L_u`, where `L_x` and `L_u_gain` are inflated
/// maxima of `‖∂f/∂x‖₂` and `‖∂f/∂u‖₂` over the hull of the region with
/// inputs drawn uniformly from `U`, and `L_u` is the controller's bound.
pub fn closed_loop_lip_upper(
    dynamics: &dyn Dynamics,
    ctrl: &Controller,
    h: &Mlp,
    region: &SampleRegion<'_>,
    n_pairs: usize,
    inflation: f64,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    let (l_x, l_ug) = open_loop_gains(dynamics, ctrl, region, n_pairs, inflation, rng)?;
    Ok((l_x + l_ug * ctrl.lipschitz(), h.lipschitz_upper()))
}

/// Inflated sampled maxima of `‖∂f/∂x‖₂` and `‖∂f/∂u‖₂`.
pub fn open_loop_gains(
    dynamics: &dyn Dynamics,
    ctrl: &Controller,
    region: &SampleRegion<'_>,
    n_pairs: usize,
    inflation: f64,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    let n = dynamics.state_dim();
    let m = dynamics.input_dim();
    let (lo, hi) = ctrl.bounds();
    let u_box = AxisBox::new(lo.to_vec(), hi.to_vec())?;
    let mut l_x = 0.0f64;
    let mut l_u = 0.0f64;
    for z in hull_points(region, n_pairs, rng)? {
        let u = u_box.sample(rng);
        let (_, jx, ju) = dynamics.step_with_jacobians(&z, &u);
        l_x = l_x.max(spectral_norm(&jx, n, n));
        l_u = l_u.max(spectral_norm(&ju, n, m));
    }
    Ok((inflation * l_x, inflation * l_u))
}
