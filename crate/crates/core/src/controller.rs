//! Box-constrained QP control law in closed form.
//!
//! For diagonal `Q` and `U = [u_lo, u_hi]` the minimizer of
//! `½uᵀQu + c(x)ᵀu` over `U` is `clamp(-Q⁻¹c(x), u_lo, u_hi)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{Mlp, Trace};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ControllerRepr {
    q_diag: Vec<f64>,
    u_lo: Vec<f64>,
    u_hi: Vec<f64>,
    feature_net: Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ControllerRepr")]
pub struct Controller {
    q_diag: Vec<f64>,
    u_lo: Vec<f64>,
    u_hi: Vec<f64>,
    feature_net: Mlp,
}

impl TryFrom<ControllerRepr> for Controller {
    type Error = Error;

    fn try_from(r: ControllerRepr) -> Result<Self> {
        Controller::new(r.feature_net, r.q_diag, r.u_lo, r.u_hi)
    }
}

impl Controller {
    pub fn new(feature_net: Mlp, q_diag: Vec<f64>, u_lo: Vec<f64>, u_hi: Vec<f64>) -> Result<Self> {
        let m = feature_net.output_dim();
        for v in [&q_diag, &u_lo, &u_hi] {
            if v.len() != m {
                return Err(Error::Dimension { expected: m, got: v.len() });
            }
        }
        if let Some(q) = q_diag.iter().find(|q| !(**q > 0.0 && q.is_finite())) {
            return Err(Error::config(format!("Q must be positive definite, got diagonal entry {q}")));
        }
        for (lo, hi) in u_lo.iter().zip(&u_hi) {
            if !(lo < hi) {
                return Err(Error::config(format!("input box needs u_lo < u_hi, got [{lo}, {hi}]")));
            }
        }
        Ok(Controller {
            q_diag,
            u_lo,
            u_hi,
            feature_net,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.feature_net.input_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.feature_net.output_dim()
    }

    pub fn feature_net(&self) -> &Mlp {
        &self.feature_net
    }

    pub fn feature_net_mut(&mut self) -> &mut Mlp {
        &mut self.feature_net
    }

    pub fn q_diag(&self) -> &[f64] {
        &self.q_diag
    }

    pub fn bounds(&self) -> (&[f64], &[f64]) {
        (&self.u_lo, &self.u_hi)
    }

    /// Unclamped minimizer `-Q⁻¹c(x)`.
    fn unconstrained(&self, c: &[f64]) -> Vec<f64> {
        c.iter().zip(&self.q_diag).map(|(c, q)| -c / q).collect()
    }

    fn clamp(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(j, v)| v.clamp(self.u_lo[j], self.u_hi[j]))
            .collect()
    }

    /// Interior coordinates pass gradients; the kink counts as interior.
    fn interior_mask(&self, z: &[f64]) -> Vec<bool> {
        z.iter()
            .enumerate()
            .map(|(j, v)| *v >= self.u_lo[j] && *v <= self.u_hi[j])
            .collect()
    }

    /// `u(x) = clamp(-Q⁻¹c(x), u_lo, u_hi)`; always inside `U`.
    pub fn control_law(&self, x: &[f64]) -> Vec<f64> {
        let c = self.feature_net.forward(x);
        self.clamp(&self.unconstrained(&c))
    }

    /// Accumulates `scale · ∂⟨cot_u, u(x)⟩/∂θ_u` into `grad` and returns `u(x)`.
    pub fn vjp_params(&self, x: &[f64], cot_u: &[f64], grad: &mut [f64], scale: f64) -> Vec<f64> {
        let trace = self.feature_net.forward_trace(x);
        self.vjp_params_traced(&trace, cot_u, grad, scale)
    }

    /// Control from a recorded feature-net pass.
    pub fn law_from_trace(&self, trace: &Trace) -> Vec<f64> {
        self.clamp(&self.unconstrained(trace.output()))
    }

    /// [`Controller::vjp_params`] from a recorded feature-net pass.
    pub fn vjp_params_traced(&self, trace: &Trace, cot_u: &[f64], grad: &mut [f64], scale: f64) -> Vec<f64> {
        let z = self.unconstrained(trace.output());
        let mask = self.interior_mask(&z);
        let cot_c: Vec<f64> = (0..self.input_dim())
            .map(|j| if mask[j] { -cot_u[j] / self.q_diag[j] } else { 0.0 })
            .collect();
        if cot_c.iter().any(|&v| v != 0.0) {
            self.feature_net.backprop(trace, &cot_c, Some(grad), scale);
        }
        self.clamp(&z)
    }

    /// Jacobian of `u` with respect to the feature-net parameters,
    /// row-major `n_u × P`.
    pub fn param_jacobian(&self, x: &[f64]) -> Vec<f64> {
        let p = self.feature_net.param_count();
        let m = self.input_dim();
        let mut out = vec![0.0; m * p];
        for j in 0..m {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            self.vjp_params(x, &e, &mut out[j * p..(j + 1) * p], 1.0);
        }
        out
    }

    /// Jacobian of `u` with respect to the state, row-major `n_u × n_x`.
    pub fn input_jacobian(&self, x: &[f64]) -> Vec<f64> {
        let trace = self.feature_net.forward_trace(x);
        let z = self.unconstrained(trace.output());
        let mask = self.interior_mask(&z);
        let m = self.input_dim();
        let mut out = Vec::with_capacity(m * self.state_dim());
        for j in 0..m {
            if !mask[j] {
                out.extend(std::iter::repeat(0.0).take(self.state_dim()));
                continue;
            }
            let mut e = vec![0.0; m];
            e[j] = -1.0 / self.q_diag[j];
            out.extend(self.feature_net.backprop(&trace, &e, None, 1.0));
        }
        out
    }

    /// `max_j(1/Q_j) · L(c)`; the clamp is 1-Lipschitz.
    pub fn lipschitz(&self) -> f64 {
        let inv_q = self.q_diag.iter().map(|q| 1.0 / q).fold(0.0, f64::max);
        inv_q * self.feature_net.lipschitz_upper()
    }

    /// Same controller with new feature-net parameters.
    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        let mut c = self.clone();
        c.feature_net.set_params(params)?;
        Ok(c)
    }
}
