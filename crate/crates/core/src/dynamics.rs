//! Vector fields, RK4 discretization, the benchmark system and closed-loop
//! simulation.

use serde::{Deserialize, Serialize};

use crate::controller::Controller;
use crate::error::{Error, Result};
use crate::linalg::{identity, matmul};
use crate::lipschitz::SampleRegion;
use crate::Rng;

/// Axis-aligned box `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl AxisBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let b = AxisBox { lower, upper };
        b.validate()?;
        Ok(b)
    }

    /// The cube `[-half, half]^n`, i.e. `half · B∞ⁿ`.
    pub fn cube(n: usize, half: f64) -> Self {
        AxisBox {
            lower: vec![-half; n],
            upper: vec![half; n],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() {
            return Err(Error::Dimension {
                expected: self.lower.len(),
                got: self.upper.len(),
            });
        }
        if self.lower.is_empty() {
            return Err(Error::config("box has dimension 0"));
        }
        for (l, u) in self.lower.iter().zip(&self.upper) {
            if !l.is_finite() || !u.is_finite() || l > u {
                return Err(Error::config(format!("invalid box bounds [{l}, {u}]")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn side(&self, k: usize) -> f64 {
        self.upper[k] - self.lower[k]
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|k| self.side(k)).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| l <= v && v <= u)
    }

    pub fn project(&self, x: &mut [f64]) {
        for (k, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[k], self.upper[k]);
        }
    }

    /// Uniform draw from the box.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.dim())
            .map(|k| {
                if self.side(k) > 0.0 {
                    rng.gen_range(self.lower[k]..self.upper[k])
                } else {
                    self.lower[k]
                }
            })
            .collect()
    }
}

/// Continuous-time vector field `ẋ = F(x, u)`.
pub trait VectorField: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn eval(&self, x: &[f64], u: &[f64]) -> Vec<f64>;
    /// Row-major `(∂F/∂x, ∂F/∂u)`, of shapes `n_x × n_x` and `n_x × n_u`.
    fn jacobians(&self, x: &[f64], u: &[f64]) -> (Vec<f64>, Vec<f64>);
}

/// The two-state benchmark field with one input.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BenchmarkField;

/// `(x₂ + cos x₁, (1 − x₁²) x₂ − x₁ + sin x₁ + u)`.
pub fn benchmark_vector_field(x: &[f64], u: &[f64]) -> Vec<f64> {
    let (x1, x2) = (x[0], x[1]);
    vec![x2 + x1.cos(), (1.0 - x1 * x1) * x2 - x1 + x1.sin() + u[0]]
}

impl VectorField for BenchmarkField {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn eval(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        benchmark_vector_field(x, u)
    }

    fn jacobians(&self, x: &[f64], _u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (x1, x2) = (x[0], x[1]);
        let jx = vec![-x1.sin(), 1.0, -2.0 * x1 * x2 - 1.0 + x1.cos(), 1.0 - x1 * x1];
        (jx, vec![0.0, 1.0])
    }
}

fn axpy(x: &[f64], a: f64, k: &[f64]) -> Vec<f64> {
    x.iter().zip(k).map(|(xi, ki)| xi + a * ki).collect()
}

/// One classical RK4 step with `u` held constant over `[0, dt]`.
pub fn rk4_step<F: VectorField + ?Sized>(field: &F, x: &[f64], u: &[f64], dt: f64) -> Vec<f64> {
    let k1 = field.eval(x, u);
    let k2 = field.eval(&axpy(x, 0.5 * dt, &k1), u);
    let k3 = field.eval(&axpy(x, 0.5 * dt, &k2), u);
    let k4 = field.eval(&axpy(x, dt, &k3), u);
    (0..x.len())
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Discrete-time open-loop dynamics `x+ = f(x, u)`.
pub trait Dynamics: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn step(&self, x: &[f64], u: &[f64]) -> Vec<f64>;
    /// `(x+, ∂x+/∂x, ∂x+/∂u)`, Jacobians row-major.
    fn step_with_jacobians(&self, x: &[f64], u: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>);
    /// `∂x+/∂u`, row-major `n_x × n_u`.
    fn input_jacobian(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        self.step_with_jacobians(x, u).2
    }
}

/// RK4 discretization of a vector field with fixed step `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rk4<F> {
    pub field: F,
    pub dt: f64,
}

impl<F: VectorField> Rk4<F> {
    pub fn new(field: F, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::config(format!("dt must be positive, got {dt}")));
        }
        Ok(Rk4 { field, dt })
    }
}

impl<F: VectorField> Dynamics for Rk4<F> {
    fn state_dim(&self) -> usize {
        self.field.state_dim()
    }

    fn input_dim(&self) -> usize {
        self.field.input_dim()
    }

    fn step(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        rk4_step(&self.field, x, u, self.dt)
    }

    fn step_with_jacobians(&self, x: &[f64], u: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        // Forward-mode sensitivities of each stage.
        let n = self.state_dim();
        let m = self.input_dim();
        let dt = self.dt;
        let eye = identity(n);

        let mut stage_x = x.to_vec();
        let mut dz_dx = eye.clone();
        let mut dz_du = vec![0.0; n * m];
        let weights = [1.0, 2.0, 2.0, 1.0];
        let offsets = [0.5 * dt, 0.5 * dt, dt];

        let mut acc = vec![0.0; n];
        let mut acc_dx = vec![0.0; n * n];
        let mut acc_du = vec![0.0; n * m];
        for s in 0..4 {
            let k = self.field.eval(&stage_x, u);
            let (jx, ju) = self.field.jacobians(&stage_x, u);
            let dk_dx = matmul(&jx, &dz_dx, n, n, n);
            let mut dk_du = matmul(&jx, &dz_du, n, n, m);
            dk_du.iter_mut().zip(&ju).for_each(|(a, b)| *a += b);

            let w = weights[s];
            acc.iter_mut().zip(&k).for_each(|(a, b)| *a += w * b);
            acc_dx.iter_mut().zip(&dk_dx).for_each(|(a, b)| *a += w * b);
            acc_du.iter_mut().zip(&dk_du).for_each(|(a, b)| *a += w * b);

            if s < 3 {
                let c = offsets[s];
                stage_x = axpy(x, c, &k);
                dz_dx = eye.iter().zip(&dk_dx).map(|(e, d)| e + c * d).collect();
                dz_du = dk_du.iter().map(|d| c * d).collect();
            }
        }
        let xp = (0..n).map(|i| x[i] + dt / 6.0 * acc[i]).collect();
        let jx = eye.iter().zip(&acc_dx).map(|(e, a)| e + dt / 6.0 * a).collect();
        let ju = acc_du.iter().map(|a| dt / 6.0 * a).collect();
        (xp, jx, ju)
    }

    fn input_jacobian(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let n = self.state_dim();
        let m = self.input_dim();
        let dt = self.dt;
        let mut stage_x = x.to_vec();
        let mut dz_du = vec![0.0; n * m];
        let mut acc_du = vec![0.0; n * m];
        let weights = [1.0, 2.0, 2.0, 1.0];
        let offsets = [0.5 * dt, 0.5 * dt, dt];
        for s in 0..4 {
            let (jx, ju) = self.field.jacobians(&stage_x, u);
            let mut dk_du = matmul(&jx, &dz_du, n, n, m);
            dk_du.iter_mut().zip(&ju).for_each(|(a, b)| *a += b);
            acc_du.iter_mut().zip(&dk_du).for_each(|(a, b)| *a += weights[s] * b);
            if s < 3 {
                let k = self.field.eval(&stage_x, u);
                stage_x = axpy(x, offsets[s], &k);
                dz_du = dk_du.iter().map(|d| offsets[s] * d).collect();
            }
        }
        acc_du.iter().map(|a| dt / 6.0 * a).collect()
    }
}

/// Linear discrete map `x+ = A x + B u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    pub n_x: usize,
    pub n_u: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl LinearMap {
    pub fn new(n_x: usize, n_u: usize, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != n_x * n_x {
            return Err(Error::Dimension { expected: n_x * n_x, got: a.len() });
        }
        if b.len() != n_x * n_u {
            return Err(Error::Dimension { expected: n_x * n_u, got: b.len() });
        }
        Ok(LinearMap { n_x, n_u, a, b })
    }

    /// `x+ = s·x`, no input.
    pub fn scaled_identity(n_x: usize, s: f64) -> Self {
        LinearMap {
            n_x,
            n_u: 0,
            a: identity(n_x).into_iter().map(|v| v * s).collect(),
            b: Vec::new(),
        }
    }
}

impl Dynamics for LinearMap {
    fn state_dim(&self) -> usize {
        self.n_x
    }

    fn input_dim(&self) -> usize {
        self.n_u
    }

    fn step(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = matmul(&self.a, x, self.n_x, self.n_x, 1);
        if self.n_u > 0 {
            let bu = matmul(&self.b, u, self.n_x, self.n_u, 1);
            out.iter_mut().zip(bu).for_each(|(o, v)| *o += v);
        }
        out
    }

    fn step_with_jacobians(&self, x: &[f64], u: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        (Dynamics::step(self, x, u), self.a.clone(), self.b.clone())
    }
}

impl ClosedLoopMap for LinearMap {
    fn dim(&self) -> usize {
        self.n_x
    }

    fn step(&self, x: &[f64]) -> Vec<f64> {
        Dynamics::step(self, x, &vec![0.0; self.n_u])
    }

    fn jacobian(&self, _x: &[f64]) -> Vec<f64> {
        self.a.clone()
    }
}

/// Autonomous closed-loop map `x+ = f(x)`.
pub trait ClosedLoopMap: Sync {
    fn dim(&self) -> usize;
    fn step(&self, x: &[f64]) -> Vec<f64>;
    /// Row-major `∂f/∂x`.
    fn jacobian(&self, x: &[f64]) -> Vec<f64>;

    /// Upper bound on the Lipschitz constant over the convex hull of
    /// `region`; by default the inflated maximum sampled Jacobian norm.
    fn lipschitz_upper(&self, region: &SampleRegion<'_>, n_pairs: usize, inflation: f64, rng: &mut Rng) -> Result<f64> {
        crate::lipschitz::map_lip_upper(self, region, n_pairs, inflation, rng)
    }
}

/// Open-loop dynamics composed with the clamped control law.
#[derive(Clone, Copy)]
pub struct ClosedLoop<'a> {
    pub dynamics: &'a dyn Dynamics,
    pub controller: &'a Controller,
}

impl<'a> ClosedLoop<'a> {
    pub fn new(dynamics: &'a dyn Dynamics, controller: &'a Controller) -> Result<Self> {
        if controller.state_dim() != dynamics.state_dim() {
            return Err(Error::Dimension {
                expected: dynamics.state_dim(),
                got: controller.state_dim(),
            });
        }
        if controller.input_dim() != dynamics.input_dim() {
            return Err(Error::Dimension {
                expected: dynamics.input_dim(),
                got: controller.input_dim(),
            });
        }
        Ok(ClosedLoop { dynamics, controller })
    }

    /// `(x+, u)` with `u = control_law(x)`.
    pub fn step_with_input(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        closed_loop_step(self.dynamics, self.controller, x)
    }
}

/// `x+ = f(x, u(x))`, returning the applied input alongside.
pub fn closed_loop_step(dynamics: &dyn Dynamics, controller: &Controller, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let u = controller.control_law(x);
    (dynamics.step(x, &u), u)
}

impl ClosedLoopMap for ClosedLoop<'_> {
    fn dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    fn step(&self, x: &[f64]) -> Vec<f64> {
        self.step_with_input(x).0
    }

    fn jacobian(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let m = self.dynamics.input_dim();
        let u = self.controller.control_law(x);
        let (_, jx, ju) = self.dynamics.step_with_jacobians(x, &u);
        let du_dx = self.controller.input_jacobian(x);
        let mut out = matmul(&ju, &du_dx, n, m, n);
        out.iter_mut().zip(&jx).for_each(|(o, a)| *o += a);
        out
    }

    /// `L_x + L_u_gain · L_u`, composing the open-loop sensitivities with
    /// the controller bound.
    fn lipschitz_upper(&self, region: &SampleRegion<'_>, n_pairs: usize, inflation: f64, rng: &mut Rng) -> Result<f64> {
        let (l_x, l_ug) = crate::lipschitz::open_loop_gains(self.dynamics, self.controller, region, n_pairs, inflation, rng)?;
        Ok(l_x + l_ug * self.controller.lipschitz())
    }
}

/// Any `Fn(&[f64]) -> Vec<f64>` with a user-supplied Jacobian.
pub struct FnMap<F, J> {
    pub dim: usize,
    pub map: F,
    pub jac: J,
}

impl<F, J> ClosedLoopMap for FnMap<F, J>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
    J: Fn(&[f64]) -> Vec<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn step(&self, x: &[f64]) -> Vec<f64> {
        (self.map)(x)
    }

    fn jacobian(&self, x: &[f64]) -> Vec<f64> {
        (self.jac)(x)
    }
}

/// States `x_0, …, x_T` of the closed loop from `x0`.
pub fn simulate(map: &dyn ClosedLoopMap, x0: &[f64], steps: usize) -> Vec<Vec<f64>> {
    let mut traj = Vec::with_capacity(steps + 1);
    traj.push(x0.to_vec());
    for t in 0..steps {
        let next = map.step(&traj[t]);
        traj.push(next);
    }
    traj
}

/// The two-state benchmark: RK4 at `dt` of [`BenchmarkField`], `U = [-2, 2]`,
/// unsafe set `0.4B ∪ {xᵀx ≥ 2.8²}`, safe set `2B \ 1.2B`, decay region
/// `2.5B` (B the Euclidean unit ball).
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSystem {
    pub dynamics: Rk4<BenchmarkField>,
    pub u_lo: f64,
    pub u_hi: f64,
    pub unsafe_inner_radius: f64,
    pub unsafe_outer_radius: f64,
    pub safe_inner_radius: f64,
    pub safe_outer_radius: f64,
    pub decay_radius: f64,
}

impl Default for BenchmarkSystem {
    fn default() -> Self {
        BenchmarkSystem {
            dynamics: Rk4 { field: BenchmarkField, dt: 0.1 },
            u_lo: -2.0,
            u_hi: 2.0,
            unsafe_inner_radius: 0.4,
            unsafe_outer_radius: 2.8,
            safe_inner_radius: 1.2,
            safe_outer_radius: 2.0,
            decay_radius: 2.5,
        }
    }
}

fn sq_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

impl BenchmarkSystem {
    pub fn with_dt(dt: f64) -> Result<Self> {
        Ok(BenchmarkSystem {
            dynamics: Rk4::new(BenchmarkField, dt)?,
            ..Default::default()
        })
    }

    pub fn dt(&self) -> f64 {
        self.dynamics.dt
    }

    pub fn is_unsafe(&self, x: &[f64]) -> bool {
        let r2 = sq_norm(x);
        r2 <= self.unsafe_inner_radius.powi(2) || r2 >= self.unsafe_outer_radius.powi(2)
    }

    pub fn is_safe(&self, x: &[f64]) -> bool {
        let r2 = sq_norm(x);
        r2 > self.safe_inner_radius.powi(2) && r2 <= self.safe_outer_radius.powi(2)
    }

    pub fn in_decay_region(&self, x: &[f64]) -> bool {
        sq_norm(x) <= self.decay_radius.powi(2)
    }

    /// `3B∞²`, where training samples are drawn.
    pub fn sampling_box(&self) -> AxisBox {
        AxisBox::cube(2, 3.0)
    }

    /// `2.5B∞²`, enclosing the decay region.
    pub fn verification_box(&self) -> AxisBox {
        AxisBox::cube(2, self.decay_radius)
    }
}
