//! Dense feedforward networks with tanh hidden layers.
//!
//! Parameters flatten to a single vector holding every layer's weights
//! (row-major, layer order) followed by every layer's biases (layer order).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm2, spectral_norm};

/// `tanh` through `exp`/`exp_m1`: about twice as fast as the libm routine,
/// within 2.3e-16 of it, odd and monotone.
#[inline]
pub fn tanh(x: f64) -> f64 {
    let a = x.abs();
    let t = if a < 0.5 {
        let e = (2.0 * a).exp_m1();
        e / (e + 2.0)
    } else if a < 20.0 {
        1.0 - 2.0 / ((2.0 * a).exp() + 1.0)
    } else if a.is_nan() {
        return x;
    } else {
        1.0
    };
    t.copysign(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => tanh(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `a`.
    #[inline]
    fn slope_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows × cols`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    fn validate(&self) -> Result<()> {
        if self.weights.len() != self.rows * self.cols {
            return Err(Error::Dimension {
                expected: self.rows * self.cols,
                got: self.weights.len(),
            });
        }
        if self.bias.len() != self.rows {
            return Err(Error::Dimension {
                expected: self.rows,
                got: self.bias.len(),
            });
        }
        Ok(())
    }

    fn apply_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for i in 0..self.rows {
            let row = &self.weights[i * self.cols..(i + 1) * self.cols];
            let z: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias[i];
            out.push(self.activation.apply(z));
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlpRepr {
    input_dim: usize,
    output_dim: usize,
    layers: Vec<Layer>,
}

/// Feedforward network `y = W_L σ(… σ(W_1 x + b_1) …) + b_L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRepr")]
pub struct Mlp {
    input_dim: usize,
    output_dim: usize,
    layers: Vec<Layer>,
}

impl TryFrom<MlpRepr> for Mlp {
    type Error = Error;

    fn try_from(r: MlpRepr) -> Result<Self> {
        let net = Mlp::new(r.layers)?;
        if net.input_dim != r.input_dim || net.output_dim != r.output_dim {
            return Err(Error::config(format!(
                "declared dims {}→{} disagree with layers {}→{}",
                r.input_dim, r.output_dim, net.input_dim, net.output_dim
            )));
        }
        Ok(net)
    }
}

/// Activations recorded by a forward pass: `values[0]` is the input,
/// `values[l + 1]` the output of layer `l`.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub values: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.values.last().expect("trace holds the input at least")
    }
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("network needs at least one layer"));
        }
        for l in &layers {
            l.validate()?;
        }
        for pair in layers.windows(2) {
            if pair[1].cols != pair[0].rows {
                return Err(Error::Dimension {
                    expected: pair[0].rows,
                    got: pair[1].cols,
                });
            }
        }
        Ok(Mlp {
            input_dim: layers[0].cols,
            output_dim: layers[layers.len() - 1].rows,
            layers,
        })
    }

    /// Tanh hidden layers of the given widths and an identity output layer;
    /// weights uniform in `±1/√fan_in`, biases zero.
    pub fn random<R: rand::Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        Self::build(widths, |fan_in| {
            let s = 1.0 / (fan_in as f64).sqrt();
            rng.gen_range(-s..=s)
        })
    }

    /// All weights and biases zero.
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        Self::build(widths, |_| 0.0)
    }

    fn build(widths: &[usize], mut weight: impl FnMut(usize) -> f64) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::config(format!("invalid layer widths {widths:?}")));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (cols, rows) = (widths[l], widths[l + 1]);
                Layer {
                    rows,
                    cols,
                    weights: (0..rows * cols).map(|_| weight(cols)).collect(),
                    bias: vec![0.0; rows],
                    activation: if l + 1 == n { Activation::Identity } else { Activation::Tanh },
                }
            })
            .collect();
        Mlp::new(layers)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            v.extend_from_slice(&l.weights);
        }
        for l in &self.layers {
            v.extend_from_slice(&l.bias);
        }
        v
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Dimension {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weights.len();
            l.weights.copy_from_slice(&params[off..off + n]);
            off += n;
        }
        for l in &mut self.layers {
            let n = l.bias.len();
            l.bias.copy_from_slice(&params[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        let mut net = self.clone();
        net.set_params(params)?;
        Ok(net)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn try_forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.forward(x))
    }

    /// Forward pass. Panics on an input of the wrong dimension; use
    /// [`Mlp::try_forward`] for a checked call.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_dim, "input dimension mismatch");
        let mut a = x.to_vec();
        let mut b = Vec::new();
        for l in &self.layers {
            l.apply_into(&a, &mut b);
            std::mem::swap(&mut a, &mut b);
        }
        a
    }

    pub fn forward_trace(&self, x: &[f64]) -> Trace {
        let mut tr = Trace { values: Vec::new() };
        self.forward_trace_into(x, &mut tr);
        tr
    }

    /// [`Mlp::forward_trace`] reusing the buffers of `tr`.
    pub fn forward_trace_into(&self, x: &[f64], tr: &mut Trace) {
        assert_eq!(x.len(), self.input_dim, "input dimension mismatch");
        tr.values.resize_with(self.layers.len() + 1, Vec::new);
        tr.values[0].clear();
        tr.values[0].extend_from_slice(x);
        for (li, l) in self.layers.iter().enumerate() {
            let (done, rest) = tr.values.split_at_mut(li + 1);
            l.apply_into(&done[li], &mut rest[0]);
        }
    }

    /// Reverse pass for the scalar `⟨upstream, y⟩`. Adds `scale` times the
    /// parameter gradient into `grad` when given and returns the input
    /// cotangent.
    pub fn backprop(&self, trace: &Trace, upstream: &[f64], mut grad: Option<&mut [f64]>, scale: f64) -> Vec<f64> {
        assert_eq!(upstream.len(), self.output_dim, "cotangent dimension mismatch");
        if let Some(g) = grad.as_deref() {
            assert_eq!(g.len(), self.param_count());
        }
        let (mut wo, mut bo) = (self.weight_count(), self.param_count());
        let mut cot = upstream.to_vec();
        let mut next = Vec::new();
        for (li, l) in self.layers.iter().enumerate().rev() {
            wo -= l.weights.len();
            bo -= l.bias.len();
            let out = &trace.values[li + 1];
            let inp = &trace.values[li];
            // Through the activation, in place.
            for (c, a) in cot.iter_mut().zip(out) {
                *c *= l.activation.slope_from_output(*a);
            }
            let dz = &cot;
            if let Some(g) = grad.as_deref_mut() {
                for i in 0..l.rows {
                    let s = scale * dz[i];
                    if s == 0.0 {
                        continue;
                    }
                    let row = &mut g[wo + i * l.cols..wo + (i + 1) * l.cols];
                    for (gw, x) in row.iter_mut().zip(inp) {
                        *gw += s * x;
                    }
                    g[bo + i] += s;
                }
            }
            next.clear();
            next.resize(l.cols, 0.0);
            for i in 0..l.rows {
                if dz[i] == 0.0 {
                    continue;
                }
                let row = &l.weights[i * l.cols..(i + 1) * l.cols];
                for (n, w) in next.iter_mut().zip(row) {
                    *n += dz[i] * w;
                }
            }
            std::mem::swap(&mut cot, &mut next);
        }
        cot
    }

    /// Gradient of `⟨upstream, net(x)⟩` with respect to the flat parameters.
    pub fn grad_params(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if upstream.len() != self.output_dim {
            return Err(Error::Dimension {
                expected: self.output_dim,
                got: upstream.len(),
            });
        }
        let trace = self.forward_trace(x);
        let mut g = vec![0.0; self.param_count()];
        self.backprop(&trace, upstream, Some(&mut g), 1.0);
        Ok(g)
    }

    /// Input Jacobian, row-major `output_dim × input_dim`.
    pub fn grad_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let trace = self.forward_trace(x);
        let mut jac = Vec::with_capacity(self.output_dim * self.input_dim);
        for o in 0..self.output_dim {
            let mut e = vec![0.0; self.output_dim];
            e[o] = 1.0;
            jac.extend(self.backprop(&trace, &e, None, 1.0));
        }
        Ok(jac)
    }

    /// Interval bounds on every output over the box `[lower, upper]`,
    /// propagated layer by layer in centre–radius form.
    pub fn interval_bounds(&self, lower: &[f64], upper: &[f64]) -> (Vec<f64>, Vec<f64>) {
        assert_eq!(lower.len(), self.input_dim, "input dimension mismatch");
        assert_eq!(upper.len(), self.input_dim, "input dimension mismatch");
        let mut lo = lower.to_vec();
        let mut hi = upper.to_vec();
        let (mut nlo, mut nhi) = (Vec::new(), Vec::new());
        for l in &self.layers {
            nlo.clear();
            nhi.clear();
            for i in 0..l.rows {
                let row = &l.weights[i * l.cols..(i + 1) * l.cols];
                let (mut c, mut r) = (l.bias[i], 0.0);
                for ((w, a), b) in row.iter().zip(&lo).zip(&hi) {
                    c += w * 0.5 * (a + b);
                    r += w.abs() * 0.5 * (b - a);
                }
                nlo.push(l.activation.apply(c - r));
                nhi.push(l.activation.apply(c + r));
            }
            std::mem::swap(&mut lo, &mut nlo);
            std::mem::swap(&mut hi, &mut nhi);
        }
        (lo, hi)
    }

    /// Scalar outputs at `n` points stored row by row in `xs`.
    fn forward_batch(&self, xs: &[f64], out: &mut Vec<f64>) {
        let n = xs.len() / self.input_dim;
        let mut a = xs.to_vec();
        let mut b = Vec::new();
        let mut width = self.input_dim;
        for l in &self.layers {
            b.clear();
            b.reserve(n * l.rows);
            for p in 0..n {
                let x = &a[p * width..(p + 1) * width];
                for i in 0..l.rows {
                    let row = &l.weights[i * l.cols..(i + 1) * l.cols];
                    let z: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + l.bias[i];
                    b.push(l.activation.apply(z));
                }
            }
            std::mem::swap(&mut a, &mut b);
            width = l.rows;
        }
        out.clear();
        out.extend_from_slice(&a);
    }

    /// `∏ ‖W_ℓ‖₂`, a global Lipschitz bound since tanh is 1-Lipschitz.
    pub fn lipschitz_upper(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| spectral_norm(&l.weights, l.rows, l.cols))
            .product()
    }
}

/// A scalar candidate barrier `h`.
pub trait Barrier: Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
    /// A guaranteed global Lipschitz bound, when one is cheaply available.
    fn lipschitz_bound(&self) -> Option<f64> {
        None
    }
    /// Bounds on `h` over the box `[lower, upper]`, when available.
    fn value_bounds(&self, _lower: &[f64], _upper: &[f64]) -> Option<(f64, f64)> {
        None
    }
    /// Values at points stored row by row in `xs`, written to `out`.
    fn values(&self, xs: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(xs.chunks(self.dim()).map(|x| self.value(x)));
    }
}

impl Barrier for Mlp {
    fn dim(&self) -> usize {
        self.input_dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(self.output_dim, 1);
        self.forward(x)[0]
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let trace = self.forward_trace(x);
        self.backprop(&trace, &[1.0], None, 1.0)
    }

    fn lipschitz_bound(&self) -> Option<f64> {
        Some(self.lipschitz_upper())
    }

    fn value_bounds(&self, lower: &[f64], upper: &[f64]) -> Option<(f64, f64)> {
        let (lo, hi) = self.interval_bounds(lower, upper);
        Some((lo[0], hi[0]))
    }

    fn values(&self, xs: &[f64], out: &mut Vec<f64>) {
        self.forward_batch(xs, out);
    }
}

/// Barrier given by closures, with an optional Lipschitz bound valid on the
/// domain it will be evaluated over.
pub struct FnBarrier<F, G> {
    pub dim: usize,
    pub value: F,
    pub gradient: G,
    pub lipschitz: Option<f64>,
}

impl<F, G> Barrier for FnBarrier<F, G>
where
    F: Fn(&[f64]) -> f64 + Sync,
    G: Fn(&[f64]) -> Vec<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (self.gradient)(x)
    }

    fn lipschitz_bound(&self) -> Option<f64> {
        self.lipschitz
    }
}

/// `‖∇h(x)‖₂`.
pub fn gradient_norm<B: Barrier + ?Sized>(h: &B, x: &[f64]) -> f64 {
    norm2(&h.gradient(x))
}
