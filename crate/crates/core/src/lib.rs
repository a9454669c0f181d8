//! Synthesis and certification of discrete-time neural control barrier
//! functions.
//!
//! A barrier `h` and a box-constrained control law are trained jointly on
//! sampled safe, unsafe and decay-region states. The 0-sublevel set of `h` is
//! then certified control invariant for the closed loop `x+ = f(x, u(x))`
//! by checking a strengthened decay condition on level-set segmented
//! samples, either on deterministic grid ε-nets or with empirical-Bernstein
//! sample counts.

pub mod controller;
pub mod dynamics;
pub mod error;
mod linalg;
pub mod lipschitz;
pub mod model;
pub mod neural;
pub mod probabilistic;
pub mod synthesis;
pub mod verifier;

pub use controller::Controller;
pub use dynamics::{AxisBox, BenchmarkSystem, ClosedLoop, ClosedLoopMap, Dynamics, LinearMap};
pub use error::{Error, Result};
pub use linalg::spectral_norm;
pub use neural::{Activation, Barrier, Mlp};

/// Seeded generator used everywhere randomness is needed.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate's deterministic generator from a seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
