//! Structured covariance computations for two-level functional additive models.
//!
//! A two-level model `g_i(x) = f(x) + d_i(x)` with independent Gaussian-process
//! priors on the shared mean `f` and the deviations `d_i`, sampled on a common
//! grid of `n` points for `m` functions, has a joint covariance of the
//! *restricted quasi-Kronecker* (rQK) form
//!
//! ```text
//! Σ = I_m ⊗ A + e e' ⊗ K
//! ```
//!
//! where `A` and `K` are the `n × n` kernel matrices of the deviations and the
//! mean. Conjugating by the block rotation `B ⊗ I_n` (with `B` a particular
//! symmetric orthogonal matrix) reduces `Σ` to the block-diagonal matrix
//! `bdiag(A + mK, A, …, A)`, so factorisations, determinants, whitening and
//! densities cost `O(n³ + m n²)` instead of the naive `O(m³ n³)`.
//!
//! On top of that algebra the crate provides:
//!
//! * [`gaussian`] — exact marginal likelihoods, gradients, conditional
//!   regressions, MAP/ML fitting and Metropolis–Hastings sampling for
//!   Gaussian observations;
//! * [`poisson`] — Laplace-approximated inference for Poisson latent Gaussian
//!   models (spike-count smoothing), exploiting the quasi-Kronecker structure
//!   of the posterior Hessian;
//! * [`optim`] — the shared limited-memory BFGS machinery;
//! * [`bench`] — the structured-vs-dense scaling harness;
//! * [`sim`] — seeded synthetic data generators used by tests and the CLI.

pub mod bench;
pub mod error;
pub mod gaussian;
pub mod kernels;
pub mod optim;
pub mod poisson;
pub mod qk;
pub mod rotation;
pub mod rqk;
pub mod sim;

pub use error::{Result, RqkError};
pub use kernels::{Grid, Hyperparams, KernelFamily, KernelSpec, DEFAULT_JITTER};
pub use qk::{QkMatrix, QkSolver};
pub use rotation::BlockRotation;
pub use rqk::{EigenRqk, FactorMethod, RqkFactor, RqkMatrix, DENSE_CAP};
