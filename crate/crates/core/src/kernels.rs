//! Covariance functions and kernel-matrix assembly.
//!
//! Two stationary families are provided, parameterised on the log scale:
//!
//! * squared exponential: `κ(d) = exp(-e^{-θ1} d²/2 + θ2)`
//! * Matern 5/2: `κ(u) = (1 + u + u²/3) exp(-u + θ2)` with `u = √5 d e^{-θ1}`
//!
//! `θ1` is a log length-scale and `θ2` a log marginal variance. A masked sum
//! `κ_a(x, x') + m(x) m(x') κ_b(x, x')` with the Gaussian bump
//! `m(t) = exp(-(t - t0)²/s_t²)` allows nonstationary variance around a fixed
//! location, used for spike trains where extra variability is expected near
//! stimulus onset.
//!
//! All matrix builders add `jitter · exp(θ2)` to the diagonal so that both
//! families stay usable at long length-scales.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, RqkError};

/// Default diagonal jitter, scaled by the marginal variance `exp(θ2)`.
pub const DEFAULT_JITTER: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    SquaredExponential,
    Matern52,
}

/// One stationary kernel bound to a `(θ1, θ2)` pair of hyperparameter indices.
#[derive(Debug, Clone, Copy)]
pub struct StationaryKernel {
    pub family: KernelFamily,
    pub theta1: usize,
    pub theta2: usize,
}

impl StationaryKernel {
    fn value(&self, theta: &Hyperparams, d: f64) -> f64 {
        let t1 = theta.get(self.theta1);
        let t2 = theta.get(self.theta2);
        match self.family {
            KernelFamily::SquaredExponential => (-(-t1).exp() * d * d / 2.0 + t2).exp(),
            KernelFamily::Matern52 => {
                let u = 5f64.sqrt() * d * (-t1).exp();
                (1.0 + u + u * u / 3.0) * (-u + t2).exp()
            }
        }
    }

    /// Analytic derivative of `value` with respect to hyperparameter `j`.
    fn grad(&self, theta: &Hyperparams, d: f64, j: usize) -> f64 {
        let t1 = theta.get(self.theta1);
        let t2 = theta.get(self.theta2);
        if j == self.theta2 {
            return self.value(theta, d);
        }
        if j != self.theta1 {
            return 0.0;
        }
        match self.family {
            // ∂/∂θ1 exp(-e^{-θ1} d²/2 + θ2) = κ · e^{-θ1} d²/2
            KernelFamily::SquaredExponential => {
                self.value(theta, d) * (-t1).exp() * d * d / 2.0
            }
            // ∂u/∂θ1 = -u, so ∂κ/∂θ1 = u²(1+u)/3 · exp(-u + θ2)
            KernelFamily::Matern52 => {
                let u = 5f64.sqrt() * d * (-t1).exp();
                u * u * (1.0 + u) / 3.0 * (-u + t2).exp()
            }
        }
    }
}

/// A covariance function bound to entries of a [`Hyperparams`] vector.
#[derive(Debug, Clone)]
pub enum KernelSpec {
    Stationary(StationaryKernel),
    /// `κ_a(x, x') + m(x) m(x') κ_b(x, x')` with fixed mask constants.
    MaskedSum {
        a: StationaryKernel,
        b: StationaryKernel,
        t0: f64,
        s_t: f64,
    },
}

impl KernelSpec {
    pub fn matern52(theta1: usize, theta2: usize) -> Self {
        KernelSpec::Stationary(StationaryKernel {
            family: KernelFamily::Matern52,
            theta1,
            theta2,
        })
    }

    pub fn squared_exponential(theta1: usize, theta2: usize) -> Self {
        KernelSpec::Stationary(StationaryKernel {
            family: KernelFamily::SquaredExponential,
            theta1,
            theta2,
        })
    }

    pub fn masked_sum(a: StationaryKernel, b: StationaryKernel, t0: f64, s_t: f64) -> Self {
        KernelSpec::MaskedSum { a, b, t0, s_t }
    }

    /// Hyperparameter indices this kernel reads, in declaration order.
    pub fn theta_indices(&self) -> Vec<usize> {
        match self {
            KernelSpec::Stationary(s) => vec![s.theta1, s.theta2],
            KernelSpec::MaskedSum { a, b, .. } => vec![a.theta1, a.theta2, b.theta1, b.theta2],
        }
    }

    /// Index of the marginal-variance entry that scales the diagonal jitter.
    pub fn variance_index(&self) -> usize {
        match self {
            KernelSpec::Stationary(s) => s.theta2,
            KernelSpec::MaskedSum { a, .. } => a.theta2,
        }
    }

    pub fn depends_on(&self, j: usize) -> bool {
        self.theta_indices().contains(&j)
    }

    /// Checks that the bound indices are distinct and in range for `theta`.
    pub fn validate(&self, theta: &Hyperparams) -> Result<()> {
        let idx = self.theta_indices();
        for (pos, &i) in idx.iter().enumerate() {
            if i >= theta.len() {
                return Err(RqkError::InvalidHyperparams(format!(
                    "kernel index {i} out of range for {} hyperparameters",
                    theta.len()
                )));
            }
            if idx[..pos].contains(&i) {
                return Err(RqkError::InvalidHyperparams(format!(
                    "kernel index {i} bound twice"
                )));
            }
        }
        if let KernelSpec::MaskedSum { s_t, .. } = self {
            if *s_t <= 0.0 {
                return Err(RqkError::InvalidArgument("mask width s_t must be > 0".into()));
            }
        }
        Ok(())
    }
}

fn mask(t: f64, t0: f64, s_t: f64) -> f64 {
    (-((t - t0) * (t - t0)) / (s_t * s_t)).exp()
}

/// Evaluates `κ_θ(x, x')`. Total on finite inputs.
pub fn kernel_value(spec: &KernelSpec, theta: &Hyperparams, x: f64, xp: f64) -> f64 {
    let d = (x - xp).abs();
    match spec {
        KernelSpec::Stationary(s) => s.value(theta, d),
        KernelSpec::MaskedSum { a, b, t0, s_t } => {
            a.value(theta, d) + mask(x, *t0, *s_t) * mask(xp, *t0, *s_t) * b.value(theta, d)
        }
    }
}

fn kernel_grad_value(spec: &KernelSpec, theta: &Hyperparams, x: f64, xp: f64, j: usize) -> f64 {
    let d = (x - xp).abs();
    match spec {
        KernelSpec::Stationary(s) => s.grad(theta, d, j),
        KernelSpec::MaskedSum { a, b, t0, s_t } => {
            a.grad(theta, d, j) + mask(x, *t0, *s_t) * mask(xp, *t0, *s_t) * b.grad(theta, d, j)
        }
    }
}

/// `K_ij = κ(x_i, x_j) + jitter · exp(θ2) · [i = j]`, symmetric by construction.
pub fn build_kernel_matrix(
    spec: &KernelSpec,
    theta: &Hyperparams,
    grid: &Grid,
    jitter: f64,
) -> Result<DMatrix<f64>> {
    spec.validate(theta)?;
    if jitter < 0.0 {
        return Err(RqkError::InvalidArgument("jitter must be >= 0".into()));
    }
    let n = grid.len();
    let pts = grid.points();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = kernel_value(spec, theta, pts[i], pts[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    let scale = jitter * theta.get(spec.variance_index()).exp();
    for i in 0..n {
        k[(i, i)] += scale;
    }
    Ok(k)
}

/// Entrywise analytic derivative of [`build_kernel_matrix`] with respect to
/// hyperparameter `j`; zero when the kernel does not depend on `j`. The jitter
/// term contributes `jitter · exp(θ2)` on the diagonal when `j` is the
/// variance index.
pub fn kernel_matrix_grad(
    spec: &KernelSpec,
    theta: &Hyperparams,
    grid: &Grid,
    j: usize,
    jitter: f64,
) -> Result<DMatrix<f64>> {
    spec.validate(theta)?;
    let n = grid.len();
    if !spec.depends_on(j) {
        return Ok(DMatrix::zeros(n, n));
    }
    let pts = grid.points();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for l in i..n {
            let v = kernel_grad_value(spec, theta, pts[i], pts[l], j);
            g[(i, l)] = v;
            g[(l, i)] = v;
        }
    }
    if j == spec.variance_index() {
        let scale = jitter * theta.get(spec.variance_index()).exp();
        for i in 0..n {
            g[(i, i)] += scale;
        }
    }
    Ok(g)
}

/// Named log-scale hyperparameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    values: DVector<f64>,
    names: Vec<String>,
}

impl Hyperparams {
    pub fn new(values: DVector<f64>, names: Vec<String>) -> Result<Self> {
        if values.len() != names.len() {
            return Err(RqkError::InvalidHyperparams(format!(
                "{} values but {} names",
                values.len(),
                names.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RqkError::InvalidHyperparams("non-finite entry".into()));
        }
        Ok(Hyperparams { values, names })
    }

    /// Builds from raw values with generated names `theta0, theta1, …`.
    pub fn from_values(values: &[f64]) -> Result<Self> {
        let names = (0..values.len()).map(|i| format!("theta{i}")).collect();
        Self::new(DVector::from_column_slice(values), names)
    }

    /// Same names, new values.
    pub fn with_values(&self, values: DVector<f64>) -> Result<Self> {
        Self::new(values, self.names.clone())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.len() == 0
    }

    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Strictly increasing 1-D sampling grid, shared by all `m` functions.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    points: DVector<f64>,
}

impl Grid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(RqkError::InvalidGrid("empty grid".into()));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(RqkError::InvalidGrid("non-finite grid point".into()));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(RqkError::InvalidGrid("points must be strictly increasing".into()));
        }
        Ok(Grid {
            points: DVector::from_vec(points),
        })
    }

    /// Regular grid of `n` midpoints `(i + 1/2)/n` inside `(0, 1)`.
    pub fn uniform(n: usize) -> Result<Self> {
        Self::new((0..n).map(|i| (i as f64 + 0.5) / n as f64).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.len() == 0
    }

    pub fn points(&self) -> &DVector<f64> {
        &self.points
    }

    pub fn get(&self, i: usize) -> f64 {
        self.points[i]
    }
}
