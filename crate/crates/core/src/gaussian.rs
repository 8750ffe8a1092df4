//! Exact inference for the Gaussian-observation two-level model.
//!
//! Observations `y_ij ~ N(g_ij, σ²)` with the rQK prior on `g` give a
//! marginal `y ~ N(0, Σ')` where `Σ' = rQK(A + σ²I, K)` keeps the rQK form,
//! so the marginal likelihood is one factorisation away. The gradient with
//! respect to a hyperparameter `θ_j` is
//!
//! ```text
//! ½ (y' Σ'⁻¹ (∂Σ'/∂θ_j) Σ'⁻¹ y − tr(Σ'⁻¹ ∂Σ'/∂θ_j))
//! ```
//!
//! with the trace split over the rotated blocks:
//! `tr((A'+mK)⁻¹ ∂(A'+mK)/∂θ_j) + (m−1) tr(A'⁻¹ ∂A'/∂θ_j)`.
//!
//! Conditional regressions use the precision forms
//! `Q_f = K⁻¹ + m (A+σ²I)⁻¹` (dense `n × n`) and `Q_g = Σ⁻¹ + σ⁻²I` (again
//! rQK). Hyperparameters are fitted by L-BFGS on the analytic gradient, the
//! posterior over hyperparameters is sampled with random-walk
//! Metropolis–Hastings, and simultaneous bands come from inverting the
//! Gaussian-mixture CDF of the Rao-Blackwellised posterior.

use nalgebra::linalg::{Cholesky, SymmetricEigen};
use nalgebra::{DMatrix, DVector, Dyn, U1};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, RqkError};
use crate::kernels::{build_kernel_matrix, kernel_matrix_grad, Grid, Hyperparams, KernelSpec};
use crate::optim::{lbfgs, LbfgsOptions, Objective, OptimResult};
use crate::rqk::{FactorMethod, RqkFactor, RqkMatrix};

/// `tr(A B)` for symmetric `B`, as an elementwise dot product.
pub(crate) fn tr_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.zip_fold(b, 0.0, |acc, x, y| acc + x * y)
}

/// One term of the rQK Gaussian log-density gradient:
/// `½ (α' ∂Σ α − tr(Σ⁻¹ ∂Σ))` given `α = Σ⁻¹v` and the block inverses.
pub(crate) fn density_grad_term(
    alpha: &DVector<f64>,
    d_sigma: &RqkMatrix,
    head_inv: &DMatrix<f64>,
    tail_inv: &DMatrix<f64>,
) -> Result<f64> {
    let m = d_sigma.m() as f64;
    let quad = alpha.dot(&d_sigma.matvec(alpha)?);
    let d_head = d_sigma.a() + d_sigma.k() * m;
    let trace = tr_dot(head_inv, &d_head) + (m - 1.0) * tr_dot(tail_inv, d_sigma.a());
    Ok(0.5 * (quad - trace))
}

/// Two-level Gaussian model: kernels for the mean (`kernel_f` builds `K`) and
/// the deviations (`kernel_d` builds `A`), an `n × m` observation matrix, and
/// the position of `log σ²` in the hyperparameter vector.
#[derive(Debug, Clone)]
pub struct GaussianModel {
    kernel_f: KernelSpec,
    kernel_d: KernelSpec,
    grid: Grid,
    data: DMatrix<f64>,
    noise_index: usize,
    jitter: f64,
}

impl GaussianModel {
    pub fn new(
        kernel_f: KernelSpec,
        kernel_d: KernelSpec,
        grid: Grid,
        data: DMatrix<f64>,
        noise_index: usize,
    ) -> Result<Self> {
        if data.nrows() != grid.len() {
            return Err(RqkError::DimensionMismatch(format!(
                "data has {} rows but grid has {} points",
                data.nrows(),
                grid.len()
            )));
        }
        if data.ncols() == 0 {
            return Err(RqkError::DimensionMismatch("no observed functions".into()));
        }
        Ok(GaussianModel {
            kernel_f,
            kernel_d,
            grid,
            data,
            noise_index,
            jitter: crate::kernels::DEFAULT_JITTER,
        })
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn m(&self) -> usize {
        self.data.ncols()
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn noise_index(&self) -> usize {
        self.noise_index
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    fn y_vec(&self) -> DVector<f64> {
        let nm = self.n() * self.m();
        self.data.clone().reshape_generic(Dyn(nm), U1)
    }

    fn check_theta(&self, theta: &Hyperparams) -> Result<()> {
        self.kernel_f.validate(theta)?;
        self.kernel_d.validate(theta)?;
        if self.noise_index >= theta.len() {
            return Err(RqkError::InvalidHyperparams(format!(
                "noise index {} out of range",
                self.noise_index
            )));
        }
        if self.kernel_f.depends_on(self.noise_index) || self.kernel_d.depends_on(self.noise_index)
        {
            return Err(RqkError::InvalidHyperparams(
                "noise index collides with a kernel binding".into(),
            ));
        }
        Ok(())
    }

    /// `Σ' = rQK(A + σ²I, K)` and σ².
    fn marginal_cov(&self, theta: &Hyperparams) -> Result<(RqkMatrix, f64)> {
        self.check_theta(theta)?;
        let k = build_kernel_matrix(&self.kernel_f, theta, &self.grid, self.jitter)?;
        let a = build_kernel_matrix(&self.kernel_d, theta, &self.grid, self.jitter)?;
        let sigma2 = theta.get(self.noise_index).exp();
        let sigma = RqkMatrix::new(a, k, self.m())?;
        Ok((sigma.shift_a(sigma2), sigma2))
    }

    fn factor_marginal(&self, theta: &Hyperparams) -> Result<(RqkFactor, f64)> {
        let (sp, sigma2) = self.marginal_cov(theta)?;
        let factor = sp.factor(FactorMethod::Cholesky).map_err(|e| match e {
            RqkError::NotPositiveDefinite(which) => RqkError::PositiveDefiniteViolation(format!(
                "{which} failed to factor; pathological hyperparameters"
            )),
            other => other,
        })?;
        Ok((factor, sigma2))
    }

    /// `log p(y | θ)`, one `O(n³)` factorisation plus `O(mn²)` whitening.
    pub fn marginal_loglik(&self, theta: &Hyperparams) -> Result<f64> {
        let (factor, _) = self.factor_marginal(theta)?;
        factor.logdensity(&self.y_vec())
    }

    /// Derivative matrix `∂Σ'/∂θ_j = rQK(∂A'/∂θ_j, ∂K/∂θ_j)`, or `None` when
    /// nothing depends on `θ_j`.
    fn marginal_cov_grad(
        &self,
        theta: &Hyperparams,
        sigma2: f64,
        j: usize,
    ) -> Result<Option<RqkMatrix>> {
        let depends =
            self.kernel_d.depends_on(j) || self.kernel_f.depends_on(j) || j == self.noise_index;
        if !depends {
            return Ok(None);
        }
        let mut d_a = kernel_matrix_grad(&self.kernel_d, theta, &self.grid, j, self.jitter)?;
        if j == self.noise_index {
            for i in 0..d_a.nrows() {
                d_a[(i, i)] += sigma2;
            }
        }
        let d_k = kernel_matrix_grad(&self.kernel_f, theta, &self.grid, j, self.jitter)?;
        Ok(Some(RqkMatrix::new(d_a, d_k, self.m())?))
    }

    /// Marginal log-likelihood and its full gradient from one factorisation.
    pub fn loglik_and_grad(&self, theta: &Hyperparams) -> Result<(f64, DVector<f64>)> {
        let (factor, sigma2) = self.factor_marginal(theta)?;
        let y = self.y_vec();
        let value = factor.logdensity(&y)?;
        let alpha = factor.sigma_solve(&y)?;
        let head_inv = factor.head_gram_inverse()?;
        let tail_inv = factor.tail_gram_inverse()?;
        let mut grad = DVector::zeros(theta.len());
        for j in 0..theta.len() {
            if let Some(d_sigma) = self.marginal_cov_grad(theta, sigma2, j)? {
                grad[j] = density_grad_term(&alpha, &d_sigma, &head_inv, &tail_inv)?;
            }
        }
        Ok((value, grad))
    }

    /// Gradient of the marginal log-likelihood over all hyperparameters.
    pub fn marginal_loglik_grad(&self, theta: &Hyperparams) -> Result<DVector<f64>> {
        Ok(self.loglik_and_grad(theta)?.1)
    }

    /// `p(f | y, θ)`: precision `Q_f = K⁻¹ + m (A+σ²I)⁻¹`,
    /// mean `Q_f⁻¹ (A+σ²I)⁻¹ Σ_i y_i`.
    pub fn posterior_f(&self, theta: &Hyperparams) -> Result<ConditionalPosterior> {
        self.check_theta(theta)?;
        let k = build_kernel_matrix(&self.kernel_f, theta, &self.grid, self.jitter)?;
        let mut a = build_kernel_matrix(&self.kernel_d, theta, &self.grid, self.jitter)?;
        let sigma2 = theta.get(self.noise_index).exp();
        for i in 0..a.nrows() {
            a[(i, i)] += sigma2;
        }
        let k_inv = Cholesky::new(k)
            .ok_or(RqkError::SingularMatrix("K"))?
            .inverse();
        let a_inv = Cholesky::new(a)
            .ok_or(RqkError::SingularMatrix("A+sigma^2 I"))?
            .inverse();
        let q_f = k_inv + &a_inv * self.m() as f64;
        let rhs = &a_inv * self.data.column_sum();
        let mean = Cholesky::new(q_f.clone())
            .ok_or(RqkError::SingularMatrix("Q_f"))?
            .solve(&rhs);
        Ok(ConditionalPosterior {
            mean,
            precision: Precision::DenseN(q_f),
        })
    }

    /// `p(g | y, θ)`: precision `Q_g = Σ⁻¹ + σ⁻²I` (rQK), mean `σ⁻² Q_g⁻¹ y`.
    pub fn posterior_g(&self, theta: &Hyperparams) -> Result<ConditionalPosterior> {
        self.check_theta(theta)?;
        let k = build_kernel_matrix(&self.kernel_f, theta, &self.grid, self.jitter)?;
        let a = build_kernel_matrix(&self.kernel_d, theta, &self.grid, self.jitter)?;
        let sigma2 = theta.get(self.noise_index).exp();
        let sigma = RqkMatrix::new(a, k, self.m())?;
        let q_g = sigma.inverse()?.shift_a(1.0 / sigma2);
        let factor = q_g.factor(FactorMethod::Cholesky)?;
        let mean = factor.sigma_solve(&self.y_vec())? / sigma2;
        Ok(ConditionalPosterior {
            mean,
            precision: Precision::Rqk(q_g),
        })
    }

    /// Data-driven starting point for the standard five-parameter layout
    /// `(θ1_K, θ2_K, θ1_A, θ2_A, log σ²)`: length-scales at a fifth of the
    /// grid range, variances split from the overall data variance.
    pub fn heuristic_init(&self) -> Hyperparams {
        let span = self.grid.get(self.grid.len() - 1) - self.grid.get(0);
        let mean = self.data.mean();
        let var = (self
            .data
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / (self.n() * self.m()) as f64)
            .max(1e-3);
        let log_ls = (0.2 * span.max(1e-6)).ln();
        Hyperparams::new(
            DVector::from_column_slice(&[
                log_ls,
                (var / 2.0).ln(),
                log_ls,
                (var / 2.0).ln(),
                (var / 4.0).ln(),
            ]),
            vec![
                "log_lengthscale_f".into(),
                "log_variance_f".into(),
                "log_lengthscale_d".into(),
                "log_variance_d".into(),
                "log_noise_variance".into(),
            ],
        )
        .expect("finite heuristics")
    }

    /// Maximises `log p(y|θ)` (plus an optional log-prior) with L-BFGS on the
    /// analytic gradient. Also returns the covariance of the Gaussian
    /// approximation at the mode, from central finite differences of the
    /// analytic gradient.
    pub fn fit_map(
        &self,
        init: &Hyperparams,
        prior: Option<PriorFn<'_>>,
        opts: &LbfgsOptions,
    ) -> Result<MapFit> {
        let objective_eval = |v: &DVector<f64>| -> (f64, DVector<f64>) {
            let theta = match init.with_values(v.clone()) {
                Ok(t) => t,
                Err(_) => return (f64::INFINITY, DVector::zeros(v.len())),
            };
            match self.loglik_and_grad(&theta) {
                Ok((mut value, mut grad)) => {
                    if let Some(p) = prior {
                        let (pv, pg) = p(v);
                        value += pv;
                        grad += pg;
                    }
                    (-value, -grad)
                }
                Err(_) => (f64::INFINITY, DVector::zeros(v.len())),
            }
        };
        let obj = Objective::new(init.len(), objective_eval);
        let optim = lbfgs(&obj, init.values(), opts)
            .map_err(|e| RqkError::OptimizerDiverged(e.to_string()))?;
        let theta_star = init.with_values(optim.x_opt.clone())?;

        let grad_at = |v: &DVector<f64>| -> Result<DVector<f64>> {
            let theta = init.with_values(v.clone())?;
            let mut g = self.marginal_loglik_grad(&theta)?;
            if let Some(p) = prior {
                g += p(v).1;
            }
            Ok(g)
        };
        let covariance = gaussian_approx_covariance(&optim.x_opt, grad_at)?;
        Ok(MapFit {
            theta_star,
            covariance,
            optim,
        })
    }
}

/// Optional log-prior callback: value and gradient at a hyperparameter vector.
pub type PriorFn<'a> = &'a dyn Fn(&DVector<f64>) -> (f64, DVector<f64>);

/// Independent Gaussian priors on log-scale hyperparameters; a convenience
/// for building [`PriorFn`] closures.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    pub mean: DVector<f64>,
    pub sd: DVector<f64>,
}

impl GaussianPrior {
    pub fn logpdf_and_grad(&self, theta: &DVector<f64>) -> (f64, DVector<f64>) {
        let mut value = 0.0;
        let mut grad = DVector::zeros(theta.len());
        for i in 0..theta.len() {
            let z = (theta[i] - self.mean[i]) / self.sd[i];
            value += -0.5 * z * z - self.sd[i].ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
            grad[i] = -z / self.sd[i];
        }
        (value, grad)
    }
}

/// Result of MAP/ML fitting.
#[derive(Debug, Clone)]
pub struct MapFit {
    pub theta_star: Hyperparams,
    /// Covariance of the Gaussian approximation of `p(θ|y)` at the mode.
    pub covariance: DMatrix<f64>,
    pub optim: OptimResult,
}

/// Covariance of the Gaussian approximation at a mode: invert the negated,
/// symmetrised finite-difference Jacobian of the analytic gradient, flooring
/// eigenvalues to keep the result usable as an MH proposal.
fn gaussian_approx_covariance<G>(theta: &DVector<f64>, grad_at: G) -> Result<DMatrix<f64>>
where
    G: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let dim = theta.len();
    let mut hess = DMatrix::zeros(dim, dim);
    for j in 0..dim {
        let h = 1e-4 * theta[j].abs().max(1.0);
        let mut up = theta.clone();
        up[j] += h;
        let mut dn = theta.clone();
        dn[j] -= h;
        let col = (grad_at(&up)? - grad_at(&dn)?) / (2.0 * h);
        hess.set_column(j, &col);
    }
    let neg_hess = -(&hess + hess.transpose()) / 2.0;
    let se = SymmetricEigen::new(neg_hess);
    let max_abs = se.eigenvalues.amax().max(1e-12);
    let floored = se.eigenvalues.map(|v| v.max(1e-10 * max_abs));
    let mut cov = se.eigenvectors.clone();
    for (j, lam) in floored.iter().enumerate() {
        cov.column_mut(j).scale_mut(1.0 / lam);
    }
    Ok(cov * se.eigenvectors.transpose())
}

/// Hyperparameter draws from a Metropolis–Hastings chain.
#[derive(Debug, Clone)]
pub struct PosteriorSamples {
    pub names: Vec<String>,
    pub draws: Vec<DVector<f64>>,
    pub log_posts: Vec<f64>,
    /// accepted / total proposals (burn-in included), exactly.
    pub acceptance_rate: f64,
}

/// Random-walk Metropolis–Hastings with a Gaussian proposal scaled by
/// `2.38²/dim`; deterministic given the seed. Non-finite target values are
/// auto-rejected.
pub fn mh_sample_target<F>(
    target: F,
    names: Vec<String>,
    theta0: &DVector<f64>,
    proposal_cov: &DMatrix<f64>,
    n_samples: usize,
    n_burn: usize,
    seed: u64,
) -> Result<PosteriorSamples>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let dim = theta0.len();
    if proposal_cov.nrows() != dim || proposal_cov.ncols() != dim {
        return Err(RqkError::DimensionMismatch(
            "proposal covariance does not match parameter dimension".into(),
        ));
    }
    let scale = 2.38 * 2.38 / dim as f64;
    let chol = Cholesky::new(proposal_cov * scale)
        .ok_or(RqkError::NotPositiveDefinite("proposal covariance"))?;
    let l = chol.l();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = theta0.clone();
    let mut lp = target(&x);
    if !lp.is_finite() {
        return Err(RqkError::NonFiniteObjective);
    }
    let total = n_samples + n_burn;
    let mut accepted = 0usize;
    let mut draws = Vec::with_capacity(n_samples);
    let mut log_posts = Vec::with_capacity(n_samples);
    for step in 0..total {
        let eps = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let prop = &x + &l * eps;
        let lp_prop = target(&prop);
        let u: f64 = rng.random();
        if lp_prop.is_finite() && u.ln() < lp_prop - lp {
            x = prop;
            lp = lp_prop;
            accepted += 1;
        }
        if step >= n_burn {
            draws.push(x.clone());
            log_posts.push(lp);
        }
    }
    Ok(PosteriorSamples {
        names,
        draws,
        log_posts,
        acceptance_rate: accepted as f64 / total as f64,
    })
}

/// MH over `log p(y|θ) + log p(θ)`, typically started at the MAP estimate
/// with the Gaussian-approximation covariance as proposal.
pub fn mh_sample(
    model: &GaussianModel,
    prior: Option<PriorFn<'_>>,
    theta_star: &Hyperparams,
    proposal_cov: &DMatrix<f64>,
    n_samples: usize,
    n_burn: usize,
    seed: u64,
) -> Result<PosteriorSamples> {
    let target = |v: &DVector<f64>| -> f64 {
        let theta = match theta_star.with_values(v.clone()) {
            Ok(t) => t,
            Err(_) => return f64::NEG_INFINITY,
        };
        let ll = match model.marginal_loglik(&theta) {
            Ok(v) => v,
            Err(_) => return f64::NEG_INFINITY,
        };
        ll + prior.map(|p| p(v).0).unwrap_or(0.0)
    };
    mh_sample_target(
        target,
        theta_star.names().to_vec(),
        theta_star.values(),
        proposal_cov,
        n_samples,
        n_burn,
        seed,
    )
}

/// Gaussian or rQK-structured precision of a conditional posterior.
#[derive(Debug, Clone)]
pub enum Precision {
    DenseN(DMatrix<f64>),
    Rqk(RqkMatrix),
}

/// A conditional Gaussian posterior: mean plus its precision payload.
#[derive(Debug, Clone)]
pub struct ConditionalPosterior {
    pub mean: DVector<f64>,
    pub precision: Precision,
}

impl ConditionalPosterior {
    /// Pointwise posterior variances, `diag(Q⁻¹)`.
    pub fn variance_diag(&self) -> Result<DVector<f64>> {
        match &self.precision {
            Precision::DenseN(q) => Ok(Cholesky::new(q.clone())
                .ok_or(RqkError::SingularMatrix("Q_f"))?
                .inverse()
                .diagonal()),
            Precision::Rqk(q) => {
                let inv = q.inverse()?;
                let block_diag = (inv.a() + inv.k()).diagonal();
                let n = inv.n();
                let mut out = DVector::zeros(n * inv.m());
                for b in 0..inv.m() {
                    out.rows_mut(b * n, n).copy_from(&block_diag);
                }
                Ok(out)
            }
        }
    }
}

/// Simultaneous band bounds at level `alpha`.
#[derive(Debug, Clone)]
pub struct ConfidenceBand {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub alpha: f64,
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

fn mixture_cdf(x: f64, means: &[f64], sds: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (mu, sd) in means.iter().zip(sds.iter()) {
        acc += normal_cdf((x - mu) / sd);
    }
    acc / means.len() as f64
}

/// Inverts the equal-weight Gaussian-mixture CDF at probability `p` by
/// bisection (tolerance 1e-6 in probability), bracketing at the pooled mean
/// plus/minus ten pooled standard deviations.
fn mixture_quantile(means: &[f64], sds: &[f64], p: f64) -> f64 {
    let k = means.len() as f64;
    let pooled_mean = means.iter().sum::<f64>() / k;
    let second = means
        .iter()
        .zip(sds.iter())
        .map(|(mu, sd)| sd * sd + mu * mu)
        .sum::<f64>()
        / k;
    let pooled_sd = (second - pooled_mean * pooled_mean)
        .max(0.0)
        .sqrt()
        .max(1e-12);
    let mut lo = pooled_mean - 10.0 * pooled_sd;
    let mut hi = pooled_mean + 10.0 * pooled_sd;
    for _ in 0..64 {
        if mixture_cdf(lo, means, sds) <= p {
            break;
        }
        lo -= 10.0 * pooled_sd;
    }
    for _ in 0..64 {
        if mixture_cdf(hi, means, sds) >= p {
            break;
        }
        hi += 10.0 * pooled_sd;
    }
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let fm = mixture_cdf(mid, means, sds);
        if (fm - p).abs() <= 1e-6 {
            break;
        }
        if fm < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    mid
}

/// Pointwise band from an equal-weight mixture of Gaussian conditionals:
/// component `s` contributes `N(conditional_means[s][i], conditional_sds[s][i]²)`
/// at grid point `i`.
pub fn confidence_band(
    conditional_means: &[DVector<f64>],
    conditional_sds: &[DVector<f64>],
    alpha: f64,
) -> Result<ConfidenceBand> {
    if conditional_means.is_empty() || conditional_means.len() != conditional_sds.len() {
        return Err(RqkError::EmptyMixture);
    }
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(RqkError::InvalidArgument("alpha must lie in (0,1)".into()));
    }
    let n = conditional_means[0].len();
    for (mu, sd) in conditional_means.iter().zip(conditional_sds.iter()) {
        if mu.len() != n || sd.len() != n {
            return Err(RqkError::DimensionMismatch(
                "mixture components have inconsistent lengths".into(),
            ));
        }
        if sd.iter().any(|&s| !(s > 0.0)) {
            return Err(RqkError::InvalidArgument(
                "component standard deviations must be positive".into(),
            ));
        }
    }
    let mut lower = DVector::zeros(n);
    let mut upper = DVector::zeros(n);
    let mut means = vec![0.0; conditional_means.len()];
    let mut sds = vec![0.0; conditional_means.len()];
    for i in 0..n {
        for (s, (mu, sd)) in conditional_means
            .iter()
            .zip(conditional_sds.iter())
            .enumerate()
        {
            means[s] = mu[i];
            sds[s] = sd[i];
        }
        lower[i] = mixture_quantile(&means, &sds, alpha / 2.0);
        upper[i] = mixture_quantile(&means, &sds, 1.0 - alpha / 2.0);
    }
    Ok(ConfidenceBand {
        lower,
        upper,
        alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn theta5(vals: [f64; 5]) -> Hyperparams {
        Hyperparams::new(
            DVector::from_column_slice(&vals),
            vec![
                "log_lengthscale_f".into(),
                "log_variance_f".into(),
                "log_lengthscale_d".into(),
                "log_variance_d".into(),
                "log_noise_variance".into(),
            ],
        )
        .unwrap()
    }

    fn small_model(n: usize, m: usize, seed: u64) -> GaussianModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = Grid::uniform(n).unwrap();
        let data = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal) * 1.5);
        GaussianModel::new(
            KernelSpec::matern52(0, 1),
            KernelSpec::matern52(2, 3),
            grid,
            data,
            4,
        )
        .unwrap()
    }

    /// Dense reference for the marginal log-likelihood.
    fn dense_marginal(model: &GaussianModel, theta: &Hyperparams) -> f64 {
        let k = build_kernel_matrix(&model.kernel_f, theta, model.grid(), model.jitter).unwrap();
        let a = build_kernel_matrix(&model.kernel_d, theta, model.grid(), model.jitter).unwrap();
        let sigma2 = theta.get(model.noise_index).exp();
        let dense = RqkMatrix::new(a, k, model.m())
            .unwrap()
            .shift_a(sigma2)
            .to_dense()
            .unwrap();
        let y = model.y_vec();
        let lu = dense.lu();
        let quad = y.dot(&lu.solve(&y).unwrap());
        -0.5 * (model.n() * model.m()) as f64 * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * lu.determinant().ln()
            - 0.5 * quad
    }

    #[test]
    fn scalar_marginal_matches_univariate_normal() {
        let grid = Grid::new(vec![0.5]).unwrap();
        let data = DMatrix::from_element(1, 1, 0.7);
        let model = GaussianModel::new(
            KernelSpec::matern52(0, 1),
            KernelSpec::matern52(2, 3),
            grid,
            data,
            4,
        )
        .unwrap()
        .with_jitter(0.0);
        // at zero distance the kernels contribute exp(θ2) each
        let theta = theta5([0.0, 0.4f64.ln(), 0.0, 1.1f64.ln(), 0.3f64.ln()]);
        let var = 0.4 + 1.1 + 0.3;
        let expected = -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * 0.7 * 0.7 / var;
        assert_relative_eq!(
            model.marginal_loglik(&theta).unwrap(),
            expected,
            epsilon = 1e-12
        );
    }

    #[test]
    fn marginal_matches_dense_oracle() {
        for seed in 0..5 {
            let model = small_model(6, 3, seed);
            let theta = theta5([-0.5, 0.2, -1.0, -0.3, -0.7]);
            let fast = model.marginal_loglik(&theta).unwrap();
            let dense = dense_marginal(&model, &theta);
            assert!((fast - dense).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_data_loglik_is_scale_invariant() {
        let grid = Grid::uniform(5).unwrap();
        let theta = theta5([0.0, 0.0, 0.0, 0.0, 0.0]);
        let base = GaussianModel::new(
            KernelSpec::matern52(0, 1),
            KernelSpec::matern52(2, 3),
            grid.clone(),
            DMatrix::zeros(5, 2),
            4,
        )
        .unwrap();
        let doubled = GaussianModel::new(
            KernelSpec::matern52(0, 1),
            KernelSpec::matern52(2, 3),
            grid,
            DMatrix::zeros(5, 2) * 2.0,
            4,
        )
        .unwrap();
        assert_eq!(
            base.marginal_loglik(&theta).unwrap(),
            doubled.marginal_loglik(&theta).unwrap()
        );
    }

    #[test]
    fn grad_component_is_zero_for_unused_hyperparameter() {
        let model = small_model(4, 2, 9);
        // six entries; index 5 is bound to nothing
        let theta = Hyperparams::from_values(&[0.1, -0.2, 0.3, 0.0, -0.5, 2.2]).unwrap();
        let grad = model.marginal_loglik_grad(&theta).unwrap();
        assert_eq!(grad[5], 0.0);
        assert!(grad.rows(0, 5).amax() > 0.0);
    }

    #[test]
    fn grad_matches_central_differences() {
        for seed in 0..4 {
            let model = small_model(7, 3, seed + 100);
            let theta = theta5([-0.4, 0.3, -0.9, -0.2, -0.6]);
            let grad = model.marginal_loglik_grad(&theta).unwrap();
            let h = 1e-5;
            for j in 0..5 {
                let mut up = theta.values().clone();
                up[j] += h;
                let mut dn = theta.values().clone();
                dn[j] -= h;
                let fu = model
                    .marginal_loglik(&theta.with_values(up).unwrap())
                    .unwrap();
                let fd = model
                    .marginal_loglik(&theta.with_values(dn).unwrap())
                    .unwrap();
                let fd_j = (fu - fd) / (2.0 * h);
                let err = (fd_j - grad[j]).abs() / grad[j].abs().max(1.0);
                assert!(err < 1e-5, "j={j}: analytic {} vs fd {}", grad[j], fd_j);
            }
        }
    }

    #[test]
    fn noise_grad_asymptote_at_large_sigma() {
        let model = small_model(6, 3, 42);
        let theta = theta5([0.0, 0.0, 0.0, 0.0, 1e6f64.ln()]);
        let grad = model.marginal_loglik_grad(&theta).unwrap();
        let y = model.y_vec();
        let expected = 0.5 * (y.dot(&y) / 1e6 - (model.n() * model.m()) as f64);
        assert_relative_eq!(grad[4], expected, max_relative = 1e-2);
    }

    #[test]
    fn posterior_f_scalar_example() {
        // n=1: K=1, A=1, σ²=1, m=2, y=(2,2): Q_f = 2, mean = 1, var = 1/2
        let grid = Grid::new(vec![0.0]).unwrap();
        let data = DMatrix::from_row_slice(1, 2, &[2.0, 2.0]);
        let model = GaussianModel::new(
            KernelSpec::matern52(0, 1),
            KernelSpec::matern52(2, 3),
            grid,
            data,
            4,
        )
        .unwrap()
        .with_jitter(0.0);
        let theta = theta5([0.0, 0.0, 0.0, 0.0, 0.0]);
        let post = model.posterior_f(&theta).unwrap();
        assert_relative_eq!(post.mean[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(post.variance_diag().unwrap()[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn posteriors_vanish_for_zero_data() {
        let grid = Grid::uniform(4).unwrap();
        let model = GaussianModel::new(
            KernelSpec::matern52(0, 1),
            KernelSpec::matern52(2, 3),
            grid,
            DMatrix::zeros(4, 3),
            4,
        )
        .unwrap();
        let theta = theta5([-0.5, 0.0, -0.5, 0.0, 0.0]);
        assert!(model.posterior_f(&theta).unwrap().mean.amax() < 1e-14);
        assert!(model.posterior_g(&theta).unwrap().mean.amax() < 1e-14);
    }

    /// Dense joint-Gaussian oracle: conditional moments of `f | y` and `g | y`
    /// from the stacked covariance, bypassing the precision-form algebra.
    fn dense_joint_oracle(
        model: &GaussianModel,
        theta: &Hyperparams,
    ) -> ((DVector<f64>, DMatrix<f64>), (DVector<f64>, DMatrix<f64>)) {
        let n = model.n();
        let m = model.m();
        let k = build_kernel_matrix(&model.kernel_f, theta, model.grid(), model.jitter).unwrap();
        let a = build_kernel_matrix(&model.kernel_d, theta, model.grid(), model.jitter).unwrap();
        let sigma2 = theta.get(model.noise_index).exp();
        let sigma = RqkMatrix::new(a, k.clone(), m).unwrap();
        let sigma_dense = sigma.to_dense().unwrap();
        let mut marg = sigma_dense.clone();
        for i in 0..n * m {
            marg[(i, i)] += sigma2;
        }
        let marg_inv = marg.try_inverse().unwrap();
        let y = model.y_vec();

        // cov(f, y) = e' ⊗ K
        let mut cf = DMatrix::zeros(n, n * m);
        for b in 0..m {
            cf.view_mut((0, b * n), (n, n)).copy_from(&k);
        }
        let f_mean = &cf * &marg_inv * &y;
        let f_cov = &k - &cf * &marg_inv * cf.transpose();

        // cov(g, y) = Σ
        let g_mean = &sigma_dense * &marg_inv * &y;
        let g_cov = &sigma_dense - &sigma_dense * &marg_inv * &sigma_dense;
        ((f_mean, f_cov), (g_mean, g_cov))
    }

    #[test]
    fn posteriors_match_dense_joint_gaussian_oracle() {
        for seed in [3u64, 11, 27] {
            let model = small_model(5, 3, seed);
            let theta = theta5([-0.6, 0.1, -0.8, -0.4, -0.9]);
            let ((f_mean, f_cov), (g_mean, g_cov)) = dense_joint_oracle(&model, &theta);

            let pf = model.posterior_f(&theta).unwrap();
            let rel = (&pf.mean - &f_mean).amax() / f_mean.amax().max(1.0);
            assert!(rel < 1e-8, "posterior_f mean mismatch: {rel}");
            let vf = pf.variance_diag().unwrap();
            for i in 0..model.n() {
                assert_relative_eq!(vf[i], f_cov[(i, i)], max_relative = 1e-8);
            }

            let pg = model.posterior_g(&theta).unwrap();
            let rel = (&pg.mean - &g_mean).amax() / g_mean.amax().max(1.0);
            assert!(rel < 1e-8, "posterior_g mean mismatch: {rel}");
            let vg = pg.variance_diag().unwrap();
            for i in 0..model.n() * model.m() {
                assert_relative_eq!(vg[i], g_cov[(i, i)], max_relative = 1e-8);
            }

            // tower identity: column-average of posterior_g means equals the
            // oracle conditional mean of the average function
            let gm = pg
                .mean
                .clone()
                .reshape_generic(Dyn(model.n()), Dyn(model.m()));
            let avg = gm.column_mean();
            let oracle_avg = g_mean
                .clone()
                .reshape_generic(Dyn(model.n()), Dyn(model.m()))
                .column_mean();
            assert!((avg - oracle_avg).amax() < 1e-8);

            // the stored precision reproduces the construction: Q_f mean = rhs
            match &pf.precision {
                Precision::DenseN(q) => {
                    let a =
                        build_kernel_matrix(&model.kernel_d, &theta, model.grid(), model.jitter)
                            .unwrap();
                    let sigma2 = theta.get(4).exp();
                    let mut ap = a;
                    for i in 0..model.n() {
                        ap[(i, i)] += sigma2;
                    }
                    let rhs = Cholesky::new(ap).unwrap().solve(&model.data.column_sum());
                    let resid = (q * &pf.mean - &rhs).norm() / rhs.norm().max(1.0);
                    assert!(resid < 1e-8);
                }
                _ => panic!("expected dense precision for f"),
            }
        }
    }

    #[test]
    fn posterior_g_interpolates_at_tiny_noise() {
        let model = small_model(5, 2, 5);
        let theta = theta5([-0.5, 0.0, -0.5, 0.0, 1e-10f64.ln()]);
        let post = model.posterior_g(&theta).unwrap();
        assert!((post.mean - model.y_vec()).amax() < 1e-3);
    }

    #[test]
    fn fit_map_returns_stationary_point_and_stays_there() {
        let model = small_model(10, 3, 77);
        let init = theta5([-1.0, 0.0, -1.0, 0.0, 0.0]);
        let opts = LbfgsOptions {
            tol: 1e-5,
            max_iter: 200,
            ..Default::default()
        };
        let fit = model.fit_map(&init, None, &opts).unwrap();
        let grad = model.marginal_loglik_grad(&fit.theta_star).unwrap();
        assert!(grad.amax() < 1e-4, "gradient at theta*: {}", grad.amax());

        // restarting at the mode returns immediately
        let refit = model.fit_map(&fit.theta_star, None, &opts).unwrap();
        assert_eq!(refit.optim.iterations, 0);
        assert_eq!(refit.theta_star.values(), fit.theta_star.values());

        // the Gaussian-approximation covariance is usable as an MH proposal
        assert!(Cholesky::new(fit.covariance.clone()).is_some());
    }

    #[test]
    fn mh_constant_target_accepts_everything() {
        let samples = mh_sample_target(
            |_| 0.0,
            vec!["a".into()],
            &DVector::zeros(1),
            &DMatrix::identity(1, 1),
            200,
            50,
            3,
        )
        .unwrap();
        assert_eq!(samples.acceptance_rate, 1.0);
        assert_eq!(samples.draws.len(), 200);
    }

    #[test]
    fn mh_standard_normal_moments() {
        let samples = mh_sample_target(
            |x| -0.5 * x[0] * x[0],
            vec!["z".into()],
            &DVector::zeros(1),
            &DMatrix::identity(1, 1),
            100_000,
            1_000,
            7,
        )
        .unwrap();
        let n = samples.draws.len() as f64;
        let mean = samples.draws.iter().map(|d| d[0]).sum::<f64>() / n;
        let var = samples
            .draws
            .iter()
            .map(|d| (d[0] - mean).powi(2))
            .sum::<f64>()
            / n;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn mh_chains_are_deterministic_given_seed() {
        let run = || {
            mh_sample_target(
                |x| -0.5 * x.dot(x),
                vec!["a".into(), "b".into()],
                &DVector::zeros(2),
                &DMatrix::identity(2, 2),
                500,
                100,
                99,
            )
            .unwrap()
        };
        let s1 = run();
        let s2 = run();
        assert_eq!(s1.draws, s2.draws);
        assert_eq!(s1.log_posts, s2.log_posts);
        assert_eq!(s1.acceptance_rate, s2.acceptance_rate);
    }

    #[test]
    fn band_single_standard_normal_component() {
        let band = confidence_band(
            &[DVector::zeros(1)],
            &[DVector::from_element(1, 1.0)],
            0.05,
        )
        .unwrap();
        assert!(
            (band.lower[0] + 1.959964).abs() < 1e-4,
            "lower {}",
            band.lower[0]
        );
        assert!(
            (band.upper[0] - 1.959964).abs() < 1e-4,
            "upper {}",
            band.upper[0]
        );
    }

    #[test]
    fn band_identical_components_equal_single_component() {
        let mu = DVector::from_vec(vec![0.3, -0.2]);
        let sd = DVector::from_vec(vec![0.5, 2.0]);
        let single = confidence_band(&[mu.clone()], &[sd.clone()], 0.1).unwrap();
        let triple = confidence_band(
            &[mu.clone(), mu.clone(), mu],
            &[sd.clone(), sd.clone(), sd],
            0.1,
        )
        .unwrap();
        assert!((single.lower - triple.lower).amax() < 1e-4);
        assert!((single.upper - triple.upper).amax() < 1e-4);
    }

    #[test]
    fn band_symmetric_mixture_is_symmetric_about_zero() {
        let c = 1.7;
        let band = confidence_band(
            &[DVector::from_element(1, -c), DVector::from_element(1, c)],
            &[DVector::from_element(1, 1.0), DVector::from_element(1, 1.0)],
            0.05,
        )
        .unwrap();
        assert!((band.lower[0] + band.upper[0]).abs() < 1e-4);
    }

    #[test]
    fn band_rejects_empty_mixture() {
        assert!(matches!(
            confidence_band(&[], &[], 0.05),
            Err(RqkError::EmptyMixture)
        ));
    }

    #[test]
    fn pathological_theta_reports_pd_violation() {
        let model = small_model(5, 2, 1).with_jitter(0.0);
        // enormous length-scale with zero jitter: K is numerically rank one
        let theta = theta5([12.0, 0.0, 12.0, 0.0, -80.0]);
        match model.marginal_loglik(&theta) {
            Err(RqkError::PositiveDefiniteViolation(_)) => {}
            other => panic!("expected PositiveDefiniteViolation, got {other:?}"),
        }
    }
}
