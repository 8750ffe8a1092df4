//! Seeded synthetic data generators used by tests, benchmarks and the CLI.

use nalgebra::{DMatrix, DVector, Dyn, U1};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::error::Result;
use crate::kernels::{Grid, Hyperparams, KernelSpec, DEFAULT_JITTER};
use crate::rqk::{FactorMethod, RqkMatrix};

/// An `n × m` matrix of latent values on a shared grid, with a `vec` view.
#[derive(Debug, Clone)]
pub struct LatentField {
    pub grid: Grid,
    pub values: DMatrix<f64>,
}

impl LatentField {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn m(&self) -> usize {
        self.values.ncols()
    }

    /// Column-stacked view `vec(G)`.
    pub fn vec(&self) -> DVector<f64> {
        let len = self.n() * self.m();
        self.values.clone().reshape_generic(Dyn(len), U1)
    }
}

/// Joint-smoothing dataset: smooth perturbations around a fixed mean curve.
#[derive(Debug, Clone)]
pub struct GaussianSim {
    pub grid: Grid,
    pub f_truth: DVector<f64>,
    pub latent: LatentField,
    pub data: DMatrix<f64>,
    pub sigma: f64,
}

/// `f(x) = sin(12x) + sin(24x)` on a regular grid in (0,1);
/// `g_i = f + w_i1 cos(6x) + w_i2 cos(3x)` with `w_ik ~ N(0, 4)`;
/// `y_ij = g_i(x_j) + ε`, `ε ~ N(0, σ²)`. Deterministic given the seed.
pub fn simulate_gaussian(n: usize, m: usize, sigma: f64, seed: u64) -> Result<GaussianSim> {
    let grid = Grid::uniform(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f_truth = DVector::from_fn(n, |i, _| {
        let x = grid.get(i);
        (12.0 * x).sin() + (24.0 * x).sin()
    });
    let mut g = DMatrix::zeros(n, m);
    for col in 0..m {
        let w1 = 2.0 * rng.sample::<f64, _>(StandardNormal);
        let w2 = 2.0 * rng.sample::<f64, _>(StandardNormal);
        for i in 0..n {
            let x = grid.get(i);
            g[(i, col)] = f_truth[i] + w1 * (6.0 * x).cos() + w2 * (3.0 * x).cos();
        }
    }
    let mut data = g.clone();
    for col in 0..m {
        for i in 0..n {
            data[(i, col)] += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(GaussianSim {
        latent: LatentField {
            grid: grid.clone(),
            values: g,
        },
        grid,
        f_truth,
        data,
        sigma,
    })
}

/// Spike-count dataset drawn from the hierarchical Poisson model.
#[derive(Debug, Clone)]
pub struct PoissonSim {
    pub grid: Grid,
    pub f_truth: DVector<f64>,
    pub latent: LatentField,
    pub counts: DMatrix<f64>,
    pub delta: f64,
}

/// Default prior hyperparameters for the Poisson simulator, in the layout
/// `(θ1_K, θ2_K, θ1_A, θ2_A)`.
pub fn default_poisson_theta() -> Hyperparams {
    Hyperparams::new(
        DVector::from_column_slice(&[0.2f64.ln(), 0.0, 0.2f64.ln(), 0.25f64.ln()]),
        vec![
            "log_lengthscale_f".into(),
            "log_variance_f".into(),
            "log_lengthscale_d".into(),
            "log_variance_d".into(),
        ],
    )
    .expect("constant defaults are finite")
}

/// Samples `f ~ N(0, K)` and deviations `d_i ~ N(0, A)` through the
/// correlating transform, then counts `y_ij ~ Poi(δ exp(g_ij))` with
/// `g = f + d`. Deterministic given the seed.
pub fn simulate_poisson(
    n: usize,
    m: usize,
    delta: f64,
    theta: &Hyperparams,
    seed: u64,
) -> Result<PoissonSim> {
    let grid = Grid::uniform(n)?;
    let kernel_f = KernelSpec::matern52(0, 1);
    let kernel_d = KernelSpec::matern52(2, 3);
    let k = crate::kernels::build_kernel_matrix(&kernel_f, theta, &grid, DEFAULT_JITTER)?;
    let a = crate::kernels::build_kernel_matrix(&kernel_d, theta, &grid, DEFAULT_JITTER)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f_factor = RqkMatrix::new(k, DMatrix::zeros(n, n), 1)?.factor(FactorMethod::Cholesky)?;
    let zf = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let f_truth = f_factor.correlate(&zf)?;

    let d_factor = RqkMatrix::new(a, DMatrix::zeros(n, n), m)?.factor(FactorMethod::Cholesky)?;
    let zd = DVector::from_fn(n * m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let d = d_factor.correlate(&zd)?.reshape_generic(Dyn(n), Dyn(m));

    let mut g = d;
    for col in 0..m {
        let mut c = g.column_mut(col);
        c += &f_truth;
    }
    let mut counts = DMatrix::zeros(n, m);
    for col in 0..m {
        for i in 0..n {
            let lam = (delta * g[(i, col)].exp()).max(1e-12);
            let draw: f64 = Poisson::new(lam).expect("positive rate").sample(&mut rng);
            counts[(i, col)] = draw;
        }
    }
    Ok(PoissonSim {
        latent: LatentField {
            grid: grid.clone(),
            values: g,
        },
        grid,
        f_truth,
        counts,
        delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_sim_is_deterministic() {
        let a = simulate_gaussian(20, 3, 1.0, 42).unwrap();
        let b = simulate_gaussian(20, 3, 1.0, 42).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.latent.values, b.latent.values);
        let c = simulate_gaussian(20, 3, 1.0, 43).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn noiseless_gaussian_sim_reproduces_latents() {
        let s = simulate_gaussian(15, 4, 0.0, 7).unwrap();
        assert_eq!(s.data, s.latent.values);
    }

    #[test]
    fn perturbation_weights_have_variance_four() {
        // recover w_i1 by least squares on g_i - f over the two cosine carriers
        let mut acc = 0.0;
        let reps = 10_000usize / 50;
        let n = 16;
        for seed in 0..reps {
            let s = simulate_gaussian(n, 50, 0.0, seed as u64).unwrap();
            let c6 = DVector::from_fn(n, |i, _| (6.0 * s.grid.get(i)).cos());
            let c3 = DVector::from_fn(n, |i, _| (3.0 * s.grid.get(i)).cos());
            let g11 = c6.dot(&c6);
            let g12 = c6.dot(&c3);
            let g22 = c3.dot(&c3);
            let det = g11 * g22 - g12 * g12;
            for col in 0..50 {
                let resid = s.latent.values.column(col) - &s.f_truth;
                let b1 = c6.dot(&resid);
                let b2 = c3.dot(&resid);
                let w1 = (g22 * b1 - g12 * b2) / det;
                acc += w1 * w1;
            }
        }
        let var = acc / (reps * 50) as f64;
        assert!((var - 4.0).abs() < 0.2, "estimated Var(w) = {var}");
    }

    #[test]
    fn poisson_sim_is_deterministic_and_integer() {
        let theta = default_poisson_theta();
        let a = simulate_poisson(12, 4, 0.5, &theta, 9).unwrap();
        let b = simulate_poisson(12, 4, 0.5, &theta, 9).unwrap();
        assert_eq!(a.counts, b.counts);
        assert_eq!(a.f_truth, b.f_truth);
        assert!(a.counts.iter().all(|c| c.fract() == 0.0 && *c >= 0.0));
    }

    #[test]
    fn latent_field_vec_is_column_major() {
        let lf = LatentField {
            grid: Grid::uniform(2).unwrap(),
            values: DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 2.0, 4.0]),
        };
        assert_eq!(lf.vec(), DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
    }
}
