//! Scaling benchmarks: specialised rQK density evaluation against a naive
//! dense Cholesky, and end-to-end MAP fitting across replication counts.
//!
//! Before any timing, the arms are evaluated once and must agree to 1e-6;
//! disagreement aborts with a diagnostic. Timings use the monotonic clock,
//! discard one warm-up run, and report the median over at least five
//! replicates. The naive arm is skipped (not an error) when `mn` exceeds the
//! dense materialisation cap.

use std::time::Instant;

use nalgebra::linalg::Cholesky;
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Result, RqkError};
use crate::gaussian::GaussianModel;
use crate::kernels::{build_kernel_matrix, Grid, Hyperparams, KernelSpec, DEFAULT_JITTER};
use crate::optim::LbfgsOptions;
use crate::rqk::{FactorMethod, RqkMatrix, DENSE_CAP};
use crate::sim::simulate_gaussian;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMethod {
    NaiveCholesky,
    RqkCholesky,
    RqkEigen,
}

impl std::fmt::Display for BenchMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            BenchMethod::NaiveCholesky => "naive_cholesky",
            BenchMethod::RqkCholesky => "rqk_cholesky",
            BenchMethod::RqkEigen => "rqk_eigen",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub m: usize,
    pub method: BenchMethod,
    pub median_seconds: f64,
    pub replicates: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SlopeFit {
    pub method: String,
    pub n: usize,
    pub slope_m: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    /// Arms were timed on separate threads; numbers are not comparable to
    /// single-threaded runs.
    pub parallel: bool,
    /// Fit replicates that diverged and were excluded from medians.
    pub failures: usize,
}

#[derive(Serialize)]
struct Summary<'a> {
    format_version: u32,
    parallel: bool,
    failures: usize,
    slopes: &'a [SlopeFit],
}

impl BenchResult {
    /// CSV with header `n,m,method,median_seconds,replicates`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,m,method,median_seconds,replicates\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.n, row.m, row.method, row.median_seconds, row.replicates
            ));
        }
        out
    }

    /// Log-log slope of median runtime in `m`, per (method, n), over the
    /// cells present (at least two).
    pub fn slopes(&self) -> Vec<SlopeFit> {
        let mut keys: Vec<(BenchMethod, usize)> = Vec::new();
        for row in &self.rows {
            if !keys.contains(&(row.method, row.n)) {
                keys.push((row.method, row.n));
            }
        }
        let mut out = Vec::new();
        for (method, n) in keys {
            let pts: Vec<(f64, f64)> = self
                .rows
                .iter()
                .filter(|r| r.method == method && r.n == n && r.median_seconds > 0.0)
                .map(|r| ((r.m as f64).ln(), r.median_seconds.ln()))
                .collect();
            if pts.len() < 2 {
                continue;
            }
            let k = pts.len() as f64;
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
            let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
            out.push(SlopeFit {
                method: method.to_string(),
                n,
                slope_m: sxy / sxx,
            });
        }
        out
    }

    /// JSON summary with the fitted slopes.
    pub fn summary_json(&self) -> String {
        let slopes = self.slopes();
        let summary = Summary {
            format_version: 1,
            parallel: self.parallel,
            failures: self.failures,
            slopes: &slopes,
        };
        serde_json::to_string_pretty(&summary).expect("serialisable summary")
    }
}

/// Median wall time of `f` over `replicates` measurements, one warm-up run
/// discarded. Short operations are batched so each measurement spans at
/// least a few milliseconds.
fn time_median<F: FnMut()>(mut f: F, replicates: usize) -> f64 {
    f(); // warm-up, discarded
    let probe = Instant::now();
    f();
    let once = probe.elapsed().as_secs_f64();
    let inner = ((5e-3 / once.max(1e-9)).ceil() as usize).clamp(1, 1000);
    let mut samples = Vec::with_capacity(replicates);
    for _ in 0..replicates {
        let start = Instant::now();
        for _ in 0..inner {
            f();
        }
        samples.push(start.elapsed().as_secs_f64() / inner as f64);
    }
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    samples[samples.len() / 2]
}

fn dense_logdensity(sigma: DMatrix<f64>, x: &DVector<f64>) -> Result<f64> {
    let dim = sigma.nrows() as f64;
    let chol = Cholesky::new(sigma).ok_or(RqkError::NotPositiveDefinite("dense covariance"))?;
    let l = chol.l();
    let z = l
        .solve_lower_triangular(x)
        .ok_or(RqkError::SingularFactor)?;
    let logdet = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(-0.5 * dim * (2.0 * std::f64::consts::PI).ln() - 0.5 * logdet - 0.5 * z.norm_squared())
}

fn bench_covariance(n: usize, m: usize) -> Result<RqkMatrix> {
    let grid = Grid::uniform(n)?;
    let theta = Hyperparams::from_values(&[0.1f64.ln(), 0.0])?;
    let spec = KernelSpec::matern52(0, 1);
    let a = build_kernel_matrix(&spec, &theta, &grid, DEFAULT_JITTER)?;
    let k = a.clone();
    RqkMatrix::new(a, k, m)
}

fn density_cell(
    s: &RqkMatrix,
    x: &DVector<f64>,
    replicates: usize,
    parallel: bool,
) -> Result<Vec<(BenchMethod, f64)>> {
    let naive_available = s.dim() <= DENSE_CAP;

    // correctness gate before any clock starts
    let v_chol = s.factor(FactorMethod::Cholesky)?.logdensity(x)?;
    let v_eig = s.factor(FactorMethod::Eigen)?.logdensity(x)?;
    let mut max_dev = (v_chol - v_eig).abs();
    if naive_available {
        let v_naive = dense_logdensity(s.to_dense()?, x)?;
        max_dev = max_dev.max((v_chol - v_naive).abs());
    }
    if max_dev > 1e-6 {
        return Err(RqkError::BenchGateFailed {
            n: s.n(),
            m: s.m(),
            detail: format!("density arms disagree by {max_dev:.3e}"),
        });
    }

    let run_chol = || {
        let f = s.factor(FactorMethod::Cholesky).expect("gate-checked");
        std::hint::black_box(f.logdensity(x).expect("gate-checked"));
    };
    let run_eig = || {
        let f = s.factor(FactorMethod::Eigen).expect("gate-checked");
        std::hint::black_box(f.logdensity(x).expect("gate-checked"));
    };
    let run_naive = || {
        let dense = s.to_dense().expect("cap-checked");
        std::hint::black_box(dense_logdensity(dense, x).expect("gate-checked"));
    };

    let mut out = Vec::new();
    if parallel {
        std::thread::scope(|scope| {
            let h_chol = scope.spawn(|| time_median(run_chol, replicates));
            let h_eig = scope.spawn(|| time_median(run_eig, replicates));
            let h_naive =
                naive_available.then(|| scope.spawn(|| time_median(run_naive, replicates)));
            out.push((BenchMethod::RqkCholesky, h_chol.join().expect("arm thread")));
            out.push((BenchMethod::RqkEigen, h_eig.join().expect("arm thread")));
            if let Some(h) = h_naive {
                out.push((BenchMethod::NaiveCholesky, h.join().expect("arm thread")));
            }
        });
    } else {
        if naive_available {
            out.push((BenchMethod::NaiveCholesky, time_median(run_naive, replicates)));
        }
        out.push((BenchMethod::RqkCholesky, time_median(run_chol, replicates)));
        out.push((BenchMethod::RqkEigen, time_median(run_eig, replicates)));
    }
    Ok(out)
}

/// Times Gaussian-density evaluation: naive dense Cholesky (materialise Σ,
/// factor, evaluate) against the two specialised variants.
pub fn bench_density(
    ns: &[usize],
    ms: &[usize],
    replicates: usize,
    seed: u64,
    parallel: bool,
) -> Result<BenchResult> {
    if replicates < 5 {
        return Err(RqkError::InvalidArgument(
            "benchmarks need at least 5 replicates".into(),
        ));
    }
    let mut rows = Vec::new();
    for (ci, &n) in ns.iter().enumerate() {
        for (cj, &m) in ms.iter().enumerate() {
            let s = bench_covariance(n, m)?;
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ ((ci as u64) << 32) ^ (cj as u64).wrapping_mul(0x9e3779b9),
            );
            // evaluation point drawn from Σ itself, so the log-density is
            // O(mn) and the absolute agreement gate is meaningful
            let z = DVector::from_fn(n * m, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = s.factor(FactorMethod::Cholesky)?.correlate(&z)?;
            for (method, median) in density_cell(&s, &x, replicates, parallel)? {
                rows.push(BenchRow {
                    n,
                    m,
                    method,
                    median_seconds: median,
                    replicates,
                });
            }
        }
    }
    Ok(BenchResult {
        rows,
        parallel,
        failures: 0,
    })
}

/// Times `fit_map` end-to-end on freshly simulated joint-smoothing datasets.
/// Diverged replicates are counted and excluded from medians.
pub fn bench_map(ns: &[usize], ms: &[usize], replicates: usize, seed: u64) -> Result<BenchResult> {
    if replicates < 5 {
        return Err(RqkError::InvalidArgument(
            "benchmarks need at least 5 replicates".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut failures = 0usize;
    for (ci, &n) in ns.iter().enumerate() {
        for (cj, &m) in ms.iter().enumerate() {
            let cell_seed = seed ^ ((ci as u64) << 40) ^ ((cj as u64) << 20);
            let mut times = Vec::with_capacity(replicates);
            // one extra replicate; the first is the discarded warm-up
            for rep in 0..=replicates {
                let sim = simulate_gaussian(n, m, 1.0, cell_seed.wrapping_add(rep as u64))?;
                let model = GaussianModel::new(
                    KernelSpec::matern52(0, 1),
                    KernelSpec::matern52(2, 3),
                    sim.grid.clone(),
                    sim.data.clone(),
                    4,
                )?;
                let init = model.heuristic_init();
                let opts = LbfgsOptions {
                    tol: 1e-4,
                    max_iter: 200,
                    ..Default::default()
                };
                let start = Instant::now();
                match model.fit_map(&init, None, &opts) {
                    Ok(_) => {
                        if rep > 0 {
                            times.push(start.elapsed().as_secs_f64());
                        }
                    }
                    Err(_) => {
                        if rep > 0 {
                            failures += 1;
                        }
                    }
                }
            }
            if times.is_empty() {
                continue;
            }
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            rows.push(BenchRow {
                n,
                m,
                method: BenchMethod::RqkCholesky,
                median_seconds: times[times.len() / 2],
                replicates: times.len(),
            });
        }
    }
    Ok(BenchResult {
        rows,
        parallel: false,
        failures,
    })
}
