//! Restricted quasi-Kronecker matrices `Σ = I_m ⊗ A + e e' ⊗ K`.
//!
//! Conjugating by `R = B ⊗ I_n` (see [`BlockRotation`]) turns Σ into
//! `bdiag(A + mK, A, …, A)`, so every heavy operation reduces to two `n × n`
//! factorisations plus `O(m n²)` column work:
//!
//! * square roots `Σ = G'G` with `G = bdiag(U, V, …, V) R`, where
//!   `U'U = A + mK` and `V'V = A` come from Cholesky or eigendecompositions;
//! * correlating (`G'z`) and whitening (`G^{-T}x`) transforms;
//! * `log det Σ = log det(A + mK) + (m-1) log det A`;
//! * the inverse `rQK(A⁻¹, ((A + mK)⁻¹ - A⁻¹)/m)` and the closed product
//!   `rQK(A₁A₂, A₁K₂ + K₁A₂ + m K₁K₂)`;
//! * the full spectrum as `λ(A + mK)` plus `m-1` copies of `λ(A)`.
//!
//! `to_dense` materialisations are capped ([`DENSE_CAP`]) and exist for test
//! oracles and the naive benchmark arm.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::linalg::{Cholesky, SymmetricEigen};
use nalgebra::{DMatrix, DVector, Dyn, U1};

use crate::error::{Result, RqkError};
use crate::rotation::BlockRotation;

/// Default row cap for dense materialisations.
pub const DENSE_CAP: usize = 4096;

static FACTORIZATION_COUNT: AtomicUsize = AtomicUsize::new(0);

/// Running count of `n × n` factorisations performed by [`RqkMatrix::factor`].
/// Test instrumentation: the factorisation count per call is exactly two,
/// independent of `m`.
pub fn factorization_count() -> usize {
    FACTORIZATION_COUNT.load(Ordering::Relaxed)
}

fn record_factorization() {
    FACTORIZATION_COUNT.fetch_add(1, Ordering::Relaxed);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorMethod {
    Cholesky,
    Eigen,
}

/// The pair `(A, K)` plus replication count `m`, representing
/// `Σ = I_m ⊗ A + e e' ⊗ K` without materialising it.
#[derive(Debug, Clone)]
pub struct RqkMatrix {
    a: DMatrix<f64>,
    k: DMatrix<f64>,
    m: usize,
}

fn as_matrix(x: &DVector<f64>, n: usize, m: usize) -> DMatrix<f64> {
    x.clone().reshape_generic(Dyn(n), Dyn(m))
}

fn as_vector(x: DMatrix<f64>) -> DVector<f64> {
    let len = x.nrows() * x.ncols();
    x.reshape_generic(Dyn(len), U1)
}

impl RqkMatrix {
    pub fn new(a: DMatrix<f64>, k: DMatrix<f64>, m: usize) -> Result<Self> {
        if a.nrows() != a.ncols() || k.nrows() != k.ncols() {
            return Err(RqkError::DimensionMismatch("A and K must be square".into()));
        }
        if a.nrows() != k.nrows() {
            return Err(RqkError::DimensionMismatch(format!(
                "A is {}x{} but K is {}x{}",
                a.nrows(),
                a.ncols(),
                k.nrows(),
                k.ncols()
            )));
        }
        if m == 0 {
            return Err(RqkError::InvalidArgument("m must be >= 1".into()));
        }
        Ok(RqkMatrix { a, k, m })
    }

    pub fn identity(n: usize, m: usize) -> Self {
        RqkMatrix {
            a: DMatrix::identity(n, n),
            k: DMatrix::zeros(n, n),
            m,
        }
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.n() * self.m
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn a_plus_mk(&self) -> DMatrix<f64> {
        &self.a + &self.k * self.m as f64
    }

    /// Returns `rQK(A + cI, K)`, the covariance after adding white noise `c`.
    pub fn shift_a(&self, c: f64) -> RqkMatrix {
        let mut a = self.a.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += c;
        }
        RqkMatrix {
            a,
            k: self.k.clone(),
            m: self.m,
        }
    }

    /// `Σ x` in `O(n² m)`: one product with `A` per column plus a single
    /// broadcast of `K (Σ_i x_i)`.
    pub fn matvec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let (n, m) = (self.n(), self.m);
        if x.len() != n * m {
            return Err(RqkError::DimensionMismatch(format!(
                "expected vector of length {}, got {}",
                n * m,
                x.len()
            )));
        }
        let xm = as_matrix(x, n, m);
        let mut out = &self.a * &xm;
        let broadcast = &self.k * xm.column_sum();
        for c in 0..m {
            let mut col = out.column_mut(c);
            col += &broadcast;
        }
        Ok(as_vector(out))
    }

    /// Closed-form product: `rQK(A₁, K₁) rQK(A₂, K₂)
    /// = rQK(A₁A₂, A₁K₂ + K₁A₂ + m K₁K₂)`.
    pub fn mul(&self, rhs: &RqkMatrix) -> Result<RqkMatrix> {
        if self.n() != rhs.n() || self.m != rhs.m {
            return Err(RqkError::DimensionMismatch(
                "rQK product needs matching n and m".into(),
            ));
        }
        let a = &self.a * &rhs.a;
        let k = &self.a * &rhs.k + &self.k * &rhs.a + (&self.k * &rhs.k) * self.m as f64;
        Ok(RqkMatrix { a, k, m: self.m })
    }

    /// `Σ⁻¹ = rQK(A⁻¹, ((A + mK)⁻¹ - A⁻¹)/m)`.
    pub fn inverse(&self) -> Result<RqkMatrix> {
        let a_inv = self
            .a
            .clone()
            .try_inverse()
            .ok_or(RqkError::SingularMatrix("A"))?;
        let apmk_inv = self
            .a_plus_mk()
            .try_inverse()
            .ok_or(RqkError::SingularMatrix("A+mK"))?;
        let k = (apmk_inv - &a_inv) / self.m as f64;
        Ok(RqkMatrix {
            a: a_inv,
            k,
            m: self.m,
        })
    }

    /// Square-root factorisation from two `n × n` decompositions.
    pub fn factor(&self, method: FactorMethod) -> Result<RqkFactor> {
        let (head, logdet_head) = Half::build(self.a_plus_mk(), method, "A+mK")?;
        let (tail, logdet_tail) = Half::build(self.a.clone(), method, "A")?;
        Ok(RqkFactor {
            head,
            tail,
            method,
            rotation: BlockRotation::new(self.m),
            logdet_head,
            logdet_tail,
            n: self.n(),
            m: self.m,
        })
    }

    /// Eigendecomposition of Σ via the two small problems.
    pub fn eigen(&self) -> EigenRqk {
        let head = SymmetricEigen::new(self.a_plus_mk());
        let tail = SymmetricEigen::new(self.a.clone());
        EigenRqk {
            eigvals_head: head.eigenvalues,
            eigvecs_head: head.eigenvectors,
            eigvals_tail: tail.eigenvalues,
            eigvecs_tail: tail.eigenvectors,
            rotation: BlockRotation::new(self.m),
        }
    }

    pub fn to_dense(&self) -> Result<DMatrix<f64>> {
        self.to_dense_with_cap(DENSE_CAP)
    }

    /// Explicit block layout: diagonal blocks `A + K`, off-diagonal blocks `K`.
    pub fn to_dense_with_cap(&self, cap: usize) -> Result<DMatrix<f64>> {
        let (n, m) = (self.n(), self.m);
        let dim = n * m;
        if dim > cap {
            return Err(RqkError::CapExceeded { dim, cap });
        }
        let mut out = DMatrix::zeros(dim, dim);
        for bi in 0..m {
            for bj in 0..m {
                let mut block = out.view_mut((bi * n, bj * n), (n, n));
                block.copy_from(&self.k);
                if bi == bj {
                    block += &self.a;
                }
            }
        }
        Ok(out)
    }
}

/// One triangular or spectral square root `U` with `U'U = M`.
#[derive(Debug, Clone)]
enum Half {
    Chol { l: DMatrix<f64> },
    Eig { q: DMatrix<f64>, sqrt_vals: DVector<f64> },
}

impl Half {
    fn build(mat: DMatrix<f64>, method: FactorMethod, which: &'static str) -> Result<(Half, f64)> {
        record_factorization();
        match method {
            FactorMethod::Cholesky => {
                let chol = Cholesky::new(mat).ok_or(RqkError::NotPositiveDefinite(which))?;
                let l = chol.l();
                let logdet = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
                Ok((Half::Chol { l }, logdet))
            }
            FactorMethod::Eigen => {
                let se = SymmetricEigen::new(mat);
                if se.eigenvalues.iter().any(|&v| v <= 0.0) {
                    return Err(RqkError::NotPositiveDefinite(which));
                }
                let logdet = se.eigenvalues.iter().map(|v| v.ln()).sum();
                Ok((
                    Half::Eig {
                        q: se.eigenvectors,
                        sqrt_vals: se.eigenvalues.map(|v| v.sqrt()),
                    },
                    logdet,
                ))
            }
        }
    }

    /// `U' y`
    fn apply_ut(&self, y: &DVector<f64>) -> DVector<f64> {
        match self {
            Half::Chol { l } => l * y,
            Half::Eig { q, sqrt_vals } => q * sqrt_vals.component_mul(y),
        }
    }

    /// `U y`
    fn apply_u(&self, y: &DVector<f64>) -> DVector<f64> {
        match self {
            Half::Chol { l } => l.tr_mul(y),
            Half::Eig { q, sqrt_vals } => sqrt_vals.component_mul(&q.tr_mul(y)),
        }
    }

    /// `U^{-T} y`
    fn solve_ut(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Half::Chol { l } => l.solve_lower_triangular(y).ok_or(RqkError::SingularFactor),
            Half::Eig { q, sqrt_vals } => {
                Ok(q.tr_mul(y).component_div(sqrt_vals))
            }
        }
    }

    /// `U^{-1} y`
    fn solve_u(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Half::Chol { l } => l
                .tr_solve_lower_triangular(y)
                .ok_or(RqkError::SingularFactor),
            Half::Eig { q, sqrt_vals } => Ok(q * y.component_div(sqrt_vals)),
        }
    }

    fn dense_u(&self) -> DMatrix<f64> {
        match self {
            Half::Chol { l } => l.transpose(),
            Half::Eig { q, sqrt_vals } => {
                let mut u = q.transpose();
                for (i, s) in sqrt_vals.iter().enumerate() {
                    u.row_mut(i).scale_mut(*s);
                }
                u
            }
        }
    }

    /// `(U'U)⁻¹`
    fn gram_inverse(&self) -> Result<DMatrix<f64>> {
        match self {
            Half::Chol { l } => {
                let n = l.nrows();
                let linv = l
                    .solve_lower_triangular(&DMatrix::identity(n, n))
                    .ok_or(RqkError::SingularFactor)?;
                Ok(linv.tr_mul(&linv))
            }
            Half::Eig { q, sqrt_vals } => {
                let mut scaled = q.clone();
                for (j, s) in sqrt_vals.iter().enumerate() {
                    scaled.column_mut(j).scale_mut(1.0 / (s * s));
                }
                Ok(scaled * q.transpose())
            }
        }
    }
}

/// Square-root factorisation state of an rQK matrix:
/// `Σ = G'G` with `G = bdiag(U, V, …, V) R`.
#[derive(Debug, Clone)]
pub struct RqkFactor {
    head: Half,
    tail: Half,
    method: FactorMethod,
    rotation: BlockRotation,
    logdet_head: f64,
    logdet_tail: f64,
    n: usize,
    m: usize,
}

impl RqkFactor {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.n * self.m
    }

    pub fn method(&self) -> FactorMethod {
        self.method
    }

    pub fn rotation(&self) -> &BlockRotation {
        &self.rotation
    }

    /// Cached `log det(A + mK)`.
    pub fn logdet_a_plus_mk(&self) -> f64 {
        self.logdet_head
    }

    /// Cached `log det A`.
    pub fn logdet_a(&self) -> f64 {
        self.logdet_tail
    }

    /// `log det Σ = log det(A + mK) + (m - 1) log det A`; `O(1)` once factored.
    pub fn logdet(&self) -> f64 {
        self.logdet_head + (self.m as f64 - 1.0) * self.logdet_tail
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(RqkError::DimensionMismatch(format!(
                "expected vector of length {}, got {}",
                self.dim(),
                len
            )));
        }
        Ok(())
    }

    /// Correlating transform `G'z`: per-column products with `U'` / `V'`,
    /// then one fast rotation. Maps iid standard normals to `N(0, Σ)`.
    pub fn correlate(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(z.len())?;
        let zm = as_matrix(z, self.n, self.m);
        let mut y = DMatrix::zeros(self.n, self.m);
        y.set_column(0, &self.head.apply_ut(&zm.column(0).clone_owned()));
        for c in 1..self.m {
            y.set_column(c, &self.tail.apply_ut(&zm.column(c).clone_owned()));
        }
        Ok(as_vector(self.rotation.apply(&y)?))
    }

    /// Whitening transform `G^{-T}x`: rotation first, then per-column solves.
    /// Maps `N(0, Σ)` draws to white noise.
    pub fn whiten(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(x.len())?;
        let xm = as_matrix(x, self.n, self.m);
        let y = self.rotation.apply(&xm)?;
        let mut z = DMatrix::zeros(self.n, self.m);
        z.set_column(0, &self.head.solve_ut(&y.column(0).clone_owned())?);
        for c in 1..self.m {
            z.set_column(c, &self.tail.solve_ut(&y.column(c).clone_owned())?);
        }
        Ok(as_vector(z))
    }

    /// `G w` (used to pull likelihood gradients into whitened coordinates).
    pub fn apply_g(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(w.len())?;
        let wm = as_matrix(w, self.n, self.m);
        let y = self.rotation.apply(&wm)?;
        let mut out = DMatrix::zeros(self.n, self.m);
        out.set_column(0, &self.head.apply_u(&y.column(0).clone_owned()));
        for c in 1..self.m {
            out.set_column(c, &self.tail.apply_u(&y.column(c).clone_owned()));
        }
        Ok(as_vector(out))
    }

    /// `Σ⁻¹x = G⁻¹ G^{-T} x`, two triangular sweeps plus two rotations.
    pub fn sigma_solve(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let z = self.whiten(x)?;
        let zm = as_matrix(&z, self.n, self.m);
        let mut y = DMatrix::zeros(self.n, self.m);
        y.set_column(0, &self.head.solve_u(&zm.column(0).clone_owned())?);
        for c in 1..self.m {
            y.set_column(c, &self.tail.solve_u(&zm.column(c).clone_owned())?);
        }
        Ok(as_vector(self.rotation.apply(&y)?))
    }

    /// Mean-zero Gaussian log-density, `(2π)^{-mn/2}` constant included:
    /// `-(mn/2) log 2π - ½ log det Σ - ½ z'z` with `z` the whitened input.
    pub fn logdensity(&self, x: &DVector<f64>) -> Result<f64> {
        let z = self.whiten(x)?;
        let mn = self.dim() as f64;
        Ok(-0.5 * mn * (2.0 * std::f64::consts::PI).ln() - 0.5 * self.logdet() - 0.5 * z.norm_squared())
    }

    /// Diagonal preconditioner for quasi-Newton optimisation in whitened
    /// coordinates: `d0 = 1 + diag(G diag(w) G')`, computed through the
    /// elementwise-square identity `diag(T diag(v) T') = (T ⊙ T) v` per block
    /// and the squared rotation, without materialising any `mn × mn` matrix.
    /// `w` is the (nonnegative) likelihood curvature diagonal.
    pub fn precondition_diag(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(w.len())?;
        if w.iter().any(|&v| v < 0.0) {
            return Err(RqkError::InvalidArgument(
                "curvature diagonal must be nonnegative".into(),
            ));
        }
        let wm = as_matrix(w, self.n, self.m);
        let omega = self.rotation.apply_squared(&wm)?;
        let u2 = self.head.dense_u().map(|v| v * v);
        let mut out = DMatrix::zeros(self.n, self.m);
        out.set_column(0, &(&u2 * omega.column(0)));
        if self.m > 1 {
            let v2 = self.tail.dense_u().map(|v| v * v);
            for c in 1..self.m {
                out.set_column(c, &(&v2 * omega.column(c)));
            }
        }
        Ok(as_vector(out).add_scalar(1.0))
    }

    /// `(A + mK)⁻¹`, materialised from the head factor.
    pub fn head_gram_inverse(&self) -> Result<DMatrix<f64>> {
        self.head.gram_inverse()
    }

    /// `A⁻¹`, materialised from the tail factor.
    pub fn tail_gram_inverse(&self) -> Result<DMatrix<f64>> {
        self.tail.gram_inverse()
    }

    /// Materialises `G` (tests only); `G'G` reproduces the dense Σ.
    pub fn dense_factor_with_cap(&self, cap: usize) -> Result<DMatrix<f64>> {
        let dim = self.dim();
        if dim > cap {
            return Err(RqkError::CapExceeded { dim, cap });
        }
        let mut bd = DMatrix::zeros(dim, dim);
        bd.view_mut((0, 0), (self.n, self.n))
            .copy_from(&self.head.dense_u());
        let v = self.tail.dense_u();
        for c in 1..self.m {
            bd.view_mut((c * self.n, c * self.n), (self.n, self.n))
                .copy_from(&v);
        }
        let r = self
            .rotation
            .to_dense()
            .kronecker(&DMatrix::identity(self.n, self.n));
        Ok(bd * r)
    }

    pub fn dense_factor(&self) -> Result<DMatrix<f64>> {
        self.dense_factor_with_cap(DENSE_CAP)
    }
}

/// Eigendecomposition of an rQK matrix: the spectrum of Σ is the spectrum of
/// `A + mK` plus `m - 1` copies of the spectrum of `A`.
#[derive(Debug, Clone)]
pub struct EigenRqk {
    pub eigvals_head: DVector<f64>,
    pub eigvecs_head: DMatrix<f64>,
    pub eigvals_tail: DVector<f64>,
    pub eigvecs_tail: DMatrix<f64>,
    pub rotation: BlockRotation,
}

impl EigenRqk {
    /// Full sorted spectrum of Σ.
    pub fn full_spectrum(&self) -> Vec<f64> {
        let m = self.rotation.m();
        let mut out: Vec<f64> = self.eigvals_head.iter().copied().collect();
        for _ in 1..m {
            out.extend(self.eigvals_tail.iter().copied());
        }
        out.sort_by(|x, y| x.partial_cmp(y).unwrap());
        out
    }
}
