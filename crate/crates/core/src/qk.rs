//! Quasi-Kronecker matrices `Q = bdiag(A₁ … A_m) + u v' ⊗ K`.
//!
//! These arise as negative Hessians of latent Gaussian models with rQK priors:
//! the likelihood contributes a diagonal per block and the prior contributes
//! `Σ⁻¹`, whose low-rank part is `e e' ⊗ K'`. Solves and determinants use the
//! Sherman–Morrison–Woodbury identity with the low-rank split
//! `u v' ⊗ K = (u ⊗ L₁)(v ⊗ L₂)'` and the `n × n` capacitance matrix
//!
//! ```text
//! P = I_n + Σ_i u_i v_i L₂' A_i⁻¹ L₁
//! ```
//!
//! The textbook split `K = L L'` only exists for positive semidefinite `K`,
//! but the `K'` arising from inverted rQK priors is typically *negative*
//! definite. We therefore use the signed split `K = E S E'` from the
//! symmetric eigendecomposition, with `L₁ = E S` and `L₂ = E`, which keeps the
//! identity exact for indefinite `K`. Factoring once costs `O(m n³)`; each
//! subsequent solve is `O(m n²)`.

use nalgebra::linalg::{SymmetricEigen, LU};
use nalgebra::{DMatrix, DVector, Dyn, U1};

use crate::error::{Result, RqkError};

/// Per-block diagonal matrices plus rank-structure `(u, v, K)`.
#[derive(Debug, Clone)]
pub struct QkMatrix {
    blocks: Vec<DMatrix<f64>>,
    u: DVector<f64>,
    v: DVector<f64>,
    k: DMatrix<f64>,
}

impl QkMatrix {
    pub fn new(
        blocks: Vec<DMatrix<f64>>,
        u: DVector<f64>,
        v: DVector<f64>,
        k: DMatrix<f64>,
    ) -> Result<Self> {
        if blocks.is_empty() {
            return Err(RqkError::DimensionMismatch("no diagonal blocks".into()));
        }
        let n = blocks[0].nrows();
        if blocks.iter().any(|b| b.nrows() != n || b.ncols() != n) {
            return Err(RqkError::DimensionMismatch(
                "all blocks must be square with equal dimension".into(),
            ));
        }
        if k.nrows() != n || k.ncols() != n {
            return Err(RqkError::DimensionMismatch(format!(
                "K must be {n}x{n}"
            )));
        }
        let m = blocks.len();
        if u.len() != m || v.len() != m {
            return Err(RqkError::DimensionMismatch(format!(
                "u and v must have length {m}"
            )));
        }
        Ok(QkMatrix { blocks, u, v, k })
    }

    pub fn n(&self) -> usize {
        self.blocks[0].nrows()
    }

    pub fn m(&self) -> usize {
        self.blocks.len()
    }

    pub fn dim(&self) -> usize {
        self.n() * self.m()
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }

    /// `Q x`: blockwise products plus one broadcast of `K (Σ_i v_i x_i)`.
    pub fn matvec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let (n, m) = (self.n(), self.m());
        if x.len() != n * m {
            return Err(RqkError::DimensionMismatch(format!(
                "expected vector of length {}, got {}",
                n * m,
                x.len()
            )));
        }
        let xm = x.clone().reshape_generic(Dyn(n), Dyn(m));
        let weighted = &xm * &self.v;
        let broadcast = &self.k * weighted;
        let mut out = DMatrix::zeros(n, m);
        for i in 0..m {
            let col = &self.blocks[i] * xm.column(i) + &broadcast * self.u[i];
            out.set_column(i, &col);
        }
        Ok(out.reshape_generic(Dyn(n * m), U1))
    }

    pub fn to_dense(&self) -> Result<DMatrix<f64>> {
        self.to_dense_with_cap(crate::rqk::DENSE_CAP)
    }

    pub fn to_dense_with_cap(&self, cap: usize) -> Result<DMatrix<f64>> {
        let (n, m) = (self.n(), self.m());
        let dim = n * m;
        if dim > cap {
            return Err(RqkError::CapExceeded { dim, cap });
        }
        let mut out = DMatrix::zeros(dim, dim);
        for bi in 0..m {
            for bj in 0..m {
                let mut block = out.view_mut((bi * n, bj * n), (n, n));
                block.copy_from(&(&self.k * (self.u[bi] * self.v[bj])));
                if bi == bj {
                    block += &self.blocks[bi];
                }
            }
        }
        Ok(out)
    }
}

fn lu_sign_logabsdet(lu: &LU<f64, Dyn, Dyn>) -> Option<(f64, f64)> {
    let mut sign = lu.p().determinant::<f64>();
    let mut logabs = 0.0;
    for d in lu.u().diagonal().iter() {
        if *d == 0.0 || !d.is_finite() {
            return None;
        }
        sign *= d.signum();
        logabs += d.abs().ln();
    }
    Some((sign, logabs))
}

/// Prefactored Woodbury solver for a [`QkMatrix`]. Construction performs the
/// per-block LU factorisations and assembles the capacitance matrix; solves
/// afterwards are cheap and can be repeated for many right-hand sides.
pub struct QkSolver {
    n: usize,
    m: usize,
    block_lus: Vec<LU<f64, Dyn, Dyn>>,
    l1: DMatrix<f64>,
    l2: DMatrix<f64>,
    cap_lu: LU<f64, Dyn, Dyn>,
    u: DVector<f64>,
    v: DVector<f64>,
    sign: f64,
    logabsdet: f64,
}

impl QkSolver {
    pub fn new(q: &QkMatrix) -> Result<Self> {
        let (n, m) = (q.n(), q.m());
        let mut block_lus = Vec::with_capacity(m);
        let mut sign = 1.0;
        let mut logabsdet = 0.0;
        for (i, block) in q.blocks.iter().enumerate() {
            let lu = block.clone().lu();
            let (s, l) = lu_sign_logabsdet(&lu).ok_or(RqkError::SingularBlock(i))?;
            sign *= s;
            logabsdet += l;
            block_lus.push(lu);
        }

        // Signed split K = E S E' so indefinite K stays exact.
        let se = SymmetricEigen::new(q.k.clone());
        let mut l1 = se.eigenvectors.clone();
        for (j, lam) in se.eigenvalues.iter().enumerate() {
            l1.column_mut(j).scale_mut(*lam);
        }
        let l2 = se.eigenvectors;

        let mut p = DMatrix::identity(n, n);
        for i in 0..m {
            let x = block_lus[i]
                .solve(&l1)
                .ok_or(RqkError::SingularBlock(i))?;
            p += l2.tr_mul(&x) * (q.u[i] * q.v[i]);
        }
        let cap_lu = p.lu();
        let (s, l) = lu_sign_logabsdet(&cap_lu).ok_or(RqkError::SingularCapacitance)?;
        sign *= s;
        logabsdet += l;

        Ok(QkSolver {
            n,
            m,
            block_lus,
            l1,
            l2,
            cap_lu,
            u: q.u.clone(),
            v: q.v.clone(),
            sign,
            logabsdet,
        })
    }

    pub fn dim(&self) -> usize {
        self.n * self.m
    }

    /// `Q⁻¹ b` via blockwise solves and the capacitance correction.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let (n, m) = (self.n, self.m);
        if b.len() != n * m {
            return Err(RqkError::DimensionMismatch(format!(
                "expected vector of length {}, got {}",
                n * m,
                b.len()
            )));
        }
        let bm = b.clone().reshape_generic(Dyn(n), Dyn(m));
        let mut w = DMatrix::zeros(n, m);
        for i in 0..m {
            let col = self.block_lus[i]
                .solve(&bm.column(i).clone_owned())
                .ok_or(RqkError::SingularBlock(i))?;
            w.set_column(i, &col);
        }
        let t = self.l2.tr_mul(&(&w * &self.v));
        let s = self
            .cap_lu
            .solve(&t)
            .ok_or(RqkError::SingularCapacitance)?;
        let l1s = &self.l1 * s;
        for i in 0..m {
            let corr = self.block_lus[i]
                .solve(&l1s)
                .ok_or(RqkError::SingularBlock(i))?;
            let col = w.column(i) - corr * self.u[i];
            w.set_column(i, &col);
        }
        Ok(w.reshape_generic(Dyn(n * m), U1))
    }

    /// `(sign, log |det Q|)`: `Σ_i log det A_i + log det P`, signs tracked
    /// through the LU factorisations.
    pub fn sign_logabsdet(&self) -> (f64, f64) {
        (self.sign, self.logabsdet)
    }
}

/// One-shot solve `Q⁻¹ b`.
pub fn qk_solve(q: &QkMatrix, b: &DVector<f64>) -> Result<DVector<f64>> {
    QkSolver::new(q)?.solve(b)
}

/// One-shot signed log-determinant of `Q`.
pub fn qk_logdet(q: &QkMatrix) -> Result<(f64, f64)> {
    Ok(QkSolver::new(q)?.sign_logabsdet())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let x = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        &x * x.transpose() / n as f64 + DMatrix::identity(n, n) * 0.8
    }

    fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let x = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        (&x + x.transpose()) / 2.0
    }

    fn random_vec(len: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    /// Hessian-style instance: SPD blocks with an indefinite or negative K.
    fn random_qk(n: usize, m: usize, rng: &mut ChaCha8Rng) -> QkMatrix {
        let blocks = (0..m).map(|_| random_spd(n, rng)).collect();
        let sym = random_symmetric(n, rng);
        let k = match rng.random_range(0..3) {
            0 => &sym * 0.2,
            1 => -(&sym * sym.transpose()) / n as f64 * 0.5,
            _ => DMatrix::zeros(n, n),
        };
        QkMatrix::new(
            blocks,
            DVector::from_element(m, 1.0),
            DVector::from_element(m, 1.0),
            k,
        )
        .unwrap()
    }

    #[test]
    fn matvec_identity_blocks() {
        let q = QkMatrix::new(
            vec![DMatrix::identity(3, 3); 2],
            DVector::from_element(2, 1.0),
            DVector::from_element(2, 1.0),
            DMatrix::zeros(3, 3),
        )
        .unwrap();
        let x = random_vec(6, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(q.matvec(&x).unwrap(), x);
    }

    #[test]
    fn scalar_block_example() {
        let q = QkMatrix::new(
            vec![
                DMatrix::from_element(1, 1, 2.0),
                DMatrix::from_element(1, 1, 3.0),
            ],
            DVector::from_element(2, 1.0),
            DVector::from_element(2, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        assert_eq!(
            q.to_dense().unwrap(),
            DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 4.0])
        );
        let y = q.matvec(&DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert_eq!(y, DVector::from_vec(vec![3.0, 1.0]));

        let x = qk_solve(&q, &DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert_relative_eq!(x[0], 4.0 / 11.0, epsilon = 1e-14);
        assert_relative_eq!(x[1], -1.0 / 11.0, epsilon = 1e-14);

        let (sign, logabs) = qk_logdet(&q).unwrap();
        assert_eq!(sign, 1.0);
        assert_relative_eq!(logabs, 11f64.ln(), epsilon = 1e-13);
    }

    #[test]
    fn zero_k_reduces_to_blockwise_solves() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let blocks: Vec<_> = (0..3).map(|_| random_spd(4, &mut rng)).collect();
        let q = QkMatrix::new(
            blocks.clone(),
            DVector::from_element(3, 1.0),
            DVector::from_element(3, 1.0),
            DMatrix::zeros(4, 4),
        )
        .unwrap();
        let b = random_vec(12, &mut rng);
        let x = qk_solve(&q, &b).unwrap();
        for i in 0..3 {
            let bi = b.rows(i * 4, 4).clone_owned();
            let xi = x.rows(i * 4, 4).clone_owned();
            let expect = blocks[i].clone().lu().solve(&bi).unwrap();
            assert!((xi - expect).amax() < 1e-12);
        }
    }

    #[test]
    fn matvec_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (n, m) = (rng.random_range(1..5), rng.random_range(1..5));
            let q = random_qk(n, m, &mut rng);
            let x = random_vec(n * m, &mut rng);
            let fast = q.matvec(&x).unwrap();
            let dense = q.to_dense().unwrap() * &x;
            let scale = dense.amax().max(1.0);
            assert!((fast - dense).amax() / scale < 1e-12);
        }
    }

    #[test]
    fn solve_and_logdet_match_dense_including_negative_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..40 {
            let (n, m) = (rng.random_range(1..5), rng.random_range(1..5));
            let q = random_qk(n, m, &mut rng);
            let dense = q.to_dense().unwrap();
            let b = random_vec(n * m, &mut rng);

            let x = qk_solve(&q, &b).unwrap();
            let resid = (q.matvec(&x).unwrap() - &b).norm();
            assert!(resid <= 1e-8 * b.norm().max(1.0), "residual too large");
            let dense_x = dense.clone().lu().solve(&b).unwrap();
            let scale = dense_x.amax().max(1.0);
            assert!((x - dense_x).amax() / scale < 1e-8);

            let (sign, logabs) = qk_logdet(&q).unwrap();
            let det = dense.lu().determinant();
            assert_eq!(sign, det.signum());
            assert_relative_eq!(logabs, det.abs().ln(), max_relative = 1e-9);
        }
    }

    #[test]
    fn singular_block_is_identified() {
        let q = QkMatrix::new(
            vec![DMatrix::identity(2, 2), DMatrix::zeros(2, 2)],
            DVector::from_element(2, 1.0),
            DVector::from_element(2, 1.0),
            DMatrix::zeros(2, 2),
        )
        .unwrap();
        assert!(matches!(
            QkSolver::new(&q),
            Err(RqkError::SingularBlock(1))
        ));
    }

    #[test]
    fn general_uv_weights_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 3;
        let m = 4;
        let blocks: Vec<_> = (0..m).map(|_| random_spd(n, &mut rng)).collect();
        let q = QkMatrix::new(
            blocks,
            random_vec(m, &mut rng),
            random_vec(m, &mut rng),
            random_symmetric(n, &mut rng) * 0.3,
        )
        .unwrap();
        let dense = q.to_dense().unwrap();
        let b = random_vec(n * m, &mut rng);
        let x = qk_solve(&q, &b).unwrap();
        let dense_x = dense.clone().lu().solve(&b).unwrap();
        assert!((x - dense_x).amax() < 1e-8);
        let (sign, logabs) = qk_logdet(&q).unwrap();
        let det = dense.lu().determinant();
        assert_eq!(sign, det.signum());
        assert_relative_eq!(logabs, det.abs().ln(), max_relative = 1e-9);
    }
}
