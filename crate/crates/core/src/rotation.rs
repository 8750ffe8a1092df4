//! The fast block rotation.
//!
//! `B` is the symmetric orthogonal `m × m` matrix whose first row and column
//! equal `e'/√m` and whose remaining entries are `b + δ_ij`, with
//! `a = 1/√m` and `b = -(1 + 1/√m)/(m - 1)`. Its rows 2…m span the zero-sum
//! subspace, `B e = (√m, 0, …, 0)'` and `B = B' = B⁻¹`. A product `X B` only
//! needs the column sum of `X` plus one scale-and-shift per column, so a full
//! rotation of an `n × m` matrix costs `O(n m)`.

use nalgebra::DMatrix;

use crate::error::{Result, RqkError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockRotation {
    m: usize,
    a: f64,
    b: f64,
}

impl BlockRotation {
    pub fn new(m: usize) -> Self {
        assert!(m >= 1, "replication count must be at least 1");
        let a = 1.0 / (m as f64).sqrt();
        // b is meaningless for m = 1, where B = [1].
        let b = if m == 1 {
            0.0
        } else {
            -(1.0 + a) / (m as f64 - 1.0)
        };
        BlockRotation { m, a, b }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    /// Off-diagonal coefficient of the trailing block; `None` for m = 1.
    pub fn b(&self) -> Option<f64> {
        (self.m > 1).then_some(self.b)
    }

    /// Computes `X B` in `O(nm)`. Since `B` is symmetric and orthogonal this
    /// is also `X B'`, and applying it twice returns `X`.
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.m {
            return Err(RqkError::DimensionMismatch(format!(
                "rotation expects {} columns, got {}",
                self.m,
                x.ncols()
            )));
        }
        if self.m == 1 {
            return Ok(x.clone());
        }
        let (a, b) = (self.a, self.b);
        let s = x.column_sum();
        let mut out = DMatrix::zeros(x.nrows(), self.m);
        out.set_column(0, &(&s * a));
        let x0 = x.column(0);
        for c in 1..self.m {
            let mut col = out.column_mut(c);
            for r in 0..x.nrows() {
                col[r] = (a - b) * x0[r] + b * s[r] + x[(r, c)];
            }
        }
        Ok(out)
    }

    /// Computes `X (B ⊙ B)` (elementwise square of `B`), used when pushing a
    /// diagonal through the rotation: the diagonal blocks of
    /// `(B ⊗ I) diag(w) (B ⊗ I)'` are `diag(Σ_j B_cj² w_j)`.
    pub fn apply_squared(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.m {
            return Err(RqkError::DimensionMismatch(format!(
                "rotation expects {} columns, got {}",
                self.m,
                x.ncols()
            )));
        }
        if self.m == 1 {
            return Ok(x.clone());
        }
        let (a2, b2) = (self.a * self.a, self.b * self.b);
        let diag = 2.0 * self.b + 1.0;
        let s = x.column_sum();
        let mut out = DMatrix::zeros(x.nrows(), self.m);
        out.set_column(0, &(&s * a2));
        let x0 = x.column(0);
        for c in 1..self.m {
            let mut col = out.column_mut(c);
            for r in 0..x.nrows() {
                col[r] = (a2 - b2) * x0[r] + b2 * s[r] + diag * x[(r, c)];
            }
        }
        Ok(out)
    }

    /// Materialises `B` (tests and dense oracles only).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let m = self.m;
        if m == 1 {
            return DMatrix::identity(1, 1);
        }
        DMatrix::from_fn(m, m, |i, j| {
            if i == 0 || j == 0 {
                self.a
            } else if i == j {
                self.b + 1.0
            } else {
                self.b
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    #[test]
    fn trivial_for_single_function() {
        let rot = BlockRotation::new(1);
        let x = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        assert_eq!(rot.apply(&x).unwrap(), x);
        assert!(rot.b().is_none());
    }

    #[test]
    fn two_column_row_example() {
        let rot = BlockRotation::new(2);
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let y = rot.apply(&x).unwrap();
        let r = 0.5f64.sqrt();
        assert_relative_eq!(y[(0, 0)], r, epsilon = 1e-12);
        assert_relative_eq!(y[(0, 1)], r, epsilon = 1e-12);
    }

    #[test]
    fn all_ones_row_maps_to_scaled_first_axis() {
        let rot = BlockRotation::new(4);
        let x = DMatrix::from_row_slice(1, 4, &[1.0, 1.0, 1.0, 1.0]);
        let y = rot.apply(&x).unwrap();
        assert_relative_eq!(y[(0, 0)], 2.0, epsilon = 1e-13);
        for c in 1..4 {
            assert!(y[(0, c)].abs() < 1e-13);
        }
    }

    #[test]
    fn dense_b_is_symmetric_orthogonal_and_sends_e_to_first_axis() {
        for m in [2usize, 3, 5, 8, 17] {
            let rot = BlockRotation::new(m);
            let b = rot.to_dense();
            assert!((b.transpose() * &b - DMatrix::identity(m, m)).amax() < 1e-12);
            assert_eq!(b, b.transpose());
            let be = &b * DVector::from_element(m, 1.0);
            assert_relative_eq!(be[0], (m as f64).sqrt(), epsilon = 1e-12);
            for i in 1..m {
                assert!(be[i].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fast_apply_matches_dense_multiplication() {
        for m in [2usize, 3, 7] {
            let rot = BlockRotation::new(m);
            let b = rot.to_dense();
            let x = DMatrix::from_fn(4, m, |i, j| ((3 * i + 7 * j) as f64).sin());
            let fast = rot.apply(&x).unwrap();
            let dense = &x * &b;
            assert!((fast - dense).amax() < 1e-13);

            let fast2 = rot.apply_squared(&x).unwrap();
            let dense2 = &x * b.map(|v| v * v);
            assert!((fast2 - dense2).amax() < 1e-13);
        }
    }

    #[test]
    fn double_application_is_identity() {
        let rot = BlockRotation::new(6);
        let x = DMatrix::from_fn(5, 6, |i, j| ((i * j) as f64).cos());
        let twice = rot.apply(&rot.apply(&x).unwrap()).unwrap();
        assert!((twice - x).amax() < 1e-10);
    }

    #[test]
    fn rejects_wrong_column_count() {
        let rot = BlockRotation::new(3);
        let x = DMatrix::zeros(2, 4);
        assert!(matches!(
            rot.apply(&x),
            Err(crate::RqkError::DimensionMismatch(_))
        ));
    }
}
