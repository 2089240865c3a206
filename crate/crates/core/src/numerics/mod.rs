//! Dense arithmetic, stable reductions, parameter storage, optimization and
//! the finite-difference oracle shared by every test suite.
//!
//! All arithmetic is 64-bit and every reduction over batch elements is a
//! sequential sum in index order, so results are bitwise reproducible.

mod gradcheck;
mod matrix;
mod optim;
pub mod rng;

pub use gradcheck::{finite_difference_gradient, max_relative_discrepancy, relative_error};
pub use matrix::{dot, norm, Matrix};
pub use optim::{AdamHyper, OptimizerState};

use crate::error::{Error, Result};

/// Smallest row norm accepted by [`l2_normalize_rows`].
pub const MIN_ROW_NORM: f64 = 1e-12;

/// A named learnable matrix together with its accumulated gradient.
///
/// Gradients accumulate additively; only [`ParamBlock::zero_grad`] clears them.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    /// Whether decoupled weight decay applies to this block.
    pub decay: bool,
}

impl ParamBlock {
    pub fn new(name: impl Into<String>, value: Matrix, decay: bool) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self {
            name: name.into(),
            value,
            grad,
            decay,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.as_slice().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `log Σ exp(v_i)` via the max-shift identity.
pub fn logsumexp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::domain("logsumexp of an empty slice"));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::domain(format!("logsumexp input contains {max}")));
    }
    let sum = values.iter().fold(0.0, |acc, &v| acc + (v - max).exp());
    Ok(max + sum.ln())
}

/// Softmax of a slice, computed with the same max shift as [`logsumexp`].
pub fn softmax(values: &[f64]) -> Result<Vec<f64>> {
    let lse = logsumexp(values)?;
    Ok(values.iter().map(|&v| (v - lse).exp()).collect())
}

/// Cached state of a row normalization, used to back-propagate through it.
#[derive(Debug, Clone)]
pub struct NormalizeBackward {
    unit: Matrix,
    norms: Vec<f64>,
}

impl NormalizeBackward {
    /// Maps an upstream gradient on the unit rows to the gradient on the raw rows:
    /// `(I − u uᵀ) g / ‖z‖` per row.
    pub fn backward(&self, upstream: &Matrix) -> Result<Matrix> {
        if upstream.shape() != self.unit.shape() {
            return Err(Error::contract(format!(
                "normalize backward expects {:?}, got {:?}",
                self.unit.shape(),
                upstream.shape()
            )));
        }
        let mut out = Matrix::zeros(upstream.rows(), upstream.cols());
        for i in 0..upstream.rows() {
            let u = self.unit.row(i);
            let g = upstream.row(i);
            let radial = dot(u, g);
            let inv = 1.0 / self.norms[i];
            for ((o, &gi), &ui) in out.row_mut(i).iter_mut().zip(g).zip(u) {
                *o = (gi - radial * ui) * inv;
            }
        }
        Ok(out)
    }

    pub fn unit(&self) -> &Matrix {
        &self.unit
    }
}

/// Scales every row to unit ℓ2 norm.
pub fn l2_normalize_rows(m: &Matrix) -> Result<(Matrix, NormalizeBackward)> {
    let mut unit = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        if !(n > MIN_ROW_NORM) {
            return Err(Error::Degenerate(format!(
                "row {i} has norm {n:e}, cannot normalize"
            )));
        }
        unit.row_mut(i).iter_mut().for_each(|x| *x /= n);
        norms.push(n);
    }
    Ok((
        unit.clone(),
        NormalizeBackward { unit, norms },
    ))
}

/// Median of a slice (mean of the two middle values for even lengths).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    Some(if sorted.len() % 2 == 0 {
        0.5 * (sorted[mid - 1] + sorted[mid])
    } else {
        sorted[mid]
    })
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn logsumexp_examples() {
        assert!((logsumexp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(logsumexp(&[1000.0, 1000.0]).unwrap(), 1000.0 + 2f64.ln());
        // Direct summation oracle: log(1 + e + e²).
        let direct = (1.0 + 1f64.exp() + 2f64.exp()).ln();
        let got = logsumexp(&[0.0, 1.0, 2.0]).unwrap();
        assert!((got - direct).abs() < 1e-14);
        assert!((got - 2.407_605_964_444_380).abs() < 1e-14);
    }

    #[test]
    fn logsumexp_rejects_empty() {
        assert!(matches!(logsumexp(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn normalize_three_four_five() {
        let m = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let (u, _) = l2_normalize_rows(&m).unwrap();
        assert!((u[(0, 0)] - 0.6).abs() < 1e-15);
        assert!((u[(0, 1)] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_backward_kills_radial_direction() {
        let m = Matrix::from_rows(&[vec![0.6, 0.8]]).unwrap();
        let (_, back) = l2_normalize_rows(&m).unwrap();
        let g = Matrix::from_rows(&[vec![1.2, 1.6]]).unwrap();
        let dx = back.backward(&g).unwrap();
        assert!(dx.max_abs() < 1e-15);
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(l2_normalize_rows(&m), Err(Error::Degenerate(_))));
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let mut rng = rng::seeded(11, 0);
        let data: Vec<f64> = (0..12).map(|_| rng::standard_normal(&mut rng)).collect();
        let x = Matrix::from_vec(4, 3, data).unwrap();
        let g: Vec<f64> = (0..12).map(|_| rng::standard_normal(&mut rng)).collect();
        let upstream = Matrix::from_vec(4, 3, g.clone()).unwrap();

        let (_, back) = l2_normalize_rows(&x).unwrap();
        let analytic = back.backward(&upstream).unwrap();
        let numeric = finite_difference_gradient(
            |flat| {
                let m = Matrix::from_vec(4, 3, flat.to_vec()).unwrap();
                let (u, _) = l2_normalize_rows(&m).unwrap();
                dot(u.as_slice(), &g)
            },
            x.as_slice(),
            1e-6,
        )
        .unwrap();
        assert!(relative_error(analytic.as_slice(), &numeric) < 1e-6);
    }

    proptest! {
        #[test]
        fn logsumexp_shift_invariance(
            v in proptest::collection::vec(-50.0f64..50.0, 1..12),
            c in -100.0f64..100.0,
        ) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let lhs = logsumexp(&shifted).unwrap();
            let rhs = logsumexp(&v).unwrap() + c;
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn normalized_rows_have_unit_norm(
            v in proptest::collection::vec(-10.0f64..10.0, 3..30),
        ) {
            let rows = v.len() / 3;
            let m = Matrix::from_vec(rows, 3, v[..rows * 3].to_vec()).unwrap();
            if let Ok((u, _)) = l2_normalize_rows(&m) {
                for i in 0..rows {
                    let n = norm(u.row(i));
                    prop_assert!((n - 1.0).abs() <= 1e-9);
                }
            }
        }
    }
}
