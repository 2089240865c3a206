//! Representation-learning objectives with analytic gradients.
//!
//! Every loss takes the two embedding batches (row `i` of each forms the
//! positive pair `i`) and the inverse temperature `τ`, and returns gradients
//! on both batches and on `τ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{logsumexp, max_relative_discrepancy, Matrix};

/// Largest exponent accepted before a term is treated as overflow.
const MAX_EXPONENT: f64 = 700.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_a: Matrix,
    pub grad_b: Matrix,
    pub tau_grad: f64,
}

impl LossOutput {
    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.tau_grad.is_finite()
            && self.grad_a.is_finite()
            && self.grad_b.is_finite()
    }
}

fn check_pair(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "paired batches differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    a.matmul_transposed(b)
}

/// Packs a gradient on the similarity matrix into embedding gradients.
fn embedding_grads(ds: &Matrix, a: &Matrix, b: &Matrix) -> Result<(Matrix, Matrix)> {
    Ok((ds.matmul(b)?, ds.transposed_matmul(a)?))
}

fn trace(s: &Matrix) -> f64 {
    (0..s.rows()).fold(0.0, |acc, i| acc + s[(i, i)])
}

/// Row- and column-wise softmax of `τ S`.
fn softmaxes(s: &Matrix, tau: f64) -> Result<(Matrix, Matrix)> {
    let n = s.rows();
    let mut rows = Matrix::zeros(n, n);
    let mut cols = Matrix::zeros(n, n);
    let mut buf = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            buf[j] = tau * s[(i, j)];
        }
        let lse = logsumexp(&buf)?;
        for j in 0..n {
            rows[(i, j)] = (buf[j] - lse).exp();
        }
    }
    for j in 0..n {
        for i in 0..n {
            buf[i] = tau * s[(i, j)];
        }
        let lse = logsumexp(&buf)?;
        for i in 0..n {
            cols[(i, j)] = (buf[i] - lse).exp();
        }
    }
    Ok((rows, cols))
}

/// Two-directional ranking NCE (CLIP) loss with in-batch negatives:
///
/// `−(2τ/n) Σ_i s_ii + (1/n) Σ_i [log Σ_j exp(τ s_ij) + log Σ_j exp(τ s_ji)]`.
///
/// The inner sums are plain sums, not means.
pub fn nce_loss(a: &Matrix, b: &Matrix, tau: f64) -> Result<LossOutput> {
    let s = check_pair(a, b)?;
    let n = s.rows();
    if n < 2 {
        return Err(Error::Degenerate(format!("NCE needs at least 2 pairs, got {n}")));
    }
    let nf = n as f64;
    let mut lse_sum = 0.0;
    let mut buf = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            buf[j] = tau * s[(i, j)];
        }
        lse_sum += logsumexp(&buf)?;
    }
    for j in 0..n {
        for i in 0..n {
            buf[i] = tau * s[(i, j)];
        }
        lse_sum += logsumexp(&buf)?;
    }
    let tr = trace(&s);
    let value = -2.0 * tau * tr / nf + lse_sum / nf;

    let (rows, cols) = softmaxes(&s, tau)?;
    let mut ds = Matrix::zeros(n, n);
    let mut tau_grad = -2.0 * tr / nf;
    for i in 0..n {
        for j in 0..n {
            let p = rows[(i, j)] + cols[(i, j)];
            ds[(i, j)] = tau * p / nf;
            tau_grad += p * s[(i, j)] / nf;
        }
        ds[(i, i)] -= 2.0 * tau / nf;
    }
    let (grad_a, grad_b) = embedding_grads(&ds, a, b)?;
    Ok(LossOutput {
        value,
        grad_a,
        grad_b,
        tau_grad,
    })
}

fn check_log_lambda(log_lambda: &[f64], n: usize, which: &str) -> Result<()> {
    if log_lambda.len() != n {
        return Err(Error::contract(format!(
            "{which}: {} amortized values for {n} samples",
            log_lambda.len()
        )));
    }
    if let Some(i) = log_lambda.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{which}: log λ at sample {i} is {}", log_lambda[i])));
    }
    Ok(())
}

/// `exp(τ S[i][j] − log λ̂)`, or an overflow error naming the pair.
fn amortized_term(tau: f64, s: f64, log_lambda: f64, i: usize, j: usize) -> Result<f64> {
    let x = tau * s - log_lambda;
    if x > MAX_EXPONENT || x.is_nan() {
        return Err(Error::NonFinite(format!(
            "exp(τs − log λ̂) overflows at pair ({i}, {j}): exponent {x}"
        )));
    }
    Ok(x.exp())
}

/// Amortized maximum-likelihood loss with frozen partition predictions:
///
/// `−(2τ/n) Σ_i s_ii + (1/n²) Σ_{i,j} [exp(τ s_ij − log λ̂_A(i)) + exp(τ s_ij − log λ̂_B(j))]`.
///
/// `λ̂` is constant: gradients reach the embeddings and `τ` only.
pub fn amortized_mle_loss(
    a: &Matrix,
    b: &Matrix,
    tau: f64,
    log_lambda_a: &[f64],
    log_lambda_b: &[f64],
) -> Result<LossOutput> {
    let s = check_pair(a, b)?;
    let n = s.rows();
    if n == 0 {
        return Err(Error::Degenerate("empty batch".into()));
    }
    check_log_lambda(log_lambda_a, n, "image amortizer")?;
    check_log_lambda(log_lambda_b, n, "text amortizer")?;
    let nf = n as f64;
    let inv_n2 = 1.0 / (nf * nf);
    let tr = trace(&s);

    let mut second = 0.0;
    let mut tau_grad = -2.0 * tr / nf;
    let mut ds = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let sij = s[(i, j)];
            let e = amortized_term(tau, sij, log_lambda_a[i], i, j)?
                + amortized_term(tau, sij, log_lambda_b[j], i, j)?;
            second += e;
            ds[(i, j)] = tau * e * inv_n2;
            tau_grad += sij * e * inv_n2;
        }
        ds[(i, i)] -= 2.0 * tau / nf;
    }
    let (grad_a, grad_b) = embedding_grads(&ds, a, b)?;
    Ok(LossOutput {
        value: -2.0 * tau * tr / nf + second * inv_n2,
        grad_a,
        grad_b,
        tau_grad,
    })
}

/// Contribution of an arbitrary subset of index pairs to
/// [`amortized_mle_loss`]; each pair depends on nothing else in the batch, so
/// summing over any partition of the `n²` pairs reproduces the full value.
pub fn amortized_mle_pairs(
    a: &Matrix,
    b: &Matrix,
    tau: f64,
    log_lambda_a: &[f64],
    log_lambda_b: &[f64],
    pairs: &[(usize, usize)],
) -> Result<f64> {
    let n = a.rows();
    let nf = n as f64;
    let mut acc = 0.0;
    for &(i, j) in pairs {
        if i >= n || j >= b.rows() {
            return Err(Error::contract(format!("pair ({i}, {j}) outside batch of {n}")));
        }
        let sij = crate::numerics::dot(a.row(i), b.row(j));
        let mut term = (amortized_term(tau, sij, log_lambda_a[i], i, j)?
            + amortized_term(tau, sij, log_lambda_b[j], i, j)?)
            / (nf * nf);
        if i == j {
            term -= 2.0 * tau * sij / nf;
        }
        acc += term;
    }
    Ok(acc)
}

/// Compares embedding gradients of the two partition forms of the maximum
/// likelihood objective:
///
/// (a) `Σ_l (1/n) Σ_i log Z̃_l(i)`, differentiated through `logsumexp`;
/// (b) `Σ_l (1/n²) Σ_{i,j} exp(τ s_ij) / Z̃_l(i)` with `Z̃` held constant.
///
/// Returns the largest elementwise discrepancy relative to the largest
/// gradient entry.
pub fn mle_gradient_equivalence_check(a: &Matrix, b: &Matrix, tau: f64) -> Result<f64> {
    let s = check_pair(a, b)?;
    let n = s.rows();
    if n < 2 {
        return Err(Error::Degenerate(format!("equivalence check needs n ≥ 2, got {n}")));
    }
    let nf = n as f64;

    // (a): ∂ log Z̃ / ∂ s is a softmax.
    let (rows, cols) = softmaxes(&s, tau)?;
    let mut ds_log = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            ds_log[(i, j)] = tau * (rows[(i, j)] + cols[(i, j)]) / nf;
        }
    }

    // (b): explicit exponentials over a frozen mean-form partition.
    let expo = s.map(|v| (tau * v).exp());
    let z_a: Vec<f64> = (0..n).map(|i| expo.row(i).iter().sum::<f64>() / nf).collect();
    let z_b: Vec<f64> = (0..n)
        .map(|j| (0..n).fold(0.0, |acc, i| acc + expo[(i, j)]) / nf)
        .collect();
    let mut ds_exp = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            ds_exp[(i, j)] = tau * expo[(i, j)] * (1.0 / z_a[i] + 1.0 / z_b[j]) / (nf * nf);
        }
    }

    let (ga_log, gb_log) = embedding_grads(&ds_log, a, b)?;
    let (ga_exp, gb_exp) = embedding_grads(&ds_exp, a, b)?;
    let lhs: Vec<f64> = ga_log.as_slice().iter().chain(gb_log.as_slice()).copied().collect();
    let rhs: Vec<f64> = ga_exp.as_slice().iter().chain(gb_exp.as_slice()).copied().collect();
    Ok(max_relative_discrepancy(&lhs, &rhs))
}

/// `ℓ / stop_grad(τ) + ρ / τ`.
///
/// The numerator keeps its own `τ` dependence, divided by the frozen value.
pub fn temperature_rescale(raw: &LossOutput, tau: f64, rho: f64) -> Result<LossOutput> {
    if !(tau > 0.0) {
        return Err(Error::domain(format!("tau must be positive, got {tau}")));
    }
    Ok(LossOutput {
        value: raw.value / tau + rho / tau,
        grad_a: raw.grad_a.scaled(1.0 / tau),
        grad_b: raw.grad_b.scaled(1.0 / tau),
        tau_grad: raw.tau_grad / tau - rho / (tau * tau),
    })
}

/// Regularizer `ρ`: `rho_main`, switching to `rho_anneal` once the epoch is
/// strictly past `anneal_start_fraction · T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoSchedule {
    pub rho_main: f64,
    pub rho_anneal: f64,
    pub anneal_start_fraction: f64,
}

impl Default for RhoSchedule {
    fn default() -> Self {
        Self {
            rho_main: 6.5,
            rho_anneal: -8.0,
            anneal_start_fraction: 0.75,
        }
    }
}

pub fn rho_at(epoch: usize, total: usize, sched: &RhoSchedule) -> Result<f64> {
    if epoch == 0 || epoch > total {
        return Err(Error::domain(format!("epoch {epoch} outside [1, {total}]")));
    }
    if !(0.0..=1.0).contains(&sched.anneal_start_fraction) {
        return Err(Error::domain(format!(
            "anneal start fraction must lie in [0, 1], got {}",
            sched.anneal_start_fraction
        )));
    }
    Ok(if epoch as f64 > sched.anneal_start_fraction * total as f64 {
        sched.rho_anneal
    } else {
        sched.rho_main
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::amortization::exact_partition;
    use crate::numerics::{finite_difference_gradient, l2_normalize_rows, relative_error, rng};
    use proptest::prelude::*;

    fn unit_batch(seed: u64, n: usize, d: usize) -> Matrix {
        let raw = rng::normal_matrix(&mut rng::seeded(seed, 7), n, d, 1.0);
        l2_normalize_rows(&raw).unwrap().0
    }

    #[test]
    fn nce_identical_batch_is_two_log_n() {
        for n in [2usize, 4, 8] {
            for tau in [1.0, 10.0, 50.0] {
                let e = Matrix::from_rows(&vec![vec![0.6, 0.8]; n]).unwrap();
                let out = nce_loss(&e, &e, tau).unwrap();
                assert!((out.value - 2.0 * (n as f64).ln()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn nce_identity_pattern() {
        let e = Matrix::identity(2);
        let out = nce_loss(&e, &e, 1.0).unwrap();
        let direct = -2.0 + 2.0 * (1f64.exp() + 1.0).ln();
        assert!((out.value - direct).abs() < 1e-14);
        assert!((out.value - 0.626_523_375_036_445_6).abs() < 1e-14);
    }

    #[test]
    fn nce_rejects_single_pair() {
        let e = Matrix::identity(1);
        assert!(matches!(nce_loss(&e, &e, 1.0), Err(Error::Degenerate(_))));
    }

    fn check_grads<F>(a: &Matrix, b: &Matrix, tau: f64, out: &LossOutput, f: F)
    where
        F: Fn(&Matrix, &Matrix, f64) -> f64,
    {
        let (n, d) = a.shape();
        let ga = finite_difference_gradient(
            |x| f(&Matrix::from_vec(n, d, x.to_vec()).unwrap(), b, tau),
            a.as_slice(),
            1e-6,
        )
        .unwrap();
        let gb = finite_difference_gradient(
            |x| f(a, &Matrix::from_vec(n, d, x.to_vec()).unwrap(), tau),
            b.as_slice(),
            1e-6,
        )
        .unwrap();
        let gt = finite_difference_gradient(|x| f(a, b, x[0]), &[tau], 1e-6).unwrap();
        assert!(relative_error(out.grad_a.as_slice(), &ga) < 1e-5);
        assert!(relative_error(out.grad_b.as_slice(), &gb) < 1e-5);
        assert!(relative_error(&[out.tau_grad], &gt) < 1e-5);
    }

    #[test]
    fn nce_gradients_match_finite_differences() {
        let a = unit_batch(1, 4, 8);
        let b = unit_batch(2, 4, 8);
        let out = nce_loss(&a, &b, 2.5).unwrap();
        check_grads(&a, &b, 2.5, &out, |a, b, t| nce_loss(a, b, t).unwrap().value);
    }

    #[test]
    fn amortized_mle_at_exact_partition() {
        let a = unit_batch(3, 5, 4);
        let b = unit_batch(4, 5, 4);
        let tau = 3.0;
        let za = exact_partition(&a, &b, tau, true).unwrap().log_z_exact;
        let zb = exact_partition(&b, &a, tau, true).unwrap().log_z_exact;
        let out = amortized_mle_loss(&a, &b, tau, &za, &zb).unwrap();
        let s = a.matmul_transposed(&b).unwrap();
        let positive = -2.0 * tau * trace(&s) / 5.0;
        assert!((out.value - positive - 2.0).abs() < 1e-12);
    }

    #[test]
    fn amortized_mle_identical_embeddings() {
        let tau = 4.0;
        let e = Matrix::from_rows(&vec![vec![0.0, 1.0, 0.0]; 3]).unwrap();
        let ll = vec![tau; 3];
        let out = amortized_mle_loss(&e, &e, tau, &ll, &ll).unwrap();
        assert!((out.value - (-2.0 * tau + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn amortized_mle_gradients_match_finite_differences() {
        let a = unit_batch(5, 4, 6);
        let b = unit_batch(6, 4, 6);
        let la = vec![0.3, -0.2, 1.1, 0.0];
        let lb = vec![0.5, 0.9, -0.4, 0.2];
        let out = amortized_mle_loss(&a, &b, 2.0, &la, &lb).unwrap();
        check_grads(&a, &b, 2.0, &out, |a, b, t| {
            amortized_mle_loss(a, b, t, &la, &lb).unwrap().value
        });
    }

    #[test]
    fn amortized_mle_reports_overflow() {
        let e = Matrix::identity(2);
        let err = amortized_mle_loss(&e, &e, 1.0, &[0.0, -800.0], &[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref m) if m.contains("(1, ")), "{err}");
    }

    #[test]
    fn equivalence_holds() {
        let a = unit_batch(7, 4, 8);
        let b = unit_batch(8, 4, 8);
        assert!(mle_gradient_equivalence_check(&a, &b, 1.0).unwrap() < 1e-10);
        let e = Matrix::from_rows(&vec![vec![1.0, 0.0]; 4]).unwrap();
        assert!(mle_gradient_equivalence_check(&e, &e, 1.0).unwrap() < 1e-10);
        let a = unit_batch(9, 8, 8);
        let b = unit_batch(10, 8, 8);
        assert!(mle_gradient_equivalence_check(&a, &b, 10.0).unwrap() < 1e-8);
    }

    #[test]
    fn rescale_examples() {
        let raw = LossOutput {
            value: 0.0,
            grad_a: Matrix::filled(1, 2, 2.6),
            grad_b: Matrix::zeros(1, 2),
            tau_grad: 0.0,
        };
        let out = temperature_rescale(&raw, 13.0, 6.5).unwrap();
        assert!((out.value - 0.5).abs() < 1e-15);
        assert!((out.tau_grad + 6.5 / 169.0).abs() < 1e-15);
        assert!((out.grad_a[(0, 0)] - 0.2).abs() < 1e-15);
        let raw = LossOutput { value: 3.0, ..raw };
        let out = temperature_rescale(&raw, 2.0, 0.0).unwrap();
        assert_eq!(out.value, 1.5);
    }

    #[test]
    fn rescaled_pipeline_matches_finite_differences() {
        let a = unit_batch(11, 4, 5);
        let b = unit_batch(12, 4, 5);
        let (tau, rho) = (3.0, 6.5);
        let out = temperature_rescale(&nce_loss(&a, &b, tau).unwrap(), tau, rho).unwrap();
        // Stop-gradient: the divisor stays at the evaluation point.
        check_grads(&a, &b, tau, &out, |a, b, t| {
            nce_loss(a, b, t).unwrap().value / tau + rho / t
        });
    }

    #[test]
    fn rho_schedule_boundaries() {
        let s = RhoSchedule::default();
        assert_eq!(rho_at(22, 30, &s).unwrap(), 6.5);
        assert_eq!(rho_at(23, 30, &s).unwrap(), -8.0);
        let never = RhoSchedule { anneal_start_fraction: 1.0, ..s };
        assert!((1..=30).all(|e| rho_at(e, 30, &never).unwrap() == 6.5));
        assert!(rho_at(0, 30, &s).is_err());
    }

    proptest! {
        #[test]
        fn nce_invariant_under_pair_permutation(seed in 0u64..1000, shift in 1usize..5) {
            let a = unit_batch(seed, 5, 3);
            let b = unit_batch(seed + 5000, 5, 3);
            let perm: Vec<usize> = (0..5).map(|i| (i + shift) % 5).collect();
            let v = nce_loss(&a, &b, 2.0).unwrap().value;
            let vp = nce_loss(&a.select_rows(&perm), &b.select_rows(&perm), 2.0).unwrap().value;
            prop_assert!((v - vp).abs() < 1e-12);
        }

        #[test]
        fn amortized_mle_pairs_partition(seed in 0u64..1000, split in 0usize..36) {
            let a = unit_batch(seed, 6, 3);
            let b = unit_batch(seed + 9000, 6, 3);
            let la: Vec<f64> = (0..6).map(|i| 0.1 * i as f64).collect();
            let lb: Vec<f64> = (0..6).map(|i| 0.5 - 0.05 * i as f64).collect();
            let full = amortized_mle_loss(&a, &b, 2.0, &la, &lb).unwrap().value;
            let pairs: Vec<(usize, usize)> = (0..6).flat_map(|i| (0..6).map(move |j| (i, j))).collect();
            let (left, right) = pairs.split_at(split);
            let parts = amortized_mle_pairs(&a, &b, 2.0, &la, &lb, left).unwrap()
                + amortized_mle_pairs(&a, &b, 2.0, &la, &lb, right).unwrap();
            prop_assert!((parts - full).abs() < 1e-12);
        }
    }
}
