//! Random Fourier features for the exponentiated-similarity kernel.
//!
//! For unit vectors `u1, u2`, `exp(τ u1ᵀu2) = exp(τ) · exp(−τ‖u1 − u2‖²/2)`,
//! and the Gaussian factor is `E_ω[cos(√τ ωᵀ(u1 − u2))]` for `ω ~ N(0, I)`.
//! With `φ_ω(u) = exp(i√τ ωᵀu) exp(τ/2)` the partition function becomes a
//! single inner product between `φ(u)` and the mean conjugate feature of the
//! other modality. Only the real part is kept; the `exp(τ)` prefactor is
//! applied analytically.
//!
//! The estimator variance grows like `exp(2τ)`, so it is only validated for
//! `τ ≤ MAX_VALIDATED_TAU`. It explains why a per-sample function can carry
//! the partition function; it is not used during training.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, rng, Matrix};

pub const MAX_VALIDATED_TAU: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RandomFeatureMap {
    /// `M × d` standard normal draws.
    pub omegas: Matrix,
    pub tau: f64,
    pub seed: u64,
}

/// Monte-Carlo estimate with its empirical standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub std_err: f64,
}

pub fn sample_features(m: usize, d: usize, tau: f64, seed: u64) -> Result<RandomFeatureMap> {
    if m == 0 || d == 0 {
        return Err(Error::domain(format!("feature map needs M ≥ 1 and d ≥ 1, got M={m}, d={d}")));
    }
    if !(tau > 0.0) {
        return Err(Error::domain(format!("tau must be positive, got {tau}")));
    }
    let mut r = rng::seeded(seed, rng::stream_id("spectral", &[]));
    Ok(RandomFeatureMap {
        omegas: rng::normal_matrix(&mut r, m, d, 1.0),
        tau,
        seed,
    })
}

impl RandomFeatureMap {
    pub fn num_features(&self) -> usize {
        self.omegas.rows()
    }

    pub fn dim(&self) -> usize {
        self.omegas.cols()
    }

    fn check_unit(&self, u: &[f64], what: &str) -> Result<()> {
        if u.len() != self.dim() {
            return Err(Error::contract(format!(
                "{what} has dim {}, feature map has {}",
                u.len(),
                self.dim()
            )));
        }
        let n = norm(u);
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!("{what} must be unit norm, got {n}")));
        }
        Ok(())
    }

    /// Phases `√τ ωᵀx` for every feature.
    fn phases(&self, x: &[f64]) -> Vec<f64> {
        let s = self.tau.sqrt();
        (0..self.num_features())
            .map(|m| s * dot(self.omegas.row(m), x))
            .collect()
    }

    /// Complex features `φ_ω(u)` without the `exp(τ/2)` factor.
    fn features(&self, u: &[f64]) -> Vec<Complex64> {
        self.phases(u)
            .into_iter()
            .map(|p| Complex64::from_polar(1.0, p))
            .collect()
    }
}

/// Sample mean and standard error of `terms`, both multiplied by `scale`.
fn summarize(terms: &[f64], scale: f64) -> McEstimate {
    let m = terms.len() as f64;
    let mean = terms.iter().sum::<f64>() / m;
    let var = if terms.len() > 1 {
        terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    McEstimate {
        value: scale * mean,
        std_err: scale * (var / m).sqrt(),
    }
}

/// Unbiased estimate of `exp(τ u1ᵀu2)` as `exp(τ) · mean_m cos(√τ ω_mᵀ(u1 − u2))`.
pub fn kernel_estimate(u1: &[f64], u2: &[f64], map: &RandomFeatureMap) -> Result<McEstimate> {
    map.check_unit(u1, "u1")?;
    map.check_unit(u2, "u2")?;
    let delta: Vec<f64> = u1.iter().zip(u2).map(|(a, b)| a - b).collect();
    let terms: Vec<f64> = map.phases(&delta).into_iter().map(f64::cos).collect();
    Ok(summarize(&terms, map.tau.exp()))
}

/// Mean of `sin(√τ ωᵀ(u1 − u2))`; vanishes in expectation because ω is symmetric.
pub fn imaginary_part_mean(u1: &[f64], u2: &[f64], map: &RandomFeatureMap) -> Result<f64> {
    map.check_unit(u1, "u1")?;
    map.check_unit(u2, "u2")?;
    let delta: Vec<f64> = u1.iter().zip(u2).map(|(a, b)| a - b).collect();
    let phases = map.phases(&delta);
    Ok(phases.iter().map(|p| p.sin()).sum::<f64>() / phases.len() as f64)
}

/// Estimates the batch partition `(1/n) Σ_j exp(τ uᵀψ_j)` through one inner
/// product between `φ(u)` and the mean conjugate feature of `others`.
pub fn partition_estimate_mc(
    u: &[f64],
    others: &Matrix,
    map: &RandomFeatureMap,
) -> Result<McEstimate> {
    if others.rows() == 0 {
        return Err(Error::domain("partition estimate needs at least one sample"));
    }
    map.check_unit(u, "u")?;
    for j in 0..others.rows() {
        map.check_unit(others.row(j), "other sample")?;
    }
    let v = mean_conjugate_feature(others, map);
    let terms: Vec<f64> = map
        .features(u)
        .into_iter()
        .zip(&v)
        .map(|(phi, vm)| (phi * vm).re)
        .collect();
    Ok(summarize(&terms, map.tau.exp()))
}

/// `v_m = (1/n) Σ_j conj(φ_m(ψ_j))`, without the `exp(τ/2)` factor.
pub fn mean_conjugate_feature(others: &Matrix, map: &RandomFeatureMap) -> Vec<Complex64> {
    let n = others.rows() as f64;
    let mut v = vec![Complex64::new(0.0, 0.0); map.num_features()];
    for j in 0..others.rows() {
        for (acc, f) in v.iter_mut().zip(map.features(others.row(j))) {
            *acc += f.conj();
        }
    }
    v.iter_mut().for_each(|x| *x /= n);
    v
}
