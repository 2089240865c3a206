//! Self-contained verification suites behind `amorlip verify`.
//!
//! Each suite returns one [`CheckResult`] per check. A check passes when its
//! value is finite and within tolerance (the comparison direction is part of
//! the check).

use std::str::FromStr;

use rand::Rng;
use serde::Serialize;

use crate::amortization::{
    amortize_forward, beta_schedule, ema_update, exact_partition, fdiv_weights, loss_fdiv, loss_l2log,
    DivergenceGenerator,
};
use crate::encoders::{encode, encoder_backward, EncoderParams, EncoderShape, Modality};
use crate::error::{Error, Result};
use crate::losses::{
    amortized_mle_loss, mle_gradient_equivalence_check, nce_loss, rho_at, temperature_rescale, RhoSchedule,
};
use crate::mlp::Mlp;
use crate::numerics::{
    finite_difference_gradient, l2_normalize_rows, relative_error, rng, rng::SeededRng, Matrix,
};
use crate::spectral::{kernel_estimate, partition_estimate_mc, sample_features, RandomFeatureMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub check: String,
    pub status: Status,
    pub value: f64,
    pub tolerance: f64,
}

impl CheckResult {
    /// Passes iff `value ≤ tolerance`.
    pub fn at_most(check: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self::new(check, value, tolerance, value <= tolerance)
    }

    /// Passes iff `value < tolerance`.
    pub fn below(check: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self::new(check, value, tolerance, value < tolerance)
    }

    /// Passes iff `value ≥ tolerance`.
    pub fn at_least(check: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self::new(check, value, tolerance, value >= tolerance)
    }

    fn new(check: impl Into<String>, value: f64, tolerance: f64, ok: bool) -> Self {
        Self {
            check: check.into(),
            status: if ok && value.is_finite() { Status::Pass } else { Status::Fail },
            value,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Gradcheck,
    Spectral,
    Schedules,
    Equivalence,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradcheck" => Ok(Suite::Gradcheck),
            "spectral" => Ok(Suite::Spectral),
            "schedules" => Ok(Suite::Schedules),
            "equivalence" => Ok(Suite::Equivalence),
            other => Err(Error::Config(format!(
                "unknown suite '{other}' (expected gradcheck, spectral, schedules or equivalence)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    /// Random features per map in the spectral suite.
    pub features: usize,
    /// Seeded repetitions for Monte-Carlo coverage checks.
    pub trials: usize,
    /// Random instances per gradient / equivalence check.
    pub instances: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            features: 200_000,
            trials: 100,
            instances: 20,
            seed: 0,
        }
    }
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    match suite {
        Suite::Gradcheck => gradcheck_suite(opts.instances, opts.seed),
        Suite::Spectral => spectral_suite(opts),
        Suite::Schedules => schedules_suite(),
        Suite::Equivalence => equivalence_suite(opts.instances, opts.seed),
    }
}

pub const GRAD_TOLERANCE: f64 = 1e-5;
const FD_STEP: f64 = 1e-6;

fn unit_rows(r: &mut SeededRng, n: usize, d: usize) -> Result<Matrix> {
    Ok(l2_normalize_rows(&rng::normal_matrix(r, n, d, 1.0))?.0)
}

fn mat(rows: usize, cols: usize, x: &[f64]) -> Matrix {
    Matrix::from_vec(rows, cols, x.to_vec()).expect("probe length matches shape")
}

/// Worst relative error of an embedding-space loss `f(a, b, τ)` against
/// central differences in `a`, `b` and `τ`.
fn embedding_loss_error<F>(a: &Matrix, b: &Matrix, tau: f64, analytic: [&[f64]; 3], f: F) -> Result<f64>
where
    F: Fn(&Matrix, &Matrix, f64) -> f64,
{
    let (n, d) = a.shape();
    let ga = finite_difference_gradient(|x| f(&mat(n, d, x), b, tau), a.as_slice(), FD_STEP)?;
    let gb = finite_difference_gradient(|x| f(a, &mat(n, d, x), tau), b.as_slice(), FD_STEP)?;
    let gt = finite_difference_gradient(|x| f(a, b, x[0]), &[tau], FD_STEP)?;
    Ok(relative_error(analytic[0], &ga)
        .max(relative_error(analytic[1], &gb))
        .max(relative_error(analytic[2], &gt)))
}

/// Relative error of the parameter gradient accumulated by `loss` on `net`.
fn network_error<F>(net: &Mlp, loss: F) -> Result<f64>
where
    F: Fn(&mut Mlp) -> Result<f64>,
{
    let mut work = net.clone();
    work.zero_grad();
    loss(&mut work)?;
    let analytic = work.flat_grads();
    let fd = finite_difference_gradient(
        |x| {
            let mut probe = net.clone();
            probe.set_flat_params(x).expect("same parameter count");
            loss(&mut probe).unwrap_or(f64::NAN)
        },
        &net.flat_params(),
        FD_STEP,
    )?;
    Ok(relative_error(&analytic, &fd))
}

/// Analytic versus finite-difference gradients for every differentiable
/// operation, on `instances` seeded random problems each (n ≤ 8, d ≤ 16).
pub fn gradcheck_suite(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut record = |name: &str, err: f64| match worst.iter_mut().find(|(n, _)| n == name) {
        Some((_, w)) => *w = w.max(err),
        None => worst.push((name.to_string(), err)),
    };
    for inst in 0..instances as u64 {
        let mut r = rng::seeded(seed, rng::stream_id("gradcheck", &[inst]));
        let n = r.gen_range(2..=8);
        let d = r.gen_range(2..=16);
        let tau = r.gen_range(0.5..8.0);
        let a = unit_rows(&mut r, n, d)?;
        let b = unit_rows(&mut r, n, d)?;

        let out = nce_loss(&a, &b, tau)?;
        record(
            "nce_loss",
            embedding_loss_error(&a, &b, tau, [out.grad_a.as_slice(), out.grad_b.as_slice(), &[out.tau_grad]], |a, b, t| {
                nce_loss(a, b, t).map_or(f64::NAN, |o| o.value)
            })?,
        );

        let lla: Vec<f64> = (0..n).map(|_| tau * r.gen_range(-0.5..1.0)).collect();
        let llb: Vec<f64> = (0..n).map(|_| tau * r.gen_range(-0.5..1.0)).collect();
        let out = amortized_mle_loss(&a, &b, tau, &lla, &llb)?;
        record(
            "amortized_mle_loss",
            embedding_loss_error(&a, &b, tau, [out.grad_a.as_slice(), out.grad_b.as_slice(), &[out.tau_grad]], |a, b, t| {
                amortized_mle_loss(a, b, t, &lla, &llb).map_or(f64::NAN, |o| o.value)
            })?,
        );

        let rho = r.gen_range(-8.0..8.0);
        let raw = nce_loss(&a, &b, tau)?;
        let out = temperature_rescale(&raw, tau, rho)?;
        record(
            "temperature_rescale",
            embedding_loss_error(&a, &b, tau, [out.grad_a.as_slice(), out.grad_b.as_slice(), &[out.tau_grad]], |a, b, t| {
                // The divisor is the frozen τ; only the numerator and ρ/τ move.
                nce_loss(a, b, t).map_or(f64::NAN, |o| o.value / tau + rho / t)
            })?,
        );

        let h = r.gen_range(2..=6);
        let net = Mlp::new("check.amortizer", &[d, h, h, 1], seed ^ inst)?;
        let sims = a.matmul_transposed(&b)?;
        let log_z: Vec<f64> = exact_partition(&a, &b, tau, true)?
            .log_z_exact
            .iter()
            .map(|z| z + r.gen_range(-0.5..0.5))
            .collect();
        record("loss_l2log", network_error(&net, |m| loss_l2log(m, &a, &log_z))?);
        let weights = fdiv_weights(&sims, tau, &log_z)?;
        for gen in [DivergenceGenerator::Kl, DivergenceGenerator::KlAffine, DivergenceGenerator::Js, DivergenceGenerator::L2log] {
            record(
                &format!("loss_fdiv.{}", gen.name()),
                network_error(&net, |m| loss_fdiv(m, &a, &log_z, gen, &weights))?,
            );
        }

        let upstream: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        record(
            "amortize_forward",
            network_error(&net, |m| {
                let (y, cache) = m.forward(&a)?;
                m.backward(&cache, &mat(n, 1, &upstream))?;
                Ok(y.as_slice().iter().zip(&upstream).map(|(y, g)| y * g).sum())
            })?,
        );
        // The forward-only path must agree with the cached forward pass.
        let direct = amortize_forward(&net, &a)?;
        let cached = net.forward(&a)?.0.into_vec();
        record("amortize_forward.consistency", relative_error(&direct, &cached));

        let in_dim = r.gen_range(2..=6);
        let shape = EncoderShape {
            input_dim_image: in_dim,
            input_dim_text: in_dim,
            hidden: r.gen_range(2..=6),
            depth: r.gen_range(1..=2),
            embed_dim: d,
        };
        let params = EncoderParams::new(&shape, seed ^ inst)?;
        let x = rng::normal_matrix(&mut r, n, in_dim, 1.0);
        let g = rng::normal_matrix(&mut r, n, d, 1.0);
        let objective = |p: &EncoderParams| -> f64 {
            encode(p, &x, Modality::Image).map_or(f64::NAN, |(e, _)| {
                e.matrix().as_slice().iter().zip(g.as_slice()).map(|(e, g)| e * g).sum()
            })
        };
        let mut work = params.clone();
        work.zero_grad();
        let (_, cache) = encode(&work, &x, Modality::Image)?;
        encoder_backward(&mut work, &cache, &g)?;
        let analytic = work.image.flat_grads();
        let fd = finite_difference_gradient(
            |v| {
                let mut probe = params.clone();
                probe.image.set_flat_params(v).expect("same parameter count");
                objective(&probe)
            },
            &params.image.flat_params(),
            FD_STEP,
        )?;
        record("encoder_backward", relative_error(&analytic, &fd));
    }
    Ok(worst
        .into_iter()
        .map(|(name, err)| CheckResult::below(format!("gradcheck.{name}"), err, GRAD_TOLERANCE))
        .collect())
}

/// Gradient route equivalence: softmax form versus explicit exponentials.
pub fn equivalence_suite(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (tau, tol) in [(1.0, 1e-10), (10.0, 1e-8)] {
        let mut worst = 0.0f64;
        for inst in 0..instances as u64 {
            let mut r = rng::seeded(seed, rng::stream_id("equivalence", &[inst]));
            let a = unit_rows(&mut r, 8, 16)?;
            let b = unit_rows(&mut r, 8, 16)?;
            worst = worst.max(mle_gradient_equivalence_check(&a, &b, tau)?);
        }
        out.push(CheckResult::below(format!("equivalence.tau_{tau}"), worst, tol));
    }
    Ok(out)
}

/// `β_t`, EMA and `ρ` schedule checks.
pub fn schedules_suite() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let (total, beta_max) = (10, 0.8);
    for (t, expected, name) in [(0, 0.0, "start"), (total / 2, beta_max / 2.0, "mid"), (total, beta_max, "end")] {
        let gap = (beta_schedule(t, total, beta_max)? - expected).abs();
        out.push(CheckResult::at_most(format!("beta.{name}"), gap, 0.0));
    }

    for alpha in [0.92, 0.999] {
        let online = Mlp::new("check.ema", &[2, 3, 1], 1)?;
        let mut zero = online.clone();
        zero.set_flat_params(&vec![0.0; online.num_params()])?;
        let mut target = online.clone();
        target.set_flat_params(&vec![1.0; online.num_params()])?;
        let mut worst = 0.0f64;
        for k in 1..=1000 {
            ema_update(&mut target, &zero, alpha)?;
            let expected = alpha.powi(k);
            for v in target.flat_params() {
                worst = worst.max((v - expected).abs() / expected);
            }
        }
        out.push(CheckResult::below(format!("ema.geometric.alpha_{alpha}"), worst, 1e-12));
    }

    let sched = RhoSchedule::default();
    let mut mismatches = 0usize;
    for (total, last_main) in [(30usize, 22usize), (4, 3), (8, 6)] {
        for epoch in 1..=total {
            let expected = if epoch <= last_main { sched.rho_main } else { sched.rho_anneal };
            if rho_at(epoch, total, &sched)? != expected {
                mismatches += 1;
            }
        }
    }
    for (fraction, always) in [(1.0, sched.rho_main), (0.0, sched.rho_anneal)] {
        let s = RhoSchedule { anneal_start_fraction: fraction, ..sched };
        mismatches += (1..=10).filter(|&e| rho_at(e, 10, &s).ok() != Some(always)).count();
    }
    out.push(CheckResult::at_most("rho.boundaries", mismatches as f64, 0.0));
    Ok(out)
}

fn unit_pair(s: f64, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut u1 = vec![0.0; d];
    let mut u2 = vec![0.0; d];
    u1[0] = 1.0;
    u2[0] = s;
    u2[1] = (1.0 - s * s).sqrt();
    (u1, u2)
}

fn with_tau(map: &RandomFeatureMap, tau: f64) -> RandomFeatureMap {
    RandomFeatureMap { tau, ..map.clone() }
}

/// Monte-Carlo checks of the random-feature estimators.
pub fn spectral_suite(opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    const D: usize = 3;
    let taus = [1.0, 2.0, 4.0];
    let sims = [-0.5, 0.0, 0.5, 1.0];
    let m = opts.features;
    let mut out = Vec::new();

    // Coverage of the 3-SE interval, per (τ, s).
    let mut covered = vec![0usize; taus.len() * sims.len()];
    // Relative RMSE at τ = 1, s = 0.5.
    let mut sq_err = 0.0;
    for trial in 0..opts.trials as u64 {
        let base = sample_features(m, D, 1.0, opts.seed.wrapping_add(trial))?;
        for (ti, &tau) in taus.iter().enumerate() {
            let map = with_tau(&base, tau);
            for (si, &s) in sims.iter().enumerate() {
                let (u1, u2) = unit_pair(s, D);
                let est = kernel_estimate(&u1, &u2, &map)?;
                let exact = (tau * s).exp();
                if (est.value - exact).abs() <= 3.0 * est.std_err {
                    covered[ti * sims.len() + si] += 1;
                }
                if tau == 1.0 && s == 0.5 {
                    sq_err += ((est.value - exact) / exact).powi(2);
                }
            }
        }
    }
    let worst = covered.iter().copied().min().unwrap_or(0) as f64 / opts.trials as f64;
    out.push(CheckResult::at_least("spectral.kernel_coverage", worst, 0.95));
    let rel_rmse = (sq_err / opts.trials as f64).sqrt();
    out.push(CheckResult::below("spectral.kernel_precision", rel_rmse, 0.01));

    // Batch partition against the exact value.
    let mut hits = 0usize;
    let mut cases = 0usize;
    for batch in 0..20u64 {
        let mut r = rng::seeded(opts.seed, rng::stream_id("spectral-batch", &[batch]));
        let a = unit_rows(&mut r, 8, D)?;
        let b = unit_rows(&mut r, 8, D)?;
        let base = sample_features(m, D, 1.0, opts.seed ^ (batch + 1) << 20)?;
        for &tau in &taus {
            let exact = exact_partition(&a, &b, tau, true)?.log_z_exact[0].exp();
            let est = partition_estimate_mc(a.row(0), &b, &with_tau(&base, tau))?;
            cases += 1;
            if (est.value - exact).abs() <= 3.0 * est.std_err {
                hits += 1;
            }
        }
    }
    out.push(CheckResult::at_least("spectral.partition_coverage", hits as f64 / cases as f64, 0.95));

    // Quadrupling M should halve the RMSE.
    let small = (m / 16).max(1);
    let rmse = |features: usize| -> Result<f64> {
        let (u1, u2) = unit_pair(0.5, D);
        let mut acc = 0.0;
        for trial in 0..opts.trials as u64 {
            let map = sample_features(features, D, 1.0, opts.seed.wrapping_add(1_000_000 + trial))?;
            acc += (kernel_estimate(&u1, &u2, &map)?.value - 0.5f64.exp()).powi(2);
        }
        Ok((acc / opts.trials as f64).sqrt())
    };
    let ratio = rmse(4 * small)? / rmse(small)?;
    out.push(CheckResult::at_most("spectral.rmse_scaling", (ratio / 0.5 - 1.0).abs(), 0.5));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradcheck_passes_on_few_instances() {
        for c in gradcheck_suite(3, 1).unwrap() {
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn schedules_pass() {
        let checks = schedules_suite().unwrap();
        assert!(checks.iter().all(CheckResult::passed), "{checks:?}");
    }

    #[test]
    fn equivalence_passes() {
        let checks = equivalence_suite(5, 2).unwrap();
        assert!(checks.iter().all(CheckResult::passed), "{checks:?}");
    }

    #[test]
    fn tiny_feature_count_fails() {
        let opts = VerifyOptions {
            features: 10,
            trials: 20,
            ..Default::default()
        };
        let checks = spectral_suite(&opts).unwrap();
        assert!(checks.iter().any(|c| !c.passed()), "{checks:?}");
    }

    #[test]
    fn check_directions() {
        assert!(CheckResult::below("x", 0.5, 1.0).passed());
        assert!(!CheckResult::below("x", 1.0, 1.0).passed());
        assert!(CheckResult::at_most("x", 1.0, 1.0).passed());
        assert!(CheckResult::at_least("x", 1.0, 1.0).passed());
        assert!(!CheckResult::at_most("x", f64::NAN, 1.0).passed());
    }

    #[test]
    fn suite_names_parse() {
        assert_eq!("spectral".parse::<Suite>().unwrap(), Suite::Spectral);
        assert!(matches!("nope".parse::<Suite>(), Err(Error::Config(_))));
    }
}
