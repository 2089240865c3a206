//! Partition-function amortization.
//!
//! The exact in-batch partition of a sample `x_l` is the mean of
//! `exp(τ s(x_l, x_l'^j))` over the other modality. A small MLP per modality
//! predicts its logarithm, `log λ = MLP(ψ_l(x_l))`, and is trained against
//! a (possibly target-smoothed) exact value with either an f-divergence
//! objective or the squared log-gap. All partition values live in log space.

use serde::{Deserialize, Serialize};

use crate::encoders::Modality;
use crate::error::{Error, Result};
use crate::mlp::Mlp;
use crate::numerics::{logsumexp, Matrix, OptimizerState, ParamBlock};

/// Per-sample partition values for one modality, in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionEstimate {
    /// `log Z̃` of each sample from the current batch alone.
    pub log_z_exact: Vec<f64>,
    /// Target after blending with the previous-epoch amortizer; equals
    /// `log_z_exact` until [`combined_target`] is applied.
    pub log_z_combined: Vec<f64>,
    pub tau_snapshot: f64,
    pub includes_positive: bool,
}

/// `log Z̃_i = logsumexp_j(τ S[i][j]) − log(count)`, where row `i` of `sims`
/// holds sample `i` of modality `l` against every sample of `l'`. Without
/// positives the diagonal term is skipped and `count = n − 1`.
pub fn exact_partition_from_sims(
    sims: &Matrix,
    tau: f64,
    include_positive: bool,
) -> Result<PartitionEstimate> {
    let n = sims.rows();
    if n == 0 || sims.cols() != n {
        return Err(Error::contract(format!(
            "partition needs a square similarity matrix, got {:?}",
            sims.shape()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::domain(format!("tau must be positive, got {tau}")));
    }
    if !include_positive && n == 1 {
        return Err(Error::Degenerate(
            "a single-sample batch has no negatives to form a partition".into(),
        ));
    }
    let count = if include_positive { n } else { n - 1 } as f64;
    let mut log_z = Vec::with_capacity(n);
    let mut logits = Vec::with_capacity(n);
    for i in 0..n {
        logits.clear();
        logits.extend(
            sims.row(i)
                .iter()
                .enumerate()
                .filter(|&(j, _)| include_positive || j != i)
                .map(|(_, s)| tau * s),
        );
        log_z.push(logsumexp(&logits)? - count.ln());
    }
    Ok(PartitionEstimate {
        log_z_combined: log_z.clone(),
        log_z_exact: log_z,
        tau_snapshot: tau,
        includes_positive: include_positive,
    })
}

/// Exact in-batch partition of each row of `emb_l` against `emb_lp`.
pub fn exact_partition(
    emb_l: &Matrix,
    emb_lp: &Matrix,
    tau: f64,
    include_positive: bool,
) -> Result<PartitionEstimate> {
    if emb_l.shape() != emb_lp.shape() {
        return Err(Error::contract(format!(
            "partition needs matching batches, got {:?} and {:?}",
            emb_l.shape(),
            emb_lp.shape()
        )));
    }
    exact_partition_from_sims(&emb_l.matmul_transposed(emb_lp)?, tau, include_positive)
}

/// Cosine-ramped weight of the previous-epoch target: `β_T − β_T(1 + cos(πt/T))/2`.
pub fn beta_schedule(t: usize, total: usize, beta_t_max: f64) -> Result<f64> {
    if total == 0 || t > total {
        return Err(Error::domain(format!("epoch {t} outside [0, {total}]")));
    }
    if !(0.0..=1.0).contains(&beta_t_max) {
        return Err(Error::domain(format!("beta_T must lie in [0, 1], got {beta_t_max}")));
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    Ok(beta_t_max - 0.5 * beta_t_max * (1.0 + phase.cos()))
}

/// `log(β·exp(a) + (1 − β)·exp(b))` per sample, with `a` the frozen target's
/// prediction and `b` the exact value. The endpoints are returned verbatim.
pub fn combined_target(log_z_exact: &[f64], log_prev_pred: &[f64], beta: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::domain(format!("beta must lie in [0, 1], got {beta}")));
    }
    if log_z_exact.len() != log_prev_pred.len() {
        return Err(Error::contract(format!(
            "combined target length mismatch: {} vs {}",
            log_z_exact.len(),
            log_prev_pred.len()
        )));
    }
    if beta == 0.0 {
        return Ok(log_z_exact.to_vec());
    }
    if beta == 1.0 {
        return Ok(log_prev_pred.to_vec());
    }
    Ok(log_z_exact
        .iter()
        .zip(log_prev_pred)
        .map(|(&b, &a)| {
            if a == b {
                return a;
            }
            let m = a.max(b);
            m + (beta * (a - m).exp() + (1.0 - beta) * (b - m).exp()).ln()
        })
        .collect())
}

/// Hidden width `⌈f_d · d⌉` of an amortizer.
pub fn amortizer_hidden(embed_dim: usize, dim_factor: f64) -> usize {
    ((dim_factor * embed_dim as f64).ceil() as usize).max(1)
}

/// Online amortizers, one three-layer network `d → h → h → 1` per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct AmortizerParams {
    pub image: Mlp,
    pub text: Mlp,
}

impl AmortizerParams {
    pub fn new(prefix: &str, embed_dim: usize, dim_factor: f64, seed: u64) -> Result<Self> {
        if !(dim_factor > 0.0) {
            return Err(Error::Config(format!("dimension factor must be positive, got {dim_factor}")));
        }
        let h = amortizer_hidden(embed_dim, dim_factor);
        let widths = [embed_dim, h, h, 1];
        Ok(Self {
            image: Mlp::new(&format!("{prefix}.image"), &widths, seed)?,
            text: Mlp::new(&format!("{prefix}.text"), &widths, seed)?,
        })
    }

    pub fn net(&self, modality: Modality) -> &Mlp {
        match modality {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    pub fn net_mut(&mut self, modality: Modality) -> &mut Mlp {
        match modality {
            Modality::Image => &mut self.image,
            Modality::Text => &mut self.text,
        }
    }

    pub fn blocks(&self) -> impl Iterator<Item = &ParamBlock> {
        self.image.blocks().chain(self.text.blocks())
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut ParamBlock> {
        self.image.blocks_mut().chain(self.text.blocks_mut())
    }

    pub fn copy_values_from(&mut self, other: &AmortizerParams) -> Result<()> {
        self.image.copy_values_from(&other.image)?;
        self.text.copy_values_from(&other.text)
    }
}

/// EMA copy of the online amortizers for the current epoch plus the frozen
/// copy from the end of the previous epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetAmortizer {
    pub ema: AmortizerParams,
    pub prev_epoch: AmortizerParams,
    pub alpha: f64,
}

impl TargetAmortizer {
    /// Both copies start as the online networks.
    pub fn from_online(online: &AmortizerParams, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::domain(format!("EMA decay must lie in [0, 1], got {alpha}")));
        }
        let ema = AmortizerParams {
            image: online.image.clone().renamed("amortizer.target.image"),
            text: online.text.clone().renamed("amortizer.target.text"),
        };
        let prev = AmortizerParams {
            image: online.image.clone().renamed("amortizer.prev.image"),
            text: online.text.clone().renamed("amortizer.prev.text"),
        };
        Ok(Self {
            ema,
            prev_epoch: prev,
            alpha,
        })
    }

    /// Epoch boundary: the previous-epoch copy takes the current EMA values.
    pub fn rotate(&mut self) -> Result<()> {
        self.prev_epoch.copy_values_from(&self.ema)
    }
}

/// `log λ` for every row of `emb`.
pub fn amortize_forward(net: &Mlp, emb: &Matrix) -> Result<Vec<f64>> {
    if net.output_dim() != 1 {
        return Err(Error::contract("amortizer must output a single scalar"));
    }
    Ok(net.predict(emb)?.into_vec())
}

/// `θ̂ ← α θ̂ + (1 − α) θ` for every parameter entry.
pub fn ema_update(target: &mut Mlp, online: &Mlp, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::domain(format!("EMA decay must lie in [0, 1], got {alpha}")));
    }
    target.check_same_shape(online)?;
    for (t, o) in target.blocks_mut().zip(online.blocks()) {
        for (tv, ov) in t.value.as_mut_slice().iter_mut().zip(o.value.as_slice()) {
            *tv = alpha * *tv + (1.0 - alpha) * ov;
        }
    }
    Ok(())
}

/// Convex generator `f` of an f-divergence, evaluated at `t = Z̃ / λ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceGenerator {
    /// `t ln t`, evaluated literally on the unnormalized model; its minimum over
    /// a uniform scale `λ = c Z̃` sits at `c = e`.
    Kl,
    /// `t ln t − t + 1`: same divergence between normalized distributions,
    /// nonnegative, minimized at `λ = Z̃`.
    KlAffine,
    /// `½(t ln t − (t + 1) ln((t + 1)/2))`.
    Js,
    /// `½ (ln t)²`.
    L2log,
}

impl DivergenceGenerator {
    pub const ALL: [DivergenceGenerator; 4] = [
        DivergenceGenerator::Kl,
        DivergenceGenerator::KlAffine,
        DivergenceGenerator::Js,
        DivergenceGenerator::L2log,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DivergenceGenerator::Kl => "kl",
            DivergenceGenerator::KlAffine => "kl_affine",
            DivergenceGenerator::Js => "js",
            DivergenceGenerator::L2log => "l2log",
        }
    }

    pub fn f(self, t: f64) -> f64 {
        match self {
            DivergenceGenerator::Kl => t * t.ln(),
            DivergenceGenerator::KlAffine => t * t.ln() - t + 1.0,
            DivergenceGenerator::Js => 0.5 * (t * t.ln() - (t + 1.0) * ((t + 1.0) / 2.0).ln()),
            DivergenceGenerator::L2log => 0.5 * t.ln().powi(2),
        }
    }

    pub fn f_prime(self, t: f64) -> f64 {
        match self {
            DivergenceGenerator::Kl => t.ln() + 1.0,
            DivergenceGenerator::KlAffine => t.ln(),
            DivergenceGenerator::Js => 0.5 * (2.0 * t / (t + 1.0)).ln(),
            DivergenceGenerator::L2log => t.ln() / t,
        }
    }
}

/// Importance weights `w[i][j] = exp(τ S[i][j] − log Z̃_i)` of the double
/// empirical expectation.
pub fn fdiv_weights(sims: &Matrix, tau: f64, log_z_target: &[f64]) -> Result<Matrix> {
    if sims.rows() != log_z_target.len() {
        return Err(Error::contract(format!(
            "{} targets for {} rows",
            log_z_target.len(),
            sims.rows()
        )));
    }
    let mut w = Matrix::zeros(sims.rows(), sims.cols());
    for i in 0..sims.rows() {
        for j in 0..sims.cols() {
            w[(i, j)] = (tau * sims[(i, j)] - log_z_target[i]).exp();
        }
    }
    Ok(w)
}

/// f-divergence objective as a function of `log λ`. Returns the loss and its
/// gradient with respect to each `log λ_i`.
pub fn fdiv_loss_from_log_lambda(
    log_lambda: &[f64],
    log_z_target: &[f64],
    gen: DivergenceGenerator,
    weights: &Matrix,
) -> Result<(f64, Vec<f64>)> {
    let n = log_lambda.len();
    if log_z_target.len() != n || weights.rows() != n || n == 0 {
        return Err(Error::contract(format!(
            "f-div inputs disagree: {n} predictions, {} targets, {} weight rows",
            log_z_target.len(),
            weights.rows()
        )));
    }
    let norm = 1.0 / (n * weights.cols()) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n);
    for i in 0..n {
        let ratio = (log_z_target[i] - log_lambda[i]).exp();
        let f = gen.f(ratio);
        let fp = gen.f_prime(ratio);
        if !ratio.is_finite() || ratio == 0.0 || !f.is_finite() || !fp.is_finite() {
            return Err(Error::NonFinite(format!(
                "f-div ratio Z/λ = {ratio:e} at sample {i} (log λ = {}, log Z = {})",
                log_lambda[i], log_z_target[i]
            )));
        }
        let row_weight = weights.row(i).iter().sum::<f64>();
        loss += row_weight * f;
        // d ratio / d log λ = −ratio.
        grad.push(-norm * row_weight * fp * ratio);
    }
    Ok((loss * norm, grad))
}

/// Squared log-gap `(1/2n) Σ (log λ_i − log Z̃_i)²` and its gradient.
pub fn l2log_loss_from_log_lambda(log_lambda: &[f64], log_z_target: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = log_lambda.len();
    if n == 0 || log_z_target.len() != n {
        return Err(Error::contract(format!(
            "l2-log inputs disagree: {n} predictions, {} targets",
            log_z_target.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (ll, lz) in log_lambda.iter().zip(log_z_target) {
        let gap = ll - lz;
        loss += gap * gap;
        grad.push(gap / n as f64);
    }
    Ok((0.5 * loss / n as f64, grad))
}

fn backprop_log_lambda(net: &mut Mlp, emb: &Matrix, dlog_lambda: &[f64]) -> Result<()> {
    let (_, cache) = net.forward(emb)?;
    let g = Matrix::from_vec(dlog_lambda.len(), 1, dlog_lambda.to_vec())?;
    net.backward(&cache, &g)?;
    Ok(())
}

/// f-divergence amortization loss for one modality. Embeddings, `τ` and the
/// targets are constants; gradients accumulate into `net` only.
pub fn loss_fdiv(
    net: &mut Mlp,
    emb_l: &Matrix,
    log_z_target: &[f64],
    gen: DivergenceGenerator,
    weights: &Matrix,
) -> Result<f64> {
    let log_lambda = amortize_forward(net, emb_l)?;
    let (loss, grad) = fdiv_loss_from_log_lambda(&log_lambda, log_z_target, gen, weights)?;
    backprop_log_lambda(net, emb_l, &grad)?;
    Ok(loss)
}

/// Squared log-gap amortization loss for one modality; gradients accumulate into `net`.
pub fn loss_l2log(net: &mut Mlp, emb_l: &Matrix, log_z_target: &[f64]) -> Result<f64> {
    for (i, v) in log_z_target.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("log Z target {v} at sample {i}")));
        }
    }
    let log_lambda = amortize_forward(net, emb_l)?;
    let (loss, grad) = l2log_loss_from_log_lambda(&log_lambda, log_z_target)?;
    backprop_log_lambda(net, emb_l, &grad)?;
    Ok(loss)
}

/// Objective used in the amortization stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    L2log,
    Fdiv,
}

/// Inputs of one amortization stage for one modality.
pub struct AmortizationBatch<'a> {
    pub emb: &'a Matrix,
    /// Similarities oriented so row `i` is sample `i` of this modality.
    pub sims: &'a Matrix,
    pub tau: f64,
    pub log_z_target: &'a [f64],
}

/// Runs `iters` Adam steps on one modality's online amortizer against fixed
/// targets and returns the loss before the last step.
pub fn optimize_amortizer(
    net: &mut Mlp,
    opt: &mut OptimizerState,
    batch: &AmortizationBatch<'_>,
    objective: Objective,
    gen: DivergenceGenerator,
    iters: usize,
) -> Result<f64> {
    let weights = match objective {
        Objective::Fdiv => Some(fdiv_weights(batch.sims, batch.tau, batch.log_z_target)?),
        Objective::L2log => None,
    };
    let mut last = f64::NAN;
    for _ in 0..iters {
        net.zero_grad();
        last = match &weights {
            Some(w) => loss_fdiv(net, batch.emb, batch.log_z_target, gen, w)?,
            None => loss_l2log(net, batch.emb, batch.log_z_target)?,
        };
        let mut blocks: Vec<&mut ParamBlock> = net.blocks_mut().collect();
        opt.step(&mut blocks)?;
    }
    Ok(last)
}
