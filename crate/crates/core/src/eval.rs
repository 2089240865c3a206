//! Retrieval, zero-shot classification and amortizer-quality metrics on the
//! held-out slice.

use serde::{Deserialize, Serialize};

use crate::amortization::{amortize_forward, exact_partition};
use crate::data::PairedDataset;
use crate::encoders::{encode, Modality};
use crate::error::{Error, Result};
use crate::numerics::{dot, mean, median, Matrix};
use crate::trainer::EvalModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall_at_1_a2b: f64,
    pub recall_at_1_b2a: f64,
    pub recall_at_5_a2b: f64,
    pub recall_at_5_b2a: f64,
    pub zero_shot_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub median_abs_log_z_err: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_abs_log_z_err: Option<f64>,
    pub n_eval: usize,
}

/// Fraction of queries `a_i` whose partner `b_i` is among the `k` most
/// similar rows of `b`. Ties rank the lower index first.
pub fn recall_at_k(a: &Matrix, b: &Matrix, k: usize) -> Result<f64> {
    let m = a.rows();
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "recall needs equal shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if k == 0 || k > m {
        return Err(Error::Config(format!("recall@{k} needs 1 ≤ k ≤ {m}")));
    }
    let sims = a.matmul_transposed(b)?;
    let hits = (0..m)
        .filter(|&i| {
            let row = sims.row(i);
            let s = row[i];
            let rank = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > s || (v == s && j < i))
                .count();
            rank < k
        })
        .count();
    Ok(hits as f64 / m as f64)
}

/// Index of the largest entry; ties go to the lower index.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = j;
        }
    }
    best
}

/// Normalized per-class mean of `emb`. Classes with no samples get a zero row,
/// which never wins against a populated class with positive similarity.
pub fn class_prototypes(emb: &Matrix, labels: &[u32], num_classes: usize) -> Result<Matrix> {
    if labels.len() != emb.rows() {
        return Err(Error::contract("one label per embedding row required"));
    }
    let mut protos = Matrix::zeros(num_classes, emb.cols());
    for (i, &c) in labels.iter().enumerate() {
        let c = c as usize;
        if c >= num_classes {
            return Err(Error::contract(format!("label {c} out of range for {num_classes} classes")));
        }
        for (p, x) in protos.row_mut(c).iter_mut().zip(emb.row(i)) {
            *p += x;
        }
    }
    for c in 0..num_classes {
        let row = protos.row_mut(c);
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
    Ok(protos)
}

/// Fraction of samples whose most similar prototype is their label.
pub fn zero_shot_accuracy(samples: &Matrix, prototypes: &Matrix, labels: &[u32]) -> Result<f64> {
    let c = prototypes.rows();
    if c < 2 {
        return Err(Error::Config(format!("zero-shot needs at least 2 classes, got {c}")));
    }
    if labels.len() != samples.rows() || samples.rows() == 0 {
        return Err(Error::contract("one label per sample required, and at least one sample"));
    }
    if prototypes.cols() != samples.cols() {
        return Err(Error::contract("prototype and sample dims differ"));
    }
    let mut correct = 0;
    for (i, &y) in labels.iter().enumerate() {
        if y as usize >= c {
            return Err(Error::contract(format!("label {y} out of range for {c} classes")));
        }
        let scores: Vec<f64> = (0..c).map(|k| dot(samples.row(i), prototypes.row(k))).collect();
        if argmax(&scores) == y as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Median and mean of `|log λ − log Z̃|`.
pub fn log_gap_stats(log_lambda: &[f64], log_z: &[f64]) -> Result<(f64, f64)> {
    if log_lambda.len() != log_z.len() || log_z.is_empty() {
        return Err(Error::contract("log-gap statistics need equal, non-empty vectors"));
    }
    let gaps: Vec<f64> = log_lambda.iter().zip(log_z).map(|(l, z)| (l - z).abs()).collect();
    Ok((median(&gaps).expect("non-empty"), mean(&gaps)))
}

/// Embeds both modalities of `ds`.
pub fn embed_dataset(model: &EvalModel, ds: &PairedDataset) -> Result<(Matrix, Matrix)> {
    for (m, name, want) in [
        (Modality::Image, "encoder.image.0.weight", ds.dim_a()),
        (Modality::Text, "encoder.text.0.weight", ds.dim_b()),
    ] {
        let have = model.encoders.net(m).input_dim();
        if have != want {
            return Err(Error::Contract(format!(
                "block '{name}' expects input dim {have}, data has {want}"
            )));
        }
    }
    let (a, _) = encode(&model.encoders, &ds.mod_a, Modality::Image)?;
    let (b, _) = encode(&model.encoders, &ds.mod_b, Modality::Text)?;
    Ok((a.matrix().clone(), b.matrix().clone()))
}

/// Gap between the target amortizers and the exact partition over the whole
/// slice, pooled over both modalities. `None` for models without amortizers.
pub fn partition_error(model: &EvalModel, slice: &PairedDataset) -> Result<Option<(f64, f64)>> {
    let Some(am) = &model.amortizer else {
        return Ok(None);
    };
    let (a, b) = embed_dataset(model, slice)?;
    partition_error_embedded(model, am, &a, &b).map(Some)
}

fn partition_error_embedded(
    model: &EvalModel,
    am: &crate::amortization::AmortizerParams,
    a: &Matrix,
    b: &Matrix,
) -> Result<(f64, f64)> {
    let tau = model.temperature.tau();
    let mut log_lambda = amortize_forward(&am.image, a)?;
    log_lambda.extend(amortize_forward(&am.text, b)?);
    let mut log_z = exact_partition(a, b, tau, true)?.log_z_exact;
    log_z.extend(exact_partition(b, a, tau, true)?.log_z_exact);
    log_gap_stats(&log_lambda, &log_z)
}

/// Full report on `slice`, which should be the held-out evaluation split.
pub fn evaluate_slice(model: &EvalModel, slice: &PairedDataset) -> Result<EvalReport> {
    let (a, b) = embed_dataset(model, slice)?;
    let k5 = 5.min(slice.len());
    let protos = class_prototypes(&b, &slice.labels, slice.num_classes)?;
    let partition = match &model.amortizer {
        Some(am) => Some(partition_error_embedded(model, am, &a, &b)?),
        None => None,
    };
    Ok(EvalReport {
        recall_at_1_a2b: recall_at_k(&a, &b, 1)?,
        recall_at_1_b2a: recall_at_k(&b, &a, 1)?,
        recall_at_5_a2b: recall_at_k(&a, &b, k5)?,
        recall_at_5_b2a: recall_at_k(&b, &a, k5)?,
        zero_shot_accuracy: zero_shot_accuracy(&a, &protos, &slice.labels)?,
        median_abs_log_z_err: partition.map(|p| p.0),
        mean_abs_log_z_err: partition.map(|p| p.1),
        n_eval: slice.len(),
    })
}

/// Splits `data` the same way training did and reports on the held-out part.
pub fn evaluate(model: &EvalModel, data: &PairedDataset) -> Result<EvalReport> {
    let (_, eval) = data.split(model.eval_fraction, model.seed)?;
    evaluate_slice(model, &eval)
}
