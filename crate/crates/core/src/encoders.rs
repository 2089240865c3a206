//! Modality encoders producing unit-norm embeddings in a shared space, and
//! the learnable temperature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{Mlp, MlpCache};
use crate::numerics::{l2_normalize_rows, norm, Matrix, NormalizeBackward, ParamBlock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    /// First modality (`modA` in datasets).
    Image,
    /// Second modality (`modB` in datasets).
    Text,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Image => Modality::Text,
            Modality::Text => Modality::Image,
        }
    }
}

/// Unit-norm embeddings of one modality, tagged with the step that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    emb: Matrix,
    pub modality: Modality,
    pub step: u64,
}

impl EmbeddingBatch {
    /// Normalizes `raw` row-wise.
    pub fn normalized(raw: &Matrix, modality: Modality) -> Result<Self> {
        let (emb, _) = l2_normalize_rows(raw)?;
        Ok(Self {
            emb,
            modality,
            step: 0,
        })
    }

    /// Wraps rows that are already unit norm (checked to 1e-9).
    pub fn from_unit_rows(emb: Matrix, modality: Modality) -> Result<Self> {
        for i in 0..emb.rows() {
            let n = norm(emb.row(i));
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::contract(format!("embedding row {i} has norm {n}")));
            }
        }
        Ok(Self {
            emb,
            modality,
            step: 0,
        })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.emb
    }

    pub fn len(&self) -> usize {
        self.emb.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.emb.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.emb.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.emb.row(i)
    }

    pub fn select(&self, indices: &[usize]) -> EmbeddingBatch {
        EmbeddingBatch {
            emb: self.emb.select_rows(indices),
            modality: self.modality,
            step: self.step,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub input_dim_image: usize,
    pub input_dim_text: usize,
    pub hidden: usize,
    pub depth: usize,
    pub embed_dim: usize,
}

impl EncoderShape {
    fn widths(&self, modality: Modality) -> Vec<usize> {
        let input = match modality {
            Modality::Image => self.input_dim_image,
            Modality::Text => self.input_dim_text,
        };
        let mut w = vec![input];
        w.extend(std::iter::repeat_n(self.hidden, self.depth));
        w.push(self.embed_dim);
        w
    }
}

/// One tanh MLP per modality with a shared output dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub image: Mlp,
    pub text: Mlp,
}

/// Everything [`encoder_backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct EncodeCache {
    modality: Modality,
    mlp: MlpCache,
    normalize: NormalizeBackward,
}

impl EncoderParams {
    pub fn new(shape: &EncoderShape, seed: u64) -> Result<Self> {
        let image = Mlp::new("encoder.image", &shape.widths(Modality::Image), seed)?;
        let text = Mlp::new("encoder.text", &shape.widths(Modality::Text), seed)?;
        Self::from_parts(image, text)
    }

    pub fn from_parts(image: Mlp, text: Mlp) -> Result<Self> {
        if image.output_dim() != text.output_dim() {
            return Err(Error::contract(format!(
                "encoder output dims differ: {} vs {}",
                image.output_dim(),
                text.output_dim()
            )));
        }
        Ok(Self { image, text })
    }

    pub fn embed_dim(&self) -> usize {
        self.image.output_dim()
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

    pub fn zero_grad(&mut self) {
        self.blocks_mut().for_each(ParamBlock::zero_grad);
    }
}

/// Encodes `inputs` with the modality's network and normalizes the rows.
pub fn encode(
    params: &EncoderParams,
    inputs: &Matrix,
    modality: Modality,
) -> Result<(EmbeddingBatch, EncodeCache)> {
    if inputs.rows() == 0 {
        return Err(Error::contract("encode called with an empty batch"));
    }
    let net = params.net(modality);
    if inputs.cols() != net.input_dim() {
        return Err(Error::contract(format!(
            "{} encoder expects input dim {}, got {}",
            modality.name(),
            net.input_dim(),
            inputs.cols()
        )));
    }
    let (raw, mlp) = net.forward(inputs)?;
    let (emb, normalize) = l2_normalize_rows(&raw)?;
    Ok((
        EmbeddingBatch {
            emb,
            modality,
            step: 0,
        },
        EncodeCache {
            modality,
            mlp,
            normalize,
        },
    ))
}

/// Accumulates encoder gradients for an upstream gradient on the embeddings.
pub fn encoder_backward(
    params: &mut EncoderParams,
    cache: &EncodeCache,
    upstream: &Matrix,
) -> Result<()> {
    let raw_grad = cache.normalize.backward(upstream)?;
    params.net_mut(cache.modality).backward(&cache.mlp, &raw_grad)?;
    Ok(())
}

/// Pairwise dot products `S[i][j] = a_i · b_j`.
pub fn similarity_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "similarity needs equal batch shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    a.matmul_transposed(b)
}

/// Learnable inverse temperature, stored as `log τ` and clamped to `τ ≤ tau_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct Temperature {
    pub log_tau: ParamBlock,
    pub tau_max: f64,
}

pub const DEFAULT_TAU_MAX: f64 = 100.0;

impl Temperature {
    /// Standard contrastive init, `τ = 1/0.07`.
    pub fn clip_default() -> Self {
        Self::new(1.0 / 0.07, DEFAULT_TAU_MAX)
    }

    pub fn new(tau: f64, tau_max: f64) -> Self {
        let mut t = Self {
            log_tau: ParamBlock::new(
                "temperature.log_tau",
                Matrix::filled(1, 1, tau.ln()),
                false,
            ),
            tau_max,
        };
        t.clamp();
        t
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.value[(0, 0)].exp().min(self.tau_max)
    }

    /// Converts `∂L/∂τ` into a gradient on `log τ` and accumulates it.
    pub fn accumulate_tau_grad(&mut self, dl_dtau: f64) {
        let tau = self.tau();
        self.log_tau.grad[(0, 0)] += tau * dl_dtau;
    }

    pub fn clamp(&mut self) {
        let cap = self.tau_max.ln();
        let v = &mut self.log_tau.value[(0, 0)];
        if *v > cap {
            *v = cap;
        }
    }
}
