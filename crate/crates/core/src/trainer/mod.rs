//! Two-stage AmorLIP training loop and the contrastive baseline.
//!
//! Each AmorLIP step encodes a batch, computes exact batch partitions and the
//! combined regression target, updates the online amortizers every
//! `t_online` batches, moves the EMA target every `t_target` batches and then
//! trains the encoders on the amortized objective using the target `λ̂`.

pub mod checkpoint;
mod config;
mod metrics;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

pub use config::{Method, TrainConfig};
pub use metrics::{JsonlSink, MetricRecord, MetricsSink, NullSink};

use crate::amortization::{
    amortize_forward, beta_schedule, combined_target, ema_update, exact_partition_from_sims,
    optimize_amortizer, AmortizationBatch, AmortizerParams, TargetAmortizer,
};
use crate::data::{batch_iterator, PairedDataset};
use crate::encoders::{
    encode, encoder_backward, similarity_matrix, EncodeCache, EncoderParams, EncoderShape, Modality,
    Temperature, DEFAULT_TAU_MAX,
};
use crate::error::{Error, Result};
use crate::losses::{amortized_mle_loss, nce_loss, rho_at, temperature_rescale, LossOutput};
use crate::mlp::{Dense, Mlp};
use crate::numerics::{median, rng, AdamHyper, Matrix, OptimizerState, ParamBlock};
use checkpoint::take_block;

/// Online amortizers, their EMA/previous-epoch copies and optimizers.
#[derive(Debug, Clone, PartialEq)]
pub struct AmortizerState {
    pub online: AmortizerParams,
    pub target: TargetAmortizer,
    pub opt_image: OptimizerState,
    pub opt_text: OptimizerState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Progress {
    pub epochs_done: usize,
    /// Index of the next batch within the current epoch.
    pub next_batch: usize,
    pub step: u64,
    /// Number of cross-batch gathers: one per Stage I update for AmorLIP,
    /// one per step for the baseline.
    pub gather_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub encoders: EncoderParams,
    pub temperature: Temperature,
    pub encoder_opt: OptimizerState,
    pub amortizer: Option<AmortizerState>,
    pub progress: Progress,
}

/// Everything evaluation needs: encoders, temperature and (for AmorLIP) the
/// target amortizers.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalModel {
    pub encoders: EncoderParams,
    pub temperature: Temperature,
    pub amortizer: Option<AmortizerParams>,
    pub seed: u64,
    pub eval_fraction: f64,
}

fn amortizer_seed(seed: u64, epoch: usize) -> u64 {
    rng::stream_id("amortizer-init", &[seed, epoch as u64])
}

fn fresh_online(cfg: &TrainConfig, epoch: usize) -> Result<AmortizerParams> {
    AmortizerParams::new(
        "amortizer.online",
        cfg.embed_dim,
        cfg.dim_factor,
        amortizer_seed(cfg.seed, epoch),
    )
}

fn encoder_blocks_mut<'a>(
    encoders: &'a mut EncoderParams,
    temperature: &'a mut Temperature,
) -> Vec<&'a mut ParamBlock> {
    let mut v: Vec<&mut ParamBlock> = encoders.blocks_mut().collect();
    v.push(&mut temperature.log_tau);
    v
}

fn diverged(step: u64, epoch: usize, tau: f64, what: &str, detail: impl std::fmt::Display) -> Error {
    Error::Divergence(format!("step {step}, epoch {epoch}, tau {tau}: {what}: {detail}"))
}

impl TrainState {
    pub fn new(config: &TrainConfig, dim_a: usize, dim_b: usize) -> Result<Self> {
        config.validate()?;
        let shape = EncoderShape {
            input_dim_image: dim_a,
            input_dim_text: dim_b,
            hidden: config.hidden,
            depth: config.depth,
            embed_dim: config.embed_dim,
        };
        let mut encoders = EncoderParams::new(&shape, config.seed)?;
        let mut temperature = Temperature::new(config.tau_init, config.tau_max);
        let encoder_opt = OptimizerState::new(
            AdamHyper::adamw(config.lr_encoder, config.weight_decay),
            encoder_blocks_mut(&mut encoders, &mut temperature)
                .into_iter()
                .map(|b| &*b),
        );
        let amortizer = match config.method {
            Method::Clip => None,
            Method::Amorlip => {
                let online = fresh_online(config, 0)?;
                let target = TargetAmortizer::from_online(&online, config.alpha)?;
                let hyper = AdamHyper::adam(config.lr_amortizer);
                Some(AmortizerState {
                    opt_image: OptimizerState::new(hyper, online.image.blocks()),
                    opt_text: OptimizerState::new(hyper, online.text.blocks()),
                    online,
                    target,
                })
            }
        };
        Ok(Self {
            config: config.clone(),
            encoders,
            temperature,
            encoder_opt,
            amortizer,
            progress: Progress::default(),
        })
    }

    pub fn eval_model(&self) -> EvalModel {
        EvalModel {
            encoders: self.encoders.clone(),
            temperature: self.temperature.clone(),
            amortizer: self.amortizer.as_ref().map(|a| a.target.ema.clone()),
            seed: self.config.seed,
            eval_fraction: self.config.eval_fraction,
        }
    }

    /// Epoch boundary: the previous-epoch amortizer takes the EMA values and
    /// the online and target networks restart from a fresh initialization.
    fn begin_epoch(&mut self, epoch: usize) -> Result<()> {
        let cfg = &self.config;
        if let Some(a) = self.amortizer.as_mut() {
            a.target.rotate()?;
            a.online = fresh_online(cfg, epoch)?;
            a.target.ema.copy_values_from(&a.online)?;
            a.opt_image.reset();
            a.opt_text.reset();
        }
        Ok(())
    }

    fn encoder_update(&mut self, loss: &LossOutput, caches: [&EncodeCache; 2]) -> Result<()> {
        self.encoders.zero_grad();
        self.temperature.log_tau.zero_grad();
        encoder_backward(&mut self.encoders, caches[0], &loss.grad_a)?;
        encoder_backward(&mut self.encoders, caches[1], &loss.grad_b)?;
        self.temperature.accumulate_tau_grad(loss.tau_grad);
        let mut blocks = encoder_blocks_mut(&mut self.encoders, &mut self.temperature);
        self.encoder_opt.step(&mut blocks)?;
        self.temperature.clamp();
        Ok(())
    }

    /// One optimization step on the batch `idx`; `k` is the 1-based batch
    /// index within `epoch`.
    fn step(&mut self, ds: &PairedDataset, idx: &[usize], epoch: usize, k: usize) -> Result<MetricRecord> {
        let cfg = self.config.clone();
        let step = self.progress.step + 1;
        let xa = ds.mod_a.select_rows(idx);
        let xb = ds.mod_b.select_rows(idx);
        let tau = self.temperature.tau();
        // A collapsed or NaN embedding row means training has blown up.
        let embed = |x: &Matrix, m: Modality| {
            encode(&self.encoders, x, m).map_err(|e| match e {
                Error::Degenerate(_) => diverged(step, epoch, tau, "embedding", e),
                e => e,
            })
        };
        let (ea, cache_a) = embed(&xa, Modality::Image)?;
        let (eb, cache_b) = embed(&xb, Modality::Text)?;
        let (a, b) = (ea.matrix(), eb.matrix());
        let rho = rho_at(epoch, cfg.epochs, &cfg.rho)?;

        let mut amor_loss = None;
        let mut beta_t = None;
        let mut median_err = None;
        let raw = match self.amortizer.as_mut() {
            None => {
                self.progress.gather_count += 1;
                nce_loss(a, b, tau).map_err(|e| diverged(step, epoch, tau, "contrastive loss", e))?
            }
            Some(am) => {
                // Stage I: targets from exact batch partitions.
                let sims = similarity_matrix(a, b)?;
                let sims_t = sims.transpose();
                let beta = beta_schedule(epoch, cfg.epochs, cfg.beta_final)?;
                beta_t = Some(beta);
                let pa = exact_partition_from_sims(&sims, tau, cfg.include_positive)?;
                let pb = exact_partition_from_sims(&sims_t, tau, cfg.include_positive)?;
                let target_a =
                    combined_target(&pa.log_z_exact, &amortize_forward(&am.target.prev_epoch.image, a)?, beta)?;
                let target_b =
                    combined_target(&pb.log_z_exact, &amortize_forward(&am.target.prev_epoch.text, b)?, beta)?;

                if k % cfg.t_online == 0 {
                    self.progress.gather_count += 1;
                    let mut total = 0.0;
                    for (net, opt, emb, s, t) in [
                        (&mut am.online.image, &mut am.opt_image, a, &sims, &target_a),
                        (&mut am.online.text, &mut am.opt_text, b, &sims_t, &target_b),
                    ] {
                        let batch = AmortizationBatch {
                            emb,
                            sims: s,
                            tau,
                            log_z_target: t,
                        };
                        total += optimize_amortizer(net, opt, &batch, cfg.objective, cfg.generator, cfg.t_lambda)
                            .map_err(|e| diverged(step, epoch, tau, "amortizer update", e))?;
                    }
                    amor_loss = Some(total);
                }
                if k % cfg.t_target == 0 {
                    ema_update(&mut am.target.ema.image, &am.online.image, cfg.alpha)?;
                    ema_update(&mut am.target.ema.text, &am.online.text, cfg.alpha)?;
                }

                // Stage II with the frozen target estimates.
                let lla = amortize_forward(&am.target.ema.image, a)?;
                let llb = amortize_forward(&am.target.ema.text, b)?;
                let errs: Vec<f64> = lla
                    .iter()
                    .zip(&pa.log_z_exact)
                    .chain(llb.iter().zip(&pb.log_z_exact))
                    .map(|(l, z)| (l - z).abs())
                    .collect();
                median_err = median(&errs);
                amortized_mle_loss(a, b, tau, &lla, &llb)
                    .map_err(|e| diverged(step, epoch, tau, "amortized loss", e))?
            }
        };
        let loss = temperature_rescale(&raw, tau, rho)?;
        if !raw.is_finite() || !loss.is_finite() {
            return Err(diverged(step, epoch, tau, "loss", raw.value));
        }
        self.encoder_update(&loss, [&cache_a, &cache_b])?;
        self.progress.step = step;
        Ok(MetricRecord {
            step,
            epoch,
            stage2_loss_raw: raw.value,
            stage2_loss_rescaled: loss.value,
            amor_loss,
            tau: self.temperature.tau(),
            beta_t,
            rho,
            median_abs_log_z_err: median_err,
            gather_count: self.progress.gather_count,
            wall_ms: 0,
        })
    }

    /// Trains on `ds` until all epochs are done or `max_steps` total steps
    /// have been taken. Can be called again to continue.
    pub fn train(
        &mut self,
        ds: &PairedDataset,
        sink: &mut dyn MetricsSink,
        max_steps: Option<u64>,
    ) -> Result<()> {
        if ds.dim_a() != self.encoders.image.input_dim() || ds.dim_b() != self.encoders.text.input_dim() {
            return Err(Error::Contract(format!(
                "dataset dims ({}, {}) do not match encoders ({}, {})",
                ds.dim_a(),
                ds.dim_b(),
                self.encoders.image.input_dim(),
                self.encoders.text.input_dim()
            )));
        }
        let start = Instant::now();
        let stop = |p: &Progress| max_steps.is_some_and(|m| p.step >= m);
        while self.progress.epochs_done < self.config.epochs {
            if stop(&self.progress) {
                return Ok(());
            }
            let epoch = self.progress.epochs_done + 1;
            let plan = batch_iterator(ds.len(), self.config.batch_size, self.config.seed, epoch)?;
            if self.progress.next_batch == 0 {
                self.begin_epoch(epoch)?;
            }
            while self.progress.next_batch < plan.num_batches() {
                if stop(&self.progress) {
                    return Ok(());
                }
                let k = self.progress.next_batch;
                let mut rec = self.step(ds, plan.batch(k), epoch, k + 1)?;
                self.progress.next_batch += 1;
                if rec.step % self.config.log_every == 0 {
                    rec.wall_ms = start.elapsed().as_millis() as u64;
                    sink.record(&rec)?;
                }
            }
            self.progress.epochs_done += 1;
            self.progress.next_batch = 0;
        }
        Ok(())
    }

    fn counters(&self) -> Matrix {
        let p = &self.progress;
        let (ti, tt) = self
            .amortizer
            .as_ref()
            .map_or((0, 0), |a| (a.opt_image.t, a.opt_text.t));
        let seed = self.config.seed;
        Matrix::from_vec(
            1,
            COUNTERS,
            vec![
                p.epochs_done as f64,
                p.next_batch as f64,
                p.step as f64,
                p.gather_count as f64,
                (seed & 0xffff_ffff) as f64,
                (seed >> 32) as f64,
                self.encoder_opt.t as f64,
                ti as f64,
                tt as f64,
            ],
        )
        .expect("counter length")
    }

    /// Every persisted matrix in a fixed order, with its block name.
    fn named_blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        let enc_names: Vec<String> = self
            .encoders
            .blocks()
            .chain(std::iter::once(&self.temperature.log_tau))
            .map(|b| b.name.clone())
            .collect();
        for b in encoder_blocks_mut(&mut self.encoders, &mut self.temperature) {
            out.push((b.name.clone(), &mut b.value));
        }
        push_optimizer(&mut out, "optim.encoder", &enc_names, &mut self.encoder_opt);
        if let Some(a) = self.amortizer.as_mut() {
            let img: Vec<String> = a.online.image.blocks().map(|b| b.name.clone()).collect();
            let txt: Vec<String> = a.online.text.blocks().map(|b| b.name.clone()).collect();
            for b in a
                .online
                .blocks_mut()
                .chain(a.target.ema.blocks_mut())
                .chain(a.target.prev_epoch.blocks_mut())
            {
                out.push((b.name.clone(), &mut b.value));
            }
            push_optimizer(&mut out, "optim.amortizer", &img, &mut a.opt_image);
            push_optimizer(&mut out, "optim.amortizer", &txt, &mut a.opt_text);
        }
        out
    }

    /// The named matrices a checkpoint stores. Gradients are not included.
    pub fn persisted_blocks(&self) -> Vec<(String, Matrix)> {
        let mut copy = self.clone();
        let mut blocks: Vec<(String, Matrix)> = copy
            .named_blocks_mut()
            .into_iter()
            .map(|(n, m)| (n, m.clone()))
            .collect();
        blocks.push((COUNTERS_BLOCK.to_string(), self.counters()));
        blocks
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::write_checkpoint(path, &self.persisted_blocks())
    }

    /// Restores parameters, optimizer moments and progress into a state built
    /// from the same configuration and data dimensions.
    pub fn restore_checkpoint(&mut self, path: &Path) -> Result<()> {
        let blocks = checkpoint::read_checkpoint(path)?;
        self.restore_blocks(&blocks)
    }

    pub fn restore_blocks(&mut self, blocks: &BTreeMap<String, Matrix>) -> Result<()> {
        for (name, dst) in self.named_blocks_mut() {
            *dst = take_block(blocks, &name, dst.shape())?;
        }
        let c = take_block(blocks, COUNTERS_BLOCK, (1, COUNTERS))?;
        let c = c.as_slice();
        let seed = c[4] as u64 | ((c[5] as u64) << 32);
        if seed != self.config.seed {
            return Err(Error::Config(format!(
                "checkpoint was trained with seed {seed}, config has {}",
                self.config.seed
            )));
        }
        self.progress = Progress {
            epochs_done: c[0] as usize,
            next_batch: c[1] as usize,
            step: c[2] as u64,
            gather_count: c[3] as u64,
        };
        self.encoder_opt.t = c[6] as u64;
        if let Some(a) = self.amortizer.as_mut() {
            a.opt_image.t = c[7] as u64;
            a.opt_text.t = c[8] as u64;
        }
        Ok(())
    }
}

impl TrainState {
    /// Gives a baseline state fresh amortizers so they can be fitted on top
    /// of its encoders. No-op if amortizers already exist.
    pub fn attach_amortizers(&mut self) -> Result<()> {
        if self.amortizer.is_none() {
            let online = fresh_online(&self.config, 0)?;
            let hyper = AdamHyper::adam(self.config.lr_amortizer);
            self.amortizer = Some(AmortizerState {
                opt_image: OptimizerState::new(hyper, online.image.blocks()),
                opt_text: OptimizerState::new(hyper, online.text.blocks()),
                target: TargetAmortizer::from_online(&online, self.config.alpha)?,
                online,
            });
        }
        Ok(())
    }

    /// Stage I alone with the encoders and `τ` frozen: `iterations` batch
    /// updates (each `t_lambda` optimizer steps) regressing the online
    /// amortizers onto exact batch partitions. The target copy is then set to
    /// the online networks. Returns the last Stage I loss.
    pub fn fit_amortizers_frozen(&mut self, ds: &PairedDataset, iterations: usize) -> Result<f64> {
        self.attach_amortizers()?;
        let cfg = self.config.clone();
        let tau = self.temperature.tau();
        let am = self.amortizer.as_mut().expect("attached above");
        let mut last = f64::NAN;
        let mut done = 0;
        let mut pass = 0;
        while done < iterations {
            pass += 1;
            let plan = batch_iterator(ds.len(), cfg.batch_size, cfg.seed ^ 0x5eed, pass)?;
            for idx in plan.batches() {
                if done == iterations {
                    break;
                }
                let (ea, _) = encode(&self.encoders, &ds.mod_a.select_rows(idx), Modality::Image)?;
                let (eb, _) = encode(&self.encoders, &ds.mod_b.select_rows(idx), Modality::Text)?;
                let sims = similarity_matrix(ea.matrix(), eb.matrix())?;
                let sims_t = sims.transpose();
                last = 0.0;
                for (net, opt, emb, s) in [
                    (&mut am.online.image, &mut am.opt_image, ea.matrix(), &sims),
                    (&mut am.online.text, &mut am.opt_text, eb.matrix(), &sims_t),
                ] {
                    let target = exact_partition_from_sims(s, tau, cfg.include_positive)?.log_z_exact;
                    let batch = AmortizationBatch {
                        emb,
                        sims: s,
                        tau,
                        log_z_target: &target,
                    };
                    last += optimize_amortizer(net, opt, &batch, cfg.objective, cfg.generator, cfg.t_lambda)?;
                }
                done += 1;
            }
        }
        am.target.ema.copy_values_from(&am.online)?;
        Ok(last)
    }
}

const COUNTERS_BLOCK: &str = "state.counters";
const COUNTERS: usize = 9;

fn push_optimizer<'a>(
    out: &mut Vec<(String, &'a mut Matrix)>,
    prefix: &str,
    names: &[String],
    opt: &'a mut OptimizerState,
) {
    let OptimizerState { m, v, .. } = opt;
    for (n, mm) in names.iter().zip(m.iter_mut()) {
        out.push((format!("{prefix}.m.{n}"), mm));
    }
    for (n, vv) in names.iter().zip(v.iter_mut()) {
        out.push((format!("{prefix}.v.{n}"), vv));
    }
}

/// Rebuilds the network stored under `name` (`{name}.{i}.weight` / `.bias`).
/// Returns `None` if the checkpoint has no layer 0 for it.
fn mlp_from_blocks(blocks: &BTreeMap<String, Matrix>, name: &str) -> Result<Option<Mlp>> {
    let mut layers = Vec::new();
    loop {
        let i = layers.len();
        let wname = format!("{name}.{i}.weight");
        let Some(w) = blocks.get(&wname) else { break };
        let bname = format!("{name}.{i}.bias");
        let b = take_block(blocks, &bname, (1, w.cols()))?;
        if let Some(Dense { weight, .. }) = layers.last() {
            let prev: &ParamBlock = weight;
            if prev.value.cols() != w.rows() {
                return Err(Error::Contract(format!(
                    "block '{wname}' has {} rows but the previous layer outputs {}",
                    w.rows(),
                    prev.value.cols()
                )));
            }
        }
        layers.push(Dense {
            weight: ParamBlock::new(wname, w.clone(), true),
            bias: ParamBlock::new(bname, b, false),
        });
    }
    Ok(if layers.is_empty() { None } else { Some(Mlp { layers }) })
}

impl EvalModel {
    /// Infers the architecture from block names and shapes.
    pub fn from_blocks(blocks: &BTreeMap<String, Matrix>) -> Result<Self> {
        let need = |name: &str| -> Result<Mlp> {
            mlp_from_blocks(blocks, name)?
                .ok_or_else(|| Error::Contract(format!("checkpoint is missing block '{name}.0.weight'")))
        };
        let encoders = EncoderParams::from_parts(need("encoder.image")?, need("encoder.text")?)?;
        let log_tau = take_block(blocks, "temperature.log_tau", (1, 1))?;
        let mut temperature = Temperature::new(1.0, DEFAULT_TAU_MAX);
        temperature.log_tau.value = log_tau;
        let amortizer = match (
            mlp_from_blocks(blocks, "amortizer.target.image")?,
            mlp_from_blocks(blocks, "amortizer.target.text")?,
        ) {
            (Some(image), Some(text)) => Some(AmortizerParams { image, text }),
            (None, None) => None,
            _ => return Err(Error::Contract("checkpoint has only one target amortizer".into())),
        };
        let c = take_block(blocks, COUNTERS_BLOCK, (1, COUNTERS))?;
        let c = c.as_slice();
        Ok(Self {
            encoders,
            temperature,
            amortizer,
            seed: c[4] as u64 | ((c[5] as u64) << 32),
            eval_fraction: TrainConfig::default().eval_fraction,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_blocks(&checkpoint::read_checkpoint(path)?)
    }
}

/// Splits off the evaluation slice, builds a fresh state and trains.
pub fn run(config: &TrainConfig, data: &PairedDataset, sink: &mut dyn MetricsSink) -> Result<TrainState> {
    let (train, _) = data.split(config.eval_fraction, config.seed)?;
    let mut state = TrainState::new(config, data.dim_a(), data.dim_b())?;
    state.train(&train, sink, None)?;
    Ok(state)
}

/// [`run`] with the method forced to AmorLIP.
pub fn run_amorlip(config: &TrainConfig, data: &PairedDataset, sink: &mut dyn MetricsSink) -> Result<TrainState> {
    run(&TrainConfig { method: Method::Amorlip, ..config.clone() }, data, sink)
}

/// [`run`] with the method forced to the contrastive baseline.
pub fn run_clip_baseline(config: &TrainConfig, data: &PairedDataset, sink: &mut dyn MetricsSink) -> Result<TrainState> {
    run(&TrainConfig { method: Method::Clip, ..config.clone() }, data, sink)
}
