//! The optimization loop: shuffled drop-last batching, the linear λ
//! schedule advanced per iteration, adaptive-moment updates with optional
//! global gradient-norm clipping, per-iteration loss logging, and
//! checkpointing.
//!
//! Every run is bit-deterministic given its seed: batch order, continuous
//! noise, and Gumbel noise each come from a named stream derived from the
//! training seed ("shuffle", "noise", "gumbel").

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::ConnectomeDataset;
use crate::model::{save_checkpoint, JointVaeModel};
use crate::ndgrad::{Graph, Tensor};
use crate::objectives::{compose, LossBreakdown, LossInputs, ObjectiveSpec};
use crate::rng::StreamRng;
use crate::{Error, Result};

/// Hyperparameters of one training run. Fields omitted from a config
/// file fall back to the reference-regime defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Iterations over which λ ramps linearly from 0 to 1.
    pub anneal_iters: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Progress line to stderr every this many iterations.
    pub log_every: u64,
    /// Write a checkpoint every this many iterations (requires a dir).
    pub checkpoint_every: Option<u64>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2500,
            batch_size: 512,
            anneal_iters: 5000,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip: Some(10.0),
            seed: 0,
            log_every: 100,
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    /// Validate against the dataset size `n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.anneal_iters < 1 {
            return Err(Error::Config("anneal_iters must be >= 1".into()));
        }
        if self.batch_size == 0 || self.batch_size > n {
            return Err(Error::Config(format!(
                "batch_size {} must be in 1..={n}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0,1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        if self.checkpoint_every.is_some() && self.checkpoint_dir.is_none() {
            return Err(Error::Config(
                "checkpoint_every requires checkpoint_dir".into(),
            ));
        }
        Ok(())
    }

    /// Full batches per epoch (the last partial batch is dropped).
    pub fn iterations_per_epoch(&self, n: usize) -> usize {
        n / self.batch_size
    }
}

/// The linear λ ramp: `λ(t) = min(t / T₀, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub anneal_iters: u64,
}

impl Schedule {
    pub fn lambda_at(&self, t: u64) -> f64 {
        (t as f64 / self.anneal_iters as f64).min(1.0)
    }
}

/// One logged iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: u64,
    pub lambda: f64,
    pub breakdown: LossBreakdown,
}

/// Per-iteration loss history of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    /// Write the log as CSV:
    /// `iter,lambda,total,recon,kl_c,kl_d,penalty_c,penalty_d`.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "iter", "lambda", "total", "recon", "kl_c", "kl_d", "penalty_c", "penalty_d",
        ])?;
        for r in &self.rows {
            let b = &r.breakdown;
            w.write_record([
                r.iter.to_string(),
                r.lambda.to_string(),
                b.total.to_string(),
                b.recon.to_string(),
                b.kl_c.to_string(),
                b.kl_d.to_string(),
                b.penalty_c.to_string(),
                b.penalty_d.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io_at(e, path))?;
        Ok(())
    }

    /// Mean reconstruction loss of the rows in `[lo, hi)` (iter indices).
    pub fn mean_recon(&self, lo: u64, hi: u64) -> f64 {
        let sel: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| (lo..hi).contains(&r.iter))
            .map(|r| r.breakdown.recon)
            .collect();
        sel.iter().sum::<f64>() / sel.len().max(1) as f64
    }
}

/// What a finished run hands back (the model is mutated in place).
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: TrainingLog,
    pub iterations: u64,
}

/// Snapshot of one iteration, handed to the instrumentation hook *before*
/// the optimizer step — `model` still holds the weights that produced
/// this loss.
pub struct IterationInfo<'a> {
    pub iter: u64,
    pub lambda: f64,
    /// Row indices of this batch in the dataset.
    pub batch: &'a [usize],
    /// The continuous noise draw, `batch × z_c_dim` row-major.
    pub eps: &'a [f64],
    /// The Gumbel noise draw, `batch × K` row-major (None without a head).
    pub gumbel: Option<&'a [f64]>,
    pub breakdown: &'a LossBreakdown,
    pub model: &'a JointVaeModel,
}

/// Adaptive-moment optimizer state (one slot per parameter tensor).
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
}

impl Adam {
    fn new(sizes: &[usize]) -> Self {
        Adam {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            steps: 0,
        }
    }

    /// One bias-corrected update. A zero gradient leaves the parameter
    /// exactly unchanged (the first-moment estimate stays zero).
    fn step(&mut self, cfg: &TrainConfig, params: &mut [&mut Tensor], grads: &[Vec<f64>]) {
        self.steps += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.steps as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
    }
}

fn gather_rows(x: &[f64], d: usize, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(&x[i * d..(i + 1) * d]);
    }
    out
}

/// Train `model` on `data` under `spec`, mutating the weights in place.
pub fn train(
    model: &mut JointVaeModel,
    data: &ConnectomeDataset,
    spec: &ObjectiveSpec,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_with_hook(model, data, spec, cfg, |_| Ok(()))
}

/// [`train`] with a per-iteration instrumentation hook (called after the
/// forward/backward pass, before the optimizer step).
pub fn train_with_hook<F>(
    model: &mut JointVaeModel,
    data: &ConnectomeDataset,
    spec: &ObjectiveSpec,
    cfg: &TrainConfig,
    mut hook: F,
) -> Result<TrainReport>
where
    F: FnMut(&IterationInfo<'_>) -> Result<()>,
{
    cfg.validate(data.n)?;
    spec.validate()?;
    if model.config.input_dim != data.d {
        return Err(Error::Config(format!(
            "model input_dim {} != dataset dim {}",
            model.config.input_dim, data.d
        )));
    }

    let schedule = Schedule {
        anneal_iters: cfg.anneal_iters,
    };
    let mut shuffle_rng = StreamRng::new(cfg.seed, "shuffle");
    let mut noise_rng = StreamRng::new(cfg.seed, "noise");
    let mut gumbel_rng = StreamRng::new(cfg.seed, "gumbel");

    let z_c = model.config.z_c_dim;
    let k = model.config.k_classes;
    let batch = cfg.batch_size;
    let ipe = cfg.iterations_per_epoch(data.n);
    let sizes: Vec<usize> = model.params().iter().map(|t| t.numel()).collect();
    let mut adam = Adam::new(&sizes);
    let mut log = TrainingLog::default();
    let mut last_finite: Option<LossBreakdown> = None;
    let mut t: u64 = 0;

    let numerical = |e: Error, t: u64, last: &Option<LossBreakdown>| -> Error {
        let context = match last {
            Some(b) => format!("last finite loss: {b:?}"),
            None => "no finite loss observed yet".to_string(),
        };
        match e {
            Error::Numerical { detail, .. } => {
                Error::numerical_at(t, format!("{detail}; {context}"))
            }
            other => other,
        }
    };

    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.n).collect();
        shuffle_rng.shuffle(&mut order);
        for b in 0..ipe {
            let idx = &order[b * batch..(b + 1) * batch];
            let lambda = schedule.lambda_at(t);

            let mut g = Graph::new();
            let bind = model.bind(&mut g);
            let xb = Tensor::from_data(batch, data.d, gather_rows(&data.x, data.d, idx))?;
            let x = g.constant(xb);

            let mut eps = vec![0.0; batch * z_c];
            noise_rng.fill_normal(&mut eps);
            let eps_node = g.constant(Tensor::from_data(batch, z_c, eps)?);

            let step = (|| -> Result<(crate::ndgrad::NodeId, LossBreakdown, Option<crate::ndgrad::NodeId>)> {
                let post = model.encode(&mut g, &bind, x, lambda)?;
                let z = model.sample_continuous(&mut g, &post, eps_node)?;
                let (z_d, gum_node) = match post.logits {
                    Some(logits) => {
                        let mut gum = vec![0.0; batch * k];
                        for v in &mut gum {
                            *v = gumbel_rng.gumbel();
                        }
                        let gn = g.constant(Tensor::from_data(batch, k, gum)?);
                        let disc = model.sample_discrete(&mut g, logits, gn)?;
                        (Some(disc.sample), Some(gn))
                    }
                    None => (None, None),
                };
                let x_hat = model.decode(&mut g, &bind, z, z_d)?;
                let (loss, breakdown) = compose(&mut g, spec, &LossInputs { x, x_hat, post })?;
                Ok((loss, breakdown, gum_node))
            })();
            let (loss, breakdown, gum_node) =
                step.map_err(|e| numerical(e, t, &last_finite))?;

            hook(&IterationInfo {
                iter: t,
                lambda,
                batch: idx,
                eps: g.data(eps_node),
                gumbel: gum_node.map(|n| g.data(n)),
                breakdown: &breakdown,
                model,
            })?;

            g.backward(loss)
                .map_err(|e| numerical(e, t, &last_finite))?;

            let ids = bind.param_ids();
            let mut grads: Vec<Vec<f64>> = Vec::with_capacity(ids.len());
            for (slot, id) in ids.iter().enumerate() {
                match g.grad(*id) {
                    Some(gr) => {
                        if gr.iter().any(|v| !v.is_finite()) {
                            return Err(Error::numerical_at(
                                t,
                                format!(
                                    "non-finite gradient in parameter {slot}; last loss {:?}",
                                    breakdown
                                ),
                            ));
                        }
                        grads.push(gr.to_vec());
                    }
                    None => grads.push(vec![0.0; sizes[slot]]),
                }
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = grads
                    .iter()
                    .flat_map(|v| v.iter())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > clip {
                    let f = clip / norm;
                    for v in grads.iter_mut().flat_map(|v| v.iter_mut()) {
                        *v *= f;
                    }
                }
            }
            adam.step(cfg, &mut model.params_mut(), &grads);

            log.rows.push(LogRow {
                iter: t,
                lambda,
                breakdown,
            });
            last_finite = Some(breakdown);
            if t % cfg.log_every == 0 {
                log::info!(
                    "iter {t} λ={lambda:.3} total={:.4} recon={:.4} kl_c={:.4} kl_d={:.4}",
                    breakdown.total,
                    breakdown.recon,
                    breakdown.kl_c,
                    breakdown.kl_d
                );
            }
            t += 1;
            if let (Some(every), Some(dir)) = (cfg.checkpoint_every, cfg.checkpoint_dir.as_ref())
            {
                if t % every == 0 {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io_at(e, dir))?;
                    let path = dir.join(format!("ckpt_{t:08}.bin"));
                    let streams =
                        [shuffle_rng.state(), noise_rng.state(), gumbel_rng.state()];
                    save_checkpoint(&path, model, t, &streams)?;
                }
            }
        }
    }
    Ok(TrainReport {
        log,
        iterations: t,
    })
}

/// Evaluation-mode pass over the whole dataset: continuous means and
/// noise-free argmax assignments.
pub fn extract_latents(
    model: &JointVaeModel,
    data: &ConnectomeDataset,
) -> Result<(Vec<f64>, Vec<usize>)> {
    model.eval_latents(&data.x, data.n)
}
