//! The hybrid continuous–discrete VAE: a four-layer MLP encoder with
//! Gaussian (μ, log σ²) and categorical (logits) heads, a mirrored
//! decoder over the concatenated latents, and the annealing-mode switch.
//!
//! Under architectural annealing the encoder's continuous heads are
//! scaled by λ *inside the autodiff graph*, so both the sampled latents
//! and the KL term see λ·μ and λ·log σ²; at λ = 0 the continuous channel
//! is exactly the prior and carries no information, and at λ = 1 the
//! forward pass is bit-identical to the unannealed model.

use std::fs;
use std::io::{BufReader, BufWriter, Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ndgrad::{argmax, Graph, NodeId, Tensor};
use crate::rng::{StreamRng, StreamState};
use crate::{Error, Result};

/// Which annealing regime the model/objective pair runs under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnealMode {
    /// Plain weighted objective, no schedule.
    None,
    /// Hinge capacity objective (no λ either).
    Hinge,
    /// λ scales the continuous KL term in the loss only.
    LossAnneal,
    /// λ scales the encoder heads (μ, log σ²) in-graph.
    ArchAnneal,
}

/// Architecture hyperparameters. Fields omitted from a config file fall
/// back to the reference-regime defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Encoder layer widths, mirrored by the decoder.
    pub hidden_dims: Vec<usize>,
    pub z_c_dim: usize,
    /// Number of discrete categories; 0 drops the discrete head entirely
    /// (the plain-VAE baseline), otherwise must be ≥ 2.
    pub k_classes: usize,
    pub gumbel_temperature: f64,
    pub anneal_mode: AnnealMode,
    /// Feed hard one-hot samples to the decoder with identity gradients
    /// instead of the soft relaxation.
    pub straight_through: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 7260,
            hidden_dims: vec![1024, 512, 256, 128],
            z_c_dim: 32,
            k_classes: 25,
            gumbel_temperature: 0.67,
            anneal_mode: AnnealMode::ArchAnneal,
            straight_through: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 || self.z_c_dim < 1 {
            return Err(Error::Config("model dims must be >= 1".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.iter().any(|&h| h < 1) {
            return Err(Error::Config("hidden_dims must be non-empty, all >= 1".into()));
        }
        if self.k_classes == 1 {
            return Err(Error::Config(
                "k_classes must be 0 (no discrete head) or >= 2".into(),
            ));
        }
        if !(self.gumbel_temperature > 0.0) {
            return Err(Error::Config("gumbel_temperature must be > 0".into()));
        }
        Ok(())
    }

    /// Decoder input width.
    fn latent_dim(&self) -> usize {
        self.z_c_dim + self.k_classes
    }
}

/// One dense layer's parameters.
#[derive(Debug, Clone)]
struct Linear {
    /// `in × out`.
    w: Tensor,
    /// `1 × out`, broadcast over rows.
    b: Tensor,
}

impl Linear {
    /// Glorot-uniform weights, zero biases, drawn from `rng`.
    fn init(fan_in: usize, fan_out: usize, rng: &mut StreamRng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.uniform_in(-limit, limit))
            .collect();
        Linear {
            w: Tensor::from_data(fan_in, fan_out, data)
                .expect("init shape")
                .with_grad(),
            b: Tensor::zeros(1, fan_out).with_grad(),
        }
    }
}

/// Posterior heads for one batch, as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct EncodedPosterior {
    pub mu: NodeId,
    pub log_var: NodeId,
    /// Absent when the model has no discrete head.
    pub logits: Option<NodeId>,
    /// The λ that was actually applied (recorded for all modes, applied
    /// in-graph only under [`AnnealMode::ArchAnneal`]).
    pub lambda_applied: f64,
}

/// A discrete latent draw: relaxed sample node plus hard assignments.
#[derive(Debug, Clone)]
pub struct DiscreteSample {
    /// Decoder-side sample (`softmax((logits+g)/τ)`, or its one-hot
    /// straight-through version when configured).
    pub sample: NodeId,
    /// Row-wise argmax of the relaxed sample.
    pub hard: Vec<usize>,
}

/// Graph node ids of all bound parameters for one forward pass.
pub struct Binding {
    enc: Vec<(NodeId, NodeId)>,
    mu: (NodeId, NodeId),
    log_var: (NodeId, NodeId),
    logits: Option<(NodeId, NodeId)>,
    dec: Vec<(NodeId, NodeId)>,
}

impl Binding {
    /// Node ids in declaration order, aligned with
    /// [`JointVaeModel::params`].
    pub fn param_ids(&self) -> Vec<NodeId> {
        let mut ids = Vec::new();
        for &(w, b) in &self.enc {
            ids.push(w);
            ids.push(b);
        }
        ids.extend([self.mu.0, self.mu.1, self.log_var.0, self.log_var.1]);
        if let Some((w, b)) = self.logits {
            ids.push(w);
            ids.push(b);
        }
        for &(w, b) in &self.dec {
            ids.push(w);
            ids.push(b);
        }
        ids
    }
}

/// Encoder/decoder weights plus the architecture description.
#[derive(Debug, Clone)]
pub struct JointVaeModel {
    pub config: ModelConfig,
    enc: Vec<Linear>,
    mu_head: Linear,
    log_var_head: Linear,
    logits_head: Option<Linear>,
    dec: Vec<Linear>,
}

impl JointVaeModel {
    /// Deterministically initialize all layers from the `"init"` stream of
    /// `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = StreamRng::new(seed, "init");
        let mut enc = Vec::new();
        let mut fan_in = config.input_dim;
        for &h in &config.hidden_dims {
            enc.push(Linear::init(fan_in, h, &mut rng));
            fan_in = h;
        }
        let mu_head = Linear::init(fan_in, config.z_c_dim, &mut rng);
        let log_var_head = Linear::init(fan_in, config.z_c_dim, &mut rng);
        let logits_head = (config.k_classes > 0)
            .then(|| Linear::init(fan_in, config.k_classes, &mut rng));
        let mut dec = Vec::new();
        let mut fan_in = config.latent_dim();
        for &h in config.hidden_dims.iter().rev() {
            dec.push(Linear::init(fan_in, h, &mut rng));
            fan_in = h;
        }
        dec.push(Linear::init(fan_in, config.input_dim, &mut rng));
        Ok(JointVaeModel {
            config,
            enc,
            mu_head,
            log_var_head,
            logits_head,
            dec,
        })
    }

    /// All parameter tensors in declaration order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.enc {
            out.push(&l.w);
            out.push(&l.b);
        }
        for l in [&self.mu_head, &self.log_var_head] {
            out.push(&l.w);
            out.push(&l.b);
        }
        if let Some(l) = &self.logits_head {
            out.push(&l.w);
            out.push(&l.b);
        }
        for l in &self.dec {
            out.push(&l.w);
            out.push(&l.b);
        }
        out
    }

    /// Mutable view of the same parameters, same order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for l in &mut self.enc {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        for l in [&mut self.mu_head, &mut self.log_var_head] {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        if let Some(l) = &mut self.logits_head {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        for l in &mut self.dec {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out
    }

    /// Total scalar parameter count.
    pub fn n_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Register every parameter as a differentiable graph leaf.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        let bindl = |g: &mut Graph, l: &Linear| (g.param(&l.w), g.param(&l.b));
        Binding {
            enc: self.enc.iter().map(|l| bindl(g, l)).collect(),
            mu: bindl(g, &self.mu_head),
            log_var: bindl(g, &self.log_var_head),
            logits: self.logits_head.as_ref().map(|l| bindl(g, l)),
            dec: self.dec.iter().map(|l| bindl(g, l)).collect(),
        }
    }

    /// Encoder forward pass on a bound graph. `x` must be `batch × D` in
    /// `[0,1]`; `lambda ∈ [0,1]` is applied to the continuous heads only
    /// under [`AnnealMode::ArchAnneal`] (and recorded regardless).
    pub fn encode(
        &self,
        g: &mut Graph,
        bind: &Binding,
        x: NodeId,
        lambda: f64,
    ) -> Result<EncodedPosterior> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!("lambda must be in [0,1], got {lambda}")));
        }
        let mut h = x;
        for (i, &(w, b)) in bind.enc.iter().enumerate() {
            let lin = g.matmul(h, w)?;
            let lin = g.add(lin, b)?;
            // Check pre-activation: relu(max with 0) would mask a NaN.
            check_finite(g, lin, || format!("encoder layer {i}"))?;
            h = g.relu(lin)?;
        }
        let head = |g: &mut Graph, (w, b): (NodeId, NodeId), h: NodeId| -> Result<NodeId> {
            let lin = g.matmul(h, w)?;
            g.add(lin, b)
        };
        let mu_raw = head(g, bind.mu, h)?;
        let lv_raw = head(g, bind.log_var, h)?;
        check_finite(g, mu_raw, || "mu head".to_string())?;
        check_finite(g, lv_raw, || "log_var head".to_string())?;
        let (mu, log_var) = if self.config.anneal_mode == AnnealMode::ArchAnneal {
            (g.scale(mu_raw, lambda)?, g.scale(lv_raw, lambda)?)
        } else {
            (mu_raw, lv_raw)
        };
        let logits = match bind.logits {
            Some(ids) => {
                let l = head(g, ids, h)?;
                check_finite(g, l, || "logits head".to_string())?;
                Some(l)
            }
            None => None,
        };
        Ok(EncodedPosterior {
            mu,
            log_var,
            logits,
            lambda_applied: lambda,
        })
    }

    /// Reparameterized continuous draw `z = μ + exp(½ log σ²) ⊙ ε`.
    /// Gradients flow to μ and log σ², not to the noise.
    pub fn sample_continuous(
        &self,
        g: &mut Graph,
        post: &EncodedPosterior,
        eps: NodeId,
    ) -> Result<NodeId> {
        let half_lv = g.scale(post.log_var, 0.5)?;
        let sd = g.exp(half_lv)?;
        let scaled = g.mul(sd, eps)?;
        g.add(post.mu, scaled)
    }

    /// Gumbel-Softmax draw: `softmax((logits + gumbel)/τ)`, with hard
    /// assignments from the row argmax. When `straight_through` is
    /// configured the returned sample node is the one-hot argmax with
    /// identity gradients.
    pub fn sample_discrete(
        &self,
        g: &mut Graph,
        logits: NodeId,
        gumbel: NodeId,
    ) -> Result<DiscreteSample> {
        let tau = self.config.gumbel_temperature;
        let noisy = g.add(logits, gumbel)?;
        let scaled = g.scale(noisy, 1.0 / tau)?;
        let soft = g.softmax_rows(scaled)?;
        let k = g.cols(soft);
        let hard: Vec<usize> = g.data(soft).chunks_exact(k).map(argmax).collect();
        let sample = if self.config.straight_through {
            g.straight_through(soft)?
        } else {
            soft
        };
        Ok(DiscreteSample { sample, hard })
    }

    /// Decoder forward pass: mirrored MLP over `concat(z_c, z_d)` with a
    /// sigmoid output so reconstructions live in `(0,1)`.
    pub fn decode(
        &self,
        g: &mut Graph,
        bind: &Binding,
        z_c: NodeId,
        z_d: Option<NodeId>,
    ) -> Result<NodeId> {
        if self.config.k_classes > 0 && z_d.is_none() {
            return Err(Error::Config(
                "model has a discrete head; decode needs a discrete sample".into(),
            ));
        }
        let mut h = match z_d {
            Some(d) => g.concat_cols(z_c, d)?,
            None => z_c,
        };
        let last = bind.dec.len() - 1;
        for (i, &(w, b)) in bind.dec.iter().enumerate() {
            let lin = g.matmul(h, w)?;
            let lin = g.add(lin, b)?;
            // Check pre-activation: relu/sigmoid would mask a NaN or ±inf.
            check_finite(g, lin, || format!("decoder layer {i}"))?;
            h = if i == last { g.sigmoid(lin)? } else { g.relu(lin)? };
        }
        Ok(h)
    }

    /// Evaluation pass without noise: per-row posterior means and hard
    /// assignments from `argmax softmax(logits)` (empty when the model has
    /// no discrete head). λ = 1 and nothing here touches gradients.
    pub fn eval_latents(&self, x: &[f64], n: usize) -> Result<(Vec<f64>, Vec<usize>)> {
        let d = self.config.input_dim;
        let mut g = Graph::new();
        let bind = self.bind(&mut g);
        let xid = g.constant(Tensor::from_data(n, d, x.to_vec())?);
        let post = self.encode(&mut g, &bind, xid, 1.0)?;
        let mu = g.data(post.mu).to_vec();
        let hard = match post.logits {
            Some(l) => {
                let k = self.config.k_classes;
                g.data(l).chunks_exact(k).map(argmax).collect()
            }
            None => Vec::new(),
        };
        Ok((mu, hard))
    }
}

fn check_finite(g: &Graph, id: NodeId, what: impl Fn() -> String) -> Result<()> {
    if g.data(id).iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numerical(format!(
            "{} produced non-finite activations",
            what()
        )))
    }
}

// ───────────────────────── Checkpoints ─────────────────────────

const CKPT_MAGIC: &[u8; 5] = b"LFCK1";

/// A deserialized checkpoint: the model plus resumable training state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: JointVaeModel,
    pub iteration: u64,
    pub streams: Vec<StreamState>,
}

/// Write a checkpoint: magic, length-prefixed config JSON, every parameter
/// tensor as little-endian f64 in declaration order, the iteration
/// counter, then the PRNG stream states as JSON.
pub fn save_checkpoint(
    path: &Path,
    model: &JointVaeModel,
    iteration: u64,
    streams: &[StreamState],
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io_at(e, path))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io_at(e, path);
    w.write_all(CKPT_MAGIC).map_err(io)?;
    let cfg = serde_json::to_vec(&model.config)?;
    w.write_all(&(cfg.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&cfg).map_err(io)?;
    for t in model.params() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.write_all(&iteration.to_le_bytes()).map_err(io)?;
    let streams_json = serde_json::to_vec(streams)?;
    w.write_all(&streams_json).map_err(io)?;
    w.flush().map_err(io)?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = fs::File::open(path).map_err(|e| Error::io_at(e, path))?;
    let mut rd = BufReader::new(file);
    let io = |e: std::io::Error| Error::io_at(e, path);
    let bad = |detail: String| Error::Format {
        path: path.display().to_string(),
        detail,
    };
    let mut magic = [0u8; 5];
    rd.read_exact(&mut magic).map_err(io)?;
    if &magic != CKPT_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let mut len4 = [0u8; 4];
    rd.read_exact(&mut len4).map_err(io)?;
    let mut cfg_json = vec![0u8; u32::from_le_bytes(len4) as usize];
    rd.read_exact(&mut cfg_json).map_err(io)?;
    let config: ModelConfig =
        serde_json::from_slice(&cfg_json).map_err(|e| bad(format!("config JSON: {e}")))?;
    // Build a correctly shaped model, then overwrite every parameter.
    let mut model = JointVaeModel::new(config, 0)?;
    let mut buf = [0u8; 8];
    for t in model.params_mut() {
        for v in t.data_mut() {
            rd.read_exact(&mut buf).map_err(io)?;
            *v = f64::from_le_bytes(buf);
        }
    }
    let mut it8 = [0u8; 8];
    rd.read_exact(&mut it8).map_err(io)?;
    let iteration = u64::from_le_bytes(it8);
    let mut streams_json = Vec::new();
    rd.read_to_end(&mut streams_json).map_err(io)?;
    let streams: Vec<StreamState> =
        serde_json::from_slice(&streams_json).map_err(|e| bad(format!("streams JSON: {e}")))?;
    Ok(Checkpoint {
        model,
        iteration,
        streams,
    })
}
