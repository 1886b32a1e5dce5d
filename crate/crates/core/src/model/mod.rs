//! The privacy-aware sparse MoE classifier.
//!
//! Tokens are embedded, routed top-1 to an expert inside their privacy group,
//! transformed, pooled with learned attention weights and classified. Training
//! goes through [`forward`] on a [`Tape`](crate::autodiff::Tape); inference
//! uses the tape-free path in this module so that per-token expert outputs can
//! be computed once and re-aggregated over any subset of tokens.

mod config;
pub mod forward;
pub mod gating;
pub mod train;

pub use config::MoEConfig;
pub use forward::{forward_batch, BatchOutput, RouteTrace, Routing};
pub use gating::{
    apply_privacy_isolation, gate_logits, gumbel_softmax, gumbel_softmax_with_noise, hard_select, MASKED_LOGIT,
};
pub use train::{
    accuracy, evaluate, expert_usage, isolation_audit, train, ExpertUsage, IsolationAudit, RoundMetrics, TrainingTrace,
};

use std::path::Path;

use crate::checkpoint::{Container, MODEL_MAGIC};
use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::{self, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpertParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Handles {
    pub embeddings: ParamId,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
    pub agg_w: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct MoEModel {
    config: MoEConfig,
    params: ParamStore,
    handles: Handles,
    experts: Vec<ExpertParams>,
}

pub(crate) fn glorot(rng: &mut RngStream, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| (2.0 * rng.uniform_open() - 1.0) * limit)
        .collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

/// Per-token results of the noise-free forward pass over a whole sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenPass {
    /// Embeddings `h`, `[L×d]`.
    pub embeddings: Tensor,
    /// Selected expert per token.
    pub selection: Vec<usize>,
    /// Expert outputs `h'`, `[L×d]`.
    pub outputs: Tensor,
    /// Aggregation logits `wᵀh'_i`.
    pub scores: Vec<f64>,
}

/// Result of pooling and classifying an active token set.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub active: Vec<usize>,
    pub alpha: Vec<f64>,
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl MoEModel {
    pub fn new(config: MoEConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let (d, k, hid, c) = (config.d, config.experts, config.expert_hidden, config.num_classes);
        let mut p = ParamStore::new();
        let emb: Vec<f64> = (0..config.vocab_size * d).map(|_| 0.5 * rng.gaussian()).collect();
        let embeddings = p.add("embeddings", Tensor::from_parts(vec![config.vocab_size, d], emb));
        let gate_w = p.add("gate.weight", glorot(rng, d, k));
        let gate_b = p.add("gate.bias", Tensor::zeros(&[k]));
        let experts = (0..k)
            .map(|j| ExpertParams {
                w1: p.add(format!("expert.{j}.w1"), glorot(rng, d, hid)),
                b1: p.add(format!("expert.{j}.b1"), Tensor::zeros(&[hid])),
                w2: p.add(format!("expert.{j}.w2"), glorot(rng, hid, d)),
                b2: p.add(format!("expert.{j}.b2"), Tensor::zeros(&[d])),
            })
            .collect();
        let handles = Handles {
            embeddings,
            gate_w,
            gate_b,
            agg_w: p.add("agg.w", Tensor::zeros(&[d])),
            ln_gain: p.add("agg.ln_gain", Tensor::filled(&[d], 1.0)),
            ln_bias: p.add("agg.ln_bias", Tensor::zeros(&[d])),
            out_w: p.add("out.weight", glorot(rng, d, c)),
            out_b: p.add("out.bias", Tensor::zeros(&[c])),
        };
        Ok(Self {
            config,
            params: p,
            handles,
            experts,
        })
    }

    pub fn config(&self) -> &MoEConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn expert_params(&self, j: usize) -> ExpertParams {
        self.experts[j]
    }

    pub(crate) fn handles(&self) -> Handles {
        self.handles
    }

    pub fn embeddings(&self) -> &Tensor {
        self.params.get(self.handles.embeddings)
    }

    pub fn gate_weight(&self) -> &Tensor {
        self.params.get(self.handles.gate_w)
    }

    pub fn gate_bias(&self) -> &Tensor {
        self.params.get(self.handles.gate_b)
    }

    pub fn aggregator_weight(&self) -> &Tensor {
        self.params.get(self.handles.agg_w)
    }

    /// Parameters that must not be updated (the embedding table when frozen).
    pub fn frozen_params(&self) -> Vec<ParamId> {
        if self.config.freeze_embeddings {
            vec![self.handles.embeddings]
        } else {
            Vec::new()
        }
    }

    /// Replaces the embedding table with imported vectors and freezes it.
    pub fn import_embeddings(&mut self, table: Tensor) -> Result<()> {
        let expected = [self.config.vocab_size, self.config.d];
        if table.shape() != expected {
            return Err(Error::Shape {
                op: "import_embeddings",
                left: expected.to_vec(),
                right: table.shape().to_vec(),
            });
        }
        *self.params.get_mut(self.handles.embeddings) = table;
        self.config.freeze_embeddings = true;
        Ok(())
    }

    /// Embedding rows `h_i` for every token of `seq`.
    pub fn embed(&self, seq: &TokenSequence) -> Result<Tensor> {
        let table = self.embeddings();
        let d = self.config.d;
        let mut data = Vec::with_capacity(seq.len() * d);
        for &id in &seq.ids {
            if id as usize >= self.config.vocab_size {
                return Err(Error::Index {
                    what: "token id",
                    index: id as usize,
                    size: self.config.vocab_size,
                });
            }
            data.extend_from_slice(table.row(id as usize));
        }
        Tensor::new(vec![seq.len(), d], data)
    }

    /// Noise-free top-1 expert for one token.
    pub fn route(&self, h: &[f64], sensitive: bool) -> usize {
        let k = self.config.experts;
        let mut g = tensor::matmul_raw(h, self.gate_weight().data(), 1, self.config.d, k);
        g.iter_mut().zip(self.gate_bias().data()).for_each(|(a, b)| *a += b);
        let kp = self.config.privacy_experts;
        let range = if sensitive { 0..kp } else { kp..k };
        let mut best = range.start;
        for j in range {
            if g[j] > g[best] {
                best = j;
            }
        }
        best
    }

    /// `Expert_j(h) = W2ᵀ relu(W1ᵀ h + b1) + b2`.
    pub fn expert_apply(&self, j: usize, h: &[f64]) -> Vec<f64> {
        let e = self.experts[j];
        let (d, hid) = (self.config.d, self.config.expert_hidden);
        let mut a = tensor::matmul_raw(h, self.params.get(e.w1).data(), 1, d, hid);
        a.iter_mut()
            .zip(self.params.get(e.b1).data())
            .for_each(|(v, b)| *v = (*v + b).max(0.0));
        let mut out = tensor::matmul_raw(&a, self.params.get(e.w2).data(), 1, hid, d);
        out.iter_mut().zip(self.params.get(e.b2).data()).for_each(|(v, b)| *v += b);
        out
    }

    /// `wᵀh'_i`.
    pub fn aggregation_score(&self, h_prime: &[f64]) -> f64 {
        tensor::dot(h_prime, self.aggregator_weight().data())
    }

    /// Runs routing and the selected experts on every token of `seq` (no noise).
    pub fn token_pass(&self, seq: &TokenSequence) -> Result<TokenPass> {
        let embeddings = self.embed(seq)?;
        let d = self.config.d;
        let mut selection = Vec::with_capacity(seq.len());
        let mut outputs = Vec::with_capacity(seq.len() * d);
        let mut scores = Vec::with_capacity(seq.len());
        for i in 0..seq.len() {
            let h = embeddings.row(i);
            let j = self.route(h, seq.mask[i]);
            let out = self.expert_apply(j, h);
            scores.push(self.aggregation_score(&out));
            outputs.extend(out);
            selection.push(j);
        }
        Ok(TokenPass {
            embeddings,
            selection,
            outputs: Tensor::from_parts(vec![seq.len(), d], outputs),
            scores,
        })
    }

    /// Attention pooling over `active` rows of `h_prime`. Returns `(α, pooled)`.
    pub fn aggregate(&self, h_prime: &Tensor, active: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        let scores: Vec<f64> = active
            .iter()
            .map(|&i| {
                if i >= h_prime.dims2().0 {
                    return Err(Error::Index {
                        what: "token",
                        index: i,
                        size: h_prime.dims2().0,
                    });
                }
                Ok(self.aggregation_score(h_prime.row(i)))
            })
            .collect::<Result<_>>()?;
        let alpha = aggregate_weights(&scores)?;
        Ok((alpha.clone(), pool(h_prime, active, &alpha)))
    }

    /// Optional layer norm, then the output layer.
    pub fn classify(&self, pooled: &[f64]) -> Vec<f64> {
        let h = self.handles;
        let x = if self.config.use_layernorm {
            tensor::layer_norm_slice(
                pooled,
                self.params.get(h.ln_gain).data(),
                self.params.get(h.ln_bias).data(),
                LAYER_NORM_EPS,
            )
            .out
        } else {
            pooled.to_vec()
        };
        let mut logits = tensor::matmul_raw(&x, self.params.get(h.out_w).data(), 1, self.config.d, self.config.num_classes);
        logits.iter_mut().zip(self.params.get(h.out_b).data()).for_each(|(l, b)| *l += b);
        logits
    }

    /// Pools and classifies the `active` tokens of a precomputed pass.
    pub fn head(&self, pass: &TokenPass, active: &[usize]) -> Result<HeadOutput> {
        let scores: Vec<f64> = active
            .iter()
            .map(|&i| {
                pass.scores.get(i).copied().ok_or(Error::Index {
                    what: "token",
                    index: i,
                    size: pass.scores.len(),
                })
            })
            .collect::<Result<_>>()?;
        let alpha = aggregate_weights(&scores)?;
        let pooled = pool(&pass.outputs, active, &alpha);
        let logits = self.classify(&pooled);
        let probs = tensor::softmax_slice(&logits, 1.0)?;
        Ok(HeadOutput {
            active: active.to_vec(),
            alpha,
            pooled,
            logits,
            probs,
        })
    }

    /// Full-sequence class probabilities.
    pub fn predict_proba(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        let pass = self.token_pass(seq)?;
        let all: Vec<usize> = (0..seq.len()).collect();
        Ok(self.head(&pass, &all)?.probs)
    }

    /// Rebuilds a model from checkpoint contents.
    pub fn from_parts<'n>(config: MoEConfig, arrays: impl IntoIterator<Item = (&'n str, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config, &mut RngStream::new(0, "placeholder"))?;
        model.params.load_from(arrays)?;
        Ok(model)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(MODEL_MAGIC);
        c.config = self.config.to_kv();
        c.arrays = self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config = MoEConfig::from_kv(&c.config)?;
        Self::from_parts(config, c.arrays.iter().map(|(n, t)| (n.as_str(), t.clone())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path, MODEL_MAGIC)?).map_err(|e| match e {
            Error::Io { .. } | Error::Checkpoint { .. } => e,
            other => Error::checkpoint(path, other.to_string()),
        })
    }

    /// Imports the `embeddings` array of any checkpoint-format file.
    pub fn import_embeddings_file(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let magic: [u8; 4] = bytes
            .get(..4)
            .and_then(|m| m.try_into().ok())
            .ok_or_else(|| Error::checkpoint(path, "file too short"))?;
        let c = Container::from_bytes(&bytes, magic, path)?;
        let table = c
            .array("embeddings")
            .ok_or_else(|| Error::checkpoint(path, "no array named \"embeddings\""))?;
        self.import_embeddings(table.clone())
    }
}

/// Softmax of aggregation scores over the active set.
pub fn aggregate_weights(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::NoTokensToAggregate);
    }
    tensor::softmax_slice(scores, 1.0)
}

fn pool(h_prime: &Tensor, active: &[usize], alpha: &[f64]) -> Vec<f64> {
    let d = h_prime.dims2().1;
    let mut pooled = vec![0.0; d];
    for (&i, &a) in active.iter().zip(alpha) {
        pooled.iter_mut().zip(h_prime.row(i)).for_each(|(p, v)| *p += a * v);
    }
    pooled
}

/// Group-wise load-balancing terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadBalance {
    pub privacy: f64,
    pub non_privacy: f64,
    pub total: f64,
}

/// Squared deviation of mean soft usage from uniform, within each expert group.
/// A group with no tokens contributes zero.
pub fn load_balance_loss(z: &Tensor, mask: &[bool], privacy_experts: usize) -> Result<LoadBalance> {
    let (l, k) = z.dims2();
    if mask.len() != l || privacy_experts == 0 || privacy_experts >= k {
        return Err(Error::Shape {
            op: "load_balance_loss",
            left: z.shape().to_vec(),
            right: vec![mask.len()],
        });
    }
    let group = |sensitive: bool, cols: std::ops::Range<usize>| -> f64 {
        let rows: Vec<usize> = (0..l).filter(|&i| mask[i] == sensitive).collect();
        if rows.is_empty() {
            return 0.0;
        }
        let width = cols.len() as f64;
        cols.map(|j| {
            let u = rows.iter().map(|&i| z.row(i)[j]).sum::<f64>() / rows.len() as f64;
            (u - 1.0 / width).powi(2)
        })
        .sum()
    };
    let privacy = group(true, 0..privacy_experts);
    let non_privacy = group(false, privacy_experts..k);
    Ok(LoadBalance {
        privacy,
        non_privacy,
        total: privacy + non_privacy,
    })
}

/// `L_total = L_task + λ_LB · L_lb`.
pub fn total_loss(task: f64, lb: f64, lambda_lb: f64) -> f64 {
    task + lambda_lb * lb
}
