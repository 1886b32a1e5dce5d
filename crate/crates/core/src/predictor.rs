//! Client-side importance predictor.
//!
//! A small post-LN transformer encoder over token embeddings that estimates
//! the MoE aggregation weights `α` without running the remote experts. There
//! is no positional encoding, so the output is permutation-equivariant.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{Container, PREDICTOR_MAGIC};
use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::model::{glorot, MoEModel, LAYER_NORM_EPS};
use crate::params::{collect_grads, Optimizer, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorConfig {
    /// Input embedding width; must match the MoE's `d`.
    pub d: usize,
    pub proj_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            d: 64,
            proj_dim: 32,
            layers: 2,
            heads: 4,
            ffn_hidden: 64,
            learning_rate: 3e-3,
            epochs: 30,
            batch_size: 16,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.proj_dim == 0 || self.proj_dim > self.d {
            return bad(format!("proj_dim must be in 1..={} (got {})", self.d, self.proj_dim));
        }
        if self.layers == 0 {
            return bad("predictor needs at least one layer".into());
        }
        if self.heads == 0 || !self.proj_dim.is_multiple_of(self.heads) {
            return bad(format!("heads ({}) must divide proj_dim ({})", self.heads, self.proj_dim));
        }
        if self.ffn_hidden == 0 || self.batch_size == 0 {
            return bad("ffn_hidden and batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        [
            ("d", self.d.to_string()),
            ("proj_dim", self.proj_dim.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_hidden", self.ffn_hidden.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_kv(kv: &[(String, String)]) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in kv {
            let bad = || Error::Config(format!("bad value {v:?} for {k}"));
            match k.as_str() {
                "d" => c.d = v.parse().map_err(|_| bad())?,
                "proj_dim" => c.proj_dim = v.parse().map_err(|_| bad())?,
                "layers" => c.layers = v.parse().map_err(|_| bad())?,
                "heads" => c.heads = v.parse().map_err(|_| bad())?,
                "ffn_hidden" => c.ffn_hidden = v.parse().map_err(|_| bad())?,
                "learning_rate" => c.learning_rate = v.parse().map_err(|_| bad())?,
                "epochs" => c.epochs = v.parse().map_err(|_| bad())?,
                "batch_size" => c.batch_size = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::Config(format!("unknown predictor key {k:?}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// One training pair: token embeddings and the MoE's aggregation weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceRecord {
    pub embeddings: Tensor,
    pub target: Vec<f64>,
}

/// Noise-free full-sequence `α` for every example.
pub fn collect_dataset(model: &MoEModel, set: &[(TokenSequence, usize)]) -> Result<Vec<ImportanceRecord>> {
    set.iter()
        .map(|(seq, _)| {
            let pass = model.token_pass(seq)?;
            let all: Vec<usize> = (0..seq.len()).collect();
            let (alpha, _) = model.aggregate(&pass.outputs, &all)?;
            Ok(ImportanceRecord {
                embeddings: pass.embeddings,
                target: alpha,
            })
        })
        .collect()
}

/// `Σ α_i ln(α_i / α̂_i)` with `0 · ln 0 = 0`.
pub fn kl_loss(alpha: &[f64], alpha_hat: &[f64]) -> Result<f64> {
    if alpha.len() != alpha_hat.len() {
        return Err(Error::Shape {
            op: "kl_loss",
            left: vec![alpha.len()],
            right: vec![alpha_hat.len()],
        });
    }
    let mut kl = 0.0;
    for (i, (&p, &q)) in alpha.iter().zip(alpha_hat).enumerate() {
        if p == 0.0 {
            continue;
        }
        if q <= 0.0 {
            return Err(Error::Domain(format!(
                "predicted weight {i} is {q} where the target is {p}"
            )));
        }
        kl += p * (p / q).ln();
    }
    Ok(kl)
}

#[derive(Debug, Clone, Copy)]
struct Block {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln1_g: usize,
    ln1_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2_g: usize,
    ln2_b: usize,
}

#[derive(Debug, Clone)]
pub struct ImportancePredictor {
    config: PredictorConfig,
    params: ParamStore,
    w_in: usize,
    b_in: usize,
    blocks: Vec<Block>,
    w_score: usize,
}

impl ImportancePredictor {
    pub fn new(config: PredictorConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let (d, p, f) = (config.d, config.proj_dim, config.ffn_hidden);
        let mut ps = ParamStore::new();
        let add = |ps: &mut ParamStore, name: String, t: Tensor| ps.add(name, t).index();
        let w_in = add(&mut ps, "in.weight".into(), glorot(rng, d, p));
        let b_in = add(&mut ps, "in.bias".into(), Tensor::zeros(&[p]));
        let mut blocks = Vec::with_capacity(config.layers);
        for b in 0..config.layers {
            let n = |s: &str| format!("block.{b}.{s}");
            blocks.push(Block {
                wq: add(&mut ps, n("q.weight"), glorot(rng, p, p)),
                bq: add(&mut ps, n("q.bias"), Tensor::zeros(&[p])),
                wk: add(&mut ps, n("k.weight"), glorot(rng, p, p)),
                bk: add(&mut ps, n("k.bias"), Tensor::zeros(&[p])),
                wv: add(&mut ps, n("v.weight"), glorot(rng, p, p)),
                bv: add(&mut ps, n("v.bias"), Tensor::zeros(&[p])),
                wo: add(&mut ps, n("o.weight"), glorot(rng, p, p)),
                bo: add(&mut ps, n("o.bias"), Tensor::zeros(&[p])),
                ln1_g: add(&mut ps, n("ln1.gain"), Tensor::filled(&[p], 1.0)),
                ln1_b: add(&mut ps, n("ln1.bias"), Tensor::zeros(&[p])),
                w1: add(&mut ps, n("ffn.w1"), glorot(rng, p, f)),
                b1: add(&mut ps, n("ffn.b1"), Tensor::zeros(&[f])),
                w2: add(&mut ps, n("ffn.w2"), glorot(rng, f, p)),
                b2: add(&mut ps, n("ffn.b2"), Tensor::zeros(&[p])),
                ln2_g: add(&mut ps, n("ln2.gain"), Tensor::filled(&[p], 1.0)),
                ln2_b: add(&mut ps, n("ln2.bias"), Tensor::zeros(&[p])),
            });
        }
        // a score bias would cancel in the softmax
        let w_score = add(&mut ps, "score.weight".into(), glorot(rng, p, 1).reshape(&[1, p])?);
        Ok(Self {
            config,
            params: ps,
            w_in,
            b_in,
            blocks,
            w_score,
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Builds the graph for one sequence; returns log α̂ as a `1×L` row.
    pub fn forward(&self, tape: &mut Tape<'_>, p: &[Var], h: &Tensor) -> Result<Var> {
        if h.rank() != 2 || h.shape()[1] != self.config.d {
            return Err(Error::Shape {
                op: "predictor input",
                left: vec![0, self.config.d],
                right: h.shape().to_vec(),
            });
        }
        if h.shape()[0] == 0 {
            return Err(Error::EmptySequence);
        }
        let heads = self.config.heads;
        let dh = self.config.proj_dim / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        let x = tape.constant(h.clone());
        let x = tape.matmul(x, p[self.w_in])?;
        let mut x = tape.add_row(x, p[self.b_in])?;
        for b in &self.blocks {
            let q = tape.matmul(x, p[b.wq])?;
            let q = tape.add_row(q, p[b.bq])?;
            let k = tape.matmul(x, p[b.wk])?;
            let k = tape.add_row(k, p[b.bk])?;
            let v = tape.matmul(x, p[b.wv])?;
            let v = tape.add_row(v, p[b.bv])?;
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let (lo, hi) = (hd * dh, (hd + 1) * dh);
                let qh = tape.slice_cols(q, lo, hi)?;
                let kh = tape.slice_cols(k, lo, hi)?;
                let vh = tape.slice_cols(v, lo, hi)?;
                let s = tape.matmul_nt(qh, kh)?;
                let s = tape.scale(s, inv_sqrt);
                let a = tape.softmax_rows(s, 1.0, None)?;
                outs.push(tape.matmul(a, vh)?);
            }
            let o = tape.concat_cols(&outs)?;
            let o = tape.matmul(o, p[b.wo])?;
            let o = tape.add_row(o, p[b.bo])?;
            let r = tape.add(x, o)?;
            x = tape.layer_norm_rows(r, p[b.ln1_g], p[b.ln1_b], LAYER_NORM_EPS)?;

            let f = tape.matmul(x, p[b.w1])?;
            let f = tape.add_row(f, p[b.b1])?;
            let f = tape.relu(f);
            let f = tape.matmul(f, p[b.w2])?;
            let f = tape.add_row(f, p[b.b2])?;
            let r = tape.add(x, f)?;
            x = tape.layer_norm_rows(r, p[b.ln2_g], p[b.ln2_b], LAYER_NORM_EPS)?;
        }
        let scores = tape.matmul_nt(p[self.w_score], x)?;
        Ok(tape.log_softmax_rows(scores))
    }

    /// α̂ over the rows of `h`.
    pub fn predict(&self, h: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|(_, t)| tape.constant_ref(t)).collect();
        let log_p = self.forward(&mut tape, &vars, h)?;
        Ok(tape.value(log_p).data().iter().map(|v| v.exp()).collect())
    }

    /// Importance scores for a tokenized sequence, using the model's embedding table.
    pub fn predict_sequence(&self, model: &MoEModel, seq: &TokenSequence) -> Result<Vec<f64>> {
        self.predict(&model.embed(seq)?)
    }

    /// Mean KL over a batch as a scalar on `tape`, plus the constant entropy
    /// part that the graph leaves out.
    pub fn batch_loss(&self, tape: &mut Tape<'_>, p: &[Var], batch: &[&ImportanceRecord]) -> Result<(Var, f64)> {
        let mut total: Option<Var> = None;
        let mut neg_entropy = 0.0;
        for r in batch {
            let log_p = self.forward(tape, p, &r.embeddings)?;
            let l = r.target.len();
            let target = tape.constant(Tensor::new(vec![1, l], r.target.clone())?);
            let cross = tape.mul(target, log_p)?;
            let cross = tape.sum(cross);
            total = Some(match total {
                Some(t) => tape.add(t, cross)?,
                None => cross,
            });
            neg_entropy += r.target.iter().filter(|&&a| a > 0.0).map(|a| a * a.ln()).sum::<f64>();
        }
        let total = total.ok_or_else(|| Error::Contract("empty predictor batch".into()))?;
        let n = batch.len() as f64;
        Ok((tape.scale(total, -1.0 / n), neg_entropy / n))
    }

    pub fn mean_kl(&self, records: &[ImportanceRecord]) -> Result<f64> {
        let mut sum = 0.0;
        for r in records {
            sum += kl_loss(&r.target, &self.predict(&r.embeddings)?)?;
        }
        Ok(sum / records.len().max(1) as f64)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(PREDICTOR_MAGIC);
        c.config = self.config.to_kv();
        c.arrays = self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config = PredictorConfig::from_kv(&c.config)?;
        let mut p = Self::new(config, &mut RngStream::new(0, "placeholder"))?;
        p.params.load_from(c.arrays.iter().map(|(n, t)| (n.as_str(), t.clone())))?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path, PREDICTOR_MAGIC)?).map_err(|e| match e {
            Error::Io { .. } | Error::Checkpoint { .. } => e,
            other => Error::checkpoint(path, other.to_string()),
        })
    }
}

/// Mean training KL per epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictorTrace {
    pub epoch_kl: Vec<f64>,
}

/// Adam on mean KL over shuffled minibatches.
pub fn train_predictor(
    records: &[ImportanceRecord],
    config: PredictorConfig,
    seed: u64,
) -> Result<(ImportancePredictor, PredictorTrace)> {
    if records.is_empty() {
        return Err(Error::Config("no importance records to train on".into()));
    }
    let mut predictor = ImportancePredictor::new(config, &mut RngStream::new(seed, "predictor/init"))?;
    let cfg = predictor.config.clone();
    let mut shuffle = RngStream::new(seed, "predictor/shuffle");
    let mut opt = Optimizer::adam(cfg.learning_rate).with_clip_norm(5.0);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut trace = PredictorTrace::default();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut kl_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&ImportanceRecord> = chunk.iter().map(|&i| &records[i]).collect();
            let grads = {
                let mut tape = Tape::new();
                let vars: Vec<Var> = predictor.params.iter().map(|(_, t)| tape.param(t)).collect();
                let (loss, neg_entropy) = predictor.batch_loss(&mut tape, &vars, &batch)?;
                let kl = tape.value(loss).item() + neg_entropy;
                if !kl.is_finite() {
                    return Err(Error::Diverged { stage: "epoch", index: epoch });
                }
                kl_sum += kl * batch.len() as f64;
                let mut g = tape.backward(loss)?;
                collect_grads(&mut g, &vars)
            };
            opt.step(&mut predictor.params, &grads);
        }
        if !predictor.params.all_finite() {
            return Err(Error::Diverged { stage: "epoch", index: epoch });
        }
        trace.epoch_kl.push(kl_sum / records.len() as f64);
    }
    Ok((predictor, trace))
}
