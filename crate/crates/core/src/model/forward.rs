//! Differentiable batch forward pass used for training and gradient checks.

use crate::autodiff::{Tape, Var};
use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

use super::gating::{admissible, MASKED_LOGIT};
use super::{MoEModel, LAYER_NORM_EPS};

/// Where the Gumbel noise for a forward pass comes from.
pub enum Routing<'r> {
    /// `γ = 0`: masked softmax and plain argmax.
    NoiseFree,
    /// Fresh `Gumbel(0,1)` noise per token and expert.
    Gumbel(&'r mut RngStream),
    /// Reuse noise from an earlier pass.
    Noise(&'r [f64]),
    /// Reuse noise and expert choices from an earlier pass and replace the
    /// straight-through offset `1 - z_sel` by the recorded constant, so the
    /// forward value is a smooth function of the parameters whose exact
    /// derivative equals the straight-through gradient. Used by
    /// finite-difference checks.
    Replay(&'r RouteTrace),
}

/// Noise and selections of one batch forward pass, token-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteTrace {
    pub gamma: Vec<f64>,
    pub selection: Vec<usize>,
    pub z_selected: Vec<f64>,
}

pub struct BatchOutput {
    pub loss: Var,
    pub task: Var,
    pub lb: Var,
    pub logits: Var,
    /// Soft routing probabilities `[T×K]` over all tokens of the batch.
    pub z: Var,
    /// Hard selections with straight-through gradient, `[T]` (value 1 per token).
    pub o_selected: Var,
    /// Aggregation weights `[T]`, softmax within each sequence.
    pub alpha: Var,
    pub trace: RouteTrace,
    /// Token range of each sequence in the flattened batch.
    pub segments: Vec<(usize, usize)>,
    pub params: Vec<Var>,
}

/// Builds the training graph for `batch` on `tape`:
/// embedding, gating with privacy isolation, Gumbel-Softmax, straight-through
/// top-1 dispatch, experts, attention pooling, classification, and the loss
/// `L_task + λ_LB · L_lb` (mean cross-entropy over the batch).
pub fn forward_batch<'a>(
    model: &'a MoEModel,
    tape: &mut Tape<'a>,
    batch: &[(&TokenSequence, usize)],
    mut routing: Routing<'_>,
) -> Result<BatchOutput> {
    let cfg = model.config();
    let (k, kp) = (cfg.experts, cfg.privacy_experts);
    let h = model.handles();
    let vars = model.params().attach(tape, &model.frozen_params());
    let var = |id: crate::params::ParamId| vars[id.index()];

    let mut ids = Vec::new();
    let mut mask = Vec::new();
    let mut segments = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for (seq, label) in batch {
        if seq.is_empty() {
            return Err(Error::EmptySequence);
        }
        let start = ids.len();
        for &id in &seq.ids {
            if id as usize >= cfg.vocab_size {
                return Err(Error::Index {
                    what: "token id",
                    index: id as usize,
                    size: cfg.vocab_size,
                });
            }
            ids.push(id as usize);
        }
        mask.extend_from_slice(&seq.mask);
        segments.push((start, ids.len()));
        labels.push(*label);
    }
    let t = ids.len();

    let emb = tape.gather_rows(var(h.embeddings), &ids)?;
    let g = tape.matmul(emb, var(h.gate_w))?;
    let g = tape.add_row(g, var(h.gate_b))?;
    let adm: Vec<bool> = (0..t * k).map(|p| admissible(mask[p / k], p % k, kp)).collect();
    let g_prime = tape.mask_fill(g, adm.clone(), MASKED_LOGIT)?;

    let gamma: Vec<f64> = match &mut routing {
        Routing::NoiseFree => vec![0.0; t * k],
        Routing::Gumbel(rng) => crate::rng::gumbel_sample(rng, t * k),
        Routing::Noise(n) => n.to_vec(),
        Routing::Replay(tr) => tr.gamma.clone(),
    };
    if gamma.len() != t * k {
        return Err(Error::Shape {
            op: "gumbel noise",
            left: vec![t, k],
            right: vec![gamma.len()],
        });
    }
    let noisy = tape.add_const(g_prime, &gamma)?;
    let z = tape.softmax_rows(noisy, cfg.tau, Some(&adm))?;

    let selection: Vec<usize> = match &routing {
        Routing::Replay(tr) => tr.selection.clone(),
        _ => {
            let vals = tape.value(noisy);
            (0..t)
                .map(|i| {
                    let row = vals.row(i);
                    let mut best: Option<usize> = None;
                    for j in 0..k {
                        if adm[i * k + j] && best.is_none_or(|b| row[j] > row[b]) {
                            best = Some(j);
                        }
                    }
                    best.ok_or(Error::NoAdmissibleExpert { token: i })
                })
                .collect::<Result<_>>()?
        }
    };
    let z_sel = tape.pick_cols(z, &selection)?;
    let z_selected = tape.value(z_sel).data().to_vec();
    let o_sel = match &routing {
        Routing::Replay(tr) => {
            let offset: Vec<f64> = tr.z_selected.iter().map(|z| 1.0 - z).collect();
            tape.add_const(z_sel, &offset)?
        }
        _ => tape.detach_to(z_sel, Tensor::filled(&[t], 1.0))?,
    };

    // sparse dispatch: each expert only sees its own tokens
    let mut merged: Option<Var> = None;
    for j in 0..k {
        let rows: Vec<usize> = (0..t).filter(|&i| selection[i] == j).collect();
        if rows.is_empty() {
            continue;
        }
        let e = model.expert_params(j);
        let x = tape.gather_rows(emb, &rows)?;
        let a = tape.matmul(x, var(e.w1))?;
        let a = tape.add_row(a, var(e.b1))?;
        let a = tape.relu(a);
        let y = tape.matmul(a, var(e.w2))?;
        let y = tape.add_row(y, var(e.b2))?;
        let placed = tape.scatter_rows(y, &rows, t)?;
        merged = Some(match merged {
            Some(m) => tape.add(m, placed)?,
            None => placed,
        });
    }
    let expert_out = merged.ok_or(Error::NoTokensToAggregate)?;
    let h_prime = tape.scale_rows(expert_out, o_sel)?;

    let scores = tape.matvec(h_prime, var(h.agg_w))?;
    let alpha = tape.segment_softmax(scores, &segments)?;
    let pooled = tape.segment_weighted_sum(alpha, h_prime, &segments)?;
    let pooled = if cfg.use_layernorm {
        tape.layer_norm_rows(pooled, var(h.ln_gain), var(h.ln_bias), LAYER_NORM_EPS)?
    } else {
        pooled
    };
    let logits = tape.matmul(pooled, var(h.out_w))?;
    let logits = tape.add_row(logits, var(h.out_b))?;
    let ce = tape.cross_entropy_rows(logits, &labels)?;
    let task = tape.mean(ce);

    let lb = group_balance(tape, z, &mask, true, 0, kp)?;
    let lb_np = group_balance(tape, z, &mask, false, kp, k)?;
    let lb = match (lb, lb_np) {
        (Some(a), Some(b)) => tape.add(a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => tape.constant(Tensor::scalar(0.0)),
    };
    let weighted = tape.scale(lb, cfg.lambda_lb);
    let loss = tape.add(task, weighted)?;

    Ok(BatchOutput {
        loss,
        task,
        lb,
        logits,
        z,
        o_selected: o_sel,
        alpha,
        trace: RouteTrace {
            gamma,
            selection,
            z_selected,
        },
        segments,
        params: vars,
    })
}

/// `Σ_j (u_j - 1/|group|)²` with `u` the mean soft usage over the group's tokens.
fn group_balance(
    tape: &mut Tape<'_>,
    z: Var,
    mask: &[bool],
    sensitive: bool,
    start: usize,
    end: usize,
) -> Result<Option<Var>> {
    let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] == sensitive).collect();
    if rows.is_empty() {
        return Ok(None);
    }
    let zr = tape.gather_rows(z, &rows)?;
    let zg = tape.slice_cols(zr, start, end)?;
    let total = tape.sum_rows(zg);
    let usage = tape.scale(total, 1.0 / rows.len() as f64);
    let target = vec![-1.0 / (end - start) as f64; end - start];
    let dev = tape.add_const(usage, &target)?;
    let sq = tape.mul(dev, dev)?;
    Ok(Some(tape.sum(sq)))
}
