//! Minibatch training, evaluation under offloading decisions, and expert
//! utilization statistics.

use rand::seq::SliceRandom;

use crate::autodiff::Tape;
use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::params::{collect_grads, Optimizer};
use crate::rng::RngStream;
use crate::scheduler::OffloadDecision;
use crate::tensor::{self, argmax};

use super::forward::{forward_batch, Routing};
use super::gating::admissible;
use super::MoEModel;

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub loss: f64,
    pub task_loss: f64,
    pub lb_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingTrace {
    pub rounds: Vec<RoundMetrics>,
}

impl TrainingTrace {
    pub fn accuracies(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.test_accuracy).collect()
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.rounds.last().map(|r| r.test_accuracy)
    }
}

/// SGD with momentum on `L_task + λ_LB · L_lb`; one round is one pass over
/// `train_set`. Test accuracy (all tokens, noise-free routing) is recorded
/// after every round. All randomness derives from `seed`.
pub fn train(
    model: &mut MoEModel,
    train_set: &[(TokenSequence, usize)],
    test_set: &[(TokenSequence, usize)],
    seed: u64,
) -> Result<TrainingTrace> {
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let cfg = model.config().clone();
    let mut shuffle = RngStream::new(seed, "train/shuffle");
    let mut gumbel = RngStream::new(seed, "train/gumbel");
    let mut opt = Optimizer::sgd_momentum(cfg.learning_rate, cfg.momentum).with_clip_norm(5.0);
    let frozen = model.frozen_params();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut trace = TrainingTrace::default();

    for round in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut task_sum, mut lb_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&TokenSequence, usize)> = chunk.iter().map(|&i| (&train_set[i].0, train_set[i].1)).collect();
            let mut grads = {
                let mut tape = Tape::new();
                let out = forward_batch(model, &mut tape, &batch, Routing::Gumbel(&mut gumbel))?;
                let loss = tape.value(out.loss).item();
                if !loss.is_finite() {
                    return Err(Error::Diverged { stage: "round", index: round });
                }
                loss_sum += loss;
                task_sum += tape.value(out.task).item();
                lb_sum += tape.value(out.lb).item();
                let mut g = tape.backward(out.loss)?;
                collect_grads(&mut g, &out.params)
            };
            for id in &frozen {
                grads[id.index()] = None;
            }
            opt.step(model.params_mut(), &grads);
            batches += 1;
        }
        if !model.params().all_finite() {
            return Err(Error::Diverged { stage: "round", index: round });
        }
        let n = batches as f64;
        trace.rounds.push(RoundMetrics {
            round,
            loss: loss_sum / n,
            task_loss: task_sum / n,
            lb_loss: lb_sum / n,
            test_accuracy: accuracy(model, test_set)?,
        });
    }
    Ok(trace)
}

/// Full-token accuracy with noise-free routing.
pub fn accuracy(model: &MoEModel, set: &[(TokenSequence, usize)]) -> Result<f64> {
    evaluate(model, set, |seq| Ok(OffloadDecision::all(seq)))
}

/// Accuracy when each example is processed on its sensitive tokens plus the
/// non-sensitive tokens chosen by `decide`. Dropped tokens are excluded from
/// pooling. An example with no active token counts as misclassified.
pub fn evaluate(
    model: &MoEModel,
    set: &[(TokenSequence, usize)],
    mut decide: impl FnMut(&TokenSequence) -> Result<OffloadDecision>,
) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (seq, label) in set {
        let decision = decide(seq)?;
        let active = decision.active_set(seq)?;
        if active.is_empty() {
            continue;
        }
        let pass = model.token_pass(seq)?;
        let head = model.head(&pass, &active)?;
        if argmax(&head.probs) == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Per-expert usage over a dataset: hard top-1 dispatch counts and the soft
/// usage `u`, the mean gate probability over the tokens of each group.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertUsage {
    pub counts: Vec<usize>,
    pub soft: Vec<f64>,
    pub privacy_experts: usize,
}

impl ExpertUsage {
    fn group(&self, privacy: bool) -> &[usize] {
        if privacy {
            &self.counts[..self.privacy_experts]
        } else {
            &self.counts[self.privacy_experts..]
        }
    }

    pub fn fractions(&self, privacy: bool) -> Vec<f64> {
        let g = self.group(privacy);
        let total: usize = g.iter().sum();
        g.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
    }

    /// Max over min soft usage within a group.
    pub fn soft_ratio(&self, privacy: bool) -> f64 {
        let g = if privacy {
            &self.soft[..self.privacy_experts]
        } else {
            &self.soft[self.privacy_experts..]
        };
        let max = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = g.iter().cloned().fold(f64::INFINITY, f64::min);
        max / min
    }

    /// Max over min dispatch count within a group; infinite if an expert is idle.
    pub fn max_min_ratio(&self, privacy: bool) -> f64 {
        let g = self.group(privacy);
        let max = *g.iter().max().unwrap_or(&0) as f64;
        let min = *g.iter().min().unwrap_or(&0) as f64;
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }
}

/// Top-1 dispatch counts and soft usage over all tokens of `set`. With
/// `noise` the routing matches training (fresh Gumbel draws, so `soft` is the
/// balance loss's `u` over the whole set); without it, inference routing.
pub fn expert_usage(
    model: &MoEModel,
    set: &[(TokenSequence, usize)],
    mut noise: Option<&mut RngStream>,
) -> Result<ExpertUsage> {
    let cfg = model.config();
    let (k, kp) = (cfg.experts, cfg.privacy_experts);
    let mut counts = vec![0usize; k];
    let mut soft = vec![0.0; k];
    let mut group_tokens = [0usize; 2];
    for (seq, _) in set {
        let h = model.embed(seq)?;
        for i in 0..seq.len() {
            let mut g = tensor::matmul_raw(h.row(i), model.gate_weight().data(), 1, cfg.d, k);
            g.iter_mut().zip(model.gate_bias().data()).for_each(|(a, b)| *a += b);
            if let Some(rng) = noise.as_deref_mut() {
                g.iter_mut().for_each(|v| *v += rng.gumbel());
            }
            let adm: Vec<bool> = (0..k).map(|j| admissible(seq.mask[i], j, kp)).collect();
            let p = tensor::masked_softmax_slice(&g, cfg.tau, &adm).ok_or(Error::NoAdmissibleComponent)?;
            soft.iter_mut().zip(&p).for_each(|(s, q)| *s += q);
            group_tokens[seq.mask[i] as usize] += 1;
            let mut best: Option<usize> = None;
            for j in 0..k {
                if admissible(seq.mask[i], j, kp) && best.is_none_or(|b| g[j] > g[b]) {
                    best = Some(j);
                }
            }
            counts[best.expect("both groups are nonempty")] += 1;
        }
    }
    for (j, s) in soft.iter_mut().enumerate() {
        *s /= group_tokens[(j < kp) as usize].max(1) as f64;
    }
    Ok(ExpertUsage {
        counts,
        soft,
        privacy_experts: kp,
    })
}

/// Routing outcome of an [`isolation_audit`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IsolationAudit {
    pub tokens: usize,
    /// Tokens with any nonzero soft probability outside their group.
    pub soft_violations: usize,
    /// Tokens whose top-1 expert lies outside their group.
    pub hard_violations: usize,
}

/// Runs the training forward pass (fresh Gumbel noise) over `set` and counts
/// routing decisions that cross the privacy boundary.
pub fn isolation_audit(model: &MoEModel, set: &[(TokenSequence, usize)], rng: &mut RngStream) -> Result<IsolationAudit> {
    let (k, kp) = (model.config().experts, model.config().privacy_experts);
    let mut audit = IsolationAudit {
        tokens: 0,
        soft_violations: 0,
        hard_violations: 0,
    };
    for chunk in set.chunks(64) {
        let batch: Vec<(&TokenSequence, usize)> = chunk.iter().map(|(s, l)| (s, *l)).collect();
        let mut tape = Tape::new();
        let out = forward_batch(model, &mut tape, &batch, Routing::Gumbel(&mut *rng))?;
        let z = tape.value(out.z);
        let mask: Vec<bool> = chunk.iter().flat_map(|(s, _)| s.mask.iter().copied()).collect();
        for (i, &sensitive) in mask.iter().enumerate() {
            let row = z.row(i);
            if (0..k).any(|j| !admissible(sensitive, j, kp) && row[j] != 0.0) {
                audit.soft_violations += 1;
            }
            if !admissible(sensitive, out.trace.selection[i], kp) {
                audit.hard_violations += 1;
            }
        }
        audit.tokens += mask.len();
    }
    Ok(audit)
}
