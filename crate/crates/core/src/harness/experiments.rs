//! Training, evaluation and sweep drivers. Every function takes its
//! randomness from the configured seed through labelled streams, so a
//! (config, seed) pair fixes every number produced here.

use crate::channel::{self, ChannelParams};
use crate::corpus::{Corpus, TokenSequence};
use crate::error::{Error, Result};
use crate::model::{self, MoEModel, TokenPass, TrainingTrace};
use crate::predictor::{self, ImportancePredictor, PredictorTrace};
use crate::rng::RngStream;
use crate::scheduler::{self, OffloadDecision, Strategy};
use crate::tensor::{argmax, Tensor};

use super::config::ExperimentConfig;

pub type Labeled = Vec<(TokenSequence, usize)>;

/// Synthetic corpus drawn from the seed, or the configured CSV pair.
pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    match (&cfg.data.train_csv, &cfg.data.test_csv) {
        (Some(train), Some(test)) => Corpus::from_csv(train, test, cfg.data.max_len),
        _ => Corpus::synthetic(
            &mut RngStream::new(cfg.seed, "corpus"),
            &cfg.data.synth,
            cfg.data.test_fraction,
            cfg.data.max_len,
        ),
    }
}

/// Fresh model sized for `corpus`, with imported embeddings if configured.
pub fn build_model(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<MoEModel> {
    let mut mc = cfg.model.clone();
    mc.vocab_size = corpus.vocab.len();
    mc.num_classes = corpus.num_classes();
    let mut model = MoEModel::new(mc, &mut RngStream::new(cfg.seed, "init"))?;
    if let Some(path) = &cfg.import_embeddings {
        model.import_embeddings_file(path)?;
    }
    Ok(model)
}

/// Trains from scratch. Parameters are rounded to single precision at the
/// end so that the in-memory model equals its checkpoint.
pub fn run_train(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<(MoEModel, TrainingTrace)> {
    let mut model = build_model(cfg, corpus)?;
    let train = corpus.encode_all(&corpus.train)?;
    let test = corpus.encode_all(&corpus.test)?;
    let trace = model::train(&mut model, &train, &test, cfg.seed)?;
    model.params_mut().round_to_f32();
    Ok((model, trace))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorReport {
    pub train_kl: f64,
    pub test_kl: f64,
    /// Mean KL of the uniform distribution against the held-out targets.
    pub uniform_kl: f64,
    /// Fraction of held-out sequences whose highest-weight token is also the predictor's.
    pub top1_agreement: f64,
}

/// Fits the predictor on training-split targets and scores it on the test split.
pub fn run_train_predictor(
    cfg: &ExperimentConfig,
    model: &MoEModel,
    corpus: &Corpus,
) -> Result<(ImportancePredictor, PredictorTrace, PredictorReport)> {
    let train = predictor::collect_dataset(model, &corpus.encode_all(&corpus.train)?)?;
    let test = predictor::collect_dataset(model, &corpus.encode_all(&corpus.test)?)?;
    let mut pc = cfg.predictor.clone();
    pc.d = model.config().d;
    let (mut p, trace) = predictor::train_predictor(&train, pc, cfg.seed)?;
    p.params_mut().round_to_f32();

    let mut uniform = 0.0;
    let mut agree = 0usize;
    for r in &test {
        let l = r.target.len();
        uniform += predictor::kl_loss(&r.target, &vec![1.0 / l as f64; l])?;
        if argmax(&p.predict(&r.embeddings)?) == argmax(&r.target) {
            agree += 1;
        }
    }
    let n = test.len().max(1) as f64;
    let report = PredictorReport {
        train_kl: p.mean_kl(&train)?,
        test_kl: p.mean_kl(&test)?,
        uniform_kl: uniform / n,
        top1_agreement: agree as f64 / n,
    };
    Ok((p, trace, report))
}

/// A test example with its expert outputs and predicted importance computed once.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub seq: TokenSequence,
    pub label: usize,
    pub pass: TokenPass,
    pub scores: Vec<f64>,
}

pub fn prepare(model: &MoEModel, predictor: &ImportancePredictor, set: &[(TokenSequence, usize)]) -> Result<Vec<Prepared>> {
    set.iter()
        .map(|(seq, label)| {
            let pass = model.token_pass(seq)?;
            let scores = predictor.predict(&pass.embeddings)?;
            Ok(Prepared {
                seq: seq.clone(),
                label: *label,
                pass,
                scores,
            })
        })
        .collect()
}

/// Largest non-sensitive count in `prepared`; budgets above it change nothing.
pub fn max_non_sensitive(prepared: &[Prepared]) -> usize {
    prepared.iter().map(|p| p.seq.non_sensitive().len()).max().unwrap_or(0)
}

fn correct(model: &MoEModel, p: &Prepared, decision: &OffloadDecision) -> Result<bool> {
    let active = decision.active_set(&p.seq)?;
    if active.is_empty() {
        return Ok(false);
    }
    Ok(argmax(&model.head(&p.pass, &active)?.probs) == p.label)
}

fn random_stream(seed: u64, budget: usize, trial: usize) -> RngStream {
    RngStream::new(seed, format!("random/k{budget}/trial{trial}"))
}

/// Accuracy and mean uploaded tokens per example at one budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub accuracy: f64,
    pub accuracy_std: f64,
    pub tokens_used: f64,
    pub trials: usize,
}

/// One strategy at one per-example budget. `Random` averages `trials`
/// independent draws and reports their sample standard deviation.
pub fn evaluate_point(
    model: &MoEModel,
    prepared: &[Prepared],
    strategy: Strategy,
    budget: usize,
    seed: u64,
    trials: usize,
) -> Result<Point> {
    if prepared.is_empty() {
        return Err(Error::Config("no examples to evaluate".into()));
    }
    let n = prepared.len() as f64;
    let runs = if strategy == Strategy::Random { trials.max(1) } else { 1 };
    let mut accs = Vec::with_capacity(runs);
    let mut tokens = 0usize;
    for t in 0..runs {
        let mut rng = random_stream(seed, budget, t);
        let mut hits = 0usize;
        for p in prepared {
            let decision = match strategy {
                Strategy::TopK => scheduler::select_topk(&p.scores, &p.seq, budget)?,
                Strategy::Random => scheduler::select_random(&p.seq, budget, &mut rng),
                Strategy::All => OffloadDecision::all(&p.seq),
                Strategy::Oracle => scheduler::brute_force_oracle(model, &p.seq, p.label, budget)?.decision,
            };
            tokens += decision.selected.len();
            hits += correct(model, p, &decision)? as usize;
        }
        accs.push(hits as f64 / n);
    }
    let mean = accs.iter().sum::<f64>() / runs as f64;
    let std = if runs > 1 {
        (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (runs - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(Point {
        accuracy: mean,
        accuracy_std: std,
        tokens_used: tokens as f64 / (n * runs as f64),
        trials: runs,
    })
}

/// Accuracy for budgets `0..=max_k`, indexed by budget.
pub fn accuracy_curve(
    model: &MoEModel,
    prepared: &[Prepared],
    strategy: Strategy,
    max_k: usize,
    seed: u64,
    trials: usize,
) -> Result<Vec<Point>> {
    (0..=max_k)
        .map(|k| evaluate_point(model, prepared, strategy, k, seed, trials))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetRow {
    pub budget: usize,
    pub strategy: Strategy,
    pub point: Point,
}

pub fn run_budget_sweep(cfg: &ExperimentConfig, model: &MoEModel, prepared: &[Prepared]) -> Result<Vec<BudgetRow>> {
    let mut rows = Vec::new();
    for &k in &cfg.sweep.budgets {
        for strategy in [Strategy::TopK, Strategy::Random] {
            rows.push(BudgetRow {
                budget: k,
                strategy,
                point: evaluate_point(model, prepared, strategy, k, cfg.seed, cfg.sweep.trials)?,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceRow {
    pub distance: f64,
    pub m_ul: u64,
    pub strategy: Strategy,
    /// Smallest budget reaching the best accuracy available under `m_ul`.
    pub tokens_required: usize,
    pub accuracy: f64,
}

/// Median budget per distance; draws for distance `i` come from their own stream.
pub fn median_budgets(cfg: &ExperimentConfig, channel: &ChannelParams) -> Result<Vec<u64>> {
    cfg.sweep
        .distances
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let mut rng = RngStream::new(cfg.seed, format!("channel/distance{i}"));
            channel::median_budget(&channel.with_distance(d), &mut rng, cfg.sweep.channel_draws)
        })
        .collect()
}

fn tokens_to_peak(curve: &[Point], cap: usize) -> (usize, f64) {
    let reachable = &curve[..=cap.min(curve.len() - 1)];
    let peak = reachable.iter().map(|p| p.accuracy).fold(f64::NEG_INFINITY, f64::max);
    let k = reachable.iter().position(|p| p.accuracy >= peak).unwrap();
    (k, peak)
}

pub fn run_distance_sweep(cfg: &ExperimentConfig, model: &MoEModel, prepared: &[Prepared]) -> Result<Vec<DistanceRow>> {
    let max_k = max_non_sensitive(prepared);
    let budgets = median_budgets(cfg, &cfg.channel)?;
    let mut curves = Vec::new();
    for strategy in [Strategy::TopK, Strategy::Random] {
        curves.push((strategy, accuracy_curve(model, prepared, strategy, max_k, cfg.seed, cfg.sweep.trials)?));
    }
    let mut rows = Vec::new();
    for (&distance, &m_ul) in cfg.sweep.distances.iter().zip(&budgets) {
        let cap = usize::try_from(m_ul).unwrap_or(usize::MAX);
        for (strategy, curve) in &curves {
            let (k, acc) = tokens_to_peak(curve, cap);
            rows.push(DistanceRow {
                distance,
                m_ul,
                strategy: *strategy,
                tokens_required: k,
                accuracy: acc,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetRow {
    pub target: f64,
    pub strategy: Strategy,
    /// Smallest per-example budget meeting the target; `None` if unreachable.
    pub budget: Option<usize>,
    /// Mean tokens actually uploaded per example at that budget.
    pub mean_tokens_required: Option<f64>,
    pub accuracy: Option<f64>,
}

/// Default target grid for a given full-token accuracy.
pub fn default_targets(full_accuracy: f64) -> Vec<f64> {
    vec![0.5, 0.6, 0.7, full_accuracy - 0.01]
}

pub fn run_target_accuracy(cfg: &ExperimentConfig, model: &MoEModel, prepared: &[Prepared]) -> Result<Vec<TargetRow>> {
    let max_k = max_non_sensitive(prepared);
    let full = evaluate_point(model, prepared, Strategy::All, max_k, cfg.seed, 1)?.accuracy;
    let targets = cfg.sweep.targets.clone().unwrap_or_else(|| default_targets(full));
    let mut curves = Vec::new();
    for strategy in [Strategy::TopK, Strategy::Random] {
        curves.push((strategy, accuracy_curve(model, prepared, strategy, max_k, cfg.seed, cfg.sweep.trials)?));
    }
    let mut rows = Vec::new();
    for &target in &targets {
        for (strategy, curve) in &curves {
            let hit = curve.iter().position(|p| p.accuracy >= target);
            rows.push(TargetRow {
                target,
                strategy: *strategy,
                budget: hit,
                mean_tokens_required: hit.map(|k| curve[k].tokens_used),
                accuracy: hit.map(|k| curve[k].accuracy),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRow {
    /// Position in the test split.
    pub example: usize,
    pub non_sensitive: usize,
    pub budget: usize,
    pub oracle_confidence: f64,
    pub topk_confidence: f64,
    pub random_confidence: f64,
    pub subsets_evaluated: usize,
    /// Every strategy respected the budget.
    pub feasible: bool,
}

/// Oracle against predictor top-k and random selection on the first
/// `sweep.oracle_examples` test examples with at most 10 non-sensitive tokens.
pub fn run_oracle_gap(cfg: &ExperimentConfig, model: &MoEModel, prepared: &[Prepared]) -> Result<Vec<OracleRow>> {
    let budget = cfg.sweep.oracle_budget;
    let mut rows = Vec::new();
    for (i, p) in prepared.iter().enumerate() {
        if rows.len() == cfg.sweep.oracle_examples {
            break;
        }
        let ns = p.seq.non_sensitive().len();
        if ns > 10 {
            continue;
        }
        let oracle = scheduler::brute_force_oracle(model, &p.seq, p.label, budget)?;
        let topk = scheduler::select_topk(&p.scores, &p.seq, budget)?;
        let random = scheduler::select_random(&p.seq, budget, &mut RngStream::new(cfg.seed, format!("oracle/random{i}")));
        let conf = |d: &OffloadDecision| -> Result<f64> {
            scheduler::confidence(model, &p.pass, &d.active_set(&p.seq)?, p.label)
        };
        let feasible = [&oracle.decision, &topk, &random]
            .iter()
            .all(|d| d.selected.len() <= budget && d.validate(&p.seq).is_ok());
        rows.push(OracleRow {
            example: i,
            non_sensitive: ns,
            budget,
            oracle_confidence: oracle.confidence,
            topk_confidence: conf(&topk)?,
            random_confidence: conf(&random)?,
            subsets_evaluated: oracle.evaluated,
            feasible,
        });
    }
    Ok(rows)
}

/// Result of the emulated client / base-station split.
#[derive(Debug, Clone, PartialEq)]
pub struct Collaborative {
    pub probs: Vec<f64>,
    /// `(token index, expert output)` computed on the client (privacy experts).
    pub client_outputs: Vec<(usize, Vec<f64>)>,
    /// `(token index, expert output)` returned by the base station.
    pub station_outputs: Vec<(usize, Vec<f64>)>,
}

/// Sensitive tokens run through privacy experts on the client; the selected
/// non-sensitive tokens are "uploaded" as embeddings, routed and transformed
/// by the non-privacy experts on the base station; the client merges both
/// sides and pools over the active set.
pub fn collaborative_forward(model: &MoEModel, seq: &TokenSequence, decision: &OffloadDecision) -> Result<Collaborative> {
    decision.validate(seq)?;
    let h = model.embed(seq)?;

    let client_outputs: Vec<(usize, Vec<f64>)> = seq
        .sensitive()
        .into_iter()
        .map(|i| (i, model.expert_apply(model.route(h.row(i), true), h.row(i))))
        .collect();

    let uplink: Vec<(usize, Vec<f64>)> = decision.selected.iter().map(|&i| (i, h.row(i).to_vec())).collect();
    let station_outputs: Vec<(usize, Vec<f64>)> = uplink
        .into_iter()
        .map(|(i, hi)| (i, model.expert_apply(model.route(&hi, false), &hi)))
        .collect();

    let mut merged: Vec<&(usize, Vec<f64>)> = client_outputs.iter().chain(&station_outputs).collect();
    merged.sort_by_key(|(i, _)| *i);
    if merged.is_empty() {
        return Err(Error::NoTokensToAggregate);
    }
    let d = model.config().d;
    let rows: Vec<f64> = merged.iter().flat_map(|(_, o)| o.iter().copied()).collect();
    let h_prime = Tensor::new(vec![merged.len(), d], rows)?;
    let local: Vec<usize> = (0..merged.len()).collect();
    let (_, pooled) = model.aggregate(&h_prime, &local)?;
    let probs = crate::tensor::softmax_slice(&model.classify(&pooled), 1.0)?;
    Ok(Collaborative {
        probs,
        client_outputs,
        station_outputs,
    })
}
