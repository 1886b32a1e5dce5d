//! The ten acceptance criteria. Runs as a plain binary so each criterion
//! prints one PASS/FAIL line; exits non-zero if any fails.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use pwc_moe::autodiff::{Tape, Var};
use pwc_moe::channel::{self, ChannelParams};
use pwc_moe::corpus::{Corpus, TokenSequence};
use pwc_moe::harness::experiments::{self, Prepared};
use pwc_moe::harness::ExperimentConfig;
use pwc_moe::model::{self, forward_batch, MoEConfig, MoEModel, Routing, TrainingTrace};
use pwc_moe::predictor::{self, ImportancePredictor, ImportanceRecord, PredictorConfig};
use pwc_moe::scheduler::Strategy;
use pwc_moe::tensor::softmax_slice;
use pwc_moe::{RngStream, Tensor};

type Outcome = Result<String, String>;
/// Name, check, runtime limit in seconds.
type Criterion = (&'static str, fn() -> Outcome, u64);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Trained {
    cfg: ExperimentConfig,
    corpus: Corpus,
    model: MoEModel,
    trace: TrainingTrace,
    prepared: Vec<Prepared>,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        let corpus = experiments::load_corpus(&cfg).unwrap();
        let (model, trace) = experiments::run_train(&cfg, &corpus).unwrap();
        let (p, _, _) = experiments::run_train_predictor(&cfg, &model, &corpus).unwrap();
        let prepared = experiments::prepare(&model, &p, &corpus.encode_all(&corpus.test).unwrap()).unwrap();
        Trained {
            cfg,
            corpus,
            model,
            trace,
            prepared,
        }
    })
}

const STEP: f64 = 1e-5;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-12)
}

fn seq(ids: &[u32], mask: &[bool]) -> TokenSequence {
    TokenSequence {
        ids: ids.to_vec(),
        surface: ids.iter().map(|i| i.to_string()).collect(),
        mask: mask.to_vec(),
    }
}

fn moe_gradient_error(seed: u64) -> f64 {
    let cfg = MoEConfig {
        vocab_size: 7,
        d: 4,
        experts: 3,
        privacy_experts: 1,
        expert_hidden: 5,
        num_classes: 3,
        lambda_lb: 0.3,
        ..MoEConfig::default()
    };
    let mut m = MoEModel::new(cfg, &mut RngStream::new(seed, "init")).unwrap();
    let mut rng = RngStream::new(seed, "perturb");
    for name in ["agg.w", "agg.ln_gain", "agg.ln_bias", "gate.bias"] {
        let id = m.params().find(name).unwrap();
        m.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v += 0.5 * rng.gaussian());
    }
    let batch = [(seq(&[2, 3, 4], &[false, true, false]), 1), (seq(&[5, 6, 2], &[false, false, true]), 2)];
    let refs: Vec<(&TokenSequence, usize)> = batch.iter().map(|(s, l)| (s, *l)).collect();
    let mut noise = RngStream::new(seed, "gumbel");
    let (trace, analytic) = {
        let mut tape = Tape::new();
        let out = forward_batch(&m, &mut tape, &refs, Routing::Gumbel(&mut noise)).unwrap();
        let g = tape.backward(out.loss).unwrap();
        let grads: Vec<f64> = out
            .params
            .iter()
            .zip(m.params().ids())
            .flat_map(|(v, id)| g.get(*v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; m.params().get(id).len()]))
            .collect();
        (out.trace, grads)
    };
    let loss_at = |m: &MoEModel| {
        let mut tape = Tape::new();
        let out = forward_batch(m, &mut tape, &refs, Routing::Replay(&trace)).unwrap();
        tape.value(out.loss).item()
    };
    let mut numeric = Vec::new();
    let ids: Vec<_> = m.params().ids().collect();
    for id in ids {
        for k in 0..m.params().get(id).len() {
            let orig = m.params().get(id).data()[k];
            m.params_mut().get_mut(id).data_mut()[k] = orig + STEP;
            let up = loss_at(&m);
            m.params_mut().get_mut(id).data_mut()[k] = orig - STEP;
            let down = loss_at(&m);
            m.params_mut().get_mut(id).data_mut()[k] = orig;
            numeric.push((up - down) / (2.0 * STEP));
        }
    }
    rel_err(&analytic, &numeric)
}

fn predictor_gradient_error(seed: u64) -> f64 {
    let cfg = PredictorConfig {
        d: 4,
        proj_dim: 4,
        layers: 2,
        heads: 2,
        ffn_hidden: 6,
        ..PredictorConfig::default()
    };
    let mut p = ImportancePredictor::new(cfg, &mut RngStream::new(seed, "init")).unwrap();
    let mut rng = RngStream::new(seed, "records");
    let records: Vec<ImportanceRecord> = (0..2)
        .map(|_| {
            let h = Tensor::new(vec![3, 4], (0..12).map(|_| 2.0 * rng.gaussian()).collect()).unwrap();
            let raw: Vec<f64> = (0..3).map(|_| rng.uniform_open() + 0.1).collect();
            let s: f64 = raw.iter().sum();
            ImportanceRecord {
                embeddings: h,
                target: raw.iter().map(|v| v / s).collect(),
            }
        })
        .collect();
    let refs: Vec<&ImportanceRecord> = records.iter().collect();
    let analytic: Vec<f64> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = p.params().iter().map(|(_, t)| tape.param(t)).collect();
        let (loss, _) = p.batch_loss(&mut tape, &vars, &refs).unwrap();
        let g = tape.backward(loss).unwrap();
        vars.iter()
            .zip(p.params().iter())
            .flat_map(|(v, (_, t))| g.get(*v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect()
    };
    let kl_at = |p: &ImportancePredictor| p.mean_kl(&records).unwrap();
    let mut numeric = Vec::new();
    let ids: Vec<_> = p.params().ids().collect();
    for id in ids {
        for k in 0..p.params().get(id).len() {
            let orig = p.params().get(id).data()[k];
            p.params_mut().get_mut(id).data_mut()[k] = orig + STEP;
            let up = kl_at(&p);
            p.params_mut().get_mut(id).data_mut()[k] = orig - STEP;
            let down = kl_at(&p);
            p.params_mut().get_mut(id).data_mut()[k] = orig;
            numeric.push((up - down) / (2.0 * STEP));
        }
    }
    rel_err(&analytic, &numeric)
}

fn c1_gradients() -> Outcome {
    let moe = (1..=3).map(moe_gradient_error).fold(0.0, f64::max);
    let pred = (1..=3).map(predictor_gradient_error).fold(0.0, f64::max);
    check(moe <= 1e-3 && pred <= 1e-3, format!("max relative error moe {moe:.2e}, predictor {pred:.2e}"))
}

fn c2_privacy() -> Outcome {
    let cfg = MoEConfig {
        vocab_size: 50,
        num_classes: 3,
        d: 16,
        expert_hidden: 16,
        ..MoEConfig::default()
    };
    let mut m = MoEModel::new(cfg, &mut RngStream::new(2, "init")).unwrap();
    let id = m.params().find("gate.bias").unwrap();
    m.params_mut()
        .get_mut(id)
        .data_mut()
        .copy_from_slice(&[-40.0, -40.0, 40.0, 40.0, 40.0, 40.0, 40.0, 40.0]);
    let mut rng = RngStream::new(2, "sequences");
    let set: Vec<(TokenSequence, usize)> = (0..10_000)
        .map(|_| {
            let len = 1 + rng.below(16);
            let ids: Vec<u32> = (0..len).map(|_| rng.below(50) as u32).collect();
            let mask: Vec<bool> = (0..len).map(|_| rng.bernoulli(0.5)).collect();
            (seq(&ids, &mask), 0)
        })
        .collect();
    let audit = model::isolation_audit(&m, &set, &mut RngStream::new(2, "gumbel")).unwrap();
    check(
        audit.soft_violations == 0 && audit.hard_violations == 0,
        format!(
            "{} tokens, {} soft and {} hard violations",
            audit.tokens, audit.soft_violations, audit.hard_violations
        ),
    )
}

fn c3_channel() -> Outcome {
    let n = 1_000_000;
    let mut rng = RngStream::new(3, "shadowing");
    let xi: Vec<f64> = (0..n).map(|_| channel::linear_to_db(channel::sample_shadowing(&mut rng, 7.8))).collect();
    let mean = xi.iter().sum::<f64>() / n as f64;
    let std = (xi.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let mut rng = RngStream::new(3, "fading");
    let mut chi: Vec<f64> = (0..n).map(|_| channel::sample_fading(&mut rng)).collect();
    let chi_mean = chi.iter().sum::<f64>() / n as f64;
    chi.sort_by(f64::total_cmp);
    let chi_median = 0.5 * (chi[n / 2 - 1] + chi[n / 2]);
    let r = channel::realize(&ChannelParams::default(), 1.0, 1.0).unwrap();
    let snr_db = channel::linear_to_db(r.snr);
    let ok = (std - 7.8).abs() <= 0.05
        && mean.abs() <= 0.05
        && (chi_mean - 1.0).abs() <= 0.01
        && (chi_median - 2f64.ln()).abs() <= 0.01
        && (r.pl_db - 100.004).abs() <= 0.001
        && (snr_db - 27.0).abs() <= 0.05;
    check(
        ok,
        format!(
            "shadowing mean {mean:.4} std {std:.4} dB; fading mean {chi_mean:.4} median {chi_median:.4}; PL {:.4} dB, SNR {snr_db:.3} dB",
            r.pl_db
        ),
    )
}

fn c4_convergence() -> Outcome {
    let t = trained();
    let acc = t.trace.accuracies();
    let first = acc.iter().position(|&a| a >= 0.90).map(|i| i + 1);
    let tail = &acc[acc.len().saturating_sub(10)..];
    let m = tail.iter().sum::<f64>() / tail.len() as f64;
    let std = (tail.iter().map(|a| (a - m).powi(2)).sum::<f64>() / tail.len() as f64).sqrt();
    check(
        acc.len() <= 40 && first.is_some() && 100.0 * std <= 1.0,
        format!(
            "{} classes, n={}, first round >= 0.90: {first:?}, final {:.4}, last-10 std {:.3} pp",
            t.corpus.num_classes(),
            t.corpus.train.len() + t.corpus.test.len(),
            acc.last().unwrap(),
            100.0 * std
        ),
    )
}

fn c5_load_balance() -> Outcome {
    let t = trained();
    let mut control = t.cfg.clone();
    control.model.lambda_lb = 0.0;
    let (control_model, _) = experiments::run_train(&control, &t.corpus).unwrap();
    let train = t.corpus.encode_all(&t.corpus.train).unwrap();
    let usage = |m: &MoEModel| model::expert_usage(m, &train, Some(&mut RngStream::new(t.cfg.seed, "usage"))).unwrap();
    let (u, c) = (usage(&t.model), usage(&control_model));
    let (p, np) = (u.soft_ratio(true), u.soft_ratio(false));
    let (cp, cnp) = (c.soft_ratio(true), c.soft_ratio(false));
    check(
        p <= 3.0 && np <= 3.0 && p < cp && np < cnp,
        format!("max/min usage, lambda 0.01 vs 0: privacy {p:.5} vs {cp:.5}, non-privacy {np:.5} vs {cnp:.5}"),
    )
}

fn c6_dominance() -> Outcome {
    let t = trained();
    let max_k = experiments::max_non_sensitive(&t.prepared);
    let full = experiments::evaluate_point(&t.model, &t.prepared, Strategy::All, max_k, t.cfg.seed, 1).unwrap().accuracy;
    let mut worst = f64::INFINITY;
    let mut at5 = 0.0;
    for k in 1..=10 {
        let top = experiments::evaluate_point(&t.model, &t.prepared, Strategy::TopK, k, t.cfg.seed, 1).unwrap();
        let rnd = experiments::evaluate_point(&t.model, &t.prepared, Strategy::Random, k, t.cfg.seed, 5).unwrap();
        worst = worst.min(top.accuracy - rnd.accuracy);
        if k == 5 {
            at5 = top.accuracy;
        }
    }
    check(
        worst >= 0.0 && (full - at5).abs() <= 0.01,
        format!("min top-k minus random over k=1..10: {worst:.4}; top-k at 5 {at5:.4} vs full {full:.4}"),
    )
}

fn c7_efficiency() -> Outcome {
    let t = trained();
    let targets = experiments::run_target_accuracy(&t.cfg, &t.model, &t.prepared).unwrap();
    let mut ok = true;
    let mut reachable = 0;
    for pair in targets.chunks(2) {
        let (top, rnd) = (&pair[0], &pair[1]);
        assert_eq!((top.strategy, rnd.strategy), (Strategy::TopK, Strategy::Random));
        match (top.mean_tokens_required, rnd.mean_tokens_required) {
            (Some(a), Some(b)) => {
                reachable += 1;
                ok &= a <= b;
            }
            (None, Some(_)) => ok = false,
            _ => {}
        }
    }
    let dist = experiments::run_distance_sweep(&t.cfg, &t.model, &t.prepared).unwrap();
    let medians: Vec<u64> = dist.chunks(2).map(|p| p[0].m_ul).collect();
    let monotone = medians.windows(2).all(|w| w[1] <= w[0]);
    let peak_ok = dist.chunks(2).all(|p| p[0].tokens_required <= p[1].tokens_required);
    check(
        ok && monotone && peak_ok,
        format!("{reachable} targets reachable by both, top-k never needs more; median m_ul {medians:?}; min-tokens-to-peak ordering holds: {peak_ok}"),
    )
}

fn c8_oracle() -> Outcome {
    let t = trained();
    let rows = experiments::run_oracle_gap(&t.cfg, &t.model, &t.prepared).unwrap();
    let feasible = rows.iter().all(|r| r.feasible && r.budget == 3 && r.non_sensitive <= 10);
    let dominant = rows
        .iter()
        .all(|r| r.oracle_confidence >= r.topk_confidence && r.oracle_confidence >= r.random_confidence);
    let gap = rows.iter().map(|r| r.oracle_confidence - r.topk_confidence).sum::<f64>() / rows.len() as f64;
    check(
        rows.len() == 50 && feasible && dominant,
        format!("{} examples, all feasible: {feasible}, oracle dominates: {dominant}, mean gap to top-k {gap:.4}", rows.len()),
    )
}

const SMALL: &str = "\
seed = 9
synth.n = 240
model.d = 16
model.expert_hidden = 16
model.epochs = 4
predictor.proj_dim = 16
predictor.epochs = 3
sweep.trials = 3
sweep.channel_draws = 101
sweep.oracle_examples = 8
";

fn cli_run(config: &Path, out: &Path) -> Vec<(String, Vec<u8>)> {
    let mut produced = Vec::new();
    for cmd in ["train", "train-predictor", "eval", "sweep-budget", "sweep-distance", "target-accuracy", "channel-probe"] {
        let status = Command::new(env!("CARGO_BIN_EXE_pwcmoe"))
            .args(["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), cmd])
            .output()
            .unwrap();
        assert!(status.status.success(), "{cmd}: {}", String::from_utf8_lossy(&status.stderr));
        // the manifest is rewritten by every command; keep each version
        produced.push((format!("{cmd}/run-manifest.txt"), fs::read(out.join("run-manifest.txt")).unwrap()));
    }
    for e in fs::read_dir(out).unwrap() {
        let p = e.unwrap().path();
        produced.push((p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
    }
    produced.sort();
    produced
}

fn c9_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.conf");
    fs::write(&config, SMALL).unwrap();
    let a = cli_run(&config, &dir.path().join("a"));
    let b = cli_run(&config, &dir.path().join("b"));
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    check(
        a.len() == b.len() && differing.is_empty(),
        format!("{} files compared across all seven commands, differing: {differing:?}", a.len()),
    )
}

fn c10_kl() -> Outcome {
    let mut rng = RngStream::new(10, "logits");
    let mut worst: f64 = 0.0;
    for len in 1..20 {
        let logits: Vec<f64> = (0..len).map(|_| 5.0 * rng.gaussian()).collect();
        let p = softmax_slice(&logits, 1.0).unwrap();
        worst = worst.max(predictor::kl_loss(&p, &p).unwrap().abs());
    }
    let hand = predictor::kl_loss(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
    check(
        worst == 0.0 && (hand - 0.1438).abs() <= 1e-4,
        format!("kl(p,p) max {worst:e}; hand case {hand:.5}"),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient integrity", c1_gradients, 10),
        ("privacy isolation", c2_privacy, 5),
        ("channel statistics", c3_channel, 30),
        ("training convergence", c4_convergence, 300),
        ("load balancing", c5_load_balance, 600),
        ("predictor dominance", c6_dominance, 300),
        ("token efficiency orderings", c7_efficiency, 600),
        ("oracle gap", c8_oracle, 300),
        ("determinism", c9_determinism, 120),
        ("KL correctness", c10_kl, 5),
    ];
    let mut failed = 0;
    for (i, (name, f, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > Duration::from_secs(*limit) => Err(format!("{d}; over the {limit} s limit")),
            o => o,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {name}: {tag} ({:.1} s) {detail}", i + 1, elapsed.as_secs_f64());
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
