use pwc_moe::corpus::{Corpus, SynthParams, TokenSequence};
use pwc_moe::harness::{self, experiments, ExperimentConfig};
use pwc_moe::model::{MoEConfig, MoEModel};
use pwc_moe::predictor::PredictorConfig;
use pwc_moe::scheduler::{self, OffloadDecision, Strategy};
use pwc_moe::{Error, RngStream};

fn small_cfg() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 21,
        ..ExperimentConfig::default()
    };
    cfg.data.synth = SynthParams {
        n: 240,
        ..SynthParams::default()
    };
    cfg.model = MoEConfig {
        d: 16,
        expert_hidden: 16,
        epochs: 4,
        ..MoEConfig::default()
    };
    cfg.predictor = PredictorConfig {
        d: 16,
        proj_dim: 16,
        epochs: 3,
        ..PredictorConfig::default()
    };
    cfg.sweep.trials = 2;
    cfg.sweep.channel_draws = 101;
    cfg.sweep.oracle_examples = 10;
    cfg
}

fn untrained() -> (Corpus, MoEModel) {
    let cfg = small_cfg();
    let corpus = experiments::load_corpus(&cfg).unwrap();
    let m = experiments::build_model(&cfg, &corpus).unwrap();
    (corpus, m)
}

#[test]
fn collaborative_split_matches_the_monolithic_forward() {
    let (corpus, m) = untrained();
    let set = corpus.encode_all(&corpus.test).unwrap();
    let mut rng = RngStream::new(1, "decisions");
    for (seq, _) in set.iter().take(40) {
        for budget in [0, 1, 3, 100] {
            let decision = scheduler::select_random(seq, budget, &mut rng);
            let active = decision.active_set(seq).unwrap();
            let pass = m.token_pass(seq).unwrap();
            match experiments::collaborative_forward(&m, seq, &decision) {
                Ok(c) => {
                    assert_eq!(c.probs, m.head(&pass, &active).unwrap().probs);
                    let ids: Vec<usize> = c.station_outputs.iter().map(|(i, _)| *i).collect();
                    assert_eq!(ids, decision.selected);
                    for (i, out) in c.station_outputs.iter().chain(&c.client_outputs) {
                        assert_eq!(out.as_slice(), pass.outputs.row(*i));
                    }
                    assert!(c.client_outputs.iter().all(|(i, _)| seq.mask[*i]));
                }
                Err(Error::NoTokensToAggregate) => assert!(active.is_empty()),
                Err(e) => panic!("{e}"),
            }
        }
    }
}

#[test]
fn empty_active_set_is_reported() {
    let (_, m) = untrained();
    let seq = TokenSequence {
        ids: vec![1, 2],
        surface: vec!["a".into(), "b".into()],
        mask: vec![false, false],
    };
    let d = scheduler::select_topk(&[0.0, 0.0], &seq, 0).unwrap();
    assert!(matches!(experiments::collaborative_forward(&m, &seq, &d), Err(Error::NoTokensToAggregate)));
    let d = OffloadDecision::all(&seq);
    assert!(experiments::collaborative_forward(&m, &seq, &d).is_ok());
}

#[test]
fn targets_and_channel_edges() {
    let mut cfg = small_cfg();
    let corpus = experiments::load_corpus(&cfg).unwrap();
    let (m, _) = experiments::run_train(&cfg, &corpus).unwrap();
    let (p, _, report) = experiments::run_train_predictor(&cfg, &m, &corpus).unwrap();
    assert!(report.test_kl.is_finite() && report.uniform_kl > 0.0);
    let prepared = experiments::prepare(&m, &p, &corpus.encode_all(&corpus.test).unwrap()).unwrap();
    let max_k = experiments::max_non_sensitive(&prepared);
    let full = experiments::evaluate_point(&m, &prepared, Strategy::All, max_k, cfg.seed, 1).unwrap();

    let best = [Strategy::TopK, Strategy::Random]
        .iter()
        .flat_map(|&s| experiments::accuracy_curve(&m, &prepared, s, max_k, cfg.seed, cfg.sweep.trials).unwrap())
        .map(|p| p.accuracy)
        .fold(0.0, f64::max);
    cfg.sweep.targets = Some(vec![0.0, best + 1e-9]);
    let rows = experiments::run_target_accuracy(&cfg, &m, &prepared).unwrap();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        if r.target == 0.0 {
            assert_eq!(r.budget, Some(0));
            assert_eq!(r.mean_tokens_required, Some(0.0));
        } else {
            assert_eq!(r.budget, None);
            assert_eq!(r.mean_tokens_required, None);
            assert_eq!(r.accuracy, None);
        }
    }

    let topk_max = experiments::evaluate_point(&m, &prepared, Strategy::TopK, max_k, cfg.seed, 1).unwrap();
    assert_eq!(topk_max.accuracy, full.accuracy);
    let zero = experiments::evaluate_point(&m, &prepared, Strategy::TopK, 0, cfg.seed, 1).unwrap();
    let rand0 = experiments::evaluate_point(&m, &prepared, Strategy::Random, 0, cfg.seed, 3).unwrap();
    assert_eq!(zero.accuracy, rand0.accuracy);
    assert_eq!(rand0.accuracy_std, 0.0);
    assert_eq!(zero.tokens_used, 0.0);

    cfg.sweep.distances = vec![1e7];
    let rows = experiments::run_distance_sweep(&cfg, &m, &prepared).unwrap();
    for r in &rows {
        assert_eq!(r.m_ul, 0);
        assert_eq!(r.tokens_required, 0);
        assert_eq!(r.accuracy, zero.accuracy);
    }

    let oracle = experiments::run_oracle_gap(&cfg, &m, &prepared).unwrap();
    assert!(!oracle.is_empty());
    for r in &oracle {
        assert!(r.feasible);
        assert!(r.oracle_confidence >= r.topk_confidence && r.oracle_confidence >= r.random_confidence);
    }
}

#[test]
fn commands_write_their_files_and_a_manifest() {
    let cfg = small_cfg();
    let dir = tempfile::tempdir().unwrap();
    let opts = harness::RunOptions {
        out_dir: dir.path().to_path_buf(),
        emit_gnuplot: true,
    };
    harness::cmd_train(&cfg, &opts).unwrap();
    harness::cmd_train_predictor(&cfg, &opts).unwrap();
    let report = harness::cmd_sweep_budget(&cfg, &opts).unwrap();
    assert!(report.files.iter().any(|f| f.ends_with("budget_sweep.csv")));
    let manifest = std::fs::read_to_string(dir.path().join("run-manifest.txt")).unwrap();
    assert!(manifest.contains("mode=sweep-budget"), "{manifest}");
    assert!(manifest.contains(&format!("config_sha256={}", cfg.hash())));
    let csv = std::fs::read_to_string(dir.path().join("budget_sweep.csv")).unwrap();
    assert!(csv.lines().count() > 1);

    std::fs::write(dir.path().join(harness::VOCAB_FILE), "other\nwords\n").unwrap();
    assert!(harness::cmd_eval(&cfg, &opts).is_err());
}
