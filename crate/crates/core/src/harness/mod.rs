//! Experiment orchestration behind the `pwcmoe` command line.
//!
//! Each `cmd_*` function reads what it needs from the configuration and the
//! output directory, writes its CSV files plus `run-manifest.txt`, and
//! returns a short human-readable summary.

pub mod config;
pub mod experiments;
pub mod output;

use std::fs;
use std::path::{Path, PathBuf};

pub use config::{ConfigFile, ExperimentConfig, SweepConfig};
pub use experiments::{
    collaborative_forward, evaluate_point, load_corpus, prepare, run_budget_sweep, run_distance_sweep,
    run_oracle_gap, run_target_accuracy, run_train, run_train_predictor, Prepared,
};

use crate::channel::{self, linear_to_db};
use crate::corpus::{Corpus, Vocabulary};
use crate::error::{Error, Result};
use crate::model::MoEModel;
use crate::predictor::ImportancePredictor;
use crate::rng::RngStream;
use crate::scheduler::Strategy;
use output::{fmt_f, fmt_opt, gnuplot_stub, Manifest, Table};

pub const MODEL_FILE: &str = "model.pwcm";
pub const PREDICTOR_FILE: &str = "predictor.pwcp";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub emit_gnuplot: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    opts: &'a RunOptions,
    mode: &'static str,
    files: Vec<PathBuf>,
}

impl<'a> Run<'a> {
    fn start(cfg: &'a ExperimentConfig, opts: &'a RunOptions, mode: &'static str) -> Result<Self> {
        fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
        Ok(Self {
            cfg,
            opts,
            mode,
            files: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.opts.out_dir.join(name)
    }

    fn table(&mut self, name: &str, table: &Table) -> Result<()> {
        let p = self.path(name);
        table.write(&p)?;
        self.files.push(p);
        Ok(())
    }

    fn plot(&mut self, csv_name: &str, script: impl FnOnce(&str) -> String) -> Result<()> {
        if !self.opts.emit_gnuplot {
            return Ok(());
        }
        let name = csv_name.replace(".csv", ".gp");
        let p = self.path(&name);
        fs::write(&p, script(csv_name)).map_err(|e| Error::io(&p, e))?;
        self.files.push(p);
        Ok(())
    }

    fn finish(self, summary: String) -> Result<Report> {
        let manifest = Manifest {
            mode: self.mode.to_string(),
            seed: self.cfg.seed,
            config_sha256: self.cfg.hash(),
            outputs: self.files.clone(),
        };
        let mut files = self.files;
        files.push(manifest.write(&self.opts.out_dir)?);
        Ok(Report { files, summary })
    }
}

fn model_path(cfg: &ExperimentConfig, opts: &RunOptions) -> PathBuf {
    cfg.model_path.clone().unwrap_or_else(|| opts.out_dir.join(MODEL_FILE))
}

fn predictor_path(cfg: &ExperimentConfig, opts: &RunOptions) -> PathBuf {
    cfg.predictor_path.clone().unwrap_or_else(|| opts.out_dir.join(PREDICTOR_FILE))
}

fn write_vocab(vocab: &Vocabulary, path: &Path) -> Result<()> {
    let mut text = String::new();
    for w in vocab.words() {
        text.push_str(w);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Corpus plus the trained model, checked against the saved vocabulary.
fn load_trained(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<(Corpus, MoEModel)> {
    let corpus = load_corpus(cfg)?;
    let mpath = model_path(cfg, opts);
    let model = MoEModel::load(&mpath)?;
    let vpath = mpath.with_file_name(VOCAB_FILE);
    if vpath.exists() {
        let text = fs::read_to_string(&vpath).map_err(|e| Error::io(&vpath, e))?;
        let saved = Vocabulary::from_tokens(text.lines().map(str::to_string).collect());
        if saved != corpus.vocab {
            return Err(Error::checkpoint(
                &vpath,
                "vocabulary differs from the configured corpus (was the model trained with another config or seed?)",
            ));
        }
    }
    if model.config().vocab_size != corpus.vocab.len() || model.config().num_classes != corpus.num_classes() {
        return Err(Error::checkpoint(&mpath, "model does not match the configured corpus"));
    }
    Ok((corpus, model))
}

fn load_prepared(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<(MoEModel, Vec<Prepared>)> {
    let (corpus, model) = load_trained(cfg, opts)?;
    let predictor = ImportancePredictor::load(&predictor_path(cfg, opts))?;
    if predictor.config().d != model.config().d {
        return Err(Error::checkpoint(predictor_path(cfg, opts), "predictor input width differs from model.d"));
    }
    let test = corpus.encode_all(&corpus.test)?;
    let prepared = prepare(&model, &predictor, &test)?;
    Ok((model, prepared))
}

pub fn cmd_train(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Report> {
    let mut run = Run::start(cfg, opts, "train")?;
    let corpus = load_corpus(cfg)?;
    let (model, trace) = run_train(cfg, &corpus)?;

    let mpath = model_path(cfg, opts);
    model.save(&mpath)?;
    let vpath = mpath.with_file_name(VOCAB_FILE);
    write_vocab(&corpus.vocab, &vpath)?;
    run.files.push(mpath);
    run.files.push(vpath);

    let mut t = Table::new(&["round", "loss", "task_loss", "lb_loss", "accuracy"]);
    for r in &trace.rounds {
        t.push(vec![
            r.round.to_string(),
            fmt_f(r.loss),
            fmt_f(r.task_loss),
            fmt_f(r.lb_loss),
            fmt_f(r.test_accuracy),
        ]);
    }
    run.table("train_metrics.csv", &t)?;
    run.plot("train_metrics.csv", |c| gnuplot_stub(c, "Test accuracy per round", (1, "round"), (5, "accuracy"), None))?;
    let final_acc = trace.final_accuracy().unwrap_or(0.0);
    run.finish(format!(
        "trained {} rounds on {} examples; final test accuracy {:.4}",
        trace.rounds.len(),
        corpus.train.len(),
        final_acc
    ))
}

pub fn cmd_train_predictor(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Report> {
    let mut run = Run::start(cfg, opts, "train-predictor")?;
    let (corpus, model) = load_trained(cfg, opts)?;
    let (predictor, trace, report) = run_train_predictor(cfg, &model, &corpus)?;
    let ppath = predictor_path(cfg, opts);
    predictor.save(&ppath)?;
    run.files.push(ppath);

    let mut t = Table::new(&["epoch", "mean_kl"]);
    for (i, kl) in trace.epoch_kl.iter().enumerate() {
        t.push(vec![(i + 1).to_string(), fmt_f(*kl)]);
    }
    run.table("predictor_metrics.csv", &t)?;
    let mut e = Table::new(&["train_kl", "test_kl", "uniform_kl", "top1_agreement"]);
    e.push(vec![
        fmt_f(report.train_kl),
        fmt_f(report.test_kl),
        fmt_f(report.uniform_kl),
        fmt_f(report.top1_agreement),
    ]);
    run.table("predictor_eval.csv", &e)?;
    run.plot("predictor_metrics.csv", |c| gnuplot_stub(c, "Predictor KL per epoch", (1, "epoch"), (2, "mean KL"), None))?;
    run.finish(format!(
        "predictor held-out KL {:.4} (uniform baseline {:.4}); top-1 agreement {:.3}",
        report.test_kl, report.uniform_kl, report.top1_agreement
    ))
}

pub fn cmd_eval(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Report> {
    let mut run = Run::start(cfg, opts, "eval")?;
    let (model, prepared) = load_prepared(cfg, opts)?;
    let max_k = experiments::max_non_sensitive(&prepared);
    let mut t = Table::new(&["strategy", "budget", "trials", "accuracy", "accuracy_std", "tokens_used"]);
    let mut points = vec![(Strategy::All, max_k)];
    if let Some(k) = cfg.eval_budget {
        points.push((Strategy::TopK, k));
        points.push((Strategy::Random, k));
    }
    let mut full = 0.0;
    for (s, k) in points {
        let p = evaluate_point(&model, &prepared, s, k, cfg.seed, cfg.sweep.trials)?;
        if s == Strategy::All {
            full = p.accuracy;
        }
        t.push(vec![
            s.to_string(),
            k.to_string(),
            p.trials.to_string(),
            fmt_f(p.accuracy),
            fmt_f(p.accuracy_std),
            fmt_f(p.tokens_used),
        ]);
    }
    run.table("eval.csv", &t)?;

    let rows = run_oracle_gap(cfg, &model, &prepared)?;
    let mut o = Table::new(&[
        "example",
        "non_sensitive",
        "budget",
        "oracle_confidence",
        "topk_confidence",
        "random_confidence",
        "subsets_evaluated",
        "feasible",
    ]);
    for r in &rows {
        o.push(vec![
            r.example.to_string(),
            r.non_sensitive.to_string(),
            r.budget.to_string(),
            fmt_f(r.oracle_confidence),
            fmt_f(r.topk_confidence),
            fmt_f(r.random_confidence),
            r.subsets_evaluated.to_string(),
            r.feasible.to_string(),
        ]);
    }
    run.table("oracle_gap.csv", &o)?;
    let gap = rows.iter().map(|r| r.oracle_confidence - r.topk_confidence).sum::<f64>() / rows.len().max(1) as f64;
    run.finish(format!(
        "full-token accuracy {full:.4} on {} test examples; mean oracle minus top-k confidence {gap:.4} over {} examples",
        prepared.len(),
        rows.len()
    ))
}

pub fn cmd_sweep_budget(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Report> {
    let mut run = Run::start(cfg, opts, "sweep-budget")?;
    let (model, prepared) = load_prepared(cfg, opts)?;
    let rows = run_budget_sweep(cfg, &model, &prepared)?;
    let mut t = Table::new(&["budget", "strategy", "trials", "accuracy", "accuracy_std", "tokens_used"]);
    for r in &rows {
        t.push(vec![
            r.budget.to_string(),
            r.strategy.to_string(),
            r.point.trials.to_string(),
            fmt_f(r.point.accuracy),
            fmt_f(r.point.accuracy_std),
            fmt_f(r.point.tokens_used),
        ]);
    }
    run.table("budget_sweep.csv", &t)?;
    run.plot("budget_sweep.csv", |c| {
        gnuplot_stub(c, "Accuracy by uploaded tokens", (1, "tokens per example"), (4, "accuracy"), Some((2, &["topk", "random"])))
    })?;
    run.finish(format!("{} budget points written", rows.len()))
}

pub fn cmd_sweep_distance(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Report> {
    let mut run = Run::start(cfg, opts, "sweep-distance")?;
    let (model, prepared) = load_prepared(cfg, opts)?;
    let rows = run_distance_sweep(cfg, &model, &prepared)?;
    let mut t = Table::new(&["distance", "m_ul", "strategy", "tokens_required", "accuracy"]);
    for r in &rows {
        t.push(vec![
            fmt_f(r.distance),
            r.m_ul.to_string(),
            r.strategy.to_string(),
            r.tokens_required.to_string(),
            fmt_f(r.accuracy),
        ]);
    }
    run.table("distance_sweep.csv", &t)?;
    run.plot("distance_sweep.csv", |c| {
        gnuplot_stub(c, "Tokens needed for peak accuracy", (1, "distance (m)"), (4, "tokens"), Some((3, &["topk", "random"])))
    })?;
    run.finish(format!("{} distance points written", cfg.sweep.distances.len()))
}

pub fn cmd_target_accuracy(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Report> {
    let mut run = Run::start(cfg, opts, "target-accuracy")?;
    let (model, prepared) = load_prepared(cfg, opts)?;
    let rows = run_target_accuracy(cfg, &model, &prepared)?;
    let mut t = Table::new(&["target", "strategy", "reachable", "budget", "mean_tokens_required", "accuracy"]);
    for r in &rows {
        t.push(vec![
            fmt_f(r.target),
            r.strategy.to_string(),
            r.budget.is_some().to_string(),
            fmt_opt(r.budget),
            fmt_opt(r.mean_tokens_required.map(fmt_f)),
            fmt_opt(r.accuracy.map(fmt_f)),
        ]);
    }
    run.table("target_accuracy.csv", &t)?;
    run.plot("target_accuracy.csv", |c| {
        gnuplot_stub(c, "Tokens to reach a target accuracy", (1, "target"), (5, "tokens"), Some((2, &["topk", "random"])))
    })?;
    run.finish(format!("{} target rows written", rows.len()))
}

#[derive(Debug, Clone, Default)]
pub struct ProbeOptions {
    /// Overrides `channel.d_c_m`.
    pub distance: Option<f64>,
    /// Fixes shadowing and fading at 1 instead of drawing them.
    pub deterministic: bool,
}

pub fn cmd_channel_probe(cfg: &ExperimentConfig, opts: &RunOptions, probe: &ProbeOptions) -> Result<Report> {
    let mut run = Run::start(cfg, opts, "channel-probe")?;
    let params = probe.distance.map_or_else(|| cfg.channel.clone(), |d| cfg.channel.with_distance(d));
    params.validate()?;
    let mut t = Table::new(&["draw", "distance", "pl_db", "psi", "chi", "snr_db", "rate_bps", "m_ul"]);
    let mut push = |i: usize, r: &channel::ChannelRealization| {
        t.push(vec![
            i.to_string(),
            fmt_f(params.d_c_m),
            fmt_f(r.pl_db),
            fmt_f(r.psi),
            fmt_f(r.chi),
            fmt_f(linear_to_db(r.snr)),
            fmt_f(r.rate_bps),
            r.m_ul.to_string(),
        ])
    };
    let summary = if probe.deterministic {
        let r = channel::realize(&params, 1.0, 1.0)?;
        push(0, &r);
        format!(
            "d_c = {} m: PL = {:.3} dB, SNR = {:.2} dB, rate = {:.4e} bit/s, m_ul = {}",
            params.d_c_m,
            r.pl_db,
            linear_to_db(r.snr),
            r.rate_bps,
            r.m_ul
        )
    } else {
        let mut rng = RngStream::new(cfg.seed, "channel/probe");
        let mut m = Vec::with_capacity(cfg.sweep.channel_draws);
        for i in 0..cfg.sweep.channel_draws {
            let r = channel::draw_realization(&params, &mut rng)?;
            m.push(r.m_ul);
            push(i, &r);
        }
        m.sort_unstable();
        format!(
            "d_c = {} m: median m_ul = {} over {} draws",
            params.d_c_m,
            m[(m.len() - 1) / 2],
            m.len()
        )
    };
    run.table("channel_probe.csv", &t)?;
    run.finish(summary)
}
