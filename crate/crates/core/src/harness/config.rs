//! Experiment configuration: a flat `key = value` file with `#` comments and
//! dotted key prefixes (`channel.f_c_ghz = 2.4`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::channel::ChannelParams;
use crate::corpus::{SynthParams, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};
use crate::model::MoEConfig;
use crate::predictor::PredictorConfig;

/// Raw entries with the line each came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    entries: BTreeMap<String, (String, usize)>,
    origin: PathBuf,
}

impl ConfigFile {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::ConfigLine {
                path: origin.to_path_buf(),
                line: line_no as u64,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
                return Err(err(format!("invalid key {k:?}")));
            }
            if let Some((_, first)) = entries.insert(k.to_string(), (v.to_string(), line_no)) {
                return Err(err(format!("duplicate key {k:?} (first set on line {first})")));
            }
        }
        Ok(Self {
            entries,
            origin: origin.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn line(&self, key: &str) -> u64 {
        self.entries.get(key).map_or(0, |(_, l)| *l as u64)
    }

    fn bad(&self, key: &str, msg: impl std::fmt::Display) -> Error {
        Error::ConfigLine {
            path: self.origin.clone(),
            line: self.line(key),
            msg: format!("{key}: {msg}"),
        }
    }
}

fn strip_comment(line: &str) -> &str {
    // `#` opens a comment at line start or after whitespace
    let bytes = line.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'#' && (i == 0 || bytes[i - 1].is_ascii_whitespace()) {
            return &line[..i];
        }
    }
    line
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// CSV pair; the synthetic corpus is used when absent.
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    pub synth: SynthParams,
    pub test_fraction: f64,
    pub max_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_csv: None,
            test_csv: None,
            synth: SynthParams::default(),
            test_fraction: 0.2,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub budgets: Vec<usize>,
    pub distances: Vec<f64>,
    /// Target accuracies; `None` selects 0.5, 0.6, 0.7 and full-token accuracy minus 0.01.
    pub targets: Option<Vec<f64>>,
    pub trials: usize,
    pub channel_draws: usize,
    pub oracle_examples: usize,
    pub oracle_budget: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            budgets: (1..=10).collect(),
            distances: vec![500.0, 1000.0, 2000.0, 3000.0, 4000.0, 5000.0, 6000.0, 8000.0],
            targets: None,
            trials: 5,
            channel_draws: 1001,
            oracle_examples: 50,
            oracle_budget: 3,
        }
    }
}

/// Everything one run needs besides the seed and output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    /// `vocab_size` and `num_classes` are filled in from the corpus.
    pub model: MoEConfig,
    pub import_embeddings: Option<PathBuf>,
    pub predictor: PredictorConfig,
    pub channel: ChannelParams,
    pub bits_per_value: f64,
    pub sweep: SweepConfig,
    /// Extra budgeted rows in `eval` output.
    pub eval_budget: Option<usize>,
    /// Checkpoint locations; default to the output directory.
    pub model_path: Option<PathBuf>,
    pub predictor_path: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = MoEConfig::default();
        let channel = ChannelParams {
            b_token: model.d as f64 * 16.0,
            ..ChannelParams::default()
        };
        Self {
            seed: 0,
            data: DataConfig::default(),
            predictor: PredictorConfig {
                d: model.d,
                ..PredictorConfig::default()
            },
            model,
            import_embeddings: None,
            channel,
            bits_per_value: 16.0,
            sweep: SweepConfig::default(),
            eval_budget: None,
            model_path: None,
            predictor_path: None,
        }
    }
}

macro_rules! set {
    ($file:expr, $key:expr, $v:expr, $field:expr) => {
        $field = $v.parse().map_err(|_| $file.bad($key, format!("cannot parse {:?}", $v)))?
    };
}

impl ExperimentConfig {
    /// Applies `file` over the defaults. Relative paths resolve against `base`.
    pub fn from_file(file: &ConfigFile, base: &Path) -> Result<Self> {
        let mut c = Self::default();
        let mut model_kv = Vec::new();
        let mut predictor_kv = Vec::new();
        for key in file.keys() {
            let v = file.get(key).unwrap();
            let path = || Some(base.join(v));
            match key {
                "seed" => set!(file, key, v, c.seed),
                "data.train_csv" => c.data.train_csv = path(),
                "data.test_csv" => c.data.test_csv = path(),
                "data.test_fraction" => set!(file, key, v, c.data.test_fraction),
                "data.max_len" => set!(file, key, v, c.data.max_len),
                "synth.n" => set!(file, key, v, c.data.synth.n),
                "synth.classes" => set!(file, key, v, c.data.synth.num_classes),
                "synth.sensitive_rate" => set!(file, key, v, c.data.synth.sensitive_rate),
                "synth.keywords_per_class" => set!(file, key, v, c.data.synth.keywords_per_class),
                "synth.filler_words" => set!(file, key, v, c.data.synth.filler_words),
                "synth.decoy_rate" => set!(file, key, v, c.data.synth.decoy_rate),
                "model.import_embeddings" => c.import_embeddings = path(),
                "model.vocab_size" | "model.num_classes" => {
                    return Err(file.bad(key, "derived from the corpus; remove this key"))
                }
                k if k.starts_with("model.") => model_kv.push((k["model.".len()..].to_string(), v.to_string())),
                "predictor.d" => return Err(file.bad(key, "equals model.d; remove this key")),
                k if k.starts_with("predictor.") => {
                    predictor_kv.push((k["predictor.".len()..].to_string(), v.to_string()))
                }
                "channel.f_c_ghz" => set!(file, key, v, c.channel.f_c_ghz),
                "channel.d_c_m" => set!(file, key, v, c.channel.d_c_m),
                "channel.bandwidth_hz" => set!(file, key, v, c.channel.bandwidth_hz),
                "channel.p_dbm" => set!(file, key, v, c.channel.p_dbm),
                "channel.n0_dbm_hz" => set!(file, key, v, c.channel.n0_dbm_hz),
                "channel.sigma_db" => set!(file, key, v, c.channel.sigma_db),
                "channel.t_ul_s" => set!(file, key, v, c.channel.t_ul_s),
                "channel.bits_per_value" => set!(file, key, v, c.bits_per_value),
                "sweep.budgets" => c.sweep.budgets = parse_list(file, key, v)?,
                "sweep.distances" => c.sweep.distances = parse_list(file, key, v)?,
                "sweep.targets" => c.sweep.targets = Some(parse_list(file, key, v)?),
                "sweep.trials" => set!(file, key, v, c.sweep.trials),
                "sweep.channel_draws" => set!(file, key, v, c.sweep.channel_draws),
                "sweep.oracle_examples" => set!(file, key, v, c.sweep.oracle_examples),
                "sweep.oracle_budget" => set!(file, key, v, c.sweep.oracle_budget),
                "artifacts.model" => c.model_path = path(),
                "artifacts.predictor" => c.predictor_path = path(),
                "eval.budget" => c.eval_budget = Some(v.parse().map_err(|_| file.bad(key, "not a count"))?),
                _ => return Err(file.bad(key, "unknown key")),
            }
        }
        // placeholder sizes so that validation of the other fields can run
        model_kv.push(("vocab_size".into(), "2".into()));
        c.model = MoEConfig::from_kv(&model_kv).map_err(|e| file.bad("model", e))?;
        c.model.vocab_size = 0;
        predictor_kv.push(("d".into(), c.model.d.to_string()));
        if !predictor_kv.iter().any(|(k, _)| k == "proj_dim") {
            let proj = PredictorConfig::default().proj_dim.min(c.model.d);
            predictor_kv.push(("proj_dim".into(), proj.to_string()));
        }
        c.predictor = PredictorConfig::from_kv(&predictor_kv).map_err(|e| file.bad("predictor", e))?;
        c.channel.b_token = c.model.d as f64 * c.bits_per_value;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = ConfigFile::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_file(&file, base)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: &str| Err(Error::Config(m.into()));
        if self.data.train_csv.is_some() != self.data.test_csv.is_some() {
            return cfg("data.train_csv and data.test_csv must be given together");
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return cfg("data.test_fraction must lie strictly between 0 and 1");
        }
        if self.data.max_len == 0 {
            return cfg("data.max_len must be positive");
        }
        self.channel.validate()?;
        if self.sweep.budgets.is_empty() || self.sweep.distances.is_empty() {
            return cfg("sweep grids must be nonempty");
        }
        if self.sweep.targets.as_ref().is_some_and(|t| t.is_empty()) {
            return cfg("sweep.targets must be nonempty when given");
        }
        if self.sweep.trials == 0 || self.sweep.channel_draws == 0 {
            return cfg("sweep.trials and sweep.channel_draws must be at least 1");
        }
        if self.sweep.distances.iter().any(|&d| !(d >= 1.0)) {
            return cfg("sweep.distances must be at least 1 m");
        }
        Ok(())
    }

    /// Resolved settings as sorted `key=value` lines; hashed into the run manifest.
    pub fn canonical(&self) -> String {
        let mut kv: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("data.test_fraction".into(), self.data.test_fraction.to_string()),
            ("data.max_len".into(), self.data.max_len.to_string()),
            ("synth.n".into(), self.data.synth.n.to_string()),
            ("synth.classes".into(), self.data.synth.num_classes.to_string()),
            ("synth.sensitive_rate".into(), self.data.synth.sensitive_rate.to_string()),
            ("synth.keywords_per_class".into(), self.data.synth.keywords_per_class.to_string()),
            ("synth.filler_words".into(), self.data.synth.filler_words.to_string()),
            ("synth.decoy_rate".into(), self.data.synth.decoy_rate.to_string()),
            ("channel.f_c_ghz".into(), self.channel.f_c_ghz.to_string()),
            ("channel.d_c_m".into(), self.channel.d_c_m.to_string()),
            ("channel.bandwidth_hz".into(), self.channel.bandwidth_hz.to_string()),
            ("channel.p_dbm".into(), self.channel.p_dbm.to_string()),
            ("channel.n0_dbm_hz".into(), self.channel.n0_dbm_hz.to_string()),
            ("channel.sigma_db".into(), self.channel.sigma_db.to_string()),
            ("channel.t_ul_s".into(), self.channel.t_ul_s.to_string()),
            ("channel.bits_per_value".into(), self.bits_per_value.to_string()),
            ("sweep.budgets".into(), join(&self.sweep.budgets)),
            ("sweep.distances".into(), join(&self.sweep.distances)),
            (
                "sweep.targets".into(),
                self.sweep.targets.as_ref().map_or("default".into(), |t| join(t)),
            ),
            ("sweep.trials".into(), self.sweep.trials.to_string()),
            ("sweep.channel_draws".into(), self.sweep.channel_draws.to_string()),
            ("sweep.oracle_examples".into(), self.sweep.oracle_examples.to_string()),
            ("sweep.oracle_budget".into(), self.sweep.oracle_budget.to_string()),
            (
                "eval.budget".into(),
                self.eval_budget.map_or("none".into(), |b| b.to_string()),
            ),
        ];
        let path_str = |p: &Option<PathBuf>| p.as_ref().map_or("none".into(), |p| p.display().to_string());
        kv.push(("data.train_csv".into(), path_str(&self.data.train_csv)));
        kv.push(("data.test_csv".into(), path_str(&self.data.test_csv)));
        kv.push(("model.import_embeddings".into(), path_str(&self.import_embeddings)));
        kv.push(("artifacts.model".into(), path_str(&self.model_path)));
        kv.push(("artifacts.predictor".into(), path_str(&self.predictor_path)));
        for (k, v) in self.model.to_kv() {
            if k != "vocab_size" && k != "num_classes" {
                kv.push((format!("model.{k}"), v));
            }
        }
        for (k, v) in self.predictor.to_kv() {
            if k != "d" {
                kv.push((format!("predictor.{k}"), v));
            }
        }
        kv.sort();
        kv.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))
    }
}

fn parse_list<T: std::str::FromStr>(file: &ConfigFile, key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| file.bad(key, format!("cannot parse list item {s:?}"))))
        .collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
