use crate::error::{Error, Result};

/// Hyperparameters of the privacy-aware MoE classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct MoEConfig {
    pub vocab_size: usize,
    pub d: usize,
    /// Total experts `K`.
    pub experts: usize,
    /// Privacy experts `K_p`; they occupy indices `0..K_p`.
    pub privacy_experts: usize,
    pub expert_hidden: usize,
    pub num_classes: usize,
    /// Gumbel-Softmax temperature.
    pub tau: f64,
    pub lambda_lb: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub use_layernorm: bool,
    pub freeze_embeddings: bool,
}

impl Default for MoEConfig {
    fn default() -> Self {
        Self {
            vocab_size: 2,
            d: 64,
            experts: 8,
            privacy_experts: 2,
            expert_hidden: 128,
            num_classes: 2,
            tau: 1.0,
            lambda_lb: 0.01,
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 40,
            batch_size: 32,
            use_layernorm: true,
            freeze_embeddings: false,
        }
    }
}

impl MoEConfig {
    pub fn non_privacy_experts(&self) -> usize {
        self.experts - self.privacy_experts
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.privacy_experts < 1 || self.privacy_experts >= self.experts {
            return fail(format!(
                "need 1 <= privacy_experts < experts, got {} of {}",
                self.privacy_experts, self.experts
            ));
        }
        if !(self.tau > 0.0) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lambda_lb >= 0.0) {
            return fail(format!("lambda_lb must be nonnegative, got {}", self.lambda_lb));
        }
        if self.d == 0 || self.expert_hidden == 0 || self.batch_size == 0 {
            return fail("d, expert_hidden and batch_size must be positive".into());
        }
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.vocab_size < 2 {
            return fail("vocabulary must include the special tokens".into());
        }
        Ok(())
    }

    /// `key=value` lines in a fixed order, as stored in checkpoints.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        [
            ("vocab_size", self.vocab_size.to_string()),
            ("d", self.d.to_string()),
            ("experts", self.experts.to_string()),
            ("privacy_experts", self.privacy_experts.to_string()),
            ("expert_hidden", self.expert_hidden.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("tau", self.tau.to_string()),
            ("lambda_lb", self.lambda_lb.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("momentum", self.momentum.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("use_layernorm", self.use_layernorm.to_string()),
            ("freeze_embeddings", self.freeze_embeddings.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_kv(kv: &[(String, String)]) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in kv {
            let bad = || Error::Config(format!("bad value {v:?} for {k}"));
            macro_rules! parse {
                ($field:expr) => {
                    $field = v.parse().map_err(|_| bad())?
                };
            }
            match k.as_str() {
                "vocab_size" => parse!(c.vocab_size),
                "d" => parse!(c.d),
                "experts" => parse!(c.experts),
                "privacy_experts" => parse!(c.privacy_experts),
                "expert_hidden" => parse!(c.expert_hidden),
                "num_classes" => parse!(c.num_classes),
                "tau" => parse!(c.tau),
                "lambda_lb" => parse!(c.lambda_lb),
                "learning_rate" => parse!(c.learning_rate),
                "momentum" => parse!(c.momentum),
                "epochs" => parse!(c.epochs),
                "batch_size" => parse!(c.batch_size),
                "use_layernorm" => parse!(c.use_layernorm),
                "freeze_embeddings" => parse!(c.freeze_embeddings),
                _ => return Err(Error::Config(format!("unknown model key {k:?}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}
