//! Choosing which non-sensitive tokens to upload under a token budget.

use std::fmt;

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::model::{MoEModel, TokenPass};
use crate::rng::RngStream;

/// Largest non-sensitive token count the exhaustive oracle accepts.
pub const ORACLE_MAX_TOKENS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    TopK,
    Random,
    Oracle,
    All,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::TopK => "topk",
            Strategy::Random => "random",
            Strategy::Oracle => "oracle",
            Strategy::All => "all",
        })
    }
}

/// Non-sensitive tokens selected for upload (`selected`) and left out
/// (`dropped`); both sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OffloadDecision {
    pub selected: Vec<usize>,
    pub dropped: Vec<usize>,
    pub budget: usize,
    pub strategy: Strategy,
}

impl OffloadDecision {
    fn from_selected(seq: &TokenSequence, mut selected: Vec<usize>, budget: usize, strategy: Strategy) -> Self {
        selected.sort_unstable();
        let dropped = seq
            .non_sensitive()
            .into_iter()
            .filter(|i| selected.binary_search(i).is_err())
            .collect();
        Self {
            selected,
            dropped,
            budget,
            strategy,
        }
    }

    /// Uploads every non-sensitive token.
    pub fn all(seq: &TokenSequence) -> Self {
        let ns = seq.non_sensitive();
        let n = ns.len();
        Self::from_selected(seq, ns, n, Strategy::All)
    }

    /// Checks the decision against `seq`: budget respected, only
    /// non-sensitive indices selected, `selected ∪ dropped = 𝓣_ns`.
    pub fn validate(&self, seq: &TokenSequence) -> Result<()> {
        if self.selected.len() > self.budget {
            return Err(Error::Contract(format!(
                "{} tokens selected over a budget of {}",
                self.selected.len(),
                self.budget
            )));
        }
        for &i in self.selected.iter().chain(&self.dropped) {
            if i >= seq.len() {
                return Err(Error::Contract(format!(
                    "decision references token {i} of a {}-token sequence",
                    seq.len()
                )));
            }
            if seq.mask[i] {
                return Err(Error::Contract(format!("sensitive token {i} in offload decision")));
            }
        }
        let mut union: Vec<usize> = self.selected.iter().chain(&self.dropped).copied().collect();
        union.sort_unstable();
        if union != seq.non_sensitive() {
            return Err(Error::Contract("selected and dropped do not partition the non-sensitive tokens".into()));
        }
        Ok(())
    }

    /// Tokens that take part in inference: all sensitive tokens plus the
    /// selected ones, in sequence order.
    pub fn active_set(&self, seq: &TokenSequence) -> Result<Vec<usize>> {
        self.validate(seq)?;
        let mut active = seq.sensitive();
        active.extend(&self.selected);
        active.sort_unstable();
        Ok(active)
    }
}

/// The `min(budget, |𝓣_ns|)` highest-scoring non-sensitive tokens; ties go
/// to the lower index.
pub fn select_topk(scores: &[f64], seq: &TokenSequence, budget: usize) -> Result<OffloadDecision> {
    if scores.len() != seq.len() {
        return Err(Error::Shape {
            op: "select_topk",
            left: vec![seq.len()],
            right: vec![scores.len()],
        });
    }
    let mut ns = seq.non_sensitive();
    ns.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ns.truncate(budget);
    Ok(OffloadDecision::from_selected(seq, ns, budget, Strategy::TopK))
}

/// Uniform sample without replacement of `min(budget, |𝓣_ns|)` non-sensitive tokens.
pub fn select_random(seq: &TokenSequence, budget: usize, rng: &mut RngStream) -> OffloadDecision {
    let ns = seq.non_sensitive();
    let m = budget.min(ns.len());
    let picked = rand::seq::index::sample(rng, ns.len(), m)
        .into_iter()
        .map(|p| ns[p])
        .collect();
    OffloadDecision::from_selected(seq, picked, budget, Strategy::Random)
}

/// True-label probability when pooling over `active`; zero if nothing is active.
pub fn confidence(model: &MoEModel, pass: &TokenPass, active: &[usize], label: usize) -> Result<f64> {
    if active.is_empty() {
        return Ok(0.0);
    }
    Ok(model.head(pass, active)?.probs[label])
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub decision: OffloadDecision,
    pub confidence: f64,
    pub evaluated: usize,
}

/// Exhaustive maximization of true-label confidence over every subset of
/// `𝓣_ns` with at most `budget` elements. Subsets are visited by size, then
/// lexicographically; the first maximum wins.
pub fn brute_force_oracle(
    model: &MoEModel,
    seq: &TokenSequence,
    label: usize,
    budget: usize,
) -> Result<OracleResult> {
    let ns = seq.non_sensitive();
    if ns.len() > ORACLE_MAX_TOKENS {
        return Err(Error::InstanceTooLarge {
            size: ns.len(),
            limit: ORACLE_MAX_TOKENS,
        });
    }
    let pass = model.token_pass(seq)?;
    let sensitive = seq.sensitive();
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut evaluated = 0;
    for size in 0..=budget.min(ns.len()) {
        for combo in Combinations::new(ns.len(), size) {
            let subset: Vec<usize> = combo.iter().map(|&c| ns[c]).collect();
            let mut active = sensitive.clone();
            active.extend(&subset);
            active.sort_unstable();
            let f = confidence(model, &pass, &active, label)?;
            evaluated += 1;
            if best.as_ref().is_none_or(|(_, b)| f > *b) {
                best = Some((subset, f));
            }
        }
    }
    let (subset, confidence) = best.expect("the empty subset is always feasible");
    Ok(OracleResult {
        decision: OffloadDecision::from_selected(seq, subset, budget, Strategy::Oracle),
        confidence,
        evaluated,
    })
}

/// Lexicographic `size`-combinations of `0..n`.
struct Combinations {
    n: usize,
    current: Option<Vec<usize>>,
}

impl Combinations {
    fn new(n: usize, size: usize) -> Self {
        Self {
            n,
            current: (size <= n).then(|| (0..size).collect()),
        }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let out = self.current.clone()?;
        let k = out.len();
        let mut next = out.clone();
        let mut i = k;
        loop {
            if i == 0 {
                self.current = None;
                break;
            }
            i -= 1;
            if next[i] < self.n - k + i {
                next[i] += 1;
                for j in i + 1..k {
                    next[j] = next[j - 1] + 1;
                }
                self.current = Some(next);
                break;
            }
        }
        Some(out)
    }
}
