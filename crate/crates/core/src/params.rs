//! Named parameter storage and first-order optimizers.

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Replaces every tensor from `other`, matched by name and shape.
    pub fn load_from<'n>(&mut self, arrays: impl IntoIterator<Item = (&'n str, Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.len()];
        for (name, t) in arrays {
            let id = self
                .find(name)
                .ok_or_else(|| Error::Contract(format!("unexpected parameter {name:?}")))?;
            if self.values[id.0].shape() != t.shape() {
                return Err(Error::Shape {
                    op: "load parameter",
                    left: self.values[id.0].shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            self.values[id.0] = t;
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Contract(format!("missing parameter {:?}", self.names[missing])));
        }
        Ok(())
    }

    /// Registers every parameter on `tape`; `frozen` ids enter as constants.
    pub fn attach<'a>(&'a self, tape: &mut Tape<'a>, frozen: &[ParamId]) -> Vec<Var> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if frozen.contains(&ParamId(i)) {
                    tape.constant_ref(t)
                } else {
                    tape.param(t)
                }
            })
            .collect()
    }

    /// Rounds every value to single precision, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.values {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }
}

/// Collects per-parameter gradients from a backward pass; parameters that were
/// not reached get `None`.
pub fn collect_grads(grads: &mut Gradients, vars: &[Var]) -> Vec<Option<Tensor>> {
    vars.iter().map(|&v| grads.take(v)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    clip_norm: Option<f64>,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn sgd_momentum(lr: f64, momentum: f64) -> Self {
        Self::new(OptimizerKind::SgdMomentum { momentum }, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(
            OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr,
        )
    }

    fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            clip_norm: None,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn with_clip_norm(mut self, max_norm: f64) -> Self {
        self.clip_norm = Some(max_norm);
        self
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) {
        if self.first.is_empty() {
            self.first = params.values.iter().map(|t| vec![0.0; t.len()]).collect();
            self.second = self.first.clone();
        }
        self.steps += 1;
        let scale = match self.clip_norm {
            Some(max) => {
                let norm = grads
                    .iter()
                    .flatten()
                    .flat_map(|g| g.data())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for (i, g) in grads.iter().enumerate() {
            let value = params.values[i].data_mut();
            let m = &mut self.first[i];
            match self.kind {
                OptimizerKind::SgdMomentum { momentum } => {
                    // parameters without a gradient still coast on their velocity
                    for k in 0..value.len() {
                        let gk = g.as_ref().map_or(0.0, |g| g.data()[k] * scale);
                        m[k] = momentum * m[k] + gk;
                        value[k] -= self.lr * m[k];
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let Some(g) = g else { continue };
                    let v = &mut self.second[i];
                    let bc1 = 1.0 - beta1.powi(self.steps as i32);
                    let bc2 = 1.0 - beta2.powi(self.steps as i32);
                    for k in 0..value.len() {
                        let gk = g.data()[k] * scale;
                        m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                        v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                        value[k] -= self.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + eps);
                    }
                }
            }
        }
    }
}
