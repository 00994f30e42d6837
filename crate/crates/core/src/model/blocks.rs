//! Dense building blocks shared by the model stages.

use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn init(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            weight: store.add_uniform(&format!("{prefix}.weight"), vec![d_in, d_out], d_in, seed)?,
            bias: store.add_uniform(&format!("{prefix}.bias"), vec![d_out], d_in, seed)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound[self.weight])?;
        tape.add_row(y, bound[self.bias])
    }
}

/// Two dense layers with a ReLU between them.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn init(store: &mut ParamStore, prefix: &str, d_in: usize, hidden: usize, d_out: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            fc1: Linear::init(store, &format!("{prefix}.fc1"), d_in, hidden, seed)?,
            fc2: Linear::init(store, &format!("{prefix}.fc2"), hidden, d_out, seed)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, bound, x)?;
        let h = tape.relu(h);
        self.fc2.forward(tape, bound, h)
    }
}

/// Layer normalization with learnable gain (init 1) and bias (init 0).
#[derive(Debug, Clone)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl Norm {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{prefix}.gain"), Tensor::filled(vec![d], 1.0)?)?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(vec![d])?)?,
            eps,
        })
    }

    /// `None` when layer norm is disabled in the config.
    pub fn maybe(store: &mut ParamStore, enabled: bool, prefix: &str, d: usize, eps: f64) -> Result<Option<Self>> {
        enabled.then(|| Self::init(store, prefix, d, eps)).transpose()
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, bound[self.gain], bound[self.bias], self.eps)
    }
}

pub(crate) fn apply_norm(norm: &Option<Norm>, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
    match norm {
        Some(n) => n.forward(tape, bound, x),
        None => Ok(x),
    }
}
