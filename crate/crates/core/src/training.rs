//! Per-sample Adam training with decoupled weight decay.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MultiModalSample;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, MetricsReport};
use crate::model::CfsumModel;
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Classic L2: add `weight_decay * theta` to the gradient instead of the
    /// update.
    pub coupled_l2: bool,
    /// Rescale the gradient when its global L2 norm exceeds this value.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 100,
            seed: 0,
            shuffle: true,
            coupled_l2: false,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted so a run can be made a no-op for reproducibility
        // checks.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be > 0, got {c}")));
            }
        }
        Ok(())
    }
}

/// First and second moments per parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn m(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn v(&self) -> &[Vec<f64>] {
        &self.v
    }

    pub fn t(&self) -> u64 {
        self.t
    }
}

/// One Adam update of every parameter.
///
/// Decoupled form: `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`.
pub fn adam_step(params: &mut ParamStore, grads: &[Vec<f64>], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} parameters, {} gradients, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (id, g) in params.ids().zip(grads) {
        if g.len() != params.get(id).numel() {
            return Err(Error::shape(
                "adam_step",
                format!("gradient of `{}` has {} entries, parameter {}", params.name(id), g.len(), params.get(id).numel()),
            ));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient {
                name: params.name(id).to_owned(),
            });
        }
    }

    let clip = match cfg.grad_clip {
        Some(c) => {
            let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if norm > c {
                c / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (lr, wd) = (cfg.learning_rate, cfg.weight_decay);

    let ids: Vec<_> = params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let theta = params.get_mut(id).data_mut();
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..theta.len() {
            let mut g = grads[k][i] * clip;
            if cfg.coupled_l2 {
                g += wd * theta[i];
            }
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let mut step = m_hat / (v_hat.sqrt() + cfg.eps);
            if !cfg.coupled_l2 {
                step += wd * theta[i];
            }
            theta[i] -= lr * step;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_map: Option<f64>,
    pub val_hit1: Option<f64>,
}

/// Epoch-at-a-time training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    state: AdamState,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: &CfsumModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            state: AdamState::new(model.params()),
            cfg,
            epoch: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Visiting order for `epoch`, a pure function of `(seed, epoch)`.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        if self.cfg.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
            rng.set_stream(epoch as u64);
            order.shuffle(&mut rng);
        }
        order
    }

    /// One pass over `data`, one optimizer step per sample. Returns the mean
    /// training loss, summed in visiting order.
    pub fn run_epoch(&mut self, model: &mut CfsumModel, data: &[MultiModalSample]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Data("cannot train on an empty dataset".into()));
        }
        let epoch = self.epoch;
        let mut total = 0.0;
        for idx in self.epoch_order(epoch, data.len()) {
            let (loss, grads) = model.loss_and_grads(&data[idx])?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            total += loss;
            adam_step(model.params_mut(), &grads, &mut self.state, &self.cfg)?;
        }
        self.epoch += 1;
        let mean = total / data.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        Ok(mean)
    }
}

/// Trains for `cfg.epochs` epochs, evaluating on `val` after each one when
/// given. `on_epoch` sees each record as soon as it exists.
pub fn train(
    model: &mut CfsumModel,
    data: &[MultiModalSample],
    val: Option<(&[MultiModalSample], f64)>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let train_loss = trainer.run_epoch(model, data)?;
        let report: Option<MetricsReport> = match val {
            Some((v, threshold)) => Some(evaluate(model, v, threshold)?),
            None => None,
        };
        let record = EpochRecord {
            epoch: trainer.epoch() - 1,
            train_loss,
            val_map: report.as_ref().map(|r| r.map),
            val_hit1: report.as_ref().map(|r| r.hit_at_1),
        };
        log::info!(
            "epoch {} train_loss {:.6} val_map {:?}",
            record.epoch,
            record.train_loss,
            record.val_map
        );
        on_epoch(&record);
        history.push(record);
    }
    Ok(history)
}
