//! Optimizers (ADAM, SGD, Adagrad, Adadelta) and the plateau learning-rate
//! schedule with early stopping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::UNetParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[serde(rename = "ADAM")]
    Adam,
    #[serde(rename = "SGD")]
    Sgd,
    #[serde(rename = "Adagrad")]
    Adagrad,
    #[serde(rename = "Adadelta")]
    Adadelta,
}

impl OptimizerKind {
    pub fn default_eps(self) -> f64 {
        match self {
            OptimizerKind::Adam | OptimizerKind::Adagrad => 1e-8,
            OptimizerKind::Adadelta => 1e-6,
            OptimizerKind::Sgd => 0.0,
        }
    }

    fn slots(self) -> usize {
        match self {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adagrad => 1,
            OptimizerKind::Adam | OptimizerKind::Adadelta => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub rho: f64,
    /// Numerical floor; `None` picks the kind's default.
    pub eps: Option<f64>,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            rho: 0.95,
            eps: None,
        }
    }
}

impl OptimizerSpec {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            ..Default::default()
        }
    }

    pub fn eps(&self) -> f64 {
        self.eps.unwrap_or_else(|| self.kind.default_eps())
    }

    /// Copy with `eps` filled in, for recording in run metadata.
    pub fn resolved(&self) -> Self {
        Self {
            eps: Some(self.eps()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("rho", self.rho)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if !(self.eps() >= 0.0 && self.eps().is_finite()) {
            return Err(Error::Config(format!("eps must be non-negative, got {}", self.eps())));
        }
        Ok(())
    }
}

/// Per-parameter accumulators, shaped like the parameters.
///
/// ADAM keeps (m, v), Adagrad the running sum of squared gradients,
/// Adadelta (E[g²], E[Δx²]).
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub slots: Vec<UNetParams>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &UNetParams) -> Self {
        Self {
            step: 0,
            slots: (0..kind.slots()).map(|_| params.zeros_like()).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub spec: OptimizerSpec,
    pub state: OptimizerState,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec, params: &UNetParams) -> Result<Self> {
        spec.validate()?;
        let state = OptimizerState::new(spec.kind, params);
        Ok(Self { spec, state })
    }

    pub fn lr(&self) -> f64 {
        self.spec.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.spec.lr = lr;
    }

    /// Applies one update in place. Gradients are checked for finiteness
    /// before anything is modified.
    pub fn step(&mut self, params: &mut UNetParams, grads: &UNetParams) -> Result<()> {
        if params.layers.len() != grads.layers.len()
            || params
                .layers
                .iter()
                .zip(&grads.layers)
                .any(|(p, g)| !p.kernel.same_shape(&g.kernel))
        {
            return Err(Error::dim("gradient layout does not match parameters"));
        }
        if let Some(bad) = grads.layers.iter().find(|l| !l.kernel.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient in layer {}",
                bad.name
            )));
        }

        self.state.step += 1;
        let t = self.state.step as f64;
        let spec = &self.spec;
        let (lr, eps) = (spec.lr, spec.eps());
        let grad_bufs: Vec<&Vec<f64>> = grads.buffers().map(|(_, b)| b).collect();

        match spec.kind {
            OptimizerKind::Sgd => {
                for ((_, p), g) in params.buffers_mut().zip(&grad_bufs) {
                    for (p, g) in p.iter_mut().zip(g.iter()) {
                        *p -= lr * g;
                    }
                }
            }
            OptimizerKind::Adagrad => {
                let acc = self.state.slots[0].buffers_mut();
                for (((_, p), (_, a)), g) in params.buffers_mut().zip(acc).zip(&grad_bufs) {
                    for ((p, a), g) in p.iter_mut().zip(a.iter_mut()).zip(g.iter()) {
                        *a += g * g;
                        *p -= lr * g / (a.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (spec.beta1, spec.beta2);
                let c1 = 1.0 - b1.powf(t);
                let c2 = 1.0 - b2.powf(t);
                let (m_slot, v_slot) = self.state.slots.split_at_mut(1);
                let moments = m_slot[0].buffers_mut().zip(v_slot[0].buffers_mut());
                for (((_, p), ((_, m), (_, v))), g) in params.buffers_mut().zip(moments).zip(&grad_bufs) {
                    for (((p, m), v), g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.iter()) {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *p -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Adadelta => {
                let rho = spec.rho;
                let (g_slot, d_slot) = self.state.slots.split_at_mut(1);
                let accs = g_slot[0].buffers_mut().zip(d_slot[0].buffers_mut());
                for (((_, p), ((_, eg), (_, ed))), g) in params.buffers_mut().zip(accs).zip(&grad_bufs) {
                    for (((p, eg), ed), g) in p.iter_mut().zip(eg.iter_mut()).zip(ed.iter_mut()).zip(g.iter()) {
                        *eg = rho * *eg + (1.0 - rho) * g * g;
                        let delta = -((*ed + eps).sqrt() / (*eg + eps).sqrt()) * g;
                        *ed = rho * *ed + (1.0 - rho) * delta * delta;
                        *p += lr * delta;
                    }
                }
            }
        }

        if let Some(bad) = params.layers.iter().find(|l| !l.kernel.is_finite()) {
            return Err(Error::Training(format!(
                "update produced non-finite parameters in layer {}",
                bad.name
            )));
        }
        Ok(())
    }
}

/// Plateau decay and early stopping settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub enabled: bool,
    pub decay_factor: f64,
    pub plateau_patience: usize,
    pub stop_patience: usize,
    /// A loss counts as an improvement only if below `best − tolerance`.
    pub tolerance: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            decay_factor: 0.5,
            plateau_patience: 5,
            stop_patience: 10,
            tolerance: 1e-6,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "decay_factor must lie in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if self.plateau_patience == 0 || self.stop_patience == 0 {
            return Err(Error::Config("patience values must be at least 1".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::Config("tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochAction {
    Continue,
    DecayLr,
    Stop,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleState {
    pub config: ScheduleConfig,
    pub best: f64,
    /// Epochs since the last improvement; drives early stopping.
    pub stale: usize,
    /// Epochs since the last improvement or decay; drives LR decay.
    pub plateau: usize,
    pub lr: f64,
}

impl ScheduleState {
    pub fn new(config: ScheduleConfig, lr: f64) -> Self {
        Self {
            config,
            best: f64::INFINITY,
            stale: 0,
            plateau: 0,
            lr,
        }
    }

    /// Feeds one validation loss. Stop wins over decay when both are due.
    pub fn end_of_epoch(&mut self, val_loss: f64) -> EpochAction {
        if val_loss < self.best - self.config.tolerance {
            self.best = val_loss;
            self.stale = 0;
            self.plateau = 0;
            return EpochAction::Continue;
        }
        self.stale += 1;
        self.plateau += 1;
        if self.stale >= self.config.stop_patience {
            EpochAction::Stop
        } else if self.plateau >= self.config.plateau_patience {
            self.plateau = 0;
            self.lr *= self.config.decay_factor;
            EpochAction::DecayLr
        } else {
            EpochAction::Continue
        }
    }
}
