//! Block-coordinate descent: AdamW on the smooth blocks, proximal
//! soft-thresholding on the gate vectors.
//!
//! One [`train_step`] runs a single forward/backward pass, applies AdamW to every
//! trainable group except gates, then updates each gate vector with
//! `v ← ξ(v − ρ·∇v, η_t·λ)` using the gate gradient from that same pass. The
//! step size `η_t` is the cosine-scheduled learning rate unless overridden.

use std::collections::{BTreeMap, VecDeque};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::adapters::ParamSet;
use crate::error::{Error, Result};
use crate::linalg::{l1_norm, Matrix, Vector};
use crate::model_kit::{LossKind, ParamKind, ToyModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CosineSchedule {
    pub total_epochs: usize,
    pub min_lr: f64,
}

impl Default for CosineSchedule {
    fn default() -> Self {
        CosineSchedule {
            total_epochs: 200,
            min_lr: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProxConfig {
    /// Weight of the l1 penalty on gates.
    pub lambda: f64,
    /// Gradient step size inside the prox argument.
    pub rho: f64,
    pub base_lr: f64,
    pub schedule: CosineSchedule,
    pub adamw: AdamWConfig,
    /// Fixed `η_t` for the prox step; `None` uses the scheduled learning rate.
    pub prox_lr: Option<f64>,
}

impl Default for ProxConfig {
    fn default() -> Self {
        ProxConfig {
            lambda: 0.5,
            rho: 0.0,
            base_lr: 1e-3,
            schedule: CosineSchedule::default(),
            adamw: AdamWConfig::default(),
            prox_lr: None,
        }
    }
}

impl ProxConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("prox.lambda must be a finite value >= 0");
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return bad("prox.rho must be a finite value >= 0");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("prox.base_lr must be positive");
        }
        if self.schedule.total_epochs == 0 {
            return bad("prox.schedule.total_epochs must be at least 1");
        }
        if !(self.schedule.min_lr >= 0.0 && self.schedule.min_lr <= self.base_lr) {
            return bad("prox.schedule.min_lr must lie in [0, base_lr]");
        }
        let a = &self.adamw;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return bad("prox.adamw betas must lie in [0, 1)");
        }
        if !(a.eps > 0.0 && a.weight_decay >= 0.0) {
            return bad("prox.adamw.eps must be positive and weight_decay >= 0");
        }
        if let Some(lr) = self.prox_lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad("prox.prox_lr must be positive");
            }
        }
        Ok(())
    }

    /// Step size used inside the prox at a given scheduled learning rate.
    pub fn prox_eta(&self, scheduled: f64) -> f64 {
        self.prox_lr.unwrap_or(scheduled)
    }
}

/// `ξ(x, τ)`: shrink toward zero by `tau`, exactly zero on `[-tau, tau]`.
pub fn soft_threshold(x: f64, tau: f64) -> Result<f64> {
    if !(tau >= 0.0) {
        return Err(Error::Parameter(format!(
            "soft threshold needs tau >= 0, got {tau}"
        )));
    }
    Ok(shrink(x, tau))
}

#[inline]
fn shrink(x: f64, tau: f64) -> f64 {
    if x > tau {
        x - tau
    } else if x < -tau {
        x + tau
    } else {
        0.0
    }
}

/// `v_i ← ξ(v_i − ρ·g_i, η_t·λ)` for every coordinate.
pub fn prox_step_v(v: &[f64], grad_v: &[f64], eta_t: f64, cfg: &ProxConfig) -> Result<Vector> {
    if v.len() != grad_v.len() {
        return Err(Error::Shape(format!(
            "gate of length {} with gradient of length {}",
            v.len(),
            grad_v.len()
        )));
    }
    if !(eta_t > 0.0) {
        return Err(Error::Parameter(format!("prox step needs eta_t > 0, got {eta_t}")));
    }
    let tau = eta_t * cfg.lambda;
    soft_threshold(0.0, tau)?;
    Ok(v
        .iter()
        .zip(grad_v)
        .map(|(&x, &g)| shrink(x - cfg.rho * g, tau))
        .collect())
}

/// Cosine decay from `base_lr` at epoch 0 to `min_lr` at `total_epochs`;
/// later epochs stay at `min_lr`.
pub fn cosine_lr(epoch: usize, cfg: &ProxConfig) -> f64 {
    let total = cfg.schedule.total_epochs.max(1);
    let e = epoch.min(total) as f64;
    let min = cfg.schedule.min_lr;
    min + 0.5 * (cfg.base_lr - min) * (1.0 + (PI * e / total as f64).cos())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub first: Vector,
    pub second: Vector,
    pub steps: u64,
}

#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    pub moments: BTreeMap<String, Moments>,
    pub epoch: usize,
    pub lr: f64,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One AdamW update of a parameter group in place, with bias-corrected moments
/// and decoupled weight decay.
pub fn adamw_step(
    state: &mut OptimizerState,
    group: &str,
    param: &mut [f64],
    grad: &[f64],
    eta_t: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if param.len() != grad.len() {
        return Err(Error::Shape(format!(
            "group `{group}` has {} entries but gradient has {}",
            param.len(),
            grad.len()
        )));
    }
    let mom = state.moments.entry(group.to_string()).or_insert_with(|| Moments {
        first: vec![0.0; param.len()],
        second: vec![0.0; param.len()],
        steps: 0,
    });
    if mom.first.len() != param.len() {
        return Err(Error::Shape(format!(
            "moments of `{group}` have {} entries but parameter has {}",
            mom.first.len(),
            param.len()
        )));
    }
    mom.steps += 1;
    let t = mom.steps as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - eta_t * cfg.weight_decay;
    for (((p, &g), m), v) in param
        .iter_mut()
        .zip(grad)
        .zip(mom.first.iter_mut())
        .zip(mom.second.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p *= decay;
        *p -= eta_t * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// A batch of support examples and how to score it.
pub struct Batch<'a> {
    pub x: &'a Matrix,
    pub y: &'a Matrix,
    pub loss: LossKind,
    /// Columns per example (pixels per image; 1 for vector samples).
    pub group: usize,
}

/// One alternation of the block-coordinate scheme. Returns the batch loss
/// measured before the update.
pub fn train_step(
    model: &mut ToyModel,
    batch: &Batch<'_>,
    trainable: &ParamSet,
    state: &mut OptimizerState,
    cfg: &ProxConfig,
    eta_t: f64,
) -> Result<f64> {
    let kinds: BTreeMap<String, ParamKind> = model
        .param_infos()
        .into_iter()
        .map(|p| (p.name, p.kind))
        .collect();
    if let Some(missing) = trainable.iter().find(|n| !kinds.contains_key(*n)) {
        return Err(Error::Config(format!("trainable group `{missing}` is not in the model")));
    }
    let is_gate = |name: &str| kinds.get(name) == Some(&ParamKind::Gate);

    let (pred, cache) = model.forward(batch.x)?;
    let (loss, grad_out) = batch.loss.evaluate(&pred, batch.y, batch.group)?;
    if !loss.is_finite() {
        let layer = cache.first_non_finite().unwrap_or("loss").to_string();
        return Err(Error::NonFinite { layer });
    }
    // The gate gradient only enters the update through ρ.
    let wanted: ParamSet = trainable
        .iter()
        .filter(|n| cfg.rho != 0.0 || !is_gate(n))
        .cloned()
        .collect();
    let grads = model.backward_for(&cache, &grad_out, Some(&wanted))?;
    if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite {
            layer: name.to_string(),
        });
    }

    let eta_prox = cfg.prox_eta(eta_t);
    state.lr = eta_t;
    for (name, param) in model.params_mut() {
        if !trainable.contains(&name) {
            continue;
        }
        if is_gate(&name) {
            let zeros;
            let g = match grads.get(&name) {
                Some(g) => g,
                None => {
                    zeros = vec![0.0; param.len()];
                    &zeros
                }
            };
            let updated = prox_step_v(param, g, eta_prox, cfg)?;
            param.copy_from_slice(&updated);
        } else {
            let g = grads
                .get(&name)
                .ok_or_else(|| Error::Contract(format!("no gradient for `{name}`")))?;
            adamw_step(state, &name, param, g, eta_t, &cfg.adamw)?;
        }
    }
    Ok(loss)
}

/// `λ·Σ‖v‖₁` over every gate vector in the model.
pub fn gate_penalty(model: &ToyModel, lambda: f64) -> f64 {
    lambda
        * model
            .adapters()
            .filter_map(|(_, s)| s.gate.as_ref())
            .map(|v| l1_norm(v))
            .sum::<f64>()
}

/// Stops once the loss improved by no more than `threshold` (relative to the
/// loss `window` epochs earlier) over the last `window` epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub window: usize,
    pub threshold: f64,
    history: VecDeque<f64>,
}

impl Default for EarlyStopState {
    fn default() -> Self {
        EarlyStopState::new(20, 0.01)
    }
}

impl EarlyStopState {
    pub fn new(window: usize, threshold: f64) -> Self {
        EarlyStopState {
            window,
            threshold,
            history: VecDeque::with_capacity(window + 1),
        }
    }

    /// Records `epoch_loss` and reports whether training should stop.
    pub fn should_stop(&mut self, epoch_loss: f64) -> bool {
        self.history.push_back(epoch_loss);
        while self.history.len() > self.window + 1 {
            self.history.pop_front();
        }
        if self.history.len() <= self.window {
            return false;
        }
        let reference = self.history[0];
        if reference <= 0.0 {
            return true;
        }
        reference - epoch_loss <= self.threshold * reference
    }
}
