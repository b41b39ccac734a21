//! AdamW with decoupled weight decay, plus the warmup/decay learning-rate
//! schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter first/second moment buffers and the step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub config: AdamConfig,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &[(&'static str, &Tensor)]) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.shape().to_vec()))
            .collect();
        Self {
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            config,
        }
    }
}

/// One decoupled-weight-decay Adam update over named parameter buffers.
/// `grads` must be aligned with `params`; the step counter increments once
/// per call. Bit-deterministic for identical inputs.
pub fn adamw_step(
    params: &mut [(&'static str, &mut Tensor)],
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if lr < 0.0 || !lr.is_finite() {
        return Err(Error::Config(format!("learning rate {lr} must be >= 0")));
    }
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Config(format!(
            "optimizer buffers misaligned: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for ((name, param), grad) in params.iter().zip(grads) {
        if param.shape() != grad.shape() {
            return Err(Error::Shape {
                op: format!("adamw_step({name})"),
                lhs: param.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite {
                what: format!("gradient of {name}"),
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let AdamConfig {
        beta1,
        beta2,
        epsilon,
        weight_decay,
    } = state.config;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);

    for (idx, ((_, param), grad)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first_moment[idx].data_mut();
        let v = state.second_moment[idx].data_mut();
        let p = param.data_mut();
        let g = grad.data();
        for i in 0..p.len() {
            p[i] -= lr * weight_decay * p[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------------

/// Linear warmup from `floor_lr` to `peak_lr` over the first
/// `warmup_fraction` of `total_steps`, then linear decay back to `floor_lr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, floor_lr: f64, warmup_fraction: f64, total_steps: u64) -> Result<Self> {
        if floor_lr > peak_lr {
            return Err(Error::Config(format!(
                "floor_lr {floor_lr} exceeds peak_lr {peak_lr}"
            )));
        }
        if !(0.0 < warmup_fraction && warmup_fraction < 1.0) {
            return Err(Error::Config(format!(
                "warmup_fraction {warmup_fraction} must be in (0, 1)"
            )));
        }
        Ok(Self {
            peak_lr,
            floor_lr,
            warmup_fraction,
            total_steps,
        })
    }

    fn warmup_boundary(&self) -> u64 {
        let w = (self.warmup_fraction * self.total_steps as f64).round() as u64;
        w.clamp(1, self.total_steps.saturating_sub(1).max(1))
    }
}

/// Learning rate at a step in `0..=total_steps`. Endpoints sit exactly at
/// `floor_lr`; the warmup boundary sits exactly at `peak_lr` (interpolation
/// is written so the extremes are reproduced without rounding).
pub fn lr_at(schedule: &LrSchedule, step: u64) -> Result<f64> {
    if step > schedule.total_steps {
        return Err(Error::ScheduleRange {
            step,
            total: schedule.total_steps,
        });
    }
    if schedule.total_steps <= 1 {
        return Ok(schedule.floor_lr);
    }
    let w = schedule.warmup_boundary();
    if step <= w {
        let alpha = step as f64 / w as f64;
        Ok(schedule.floor_lr * (1.0 - alpha) + schedule.peak_lr * alpha)
    } else {
        let alpha = (step - w) as f64 / (schedule.total_steps - w) as f64;
        Ok(schedule.peak_lr * (1.0 - alpha) + schedule.floor_lr * alpha)
    }
}
