//! Learning-rate schedule, gradient clipping, Adam and EMA.

use crate::error::{invalid, Error, Result};
use crate::params::ParamSet;
use crate::tensor::Real;

/// Linear warmup then linear decay to a floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSchedule {
    pub base_lr: f64,
    pub final_lr: f64,
    pub warmup_steps: u64,
    pub decay_end_step: u64,
    pub max_grad_norm: f64,
    pub ema_decay: f64,
}

impl Default for TrainSchedule {
    /// Base 2e-4 decayed to 2e-5, clip 1.0, EMA 0.9995. Warmup/decay are
    /// expressed in steps; use [`TrainSchedule::from_epochs`] for the
    /// 25/50-epoch recipe.
    fn default() -> Self {
        TrainSchedule {
            base_lr: 2e-4,
            final_lr: 2e-5,
            warmup_steps: 0,
            decay_end_step: 0,
            max_grad_norm: 1.0,
            ema_decay: 0.9995,
        }
    }
}

/// Steps per epoch: `ceil(dataset_size / batch_size)`.
pub fn steps_per_epoch(dataset_size: usize, batch_size: usize) -> u64 {
    dataset_size.div_ceil(batch_size.max(1)) as u64
}

impl TrainSchedule {
    /// Recipe with warmup and decay end given in epochs.
    pub fn from_epochs(
        warmup_epochs: f64,
        decay_end_epochs: f64,
        dataset_size: usize,
        batch_size: usize,
    ) -> Self {
        let spe = steps_per_epoch(dataset_size, batch_size) as f64;
        TrainSchedule {
            warmup_steps: (warmup_epochs * spe).ceil() as u64,
            decay_end_step: (decay_end_epochs * spe).ceil() as u64,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.final_lr > 0.0 && self.final_lr <= self.base_lr) {
            return invalid(format!(
                "need 0 < final_lr <= base_lr, got {} / {}",
                self.final_lr, self.base_lr
            ));
        }
        if self.warmup_steps > self.decay_end_step {
            return invalid(format!(
                "warmup_steps {} > decay_end_step {}",
                self.warmup_steps, self.decay_end_step
            ));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return invalid(format!("ema_decay {} outside [0,1]", self.ema_decay));
        }
        if self.max_grad_norm <= 0.0 {
            return invalid("max_grad_norm must be positive");
        }
        Ok(())
    }
}

/// Learning rate at `step`: ramp 0→base over the warmup, linear decay to
/// `final_lr` at `decay_end_step`, constant afterwards.
pub fn lr_at(sched: &TrainSchedule, step: u64) -> f64 {
    let s = step as f64;
    if step < sched.warmup_steps {
        return sched.base_lr * s / sched.warmup_steps as f64;
    }
    if step >= sched.decay_end_step {
        return sched.final_lr;
    }
    let span = (sched.decay_end_step - sched.warmup_steps) as f64;
    let frac = (s - sched.warmup_steps as f64) / span;
    sched.base_lr + (sched.final_lr - sched.base_lr) * frac
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm<T: Real>(params: &mut ParamSet<T>, max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 {
        return invalid(format!("max_norm must be positive, got {max_norm}"));
    }
    for p in params.iter() {
        if !p.grad.is_finite() {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    let norm = params.grad_norm();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for p in params.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    Ok(norm)
}

/// Adam hyper-parameters; weight decay is always zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.95, eps: 1e-8 }
    }
}

impl Adam {
    /// One bias-corrected Adam update. Moments live on the parameters;
    /// gradients are zeroed afterwards.
    pub fn step<T: Real>(&self, params: &mut ParamSet<T>, lr: f64) -> Result<()> {
        if lr <= 0.0 || !lr.is_finite() {
            return invalid(format!("learning rate must be positive, got {lr}"));
        }
        params.step += 1;
        let t = params.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let step_size = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(self.eps);
        for p in params.iter_mut() {
            let n = p.value.len();
            let (val, grad, m, v) = (
                p.value.data_mut().as_mut_ptr(),
                p.grad.data_mut(),
                p.m.data_mut().as_mut_ptr(),
                p.v.data_mut().as_mut_ptr(),
            );
            for i in 0..n {
                let g = grad[i];
                // SAFETY: value, m and v have the same length as grad (ParamSet invariant).
                unsafe {
                    let mi = b1 * *m.add(i) + one_b1 * g;
                    let vi = b2 * *v.add(i) + one_b2 * g * g;
                    *m.add(i) = mi;
                    *v.add(i) = vi;
                    *val.add(i) -= step_size * mi / ((vi * inv_bc2).sqrt() + eps);
                }
                grad[i] = T::zero();
            }
        }
        Ok(())
    }
}

/// Adam step with the default betas (0.9, 0.95), eps 1e-8 and no weight decay.
pub fn optimizer_step<T: Real>(params: &mut ParamSet<T>, lr: f64) -> Result<()> {
    Adam::default().step(params, lr)
}

/// `ema ← decay·ema + (1−decay)·live`, elementwise.
pub fn ema_update<T: Real>(ema: &mut ParamSet<T>, live: &ParamSet<T>, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return invalid(format!("ema decay {decay} outside [0,1]"));
    }
    ema.check_compatible(live)?;
    let d = T::lit(decay);
    let one_d = T::lit(1.0 - decay);
    for (e, l) in ema.iter_mut().zip(live.iter()) {
        for (ev, &lv) in e.value.data_mut().iter_mut().zip(l.value.data()) {
            *ev = d * *ev + one_d * lv;
        }
    }
    Ok(())
}
