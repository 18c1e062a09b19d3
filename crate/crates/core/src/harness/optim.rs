//! Adam(W) and the warmup schedules.

use super::config::{Decay, OptimizerSection, ScheduleSection};
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::real::Real;
use crate::tensor::{GradMap, ParamId, Tensor};

/// Multiplier on the base rate at optimizer step `step` (1-based): linear
/// warmup to 1, then linear decay to 0 at `total_steps` or `1/√` decay.
pub fn lr_factor(s: &ScheduleSection, step: usize) -> f64 {
    let step = step.max(1) as f64;
    let warm = s.warmup_steps as f64;
    if s.warmup_steps > 0 && step <= warm {
        return step / warm;
    }
    match s.decay {
        Decay::Linear => {
            let total = s.total_steps as f64;
            ((total - step) / (total - warm)).clamp(0.0, 1.0)
        }
        Decay::InvSqrt => (warm.max(1.0) / step).sqrt(),
    }
}

/// First and second moments kept in f64 regardless of the parameter type.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: OptimizerSection,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new<T: Real>(cfg: OptimizerSection, params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = params.entries().iter().map(|e| vec![0.0; e.value.numel()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update with learning rate `lr`; every parameter must have a gradient.
    pub fn step<T: Real>(&mut self, params: &mut ParamStore<T>, grads: &GradMap<T>, lr: f64) -> Result<()> {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, (m, v)) in self.m.iter_mut().zip(self.v.iter_mut()).enumerate() {
            let id = ParamId(i);
            let g = grads
                .get(id)
                .ok_or_else(|| Error::State(format!("no gradient for parameter {i}")))?;
            let p: &mut Tensor<T> = params.get_mut(id);
            if g.shape() != p.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.f64();
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                let wf = w.f64();
                *w = T::of(wf - lr * (update + c.weight_decay * wf));
            }
        }
        Ok(())
    }
}
