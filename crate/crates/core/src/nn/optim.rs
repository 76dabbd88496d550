use serde::{Deserialize, Serialize};

use super::tensor::ParamStore;
use crate::error::{Error, Result};
use crate::real::Real;

/// Cosine-decayed learning rate, `base_lr * 0.5 * (1 + cos(pi * step / total))`.
///
/// Steps past `total_steps` clamp to the final value 0.
pub fn lr_cosine(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    let frac = step as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    SgdMomentum { momentum: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd_momentum(momentum: f64) -> Self {
        OptimizerKind::SgdMomentum { momentum }
    }
}

/// Optimizer state aligned tensor-for-tensor with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Optimizer<T: Real = f32> {
    kind: OptimizerKind,
    base_lr: f64,
    weight_decay: f64,
    /// `Some(total)` applies cosine decay over `total` steps; `None` keeps `base_lr`.
    cosine_total: Option<usize>,
    step_count: usize,
    first: ParamStore<T>,
    second: Option<ParamStore<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(
        kind: OptimizerKind,
        params: &ParamStore<T>,
        base_lr: f64,
        weight_decay: f64,
        cosine_total: Option<usize>,
    ) -> Self {
        let second = matches!(kind, OptimizerKind::Adam { .. }).then(|| params.zeros_like());
        Self {
            kind,
            base_lr,
            weight_decay,
            cosine_total,
            step_count: 0,
            first: params.zeros_like(),
            second,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Learning rate the next call to [`Optimizer::step`] will use.
    pub fn current_lr(&self) -> f64 {
        match self.cosine_total {
            Some(total) => lr_cosine(self.step_count, total, self.base_lr),
            None => self.base_lr,
        }
    }

    /// Applies one update. Fails without touching `params` if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>) -> Result<()> {
        params.check_aligned(grads)?;
        params.check_aligned(&self.first)?;
        for (name, g) in grads.iter() {
            if g.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    tensor: name.to_string(),
                });
            }
        }
        let lr = T::of(self.current_lr());
        let wd = T::of(self.weight_decay);
        self.step_count += 1;
        match self.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step_count as i32;
                let bc1 = T::of(1.0 - beta1.powi(t));
                let bc2 = T::of(1.0 - beta2.powi(t));
                let (b1, b2, eps) = (T::of(beta1), T::of(beta2), T::of(eps));
                let second = self.second.as_mut().expect("adam keeps second moments");
                let iter = params
                    .iter_mut()
                    .zip(grads.iter())
                    .zip(self.first.iter_mut())
                    .zip(second.iter_mut());
                for ((((_, p), (_, g)), (_, m)), (_, v)) in iter {
                    let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
                    for i in 0..p.len() {
                        let gi = g[i] + wd * p[i];
                        m[i] = b1 * m[i] + (T::one() - b1) * gi;
                        v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        p[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::SgdMomentum { momentum } => {
                let mu = T::of(momentum);
                let iter = params.iter_mut().zip(grads.iter()).zip(self.first.iter_mut());
                for (((_, p), (_, g)), (_, vel)) in iter {
                    let (p, g, vel) = (p.data_mut(), g.data(), vel.data_mut());
                    for i in 0..p.len() {
                        let gi = g[i] + wd * p[i];
                        vel[i] = mu * vel[i] + gi;
                        p[i] -= lr * vel[i];
                    }
                }
            }
        }
        Ok(())
    }
}

/// Exponential moving average of a parameter store.
#[derive(Debug, Clone)]
pub struct EmaShadow<T: Real = f32> {
    decay: f64,
    shadow: ParamStore<T>,
}

impl<T: Real> EmaShadow<T> {
    pub fn new(decay: f64, params: &ParamStore<T>) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!("EMA decay must lie in [0, 1), got {decay}")));
        }
        Ok(Self {
            decay,
            shadow: params.clone(),
        })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn shadow(&self) -> &ParamStore<T> {
        &self.shadow
    }

    pub fn into_shadow(self) -> ParamStore<T> {
        self.shadow
    }

    /// `shadow <- decay * shadow + (1 - decay) * params`.
    pub fn update(&mut self, params: &ParamStore<T>) -> Result<()> {
        self.update_with(params, self.decay)
    }

    /// Update with warm-up: the effective decay is `min(decay, (1 + n) / (10 + n))`
    /// where `n` is the number of updates applied so far.
    pub fn update_warm(&mut self, params: &ParamStore<T>, n: usize) -> Result<()> {
        let warm = (1.0 + n as f64) / (10.0 + n as f64);
        self.update_with(params, self.decay.min(warm))
    }

    fn update_with(&mut self, params: &ParamStore<T>, decay: f64) -> Result<()> {
        self.shadow.check_aligned(params)?;
        let d = T::of(decay);
        let one_minus = T::of(1.0 - decay);
        for ((_, s), (_, p)) in self.shadow.iter_mut().zip(params.iter()) {
            for (si, &pi) in s.data_mut().iter_mut().zip(p.data()) {
                *si = d * *si + one_minus * pi;
            }
        }
        Ok(())
    }
}
