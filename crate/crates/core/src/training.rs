//! Score-network training: ensemble targets, annealed source, posterior
//! sampling, the regression loss and the Adam/EMA loop.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bridge::{posterior_sample_at, DiffusionSchedule, TemperatureLaw};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::{Bridge, LineageRound};
use crate::nn::{EmaShadow, Matrix, Optimizer, OptimizerKind, ParamStore};
use crate::real::Real;
use crate::score::{ScoreArch, ScoreInput, ScoreNetwork};
use crate::teacher::{source_feature, EnsembleBundle};

/// Offset that separates the training stream from the initialization stream.
const STREAM: u64 = 0x5851_f42d_4c95_7f2d;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Cosine-decay the learning rate to zero over `steps`.
    pub cosine: bool,
    pub ema_decay: f64,
    /// Use `min(decay, (1 + n) / (10 + n))` so the shadow tracks early iterates.
    pub ema_warmup: bool,
    /// Beta(alpha, alpha) input mixup; 0 disables.
    pub mixup_alpha: f64,
    /// Standard deviation of Gaussian noise added to every input; 0 disables.
    #[serde(default)]
    pub jitter: f64,
    pub teacher_indices: Vec<usize>,
    pub schedule: DiffusionSchedule,
    pub temperature: TemperatureLaw,
    pub embed: usize,
    pub blocks: usize,
    pub seed: u64,
}

impl BridgeTrainConfig {
    pub fn new(teacher_indices: Vec<usize>, schedule: DiffusionSchedule, seed: u64) -> Self {
        Self {
            steps: 20_000,
            batch: 128,
            lr: 1e-3,
            cosine: false,
            ema_decay: 0.99995,
            ema_warmup: true,
            mixup_alpha: 0.4,
            jitter: 0.0,
            teacher_indices,
            schedule,
            temperature: TemperatureLaw::default(),
            embed: 8,
            blocks: 2,
            seed,
        }
    }

    pub fn validate(&self, bundle: &EnsembleBundle) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("bridge training needs positive steps and batch".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.ema_decay) || self.mixup_alpha < 0.0 || !(self.jitter >= 0.0) {
            return Err(Error::Config(format!(
                "invalid lr {} / ema decay {} / mixup alpha {}",
                self.lr, self.ema_decay, self.mixup_alpha
            )));
        }
        check_indices(&self.teacher_indices, bundle)
    }

    fn fit(&self) -> FitConfig {
        FitConfig {
            steps: self.steps,
            lr: self.lr,
            cosine: self.cosine,
            ema_decay: self.ema_decay,
            ema_warmup: self.ema_warmup,
        }
    }
}

pub(crate) fn check_indices(indices: &[usize], bundle: &EnsembleBundle) -> Result<()> {
    if indices.len() < 2 {
        return Err(Error::Config(format!("a bridge needs at least 2 members, got {indices:?}")));
    }
    if !indices.contains(&bundle.source_index) {
        return Err(Error::Config(format!(
            "teacher indices {indices:?} must include the source member {}",
            bundle.source_index
        )));
    }
    if let Some(&i) = indices.iter().find(|&&i| i >= bundle.len()) {
        return Err(Error::Config(format!("member {i} out of range for a bundle of {}", bundle.len())));
    }
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != indices.len() {
        return Err(Error::Config(format!("duplicate teacher indices in {indices:?}")));
    }
    Ok(())
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Draws training inputs in shuffled epochs, optionally mixed pairwise and jittered.
pub(crate) struct InputSampler<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    mixup: Option<Beta<f64>>,
    jitter: Option<Normal<f64>>,
}

impl<'a> InputSampler<'a> {
    pub(crate) fn new(data: &'a Dataset, mixup_alpha: f64, jitter: f64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        let mixup = if mixup_alpha > 0.0 {
            Some(Beta::new(mixup_alpha, mixup_alpha).map_err(|e| Error::Config(format!("mixup alpha: {e}")))?)
        } else {
            None
        };
        let jitter = if jitter > 0.0 {
            Some(Normal::new(0.0, jitter).map_err(|e| Error::Config(format!("jitter: {e}")))?)
        } else {
            None
        };
        Ok(Self {
            data,
            order: (0..data.len()).collect(),
            pos: data.len(),
            mixup,
            jitter,
        })
    }

    pub(crate) fn next<R: Rng + ?Sized>(&mut self, batch: usize, rng: &mut R) -> Matrix<f32> {
        use rand::seq::SliceRandom;
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            idx.push(self.order[self.pos]);
            self.pos += 1;
        }
        let mut x = self.data.gather(&idx);
        if let Some(beta) = &self.mixup {
            let n = self.data.len();
            for r in 0..batch {
                let lam = beta.sample(rng) as f32;
                let partner = self.data.features.row(rng.random_range(0..n));
                for (v, &p) in x.row_mut(r).iter_mut().zip(partner) {
                    *v = lam * *v + (1.0 - lam) * p;
                }
            }
        }
        if let Some(noise) = &self.jitter {
            for v in x.data.iter_mut() {
                *v += noise.sample(rng) as f32;
            }
        }
        x
    }
}

/// Source feature, raw source logit and ensemble target for a batch of inputs.
#[derive(Debug, Clone)]
pub struct BatchTargets {
    pub h1: Matrix<f32>,
    pub z1: Matrix<f32>,
    pub z0: Matrix<f32>,
}

pub fn ensemble_targets(bundle: &EnsembleBundle, indices: &[usize], x: &Matrix<f32>) -> Result<BatchTargets> {
    let (h1, z1) = source_feature(bundle, x)?;
    let ens = bundle.ens_logits(indices, x)?;
    let z0 = Matrix::from_vec(x.rows, z1.cols, ens.into_iter().flat_map(|e| e.logit).collect())?;
    Ok(BatchTargets { h1, z1, z0 })
}

/// Per-row temperature annealing of the source logits.
pub(crate) fn anneal_rows<R: Rng + ?Sized>(z1: &Matrix<f32>, law: &TemperatureLaw, rng: &mut R) -> Matrix<f32> {
    let mut out = z1.clone();
    for r in 0..out.rows {
        let t = law.sample(rng) as f32;
        out.row_mut(r).iter_mut().for_each(|v| *v /= t);
    }
    out
}

/// `(Z_t - Z_0) / sigma_t`.
pub fn bridge_target<T: Real>(z0: &[T], zt: &[T], sigma: f64) -> Vec<T> {
    let s = T::of(sigma);
    zt.iter().zip(z0).map(|(&a, &b)| (a - b) / s).collect()
}

/// Mean over rows of `||eps(h1, Z_t, t) - target||^2` and its parameter gradients.
pub fn score_loss<T: Real>(
    net: &ScoreNetwork<T>,
    h1: &Matrix<T>,
    zt: &Matrix<T>,
    times: &[f64],
    target: &Matrix<T>,
) -> Result<(f64, ParamStore<T>)> {
    let (eps, tape) = net.forward(&ScoreInput { h1, zt, t: times })?;
    if target.rows != eps.rows || target.cols != eps.cols {
        return Err(Error::Shape {
            layer: "score.target".into(),
            expected: eps.cols,
            got: target.cols,
        });
    }
    let n = eps.rows as f64;
    let scale = T::of(2.0 / n);
    let mut loss = 0.0;
    let mut g = Matrix::zeros(eps.rows, eps.cols);
    for ((gv, &e), &y) in g.data.iter_mut().zip(&eps.data).zip(&target.data) {
        let d = e - y;
        loss += d.f64() * d.f64();
        *gv = scale * d;
    }
    let mut grads = net.params().zeros_like();
    net.backward(&tape, &g, &mut grads)?;
    Ok((loss / n, grads))
}

/// Single-example bridge loss at grid time `t` with a fresh posterior draw.
pub fn loss_term<T: Real, R: Rng + ?Sized>(
    net: &ScoreNetwork<T>,
    h1: &[T],
    z0: &[T],
    z1: &[T],
    t: f64,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<(f64, ParamStore<T>)> {
    let i = schedule.index_of(t)?;
    if i == 0 {
        return Err(Error::Contract("bridge loss is undefined at t = 0 (sigma_0 = 0)".into()));
    }
    let zt = posterior_sample_at(z0, z1, i, schedule, Some(rng));
    loss_at(net, h1, z0, &zt, i, schedule)
}

/// [`loss_term`] for a given `Z_t` at grid index `i`.
pub fn loss_at<T: Real>(
    net: &ScoreNetwork<T>,
    h1: &[T],
    z0: &[T],
    zt: &[T],
    i: usize,
    schedule: &DiffusionSchedule,
) -> Result<(f64, ParamStore<T>)> {
    if i == 0 {
        return Err(Error::Contract("bridge loss is undefined at t = 0 (sigma_0 = 0)".into()));
    }
    let target = bridge_target(z0, zt, schedule.sigma2[i].sqrt());
    score_loss(
        net,
        &Matrix::row_vector(h1),
        &Matrix::row_vector(zt),
        &[schedule.grid[i]],
        &Matrix::row_vector(&target),
    )
}

/// Regression batch: inputs, times and targets for the score network.
pub(crate) struct RegressionBatch {
    pub h1: Matrix<f32>,
    pub zt: Matrix<f32>,
    pub times: Vec<f64>,
    pub target: Matrix<f32>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FitConfig {
    pub steps: usize,
    pub lr: f64,
    pub cosine: bool,
    pub ema_decay: f64,
    pub ema_warmup: bool,
}

/// Adam on the regression loss; returns the EMA shadow and the log.
pub(crate) fn fit<F>(
    mut net: ScoreNetwork<f32>,
    cfg: FitConfig,
    rng: &mut ChaCha8Rng,
    mut next_batch: F,
) -> Result<(ScoreNetwork<f32>, Vec<LogRow>)>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<RegressionBatch>,
{
    let mut opt = Optimizer::new(
        OptimizerKind::adam(),
        net.params(),
        cfg.lr,
        0.0,
        cfg.cosine.then_some(cfg.steps),
    );
    let mut ema = EmaShadow::new(cfg.ema_decay, net.params())?;
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let b = next_batch(rng)?;
        let (loss, grads) = score_loss(&net, &b.h1, &b.zt, &b.times, &b.target)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("bridge loss {loss} at step {step}")));
        }
        let lr = opt.current_lr();
        opt.step(net.params_mut(), &grads)?;
        if cfg.ema_warmup {
            ema.update_warm(net.params(), step)?;
        } else {
            ema.update(net.params())?;
        }
        log.push(LogRow { step, loss, lr });
    }
    let shadow = net.with_params(ema.into_shadow())?;
    Ok((shadow, log))
}

#[derive(Debug, Clone)]
pub struct TrainedBridge {
    pub bridge: Bridge,
    pub log: Vec<LogRow>,
}

/// Trains a bridge from the bundle's source member to the ensemble of
/// `cfg.teacher_indices`.
pub fn train_bridge(bundle: &EnsembleBundle, data: &Dataset, cfg: &BridgeTrainConfig) -> Result<TrainedBridge> {
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    cfg.validate(bundle)?;
    let arch = ScoreArch::new(bundle.arch().feature_width(), bundle.arch().classes)
        .with_embed(cfg.embed)
        .with_blocks(cfg.blocks);
    let net = ScoreNetwork::new(arch, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ STREAM);
    let mut sampler = InputSampler::new(data, cfg.mixup_alpha, cfg.jitter)?;
    let sched = &cfg.schedule;
    let n = sched.steps();
    let (net, log) = fit(net, cfg.fit(), &mut rng, |rng| {
        let x = sampler.next(cfg.batch, rng);
        let t = ensemble_targets(bundle, &cfg.teacher_indices, &x)?;
        let z1 = anneal_rows(&t.z1, &cfg.temperature, rng);
        let mut zt = Matrix::zeros(x.rows, t.z0.cols);
        let mut target = Matrix::zeros(x.rows, t.z0.cols);
        let mut times = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let i = rng.random_range(1..=n);
            let z = posterior_sample_at(t.z0.row(r), z1.row(r), i, sched, Some(&mut *rng));
            target
                .row_mut(r)
                .copy_from_slice(&bridge_target(t.z0.row(r), &z, sched.sigma2[i].sqrt()));
            zt.row_mut(r).copy_from_slice(&z);
            times.push(sched.grid[i]);
        }
        Ok(RegressionBatch {
            h1: t.h1,
            zt,
            times,
            target,
        })
    })?;
    Ok(TrainedBridge {
        bridge: Bridge {
            net,
            schedule: sched.clone(),
            teacher_indices: cfg.teacher_indices.clone(),
            source_index: bundle.source_index,
            ema: true,
            temperature: cfg.temperature,
            lineage: vec![LineageRound {
                n_steps: n,
                grid: sched.grid.clone(),
            }],
        },
        log,
    })
}
