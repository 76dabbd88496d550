//! Finite-difference gradient checks in `f64`.
//!
//! Central differences at `h`, `h/2` and `h/4` are combined by Richardson
//! extrapolation, which removes the `h^2` truncation term, and compared against
//! the analytic backward pass element by element. Where a ReLU-family kink lies
//! inside `[-h, h]` the quotients are meaningless; such elements show up as
//! disagreement between the two extrapolants and are reported as skipped rather
//! than checked.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bridge::{posterior_sample_at, DiffusionSchedule};
use crate::error::Result;
use crate::nn::{LayerSpec, Matrix, ParamStore, Sequential};
use crate::score::{ScoreArch, ScoreNetwork};
use crate::training::{bridge_target, score_loss};

pub const FD_STEP: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, 1e-2)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Elements whose difference quotient straddled a kink.
    pub skipped: usize,
}

impl GradReport {
    fn record(&mut self, analytic: f64, (coarse, fine): (f64, f64), tol: f64) {
        if rel_err(coarse, fine) > tol {
            self.skipped += 1;
            return;
        }
        self.checked += 1;
        self.max_rel_err = self.max_rel_err.max(rel_err(analytic, fine));
    }

    /// At most one element in five may be skipped.
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol && self.skipped * 4 <= self.checked
    }
}

fn normal_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Matrix { rows, cols, data }
}

/// Zero biases, unit gains and zero-initialized heads would hide gradient terms;
/// give every constant tensor a small random offset.
fn jitter_constant_tensors<R: Rng>(store: &mut ParamStore<f64>, rng: &mut R) {
    for (_, t) in store.iter_mut() {
        let d = t.data();
        if d.iter().all(|&v| v == d[0]) {
            for v in t.data_mut() {
                *v += 0.1 * Distribution::<f64>::sample(&StandardNormal, rng);
            }
        }
    }
}

/// Richardson extrapolants `(4 D(h/2) - D(h)) / 3` and `(4 D(h/4) - D(h/2)) / 3`
/// of the central difference `D` of `f` at `x0`.
fn central<F: FnMut(f64) -> Result<f64>>(x0: f64, h: f64, mut f: F) -> Result<(f64, f64)> {
    let mut d = |h: f64| -> Result<f64> { Ok((f(x0 + h)? - f(x0 - h)?) / (2.0 * h)) };
    let (d1, d2, d4) = (d(h)?, d(h / 2.0)?, d(h / 4.0)?);
    Ok(((4.0 * d2 - d1) / 3.0, (4.0 * d4 - d2) / 3.0))
}

/// Checks parameter and input gradients of `0.5 * ||net(x) - y||^2` summed over
/// `rows` random examples.
pub fn check_sequential(specs: Vec<LayerSpec>, rows: usize, seed: u64, tol: f64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new(seed);
    let net = Sequential::build("g", specs, &mut store, &mut rng)?;
    jitter_constant_tensors(&mut store, &mut rng);
    let x = normal_matrix(rows, net.input_dim(), &mut rng);
    let y = normal_matrix(rows, net.output_dim(), &mut rng);
    let loss = |store: &ParamStore<f64>, x: &Matrix<f64>| -> Result<f64> {
        let out = net.predict(store, x)?;
        Ok(0.5 * out.data.iter().zip(&y.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
    };
    let (out, tape) = net.forward(&store, &x)?;
    let mut g = out.clone();
    for (gv, &t) in g.data.iter_mut().zip(&y.data) {
        *gv -= t;
    }
    let mut grads = store.zeros_like();
    let gx = net.backward(&store, &tape, &g, &mut grads)?;

    let mut report = GradReport::default();
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        let id = store.id_of(name).expect("registered");
        for k in 0..store.get(id).len() {
            let x0 = store.get(id).data()[k];
            let mut probe = store.clone();
            let fd = central(x0, FD_STEP, |v| {
                probe.get_mut(id).data_mut()[k] = v;
                loss(&probe, &x)
            })?;
            report.record(grads.get(id).data()[k], fd, tol);
        }
    }
    for k in 0..x.data.len() {
        let mut probe = x.clone();
        let fd = central(x.data[k], FD_STEP, |v| {
            probe.data[k] = v;
            loss(&store, &probe)
        })?;
        report.record(gx.data[k], fd, tol);
    }
    Ok(report)
}

/// Checks the bridge regression loss `mean ||eps(h1, Z_t, t) - (Z_t - Z_0) / sigma_t||^2`
/// with `Z_t` drawn from the bridge posterior at random grid times.
pub fn check_score_loss(arch: ScoreArch, schedule: &DiffusionSchedule, rows: usize, seed: u64, tol: f64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = ScoreNetwork::<f64>::new(arch.clone(), seed)?;
    jitter_constant_tensors(net.params_mut(), &mut rng);
    let h1 = normal_matrix(rows, arch.feature_dim, &mut rng);
    let z0 = normal_matrix(rows, arch.classes, &mut rng);
    let z1 = normal_matrix(rows, arch.classes, &mut rng);
    let mut zt = Matrix::zeros(rows, arch.classes);
    let mut target = Matrix::zeros(rows, arch.classes);
    let mut times = Vec::with_capacity(rows);
    for r in 0..rows {
        let i = rng.random_range(1..=schedule.steps());
        let z = posterior_sample_at(z0.row(r), z1.row(r), i, schedule, Some(&mut rng));
        target
            .row_mut(r)
            .copy_from_slice(&bridge_target(z0.row(r), &z, schedule.sigma2[i].sqrt()));
        zt.row_mut(r).copy_from_slice(&z);
        times.push(schedule.grid[i]);
    }
    let (_, grads) = score_loss(&net, &h1, &zt, &times, &target)?;

    let mut report = GradReport::default();
    let names: Vec<String> = net.params().iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        let id = net.params().id_of(name).expect("registered");
        for k in 0..net.params().get(id).len() {
            let x0 = net.params().get(id).data()[k];
            let mut probe = net.clone();
            let fd = central(x0, FD_STEP, |v| {
                probe.params_mut().get_mut(id).data_mut()[k] = v;
                Ok(score_loss(&probe, &h1, &zt, &times, &target)?.0)
            })?;
            report.record(grads.get(id).data()[k], fd, tol);
        }
    }
    Ok(report)
}
