//! Diffusion schedule, source annealing and the tractable Gaussian bridge posterior.
//!
//! With zero drift and a Dirac boundary at the target, the marginal of the
//! bridge at time `t` given both endpoints is isotropic Gaussian:
//!
//! ```text
//! mu_t    = sbar2_t / (sbar2_t + s2_t) * Z0 + s2_t / (sbar2_t + s2_t) * Z1
//! Sigma_t = sbar2_t * s2_t / (sbar2_t + s2_t)
//! ```
//!
//! where `s2_t` integrates beta over `[0, t]` and `sbar2_t` over `[t, 1]`.

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Tolerance for matching a requested time against the grid.
const GRID_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleShape {
    /// `beta(t) = beta_max * t`.
    LinearBeta,
    /// `beta(t) = beta_max * (1 - |2t - 1|)`, peaking at `t = 0.5`.
    SymmetricTriangular,
}

impl std::str::FromStr for ScheduleShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-beta" | "linear" => Ok(ScheduleShape::LinearBeta),
            "symmetric-triangular" | "triangular" => Ok(ScheduleShape::SymmetricTriangular),
            other => Err(Error::Config(format!("unknown schedule shape `{other}`"))),
        }
    }
}

/// Time grid with piecewise-constant beta and its cumulative variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub shape: ScheduleShape,
    pub beta_max: f64,
    /// `N + 1` times, `0 = t_0 < ... < t_N = 1`.
    pub grid: Vec<f64>,
    /// beta on each of the `N` intervals.
    pub beta: Vec<f64>,
    /// Forward variance `int_0^t beta` at each grid point.
    pub sigma2: Vec<f64>,
    /// Backward variance `int_t^1 beta` at each grid point.
    pub sigma2_bar: Vec<f64>,
}

pub fn build_schedule(steps: usize, shape: ScheduleShape, beta_max: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_max > 0.0 && beta_max.is_finite()) {
        return Err(Error::Config(format!("beta_max must be positive, got {beta_max}")));
    }
    let n = steps as f64;
    let grid: Vec<f64> = (0..=steps).map(|i| i as f64 / n).collect();
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            let mid = (i as f64 + 0.5) / n;
            match shape {
                ScheduleShape::LinearBeta => beta_max * mid,
                ScheduleShape::SymmetricTriangular => beta_max * (1.0 - (2.0 * mid - 1.0).abs()),
            }
        })
        .collect();
    let dt = 1.0 / n;
    let mut sigma2 = Vec::with_capacity(steps + 1);
    let mut acc = 0.0;
    sigma2.push(0.0);
    for b in &beta {
        acc += b * dt;
        sigma2.push(acc);
    }
    let mut sigma2_bar = vec![0.0; steps + 1];
    let mut acc = 0.0;
    for i in (0..steps).rev() {
        acc += beta[i] * dt;
        sigma2_bar[i] = acc;
    }
    Ok(DiffusionSchedule {
        shape,
        beta_max,
        grid,
        beta,
        sigma2,
        sigma2_bar,
    })
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `sigma_1^2`, the total variance budget.
    pub fn total(&self) -> f64 {
        self.sigma2[self.steps()]
    }

    /// Grid index of `t`; times off the grid are an error, never snapped.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let (i, d) = self
            .grid
            .iter()
            .enumerate()
            .map(|(i, &g)| (i, (g - t).abs()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("grid is non-empty");
        if d <= GRID_TOL {
            Ok(i)
        } else {
            Err(Error::Contract(format!(
                "t = {t} is not on the schedule grid (nearest grid point t_{i} = {})",
                self.grid[i]
            )))
        }
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        Ok(self.sigma2[self.index_of(t)?].sqrt())
    }

    /// Coarser schedule on the grid points `keep` (strictly increasing, containing
    /// both endpoints). Cumulative variances are inherited, so the coarse bridge is
    /// the same process observed at fewer times.
    pub fn restrict(&self, keep: &[usize]) -> Result<DiffusionSchedule> {
        let n = self.steps();
        let nested = keep.len() >= 2
            && keep[0] == 0
            && keep[keep.len() - 1] == n
            && keep.windows(2).all(|w| w[0] < w[1]);
        if !nested {
            return Err(Error::Config(format!(
                "sub-grid {keep:?} is not a nested subset of a {n}-step grid containing both endpoints"
            )));
        }
        let pick = |v: &[f64]| keep.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let grid = pick(&self.grid);
        let sigma2 = pick(&self.sigma2);
        let beta = keep
            .windows(2)
            .map(|w| (self.sigma2[w[1]] - self.sigma2[w[0]]) / (self.grid[w[1]] - self.grid[w[0]]))
            .collect();
        Ok(DiffusionSchedule {
            shape: self.shape,
            beta_max: self.beta_max,
            grid,
            beta,
            sigma2,
            sigma2_bar: pick(&self.sigma2_bar),
        })
    }

    /// Grid indices kept by one halving round: every second point plus `t = 1`.
    pub fn halving_indices(&self) -> Vec<usize> {
        let n = self.steps();
        let mut keep: Vec<usize> = (0..=n).step_by(2).collect();
        if keep.last() != Some(&n) {
            keep.push(n);
        }
        keep
    }

    /// `(w0, w1, Sigma)` of the endpoint posterior at grid index `i`.
    pub fn posterior_coeffs(&self, i: usize) -> (f64, f64, f64) {
        let (s2, sb2) = (self.sigma2[i], self.sigma2_bar[i]);
        let denom = s2 + sb2;
        (sb2 / denom, s2 / denom, sb2 * s2 / denom)
    }

    /// `(w_hat0, w_t, Sigma)` of the ancestral posterior between grid indices `s < t`.
    pub fn between_coeffs(&self, s: usize, t: usize) -> (f64, f64, f64) {
        let (s2_s, s2_t) = (self.sigma2[s], self.sigma2[t]);
        let inner = s2_t - s2_s;
        (inner / s2_t, s2_s / s2_t, inner * s2_s / s2_t)
    }
}

/// `T = scale * (1 + slope * u)` with `u ~ Beta(alpha, beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureLaw {
    pub scale: f64,
    pub slope: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for TemperatureLaw {
    fn default() -> Self {
        Self {
            scale: 2.0,
            slope: 0.2,
            alpha: 1.0,
            beta: 5.0,
        }
    }
}

impl TemperatureLaw {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let dist = Beta::new(self.alpha, self.beta).expect("temperature law has positive Beta parameters");
        self.at(dist.sample(rng))
    }

    /// Temperature for a fixed Beta variate `u`.
    pub fn at(&self, u: f64) -> f64 {
        self.scale * (1.0 + self.slope * u)
    }

    pub fn mean(&self) -> f64 {
        self.at(self.alpha / (self.alpha + self.beta))
    }

    pub fn range(&self) -> (f64, f64) {
        (self.at(0.0), self.at(1.0))
    }
}

/// Divides the source logit by a sampled temperature.
pub fn anneal_source<T: Real, R: Rng + ?Sized>(z1: &[T], law: &TemperatureLaw, rng: &mut R) -> (Vec<T>, f64) {
    let temp = law.sample(rng);
    (anneal_with(z1, temp), temp)
}

pub fn anneal_with<T: Real>(z1: &[T], temp: f64) -> Vec<T> {
    let t = T::of(temp);
    z1.iter().map(|&v| v / t).collect()
}

fn gaussian<T: Real, R: Rng + ?Sized>(mean: Vec<T>, var: f64, rng: Option<&mut R>) -> Vec<T> {
    match rng {
        Some(rng) if var > 0.0 => {
            let sd = var.sqrt();
            mean.into_iter()
                .map(|m| {
                    let xi: f64 = StandardNormal.sample(rng);
                    m + T::of(sd * xi)
                })
                .collect()
        }
        _ => mean,
    }
}

/// Draws `Z_t ~ N(mu_t, Sigma_t I)` given both endpoints.
///
/// `t = 0` and `t = 1` return the corresponding endpoint bitwise.
pub fn posterior_sample<T: Real, R: Rng + ?Sized>(
    z0: &[T],
    z1: &[T],
    t: f64,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Vec<T>> {
    let i = schedule.index_of(t)?;
    Ok(posterior_sample_at(z0, z1, i, schedule, Some(rng)))
}

/// [`posterior_sample`] by grid index; `rng = None` returns the mean.
pub fn posterior_sample_at<T: Real, R: Rng + ?Sized>(
    z0: &[T],
    z1: &[T],
    i: usize,
    schedule: &DiffusionSchedule,
    rng: Option<&mut R>,
) -> Vec<T> {
    if i == 0 {
        return z0.to_vec();
    }
    if i == schedule.steps() {
        return z1.to_vec();
    }
    let (w0, w1, var) = schedule.posterior_coeffs(i);
    let (w0, w1) = (T::of(w0), T::of(w1));
    let mean = z0.iter().zip(z1).map(|(&a, &b)| w0 * a + w1 * b).collect();
    gaussian(mean, var, rng)
}

/// Ancestral step from `Z_t` to `Z_s` (`s < t`) given the current estimate of `Z_0`.
///
/// `s = 0` returns `zhat0` exactly.
pub fn posterior_between<T: Real, R: Rng + ?Sized>(
    zhat0: &[T],
    zt: &[T],
    s: f64,
    t: f64,
    schedule: &DiffusionSchedule,
    rng: Option<&mut R>,
) -> Result<Vec<T>> {
    let (si, ti) = (schedule.index_of(s)?, schedule.index_of(t)?);
    if si >= ti {
        return Err(Error::Contract(format!("posterior_between needs s < t, got s = {s}, t = {t}")));
    }
    Ok(posterior_between_at(zhat0, zt, si, ti, schedule, rng))
}

pub fn posterior_between_at<T: Real, R: Rng + ?Sized>(
    zhat0: &[T],
    zt: &[T],
    s: usize,
    t: usize,
    schedule: &DiffusionSchedule,
    rng: Option<&mut R>,
) -> Vec<T> {
    debug_assert!(s < t);
    if s == 0 {
        return zhat0.to_vec();
    }
    let (w0, wt, var) = schedule.between_coeffs(s, t);
    let (w0, wt) = (T::of(w0), T::of(wt));
    let mean = zhat0.iter().zip(zt).map(|(&a, &b)| w0 * a + wt * b).collect();
    gaussian(mean, var, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn halving_sequence_for_five_steps() {
        let mut s = build_schedule(5, ScheduleShape::LinearBeta, 1.0).unwrap();
        let mut grids = vec![s.grid.clone()];
        while s.steps() > 1 {
            s = s.restrict(&s.halving_indices()).unwrap();
            grids.push(s.grid.clone());
        }
        let r = |g: &Vec<f64>| g.iter().map(|v| (v * 10.0).round() / 10.0).collect::<Vec<_>>();
        let got: Vec<Vec<f64>> = grids.iter().map(r).collect();
        assert_eq!(
            got,
            vec![
                vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
                vec![0.0, 0.4, 0.8, 1.0],
                vec![0.0, 0.8, 1.0],
                vec![0.0, 1.0],
            ]
        );
    }

    #[test]
    fn restriction_keeps_variances() {
        let s = build_schedule(4, ScheduleShape::SymmetricTriangular, 2.0).unwrap();
        let c = s.restrict(&[0, 1, 4]).unwrap();
        assert_eq!(c.sigma2, vec![s.sigma2[0], s.sigma2[1], s.sigma2[4]]);
        assert_eq!(c.total(), s.total());
        let integral: f64 = c.beta.iter().zip(c.grid.windows(2)).map(|(b, w)| b * (w[1] - w[0])).sum();
        assert!((integral - s.total()).abs() < 1e-12);
        assert!(matches!(s.restrict(&[0, 2]), Err(Error::Config(_))));
        assert!(matches!(s.restrict(&[0, 3, 2, 4]), Err(Error::Config(_))));
    }

    #[test]
    fn single_interval_schedule() {
        let s = build_schedule(1, ScheduleShape::LinearBeta, 0.4).unwrap();
        assert_eq!(s.sigma2[1], s.beta[0]);
        assert_eq!(s.sigma2_bar[0], s.sigma2[1]);
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(matches!(
            build_schedule(0, ScheduleShape::LinearBeta, 0.3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn variances_telescope() {
        for shape in [ScheduleShape::LinearBeta, ScheduleShape::SymmetricTriangular] {
            let s = build_schedule(7, shape, 0.3).unwrap();
            for i in 0..=7 {
                assert!((s.sigma2[i] + s.sigma2_bar[i] - s.total()).abs() < 1e-15);
            }
            assert_eq!(s.sigma2[0], 0.0);
            assert_eq!(s.sigma2_bar[7], 0.0);
            assert!(s.sigma2.windows(2).all(|w| w[1] > w[0]));
            assert!(s.sigma2_bar.windows(2).all(|w| w[1] < w[0]));
        }
    }

    #[test]
    fn boundaries_are_exact() {
        let s = build_schedule(5, ScheduleShape::SymmetricTriangular, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z0 = [0.123_456_7f32, -3.5];
        let z1 = [9.87f32, 1.0e-3];
        assert_eq!(posterior_sample(&z0, &z1, 0.0, &s, &mut rng).unwrap(), z0);
        assert_eq!(posterior_sample(&z0, &z1, 1.0, &s, &mut rng).unwrap(), z1);
    }

    #[test]
    fn off_grid_time_is_an_error() {
        let s = build_schedule(5, ScheduleShape::SymmetricTriangular, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = posterior_sample(&[0.0f32], &[1.0], 0.3, &s, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn symmetric_midpoint_mean_and_variance() {
        // sigma2 == sigma2_bar at t = 0.5 on an even symmetric grid.
        let s = build_schedule(4, ScheduleShape::SymmetricTriangular, 0.3).unwrap();
        let (w0, w1, var) = s.posterior_coeffs(2);
        assert!((s.sigma2[2] - s.sigma2_bar[2]).abs() < 1e-15);
        assert!((w0 - 0.5).abs() < 1e-15 && (w1 - 0.5).abs() < 1e-15);
        assert!((var - s.sigma2[2] / 2.0).abs() < 1e-15);
        let mean = posterior_sample_at::<f64, ChaCha8Rng>(&[1.0, 0.0], &[0.0, 1.0], 2, &s, None);
        assert_eq!(mean, vec![0.5, 0.5]);
    }

    #[test]
    fn between_endpoints() {
        let s = build_schedule(5, ScheduleShape::SymmetricTriangular, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let zhat = [0.3f32, -0.7];
        let zt = [2.0f32, 2.0];
        assert_eq!(posterior_between(&zhat, &zt, 0.0, 0.6, &s, Some(&mut rng)).unwrap(), zhat);
        let mean = posterior_between::<f64, ChaCha8Rng>(&[1.5, -2.0], &[1.5, -2.0], 0.4, 0.8, &s, None).unwrap();
        assert!((mean[0] - 1.5).abs() < 1e-12 && (mean[1] + 2.0).abs() < 1e-12);
        assert!(matches!(
            posterior_between(&zhat, &zt, 0.6, 0.6, &s, Some(&mut rng)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn annealing_fixed_temperature() {
        let law = TemperatureLaw::default();
        assert_eq!(law.at(0.0), 2.0);
        assert_eq!(anneal_with(&[2.0f32, -2.0], law.at(0.0)), vec![1.0, -1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (z, t) = anneal_source(&[0.0f32; 3], &law, &mut rng);
        assert!(z.iter().all(|&v| v == 0.0));
        assert!((2.0..=2.4).contains(&t));
    }

    #[test]
    fn symmetric_triangular_fixture() {
        // Exact rational cumulative sums of beta_i / 5, beta = 0.3 * (0.2, 0.6, 1.0, 0.6, 0.2).
        let s = build_schedule(5, ScheduleShape::SymmetricTriangular, 0.3).unwrap();
        let sigma2 = [0.0, 0.012, 0.048, 0.108, 0.144, 0.156];
        for i in 0..=5 {
            assert!((s.sigma2[i] - sigma2[i]).abs() < 1e-15, "sigma2[{i}] = {}", s.sigma2[i]);
            assert!((s.sigma2_bar[i] - sigma2[5 - i]).abs() < 1e-15, "sigma2_bar[{i}] = {}", s.sigma2_bar[i]);
        }
    }

    #[test]
    fn temperature_mean_monte_carlo() {
        let law = TemperatureLaw::default();
        let want = 2.0 + 0.4 / 6.0;
        assert!((law.mean() - want).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 100_000;
        let mean = (0..n).map(|_| law.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - want).abs() < 0.002, "empirical mean {mean}");
    }

    #[test]
    fn ancestral_chain_matches_direct_marginal() {
        // Two ancestral steps 3 -> 2 -> 1 with the true Z0 reproduce the direct posterior at t1.
        let s = build_schedule(3, ScheduleShape::SymmetricTriangular, 0.9).unwrap();
        let (z0, z1) = ([1.0f64], [-2.0f64]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let moments = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            (m, xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64)
        };
        let chain: Vec<f64> = (0..n)
            .map(|_| {
                let z2 = posterior_between_at(&z0, &z1, 2, 3, &s, Some(&mut rng));
                posterior_between_at(&z0, &z2, 1, 2, &s, Some(&mut rng))[0]
            })
            .collect();
        let direct: Vec<f64> = (0..n)
            .map(|_| posterior_sample_at(&z0, &z1, 1, &s, Some(&mut rng))[0])
            .collect();
        let ((mc, vc), (md, vd)) = (moments(&chain), moments(&direct));
        let (w0, w1, var) = s.posterior_coeffs(1);
        assert!((vc - vd).abs() / vd < 0.03, "chain var {vc} vs direct {vd}");
        assert!((vd - var).abs() / var < 0.03);
        assert!((mc - md).abs() < 0.01 && (md - (w0 * z0[0] + w1 * z1[0])).abs() < 0.01);
    }
}
