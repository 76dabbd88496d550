//! Progressive distillation: a student on a coarser grid learns to take, in one
//! step, the path the teacher takes in several.
//!
//! For a coarse step `t -> s` the teacher runs its fine ancestral steps from
//! `Z_t` down to `Z_s`. The student target is chosen so that the student's own
//! ancestral update lands on the same `Z_s`:
//!
//! ```text
//! Z_s = a * (Z_t - sigma_t * eps) + (1 - a) * Z_t,   a = (sigma_t^2 - sigma_s^2) / sigma_t^2
//! eps* = (Z_t - Z_s) / (a * sigma_t)
//! ```
//!
//! For the final step (`s = 0`) `a = 1` and this is `(Z_t - Z_0) / sigma_t`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::{posterior_between_at, posterior_sample_at, DiffusionSchedule};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::{Bridge, LineageRound};
use crate::nn::Matrix;
use crate::score::{ScoreInput, ScoreNetwork};
use crate::teacher::EnsembleBundle;
use crate::training::{anneal_rows, check_indices, ensemble_targets, fit, FitConfig, InputSampler, LogRow, RegressionBatch};

const STREAM: u64 = 0x2545_f491_4f6c_dd1d;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Optimizer steps per round.
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub cosine: bool,
    pub ema_decay: f64,
    pub ema_warmup: bool,
    pub mixup_alpha: f64,
    #[serde(default)]
    pub jitter: f64,
    /// Sample teacher sub-steps instead of following their means.
    pub stochastic_teacher: bool,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            steps: 5_000,
            batch: 128,
            lr: 1e-3,
            cosine: false,
            ema_decay: 0.99995,
            ema_warmup: true,
            mixup_alpha: 0.4,
            jitter: 0.0,
            stochastic_teacher: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DistillRound {
    pub bridge: Bridge,
    pub log: Vec<LogRow>,
}

/// Fine-grid rollout for every row from index `from[r]` down to `to[r]`.
fn rollout<R: Rng + ?Sized>(
    net: &ScoreNetwork<f32>,
    sched: &DiffusionSchedule,
    h1: &Matrix<f32>,
    zt: &Matrix<f32>,
    from: &[usize],
    to: &[usize],
    mut rng: Option<&mut R>,
) -> Result<Matrix<f32>> {
    let mut z = zt.clone();
    let mut cur = from.to_vec();
    while cur.iter().zip(to).any(|(c, t)| c > t) {
        let times: Vec<f64> = cur.iter().map(|&i| sched.grid[i]).collect();
        let eps = net.predict(&ScoreInput { h1, zt: &z, t: &times })?;
        for r in 0..z.rows {
            let i = cur[r];
            if i <= to[r] {
                continue;
            }
            let sigma = sched.sigma2[i].sqrt() as f32;
            let zhat0: Vec<f32> = z.row(r).iter().zip(eps.row(r)).map(|(&a, &e)| a - sigma * e).collect();
            let next = posterior_between_at(&zhat0, z.row(r), i - 1, i, sched, rng.as_deref_mut());
            z.row_mut(r).copy_from_slice(&next);
            cur[r] = i - 1;
        }
    }
    if !z.all_finite() {
        return Err(Error::NonFinite("teacher rollout produced a non-finite state".into()));
    }
    Ok(z)
}

/// Student regression targets `(Z_t - Z_s) / (a * sigma_t)` for rows stepping
/// from fine index `from[r]` to `to[r]`, with `Z_s` from the teacher rollout.
fn student_targets<R: Rng + ?Sized>(
    net: &ScoreNetwork<f32>,
    sched: &DiffusionSchedule,
    h1: &Matrix<f32>,
    zt: &Matrix<f32>,
    from: &[usize],
    to: &[usize],
    rng: Option<&mut R>,
) -> Result<Matrix<f32>> {
    let zs = rollout(net, sched, h1, zt, from, to, rng)?;
    let mut target = Matrix::zeros(zt.rows, zt.cols);
    for r in 0..zt.rows {
        let (s2_t, s2_s) = (sched.sigma2[from[r]], sched.sigma2[to[r]]);
        let a = (s2_t - s2_s) / s2_t;
        let scale = (a * s2_t.sqrt()) as f32;
        for ((g, &a_t), &a_s) in target.row_mut(r).iter_mut().zip(zt.row(r)).zip(zs.row(r)) {
            *g = (a_t - a_s) / scale;
        }
    }
    Ok(target)
}

/// Trains a student on `sub_grid` (times of the teacher's grid) from the teacher's weights.
/// The sub-grid may equal the teacher grid, which makes the round a self-distillation.
pub fn distill_round(
    teacher: &Bridge,
    sub_grid: &[f64],
    bundle: &EnsembleBundle,
    data: &Dataset,
    cfg: &DistillConfig,
) -> Result<DistillRound> {
    if cfg.steps == 0 || cfg.batch == 0 {
        return Err(Error::Config("distillation needs positive steps and batch".into()));
    }
    check_indices(&teacher.teacher_indices, bundle)?;
    let fine = &teacher.schedule;
    let keep = sub_grid
        .iter()
        .map(|&t| fine.index_of(t))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Config(format!("sub-grid {sub_grid:?} is not nested in the teacher grid: {e}")))?;
    let coarse = fine.restrict(&keep)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ STREAM);
    let mut sampler = InputSampler::new(data, cfg.mixup_alpha, cfg.jitter)?;
    let student = teacher.net.clone();
    let n = coarse.steps();
    let fit_cfg = FitConfig {
        steps: cfg.steps,
        lr: cfg.lr,
        cosine: cfg.cosine,
        ema_decay: cfg.ema_decay,
        ema_warmup: cfg.ema_warmup,
    };
    let (net, log) = fit(student, fit_cfg, &mut rng, |rng| {
        let x = sampler.next(cfg.batch, rng);
        let t = ensemble_targets(bundle, &teacher.teacher_indices, &x)?;
        let z1 = anneal_rows(&t.z1, &teacher.temperature, rng);
        let mut zt = Matrix::zeros(x.rows, t.z0.cols);
        let (mut from, mut to) = (Vec::with_capacity(x.rows), Vec::with_capacity(x.rows));
        for r in 0..x.rows {
            let j = rng.random_range(1..=n);
            let z = posterior_sample_at(t.z0.row(r), z1.row(r), keep[j], fine, Some(&mut *rng));
            zt.row_mut(r).copy_from_slice(&z);
            from.push(keep[j]);
            to.push(keep[j - 1]);
        }
        let target = student_targets(
            &teacher.net,
            fine,
            &t.h1,
            &zt,
            &from,
            &to,
            cfg.stochastic_teacher.then_some(&mut *rng),
        )?;
        let times = from.iter().map(|&i| fine.grid[i]).collect();
        Ok(RegressionBatch {
            h1: t.h1,
            zt,
            times,
            target,
        })
    })?;
    let mut lineage = teacher.lineage.clone();
    lineage.push(LineageRound {
        n_steps: coarse.steps(),
        grid: coarse.grid.clone(),
    });
    Ok(DistillRound {
        bridge: Bridge {
            net,
            schedule: coarse,
            teacher_indices: teacher.teacher_indices.clone(),
            source_index: teacher.source_index,
            ema: true,
            temperature: teacher.temperature,
            lineage,
        },
        log,
    })
}

/// Halves the grid until one step remains. Returns every round in order; an
/// already single-step bridge yields no rounds.
pub fn distill_to_one(
    teacher: &Bridge,
    bundle: &EnsembleBundle,
    data: &Dataset,
    cfg: &DistillConfig,
) -> Result<Vec<DistillRound>> {
    let mut rounds: Vec<DistillRound> = Vec::new();
    let mut round = 0u64;
    loop {
        let current = rounds.last().map_or(teacher, |r| &r.bridge);
        if current.n_steps() <= 1 {
            return Ok(rounds);
        }
        let sched = &current.schedule;
        let sub: Vec<f64> = sched.halving_indices().iter().map(|&i| sched.grid[i]).collect();
        let cfg_r = DistillConfig {
            seed: cfg.seed.wrapping_add(round),
            ..cfg.clone()
        };
        let next = distill_round(current, &sub, bundle, data, &cfg_r)?;
        rounds.push(next);
        round += 1;
    }
}

/// Final bridge of a distillation run (the teacher itself when no round ran).
pub fn final_bridge(teacher: Bridge, rounds: Vec<DistillRound>) -> Bridge {
    rounds.into_iter().last().map_or(teacher, |r| r.bridge)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::{build_schedule, ScheduleShape};
    use crate::data::two_moons;
    use crate::score::ScoreArch;
    use crate::teacher::{train_teachers, ClassifierArch, TeacherConfig};
    use crate::training::{train_bridge, BridgeTrainConfig};

    fn setup(steps: usize) -> (EnsembleBundle, Dataset, Bridge) {
        let data = two_moons(150, 0.2, 0).unwrap();
        let tcfg = TeacherConfig {
            epochs: 10,
            batch: 50,
            ..TeacherConfig::default()
        };
        let bundle = train_teachers(&data, &ClassifierArch::mlp(2, vec![8, 8], 2), &[1, 2, 3], &tcfg).unwrap();
        let sched = build_schedule(steps, ScheduleShape::LinearBeta, 1.0).unwrap();
        let mut cfg = BridgeTrainConfig::new(vec![0, 1, 2], sched, 0);
        cfg.steps = 20;
        cfg.batch = 8;
        let b = train_bridge(&bundle, &data, &cfg).unwrap().bridge;
        (bundle, data, b)
    }

    fn quick() -> DistillConfig {
        DistillConfig {
            steps: 5,
            batch: 8,
            ..DistillConfig::default()
        }
    }

    #[test]
    fn five_steps_halve_to_one_with_lineage() {
        let (bundle, data, b) = setup(5);
        let rounds = distill_to_one(&b, &bundle, &data, &quick()).unwrap();
        let steps: Vec<usize> = rounds.iter().map(|r| r.bridge.n_steps()).collect();
        assert_eq!(steps, vec![3, 2, 1]);
        let last = &rounds[2].bridge;
        let lineage: Vec<usize> = last.lineage.iter().map(|l| l.n_steps).collect();
        assert_eq!(lineage, vec![5, 3, 2, 1]);
        for w in last.lineage.windows(2) {
            assert!(w[1].grid.iter().all(|t| w[0].grid.iter().any(|u| (t - u).abs() < 1e-12)));
        }
    }

    #[test]
    fn single_step_input_is_returned_unchanged() {
        let (bundle, data, b) = setup(1);
        let rounds = distill_to_one(&b, &bundle, &data, &quick()).unwrap();
        assert!(rounds.is_empty());
        let out = final_bridge(b.clone(), rounds);
        assert_eq!(out.net.params(), b.net.params());
    }

    #[test]
    fn non_nested_sub_grid_rejected() {
        let (bundle, data, b) = setup(4);
        let err = distill_round(&b, &[0.0, 0.3, 1.0], &bundle, &data, &quick());
        assert!(matches!(err, Err(Error::Config(_))));
        let err = distill_round(&b, &[0.0, 1.0, 0.5], &bundle, &data, &quick());
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn self_distillation_starts_at_zero_loss() {
        // Same grid, deterministic teacher: one student step equals one teacher step.
        let (bundle, data, b) = setup(4);
        let round = distill_round(&b, &b.schedule.grid.clone(), &bundle, &data, &quick()).unwrap();
        assert_eq!(round.bridge.n_steps(), 4);
        assert!(round.log[0].loss < 1e-8, "initial loss {}", round.log[0].loss);
    }

    #[test]
    fn stochastic_self_distillation_hits_variance_floor() {
        // With a sampling teacher the target is eps plus independent noise of
        // variance var(s, t) / (a sigma_t)^2 per class; the untrained student pays that floor.
        let (bundle, data, b) = setup(4);
        let cfg = DistillConfig {
            steps: 60,
            batch: 128,
            lr: 1e-12,
            stochastic_teacher: true,
            ..DistillConfig::default()
        };
        let round = distill_round(&b, &b.schedule.grid.clone(), &bundle, &data, &cfg).unwrap();
        let s = &b.schedule;
        let floor = 2.0
            * (1..=4)
                .map(|i| {
                    let (_, _, var) = s.between_coeffs(i - 1, i);
                    let a = (s.sigma2[i] - s.sigma2[i - 1]) / s.sigma2[i];
                    var / (a * a * s.sigma2[i])
                })
                .sum::<f64>()
            / 4.0;
        let mean = round.log.iter().map(|r| r.loss).sum::<f64>() / round.log.len() as f64;
        assert!((mean - floor).abs() / floor < 0.05, "loss {mean} vs floor {floor}");
    }

    #[test]
    fn linear_teacher_targets_compose_in_closed_form() {
        // eps(Z) = W Z + b makes every teacher step affine: Z_{i-1} = (I - a_i sigma_i W) Z - a_i sigma_i b.
        // Over several fine steps Z_s = A Z + c, so the target is ((I - A) Z - c) / (a sigma_t).
        let sched = build_schedule(4, ScheduleShape::SymmetricTriangular, 0.3).unwrap();
        let mut arch = ScoreArch::new(3, 2);
        arch.zero_head = true;
        let mut net = ScoreNetwork::<f32>::new(arch, 0).unwrap();
        let (w, bias) = ([[0.4f64, -0.2], [0.1, 0.3]], [0.05f64, -0.1]);
        {
            let p = net.params_mut();
            let id = p.id_of("z_skip.0.weight").unwrap();
            p.get_mut(id).data_mut().copy_from_slice(&[0.4, -0.2, 0.1, 0.3]);
            let id = p.id_of("z_skip.0.bias").unwrap();
            p.get_mut(id).data_mut().copy_from_slice(&[0.05, -0.1]);
        }
        let h1 = Matrix::from_rows(&[vec![0.3f32, -1.0, 0.7], vec![1.0, 0.0, -0.5], vec![0.0, 0.2, 0.1]]).unwrap();
        let zt = Matrix::from_rows(&[vec![1.5f32, -0.5], vec![-2.0, 0.7], vec![0.1, 0.9]]).unwrap();
        let (from, to) = ([4usize, 3, 4], [0usize, 1, 2]);
        let target = student_targets::<ChaCha8Rng>(&net, &sched, &h1, &zt, &from, &to, None).unwrap();
        for r in 0..3 {
            // Compose the affine maps from `from[r]` down to `to[r]`.
            let (mut m, mut c) = ([[1.0f64, 0.0], [0.0, 1.0]], [0.0f64, 0.0]);
            for i in (to[r] + 1..=from[r]).rev() {
                let k = (sched.sigma2[i] - sched.sigma2[i - 1]) / sched.sigma2[i] * sched.sigma2[i].sqrt();
                let step = [[1.0 - k * w[0][0], -k * w[0][1]], [-k * w[1][0], 1.0 - k * w[1][1]]];
                let mm = |a: [[f64; 2]; 2], b: [[f64; 2]; 2]| {
                    [
                        [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
                        [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
                    ]
                };
                c = [
                    step[0][0] * c[0] + step[0][1] * c[1] - k * bias[0],
                    step[1][0] * c[0] + step[1][1] * c[1] - k * bias[1],
                ];
                m = mm(step, m);
            }
            let (s2_t, s2_s) = (sched.sigma2[from[r]], sched.sigma2[to[r]]);
            let scale = (s2_t - s2_s) / s2_t * s2_t.sqrt();
            let z = [f64::from(zt.row(r)[0]), f64::from(zt.row(r)[1])];
            for k in 0..2 {
                let iz = z[k] - (m[k][0] * z[0] + m[k][1] * z[1]);
                let want = (iz - c[k]) / scale;
                let got = f64::from(target.row(r)[k]);
                assert!((got - want).abs() <= 1e-3 * want.abs().max(1.0), "row {r} class {k}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn rollout_without_steps_is_identity() {
        let (_, _, b) = setup(3);
        let h1 = Matrix::from_rows(&[vec![0.0; 8]]).unwrap();
        let zt = Matrix::from_rows(&[vec![0.5, -0.5]]).unwrap();
        let z = rollout::<ChaCha8Rng>(&b.net, &b.schedule, &h1, &zt, &[2], &[2], None).unwrap();
        assert_eq!(z, zt);
    }
}
