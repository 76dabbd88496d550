//! Trained bridges, the source-plus-bridges predictor and member planning.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::{posterior_between_at, DiffusionSchedule, TemperatureLaw};
use crate::error::{Error, Result};
use crate::logit::softmax_f64;
use crate::nn::{load_checkpoint, save_checkpoint, Matrix, FORMAT_VERSION};
use crate::score::{ScoreArch, ScoreInput, ScoreNetwork};
use crate::teacher::{ClassifierModel, EnsembleBundle};

/// One entry of a bridge's training history: the grid it was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageRound {
    pub n_steps: usize,
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BridgeMeta {
    n_steps: usize,
    schedule: DiffusionSchedule,
    teacher_indices: Vec<usize>,
    source_index: usize,
    ema: bool,
    temperature: TemperatureLaw,
    lineage: Vec<LineageRound>,
}

/// A score network together with everything needed to run it.
#[derive(Debug, Clone)]
pub struct Bridge {
    pub net: ScoreNetwork<f32>,
    pub schedule: DiffusionSchedule,
    /// Bundle members whose ensemble this bridge imitates (source included).
    pub teacher_indices: Vec<usize>,
    pub source_index: usize,
    /// Weights are the EMA shadow rather than the raw optimizer iterate.
    pub ema: bool,
    pub temperature: TemperatureLaw,
    pub lineage: Vec<LineageRound>,
}

impl Bridge {
    pub fn n_steps(&self) -> usize {
        self.schedule.steps()
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let meta = BridgeMeta {
            n_steps: self.n_steps(),
            schedule: self.schedule.clone(),
            teacher_indices: self.teacher_indices.clone(),
            source_index: self.source_index,
            ema: self.ema,
            temperature: self.temperature,
            lineage: self.lineage.clone(),
        };
        save_checkpoint(
            stem,
            "bridge",
            serde_json::to_value(self.net.arch())?,
            serde_json::to_value(meta)?,
            self.net.params(),
        )?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (manifest, params) = load_checkpoint(stem)?;
        if manifest.kind != "bridge" {
            return Err(Error::Data(format!(
                "{}: expected a bridge checkpoint, found `{}`",
                stem.display(),
                manifest.kind
            )));
        }
        let arch: ScoreArch = serde_json::from_value(manifest.arch)?;
        let meta: BridgeMeta = serde_json::from_value(manifest.meta)?;
        if meta.n_steps != meta.schedule.steps() {
            return Err(Error::Data(format!(
                "{}: n_steps {} disagrees with a {}-step schedule",
                stem.display(),
                meta.n_steps,
                meta.schedule.steps()
            )));
        }
        Ok(Self {
            net: ScoreNetwork::from_params(arch, params)?,
            schedule: meta.schedule,
            teacher_indices: meta.teacher_indices,
            source_index: meta.source_index,
            ema: meta.ema,
            temperature: meta.temperature,
            lineage: meta.lineage,
        })
    }
}

/// Assigns bundle members to bridges for a target ensemble of `m = L*n + 1`
/// members: every bridge covers the source plus `n` members of its own.
///
/// Members are numbered with the source first and the remaining members in
/// increasing index order.
pub fn plan_bridges(m: usize, n: usize, source: usize) -> Result<Vec<Vec<usize>>> {
    if n == 0 || m < 2 || source >= m {
        return Err(Error::Config(format!(
            "cannot plan bridges for M = {m}, N = {n}, source {source}"
        )));
    }
    if (m - 1) % n != 0 {
        let lower = (m - 1) / n * n + 1;
        let upper = lower + n;
        let hint = if lower > 1 {
            format!("{lower} or {upper}")
        } else {
            upper.to_string()
        };
        return Err(Error::Config(format!(
            "M = {m} is not L*{n} + 1 for any L; nearest valid M: {hint}"
        )));
    }
    let others: Vec<usize> = (0..m).filter(|&i| i != source).collect();
    Ok(others
        .chunks(n)
        .map(|chunk| std::iter::once(source).chain(chunk.iter().copied()).collect())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Temperature {
    /// One draw from the bridge's temperature law per example.
    Sample,
    /// The law's mean, for reproducible evaluation.
    Mean,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferOptions {
    pub temperature: Temperature,
    /// Inject posterior noise at intermediate ancestral steps.
    pub stochastic: bool,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            temperature: Temperature::Sample,
            stochastic: false,
        }
    }
}

impl InferOptions {
    pub fn deterministic() -> Self {
        Self {
            temperature: Temperature::Mean,
            stochastic: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferMode {
    OneStep,
    Ancestral(usize),
}

/// One source model shared by `L` bridges.
#[derive(Debug)]
pub struct DbnPredictor {
    pub source: ClassifierModel,
    pub bridges: Vec<Bridge>,
    source_rows: AtomicUsize,
}

impl Clone for DbnPredictor {
    fn clone(&self) -> Self {
        Self {
            source: self.source.clone(),
            bridges: self.bridges.clone(),
            source_rows: AtomicUsize::new(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PredictorManifest {
    format_version: String,
    source: String,
    bridges: Vec<String>,
}

impl DbnPredictor {
    pub fn new(source: ClassifierModel, bridges: Vec<Bridge>) -> Result<Self> {
        if bridges.is_empty() {
            return Err(Error::Config("a predictor needs at least one bridge".into()));
        }
        let width = source.arch().feature_width();
        let classes = source.arch().classes;
        let src = bridges[0].source_index;
        for (i, b) in bridges.iter().enumerate() {
            let a = b.net.arch();
            if a.feature_dim != width || a.classes != classes {
                return Err(Error::Config(format!(
                    "bridge {i} expects features {} / classes {}, source provides {width} / {classes}",
                    a.feature_dim, a.classes
                )));
            }
            if b.source_index != src {
                return Err(Error::Config(format!(
                    "bridge {i} was trained for source member {}, bridge 0 for {src}",
                    b.source_index
                )));
            }
            if !b.ema {
                return Err(Error::Config(format!("bridge {i} does not hold EMA weights")));
            }
        }
        Ok(Self {
            source,
            bridges,
            source_rows: AtomicUsize::new(0),
        })
    }

    /// Builds a predictor from a bundle's source member.
    pub fn from_bundle(bundle: &EnsembleBundle, bridges: Vec<Bridge>) -> Result<Self> {
        if let Some(b) = bridges.iter().find(|b| b.source_index != bundle.source_index) {
            return Err(Error::Config(format!(
                "bridge trained for source {} but bundle source is {}",
                b.source_index, bundle.source_index
            )));
        }
        Self::new(bundle.source().clone(), bridges)
    }

    /// Number of input rows the source model has processed so far.
    pub fn source_rows(&self) -> usize {
        self.source_rows.load(Ordering::Relaxed)
    }

    pub fn max_one_step(&self) -> bool {
        self.bridges.iter().all(|b| b.n_steps() == 1)
    }

    /// Ensemble-approximating probabilities for every row of `x`.
    pub fn predict<R: Rng + ?Sized>(
        &self,
        x: &Matrix<f32>,
        mode: InferMode,
        opts: InferOptions,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        match mode {
            InferMode::OneStep if !self.max_one_step() => {
                return Err(Error::Contract(
                    "one-step inference needs every bridge distilled to n_steps = 1".into(),
                ))
            }
            InferMode::Ancestral(0) => return Err(Error::Contract("ancestral inference needs >= 1 step".into())),
            InferMode::Ancestral(s) => {
                if let Some(b) = self.bridges.iter().find(|b| b.n_steps() < s) {
                    return Err(Error::Contract(format!(
                        "{s}-step inference requested from a {}-step bridge",
                        b.n_steps()
                    )));
                }
            }
            InferMode::OneStep => {}
        }
        let (h1, z1) = self.source.tap_and_logits(x, self.source.arch().feature_tap)?;
        self.source_rows.fetch_add(x.rows, Ordering::Relaxed);
        let mut acc = vec![vec![0.0; z1.cols]; x.rows];
        for b in &self.bridges {
            let steps = match mode {
                InferMode::OneStep => 1,
                InferMode::Ancestral(s) => s,
            };
            let z0 = run_bridge(b, &h1, &z1, steps, opts, rng)?;
            for (a, row) in acc.iter_mut().zip(z0.iter_rows()) {
                let p = softmax_f64(&row.iter().map(|&v| v as f64).collect::<Vec<_>>());
                a.iter_mut().zip(p).for_each(|(u, v)| *u += v);
            }
        }
        let l = self.bridges.len() as f64;
        acc.iter_mut().flatten().for_each(|v| *v /= l);
        Ok(acc)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.source.save(&dir.join("source"))?;
        let names: Vec<String> = (0..self.bridges.len()).map(|i| format!("bridge_{i}")).collect();
        for (b, n) in self.bridges.iter().zip(&names) {
            b.save(&dir.join(n))?;
        }
        let manifest = PredictorManifest {
            format_version: FORMAT_VERSION.into(),
            source: "source".into(),
            bridges: names,
        };
        let path = dir.join("predictor.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("predictor.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: PredictorManifest = serde_json::from_str(&text)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: FORMAT_VERSION.into(),
                found: manifest.format_version,
            });
        }
        let source = ClassifierModel::load(&dir.join(&manifest.source))?;
        let bridges = manifest
            .bridges
            .iter()
            .map(|n| Bridge::load(&dir.join(n)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(source, bridges)
    }
}

/// Grid indices visited by an `steps`-step sampler on an `n`-step grid, top first.
fn visit_indices(n: usize, steps: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..=steps).map(|i| (i * n + steps / 2) / steps).collect();
    idx.dedup();
    idx.reverse();
    idx
}

/// Runs one bridge from the annealed source logits down to `Z_0`.
pub fn run_bridge<R: Rng + ?Sized>(
    bridge: &Bridge,
    h1: &Matrix<f32>,
    z1: &Matrix<f32>,
    steps: usize,
    opts: InferOptions,
    rng: &mut R,
) -> Result<Matrix<f32>> {
    let sched = &bridge.schedule;
    let mut z = z1.clone();
    for r in 0..z.rows {
        let temp = match opts.temperature {
            Temperature::Sample => bridge.temperature.sample(rng),
            Temperature::Mean => bridge.temperature.mean(),
            Temperature::Fixed(t) => t,
        };
        let t = temp as f32;
        z.row_mut(r).iter_mut().for_each(|v| *v /= t);
    }
    let visits = visit_indices(sched.steps(), steps);
    for w in visits.windows(2) {
        let (ti, si) = (w[0], w[1]);
        z = reverse_step(&bridge.net, sched, h1, &z, ti, si, opts.stochastic.then_some(&mut *rng))?;
    }
    Ok(z)
}

/// One ancestral step from grid index `ti` to `si < ti`; `rng = None` keeps the mean.
pub fn reverse_step<R: Rng + ?Sized>(
    net: &ScoreNetwork<f32>,
    sched: &DiffusionSchedule,
    h1: &Matrix<f32>,
    zt: &Matrix<f32>,
    ti: usize,
    si: usize,
    mut rng: Option<&mut R>,
) -> Result<Matrix<f32>> {
    let times = vec![sched.grid[ti]; zt.rows];
    let eps = net.predict(&ScoreInput { h1, zt, t: &times })?;
    let sigma = sched.sigma2[ti].sqrt() as f32;
    let mut out = Matrix::zeros(zt.rows, zt.cols);
    for r in 0..zt.rows {
        let zhat0: Vec<f32> = zt.row(r).iter().zip(eps.row(r)).map(|(&a, &e)| a - sigma * e).collect();
        let next = posterior_between_at(&zhat0, zt.row(r), si, ti, sched, rng.as_deref_mut());
        out.row_mut(r).copy_from_slice(&next);
    }
    if !out.all_finite() {
        return Err(Error::NonFinite(format!("bridge state became non-finite at t = {}", sched.grid[ti])));
    }
    Ok(out)
}

/// Single-input one-step inference.
pub fn infer_one<R: Rng + ?Sized>(p: &DbnPredictor, x: &[f32], opts: InferOptions, rng: &mut R) -> Result<Vec<f64>> {
    Ok(p.predict(&Matrix::row_vector(x), InferMode::OneStep, opts, rng)?.remove(0))
}

/// Single-input `steps`-step ancestral inference.
pub fn infer_ancestral<R: Rng + ?Sized>(
    p: &DbnPredictor,
    x: &[f32],
    steps: usize,
    opts: InferOptions,
    rng: &mut R,
) -> Result<Vec<f64>> {
    Ok(p.predict(&Matrix::row_vector(x), InferMode::Ancestral(steps), opts, rng)?
        .remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::{build_schedule, ScheduleShape};
    use crate::logit::softmax;
    use crate::teacher::ClassifierArch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn source() -> ClassifierModel {
        ClassifierModel::new(ClassifierArch::mlp(2, vec![6, 6], 3), 4).unwrap()
    }

    fn bridge(steps: usize, zero: bool, seed: u64) -> Bridge {
        let mut arch = ScoreArch::new(6, 3);
        arch.zero_head = zero;
        Bridge {
            net: ScoreNetwork::new(arch, seed).unwrap(),
            schedule: build_schedule(steps, ScheduleShape::LinearBeta, 2.0).unwrap(),
            teacher_indices: vec![0, 1, 2],
            source_index: 0,
            ema: true,
            temperature: TemperatureLaw::default(),
            lineage: vec![],
        }
    }

    #[test]
    fn identity_bridge_returns_source_softmax() {
        let src = source();
        let p = DbnPredictor::new(src.clone(), vec![bridge(1, true, 1)]).unwrap();
        let x = [0.3f32, -1.2];
        let opts = InferOptions {
            temperature: Temperature::Fixed(1.0),
            stochastic: false,
        };
        let out = infer_one(&p, &x, opts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let z = src.logits(&Matrix::row_vector(&x)).unwrap();
        let want = softmax(z.row(0));
        for (a, b) in out.iter().zip(want) {
            assert!((a - b as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn raw_weights_rejected() {
        let mut b = bridge(1, false, 2);
        b.ema = false;
        assert!(matches!(DbnPredictor::new(source(), vec![b]), Err(Error::Config(_))));
    }

    #[test]
    fn duplicate_bridges_match_single() {
        let b = bridge(1, false, 7);
        let one = DbnPredictor::new(source(), vec![b.clone()]).unwrap();
        let two = DbnPredictor::new(source(), vec![b.clone(), b]).unwrap();
        let x = Matrix::from_rows(&[vec![0.1, 0.2], vec![1.0, -1.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = one.predict(&x, InferMode::OneStep, InferOptions::deterministic(), &mut rng).unwrap();
        let c = two.predict(&x, InferMode::OneStep, InferOptions::deterministic(), &mut rng).unwrap();
        for (ra, rc) in a.iter().zip(&c) {
            for (u, v) in ra.iter().zip(rc) {
                assert!((u - v).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn source_runs_once_per_row() {
        let p = DbnPredictor::new(source(), vec![bridge(1, false, 1), bridge(1, false, 2), bridge(1, false, 3)]).unwrap();
        let x = Matrix::from_rows(&[vec![0.1, 0.2], vec![1.0, -1.0], vec![0.0, 0.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = p.predict(&x, InferMode::OneStep, InferOptions::default(), &mut rng).unwrap();
        assert_eq!(p.source_rows(), 3);
        for row in out {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn one_step_mode_requires_distilled_bridges() {
        let p = DbnPredictor::new(source(), vec![bridge(5, false, 1)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            infer_one(&p, &[0.0, 0.0], InferOptions::default(), &mut rng),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            infer_ancestral(&p, &[0.0, 0.0], 6, InferOptions::default(), &mut rng),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn ancestral_one_step_equals_one_step() {
        let p = DbnPredictor::new(source(), vec![bridge(1, false, 5)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let opts = InferOptions::deterministic();
        let a = infer_one(&p, &[0.5, 0.5], opts, &mut rng).unwrap();
        let b = infer_ancestral(&p, &[0.5, 0.5], 1, opts, &mut rng).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_off_ancestral_is_deterministic() {
        let p = DbnPredictor::new(source(), vec![bridge(5, false, 5)]).unwrap();
        let opts = InferOptions::deterministic();
        let a = infer_ancestral(&p, &[0.5, 0.5], 5, opts, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = infer_ancestral(&p, &[0.5, 0.5], 5, opts, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn visits_cover_grid() {
        assert_eq!(visit_indices(5, 5), vec![5, 4, 3, 2, 1, 0]);
        assert_eq!(visit_indices(5, 1), vec![5, 0]);
        assert_eq!(visit_indices(4, 2), vec![4, 2, 0]);
    }

    #[test]
    fn plans_match_examples() {
        assert_eq!(plan_bridges(3, 2, 0).unwrap(), vec![vec![0, 1, 2]]);
        assert_eq!(plan_bridges(5, 2, 0).unwrap(), vec![vec![0, 1, 2], vec![0, 3, 4]]);
        assert_eq!(plan_bridges(5, 2, 2).unwrap(), vec![vec![2, 0, 1], vec![2, 3, 4]]);
        match plan_bridges(4, 2, 0) {
            Err(Error::Config(msg)) => assert!(msg.contains("3 or 5"), "{msg}"),
            other => panic!("expected a configuration error, got {other:?}"),
        }
    }

    #[test]
    fn bridge_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = bridge(3, false, 11);
        b.lineage = vec![LineageRound {
            n_steps: 3,
            grid: b.schedule.grid.clone(),
        }];
        b.save(&dir.path().join("b")).unwrap();
        let back = Bridge::load(&dir.path().join("b")).unwrap();
        assert_eq!(back.net.params(), b.net.params());
        assert_eq!(back.schedule, b.schedule);
        assert_eq!(back.lineage, b.lineage);
        assert!(back.ema);
        let p = DbnPredictor::new(source(), vec![b]).unwrap();
        p.save(&dir.path().join("pred")).unwrap();
        let q = DbnPredictor::load(&dir.path().join("pred")).unwrap();
        assert_eq!(q.bridges.len(), 1);
        assert_eq!(q.source.params(), p.source.params());
    }
}
