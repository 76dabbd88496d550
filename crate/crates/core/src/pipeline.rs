//! End-to-end desk-scale benchmark: data, deep ensemble, bridges, distillation,
//! evaluation and cost accounting.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bridge::{build_schedule, ScheduleShape};
use crate::cost::CostModel;
use crate::data::{Dataset, Generator};
use crate::distill::{distill_to_one, DistillConfig};
use crate::error::{Error, Result};
use crate::inference::{plan_bridges, Bridge, DbnPredictor, InferMode, InferOptions};
use crate::logit::PROB_FLOOR;
use crate::metrics::{deep_ensemble_curve, evaluate, MetricsReport};
use crate::nn::Activation;
use crate::teacher::{train_teachers, ClassifierArch, EnsembleBundle, TeacherConfig};
use crate::training::{train_bridge, write_log, BridgeTrainConfig, LogRow};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub noise: f64,
    /// Label-independent Gaussian feature columns appended to the moons.
    pub nuisance: usize,
    pub train_seed: u64,
    pub test_seed: u64,
    pub hidden: Vec<usize>,
    pub teacher: TeacherConfig,
    pub member_seeds: Vec<u64>,
    /// Non-source members per bridge.
    pub per_bridge: usize,
    pub grid_steps: usize,
    pub shape: ScheduleShape,
    pub beta_max: f64,
    pub bridge_steps: usize,
    pub bridge_batch: usize,
    pub bridge_lr: f64,
    /// Cosine-decay the bridge and distillation learning rates.
    pub cosine: bool,
    pub embed: usize,
    pub blocks: usize,
    pub mixup_alpha: f64,
    pub jitter: f64,
    pub ema_decay: f64,
    pub distill_steps: usize,
    pub distill_lr: f64,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_test: 2000,
            noise: 0.2,
            nuisance: 8,
            train_seed: 0,
            test_seed: 1,
            hidden: vec![64, 64, 64],
            teacher: TeacherConfig {
                epochs: 50,
                ..TeacherConfig::default()
            },
            member_seeds: vec![1, 2, 3, 4, 5],
            per_bridge: 2,
            grid_steps: 5,
            shape: ScheduleShape::SymmetricTriangular,
            beta_max: 0.3,
            bridge_steps: 4000,
            bridge_batch: 128,
            bridge_lr: 3e-3,
            cosine: true,
            embed: 8,
            blocks: 2,
            mixup_alpha: 1.0,
            jitter: 0.6,
            ema_decay: 0.99995,
            distill_steps: 1000,
            distill_lr: 1e-3,
            seed: 0,
        }
    }
}

impl BenchmarkConfig {
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let gen = |n, seed| Generator::TwoMoons {
            n,
            noise: self.noise,
            seed,
            nuisance: self.nuisance,
        };
        Ok((gen(self.n_train, self.train_seed).generate()?, gen(self.n_test, self.test_seed).generate()?))
    }

    pub fn arch(&self) -> ClassifierArch {
        let mut a = ClassifierArch::mlp(2 + self.nuisance, self.hidden.clone(), 2);
        a.activation = Activation::Swish;
        a
    }

    pub fn bridge_config(&self, teacher_indices: Vec<usize>, seed: u64) -> Result<BridgeTrainConfig> {
        let sched = build_schedule(self.grid_steps, self.shape, self.beta_max)?;
        let mut c = BridgeTrainConfig::new(teacher_indices, sched, seed);
        c.steps = self.bridge_steps;
        c.batch = self.bridge_batch;
        c.lr = self.bridge_lr;
        c.cosine = self.cosine;
        c.embed = self.embed;
        c.blocks = self.blocks;
        c.mixup_alpha = self.mixup_alpha;
        c.jitter = self.jitter;
        c.ema_decay = self.ema_decay;
        Ok(c)
    }

    pub fn distill_config(&self, seed: u64) -> DistillConfig {
        DistillConfig {
            steps: self.distill_steps,
            batch: self.bridge_batch,
            lr: self.distill_lr,
            cosine: self.cosine,
            ema_decay: self.ema_decay,
            mixup_alpha: self.mixup_alpha,
            jitter: self.jitter,
            seed,
            ..DistillConfig::default()
        }
    }
}

/// Hex SHA-256 of a value's canonical JSON.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let text = serde_json::to_string(value)?;
    Ok(Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
}

/// A bridge trained on the full grid together with its distillation rounds.
#[derive(Debug, Clone)]
pub struct BridgeRun {
    pub teacher_indices: Vec<usize>,
    pub full: Bridge,
    pub train_log: Vec<LogRow>,
    pub rounds: Vec<Bridge>,
    pub round_logs: Vec<Vec<LogRow>>,
}

impl BridgeRun {
    pub fn distilled(&self) -> &Bridge {
        self.rounds.last().unwrap_or(&self.full)
    }

    /// The full-grid bridge followed by every distilled round.
    pub fn stages(&self) -> impl Iterator<Item = &Bridge> {
        std::iter::once(&self.full).chain(self.rounds.iter())
    }
}

pub fn run_bridge_stage(
    cfg: &BenchmarkConfig,
    bundle: &EnsembleBundle,
    train: &Dataset,
    teacher_indices: Vec<usize>,
    seed: u64,
) -> Result<BridgeRun> {
    let trained = train_bridge(bundle, train, &cfg.bridge_config(teacher_indices.clone(), seed)?)?;
    let rounds = distill_to_one(&trained.bridge, bundle, train, &cfg.distill_config(seed))?;
    let (rounds, round_logs) = rounds.into_iter().map(|r| (r.bridge, r.log)).unzip();
    Ok(BridgeRun {
        teacher_indices,
        full: trained.bridge,
        train_log: trained.log,
        rounds,
        round_logs,
    })
}

/// Evaluation of one predictor on the test set with fixed temperature and no noise.
pub fn predict_fixed(p: &DbnPredictor, test: &Dataset, mode: InferMode, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    p.predict(&test.features, mode, InferOptions::deterministic(), &mut rng)
}

/// Mean per-example `KL(p || q)`.
pub fn mean_kl(p: &[Vec<f64>], q: &[Vec<f64>]) -> f64 {
    let total: f64 = p
        .iter()
        .zip(q)
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .filter(|(&u, _)| u > 0.0)
                .map(|(&u, &v)| u * (u.max(PROB_FLOOR).ln() - v.max(PROB_FLOOR).ln()))
                .sum::<f64>()
        })
        .sum();
    total / p.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub name: String,
    pub params: u64,
    pub flops: u64,
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config_hash: String,
    pub code_version: String,
    pub de_curve: Vec<(usize, f64)>,
    pub source: MetricsReport,
    pub de3: MetricsReport,
    pub de5: MetricsReport,
    /// Full-grid one-bridge predictor, ancestral sampling.
    pub dbn1_ancestral: MetricsReport,
    /// Test NLL of the one-bridge predictor after each stage (full grid, then every round).
    pub dbn1_stage_nll: Vec<f64>,
    pub dbn1: MetricsReport,
    pub dbn2: MetricsReport,
    /// Mean `KL(full-grid ancestral || distilled one-step)` of the one-bridge predictor.
    pub kl_ancestral_vs_one_step: f64,
    pub costs: Vec<CostRow>,
    /// Score-network parameters over one member's parameters.
    pub score_param_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct BenchmarkArtifacts {
    pub bundle: EnsembleBundle,
    pub bridges: Vec<BridgeRun>,
    pub dbn1: DbnPredictor,
    pub dbn2: DbnPredictor,
}

/// Runs the whole benchmark; when `out` is given, every artifact is written there.
pub fn run_benchmark(cfg: &BenchmarkConfig, out: Option<&Path>) -> Result<(BenchmarkReport, BenchmarkArtifacts)> {
    let m = cfg.member_seeds.len();
    if m < 2 * cfg.per_bridge + 1 {
        return Err(Error::Config(format!(
            "benchmark needs at least {} members for two bridges, got {m}",
            2 * cfg.per_bridge + 1
        )));
    }
    let (train, test) = cfg.datasets()?;
    let bundle = train_teachers(&train, &cfg.arch(), &cfg.member_seeds, &cfg.teacher)?;
    let de_curve = deep_ensemble_curve(&bundle, &test.features, &test.labels, m)?;
    let all: Vec<usize> = (0..m).collect();
    let probs_for = |k: usize| bundle.ensemble_probs(&all[..k], &test.features);
    let source = evaluate(&probs_for(1)?, &test.labels, Some(&de_curve))?;
    let de3 = evaluate(&probs_for(cfg.per_bridge + 1)?, &test.labels, Some(&de_curve))?;
    let de5 = evaluate(&probs_for(2 * cfg.per_bridge + 1)?, &test.labels, Some(&de_curve))?;

    let plan = plan_bridges(2 * cfg.per_bridge + 1, cfg.per_bridge, bundle.source_index)?;
    let bridges = plan
        .into_iter()
        .enumerate()
        .map(|(l, idx)| run_bridge_stage(cfg, &bundle, &train, idx, cfg.seed.wrapping_add(100 * l as u64)))
        .collect::<Result<Vec<_>>>()?;

    let eval_seed = cfg.seed ^ 0xe7a1;
    let mut stage_nll = Vec::new();
    let mut ancestral_probs = None;
    for stage in bridges[0].stages() {
        let p = DbnPredictor::from_bundle(&bundle, vec![stage.clone()])?;
        let probs = predict_fixed(&p, &test, InferMode::Ancestral(stage.n_steps()), eval_seed)?;
        stage_nll.push(evaluate(&probs, &test.labels, None)?.nll);
        if ancestral_probs.is_none() {
            ancestral_probs = Some(probs);
        }
    }
    let ancestral_probs = ancestral_probs.expect("at least the full-grid stage");
    let dbn1_ancestral = evaluate(&ancestral_probs, &test.labels, Some(&de_curve))?;
    let dbn1 = DbnPredictor::from_bundle(&bundle, vec![bridges[0].distilled().clone()])?;
    let one_step = predict_fixed(&dbn1, &test, InferMode::OneStep, eval_seed)?;
    let dbn1_report = evaluate(&one_step, &test.labels, Some(&de_curve))?;
    let kl = mean_kl(&ancestral_probs, &one_step);
    let dbn2 = DbnPredictor::from_bundle(&bundle, bridges.iter().map(|b| b.distilled().clone()).collect())?;
    let dbn2_report = evaluate(&predict_fixed(&dbn2, &test, InferMode::OneStep, eval_seed)?, &test.labels, Some(&de_curve))?;

    let cm = CostModel::default();
    let src_cost = cm.model("source", &cm.classifier(bundle.source()));
    let mut costs = vec![src_cost.clone()];
    for k in [3, 5] {
        costs.push(cm.deep_ensemble(bundle.arch(), k)?);
    }
    let mut c1 = cm.predictor(&dbn1, 1);
    c1.name = "dbn-1".into();
    let mut c2 = cm.predictor(&dbn2, 1);
    c2.name = "dbn-2".into();
    costs.push(c1);
    costs.push(c2);
    let cost_rows = costs
        .iter()
        .map(|c| CostRow {
            name: c.name.clone(),
            params: c.params,
            flops: c.flops,
            relative: c.relative_to(&src_cost),
        })
        .collect();
    let score_params = cm.model("score", &cm.score(&bridges[0].full.net)).params;

    let report = BenchmarkReport {
        config_hash: config_hash(cfg)?,
        code_version: CODE_VERSION.to_string(),
        de_curve,
        source,
        de3,
        de5,
        dbn1_ancestral,
        dbn1_stage_nll: stage_nll,
        dbn1: dbn1_report,
        dbn2: dbn2_report,
        kl_ancestral_vs_one_step: kl,
        costs: cost_rows,
        score_param_fraction: score_params as f64 / src_cost.params as f64,
    };
    let artifacts = BenchmarkArtifacts {
        bundle,
        bridges,
        dbn1,
        dbn2,
    };
    if let Some(dir) = out {
        write_artifacts(dir, cfg, &report, &artifacts)?;
    }
    Ok((report, artifacts))
}

fn write_artifacts(dir: &Path, cfg: &BenchmarkConfig, report: &BenchmarkReport, a: &BenchmarkArtifacts) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    a.bundle.save(&dir.join("bundle"))?;
    for (l, run) in a.bridges.iter().enumerate() {
        let bdir = dir.join(format!("bridge_{l}"));
        run.full.save(&bdir.join("full"))?;
        write_log(&bdir.join("train_log.csv"), &run.train_log)?;
        for (r, (b, log)) in run.rounds.iter().zip(&run.round_logs).enumerate() {
            b.save(&bdir.join(format!("round_{r}")))?;
            write_log(&bdir.join(format!("round_{r}_log.csv")), log)?;
        }
    }
    a.dbn1.save(&dir.join("dbn1"))?;
    a.dbn2.save(&dir.join("dbn2"))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("config.json", serde_json::to_string_pretty(cfg)?)?;
    write("report.json", serde_json::to_string_pretty(report)?)
}
