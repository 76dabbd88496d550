use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use dbn_core::bridge::{build_schedule, ScheduleShape};
use dbn_core::cost::CostModel;
use dbn_core::data::{read_features_csv, Dataset, Generator};
use dbn_core::distill::{distill_to_one, DistillConfig};
use dbn_core::inference::{Bridge, DbnPredictor, InferMode, InferOptions, Temperature};
use dbn_core::metrics::{deep_ensemble_curve, evaluate, MetricsReport, CSV_HEADER};
use dbn_core::nn::{Activation, Matrix};
use dbn_core::pipeline::CODE_VERSION;
use dbn_core::teacher::{train_teachers, ClassifierArch, EnsembleBundle, TeacherConfig};
use dbn_core::training::{train_bridge as fit_bridge, write_log, BridgeTrainConfig};

use crate::config::{usage, Params};
use crate::manifest;
use crate::Common;

/// Where a predictor comes from: a saved predictor, bundle + bridges, or a plain ensemble.
#[derive(Debug, Args, Clone, Default)]
pub struct ModelArgs {
    /// Directory written by `infer --save-predictor`.
    #[arg(long)]
    pub predictor: Option<PathBuf>,
    /// Bundle directory; supplies the source member and the DEE curve.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Bridge directories (or checkpoint stems); one per bridge.
    #[arg(long, num_args = 1..)]
    pub bridge: Vec<PathBuf>,
    /// Evaluate the first K bundle members as a deep ensemble instead.
    #[arg(long)]
    pub ensemble: Option<usize>,
}

const INFER_KEYS: &[(&str, &str)] = &[
    ("mode", "auto"),
    ("steps", "0"),
    ("temperature", "mean"),
    ("stochastic", "false"),
    ("seed", "0"),
];

fn params(defaults: &[(&str, &str)], common: &Common) -> Result<Params> {
    Params::resolve(defaults, common.config.as_deref(), &common.sets)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// A bridge directory holds the checkpoint under the stem `bridge`.
fn bridge_stem(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("bridge")
    } else {
        path.to_path_buf()
    }
}

fn load_bridges(paths: &[PathBuf]) -> Result<Vec<Bridge>> {
    paths
        .iter()
        .map(|p| Bridge::load(&bridge_stem(p)).with_context(|| format!("loading bridge {}", p.display())))
        .collect()
}

fn load_bundle(path: &Path) -> Result<EnsembleBundle> {
    EnsembleBundle::load(path).with_context(|| format!("loading bundle {}", path.display()))
}

fn parse_activation(s: &str) -> Result<Activation> {
    match s.to_ascii_lowercase().as_str() {
        "relu" => Ok(Activation::Relu),
        "relu6" => Ok(Activation::Relu6),
        "swish" => Ok(Activation::Swish),
        _ => Err(usage(format!("activation `{s}`: expected relu, relu6 or swish"))),
    }
}

fn parse_shape(s: &str) -> Result<ScheduleShape> {
    s.parse().map_err(|e| usage(format!("shape `{s}`: {e}")))
}

pub fn dataset(out: &Path, common: &Common) -> Result<()> {
    let p = params(
        &[
            ("generator", "two-moons"),
            ("n", "1000"),
            ("noise", "0.2"),
            ("nuisance", "0"),
            ("classes", "3"),
            ("std", "0.5"),
            ("radius", "3.0"),
            ("seed", "0"),
        ],
        common,
    )?;
    let (n, seed) = (p.get("n")?, p.get("seed")?);
    let gen = match p.raw("generator") {
        "two-moons" | "moons" => Generator::TwoMoons {
            n,
            noise: p.get("noise")?,
            seed,
            nuisance: p.get("nuisance")?,
        },
        "blobs" => Generator::Blobs {
            n,
            classes: p.get("classes")?,
            std: p.get("std")?,
            radius: p.get("radius")?,
            seed,
        },
        "rings" => Generator::Rings {
            n,
            classes: p.get("classes")?,
            noise: p.get("noise")?,
            seed,
        },
        g => return Err(usage(format!("generator `{g}`: expected two-moons, blobs or rings"))),
    };
    let data = gen.generate()?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    data.write_csv(out)?;
    manifest::write("dataset", &p, Some(seed), &[], out, false)?;
    eprintln!("wrote {} rows x {} features to {}", data.len(), data.dim(), out.display());
    Ok(())
}

pub fn train_ensemble(data_path: &Path, out: &Path, common: &Common) -> Result<()> {
    let defaults = TeacherConfig::default();
    let (epochs, batch, lr, momentum, wd) = (
        defaults.epochs.to_string(),
        defaults.batch.to_string(),
        defaults.lr.to_string(),
        defaults.momentum.to_string(),
        defaults.weight_decay.to_string(),
    );
    let p = params(
        &[
            ("seeds", "1,2,3,4,5"),
            ("hidden", "64,64,64"),
            ("activation", "swish"),
            ("feature_tap", "0"),
            ("epochs", &epochs),
            ("batch", &batch),
            ("lr", &lr),
            ("momentum", &momentum),
            ("weight_decay", &wd),
        ],
        common,
    )?;
    let data = Dataset::read_csv(data_path, None)?;
    let seeds: Vec<u64> = p.list("seeds")?;
    if seeds.is_empty() {
        return Err(usage("`seeds` must list at least one member seed"));
    }
    let mut arch = ClassifierArch::mlp(data.dim(), p.list("hidden")?, data.classes);
    arch.activation = parse_activation(p.raw("activation"))?;
    arch.feature_tap = p.get("feature_tap")?;
    let cfg = TeacherConfig {
        epochs: p.get("epochs")?,
        batch: p.get("batch")?,
        lr: p.get("lr")?,
        momentum: p.get("momentum")?,
        weight_decay: p.get("weight_decay")?,
    };
    let bundle = train_teachers(&data, &arch, &seeds, &cfg)?;
    bundle.save(out)?;
    manifest::write("train-ensemble", &p, seeds.first().copied(), &[data_path], out, true)?;
    for (s, a) in seeds.iter().zip(&bundle.train_accuracy) {
        eprintln!("member seed {s}: train accuracy {a:.4}");
    }
    Ok(())
}

pub fn train_bridge(bundle_path: &Path, data_path: &Path, out: &Path, common: &Common) -> Result<()> {
    let p = params(
        &[
            ("members", ""),
            ("steps", "4000"),
            ("batch", "128"),
            ("lr", "0.003"),
            ("cosine", "true"),
            ("ema_decay", "0.99995"),
            ("ema_warmup", "true"),
            ("mixup_alpha", "1.0"),
            ("jitter", "0.6"),
            ("grid_steps", "5"),
            ("shape", "symmetric-triangular"),
            ("beta_max", "0.3"),
            ("embed", "8"),
            ("blocks", "2"),
            ("seed", "0"),
        ],
        common,
    )?;
    let bundle = load_bundle(bundle_path)?;
    let data = Dataset::read_csv(data_path, Some(bundle.arch().classes))?;
    let mut members: Vec<usize> = p.list("members")?;
    if members.is_empty() {
        members = (0..bundle.len()).collect();
    }
    let sched = build_schedule(p.get("grid_steps")?, parse_shape(p.raw("shape"))?, p.get("beta_max")?)?;
    let seed = p.get("seed")?;
    let mut cfg = BridgeTrainConfig::new(members, sched, seed);
    cfg.steps = p.get("steps")?;
    cfg.batch = p.get("batch")?;
    cfg.lr = p.get("lr")?;
    cfg.cosine = p.get("cosine")?;
    cfg.ema_decay = p.get("ema_decay")?;
    cfg.ema_warmup = p.get("ema_warmup")?;
    cfg.mixup_alpha = p.get("mixup_alpha")?;
    cfg.jitter = p.get("jitter")?;
    cfg.embed = p.get("embed")?;
    cfg.blocks = p.get("blocks")?;
    let trained = fit_bridge(&bundle, &data, &cfg)?;
    create_dir(out)?;
    trained.bridge.save(&out.join("bridge"))?;
    write_log(&out.join("train_log.csv"), &trained.log)?;
    manifest::write("train-bridge", &p, Some(seed), &[bundle_path, data_path], out, true)?;
    if let Some(last) = trained.log.last() {
        eprintln!("bridge trained: final loss {:.5} at step {}", last.loss, last.step);
    }
    Ok(())
}

pub fn distill(bundle_path: &Path, data_path: &Path, bridge_path: &Path, out: &Path, common: &Common) -> Result<()> {
    let p = params(
        &[
            ("steps", "1000"),
            ("batch", "128"),
            ("lr", "0.001"),
            ("cosine", "true"),
            ("ema_decay", "0.99995"),
            ("ema_warmup", "true"),
            ("mixup_alpha", "1.0"),
            ("jitter", "0.6"),
            ("stochastic_teacher", "false"),
            ("seed", "0"),
        ],
        common,
    )?;
    let bundle = load_bundle(bundle_path)?;
    let data = Dataset::read_csv(data_path, Some(bundle.arch().classes))?;
    let teacher = load_bridges(&[bridge_path.to_path_buf()])?.remove(0);
    let seed = p.get("seed")?;
    let cfg = DistillConfig {
        steps: p.get("steps")?,
        batch: p.get("batch")?,
        lr: p.get("lr")?,
        cosine: p.get("cosine")?,
        ema_decay: p.get("ema_decay")?,
        ema_warmup: p.get("ema_warmup")?,
        mixup_alpha: p.get("mixup_alpha")?,
        jitter: p.get("jitter")?,
        stochastic_teacher: p.get("stochastic_teacher")?,
        seed,
    };
    let rounds = distill_to_one(&teacher, &bundle, &data, &cfg)?;
    create_dir(out)?;
    for (r, round) in rounds.iter().enumerate() {
        let dir = out.join(format!("round_{r}"));
        round.bridge.save(&dir.join("bridge"))?;
        write_log(&dir.join("train_log.csv"), &round.log)?;
        eprintln!("round {r}: {} -> {} steps", if r == 0 { teacher.n_steps() } else { rounds[r - 1].bridge.n_steps() }, round.bridge.n_steps());
    }
    let last = rounds.last().map_or(&teacher, |r| &r.bridge);
    last.save(&out.join("bridge"))?;
    manifest::write("distill", &p, Some(seed), &[bundle_path, data_path, bridge_path], out, true)?;
    Ok(())
}

/// A bridge predictor or the first `k` members of a bundle.
enum Model {
    Dbn(DbnPredictor),
    Ensemble(EnsembleBundle, usize),
}

fn build_model(m: &ModelArgs) -> Result<(Model, Option<EnsembleBundle>)> {
    let bundle = m.bundle.as_deref().map(load_bundle).transpose()?;
    if let Some(k) = m.ensemble {
        if m.predictor.is_some() || !m.bridge.is_empty() {
            return Err(usage("--ensemble cannot be combined with --predictor or --bridge"));
        }
        let b = bundle.ok_or_else(|| usage("--ensemble needs --bundle"))?;
        if k == 0 || k > b.len() {
            return Err(usage(format!("--ensemble {k}: bundle has {} members", b.len())));
        }
        return Ok((Model::Ensemble(b.clone(), k), Some(b)));
    }
    let predictor = match (&m.predictor, m.bridge.is_empty()) {
        (Some(dir), true) => DbnPredictor::load(dir).with_context(|| format!("loading predictor {}", dir.display()))?,
        (None, false) => {
            let b = bundle
                .as_ref()
                .ok_or_else(|| usage("--bridge needs --bundle for the source member"))?;
            DbnPredictor::from_bundle(b, load_bridges(&m.bridge)?)?
        }
        (Some(_), false) => return Err(usage("give either --predictor or --bridge, not both")),
        (None, true) => return Err(usage("no model: pass --predictor, --bundle with --bridge, or --bundle with --ensemble")),
    };
    Ok((Model::Dbn(predictor), bundle))
}

fn infer_settings(p: &Params, predictor: &DbnPredictor) -> Result<(InferMode, InferOptions)> {
    let steps: usize = p.get("steps")?;
    let mode = match p.raw("mode") {
        "auto" if steps == 0 && predictor.max_one_step() => InferMode::OneStep,
        "auto" if steps == 0 => {
            InferMode::Ancestral(predictor.bridges.iter().map(Bridge::n_steps).min().expect("non-empty"))
        }
        "auto" | "ancestral" if steps > 0 => InferMode::Ancestral(steps),
        "ancestral" => InferMode::Ancestral(predictor.bridges.iter().map(Bridge::n_steps).min().expect("non-empty")),
        "one-step" => InferMode::OneStep,
        m => return Err(usage(format!("mode `{m}`: expected auto, one-step or ancestral"))),
    };
    let temperature = match p.raw("temperature") {
        "mean" => Temperature::Mean,
        "sample" => Temperature::Sample,
        v => Temperature::Fixed(
            v.parse()
                .map_err(|_| usage(format!("temperature `{v}`: expected mean, sample or a number")))?,
        ),
    };
    Ok((
        mode,
        InferOptions {
            temperature,
            stochastic: p.get("stochastic")?,
        },
    ))
}

fn predict(model: &Model, p: &Params, x: &Matrix<f32>) -> Result<Vec<Vec<f64>>> {
    match model {
        Model::Ensemble(b, k) => Ok(b.ensemble_probs(&(0..*k).collect::<Vec<_>>(), x)?),
        Model::Dbn(pred) => {
            let (mode, opts) = infer_settings(p, pred)?;
            let mut rng = ChaCha8Rng::seed_from_u64(p.get("seed")?);
            Ok(pred.predict(x, mode, opts, &mut rng)?)
        }
    }
}

fn model_inputs(m: &ModelArgs) -> Vec<&Path> {
    m.predictor
        .iter()
        .chain(m.bundle.iter())
        .chain(m.bridge.iter())
        .map(PathBuf::as_path)
        .collect()
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

pub fn infer(m: &ModelArgs, input: &Path, out: &Path, save_predictor: Option<&Path>, common: &Common) -> Result<()> {
    let p = params(INFER_KEYS, common)?;
    let (model, _) = build_model(m)?;
    let x = read_features_csv(input)?;
    let probs = predict(&model, &p, &x)?;
    if let (Some(dir), Model::Dbn(pred)) = (save_predictor, &model) {
        pred.save(dir)?;
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let classes = probs.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_path(out).with_context(|| format!("writing {}", out.display()))?;
    let mut header: Vec<String> = (0..classes).map(|k| format!("p{k}")).collect();
    header.push("argmax".into());
    w.write_record(&header)?;
    for row in &probs {
        let mut rec: Vec<String> = row.iter().map(f64::to_string).collect();
        rec.push(argmax(row).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    let mut inputs = model_inputs(m);
    inputs.push(input);
    manifest::write("infer", &p, Some(p.get("seed")?), &inputs, out, false)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalReport<'a> {
    name: &'a str,
    code_version: &'a str,
    config_hash: String,
    manifest_hash: String,
    #[serde(flatten)]
    metrics: &'a MetricsReport,
}

pub fn eval(m: &ModelArgs, data_path: &Path, out: &Path, csv_path: Option<&Path>, name: &str, common: &Common) -> Result<()> {
    let mut keys = INFER_KEYS.to_vec();
    keys.push(("dee", "true"));
    let p = params(&keys, common)?;
    let (model, bundle) = build_model(m)?;
    let classes = match &model {
        Model::Dbn(pred) => pred.source.arch().classes,
        Model::Ensemble(b, _) => b.arch().classes,
    };
    let data = Dataset::read_csv(data_path, Some(classes))?;
    let probs = predict(&model, &p, &data.features)?;
    let curve = match (&bundle, p.get::<bool>("dee")?) {
        (Some(b), true) if b.len() >= 2 => {
            let c = deep_ensemble_curve(b, &data.features, &data.labels, b.len())?;
            if c.windows(2).all(|w| w[1].1 < w[0].1) {
                Some(c)
            } else {
                eprintln!("warning: ensemble NLL curve is not strictly decreasing; DEE omitted");
                None
            }
        }
        _ => None,
    };
    let metrics = evaluate(&probs, &data.labels, curve.as_deref())?;

    let mut inputs = model_inputs(m);
    inputs.push(data_path);
    let manifest_hash = manifest::write("eval", &p, Some(p.get("seed")?), &inputs, out, false)?;
    let report = EvalReport {
        name,
        code_version: CODE_VERSION,
        config_hash: p.hash(),
        manifest_hash,
        metrics: &metrics,
    };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    if let Some(path) = csv_path {
        let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .with_context(|| format!("opening {}", path.display()))?;
        if fresh {
            writeln!(f, "{CSV_HEADER}")?;
        }
        writeln!(f, "{}", metrics.csv_row(name)?)?;
    }
    eprintln!(
        "{name}: acc {:.4} nll {:.4} brier {:.4} ece {:.4}{}",
        metrics.acc,
        metrics.nll,
        metrics.brier,
        metrics.ece,
        metrics.dee.map_or(String::new(), |d| format!(" dee {:.3}", d.value))
    );
    Ok(())
}

pub fn cost(bundle_path: &Path, bridges: &[PathBuf], out: &Path, common: &Common) -> Result<()> {
    let p = params(&[("de", "3,5"), ("mac_flops", "2"), ("steps", "1")], common)?;
    let bundle = load_bundle(bundle_path)?;
    let cm = CostModel::new(p.get("mac_flops")?)?;
    let src = cm.model("source", &cm.classifier(bundle.source()));
    let mut rows = vec![src.clone()];
    for k in p.list::<usize>("de")? {
        if k == 0 {
            return Err(usage("`de` sizes must be positive"));
        }
        rows.push(cm.deep_ensemble(bundle.arch(), k)?);
    }
    if !bridges.is_empty() {
        let pred = DbnPredictor::from_bundle(&bundle, load_bridges(bridges)?)?;
        let mut c = cm.predictor(&pred, p.get("steps")?);
        c.name = format!("dbn-{}", pred.bridges.len());
        rows.push(c);
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let mut w = csv::Writer::from_path(out).with_context(|| format!("writing {}", out.display()))?;
    w.write_record(["name", "params", "flops", "relative"])?;
    for r in &rows {
        w.write_record([
            r.name.clone(),
            r.params.to_string(),
            r.flops.to_string(),
            r.relative_to(&src).to_string(),
        ])?;
    }
    w.flush()?;
    let mut inputs = vec![bundle_path];
    inputs.extend(bridges.iter().map(PathBuf::as_path));
    manifest::write("cost", &p, None, &inputs, out, false)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax(&[0.2, 0.5, 0.3]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn activation_names() {
        assert_eq!(parse_activation("ReLU6").unwrap(), Activation::Relu6);
        assert!(parse_activation("tanh").is_err());
    }
}
