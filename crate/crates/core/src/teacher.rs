//! Deep-ensemble teachers: MLP classifiers split into a feature extractor and a head.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::logit::{ens_logit, softmax_f64, EnsLogit, PROB_FLOOR};
use crate::nn::{
    load_checkpoint, save_checkpoint, Activation, Init, LayerSpec, Matrix, Optimizer, OptimizerKind, ParamStore,
    Sequential, FORMAT_VERSION,
};

/// Classifier architecture: `input -> hidden blocks (dense + activation) -> dense head`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub activation: Activation,
    /// Hidden block whose output is exposed as the bridge feature `h1`.
    pub feature_tap: usize,
}

impl ClassifierArch {
    pub fn mlp(input: usize, hidden: Vec<usize>, classes: usize) -> Self {
        Self {
            input,
            hidden,
            classes,
            activation: Activation::Swish,
            feature_tap: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.input == 0 || self.classes < 2 {
            return Err(Error::Config(format!(
                "classifier needs input > 0, at least one hidden layer and >= 2 classes: {self:?}"
            )));
        }
        if self.feature_tap >= self.hidden.len() {
            return Err(Error::Config(format!(
                "feature tap {} out of range for {} hidden blocks",
                self.feature_tap,
                self.hidden.len()
            )));
        }
        Ok(())
    }

    /// Width of `h1`.
    pub fn feature_width(&self) -> usize {
        self.hidden[self.feature_tap]
    }

    fn block_specs(&self, b: usize) -> Vec<LayerSpec> {
        let input = if b == 0 { self.input } else { self.hidden[b - 1] };
        vec![
            LayerSpec::dense(input, self.hidden[b], Init::He),
            LayerSpec::act(self.activation),
        ]
    }

    fn head_specs(&self) -> Vec<LayerSpec> {
        vec![LayerSpec::dense(*self.hidden.last().unwrap(), self.classes, Init::Lecun)]
    }
}

/// `f = head ∘ feature`, with the feature extractor kept as separate blocks so
/// intermediate activations can be tapped.
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    arch: ClassifierArch,
    blocks: Vec<Sequential>,
    head: Sequential,
    params: ParamStore<f32>,
}

impl ClassifierModel {
    pub fn new(arch: ClassifierArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new(seed);
        let blocks = (0..arch.hidden.len())
            .map(|b| Sequential::build(&format!("block{b}"), arch.block_specs(b), &mut params, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Sequential::build("head", arch.head_specs(), &mut params, &mut rng)?;
        Ok(Self {
            arch,
            blocks,
            head,
            params,
        })
    }

    fn bind(arch: ClassifierArch, params: ParamStore<f32>) -> Result<Self> {
        arch.validate()?;
        let blocks = (0..arch.hidden.len())
            .map(|b| Sequential::bind(&format!("block{b}"), arch.block_specs(b), &params))
            .collect::<Result<Vec<_>>>()?;
        let head = Sequential::bind("head", arch.head_specs(), &params)?;
        Ok(Self {
            arch,
            blocks,
            head,
            params,
        })
    }

    pub fn arch(&self) -> &ClassifierArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.params.seed()
    }

    /// Feature extractor `g`.
    pub fn features(&self, x: &Matrix<f32>) -> Result<Matrix<f32>> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.predict(&self.params, &h)?;
        }
        Ok(h)
    }

    /// Classifier head `c`.
    pub fn head(&self, h: &Matrix<f32>) -> Result<Matrix<f32>> {
        self.head.predict(&self.params, h)
    }

    pub fn logits(&self, x: &Matrix<f32>) -> Result<Matrix<f32>> {
        self.head(&self.features(x)?)
    }

    /// Output of hidden block `tap` together with the logits, from one pass.
    pub fn tap_and_logits(&self, x: &Matrix<f32>, tap: usize) -> Result<(Matrix<f32>, Matrix<f32>)> {
        if tap >= self.blocks.len() {
            return Err(Error::Config(format!(
                "feature tap {tap} out of range for {} hidden blocks",
                self.blocks.len()
            )));
        }
        let mut h = x.clone();
        let mut tapped = None;
        for (i, b) in self.blocks.iter().enumerate() {
            h = b.predict(&self.params, &h)?;
            if i == tap {
                tapped = Some(h.clone());
            }
        }
        let z = self.head(&h)?;
        Ok((tapped.expect("tap within range"), z))
    }

    pub fn probabilities(&self, x: &Matrix<f32>) -> Result<Vec<Vec<f64>>> {
        let z = self.logits(x)?;
        Ok(z.iter_rows()
            .map(|r| softmax_f64(&r.iter().map(|&v| v as f64).collect::<Vec<_>>()))
            .collect())
    }

    /// Mean cross-entropy over the batch and its gradients.
    fn loss_and_grads(&self, x: &Matrix<f32>, labels: &[usize], grads: &mut ParamStore<f32>) -> Result<f64> {
        let mut tapes = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for b in &self.blocks {
            let (out, tape) = b.forward(&self.params, &h)?;
            tapes.push(tape);
            h = out;
        }
        let (z, head_tape) = self.head.forward(&self.params, &h)?;
        let n = x.rows as f64;
        let mut g = Matrix::zeros(z.rows, z.cols);
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let p = softmax_f64(&z.row(r).iter().map(|&v| v as f64).collect::<Vec<_>>());
            loss -= p[y].max(PROB_FLOOR).ln();
            let gr = g.row_mut(r);
            for k in 0..p.len() {
                let t = if k == y { 1.0 } else { 0.0 };
                gr[k] = ((p[k] - t) / n) as f32;
            }
        }
        let mut g = self.head.backward(&self.params, &head_tape, &g, grads)?;
        for (b, tape) in self.blocks.iter().zip(tapes.iter()).rev() {
            g = b.backward(&self.params, tape, &g, grads)?;
        }
        Ok(loss / n)
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let z = self.logits(&data.features)?;
        let correct = z
            .iter_rows()
            .zip(&data.labels)
            .filter(|(r, &y)| crate::logit::argmax(r) == y)
            .count();
        Ok(correct as f64 / data.len().max(1) as f64)
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        save_checkpoint(
            stem,
            "classifier",
            serde_json::to_value(&self.arch)?,
            serde_json::Value::Null,
            &self.params,
        )?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (manifest, params) = load_checkpoint(stem)?;
        if manifest.kind != "classifier" {
            return Err(Error::Data(format!("{}: not a classifier checkpoint", stem.display())));
        }
        let arch: ClassifierArch = serde_json::from_value(manifest.arch)?;
        Self::bind(arch, params)
    }
}

/// Teacher training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch: 128,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Trains one member with SGD-momentum, weight decay and cosine-decayed lr.
pub fn train_classifier(data: &Dataset, arch: &ClassifierArch, seed: u64, cfg: &TeacherConfig) -> Result<ClassifierModel> {
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if cfg.batch == 0 || cfg.epochs == 0 {
        return Err(Error::Config("batch and epochs must be positive".into()));
    }
    let mut model = ClassifierModel::new(arch.clone(), seed)?;
    // Separate stream for data order so it never aliases the init stream.
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let per_epoch = data.len().div_ceil(cfg.batch);
    let mut opt = Optimizer::new(
        OptimizerKind::sgd_momentum(cfg.momentum),
        model.params(),
        cfg.lr,
        cfg.weight_decay,
        Some(cfg.epochs * per_epoch),
    );
    let mut grads = model.params().zeros_like();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.batch) {
            let x = data.gather(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            grads.fill_zero();
            let loss = model.loss_and_grads(&x, &y, &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "teacher seed {seed}: loss {loss} at epoch {epoch}, step {}",
                    opt.step_count()
                )));
            }
            opt.step(model.params_mut(), &grads)?;
        }
    }
    Ok(model)
}

/// M classifiers sharing one architecture.
#[derive(Debug, Clone)]
pub struct EnsembleBundle {
    pub members: Vec<ClassifierModel>,
    pub source_index: usize,
    pub train_accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BundleManifest {
    format_version: String,
    arch: ClassifierArch,
    seeds: Vec<u64>,
    source_index: usize,
    train_accuracy: Vec<f64>,
    members: Vec<String>,
}

/// Trains `seeds.len()` independent members; members train in parallel with disjoint state.
pub fn train_teachers(data: &Dataset, arch: &ClassifierArch, seeds: &[u64], cfg: &TeacherConfig) -> Result<EnsembleBundle> {
    arch.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("an ensemble needs at least one seed".into()));
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() {
        return Err(Error::Config(format!("ensemble seeds must be distinct: {seeds:?}")));
    }
    if data.dim() != arch.input {
        return Err(Error::Config(format!(
            "dataset has {} features, architecture expects {}",
            data.dim(),
            arch.input
        )));
    }
    if data.classes != arch.classes || data.distinct_labels() < arch.classes {
        return Err(Error::Config(format!(
            "dataset has {} distinct labels, architecture expects {} classes",
            data.distinct_labels(),
            arch.classes
        )));
    }
    let members = seeds
        .par_iter()
        .map(|&s| train_classifier(data, arch, s, cfg))
        .collect::<Result<Vec<_>>>()?;
    let train_accuracy = members.iter().map(|m| m.accuracy(data)).collect::<Result<Vec<_>>>()?;
    EnsembleBundle::new(members, 0, train_accuracy)
}

impl EnsembleBundle {
    pub fn new(members: Vec<ClassifierModel>, source_index: usize, train_accuracy: Vec<f64>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Config("ensemble needs at least one member".into()))?;
        if members.iter().any(|m| m.arch() != first.arch()) {
            return Err(Error::Config("ensemble members must share one architecture".into()));
        }
        if source_index >= members.len() {
            return Err(Error::Config(format!("source index {source_index} out of range")));
        }
        Ok(Self {
            members,
            source_index,
            train_accuracy,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn arch(&self) -> &ClassifierArch {
        self.members[0].arch()
    }

    pub fn source(&self) -> &ClassifierModel {
        &self.members[self.source_index]
    }

    /// Averaged member distribution over `indices` for every row of `x`.
    pub fn ensemble_probs(&self, indices: &[usize], x: &Matrix<f32>) -> Result<Vec<Vec<f64>>> {
        let mut acc: Option<Vec<Vec<f64>>> = None;
        for &i in indices {
            let m = self
                .members
                .get(i)
                .ok_or_else(|| Error::Config(format!("member {i} out of range")))?;
            let p = m.probabilities(x)?;
            match acc.as_mut() {
                None => acc = Some(p),
                Some(a) => {
                    for (ar, pr) in a.iter_mut().zip(p) {
                        for (u, v) in ar.iter_mut().zip(pr) {
                            *u += v;
                        }
                    }
                }
            }
        }
        let mut acc = acc.ok_or_else(|| Error::Config("no ensemble members selected".into()))?;
        let n = indices.len() as f64;
        acc.iter_mut().flatten().for_each(|v| *v /= n);
        Ok(acc)
    }

    /// Ensemble logit target over `indices` for every row of `x`.
    pub fn ens_logits(&self, indices: &[usize], x: &Matrix<f32>) -> Result<Vec<EnsLogit<f32>>> {
        let per_member = indices
            .iter()
            .map(|&i| self.members[i].probabilities(x))
            .collect::<Result<Vec<_>>>()?;
        Ok((0..x.rows)
            .map(|r| {
                let rows: Vec<&[f64]> = per_member.iter().map(|p| p[r].as_slice()).collect();
                let e = ens_logit::<f64, _>(&rows);
                EnsLogit {
                    logit: e.logit.iter().map(|&v| v as f32).collect(),
                    clamped: e.clamped,
                }
            })
            .collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let names: Vec<String> = (0..self.members.len()).map(|i| format!("member_{i}")).collect();
        for (m, name) in self.members.iter().zip(&names) {
            m.save(&dir.join(name))?;
        }
        let manifest = BundleManifest {
            format_version: FORMAT_VERSION.to_string(),
            arch: self.arch().clone(),
            seeds: self.members.iter().map(ClassifierModel::seed).collect(),
            source_index: self.source_index,
            train_accuracy: self.train_accuracy.clone(),
            members: names,
        };
        let path = dir.join("bundle.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("bundle.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: BundleManifest = serde_json::from_str(&text)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: FORMAT_VERSION.into(),
                found: manifest.format_version,
            });
        }
        let members = manifest
            .members
            .iter()
            .map(|n| ClassifierModel::load(&dir.join(n)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(members, manifest.source_index, manifest.train_accuracy)
    }
}

/// Source-member feature `h1` and logit `z1` for each row of `x`.
pub fn source_feature(bundle: &EnsembleBundle, x: &Matrix<f32>) -> Result<(Matrix<f32>, Matrix<f32>)> {
    let src = bundle.source();
    src.tap_and_logits(x, src.arch().feature_tap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{blobs, two_moons};

    fn tiny_cfg() -> TeacherConfig {
        TeacherConfig {
            epochs: 30,
            batch: 32,
            ..TeacherConfig::default()
        }
    }

    #[test]
    fn split_matches_fused_forward_bitwise() {
        let m = ClassifierModel::new(ClassifierArch::mlp(2, vec![16, 16, 16], 3), 5).unwrap();
        let x = Matrix::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.5]]).unwrap();
        let fused = m.logits(&x).unwrap();
        let split = m.head(&m.features(&x).unwrap()).unwrap();
        assert_eq!(fused, split);
    }

    #[test]
    fn same_seed_same_params() {
        let a = ClassifierModel::new(ClassifierArch::mlp(2, vec![8, 8], 2), 11).unwrap();
        let b = ClassifierModel::new(ClassifierArch::mlp(2, vec![8, 8], 2), 11).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn tap_shapes_and_final_tap() {
        let mut arch = ClassifierArch::mlp(2, vec![12, 7, 5], 2);
        let m = ClassifierModel::new(arch.clone(), 1).unwrap();
        let x = Matrix::from_rows(&[vec![0.1, 0.2]]).unwrap();
        let (h, _) = m.tap_and_logits(&x, 0).unwrap();
        assert_eq!(h.cols, 12);
        let (h_last, z) = m.tap_and_logits(&x, 2).unwrap();
        assert_eq!(h_last, m.features(&x).unwrap());
        assert_eq!(z, m.logits(&x).unwrap());
        assert!(matches!(m.tap_and_logits(&x, 3), Err(Error::Config(_))));
        arch.feature_tap = 3;
        assert!(matches!(arch.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn separable_blobs_reach_full_train_accuracy() {
        let data = blobs(200, 2, 0.3, 3.0, 0).unwrap();
        let arch = ClassifierArch::mlp(2, vec![16, 16, 16], 2);
        let bundle = train_teachers(&data, &arch, &[1, 2, 3], &tiny_cfg()).unwrap();
        assert!(bundle.train_accuracy.iter().all(|&a| a == 1.0), "{:?}", bundle.train_accuracy);
    }

    #[test]
    fn single_member_ensemble_is_that_member() {
        let data = two_moons(100, 0.2, 0).unwrap();
        let arch = ClassifierArch::mlp(2, vec![8, 8], 2);
        let bundle = train_teachers(&data, &arch, &[4], &tiny_cfg()).unwrap();
        let ens = bundle.ensemble_probs(&[0], &data.features).unwrap();
        let own = bundle.members[0].probabilities(&data.features).unwrap();
        assert_eq!(ens, own);
    }

    #[test]
    fn rejects_duplicate_seeds_and_missing_labels() {
        let data = two_moons(50, 0.2, 0).unwrap();
        let arch = ClassifierArch::mlp(2, vec![4], 2);
        assert!(matches!(
            train_teachers(&data, &arch, &[1, 1], &tiny_cfg()),
            Err(Error::Config(_))
        ));
        let one_class = data.subset(&(0..50).filter(|&i| data.labels[i] == 0).collect::<Vec<_>>());
        assert!(matches!(
            train_teachers(&one_class, &arch, &[1], &tiny_cfg()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bundle_round_trip() {
        let data = two_moons(64, 0.2, 0).unwrap();
        let arch = ClassifierArch::mlp(2, vec![6, 6], 2);
        let bundle = train_teachers(&data, &arch, &[1, 2], &tiny_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        bundle.save(dir.path()).unwrap();
        let back = EnsembleBundle::load(dir.path()).unwrap();
        for (a, b) in bundle.members.iter().zip(&back.members) {
            assert_eq!(a.params(), b.params());
        }
        assert_eq!(back.train_accuracy, bundle.train_accuracy);
    }
}
