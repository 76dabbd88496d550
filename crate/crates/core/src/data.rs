//! Labelled datasets, synthetic generators and the `f0..f{d-1},label` CSV schema.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.rows != labels.len() {
            return Err(Error::Data(format!(
                "{} feature rows but {} labels",
                features.rows,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols
    }

    /// Number of distinct labels actually present.
    pub fn distinct_labels(&self) -> usize {
        let mut seen = vec![false; self.classes];
        for &l in &self.labels {
            seen[l] = true;
        }
        seen.iter().filter(|&&s| s).count()
    }

    /// Rows at `idx`, in order.
    pub fn gather(&self, idx: &[usize]) -> Matrix<f32> {
        let d = self.dim();
        let mut out = Matrix::zeros(idx.len(), d);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.features.row(i));
        }
        out
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.gather(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Data(format!("{other:?}")),
        })?;
        let mut header: Vec<String> = (0..self.dim()).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for (row, &label) in self.features.iter_rows().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(label.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads the CSV schema. `classes` defaults to `max label + 1`.
    pub fn read_csv(path: &Path, classes: Option<usize>) -> Result<Self> {
        let (features, labels) = read_table(path, true)?;
        let labels = labels.expect("labels required");
        let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        Dataset::new(features, labels, classes)
    }
}

/// Feature columns of a CSV in the dataset schema; a trailing `label` column is optional and ignored.
pub fn read_features_csv(path: &Path) -> Result<Matrix<f32>> {
    Ok(read_table(path, false)?.0)
}

fn read_table(path: &Path, need_label: bool) -> Result<(Matrix<f32>, Option<Vec<usize>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{other:?}")),
    })?;
    let header = r.headers()?.clone();
    let has_label = header.iter().last() == Some("label");
    if need_label && !has_label {
        return Err(Error::Data(format!("{}: last column must be `label`", path.display())));
    }
    let d = header.len() - usize::from(has_label);
    if d == 0 {
        return Err(Error::Data(format!("{}: expected columns f0..f{{d-1}},label", path.display())));
    }
    for (i, name) in header.iter().take(d).enumerate() {
        if name != format!("f{i}") {
            return Err(Error::Data(format!("{}: column {i} is `{name}`, expected `f{i}`", path.display())));
        }
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        for v in rec.iter().take(d) {
            let x: f32 = v
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("row {}: bad feature `{v}`", line + 1)))?;
            data.push(x);
        }
        if has_label {
            let l = rec[d]
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::Data(format!("row {}: bad label `{}`", line + 1, &rec[d])))?;
            labels.push(l);
        }
    }
    let rows = data.len() / d;
    Ok((Matrix::from_vec(rows, d, data)?, has_label.then_some(labels)))
}

/// Synthetic generator parameters, all deterministic given `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum Generator {
    TwoMoons {
        n: usize,
        noise: f64,
        seed: u64,
        /// Extra standard-normal feature columns carrying no label information.
        #[serde(default)]
        nuisance: usize,
    },
    Blobs { n: usize, classes: usize, std: f64, radius: f64, seed: u64 },
    Rings { n: usize, classes: usize, noise: f64, seed: u64 },
}

impl Generator {
    pub fn generate(&self) -> Result<Dataset> {
        match *self {
            Generator::TwoMoons {
                n,
                noise,
                seed,
                nuisance,
            } => two_moons_nuisance(n, noise, nuisance, seed),
            Generator::Blobs {
                n,
                classes,
                std,
                radius,
                seed,
            } => blobs(n, classes, std, radius, seed),
            Generator::Rings {
                n,
                classes,
                noise,
                seed,
            } => rings(n, classes, noise, seed),
        }
    }
}

fn normal(std: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, std).map_err(|e| Error::Config(format!("noise {std}: {e}")))
}

fn finish(points: Vec<([f64; 2], usize)>, classes: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    finish_with(points, classes, 0, rng)
}

fn finish_with(points: Vec<([f64; 2], usize)>, classes: usize, nuisance: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let mut rows: Vec<(Vec<f64>, usize)> = points
        .into_iter()
        .map(|(p, l)| {
            let mut v = p.to_vec();
            v.extend((0..nuisance).map(|_| Distribution::<f64>::sample(&StandardNormal, rng)));
            (v, l)
        })
        .collect();
    rows.shuffle(rng);
    let n = rows.len();
    let data = rows.iter().flat_map(|(p, _)| p.iter().map(|&v| v as f32)).collect();
    let labels = rows.iter().map(|&(_, l)| l).collect();
    Dataset::new(Matrix::from_vec(n, 2 + nuisance, data)?, labels, classes)
}

/// Two interleaving half circles with isotropic Gaussian noise.
pub fn two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    two_moons_nuisance(n, noise, 0, seed)
}

/// [`two_moons`] followed by `nuisance` independent N(0, 1) feature columns.
pub fn two_moons_nuisance(n: usize, noise: f64, nuisance: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Config("two-moons needs at least 2 points".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = normal(noise)?;
    let outer = n / 2;
    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let (x, y, label) = if i < outer {
            (theta.cos(), theta.sin(), 0)
        } else {
            (1.0 - theta.cos(), 0.5 - theta.sin(), 1)
        };
        points.push(([x + jitter.sample(&mut rng), y + jitter.sample(&mut rng)], label));
    }
    finish_with(points, 2, nuisance, &mut rng)
}

/// `classes` isotropic Gaussian blobs with centers evenly spaced on a circle.
pub fn blobs(n: usize, classes: usize, std: f64, radius: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || n < classes {
        return Err(Error::Config(format!("blobs need >= 2 classes and n >= classes (got {classes}, {n})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = normal(std)?;
    let points = (0..n)
        .map(|i| {
            let k = i % classes;
            let a = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
            let c = [radius * a.cos(), radius * a.sin()];
            ([c[0] + jitter.sample(&mut rng), c[1] + jitter.sample(&mut rng)], k)
        })
        .collect();
    finish(points, classes, &mut rng)
}

/// Concentric rings of radius `k + 1` for class `k`, with radial noise.
pub fn rings(n: usize, classes: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || n < classes {
        return Err(Error::Config(format!("rings need >= 2 classes and n >= classes (got {classes}, {n})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = normal(noise)?;
    let points = (0..n)
        .map(|i| {
            let k = i % classes;
            let a = rng.random_range(0.0..2.0 * std::f64::consts::PI);
            let r = (k + 1) as f64 + jitter.sample(&mut rng);
            ([r * a.cos(), r * a.sin()], k)
        })
        .collect();
    finish(points, classes, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_moons_shape_and_labels() {
        let d = two_moons(2000, 0.2, 0).unwrap();
        assert_eq!(d.len(), 2000);
        assert_eq!(d.dim(), 2);
        assert_eq!(d.labels.iter().filter(|&&l| l == 1).count(), 1000);
    }

    #[test]
    fn nuisance_columns_appended() {
        let d = two_moons_nuisance(500, 0.2, 4, 1).unwrap();
        assert_eq!(d.dim(), 6);
        let extra: Vec<f32> = d.features.iter_rows().map(|r| r[5]).collect();
        let mean = extra.iter().sum::<f32>() / 500.0;
        assert!(mean.abs() < 0.2);
        let plain = two_moons(500, 0.2, 1).unwrap();
        assert_eq!(plain.labels.len(), d.labels.len());
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(two_moons(100, 0.2, 3).unwrap(), two_moons(100, 0.2, 3).unwrap());
        assert_ne!(two_moons(100, 0.2, 3).unwrap(), two_moons(100, 0.2, 4).unwrap());
    }

    #[test]
    fn blob_labels_within_classes() {
        let d = blobs(300, 3, 0.5, 3.0, 1).unwrap();
        assert!(d.labels.iter().all(|&l| l < 3));
        assert_eq!(d.distinct_labels(), 3);
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rings.csv");
        let d = rings(257, 3, 0.1, 9).unwrap();
        d.write_csv(&path).unwrap();
        let back = Dataset::read_csv(&path, Some(3)).unwrap();
        assert_eq!(d.labels, back.labels);
        let bits = |m: &Matrix<f32>| m.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&d.features), bits(&back.features));
    }

    #[test]
    fn rejects_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "x,y,label\n1,2,0\n").unwrap();
        assert!(matches!(Dataset::read_csv(&path, None), Err(Error::Data(_))));
    }
}
