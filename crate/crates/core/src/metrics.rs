//! Accuracy, NLL, Brier score, binned ECE and the deep-ensemble-equivalent score.

use rust_decimal::prelude::{FromPrimitive, ToPrimitive};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logit::{argmax, PROB_FLOOR};
use crate::nn::Matrix;
use crate::teacher::EnsembleBundle;

pub const ECE_BINS: usize = 15;
const SIMPLEX_TOL: f64 = 1e-6;

fn check(probs: &[Vec<f64>], labels: &[usize]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::Data("no predictions to evaluate".into()));
    }
    if probs.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} prediction rows but {} labels",
            probs.len(),
            labels.len()
        )));
    }
    for (i, (p, &y)) in probs.iter().zip(labels).enumerate() {
        if y >= p.len() {
            return Err(Error::Data(format!("row {i}: label {y} out of range for {} classes", p.len())));
        }
        let sum: f64 = p.iter().sum();
        if p.iter().any(|v| !(0.0..=1.0 + SIMPLEX_TOL).contains(v)) || (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Data(format!("row {i} is not a probability vector (sum {sum})")));
        }
    }
    Ok(())
}

pub fn accuracy(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check(probs, labels)?;
    let hits = probs.iter().zip(labels).filter(|(p, &y)| argmax(p) == y).count();
    Ok(hits as f64 / probs.len() as f64)
}

/// Mean of `-ln max(p_y, PROB_FLOOR)`.
pub fn nll(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check(probs, labels)?;
    let total: f64 = probs.iter().zip(labels).map(|(p, &y)| -p[y].max(PROB_FLOOR).ln()).sum();
    Ok(total / probs.len() as f64)
}

/// Mean squared distance to the one-hot label.
pub fn brier(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check(probs, labels)?;
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            p.iter()
                .enumerate()
                .map(|(k, &v)| {
                    let d = v - if k == y { 1.0 } else { 0.0 };
                    d * d
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / probs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinRecord {
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

/// Bin of a confidence in `[b/n, (b+1)/n)`, with the top bin closed at 1.
fn bin_of(conf: f64, n: usize) -> usize {
    let nf = n as f64;
    let mut b = ((conf * nf).floor().max(0.0) as usize).min(n - 1);
    while b > 0 && conf < b as f64 / nf {
        b -= 1;
    }
    while b + 1 < n && conf >= (b + 1) as f64 / nf {
        b += 1;
    }
    b
}

/// Expected calibration error over `n_bins` equal-width max-confidence bins.
pub fn ece(probs: &[Vec<f64>], labels: &[usize], n_bins: usize) -> Result<(f64, Vec<BinRecord>)> {
    if n_bins == 0 {
        return Err(Error::Config("ECE needs at least one bin".into()));
    }
    check(probs, labels)?;
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut hits = vec![0usize; n_bins];
    for (p, &y) in probs.iter().zip(labels) {
        let k = argmax(p);
        let b = bin_of(p[k], n_bins);
        count[b] += 1;
        conf_sum[b] += p[k];
        hits[b] += usize::from(k == y);
    }
    let n = probs.len() as f64;
    let mut total = 0.0;
    let bins = (0..n_bins)
        .map(|b| {
            if count[b] == 0 {
                return BinRecord {
                    count: 0,
                    mean_confidence: 0.0,
                    accuracy: 0.0,
                };
            }
            let c = count[b] as f64;
            let rec = BinRecord {
                count: count[b],
                mean_confidence: conf_sum[b] / c,
                accuracy: hits[b] as f64 / c,
            };
            total += c * (rec.accuracy - rec.mean_confidence).abs();
            rec
        })
        .collect();
    Ok((total / n, bins))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeeKind {
    Interpolated,
    /// Target NLL worse than a single model.
    BelowOneExtrapolated,
    /// Target NLL better than the largest measured ensemble.
    AboveMaxExtrapolated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dee {
    pub value: f64,
    pub kind: DeeKind,
}

/// `s + (y - y_s) / (y_{s+1} - y_s)`, evaluated on the shortest decimal form of
/// the inputs when they fit, so round decimal curves give round answers.
fn lerp_index(s: usize, y: f64, ys: f64, ys1: f64) -> f64 {
    let dec = |v: f64| Decimal::from_f64(v);
    if let (Some(a), Some(b), Some(c)) = (dec(y), dec(ys), dec(ys1)) {
        let denom = c - b;
        if !denom.is_zero() {
            if let Some(v) = (Decimal::from(s) + (a - b) / denom).to_f64() {
                return v;
            }
        }
    }
    s as f64 + (y - ys) / (ys1 - ys)
}

/// Deep ensemble equivalent of a model with NLL `target`, given the curve
/// `(k, NLL of the k-member ensemble)` for `k = 1..=k_max`.
pub fn dee(target: f64, curve: &[(usize, f64)]) -> Result<Dee> {
    if curve.len() < 2 {
        return Err(Error::Data("DEE needs an ensemble curve with at least k = 1, 2".into()));
    }
    if curve.iter().enumerate().any(|(i, &(k, y))| k != i + 1 || !y.is_finite()) {
        return Err(Error::Data("DEE curve must list k = 1, 2, ... in order with finite NLL".into()));
    }
    if let Some(w) = curve.windows(2).find(|w| w[1].1 >= w[0].1) {
        return Err(Error::Data(format!(
            "non-monotone ensemble curve: NLL(k={}) = {} >= NLL(k={}) = {}",
            w[1].0, w[1].1, w[0].0, w[0].1
        )));
    }
    if !target.is_finite() {
        return Err(Error::NonFinite(format!("DEE target NLL {target}")));
    }
    let y: Vec<f64> = curve.iter().map(|&(_, v)| v).collect();
    let kmax = y.len();
    if target > y[0] {
        return Ok(Dee {
            value: lerp_index(1, target, y[0], y[1]),
            kind: DeeKind::BelowOneExtrapolated,
        });
    }
    // Largest s with NLL_s >= target.
    let s = y.iter().rposition(|&v| v >= target).expect("target <= NLL_1") + 1;
    if s == kmax {
        if target == y[kmax - 1] {
            return Ok(Dee {
                value: kmax as f64,
                kind: DeeKind::Interpolated,
            });
        }
        return Ok(Dee {
            value: lerp_index(kmax - 1, target, y[kmax - 2], y[kmax - 1]),
            kind: DeeKind::AboveMaxExtrapolated,
        });
    }
    Ok(Dee {
        value: lerp_index(s, target, y[s - 1], y[s]),
        kind: DeeKind::Interpolated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_examples: usize,
    pub acc: f64,
    pub nll: f64,
    pub brier: f64,
    pub ece: f64,
    pub dee: Option<Dee>,
    pub bins: Vec<BinRecord>,
}

pub const CSV_HEADER: &str = "name,n_examples,acc,nll,brier,ece,dee,dee_kind";

impl MetricsReport {
    /// One CSV line (no header) in [`CSV_HEADER`] column order.
    pub fn csv_row(&self, name: &str) -> Result<String> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        let (dee, kind) = match self.dee {
            Some(d) => (d.value.to_string(), serde_json::to_value(d.kind)?.as_str().unwrap_or("").to_string()),
            None => (String::new(), String::new()),
        };
        w.write_record([
            name.to_string(),
            self.n_examples.to_string(),
            self.acc.to_string(),
            self.nll.to_string(),
            self.brier.to_string(),
            self.ece.to_string(),
            dee,
            kind,
        ])?;
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8").trim_end().to_string())
    }
}

/// All metrics in one pass; DEE only when a curve is supplied.
pub fn evaluate(probs: &[Vec<f64>], labels: &[usize], de_curve: Option<&[(usize, f64)]>) -> Result<MetricsReport> {
    let nll_v = nll(probs, labels)?;
    let (ece_v, bins) = ece(probs, labels, ECE_BINS)?;
    Ok(MetricsReport {
        n_examples: probs.len(),
        acc: accuracy(probs, labels)?,
        nll: nll_v,
        brier: brier(probs, labels)?,
        ece: ece_v,
        dee: de_curve.map(|c| dee(nll_v, c)).transpose()?,
        bins,
    })
}

/// NLL of the ensembles of the first `k` members, `k = 1..=k_max`.
pub fn deep_ensemble_curve(bundle: &EnsembleBundle, x: &Matrix<f32>, labels: &[usize], k_max: usize) -> Result<Vec<(usize, f64)>> {
    if k_max == 0 || k_max > bundle.len() {
        return Err(Error::Config(format!("k_max {k_max} out of range for a bundle of {}", bundle.len())));
    }
    let per: Vec<Vec<Vec<f64>>> = bundle.members[..k_max]
        .iter()
        .map(|m| m.probabilities(x))
        .collect::<Result<_>>()?;
    let mut acc = vec![vec![0.0; per[0][0].len()]; x.rows];
    let mut curve = Vec::with_capacity(k_max);
    for (k, p) in per.iter().enumerate() {
        for (a, r) in acc.iter_mut().zip(p) {
            a.iter_mut().zip(r).for_each(|(u, v)| *u += v);
        }
        let avg: Vec<Vec<f64>> = acc
            .iter()
            .map(|r| r.iter().map(|v| v / (k + 1) as f64).collect())
            .collect();
        curve.push((k + 1, nll(&avg, labels)?));
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nll_examples() {
        assert!(nll(&[vec![1.0, 0.0]], &[0]).unwrap().abs() < 1e-12);
        let u = nll(&[vec![0.25; 4]], &[2]).unwrap();
        assert!((u - 4f64.ln()).abs() < 1e-12);
        let m = nll(&[vec![0.7, 0.3], vec![0.9, 0.1]], &[0, 1]).unwrap();
        assert!((m - 1.3297).abs() < 1e-4);
        assert!(matches!(nll(&[], &[]), Err(Error::Data(_))));
    }

    #[test]
    fn brier_examples() {
        assert_eq!(brier(&[vec![0.0, 1.0]], &[1]).unwrap(), 0.0);
        assert!((brier(&[vec![0.5, 0.5]], &[0]).unwrap() - 0.5).abs() < 1e-15);
        assert!((brier(&[vec![0.8, 0.2]], &[1]).unwrap() - 1.28).abs() < 1e-12);
    }

    #[test]
    fn ece_examples() {
        let (e, bins) = ece(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1], 15).unwrap();
        assert_eq!(e, 0.0);
        assert_eq!(bins[14].count, 2);
        let probs = vec![vec![0.9, 0.1]; 4];
        let (e, bins) = ece(&probs, &[0, 1, 0, 1], 15).unwrap();
        assert!((e - 0.4).abs() < 1e-12);
        assert_eq!(bins.iter().filter(|b| b.count > 0).count(), 1);
    }

    #[test]
    fn bin_edges() {
        assert_eq!(bin_of(0.0, 15), 0);
        assert_eq!(bin_of(1.0, 15), 14);
        assert_eq!(bin_of(1.0 / 15.0, 15), 1);
        assert_eq!(bin_of(0.5, 2), 1);
        assert_eq!(bin_of(0.4999999, 2), 0);
    }

    #[test]
    fn dee_examples() {
        let curve = [(1, 1.0), (2, 0.8), (3, 0.7)];
        assert_eq!(dee(0.8, &curve).unwrap().value, 2.0);
        assert_eq!(dee(0.9, &curve).unwrap().value, 1.5);
        let sub = dee(1.1, &curve).unwrap();
        assert_eq!(sub.value, 0.5);
        assert_eq!(sub.kind, DeeKind::BelowOneExtrapolated);
        let top = dee(0.6, &curve).unwrap();
        assert_eq!(top.kind, DeeKind::AboveMaxExtrapolated);
        assert!((top.value - 4.0).abs() < 1e-12);
        assert_eq!(dee(0.7, &curve).unwrap().value, 3.0);
        assert!(matches!(dee(0.9, &[(1, 1.0), (2, 1.0)]), Err(Error::Data(_))));
    }

    #[test]
    fn report_csv_row() {
        let r = evaluate(&[vec![0.5, 0.5]], &[0], Some(&[(1, 1.0), (2, 0.5)])).unwrap();
        assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), 1);
        let row = r.csv_row("model").unwrap();
        assert_eq!(row.split(',').count(), CSV_HEADER.split(',').count());
        assert!(row.starts_with("model,1,"));
        assert!(row.ends_with("interpolated"));
    }

    #[test]
    fn rejects_non_simplex() {
        assert!(matches!(nll(&[vec![0.5, 0.6]], &[0]), Err(Error::Data(_))));
        assert!(matches!(nll(&[vec![0.5, 0.5]], &[2]), Err(Error::Data(_))));
    }
}
