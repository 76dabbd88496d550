//! Softmax and the ensemble-logit target.

use crate::real::Real;

/// Probability floor applied before every logarithm (NLL and ensemble logits).
pub const PROB_FLOOR: f64 = 1e-12;

/// Numerically stable softmax, evaluated in `f64`.
pub fn softmax<T: Real>(z: &[T]) -> Vec<T> {
    softmax_f64(&z.iter().map(|v| v.f64()).collect::<Vec<_>>())
        .into_iter()
        .map(T::of)
        .collect()
}

pub fn softmax_f64(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Result of [`ens_logit`].
#[derive(Debug, Clone, PartialEq)]
pub struct EnsLogit<T> {
    /// Zero-mean logit whose softmax is the averaged member distribution.
    pub logit: Vec<T>,
    /// How many averaged probabilities fell below [`PROB_FLOOR`] and were clamped.
    pub clamped: usize,
}

/// `log p_bar - mean_k(log p_bar_k)` where `p_bar` is the mean of the member distributions.
pub fn ens_logit<T: Real, P: AsRef<[T]>>(probabilities: &[P]) -> EnsLogit<T> {
    assert!(!probabilities.is_empty(), "ens_logit needs at least one member");
    let k = probabilities[0].as_ref().len();
    let m = probabilities.len() as f64;
    let mut mean = vec![0.0f64; k];
    for p in probabilities {
        let p = p.as_ref();
        assert_eq!(p.len(), k, "members disagree on class count");
        for (acc, &v) in mean.iter_mut().zip(p) {
            *acc += v.f64();
        }
    }
    let mut clamped = 0;
    let logs: Vec<f64> = mean
        .iter()
        .map(|&s| {
            let p = s / m;
            if p < PROB_FLOOR {
                clamped += 1;
            }
            p.max(PROB_FLOOR).ln()
        })
        .collect();
    let centre = logs.iter().sum::<f64>() / k as f64;
    EnsLogit {
        logit: logs.iter().map(|&l| T::of(l - centre)).collect(),
        clamped,
    }
}

/// Ensemble logit computed directly from member logits.
pub fn ens_logit_from_logits<T: Real, Z: AsRef<[T]>>(logits: &[Z]) -> EnsLogit<T> {
    let probs: Vec<Vec<f64>> = logits
        .iter()
        .map(|z| softmax_f64(&z.as_ref().iter().map(|v| v.f64()).collect::<Vec<_>>()))
        .collect();
    let out = ens_logit::<f64, _>(&probs);
    EnsLogit {
        logit: out.logit.into_iter().map(T::of).collect(),
        clamped: out.clamped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_member_is_centred_input() {
        let z = [1.5f64, -0.5, 2.0];
        let out = ens_logit::<f64, _>(&[softmax(&z)]);
        let mean = z.iter().sum::<f64>() / 3.0;
        for (a, b) in out.logit.iter().zip(z.iter()) {
            assert!((a - (b - mean)).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_uniform_members_give_zero() {
        let u = vec![0.25f32; 4];
        let out = ens_logit::<f32, _>(&[u.clone(), u]);
        assert!(out.logit.iter().all(|&v| v.abs() < 1e-7));
    }

    #[test]
    fn two_member_mean() {
        let out = ens_logit::<f64, _>(&[vec![0.7, 0.2, 0.1], vec![0.1, 0.2, 0.7]]);
        let p = softmax(&out.logit);
        for (a, b) in p.iter().zip([0.4, 0.2, 0.4]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(out.logit.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn zero_probability_is_clamped_and_counted() {
        let out = ens_logit::<f64, _>(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(out.clamped, 1);
        assert!(out.logit.iter().all(|v| v.is_finite()));
    }
}
