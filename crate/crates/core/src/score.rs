//! Conditional score network `eps(h1, Z_t, t)`.
//!
//! Three embeddings (source feature, noisy logit, time) feed a residual MLP trunk:
//!
//! ```text
//! a    = Dense(h1)
//! b    = ReLU6(Dense([LayerNorm(Z_t) | Z_t]))
//! temb = Dense(Swish(Dense(sinusoid(t))))
//! x    = Swish(Dense([a | b | t]))
//! x    = x + block_0(x) + temb
//! x    = x + block_i(x)          for i >= 1
//! eps  = Dense(x) + Dense(Z_t)
//! ```
//!
//! The last term is a linear skip so the part of the target that is affine in
//! `Z_t` does not have to pass through the saturating ReLU6 embedding.
//!
//! with `block(x) = Dense(Swish(Dense(LayerNorm(x))))`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Init, LayerSpec, Matrix, ParamStore, Sequential, Tape};
use crate::real::Real;

/// Largest sinusoid period.
pub const MAX_PERIOD: f64 = 10_000.0;
/// Continuous times are mapped to step indices `t * TIME_STEPS` before embedding.
pub const TIME_STEPS: f64 = 1000.0;

/// Sinusoidal embedding of `t` as interleaved `(sin, cos)` pairs at frequencies
/// `MAX_PERIOD^(-2i/dim)`.
pub fn sinusoidal_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("sinusoidal embedding dimension must be even, got {dim}")));
    }
    let step = t * TIME_STEPS;
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = MAX_PERIOD.powf(-2.0 * i as f64 / dim as f64);
        out.push((step * freq).sin());
        out.push((step * freq).cos());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreArch {
    /// Width of the source feature `h1`.
    pub feature_dim: usize,
    pub classes: usize,
    /// Trunk width `e`.
    pub embed: usize,
    pub blocks: usize,
    pub time_sinusoid: usize,
    pub time_hidden: usize,
    /// Zero-initialize the output layer (the untrained net then predicts 0).
    #[serde(default)]
    pub zero_head: bool,
}

impl ScoreArch {
    /// Defaults for a given feature width and class count. The time MLP widths
    /// follow `d/4 -> d/2 -> e` with `d` the class count rounded up to a multiple
    /// of four (and at least one sin/cos pair).
    pub fn new(feature_dim: usize, classes: usize) -> Self {
        let d = classes.div_ceil(4) * 4;
        let sinusoid = ((d / 4).div_ceil(2) * 2).max(2);
        Self {
            feature_dim,
            classes,
            embed: 8,
            blocks: 2,
            time_sinusoid: sinusoid,
            time_hidden: (d / 2).max(2),
            zero_head: false,
        }
    }

    pub fn with_embed(mut self, embed: usize) -> Self {
        self.embed = embed;
        self
    }

    pub fn with_blocks(mut self, blocks: usize) -> Self {
        self.blocks = blocks;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.classes < 2 || self.embed == 0 {
            return Err(Error::Config(format!("invalid score network architecture {self:?}")));
        }
        if self.time_sinusoid == 0 || self.time_sinusoid % 2 != 0 {
            return Err(Error::Config(format!(
                "time sinusoid width must be even, got {}",
                self.time_sinusoid
            )));
        }
        Ok(())
    }

    fn parts(&self) -> Vec<(String, Vec<LayerSpec>)> {
        let (e, k) = (self.embed, self.classes);
        let mut parts = vec![
            ("h_embed".to_string(), vec![LayerSpec::dense(self.feature_dim, e, Init::Lecun)]),
            ("z_norm".to_string(), vec![LayerSpec::layer_norm(k)]),
            (
                "z_embed".to_string(),
                vec![LayerSpec::dense(2 * k, e, Init::He), LayerSpec::act(Activation::Relu6)],
            ),
            (
                "time".to_string(),
                vec![
                    LayerSpec::dense(self.time_sinusoid, self.time_hidden, Init::He),
                    LayerSpec::act(Activation::Swish),
                    LayerSpec::dense(self.time_hidden, e, Init::Lecun),
                ],
            ),
            (
                "trunk_in".to_string(),
                vec![LayerSpec::dense(2 * e + 1, e, Init::He), LayerSpec::act(Activation::Swish)],
            ),
        ];
        for b in 0..self.blocks {
            parts.push((
                format!("block{b}"),
                vec![
                    LayerSpec::layer_norm(e),
                    LayerSpec::dense(e, e, Init::He),
                    LayerSpec::act(Activation::Swish),
                    LayerSpec::dense(e, e, Init::Lecun),
                ],
            ));
        }
        let head_init = if self.zero_head { Init::Zero } else { Init::Lecun };
        parts.push(("head".to_string(), vec![LayerSpec::dense(e, k, head_init)]));
        parts.push(("z_skip".to_string(), vec![LayerSpec::dense(k, k, Init::Zero)]));
        parts
    }
}

#[derive(Debug, Clone)]
pub struct ScoreNetwork<T: Real = f32> {
    arch: ScoreArch,
    h_embed: Sequential,
    z_norm: Sequential,
    z_embed: Sequential,
    time: Sequential,
    trunk_in: Sequential,
    blocks: Vec<Sequential>,
    head: Sequential,
    z_skip: Sequential,
    params: ParamStore<T>,
}

/// Everything the backward pass of [`ScoreNetwork`] needs.
#[derive(Debug, Clone)]
pub struct ScoreTape<T> {
    h: Tape<T>,
    zn: Tape<T>,
    ze: Tape<T>,
    time: Tape<T>,
    trunk_in: Tape<T>,
    blocks: Vec<Tape<T>>,
    head: Tape<T>,
    z_skip: Tape<T>,
}

/// Batched score-network input.
#[derive(Debug, Clone)]
pub struct ScoreInput<'a, T> {
    pub h1: &'a Matrix<T>,
    pub zt: &'a Matrix<T>,
    /// One time per row.
    pub t: &'a [f64],
}

impl<T: Real> ScoreNetwork<T> {
    pub fn new(arch: ScoreArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new(seed);
        let mut seqs = Vec::new();
        for (name, specs) in arch.parts() {
            seqs.push(Sequential::build(&name, specs, &mut params, &mut rng)?);
        }
        Self::assemble(arch, seqs, params)
    }

    /// Binds an architecture to existing parameters (e.g. from a checkpoint).
    pub fn from_params(arch: ScoreArch, params: ParamStore<T>) -> Result<Self> {
        arch.validate()?;
        let seqs = arch
            .parts()
            .into_iter()
            .map(|(name, specs)| Sequential::bind(&name, specs, &params))
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(arch, seqs, params)
    }

    fn assemble(arch: ScoreArch, seqs: Vec<Sequential>, params: ParamStore<T>) -> Result<Self> {
        let mut it = seqs.into_iter();
        let mut next = || it.next().expect("one sequential per part");
        let (h_embed, z_norm, z_embed, time, trunk_in) = (next(), next(), next(), next(), next());
        let blocks = (0..arch.blocks).map(|_| next()).collect();
        let head = next();
        let z_skip = next();
        Ok(Self {
            arch,
            h_embed,
            z_norm,
            z_embed,
            time,
            trunk_in,
            blocks,
            head,
            z_skip,
            params,
        })
    }

    pub fn arch(&self) -> &ScoreArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    /// Same architecture with parameters replaced by `params` (must be aligned).
    pub fn with_params(&self, params: ParamStore<T>) -> Result<Self> {
        self.params.check_aligned(&params)?;
        Self::from_params(self.arch.clone(), params)
    }

    /// The sub-networks in parameter registration order, with their names.
    pub fn layers(&self) -> Vec<&Sequential> {
        let mut v = vec![&self.h_embed, &self.z_norm, &self.z_embed, &self.time, &self.trunk_in];
        v.extend(self.blocks.iter());
        v.push(&self.head);
        v.push(&self.z_skip);
        v
    }

    pub fn cast<U: Real>(&self) -> Result<ScoreNetwork<U>> {
        ScoreNetwork::from_params(self.arch.clone(), self.params.cast())
    }

    fn check_input(&self, input: &ScoreInput<'_, T>) -> Result<()> {
        let rows = input.h1.rows;
        if input.h1.cols != self.arch.feature_dim {
            return Err(Error::Shape {
                layer: "score.h1".into(),
                expected: self.arch.feature_dim,
                got: input.h1.cols,
            });
        }
        if input.zt.cols != self.arch.classes {
            return Err(Error::Shape {
                layer: "score.z_t".into(),
                expected: self.arch.classes,
                got: input.zt.cols,
            });
        }
        if input.zt.rows != rows || input.t.len() != rows {
            return Err(Error::Shape {
                layer: "score.batch".into(),
                expected: rows,
                got: input.zt.rows.min(input.t.len()),
            });
        }
        if !input.h1.all_finite() || !input.zt.all_finite() || input.t.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("score network input contains NaN or infinity".into()));
        }
        Ok(())
    }

    fn time_features(&self, t: &[f64]) -> Result<Matrix<T>> {
        let dim = self.arch.time_sinusoid;
        let mut m = Matrix::zeros(t.len(), dim);
        for (r, &tv) in t.iter().enumerate() {
            for (dst, v) in m.row_mut(r).iter_mut().zip(sinusoidal_embed(tv, dim)?) {
                *dst = T::of(v);
            }
        }
        Ok(m)
    }

    fn trunk_input(&self, a: &Matrix<T>, b: &Matrix<T>, t: &[f64]) -> Result<Matrix<T>> {
        let tcol = Matrix::from_vec(t.len(), 1, t.iter().map(|&v| T::of(v)).collect())?;
        a.hcat(b)?.hcat(&tcol)
    }

    pub fn forward(&self, input: &ScoreInput<'_, T>) -> Result<(Matrix<T>, ScoreTape<T>)> {
        self.check_input(input)?;
        let p = &self.params;
        let (a, h) = self.h_embed.forward(p, input.h1)?;
        let (zn_out, zn) = self.z_norm.forward(p, input.zt)?;
        let (b, ze) = self.z_embed.forward(p, &zn_out.hcat(input.zt)?)?;
        let (temb, time) = self.time.forward(p, &self.time_features(input.t)?)?;
        let (mut x, trunk_in) = self.trunk_in.forward(p, &self.trunk_input(&a, &b, input.t)?)?;
        let mut block_tapes = Vec::with_capacity(self.blocks.len());
        if self.blocks.is_empty() {
            x.add_assign(&temb);
        }
        for (i, blk) in self.blocks.iter().enumerate() {
            let (r, tape) = blk.forward(p, &x)?;
            x.add_assign(&r);
            if i == 0 {
                x.add_assign(&temb);
            }
            block_tapes.push(tape);
        }
        let (mut out, head) = self.head.forward(p, &x)?;
        let (skip, z_skip) = self.z_skip.forward(p, input.zt)?;
        out.add_assign(&skip);
        Ok((
            out,
            ScoreTape {
                h,
                zn,
                ze,
                time,
                trunk_in,
                blocks: block_tapes,
                head,
                z_skip,
            },
        ))
    }

    /// Forward pass without recording.
    pub fn predict(&self, input: &ScoreInput<'_, T>) -> Result<Matrix<T>> {
        self.check_input(input)?;
        let p = &self.params;
        let a = self.h_embed.predict(p, input.h1)?;
        let zn = self.z_norm.predict(p, input.zt)?;
        let b = self.z_embed.predict(p, &zn.hcat(input.zt)?)?;
        let temb = self.time.predict(p, &self.time_features(input.t)?)?;
        let mut x = self.trunk_in.predict(p, &self.trunk_input(&a, &b, input.t)?)?;
        if self.blocks.is_empty() {
            x.add_assign(&temb);
        }
        for (i, blk) in self.blocks.iter().enumerate() {
            let r = blk.predict(p, &x)?;
            x.add_assign(&r);
            if i == 0 {
                x.add_assign(&temb);
            }
        }
        let mut out = self.head.predict(p, &x)?;
        out.add_assign(&self.z_skip.predict(p, input.zt)?);
        Ok(out)
    }

    /// Accumulates parameter gradients for `d loss / d eps = grad_out` into `grads`.
    pub fn backward(&self, tape: &ScoreTape<T>, grad_out: &Matrix<T>, grads: &mut ParamStore<T>) -> Result<()> {
        let p = &self.params;
        let e = self.arch.embed;
        self.z_skip.backward(p, &tape.z_skip, grad_out, grads)?;
        let mut gx = self.head.backward(p, &tape.head, grad_out, grads)?;
        let mut g_temb = None;
        for (i, (blk, bt)) in self.blocks.iter().zip(&tape.blocks).enumerate().rev() {
            if i == 0 {
                g_temb = Some(gx.clone());
            }
            let through = blk.backward(p, bt, &gx, grads)?;
            gx.add_assign(&through);
        }
        let g_temb = g_temb.unwrap_or_else(|| gx.clone());
        self.time.backward(p, &tape.time, &g_temb, grads)?;
        let g_in = self.trunk_in.backward(p, &tape.trunk_in, &gx, grads)?;
        let (g_ab, _g_t) = g_in.hsplit(2 * e);
        let (g_a, g_b) = g_ab.hsplit(e);
        self.h_embed.backward(p, &tape.h, &g_a, grads)?;
        let g_z = self.z_embed.backward(p, &tape.ze, &g_b, grads)?;
        let (g_zn, _g_raw) = g_z.hsplit(self.arch.classes);
        self.z_norm.backward(p, &tape.zn, &g_zn, grads)?;
        Ok(())
    }
}

/// Single-example convenience wrapper around [`ScoreNetwork::predict`].
pub fn score_forward<T: Real>(net: &ScoreNetwork<T>, h1: &[T], zt: &[T], t: f64) -> Result<Vec<T>> {
    let h = Matrix::row_vector(h1);
    let z = Matrix::row_vector(zt);
    let tt = [t];
    Ok(net
        .predict(&ScoreInput {
            h1: &h,
            zt: &z,
            t: &tt,
        })?
        .data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_at_zero() {
        let v = sinusoidal_embed(0.0, 6).unwrap();
        for pair in v.chunks(2) {
            assert_eq!(pair[0], 0.0);
            assert_eq!(pair[1], 1.0);
        }
    }

    #[test]
    fn sinusoid_pairs_on_unit_circle() {
        for t in [0.0, 0.13, 0.5, 0.77, 1.0] {
            let v = sinusoidal_embed(t, 16).unwrap();
            for pair in v.chunks(2) {
                assert!((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs() < 1e-6);
                assert!(pair.iter().all(|x| x.abs() <= 1.0));
            }
        }
    }

    #[test]
    fn sinusoid_fixture() {
        let want = [
            -0.46777180532247614,
            -0.883849273431478,
            -0.26237485370392877,
            0.9649660284921133,
            -0.9589242746631385,
            0.28366218546322625,
            0.479425538604203,
            0.8775825618903728,
        ];
        let v = sinusoidal_embed(0.5, 8).unwrap();
        for (a, b) in v.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn odd_sinusoid_rejected() {
        assert!(matches!(sinusoidal_embed(0.5, 7), Err(Error::Config(_))));
    }

    #[test]
    fn zero_head_predicts_zero() {
        let mut arch = ScoreArch::new(5, 3);
        arch.zero_head = true;
        let net = ScoreNetwork::<f32>::new(arch, 3).unwrap();
        let eps = score_forward(&net, &[0.3, 1.0, -2.0, 0.0, 4.0], &[1.0, -1.0, 0.5], 0.4).unwrap();
        assert_eq!(eps, vec![0.0; 3]);
    }

    #[test]
    fn output_has_class_dimension_and_is_deterministic() {
        let net = ScoreNetwork::<f32>::new(ScoreArch::new(4, 2), 9).unwrap();
        let a = score_forward(&net, &[0.1, 0.2, 0.3, 0.4], &[2.0, -2.0], 0.6).unwrap();
        let b = score_forward(&net, &[0.1, 0.2, 0.3, 0.4], &[2.0, -2.0], 0.6).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a, b);
    }

    #[test]
    fn predict_matches_forward() {
        let net = ScoreNetwork::<f32>::new(ScoreArch::new(3, 4).with_blocks(3), 1).unwrap();
        let h = Matrix::from_rows(&[vec![0.1, 0.2, 0.3], vec![-1.0, 0.0, 2.0]]).unwrap();
        let z = Matrix::from_rows(&[vec![1.0, 0.0, -1.0, 0.5], vec![0.2, 0.2, 0.1, -3.0]]).unwrap();
        let t = [0.2, 0.8];
        let input = ScoreInput { h1: &h, zt: &z, t: &t };
        assert_eq!(net.forward(&input).unwrap().0, net.predict(&input).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = ScoreNetwork::<f32>::new(ScoreArch::new(2, 2), 0).unwrap();
        assert!(matches!(
            score_forward(&net, &[f32::NAN, 0.0], &[0.0, 0.0], 0.5),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            score_forward(&net, &[0.0, 0.0, 0.0], &[0.0, 0.0], 0.5),
            Err(Error::Shape { .. })
        ));
    }
}
