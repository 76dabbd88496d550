use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Matrix, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Relu6,
    /// `x * sigmoid(x)`
    Swish,
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Relu6 => x.max(T::zero()).min(T::of(6.0)),
            Activation::Swish => x / (T::one() + (-x).exp()),
        }
    }

    #[inline]
    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Relu6 => {
                if x > T::zero() && x < T::of(6.0) {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Swish => {
                let s = T::one() / (T::one() + (-x).exp());
                s + x * s * (T::one() - s)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`, for layers feeding a ReLU-family activation.
    He,
    /// Uniform in `±sqrt(3 / fan_in)`, for linear output heads.
    Lecun,
    Zero,
}

/// Serializable description of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
        init: Init,
    },
    LayerNorm {
        dim: usize,
        affine: bool,
    },
    Activation {
        kind: Activation,
    },
}

impl LayerSpec {
    pub fn dense(input: usize, output: usize, init: Init) -> Self {
        LayerSpec::Dense {
            input,
            output,
            init,
        }
    }

    pub fn act(kind: Activation) -> Self {
        LayerSpec::Activation { kind }
    }

    pub fn layer_norm(dim: usize) -> Self {
        LayerSpec::LayerNorm { dim, affine: true }
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Dense {
        input: usize,
        output: usize,
        weight: ParamId,
        bias: ParamId,
    },
    LayerNorm {
        dim: usize,
        affine: Option<(ParamId, ParamId)>,
    },
    Activation(Activation),
}

/// Activations recorded by a forward pass, sufficient for exact gradients.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    inputs: Vec<Matrix<T>>,
    stamp: (u64, u64),
    net: String,
}

impl<T> Tape<T> {
    pub fn net(&self) -> &str {
        &self.net
    }
}

/// A feed-forward chain of layers whose parameters live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Sequential {
    name: String,
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
    input_dim: usize,
    output_dim: usize,
}

fn check_chain(name: &str, specs: &[LayerSpec]) -> Result<(usize, usize)> {
    let mut width: Option<usize> = None;
    let mut first = None;
    for (i, spec) in specs.iter().enumerate() {
        let (inp, out) = match *spec {
            LayerSpec::Dense { input, output, .. } => (Some(input), output),
            LayerSpec::LayerNorm { dim, .. } => (Some(dim), dim),
            LayerSpec::Activation { .. } => (None, width.unwrap_or(0)),
        };
        if let (Some(w), Some(inp)) = (width, inp) {
            if w != inp {
                return Err(Error::Shape {
                    layer: format!("{name}.{i}"),
                    expected: w,
                    got: inp,
                });
            }
        }
        if first.is_none() {
            first = inp;
        }
        width = Some(out);
    }
    match (first, width) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(Error::Config(format!(
            "network `{name}` must start with a dense or layer-norm layer"
        ))),
    }
}

impl Sequential {
    /// Registers freshly initialized parameters for `specs` in `store`.
    pub fn build<T: Real, R: Rng + ?Sized>(
        name: &str,
        specs: Vec<LayerSpec>,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let (input_dim, output_dim) = check_chain(name, &specs)?;
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let layer = match *spec {
                LayerSpec::Dense {
                    input,
                    output,
                    init,
                } => {
                    let bound = match init {
                        Init::He => (6.0 / input as f64).sqrt(),
                        Init::Lecun => (3.0 / input as f64).sqrt(),
                        Init::Zero => 0.0,
                    };
                    let w: Vec<T> = (0..input * output)
                        .map(|_| {
                            if bound == 0.0 {
                                T::zero()
                            } else {
                                T::of(rng.random_range(-bound..bound))
                            }
                        })
                        .collect();
                    let weight =
                        store.insert(format!("{name}.{i}.weight"), Tensor::from_vec(&[output, input], w)?)?;
                    let bias = store.insert(format!("{name}.{i}.bias"), Tensor::zeros(&[output]))?;
                    Layer::Dense {
                        input,
                        output,
                        weight,
                        bias,
                    }
                }
                LayerSpec::LayerNorm { dim, affine } => {
                    let affine = if affine {
                        let gamma = Tensor::from_vec(&[dim], vec![T::one(); dim])?;
                        let g = store.insert(format!("{name}.{i}.gamma"), gamma)?;
                        let b = store.insert(format!("{name}.{i}.beta"), Tensor::zeros(&[dim]))?;
                        Some((g, b))
                    } else {
                        None
                    };
                    Layer::LayerNorm { dim, affine }
                }
                LayerSpec::Activation { kind } => Layer::Activation(kind),
            };
            layers.push(layer);
        }
        Ok(Self {
            name: name.to_string(),
            specs,
            layers,
            input_dim,
            output_dim,
        })
    }

    /// Resolves `specs` against parameters already present in `store` (e.g. a loaded checkpoint).
    pub fn bind<T: Real>(name: &str, specs: Vec<LayerSpec>, store: &ParamStore<T>) -> Result<Self> {
        let (input_dim, output_dim) = check_chain(name, &specs)?;
        let lookup = |suffix: String, shape: &[usize]| -> Result<ParamId> {
            let id = store
                .id_of(&suffix)
                .ok_or_else(|| Error::Config(format!("missing parameter `{suffix}`")))?;
            if store.get(id).shape() != shape {
                return Err(Error::Shape {
                    layer: suffix,
                    expected: shape.iter().product(),
                    got: store.get(id).len(),
                });
            }
            Ok(id)
        };
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            layers.push(match *spec {
                LayerSpec::Dense { input, output, .. } => Layer::Dense {
                    input,
                    output,
                    weight: lookup(format!("{name}.{i}.weight"), &[output, input])?,
                    bias: lookup(format!("{name}.{i}.bias"), &[output])?,
                },
                LayerSpec::LayerNorm { dim, affine } => Layer::LayerNorm {
                    dim,
                    affine: if affine {
                        Some((
                            lookup(format!("{name}.{i}.gamma"), &[dim])?,
                            lookup(format!("{name}.{i}.beta"), &[dim])?,
                        ))
                    } else {
                        None
                    },
                },
                LayerSpec::Activation { kind } => Layer::Activation(kind),
            });
        }
        Ok(Self {
            name: name.to_string(),
            specs,
            layers,
            input_dim,
            output_dim,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Parameter ids of the dense layer at `index`, if it is one.
    pub fn dense_params(&self, index: usize) -> Option<(ParamId, ParamId)> {
        match self.layers.get(index)? {
            Layer::Dense { weight, bias, .. } => Some((*weight, *bias)),
            _ => None,
        }
    }

    /// Width of the activation after layer `index` (inclusive).
    pub fn width_after(&self, index: usize) -> Option<usize> {
        let mut w = self.input_dim;
        for layer in self.layers.iter().take(index + 1) {
            if let Layer::Dense { output, .. } = layer {
                w = *output;
            }
        }
        (index < self.layers.len()).then_some(w)
    }

    fn check_input<T>(&self, x: &Matrix<T>) -> Result<()> {
        if x.cols != self.input_dim {
            return Err(Error::Shape {
                layer: format!("{}.0", self.name),
                expected: self.input_dim,
                got: x.cols,
            });
        }
        Ok(())
    }

    /// Forward pass recording a tape for [`Sequential::backward`].
    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Matrix<T>) -> Result<(Matrix<T>, Tape<T>)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let next = apply_layer(layer, store, &cur);
            inputs.push(cur);
            cur = next;
        }
        Ok((
            cur,
            Tape {
                inputs,
                stamp: store.stamp(),
                net: self.name.clone(),
            },
        ))
    }

    /// Forward pass without recording; identical arithmetic to [`Sequential::forward`].
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = apply_layer(layer, store, &cur);
        }
        Ok(cur)
    }

    /// Runs layers `0..=last` only.
    pub fn predict_prefix<T: Real>(&self, store: &ParamStore<T>, x: &Matrix<T>, last: usize) -> Result<Matrix<T>> {
        self.check_input(x)?;
        if last >= self.layers.len() {
            return Err(Error::Config(format!(
                "layer index {last} out of range for `{}` ({} layers)",
                self.name,
                self.layers.len()
            )));
        }
        let mut cur = x.clone();
        for layer in &self.layers[..=last] {
            cur = apply_layer(layer, store, &cur);
        }
        Ok(cur)
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient w.r.t. the input.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &Tape<T>,
        grad_out: &Matrix<T>,
        grads: &mut ParamStore<T>,
    ) -> Result<Matrix<T>> {
        if tape.stamp != store.stamp() || tape.net != self.name || tape.inputs.len() != self.layers.len() {
            return Err(Error::InvalidTape(format!(
                "tape for `{}` does not match the current state of `{}`",
                tape.net, self.name
            )));
        }
        if grad_out.cols != self.output_dim {
            return Err(Error::Shape {
                layer: format!("{}.{}", self.name, self.layers.len().saturating_sub(1)),
                expected: self.output_dim,
                got: grad_out.cols,
            });
        }
        let mut g = grad_out.clone();
        for (layer, input) in self.layers.iter().zip(tape.inputs.iter()).rev() {
            g = backprop_layer(layer, store, input, &g, grads);
        }
        Ok(g)
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x.iter()) {
        *yi += alpha * xi;
    }
}

fn apply_layer<T: Real>(layer: &Layer, store: &ParamStore<T>, x: &Matrix<T>) -> Matrix<T> {
    match *layer {
        Layer::Dense {
            input,
            output,
            weight,
            bias,
        } => {
            let w = store.get(weight).data();
            let b = store.get(bias).data();
            let mut y = Matrix::zeros(x.rows, output);
            for r in 0..x.rows {
                let xr = x.row(r);
                let yr = y.row_mut(r);
                for j in 0..output {
                    yr[j] = b[j] + dot(&w[j * input..(j + 1) * input], xr);
                }
            }
            y
        }
        Layer::LayerNorm { dim, affine } => {
            let mut y = Matrix::zeros(x.rows, dim);
            for r in 0..x.rows {
                let (xhat, _) = normalize(x.row(r));
                let yr = y.row_mut(r);
                match affine {
                    Some((g, b)) => {
                        let (g, b) = (store.get(g).data(), store.get(b).data());
                        for k in 0..dim {
                            yr[k] = g[k] * xhat[k] + b[k];
                        }
                    }
                    None => yr.copy_from_slice(&xhat),
                }
            }
            y
        }
        Layer::Activation(kind) => Matrix {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().map(|&v| kind.apply(v)).collect(),
        },
    }
}

/// Zero-mean, unit-variance version of `x` and its inverse standard deviation.
pub fn normalize<T: Real>(x: &[T]) -> (Vec<T>, T) {
    let n = T::of(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv = T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt();
    (x.iter().map(|&v| (v - mean) * inv).collect(), inv)
}

fn backprop_layer<T: Real>(
    layer: &Layer,
    store: &ParamStore<T>,
    x: &Matrix<T>,
    g: &Matrix<T>,
    grads: &mut ParamStore<T>,
) -> Matrix<T> {
    match *layer {
        Layer::Dense {
            input,
            output,
            weight,
            bias,
        } => {
            let w = store.get(weight).data();
            let mut gx = Matrix::zeros(x.rows, input);
            {
                let gw = grads.get_mut(weight).data_mut();
                for r in 0..x.rows {
                    let xr = x.row(r);
                    let gr = g.row(r);
                    for j in 0..output {
                        if gr[j] != T::zero() {
                            axpy(gr[j], xr, &mut gw[j * input..(j + 1) * input]);
                        }
                    }
                }
            }
            {
                let gb = grads.get_mut(bias).data_mut();
                for r in 0..x.rows {
                    for (b, &v) in gb.iter_mut().zip(g.row(r)) {
                        *b += v;
                    }
                }
            }
            for r in 0..x.rows {
                let gr = g.row(r);
                let gxr = gx.row_mut(r);
                for j in 0..output {
                    if gr[j] != T::zero() {
                        axpy(gr[j], &w[j * input..(j + 1) * input], gxr);
                    }
                }
            }
            gx
        }
        Layer::LayerNorm { dim, affine } => {
            let n = T::of(dim as f64);
            let mut gx = Matrix::zeros(x.rows, dim);
            for r in 0..x.rows {
                let (xhat, inv) = normalize(x.row(r));
                let gr = g.row(r);
                let dxhat: Vec<T> = match affine {
                    Some((gid, bid)) => {
                        let gamma = store.get(gid).data().to_vec();
                        {
                            let gg = grads.get_mut(gid).data_mut();
                            for k in 0..dim {
                                gg[k] += gr[k] * xhat[k];
                            }
                        }
                        let gb = grads.get_mut(bid).data_mut();
                        for k in 0..dim {
                            gb[k] += gr[k];
                        }
                        (0..dim).map(|k| gr[k] * gamma[k]).collect()
                    }
                    None => gr.to_vec(),
                };
                let mean_d = dxhat.iter().copied().sum::<T>() / n;
                let mean_dx = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / n;
                let gxr = gx.row_mut(r);
                for k in 0..dim {
                    gxr[k] = inv * (dxhat[k] - mean_d - xhat[k] * mean_dx);
                }
            }
            gx
        }
        Layer::Activation(kind) => Matrix {
            rows: x.rows,
            cols: x.cols,
            data: x
                .data
                .iter()
                .zip(g.data.iter())
                .map(|(&v, &gv)| gv * kind.derivative(v))
                .collect(),
        },
    }
}
