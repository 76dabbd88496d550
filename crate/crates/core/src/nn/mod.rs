//! Minimal differentiable kernel: dense layers, LayerNorm, activations,
//! reverse-mode gradients over layer chains, optimizers and EMA.

mod checkpoint;
mod layers;
mod optim;
mod tensor;

pub use checkpoint::{
    load_checkpoint, read_manifest, save_checkpoint, CheckpointManifest, TensorEntry, FORMAT_VERSION,
};
pub use layers::{normalize, Activation, Init, LayerSpec, Sequential, Tape, LAYER_NORM_EPS};
pub use optim::{lr_cosine, EmaShadow, Optimizer, OptimizerKind};
pub use tensor::{Matrix, ParamId, ParamStore, Tensor};

use crate::error::Result;
use crate::real::Real;

/// Single-vector forward pass.
pub fn forward_eval<T: Real>(net: &Sequential, store: &ParamStore<T>, input: &[T]) -> Result<(Vec<T>, Tape<T>)> {
    let (out, tape) = net.forward(store, &Matrix::row_vector(input))?;
    Ok((out.data, tape))
}

/// Gradients of a scalar loss w.r.t. every parameter, given `d loss / d output`.
pub fn grad_eval<T: Real>(
    net: &Sequential,
    store: &ParamStore<T>,
    tape: &Tape<T>,
    loss_grad: &[T],
) -> Result<ParamStore<T>> {
    let mut grads = store.zeros_like();
    net.backward(store, tape, &Matrix::row_vector(loss_grad), &mut grads)?;
    Ok(grads)
}
