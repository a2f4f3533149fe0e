//! Dense networks with exact reverse-mode gradients, per-layer parameter
//! addressing and freezing.

mod checkpoint;
mod model;
mod optim;
mod tensor;


pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use model::{Architecture, Dense, DenseGrad, Gradients, Layer, LossGrad, Model, Target};
pub use optim::SgdMomentum;
pub use tensor::Tensor;

use crate::error::Result;

/// Mean softmax cross-entropy and the logits.
pub fn forward(model: &Model, inputs: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let logits = model.predict(inputs)?;
    let loss = model.loss(inputs, Target::Labels(labels))?;
    Ok((loss, logits))
}

/// Exact gradients of the mean cross-entropy; frozen layers receive zeros.
pub fn backward(model: &Model, inputs: &Tensor, labels: &[usize]) -> Result<Gradients> {
    Ok(model.loss_and_grad(inputs, Target::Labels(labels), false)?.grads)
}
