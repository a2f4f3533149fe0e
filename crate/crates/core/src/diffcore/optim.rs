use super::model::{Gradients, Layer, Model};
use crate::error::{Error, Result};

/// Momentum SGD: `buf = momentum * buf + g; theta -= lr * buf`.
#[derive(Clone, Debug, Default)]
pub struct SgdMomentum {
    buffers: Option<Vec<Vec<f64>>>,
}

impl SgdMomentum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.buffers = None;
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients, lr: f64, momentum: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::invalid(format!("learning rate {lr} must be >= 0")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum {momentum} outside [0, 1)")));
        }
        if grads.layers.len() != model.layer_count() {
            return Err(Error::shape("gradient layer count differs from model"));
        }
        let bufs = self.buffers.get_or_insert_with(|| {
            grads
                .layers
                .iter()
                .map(|g| g.as_ref().map_or(0, |g| g.weight.len() + g.bias.len()))
                .map(|n| vec![0.0; n])
                .collect()
        });
        let mut steps = Vec::new();
        for (i, layer) in model.layers().iter().enumerate() {
            let (Layer::Dense(d), Some(g)) = (layer, grads.layers[i].as_ref()) else {
                if layer.as_dense().is_some() {
                    return Err(Error::shape(format!("missing gradient for dense layer {i}")));
                }
                continue;
            };
            if !g.weight.same_shape(&d.weight) || !g.bias.same_shape(&d.bias) {
                return Err(Error::shape(format!("gradient shape mismatch at layer {i}")));
            }
            if d.frozen {
                continue;
            }
            let buf = &mut bufs[i];
            let gflat = g.weight.data().iter().chain(g.bias.data());
            for (b, gv) in buf.iter_mut().zip(gflat) {
                *b = momentum * *b + gv;
            }
            let step: Vec<f64> = buf.iter().map(|b| -lr * b).collect();
            steps.push((i, step));
        }
        for (i, step) in steps {
            model.add_to_layer(i, &step)?;
        }
        Ok(())
    }
}
