use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Fully connected block; `weight` is `out × in`, `bias` has length `out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
    #[serde(default)]
    pub frozen: bool,
}

impl Dense {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.rows()] {
            return Err(Error::shape(format!(
                "dense weight {:?} incompatible with bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Dense {
            weight,
            bias,
            frozen: false,
        })
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weight: Tensor::zeros(vec![output, input]),
            bias: Tensor::zeros(vec![output]),
            frozen: false,
        }
    }

    /// Uniform(-1/sqrt(in), 1/sqrt(in)) for weights and biases.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let mut d = Dense::zeros(input, output);
        for w in d.weight.data_mut() {
            *w = rng.random_range(-bound..bound);
        }
        for b in d.bias.data_mut() {
            *b = rng.random_range(-bound..bound);
        }
        d
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// `x W^T + b` for an `n × in` input.
    fn apply(&self, x: &Tensor) -> Tensor {
        let (n, din, dout) = (x.rows(), self.input_dim(), self.output_dim());
        let w = self.weight.data();
        let b = self.bias.data();
        let mut out = vec![0.0; n * dout];
        for i in 0..n {
            let xi = x.row(i);
            let oi = &mut out[i * dout..(i + 1) * dout];
            for (o, slot) in oi.iter_mut().enumerate() {
                let wo = &w[o * din..(o + 1) * din];
                *slot = b[o] + xi.iter().zip(wo).map(|(a, c)| a * c).sum::<f64>();
            }
        }
        Tensor::new(vec![n, dout], out).expect("dense output shape")
    }

    fn params_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.weight.data());
        out.extend_from_slice(self.bias.data());
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Dense(Dense),
    Relu,
}

impl Layer {
    pub fn as_dense(&self) -> Option<&Dense> {
        match self {
            Layer::Dense(d) => Some(d),
            Layer::Relu => None,
        }
    }

    pub fn as_dense_mut(&mut self) -> Option<&mut Dense> {
        match self {
            Layer::Dense(d) => Some(d),
            Layer::Relu => None,
        }
    }
}

/// Architecture description: a linear classifier when `hidden` is empty,
/// otherwise an MLP with ReLU between dense blocks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub n_classes: usize,
}

impl Architecture {
    pub fn linear(input_dim: usize, n_classes: usize) -> Self {
        Architecture {
            input_dim,
            hidden: Vec::new(),
            n_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.len() > 3 {
            return Err(Error::invalid("at most 3 hidden layers are supported"));
        }
        if self.input_dim == 0 || self.n_classes == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        Ok(())
    }

    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Model> {
        self.validate()?;
        let mut layers = Vec::new();
        let mut width = self.input_dim;
        for &h in &self.hidden {
            layers.push(Layer::Dense(Dense::init(width, h, rng)));
            layers.push(Layer::Relu);
            width = h;
        }
        layers.push(Layer::Dense(Dense::init(width, self.n_classes, rng)));
        Model::new(layers)
    }
}

/// Training target for a loss evaluation.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    /// Hard labels, softmax cross-entropy.
    Labels(&'a [usize]),
    /// Probability rows, softmax cross-entropy against a distribution.
    Soft(&'a Tensor),
    /// Real-valued targets, mean squared error over all output entries.
    Values(&'a Tensor),
}

impl Target<'_> {
    fn rows(&self) -> usize {
        match self {
            Target::Labels(l) => l.len(),
            Target::Soft(t) | Target::Values(t) => t.rows(),
        }
    }
}

/// Gradient of one dense block.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrad {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Per-layer gradients mirroring a [`Model`]; `None` for activation layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<DenseGrad>>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| {
                    l.as_dense().map(|d| DenseGrad {
                        weight: Tensor::zeros(d.weight.shape().to_vec()),
                        bias: Tensor::zeros(d.bias.shape().to_vec()),
                    })
                })
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in self.layers.iter().flatten() {
            out.extend_from_slice(g.weight.data());
            out.extend_from_slice(g.bias.data());
        }
        out
    }

    /// Weight-then-bias gradient of layer `l`.
    pub fn layer_flat(&self, l: usize) -> Option<Vec<f64>> {
        self.layers.get(l)?.as_ref().map(|g| {
            let mut v = g.weight.data().to_vec();
            v.extend_from_slice(g.bias.data());
            v
        })
    }

    pub fn is_zero(&self) -> bool {
        self.flatten().iter().all(|&v| v == 0.0)
    }
}

/// Loss, parameter gradients, optionally the input gradient and per-sample losses.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: Gradients,
    pub input_grad: Option<Tensor>,
    pub per_sample: Vec<f64>,
}

/// Ordered stack of dense and activation layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    layers: Vec<Layer>,
}

impl Model {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let mut width: Option<usize> = None;
        for (i, layer) in layers.iter().enumerate() {
            if let Layer::Dense(d) = layer {
                if d.weight.shape().len() != 2 || d.bias.shape() != [d.output_dim()] {
                    return Err(Error::shape(format!("layer {i} has malformed parameters")));
                }
                if let Some(w) = width {
                    if w != d.input_dim() {
                        return Err(Error::shape(format!(
                            "layer {i} expects {} inputs but previous layer produces {w}",
                            d.input_dim()
                        )));
                    }
                }
                width = Some(d.output_dim());
            }
        }
        if width.is_none() {
            return Err(Error::invalid("model needs at least one dense layer"));
        }
        Ok(Model { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn dense(&self, l: usize) -> Result<&Dense> {
        self.layers
            .get(l)
            .ok_or(Error::LayerIndex {
                index: l,
                len: self.layers.len(),
            })?
            .as_dense()
            .ok_or(Error::NotDense(l))
    }

    fn dense_mut(&mut self, l: usize) -> Result<&mut Dense> {
        let len = self.layers.len();
        self.layers
            .get_mut(l)
            .ok_or(Error::LayerIndex { index: l, len })?
            .as_dense_mut()
            .ok_or(Error::NotDense(l))
    }

    /// Indices of dense layers; these are the units SAL is measured on.
    pub fn dense_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.as_dense().map(|_| i))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers.iter().find_map(Layer::as_dense).map_or(0, Dense::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(Layer::as_dense)
            .map_or(0, Dense::output_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(Layer::as_dense)
            .map(Dense::param_count)
            .sum()
    }

    pub fn set_frozen(&mut self, l: usize, frozen: bool) -> Result<()> {
        self.dense_mut(l)?.frozen = frozen;
        Ok(())
    }

    pub fn freeze_all(&mut self, frozen: bool) {
        for d in self.layers.iter_mut().filter_map(Layer::as_dense_mut) {
            d.frozen = frozen;
        }
    }

    /// Freezes every dense layer except `l`.
    pub fn freeze_all_except(&mut self, l: usize) -> Result<()> {
        self.dense(l)?;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if let Some(d) = layer.as_dense_mut() {
                d.frozen = i != l;
            }
        }
        Ok(())
    }

    /// Layer-order concatenation of weights then bias of every dense block.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for d in self.layers.iter().filter_map(Layer::as_dense) {
            d.params_flat(&mut out);
        }
        out
    }

    /// Inverse of [`Model::flatten`], using `self` as the shape template.
    pub fn with_flat_params(&self, params: &[f64]) -> Result<Model> {
        if params.len() != self.param_count() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut out = self.clone();
        let mut offset = 0;
        for d in out.layers.iter_mut().filter_map(Layer::as_dense_mut) {
            let nw = d.weight.len();
            d.weight.data_mut().copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = d.bias.len();
            d.bias.data_mut().copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(out)
    }

    /// Weight-then-bias parameters of dense layer `l`.
    pub fn layer_params(&self, l: usize) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        self.dense(l)?.params_flat(&mut out);
        Ok(out)
    }

    /// Returns a copy with `v` added to layer `l`'s weight-then-bias parameters.
    pub fn perturb_layer(&self, l: usize, v: &[f64]) -> Result<Model> {
        let mut out = self.clone();
        out.add_to_layer(l, v)?;
        Ok(out)
    }

    pub(crate) fn add_to_layer(&mut self, l: usize, v: &[f64]) -> Result<()> {
        let d = self.dense_mut(l)?;
        if v.len() != d.param_count() {
            return Err(Error::shape(format!(
                "layer {l} has {} parameters, perturbation has {}",
                d.param_count(),
                v.len()
            )));
        }
        let nw = d.weight.len();
        for (p, dv) in d.weight.data_mut().iter_mut().zip(&v[..nw]) {
            *p += dv;
        }
        for (p, dv) in d.bias.data_mut().iter_mut().zip(&v[nw..]) {
            *p += dv;
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "input shape {:?} does not match model input dim {}",
                x.shape(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Returns the input to every layer followed by the final output.
    fn forward_cached(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = acts.last().expect("non-empty");
            let out = match layer {
                Layer::Dense(d) => d.apply(input),
                Layer::Relu => {
                    let mut t = input.clone();
                    for v in t.data_mut() {
                        *v = v.max(0.0);
                    }
                    t
                }
            };
            if !out.is_finite() {
                return Err(Error::NonFinite(format!("activation of layer {i}")));
            }
            acts.push(out);
        }
        Ok(acts)
    }

    /// Raw network outputs (logits) for an `n × d` input.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(x)?.pop().expect("output"))
    }

    pub fn predict_labels(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.predict(x)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict_labels(x)?;
        let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Mean loss for `target` without gradients.
    pub fn loss(&self, x: &Tensor, target: Target<'_>) -> Result<f64> {
        let out = self.predict(x)?;
        Ok(output_loss(&out, target, false)?.0)
    }

    /// Loss and exact reverse-mode gradients. Frozen layers get zero gradients.
    pub fn loss_and_grad(&self, x: &Tensor, target: Target<'_>, want_input: bool) -> Result<LossGrad> {
        let acts = self.forward_cached(x)?;
        let (loss, dout, per_sample) = output_loss(acts.last().expect("output"), target, true)?;
        let mut upstream = dout.expect("gradient requested");
        let mut layers: Vec<Option<DenseGrad>> = vec![None; self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &acts[i];
            match layer {
                Layer::Relu => {
                    for (g, a) in upstream.data_mut().iter_mut().zip(input.data()) {
                        if *a <= 0.0 {
                            *g = 0.0;
                        }
                    }
                }
                Layer::Dense(d) => {
                    let (n, din, dout) = (input.rows(), d.input_dim(), d.output_dim());
                    let mut gw = vec![0.0; dout * din];
                    let mut gb = vec![0.0; dout];
                    if !d.frozen {
                        for s in 0..n {
                            let xs = input.row(s);
                            let us = upstream.row(s);
                            for o in 0..dout {
                                let u = us[o];
                                if u == 0.0 {
                                    continue;
                                }
                                gb[o] += u;
                                for (gwk, xk) in gw[o * din..(o + 1) * din].iter_mut().zip(xs) {
                                    *gwk += u * xk;
                                }
                            }
                        }
                    }
                    layers[i] = Some(DenseGrad {
                        weight: Tensor::new(vec![dout, din], gw)?,
                        bias: Tensor::new(vec![dout], gb)?,
                    });
                    let needs_downstream = want_input || i > 0;
                    if needs_downstream {
                        let w = d.weight.data();
                        let mut dx = vec![0.0; n * din];
                        for s in 0..n {
                            let us = upstream.row(s);
                            let dxs = &mut dx[s * din..(s + 1) * din];
                            for (o, &u) in us.iter().enumerate() {
                                if u == 0.0 {
                                    continue;
                                }
                                for (dk, wk) in dxs.iter_mut().zip(&w[o * din..(o + 1) * din]) {
                                    *dk += u * wk;
                                }
                            }
                        }
                        upstream = Tensor::new(vec![n, din], dx)?;
                    }
                }
            }
        }
        Ok(LossGrad {
            loss,
            grads: Gradients { layers },
            input_grad: want_input.then_some(upstream),
            per_sample,
        })
    }

    /// Per-sample cross-entropy losses.
    pub fn per_sample_losses(&self, x: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
        let out = self.predict(x)?;
        Ok(output_loss(&out, Target::Labels(labels), false)?.2)
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn log_softmax_row(z: &[f64]) -> (Vec<f64>, f64) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    (z.iter().map(|v| v - lse).collect(), lse)
}

/// Mean loss, optional d(loss)/d(output), per-sample losses.
fn output_loss(out: &Tensor, target: Target<'_>, want_grad: bool) -> Result<(f64, Option<Tensor>, Vec<f64>)> {
    let n = out.rows();
    let c = out.cols();
    if target.rows() != n {
        return Err(Error::shape(format!("{} targets for {n} samples", target.rows())));
    }
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let mut per_sample = Vec::with_capacity(n);
    let mut grad = want_grad.then(|| Tensor::zeros(vec![n, c]));
    match target {
        Target::Labels(labels) => {
            for (i, &y) in labels.iter().enumerate() {
                if y >= c {
                    return Err(Error::invalid(format!("label {y} outside [0, {c})")));
                }
                let (logp, _) = log_softmax_row(out.row(i));
                per_sample.push(-logp[y]);
                if let Some(g) = grad.as_mut() {
                    let gi = g.row_mut(i);
                    for k in 0..c {
                        gi[k] = (logp[k].exp() - if k == y { 1.0 } else { 0.0 }) / n as f64;
                    }
                }
            }
        }
        Target::Soft(probs) => {
            if probs.cols() != c {
                return Err(Error::shape("soft target width differs from output width"));
            }
            for i in 0..n {
                let (logp, _) = log_softmax_row(out.row(i));
                let p = probs.row(i);
                per_sample.push(-p.iter().zip(&logp).map(|(a, b)| a * b).sum::<f64>());
                if let Some(g) = grad.as_mut() {
                    let mass: f64 = p.iter().sum();
                    let gi = g.row_mut(i);
                    for k in 0..c {
                        gi[k] = (mass * logp[k].exp() - p[k]) / n as f64;
                    }
                }
            }
        }
        Target::Values(t) => {
            if t.cols() != c {
                return Err(Error::shape("regression target width differs from output width"));
            }
            let scale = 1.0 / (n * c) as f64;
            for i in 0..n {
                let (o, y) = (out.row(i), t.row(i));
                per_sample.push(o.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / c as f64);
                if let Some(g) = grad.as_mut() {
                    let gi = g.row_mut(i);
                    for k in 0..c {
                        gi[k] = 2.0 * (o[k] - y[k]) * scale;
                    }
                }
            }
        }
    }
    let loss = per_sample.iter().sum::<f64>() / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok((loss, grad, per_sample))
}
