//! Loss/accuracy oracles over a flat weight vector.
//!
//! Perturbation studies only move the concatenated weight vector (biases
//! stay fixed). An [`Evaluator`] exposes the objective as a function of that
//! vector and never mutates the model it was built from, so evaluations can
//! run on any number of threads.

use std::collections::HashMap;

use crate::data::{argmax, Dataset, Task};
use crate::error::{Error, Result};
use crate::model::{LossKind, ModelState, Network, Which};
use crate::tensor::Tensor;

/// Examples per forward pass when sweeping a dataset.
pub const EVAL_CHUNK: usize = 256;

pub trait Evaluator: Sync {
    /// The point being studied.
    fn center(&self) -> &[f64];
    fn loss(&self, w: &[f64]) -> Result<f64>;
    fn loss_grad(&self, w: &[f64]) -> Result<(f64, Vec<f64>)>;
    fn accuracy(&self, _w: &[f64]) -> Result<f64> {
        Err(Error::AccuracyUndefined)
    }
}

/// A network, a dataset and a loss, seen as a function of the weights.
#[derive(Debug, Clone)]
pub struct NetEvaluator<'a> {
    model: &'a ModelState,
    data: &'a Dataset,
    net: Network,
    center: Vec<f64>,
    requantize: bool,
}

impl<'a> NetEvaluator<'a> {
    /// Evaluate at the weights the model computes with (dequantized for
    /// quantized models). Perturbed points are used as given.
    pub fn new(model: &'a ModelState, data: &'a Dataset) -> Result<Self> {
        let center = model.effective_weights(Which::Current);
        Self::with_center(model, data, center, false)
    }

    /// Evaluate around the latent weights; every queried point is pushed
    /// through the model's quantizers before the forward pass.
    pub fn requantizing(model: &'a ModelState, data: &'a Dataset) -> Result<Self> {
        let center = model.flat_weights(Which::Current);
        Self::with_center(model, data, center, true)
    }

    pub fn with_center(model: &'a ModelState, data: &'a Dataset, center: Vec<f64>, requantize: bool) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        if center.len() != model.weight_count() {
            return Err(Error::InvalidArgument("center has wrong length".into()));
        }
        let loss = loss_for(data);
        if data.outputs() != model.arch().classes {
            return Err(Error::InvalidShape(format!(
                "model has {} outputs, dataset targets have {}",
                model.arch().classes,
                data.outputs()
            )));
        }
        Ok(Self {
            model,
            data,
            net: model.network(Some(loss)),
            center,
            requantize,
        })
    }

    pub fn model(&self) -> &ModelState {
        self.model
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }

    pub fn loss_kind(&self) -> LossKind {
        self.net.loss_kind.expect("loss graph")
    }

    fn weights_for(&self, w: &[f64]) -> Vec<f64> {
        if self.requantize {
            self.model.requantize(w, Which::Current)
        } else {
            w.to_vec()
        }
    }

    /// Loss and (for classification) accuracy in one sweep.
    pub fn evaluate(&self, w: &[f64]) -> Result<(f64, Option<f64>)> {
        let w = self.weights_for(w);
        let mut bind = self.model.bindings_with_weights(&w);
        let labels = self.data.labels();
        let n = self.data.len();
        let mut total = 0.0;
        let mut correct = 0usize;
        let mut graph = self.net.graph.clone();
        for start in (0..n).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(n);
            bind.insert("x".into(), self.data.x.slice_rows(start, end)?);
            bind.insert("y".into(), self.data.y.slice_rows(start, end)?);
            let loss = graph.forward(&bind)?.data()[0];
            total += loss * (end - start) as f64;
            if let Some(labels) = &labels {
                let logits = graph.value(self.net.logits).expect("forwarded");
                let k = logits.shape()[1];
                for (r, row) in logits.data().chunks(k).enumerate() {
                    if argmax(row) == labels[start + r] {
                        correct += 1;
                    }
                }
            }
        }
        let acc = labels.map(|_| correct as f64 / n as f64);
        Ok((total / n as f64, acc))
    }

    pub fn loss_grad_full(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        let wq = self.weights_for(w);
        let mut bind = self.model.bindings_with_weights(&wq);
        let n = self.data.len();
        let mut total = 0.0;
        let mut grad = vec![0.0; w.len()];
        let mut graph = self.net.graph.clone();
        for start in (0..n).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(n);
            let frac = (end - start) as f64 / n as f64;
            bind.insert("x".into(), self.data.x.slice_rows(start, end)?);
            bind.insert("y".into(), self.data.y.slice_rows(start, end)?);
            total += graph.forward(&bind)?.data()[0] * frac;
            let grads = graph.backward(&Tensor::scalar(frac))?;
            let mut off = 0;
            for l in self.model.layers() {
                let g = grads[&l.weight].data();
                for (a, b) in grad[off..off + g.len()].iter_mut().zip(g) {
                    *a += *b;
                }
                off += g.len();
            }
        }
        Ok((total, grad))
    }
}

impl Evaluator for NetEvaluator<'_> {
    fn center(&self) -> &[f64] {
        &self.center
    }

    fn loss(&self, w: &[f64]) -> Result<f64> {
        Ok(self.evaluate(w)?.0)
    }

    fn loss_grad(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.loss_grad_full(w)
    }

    fn accuracy(&self, w: &[f64]) -> Result<f64> {
        if self.data.task == Task::Regression {
            return Err(Error::AccuracyUndefined);
        }
        Ok(self.evaluate(w)?.1.expect("classification"))
    }
}

pub fn loss_for(data: &Dataset) -> LossKind {
    match data.task {
        Task::Regression => LossKind::Mse,
        Task::Classification { .. } => LossKind::CrossEntropy,
    }
}

/// `L(w) = sum_i (w_i - m_i)^2`, studied at `center`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticBowl {
    pub center: Vec<f64>,
    pub minimum: Vec<f64>,
}

impl QuadraticBowl {
    pub fn at_minimum(dim: usize) -> Self {
        Self {
            center: vec![0.0; dim],
            minimum: vec![0.0; dim],
        }
    }
}

impl Evaluator for QuadraticBowl {
    fn center(&self) -> &[f64] {
        &self.center
    }

    fn loss(&self, w: &[f64]) -> Result<f64> {
        Ok(w.iter().zip(&self.minimum).fold(0.0, |s, (a, b)| s + (a - b) * (a - b)))
    }

    fn loss_grad(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        let g = w.iter().zip(&self.minimum).map(|(a, b)| 2.0 * (a - b)).collect();
        Ok((self.loss(w)?, g))
    }
}

/// Per-example Jacobian of the network output with respect to the weights:
/// row `n * K + k` holds `d yhat_{n,k} / d w`. Also returns the predictions.
pub fn output_jacobian(model: &ModelState, data: &Dataset, w: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let net = model.network(None);
    let mut graph = net.graph.clone();
    let mut bind: HashMap<String, Tensor> = model.bindings_with_weights(w);
    let k = model.arch().classes;
    let mut rows = Vec::with_capacity(data.len() * k);
    let mut preds = Vec::with_capacity(data.len() * k);
    for n in 0..data.len() {
        bind.insert("x".into(), data.x.slice_rows(n, n + 1)?);
        let out = graph.forward(&bind)?.clone();
        preds.extend_from_slice(out.data());
        for j in 0..k {
            let mut seed = Tensor::zeros(out.shape());
            seed.data_mut()[j] = 1.0;
            let grads = graph.backward(&seed)?;
            let mut row = Vec::with_capacity(w.len());
            for l in model.layers() {
                row.extend_from_slice(grads[&l.weight].data());
            }
            rows.push(row);
        }
    }
    Ok((rows, preds))
}
