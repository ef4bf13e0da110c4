//! Network builders and parameter state.
//!
//! Dense weights are stored `(in, out)` so a batch `[N, in]` multiplies on
//! the left. Convolution weights are `[out, in, kh, kw]`. Only weight tensors
//! take part in quantization, perturbation and the flattened norms; biases are
//! carried along untouched.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::quant::{self, QuantSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Mlp,
    Nin,
    /// A single dense map from the flattened input to the outputs.
    Linear,
}

impl std::str::FromStr for ArchKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(ArchKind::Mlp),
            "nin" => Ok(ArchKind::Nin),
            "linear" => Ok(ArchKind::Linear),
            other => Err(Error::InvalidArch(format!("unsupported kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub kind: ArchKind,
    /// MLP: number of hidden layers. NiN: number of blocks.
    pub depth_multiplier: usize,
    pub width_multiplier: usize,
    pub base_width: usize,
    /// Per-example shape: `[D]` for vectors, `[C, H, W]` for images.
    pub input_shape: Vec<usize>,
    /// Output units (1 for scalar regression).
    pub classes: usize,
    #[serde(default = "default_true")]
    pub bias: bool,
}

fn default_true() -> bool {
    true
}

impl ArchSpec {
    pub fn mlp(input: usize, hidden: usize, depth: usize, outputs: usize) -> Self {
        Self {
            kind: ArchKind::Mlp,
            depth_multiplier: depth,
            width_multiplier: 1,
            base_width: hidden,
            input_shape: vec![input],
            classes: outputs,
            bias: true,
        }
    }

    pub fn linear(input: usize, outputs: usize, bias: bool) -> Self {
        Self {
            kind: ArchKind::Linear,
            depth_multiplier: 1,
            width_multiplier: 1,
            base_width: 1,
            input_shape: vec![input],
            classes: outputs,
            bias,
        }
    }

    pub fn nin(input_shape: [usize; 3], classes: usize, depth: usize, width: usize, base: usize) -> Self {
        Self {
            kind: ArchKind::Nin,
            depth_multiplier: depth,
            width_multiplier: width,
            base_width: base,
            input_shape: input_shape.to_vec(),
            classes,
            bias: true,
        }
    }

    pub fn width(&self) -> usize {
        self.base_width * self.width_multiplier
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth_multiplier == 0 || self.width_multiplier == 0 || self.base_width == 0 {
            return Err(Error::InvalidArch(
                "depth, width and base width must be at least 1".into(),
            ));
        }
        if self.classes == 0 || self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::InvalidArch("empty input shape or zero outputs".into()));
        }
        if self.kind == ArchKind::Nin && self.input_shape.len() != 3 {
            return Err(Error::InvalidArch(format!(
                "nin needs a [C, H, W] input, got {:?}",
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Loss used when none is given: MSE for a single output, cross-entropy otherwise.
    pub fn default_loss(&self) -> LossKind {
        if self.classes == 1 {
            LossKind::Mse
        } else {
            LossKind::CrossEntropy
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Dense,
    Conv { stride: usize, padding: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub weight: String,
    pub bias: Option<String>,
    pub relu: bool,
}

/// Quantizer attached to one layer's weight tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantAttachment {
    pub spec: QuantSpec,
    /// Step size at attachment time; dequantizes the initialization snapshot.
    pub init_step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Current,
    Init,
}

/// A forward graph for a model: inputs `x`, `y` and one input per parameter.
#[derive(Debug, Clone)]
pub struct Network {
    pub graph: Graph,
    pub logits: NodeId,
    pub loss: Option<NodeId>,
    pub loss_kind: Option<LossKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    arch: ArchSpec,
    layers: Vec<Layer>,
    params: IndexMap<String, Tensor>,
    init: IndexMap<String, Tensor>,
    quant: Option<IndexMap<String, QuantAttachment>>,
}

/// Build a model with Kaiming-uniform weights and zero biases.
pub fn build(arch: &ArchSpec, seed: u64) -> Result<(ModelState, Network)> {
    let model = ModelState::new(arch, seed)?;
    let net = model.network(Some(arch.default_loss()));
    Ok((model, net))
}

impl ModelState {
    pub fn new(arch: &ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = crate::rng::rng(seed);
        let mut layers = Vec::new();
        let mut params = IndexMap::new();
        let mut add = |layers: &mut Vec<Layer>,
                       params: &mut IndexMap<String, Tensor>,
                       kind: LayerKind,
                       shape: Vec<usize>,
                       fan_in: usize,
                       relu: bool| {
            let name = format!("l{:02}", layers.len());
            let bound = (6.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            let out = match kind {
                LayerKind::Dense => shape[1],
                LayerKind::Conv { .. } => shape[0],
            };
            let weight = format!("{name}.weight");
            params.insert(weight.clone(), Tensor::new(shape, data).expect("shape"));
            let bias = arch.bias.then(|| {
                let b = format!("{name}.bias");
                params.insert(b.clone(), Tensor::zeros(&[out]));
                b
            });
            layers.push(Layer {
                name,
                kind,
                weight,
                bias,
                relu,
            });
        };
        match arch.kind {
            ArchKind::Linear => {
                let d: usize = arch.input_shape.iter().product();
                add(&mut layers, &mut params, LayerKind::Dense, vec![d, arch.classes], d, false);
            }
            ArchKind::Mlp => {
                let mut prev: usize = arch.input_shape.iter().product();
                for _ in 0..arch.depth_multiplier {
                    let w = arch.width();
                    add(&mut layers, &mut params, LayerKind::Dense, vec![prev, w], prev, true);
                    prev = w;
                }
                add(&mut layers, &mut params, LayerKind::Dense, vec![prev, arch.classes], prev, false);
            }
            ArchKind::Nin => {
                // Each block: 3x3 conv, then two 1x1 convs. Blocks after the
                // first downsample with stride 2. The final 1x1 conv emits
                // class scores, which are globally average pooled.
                let mut prev = arch.input_shape[0];
                let w = arch.width();
                for b in 0..arch.depth_multiplier {
                    let stride = if b == 0 { 1 } else { 2 };
                    let last_block = b + 1 == arch.depth_multiplier;
                    add(
                        &mut layers,
                        &mut params,
                        LayerKind::Conv { stride, padding: 1 },
                        vec![w, prev, 3, 3],
                        prev * 9,
                        true,
                    );
                    add(
                        &mut layers,
                        &mut params,
                        LayerKind::Conv { stride: 1, padding: 0 },
                        vec![w, w, 1, 1],
                        w,
                        true,
                    );
                    let out = if last_block { arch.classes } else { w };
                    add(
                        &mut layers,
                        &mut params,
                        LayerKind::Conv { stride: 1, padding: 0 },
                        vec![out, w, 1, 1],
                        w,
                        !last_block,
                    );
                    prev = w;
                }
            }
        }
        let init = params.clone();
        Ok(Self {
            arch: arch.clone(),
            layers,
            params,
            init,
            quant: None,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &IndexMap<String, Tensor> {
        &self.params
    }

    pub fn init_snapshot(&self) -> &IndexMap<String, Tensor> {
        &self.init
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn quant(&self) -> Option<&IndexMap<String, QuantAttachment>> {
        self.quant.as_ref()
    }

    pub fn is_quantized(&self) -> bool {
        self.quant.as_ref().is_some_and(|q| !q.is_empty())
    }

    /// Total scalar parameter count, biases included.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| self.params[&l.weight].len()).sum()
    }

    /// Attach a quantizer with LSQ-initialized step to every layer's weights.
    pub fn attach_quantizers(&mut self, bits: u32) -> Result<()> {
        let mut q = IndexMap::new();
        for l in &self.layers {
            let s = quant::init_step(self.params[&l.weight].data(), bits);
            let spec = QuantSpec::new(bits, s)?;
            q.insert(l.name.clone(), QuantAttachment { spec, init_step: s });
        }
        self.quant = Some(q);
        Ok(())
    }

    pub fn set_step(&mut self, layer: &str, step: f64) -> Result<()> {
        let att = self
            .quant
            .as_mut()
            .and_then(|q| q.get_mut(layer))
            .ok_or(Error::NotQuantized)?;
        att.spec = QuantSpec::new(att.spec.bits, step)?;
        Ok(())
    }

    pub(crate) fn set_quant(&mut self, quant: Option<IndexMap<String, QuantAttachment>>) {
        self.quant = quant;
    }

    pub(crate) fn from_parts(
        arch: &ArchSpec,
        params: IndexMap<String, Tensor>,
        init: IndexMap<String, Tensor>,
    ) -> Result<Self> {
        let mut m = Self::new(arch, 0)?;
        for (which, src) in [(&mut m.params, params), (&mut m.init, init)] {
            if which.len() != src.len() {
                return Err(Error::Format(format!(
                    "expected {} tensors, found {}",
                    which.len(),
                    src.len()
                )));
            }
            for (name, t) in src {
                let slot = which
                    .get_mut(&name)
                    .ok_or_else(|| Error::Format(format!("unexpected tensor `{name}`")))?;
                if slot.shape() != t.shape() {
                    return Err(Error::Format(format!(
                        "tensor `{name}` has shape {:?}, architecture expects {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t;
            }
        }
        Ok(m)
    }

    fn concat(&self, map: &IndexMap<String, Tensor>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.weight_count());
        for l in &self.layers {
            out.extend_from_slice(map[&l.weight].data());
        }
        out
    }

    /// Latent weights of every layer, concatenated in layer order.
    pub fn flat_weights(&self, which: Which) -> Vec<f64> {
        match which {
            Which::Current => self.concat(&self.params),
            Which::Init => self.concat(&self.init),
        }
    }

    /// The weights the network actually computes with: dequantized through the
    /// attached quantizers when present. `Init` uses the initial step sizes.
    pub fn effective_weights(&self, which: Which) -> Vec<f64> {
        let raw = self.flat_weights(which);
        self.requantize(&raw, which)
    }

    /// Push a flat weight vector through the layer quantizers (identity when
    /// the model is full precision).
    pub fn requantize(&self, flat: &[f64], which: Which) -> Vec<f64> {
        let Some(q) = &self.quant else {
            return flat.to_vec();
        };
        let mut out = Vec::with_capacity(flat.len());
        let mut off = 0;
        for l in &self.layers {
            let n = self.params[&l.weight].len();
            let att = &q[&l.name];
            let spec = match which {
                Which::Current => att.spec,
                Which::Init => QuantSpec {
                    bits: att.spec.bits,
                    step: att.init_step,
                },
            };
            out.extend(quant::fake_quantize(&flat[off..off + n], &spec));
            off += n;
        }
        out
    }

    pub fn set_flat_weights(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.weight_count() {
            return Err(Error::InvalidArgument(format!(
                "expected {} weights, got {}",
                self.weight_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        for l in &self.layers {
            let t = self.params.get_mut(&l.weight).expect("layer weight");
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// L2 norm of all weight tensors flattened together (biases excluded).
    pub fn flat_l2(&self, which: Which) -> f64 {
        flat_l2(self, which)
    }

    /// Flat-index groups, one per output filter (conv) or output unit (dense).
    pub fn filter_groups(&self) -> Vec<Vec<usize>> {
        let mut groups = Vec::new();
        let mut off = 0;
        for l in &self.layers {
            let t = &self.params[&l.weight];
            match l.kind {
                LayerKind::Dense => {
                    let (rows, cols) = (t.shape()[0], t.shape()[1]);
                    for j in 0..cols {
                        groups.push((0..rows).map(|i| off + i * cols + j).collect());
                    }
                }
                LayerKind::Conv { .. } => {
                    let per = t.len() / t.shape()[0];
                    for o in 0..t.shape()[0] {
                        groups.push((off + o * per..off + (o + 1) * per).collect());
                    }
                }
            }
            off += t.len();
        }
        groups
    }

    /// Parameter tensors to bind into a network, with weights replaced by the
    /// given flat vector.
    pub fn bindings_with_weights(&self, flat: &[f64]) -> HashMap<String, Tensor> {
        let mut map: HashMap<String, Tensor> =
            self.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let mut off = 0;
        for l in &self.layers {
            let t = map.get_mut(&l.weight).expect("layer weight");
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        map
    }

    /// Forward graph. With `loss = None` the output is the prediction/logits.
    pub fn network(&self, loss: Option<LossKind>) -> Network {
        let mut g = Graph::new();
        let x = g.input("x");
        let mut h = match self.arch.kind {
            ArchKind::Nin => x,
            _ => g.flatten(x),
        };
        for l in &self.layers {
            let w = g.input(&l.weight);
            h = match l.kind {
                LayerKind::Dense => g.matmul(h, w),
                LayerKind::Conv { stride, padding } => g.conv2d(h, w, stride, padding),
            };
            if let Some(b) = &l.bias {
                let b = g.input(b);
                h = g.bias_add(h, b);
            }
            if l.relu {
                h = g.relu(h);
            }
        }
        if self.arch.kind == ArchKind::Nin {
            h = g.global_avg_pool(h);
        }
        let logits = h;
        let loss_node = loss.map(|k| {
            let y = g.input("y");
            match k {
                LossKind::Mse => g.mse(logits, y),
                LossKind::CrossEntropy => g.softmax_cross_entropy(logits, y),
            }
        });
        if let Some(l) = loss_node {
            g.set_output(l);
        } else {
            g.set_output(logits);
        }
        Network {
            graph: g,
            logits,
            loss: loss_node,
            loss_kind: loss,
        }
    }
}

pub fn flat_l2(model: &ModelState, which: Which) -> f64 {
    model
        .flat_weights(which)
        .iter()
        .fold(0.0, |s, v| s + v * v)
        .sqrt()
}
