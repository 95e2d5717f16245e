//! Neural-network layers with hand-derived forward and backward passes.
//!
//! A [`Model`] is an ordered list of layers built from [`LayerSpec`]
//! descriptions. Convolution and linear layers carry their weight in one of
//! three parameterizations ([`Normalization`]): a plain dense tensor, the
//! single-length weight-normalized form, or the CP-normalized form whose
//! factor magnitudes are invisible to the forward pass. Gradients accumulate
//! into per-layer buffers exposed to optimizers through
//! [`Model::visit_params`].

pub mod conv;
pub mod param;
pub mod primitives;

pub use conv::{conv2d_backward, conv2d_forward, ConvGeometry};
pub use param::{CpNormGrads, CpNormParam, WeightNormGrads, WeightNormParam};
pub use primitives::{
    dropout_backward, dropout_forward, flatten_backward, flatten_forward, linear_backward,
    linear_forward, maxpool2d_backward, maxpool2d_forward, relu_backward, relu_forward,
    softmax_cross_entropy,
};

use crate::cp::{cp_als, cp_power, random_cp, CpForm, LambdaInit};
use crate::tensor::{DenseTensor, Matrix};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// How a weight tensor is parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// Plain dense tensor.
    None,
    /// Direction tensor plus one trainable length.
    Weight,
    /// CP form with per-column normalization and a global length.
    Cp,
}

/// How weights are initialized. The Kaiming draws populate parameters
/// directly; the decomposition variants first draw a dense Kaiming-normal
/// tensor and then fit its CP form, so they only differ from the direct
/// draws for CP-parameterized layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightInit {
    KaimingNormal,
    KaimingUniform,
    Als,
    Power,
}

/// Declarative description of one layer; [`Model::build`] binds parameters.
#[derive(Debug, Clone)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        normalization: Normalization,
        rank: Option<usize>,
    },
    Linear {
        in_features: usize,
        out_features: usize,
        normalization: Normalization,
        rank: Option<usize>,
    },
    MaxPool2d,
    Relu,
    Dropout {
        keep: f64,
    },
    Flatten,
}

/// Trainable scalar totals, split as the reporting convention requires.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub weights: usize,
    pub biases: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.weights + self.biases
    }
}

/// A weight tensor in one of the three parameterizations, together with its
/// gradient buffers.
#[derive(Debug, Clone)]
pub enum ParamBlock {
    Dense {
        value: DenseTensor,
        grad: DenseTensor,
    },
    WeightNorm {
        param: WeightNormParam,
        grads: WeightNormGrads,
    },
    CpNorm {
        param: CpNormParam,
        grads: CpNormGrads,
    },
}

impl ParamBlock {
    /// Realizes the dense weight tensor.
    pub fn weight(&self) -> Result<DenseTensor> {
        match self {
            ParamBlock::Dense { value, .. } => Ok(value.clone()),
            ParamBlock::WeightNorm { param, .. } => param.weight(),
            ParamBlock::CpNorm { param, .. } => param.weight(),
        }
    }

    /// Accumulates the parameterization's gradients from a gradient with
    /// respect to the realized weight.
    pub fn backward_into(&mut self, grad_w: &DenseTensor) -> Result<()> {
        match self {
            ParamBlock::Dense { grad, .. } => {
                if grad.shape() != grad_w.shape() {
                    return Err(Error::shape(
                        "dense weight gradient",
                        format!("{:?}", grad.shape()),
                        format!("{:?}", grad_w.shape()),
                    ));
                }
                for (a, b) in grad.data_mut().iter_mut().zip(grad_w.data()) {
                    *a += b;
                }
                Ok(())
            }
            ParamBlock::WeightNorm { param, grads } => param.backward_into(grad_w, grads),
            ParamBlock::CpNorm { param, grads } => param.backward_into(grad_w, grads),
        }
    }

    pub fn zero_grad(&mut self) {
        match self {
            ParamBlock::Dense { grad, .. } => grad.data_mut().fill(0.0),
            ParamBlock::WeightNorm { grads, .. } => grads.zero(),
            ParamBlock::CpNorm { grads, .. } => grads.zero(),
        }
    }

    /// Trainable scalars in the weight parameterization (biases excluded).
    pub fn weight_scalars(&self) -> usize {
        match self {
            ParamBlock::Dense { value, .. } => value.numel(),
            ParamBlock::WeightNorm { param, .. } => param.v.numel() + 1,
            ParamBlock::CpNorm { param, .. } => {
                let r = param.cp.rank();
                let dims: usize = param.cp.shape().iter().sum();
                r * dims + r + 1
            }
        }
    }
}

/// Fills in layer identity on errors raised inside a layer.
fn tag_layer(e: Error, name: &str) -> Error {
    match e {
        Error::ZeroColumn { mode, rank, .. } => Error::ZeroColumn {
            layer: Some(name.to_string()),
            mode,
            rank,
        },
        Error::NonFinite { context, .. } => Error::NonFinite {
            layer: name.to_string(),
            context,
        },
        Error::ShapeMismatch {
            context,
            expected,
            got,
        } => Error::LayerMismatch {
            layer: name.to_string(),
            reason: format!("{context}: expected {expected}, got {got}"),
        },
        other => other,
    }
}

/// Convolution layer: realized-weight cross-correlation plus a per-channel
/// bias, in any of the three weight parameterizations.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub geom: ConvGeometry,
    pub weight: ParamBlock,
    pub bias: Vec<f64>,
    pub grad_bias: Vec<f64>,
    cached_input: Option<DenseTensor>,
    cached_weight: Option<DenseTensor>,
}

impl Conv2d {
    fn forward(&mut self, input: &DenseTensor, _train: bool) -> Result<DenseTensor> {
        let w = self.weight.weight().map_err(|e| tag_layer(e, &self.name))?;
        let mut out =
            conv2d_forward(input, &w, &self.geom).map_err(|e| tag_layer(e, &self.name))?;
        let s = out.shape().to_vec();
        let plane = s[2] * s[3];
        let data = out.data_mut();
        for n in 0..s[0] {
            for (c, &b) in self.bias.iter().enumerate() {
                let base = (n * s[1] + c) * plane;
                for x in &mut data[base..base + plane] {
                    *x += b;
                }
            }
        }
        self.cached_input = Some(input.clone());
        self.cached_weight = Some(w);
        Ok(out)
    }

    fn backward(&mut self, grad_out: &DenseTensor) -> Result<DenseTensor> {
        let input = self
            .cached_input
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("{}: backward before forward", self.name)))?;
        let w = self.cached_weight.as_ref().expect("cached with input");
        let (grad_in, grad_w) = conv2d_backward(input, w, &self.geom, grad_out)
            .map_err(|e| tag_layer(e, &self.name))?;
        self.weight
            .backward_into(&grad_w)
            .map_err(|e| tag_layer(e, &self.name))?;
        let s = grad_out.shape();
        let plane = s[2] * s[3];
        for n in 0..s[0] {
            for (c, gb) in self.grad_bias.iter_mut().enumerate() {
                let base = (n * s[1] + c) * plane;
                *gb += grad_out.data()[base..base + plane].iter().sum::<f64>();
            }
        }
        Ok(grad_in)
    }
}

/// Fully connected layer in any of the three weight parameterizations.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamBlock,
    pub bias: Vec<f64>,
    pub grad_bias: Vec<f64>,
    cached_input: Option<DenseTensor>,
    cached_weight: Option<DenseTensor>,
}

impl Linear {
    fn forward(&mut self, input: &DenseTensor, _train: bool) -> Result<DenseTensor> {
        let w = self.weight.weight().map_err(|e| tag_layer(e, &self.name))?;
        let out = linear_forward(input, &w, Some(&self.bias))
            .map_err(|e| tag_layer(e, &self.name))?;
        self.cached_input = Some(input.clone());
        self.cached_weight = Some(w);
        Ok(out)
    }

    fn backward(&mut self, grad_out: &DenseTensor) -> Result<DenseTensor> {
        let input = self
            .cached_input
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("{}: backward before forward", self.name)))?;
        let w = self.cached_weight.as_ref().expect("cached with input");
        let (grad_in, grad_w, grad_b) = linear_backward(input, w, grad_out)
            .map_err(|e| tag_layer(e, &self.name))?;
        self.weight
            .backward_into(&grad_w)
            .map_err(|e| tag_layer(e, &self.name))?;
        for (a, b) in self.grad_bias.iter_mut().zip(&grad_b) {
            *a += b;
        }
        Ok(grad_in)
    }
}

/// One layer of a [`Model`].
#[derive(Debug, Clone)]
pub enum Layer {
    Conv2d(Conv2d),
    Linear(Linear),
    MaxPool2d {
        name: String,
        cached_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    Relu {
        name: String,
        cached_input: Option<DenseTensor>,
    },
    Dropout {
        name: String,
        keep: f64,
        rng: ChaCha8Rng,
        mask: Vec<f64>,
        active: bool,
    },
    Flatten {
        name: String,
        cached_shape: Vec<usize>,
    },
}

impl Layer {
    pub fn name(&self) -> &str {
        match self {
            Layer::Conv2d(l) => &l.name,
            Layer::Linear(l) => &l.name,
            Layer::MaxPool2d { name, .. }
            | Layer::Relu { name, .. }
            | Layer::Dropout { name, .. }
            | Layer::Flatten { name, .. } => name,
        }
    }

    pub fn forward(&mut self, input: &DenseTensor, train: bool) -> Result<DenseTensor> {
        match self {
            Layer::Conv2d(l) => l.forward(input, train),
            Layer::Linear(l) => l.forward(input, train),
            Layer::MaxPool2d {
                name,
                cached_shape,
                argmax,
            } => {
                let (out, idx) = maxpool2d_forward(input).map_err(|e| tag_layer(e, name))?;
                *cached_shape = input.shape().to_vec();
                *argmax = idx;
                Ok(out)
            }
            Layer::Relu { cached_input, .. } => {
                let out = relu_forward(input);
                *cached_input = Some(input.clone());
                Ok(out)
            }
            Layer::Dropout {
                name,
                keep,
                rng,
                mask,
                active,
            } => {
                if train {
                    let (out, m) = dropout_forward(input, *keep, rng)
                        .map_err(|e| tag_layer(e, name))?;
                    *mask = m;
                    *active = true;
                    Ok(out)
                } else {
                    *active = false;
                    Ok(input.clone())
                }
            }
            Layer::Flatten { name, cached_shape } => {
                let out = flatten_forward(input).map_err(|e| tag_layer(e, name))?;
                *cached_shape = input.shape().to_vec();
                Ok(out)
            }
        }
    }

    pub fn backward(&mut self, grad_out: &DenseTensor) -> Result<DenseTensor> {
        match self {
            Layer::Conv2d(l) => l.backward(grad_out),
            Layer::Linear(l) => l.backward(grad_out),
            Layer::MaxPool2d {
                name,
                cached_shape,
                argmax,
            } => maxpool2d_backward(cached_shape, argmax, grad_out)
                .map_err(|e| tag_layer(e, name)),
            Layer::Relu { name, cached_input } => {
                let input = cached_input.as_ref().ok_or_else(|| {
                    Error::InvalidArgument(format!("{name}: backward before forward"))
                })?;
                relu_backward(input, grad_out).map_err(|e| tag_layer(e, name))
            }
            Layer::Dropout {
                name, mask, active, ..
            } => {
                if *active {
                    dropout_backward(mask, grad_out).map_err(|e| tag_layer(e, name))
                } else {
                    Ok(grad_out.clone())
                }
            }
            Layer::Flatten { name, cached_shape } => {
                flatten_backward(cached_shape, grad_out).map_err(|e| tag_layer(e, name))
            }
        }
    }

    fn param_block(&self) -> Option<&ParamBlock> {
        match self {
            Layer::Conv2d(l) => Some(&l.weight),
            Layer::Linear(l) => Some(&l.weight),
            _ => None,
        }
    }

    fn bias_len(&self) -> usize {
        match self {
            Layer::Conv2d(l) => l.bias.len(),
            Layer::Linear(l) => l.bias.len(),
            _ => 0,
        }
    }
}

/// An ordered stack of layers with bound parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub input_shape: Vec<usize>,
}

impl Model {
    /// Binds parameters for a stack of layer descriptions.
    ///
    /// `input_shape` is `[channels, height, width]`. Layer names are assigned
    /// by kind (`conv1`, `conv2`, …, `fc1`, …); weight and dropout draws come
    /// from per-layer streams derived from `seed`, so models are reproducible
    /// and insensitive to construction order elsewhere.
    pub fn build(
        input_shape: &[usize],
        specs: &[LayerSpec],
        init: WeightInit,
        lambda_init: LambdaInit,
        seed: u64,
    ) -> Result<Model> {
        if input_shape.len() != 3 {
            return Err(Error::shape(
                "model input shape",
                "[channels, height, width]",
                format!("{input_shape:?}"),
            ));
        }
        // Tracks the activation shape between layers; `None` spatial means
        // the stack has been flattened to features.
        enum Flow {
            Spatial { c: usize, h: usize, w: usize },
            Flat { f: usize },
        }
        let mut flow = Flow::Spatial {
            c: input_shape[0],
            h: input_shape[1],
            w: input_shape[2],
        };
        let mut layers = Vec::with_capacity(specs.len());
        let (mut n_conv, mut n_fc, mut n_pool, mut n_relu, mut n_drop) = (0, 0, 0, 0, 0);
        for (idx, spec) in specs.iter().enumerate() {
            let mut rng = layer_rng(seed, idx);
            match *spec {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    normalization,
                    rank,
                } => {
                    n_conv += 1;
                    let name = format!("conv{n_conv}");
                    let Flow::Spatial { c, h, w } = flow else {
                        return Err(Error::LayerMismatch {
                            layer: name,
                            reason: "convolution after flatten".into(),
                        });
                    };
                    if c != in_channels {
                        return Err(Error::LayerMismatch {
                            layer: name,
                            reason: format!("expects {in_channels} input channels, gets {c}"),
                        });
                    }
                    let geom = ConvGeometry {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    };
                    let (oh, ow) = geom
                        .out_size(h, w)
                        .map_err(|e| tag_layer(e, &name))?;
                    let shape = [out_channels, in_channels, kernel, kernel];
                    let fan_in = in_channels * kernel * kernel;
                    let weight = init_block(
                        &shape,
                        fan_in,
                        normalization,
                        rank,
                        init,
                        lambda_init,
                        &name,
                        &mut rng,
                    )?;
                    layers.push(Layer::Conv2d(Conv2d {
                        name,
                        geom,
                        weight,
                        bias: vec![0.0; out_channels],
                        grad_bias: vec![0.0; out_channels],
                        cached_input: None,
                        cached_weight: None,
                    }));
                    flow = Flow::Spatial {
                        c: out_channels,
                        h: oh,
                        w: ow,
                    };
                }
                LayerSpec::Linear {
                    in_features,
                    out_features,
                    normalization,
                    rank,
                } => {
                    n_fc += 1;
                    let name = format!("fc{n_fc}");
                    let f = match flow {
                        Flow::Flat { f } => f,
                        Flow::Spatial { .. } => {
                            return Err(Error::LayerMismatch {
                                layer: name,
                                reason: "linear layer before flatten".into(),
                            })
                        }
                    };
                    if f != in_features {
                        return Err(Error::LayerMismatch {
                            layer: name,
                            reason: format!("expects {in_features} input features, gets {f}"),
                        });
                    }
                    let shape = [out_features, in_features];
                    let weight = init_block(
                        &shape,
                        in_features,
                        normalization,
                        rank,
                        init,
                        lambda_init,
                        &name,
                        &mut rng,
                    )?;
                    layers.push(Layer::Linear(Linear {
                        name,
                        in_features,
                        out_features,
                        weight,
                        bias: vec![0.0; out_features],
                        grad_bias: vec![0.0; out_features],
                        cached_input: None,
                        cached_weight: None,
                    }));
                    flow = Flow::Flat { f: out_features };
                }
                LayerSpec::MaxPool2d => {
                    n_pool += 1;
                    let name = format!("pool{n_pool}");
                    let Flow::Spatial { c, h, w } = flow else {
                        return Err(Error::LayerMismatch {
                            layer: name,
                            reason: "pooling after flatten".into(),
                        });
                    };
                    if h < 2 || w < 2 {
                        return Err(Error::LayerMismatch {
                            layer: name,
                            reason: format!("needs at least 2x2 spatial input, gets {h}x{w}"),
                        });
                    }
                    layers.push(Layer::MaxPool2d {
                        name,
                        cached_shape: Vec::new(),
                        argmax: Vec::new(),
                    });
                    flow = Flow::Spatial {
                        c,
                        h: h / 2,
                        w: w / 2,
                    };
                }
                LayerSpec::Relu => {
                    n_relu += 1;
                    layers.push(Layer::Relu {
                        name: format!("relu{n_relu}"),
                        cached_input: None,
                    });
                }
                LayerSpec::Dropout { keep } => {
                    n_drop += 1;
                    let name = format!("drop{n_drop}");
                    if !(keep > 0.0 && keep <= 1.0) {
                        return Err(Error::LayerMismatch {
                            layer: name,
                            reason: format!("keep probability {keep} outside (0, 1]"),
                        });
                    }
                    layers.push(Layer::Dropout {
                        name,
                        keep,
                        rng,
                        mask: Vec::new(),
                        active: false,
                    });
                }
                LayerSpec::Flatten => {
                    let name = "flatten".to_string();
                    let Flow::Spatial { c, h, w } = flow else {
                        return Err(Error::LayerMismatch {
                            layer: name,
                            reason: "flatten applied twice".into(),
                        });
                    };
                    layers.push(Layer::Flatten {
                        name,
                        cached_shape: Vec::new(),
                    });
                    flow = Flow::Flat { f: c * h * w };
                }
            }
        }
        Ok(Model {
            layers,
            input_shape: input_shape.to_vec(),
        })
    }

    /// Runs the full stack; `train` enables dropout.
    pub fn forward(&mut self, input: &DenseTensor, train: bool) -> Result<DenseTensor> {
        let mut x = input.clone();
        for layer in &mut self.layers {
            x = layer.forward(&x, train)?;
        }
        Ok(x)
    }

    /// Backpropagates from a gradient at the network output, accumulating
    /// parameter gradients; the input gradient is discarded.
    pub fn backward(&mut self, grad_output: &DenseTensor) -> Result<()> {
        let mut g = grad_output.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for layer in &mut self.layers {
            match layer {
                Layer::Conv2d(l) => {
                    l.weight.zero_grad();
                    l.grad_bias.fill(0.0);
                }
                Layer::Linear(l) => {
                    l.weight.zero_grad();
                    l.grad_bias.fill(0.0);
                }
                _ => {}
            }
        }
    }

    /// Visits every trainable parameter slice with its gradient, in a stable
    /// order, under a dotted `layer.part` name.
    pub fn visit_params(
        &mut self,
        f: &mut dyn FnMut(&str, &mut [f64], &[f64]) -> Result<()>,
    ) -> Result<()> {
        for layer in &mut self.layers {
            let (name, block, bias, grad_bias) = match layer {
                Layer::Conv2d(l) => (
                    l.name.clone(),
                    Some(&mut l.weight),
                    &mut l.bias,
                    &l.grad_bias,
                ),
                Layer::Linear(l) => (
                    l.name.clone(),
                    Some(&mut l.weight),
                    &mut l.bias,
                    &l.grad_bias,
                ),
                _ => continue,
            };
            if let Some(block) = block {
                match block {
                    ParamBlock::Dense { value, grad } => {
                        f(
                            &format!("{name}.weight"),
                            value.data_mut(),
                            grad.data(),
                        )?;
                    }
                    ParamBlock::WeightNorm { param, grads } => {
                        f(
                            &format!("{name}.direction"),
                            param.v.data_mut(),
                            grads.v.data(),
                        )?;
                        f(
                            &format!("{name}.length"),
                            std::slice::from_mut(&mut param.g),
                            std::slice::from_ref(&grads.g),
                        )?;
                    }
                    ParamBlock::CpNorm { param, grads } => {
                        for (k, (fm, gm)) in param
                            .cp
                            .factors_mut()
                            .iter_mut()
                            .zip(&grads.factors)
                            .enumerate()
                        {
                            f(
                                &format!("{name}.factor{k}"),
                                fm.data_mut(),
                                gm.data(),
                            )?;
                        }
                        f(
                            &format!("{name}.lambda"),
                            param.cp.lambdas_mut(),
                            &grads.lambdas,
                        )?;
                        f(
                            &format!("{name}.sigma"),
                            std::slice::from_mut(&mut param.sigma),
                            std::slice::from_ref(&grads.sigma),
                        )?;
                    }
                }
            }
            if !bias.is_empty() {
                f(&format!("{name}.bias"), bias, grad_bias)?;
            }
        }
        Ok(())
    }

    /// Unit-normalizes every CP factor column in place, leaving `lambda` and
    /// `sigma` untouched; errors identify the offending layer on collapse.
    pub fn renormalize_cp(&mut self) -> Result<()> {
        for layer in &mut self.layers {
            let (name, block) = match layer {
                Layer::Conv2d(l) => (&l.name, &mut l.weight),
                Layer::Linear(l) => (&l.name, &mut l.weight),
                _ => continue,
            };
            if let ParamBlock::CpNorm { param, .. } = block {
                param.cp = param.cp.renormalize().map_err(|e| tag_layer(e, name))?;
            }
        }
        Ok(())
    }

    /// Name and materialized dense weight tensor of every weight layer, in
    /// layer order — the input to per-layer rank estimation.
    pub fn weight_tensors(&self) -> Result<Vec<(String, DenseTensor)>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv2d(l) => out.push((l.name.clone(), l.weight.weight()?)),
                Layer::Linear(l) => out.push((l.name.clone(), l.weight.weight()?)),
                _ => {}
            }
        }
        Ok(out)
    }

    /// Mutable access to every CP parameter block together with its gradient
    /// buffers, for structural transformations (rank truncation) that must
    /// resize both in lockstep.
    pub fn cp_layers_mut(&mut self) -> Vec<(&str, &mut CpNormParam, &mut CpNormGrads)> {
        self.layers
            .iter_mut()
            .filter_map(|l| {
                let (name, weight) = match l {
                    Layer::Conv2d(c) => (c.name.as_str(), &mut c.weight),
                    Layer::Linear(c) => (c.name.as_str(), &mut c.weight),
                    _ => return None,
                };
                match weight {
                    ParamBlock::CpNorm { param, grads } => Some((name, param, grads)),
                    _ => None,
                }
            })
            .collect()
    }

    /// Name and parameter block of every CP-parameterized layer.
    pub fn cp_layers(&self) -> Vec<(&str, &CpNormParam)> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv2d(c) => match &c.weight {
                    ParamBlock::CpNorm { param, .. } => Some((c.name.as_str(), param)),
                    _ => None,
                },
                Layer::Linear(c) => match &c.weight {
                    ParamBlock::CpNorm { param, .. } => Some((c.name.as_str(), param)),
                    _ => None,
                },
                _ => None,
            })
            .collect()
    }

    /// Trainable scalar totals across the model, weights and biases apart.
    pub fn param_count(&self) -> ParamCount {
        let mut weights = 0;
        let mut biases = 0;
        for layer in &self.layers {
            if let Some(block) = layer.param_block() {
                weights += block.weight_scalars();
            }
            biases += layer.bias_len();
        }
        ParamCount { weights, biases }
    }

    /// Per-layer parameter counts for layers that carry weights.
    pub fn layer_param_counts(&self) -> Vec<(String, ParamCount)> {
        self.layers
            .iter()
            .filter_map(|l| {
                l.param_block().map(|b| {
                    (
                        l.name().to_string(),
                        ParamCount {
                            weights: b.weight_scalars(),
                            biases: l.bias_len(),
                        },
                    )
                })
            })
            .collect()
    }
}

fn layer_rng(seed: u64, layer_index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed.wrapping_add((layer_index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
    )
}

fn kaiming_dense(shape: &[usize], fan_in: usize, uniform: bool, rng: &mut ChaCha8Rng) -> DenseTensor {
    let mut t = DenseTensor::zeros(shape);
    if uniform {
        let bound = (6.0 / fan_in as f64).sqrt();
        for x in t.data_mut() {
            *x = (rng.random::<f64>() * 2.0 - 1.0) * bound;
        }
    } else {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = StandardNormal;
        for x in t.data_mut() {
            let z: f64 = normal.sample(rng);
            *x = z * std;
        }
    }
    t
}

/// Draws a CP form with uniformly-drawn factor entries, unit-normalized per
/// column; the counterpart of `random_cp`'s Gaussian draw.
fn random_cp_uniform(
    shape: &[usize],
    rank: usize,
    lambda_init: LambdaInit,
    rng: &mut ChaCha8Rng,
) -> Result<CpForm> {
    let mut factors = Vec::with_capacity(shape.len());
    for &d in shape {
        let mut f = Matrix::zeros(d, rank);
        for r in 0..rank {
            let mut col = vec![0.0; d];
            let mut norm_sq = 0.0;
            while norm_sq < f64::MIN_POSITIVE {
                for x in col.iter_mut() {
                    *x = rng.random::<f64>() * 2.0 - 1.0;
                }
                norm_sq = col.iter().map(|&x| x * x).sum();
            }
            let n = norm_sq.sqrt();
            for (i, &x) in col.iter().enumerate() {
                *f.at_mut(i, r) = x / n;
            }
        }
        factors.push(f);
    }
    let normal = StandardNormal;
    let lambdas = match lambda_init {
        LambdaInit::Ones => vec![1.0; rank],
        LambdaInit::StdNormal => (0..rank).map(|_| normal.sample(rng)).collect(),
    };
    CpForm::new(factors, lambdas)
}

#[allow(clippy::too_many_arguments)]
fn init_block(
    shape: &[usize],
    fan_in: usize,
    normalization: Normalization,
    rank: Option<usize>,
    init: WeightInit,
    lambda_init: LambdaInit,
    name: &str,
    rng: &mut ChaCha8Rng,
) -> Result<ParamBlock> {
    let uniform = init == WeightInit::KaimingUniform;
    match normalization {
        Normalization::None => {
            let value = kaiming_dense(shape, fan_in, uniform, rng);
            let grad = DenseTensor::zeros(shape);
            Ok(ParamBlock::Dense { value, grad })
        }
        Normalization::Weight => {
            let v = kaiming_dense(shape, fan_in, uniform, rng);
            let g = crate::tensor::frobenius_norm(&v);
            let param = WeightNormParam::new(v, g).map_err(|e| tag_layer(e, name))?;
            let grads = WeightNormGrads::zeros_like(&param);
            Ok(ParamBlock::WeightNorm { param, grads })
        }
        Normalization::Cp => {
            let rank = rank.ok_or_else(|| Error::LayerMismatch {
                layer: name.to_string(),
                reason: "CP parameterization requires a rank".into(),
            })?;
            if rank == 0 {
                return Err(Error::LayerMismatch {
                    layer: name.to_string(),
                    reason: "CP rank must be at least 1".into(),
                });
            }
            let cp = match init {
                WeightInit::KaimingNormal => random_cp(shape, rank, lambda_init, rng)?,
                WeightInit::KaimingUniform => {
                    random_cp_uniform(shape, rank, lambda_init, rng)?
                }
                WeightInit::Als => {
                    let dense = kaiming_dense(shape, fan_in, false, rng);
                    let fitted = cp_als(&dense, rank, 50, 1e-6, rng.random::<u64>())?;
                    fitted.cp.renormalize_absorbing()?
                }
                WeightInit::Power => {
                    let dense = kaiming_dense(shape, fan_in, false, rng);
                    let fitted = cp_power(&dense, rank, 100, 1e-8, rng.random::<u64>())?;
                    fitted.cp.renormalize_absorbing()?
                }
            };
            let param = CpNormParam::new(cp, 1.0).map_err(|e| tag_layer(e, name))?;
            let grads = CpNormGrads::zeros_like(&param);
            Ok(ParamBlock::CpNorm { param, grads })
        }
    }
}

/// Ranks assigned to the LeNet-like stack's weight layers, in layer order.
pub const LENET_RANKS: [usize; 4] = [11, 270, 128, 10];
/// Ranks assigned to the AlexNet-like stack's weight layers, in layer order.
pub const ALEXNET_RANKS: [usize; 8] = [36, 571, 1626, 1948, 1644, 1024, 512, 10];

/// Two 3x3 convolutions, one pooling stage, and a two-layer classifier for
/// 1x28x28 inputs; `ranks` override the per-weight-layer defaults
/// ([`LENET_RANKS`]) when the CP parameterization is selected.
pub fn lenet_spec(normalization: Normalization, ranks: Option<&[usize]>) -> Result<Vec<LayerSpec>> {
    let ranks = resolve_ranks(ranks, &LENET_RANKS, normalization)?;
    let r = |i: usize| ranks.as_ref().map(|v| v[i]);
    Ok(vec![
        LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 32,
            kernel: 3,
            stride: 1,
            padding: 0,
            normalization,
            rank: r(0),
        },
        LayerSpec::Relu,
        LayerSpec::Conv2d {
            in_channels: 32,
            out_channels: 64,
            kernel: 3,
            stride: 1,
            padding: 0,
            normalization,
            rank: r(1),
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d,
        LayerSpec::Flatten,
        LayerSpec::Linear {
            in_features: 9216,
            out_features: 128,
            normalization,
            rank: r(2),
        },
        LayerSpec::Relu,
        LayerSpec::Dropout { keep: 0.5 },
        LayerSpec::Linear {
            in_features: 128,
            out_features: 10,
            normalization,
            rank: r(3),
        },
    ])
}

/// Five 3x3 convolutions with three pooling stages and a three-layer
/// classifier for 3x32x32 inputs; `ranks` override [`ALEXNET_RANKS`].
pub fn alexnet_spec(
    normalization: Normalization,
    ranks: Option<&[usize]>,
) -> Result<Vec<LayerSpec>> {
    let ranks = resolve_ranks(ranks, &ALEXNET_RANKS, normalization)?;
    let r = |i: usize| ranks.as_ref().map(|v| v[i]);
    let conv = |cin, cout, rank| LayerSpec::Conv2d {
        in_channels: cin,
        out_channels: cout,
        kernel: 3,
        stride: 1,
        padding: 1,
        normalization,
        rank,
    };
    Ok(vec![
        conv(3, 64, r(0)),
        LayerSpec::Relu,
        LayerSpec::MaxPool2d,
        conv(64, 192, r(1)),
        LayerSpec::Relu,
        LayerSpec::MaxPool2d,
        conv(192, 384, r(2)),
        LayerSpec::Relu,
        conv(384, 256, r(3)),
        LayerSpec::Relu,
        conv(256, 256, r(4)),
        LayerSpec::Relu,
        LayerSpec::MaxPool2d,
        LayerSpec::Flatten,
        LayerSpec::Linear {
            in_features: 4096,
            out_features: 1024,
            normalization,
            rank: r(5),
        },
        LayerSpec::Relu,
        LayerSpec::Dropout { keep: 0.5 },
        LayerSpec::Linear {
            in_features: 1024,
            out_features: 512,
            normalization,
            rank: r(6),
        },
        LayerSpec::Relu,
        LayerSpec::Dropout { keep: 0.5 },
        LayerSpec::Linear {
            in_features: 512,
            out_features: 10,
            normalization,
            rank: r(7),
        },
    ])
}

fn resolve_ranks(
    ranks: Option<&[usize]>,
    defaults: &[usize],
    normalization: Normalization,
) -> Result<Option<Vec<usize>>> {
    match (normalization, ranks) {
        (Normalization::Cp, Some(r)) => {
            if r.len() != defaults.len() {
                return Err(Error::InvalidArgument(format!(
                    "expected {} per-layer ranks, got {}",
                    defaults.len(),
                    r.len()
                )));
            }
            Ok(Some(r.to_vec()))
        }
        (Normalization::Cp, None) => Ok(Some(defaults.to_vec())),
        (_, Some(_)) => Err(Error::InvalidArgument(
            "per-layer ranks are only meaningful with the CP parameterization".into(),
        )),
        (_, None) => Ok(None),
    }
}
