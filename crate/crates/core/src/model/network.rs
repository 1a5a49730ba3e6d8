use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{NetworkConfig, CLASSIFIER};
use crate::rng;
use crate::tensor::{
    conv2d_backward, conv2d_forward, dropout, dropout_backward, linear_backward, linear_forward, maxpool_backward,
    maxpool_forward, relu, relu_backward, softmax_cross_entropy, LayerCache, Mode, Scalar, Tensor,
};
use crate::{Error, Result};

/// A named parameter with its gradient and solver velocity.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub velocity: Tensor<T>,
    pub fan_in: usize,
}

impl<T: Scalar> Param<T> {
    fn new(name: String, shape: &[usize], fan_in: usize) -> Self {
        Param {
            name,
            value: Tensor::zeros(shape),
            grad: Tensor::zeros(shape),
            velocity: Tensor::zeros(shape),
            fan_in,
        }
    }

    pub fn is_bias(&self) -> bool {
        self.name.ends_with(".bias")
    }

    pub fn is_classifier(&self) -> bool {
        self.name.starts_with(CLASSIFIER)
    }

    fn reinit<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        if self.is_bias() {
            self.value.data_mut().fill(T::zero());
        } else {
            let normal = Normal::new(0.0, (2.0 / self.fan_in as f64).sqrt()).expect("positive std");
            for v in self.value.data_mut() {
                *v = T::from_f64(normal.sample(rng));
            }
        }
        self.velocity.data_mut().fill(T::zero());
        self.grad.data_mut().fill(T::zero());
    }
}

#[derive(Debug, Clone)]
enum LayerKind {
    Conv { weight: usize, bias: usize },
    MaxPool { window: usize, stride: usize },
    Relu,
    Linear { weight: usize, bias: usize },
    Dropout { rate: f64 },
}

#[derive(Debug, Clone)]
struct Layer {
    name: String,
    kind: LayerKind,
}

/// Which tensors a transfer restored and which it re-initialized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferReport {
    pub restored: Vec<String>,
    pub reinitialized: Vec<String>,
}

impl TransferReport {
    /// Distinct layer names among the re-initialized tensors.
    pub fn reinitialized_layers(&self) -> Vec<&str> {
        let mut layers: Vec<&str> = self
            .reinitialized
            .iter()
            .map(|n| n.split_once('.').map_or(n.as_str(), |(layer, _)| layer))
            .collect();
        layers.dedup();
        layers
    }
}

/// The conv/pool stack plus fully-connected head, with per-layer caches for
/// one training step.
#[derive(Debug, Clone)]
pub struct Network<T = f32> {
    config: NetworkConfig,
    num_classes: usize,
    layers: Vec<Layer>,
    params: Vec<Param<T>>,
    caches: Vec<Option<LayerCache<T>>>,
    logits: Option<Tensor<T>>,
    initialized: bool,
}

impl<T: Scalar> Network<T> {
    /// Builds the layer chain after validating every shape. Parameters are
    /// zero until [`Self::init_weights`], a restore, or a transfer.
    pub fn build(config: &NetworkConfig, num_classes: usize) -> Result<Self> {
        let chain = config.shape_chain(num_classes)?;
        let mut layers = Vec::new();
        let mut params = Vec::new();
        let mut channels = config.input_channels;
        for (i, conv) in config.convs.iter().enumerate() {
            let name = format!("conv{}", i + 1);
            let fan_in = channels * conv.kernel * conv.kernel;
            params.push(Param::new(
                format!("{name}.weight"),
                &[conv.filters, channels, conv.kernel, conv.kernel],
                fan_in,
            ));
            params.push(Param::new(format!("{name}.bias"), &[conv.filters], fan_in));
            layers.push(Layer {
                name: name.clone(),
                kind: LayerKind::Conv {
                    weight: params.len() - 2,
                    bias: params.len() - 1,
                },
            });
            if config.conv_relu {
                layers.push(Layer {
                    name: format!("relu{}", i + 1),
                    kind: LayerKind::Relu,
                });
            }
            layers.push(Layer {
                name: format!("pool{}", i + 1),
                kind: LayerKind::MaxPool {
                    window: config.pool_size,
                    stride: config.pool_stride,
                },
            });
            channels = conv.filters;
        }
        let features: usize = chain[chain.len() - 3].shape.iter().product();
        for (name, d, m) in [("fc1", features, config.fc_width), (CLASSIFIER, config.fc_width, num_classes)] {
            params.push(Param::new(format!("{name}.weight"), &[d, m], d));
            params.push(Param::new(format!("{name}.bias"), &[m], d));
            layers.push(Layer {
                name: name.into(),
                kind: LayerKind::Linear {
                    weight: params.len() - 2,
                    bias: params.len() - 1,
                },
            });
            if name == "fc1" {
                layers.push(Layer {
                    name: "relu_fc1".into(),
                    kind: LayerKind::Relu,
                });
                if config.dropout > 0.0 {
                    layers.push(Layer {
                        name: "dropout".into(),
                        kind: LayerKind::Dropout { rate: config.dropout },
                    });
                }
            }
        }
        let caches = vec![None; layers.len()];
        Ok(Network {
            config: config.clone(),
            num_classes,
            layers,
            params,
            caches,
            logits: None,
            initialized: false,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn digest(&self) -> u64 {
        self.config.digest(self.num_classes)
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub(crate) fn mark_initialized(&mut self) {
        self.initialized = true;
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.name.as_str()).collect()
    }

    /// He-normal weights (variance 2 / fan-in), zero biases and velocities.
    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = rng::stream(seed, rng::INIT);
        for p in &mut self.params {
            p.reinit(&mut rng);
        }
        self.initialized = true;
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = input.dims4("network input")?;
        let s = self.config.input_size;
        if c != self.config.input_channels || h != s || w != s {
            return Err(Error::Dimension(format!(
                "network expects [N, {}, {s}, {s}], got {:?}",
                self.config.input_channels,
                input.shape()
            )));
        }
        if !self.initialized {
            return Err(Error::State("network parameters are neither initialized nor loaded".into()));
        }
        Ok(())
    }

    fn layer_forward<R: Rng + ?Sized>(
        &self,
        layer: &Layer,
        x: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor<T>, Option<LayerCache<T>>)> {
        Ok(match layer.kind {
            LayerKind::Conv { weight, bias } => {
                let (y, c) = conv2d_forward(x, &self.params[weight].value, &self.params[bias].value)?;
                (y, Some(c))
            }
            LayerKind::MaxPool { window, stride } => {
                let (y, c) = maxpool_forward(x, window, stride)?;
                (y, Some(c))
            }
            LayerKind::Relu => {
                let (y, c) = relu(x);
                (y, Some(c))
            }
            LayerKind::Linear { weight, bias } => {
                let (y, c) = linear_forward(x, &self.params[weight].value, &self.params[bias].value)?;
                (y, Some(c))
            }
            LayerKind::Dropout { rate } => dropout(x, rate, mode, rng)?,
        })
    }

    /// Inference pass: dropout is the identity and nothing is cached.
    pub fn forward_eval(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        // eval-mode dropout never draws; any generator satisfies the signature
        let mut unused = rng::stream(0, 0);
        let mut x = input.clone();
        for layer in &self.layers {
            x = self.layer_forward(layer, &x, Mode::Eval, &mut unused)?.0;
        }
        Ok(x)
    }

    /// Training pass: dropout draws from `rng` and every layer caches what its
    /// backward pass needs.
    pub fn forward_train<R: Rng + ?Sized>(&mut self, input: &Tensor<T>, rng: &mut R) -> Result<Tensor<T>> {
        self.check_input(input)?;
        let mut x = input.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache) = self.layer_forward(layer, &x, Mode::Train, rng)?;
            caches.push(cache);
            x = y;
        }
        self.caches = caches;
        self.logits = Some(x.clone());
        Ok(x)
    }

    /// Softmax cross-entropy on the cached logits, back-propagated into every
    /// parameter's gradient. Consumes the caches and returns the loss.
    pub fn backward(&mut self, labels: &[usize]) -> Result<T> {
        let logits = self
            .logits
            .take()
            .ok_or_else(|| Error::State("backward called without a preceding training forward".into()))?;
        let out = softmax_cross_entropy(&logits, labels)?;
        let mut upstream = out.d_logits;
        let caches = std::mem::take(&mut self.caches);
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            let cache = cache.ok_or_else(|| Error::State(format!("layer '{}' has no cached forward", layer.name)))?;
            upstream = match layer.kind {
                LayerKind::Conv { weight, bias } => {
                    let g = conv2d_backward(&upstream, &cache)?;
                    self.params[weight].grad = g.weights;
                    self.params[bias].grad = g.bias;
                    g.input
                }
                LayerKind::MaxPool { .. } => maxpool_backward(&upstream, &cache)?,
                LayerKind::Relu => relu_backward(&upstream, &cache)?,
                LayerKind::Linear { weight, bias } => {
                    let g = linear_backward(&upstream, &cache)?;
                    self.params[weight].grad = g.weights;
                    self.params[bias].grad = g.bias;
                    g.input
                }
                LayerKind::Dropout { .. } => dropout_backward(&upstream, &cache)?,
            };
        }
        Ok(out.loss)
    }

    /// Loss of a fresh training forward, without touching gradients.
    pub fn loss<R: Rng + ?Sized>(&mut self, input: &Tensor<T>, labels: &[usize], rng: &mut R) -> Result<T> {
        let logits = self.forward_train(input, rng)?;
        self.logits = None;
        self.caches = vec![None; self.layers.len()];
        Ok(softmax_cross_entropy(&logits, labels)?.loss)
    }

    /// Copies every tensor except the classifier from `source` and draws a
    /// fresh classifier from `seed`.
    pub fn transfer_from(&mut self, source: &[(String, Tensor<T>)], seed: u64) -> Result<TransferReport> {
        let mut plan = Vec::new();
        for (i, p) in self.params.iter().enumerate() {
            if p.is_classifier() {
                continue;
            }
            let Some((_, t)) = source.iter().find(|(n, _)| n == &p.name) else {
                return Err(Error::Transfer {
                    tensor: p.name.clone(),
                    message: "missing from checkpoint".into(),
                });
            };
            if t.shape() != p.value.shape() {
                return Err(Error::Transfer {
                    tensor: p.name.clone(),
                    message: format!("checkpoint shape {:?}, network shape {:?}", t.shape(), p.value.shape()),
                });
            }
            plan.push((i, t));
        }
        let mut report = TransferReport {
            restored: Vec::new(),
            reinitialized: Vec::new(),
        };
        for (i, t) in plan {
            let p = &mut self.params[i];
            p.value = t.clone();
            p.velocity.data_mut().fill(T::zero());
            p.grad.data_mut().fill(T::zero());
            report.restored.push(p.name.clone());
        }
        let mut rng = rng::stream(seed, rng::CLASSIFIER_REINIT);
        for p in self.params.iter_mut().filter(|p| p.is_classifier()) {
            p.reinit(&mut rng);
            report.reinitialized.push(p.name.clone());
        }
        self.initialized = true;
        Ok(report)
    }
}
