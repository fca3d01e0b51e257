//! Network assembly, the training loop, the loss, metrics, and the
//! exhaustive fixed-size sweep protocol.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ofs::{OfsConvLayer, OfsGrads};
use crate::ops;
use crate::rng::Stream;
use crate::tensor::{FilterBank, Tensor};

/// Whether a convolution layer's size is fixed or trained.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FilterMode {
    Fixed {
        size: usize,
    },
    Learned {
        initial_k: f64,
        #[serde(default = "default_k_min")]
        k_min: f64,
        #[serde(default = "default_k_max")]
        k_max: f64,
    },
}

fn default_k_min() -> f64 {
    1.0
}
fn default_k_max() -> f64 {
    11.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub mode: FilterMode,
    /// Insert an average-pooling stage after this layer's rectifier.
    #[serde(default = "default_true")]
    pub pool_after: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    #[serde(default = "default_pool")]
    pub window: usize,
    #[serde(default = "default_pool")]
    pub stride: usize,
}

fn default_pool() -> usize {
    3
}

impl Default for PoolSpec {
    fn default() -> Self {
        PoolSpec { window: 3, stride: 3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_positive_weight")]
    pub positive_weight: f64,
}

fn default_positive_weight() -> f64 {
    1.0
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { positive_weight: 1.0 }
    }
}

/// Declarative layer stack: conv stages (each conv -> rectifier -> optional
/// pool), then one hidden affine layer and a single-node output layer.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_resolution: (usize, usize),
    pub conv_layers: Vec<ConvLayerSpec>,
    #[serde(default)]
    pub pool: PoolSpec,
    #[serde(default = "default_fc_nodes")]
    pub fc_nodes: usize,
    #[serde(default)]
    pub loss: LossConfig,
}

fn default_fc_nodes() -> usize {
    64
}

impl NetworkSpec {
    /// Three conv stages of 32, 32, 64 channels with pooling after the
    /// first two, a 64-node hidden layer, and a one-node output — every
    /// conv size learned starting from 4.
    pub fn default_three_layer(input_resolution: (usize, usize)) -> Self {
        let learned = |out_channels| ConvLayerSpec {
            out_channels,
            mode: FilterMode::Learned {
                initial_k: 4.0,
                k_min: 1.0,
                k_max: 11.0,
            },
            pool_after: true,
        };
        let mut conv_layers = vec![learned(32), learned(32), learned(64)];
        conv_layers[2].pool_after = false;
        NetworkSpec {
            input_resolution,
            conv_layers,
            pool: PoolSpec::default(),
            fc_nodes: 64,
            loss: LossConfig::default(),
        }
    }

    /// Same stack with every conv size fixed at `size`.
    pub fn with_fixed_sizes(&self, size: usize) -> Self {
        let mut spec = self.clone();
        for cl in &mut spec.conv_layers {
            cl.mode = FilterMode::Fixed { size };
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_layers.is_empty() {
            return Err(Error::InvalidArgument("at least one conv layer required".into()));
        }
        if self.pool.window == 0 || self.pool.stride == 0 {
            return Err(Error::InvalidArgument("pool window/stride must be >= 1".into()));
        }
        if self.fc_nodes == 0 {
            return Err(Error::InvalidArgument("fc_nodes must be >= 1".into()));
        }
        if !(self.loss.positive_weight > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "positive_weight must be > 0, got {}",
                self.loss.positive_weight
            )));
        }
        for (i, cl) in self.conv_layers.iter().enumerate() {
            match cl.mode {
                FilterMode::Fixed { size } => {
                    if size % 2 == 0 || size == 0 {
                        return Err(Error::InvalidArgument(format!(
                            "conv layer {i}: fixed size must be odd and >= 1, got {size}"
                        )));
                    }
                }
                FilterMode::Learned { initial_k, k_min, k_max } => {
                    if !(k_min >= 1.0 && k_min <= k_max) {
                        return Err(Error::InvalidArgument(format!(
                            "conv layer {i}: clamp range [{k_min}, {k_max}] invalid"
                        )));
                    }
                    if !(initial_k >= k_min && initial_k <= k_max) {
                        return Err(Error::InvalidArgument(format!(
                            "conv layer {i}: initial_k {initial_k} outside [{k_min}, {k_max}]"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Optimizer and run-control hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_weight_lr")]
    pub weight_lr: f64,
    /// Learning rate of the filter-size parameter.
    #[serde(default = "default_size_lr")]
    pub size_lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    /// Apply the shared momentum coefficient to the size update as well.
    #[serde(default = "default_true")]
    pub size_momentum_enabled: bool,
    /// Apply weight decay to the size parameter (off by default).
    #[serde(default)]
    pub size_weight_decay_enabled: bool,
    /// Iteration whose recorded sizes count as "converged" in reports.
    #[serde(default = "default_iterations")]
    pub report_iteration: usize,
}

fn default_weight_lr() -> f64 {
    0.01
}
fn default_size_lr() -> f64 {
    1e-3
}
fn default_momentum() -> f64 {
    0.9
}
fn default_batch_size() -> usize {
    100
}
fn default_iterations() -> usize {
    2000
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            weight_lr: default_weight_lr(),
            size_lr: default_size_lr(),
            momentum: default_momentum(),
            weight_decay: 0.0,
            batch_size: default_batch_size(),
            iterations: default_iterations(),
            seed: 0,
            size_momentum_enabled: true,
            size_weight_decay_enabled: false,
            report_iteration: default_iterations(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.weight_lr < 0.0 || self.size_lr < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("learning rates must be >= 0".into()));
        }
        Ok(())
    }
}

/// Numerically stable `ln(1 + exp(x))`.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic function, stable for large |z|.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Weighted sigmoid cross entropy of a single logit against a binary
/// target, with its analytic gradient:
/// `loss = -[w * t * ln(sigma(z)) + (1 - t) * ln(1 - sigma(z))]`.
pub fn weighted_sigmoid_ce(logit: f64, target: u8, positive_weight: f64) -> (f64, f64) {
    let t = f64::from(target);
    let s = sigmoid(logit);
    let loss = positive_weight * t * softplus(-logit) + (1.0 - t) * softplus(logit);
    let grad = positive_weight * t * (s - 1.0) + (1.0 - t) * s;
    (loss, grad)
}

/// Fixed-size same-padded convolution layer with momentum state.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub filters: FilterBank,
    pub bias: Vec<f64>,
    pub momentum_filters: Tensor,
    pub momentum_bias: Vec<f64>,
    cached_input: Option<Tensor>,
}

impl ConvLayer {
    pub fn new(out_channels: usize, in_channels: usize, size: usize, init: &mut Stream) -> Result<Self> {
        let fan_in = (in_channels * size * size) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let n = out_channels * in_channels * size * size;
        let data: Vec<f64> = (0..n).map(|_| init.uniform_in(-bound, bound)).collect();
        let filters = FilterBank::new(
            out_channels,
            in_channels,
            size,
            Tensor::new(vec![out_channels, in_channels, size, size], data)?,
        )?;
        Ok(ConvLayer {
            momentum_filters: Tensor::zeros(filters.weights.shape.clone()),
            momentum_bias: vec![0.0; out_channels],
            bias: vec![0.0; out_channels],
            filters,
            cached_input: None,
        })
    }
}

/// Affine layer with momentum state.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weights: Tensor,
    pub bias: Vec<f64>,
    pub momentum_weights: Tensor,
    pub momentum_bias: Vec<f64>,
    cached_input: Option<Tensor>,
}

impl LinearLayer {
    pub fn new(out_nodes: usize, in_nodes: usize, init: &mut Stream) -> Result<Self> {
        let bound = 1.0 / (in_nodes as f64).sqrt();
        let data: Vec<f64> = (0..out_nodes * in_nodes)
            .map(|_| init.uniform_in(-bound, bound))
            .collect();
        Ok(LinearLayer {
            weights: Tensor::new(vec![out_nodes, in_nodes], data)?,
            bias: vec![0.0; out_nodes],
            momentum_weights: Tensor::zeros(vec![out_nodes, in_nodes]),
            momentum_bias: vec![0.0; out_nodes],
            cached_input: None,
        })
    }
}

/// One stage of the assembled network.
#[derive(Debug, Clone)]
pub enum Layer {
    OfsConv(OfsConvLayer),
    Conv(ConvLayer),
    Relu { cached_input: Option<Tensor> },
    Pool { window: usize, stride: usize, cached_shape: Option<Vec<usize>> },
    Flatten { cached_shape: Option<Vec<usize>> },
    Linear(LinearLayer),
}

/// Gradients for one layer, aligned with [`Layer`].
#[derive(Debug, Clone)]
pub enum LayerGrads {
    OfsConv { filters: Tensor, bias: Vec<f64>, size: f64 },
    Conv { filters: Tensor, bias: Vec<f64> },
    Linear { weights: Tensor, bias: Vec<f64> },
    Stateless,
}

#[derive(Debug, Clone)]
pub struct NetworkGrads {
    pub layers: Vec<LayerGrads>,
    pub input: Option<Tensor>,
}

/// An assembled, trainable network.
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    loss: LossConfig,
    /// FNV-1a digest of all rectifier activation masks from the last
    /// forward pass; a changed digest means a rectifier kink was crossed.
    last_mask_sig: u64,
}

impl Network {
    /// Build and initialize a network. All randomness derives from `seed`
    /// via labeled substreams (one per parameterized layer).
    pub fn new(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let init_root = Stream::new(seed).derive("init");
        let (h0, w0) = spec.input_resolution;
        let mut layers = Vec::new();
        let (mut c, mut h, mut w) = (1usize, h0, w0);

        for (i, cl) in spec.conv_layers.iter().enumerate() {
            let mut stream = init_root.derive(&format!("conv{i}"));
            match cl.mode {
                FilterMode::Fixed { size } => {
                    layers.push(Layer::Conv(ConvLayer::new(cl.out_channels, c, size, &mut stream)?));
                }
                FilterMode::Learned { initial_k, k_min, k_max } => {
                    layers.push(Layer::OfsConv(OfsConvLayer::new(
                        cl.out_channels,
                        c,
                        initial_k,
                        k_min,
                        k_max,
                        &mut stream,
                    )?));
                }
            }
            c = cl.out_channels;
            layers.push(Layer::Relu { cached_input: None });
            if cl.pool_after {
                if spec.pool.window > h || spec.pool.window > w {
                    return Err(Error::InvalidArgument(format!(
                        "pool window {} exceeds feature map {h}x{w} after conv layer {i}",
                        spec.pool.window
                    )));
                }
                h = (h - spec.pool.window) / spec.pool.stride + 1;
                w = (w - spec.pool.window) / spec.pool.stride + 1;
                layers.push(Layer::Pool {
                    window: spec.pool.window,
                    stride: spec.pool.stride,
                    cached_shape: None,
                });
            }
        }

        layers.push(Layer::Flatten { cached_shape: None });
        let flat = c * h * w;
        let mut s1 = init_root.derive("fc_hidden");
        layers.push(Layer::Linear(LinearLayer::new(spec.fc_nodes, flat, &mut s1)?));
        let mut s2 = init_root.derive("fc_output");
        layers.push(Layer::Linear(LinearLayer::new(1, spec.fc_nodes, &mut s2)?));

        Ok(Network {
            layers,
            loss: spec.loss.clone(),
            last_mask_sig: 0,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn loss_config(&self) -> &LossConfig {
        &self.loss
    }

    /// Indices of the layers holding a learned filter size, in order.
    pub fn learned_size_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, Layer::OfsConv(_)).then_some(i))
            .collect()
    }

    /// Forward pass through the stack; returns the logits (B, 1).
    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let mut mask_sig: u64 = 0xcbf29ce484222325;
        let mut x = input.clone();
        for layer in &mut self.layers {
            x = match layer {
                Layer::OfsConv(l) => l.forward(&x)?,
                Layer::Conv(l) => {
                    let out = ops::conv2d_same(&x, &l.filters, &l.bias)?;
                    l.cached_input = Some(x);
                    out
                }
                Layer::Relu { cached_input } => {
                    for &v in &x.data {
                        mask_sig ^= u64::from(v > 0.0);
                        mask_sig = mask_sig.wrapping_mul(0x100000001b3);
                    }
                    let out = ops::relu(&x);
                    *cached_input = Some(x);
                    out
                }
                Layer::Pool { window, stride, cached_shape } => {
                    let out = ops::avg_pool(&x, *window, *stride)?;
                    *cached_shape = Some(x.shape.clone());
                    out
                }
                Layer::Flatten { cached_shape } => {
                    let (b, c, h, w) = x.dims4("flatten input")?;
                    *cached_shape = Some(x.shape.clone());
                    x.reshaped(vec![b, c * h * w])?
                }
                Layer::Linear(l) => {
                    let out = ops::linear(&x, &l.weights, &l.bias)?;
                    l.cached_input = Some(x);
                    out
                }
            };
        }
        self.last_mask_sig = mask_sig;
        Ok(x)
    }

    /// Digest of the rectifier masks from the last forward pass.
    pub fn last_mask_sig(&self) -> u64 {
        self.last_mask_sig
    }

    /// Mean loss over the batch, with the per-logit gradient already
    /// divided by the batch size.
    pub fn loss_and_dlogits(&self, logits: &Tensor, labels: &[u8]) -> Result<(f64, Tensor)> {
        let (b, m) = logits.dims2("loss logits")?;
        if m != 1 || b != labels.len() {
            return Err(Error::shape(
                "loss_and_dlogits",
                format!("logits [{}, 1]", labels.len()),
                format!("{:?}", logits.shape),
            ));
        }
        let inv_b = 1.0 / b as f64;
        let mut total = 0.0;
        let mut dlogits = Tensor::zeros(vec![b, 1]);
        for i in 0..b {
            let (loss, grad) = weighted_sigmoid_ce(logits.data[i], labels[i], self.loss.positive_weight);
            total += loss;
            dlogits.data[i] = grad * inv_b;
        }
        Ok((total * inv_b, dlogits))
    }

    /// Forward pass plus loss; the path finite-difference probes use.
    pub fn batch_loss(&mut self, input: &Tensor, labels: &[u8]) -> Result<f64> {
        let logits = self.forward(input)?;
        Ok(self.loss_and_dlogits(&logits, labels)?.0)
    }

    /// Backward pass from the logits gradient, collecting every parameter
    /// gradient (and the input gradient when requested).
    pub fn backward(&self, dlogits: &Tensor, want_input_grad: bool) -> Result<NetworkGrads> {
        let mut grads = vec![];
        let mut upstream = dlogits.clone();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let need_below = want_input_grad || idx > 0;
            let g = match layer {
                Layer::OfsConv(l) => {
                    let OfsGrads { filters, bias, size, input } = l.backward(&upstream, need_below)?;
                    if let Some(gin) = input {
                        upstream = gin;
                    }
                    LayerGrads::OfsConv { filters, bias, size }
                }
                Layer::Conv(l) => {
                    let cached = l
                        .cached_input
                        .as_ref()
                        .ok_or(Error::NoForwardCache("Conv backward"))?;
                    let (gin, gw, gb) =
                        ops::conv2d_same_backward(cached, &l.filters, &upstream, need_below)?;
                    if let Some(gin) = gin {
                        upstream = gin;
                    }
                    LayerGrads::Conv { filters: gw, bias: gb }
                }
                Layer::Relu { cached_input } => {
                    let cached = cached_input
                        .as_ref()
                        .ok_or(Error::NoForwardCache("Relu backward"))?;
                    upstream = ops::relu_backward(cached, &upstream);
                    LayerGrads::Stateless
                }
                Layer::Pool { window, stride, cached_shape } => {
                    let shape = cached_shape
                        .as_ref()
                        .ok_or(Error::NoForwardCache("Pool backward"))?;
                    upstream = ops::avg_pool_backward(shape, *window, *stride, &upstream)?;
                    LayerGrads::Stateless
                }
                Layer::Flatten { cached_shape } => {
                    let shape = cached_shape
                        .as_ref()
                        .ok_or(Error::NoForwardCache("Flatten backward"))?;
                    upstream = upstream.reshaped(shape.clone())?;
                    LayerGrads::Stateless
                }
                Layer::Linear(l) => {
                    let cached = l
                        .cached_input
                        .as_ref()
                        .ok_or(Error::NoForwardCache("Linear backward"))?;
                    let (gin, gw, gb) = ops::linear_backward(cached, &l.weights, &upstream)?;
                    upstream = gin;
                    LayerGrads::Linear { weights: gw, bias: gb }
                }
            };
            grads.push(g);
        }
        grads.reverse();
        Ok(NetworkGrads {
            layers: grads,
            input: want_input_grad.then_some(upstream),
        })
    }

    /// One full forward/backward evaluation of a batch.
    pub fn forward_backward(
        &mut self,
        input: &Tensor,
        labels: &[u8],
        want_input_grad: bool,
    ) -> Result<(f64, NetworkGrads)> {
        let logits = self.forward(input)?;
        let (loss, dlogits) = self.loss_and_dlogits(&logits, labels)?;
        let grads = self.backward(&dlogits, want_input_grad)?;
        Ok((loss, grads))
    }

    /// Apply one SGD step. Weights and biases update first; each learned
    /// size then takes its own step and any expand/shrink transformation
    /// runs last.
    pub fn apply_updates(&mut self, grads: &NetworkGrads, opt: &OptimizerConfig) -> Result<()> {
        let size_momentum = if opt.size_momentum_enabled { opt.momentum } else { 0.0 };
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            match (layer, g) {
                (Layer::OfsConv(l), LayerGrads::OfsConv { filters, bias, size }) => {
                    l.apply_sgd(filters, bias, opt.weight_lr, opt.momentum, opt.weight_decay);
                    let mut gsize = *size;
                    if opt.size_weight_decay_enabled {
                        gsize += opt.weight_decay * l.size().k();
                    }
                    let k_new = l.sgd_step_size(gsize, opt.size_lr, size_momentum);
                    l.transform_if_needed(k_new)?;
                }
                (Layer::Conv(l), LayerGrads::Conv { filters, bias }) => {
                    for ((w, v), &g) in l
                        .filters
                        .weights
                        .data
                        .iter_mut()
                        .zip(&mut l.momentum_filters.data)
                        .zip(&filters.data)
                    {
                        *v = opt.momentum * *v + g + opt.weight_decay * *w;
                        *w -= opt.weight_lr * *v;
                    }
                    for ((b, v), &g) in l.bias.iter_mut().zip(&mut l.momentum_bias).zip(bias) {
                        *v = opt.momentum * *v + g;
                        *b -= opt.weight_lr * *v;
                    }
                }
                (Layer::Linear(l), LayerGrads::Linear { weights, bias }) => {
                    for ((w, v), &g) in l
                        .weights
                        .data
                        .iter_mut()
                        .zip(&mut l.momentum_weights.data)
                        .zip(&weights.data)
                    {
                        *v = opt.momentum * *v + g + opt.weight_decay * *w;
                        *w -= opt.weight_lr * *v;
                    }
                    for ((b, v), &g) in l.bias.iter_mut().zip(&mut l.momentum_bias).zip(bias) {
                        *v = opt.momentum * *v + g;
                        *b -= opt.weight_lr * *v;
                    }
                }
                (_, LayerGrads::Stateless) => {}
                _ => {
                    return Err(Error::InvalidArgument(
                        "gradient/layer kind mismatch in apply_updates".into(),
                    ))
                }
            }
        }
        Ok(())
    }
}

/// State of one learned size at the end of an iteration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SizeRecord {
    pub k: f64,
    pub k_minus: usize,
    pub k_plus: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub loss: f64,
    pub sizes: Vec<SizeRecord>,
}

/// Classification metrics. `two_afc` is absent for single-class data.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Metrics {
    pub f1: f64,
    pub two_afc: Option<f64>,
    pub accuracy: f64,
}

/// Per-iteration record of the mini-batch loss and every learned size.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct TrainingTrace {
    pub records: Vec<TraceRecord>,
    pub final_metrics: Option<Metrics>,
}

impl TrainingTrace {
    /// Learned k values at the report iteration (or the last record if the
    /// run was shorter).
    pub fn converged_sizes(&self, report_iteration: usize) -> Vec<f64> {
        let record = self
            .records
            .iter()
            .rev()
            .find(|r| r.iteration <= report_iteration)
            .or(self.records.last());
        record.map_or(vec![], |r| r.sizes.iter().map(|s| s.k).collect())
    }
}

/// Deterministic mini-batch index source: reshuffles each epoch, drops the
/// trailing partial batch.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: Stream,
}

impl BatchSampler {
    fn new(n: usize, batch: usize, rng: Stream) -> Self {
        BatchSampler {
            order: (0..n).collect(),
            pos: usize::MAX, // force an initial shuffle
            batch: batch.min(n),
            rng,
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.pos > self.order.len() - self.batch {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

/// Train a network for `opt.iterations` mini-batch steps. Each iteration
/// runs forward with the composite filters, backward for sizes, filters,
/// biases, and inputs, the SGD updates, and any size transformation.
/// Deterministic given the seed. Aborts when the loss stops being finite.
pub fn train(spec: &NetworkSpec, opt: &OptimizerConfig, data: &Dataset) -> Result<TrainingTrace> {
    opt.validate()?;
    let mut network = Network::new(spec, opt.seed)?;
    let trace = train_network(&mut network, opt, data)?;
    Ok(trace)
}

/// As [`train`], but keeps the caller's network (so the trained model can
/// be evaluated or checkpointed afterwards).
pub fn train_network(
    network: &mut Network,
    opt: &OptimizerConfig,
    data: &Dataset,
) -> Result<TrainingTrace> {
    opt.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let mut sampler = BatchSampler::new(
        data.len(),
        opt.batch_size,
        Stream::new(opt.seed).derive("shuffle"),
    );
    let mut trace = TrainingTrace::default();

    for t in 1..=opt.iterations {
        let indices = sampler.next_batch();
        let (x, y) = data.batch(&indices);
        let (loss, grads) = network.forward_backward(&x, &y, false)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration: t,
                trace: Box::new(trace),
            });
        }
        network.apply_updates(&grads, opt)?;
        let sizes = network
            .layers()
            .iter()
            .filter_map(|l| match l {
                Layer::OfsConv(l) => Some(SizeRecord {
                    k: l.size().k(),
                    k_minus: l.size().k_minus(),
                    k_plus: l.size().k_plus(),
                    alpha: l.size().alpha(),
                }),
                _ => None,
            })
            .collect();
        trace.records.push(TraceRecord { iteration: t, loss, sizes });
    }
    Ok(trace)
}

/// Raw classifier scores (sigmoid of the logit) for every sample.
pub fn scores(network: &mut Network, data: &Dataset) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(100) {
        let (x, _) = data.batch(chunk);
        let logits = network.forward(&x)?;
        out.extend(logits.data.iter().map(|&z| sigmoid(z)));
    }
    Ok(out)
}

/// F1 from thresholded scores, exact pairwise 2AFC (ties count 0.5), and
/// plain accuracy.
pub fn evaluate(network: &mut Network, data: &Dataset, threshold: f64) -> Result<Metrics> {
    let s = scores(network, data)?;
    Ok(metrics_from_scores(&s, &data.labels, threshold))
}

pub fn metrics_from_scores(scores: &[f64], labels: &[u8], threshold: f64) -> Metrics {
    let (mut tp, mut fp, mut r#fn, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        let pred = s >= threshold;
        match (pred, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => r#fn += 1,
            (false, false) => tn += 1,
        }
    }
    let denom = 2 * tp + fp + r#fn;
    let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
    let accuracy = (tp + tn) as f64 / labels.len().max(1) as f64;

    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter_map(|(&s, &l)| (l == 1).then_some(s))
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter_map(|(&s, &l)| (l == 0).then_some(s))
        .collect();
    let two_afc = if pos.is_empty() || neg.is_empty() {
        None
    } else {
        let mut acc = 0.0;
        for &p in &pos {
            for &n in &neg {
                acc += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        Some(acc / (pos.len() * neg.len()) as f64)
    };

    Metrics { f1, two_afc, accuracy }
}

/// One row of the exhaustive-sweep comparison table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    /// "fixed3", "fixed5", ... or "ofs".
    pub config: String,
    /// Seed for data rows; `None` marks the per-config aggregate row.
    pub seed: Option<u64>,
    pub status: String,
    pub f1: Option<f64>,
    pub two_afc: Option<f64>,
    pub accuracy: Option<f64>,
    /// Converged k per learned layer at the report iteration; empty for
    /// fixed-size rows.
    pub converged_sizes: Vec<f64>,
}

/// Train one fixed-size network per (size, seed) plus the learned-size
/// variant per seed, all on identical data, and report per-seed metrics
/// plus per-config means. Runs are independent and may execute on
/// `threads` worker threads without changing any result.
pub fn exhaustive_sweep(
    template: &NetworkSpec,
    sizes: &[usize],
    seeds: &[u64],
    opt: &OptimizerConfig,
    train_data: &Dataset,
    eval_data: &Dataset,
    threads: usize,
) -> Result<Vec<SweepRow>> {
    for &s in sizes {
        if s % 2 == 0 || s == 0 {
            return Err(Error::InvalidArgument(format!(
                "sweep sizes must be odd and >= 1, got {s}"
            )));
        }
    }
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one seed".into()));
    }

    struct Job {
        config: String,
        spec: NetworkSpec,
        seed: u64,
    }
    let mut jobs = Vec::new();
    for &size in sizes {
        for &seed in seeds {
            jobs.push(Job {
                config: format!("fixed{size}"),
                spec: template.with_fixed_sizes(size),
                seed,
            });
        }
    }
    for &seed in seeds {
        jobs.push(Job {
            config: "ofs".to_string(),
            spec: template.clone(),
            seed,
        });
    }

    let run_job = |job: &Job| -> SweepRow {
        let mut run_opt = opt.clone();
        run_opt.seed = job.seed;
        let mut network = match Network::new(&job.spec, run_opt.seed) {
            Ok(n) => n,
            Err(e) => {
                return SweepRow {
                    config: job.config.clone(),
                    seed: Some(job.seed),
                    status: format!("failed: {e}"),
                    f1: None,
                    two_afc: None,
                    accuracy: None,
                    converged_sizes: vec![],
                }
            }
        };
        match train_network(&mut network, &run_opt, train_data) {
            Ok(trace) => {
                let metrics = match evaluate(&mut network, eval_data, 0.5) {
                    Ok(m) => m,
                    Err(e) => {
                        return SweepRow {
                            config: job.config.clone(),
                            seed: Some(job.seed),
                            status: format!("failed: {e}"),
                            f1: None,
                            two_afc: None,
                            accuracy: None,
                            converged_sizes: vec![],
                        }
                    }
                };
                SweepRow {
                    config: job.config.clone(),
                    seed: Some(job.seed),
                    status: "ok".to_string(),
                    f1: Some(metrics.f1),
                    two_afc: metrics.two_afc,
                    accuracy: Some(metrics.accuracy),
                    converged_sizes: trace.converged_sizes(run_opt.report_iteration),
                }
            }
            Err(e) => SweepRow {
                config: job.config.clone(),
                seed: Some(job.seed),
                status: format!("failed: {e}"),
                f1: None,
                two_afc: None,
                accuracy: None,
                converged_sizes: vec![],
            },
        }
    };

    let threads = threads.max(1);
    let mut results: Vec<Option<SweepRow>> = (0..jobs.len()).map(|_| None).collect();
    if threads == 1 {
        for (i, job) in jobs.iter().enumerate() {
            results[i] = Some(run_job(job));
        }
    } else {
        use std::sync::atomic::{AtomicUsize, Ordering};
        use std::sync::Mutex;
        let next = AtomicUsize::new(0);
        let slots = Mutex::new(&mut results);
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= jobs.len() {
                        break;
                    }
                    let row = run_job(&jobs[i]);
                    slots.lock().unwrap()[i] = Some(row);
                });
            }
        });
    }
    let mut rows: Vec<SweepRow> = results.into_iter().map(|r| r.expect("job ran")).collect();

    // Per-config aggregate rows (mean over the seeds that succeeded).
    let mut configs: Vec<String> = Vec::new();
    for row in &rows {
        if !configs.contains(&row.config) {
            configs.push(row.config.clone());
        }
    }
    let mut aggregates = Vec::new();
    for config in configs {
        let ok: Vec<&SweepRow> = rows
            .iter()
            .filter(|r| r.config == config && r.status == "ok")
            .collect();
        let mean = |get: &dyn Fn(&SweepRow) -> Option<f64>| -> Option<f64> {
            let vals: Vec<f64> = ok.iter().filter_map(|r| get(r)).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let n_sizes = ok.first().map_or(0, |r| r.converged_sizes.len());
        let converged_sizes = (0..n_sizes)
            .map(|i| ok.iter().map(|r| r.converged_sizes[i]).sum::<f64>() / ok.len() as f64)
            .collect();
        aggregates.push(SweepRow {
            config,
            seed: None,
            status: if ok.is_empty() { "failed".into() } else { "ok".into() },
            f1: mean(&|r| r.f1),
            two_afc: mean(&|r| r.two_afc),
            accuracy: mean(&|r| r.accuracy),
            converged_sizes,
        });
    }
    rows.extend(aggregates);
    Ok(rows)
}
