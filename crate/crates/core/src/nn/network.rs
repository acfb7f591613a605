//! The fixed ten-layer classifier:
//!
//! ```text
//! Resizing(32, 32) -> Normalization -> Conv2D(32, 3x3, relu) -> Conv2D(64, 3x3, relu)
//!   -> MaxPool(2x2) -> Dropout(0.25) -> Flatten -> Dense(128, relu) -> Dropout(0.5)
//!   -> Dense(classes)
//! ```
//!
//! Every size is a field of [`NetworkConfig`] so tests can shrink the
//! network; [`NetworkConfig::canonical`] gives the production stack.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::layers::{self, DropoutMode};
use crate::rng::{self, Purpose};
use crate::tensor::{Real, Tensor};

/// Spectrogram input size, frames x bins.
pub const INPUT_HEIGHT: usize = 124;
pub const INPUT_WIDTH: usize = 129;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub resize_height: usize,
    pub resize_width: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub kernel_size: usize,
    pub dense_units: usize,
    pub dropout1: f64,
    pub dropout2: f64,
    pub class_count: usize,
}

impl NetworkConfig {
    pub fn canonical(class_count: usize) -> Self {
        Self {
            input_height: INPUT_HEIGHT,
            input_width: INPUT_WIDTH,
            resize_height: 32,
            resize_width: 32,
            conv1_filters: 32,
            conv2_filters: 64,
            kernel_size: 3,
            dense_units: 128,
            dropout1: 0.25,
            dropout2: 0.5,
            class_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.kernel_size;
        if k == 0 {
            return Err(Error::Config("kernel size must be positive".into()));
        }
        let dims = [
            self.input_height,
            self.input_width,
            self.conv1_filters,
            self.conv2_filters,
            self.dense_units,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("zero-sized layer in {self:?}")));
        }
        if self.class_count < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.class_count
            )));
        }
        let (ch, cw) = self.conv2_hw();
        if self.resize_height < 2 * (k - 1) + 2 || self.resize_width < 2 * (k - 1) + 2 || ch % 2 != 0 || cw % 2 != 0 {
            return Err(Error::Config(format!(
                "resize {}x{} leaves no even feature map after two {k}x{k} convolutions",
                self.resize_height, self.resize_width
            )));
        }
        layers::check_drop_rate(self.dropout1)?;
        layers::check_drop_rate(self.dropout2)?;
        Ok(())
    }

    fn conv1_hw(&self) -> (usize, usize) {
        let k = self.kernel_size - 1;
        (self.resize_height.saturating_sub(k), self.resize_width.saturating_sub(k))
    }

    fn conv2_hw(&self) -> (usize, usize) {
        let (h, w) = self.conv1_hw();
        let k = self.kernel_size - 1;
        (h.saturating_sub(k), w.saturating_sub(k))
    }

    pub fn flat_features(&self) -> usize {
        let (h, w) = self.conv2_hw();
        (h / 2) * (w / 2) * self.conv2_filters
    }

    /// Output shape of each of the ten layers, in order.
    pub fn shape_chain(&self) -> Vec<Vec<usize>> {
        let (rh, rw) = (self.resize_height, self.resize_width);
        let (h1, w1) = self.conv1_hw();
        let (h2, w2) = self.conv2_hw();
        let pooled = vec![h2 / 2, w2 / 2, self.conv2_filters];
        vec![
            vec![rh, rw, 1],
            vec![rh, rw, 1],
            vec![h1, w1, self.conv1_filters],
            vec![h2, w2, self.conv2_filters],
            pooled.clone(),
            pooled,
            vec![self.flat_features()],
            vec![self.dense_units],
            vec![self.dense_units],
            vec![self.class_count],
        ]
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let k = self.kernel_size;
        vec![
            LayerSpec::Resize { height: self.resize_height, width: self.resize_width },
            LayerSpec::Normalize,
            LayerSpec::Conv2d { filters: self.conv1_filters, kernel: k, relu: true },
            LayerSpec::Conv2d { filters: self.conv2_filters, kernel: k, relu: true },
            LayerSpec::MaxPool2d { pool: 2 },
            LayerSpec::Dropout { rate: self.dropout1 },
            LayerSpec::Flatten,
            LayerSpec::Dense { units: self.dense_units, relu: true },
            LayerSpec::Dropout { rate: self.dropout2 },
            LayerSpec::Dense { units: self.class_count, relu: false },
        ]
    }

    /// Inverse of [`layer_specs`](Self::layer_specs); rejects anything that
    /// is not the canonical layer order.
    pub fn from_layer_specs(input_height: usize, input_width: usize, specs: &[LayerSpec]) -> Result<Self> {
        use LayerSpec::*;
        let cfg = match *specs {
            [Resize { height, width }, Normalize, Conv2d { filters: f1, kernel: k1, relu: true }, Conv2d { filters: f2, kernel: k2, relu: true }, MaxPool2d { pool: 2 }, Dropout { rate: r1 }, Flatten, Dense { units, relu: true }, Dropout { rate: r2 }, Dense { units: classes, relu: false }]
                if k1 == k2 =>
            {
                NetworkConfig {
                    input_height,
                    input_width,
                    resize_height: height,
                    resize_width: width,
                    conv1_filters: f1,
                    conv2_filters: f2,
                    kernel_size: k1,
                    dense_units: units,
                    dropout1: r1,
                    dropout2: r2,
                    class_count: classes,
                }
            }
            _ => {
                return Err(Error::Config(format!(
                    "unsupported layer stack {specs:?}"
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn param_shapes(&self) -> [Vec<usize>; 8] {
        let k = self.kernel_size;
        [
            vec![k, k, 1, self.conv1_filters],
            vec![self.conv1_filters],
            vec![k, k, self.conv1_filters, self.conv2_filters],
            vec![self.conv2_filters],
            vec![self.flat_features(), self.dense_units],
            vec![self.dense_units],
            vec![self.dense_units, self.class_count],
            vec![self.class_count],
        ]
    }
}

/// One entry of the layer stack. Activations are fused into the layer they
/// follow, which keeps the stack at the ten layers it is documented with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Resize { height: usize, width: usize },
    Normalize,
    Conv2d { filters: usize, kernel: usize, relu: bool },
    MaxPool2d { pool: usize },
    Dropout { rate: f64 },
    Flatten,
    Dense { units: usize, relu: bool },
}

/// Scalar statistics used by the normalization layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub variance: f64,
}

impl Default for NormStats {
    fn default() -> Self {
        Self {
            mean: 0.0,
            variance: 1.0,
        }
    }
}

/// The trainable tensors, in storage order. Doubles as the gradient set.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub conv1_kernel: Tensor<T>,
    pub conv1_bias: Tensor<T>,
    pub conv2_kernel: Tensor<T>,
    pub conv2_bias: Tensor<T>,
    pub dense1_weight: Tensor<T>,
    pub dense1_bias: Tensor<T>,
    pub dense2_weight: Tensor<T>,
    pub dense2_bias: Tensor<T>,
}

pub type Gradients<T> = Params<T>;

pub const PARAM_NAMES: [&str; 8] = [
    "conv1.kernel",
    "conv1.bias",
    "conv2.kernel",
    "conv2.bias",
    "dense1.weight",
    "dense1.bias",
    "dense2.weight",
    "dense2.bias",
];

impl<T: Real> Params<T> {
    pub fn zeros(cfg: &NetworkConfig) -> Self {
        let [a, b, c, d, e, f, g, h] = cfg.param_shapes();
        Self {
            conv1_kernel: Tensor::zeros(&a),
            conv1_bias: Tensor::zeros(&b),
            conv2_kernel: Tensor::zeros(&c),
            conv2_bias: Tensor::zeros(&d),
            dense1_weight: Tensor::zeros(&e),
            dense1_bias: Tensor::zeros(&f),
            dense2_weight: Tensor::zeros(&g),
            dense2_bias: Tensor::zeros(&h),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor<T>| Tensor::zeros(t.shape());
        Self {
            conv1_kernel: z(&self.conv1_kernel),
            conv1_bias: z(&self.conv1_bias),
            conv2_kernel: z(&self.conv2_kernel),
            conv2_bias: z(&self.conv2_bias),
            dense1_weight: z(&self.dense1_weight),
            dense1_bias: z(&self.dense1_bias),
            dense2_weight: z(&self.dense2_weight),
            dense2_bias: z(&self.dense2_bias),
        }
    }

    pub fn tensors(&self) -> [&Tensor<T>; 8] {
        [
            &self.conv1_kernel,
            &self.conv1_bias,
            &self.conv2_kernel,
            &self.conv2_bias,
            &self.dense1_weight,
            &self.dense1_bias,
            &self.dense2_weight,
            &self.dense2_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 8] {
        [
            &mut self.conv1_kernel,
            &mut self.conv1_bias,
            &mut self.conv2_kernel,
            &mut self.conv2_bias,
            &mut self.dense1_weight,
            &mut self.dense1_bias,
            &mut self.dense2_weight,
            &mut self.dense2_bias,
        ]
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            t.scale(factor);
        }
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            conv1_kernel: self.conv1_kernel.cast(),
            conv1_bias: self.conv1_bias.cast(),
            conv2_kernel: self.conv2_kernel.cast(),
            conv2_bias: self.conv2_bias.cast(),
            dense1_weight: self.dense1_weight.cast(),
            dense1_bias: self.dense1_bias.cast(),
            dense2_weight: self.dense2_weight.cast(),
            dense2_bias: self.dense2_bias.cast(),
        }
    }
}

static STAMPS: AtomicU64 = AtomicU64::new(1);

fn next_stamp() -> u64 {
    STAMPS.fetch_add(1, Ordering::Relaxed)
}

/// How a forward pass treats dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Infer,
    /// Dropout on, masks drawn from the network seed's dropout stream with this index.
    Train { stream: u64 },
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    config: NetworkConfig,
    norm: NormStats,
    params: Params<T>,
    seed: u64,
    /// Changes whenever parameters may have changed; ties caches to weights.
    stamp: u64,
}

fn glorot<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..shape.iter().product::<usize>())
        .map(|_| (2.0 * rng.random::<f64>() - 1.0) * limit)
        .collect()
}

impl<T: Real> Network<T> {
    /// Glorot-uniform weights and zero biases from `seed`.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Params::zeros(&config);
        let mut rng = rng::stream(seed, Purpose::Init, 0);
        let k = config.kernel_size;
        let c1 = config.conv1_filters;
        let c2 = config.conv2_filters;
        let plan = [
            (k * k, k * k * c1),
            (k * k * c1, k * k * c2),
            (config.flat_features(), config.dense_units),
            (config.dense_units, config.class_count),
        ];
        let weights = [
            &mut params.conv1_kernel,
            &mut params.conv2_kernel,
            &mut params.dense1_weight,
            &mut params.dense2_weight,
        ];
        for (tensor, (fan_in, fan_out)) in weights.into_iter().zip(plan) {
            let values = glorot(&mut rng, tensor.shape(), fan_in, fan_out);
            for (slot, v) in tensor.data_mut().iter_mut().zip(values) {
                *slot = T::from_f64_lossy(v);
            }
        }
        Ok(Self {
            config,
            norm: NormStats::default(),
            params,
            seed,
            stamp: next_stamp(),
        })
    }

    /// Reassembles a network from stored parts.
    pub fn from_parts(config: NetworkConfig, norm: NormStats, params: Params<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        for ((t, shape), name) in params.tensors().iter().zip(config.param_shapes()).zip(PARAM_NAMES) {
            t.expect_shape(&shape)
                .map_err(|e| Error::Shape(format!("{name}: {e}")))?;
        }
        Ok(Self {
            config,
            norm,
            params,
            seed,
            stamp: next_stamp(),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn class_count(&self) -> usize {
        self.config.class_count
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn norm_stats(&self) -> NormStats {
        self.norm
    }

    pub fn set_norm_stats(&mut self, norm: NormStats) {
        self.norm = norm;
        self.stamp = next_stamp();
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        self.stamp = next_stamp();
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            norm: self.norm,
            params: self.params.cast(),
            seed: self.seed,
            stamp: next_stamp(),
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.config.input_height, self.config.input_width, 1]
    }

    pub fn forward(&self, input: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let cfg = &self.config;
        input.expect_shape(&self.input_shape())?;
        let mut drop_rng = match mode {
            Mode::Train { stream } => Some(rng::stream(self.seed, Purpose::Dropout, stream)),
            Mode::Infer => None,
        };
        let drop_mode = if drop_rng.is_some() { DropoutMode::Train } else { DropoutMode::Infer };

        let resized = layers::resize_bilinear(input, cfg.resize_height, cfg.resize_width)?;
        let normalized = layers::normalize_apply(&resized, self.norm.mean, self.norm.variance);
        let mut conv1 = layers::conv2d_forward(&normalized, &self.params.conv1_kernel, &self.params.conv1_bias)?;
        layers::relu_in_place(&mut conv1);
        let mut conv2 = layers::conv2d_forward(&conv1, &self.params.conv2_kernel, &self.params.conv2_bias)?;
        layers::relu_in_place(&mut conv2);
        let (pooled, pool_argmax) = layers::maxpool2d(&conv2)?;

        let (dropped1, mask1) = match drop_rng.as_mut() {
            Some(r) => layers::dropout(&pooled, cfg.dropout1, drop_mode, r)?,
            None => (pooled.clone(), None),
        };
        let flat = dropped1.reshape(&[cfg.flat_features()])?;
        let mut hidden = layers::dense(&flat, &self.params.dense1_weight, &self.params.dense1_bias)?;
        layers::relu_in_place(&mut hidden);
        let (dropped2, mask2) = match drop_rng.as_mut() {
            Some(r) => layers::dropout(&hidden, cfg.dropout2, drop_mode, r)?,
            None => (hidden.clone(), None),
        };
        let logits = layers::dense(&dropped2, &self.params.dense2_weight, &self.params.dense2_bias)?;

        let cache = ForwardCache {
            stamp: self.stamp,
            resized,
            normalized,
            conv1,
            conv2,
            pooled,
            pool_argmax,
            mask1,
            flat,
            hidden,
            mask2,
            dense2_input: dropped2,
            logits: logits.clone(),
        };
        Ok((logits, cache))
    }

    /// Logits only, inference mode.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(input, Mode::Infer)?.0)
    }

    /// Parameter gradients for one forward pass.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &Tensor<T>) -> Result<Gradients<T>> {
        let mut grads = self.params.zeros_like();
        self.backward_accumulate(cache, dlogits, &mut grads)?;
        Ok(grads)
    }

    /// Adds this example's parameter gradients onto `grads`.
    pub fn backward_accumulate(&self, cache: &ForwardCache<T>, dlogits: &Tensor<T>, grads: &mut Gradients<T>) -> Result<()> {
        if cache.stamp != self.stamp {
            return Err(Error::Consistency(
                "forward cache was produced with different parameters".into(),
            ));
        }
        let cfg = &self.config;
        let p = &self.params;
        dlogits.expect_shape(&[cfg.class_count])?;

        layers::dense_accumulate_param_grads(&cache.dense2_input, dlogits, &mut grads.dense2_weight, &mut grads.dense2_bias)?;
        let d_drop2 = layers::dense_input_grad(&p.dense2_weight, dlogits);
        let mut d_hidden = layers::dropout_backward(&d_drop2, cache.mask2.as_deref())?;
        layers::relu_mask_in_place(&cache.hidden, &mut d_hidden);

        layers::dense_accumulate_param_grads(&cache.flat, &d_hidden, &mut grads.dense1_weight, &mut grads.dense1_bias)?;
        let d_flat = layers::dense_input_grad(&p.dense1_weight, &d_hidden);
        let d_pooled = layers::dropout_backward(&d_flat, cache.mask1.as_deref())?.reshape(cache.pooled.shape())?;

        let mut d_conv2 = layers::maxpool2d_backward(&d_pooled, &cache.pool_argmax, cache.conv2.shape())?;
        layers::relu_mask_in_place(&cache.conv2, &mut d_conv2);
        layers::conv2d_accumulate_param_grads(&cache.conv1, &p.conv2_kernel, &d_conv2, &mut grads.conv2_kernel, &mut grads.conv2_bias)?;
        let mut d_conv1 = layers::conv2d_input_grad(cache.conv1.shape(), &p.conv2_kernel, &d_conv2);
        layers::relu_mask_in_place(&cache.conv1, &mut d_conv1);
        layers::conv2d_accumulate_param_grads(&cache.normalized, &p.conv1_kernel, &d_conv1, &mut grads.conv1_kernel, &mut grads.conv1_bias)?;
        Ok(())
    }
}

/// Activations saved by a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    stamp: u64,
    pub resized: Tensor<T>,
    pub normalized: Tensor<T>,
    pub conv1: Tensor<T>,
    pub conv2: Tensor<T>,
    pub pooled: Tensor<T>,
    pool_argmax: Vec<usize>,
    mask1: Option<Vec<T>>,
    pub flat: Tensor<T>,
    pub hidden: Tensor<T>,
    mask2: Option<Vec<T>>,
    pub dense2_input: Tensor<T>,
    pub logits: Tensor<T>,
}

impl<T: Real> ForwardCache<T> {
    /// Output shapes of the ten layers, matching [`NetworkConfig::shape_chain`].
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        vec![
            self.resized.shape().to_vec(),
            self.normalized.shape().to_vec(),
            self.conv1.shape().to_vec(),
            self.conv2.shape().to_vec(),
            self.pooled.shape().to_vec(),
            self.pooled.shape().to_vec(),
            self.flat.shape().to_vec(),
            self.hidden.shape().to_vec(),
            self.dense2_input.shape().to_vec(),
            self.logits.shape().to_vec(),
        ]
    }
}
