//! Reconstruction backbones: a convolutional autoencoder (AE) and its
//! uncertainty-predicting variant (AE-U), plus their training losses.
//!
//! Layout for the default config, every hidden layer followed by batch
//! normalization and ReLU:
//!
//! ```text
//! [N,1,64,64] -conv-> 16x32x32 -conv-> 32x16x16 -conv-> 64x8x8 -conv-> 64x4x4
//!   -flatten-> 1024 -fc-> 128 -fc-> 16 -fc-> 1024 -reshape-> 64x4x4
//!   -deconv-> 64x8x8 -deconv-> 32x16x16 -deconv-> 16x32x32 -deconv-> out x64x64
//! ```
//!
//! The output layer has no normalization. AE emits one sigmoid channel; AE-U
//! emits a second channel holding `log sigma^2`, clamped to `[-10, 10]`.

use std::fmt;

use ddad_autograd::{
    batchnorm, conv2d, conv_transpose2d, linear, BatchNormState, Element, NormMode, Parameter, Tensor, TensorError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DdadError, Result};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Ae,
    Aeu,
}

impl BackboneKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ae => "ae",
            Self::Aeu => "aeu",
        }
    }

    fn output_channels(self) -> usize {
        match self {
            Self::Ae => 1,
            Self::Aeu => 2,
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for BackboneKind {
    type Err = DdadError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ae" => Ok(Self::Ae),
            "aeu" | "ae-u" => Ok(Self::Aeu),
            other => Err(DdadError::Config(format!("unknown backbone '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// pixels per side of the square input
    pub input_size: usize,
    pub enc_channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[flattened, hidden.., latent]`; the last fc layer maps back to `fc_dims[0]`
    pub fc_dims: Vec<usize>,
    /// channels of each transposed conv; the last entry is the image channel
    pub dec_channels: Vec<usize>,
    pub seed: u64,
}

impl BackboneConfig {
    pub fn new(kind: BackboneKind, seed: u64) -> Self {
        Self {
            kind,
            input_size: 64,
            enc_channels: vec![16, 32, 64, 64],
            kernel: 4,
            stride: 2,
            padding: 1,
            fc_dims: vec![1024, 128, 16],
            dec_channels: vec![64, 32, 16, 1],
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    fn conv_out(&self, size: usize) -> Option<usize> {
        let span = size + 2 * self.padding;
        (span >= self.kernel).then(|| (span - self.kernel) / self.stride + 1)
    }

    fn deconv_out(&self, size: usize) -> Option<usize> {
        ((size - 1) * self.stride + self.kernel).checked_sub(2 * self.padding).filter(|&s| s > 0)
    }

    /// Spatial side of the encoder output.
    pub fn bottleneck_side(&self) -> Result<usize> {
        let mut side = self.input_size;
        for _ in &self.enc_channels {
            side = self
                .conv_out(side)
                .filter(|&s| s >= 1)
                .ok_or_else(|| DdadError::Config(format!("encoder collapses a {side}px map")))?;
        }
        Ok(side)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DdadError::Config(m));
        if self.input_size == 0 || self.kernel == 0 || self.stride == 0 {
            return bad("input_size, kernel and stride must be positive".into());
        }
        if self.enc_channels.is_empty() || self.enc_channels.contains(&0) {
            return bad(format!("invalid encoder channels {:?}", self.enc_channels));
        }
        if self.dec_channels.len() != self.enc_channels.len() || self.dec_channels.contains(&0) {
            return bad(format!(
                "decoder channels {:?} must mirror {} encoder layers",
                self.dec_channels,
                self.enc_channels.len()
            ));
        }
        if self.dec_channels.last() != Some(&1) {
            return bad("decoder must end in one image channel".into());
        }
        if self.fc_dims.len() < 2 || self.fc_dims.contains(&0) {
            return bad(format!("fc_dims {:?} needs at least two positive entries", self.fc_dims));
        }
        let side = self.bottleneck_side()?;
        let flat = self.enc_channels[self.enc_channels.len() - 1] * side * side;
        if self.fc_dims[0] != flat {
            return bad(format!("fc_dims[0] = {} but the encoder yields {flat} features", self.fc_dims[0]));
        }
        let mut s = side;
        for _ in &self.dec_channels {
            s = self.deconv_out(s).ok_or_else(|| DdadError::Config("decoder collapses".into()))?;
        }
        if s != self.input_size {
            return bad(format!("decoder yields {s}px, expected {}", self.input_size));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl From<Mode> for NormMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Train => NormMode::Train,
            Mode::Eval => NormMode::Eval,
        }
    }
}

struct Affine<T: Element> {
    weight: Tensor<T>,
    bias: Tensor<T>,
}

struct Norm<T: Element> {
    gamma: Tensor<T>,
    beta: Tensor<T>,
    state: BatchNormState<T>,
}

impl<T: Element> Norm<T> {
    fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::parameter(vec![T::one(); channels], &[channels])?,
            beta: Tensor::parameter(vec![T::zero(); channels], &[channels])?,
            state: BatchNormState::new(channels),
        })
    }

    fn apply_relu(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(batchnorm(x, &self.gamma, &self.beta, &mut self.state, mode.into())?.relu()?)
    }
}

fn uniform_init<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Result<Tensor<T>> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
    Ok(Tensor::parameter(data, shape)?)
}

impl<T: Element> Affine<T> {
    /// Fan-in is `shape[1] * prod(shape[2..])`, for conv, deconv and linear alike.
    fn new(rng: &mut ChaCha8Rng, shape: &[usize], bias_len: usize) -> Result<Self> {
        let fan_in = shape[1..].iter().product();
        Ok(Self { weight: uniform_init(rng, shape, fan_in)?, bias: uniform_init(rng, &[bias_len], fan_in)? })
    }
}

/// Reconstruction network output.
#[derive(Debug, Clone)]
pub struct BackboneOutput<T: Element> {
    /// `[N, 1, S, S]` in `[0, 1]`
    pub reconstruction: Tensor<T>,
    /// AE-U only: clamped `log sigma^2`, `[N, 1, S, S]`
    pub log_variance: Option<Tensor<T>>,
}

/// One AE or AE-U network with its parameters and batch-norm running state.
///
/// Not `Clone`: parameter tensors are shared handles, use [`BackboneNet::deep_copy`].
pub struct BackboneNet<T: Element = f32> {
    config: BackboneConfig,
    encoder: Vec<(Affine<T>, Norm<T>)>,
    bottleneck: Vec<(Affine<T>, Norm<T>)>,
    decoder: Vec<(Affine<T>, Option<Norm<T>>)>,
}

impl<T: Element> fmt::Debug for BackboneNet<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackboneNet")
            .field("config", &self.config)
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

/// Builds a freshly initialized network; initialization is a pure function of `config`.
pub fn build_backbone<T: Element>(config: &BackboneConfig) -> Result<BackboneNet<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let k = config.kernel;

    let mut encoder = Vec::new();
    let mut c_in = 1;
    for &c in &config.enc_channels {
        encoder.push((Affine::new(&mut rng, &[c, c_in, k, k], c)?, Norm::new(c)?));
        c_in = c;
    }

    let mut bottleneck = Vec::new();
    let fc = &config.fc_dims;
    for i in 0..fc.len() {
        let (from, to) = (fc[i], fc[(i + 1) % fc.len()]);
        bottleneck.push((Affine::new(&mut rng, &[to, from], to)?, Norm::new(to)?));
    }

    let mut decoder = Vec::new();
    let last = config.dec_channels.len() - 1;
    for (i, &c) in config.dec_channels.iter().enumerate() {
        let c_out = if i == last { config.kind.output_channels() } else { c };
        let norm = if i == last { None } else { Some(Norm::new(c_out)?) };
        decoder.push((Affine::new(&mut rng, &[c_in, c_out, k, k], c_out)?, norm));
        c_in = c_out;
    }

    Ok(BackboneNet { config: config.clone(), encoder, bottleneck, decoder })
}

impl<T: Element> BackboneNet<T> {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn kind(&self) -> BackboneKind {
        self.config.kind
    }

    /// Independent copy with its own parameter storage.
    pub fn deep_copy(&self) -> Result<Self> {
        let mut copy = build_backbone(&self.config)?;
        for p in self.parameters() {
            copy.set_named(&p.name, p.value.shape(), &p.value.data())?;
        }
        for (name, values) in self.buffers() {
            copy.set_named(&name, &[values.len()], &values)?;
        }
        Ok(copy)
    }

    /// Trainable tensors with unique dotted names, in a fixed order.
    pub fn parameters(&self) -> Vec<Parameter<T>> {
        let mut out = Vec::new();
        let mut push_affine = |prefix: String, a: &Affine<T>| {
            out.push(Parameter::new(format!("{prefix}.weight"), a.weight.clone()));
            out.push(Parameter::new(format!("{prefix}.bias"), a.bias.clone()));
        };
        for (i, (a, _)) in self.encoder.iter().enumerate() {
            push_affine(format!("enc.conv{}", i + 1), a);
        }
        for (i, (a, _)) in self.bottleneck.iter().enumerate() {
            push_affine(format!("fc.fc{}", i + 1), a);
        }
        for (i, (a, _)) in self.decoder.iter().enumerate() {
            push_affine(format!("dec.deconv{}", i + 1), a);
        }
        for (prefix, n) in self.norms() {
            out.push(Parameter::new(format!("{prefix}.gamma"), n.gamma.clone()));
            out.push(Parameter::new(format!("{prefix}.beta"), n.beta.clone()));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.value.numel()).sum()
    }

    fn norms_mut(&mut self) -> Vec<(String, &mut Norm<T>)> {
        let mut out = Vec::new();
        for (i, (_, n)) in self.encoder.iter_mut().enumerate() {
            out.push((format!("enc.bn{}", i + 1), n));
        }
        for (i, (_, n)) in self.bottleneck.iter_mut().enumerate() {
            out.push((format!("fc.bn{}", i + 1), n));
        }
        for (i, (_, n)) in self.decoder.iter_mut().enumerate() {
            if let Some(n) = n {
                out.push((format!("dec.bn{}", i + 1), n));
            }
        }
        out
    }

    fn norms(&self) -> Vec<(String, &Norm<T>)> {
        let enc = self.encoder.iter().enumerate().map(|(i, (_, n))| (format!("enc.bn{}", i + 1), n));
        let fc = self.bottleneck.iter().enumerate().map(|(i, (_, n))| (format!("fc.bn{}", i + 1), n));
        let dec = self
            .decoder
            .iter()
            .enumerate()
            .filter_map(|(i, (_, n))| n.as_ref().map(|n| (format!("dec.bn{}", i + 1), n)));
        enc.chain(fc).chain(dec).collect()
    }

    /// Batch-norm running statistics as `(name, values)`, e.g. `enc.bn1.running_mean`.
    pub fn buffers(&self) -> Vec<(String, Vec<T>)> {
        self.norms()
            .into_iter()
            .flat_map(|(name, n)| {
                [
                    (format!("{name}.running_mean"), n.state.running_mean.clone()),
                    (format!("{name}.running_var"), n.state.running_var.clone()),
                ]
            })
            .collect()
    }

    /// Overwrites one named parameter or buffer. Used by checkpoint loading.
    pub fn set_named(&mut self, name: &str, dims: &[usize], values: &[T]) -> Result<()> {
        if let Some(p) = self.parameters().into_iter().find(|p| p.name == name) {
            if p.value.shape() != dims {
                return Err(DdadError::Config(format!("{name}: shape {dims:?} does not match {:?}", p.value.shape())));
            }
            p.value.data_mut().copy_from_slice(values);
            return Ok(());
        }
        for (prefix, norm) in self.norms_mut() {
            let slot = if name == format!("{prefix}.running_mean") {
                &mut norm.state.running_mean
            } else if name == format!("{prefix}.running_var") {
                &mut norm.state.running_var
            } else {
                continue;
            };
            if dims != [slot.len()] {
                return Err(DdadError::Config(format!("{name}: shape {dims:?} does not match [{}]", slot.len())));
            }
            slot.copy_from_slice(values);
            return Ok(());
        }
        Err(DdadError::Config(format!("unknown tensor name '{name}'")))
    }

    pub fn zero_grad(&self) {
        self.parameters().iter().for_each(|p| p.value.zero_grad());
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let s = self.config.input_size;
        match *x.shape() {
            [n, 1, h, w] if h == s && w == s => Ok(n),
            ref other => Err(TensorError::Shape(format!("backbone expects [N, 1, {s}, {s}], got {other:?}")).into()),
        }
    }

    /// Runs the network. Train mode uses (and updates) batch statistics.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<BackboneOutput<T>> {
        let n = self.check_input(x)?;
        let (k, s, p) = (self.config.kernel, self.config.stride, self.config.padding);
        let mut h = x.clone();
        for (conv, norm) in &mut self.encoder {
            h = norm.apply_relu(&conv2d(&h, &conv.weight, &conv.bias, s, p)?, mode)?;
        }
        let side = h.shape()[2];
        let channels = h.shape()[1];
        h = h.reshape(&[n, channels * side * side])?;
        for (fc, norm) in &mut self.bottleneck {
            h = norm.apply_relu(&linear(&h, &fc.weight, &fc.bias)?, mode)?;
        }
        h = h.reshape(&[n, channels, side, side])?;
        for (deconv, norm) in &mut self.decoder {
            h = conv_transpose2d(&h, &deconv.weight, &deconv.bias, s, p)?;
            if let Some(norm) = norm {
                h = norm.apply_relu(&h, mode)?;
            }
        }
        debug_assert_eq!(h.shape()[2], self.config.input_size, "kernel {k}");
        match self.config.kind {
            BackboneKind::Ae => Ok(BackboneOutput { reconstruction: h.sigmoid()?, log_variance: None }),
            BackboneKind::Aeu => Ok(BackboneOutput {
                reconstruction: h.narrow(1, 0, 1)?.sigmoid()?,
                log_variance: Some(h.narrow(1, 1, 1)?.clamp(LOG_VAR_MIN, LOG_VAR_MAX)?),
            }),
        }
    }

    /// Reconstruction of an AE.
    pub fn forward_ae(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.expect_kind(BackboneKind::Ae)?;
        Ok(self.forward(x, mode)?.reconstruction)
    }

    /// Reconstruction and clamped log-variance of an AE-U.
    pub fn forward_aeu(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tensor<T>)> {
        self.expect_kind(BackboneKind::Aeu)?;
        let out = self.forward(x, mode)?;
        let log_var = out.log_variance.expect("AE-U always emits log variance");
        Ok((out.reconstruction, log_var))
    }

    /// Loss matching the backbone kind: MSE for AE, the heteroscedastic loss for AE-U.
    pub fn loss(&self, x: &Tensor<T>, out: &BackboneOutput<T>) -> Result<Tensor<T>> {
        match &out.log_variance {
            None => loss_mse(x, &out.reconstruction),
            Some(lv) => loss_aeu(x, &out.reconstruction, lv),
        }
    }

    fn expect_kind(&self, kind: BackboneKind) -> Result<()> {
        if self.config.kind != kind {
            return Err(DdadError::KindMismatch { expected: kind.to_string(), found: self.config.kind.to_string() });
        }
        Ok(())
    }
}

fn same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())).into());
    }
    Ok(())
}

/// Mean over batch and pixels of `(x - x_hat)^2`.
pub fn loss_mse<T: Element>(x: &Tensor<T>, reconstruction: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(x, reconstruction, "loss_mse")?;
    Ok(x.sub(reconstruction)?.square()?.mean_all()?)
}

/// Mean over batch and pixels of `(x - x_hat)^2 / sigma^2 + log sigma^2`,
/// evaluated as `(x - x_hat)^2 * exp(-s) + s` with `s = log sigma^2`.
pub fn loss_aeu<T: Element>(x: &Tensor<T>, reconstruction: &Tensor<T>, log_variance: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(x, reconstruction, "loss_aeu")?;
    same_shape(x, log_variance, "loss_aeu")?;
    let sq = x.sub(reconstruction)?.square()?;
    let loss = sq.mul(&log_variance.neg()?.exp()?)?.add(log_variance)?.mean_all()?;
    let v = loss.item()?;
    if !v.is_finite() {
        return Err(TensorError::Numerical(format!("loss_aeu is {v}")).into());
    }
    Ok(loss)
}
