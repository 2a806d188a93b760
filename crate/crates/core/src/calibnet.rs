//! Two-stream rotation-correction network and its losses.
//!
//! RGB stream: strided conv backbone, MlpConv blocks, dense embedding.
//! Radar stream: 2x2 max pooling of the inverse-depth grid, dense embedding.
//! Head: dense layers on the concatenated embeddings ending in a raw,
//! unnormalized quaternion.

use std::io::{Read, Write};

use radcam_nn::{orthogonal_init, read_checkpoint, write_checkpoint, Element, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::dataset::{Sample, SparseRadarMatrix, INPUT_CHANNELS, INPUT_HEIGHT, INPUT_WIDTH};
use crate::error::{invalid, CoreError, Result};
use crate::geometry::UnitQuaternion;

const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_width: usize,
    pub image_height: usize,
    /// Output channels of the strided backbone convolutions.
    pub backbone_channels: Vec<usize>,
    pub backbone_kernel: usize,
    pub backbone_stride: usize,
    pub mlpconv_layers: usize,
    pub mlpconv_kernel: usize,
    pub mlpconv_maps: usize,
    pub embed_dim: usize,
    pub head: Vec<usize>,
    pub dropout_p: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_width: INPUT_WIDTH,
            image_height: INPUT_HEIGHT,
            backbone_channels: vec![4, 8, 16],
            backbone_kernel: 3,
            backbone_stride: 2,
            mlpconv_layers: 2,
            mlpconv_kernel: 5,
            mlpconv_maps: 8,
            embed_dim: 50,
            head: vec![512, 256, 4],
            dropout_p: 0.5,
        }
    }
}

fn conv_out(extent: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (extent + 2 * pad - kernel) / stride + 1
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_width != INPUT_WIDTH || self.image_height != INPUT_HEIGHT {
            return Err(invalid(
                "model.image_size",
                format!("inputs are {INPUT_WIDTH}x{INPUT_HEIGHT}"),
            ));
        }
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return Err(invalid("model.backbone_channels", "need at least one nonzero layer"));
        }
        if self.backbone_kernel.is_multiple_of(2) || self.backbone_stride == 0 {
            return Err(invalid(
                "model.backbone_kernel",
                "odd kernel and nonzero stride required",
            ));
        }
        if self.mlpconv_kernel.is_multiple_of(2) || self.mlpconv_maps == 0 {
            return Err(invalid(
                "model.mlpconv_kernel",
                "odd kernel and nonzero map count required",
            ));
        }
        if self.embed_dim == 0 {
            return Err(invalid("model.embed_dim", "must be positive"));
        }
        if self.head.last() != Some(&4) || self.head.contains(&0) {
            return Err(invalid("model.head", "must end in 4 outputs"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(invalid("model.dropout_p", "must lie in [0, 1)"));
        }
        let (h, w) = self.feature_extent();
        if h == 0 || w == 0 {
            return Err(invalid(
                "model.backbone_channels",
                "too many strided layers for the input",
            ));
        }
        Ok(())
    }

    /// Spatial extent after the backbone (MlpConv keeps it).
    pub fn feature_extent(&self) -> (usize, usize) {
        let pad = self.backbone_kernel / 2;
        self.backbone_channels
            .iter()
            .fold((self.image_height, self.image_width), |(h, w), _| {
                (
                    conv_out(h, self.backbone_kernel, self.backbone_stride, pad),
                    conv_out(w, self.backbone_kernel, self.backbone_stride, pad),
                )
            })
    }

    fn rgb_features(&self) -> usize {
        let (h, w) = self.feature_extent();
        let maps = if self.mlpconv_layers > 0 {
            self.mlpconv_maps
        } else {
            *self.backbone_channels.last().expect("validated")
        };
        h * w * maps
    }

    fn radar_features(&self) -> usize {
        self.image_height.div_ceil(2) * self.image_width.div_ceil(2)
    }

    /// Parameter shapes in registration order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = INPUT_CHANNELS;
        let k = self.backbone_kernel;
        for (i, &c) in self.backbone_channels.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), vec![c, cin, k, k]));
            out.push((format!("backbone.{i}.bias"), vec![c]));
            cin = c;
        }
        let m = self.mlpconv_maps;
        let mk = self.mlpconv_kernel;
        for i in 0..self.mlpconv_layers {
            for (part, shape) in [
                ("conv", vec![m, cin, mk, mk]),
                ("pw1", vec![m, m, 1, 1]),
                ("pw2", vec![m, m, 1, 1]),
            ] {
                out.push((format!("mlpconv.{i}.{part}.weight"), shape));
                out.push((format!("mlpconv.{i}.{part}.bias"), vec![m]));
                out.push((format!("mlpconv.{i}.{part}.slope"), vec![1]));
            }
            cin = m;
        }
        for (name, fin) in [
            ("rgb_embed", self.rgb_features()),
            ("radar_embed", self.radar_features()),
        ] {
            out.push((format!("{name}.weight"), vec![self.embed_dim, fin]));
            out.push((format!("{name}.bias"), vec![self.embed_dim]));
            out.push((format!("{name}.slope"), vec![1]));
        }
        let mut fin = 2 * self.embed_dim;
        for (i, &fout) in self.head.iter().enumerate() {
            out.push((format!("head.{i}.weight"), vec![fout, fin]));
            out.push((format!("head.{i}.bias"), vec![fout]));
            if i + 1 < self.head.len() {
                out.push((format!("head.{i}.slope"), vec![1]));
            }
            fin = fout;
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Euclidean,
    Geodesic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Weight of the length term of the geodesic loss.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Euclidean,
            alpha: 0.005,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(invalid("loss.alpha", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// `||q - q_hat||`.
pub fn loss_euclidean(q: &UnitQuaternion, q_hat: &[f64; 4]) -> f64 {
    q.to_array()
        .iter()
        .zip(q_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Gradient of [`loss_euclidean`] with respect to `q_hat` (zero at `q_hat = q`).
pub fn loss_euclidean_grad(q: &UnitQuaternion, q_hat: &[f64; 4]) -> [f64; 4] {
    let d = loss_euclidean(q, q_hat);
    let qa = q.to_array();
    if d < 1e-12 {
        return [0.0; 4];
    }
    std::array::from_fn(|i| (q_hat[i] - qa[i]) / d)
}

fn norm4(v: &[f64; 4]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `1 - |q . q_hat / ||q_hat||| + alpha |1 - ||q_hat|||`.
pub fn loss_geodesic(q: &UnitQuaternion, q_hat: &[f64; 4], alpha: f64) -> Result<f64> {
    let n = norm4(q_hat);
    if !(n > 1e-8) {
        return Err(CoreError::DegenerateNorm(n));
    }
    let d: f64 = q.to_array().iter().zip(q_hat).map(|(a, b)| a * b).sum();
    Ok(1.0 - (d / n).abs() + alpha * (1.0 - n).abs())
}

pub fn loss_geodesic_grad(q: &UnitQuaternion, q_hat: &[f64; 4], alpha: f64) -> Result<[f64; 4]> {
    let n = norm4(q_hat);
    if !(n > 1e-8) {
        return Err(CoreError::DegenerateNorm(n));
    }
    let qa = q.to_array();
    let d: f64 = qa.iter().zip(q_hat).map(|(a, b)| a * b).sum();
    let s = d.signum();
    let len_sign = (n - 1.0).signum();
    Ok(std::array::from_fn(|i| {
        -(s * qa[i] / n - d.abs() * q_hat[i] / (n * n * n)) + alpha * len_sign * q_hat[i] / n
    }))
}

impl LossConfig {
    pub fn value(&self, q: &UnitQuaternion, q_hat: &[f64; 4]) -> Result<f64> {
        match self.kind {
            LossKind::Euclidean => Ok(loss_euclidean(q, q_hat)),
            LossKind::Geodesic => loss_geodesic(q, q_hat, self.alpha),
        }
    }

    pub fn grad(&self, q: &UnitQuaternion, q_hat: &[f64; 4]) -> Result<[f64; 4]> {
        match self.kind {
            LossKind::Euclidean => Ok(loss_euclidean_grad(q, q_hat)),
            LossKind::Geodesic => loss_geodesic_grad(q, q_hat, self.alpha),
        }
    }

    /// Batch-mean loss of `output` (`[N, 4]`) recorded on the tape.
    pub fn on_tape<T: Element>(&self, tape: &mut Tape<T>, output: Var, labels: &[UnitQuaternion]) -> Result<Var> {
        let out = tape.value(output);
        if out.shape() != [labels.len(), 4] {
            return Err(radcam_nn::NnError::ShapeMismatch {
                op: "loss",
                detail: format!("output {:?} for {} labels", out.shape(), labels.len()),
            }
            .into());
        }
        let n = labels.len() as f64;
        let mut total = 0.0;
        let mut grad = Vec::with_capacity(out.numel());
        for (row, q) in out.data().chunks_exact(4).zip(labels) {
            let q_hat: [f64; 4] = std::array::from_fn(|i| row[i].as_f64());
            total += self.value(q, &q_hat)?;
            grad.extend(self.grad(q, &q_hat)?.iter().map(|g| T::of(g / n)));
        }
        let grad = Tensor::from_vec(&[labels.len(), 4], grad)?;
        Ok(tape.scalar_with_grad(output, T::of(total / n), grad)?)
    }
}

/// Network inputs in NCHW layout.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub radar: Tensor<T>,
}

impl<T: Element> Batch<T> {
    /// `images` are channel-last `INPUT_HEIGHT x INPUT_WIDTH x 3`.
    pub fn from_parts(images: &[&[f32]], radar: &[&SparseRadarMatrix]) -> Result<Self> {
        let n = images.len();
        if radar.len() != n {
            return Err(invalid("batch", "image and radar counts differ"));
        }
        let plane = INPUT_HEIGHT * INPUT_WIDTH;
        let mut img = vec![T::zero(); n * INPUT_CHANNELS * plane];
        let mut rad = vec![T::zero(); n * plane];
        let mut dense = vec![0f32; plane];
        for (s, (im, r)) in images.iter().zip(radar).enumerate() {
            if im.len() != INPUT_CHANNELS * plane {
                return Err(radcam_nn::NnError::ShapeMismatch {
                    op: "batch",
                    detail: format!("image with {} values", im.len()),
                }
                .into());
            }
            let base = s * INPUT_CHANNELS * plane;
            for (p, px) in im.chunks_exact(INPUT_CHANNELS).enumerate() {
                for (c, v) in px.iter().enumerate() {
                    img[base + c * plane + p] = T::of(*v as f64);
                }
            }
            r.densify_into(&mut dense);
            for (dst, v) in rad[s * plane..(s + 1) * plane].iter_mut().zip(&dense) {
                *dst = T::of(*v as f64);
            }
        }
        Ok(Self {
            images: Tensor::from_vec(&[n, INPUT_CHANNELS, INPUT_HEIGHT, INPUT_WIDTH], img)?,
            radar: Tensor::from_vec(&[n, 1, INPUT_HEIGHT, INPUT_WIDTH], rad)?,
        })
    }

    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        let images: Vec<&[f32]> = samples.iter().map(|s| s.image.as_slice()).collect();
        let radar: Vec<&SparseRadarMatrix> = samples.iter().map(|s| &s.radar).collect();
        Self::from_parts(&images, &radar)
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Network weights plus the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: Vec<(String, Tensor<T>)>,
}

impl<T: Element> Model<T> {
    /// Orthogonal weights, zero biases, PReLU slopes at 0.25.
    pub fn build<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = config
            .parameter_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".weight") {
                    orthogonal_init(&shape, 1.0, rng)
                } else if name.ends_with(".slope") {
                    Tensor::full(&shape, T::of(PRELU_INIT))
                } else {
                    Tensor::zeros(&shape)
                };
                (name, t)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn set_tensors(&mut self, tensors: Vec<Tensor<T>>) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(invalid("model", "parameter count changed"));
        }
        for ((name, p), t) in self.params.iter_mut().zip(tensors) {
            if p.shape() != t.shape() {
                return Err(CoreError::Format(format!(
                    "{name}: shape {:?} vs {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
            *p = t;
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// Record a forward pass. Returns the `[N, 4]` output and the parameter
    /// vars in registration order.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        batch: &Batch<T>,
        training: bool,
        rng: &mut R,
    ) -> Result<(Var, Vec<Var>)> {
        let cfg = &self.config;
        let vars: Vec<Var> = self.params.iter().map(|(_, t)| tape.param(t.clone())).collect();
        let mut next = vars.iter().copied();
        let mut take = || next.next().expect("parameter layout matches config");

        let mut x = tape.constant(batch.images.clone());
        for _ in &cfg.backbone_channels {
            let (w, b) = (take(), take());
            x = tape.conv2d(x, w, Some(b), cfg.backbone_stride, cfg.backbone_kernel / 2)?;
            x = tape.relu(x);
        }
        for _ in 0..cfg.mlpconv_layers {
            let (w, b, a) = (take(), take(), take());
            x = tape.conv2d(x, w, Some(b), 1, cfg.mlpconv_kernel / 2)?;
            x = tape.prelu(x, a)?;
            for _ in 0..2 {
                let (w, b, a) = (take(), take(), take());
                x = tape.conv1x1(x, w, Some(b))?;
                x = tape.prelu(x, a)?;
            }
        }
        let x = tape.flatten(x)?;
        let (w, b, a) = (take(), take(), take());
        let rgb = tape.dense(x, w, Some(b))?;
        let rgb = tape.prelu(rgb, a)?;

        let r = tape.constant(batch.radar.clone());
        let r = tape.maxpool2x2(r)?;
        let r = tape.flatten(r)?;
        let (w, b, a) = (take(), take(), take());
        let r = tape.dense(r, w, Some(b))?;
        let radar = tape.prelu(r, a)?;

        let mut h = tape.concat(&[rgb, radar])?;
        let layers = cfg.head.len();
        for i in 0..layers {
            let (w, b) = (take(), take());
            h = tape.dense(h, w, Some(b))?;
            if i + 1 < layers {
                let a = take();
                h = tape.prelu(h, a)?;
                if i == 0 {
                    h = tape.dropout(h, cfg.dropout_p, rng, training)?;
                }
            }
        }
        Ok((h, vars))
    }

    /// Raw outputs without dropout.
    pub fn predict(&self, batch: &Batch<T>) -> Result<Vec<[f64; 4]>> {
        let mut tape = Tape::inference();
        // dropout is off, so the generator is never drawn from
        let mut unused = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let (out, _) = self.forward(&mut tape, batch, false, &mut unused)?;
        Ok(tape
            .value(out)
            .data()
            .chunks_exact(4)
            .map(|r| std::array::from_fn(|i| r[i].as_f64()))
            .collect())
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let named: Vec<(String, Tensor<f32>)> = self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect();
        Ok(write_checkpoint(w, &named)?)
    }

    /// Load weights saved by [`Model::save`] for a model of shape `config`.
    pub fn load<R: Read>(config: &ModelConfig, r: R) -> Result<Self> {
        config.validate()?;
        let stored = read_checkpoint(r)?;
        let expected = config.parameter_shapes();
        if stored.len() != expected.len() {
            return Err(CoreError::Format(format!(
                "checkpoint has {} tensors, model needs {}",
                stored.len(),
                expected.len()
            )));
        }
        let mut params = Vec::with_capacity(stored.len());
        for ((name, t), (want_name, want_shape)) in stored.into_iter().zip(expected) {
            if name != want_name || t.shape() != want_shape.as_slice() {
                return Err(CoreError::Format(format!(
                    "checkpoint tensor {name} {:?}, expected {want_name} {want_shape:?}",
                    t.shape()
                )));
            }
            params.push((name, t.cast()));
        }
        Ok(Self {
            config: config.clone(),
            params,
        })
    }
}

/// Normalize a raw network output.
pub fn normalize_output(raw: &[f64; 4]) -> Result<UnitQuaternion> {
    UnitQuaternion::from_array(*raw)
}
