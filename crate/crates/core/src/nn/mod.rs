//! Minimal feed-forward network engine.
//!
//! Supports the dense / convolution / pooling / flatten / ReLU / batch-norm
//! layer set with mini-batch SGD, deterministic seeded initialization and
//! layer-indexed parameter access. Models are plain value types: all
//! randomness enters through explicit seeds, and identical inputs produce
//! bit-identical parameters regardless of host parallelism.

mod checkpoint;
mod layers;
mod scalar;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, spec_digest, CheckpointError};
pub use scalar::Scalar;
pub use tensor::Tensor;

use layers::{BnCache, ConvGeom};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Shape parameters of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Dense {
        out_features: usize,
    },
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Relu,
    BatchNorm,
}

impl LayerKind {
    /// Conv and dense layers are the decoupling candidates: only they can
    /// serve as a parameter head, so only they are vote-eligible.
    pub fn is_eligible(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::Dense { .. })
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d { .. } | LayerKind::Dense { .. } | LayerKind::BatchNorm
        )
    }
}

/// One named layer of a model spec.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: &str, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind,
        }
    }
}

/// Full model description: input sample shape plus the ordered layer list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("model spec has no layers")]
    EmptySpec,
    #[error("duplicate layer name `{0}`")]
    DuplicateLayerName(String),
    #[error("layer `{next}` cannot consume the output of `{prev}`: {reason}")]
    IncompatibleLayers {
        prev: String,
        next: String,
        reason: String,
    },
    #[error("batch shape mismatch: expected per-sample shape {expected:?}, received {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("unknown layer `{name}`; parameterized layers are [{valid}]")]
    UnknownLayer { name: String, valid: String },
    #[error("layer `{0}` has no parameters")]
    NotParameterized(String),
    #[error("non-finite gradient in layer `{layer}` ({count} entries)")]
    NonFiniteGradient { layer: String, count: usize },
    #[error("partition names layer `{0}` more than once")]
    PartitionDuplicate(String),
    #[error("partition is missing layer `{0}`")]
    PartitionMissing(String),
    #[error("partition contains layer `{0}` which is not a parameterized layer of the model")]
    PartitionUnknown(String),
    #[error("partition layer `{name}` holds {got} values, expected {expected}")]
    PartitionLength {
        name: String,
        got: usize,
        expected: usize,
    },
    #[error("empty training data")]
    EmptyData,
    #[error("labels ({labels}) and inputs ({inputs}) disagree in length")]
    LabelCountMismatch { labels: usize, inputs: usize },
    #[error("parameter vector for layer `{name}` holds {got} values, expected {expected}")]
    ParamLength {
        name: String,
        got: usize,
        expected: usize,
    },
}

/// Per-layer activations of one forward pass, in spec order.
#[derive(Debug, Clone)]
pub struct ForwardTrace<S> {
    entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> ForwardTrace<S> {
    pub fn entries(&self) -> &[(String, Tensor<S>)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Body/head split of a model's parameterized layers.
///
/// `body` and `head` together cover every parameterized layer exactly once;
/// reassembling them reproduces the source parameters bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamPartition<S> {
    pub head_layer: String,
    pub body: Vec<(String, Vec<S>)>,
    pub head: Vec<(String, Vec<S>)>,
}

impl<S: Scalar> ParamPartition<S> {
    pub fn head_values(&self) -> &[S] {
        &self.head[0].1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// Cross-entropy averaged over all samples of the epoch (f64 accumulation).
    pub mean_loss: f64,
    pub batches: usize,
}

enum Cache<S> {
    Dense { x: Tensor<S> },
    Conv { x: Tensor<S> },
    Pool { argmax: Vec<usize>, in_shape: Vec<usize> },
    Relu { x: Tensor<S> },
    Bn(BnCache<S>),
    Flatten { in_shape: Vec<usize> },
}

/// A feed-forward model: spec, inferred shapes and per-layer flat parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<S = f32> {
    spec: ModelSpec,
    /// Per-layer output sample shape (batch dimension excluded).
    shapes: Vec<Vec<usize>>,
    /// Per-layer flat parameters; empty for non-parameterized layers.
    params: Vec<Vec<S>>,
    seed: u64,
}

/// Infers per-layer output shapes, validating that consecutive layers compose.
fn infer_shapes(spec: &ModelSpec) -> Result<Vec<Vec<usize>>, NnError> {
    if spec.layers.is_empty() {
        return Err(NnError::EmptySpec);
    }
    let mut seen = std::collections::BTreeSet::new();
    for l in &spec.layers {
        if !seen.insert(l.name.as_str()) {
            return Err(NnError::DuplicateLayerName(l.name.clone()));
        }
    }
    let mut shapes = Vec::with_capacity(spec.layers.len());
    let mut cur = spec.input_shape.clone();
    let mut prev_name = "input".to_string();
    for l in &spec.layers {
        let incompatible = |reason: String| NnError::IncompatibleLayers {
            prev: prev_name.clone(),
            next: l.name.clone(),
            reason,
        };
        cur = match &l.kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                if cur.len() != 3 {
                    return Err(incompatible(format!("expected [C,H,W] input, got {cur:?}")));
                }
                if cur[0] != *in_channels {
                    return Err(incompatible(format!(
                        "expected {in_channels} input channels, got {}",
                        cur[0]
                    )));
                }
                let oh = layers::conv_output_dim(cur[1], *kernel, *stride, *pad);
                let ow = layers::conv_output_dim(cur[2], *kernel, *stride, *pad);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => vec![*out_channels, oh, ow],
                    _ => {
                        return Err(incompatible(format!(
                            "kernel {kernel} stride {stride} pad {pad} does not fit input {cur:?}"
                        )))
                    }
                }
            }
            LayerKind::Dense { out_features } => {
                if cur.len() != 1 {
                    return Err(incompatible(format!(
                        "dense layer needs a flat input, got {cur:?}"
                    )));
                }
                vec![*out_features]
            }
            LayerKind::MaxPool2d { kernel, stride } => {
                if cur.len() != 3 {
                    return Err(incompatible(format!("expected [C,H,W] input, got {cur:?}")));
                }
                let oh = layers::conv_output_dim(cur[1], *kernel, *stride, 0);
                let ow = layers::conv_output_dim(cur[2], *kernel, *stride, 0);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => vec![cur[0], oh, ow],
                    _ => {
                        return Err(incompatible(format!(
                            "pool kernel {kernel} stride {stride} does not fit input {cur:?}"
                        )))
                    }
                }
            }
            LayerKind::Flatten => vec![cur.iter().product()],
            LayerKind::Relu => cur.clone(),
            LayerKind::BatchNorm => {
                if cur.is_empty() {
                    return Err(incompatible("batch norm needs a channel axis".into()));
                }
                cur.clone()
            }
        };
        shapes.push(cur.clone());
        prev_name = l.name.clone();
    }
    Ok(shapes)
}

fn param_len(kind: &LayerKind, in_shape: &[usize]) -> usize {
    match kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            ..
        } => out_channels * in_channels * kernel * kernel + out_channels,
        LayerKind::Dense { out_features } => out_features * in_shape[0] + out_features,
        LayerKind::BatchNorm => 4 * in_shape[0],
        _ => 0,
    }
}

impl<S: Scalar> Model<S> {
    /// Builds a model with deterministic He-style fan-in uniform weights.
    /// The same `(spec, seed)` always yields bit-identical parameters.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self, NnError> {
        let shapes = infer_shapes(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(spec.layers.len());
        let mut in_shape = spec.input_shape.clone();
        for (l, out_shape) in spec.layers.iter().zip(&shapes) {
            let n = param_len(&l.kind, &in_shape);
            let mut p = vec![S::ZERO; n];
            match &l.kind {
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound);
                    let w = out_channels * fan_in;
                    for v in p.iter_mut().take(w) {
                        *v = S::from_f64(dist.sample(&mut rng));
                    }
                    // biases stay zero
                }
                LayerKind::Dense { out_features } => {
                    let fan_in = in_shape[0];
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound);
                    let w = out_features * fan_in;
                    for v in p.iter_mut().take(w) {
                        *v = S::from_f64(dist.sample(&mut rng));
                    }
                }
                LayerKind::BatchNorm => {
                    let c = in_shape[0];
                    for v in p.iter_mut().take(c) {
                        *v = S::ONE; // gamma
                    }
                    // beta and running mean stay zero
                    for v in p.iter_mut().skip(3 * c) {
                        *v = S::ONE; // running var
                    }
                }
                _ => {}
            }
            params.push(p);
            in_shape = out_shape.clone();
        }
        Ok(Model {
            spec: spec.clone(),
            shapes,
            params,
            seed,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.spec.layers.iter().map(|l| l.name.as_str())
    }

    /// Output sample shape of layer `idx`.
    pub fn output_shape(&self, idx: usize) -> &[usize] {
        &self.shapes[idx]
    }

    /// Input sample shape of layer `idx`.
    fn layer_input_shape(&self, idx: usize) -> &[usize] {
        if idx == 0 {
            &self.spec.input_shape
        } else {
            &self.shapes[idx - 1]
        }
    }

    pub fn params(&self) -> &[Vec<S>] {
        &self.params
    }

    pub fn param_vec(&self, name: &str) -> Option<&[S]> {
        let idx = self.spec.layers.iter().position(|l| l.name == name)?;
        Some(&self.params[idx])
    }

    pub fn param_vec_mut(&mut self, name: &str) -> Option<&mut Vec<S>> {
        let idx = self.spec.layers.iter().position(|l| l.name == name)?;
        Some(&mut self.params[idx])
    }

    /// Total parameter count, a pure function of the spec.
    pub fn param_count(&self) -> u64 {
        self.params.iter().map(|p| p.len() as u64).sum()
    }

    /// Replaces all parameters; lengths must match the spec layout.
    pub fn set_params(&mut self, params: Vec<Vec<S>>) -> Result<(), NnError> {
        if params.len() != self.params.len() {
            return Err(NnError::ParamLength {
                name: "<model>".into(),
                got: params.len(),
                expected: self.params.len(),
            });
        }
        for ((l, old), new) in self.spec.layers.iter().zip(&self.params).zip(&params) {
            if old.len() != new.len() {
                return Err(NnError::ParamLength {
                    name: l.name.clone(),
                    got: new.len(),
                    expected: old.len(),
                });
            }
        }
        self.params = params;
        Ok(())
    }

    /// Names of layers owning parameters (conv, dense, batch norm), spec order.
    pub fn parameterized_layers(&self) -> Vec<String> {
        self.spec
            .layers
            .iter()
            .filter(|l| l.kind.is_parameterized())
            .map(|l| l.name.clone())
            .collect()
    }

    /// Names of decoupling-candidate layers (conv, dense), spec order.
    pub fn eligible_layers(&self) -> Vec<String> {
        self.spec
            .layers
            .iter()
            .filter(|l| l.kind.is_eligible())
            .map(|l| l.name.clone())
            .collect()
    }

    fn check_batch(&self, batch: &Tensor<S>) -> Result<(), NnError> {
        if batch.sample_shape() != self.spec.input_shape.as_slice() || batch.batch() == 0 {
            return Err(NnError::ShapeMismatch {
                expected: self.spec.input_shape.clone(),
                got: batch.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn conv_geom(&self, idx: usize) -> ConvGeom {
        let in_shape = self.layer_input_shape(idx);
        let out_shape = &self.shapes[idx];
        match self.spec.layers[idx].kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => ConvGeom {
                in_c: in_channels,
                out_c: out_channels,
                kernel,
                stride,
                pad,
                in_h: in_shape[1],
                in_w: in_shape[2],
                out_h: out_shape[1],
                out_w: out_shape[2],
            },
            _ => unreachable!("conv_geom on non-conv layer"),
        }
    }

    fn batch_shape(&self, idx: usize, batch: usize) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.shapes[idx].len() + 1);
        s.push(batch);
        s.extend_from_slice(&self.shapes[idx]);
        s
    }

    /// Inference forward pass. Batch-norm layers use running statistics and
    /// the model is left untouched. Returns the logits and the per-layer
    /// activation trace in spec order.
    pub fn forward(&self, batch: &Tensor<S>) -> Result<(Tensor<S>, ForwardTrace<S>), NnError> {
        self.check_batch(batch)?;
        let b = batch.batch();
        let mut cur = batch.clone();
        let mut entries = Vec::with_capacity(self.spec.layers.len());
        for (idx, l) in self.spec.layers.iter().enumerate() {
            let p = &self.params[idx];
            cur = match &l.kind {
                LayerKind::Conv2d { .. } => {
                    let g = self.conv_geom(idx);
                    let w = g.weight_len();
                    layers::conv2d_forward(&cur, &p[..w], &p[w..], &g)
                }
                LayerKind::Dense { out_features } => {
                    let in_f = self.layer_input_shape(idx)[0];
                    let w = out_features * in_f;
                    layers::dense_forward(&cur, &p[..w], &p[w..], *out_features)
                }
                LayerKind::MaxPool2d { kernel, stride } => {
                    let out = &self.shapes[idx];
                    layers::maxpool_forward(&cur, *kernel, *stride, out[1], out[2]).0
                }
                LayerKind::Flatten => cur.reshaped(&self.batch_shape(idx, b)),
                LayerKind::Relu => layers::relu_forward(&cur),
                LayerKind::BatchNorm => {
                    let c = layers::bn_channels(self.layer_input_shape(idx));
                    layers::bn_forward_eval(&cur, p, c)
                }
            };
            entries.push((l.name.clone(), cur.clone()));
        }
        Ok((cur, ForwardTrace { entries }))
    }

    /// Training forward pass: batch-norm uses batch statistics and updates
    /// running statistics in place.
    fn forward_train(&mut self, batch: &Tensor<S>) -> (Tensor<S>, Vec<Cache<S>>) {
        let b = batch.batch();
        let mut cur = batch.clone();
        let mut caches = Vec::with_capacity(self.spec.layers.len());
        for idx in 0..self.spec.layers.len() {
            let kind = self.spec.layers[idx].kind.clone();
            let (next, cache) = match kind {
                LayerKind::Conv2d { .. } => {
                    let g = self.conv_geom(idx);
                    let p = &self.params[idx];
                    let w = g.weight_len();
                    let y = layers::conv2d_forward(&cur, &p[..w], &p[w..], &g);
                    (y, Cache::Conv { x: cur })
                }
                LayerKind::Dense { out_features } => {
                    let in_f = self.layer_input_shape(idx)[0];
                    let p = &self.params[idx];
                    let w = out_features * in_f;
                    let y = layers::dense_forward(&cur, &p[..w], &p[w..], out_features);
                    (y, Cache::Dense { x: cur })
                }
                LayerKind::MaxPool2d { kernel, stride } => {
                    let out_shape = self.shapes[idx].clone();
                    let in_shape = {
                        let mut s = vec![b];
                        s.extend_from_slice(self.layer_input_shape(idx));
                        s
                    };
                    let (y, argmax) =
                        layers::maxpool_forward(&cur, kernel, stride, out_shape[1], out_shape[2]);
                    (y, Cache::Pool { argmax, in_shape })
                }
                LayerKind::Flatten => {
                    let in_shape = cur.shape().to_vec();
                    let y = cur.reshaped(&self.batch_shape(idx, b));
                    (y, Cache::Flatten { in_shape })
                }
                LayerKind::Relu => {
                    let y = layers::relu_forward(&cur);
                    (y, Cache::Relu { x: cur })
                }
                LayerKind::BatchNorm => {
                    let c = layers::bn_channels(self.layer_input_shape(idx));
                    let (y, bn) = layers::bn_forward_train(&cur, &mut self.params[idx], c);
                    (y, Cache::Bn(bn))
                }
            };
            cur = next;
            caches.push(cache);
        }
        (cur, caches)
    }

    /// Backpropagates `dlogits`, returning one gradient vector per layer.
    fn backward(&self, caches: &[Cache<S>], dlogits: Tensor<S>) -> Result<Vec<Vec<S>>, NnError> {
        let mut grads = vec![Vec::new(); self.spec.layers.len()];
        let mut dy = dlogits;
        for idx in (0..self.spec.layers.len()).rev() {
            let l = &self.spec.layers[idx];
            let p = &self.params[idx];
            dy = match (&l.kind, &caches[idx]) {
                (LayerKind::Conv2d { .. }, Cache::Conv { x }) => {
                    let g = self.conv_geom(idx);
                    let w = g.weight_len();
                    let (dw, db, dx) = layers::conv2d_backward(x, &p[..w], &dy, &g);
                    grads[idx] = [dw, db].concat();
                    dx
                }
                (LayerKind::Dense { out_features }, Cache::Dense { x }) => {
                    let in_f = self.layer_input_shape(idx)[0];
                    let w = out_features * in_f;
                    let (dw, db, dx) = layers::dense_backward(x, &p[..w], &dy, *out_features);
                    grads[idx] = [dw, db].concat();
                    dx
                }
                (LayerKind::MaxPool2d { .. }, Cache::Pool { argmax, in_shape }) => {
                    layers::maxpool_backward(&dy, argmax, in_shape)
                }
                (LayerKind::Flatten, Cache::Flatten { in_shape }) => dy.reshaped(in_shape),
                (LayerKind::Relu, Cache::Relu { x }) => layers::relu_backward(x, &dy),
                (LayerKind::BatchNorm, Cache::Bn(bn)) => {
                    let c = layers::bn_channels(self.layer_input_shape(idx));
                    let (dg, dx) = layers::bn_backward(bn, p, c, &dy);
                    grads[idx] = dg;
                    dx
                }
                _ => unreachable!("cache kind mismatch"),
            };
            let bad = grads[idx].iter().filter(|v| !v.is_finite()).count();
            if bad > 0 {
                return Err(NnError::NonFiniteGradient {
                    layer: l.name.clone(),
                    count: bad,
                });
            }
        }
        Ok(grads)
    }

    /// One pass of mini-batch SGD over `(inputs, labels)` with softmax
    /// cross-entropy. The order of samples is a deterministic shuffle drawn
    /// from `rng`; the caller seeds it per (client, round, epoch).
    pub fn sgd_epoch(
        &mut self,
        inputs: &Tensor<S>,
        labels: &[u32],
        lr: f64,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<EpochStats, NnError> {
        self.check_batch(inputs)?;
        let n = inputs.batch();
        if n == 0 {
            return Err(NnError::EmptyData);
        }
        if labels.len() != n {
            return Err(NnError::LabelCountMismatch {
                labels: labels.len(),
                inputs: n,
            });
        }
        let batch_size = batch_size.max(1);
        let mut order: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        order.shuffle(rng);

        let lr_s = S::from_f64(lr);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let (bx, by) = gather_batch(inputs, labels, chunk);
            let (logits, caches) = self.forward_train(&bx);
            let (batch_loss_sum, dlogits) = softmax_xent(&logits, &by);
            loss_sum += batch_loss_sum;
            let grads = self.backward(&caches, dlogits)?;
            for (p, g) in self.params.iter_mut().zip(&grads) {
                for (pv, gv) in p.iter_mut().zip(g) {
                    *pv -= lr_s * *gv;
                }
            }
            batches += 1;
        }
        Ok(EpochStats {
            mean_loss: loss_sum / n as f64,
            batches,
        })
    }

    /// Mean training-mode loss and its gradient for one batch, without
    /// persisting any state. Gradients correspond to the loss returned.
    pub fn loss_gradients(
        &self,
        inputs: &Tensor<S>,
        labels: &[u32],
    ) -> Result<(f64, Vec<Vec<S>>), NnError> {
        self.check_batch(inputs)?;
        let mut scratch = self.clone();
        let (logits, caches) = scratch.forward_train(inputs);
        let (loss_sum, dlogits) = softmax_xent(&logits, labels);
        let grads = scratch.backward(&caches, dlogits)?;
        Ok((loss_sum / inputs.batch() as f64, grads))
    }

    /// Mean training-mode loss for one batch (batch statistics for batch
    /// norm), without persisting any state.
    pub fn training_loss(&self, inputs: &Tensor<S>, labels: &[u32]) -> Result<f64, NnError> {
        self.check_batch(inputs)?;
        let mut scratch = self.clone();
        let (logits, _) = scratch.forward_train(inputs);
        Ok(softmax_xent(&logits, labels).0 / inputs.batch() as f64)
    }

    pub fn params_mut(&mut self) -> &mut [Vec<S>] {
        &mut self.params
    }

    /// Mean cross-entropy over a dataset without updating anything.
    pub fn mean_loss(&self, inputs: &Tensor<S>, labels: &[u32], batch_size: usize) -> Result<f64, NnError> {
        self.check_batch(inputs)?;
        let n = inputs.batch();
        let mut loss_sum = 0.0;
        for start in (0..n).step_by(batch_size.max(1)) {
            let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
            let (bx, by) = gather_batch(inputs, labels, &idx);
            let (logits, _) = self.forward(&bx)?;
            loss_sum += softmax_xent(&logits, &by).0;
        }
        Ok(loss_sum / n as f64)
    }

    /// Predicted class per sample, evaluated in fixed-size chunks.
    pub fn predict(&self, inputs: &Tensor<S>, batch_size: usize) -> Result<Vec<u32>, NnError> {
        self.check_batch(inputs)?;
        let n = inputs.batch();
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(batch_size.max(1)) {
            let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
            let bx = gather_rows(inputs, &idx);
            let (logits, _) = self.forward(&bx)?;
            let classes = logits.sample_shape()[0];
            for bi in 0..idx.len() {
                let row = &logits.data()[bi * classes..(bi + 1) * classes];
                let mut best = 0usize;
                for (c, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = c;
                    }
                }
                out.push(best as u32);
            }
        }
        Ok(out)
    }

    /// Splits parameters into a single-layer head and the remaining body.
    pub fn split_params(&self, head_layer: &str) -> Result<ParamPartition<S>, NnError> {
        let idx = match self.spec.layers.iter().position(|l| l.name == head_layer) {
            Some(i) => i,
            None => {
                return Err(NnError::UnknownLayer {
                    name: head_layer.to_string(),
                    valid: self.parameterized_layers().join(", "),
                })
            }
        };
        if !self.spec.layers[idx].kind.is_parameterized() {
            return Err(NnError::NotParameterized(head_layer.to_string()));
        }
        let mut body = Vec::new();
        let mut head = Vec::new();
        for (i, l) in self.spec.layers.iter().enumerate() {
            if !l.kind.is_parameterized() {
                continue;
            }
            let entry = (l.name.clone(), self.params[i].clone());
            if i == idx {
                head.push(entry);
            } else {
                body.push(entry);
            }
        }
        Ok(ParamPartition {
            head_layer: head_layer.to_string(),
            body,
            head,
        })
    }

    /// Reassembles a partition into the full per-layer parameter list.
    /// Inverse of [`Model::split_params`] for every valid head choice.
    pub fn merge_params(&self, partition: &ParamPartition<S>) -> Result<Vec<Vec<S>>, NnError> {
        let mut by_name: std::collections::BTreeMap<&str, &Vec<S>> = std::collections::BTreeMap::new();
        for (name, values) in partition.body.iter().chain(partition.head.iter()) {
            if by_name.insert(name.as_str(), values).is_some() {
                return Err(NnError::PartitionDuplicate(name.clone()));
            }
        }
        let mut out = Vec::with_capacity(self.spec.layers.len());
        for (i, l) in self.spec.layers.iter().enumerate() {
            if !l.kind.is_parameterized() {
                out.push(Vec::new());
                continue;
            }
            match by_name.remove(l.name.as_str()) {
                Some(values) => {
                    if values.len() != self.params[i].len() {
                        return Err(NnError::PartitionLength {
                            name: l.name.clone(),
                            got: values.len(),
                            expected: self.params[i].len(),
                        });
                    }
                    out.push(values.clone());
                }
                None => return Err(NnError::PartitionMissing(l.name.clone())),
            }
        }
        if let Some((name, _)) = by_name.into_iter().next() {
            return Err(NnError::PartitionUnknown(name.to_string()));
        }
        Ok(out)
    }
}

fn gather_rows<S: Scalar>(inputs: &Tensor<S>, idx: &[usize]) -> Tensor<S> {
    let row = inputs.numel() / inputs.batch();
    let mut shape = inputs.shape().to_vec();
    shape[0] = idx.len();
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        data.extend_from_slice(&inputs.data()[i * row..(i + 1) * row]);
    }
    Tensor::from_vec(&shape, data)
}

fn gather_batch<S: Scalar>(
    inputs: &Tensor<S>,
    labels: &[u32],
    idx: &[usize],
) -> (Tensor<S>, Vec<u32>) {
    (
        gather_rows(inputs, idx),
        idx.iter().map(|&i| labels[i]).collect(),
    )
}

/// Softmax cross-entropy: returns the summed loss over the batch (f64) and
/// the gradient of the *mean* batch loss w.r.t. the logits.
fn softmax_xent<S: Scalar>(logits: &Tensor<S>, labels: &[u32]) -> (f64, Tensor<S>) {
    let b = logits.batch();
    let c = logits.sample_shape()[0];
    let inv_b = 1.0 / b as f64;
    let mut dlogits = Tensor::zeros(logits.shape());
    let mut loss_sum = 0.0f64;
    for bi in 0..b {
        let row = &logits.data()[bi * c..(bi + 1) * c];
        let mut maxv = row[0].to_f64();
        for v in row {
            maxv = maxv.max(v.to_f64());
        }
        let mut sum = 0.0f64;
        for v in row {
            sum += (v.to_f64() - maxv).exp();
        }
        let lse = maxv + sum.ln();
        let y = labels[bi] as usize;
        loss_sum += lse - row[y].to_f64();
        let drow = &mut dlogits.data_mut()[bi * c..(bi + 1) * c];
        for (ci, v) in row.iter().enumerate() {
            let p = (v.to_f64() - lse).exp();
            let target = if ci == y { 1.0 } else { 0.0 };
            drow[ci] = S::from_f64((p - target) * inv_b);
        }
    }
    (loss_sum, dlogits)
}

/// Standard library of model specs used by the simulator.
pub mod arch {
    use super::{LayerKind, LayerSpec, ModelSpec};

    fn conv_block(specs: &mut Vec<LayerSpec>, idx: usize, in_c: usize, out_c: usize) {
        specs.push(LayerSpec::new(
            &format!("conv{idx}"),
            LayerKind::Conv2d {
                in_channels: in_c,
                out_channels: out_c,
                kernel: 5,
                stride: 1,
                pad: 0,
            },
        ));
        specs.push(LayerSpec::new(&format!("bn{idx}"), LayerKind::BatchNorm));
        specs.push(LayerSpec::new(&format!("relu{idx}"), LayerKind::Relu));
    }

    fn lenet_trunk(input_shape: &[usize]) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        conv_block(&mut specs, 1, input_shape[0], 6);
        conv_block(&mut specs, 2, 6, 16);
        specs.push(LayerSpec::new(
            "pool1",
            LayerKind::MaxPool2d { kernel: 2, stride: 2 },
        ));
        specs.push(LayerSpec::new("flatten", LayerKind::Flatten));
        specs
    }

    fn dense_tail(specs: &mut Vec<LayerSpec>, hidden: &[usize], classes: usize, relu_from: usize) {
        for (i, h) in hidden.iter().enumerate() {
            specs.push(LayerSpec::new(
                &format!("fc{}", i + 1),
                LayerKind::Dense { out_features: *h },
            ));
            specs.push(LayerSpec::new(
                &format!("relu{}", relu_from + i),
                LayerKind::Relu,
            ));
        }
        specs.push(LayerSpec::new(
            "classifier",
            LayerKind::Dense {
                out_features: classes,
            },
        ));
    }

    /// Two conv blocks, one pool, then fc1(120), fc2(84), classifier.
    pub fn lenet5(input_shape: &[usize], classes: usize) -> ModelSpec {
        let mut layers = lenet_trunk(input_shape);
        dense_tail(&mut layers, &[120, 84], classes, 3);
        ModelSpec {
            input_shape: input_shape.to_vec(),
            layers,
        }
    }

    /// Shortened variant: single fc(120) before the classifier.
    pub fn lenet5_ext1(input_shape: &[usize], classes: usize) -> ModelSpec {
        let mut layers = lenet_trunk(input_shape);
        dense_tail(&mut layers, &[120], classes, 3);
        ModelSpec {
            input_shape: input_shape.to_vec(),
            layers,
        }
    }

    /// Extended variant: fc1(120), fc2(84), fc3(64) before the classifier.
    pub fn lenet5_ext2(input_shape: &[usize], classes: usize) -> ModelSpec {
        let mut layers = lenet_trunk(input_shape);
        dense_tail(&mut layers, &[120, 84, 64], classes, 3);
        ModelSpec {
            input_shape: input_shape.to_vec(),
            layers,
        }
    }

    /// Dense-only net: hidden layers with ReLU, then the classifier. Inputs
    /// with more than one axis get a leading flatten layer.
    pub fn dense_net(input_shape: &[usize], hidden: &[usize], classes: usize) -> ModelSpec {
        let mut layers = Vec::new();
        if input_shape.len() > 1 {
            layers.push(LayerSpec::new("flatten", LayerKind::Flatten));
        }
        dense_tail(&mut layers, hidden, classes, 1);
        ModelSpec {
            input_shape: input_shape.to_vec(),
            layers,
        }
    }
}
