//! The CWNet family of target networks: construction, initialization,
//! momentum SGD, prediction, and checkpoints.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{make_batches, LabeledDataset};
use crate::error::{Error, Result};
use crate::reprogram::ClassMap;
use crate::rng::{self, streams};
use crate::tensor::{Tape, Tensor, Var};

/// Anything that maps a `C×H×W` input to class scores and can report the
/// input gradient of its per-sample loss.
pub trait InputModel: Sync {
    fn input_shape(&self) -> [usize; 3];

    fn num_classes(&self) -> usize;

    fn logits(&self, x: &Tensor) -> Result<Vec<f64>>;

    fn loss(&self, x: &Tensor, label: usize) -> Result<f64>;

    /// Per-sample loss and `∇ₓ loss`, shaped like `x`.
    fn loss_and_input_grad(&self, x: &Tensor, label: usize) -> Result<(f64, Tensor)>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    /// Frozen per-channel z-score using the network's stored statistics.
    Standardize,
    Conv {
        weight: usize,
        bias: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        window: usize,
    },
    /// Only active when training with dropout enabled.
    Dropout {
        rate: f64,
    },
    Flatten,
    Dense {
        weight: usize,
        bias: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Starting point for training.
    TrainedInit,
    /// Random weights kept as-is: the "U" control.
    UntrainedRandom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    params: Vec<Tensor>,
    input_shape: [usize; 3],
    num_classes: usize,
    standardization: Option<Standardization>,
}

/// Filter/unit counts of a CWNet at a given width scale.
pub fn cwnet_widths(width_scale: f64) -> ([usize; 4], usize) {
    let scaled = |n: f64| ((n * width_scale).round() as usize).max(1);
    (
        [scaled(32.0), scaled(32.0), scaled(64.0), scaled(64.0)],
        scaled(200.0),
    )
}

struct Builder {
    layers: Vec<Layer>,
    params: Vec<Tensor>,
    shape: Vec<usize>,
}

impl Builder {
    fn conv(&mut self, filters: usize) {
        let c_in = self.shape[0];
        self.params.push(Tensor::zeros(&[filters, c_in, 3, 3]));
        self.params.push(Tensor::zeros(&[filters]));
        let n = self.params.len();
        self.layers.push(Layer::Conv {
            weight: n - 2,
            bias: n - 1,
            stride: 1,
            padding: 1,
        });
        self.shape[0] = filters;
    }

    fn pool(&mut self) {
        self.layers.push(Layer::MaxPool { window: 2 });
        self.shape[1] /= 2;
        self.shape[2] /= 2;
    }

    fn dense(&mut self, units: usize) {
        let fan_in: usize = self.shape.iter().product();
        self.params.push(Tensor::zeros(&[fan_in, units]));
        self.params.push(Tensor::zeros(&[units]));
        let n = self.params.len();
        self.layers.push(Layer::Dense {
            weight: n - 2,
            bias: n - 1,
        });
        self.shape = vec![units];
    }
}

/// CWNet: conv-conv-pool-conv-conv(+dropout)-pool-fc-fc-logits with 3×3
/// kernels ("same" padding) and 2×2 pooling. Counts scale with
/// `width_scale`; scale 1 gives 32/32/64/64 filters and 200/200 units.
/// Parameters start at zero; call [`Network::init_weights`].
pub fn build_cwnet(input_shape: [usize; 3], num_classes: usize, width_scale: f64) -> Result<Network> {
    let [c, h, w] = input_shape;
    if c == 0 || h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
        return Err(Error::dim(format!(
            "CWNet input {input_shape:?} must have spatial extents divisible by 4"
        )));
    }
    if !(width_scale > 0.0) || num_classes == 0 {
        return Err(Error::Config(format!(
            "width scale {width_scale} and class count {num_classes} must be positive"
        )));
    }
    let (filters, units) = cwnet_widths(width_scale);
    let mut b = Builder {
        layers: vec![Layer::Standardize],
        params: Vec::new(),
        shape: input_shape.to_vec(),
    };
    b.conv(filters[0]);
    b.layers.push(Layer::Relu);
    b.conv(filters[1]);
    b.layers.push(Layer::Relu);
    b.pool();
    b.conv(filters[2]);
    b.layers.push(Layer::Relu);
    b.conv(filters[3]);
    b.layers.push(Layer::Dropout { rate: 0.5 });
    b.layers.push(Layer::Relu);
    b.pool();
    b.layers.push(Layer::Flatten);
    b.dense(units);
    b.layers.push(Layer::Relu);
    b.dense(units);
    b.layers.push(Layer::Relu);
    b.dense(num_classes);
    Ok(Network {
        layers: b.layers,
        params: b.params,
        input_shape,
        num_classes,
        standardization: None,
    })
}

/// A single affine layer on the flattened input: linear logits.
pub fn build_linear(input_shape: [usize; 3], num_classes: usize) -> Result<Network> {
    if input_shape.contains(&0) || num_classes == 0 {
        return Err(Error::dim(format!("linear model {input_shape:?} -> {num_classes}")));
    }
    let mut b = Builder {
        layers: vec![Layer::Flatten],
        params: Vec::new(),
        shape: input_shape.to_vec(),
    };
    b.dense(num_classes);
    Ok(Network {
        layers: b.layers,
        params: b.params,
        input_shape,
        num_classes,
        standardization: None,
    })
}

impl Network {
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    pub fn set_standardization(&mut self, mean: Vec<f64>, std: Vec<f64>) -> Result<()> {
        let c = self.input_shape[0];
        if mean.len() != c || std.len() != c || std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config(format!(
                "standardization needs {c} means and {c} positive deviations"
            )));
        }
        self.standardization = Some(Standardization { mean, std });
        Ok(())
    }

    pub fn conv_filters(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv { weight, .. } => Some(self.params[*weight].shape()[0]),
                _ => None,
            })
            .collect()
    }

    pub fn dense_units(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Dense { weight, .. } => Some(self.params[*weight].shape()[1]),
                _ => None,
            })
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Fan-in scaled uniform weights in `±sqrt(1 / fan_in)`, zero biases.
    /// Both modes use the same initializer; the mode is a label.
    pub fn init_weights(&mut self, seed: u64, _mode: InitMode) {
        let mut rng = rng::stream(seed, streams::INIT);
        for layer in &self.layers {
            let (w, b) = match layer {
                Layer::Conv { weight, bias, .. } | Layer::Dense { weight, bias } => (*weight, *bias),
                _ => continue,
            };
            let shape = self.params[w].shape();
            let fan_in: usize = match layer {
                Layer::Conv { .. } => shape[1..].iter().product(),
                _ => shape[0],
            };
            let bound = (1.0 / fan_in as f64).sqrt();
            for v in self.params[w].data_mut() {
                *v = rng.random_range(-bound..bound);
            }
            self.params[b].data_mut().fill(0.0);
        }
    }

    pub fn params_on(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.clone(), requires_grad))
            .collect()
    }

    /// Records the forward pass; returns `1×numClasses` logits. Dropout
    /// layers are identity unless `dropout_rng` is given.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        params: &[Var],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        if tape.value(x).shape() != self.input_shape {
            return Err(Error::dim(format!(
                "network expects {:?}, got {:?}",
                self.input_shape,
                tape.value(x).shape()
            )));
        }
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::Standardize => match &self.standardization {
                    Some(s) => {
                        let scale: Vec<f64> = s.std.iter().map(|d| 1.0 / d).collect();
                        let shift: Vec<f64> = s.mean.iter().zip(&s.std).map(|(m, d)| -m / d).collect();
                        tape.channel_affine(h, &scale, &shift)?
                    }
                    None => h,
                },
                Layer::Conv {
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let y = tape.conv2d(h, params[*weight], *stride, *padding)?;
                    tape.add_channel_bias(y, params[*bias])?
                }
                Layer::Relu => tape.relu(h),
                Layer::MaxPool { window } => tape.maxpool2d(h, *window)?,
                Layer::Dropout { rate } => match dropout_rng.as_deref_mut() {
                    Some(rng) if *rate > 0.0 => {
                        let keep = 1.0 - rate;
                        let shape = tape.value(h).shape().to_vec();
                        let numel = tape.value(h).len();
                        let keep_mask = (0..numel)
                            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect();
                        let m = tape.constant(Tensor::new(shape, keep_mask)?);
                        tape.mul(h, m)?
                    }
                    _ => h,
                },
                Layer::Flatten => {
                    let n = tape.value(h).len();
                    tape.reshape(h, &[1, n])?
                }
                Layer::Dense { weight, bias } => {
                    let y = tape.matmul(h, params[*weight])?;
                    tape.add_row_bias(y, params[*bias])?
                }
            };
        }
        Ok(h)
    }

    fn expect_dataset_shape(&self, ds: &LabeledDataset) -> Result<()> {
        if ds.sample_shape() != self.input_shape {
            return Err(Error::dim(format!(
                "dataset {} has samples {:?}, network expects {:?}",
                ds.name(),
                ds.sample_shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Loss and parameter gradients for one sample.
    fn sample_param_grads(&self, x: &Tensor, label: usize, dropout: Option<ChaCha8Rng>) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let params = self.params_on(&mut tape, true);
        let mut rng = dropout;
        let logits = self.forward(&mut tape, xv, &params, rng.as_mut())?;
        let loss = tape.softmax_cross_entropy(logits, &[label])?;
        let value = tape.value(loss).item().expect("scalar");
        tape.backward(loss)?;
        let grads = params
            .iter()
            .map(|&p| tape.take_grad(p).unwrap_or_else(|| Tensor::zeros(tape.value(p).shape())))
            .collect();
        Ok((value, grads))
    }
}

impl InputModel for Network {
    fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let params = self.params_on(&mut tape, false);
        let out = self.forward(&mut tape, xv, &params, None)?;
        Ok(tape.value(out).data().to_vec())
    }

    fn loss(&self, x: &Tensor, label: usize) -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let params = self.params_on(&mut tape, false);
        let out = self.forward(&mut tape, xv, &params, None)?;
        let loss = tape.softmax_cross_entropy(out, &[label])?;
        Ok(tape.value(loss).item().expect("scalar"))
    }

    fn loss_and_input_grad(&self, x: &Tensor, label: usize) -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let params = self.params_on(&mut tape, false);
        let out = self.forward(&mut tape, xv, &params, None)?;
        let loss = tape.softmax_cross_entropy(out, &[label])?;
        let value = tape.value(loss).item().expect("scalar");
        tape.backward(loss)?;
        let grad = tape.take_grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
        Ok((value, grad))
    }
}

/// Score model `ℓ(x, y) = wᵀx + b` whose loss ignores the label. Its input
/// gradient is `w` everywhere, which makes first-order predictions exact.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearScoreModel {
    pub weight: Tensor,
    pub bias: f64,
}

impl LinearScoreModel {
    pub fn new(weight: Tensor, bias: f64) -> Result<Self> {
        if weight.rank() != 3 {
            return Err(Error::dim(format!("weight must be C×H×W, got {:?}", weight.shape())));
        }
        Ok(Self { weight, bias })
    }
}

impl InputModel for LinearScoreModel {
    fn input_shape(&self) -> [usize; 3] {
        let s = self.weight.shape();
        [s[0], s[1], s[2]]
    }

    fn num_classes(&self) -> usize {
        1
    }

    fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(vec![self.weight.dot(x)? + self.bias])
    }

    fn loss(&self, x: &Tensor, _label: usize) -> Result<f64> {
        Ok(self.weight.dot(x)? + self.bias)
    }

    fn loss_and_input_grad(&self, x: &Tensor, label: usize) -> Result<(f64, Tensor)> {
        Ok((self.loss(x, label)?, self.weight.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Enables the dropout layer (rate 0.5) during training.
    pub dropout: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            learning_rate: 0.001,
            momentum: 0.9,
            batch_size: 10,
            seed: 0,
            dropout: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "invalid training config: batch {}, lr {}, momentum {}",
                self.batch_size, self.learning_rate, self.momentum
            )));
        }
        Ok(())
    }
}

/// Mini-batch SGD with classical momentum (`v ← m·v + g; θ ← θ − lr·v`).
/// Per-sample gradients are reduced in index order, so results do not depend
/// on thread scheduling. Returns the mean training loss of each epoch.
pub fn train_sgd(net: &mut Network, ds: &LabeledDataset, cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    net.expect_dataset_shape(ds)?;
    let mut velocity: Vec<Tensor> = net.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = make_batches(ds.len(), cfg.batch_size, cfg.seed, epoch as u64)?;
        let mut epoch_loss = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let per_sample: Vec<(f64, Vec<Tensor>)> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &i)| {
                    let dropout = cfg.dropout.then(|| {
                        let id = (epoch * ds.len() + b * cfg.batch_size + k) as u64;
                        rng::stream(cfg.seed, streams::DROPOUT_BASE + id)
                    });
                    net.sample_param_grads(&ds.sample(i), ds.labels()[i], dropout)
                })
                .collect::<Result<_>>()?;
            let inv = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            let mut grads: Vec<Tensor> = net.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            for (loss, g) in &per_sample {
                batch_loss += loss;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.axpy(inv, gi)?;
                }
            }
            batch_loss *= inv;
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    loss: batch_loss,
                });
            }
            epoch_loss += batch_loss;
            for ((p, v), g) in net.params.iter_mut().zip(&mut velocity).zip(&grads) {
                for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vv = cfg.momentum * *vv + gv;
                    *pv -= cfg.learning_rate * *vv;
                }
            }
        }
        history.push(epoch_loss / batches.len() as f64);
    }
    Ok(history)
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

/// Predicted labels and logits for every sample of an `n×C×H×W` stack.
pub fn predict_batch<M: InputModel + ?Sized>(model: &M, images: &Tensor) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let s = images.shape();
    if s.len() != 4 || [s[1], s[2], s[3]] != model.input_shape() {
        return Err(Error::dim(format!(
            "images {s:?} do not match model input {:?}",
            model.input_shape()
        )));
    }
    let len = s[1] * s[2] * s[3];
    let logits: Vec<Vec<f64>> = (0..s[0])
        .into_par_iter()
        .map(|i| {
            let x = Tensor::new(s[1..].to_vec(), images.data()[i * len..(i + 1) * len].to_vec())?;
            model.logits(&x)
        })
        .collect::<Result<_>>()?;
    let labels = logits.iter().map(|l| argmax(l)).collect();
    Ok((labels, logits))
}

/// Fraction of samples whose prediction equals `h(y)` (or `y` without a map).
pub fn accuracy<M: InputModel + ?Sized>(model: &M, ds: &LabeledDataset, mapping: Option<&ClassMap>) -> Result<f64> {
    let (pred, _) = predict_batch(model, ds.images())?;
    Ok(mapped_accuracy(&pred, ds.labels(), mapping))
}

pub(crate) fn mapped_accuracy(pred: &[usize], labels: &[usize], mapping: Option<&ClassMap>) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = pred
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| p == mapping.map_or(y, |h| h.source_class(y)))
        .count();
    hits as f64 / labels.len() as f64
}

/// Metadata stored next to a network checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture: String,
    pub width_scale: f64,
    pub trained: bool,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: CheckpointMeta,
    input_shape: [usize; 3],
    num_classes: usize,
    layers: Vec<Layer>,
    standardization: Option<Standardization>,
    params: Vec<String>,
}

impl Network {
    /// Writes `manifest.json` plus one `param_XX.tnsr` per parameter tensor.
    pub fn save(&self, dir: impl AsRef<Path>, meta: &CheckpointMeta) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut names = Vec::with_capacity(self.params.len());
        for (i, p) in self.params.iter().enumerate() {
            let name = format!("param_{i:02}.tnsr");
            p.save(dir.join(&name))?;
            names.push(name);
        }
        let manifest = Manifest {
            meta: meta.clone(),
            input_shape: self.input_shape,
            num_classes: self.num_classes,
            layers: self.layers.clone(),
            standardization: self.standardization.clone(),
            params: names,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Network, CheckpointMeta)> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let params = manifest
            .params
            .iter()
            .map(|name| Tensor::load(dir.join(name)))
            .collect::<Result<Vec<_>>>()?;
        let net = Network {
            layers: manifest.layers,
            params,
            input_shape: manifest.input_shape,
            num_classes: manifest.num_classes,
            standardization: manifest.standardization,
        };
        Ok((net, manifest.meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.0; 10]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn cwnet_rejects_indivisible_extents() {
        assert!(build_cwnet([3, 30, 32], 10, 1.0).is_err());
        assert!(build_cwnet([3, 32, 32], 10, 0.0).is_err());
    }

    #[test]
    fn train_config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.momentum = 1.0;
        assert!(cfg.validate().is_err());
    }
}
