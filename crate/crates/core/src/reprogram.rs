//! The adversarial program: frame masks, class maps, the masked
//! reprogramming loss, and sign-gradient descent with box projection.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{make_batches, LabeledDataset, PadSpec};
use crate::error::{Error, Result};
use crate::models::InputModel;
use crate::tensor::Tensor;

/// Samples evaluated in parallel before their results are folded in order.
const CHUNK: usize = 64;

/// Binary mask selecting the perturbable input coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    values: Tensor,
}

/// How a frame mask is laid out: ones inside the `outer` square around the
/// image (the whole input when `None`) and outside the image itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub pad: PadSpec,
    #[serde(default)]
    pub outer: Option<[usize; 2]>,
}

impl MaskSpec {
    pub fn build(&self) -> Result<Mask> {
        build_mask_for(&self.pad, self.outer)
    }
}

impl Mask {
    pub fn from_tensor(values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::dim(format!("mask must be C×H×W, got {:?}", values.shape())));
        }
        if values.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Argument("mask entries must be 0 or 1".into()));
        }
        Ok(Mask { values })
    }

    pub fn ones(shape: [usize; 3]) -> Self {
        Mask {
            values: Tensor::full(&shape, 1.0),
        }
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Mask {
            values: Tensor::zeros(&shape),
        }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.values.shape();
        [s[0], s[1], s[2]]
    }

    /// `‖M‖₁`: the number of ones.
    pub fn size(&self) -> usize {
        self.values.data().iter().filter(|&&v| v == 1.0).count()
    }

    /// `t ∘ M`
    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        t.zip_map(&self.values, |a, m| a * m)
    }
}

/// Ones everywhere except the centered `inner` image region, on every channel.
pub fn build_frame_mask(input_shape: [usize; 3], inner: [usize; 2]) -> Result<Mask> {
    build_mask_for(&PadSpec::centered(input_shape, inner)?, None)
}

/// Ones in the centered `outer` square minus the centered `inner` square.
pub fn build_annulus_mask(input_shape: [usize; 3], inner: [usize; 2], outer: [usize; 2]) -> Result<Mask> {
    build_mask_for(&PadSpec::centered(input_shape, inner)?, Some(outer))
}

/// Mask around the image placed by `pad`: ones inside an `outer` square
/// centered on the image (shifted to stay in frame), zeros on the image.
/// `None` selects the whole input.
pub fn build_mask_for(pad: &PadSpec, outer: Option<[usize; 2]>) -> Result<Mask> {
    pad.validate()?;
    let [c, h, w] = pad.target;
    let outer = outer.unwrap_or([h, w]);
    if outer[0] > h || outer[1] > w {
        return Err(Error::dim(format!("{outer:?} does not fit inside {h}x{w}")));
    }
    if outer[0] < pad.inner[0] || outer[1] < pad.inner[1] {
        return Err(Error::dim(format!(
            "outer extent {outer:?} is smaller than the image {:?}",
            pad.inner
        )));
    }
    let [top, left] = pad.origin();
    let place = |start: usize, inner: usize, outer: usize, limit: usize| {
        (start + inner / 2).saturating_sub(outer / 2).min(limit - outer)
    };
    let (oy, ox) = (place(top, pad.inner[0], outer[0], h), place(left, pad.inner[1], outer[1], w));
    let mut values = Tensor::zeros(&pad.target);
    let data = values.data_mut();
    for ch in 0..c {
        for y in oy..oy + outer[0] {
            for x in ox..ox + outer[1] {
                if !pad.is_inner(y, x) {
                    data[(ch * h + y) * w + x] = 1.0;
                }
            }
        }
    }
    Ok(Mask { values })
}

/// Injective map `h` from target labels to source labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMap {
    map: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ClassMapSpec {
    /// Target class `k` goes to source class `k`.
    #[default]
    FirstTen,
    Explicit(Vec<usize>),
}

pub fn build_class_map(num_target_classes: usize, spec: &ClassMapSpec) -> Result<ClassMap> {
    let map = match spec {
        ClassMapSpec::FirstTen => (0..num_target_classes).collect(),
        ClassMapSpec::Explicit(list) => {
            if list.len() != num_target_classes {
                return Err(Error::Argument(format!(
                    "class map lists {} classes for {num_target_classes} target classes",
                    list.len()
                )));
            }
            list.clone()
        }
    };
    ClassMap::new(map)
}

impl ClassMap {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for &s in &map {
            if !seen.insert(s) {
                return Err(Error::NotInjective(s));
            }
        }
        Ok(ClassMap { map })
    }

    pub fn identity(n: usize) -> Self {
        ClassMap { map: (0..n).collect() }
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.map
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn source_class(&self, target: usize) -> usize {
        self.map[target]
    }

    /// Target class mapped onto `source`, if any.
    pub fn target_of(&self, source: usize) -> Option<usize> {
        self.map.iter().position(|&s| s == source)
    }

    pub fn validate_for(&self, num_source_classes: usize, num_target_classes: usize) -> Result<()> {
        if self.map.len() != num_target_classes {
            return Err(Error::Config(format!(
                "class map covers {} target classes, dataset has {num_target_classes}",
                self.map.len()
            )));
        }
        if let Some(&bad) = self.map.iter().find(|&&s| s >= num_source_classes) {
            return Err(Error::Config(format!(
                "class map targets source class {bad}, model has {num_source_classes}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EvalSetChoice {
    /// Track the loss on the separate evaluation set.
    #[default]
    HeldOut,
    /// Track the loss on the optimization set itself.
    OptSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReprogramConfig {
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub opt_set_size: usize,
    pub eval_set_size: usize,
    pub seed: u64,
    pub eval_on: EvalSetChoice,
}

impl Default for ReprogramConfig {
    fn default() -> Self {
        ReprogramConfig {
            eta: 0.005,
            epochs: 100,
            batch_size: 50,
            opt_set_size: 5000,
            eval_set_size: 5000,
            seed: 0,
            eval_on: EvalSetChoice::HeldOut,
        }
    }
}

impl ReprogramConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::Config(format!("step size must be positive, got {}", self.eta)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// An optimized program `δ*` with the evaluation losses that selected it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Program {
    pub delta: Tensor,
    pub best_loss: f64,
    /// Epoch whose δ was kept; 0 is the zero program.
    pub best_epoch: usize,
    /// `history[0]` is the loss at δ = 0, `history[t]` the loss after epoch t.
    pub history: Vec<f64>,
}

impl Program {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Program {
            delta: Tensor::zeros(&shape),
            best_loss: f64::INFINITY,
            best_epoch: 0,
            history: Vec::new(),
        }
    }
}

/// Elementwise clamp onto `[-1, 1]`.
pub fn box_project(mut delta: Tensor) -> Tensor {
    for v in delta.data_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    delta
}

/// Sign with `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `x + δ ∘ M`. Fails if `x` is nonzero anywhere under the mask.
pub fn apply_program(x: &Tensor, delta: &Tensor, mask: &Mask) -> Result<Tensor> {
    x.expect_same_shape(delta)?;
    x.expect_same_shape(mask.values())?;
    check_frame_is_zero(x.data(), mask, "input")?;
    let mut out = x.clone();
    for ((o, d), m) in out.data_mut().iter_mut().zip(delta.data()).zip(mask.values().data()) {
        *o += d * m;
    }
    Ok(out)
}

fn check_frame_is_zero(x: &[f64], mask: &Mask, what: &str) -> Result<()> {
    if let Some(j) = x
        .iter()
        .zip(mask.values().data())
        .position(|(&v, &m)| m == 1.0 && v != 0.0)
    {
        return Err(Error::Precondition(format!(
            "{what} is nonzero ({}) under the mask at flat index {j}",
            x[j]
        )));
    }
    Ok(())
}

fn check_dataset<M: InputModel + ?Sized>(model: &M, ds: &LabeledDataset, mask: &Mask, h: &ClassMap) -> Result<()> {
    if ds.sample_shape() != model.input_shape() || mask.shape() != model.input_shape() {
        return Err(Error::dim(format!(
            "dataset {} samples {:?}, mask {:?}, model input {:?}",
            ds.name(),
            ds.sample_shape(),
            mask.shape(),
            model.input_shape()
        )));
    }
    h.validate_for(model.num_classes(), ds.num_classes())?;
    for i in 0..ds.len() {
        check_frame_is_zero(ds.sample_data(i), mask, &format!("sample {i} of {}", ds.name()))?;
    }
    Ok(())
}

/// Sample `i` of `ds` plus an already-masked program.
fn perturbed(ds: &LabeledDataset, i: usize, masked_delta: &Tensor) -> Tensor {
    let mut x = ds.sample(i);
    for (o, d) in x.data_mut().iter_mut().zip(masked_delta.data()) {
        *o += d;
    }
    x
}

/// Sum of per-sample losses over `indices` at `x + masked_delta`.
fn loss_sum<M: InputModel + ?Sized>(
    model: &M,
    ds: &LabeledDataset,
    indices: &[usize],
    masked_delta: &Tensor,
    h: &ClassMap,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in indices.chunks(CHUNK) {
        let losses: Vec<f64> = chunk
            .par_iter()
            .map(|&i| model.loss(&perturbed(ds, i, masked_delta), h.source_class(ds.labels()[i])))
            .collect::<Result<_>>()?;
        total += losses.iter().sum::<f64>();
    }
    Ok(total)
}

/// Calls `visit(position, loss, masked_gradient)` for each sample in
/// `indices`, in order.
pub(crate) fn for_each_masked_gradient<M: InputModel + ?Sized>(
    model: &M,
    ds: &LabeledDataset,
    indices: &[usize],
    masked_delta: &Tensor,
    mask: &Mask,
    h: &ClassMap,
    mut visit: impl FnMut(usize, f64, Tensor) -> Result<()>,
) -> Result<()> {
    let mut pos = 0;
    for chunk in indices.chunks(CHUNK) {
        let results: Vec<(f64, Tensor)> = chunk
            .par_iter()
            .map(|&i| {
                let (loss, grad) = model.loss_and_input_grad(
                    &perturbed(ds, i, masked_delta),
                    h.source_class(ds.labels()[i]),
                )?;
                Ok((loss, mask.apply(&grad)?))
            })
            .collect::<Result<_>>()?;
        for (loss, g) in results {
            visit(pos, loss, g)?;
            pos += 1;
        }
    }
    Ok(())
}

fn mean_masked_gradient<M: InputModel + ?Sized>(
    model: &M,
    ds: &LabeledDataset,
    indices: &[usize],
    masked_delta: &Tensor,
    mask: &Mask,
    h: &ClassMap,
) -> Result<Tensor> {
    let mut sum = Tensor::zeros(&mask.shape());
    for_each_masked_gradient(model, ds, indices, masked_delta, mask, h, |_, _, g| sum.axpy(1.0, &g))?;
    let inv = 1.0 / indices.len() as f64;
    Ok(sum.map(|v| v * inv))
}

/// `L(δ, T) = (1/n) Σ ℓ(x_i + δ∘M, h(y_i))`
pub fn reprogramming_loss<M: InputModel + ?Sized>(
    model: &M,
    batch: &LabeledDataset,
    delta: &Tensor,
    mask: &Mask,
    h: &ClassMap,
) -> Result<f64> {
    check_dataset(model, batch, mask, h)?;
    let masked = mask.apply(delta)?;
    let all: Vec<usize> = (0..batch.len()).collect();
    Ok(loss_sum(model, batch, &all, &masked, h)? / batch.len() as f64)
}

/// `g = (1/B) Σ ∇ₓℓ(x_i + δ∘M, h(y_i)) ∘ M`; exactly zero off the mask.
pub fn average_masked_gradient<M: InputModel + ?Sized>(
    model: &M,
    batch: &LabeledDataset,
    delta: &Tensor,
    mask: &Mask,
    h: &ClassMap,
) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    check_dataset(model, batch, mask, h)?;
    let masked = mask.apply(delta)?;
    let all: Vec<usize> = (0..batch.len()).collect();
    mean_masked_gradient(model, batch, &all, &masked, mask, h)
}

/// Per-sample masked input gradients at `x_i + δ∘M`.
pub fn masked_input_gradients<M: InputModel + ?Sized>(
    model: &M,
    ds: &LabeledDataset,
    delta: &Tensor,
    mask: &Mask,
    h: &ClassMap,
) -> Result<Vec<Tensor>> {
    check_dataset(model, ds, mask, h)?;
    let masked = mask.apply(delta)?;
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut out = Vec::with_capacity(ds.len());
    for_each_masked_gradient(model, ds, &all, &masked, mask, h, |_, _, g| {
        out.push(g);
        Ok(())
    })?;
    Ok(out)
}

/// What the optimizer reports after every update.
#[derive(Debug)]
pub struct StepEvent<'a> {
    pub epoch: usize,
    pub batch: usize,
    /// Average masked gradient the step used.
    pub gradient: &'a Tensor,
    /// δ after the step and projection.
    pub delta: &'a Tensor,
}

/// Sign-gradient descent on the masked program with box projection,
/// keeping the δ with the lowest evaluation loss seen (δ = 0 included).
pub fn optimize_program<M: InputModel + ?Sized>(
    model: &M,
    opt_set: &LabeledDataset,
    eval_set: &LabeledDataset,
    mask: &Mask,
    h: &ClassMap,
    cfg: &ReprogramConfig,
) -> Result<Program> {
    optimize_program_observed(model, opt_set, eval_set, mask, h, cfg, |_| {})
}

pub fn optimize_program_observed<M: InputModel + ?Sized>(
    model: &M,
    opt_set: &LabeledDataset,
    eval_set: &LabeledDataset,
    mask: &Mask,
    h: &ClassMap,
    cfg: &ReprogramConfig,
    mut observe: impl FnMut(&StepEvent<'_>),
) -> Result<Program> {
    cfg.validate()?;
    check_dataset(model, opt_set, mask, h)?;
    let tracked = match cfg.eval_on {
        EvalSetChoice::HeldOut => {
            check_dataset(model, eval_set, mask, h)?;
            eval_set
        }
        EvalSetChoice::OptSet => opt_set,
    };
    if cfg.batch_size > opt_set.len() {
        return Err(Error::Config(format!(
            "batch size {} exceeds the {} optimization samples",
            cfg.batch_size,
            opt_set.len()
        )));
    }
    let eval_indices: Vec<usize> = (0..tracked.len()).collect();
    let eval_loss = |masked: &Tensor, epoch: usize| -> Result<f64> {
        let loss = loss_sum(model, tracked, &eval_indices, masked, h)? / tracked.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("evaluation loss {loss} after epoch {epoch}")));
        }
        Ok(loss)
    };

    let shape = model.input_shape();
    let mut delta = Tensor::zeros(&shape);
    let initial = eval_loss(&delta, 0)?;
    let mut program = Program {
        delta: delta.clone(),
        best_loss: initial,
        best_epoch: 0,
        history: vec![initial],
    };

    for epoch in 0..cfg.epochs {
        let batches = make_batches(opt_set.len(), cfg.batch_size, cfg.seed, epoch as u64)?;
        for (b, batch) in batches.iter().enumerate() {
            let masked = mask.apply(&delta)?;
            let g = mean_masked_gradient(model, opt_set, batch, &masked, mask, h)?;
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in epoch {}, batch {b}", epoch + 1)));
            }
            for (d, gv) in delta.data_mut().iter_mut().zip(g.data()) {
                *d = (*d - cfg.eta * sign(*gv)).clamp(-1.0, 1.0);
            }
            observe(&StepEvent {
                epoch,
                batch: b,
                gradient: &g,
                delta: &delta,
            });
        }
        let loss = eval_loss(&mask.apply(&delta)?, epoch + 1)?;
        program.history.push(loss);
        if loss < program.best_loss {
            program.best_loss = loss;
            program.best_epoch = epoch + 1;
            program.delta = delta.clone();
        }
    }
    Ok(program)
}

/// Sidecar describing a saved program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgramCheckpoint {
    pub mask: MaskSpec,
    pub class_map: ClassMap,
    pub config: ReprogramConfig,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub history: Vec<f64>,
}

impl Program {
    /// Writes `delta.tnsr` and `program.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, mask: &MaskSpec, h: &ClassMap, cfg: &ReprogramConfig) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.delta.save(dir.join("delta.tnsr"))?;
        let sidecar = ProgramCheckpoint {
            mask: *mask,
            class_map: h.clone(),
            config: cfg.clone(),
            best_loss: self.best_loss,
            best_epoch: self.best_epoch,
            history: self.history.clone(),
        };
        let path = dir.join("program.json");
        fs::write(&path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Program, ProgramCheckpoint)> {
        let dir = dir.as_ref();
        let path = dir.join("program.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar: ProgramCheckpoint = serde_json::from_str(&text)?;
        let delta = Tensor::load(dir.join("delta.tnsr"))?;
        let program = Program {
            delta,
            best_loss: sidecar.best_loss,
            best_epoch: sidecar.best_epoch,
            history: sidecar.history.clone(),
        };
        Ok((program, sidecar))
    }
}
