//! Domain alignment, reprogramming accuracy, gradient alignment, first-order
//! loss predictors and confusion matrices.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::{mapped_accuracy, predict_batch, InputModel};
use crate::reprogram::{for_each_masked_gradient, ClassMap, Mask};
use crate::tensor::Tensor;

/// One experiment row. Field names in serialized form follow the metrics
/// CSV header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub source: String,
    pub target: String,
    pub model: String,
    pub trained: bool,
    pub mask_size: usize,
    #[serde(rename = "DA")]
    pub da: f64,
    #[serde(rename = "RA")]
    pub ra: f64,
    pub r0: f64,
    #[serde(rename = "rN")]
    pub r_n: f64,
    pub g_l1: f64,
    pub seed: u64,
    pub config_hash: String,
}

pub const METRICS_CSV_HEADER: [&str; 12] = [
    "source",
    "target",
    "model",
    "trained",
    "mask_size",
    "DA",
    "RA",
    "r0",
    "rN",
    "g_l1",
    "seed",
    "config_hash",
];

impl MetricsRecord {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("DA", self.da), ("RA", self.ra), ("r0", self.r0), ("rN", self.r_n)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Consistency(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Metrics rows as CSV with the fixed header.
    pub fn write_csv<W: Write>(rows: &[MetricsRecord], w: W) -> Result<()> {
        let mut writer = csv_writer(w);
        for row in rows {
            writer.serialize(row).map_err(csv_err)?;
        }
        writer.flush().map_err(|e| Error::io("<csv>", e))
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Vec<MetricsRecord>> {
        let mut reader = csv::Reader::from_reader(r);
        let header: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(str::to_owned).collect();
        if header != METRICS_CSV_HEADER {
            return Err(Error::Consistency(format!("unexpected metrics header {header:?}")));
        }
        reader.deserialize().map(|row| row.map_err(csv_err)).collect()
    }

    /// Appends rows to a metrics CSV, writing the header when the file is
    /// new or empty and checking it otherwise.
    pub fn append_csv(path: impl AsRef<Path>, rows: &[MetricsRecord]) -> Result<()> {
        let path = path.as_ref();
        let existing = match std::fs::metadata(path) {
            Ok(m) => m.len() > 0,
            Err(_) => false,
        };
        if existing {
            let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
            let mut reader = csv::Reader::from_reader(file);
            let header: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(str::to_owned).collect();
            if header != METRICS_CSV_HEADER {
                return Err(Error::Consistency(format!(
                    "{} has header {header:?}, not a metrics file",
                    path.display()
                )));
            }
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut writer = csv::WriterBuilder::new().has_headers(!existing).from_writer(file);
        for row in rows {
            writer.serialize(row).map_err(csv_err)?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().has_headers(true).from_writer(w)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Consistency(format!("CSV: {e}"))
}

/// Mapped accuracy on the zero-padded target samples, before any program.
pub fn domain_alignment<M: InputModel + ?Sized>(model: &M, target_set: &LabeledDataset, h: &ClassMap) -> Result<f64> {
    let (pred, _) = predict_batch(model, target_set.images())?;
    Ok(mapped_accuracy(&pred, target_set.labels(), Some(h)))
}

fn perturbed_images(ds: &LabeledDataset, delta: &Tensor, mask: &Mask) -> Result<Tensor> {
    let masked = mask.apply(delta)?;
    if ds.sample_shape() != mask.shape() {
        return Err(Error::dim(format!(
            "samples {:?} vs mask {:?}",
            ds.sample_shape(),
            mask.shape()
        )));
    }
    let mut images = ds.images().clone();
    for chunk in images.data_mut().chunks_mut(masked.len()) {
        for (x, d) in chunk.iter_mut().zip(masked.data()) {
            *x += d;
        }
    }
    Ok(images)
}

/// Mapped accuracy on `x + δ∘M`.
pub fn reprogramming_accuracy<M: InputModel + ?Sized>(
    model: &M,
    target_set: &LabeledDataset,
    delta: &Tensor,
    mask: &Mask,
    h: &ClassMap,
) -> Result<f64> {
    let images = perturbed_images(target_set, delta, mask)?;
    let (pred, _) = predict_batch(model, &images)?;
    Ok(mapped_accuracy(&pred, target_set.labels(), Some(h)))
}

/// `r = ‖g‖₁ / ((1/n) Σ ‖g_i‖₁)` with `g` the mean gradient; 0 when every
/// gradient is zero.
pub fn gradient_alignment(gradients: &[Tensor]) -> Result<f64> {
    let mut acc = AlignmentAccumulator::default();
    for g in gradients {
        acc.push(g)?;
    }
    acc.finish().map(|s| s.r)
}

/// Streams per-sample gradients into the two sums `r` needs.
#[derive(Debug, Default, Clone)]
pub struct AlignmentAccumulator {
    sum: Option<Tensor>,
    l1_sum: f64,
    n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentSummary {
    pub r: f64,
    /// Mean gradient `g`.
    pub mean_gradient: Tensor,
    /// `‖g‖₁`
    pub mean_l1: f64,
    /// `(1/n) Σ ‖g_i‖₁`
    pub sample_l1: f64,
    pub n: usize,
}

impl AlignmentAccumulator {
    pub fn push(&mut self, g: &Tensor) -> Result<()> {
        match &mut self.sum {
            Some(s) => s.axpy(1.0, g)?,
            None => self.sum = Some(g.clone()),
        }
        self.l1_sum += g.l1_norm();
        self.n += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<AlignmentSummary> {
        let sum = self
            .sum
            .ok_or_else(|| Error::Argument("gradient alignment needs at least one gradient".into()))?;
        let inv = 1.0 / self.n as f64;
        let mean_gradient = sum.map(|v| v * inv);
        let mean_l1 = mean_gradient.l1_norm();
        let sample_l1 = self.l1_sum * inv;
        let r = if sample_l1 == 0.0 {
            0.0
        } else {
            (mean_l1 / sample_l1).min(1.0)
        };
        Ok(AlignmentSummary {
            r,
            mean_gradient,
            mean_l1,
            sample_l1,
            n: self.n,
        })
    }
}

/// Gradient alignment of the masked input gradients over `ds` at `x + δ∘M`.
pub fn alignment_at<M: InputModel + ?Sized>(
    model: &M,
    ds: &LabeledDataset,
    delta: &Tensor,
    mask: &Mask,
    h: &ClassMap,
) -> Result<AlignmentSummary> {
    if ds.sample_shape() != mask.shape() || mask.shape() != model.input_shape() {
        return Err(Error::dim("dataset, mask and model shapes disagree"));
    }
    h.validate_for(model.num_classes(), ds.num_classes())?;
    let masked = mask.apply(delta)?;
    let indices: Vec<usize> = (0..ds.len()).collect();
    let mut acc = AlignmentAccumulator::default();
    for_each_masked_gradient(model, ds, &indices, &masked, mask, h, |_, _, g| acc.push(&g))?;
    acc.finish()
}

/// Alignment at δ = 0 and at the optimized program, over the whole set.
#[derive(Debug, Clone, PartialEq)]
pub struct BeforeAfter {
    pub before: AlignmentSummary,
    pub after: AlignmentSummary,
}

impl BeforeAfter {
    pub fn r0(&self) -> f64 {
        self.before.r
    }

    pub fn r_n(&self) -> f64 {
        self.after.r
    }
}

pub fn alignment_before_after<M: InputModel + ?Sized>(
    model: &M,
    eval_set: &LabeledDataset,
    mask: &Mask,
    h: &ClassMap,
    delta: &Tensor,
) -> Result<BeforeAfter> {
    let before = alignment_at(model, eval_set, &Tensor::zeros(delta.shape()), mask, h)?;
    let after = alignment_at(model, eval_set, delta, mask, h)?;
    Ok(BeforeAfter { before, after })
}

/// Norm bounding the perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PerturbationNorm {
    L1,
    L2,
    LInf,
}

impl PerturbationNorm {
    pub fn from_p(p: f64) -> Result<Self> {
        match p {
            p if p == 1.0 => Ok(Self::L1),
            p if p == 2.0 => Ok(Self::L2),
            p if p.is_infinite() && p > 0.0 => Ok(Self::LInf),
            other => Err(Error::Argument(format!("unsupported perturbation norm p = {other}"))),
        }
    }

    /// `‖g‖_q` with `1/p + 1/q = 1`.
    pub fn dual_norm(self, g: &Tensor) -> f64 {
        match self {
            Self::L1 => g.linf_norm(),
            Self::L2 => g.l2_norm(),
            Self::LInf => g.l1_norm(),
        }
    }
}

/// Minimum of `δᵀg` over `‖δ‖_p ≤ ε`: `-ε ‖g‖_q`.
pub fn predicted_loss_drop(g: &Tensor, p: PerturbationNorm, epsilon: f64) -> Result<f64> {
    if !(epsilon >= 0.0) {
        return Err(Error::Argument(format!("epsilon must be non-negative, got {epsilon}")));
    }
    Ok(-epsilon * p.dual_norm(g))
}

/// First-order model `L(0) + δᵀg`, both terms evaluated at δ = 0.
pub fn linearized_loss<M: InputModel + ?Sized>(
    model: &M,
    batch: &LabeledDataset,
    mask: &Mask,
    h: &ClassMap,
    delta: &Tensor,
) -> Result<f64> {
    let zero = Tensor::zeros(delta.shape());
    let indices: Vec<usize> = (0..batch.len()).collect();
    h.validate_for(model.num_classes(), batch.num_classes())?;
    let mut loss = 0.0;
    let mut sum = Tensor::zeros(delta.shape());
    for_each_masked_gradient(model, batch, &indices, &zero, mask, h, |_, l, g| {
        loss += l;
        sum.axpy(1.0, &g)
    })?;
    let inv = 1.0 / batch.len() as f64;
    Ok(loss * inv + delta.dot(&sum)? * inv)
}

/// Rows are true target classes; column `k < K` counts predictions of
/// source class `h(k)`, the last column everything outside `h`'s range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn column_sums(&self) -> Vec<usize> {
        let cols = self.counts.first().map_or(0, Vec::len);
        (0..cols).map(|j| self.counts.iter().map(|r| r[j]).sum()).collect()
    }

    /// Share of all samples that fall into the most populated column.
    pub fn majority_column_fraction(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        *self.column_sums().iter().max().unwrap_or(&0) as f64 / total as f64
    }

    pub fn to_csv(&self) -> String {
        let k = self.num_classes();
        let mut out = String::from("true");
        for j in 0..k {
            out.push_str(&format!(",pred_{j}"));
        }
        out.push_str(",other\n");
        for (i, row) in self.counts.iter().enumerate() {
            out.push_str(&i.to_string());
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion_matrix<M: InputModel + ?Sized>(
    model: &M,
    target_set: &LabeledDataset,
    delta: Option<&Tensor>,
    mask: &Mask,
    h: &ClassMap,
) -> Result<ConfusionMatrix> {
    let pred = match delta {
        Some(d) => predict_batch(model, &perturbed_images(target_set, d, mask)?)?.0,
        None => predict_batch(model, target_set.images())?.0,
    };
    let k = target_set.num_classes();
    let mut counts = vec![vec![0usize; k + 1]; k];
    for (&p, &y) in pred.iter().zip(target_set.labels()) {
        let col = h.target_of(p).filter(|&t| t < k).unwrap_or(k);
        counts[y][col] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_gradient_list_is_an_error() {
        assert!(gradient_alignment(&[]).is_err());
    }

    #[test]
    fn unsupported_norm() {
        assert!(PerturbationNorm::from_p(3.0).is_err());
        assert_eq!(PerturbationNorm::from_p(f64::INFINITY).unwrap(), PerturbationNorm::LInf);
    }
}
