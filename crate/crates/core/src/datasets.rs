//! Dataset ingestion (IDX), the synthetic target domain, preprocessing into
//! the model's input frame, and epoch batching.

use std::fs::{self, File};
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images stacked as `n×C×H×W` with one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    name: String,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, name: impl Into<String>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::dim(format!(
                "dataset images must be n×C×H×W, got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Label {
                index,
                label,
                classes: num_classes,
            });
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    /// `(C, H, W)` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn sample_data(&self, i: usize) -> &[f64] {
        let len = self.sample_len();
        &self.images.data()[i * len..(i + 1) * len]
    }

    /// Copy of sample `i` as a `C×H×W` tensor.
    pub fn sample(&self, i: usize) -> Tensor {
        Tensor::new(self.sample_shape().to_vec(), self.sample_data(i).to_vec())
            .expect("sample slice matches sample shape")
    }

    pub fn subset(&self, indices: &[usize]) -> Result<LabeledDataset> {
        if indices.is_empty() {
            return Err(Error::Argument("empty subset".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Argument(format!("index {i} out of range for {} samples", self.len())));
            }
            data.extend_from_slice(self.sample_data(i));
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.sample_shape();
        let images = Tensor::new(vec![indices.len(), c, h, w], data)?;
        LabeledDataset::new(images, labels, self.num_classes, self.name.clone())
    }

    /// Seeded shuffle, then the first `sizes[0]` samples, the next `sizes[1]`
    /// and so on. The parts are disjoint.
    pub fn split(&self, sizes: &[usize], seed: u64) -> Result<Vec<LabeledDataset>> {
        let total: usize = sizes.iter().sum();
        if total > self.len() {
            return Err(Error::Config(format!(
                "split sizes {sizes:?} exceed the {} available samples of {}",
                self.len(),
                self.name
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng::stream(seed, streams::SPLIT));
        let mut start = 0;
        sizes
            .iter()
            .map(|&n| {
                let part = self.subset(&order[start..start + n]);
                start += n;
                part
            })
            .collect()
    }

    /// Per-channel mean and population standard deviation over all samples.
    /// A zero deviation is reported as 1.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let [c, h, w] = self.sample_shape();
        let plane = h * w;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for i in 0..self.len() {
            for (ch, chunk) in self.sample_data(i).chunks(plane).enumerate() {
                for &v in chunk {
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let count = (self.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / count - m * m).max(0.0);
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        (mean, std)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Writes `images.tnsr`, `labels.tnsr` and `manifest.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, manifest_extra: serde_json::Value) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.images.save(dir.join("images.tnsr"))?;
        let labels = Tensor::vector(self.labels.iter().map(|&l| l as f64).collect());
        labels.save(dir.join("labels.tnsr"))?;
        let manifest = DatasetManifest {
            name: self.name.clone(),
            num_classes: self.num_classes,
            n: self.len(),
            sample_shape: self.sample_shape(),
            class_counts: self.class_counts(),
            extra: manifest_extra,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let images = Tensor::load(dir.join("images.tnsr"))?;
        let labels = Tensor::load(dir.join("labels.tnsr"))?
            .data()
            .iter()
            .map(|&l| l as usize)
            .collect();
        LabeledDataset::new(images, labels, manifest.num_classes, manifest.name)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    name: String,
    num_classes: usize,
    n: usize,
    sample_shape: [usize; 3],
    class_counts: Vec<usize>,
    #[serde(default)]
    extra: serde_json::Value,
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut raw)
        .map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct IdxHeader {
    dims: Vec<usize>,
    payload_offset: usize,
}

fn parse_idx_header(bytes: &[u8], expected_magic: u32, path: &Path) -> Result<IdxHeader> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| {
                Error::io(
                    path,
                    std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "truncated IDX header"),
                )
            })
    };
    let magic = word(0)?;
    if magic != expected_magic {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("magic {magic:#010x}, expected {expected_magic:#010x}"),
        });
    }
    let rank = (magic & 0xff) as usize;
    let dims = (1..=rank).map(|i| word(i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    Ok(IdxHeader {
        dims,
        payload_offset: 4 * (rank + 1),
    })
}

fn idx_payload<'a>(bytes: &'a [u8], header: &IdxHeader, path: &Path) -> Result<&'a [u8]> {
    let need: usize = header.dims.iter().product();
    let payload = &bytes[header.payload_offset..];
    if payload.len() < need {
        return Err(Error::io(
            path,
            std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                format!("IDX payload has {} bytes, header promises {need}", payload.len()),
            ),
        ));
    }
    Ok(&payload[..need])
}

/// Reads an IDX image/label pair (optionally gzip-compressed) into a raw
/// dataset with pixel values in `[0, 255]` and shape `n×1×H×W`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let image_bytes = read_maybe_gz(ip)?;
    let label_bytes = read_maybe_gz(lp)?;
    let ih = parse_idx_header(&image_bytes, IDX_IMAGES_MAGIC, ip)?;
    let lh = parse_idx_header(&label_bytes, IDX_LABELS_MAGIC, lp)?;
    if ih.dims[0] != lh.dims[0] {
        return Err(Error::Consistency(format!(
            "{} holds {} images but {} holds {} labels",
            ip.display(),
            ih.dims[0],
            lp.display(),
            lh.dims[0]
        )));
    }
    let pixels = idx_payload(&image_bytes, &ih, ip)?;
    let labels: Vec<usize> = idx_payload(&label_bytes, &lh, lp)?.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    let images = Tensor::new(
        vec![ih.dims[0], 1, ih.dims[1], ih.dims[2]],
        pixels.iter().map(|&b| b as f64).collect(),
    )?;
    let name = ip
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    LabeledDataset::new(images, labels, num_classes, name)
}

/// Standard MNIST file names under `dir`, preferring the gzip variants.
pub fn mnist_paths(dir: impl AsRef<Path>, train: bool) -> (PathBuf, PathBuf) {
    let dir = dir.as_ref();
    let prefix = if train { "train" } else { "t10k" };
    let pick = |stem: String| {
        let gz = dir.join(format!("{stem}.gz"));
        if gz.exists() {
            gz
        } else {
            dir.join(stem)
        }
    };
    (
        pick(format!("{prefix}-images-idx3-ubyte")),
        pick(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Where a smaller image is placed inside the model's input frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadSpec {
    /// `(C, H, W)` of the model input.
    pub target: [usize; 3],
    /// `(h, w)` of the embedded image.
    pub inner: [usize; 2],
    /// Top-left corner of the inner image; centered when `None`.
    #[serde(default)]
    pub offset: Option<[usize; 2]>,
}

impl PadSpec {
    pub fn centered(target: [usize; 3], inner: [usize; 2]) -> Result<Self> {
        let spec = PadSpec {
            target,
            inner,
            offset: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.target.iter().chain(&self.inner).any(|&d| d == 0) {
            return Err(Error::dim(format!("pad spec {self:?} has a zero extent")));
        }
        let [top, left] = self.origin();
        if self.inner[0] > self.target[1] || self.inner[1] > self.target[2] {
            return Err(Error::dim(format!(
                "inner image {}x{} does not fit in {}x{}",
                self.inner[0], self.inner[1], self.target[1], self.target[2]
            )));
        }
        if top + self.inner[0] > self.target[1] || left + self.inner[1] > self.target[2] {
            return Err(Error::dim(format!("offset {:?} pushes the inner image out of frame", self.offset)));
        }
        Ok(())
    }

    pub fn origin(&self) -> [usize; 2] {
        self.offset.unwrap_or([
            self.target[1].saturating_sub(self.inner[0]) / 2,
            self.target[2].saturating_sub(self.inner[1]) / 2,
        ])
    }

    /// True when `(y, x)` lies in the embedded image region.
    pub fn is_inner(&self, y: usize, x: usize) -> bool {
        let [top, left] = self.origin();
        (top..top + self.inner[0]).contains(&y) && (left..left + self.inner[1]).contains(&x)
    }
}

/// Maps raw `[0, 255]` pixels to `[-1, 1]`, centers each image in a zero
/// frame of `spec.target` and replicates single-channel content to every
/// channel.
pub fn preprocess(ds: &LabeledDataset, spec: &PadSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let [c_src, h, w] = ds.sample_shape();
    if [h, w] != spec.inner {
        return Err(Error::dim(format!(
            "images are {h}x{w} but the pad spec embeds {}x{}",
            spec.inner[0], spec.inner[1]
        )));
    }
    let [c, hh, ww] = spec.target;
    if c_src != 1 && c_src != c {
        return Err(Error::dim(format!("cannot map {c_src} channels onto {c}")));
    }
    let [top, left] = spec.origin();
    let mut data = vec![0.0; ds.len() * c * hh * ww];
    for (i, out) in data.chunks_mut(c * hh * ww).enumerate() {
        let src = ds.sample_data(i);
        for ch in 0..c {
            let src_c = if c_src == 1 { 0 } else { ch };
            let plane = &mut out[ch * hh * ww..(ch + 1) * hh * ww];
            for y in 0..h {
                for x in 0..w {
                    plane[(top + y) * ww + left + x] = src[(src_c * h + y) * w + x] / 127.5 - 1.0;
                }
            }
        }
    }
    let images = Tensor::new(vec![ds.len(), c, hh, ww], data)?;
    LabeledDataset::new(images, ds.labels.clone(), ds.num_classes, ds.name.clone())
}

/// Parameters of the synthetic stroke-glyph target domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub per_class: usize,
    pub size: [usize; 2],
    /// Uniform pixel noise amplitude as a fraction of full scale.
    pub noise: f64,
    /// Maximum translation in pixels along each axis.
    pub max_shift: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            num_classes: 10,
            per_class: 100,
            size: [28, 28],
            noise: 0.1,
            max_shift: 2,
        }
    }
}

/// Strokes on a unit canvas as `(y0, x0, y1, x1)` in fractions.
const STROKES: [(f64, f64, f64, f64); 9] = [
    (0.25, 0.2, 0.25, 0.8),  // top bar
    (0.5, 0.15, 0.5, 0.85),  // middle bar
    (0.75, 0.2, 0.75, 0.8),  // bottom bar
    (0.2, 0.3, 0.8, 0.3),    // left post
    (0.2, 0.7, 0.8, 0.7),    // right post
    (0.2, 0.5, 0.8, 0.5),    // center post
    (0.2, 0.2, 0.8, 0.8),    // falling diagonal
    (0.2, 0.8, 0.8, 0.2),    // rising diagonal
    (0.15, 0.35, 0.15, 0.65), // cap
];

/// Stroke sets per class; any two differ in at least two strokes.
const GLYPHS: [&[usize]; 12] = [
    &[1],
    &[0, 2, 5],
    &[0, 1, 2],
    &[3, 4, 0, 2],
    &[5, 1, 2],
    &[6, 7],
    &[3, 4, 1],
    &[8, 6],
    &[5, 7, 0],
    &[3, 1, 6, 4, 2],
    &[8, 5, 2],
    &[7, 4],
];

/// Anti-alias free rendering of the class template at `size`, values in `[0, 1]`.
pub fn glyph_template(class: usize, size: [usize; 2]) -> Result<Vec<f64>> {
    let strokes = GLYPHS.get(class).ok_or_else(|| {
        Error::Argument(format!("synthetic domain has {} glyph classes, asked for {class}", GLYPHS.len()))
    })?;
    let [h, w] = size;
    let half_width = (h.min(w) as f64 / 28.0 * 1.5).max(0.75);
    let mut img = vec![0.0; h * w];
    for &s in strokes.iter() {
        let (y0, x0, y1, x1) = STROKES[s];
        let (y0, x0, y1, x1) = (y0 * h as f64, x0 * w as f64, y1 * h as f64, x1 * w as f64);
        let (dy, dx) = (y1 - y0, x1 - x0);
        let len2 = dy * dy + dx * dx;
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let t = (((py - y0) * dy + (px - x0) * dx) / len2).clamp(0.0, 1.0);
                let (ey, ex) = (py - (y0 + t * dy), px - (x0 + t * dx));
                if (ey * ey + ex * ex).sqrt() <= half_width {
                    img[y * w + x] = 1.0;
                }
            }
        }
    }
    Ok(img)
}

/// SHA-256 over the rendered templates of the first `num_classes` classes.
pub fn templates_hash(num_classes: usize, size: [usize; 2]) -> Result<String> {
    let mut hasher = Sha256::new();
    for class in 0..num_classes {
        for v in glyph_template(class, size)? {
            hasher.update(v.to_le_bytes());
        }
    }
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Seeded class-conditional glyph images in raw `[0, 255]` pixel range,
/// laid out class-interleaved (`0,1,..,K-1,0,1,..`).
pub fn synth_target_dataset(spec: &SynthSpec) -> Result<LabeledDataset> {
    if spec.per_class == 0 {
        return Err(Error::Argument("per_class must be at least 1".into()));
    }
    let [h, w] = spec.size;
    let templates = (0..spec.num_classes)
        .map(|c| glyph_template(c, spec.size))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = rng::stream(spec.seed, streams::SYNTH);
    let n = spec.num_classes * spec.per_class;
    let shift = spec.max_shift as i64;
    let mut data = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..spec.per_class {
        for (class, tpl) in templates.iter().enumerate() {
            let sy = rng.random_range(-shift..=shift);
            let sx = rng.random_range(-shift..=shift);
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let (ty, tx) = (y - sy, x - sx);
                    let base = if (0..h as i64).contains(&ty) && (0..w as i64).contains(&tx) {
                        tpl[ty as usize * w + tx as usize]
                    } else {
                        0.0
                    };
                    let noise = if spec.noise > 0.0 {
                        rng.random_range(-spec.noise..=spec.noise)
                    } else {
                        0.0
                    };
                    data.push(((base + noise).clamp(0.0, 1.0) * 255.0).round());
                }
            }
            labels.push(class);
        }
    }
    let images = Tensor::new(vec![n, 1, h, w], data)?;
    LabeledDataset::new(images, labels, spec.num_classes, format!("synth-{}", spec.seed))
}

/// Index batches for one epoch: a permutation of `0..n` determined by
/// `(seed, epoch)`, cut into `floor(n / batch_size)` full batches. The
/// remainder is dropped.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if batch_size > n {
        return Err(Error::Config(format!("batch size {batch_size} exceeds the {n} available samples")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, streams::SHUFFLE_BASE + epoch));
    Ok(order
        .chunks_exact(batch_size)
        .map(|c| c.to_vec())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_are_pairwise_distinct() {
        for a in 0..GLYPHS.len() {
            for b in a + 1..GLYPHS.len() {
                let sa: std::collections::BTreeSet<_> = GLYPHS[a].iter().collect();
                let sb: std::collections::BTreeSet<_> = GLYPHS[b].iter().collect();
                assert!(sa.symmetric_difference(&sb).count() >= 2, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn centered_origin() {
        let spec = PadSpec::centered([1, 4, 4], [2, 2]).unwrap();
        assert_eq!(spec.origin(), [1, 1]);
        assert!(PadSpec::centered([1, 4, 4], [5, 2]).is_err());
    }
}
