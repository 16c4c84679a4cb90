//! Experiment configuration: a TOML file describing data, model, mask and
//! optimizer settings, with a canonical JSON form whose SHA-256 identifies
//! every run.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use arlab_core::datasets::{PadSpec, SynthSpec};
use arlab_core::reprogram::ClassMapSpec;
use arlab_core::{ReprogramConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives weight init, data splits, batch order and permutations.
    pub seed: u64,
    /// Output directory; not part of the hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub source: SourceSpec,
    pub target: TargetSpec,
    pub model: ModelSpec,
    pub pad: PadSpec,
    #[serde(default)]
    pub mask: MaskConfig,
    #[serde(default)]
    pub class_map: ClassMapSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub reprogram: ReprogramConfig,
}

/// Where the source-domain training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceSpec {
    /// IDX files (`train-images-idx3-ubyte[.gz]`, ...) under `dir`.
    Mnist {
        dir: PathBuf,
        train_size: usize,
        test_size: usize,
    },
    /// The synthetic glyph domain, mostly useful for quick tests.
    Synth {
        #[serde(flatten)]
        spec: SynthSpec,
        train_size: usize,
        test_size: usize,
    },
}

impl SourceSpec {
    pub fn name(&self) -> String {
        match self {
            SourceSpec::Mnist { .. } => "mnist".into(),
            SourceSpec::Synth { spec, .. } => format!("synth-{}", spec.seed),
        }
    }
}

/// The synthetic target domain; optimization and evaluation set sizes come
/// from the reprogram section, `test_size` samples measure DA and RA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    #[serde(flatten)]
    pub synth: SynthSpec,
    pub test_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Cwnet,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    #[serde(default = "one")]
    pub width_scale: f64,
    /// `false` is the untrained-random control.
    pub trained: bool,
}

fn one() -> f64 {
    1.0
}

impl ModelSpec {
    pub fn name(&self) -> String {
        match self.architecture {
            Architecture::Cwnet => format!("cwnet-w{}", self.width_scale),
            Architecture::Linear => "linear".into(),
        }
    }
}

/// Outer extents of the program region; an empty list means the whole input.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    #[serde(default)]
    pub sizes: Vec<usize>,
}

impl ExperimentConfig {
    /// Reads TOML (or canonical JSON when the extension is `.json`).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        } else {
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        };
        cfg.normalized()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str::<ExperimentConfig>(text)?.normalized()
    }

    /// Copies the global seed into the sections that carry one and checks
    /// cross-section consistency.
    pub fn normalized(self) -> Result<Self> {
        for (name, s) in [("train", self.train.seed), ("reprogram", self.reprogram.seed)] {
            if s != 0 && s != self.seed {
                bail!("[{name}] seed {s} conflicts with the top-level seed {}; set only `seed`", self.seed);
            }
        }
        let seed = self.seed;
        self.with_seed(seed)
    }

    pub fn with_seed(mut self, seed: u64) -> Result<Self> {
        self.seed = seed;
        self.train.seed = seed;
        self.reprogram.seed = seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.pad.validate()?;
        self.train.validate()?;
        self.reprogram.validate()?;
        if self.model.architecture == Architecture::Cwnet && !(self.model.width_scale > 0.0) {
            bail!("model.width_scale must be positive");
        }
        let [_, h, w] = self.pad.target;
        for &s in &self.mask.sizes {
            if s > h.min(w) || s < self.pad.inner[0].max(self.pad.inner[1]) {
                bail!(
                    "mask size {s} must lie between the image extent {:?} and the input extent {h}x{w}",
                    self.pad.inner
                );
            }
        }
        if self.target.synth.size != self.pad.inner {
            bail!(
                "target images are {:?} but pad.inner is {:?}",
                self.target.synth.size,
                self.pad.inner
            );
        }
        Ok(())
    }

    /// Canonical JSON: sorted keys, shortest round-trip floats, no output
    /// directory.
    pub fn canonical_json(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("out");
        }
        value.to_string()
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Hash of the parts that determine the source model.
    pub fn model_hash(&self) -> String {
        let value = serde_json::json!({
            "seed": self.seed,
            "source": self.source,
            "model": self.model,
            "pad": self.pad,
            "train": self.train,
        });
        hex(&Sha256::digest(value.to_string().as_bytes()))
    }

    /// One config per requested mask size (a single full-input run when the
    /// list is empty).
    pub fn per_mask(&self) -> Vec<ExperimentConfig> {
        if self.mask.sizes.len() <= 1 {
            return vec![self.clone()];
        }
        self.mask
            .sizes
            .iter()
            .map(|&s| {
                let mut c = self.clone();
                c.mask.sizes = vec![s];
                c
            })
            .collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("runs"))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
