//! Train, reprogram and sweep runs built from an [`ExperimentConfig`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use arlab_core::datasets::{load_idx, mnist_paths, preprocess, synth_target_dataset, LabeledDataset};
use arlab_core::diagnostics::{
    alignment_before_after, confusion_matrix, domain_alignment, reprogramming_accuracy, ConfusionMatrix,
};
use arlab_core::models::{build_cwnet, build_linear, train_sgd, CheckpointMeta, InitMode, Network};
use arlab_core::reprogram::{build_class_map, optimize_program, MaskSpec};
use arlab_core::{InputModel, MetricsRecord, Program};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::{Architecture, ExperimentConfig, SourceSpec};

pub struct SourceData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn load_source(cfg: &ExperimentConfig) -> Result<SourceData> {
    let (raw, train_size, test_size) = match &cfg.source {
        SourceSpec::Mnist {
            dir,
            train_size,
            test_size,
        } => {
            let (images, labels) = mnist_paths(dir, true);
            let raw = load_idx(&images, &labels).with_context(|| format!("loading MNIST from {}", dir.display()))?;
            (raw, *train_size, *test_size)
        }
        SourceSpec::Synth {
            spec,
            train_size,
            test_size,
        } => (synth_target_dataset(spec)?, *train_size, *test_size),
    };
    if train_size + test_size > raw.len() {
        bail!(
            "source has {} samples but {} train + {} test were requested",
            raw.len(),
            train_size,
            test_size
        );
    }
    let all = preprocess(&raw, &cfg.pad)?;
    let mut parts = all.split(&[train_size, test_size], cfg.seed)?;
    let test = parts.pop().expect("two parts");
    let train = parts.pop().expect("two parts");
    Ok(SourceData { train, test })
}

/// Builds the source model and, unless the config asks for the untrained
/// control, fits it with SGD. Returns the per-epoch training losses.
pub fn fit_model(cfg: &ExperimentConfig, source: &SourceData) -> Result<(Network, Vec<f64>)> {
    let classes = source.train.num_classes();
    let mut net = match cfg.model.architecture {
        Architecture::Cwnet => build_cwnet(cfg.pad.target, classes, cfg.model.width_scale)?,
        Architecture::Linear => build_linear(cfg.pad.target, classes)?,
    };
    let mode = if cfg.model.trained {
        InitMode::TrainedInit
    } else {
        InitMode::UntrainedRandom
    };
    net.init_weights(cfg.seed, mode);
    let (mean, std) = source.train.channel_stats();
    net.set_standardization(mean, std)?;
    let losses = if cfg.model.trained {
        train_sgd(&mut net, &source.train, &cfg.train)?
    } else {
        Vec::new()
    };
    Ok((net, losses))
}

fn checkpoint_meta(cfg: &ExperimentConfig) -> CheckpointMeta {
    CheckpointMeta {
        architecture: cfg.model.name(),
        width_scale: cfg.model.width_scale,
        trained: cfg.model.trained,
        seed: cfg.seed,
        config_hash: cfg.model_hash(),
    }
}

pub fn model_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir().join("models").join(cfg.model_hash())
}

pub struct TrainOutcome {
    pub dir: PathBuf,
    pub losses: Vec<f64>,
    pub test_accuracy: f64,
    pub digest: String,
}

/// Trains (or initializes) the model and writes the checkpoint together
/// with `train_loss.csv`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let source = load_source(cfg)?;
    let (net, losses) = fit_model(cfg, &source)?;
    let dir = model_dir(cfg);
    net.save(&dir, &checkpoint_meta(cfg))?;
    let mut w = csv::Writer::from_path(dir.join("train_loss.csv"))?;
    w.write_record(["epoch", "loss"])?;
    for (e, l) in losses.iter().enumerate() {
        w.write_record([(e + 1).to_string(), l.to_string()])?;
    }
    w.flush()?;
    let test_accuracy = arlab_core::models::accuracy(&net, &source.test, None)?;
    let digest = checkpoint_digest(&dir)?;
    Ok(TrainOutcome {
        dir,
        losses,
        test_accuracy,
        digest,
    })
}

/// Loads the checkpoint for `cfg` from the output directory, training it
/// first when it is missing.
pub fn load_or_train(cfg: &ExperimentConfig) -> Result<Network> {
    let dir = model_dir(cfg);
    if !dir.join("manifest.json").exists() {
        cmd_train(cfg)?;
    }
    load_model(&dir, cfg)
}

pub fn load_model(dir: &Path, cfg: &ExperimentConfig) -> Result<Network> {
    let (net, _) = Network::load(dir).with_context(|| format!("loading model from {}", dir.display()))?;
    if net.input_shape() != cfg.pad.target {
        return Err(arlab_core::Error::Config(format!(
            "model expects {:?} inputs but pad.target is {:?}",
            net.input_shape(),
            cfg.pad.target
        ))
        .into());
    }
    Ok(net)
}

/// SHA-256 over the manifest and every parameter file, in name order.
pub fn checkpoint_digest(dir: &Path) -> Result<String> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    names.retain(|p| p.extension().is_some_and(|e| e == "tnsr" || e == "json"));
    names.sort();
    let mut hasher = Sha256::new();
    for p in names {
        hasher.update(p.file_name().unwrap().to_string_lossy().as_bytes());
        hasher.update(fs::read(&p)?);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub struct TargetData {
    pub opt: LabeledDataset,
    pub eval: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn load_target(cfg: &ExperimentConfig) -> Result<TargetData> {
    let raw = synth_target_dataset(&cfg.target.synth)?;
    let all = preprocess(&raw, &cfg.pad)?;
    let r = &cfg.reprogram;
    let need = r.opt_set_size + r.eval_set_size + cfg.target.test_size;
    if need > all.len() {
        bail!(
            "target has {} samples but opt {} + eval {} + test {} were requested",
            all.len(),
            r.opt_set_size,
            r.eval_set_size,
            cfg.target.test_size
        );
    }
    let mut parts = all.split(&[r.opt_set_size, r.eval_set_size, cfg.target.test_size], cfg.seed)?;
    let test = parts.pop().expect("three parts");
    let eval = parts.pop().expect("three parts");
    let opt = parts.pop().expect("three parts");
    Ok(TargetData { opt, eval, test })
}

pub fn mask_spec(cfg: &ExperimentConfig) -> Result<MaskSpec> {
    let outer = match cfg.mask.sizes.as_slice() {
        [] => None,
        [s] => Some([*s, *s]),
        more => bail!("a single run takes one mask size, got {more:?}"),
    };
    Ok(MaskSpec { pad: cfg.pad, outer })
}

/// Everything one reprogramming run produces.
pub struct RunOutcome {
    pub record: MetricsRecord,
    pub program: Program,
    pub mask: MaskSpec,
    pub before: ConfusionMatrix,
    pub after: ConfusionMatrix,
}

/// Runs the optimizer and measures DA and RA on the target test split,
/// `r0`, `rN` and `‖g‖₁` on the evaluation split.
pub fn run_reprogram<M: InputModel + ?Sized>(cfg: &ExperimentConfig, model: &M) -> Result<RunOutcome> {
    if model.input_shape() != cfg.pad.target {
        return Err(arlab_core::Error::Config(format!(
            "model expects {:?} inputs but pad.target is {:?}",
            model.input_shape(),
            cfg.pad.target
        ))
        .into());
    }
    let target = load_target(cfg)?;
    let spec = mask_spec(cfg)?;
    let mask = spec.build()?;
    let h = build_class_map(target.test.num_classes(), &cfg.class_map)?;
    let program = optimize_program(model, &target.opt, &target.eval, &mask, &h, &cfg.reprogram)?;
    let da = domain_alignment(model, &target.test, &h)?;
    let ra = reprogramming_accuracy(model, &target.test, &program.delta, &mask, &h)?;
    let ba = alignment_before_after(model, &target.eval, &mask, &h, &program.delta)?;
    let before = confusion_matrix(model, &target.test, None, &mask, &h)?;
    let after = confusion_matrix(model, &target.test, Some(&program.delta), &mask, &h)?;
    let record = MetricsRecord {
        source: cfg.source.name(),
        target: format!("synth-{}", cfg.target.synth.seed),
        model: cfg.model.name(),
        trained: cfg.model.trained,
        mask_size: mask.size(),
        da,
        ra,
        r0: ba.r0(),
        r_n: ba.r_n(),
        g_l1: ba.before.mean_l1,
        seed: cfg.seed,
        config_hash: cfg.hash(),
    };
    Ok(RunOutcome {
        record,
        program,
        mask: spec,
        before,
        after,
    })
}

/// Serializes appends to the metrics files shared by concurrent runs.
pub struct ReportWriter {
    dir: PathBuf,
    lock: Mutex<()>,
}

impl ReportWriter {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(ReportWriter { dir, lock: Mutex::new(()) })
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn run_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.dir.join("runs").join(cfg.hash())
    }

    /// Writes the run directory, then appends the row to `metrics.csv` and
    /// `metrics.jsonl`.
    pub fn record(&self, cfg: &ExperimentConfig, run: &RunOutcome) -> Result<()> {
        let dir = self.run_dir(cfg);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("config.json"), cfg.canonical_json())?;
        fs::write(dir.join("confusion_before.csv"), run.before.to_csv())?;
        fs::write(dir.join("confusion_after.csv"), run.after.to_csv())?;
        let h = build_class_map(run.before.num_classes(), &cfg.class_map)?;
        run.program.save(dir.join("program"), &run.mask, &h, &cfg.reprogram)?;

        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        MetricsRecord::append_csv(self.metrics_csv(), std::slice::from_ref(&run.record))?;
        let mut line = run.record.to_json_line()?;
        line.push('\n');
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.dir.join("metrics.jsonl"))?
            .write_all(line.as_bytes())?;
        Ok(())
    }
}

/// Full reprogram command: model from `model_dir` (or the cached/trained
/// checkpoint), one run, one metrics row.
pub fn cmd_reprogram(cfg: &ExperimentConfig, model_dir: Option<&Path>) -> Result<RunOutcome> {
    let net = match model_dir {
        Some(dir) => load_model(dir, cfg)?,
        None => load_or_train(cfg)?,
    };
    let writer = ReportWriter::new(cfg.out_dir())?;
    let run = run_reprogram(cfg, &net)?;
    writer.record(cfg, &run)?;
    Ok(run)
}

pub struct SweepOutcome {
    /// One entry per mask size, in the order requested.
    pub runs: Vec<(usize, Result<MetricsRecord>)>,
}

impl SweepOutcome {
    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|(_, r)| r.is_err()).count()
    }
}

/// One reprogramming run per mask size on `jobs` threads. A failing size
/// does not stop the others.
pub fn cmd_sweep(cfg: &ExperimentConfig, jobs: usize) -> Result<SweepOutcome> {
    if cfg.mask.sizes.len() < 2 {
        bail!("a sweep needs at least two mask sizes, got {:?}", cfg.mask.sizes);
    }
    let net = load_or_train(cfg)?;
    let writer = ReportWriter::new(cfg.out_dir())?;
    sweep_with(cfg, jobs, &writer, |c| run_reprogram(c, &net))
}

pub fn sweep_with<F>(cfg: &ExperimentConfig, jobs: usize, writer: &ReportWriter, run: F) -> Result<SweepOutcome>
where
    F: Fn(&ExperimentConfig) -> Result<RunOutcome> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    let configs = cfg.per_mask();
    let results: Vec<Result<RunOutcome>> = pool.install(|| configs.par_iter().map(&run).collect());
    let mut runs = Vec::with_capacity(configs.len());
    for (c, res) in configs.iter().zip(results) {
        let size = c.mask.sizes[0];
        let res = res.and_then(|outcome| {
            writer.record(c, &outcome)?;
            Ok(outcome.record)
        });
        if let Err(e) = &res {
            let failed = writer.dir.join("failed.jsonl");
            let line = serde_json::json!({ "mask": size, "config_hash": c.hash(), "error": format!("{e:#}") });
            let _guard = writer.lock.lock().unwrap_or_else(|e| e.into_inner());
            let mut f = fs::OpenOptions::new().create(true).append(true).open(&failed)?;
            writeln!(f, "{line}")?;
        }
        runs.push((size, res));
    }
    Ok(SweepOutcome { runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    const QUICK: &str = include_str!("../configs/quick.toml");

    #[test]
    fn failing_size_is_isolated_and_recorded() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::from_toml(QUICK).unwrap();
        cfg.out = Some(tmp.path().to_path_buf());
        let net = load_or_train(&cfg).unwrap();
        let writer = ReportWriter::new(cfg.out_dir()).unwrap();
        let outcome = sweep_with(&cfg, 2, &writer, |c| {
            let mut c = c.clone();
            if c.mask.sizes == [30] {
                c.reprogram.batch_size = 10_000;
            }
            run_reprogram(&c, &net)
        })
        .unwrap();
        assert_eq!(outcome.failures(), 1);
        assert!(outcome.runs[0].1.is_err() && outcome.runs[1].1.is_ok());
        let rows = MetricsRecord::read_csv(fs::File::open(writer.metrics_csv()).unwrap()).unwrap();
        assert_eq!(rows.len(), 1);
        let failed = fs::read_to_string(tmp.path().join("failed.jsonl")).unwrap();
        assert!(failed.contains("\"mask\":30") && failed.contains("batch size"), "{failed}");
    }

    #[test]
    fn shape_mismatch_is_a_configuration_error() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::from_toml(QUICK).unwrap();
        cfg.out = Some(tmp.path().to_path_buf());
        let net = build_linear([3, 30, 30], 10).unwrap();
        let err = run_reprogram(&cfg, &net).err().unwrap();
        assert!(matches!(err.downcast_ref::<arlab_core::Error>(), Some(arlab_core::Error::Config(_))));
    }
}
