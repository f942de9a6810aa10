use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use vib_core::data::{self, DataError};
use vib_core::metrics::{self, BinMode, MetricsError, Signal, UncertaintyRecord};
use vib_core::model::{BaselineConfig, BaselineModel, DecoderWeights, Model, ModelError, VibConfig, VibModel};
use vib_core::modelfile;
use vib_core::training::{self, TrainConfig, TrainError};
use vib_core::{ImageDataset64, Model64};

use crate::manifest::{sidecar, RunManifest};
use crate::{BinModeArg, CalibrationArgs, CliError, Command, DecoderWeightsArg, ErrorArgs, ModelKind, OodArgs, TrainArgs};

type Result<V> = std::result::Result<V, CliError>;

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            ModelError::Temperature(_) => CliError::Usage(e.to_string()),
            ModelError::Validation(_) | ModelError::Format(_) | ModelError::Version(_) | ModelError::Io { .. } | ModelError::Tensor(_) => {
                CliError::Data(e.to_string())
            }
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Data(d) => d.into(),
            TrainError::Config(m) => CliError::Usage(m),
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Model(m) => m.into(),
            MetricsError::MissingSignal(_) | MetricsError::UnknownSignal(_) => CliError::Usage(e.to_string()),
            MetricsError::Empty(_) | MetricsError::TooFewRecords { .. } | MetricsError::NoBins => CliError::Data(e.to_string()),
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {}", dir.display(), e)))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Data(format!("cannot write {}: {}", path.display(), e)))
}

fn load_model(path: &Path) -> Result<Model64> {
    Ok(modelfile::load_model::<f64>(path)?)
}

fn check_input(model: &Model64, ds: &ImageDataset64) -> Result<()> {
    if ds.pixels() != model.input_dim() {
        return Err(CliError::Data(format!(
            "{} has {}x{} images but the model expects {} inputs",
            ds.name,
            ds.height,
            ds.width,
            model.input_dim()
        )));
    }
    Ok(())
}

fn check_labels(model: &Model64, ds: &ImageDataset64) -> Result<()> {
    check_input(model, ds)?;
    ds.class_labels()?;
    if ds.class_count() > model.class_count() {
        return Err(CliError::Data(format!(
            "{} has labels up to {} but the model has {} classes",
            ds.name,
            ds.class_count() - 1,
            model.class_count()
        )));
    }
    Ok(())
}

fn positive_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("--temperature must be positive, got {}", t)))
    }
}

fn positive_samples(s: usize) -> Result<()> {
    if s == 0 {
        return Err(CliError::Usage("--eval-samples must be at least 1".into()));
    }
    Ok(())
}

/// Requested signals, defaulting to everything the model supports.
fn resolve_signals(requested: &[String], model: &Model64) -> Result<Vec<Signal>> {
    let latent = matches!(model, Model::Vib(_));
    if requested.is_empty() {
        return Ok(Signal::ALL.into_iter().filter(|s| latent || !s.needs_latent()).collect());
    }
    let mut out = Vec::new();
    for r in requested {
        let s: Signal = r.trim().parse()?;
        if s.needs_latent() && !latent {
            return Err(MetricsError::MissingSignal(s).into());
        }
        if !out.contains(&s) {
            out.push(s);
        }
    }
    Ok(out)
}

fn score(model: &Model64, ds: &ImageDataset64, samples: usize, seed: u64, temperature: f64) -> Result<Vec<UncertaintyRecord>> {
    Ok(metrics::score_dataset(model, ds, samples, seed, temperature)?)
}

pub fn run(command: Command) -> Result<()> {
    let started = Instant::now();
    match command.clone() {
        Command::Train(a) => train(&a, command, started),
        Command::EvalCalibration(a) => eval_calibration(&a, command, started),
        Command::EvalOod(a) => eval_ood(&a, command, started),
        Command::EvalError(a) => eval_error(&a, command, started),
        Command::Replay(a) => {
            let m = RunManifest::load(&a.manifest)?;
            if matches!(m.run, Command::Replay(_)) {
                return Err(CliError::Usage("a manifest cannot replay another replay".into()));
            }
            run(m.run)
        }
    }
}

fn train(a: &TrainArgs, command: Command, started: Instant) -> Result<()> {
    if a.layers == 0 || a.hidden == 0 {
        return Err(CliError::Usage("--hidden and --layers must be positive".into()));
    }
    let mut ds = data::load_idx::<f64>(&a.train_images, &a.train_labels)?;
    if let Some(n) = a.limit {
        ds = ds.take(n);
    }
    if ds.is_empty() {
        return Err(CliError::Data("no training instances".into()));
    }
    let classes = a.classes.unwrap_or_else(|| ds.class_count());
    let hidden = vec![a.hidden; a.layers];
    let model = match a.model {
        ModelKind::Vib => Model::Vib(VibModel::init(
            VibConfig {
                input_dim: ds.pixels(),
                hidden,
                latent_dim: a.latent_dim,
                marginal_components: a.marginal_components,
                decoder_components: a.decoder_components,
                class_count: classes,
                beta: a.beta,
                decoder_weights: match a.decoder_weights {
                    DecoderWeightsArg::Affine => DecoderWeights::Affine,
                    DecoderWeightsArg::Constant => DecoderWeights::Constant,
                },
            },
            a.seed,
        )
        .map_err(|e| CliError::Usage(e.to_string()))?),
        ModelKind::Baseline => Model::Baseline(
            BaselineModel::init(
                BaselineConfig {
                    input_dim: ds.pixels(),
                    hidden,
                    class_count: classes,
                },
                a.seed,
            )
            .map_err(|e| CliError::Usage(e.to_string()))?,
        ),
    };
    let cfg = TrainConfig {
        beta: a.beta,
        lr0: a.lr,
        batch_size: a.batch,
        max_epochs: a.epochs,
        dev_decay_factor: a.decay_factor,
        dev_decay_patience: a.patience,
        train_samples: a.train_samples,
        eval_samples: a.eval_samples,
        seed: a.seed,
        dev_fraction: a.dev_fraction,
        ..TrainConfig::default()
    };
    let outcome = training::train(model, &ds, &cfg)?;

    let model_path = a.out.join("model.json");
    let log_path = a.out.join("epochs.csv");
    write_file(&model_path, &modelfile::to_string(&outcome.model)?)?;
    write_file(&log_path, &training::epoch_log_csv(&outcome.log))?;
    let best = outcome.log.iter().find(|r| Some(r.epoch) == outcome.best_epoch);
    match best {
        Some(r) => println!(
            "trained {} on {} instances ({} dev): best dev accuracy {:.4} at epoch {}",
            outcome.model.kind(),
            outcome.train_size,
            outcome.dev_size,
            r.dev_accuracy,
            r.epoch
        ),
        None => println!("wrote initialized {} model (no epochs run)", outcome.model.kind()),
    }
    let mut m = RunManifest::new(command, a.seed);
    m.dataset_paths = vec![a.train_images.clone(), a.train_labels.clone()];
    m.output_paths = vec![model_path.clone(), log_path];
    m.model_paths = vec![model_path];
    m.finish(started.elapsed(), &a.out.join("manifest.json"))
}

fn eval_calibration(a: &CalibrationArgs, command: Command, started: Instant) -> Result<()> {
    positive_temperature(a.temperature)?;
    positive_samples(a.eval_samples)?;
    if a.bins == 0 {
        return Err(CliError::Usage("--bins must be at least 1".into()));
    }
    let model = load_model(&a.model)?;
    let ds = data::load_idx::<f64>(&a.images, &a.labels)?;
    check_labels(&model, &ds)?;
    if a.bin_mode == BinModeArg::Count && a.bins > ds.len() {
        return Err(CliError::Data(format!("{} bins requested but only {} instances", a.bins, ds.len())));
    }
    let records = score(&model, &ds, a.eval_samples, a.seed, a.temperature)?;
    let mode = match a.bin_mode {
        BinModeArg::Count => BinMode::Count,
        BinModeArg::Width => BinMode::Width,
    };
    let report = metrics::reliability(&records, a.bins, mode)?;
    write_file(&a.out, &metrics::reliability_csv(&report))?;
    println!("accuracy={} ece={}", report.accuracy, report.ece);
    let mut m = RunManifest::new(command, a.seed);
    m.model_paths = vec![a.model.clone()];
    m.dataset_paths = vec![a.images.clone(), a.labels.clone()];
    m.output_paths = vec![a.out.clone()];
    m.finish(started.elapsed(), &sidecar(&a.out))
}

/// An OOD set resolved from its command-line spelling.
fn ood_set(spec: &str, base: &ImageDataset64, uniform_count: usize, seed: u64) -> Result<(String, ImageDataset64, Option<PathBuf>)> {
    let spec = spec.trim();
    let unlabeled = |mut ds: ImageDataset64| {
        ds.labels = vec![None; ds.len()];
        ds
    };
    match spec {
        "vflip" => Ok(("vflip".into(), unlabeled(data::vflip(base)), None)),
        "hflip" => Ok(("hflip".into(), unlabeled(data::hflip(base)), None)),
        "uniform" => Ok((
            "uniform".into(),
            data::uniform_noise(uniform_count, base.height, base.width, seed),
            None,
        )),
        _ => match spec.strip_prefix("idx:") {
            Some(path) if !path.is_empty() => {
                let p = PathBuf::from(path);
                let ds = data::load_idx_images::<f64>(&p)?;
                Ok((format!("idx:{}", ds.name), ds, Some(p)))
            }
            _ => Err(CliError::Usage(format!(
                "unknown OOD set `{}` (expected vflip, hflip, uniform or idx:<images>)",
                spec
            ))),
        },
    }
}

fn eval_ood(a: &OodArgs, command: Command, started: Instant) -> Result<()> {
    positive_temperature(a.temperature)?;
    positive_samples(a.eval_samples)?;
    let model = load_model(&a.model)?;
    let signals = resolve_signals(&a.signals, &model)?;
    let base = match &a.in_labels {
        Some(l) => data::load_idx::<f64>(&a.in_images, l)?,
        None => data::load_idx_images::<f64>(&a.in_images)?,
    };
    check_input(&model, &base)?;
    if base.is_empty() {
        return Err(CliError::Data("no in-distribution instances".into()));
    }
    let mut datasets = vec![a.in_images.clone()];
    datasets.extend(a.in_labels.clone());
    let noise_seed = vib_core::rng::derive_seed(a.seed, vib_core::rng::purpose::UNIFORM_IMAGES, &[]);
    let mut sets = Vec::new();
    for spec in &a.ood {
        let (name, ds, path) = ood_set(spec, &base, a.uniform_count.unwrap_or(base.len()), noise_seed)?;
        check_input(&model, &ds)?;
        if ds.is_empty() {
            return Err(CliError::Data(format!("OOD set {} is empty", name)));
        }
        datasets.extend(path);
        sets.push((name, ds));
    }

    let in_records = score(&model, &base, a.eval_samples, a.seed, a.temperature)?;
    let mut csv = format!("{}\n", metrics::DETECTION_HEADER);
    let mut dump = format!("{}\n", metrics::SCORE_DUMP_HEADER);
    metrics::score_dump_rows("in", &in_records, &signals, &mut dump);
    for (i, (name, ds)) in sets.iter().enumerate() {
        // OOD sets draw evaluation noise from their own streams
        let set_seed = vib_core::rng::derive_seed(a.seed, vib_core::rng::purpose::EVAL_NOISE, &[i as u64 + 1]);
        let out_records = score(&model, ds, a.eval_samples, set_seed, a.temperature)?;
        for &s in &signals {
            let report = metrics::detection_report(&in_records, &out_records, s)?;
            csv.push_str(&metrics::detection_row(s, name, Some(&report)));
            println!("{} {}: AUROC {:.4}", name, s, report.auroc);
        }
        metrics::score_dump_rows(name, &out_records, &signals, &mut dump);
    }
    write_file(&a.out, &csv)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(p) = &a.dump_scores {
        write_file(p, &dump)?;
        outputs.push(p.clone());
    }
    let mut m = RunManifest::new(command, a.seed);
    m.model_paths = vec![a.model.clone()];
    m.dataset_paths = datasets;
    m.output_paths = outputs;
    m.finish(started.elapsed(), &sidecar(&a.out))
}

/// Comment line preceding the eval-error CSV header.
pub const ERROR_ORIENTATION: &str = "# positive class = correctly classified; AUPR-Out ranks misclassified instances (error detection)";

fn eval_error(a: &ErrorArgs, command: Command, started: Instant) -> Result<()> {
    positive_temperature(a.temperature)?;
    positive_samples(a.eval_samples)?;
    let model = load_model(&a.model)?;
    let signals = resolve_signals(&a.signals, &model)?;
    let ds = data::load_idx::<f64>(&a.images, &a.labels)?;
    check_labels(&model, &ds)?;
    let records = score(&model, &ds, a.eval_samples, a.seed, a.temperature)?;
    let mut csv = format!("{}\n{}\n", ERROR_ORIENTATION, metrics::DETECTION_HEADER);
    let mut degenerate = false;
    for &s in &signals {
        let report = metrics::error_detection_report(&records, s)?;
        degenerate |= report.is_none();
        csv.push_str(&metrics::detection_row(s, &ds.name, report.as_ref()));
    }
    if degenerate {
        eprintln!("warning: all predictions are correct or all are wrong; metrics are NA");
    }
    write_file(&a.out, &csv)?;
    let mut m = RunManifest::new(command, a.seed);
    m.model_paths = vec![a.model.clone()];
    m.dataset_paths = vec![a.images.clone(), a.labels.clone()];
    m.output_paths = vec![a.out.clone()];
    m.finish(started.elapsed(), &sidecar(&a.out))
}
