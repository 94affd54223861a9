//! Implementations behind the `larp` binary's subcommands. Each command
//! takes parsed options and writes results to the supplied sinks, so tests
//! can drive them without spawning a process.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use crate::data::{load_idx_images, load_idx_labels, stratified_subsample, LabeledDataset};
use crate::error::{Error, Result};
use crate::model_file::{fmt_f64, load_config, load_model, save_model};
use crate::network::build_model;
use crate::training::{batch_loss, evaluate, scg_train, ScgConfig};
use crate::verify::{gradient_oracle, measure_projection_ns, median_oracle, projection_oracle};

pub struct TrainOpts {
    pub config: PathBuf,
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub subsample: Option<usize>,
    pub max_iters: Option<usize>,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

/// Trains a model and writes it to `opts.out`. Loss history goes to `log`
/// as `iter<TAB>loss<TAB>grad_norm` lines; the summary goes to `out`.
pub fn cmd_train(opts: &TrainOpts, out: &mut dyn Write, log: &mut dyn Write) -> Result<()> {
    let mut config = load_config(&opts.config)?;
    if let Some(seed) = opts.seed {
        config.seed = seed;
    }
    let images = load_idx_images(&opts.train_images)?;
    let labels = load_idx_labels(&opts.train_labels)?;
    let dataset = LabeledDataset::new(images, labels, None, config.num_classes)?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{}: no training samples",
            opts.train_images.display()
        )));
    }
    if dataset.image(0).height() != config.input_height
        || dataset.image(0).width() != config.input_width
    {
        return Err(Error::Shape(format!(
            "{}x{} images do not match configured {}x{} input",
            dataset.image(0).height(),
            dataset.image(0).width(),
            config.input_height,
            config.input_width
        )));
    }
    let dataset = match opts.subsample {
        Some(n) => stratified_subsample(&dataset, n, config.seed)?,
        None => dataset,
    };

    let model = build_model(&config)?;
    let mut scg = ScgConfig::default();
    if let Some(iters) = opts.max_iters {
        scg.max_iters = iters;
    }
    let (model, _history) = scg_train(model, &dataset, &scg, Some(log))?;

    let final_loss = batch_loss(&model, &dataset)?;
    let report = evaluate(&model, &dataset)?;
    save_model(&model, &opts.out)?;
    writeln!(out, "final_loss={final_loss:.8e}")?;
    writeln!(out, "train_error_rate={:.2}", report.error_rate)?;
    Ok(())
}

pub struct EvalOpts {
    pub model: PathBuf,
    pub images: PathBuf,
    pub labels: PathBuf,
}

pub fn cmd_eval(opts: &EvalOpts, out: &mut dyn Write) -> Result<()> {
    let model = load_model(&opts.model)?;
    let images = load_idx_images(&opts.images)?;
    let labels = load_idx_labels(&opts.labels)?;
    let dataset = LabeledDataset::new(images, labels, None, model.num_classes())?;
    let report = evaluate(&model, &dataset)?;
    writeln!(out, "error_rate={:.2}", report.error_rate)?;
    Ok(())
}

pub struct ExtractOpts {
    pub model: PathBuf,
    pub images: PathBuf,
    pub out: PathBuf,
}

/// Writes one tab-separated line of features per image, 17 significant
/// digits per value.
pub fn cmd_extract(opts: &ExtractOpts) -> Result<()> {
    let model = load_model(&opts.model)?;
    let images = load_idx_images(&opts.images)?;
    let mut text = String::new();
    for image in &images {
        let features = model.extract_features(image)?;
        let fields: Vec<String> = features.iter().map(|&f| fmt_f64(f)).collect();
        text.push_str(&fields.join("\t"));
        text.push('\n');
    }
    fs::write(&opts.out, text)?;
    Ok(())
}

/// Runs all three oracles, printing one line per oracle; returns whether
/// every comparison passed its tolerance.
pub fn cmd_verify(trials: usize, seed: u64, out: &mut dyn Write) -> Result<bool> {
    if trials == 0 {
        writeln!(out, "warning: --trials 0, all oracles vacuously pass")?;
        return Ok(true);
    }
    let projection = projection_oracle(trials, seed)?;
    writeln!(
        out,
        "{}: trials={} max_error={:.3e} tolerance={:.1e} {}",
        projection.name,
        projection.trials,
        projection.max_error,
        projection.tolerance,
        if projection.passed { "pass" } else { "FAIL" }
    )?;
    let median = median_oracle(trials, seed)?;
    writeln!(
        out,
        "{}: trials={} max_error={:.3e} tolerance={:.1e} {}",
        median.name,
        median.trials,
        median.max_error,
        median.tolerance,
        if median.passed { "pass" } else { "FAIL" }
    )?;
    let models = (trials / 5).max(1);
    let gradient = gradient_oracle(models, seed)?;
    writeln!(
        out,
        "gradient_fd_oracle: models={} coordinates={} checked={} stable={:.3} max_error={:.3e} tolerance={:.1e} {}",
        gradient.models,
        gradient.total_coordinates,
        gradient.checked_coordinates,
        gradient.stable_fraction,
        gradient.max_error,
        gradient.tolerance,
        if gradient.passed { "pass" } else { "FAIL" }
    )?;
    Ok(projection.passed && median.passed && gradient.passed)
}

pub struct BenchOpts {
    pub map_height: usize,
    pub map_width: usize,
    pub support: usize,
    pub repeat: usize,
}

pub fn cmd_bench(opts: &BenchOpts, out: &mut dyn Write) -> Result<()> {
    let ns = measure_projection_ns(opts.map_height, opts.map_width, opts.support, opts.repeat)?;
    writeln!(out, "ns_per_projection={}", ns.round() as u64)?;
    Ok(())
}
