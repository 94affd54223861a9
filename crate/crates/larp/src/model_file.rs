//! Model persistence.
//!
//! A model file is a TOML document holding the format version, the resolved
//! config (including wiring), every `(midpoint, log_halfwidth)` pair in
//! layer/projection order, and the classifier weights and biases. Floats are
//! written with 17 significant digits, which round-trips every f64 exactly;
//! kernel noise is regenerated from the seed and derivation path rather than
//! stored, so a reloaded model is bit-identical to the saved one.

use std::fmt::Write as FmtWrite;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::kernel::KernelDistribution;
use crate::network::{build_model, Model};

pub const FORMAT_VERSION: u64 = 1;

/// 17 significant digits: exact decimal round-trip for f64.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_f64_array(out: &mut String, key: &str, values: &[f64]) {
    let _ = writeln!(out, "{key} = [");
    for v in values {
        let _ = writeln!(out, "    {},", fmt_f64(*v));
    }
    let _ = writeln!(out, "]");
}

fn write_seed(out: &mut String, seed: u64) {
    // TOML integers are i64; larger seeds are stored as strings
    if seed <= i64::MAX as u64 {
        let _ = writeln!(out, "seed = {seed}");
    } else {
        let _ = writeln!(out, "seed = \"{seed}\"");
    }
}

/// Renders a model to its file format.
pub fn render_model(model: &Model) -> String {
    let config = model.config();
    let mut out = String::new();
    let _ = writeln!(out, "format_version = {FORMAT_VERSION}");
    let _ = writeln!(out);
    let _ = writeln!(out, "[config]");
    let _ = writeln!(out, "num_classes = {}", config.num_classes);
    write_seed(&mut out, config.seed);
    let _ = writeln!(out, "input_height = {}", config.input_height);
    let _ = writeln!(out, "input_width = {}", config.input_width);
    for layer in &config.layers {
        let _ = writeln!(out);
        let _ = writeln!(out, "[[config.layers]]");
        let _ = writeln!(out, "num_projections = {}", layer.num_projections);
        let _ = writeln!(out, "support = {}", layer.support);
        let wiring = layer
            .wiring
            .as_ref()
            .expect("built models carry resolved wiring");
        let entries: Vec<String> = wiring.iter().map(|w| w.to_string()).collect();
        let _ = writeln!(out, "wiring = [{}]", entries.join(", "));
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "[params]");
    let mut midpoints = Vec::new();
    let mut log_halfwidths = Vec::new();
    for layer in 0..config.layers.len() {
        for projection in 0..config.layers[layer].num_projections {
            let dist = model.distribution(layer, projection);
            midpoints.push(dist.midpoint);
            log_halfwidths.push(dist.log_halfwidth);
        }
    }
    write_f64_array(&mut out, "midpoints", &midpoints);
    write_f64_array(&mut out, "log_halfwidths", &log_halfwidths);
    let _ = writeln!(out);
    let _ = writeln!(out, "[classifier]");
    write_f64_array(&mut out, "weights", model.classifier_weights());
    write_f64_array(&mut out, "bias", model.classifier_bias());
    out
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, render_model(model))?;
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    format_version: u64,
    config: ModelConfig,
    params: ParamsDoc,
    classifier: ClassifierDoc,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsDoc {
    midpoints: Vec<f64>,
    log_halfwidths: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifierDoc {
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// Parses a model from its file format, regenerating kernel noise from the
/// stored seed.
pub fn parse_model(text: &str, what: &str) -> Result<Model> {
    let doc: ModelDoc =
        toml::from_str(text).map_err(|e| Error::Format(format!("{what}: {e}")))?;
    if doc.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{what}: unsupported format_version {} (expected {FORMAT_VERSION})",
            doc.format_version
        )));
    }
    let mut model = build_model(&doc.config)?;

    let projections: usize = doc.config.layers.iter().map(|l| l.num_projections).sum();
    if doc.params.midpoints.len() != projections
        || doc.params.log_halfwidths.len() != projections
    {
        return Err(Error::Format(format!(
            "{what}: expected {projections} midpoint/log_halfwidth pairs, got {}/{}",
            doc.params.midpoints.len(),
            doc.params.log_halfwidths.len()
        )));
    }
    let mut at = 0;
    for (layer_dists, layer_kernels) in model
        .distributions
        .iter_mut()
        .zip(model.kernels.iter_mut())
    {
        for (dist, kernel) in layer_dists.iter_mut().zip(layer_kernels.iter_mut()) {
            *dist = KernelDistribution::new(
                doc.params.midpoints[at],
                doc.params.log_halfwidths[at],
            );
            kernel.refresh(dist)?;
            at += 1;
        }
    }

    let expected_weights = model.num_classes() * model.feature_dim();
    if doc.classifier.weights.len() != expected_weights {
        return Err(Error::Format(format!(
            "{what}: expected {expected_weights} classifier weights, got {}",
            doc.classifier.weights.len()
        )));
    }
    if doc.classifier.bias.len() != model.num_classes() {
        return Err(Error::Format(format!(
            "{what}: expected {} classifier biases, got {}",
            model.num_classes(),
            doc.classifier.bias.len()
        )));
    }
    model.classifier_weights = doc.classifier.weights;
    model.classifier_bias = doc.classifier.bias;
    Ok(model)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_model(&text, &path.display().to_string())
}

/// Parses a training config: the same syntax as a model file's `[config]`
/// block, at the top level. Wiring may be omitted per layer.
pub fn parse_config(text: &str, what: &str) -> Result<ModelConfig> {
    let config: ModelConfig =
        toml::from_str(text).map_err(|e| Error::Format(format!("{what}: {e}")))?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ModelConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_config(&text, &path.display().to_string())
}
