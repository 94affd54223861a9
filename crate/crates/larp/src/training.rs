//! Cross-entropy objective, backpropagation through the frozen-noise
//! reparameterization, the scaled conjugate gradient optimizer, and batch
//! evaluation.
//!
//! The trainable state is flattened into a single parameter vector laid out
//! as all `(midpoint, log_halfwidth)` pairs in layer-then-projection order,
//! then classifier weights row-major, then biases. Batch reductions run in
//! parallel over fixed-size index chunks and are combined in chunk order, so
//! results are bit-identical regardless of thread scheduling.

use std::io::Write;

use rayon::prelude::*;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::kernel::KernelDistribution;
use crate::lrpe::{project_backward, project_backward_coeffs};
use crate::map::FeatureMap;
use crate::network::{ForwardTrace, Model};
use crate::nonl::{avr_backward, scatter_by_sources};

/// Samples per parallel reduction chunk.
const BATCH_CHUNK: usize = 32;

/// Negative log-likelihood of the labeled class.
pub fn cross_entropy(probabilities: &[f64], label: usize) -> Result<f64> {
    if label >= probabilities.len() {
        return Err(Error::Input(format!(
            "label {label} out of range for {} classes",
            probabilities.len()
        )));
    }
    Ok(-probabilities[label].ln())
}

/// Flattens a model's trainable state.
pub fn model_to_parameters(model: &Model) -> Vec<f64> {
    let mut params = Vec::with_capacity(model.trainable_parameter_count());
    for layer_dists in &model.distributions {
        for dist in layer_dists {
            params.push(dist.midpoint);
            params.push(dist.log_halfwidth);
        }
    }
    params.extend_from_slice(&model.classifier_weights);
    params.extend_from_slice(&model.classifier_bias);
    params
}

/// Writes a flat parameter vector back into the model, recomputing every
/// kernel's coefficients from its frozen noise.
pub fn apply_parameters(model: &mut Model, params: &[f64]) -> Result<()> {
    let expected = model.trainable_parameter_count();
    if params.len() != expected {
        return Err(Error::Input(format!(
            "parameter vector has {} entries, expected {expected}",
            params.len()
        )));
    }
    let mut at = 0;
    for (layer_dists, layer_kernels) in model
        .distributions
        .iter_mut()
        .zip(model.kernels.iter_mut())
    {
        for (dist, kernel) in layer_dists.iter_mut().zip(layer_kernels.iter_mut()) {
            *dist = KernelDistribution::new(params[at], params[at + 1]);
            kernel.refresh(dist)?;
            at += 2;
        }
    }
    let weight_count = model.classifier_weights.len();
    model
        .classifier_weights
        .copy_from_slice(&params[at..at + weight_count]);
    at += weight_count;
    model.classifier_bias.copy_from_slice(&params[at..]);
    Ok(())
}

/// Gradient of the cross-entropy loss of one traced forward pass with
/// respect to the full parameter vector.
///
/// Kernel-coefficient gradients fold onto the distribution parameters via
/// `dk/dm = 1` and `dk/drho = exp(rho) * (2u - 1)`.
pub fn backward(model: &Model, trace: &ForwardTrace, label: usize) -> Result<Vec<f64>> {
    let classes = model.num_classes();
    if label >= classes {
        return Err(Error::Input(format!(
            "label {label} out of range for {classes} classes"
        )));
    }
    let feature_dim = model.feature_dim();
    let num_layers = model.config.layers.len();
    if trace.layers.len() != num_layers
        || trace.features.len() != feature_dim
        || trace
            .layers
            .iter()
            .zip(&model.config.layers)
            .any(|(t, l)| t.post.len() != l.num_projections)
    {
        return Err(Error::Input(
            "trace does not match the model architecture".to_string(),
        ));
    }

    let proj_params = model.projection_parameter_count();
    let mut grad = vec![0.0; model.trainable_parameter_count()];

    // softmax + cross-entropy head: dL/dlogit = p - onehot(label)
    let mut dlogits = trace.probabilities.clone();
    dlogits[label] -= 1.0;
    let mut grad_features = vec![0.0; feature_dim];
    {
        let (gw, gb) = grad[proj_params..].split_at_mut(classes * feature_dim);
        for c in 0..classes {
            let dl = dlogits[c];
            gb[c] = dl;
            let w_row = &model.classifier_weights[c * feature_dim..(c + 1) * feature_dim];
            let gw_row = &mut gw[c * feature_dim..(c + 1) * feature_dim];
            for f in 0..feature_dim {
                gw_row[f] = dl * trace.features[f];
                grad_features[f] += dl * w_row[f];
            }
        }
    }

    // mean pooling backward: every pixel of last-layer map j receives
    // grad_features[j] / (h * w)
    let h = model.config.input_height;
    let w = model.config.input_width;
    let pixels = (h * w) as f64;
    let mut g_post: Vec<FeatureMap> = grad_features
        .iter()
        .map(|&gf| {
            let mut m = FeatureMap::zeros(h, w);
            let v = gf / pixels;
            for x in m.values_mut() {
                *x = v;
            }
            m
        })
        .collect();

    let mut layer_offset: Vec<usize> = Vec::with_capacity(num_layers);
    let mut at = 0;
    for layer in &model.config.layers {
        layer_offset.push(at);
        at += 2 * layer.num_projections;
    }

    for i in (0..num_layers).rev() {
        let layer = &model.config.layers[i];
        let wiring = layer
            .wiring
            .as_ref()
            .expect("built models carry resolved wiring");
        let inputs: &[FeatureMap] = if i == 0 {
            std::slice::from_ref(&trace.input)
        } else {
            &trace.layers[i - 1].post
        };
        let mut g_prev: Vec<FeatureMap> = (0..inputs.len())
            .map(|_| FeatureMap::zeros(h, w))
            .collect();

        for j in 0..layer.num_projections {
            // median selections were recorded during the forward pass
            let g_rect = scatter_by_sources(&trace.layers[i].sources[j], &g_post[j]);
            let g_pre = avr_backward(&trace.layers[i].pre[j], &g_rect)?;
            let g_coeffs = if i > 0 {
                let (g_in, g_coeffs) =
                    project_backward(&inputs[wiring[j]], &model.kernels[i][j], &g_pre)?;
                let dst = g_prev[wiring[j]].values_mut();
                for (d, s) in dst.iter_mut().zip(g_in.values()) {
                    *d += s;
                }
                g_coeffs
            } else {
                // the image's own gradient is never used
                project_backward_coeffs(&inputs[wiring[j]], &model.kernels[i][j], &g_pre)?
            };
            let halfwidth = model.distributions[i][j].log_halfwidth.exp();
            let noise = model.kernels[i][j].noise();
            let mut g_mid = 0.0;
            let mut g_rho = 0.0;
            for (gc, &u) in g_coeffs.iter().zip(noise) {
                g_mid += gc;
                g_rho += gc * halfwidth * (2.0 * u - 1.0);
            }
            grad[layer_offset[i] + 2 * j] = g_mid;
            grad[layer_offset[i] + 2 * j + 1] = g_rho;
        }
        if i > 0 {
            g_post = g_prev;
        }
    }
    Ok(grad)
}

/// Central finite differences of `objective` around `params`.
pub fn finite_diff_gradient<F>(mut objective: F, params: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(step > 0.0, "finite difference step must be positive");
    let mut grad = vec![0.0; params.len()];
    let mut point = params.to_vec();
    for i in 0..params.len() {
        point[i] = params[i] + step;
        let plus = objective(&point);
        point[i] = params[i] - step;
        let minus = objective(&point);
        point[i] = params[i];
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// A scalar function of a parameter vector that the optimizer can query.
pub trait Objective {
    fn value(&mut self, params: &[f64]) -> Result<f64>;
    fn value_and_gradient(&mut self, params: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Full-batch mean cross-entropy of a model over a dataset.
pub struct BatchObjective<'a> {
    model: Model,
    dataset: &'a LabeledDataset,
}

impl<'a> BatchObjective<'a> {
    pub fn new(model: Model, dataset: &'a LabeledDataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Input("training dataset is empty".to_string()));
        }
        if let Some(&bad) = dataset.labels().iter().find(|&&l| l >= model.num_classes()) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {} classes",
                model.num_classes()
            )));
        }
        Ok(BatchObjective { model, dataset })
    }

    pub fn into_model(self) -> Model {
        self.model
    }
}

impl Objective for BatchObjective<'_> {
    fn value(&mut self, params: &[f64]) -> Result<f64> {
        match apply_parameters(&mut self.model, params) {
            // an infeasible trial point has infinite loss, not an error
            Err(Error::InvalidParameter(_)) => return Ok(f64::INFINITY),
            other => other?,
        }
        batch_loss(&self.model, self.dataset)
    }

    fn value_and_gradient(&mut self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        apply_parameters(&mut self.model, params)?;
        batch_loss_and_gradient(&self.model, self.dataset)
    }
}

/// Mean cross-entropy over the dataset; deterministic chunked reduction.
pub fn batch_loss(model: &Model, dataset: &LabeledDataset) -> Result<f64> {
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let partials: Result<Vec<f64>> = indices
        .par_chunks(BATCH_CHUNK)
        .map(|chunk| {
            let mut acc = 0.0;
            for &i in chunk {
                let probs = model.probabilities(dataset.image(i))?;
                acc += cross_entropy(&probs, dataset.label(i))?;
            }
            Ok(acc)
        })
        .collect();
    Ok(partials?.iter().sum::<f64>() / dataset.len() as f64)
}

/// Mean loss and mean gradient over the dataset; deterministic chunked
/// reduction.
pub fn batch_loss_and_gradient(model: &Model, dataset: &LabeledDataset) -> Result<(f64, Vec<f64>)> {
    let total = model.trainable_parameter_count();
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let partials: Result<Vec<(f64, Vec<f64>)>> = indices
        .par_chunks(BATCH_CHUNK)
        .map(|chunk| {
            let mut loss_acc = 0.0;
            let mut grad_acc = vec![0.0; total];
            for &i in chunk {
                let trace = model.forward(dataset.image(i))?;
                loss_acc += cross_entropy(trace.probabilities(), dataset.label(i))?;
                let grad = backward(model, &trace, dataset.label(i))?;
                for (a, g) in grad_acc.iter_mut().zip(&grad) {
                    *a += g;
                }
            }
            Ok((loss_acc, grad_acc))
        })
        .collect();

    let mut loss = 0.0;
    let mut grad = vec![0.0; total];
    for (l, g) in partials? {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let n = dataset.len() as f64;
    loss /= n;
    for g in &mut grad {
        *g /= n;
    }
    Ok((loss, grad))
}

/// Scaled conjugate gradient settings. The lambda thresholds follow the
/// usual 0.25 / 0.75 comparison-ratio rules; the Hessian-vector estimate
/// comes from finite differencing the gradient along the search direction.
#[derive(Clone, Debug)]
pub struct ScgConfig {
    pub max_iters: usize,
    pub initial_lambda: f64,
    pub lambda_max: f64,
    /// Terminate when the gradient norm drops below this.
    pub tol: f64,
    /// Relative step for the curvature probe.
    pub sigma: f64,
    /// Quadruple lambda when the comparison ratio falls below this.
    pub ratio_low: f64,
    /// Halve lambda when the comparison ratio exceeds this.
    pub ratio_high: f64,
    /// Restart to steepest descent every this many iterations; defaults to
    /// the parameter count.
    pub restart_period: Option<usize>,
}

impl Default for ScgConfig {
    fn default() -> Self {
        ScgConfig {
            max_iters: 200,
            initial_lambda: 1e-6,
            lambda_max: 1e20,
            tol: 1e-5,
            sigma: 1e-4,
            ratio_low: 0.25,
            ratio_high: 0.75,
            restart_period: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    MaxIters,
    GradientNorm,
    /// Lambda exceeded its cap; no further progress possible.
    Stalled,
}

#[derive(Clone, Debug)]
pub struct AcceptedStep {
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug)]
pub struct ScgOutcome {
    /// Best-loss parameters seen.
    pub params: Vec<f64>,
    pub loss: f64,
    pub history: Vec<AcceptedStep>,
    pub termination: Termination,
    pub iterations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn emit(log: &mut Option<&mut dyn Write>, iter: usize, loss: f64, grad_norm: f64) {
    if let Some(sink) = log.as_deref_mut() {
        let _ = writeln!(sink, "{iter}\t{loss:.8e}\t{grad_norm:.8e}");
    }
}

/// Minimizes an objective by scaled conjugate gradient.
///
/// Steps are accepted only when they strictly decrease the loss; on
/// rejection the trust parameter lambda grows until either a productive
/// direction is found or lambda passes its cap (a stall, reported as
/// convergence rather than an error).
pub fn scg_minimize(
    objective: &mut dyn Objective,
    x0: &[f64],
    config: &ScgConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<ScgOutcome> {
    let n = x0.len();
    if n == 0 {
        return Err(Error::Input("cannot optimize zero parameters".to_string()));
    }
    let (mut loss, grad0) = objective.value_and_gradient(x0)?;
    if !loss.is_finite() {
        return Err(Error::Input(format!("non-finite loss {loss} at start")));
    }

    let mut point = x0.to_vec();
    let mut residual: Vec<f64> = grad0.iter().map(|g| -g).collect();
    let mut direction = residual.clone();
    let mut best_params = point.clone();
    let mut best_loss = loss;
    let mut lambda = config.initial_lambda;
    let mut lambda_bar = 0.0;
    let mut curvature = 0.0;
    let mut need_curvature = true;
    let restart_period = config.restart_period.unwrap_or(n).max(1);
    let mut history = Vec::new();
    let mut termination = Termination::MaxIters;
    let mut iterations = 0;

    emit(&mut log, 0, loss, norm(&residual));

    for k in 1..=config.max_iters {
        iterations = k;
        let grad_norm = norm(&residual);
        if grad_norm < config.tol {
            termination = Termination::GradientNorm;
            iterations = k - 1;
            break;
        }

        let mut mu = dot(&direction, &residual);
        if mu <= 0.0 {
            // conjugacy produced a non-descent direction; restart
            direction.copy_from_slice(&residual);
            mu = dot(&direction, &direction);
            need_curvature = true;
        }
        let d_norm2 = dot(&direction, &direction);
        if d_norm2 == 0.0 || !d_norm2.is_finite() {
            termination = Termination::Stalled;
            break;
        }

        if need_curvature {
            let sigma_k = config.sigma / d_norm2.sqrt();
            let probe: Vec<f64> = point
                .iter()
                .zip(&direction)
                .map(|(p, d)| p + sigma_k * d)
                .collect();
            curvature = match objective.value_and_gradient(&probe) {
                Ok((_, probe_grad)) => {
                    // s = (grad(p + sigma d) - grad(p)) / sigma; grad = -residual
                    direction
                        .iter()
                        .zip(probe_grad.iter().zip(&residual))
                        .map(|(d, (pg, r))| d * (pg + r))
                        .sum::<f64>()
                        / sigma_k
                }
                Err(Error::InvalidParameter(_)) => 0.0,
                Err(e) => return Err(e),
            };
            need_curvature = false;
        }

        // scale the curvature estimate, forcing positive definiteness
        let mut delta = curvature + (lambda - lambda_bar) * d_norm2;
        if delta <= 0.0 {
            lambda_bar = 2.0 * (lambda - delta / d_norm2);
            delta = -delta + lambda * d_norm2;
            lambda = lambda_bar;
        }

        let alpha = mu / delta;
        let candidate: Vec<f64> = point
            .iter()
            .zip(&direction)
            .map(|(p, d)| p + alpha * d)
            .collect();
        let candidate_loss = match objective.value(&candidate) {
            Ok(v) => v,
            Err(Error::InvalidParameter(_)) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        let comparison = if candidate_loss.is_finite() {
            2.0 * delta * (loss - candidate_loss) / (mu * mu)
        } else {
            f64::NEG_INFINITY
        };

        if comparison >= 0.0 && candidate_loss < loss {
            let (new_loss, new_grad) = objective.value_and_gradient(&candidate)?;
            point = candidate;
            loss = new_loss;
            let old_residual = std::mem::replace(
                &mut residual,
                new_grad.iter().map(|g| -g).collect(),
            );
            lambda_bar = 0.0;
            need_curvature = true;
            if k % restart_period == 0 {
                direction.copy_from_slice(&residual);
            } else {
                let beta =
                    (dot(&residual, &residual) - dot(&residual, &old_residual)) / mu;
                for (d, r) in direction.iter_mut().zip(&residual) {
                    *d = r + beta * *d;
                }
            }
            if loss < best_loss {
                best_loss = loss;
                best_params = point.clone();
            }
            history.push(AcceptedStep {
                iter: k,
                loss,
                grad_norm: norm(&residual),
            });
            emit(&mut log, k, loss, norm(&residual));
            if comparison >= config.ratio_high {
                lambda *= 0.5;
            }
        } else {
            lambda_bar = lambda;
        }

        if comparison < config.ratio_low {
            lambda *= 4.0;
        }
        if lambda > config.lambda_max {
            termination = Termination::Stalled;
            break;
        }
    }

    Ok(ScgOutcome {
        params: best_params,
        loss: best_loss,
        history,
        termination,
        iterations,
    })
}

/// Trains a model's parameters by full-batch SCG on the dataset, returning
/// the best-loss model and the accepted-step history.
pub fn scg_train(
    model: Model,
    dataset: &LabeledDataset,
    config: &ScgConfig,
    log: Option<&mut dyn Write>,
) -> Result<(Model, Vec<AcceptedStep>)> {
    let x0 = model_to_parameters(&model);
    let mut objective = BatchObjective::new(model, dataset)?;
    let outcome = scg_minimize(&mut objective, &x0, config, log)?;
    let mut model = objective.into_model();
    apply_parameters(&mut model, &outcome.params)?;
    Ok((model, outcome.history))
}

/// Classification error rate and per-class confusion counts.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub total: usize,
    pub misclassified: usize,
    /// Percent in [0, 100].
    pub error_rate: f64,
    num_classes: usize,
    confusion: Vec<usize>,
}

impl EvalReport {
    /// Count of samples with the given true class predicted as `predicted`.
    pub fn confusion(&self, true_class: usize, predicted: usize) -> usize {
        self.confusion[true_class * self.num_classes + predicted]
    }
}

/// Evaluates the model on a labeled dataset; prediction is the argmax
/// probability with ties broken toward the lowest class index.
pub fn evaluate(model: &Model, dataset: &LabeledDataset) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Input("evaluation dataset is empty".to_string()));
    }
    let classes = model.num_classes();
    if let Some(&bad) = dataset.labels().iter().find(|&&l| l >= classes) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let partials: Result<Vec<(usize, Vec<usize>)>> = indices
        .par_chunks(BATCH_CHUNK)
        .map(|chunk| {
            let mut mis = 0;
            let mut confusion = vec![0usize; classes * classes];
            for &i in chunk {
                let predicted = model.predict(dataset.image(i))?;
                let truth = dataset.label(i);
                confusion[truth * classes + predicted] += 1;
                if predicted != truth {
                    mis += 1;
                }
            }
            Ok((mis, confusion))
        })
        .collect();

    let mut misclassified = 0;
    let mut confusion = vec![0usize; classes * classes];
    for (m, c) in partials? {
        misclassified += m;
        for (a, b) in confusion.iter_mut().zip(&c) {
            *a += b;
        }
    }
    Ok(EvalReport {
        total: dataset.len(),
        misclassified,
        error_rate: 100.0 * misclassified as f64 / dataset.len() as f64,
        num_classes: classes,
        confusion,
    })
}
