//! Runtime verification oracles.
//!
//! Three independent cross-checks of the numeric core:
//! - the fast sliding projection against an explicit dense operator matrix,
//! - the median regularizer against a full-sort reference,
//! - analytic backpropagation against central finite differences, skipping
//!   coordinates whose perturbation flips a median selection or a
//!   rectification sign.
//!
//! Each oracle re-derives what it checks through a separate code path from
//! the implementation under test.

use std::hint::black_box;
use std::time::Instant;

use crate::config::{LayerSpec, ModelConfig};
use crate::error::{Error, Result};
use crate::kernel::{KernelDistribution, ProjectionKernel};
use crate::lrpe::{dense_oracle, project};
use crate::map::FeatureMap;
use crate::network::{build_model, ForwardTrace, Model, SMR_WINDOW};
use crate::nonl::{smr, smr_select_sources};
use crate::rng::{unit_f64, uniform_index, verify_rng, Rng};
use crate::training::{apply_parameters, backward, cross_entropy, model_to_parameters};

/// Outcome of one oracle sweep.
#[derive(Clone, Debug)]
pub struct OracleReport {
    pub name: &'static str,
    pub trials: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Outcome of the gradient oracle, which also tracks how many coordinates
/// were median-stable and therefore checkable.
#[derive(Clone, Debug)]
pub struct GradientReport {
    pub models: usize,
    pub total_coordinates: usize,
    pub checked_coordinates: usize,
    pub stable_fraction: f64,
    pub max_error: f64,
    pub tolerance: f64,
    pub required_stable_fraction: f64,
    pub passed: bool,
}

pub(crate) fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub(crate) fn random_map_in(rng: &mut Rng, height: usize, width: usize, lo: f64, hi: f64) -> FeatureMap {
    let values = (0..height * width)
        .map(|_| lo + (hi - lo) * unit_f64(rng))
        .collect();
    FeatureMap::new(height, width, values).expect("random values are finite")
}

/// Compares `project` against the materialized operator matrix on random
/// kernels and maps up to 16x16 with supports 9 and 25.
pub fn projection_oracle(trials: usize, seed: u64) -> Result<OracleReport> {
    let tolerance = 1e-12;
    let mut max_error = 0.0f64;
    for trial in 0..trials {
        let mut rng = verify_rng(seed, trial);
        let support = if trial % 2 == 0 { 9 } else { 25 };
        let side = if support == 9 { 3 } else { 5 };
        let h = side + uniform_index(&mut rng, 17 - side);
        let w = side + uniform_index(&mut rng, 17 - side);
        let dist = KernelDistribution::new(
            2.0 * unit_f64(&mut rng) - 1.0,
            2.5 * unit_f64(&mut rng) - 2.0,
        );
        let kernel = ProjectionKernel::sample(&dist, support, &mut rng)?;
        let input = random_map_in(&mut rng, h, w, -1.0, 1.0);
        let fast = project(&input, &kernel)?;
        let slow = dense_oracle(&kernel, h, w)?.matvec(input.values())?;
        max_error = max_error.max(max_relative_error(fast.values(), &slow, 1e-30));
    }
    Ok(OracleReport {
        name: "projection_dense_oracle",
        trials,
        max_error,
        tolerance,
        passed: max_error <= tolerance,
    })
}

/// Full-sort reference median with its own clamping loops.
pub fn sort_median_reference(input: &FeatureMap, window: usize) -> Result<FeatureMap> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::Config(format!(
            "median window must be odd and positive, got {window}"
        )));
    }
    let (h, w) = (input.height(), input.width());
    let radius = window as isize / 2;
    let mut out = FeatureMap::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut values = Vec::with_capacity(window * window);
            for dy in -radius..=radius {
                let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                for dx in -radius..=radius {
                    let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    values.push(input.get(sy, sx));
                }
            }
            values.sort_by(|a, b| a.total_cmp(b));
            out.set(y, x, values[values.len() / 2]);
        }
    }
    Ok(out)
}

/// Compares `smr` against the full-sort reference; both are exact order
/// statistics, so any difference at all is a failure.
pub fn median_oracle(trials: usize, seed: u64) -> Result<OracleReport> {
    let mut max_error = 0.0f64;
    for trial in 0..trials {
        let mut rng = verify_rng(seed ^ 0x6D65_6469_616E, trial);
        let h = 1 + uniform_index(&mut rng, 32);
        let w = 1 + uniform_index(&mut rng, 32);
        let input = random_map_in(&mut rng, h, w, -2.0, 2.0);
        let fast = smr(&input, SMR_WINDOW)?;
        let slow = sort_median_reference(&input, SMR_WINDOW)?;
        for (a, b) in fast.values().iter().zip(slow.values()) {
            max_error = max_error.max((a - b).abs());
        }
    }
    Ok(OracleReport {
        name: "median_sort_oracle",
        trials,
        max_error,
        tolerance: 0.0,
        passed: max_error == 0.0,
    })
}

fn fnv1a(hash: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *hash ^= u64::from(b);
        *hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
}

/// Hash of every median selection and rectification sign in a forward
/// trace. Two parameter points with equal signatures have the same active
/// piece of the piecewise-smooth objective.
pub(crate) fn selection_signature(trace: &ForwardTrace) -> u64 {
    let mut hash = 0xCBF2_9CE4_8422_2325u64;
    for layer in &trace.layers {
        for (pre, rect) in layer.pre.iter().zip(&layer.rect) {
            for &v in pre.values() {
                let sign: u8 = if v > 0.0 {
                    1
                } else if v < 0.0 {
                    2
                } else {
                    0
                };
                fnv1a(&mut hash, &[sign]);
            }
            let sources =
                smr_select_sources(rect, SMR_WINDOW).expect("window validated by forward");
            for s in sources {
                fnv1a(&mut hash, &s.to_le_bytes());
            }
        }
    }
    hash
}

fn random_toy_config(rng: &mut Rng, model_seed: u64) -> ModelConfig {
    let num_layers = 1 + uniform_index(rng, 2);
    let layers = (0..num_layers)
        .map(|_| LayerSpec::new(1 + uniform_index(rng, 3), 9))
        .collect();
    ModelConfig {
        layers,
        num_classes: 3,
        seed: model_seed,
        input_height: 8,
        input_width: 8,
    }
}

fn randomize_parameters(model: &Model, rng: &mut Rng) -> Vec<f64> {
    let proj = model.projection_parameter_count();
    model_to_parameters(model)
        .iter()
        .enumerate()
        .map(|(i, _)| {
            if i < proj {
                if i % 2 == 0 {
                    0.8 * (unit_f64(rng) - 0.5) // midpoint
                } else {
                    -2.0 + 1.5 * unit_f64(rng) // log-halfwidth
                }
            } else {
                1.4 * (unit_f64(rng) - 0.5) // classifier
            }
        })
        .collect()
}

/// Checks analytic gradients against central finite differences on small
/// random models, counting only coordinates whose perturbation leaves every
/// median selection and rectification sign unchanged.
pub fn gradient_oracle(num_models: usize, seed: u64) -> Result<GradientReport> {
    let step = 1e-6;
    let tolerance = 1e-4;
    let required_stable_fraction = 0.95;
    let mut total = 0usize;
    let mut checked = 0usize;
    let mut max_error = 0.0f64;

    for instance in 0..num_models {
        let mut rng = verify_rng(seed ^ 0x6772_6164, instance);
        let config = random_toy_config(&mut rng, seed.wrapping_add(instance as u64));
        let mut model = build_model(&config)?;
        let params = randomize_parameters(&model, &mut rng);
        apply_parameters(&mut model, &params)?;
        let image = random_map_in(&mut rng, 8, 8, 0.0, 1.0);
        let label = uniform_index(&mut rng, 3);

        let trace = model.forward(&image)?;
        let analytic = backward(&model, &trace, label)?;
        let base_signature = selection_signature(&trace);

        let mut probe = |point: &[f64]| -> Result<(f64, u64)> {
            apply_parameters(&mut model, point)?;
            let trace = model.forward(&image)?;
            let loss = cross_entropy(trace.probabilities(), label)?;
            Ok((loss, selection_signature(&trace)))
        };

        let mut point = params.clone();
        for i in 0..params.len() {
            total += 1;
            point[i] = params[i] + step;
            let (loss_plus, sig_plus) = probe(&point)?;
            point[i] = params[i] - step;
            let (loss_minus, sig_minus) = probe(&point)?;
            point[i] = params[i];
            if sig_plus != base_signature || sig_minus != base_signature {
                continue; // median selection flipped; subgradient unverifiable here
            }
            let fd = (loss_plus - loss_minus) / (2.0 * step);
            let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(tolerance);
            max_error = max_error.max(err);
            checked += 1;
        }
    }

    let stable_fraction = if total == 0 {
        1.0
    } else {
        checked as f64 / total as f64
    };
    Ok(GradientReport {
        models: num_models,
        total_coordinates: total,
        checked_coordinates: checked,
        stable_fraction,
        max_error,
        tolerance,
        required_stable_fraction,
        passed: max_error < tolerance && stable_fraction >= required_stable_fraction,
    })
}

/// Wall time per projection call, in nanoseconds, for one kernel on one map.
pub fn measure_projection_ns(
    height: usize,
    width: usize,
    support: usize,
    repeat: usize,
) -> Result<f64> {
    if repeat == 0 {
        return Err(Error::Input("repeat count must be positive".to_string()));
    }
    let mut rng = verify_rng(0xBE7C, support);
    let dist = KernelDistribution::new(0.0, -0.8);
    let kernel = ProjectionKernel::sample(&dist, support, &mut rng)?;
    let input = random_map_in(&mut rng, height, width, -1.0, 1.0);
    // warmup and validity check
    black_box(project(&input, &kernel)?);
    let start = Instant::now();
    for _ in 0..repeat {
        black_box(project(black_box(&input), black_box(&kernel))?);
    }
    Ok(start.elapsed().as_nanos() as f64 / repeat as f64)
}
