//! Model assembly and the forward pass: alternating projection-ensemble and
//! nonlinearity layers, global mean pooling of the last layer's maps into
//! the feature vector, and a linear softmax head.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::kernel::{KernelDistribution, ProjectionKernel};
use crate::lrpe::project;
use crate::map::FeatureMap;
use crate::nonl::{avr, smr, smr_with_sources};
use crate::rng::{child_rng, uniform_index, wiring_rng};

/// Median window applied after every rectification.
pub const SMR_WINDOW: usize = 3;

/// Full trainable state: one distribution and one frozen-noise kernel per
/// projection, plus the classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub(crate) config: ModelConfig,
    pub(crate) distributions: Vec<Vec<KernelDistribution>>,
    pub(crate) kernels: Vec<Vec<ProjectionKernel>>,
    /// `num_classes x feature_dim`, row-major.
    pub(crate) classifier_weights: Vec<f64>,
    pub(crate) classifier_bias: Vec<f64>,
}

/// All intermediate stages of one forward pass, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub(crate) input: FeatureMap,
    pub(crate) layers: Vec<LayerTrace>,
    pub(crate) features: Vec<f64>,
    pub(crate) logits: Vec<f64>,
    pub(crate) probabilities: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// Pre-nonlinearity projection outputs.
    pub(crate) pre: Vec<FeatureMap>,
    /// After absolute-value rectification.
    pub(crate) rect: Vec<FeatureMap>,
    /// After median regularization; the next layer's inputs.
    pub(crate) post: Vec<FeatureMap>,
    /// Median source index per output position, for the backward pass.
    pub(crate) sources: Vec<Vec<u32>>,
}

impl ForwardTrace {
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn layer_post_maps(&self, layer: usize) -> &[FeatureMap] {
        &self.layers[layer].post
    }
}

/// Initial log-halfwidth: unit halfwidth. Rectification and the median are
/// both scale-equivariant, so the init width only sets the overall feature
/// scale reaching the classifier; unit width keeps pooled features near
/// O(1), where the softmax head optimizes well. (A 1/sqrt(support) width
/// shrinks features by its cube over three layers and stalls training.)
fn initial_log_halfwidth(_support: usize) -> f64 {
    0.0
}

/// Builds a model from a config: distributions at their symmetric zero-mean
/// init, kernels sampled from per-(layer, projection) seed streams, wiring
/// drawn uniformly where the config leaves it unspecified, classifier at
/// zero.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut resolved = config.clone();
    let mut distributions = Vec::with_capacity(config.layers.len());
    let mut kernels = Vec::with_capacity(config.layers.len());

    for (i, layer) in config.layers.iter().enumerate() {
        let prev_maps = if i == 0 {
            1
        } else {
            config.layers[i - 1].num_projections
        };
        let wiring = match &layer.wiring {
            Some(wiring) => wiring.clone(),
            None => (0..layer.num_projections)
                .map(|j| {
                    if i == 0 {
                        0
                    } else {
                        uniform_index(&mut wiring_rng(config.seed, i, j), prev_maps)
                    }
                })
                .collect(),
        };
        resolved.layers[i].wiring = Some(wiring);

        let dist = KernelDistribution::new(0.0, initial_log_halfwidth(layer.support));
        let mut layer_dists = Vec::with_capacity(layer.num_projections);
        let mut layer_kernels = Vec::with_capacity(layer.num_projections);
        for j in 0..layer.num_projections {
            let mut rng = child_rng(config.seed, i, j);
            layer_kernels.push(ProjectionKernel::sample(&dist, layer.support, &mut rng)?);
            layer_dists.push(dist);
        }
        distributions.push(layer_dists);
        kernels.push(layer_kernels);
    }

    let feature_dim = resolved.feature_dim();
    Ok(Model {
        classifier_weights: vec![0.0; resolved.num_classes * feature_dim],
        classifier_bias: vec![0.0; resolved.num_classes],
        config: resolved,
        distributions,
        kernels,
    })
}

/// Numerically stable softmax over `weights * features + bias`.
pub fn softmax_classify(features: &[f64], weights: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    let classes = bias.len();
    if classes == 0 {
        return Err(Error::Shape("classifier has no classes".to_string()));
    }
    if weights.len() != classes * features.len() {
        return Err(Error::Shape(format!(
            "classifier expects {} weights for {} classes x {} features, got {}",
            classes * features.len(),
            classes,
            features.len(),
            weights.len()
        )));
    }
    let mut logits = vec![0.0; classes];
    for (c, logit) in logits.iter_mut().enumerate() {
        let row = &weights[c * features.len()..(c + 1) * features.len()];
        let mut acc = bias[c];
        for (w, f) in row.iter().zip(features) {
            acc += w * f;
        }
        *logit = acc;
    }
    Ok(softmax(&logits))
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn projection_parameter_count(&self) -> usize {
        self.config.projection_parameter_count()
    }

    pub fn classifier_parameter_count(&self) -> usize {
        self.config.classifier_parameter_count()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.config.trainable_parameter_count()
    }

    pub fn distribution(&self, layer: usize, projection: usize) -> &KernelDistribution {
        &self.distributions[layer][projection]
    }

    pub fn kernel(&self, layer: usize, projection: usize) -> &ProjectionKernel {
        &self.kernels[layer][projection]
    }

    pub fn classifier_weights(&self) -> &[f64] {
        &self.classifier_weights
    }

    pub fn classifier_bias(&self) -> &[f64] {
        &self.classifier_bias
    }

    fn check_input(&self, image: &FeatureMap) -> Result<()> {
        if image.height() != self.config.input_height || image.width() != self.config.input_width {
            return Err(Error::Shape(format!(
                "{}x{} image does not match configured {}x{} input",
                image.height(),
                image.width(),
                self.config.input_height,
                self.config.input_width
            )));
        }
        Ok(())
    }

    fn wiring(&self, layer: usize) -> &[usize] {
        self.config.layers[layer]
            .wiring
            .as_ref()
            .expect("built models carry resolved wiring")
    }

    /// Full forward pass, retaining every stage for backpropagation.
    pub fn forward(&self, image: &FeatureMap) -> Result<ForwardTrace> {
        self.check_input(image)?;
        let mut layers: Vec<LayerTrace> = Vec::with_capacity(self.config.layers.len());
        for (i, layer) in self.config.layers.iter().enumerate() {
            let trace = {
                let inputs: &[FeatureMap] = if i == 0 {
                    std::slice::from_ref(image)
                } else {
                    &layers[i - 1].post
                };
                let wiring = self.wiring(i);
                let mut pre = Vec::with_capacity(layer.num_projections);
                let mut rect = Vec::with_capacity(layer.num_projections);
                let mut post = Vec::with_capacity(layer.num_projections);
                let mut sources = Vec::with_capacity(layer.num_projections);
                for j in 0..layer.num_projections {
                    let y = project(&inputs[wiring[j]], &self.kernels[i][j])?;
                    let r = avr(&y);
                    let (x, srcs) = smr_with_sources(&r, SMR_WINDOW)?;
                    pre.push(y);
                    rect.push(r);
                    post.push(x);
                    sources.push(srcs);
                }
                LayerTrace {
                    pre,
                    rect,
                    post,
                    sources,
                }
            };
            layers.push(trace);
        }
        let features: Vec<f64> = layers
            .last()
            .expect("config has at least one layer")
            .post
            .iter()
            .map(FeatureMap::mean)
            .collect();
        let mut logits = vec![0.0; self.config.num_classes];
        for (c, logit) in logits.iter_mut().enumerate() {
            let row = &self.classifier_weights[c * features.len()..(c + 1) * features.len()];
            let mut acc = self.classifier_bias[c];
            for (w, f) in row.iter().zip(&features) {
                acc += w * f;
            }
            *logit = acc;
        }
        let probabilities = softmax(&logits);
        debug_assert!((probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        Ok(ForwardTrace {
            input: image.clone(),
            layers,
            features,
            logits,
            probabilities,
        })
    }

    /// The pooled-feature stage of the forward pass, without retaining
    /// intermediate maps.
    pub fn extract_features(&self, image: &FeatureMap) -> Result<Vec<f64>> {
        self.check_input(image)?;
        let mut current: Vec<FeatureMap> = vec![image.clone()];
        for (i, layer) in self.config.layers.iter().enumerate() {
            let wiring = self.wiring(i);
            let mut next = Vec::with_capacity(layer.num_projections);
            for j in 0..layer.num_projections {
                let y = project(&current[wiring[j]], &self.kernels[i][j])?;
                next.push(smr(&avr(&y), SMR_WINDOW)?);
            }
            current = next;
        }
        Ok(current.iter().map(FeatureMap::mean).collect())
    }

    /// Class probabilities for one image.
    pub fn probabilities(&self, image: &FeatureMap) -> Result<Vec<f64>> {
        let features = self.extract_features(image)?;
        softmax_classify(
            &features,
            &self.classifier_weights,
            &self.classifier_bias,
        )
    }

    /// Predicted class (argmax probability, ties to the lowest index).
    pub fn predict(&self, image: &FeatureMap) -> Result<usize> {
        let probs = self.probabilities(image)?;
        let mut best = 0;
        for (c, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = c;
            }
        }
        Ok(best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::LayerSpec;
    use crate::test_support::random_map;

    fn toy_config(seed: u64) -> ModelConfig {
        ModelConfig {
            layers: vec![LayerSpec::new(2, 9), LayerSpec::new(3, 9)],
            num_classes: 3,
            seed,
            input_height: 8,
            input_width: 8,
        }
    }

    #[test]
    fn paper_default_counts() {
        let model = build_model(&ModelConfig::paper_default(1)).unwrap();
        assert_eq!(model.projection_parameter_count(), 4096);
        assert_eq!(model.classifier_parameter_count(), 10 * 1025);
        assert_eq!(model.feature_dim(), 1024);
    }

    #[test]
    fn single_layer_projection_parameter_count() {
        let cfg = ModelConfig {
            layers: vec![LayerSpec::new(4, 9)],
            num_classes: 2,
            seed: 3,
            input_height: 6,
            input_width: 6,
        };
        let model = build_model(&cfg).unwrap();
        assert_eq!(model.projection_parameter_count(), 8);
    }

    #[test]
    fn same_seed_builds_identical_models() {
        let a = build_model(&toy_config(99)).unwrap();
        let b = build_model(&toy_config(99)).unwrap();
        assert_eq!(a, b);
        let c = build_model(&toy_config(100)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn wiring_is_resolved_and_valid() {
        let model = build_model(&toy_config(5)).unwrap();
        let w0 = model.config.layers[0].wiring.as_ref().unwrap();
        assert!(w0.iter().all(|&k| k == 0));
        let w1 = model.config.layers[1].wiring.as_ref().unwrap();
        assert_eq!(w1.len(), 3);
        assert!(w1.iter().all(|&k| k < 2));
    }

    #[test]
    fn zero_image_yields_bias_softmax() {
        let mut model = build_model(&toy_config(7)).unwrap();
        model.classifier_bias = vec![0.1, 0.5, -0.2];
        let trace = model.forward(&FeatureMap::zeros(8, 8)).unwrap();
        assert!(trace.features().iter().all(|&f| f == 0.0));
        let expected = softmax(&model.classifier_bias);
        assert_eq!(trace.probabilities(), &expected[..]);
    }

    #[test]
    fn delta_kernels_reduce_to_median_of_input() {
        // With identity projections everywhere the network output per map is
        // repeated smr of the (nonnegative) input; with one layer the pooled
        // feature is exactly mean(smr(input)).
        let cfg = ModelConfig {
            layers: vec![LayerSpec::new(2, 9)],
            num_classes: 2,
            seed: 11,
            input_height: 6,
            input_width: 6,
        };
        let mut model = build_model(&cfg).unwrap();
        for kernel in &mut model.kernels[0] {
            for k in &mut kernel.coefficients {
                *k = 0.0;
            }
            kernel.coefficients[4] = 1.0;
        }
        let mut rng = crate::rng::child_rng(12, 0, 0);
        let img = {
            let m = random_map(&mut rng, 6, 6);
            FeatureMap::new(6, 6, m.values().iter().map(|v| v.abs()).collect()).unwrap()
        };
        let trace = model.forward(&img).unwrap();
        let expected = smr(&img, SMR_WINDOW).unwrap().mean();
        for &f in trace.features() {
            assert_eq!(f, expected);
        }
    }

    #[test]
    fn probabilities_sum_to_one_on_random_model() {
        let model = build_model(&toy_config(13)).unwrap();
        let mut rng = crate::rng::child_rng(14, 0, 0);
        for _ in 0..5 {
            let img = random_map(&mut rng, 8, 8);
            let trace = model.forward(&img).unwrap();
            let total: f64 = trace.probabilities().iter().sum();
            assert!((total - 1.0).abs() < 1e-10);
            assert!(trace.probabilities().iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn pooled_features_are_nonnegative_and_match_last_layer_count() {
        let model = build_model(&toy_config(15)).unwrap();
        let mut rng = crate::rng::child_rng(16, 0, 0);
        let img = random_map(&mut rng, 8, 8);
        let features = model.extract_features(&img).unwrap();
        assert_eq!(features.len(), 3);
        assert!(features.iter().all(|&f| f >= 0.0));
    }

    #[test]
    fn forward_and_extract_features_agree() {
        let model = build_model(&toy_config(17)).unwrap();
        let mut rng = crate::rng::child_rng(18, 0, 0);
        let img = random_map(&mut rng, 8, 8);
        let a = model.forward(&img).unwrap().features().to_vec();
        let b = model.extract_features(&img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_is_deterministic() {
        let model = build_model(&toy_config(19)).unwrap();
        let mut rng = crate::rng::child_rng(20, 0, 0);
        let img = random_map(&mut rng, 8, 8);
        let a = model.forward(&img).unwrap();
        let b = model.forward(&img).unwrap();
        assert_eq!(a.probabilities(), b.probabilities());
        assert_eq!(a.features(), b.features());
    }

    #[test]
    fn negating_a_kernel_leaves_output_unchanged() {
        // |M x| is invariant to the sign of M, so flipping one kernel's
        // coefficients must not change any post-nonlinearity map.
        let model = build_model(&toy_config(21)).unwrap();
        let mut flipped = model.clone();
        for k in &mut flipped.kernels[0][1].coefficients {
            *k = -*k;
        }
        let mut rng = crate::rng::child_rng(22, 0, 0);
        let img = random_map(&mut rng, 8, 8);
        let a = model.forward(&img).unwrap();
        let b = flipped.forward(&img).unwrap();
        assert_eq!(a.probabilities(), b.probabilities());
        assert_eq!(a.layers[0].post[1], b.layers[0].post[1]);
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let model = build_model(&toy_config(23)).unwrap();
        assert!(matches!(
            model.forward(&FeatureMap::zeros(7, 8)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn softmax_classify_uniform_at_zero() {
        let probs = softmax_classify(&[0.0; 4], &[0.0; 20], &[0.0; 5]).unwrap();
        for &p in &probs {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let probs = softmax(&[1000.0, 1000.0, 1000.0]);
        for &p in &probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_of_log_weights() {
        let probs = softmax(&[1.0f64.ln(), 2.0f64.ln(), 7.0f64.ln()]);
        assert!((probs[0] - 0.1).abs() < 1e-12);
        assert!((probs[1] - 0.2).abs() < 1e-12);
        assert!((probs[2] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn softmax_classify_rejects_dimension_mismatch() {
        assert!(matches!(
            softmax_classify(&[0.0; 4], &[0.0; 19], &[0.0; 5]),
            Err(Error::Shape(_))
        ));
    }
}
