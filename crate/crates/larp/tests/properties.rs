//! Property tests for the numeric invariants that hold for arbitrary
//! finite inputs.

mod common;

use larp::lrpe::{dense_oracle, project, project_backward};
use larp::nonl::{avr, smr, smr_backward};
use larp::rng::child_rng;
use larp::training::{apply_parameters, model_to_parameters};
use larp::{
    build_model, derive_bounds, FeatureMap, KernelDistribution, LayerSpec, ModelConfig,
    ProjectionKernel,
};
use proptest::prelude::*;

fn finite_map(height: usize, width: usize) -> impl Strategy<Value = FeatureMap> {
    prop::collection::vec(-10.0f64..10.0, height * width)
        .prop_map(move |values| FeatureMap::new(height, width, values).unwrap())
}

fn kernel_9() -> impl Strategy<Value = ProjectionKernel> {
    (
        -2.0f64..2.0,
        -3.0f64..1.0,
        prop::collection::vec(0.0f64..0.999_999, 9),
    )
        .prop_map(|(m, rho, noise)| {
            ProjectionKernel::with_noise(&KernelDistribution::new(m, rho), 9, noise).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bounds_are_ordered_and_centered(m in -100.0f64..100.0, rho in -30.0f64..5.0) {
        let (a, b) = derive_bounds(&KernelDistribution::new(m, rho)).unwrap();
        prop_assert!(a < b);
        let mid = 0.5 * (a + b);
        prop_assert!((mid - m).abs() <= 1e-12 * m.abs().max(1.0));
    }

    #[test]
    fn kernel_coefficients_stay_in_bounds(
        m in -5.0f64..5.0,
        rho in -5.0f64..2.0,
        noise in prop::collection::vec(0.0f64..0.999_999, 25),
    ) {
        let dist = KernelDistribution::new(m, rho);
        let (a, b) = derive_bounds(&dist).unwrap();
        let kernel = ProjectionKernel::with_noise(&dist, 25, noise).unwrap();
        for &k in kernel.coefficients() {
            prop_assert!(k >= a && k < b);
            prop_assert!(k.is_finite());
        }
    }

    #[test]
    fn projection_is_linear_and_finite(
        x in finite_map(6, 7),
        z in finite_map(6, 7),
        kernel in kernel_9(),
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
    ) {
        let mixed = FeatureMap::new(
            6,
            7,
            x.values()
                .iter()
                .zip(z.values())
                .map(|(a, b)| alpha * a + beta * b)
                .collect(),
        )
        .unwrap();
        let lhs = project(&mixed, &kernel).unwrap();
        prop_assert!(lhs.all_finite());
        let px = project(&x, &kernel).unwrap();
        let pz = project(&z, &kernel).unwrap();
        for ((l, a), b) in lhs.values().iter().zip(px.values()).zip(pz.values()) {
            let rhs = alpha * a + beta * b;
            let denom = l.abs().max(rhs.abs()).max(1e-10);
            prop_assert!((l - rhs).abs() / denom <= 1e-10);
        }
    }

    #[test]
    fn projection_matches_dense_operator(x in finite_map(7, 7), kernel in kernel_9()) {
        let fast = project(&x, &kernel).unwrap();
        let slow = dense_oracle(&kernel, 7, 7).unwrap().matvec(x.values()).unwrap();
        for (a, b) in fast.values().iter().zip(&slow) {
            let denom = a.abs().max(b.abs()).max(1e-30);
            prop_assert!((a - b).abs() / denom <= 1e-12);
        }
    }

    #[test]
    fn adjoint_identity(x in finite_map(6, 6), g in finite_map(6, 6), kernel in kernel_9()) {
        let px = project(&x, &kernel).unwrap();
        let (gx, _) = project_backward(&x, &kernel, &g).unwrap();
        let lhs: f64 = px.values().iter().zip(g.values()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.values().iter().zip(gx.values()).map(|(a, b)| a * b).sum();
        let denom = lhs.abs().max(rhs.abs()).max(1e-10);
        prop_assert!((lhs - rhs).abs() / denom <= 1e-10);
    }

    #[test]
    fn nonlinearity_pipeline_invariants(x in finite_map(8, 5)) {
        let rect = avr(&x);
        prop_assert!(rect.values().iter().all(|&v| v >= 0.0));
        prop_assert!(rect.all_finite());
        let post = smr(&rect, 3).unwrap();
        prop_assert!(post.values().iter().all(|&v| v >= 0.0));
        prop_assert!(post.all_finite());
        // sign-flip invariance of the rectify+median pair
        let neg = FeatureMap::new(8, 5, x.values().iter().map(|v| -v).collect()).unwrap();
        let post_neg = smr(&avr(&neg), 3).unwrap();
        prop_assert_eq!(post, post_neg);
    }

    #[test]
    fn median_gradient_mass_is_conserved(x in finite_map(6, 6), g in finite_map(6, 6)) {
        let grad = smr_backward(&x, &g, 3).unwrap();
        let routed: f64 = grad.values().iter().sum();
        let upstream: f64 = g.values().iter().sum();
        prop_assert!((routed - upstream).abs() <= 1e-12 * upstream.abs().max(1.0));
    }

    #[test]
    fn parameter_vector_round_trips(seed in 0u64..1_000, scale in 0.01f64..2.0) {
        let config = ModelConfig {
            layers: vec![LayerSpec::new(2, 9), LayerSpec::new(2, 9)],
            num_classes: 3,
            seed,
            input_height: 6,
            input_width: 6,
        };
        let mut model = build_model(&config).unwrap();
        let mut rng = child_rng(seed, 9, 9);
        let params: Vec<f64> = model_to_parameters(&model)
            .iter()
            .map(|&p| p + scale * (larp::rng::unit_f64(&mut rng) - 0.5))
            .collect();
        apply_parameters(&mut model, &params).unwrap();
        let recovered = model_to_parameters(&model);
        prop_assert_eq!(recovered, params);
    }

    #[test]
    fn feature_count_tracks_last_layer(last in 1usize..6, first in 1usize..4, seed in 0u64..100) {
        let config = ModelConfig {
            layers: vec![LayerSpec::new(first, 9), LayerSpec::new(last, 9)],
            num_classes: 2,
            seed,
            input_height: 6,
            input_width: 6,
        };
        let model = build_model(&config).unwrap();
        let image = FeatureMap::zeros(6, 6);
        prop_assert_eq!(model.extract_features(&image).unwrap().len(), last);
    }
}
