//! Layered random projection (LaRP) image classification.
//!
//! A model alternates two kinds of layer: localized random projection
//! ensembles, where each projection slides a small square kernel over one
//! input map (the sparse form of a banded Toeplitz operator), and a
//! nonlinearity pair of absolute-value rectification followed by a 3x3
//! sliding-window median. Kernel coefficients are uniform draws from a
//! learned interval `[a, b]`; the interval is parameterized as a midpoint
//! and log-halfwidth, and the uniform samples are drawn once per kernel and
//! frozen, so the whole network is a deterministic, (sub)differentiable
//! function of two parameters per projection. The last layer's maps are
//! mean-pooled into the feature vector feeding a linear softmax head, and
//! everything trains jointly by scaled conjugate gradient on cross-entropy.
//!
//! Everything a model does is a pure function of `(config, seed, input)`:
//! wiring, kernel noise, splits, and subsamples all derive from seeded
//! ChaCha streams, and batch reductions combine in a fixed order, so runs
//! reproduce bit-for-bit.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod kernel;
pub mod lrpe;
pub mod map;
pub mod model_file;
pub mod network;
pub mod nonl;
pub mod rng;
pub mod training;
pub mod verify;

pub use config::{LayerSpec, ModelConfig};
pub use data::LabeledDataset;
pub use error::{Error, Result};
pub use kernel::{derive_bounds, KernelDistribution, ProjectionKernel};
pub use map::FeatureMap;
pub use network::{build_model, softmax_classify, ForwardTrace, Model, SMR_WINDOW};
pub use training::{
    backward, cross_entropy, evaluate, finite_diff_gradient, scg_train, EvalReport, ScgConfig,
    Termination,
};
