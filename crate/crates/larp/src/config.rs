use serde::de::{self, Deserializer};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::kernel::kernel_side;

/// Architecture of one projection ensemble layer.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    /// Number of projections in the ensemble.
    pub num_projections: usize,
    /// Kernel support (taps), a perfect square with odd side.
    pub support: usize,
    /// Input-map index feeding each projection. `None` means "derive from
    /// the model seed when the model is built".
    #[serde(default)]
    pub wiring: Option<Vec<usize>>,
}

impl LayerSpec {
    pub fn new(num_projections: usize, support: usize) -> Self {
        LayerSpec {
            num_projections,
            support,
            wiring: None,
        }
    }
}

/// Full architecture description of a model.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
    #[serde(deserialize_with = "deserialize_seed")]
    pub seed: u64,
    pub input_height: usize,
    pub input_width: usize,
}

impl ModelConfig {
    /// The default architecture: three ensembles of 512/512/1024 projections
    /// with support 25 on 28x28 single-channel input, 10 classes.
    pub fn paper_default(seed: u64) -> Self {
        ModelConfig {
            layers: vec![
                LayerSpec::new(512, 25),
                LayerSpec::new(512, 25),
                LayerSpec::new(1024, 25),
            ],
            num_classes: 10,
            seed,
            input_height: 28,
            input_width: 28,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("at least one layer is required".to_string()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".to_string()));
        }
        if self.input_height == 0 || self.input_width == 0 {
            return Err(Error::Config("input dimensions must be positive".to_string()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.num_projections == 0 {
                return Err(Error::Config(format!(
                    "layer {i}: num_projections must be positive"
                )));
            }
            let side = kernel_side(layer.support)?;
            if side % 2 == 0 {
                return Err(Error::Config(format!(
                    "layer {i}: kernel side {side} must be odd"
                )));
            }
            if self.input_height < side || self.input_width < side {
                return Err(Error::Shape(format!(
                    "layer {i}: {}x{} input smaller than {side}x{side} kernel",
                    self.input_height, self.input_width
                )));
            }
            if let Some(wiring) = &layer.wiring {
                if wiring.len() != layer.num_projections {
                    return Err(Error::Config(format!(
                        "layer {i}: wiring has {} entries, expected {}",
                        wiring.len(),
                        layer.num_projections
                    )));
                }
                let prev_maps = if i == 0 {
                    1
                } else {
                    self.layers[i - 1].num_projections
                };
                if let Some(&bad) = wiring.iter().find(|&&w| w >= prev_maps) {
                    return Err(Error::Config(format!(
                        "layer {i}: wiring index {bad} out of range for {prev_maps} input maps"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of layers.
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Trainable distribution parameters: two per projection.
    pub fn projection_parameter_count(&self) -> usize {
        self.layers.iter().map(|l| 2 * l.num_projections).sum()
    }

    /// Feature vector length: one pooled value per last-layer map.
    pub fn feature_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.num_projections)
    }

    /// Classifier weights plus biases.
    pub fn classifier_parameter_count(&self) -> usize {
        self.num_classes * (self.feature_dim() + 1)
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.projection_parameter_count() + self.classifier_parameter_count()
    }
}

/// Accepts a seed as a TOML integer or, for values above `i64::MAX`, as a
/// decimal string.
fn deserialize_seed<'de, D>(deserializer: D) -> std::result::Result<u64, D::Error>
where
    D: Deserializer<'de>,
{
    struct SeedVisitor;

    impl de::Visitor<'_> for SeedVisitor {
        type Value = u64;

        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            f.write_str("a non-negative integer or a decimal string")
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<u64, E> {
            Ok(v)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<u64, E> {
            u64::try_from(v).map_err(|_| E::custom("seed must be non-negative"))
        }

        fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<u64, E> {
            v.parse::<u64>()
                .map_err(|_| E::custom(format!("invalid seed string {v:?}")))
        }
    }

    deserializer.deserialize_any(SeedVisitor)
}
