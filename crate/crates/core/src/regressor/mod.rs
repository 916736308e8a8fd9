//! Function approximation for fitted Q-iteration.

mod adam;
pub mod io;
mod mlp;
mod tabular;

pub use adam::{Adam, AdamParams};
pub use mlp::{Dense, Gradients, QNetwork, PREDICT_CHUNK};
pub use tabular::TabularQ;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[serde(alias = "RELU", alias = "ReLU")]
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    #[serde(alias = "XAVIER", alias = "Xavier")]
    Xavier,
}

/// Architecture and training hyper-parameters of a [`QNetwork`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressorSpec {
    pub hidden_layers: Vec<usize>,
    pub budget_encoder_layers: Vec<usize>,
    /// Interval the budget input is rescaled from, normally the budget space.
    pub budget_range: [f64; 2],
    pub activation: Activation,
    pub init_scheme: InitScheme,
    pub learning_rate: f64,
    /// Coefficient of the L2 penalty `Σ‖W‖²` on weight matrices.
    pub weight_decay: f64,
    pub epochs: usize,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    /// Standardise each target channel before fitting.
    pub normalize: bool,
    pub adam: AdamParams,
    /// Loss above `divergence_factor` times the first epoch's loss aborts.
    pub divergence_factor: f64,
}

impl Default for RegressorSpec {
    fn default() -> Self {
        Self {
            hidden_layers: vec![64, 32],
            budget_encoder_layers: vec![3],
            budget_range: [0.0, 1.0],
            activation: Activation::Relu,
            init_scheme: InitScheme::Xavier,
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            epochs: 100,
            batch_size: None,
            normalize: true,
            adam: AdamParams::default(),
            divergence_factor: 1e6,
        }
    }
}

impl RegressorSpec {
    pub fn validate(&self) -> Result<()> {
        if self
            .hidden_layers
            .iter()
            .chain(&self.budget_encoder_layers)
            .any(|w| *w == 0)
        {
            return domain("layer widths must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return domain("learning rate must be positive");
        }
        if self.epochs == 0 {
            return domain("epochs must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return domain("weight decay must be non-negative");
        }
        if self.batch_size == Some(0) {
            return domain("batch size must be positive");
        }
        Ok(())
    }
}

/// Per-channel affine standardisation of targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Mean and population standard deviation per column; a degenerate
    /// column keeps unit scale.
    pub fn from_targets(targets: &ArrayView2<f64>) -> Self {
        let n = targets.nrows().max(1) as f64;
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for col in targets.columns() {
            let m = col.sum() / n;
            let var = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            let sd = var.sqrt();
            mean.push(m);
            std.push(if sd > 1e-12 * m.abs().max(1.0) {
                sd
            } else {
                1.0
            });
        }
        Self { mean, std }
    }

    pub fn encode(&self, c: usize, y: f64) -> f64 {
        (y - self.mean[c]) / self.std[c]
    }

    pub fn decode(&self, c: usize, z: f64) -> f64 {
        z * self.std[c] + self.mean[c]
    }

    pub fn encode_all(&self, targets: &ArrayView2<f64>) -> Array2<f64> {
        let mut out = targets.to_owned();
        for (c, mut col) in out.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|y| self.encode(c, y));
        }
        out
    }
}

/// Supervised data: one row per sample, with the action whose heads are
/// trained and one target column per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub states: Array2<f64>,
    pub budgets: Array1<f64>,
    pub actions: Vec<usize>,
    pub targets: Array2<f64>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn validate(&self, n_actions: usize, channels: usize) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return domain("no samples to fit");
        }
        if self.states.nrows() != n || self.targets.nrows() != n {
            return domain("samples have inconsistent row counts");
        }
        if self.targets.ncols() != channels {
            return domain("target columns differ from network channels");
        }
        if self.actions.iter().any(|a| *a >= n_actions) {
            return domain("action index out of range");
        }
        if self.targets.iter().any(|t| !t.is_finite()) {
            return domain("targets must be finite");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn normalisation_round_trip() {
        let t = array![[1.0, 5.0], [3.0, 5.0], [8.0, 5.0]];
        let n = Normalizer::from_targets(&t.view());
        assert_eq!(n.std[1], 1.0);
        let z = n.encode_all(&t.view());
        assert!(z.column(0).sum().abs() < 1e-12);
        for ((i, c), y) in t.indexed_iter() {
            assert!((n.decode(c, z[[i, c]]) - y).abs() < 1e-10);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(RegressorSpec::default().validate().is_ok());
        let bad = RegressorSpec {
            hidden_layers: vec![0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = RegressorSpec {
            epochs: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn spec_parses_table_names() {
        let s: RegressorSpec =
            serde_json::from_str(r#"{"activation":"RELU","init_scheme":"XAVIER"}"#).unwrap();
        assert_eq!(s.activation, Activation::Relu);
    }
}
