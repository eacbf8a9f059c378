//! Fully-connected feedforward ReLU networks.
//!
//! Layers are indexed from 0: layer 0 is the input, layer `num_layers() - 1`
//! the output. `weights[l]` maps layer `l` to layer `l + 1`; row `i` holds the
//! incoming weights of neuron `i` in layer `l + 1`. `biases[l]` belongs to
//! layer `l + 1`. Hidden layers always apply ReLU; the output layer applies
//! [`Activation`] from the network.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => relu(v),
        }
    }
}

#[inline]
pub fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkFile", into = "NetworkFile")]
pub struct Network {
    layer_sizes: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    output_activation: Activation,
}

/// Pre-activations and activations of every layer for a single input.
///
/// For the input layer both vectors equal the input.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub preactivations: Vec<Vec<f64>>,
    pub activations: Vec<Vec<f64>>,
}

impl LayerTrace {
    pub fn output(&self) -> &[f64] {
        self.activations
            .last()
            .expect("trace has at least two layers")
    }
}

impl Network {
    pub fn new(
        weights: Vec<Matrix>,
        biases: Vec<Vec<f64>>,
        output_activation: Activation,
    ) -> Result<Self> {
        let first = weights
            .first()
            .ok_or_else(|| Error::Validation("network needs at least one weight matrix".into()))?;
        let mut layer_sizes = vec![first.cols()];
        layer_sizes.extend(weights.iter().map(Matrix::rows));
        let net = Self {
            layer_sizes,
            weights,
            biases,
            output_activation,
        };
        net.validate()?;
        Ok(net)
    }

    /// Checks shape consistency and finiteness.
    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Validation(
                "network needs at least two layers".into(),
            ));
        }
        if let Some(pos) = self.layer_sizes.iter().position(|&n| n == 0) {
            return Err(Error::Validation(format!("layer {pos} has zero width")));
        }
        if self.weights.len() != self.layer_sizes.len() - 1 {
            return Err(Error::Validation(format!(
                "{} weight matrices for {} layers",
                self.weights.len(),
                self.layer_sizes.len()
            )));
        }
        if self.biases.len() != self.weights.len() {
            return Err(Error::Validation(format!(
                "{} bias vectors for {} weight matrices",
                self.biases.len(),
                self.weights.len()
            )));
        }
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            if w.rows() != n_out || w.cols() != n_in {
                return Err(Error::Validation(format!(
                    "layer {l} weights are {}x{}, expected {n_out}x{n_in}",
                    w.rows(),
                    w.cols()
                )));
            }
            if b.len() != n_out {
                return Err(Error::Validation(format!(
                    "layer {l} bias has length {}, expected {n_out}",
                    b.len()
                )));
            }
            if !w.is_finite() || b.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "layer {l} contains non-finite parameters"
                )));
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len()
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Indices of the hidden layers, `1..num_layers - 1`.
    pub fn hidden_layers(&self) -> std::ops::Range<usize> {
        1..self.num_layers() - 1
    }

    pub fn hidden_neuron_count(&self) -> usize {
        self.layer_sizes[self.hidden_layers()].iter().sum()
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn output_activation(&self) -> Activation {
        self.output_activation
    }

    /// Activation applied to layer `layer` (ReLU on hidden layers).
    pub fn activation_of(&self, layer: usize) -> Activation {
        if layer + 1 == self.num_layers() {
            self.output_activation
        } else {
            Activation::Relu
        }
    }

    /// Mutable access for in-crate transformations that keep shapes fixed.
    pub(crate) fn params_mut(&mut self) -> (&mut [Matrix], &mut [Vec<f64>]) {
        (&mut self.weights, &mut self.biases)
    }

    pub(crate) fn into_parts(self) -> (Vec<Matrix>, Vec<Vec<f64>>, Activation) {
        (self.weights, self.biases, self.output_activation)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_size() {
            return Err(Error::shape("network input", self.input_size(), x.len()));
        }
        Ok(())
    }

    /// Affine map into layer `l + 1` followed by that layer's activation.
    fn step(&self, l: usize, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut h = self.weights[l].mul_vec(z);
        for (hi, bi) in h.iter_mut().zip(&self.biases[l]) {
            *hi += bi;
        }
        let act = self.activation_of(l + 1);
        let z = h.iter().map(|&v| act.apply(v)).collect();
        (h, z)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut z = x.to_vec();
        for l in 0..self.weights.len() {
            z = self.step(l, &z).1;
        }
        Ok(z)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<LayerTrace> {
        self.check_input(x)?;
        let mut preactivations = vec![x.to_vec()];
        let mut activations = vec![x.to_vec()];
        for l in 0..self.weights.len() {
            let (h, z) = self.step(l, &activations[l]);
            preactivations.push(h);
            activations.push(z);
        }
        Ok(LayerTrace {
            preactivations,
            activations,
        })
    }

    /// Argmax of the output, ties resolved to the lowest index.
    pub fn classify(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(x)?))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&NetworkFile::from(self)).expect("network serializes")
    }

    pub fn from_json(text: &str, source_name: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Err(Error::Parse {
                source_name: source_name.into(),
                message: "empty network file".into(),
            });
        }
        let file: NetworkFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            source_name: source_name.into(),
            message: format!("line {} column {}: {e}", e.line(), e.column()),
        })?;
        file.try_into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }
}

/// Index of the largest entry; the first one wins on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// On-disk JSON layout of a network.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    pub layer_sizes: Vec<usize>,
    pub layers: Vec<LayerFile>,
    #[serde(default)]
    pub output_activation: Activation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerFile {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl From<Network> for NetworkFile {
    fn from(net: Network) -> Self {
        NetworkFile::from(&net)
    }
}

impl From<&Network> for NetworkFile {
    fn from(net: &Network) -> Self {
        NetworkFile {
            layer_sizes: net.layer_sizes.clone(),
            layers: net
                .weights
                .iter()
                .zip(&net.biases)
                .map(|(w, b)| LayerFile {
                    weights: w.to_rows(),
                    bias: b.clone(),
                })
                .collect(),
            output_activation: net.output_activation,
        }
    }
}

impl TryFrom<NetworkFile> for Network {
    type Error = Error;

    fn try_from(file: NetworkFile) -> Result<Self> {
        if file.layers.len() + 1 != file.layer_sizes.len() {
            return Err(Error::Validation(format!(
                "{} layers declared in layer_sizes but {} weight layers given",
                file.layer_sizes.len(),
                file.layers.len()
            )));
        }
        let mut weights = Vec::with_capacity(file.layers.len());
        let mut biases = Vec::with_capacity(file.layers.len());
        for (l, layer) in file.layers.into_iter().enumerate() {
            let (n_in, n_out) = (file.layer_sizes[l], file.layer_sizes[l + 1]);
            if layer.weights.len() != n_out {
                return Err(Error::Validation(format!(
                    "layer {l}: {} weight rows, expected {n_out}",
                    layer.weights.len()
                )));
            }
            if let Some(i) = layer.weights.iter().position(|r| r.len() != n_in) {
                return Err(Error::Validation(format!(
                    "layer {l} row {i}: {} weights, expected {n_in}",
                    layer.weights[i].len()
                )));
            }
            weights.push(Matrix::from_rows(&layer.weights)?);
            biases.push(layer.bias);
        }
        let net = Network {
            layer_sizes: file.layer_sizes,
            weights,
            biases,
            output_activation: file.output_activation,
        };
        net.validate()?;
        Ok(net)
    }
}

/// A local robustness query: does the network's label stay constant on the
/// box `[input - delta, input + delta]`?
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessQuery {
    pub input: Vec<f64>,
    pub delta: Vec<f64>,
}

impl RobustnessQuery {
    pub fn new(input: Vec<f64>, delta: Vec<f64>) -> Result<Self> {
        if input.len() != delta.len() {
            return Err(Error::shape("perturbation", input.len(), delta.len()));
        }
        if let Some(i) = delta.iter().position(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::Argument(format!(
                "perturbation entry {i} is {} (must be finite and >= 0)",
                delta[i]
            )));
        }
        Ok(Self { input, delta })
    }

    /// Same radius on every coordinate.
    pub fn uniform(input: Vec<f64>, radius: f64) -> Result<Self> {
        let delta = vec![radius; input.len()];
        Self::new(input, delta)
    }

    pub fn lower(&self) -> Vec<f64> {
        self.input
            .iter()
            .zip(&self.delta)
            .map(|(x, d)| x - d)
            .collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.input
            .iter()
            .zip(&self.delta)
            .map(|(x, d)| x + d)
            .collect()
    }
}
