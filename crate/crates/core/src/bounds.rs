//! Error bounds for an abstraction, with and without input perturbation.
//!
//! The bounds hold for inputs of the set the abstraction was clustered on.
//! Propagation uses the original network's weight magnitudes: once a cluster
//! is merged, each original neuron `m` is stood in for by its representative,
//! and the next layer sees `sum_m w_m (z_rep - z_m)`. Summing the merged
//! weights first would let opposite-sign weights cancel and under-estimate
//! that difference.

use serde::{Deserialize, Serialize};

use crate::abstraction::AbstractionRecord;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::verifier::Verdict;

/// Per layer, a non-negative bound on `|z_abstract(rep(i)) - z_original(i)|`
/// for every original neuron `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBounds {
    pub layers: Vec<Vec<f64>>,
}

impl ErrorBounds {
    pub fn output(&self) -> &[f64] {
        self.layers.last().expect("at least two layers")
    }
}

fn check_pair(original: &Network, record: &AbstractionRecord) -> Result<()> {
    if original.layer_sizes() != record.original_layer_sizes() {
        return Err(Error::Validation(format!(
            "record was built from a network with layers {:?}, got {:?}",
            record.original_layer_sizes(),
            original.layer_sizes()
        )));
    }
    Ok(())
}

/// Radius of every original neuron per layer (zero outside hidden layers).
fn original_epsilons(original: &Network, record: &AbstractionRecord) -> Vec<Vec<f64>> {
    let mut eps: Vec<Vec<f64>> = original
        .layer_sizes()
        .iter()
        .map(|&n| vec![0.0; n])
        .collect();
    for la in &record.layers {
        eps[la.clustering.layer] = la.clustering.epsilon.clone();
    }
    eps
}

/// `E(0) = 0`, `E(l+1) = |W(l)| E(l) + eps(l+1)`.
pub fn clustering_error(original: &Network, record: &AbstractionRecord) -> Result<ErrorBounds> {
    check_pair(original, record)?;
    let eps = original_epsilons(original, record);
    let mut layers = vec![vec![0.0; original.input_size()]];
    for (l, w) in original.weights().iter().enumerate() {
        let mut next = w.abs().mul_vec(&layers[l]);
        for (e, add) in next.iter_mut().zip(&eps[l + 1]) {
            *e += add;
        }
        layers.push(next);
    }
    Ok(ErrorBounds { layers })
}

/// `|W~(L-1)| ... |W~(1)| delta`: how far the abstract output can move over
/// the perturbation box.
pub fn perturbation_spread(record: &AbstractionRecord, delta: &[f64]) -> Result<Vec<f64>> {
    let net = &record.abstract_net;
    if delta.len() != net.input_size() {
        return Err(Error::shape("perturbation", net.input_size(), delta.len()));
    }
    if delta.iter().any(|d| d.is_nan() || *d < 0.0) {
        return Err(Error::Argument("perturbation must be non-negative".into()));
    }
    Ok(net
        .weights()
        .iter()
        .fold(delta.to_vec(), |v, w| w.abs().mul_vec(&v)))
}

/// Bound on `|D~(x') - D(x)|` for `x` in the clustering set and `x'` in the
/// box around it.
pub fn total_error(
    original: &Network,
    record: &AbstractionRecord,
    delta: &[f64],
) -> Result<Vec<f64>> {
    let errors = clustering_error(original, record)?;
    let mut spread = perturbation_spread(record, delta)?;
    for (s, e) in spread.iter_mut().zip(errors.output()) {
        *s += e;
    }
    Ok(spread)
}

/// Robust if some output's lower bound `D~_i(x) - T_i` beats every other
/// output's upper bound `D~_j(x) + T_j`, with `T` the total error.
pub fn naive_robust_check(
    original: &Network,
    record: &AbstractionRecord,
    x: &[f64],
    delta: &[f64],
) -> Result<Verdict> {
    let total = total_error(original, record, delta)?;
    let out = record.abstract_net.forward(x)?;
    for i in 0..out.len() {
        let lower = out[i] - total[i];
        let beats_all = (0..out.len())
            .filter(|&j| j != i)
            .all(|j| lower > out[j] + total[j]);
        if beats_all {
            return Ok(Verdict::Robust { label: i });
        }
    }
    Ok(Verdict::Unknown)
}
