//! Interval bound propagation (IBP) for local robustness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::network::{Activation, Network, RobustnessQuery};

/// Outcome of a robustness check. `Robust` is a proof; `Unknown` is not a
/// disproof. `NotRobustWitness` only comes from the sampling falsifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Robust {
        label: usize,
    },
    NotRobustWitness {
        label: usize,
        witness_label: usize,
        witness: Vec<f64>,
    },
    Unknown,
}

impl Verdict {
    pub fn is_robust(&self) -> bool {
        matches!(self, Verdict::Robust { .. })
    }
}

/// Lower and upper bound vectors for every layer (post-activation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBounds {
    pub lower: Vec<Vec<f64>>,
    pub upper: Vec<Vec<f64>>,
}

impl LayerBounds {
    pub fn output_lower(&self) -> &[f64] {
        self.lower.last().expect("bounds are non-empty")
    }

    pub fn output_upper(&self) -> &[f64] {
        self.upper.last().expect("bounds are non-empty")
    }
}

/// `W+ upper + W- lower + b` and `W+ lower + W- upper + b`, then the
/// activation.
pub(crate) fn interval_affine(
    w: &Matrix,
    b: &[f64],
    lower: &[f64],
    upper: &[f64],
    act: Activation,
) -> (Vec<f64>, Vec<f64>) {
    let mut lo = Vec::with_capacity(w.rows());
    let mut hi = Vec::with_capacity(w.rows());
    for (r, &bias) in b.iter().enumerate() {
        let row = w.row(r);
        let u: f64 = row
            .iter()
            .enumerate()
            .map(|(j, &wj)| {
                if wj > 0.0 {
                    wj * upper[j]
                } else {
                    wj * lower[j]
                }
            })
            .sum();
        let l: f64 = row
            .iter()
            .enumerate()
            .map(|(j, &wj)| {
                if wj > 0.0 {
                    wj * lower[j]
                } else {
                    wj * upper[j]
                }
            })
            .sum();
        lo.push(act.apply(l + bias));
        hi.push(act.apply(u + bias));
    }
    (lo, hi)
}

pub fn ibp_bounds(net: &Network, x: &[f64], delta: &[f64]) -> Result<LayerBounds> {
    if x.len() != net.input_size() {
        return Err(Error::shape("query input", net.input_size(), x.len()));
    }
    if delta.len() != x.len() {
        return Err(Error::shape("query perturbation", x.len(), delta.len()));
    }
    let mut lower = vec![x.iter().zip(delta).map(|(v, d)| v - d).collect::<Vec<_>>()];
    let mut upper = vec![x.iter().zip(delta).map(|(v, d)| v + d).collect::<Vec<_>>()];
    for (l, (w, b)) in net.weights().iter().zip(net.biases()).enumerate() {
        let (lo, hi) = interval_affine(w, b, &lower[l], &upper[l], net.activation_of(l + 1));
        lower.push(lo);
        upper.push(hi);
    }
    Ok(LayerBounds { lower, upper })
}

/// Robust iff the target's lower bound strictly exceeds every other output's
/// upper bound.
pub fn check_robust(bounds: &LayerBounds, target: usize) -> Result<Verdict> {
    let lo = bounds.output_lower();
    let hi = bounds.output_upper();
    if target >= lo.len() {
        return Err(Error::Argument(format!(
            "target label {target} out of range for {} outputs",
            lo.len()
        )));
    }
    let robust = hi
        .iter()
        .enumerate()
        .all(|(j, &u)| j == target || lo[target] > u);
    Ok(if robust {
        Verdict::Robust { label: target }
    } else {
        Verdict::Unknown
    })
}

pub fn verify_query(net: &Network, query: &RobustnessQuery) -> Result<Verdict> {
    let target = net.classify(&query.input)?;
    let bounds = ibp_bounds(net, &query.input, &query.delta)?;
    check_robust(&bounds, target)
}

/// Uniform sample from the query box.
pub fn sample_box(query: &RobustnessQuery, rng: &mut impl Rng) -> Vec<f64> {
    query
        .input
        .iter()
        .zip(&query.delta)
        .map(|(&x, &d)| {
            if d > 0.0 {
                rng.gen_range(x - d..=x + d)
            } else {
                x
            }
        })
        .collect()
}

/// Looks for an input in the box that changes the label. Returns a
/// `NotRobustWitness` verdict on success.
pub fn falsify(
    net: &Network,
    query: &RobustnessQuery,
    samples: usize,
    seed: u64,
) -> Result<Option<Verdict>> {
    let label = net.classify(&query.input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..samples {
        let x = sample_box(query, &mut rng);
        let witness_label = net.classify(&x)?;
        if witness_label != label {
            return Ok(Some(Verdict::NotRobustWitness {
                label,
                witness_label,
                witness: x,
            }));
        }
    }
    Ok(None)
}
