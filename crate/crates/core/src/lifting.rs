//! Lifting interval bounds from the abstract network back to the original,
//! and the end-to-end abstraction/verification pipeline.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::abstraction::{
    abstract_network, identify_clusters, reduction_rate, AbstractionRecord, ClusterCounts,
    EPSILON_SCOPE_NOTE,
};
use crate::clustering::EpsilonNorm;
use crate::data::{accuracy, InputSet, LabeledDataset};
use crate::error::{Error, Result};
use crate::network::{Network, RobustnessQuery};
use crate::verifier::{
    check_robust, ibp_bounds, interval_affine, verify_query, LayerBounds, Verdict,
};

/// Interval propagation through the abstract network where every abstract
/// neuron's interval is widened by its cluster radius before it feeds the
/// next layer.
pub fn lifted_bounds(record: &AbstractionRecord, x: &[f64], delta: &[f64]) -> Result<LayerBounds> {
    let net = &record.abstract_net;
    if x.len() != net.input_size() {
        return Err(Error::shape("query input", net.input_size(), x.len()));
    }
    if delta.len() != x.len() {
        return Err(Error::shape("query perturbation", x.len(), delta.len()));
    }
    let mut lower = vec![x.iter().zip(delta).map(|(v, d)| v - d).collect::<Vec<_>>()];
    let mut upper = vec![x.iter().zip(delta).map(|(v, d)| v + d).collect::<Vec<_>>()];
    for (l, (w, b)) in net.weights().iter().zip(net.biases()).enumerate() {
        let eps = &record.layer_epsilons[l];
        let lo: Vec<f64> = lower[l].iter().zip(eps).map(|(v, e)| v - e).collect();
        let hi: Vec<f64> = upper[l].iter().zip(eps).map(|(v, e)| v + e).collect();
        let (lo, hi) = interval_affine(w, b, &lo, &hi, net.activation_of(l + 1));
        lower.push(lo);
        upper.push(hi);
    }
    Ok(LayerBounds { lower, upper })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftOutcome {
    #[serde(flatten)]
    pub verdict: Verdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

/// Tries to certify the ORIGINAL network robust for `query` from the lifted
/// bounds. The target label is the abstract network's label at the query
/// point; if the original disagrees there, the outcome is `Unknown`.
pub fn lift_proof(
    original: &Network,
    record: &AbstractionRecord,
    query: &RobustnessQuery,
) -> Result<LiftOutcome> {
    let target = record.abstract_net.classify(&query.input)?;
    let original_label = original.classify(&query.input)?;
    if original_label != target {
        return Ok(LiftOutcome {
            verdict: Verdict::Unknown,
            diagnostic: Some(format!(
                "abstract network labels the query point {target}, original labels it {original_label}"
            )),
        });
    }
    let bounds = lifted_bounds(record, &query.input, &query.delta)?;
    Ok(LiftOutcome {
        verdict: check_robust(&bounds, target)?,
        diagnostic: None,
    })
}

/// Largest amount by which lifted bounds fail to enclose the original
/// network's interval bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Containment {
    pub max_violation: f64,
    /// `(layer, original neuron)` of the largest violation, if any.
    pub worst: Option<(usize, usize)>,
}

impl Containment {
    pub fn holds(&self, slack: f64) -> bool {
        self.max_violation <= slack
    }
}

/// Compares lifted bounds against `original_bounds` layer by layer. Each
/// original neuron is compared with its representative's interval widened by
/// the representative's radius; input and output layers compare directly.
pub fn containment(
    record: &AbstractionRecord,
    lifted: &LayerBounds,
    original_bounds: &LayerBounds,
) -> Containment {
    let mut maps: BTreeMap<usize, &[usize]> = BTreeMap::new();
    for la in &record.layers {
        maps.insert(la.clustering.layer, &la.neuron_map);
    }
    let mut out = Containment {
        max_violation: f64::NEG_INFINITY,
        worst: None,
    };
    for (l, (lo, hi)) in original_bounds
        .lower
        .iter()
        .zip(&original_bounds.upper)
        .enumerate()
    {
        for m in 0..lo.len() {
            let r = maps.get(&l).map_or(m, |map| map[m]);
            let e = record.layer_epsilons[l][r];
            let violation = (lifted.lower[l][r] - e - lo[m]).max(hi[m] - (lifted.upper[l][r] + e));
            if violation > out.max_violation {
                out.max_violation = violation;
                out.worst = (violation > 0.0).then_some((l, m));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub alpha: f64,
    pub seed: u64,
    pub epsilon_norm: EpsilonNorm,
    /// Skip the cluster search and use these counts.
    pub cluster_counts: Option<ClusterCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub index: usize,
    pub abstract_verdict: Verdict,
    pub lifted: Option<LiftOutcome>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub queries: usize,
    pub abstract_robust: usize,
    pub lifted_robust: usize,
    pub unknown: usize,
}

/// Wall-clock per stage, milliseconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub identify_ms: f64,
    pub abstract_ms: f64,
    pub verify_ms: f64,
    pub lift_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub schema: u32,
    pub cluster_counts: ClusterCounts,
    pub original_layer_sizes: Vec<usize>,
    pub abstract_layer_sizes: Vec<usize>,
    pub reduction_rate: f64,
    pub accuracy_original: f64,
    pub accuracy_abstract: f64,
    pub epsilon_max_per_layer: Vec<f64>,
    pub counts: Counts,
    pub queries: Vec<QueryResult>,
    pub note: String,
    pub timings: StageTimings,
}

/// Verifies each query on the abstract network and, where that succeeds,
/// lifts the proof to the original.
pub fn verify_and_lift(
    original: &Network,
    record: &AbstractionRecord,
    queries: &[RobustnessQuery],
) -> Result<(Vec<QueryResult>, Counts, f64, f64)> {
    let mut results = Vec::with_capacity(queries.len());
    let mut counts = Counts {
        queries: queries.len(),
        ..Counts::default()
    };
    let (mut verify_ms, mut lift_ms) = (0.0, 0.0);
    for (index, q) in queries.iter().enumerate() {
        let t = Instant::now();
        let abstract_verdict = verify_query(&record.abstract_net, q)?;
        verify_ms += ms_since(t);
        let lifted = if abstract_verdict.is_robust() {
            counts.abstract_robust += 1;
            let t = Instant::now();
            let outcome = lift_proof(original, record, q)?;
            lift_ms += ms_since(t);
            if outcome.verdict.is_robust() {
                counts.lifted_robust += 1;
            }
            Some(outcome)
        } else {
            None
        };
        if !lifted.as_ref().is_some_and(|o| o.verdict.is_robust()) {
            counts.unknown += 1;
        }
        results.push(QueryResult {
            index,
            abstract_verdict,
            lifted,
        });
    }
    Ok((results, counts, verify_ms, lift_ms))
}

pub(crate) fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Cluster search, abstraction, abstract verification, then lifting.
///
/// `inputs` is the clustering set; `eval` scores candidate abstractions.
pub fn pipeline(
    original: &Network,
    inputs: &InputSet,
    eval: &LabeledDataset,
    queries: &[RobustnessQuery],
    config: &PipelineConfig,
) -> Result<PipelineReport> {
    let mut timings = StageTimings::default();
    let t = Instant::now();
    let counts = match &config.cluster_counts {
        Some(c) => c.clone(),
        None => identify_clusters(
            original,
            inputs,
            eval,
            config.alpha,
            config.seed,
            config.epsilon_norm,
        )?,
    };
    timings.identify_ms = ms_since(t);

    let t = Instant::now();
    let record = abstract_network(original, inputs, &counts, config.seed, config.epsilon_norm)?;
    timings.abstract_ms = ms_since(t);

    let (results, tally, verify_ms, lift_ms) = verify_and_lift(original, &record, queries)?;
    timings.verify_ms = verify_ms;
    timings.lift_ms = lift_ms;

    Ok(PipelineReport {
        schema: 1,
        cluster_counts: record.provenance.cluster_counts.clone(),
        original_layer_sizes: original.layer_sizes().to_vec(),
        abstract_layer_sizes: record.abstract_net.layer_sizes().to_vec(),
        reduction_rate: reduction_rate(&record),
        accuracy_original: accuracy(original, eval)?,
        accuracy_abstract: accuracy(&record.abstract_net, eval)?,
        epsilon_max_per_layer: epsilon_max_per_layer(&record),
        counts: tally,
        queries: results,
        note: EPSILON_SCOPE_NOTE.to_string(),
        timings,
    })
}

pub fn epsilon_max_per_layer(record: &AbstractionRecord) -> Vec<f64> {
    record
        .layer_epsilons
        .iter()
        .map(|e| e.iter().copied().fold(0.0, f64::max))
        .collect()
}

/// Lifted bounds compared against plain interval bounds on the original.
pub fn check_containment(
    original: &Network,
    record: &AbstractionRecord,
    query: &RobustnessQuery,
) -> Result<Containment> {
    let lifted = lifted_bounds(record, &query.input, &query.delta)?;
    let plain = ibp_bounds(original, &query.input, &query.delta)?;
    Ok(containment(record, &lifted, &plain))
}
