//! Neuron merging and the layer-by-layer clustering abstraction.
//!
//! Merging a cluster keeps its representative: the other members' incoming
//! rows and biases are deleted and their outgoing weight columns are added to
//! the representative's column. The representative's own incoming weights are
//! left alone.

use std::collections::BTreeMap;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::clustering::{cluster_layer, EpsilonNorm, LayerClustering};
use crate::data::{accuracy, collect_activations, InputSet, LabeledDataset};
use crate::error::{Error, Result};
use crate::network::Network;

/// Target cluster count per hidden layer; absent layers keep their width.
pub type ClusterCounts = BTreeMap<usize, usize>;

/// Note attached to every record and report about the scope of the radii.
pub const EPSILON_SCOPE_NOTE: &str =
    "epsilon values are measured on the clustering input set only; \
error bounds and lifted bounds derived from them are stated for that set, and are not claimed \
for inputs outside it";

/// Merge result for one hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAbstraction {
    #[serde(flatten)]
    pub clustering: LayerClustering,
    /// Original neuron index -> abstract neuron index.
    pub neuron_map: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub cluster_counts: ClusterCounts,
    pub seed: u64,
    pub epsilon_norm: EpsilonNorm,
    pub input_fingerprint: String,
    pub input_count: usize,
    pub original_layer_sizes: Vec<usize>,
    pub abstract_layer_sizes: Vec<usize>,
    pub reduction_rate: f64,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractionRecord {
    pub abstract_net: Network,
    /// One entry per hidden layer, in layer order.
    pub layers: Vec<LayerAbstraction>,
    /// Per abstract layer, the largest radius of each abstract neuron's
    /// cluster. Zero on the input and output layers.
    pub layer_epsilons: Vec<Vec<f64>>,
    pub provenance: Provenance,
}

impl AbstractionRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes")
    }

    pub fn from_json(text: &str, source_name: &str) -> Result<Self> {
        let record: AbstractionRecord = serde_json::from_str(text).map_err(|e| Error::Parse {
            source_name: source_name.into(),
            message: format!("line {} column {}: {e}", e.line(), e.column()),
        })?;
        record.validate()?;
        Ok(record)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = self.abstract_net.layer_sizes();
        if self.layer_epsilons.len() != sizes.len() {
            return Err(Error::Validation(
                "layer_epsilons length differs from layer count".into(),
            ));
        }
        for (l, (eps, &n)) in self.layer_epsilons.iter().zip(sizes).enumerate() {
            if eps.len() != n {
                return Err(Error::shape(
                    format!("epsilon of abstract layer {l}"),
                    n,
                    eps.len(),
                ));
            }
            if eps.iter().any(|e| e.is_nan() || *e < 0.0) {
                return Err(Error::Validation(format!("negative epsilon in layer {l}")));
            }
        }
        if self.layer_epsilons[0]
            .iter()
            .chain(self.layer_epsilons.last().unwrap())
            .any(|&e| e != 0.0)
        {
            return Err(Error::Validation(
                "input and output epsilons must be zero".into(),
            ));
        }
        if self.layers.len() != sizes.len().saturating_sub(2) {
            return Err(Error::Validation(
                "one layer entry per hidden layer expected".into(),
            ));
        }
        for la in &self.layers {
            la.clustering.validate()?;
            let width = sizes[la.clustering.layer];
            if la.clustering.clusters.len() != width {
                return Err(Error::Validation(format!(
                    "layer {}: {} clusters but abstract width {width}",
                    la.clustering.layer,
                    la.clustering.clusters.len()
                )));
            }
            if la.neuron_map.len() != la.clustering.width()
                || la.neuron_map.iter().any(|&a| a >= width)
            {
                return Err(Error::Validation(format!(
                    "layer {}: bad neuron map",
                    la.clustering.layer
                )));
            }
        }
        Ok(())
    }

    pub fn original_layer_sizes(&self) -> &[usize] {
        &self.provenance.original_layer_sizes
    }
}

fn check_hidden(net: &Network, layer: usize) -> Result<()> {
    if !net.hidden_layers().contains(&layer) {
        return Err(Error::Argument(format!(
            "layer {layer} is not a hidden layer (hidden layers are {:?})",
            net.hidden_layers()
        )));
    }
    Ok(())
}

/// Merges one cluster of layer `layer` into `rep`.
pub fn merge_cluster(
    net: &Network,
    layer: usize,
    cluster: &[usize],
    rep: usize,
) -> Result<Network> {
    check_hidden(net, layer)?;
    let width = net.layer_sizes()[layer];
    if let Some(&m) = cluster.iter().find(|&&m| m >= width) {
        return Err(Error::Argument(format!(
            "neuron {m} out of range for layer {layer} of width {width}"
        )));
    }
    if !cluster.contains(&rep) {
        return Err(Error::Argument(format!(
            "representative {rep} is not in the cluster"
        )));
    }
    let mut clusters: Vec<Vec<usize>> = (0..width)
        .filter(|i| !cluster.contains(i))
        .map(|i| vec![i])
        .collect();
    let mut members = cluster.to_vec();
    members.sort_unstable();
    members.dedup();
    clusters.push(members);
    clusters.sort_by_key(|c| c[0]);
    let reps = clusters
        .iter()
        .map(|c| if c.contains(&rep) { rep } else { c[0] })
        .collect::<Vec<_>>();
    let (merged, _) = merge_layer(net, layer, &clusters, &reps)?;
    Ok(merged)
}

/// Merges every cluster of one layer at once. Surviving neurons keep their
/// relative order. Returns the new network and the original->abstract map.
pub fn merge_layer(
    net: &Network,
    layer: usize,
    clusters: &[Vec<usize>],
    representatives: &[usize],
) -> Result<(Network, Vec<usize>)> {
    check_hidden(net, layer)?;
    let width = net.layer_sizes()[layer];
    let mut rep_of = vec![usize::MAX; width];
    for (members, &rep) in clusters.iter().zip(representatives) {
        for &m in members {
            rep_of[m] = rep;
        }
    }
    let mut survivors: Vec<usize> = representatives.to_vec();
    survivors.sort_unstable();
    let position = |r: usize| {
        survivors
            .binary_search(&r)
            .expect("representative survives")
    };
    let neuron_map: Vec<usize> = rep_of.iter().map(|&r| position(r)).collect();

    let (mut weights, mut biases, act) = net.clone().into_parts();
    weights[layer - 1] = weights[layer - 1].select_rows(&survivors);
    biases[layer - 1] = survivors.iter().map(|&r| biases[layer - 1][r]).collect();

    let mut outgoing = weights[layer].select_cols(&survivors);
    for (members, &rep) in clusters.iter().zip(representatives) {
        let col = position(rep);
        for &m in members.iter().filter(|&&m| m != rep) {
            for row in 0..outgoing.rows() {
                let v = outgoing.get(row, col) + net.weights()[layer].get(row, m);
                outgoing.set(row, col, v);
            }
        }
    }
    weights[layer] = outgoing;
    Ok((Network::new(weights, biases, act)?, neuron_map))
}

fn layer_seed(seed: u64, layer: usize) -> u64 {
    seed ^ (layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Clusters and merges one layer of `net` using activations over `inputs`.
pub fn abstract_layer(
    net: &Network,
    inputs: &InputSet,
    layer: usize,
    k: usize,
    seed: u64,
    norm: EpsilonNorm,
) -> Result<(Network, LayerAbstraction)> {
    check_hidden(net, layer)?;
    let width = net.layer_sizes()[layer];
    if k < 1 || k > width {
        return Err(Error::Argument(format!(
            "cluster count {k} for layer {layer} outside [1, {width}]"
        )));
    }
    if k == width {
        return Ok((
            net.clone(),
            LayerAbstraction {
                clustering: LayerClustering::identity(layer, width),
                neuron_map: (0..width).collect(),
            },
        ));
    }
    let activations = collect_activations(net, inputs, layer)?;
    let clustering = cluster_layer(&activations, k, layer_seed(seed, layer), norm)?;
    let (merged, neuron_map) = merge_layer(
        net,
        layer,
        &clustering.clusters,
        &clustering.representatives,
    )?;
    Ok((
        merged,
        LayerAbstraction {
            clustering,
            neuron_map,
        },
    ))
}

/// Abstracts every hidden layer in order, clustering each on the activations
/// of the network abstracted so far.
pub fn abstract_network(
    net: &Network,
    inputs: &InputSet,
    counts: &ClusterCounts,
    seed: u64,
    norm: EpsilonNorm,
) -> Result<AbstractionRecord> {
    if let Some((&l, _)) = counts
        .iter()
        .find(|(l, _)| !net.hidden_layers().contains(l))
    {
        return Err(Error::Argument(format!(
            "cluster count given for non-hidden layer {l}"
        )));
    }
    let mut current = net.clone();
    let mut layers = Vec::new();
    let mut resolved = ClusterCounts::new();
    for layer in net.hidden_layers() {
        let k = counts
            .get(&layer)
            .copied()
            .unwrap_or(net.layer_sizes()[layer]);
        let (next, la) = abstract_layer(&current, inputs, layer, k, seed, norm)?;
        debug!("layer {layer}: {} -> {k} neurons", net.layer_sizes()[layer]);
        resolved.insert(layer, k);
        current = next;
        layers.push(la);
    }

    let sizes = current.layer_sizes().to_vec();
    let mut layer_epsilons: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    for la in &layers {
        let eps = &mut layer_epsilons[la.clustering.layer];
        for (m, &a) in la.neuron_map.iter().enumerate() {
            eps[a] = eps[a].max(la.clustering.epsilon[m]);
        }
    }

    let mut record = AbstractionRecord {
        abstract_net: current,
        layers,
        layer_epsilons,
        provenance: Provenance {
            cluster_counts: resolved,
            seed,
            epsilon_norm: norm,
            input_fingerprint: inputs.fingerprint(),
            input_count: inputs.len(),
            original_layer_sizes: net.layer_sizes().to_vec(),
            abstract_layer_sizes: sizes,
            reduction_rate: 0.0,
            note: EPSILON_SCOPE_NOTE.to_string(),
        },
    };
    record.provenance.reduction_rate = reduction_rate(&record);
    Ok(record)
}

/// Fraction of hidden neurons removed by the abstraction.
pub fn reduction_rate(record: &AbstractionRecord) -> f64 {
    let original = &record.provenance.original_layer_sizes;
    let abstracted = record.abstract_net.layer_sizes();
    let hidden = 1..original.len().saturating_sub(1);
    let before: usize = original[hidden.clone()].iter().sum();
    let after: usize = abstracted[hidden].iter().sum();
    if before == 0 {
        return 0.0;
    }
    1.0 - after as f64 / before as f64
}

/// Per hidden layer, binary-searches the smallest cluster count whose
/// abstraction keeps accuracy on `eval` at or above `alpha`, commits it, and
/// moves on to the next layer.
///
/// The search assumes accuracy is monotone in the cluster count; where it is
/// not, the returned count is admissible but not necessarily minimal.
pub fn identify_clusters(
    net: &Network,
    inputs: &InputSet,
    eval: &LabeledDataset,
    alpha: f64,
    seed: u64,
    norm: EpsilonNorm,
) -> Result<ClusterCounts> {
    let base = accuracy(net, eval)?;
    if alpha > base {
        return Err(Error::Argument(format!(
            "accuracy floor {alpha} exceeds the network's accuracy {base}"
        )));
    }
    let mut current = net.clone();
    let mut counts = ClusterCounts::new();
    for layer in net.hidden_layers() {
        let width = net.layer_sizes()[layer];
        if accuracy(&current, eval)? <= alpha {
            counts.insert(layer, width);
            continue;
        }
        let mut best = (width, current.clone());
        let (mut lo, mut hi) = (1, width);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            let (candidate, _) = abstract_layer(&current, inputs, layer, mid, seed, norm)?;
            let acc = accuracy(&candidate, eval)?;
            debug!("layer {layer}: k = {mid} -> accuracy {acc:.4}");
            if acc >= alpha {
                hi = mid;
                best = (mid, candidate);
            } else {
                lo = mid + 1;
            }
        }
        info!("layer {layer}: {width} -> {} neurons", best.0);
        counts.insert(layer, best.0);
        current = best.1;
    }
    Ok(counts)
}
