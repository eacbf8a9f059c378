//! Clustering-based abstraction of fully-connected ReLU networks.
//!
//! Neurons of a hidden layer whose activations over an input set are close
//! are merged into one representative. The resulting smaller network can be
//! verified with interval bound propagation, and the cluster radii let a
//! robustness proof on the abstraction be lifted back to the original.

pub mod abstraction;
pub mod bounds;
pub mod clustering;
pub mod data;
pub mod error;
pub mod lifting;
pub mod matrix;
pub mod network;
pub mod trainer;
pub mod verifier;

pub use abstraction::{
    abstract_network, identify_clusters, merge_cluster, reduction_rate, AbstractionRecord,
    ClusterCounts,
};
pub use clustering::EpsilonNorm;
pub use data::{accuracy, collect_activations, InputSet, LabeledDataset};
pub use error::{Error, Result};
pub use lifting::{lift_proof, lifted_bounds};
pub use matrix::Matrix;
pub use network::{Activation, Network, RobustnessQuery};
pub use verifier::{check_robust, ibp_bounds, verify_query, LayerBounds, Verdict};
