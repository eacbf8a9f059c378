#![allow(dead_code)]

use abstractnet::abstraction::{abstract_network, AbstractionRecord, ClusterCounts};
use abstractnet::{Activation, EpsilonNorm, InputSet, Matrix, Network};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_network(rng: &mut impl Rng, sizes: &[usize]) -> Network {
    let weights = sizes
        .windows(2)
        .map(|p| {
            let data = (0..p[0] * p[1]).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Matrix::from_vec(p[1], p[0], data).unwrap()
        })
        .collect();
    let biases = sizes[1..]
        .iter()
        .map(|&n| (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect())
        .collect();
    Network::new(weights, biases, Activation::Identity).unwrap()
}

/// Layer sizes with `1..=max_hidden` hidden layers of width `2..=max_width`.
pub fn random_sizes(rng: &mut impl Rng, max_hidden: usize, max_width: usize) -> Vec<usize> {
    let mut sizes = vec![rng.gen_range(2..=4)];
    for _ in 0..rng.gen_range(1..=max_hidden) {
        sizes.push(rng.gen_range(2..=max_width));
    }
    sizes.push(rng.gen_range(2..=4));
    sizes
}

pub fn random_inputs(rng: &mut impl Rng, width: usize, count: usize) -> InputSet {
    InputSet::new(
        (0..count)
            .map(|_| (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect(),
    )
    .unwrap()
}

/// A random network (at most 4 hidden layers of at most 10 neurons),
/// a random input set of at most 32 points and an abstraction of it with
/// random cluster counts.
pub struct Instance {
    pub net: Network,
    pub inputs: InputSet,
    pub record: AbstractionRecord,
}

pub fn random_instance(seed: u64) -> Instance {
    let mut rng = rng(seed);
    let sizes = random_sizes(&mut rng, 4, 10);
    let net = random_network(&mut rng, &sizes);
    let count = rng.gen_range(4..=32);
    let inputs = random_inputs(&mut rng, sizes[0], count);
    let counts: ClusterCounts = net
        .hidden_layers()
        .map(|l| (l, rng.gen_range(1..=sizes[l])))
        .collect();
    let record = abstract_network(&net, &inputs, &counts, seed, EpsilonNorm::L2).unwrap();
    Instance {
        net,
        inputs,
        record,
    }
}
