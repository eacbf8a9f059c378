//! Minimal mini-batch trainer for fully-connected ReLU classifiers
//! (softmax cross-entropy on the raw output logits).

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::network::{Activation, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    pub validation_fraction: f64,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![100, 100, 100],
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-7,
            seed: 0,
            validation_fraction: 0.1,
            patience: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::Argument("hidden widths must be >= 1".into()));
        }
        if self.learning_rate.is_nan()
            || self.learning_rate <= 0.0
            || self.batch_size == 0
            || self.adam_epsilon.is_nan()
            || self.adam_epsilon <= 0.0
        {
            return Err(Error::Argument(
                "learning rate, batch size and adam epsilon must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Argument(
                "validation fraction must lie in [0, 1)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Argument("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
pub fn init_network(layer_sizes: &[usize], seed: u64) -> Result<Network> {
    if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
        return Err(Error::Argument(format!("bad architecture {layer_sizes:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for pair in layer_sizes.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        weights.push(Matrix::from_vec(fan_out, fan_in, data)?);
        biases.push(vec![0.0; fan_out]);
    }
    Network::new(weights, biases, Activation::Identity)
}

/// Gradient of the mean loss with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(net: &Network) -> Self {
        Self {
            weights: net
                .weights()
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: net.biases().iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// Mean cross-entropy of `softmax(net(x))` over the given samples.
pub fn loss(net: &Network, inputs: &[&[f64]], labels: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for (x, &y) in inputs.iter().zip(labels) {
        total -= log_softmax(&net.forward(x)?)[y];
    }
    Ok(total / inputs.len() as f64)
}

/// Mean loss and its gradient by backpropagation.
pub fn loss_and_gradient(
    net: &Network,
    inputs: &[&[f64]],
    labels: &[usize],
) -> Result<(f64, Gradients)> {
    let mut grads = Gradients::zeros_like(net);
    let mut total = 0.0;
    let last = net.num_layers() - 1;
    for (x, &y) in inputs.iter().zip(labels) {
        if y >= net.output_size() {
            return Err(Error::Validation(format!(
                "label {y} outside {} outputs",
                net.output_size()
            )));
        }
        let trace = net.forward_trace(x)?;
        let logp = log_softmax(trace.output());
        total -= logp[y];
        let mut delta: Vec<f64> = logp.iter().map(|lp| lp.exp()).collect();
        delta[y] -= 1.0;
        if net.output_activation() == Activation::Relu {
            for (d, h) in delta.iter_mut().zip(&trace.preactivations[last]) {
                if *h <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        for l in (0..last).rev() {
            let z = &trace.activations[l];
            let gw = &mut grads.weights[l];
            for (i, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    for (g, &zj) in gw.row_mut(i).iter_mut().zip(z) {
                        *g += d * zj;
                    }
                }
                grads.biases[l][i] += d;
            }
            if l > 0 {
                let mut back = net.weights()[l].transpose_mul_vec(&delta);
                for (b, h) in back.iter_mut().zip(&trace.preactivations[l]) {
                    if *h <= 0.0 {
                        *b = 0.0;
                    }
                }
                delta = back;
            }
        }
    }
    let n = inputs.len() as f64;
    for w in &mut grads.weights {
        w.as_mut_slice().iter_mut().for_each(|g| *g /= n);
    }
    for b in &mut grads.biases {
        b.iter_mut().for_each(|g| *g /= n);
    }
    Ok((total / n, grads))
}

struct AdamState {
    m: Gradients,
    v: Gradients,
    step: i32,
}

fn apply_update(net: &mut Network, grads: &Gradients, cfg: &TrainConfig, adam: &mut AdamState) {
    let (weights, biases) = net.params_mut();
    match cfg.optimizer {
        Optimizer::Sgd => {
            for (w, g) in weights.iter_mut().zip(&grads.weights) {
                for (p, g) in w.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *p -= cfg.learning_rate * g;
                }
            }
            for (b, g) in biases.iter_mut().zip(&grads.biases) {
                for (p, g) in b.iter_mut().zip(g) {
                    *p -= cfg.learning_rate * g;
                }
            }
        }
        Optimizer::Adam => {
            adam.step += 1;
            let c1 = 1.0 - cfg.beta1.powi(adam.step);
            let c2 = 1.0 - cfg.beta2.powi(adam.step);
            let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_epsilon);
            };
            for (l, w) in weights.iter_mut().enumerate() {
                let g = grads.weights[l].as_slice();
                let m = adam.m.weights[l].as_mut_slice();
                let v = adam.v.weights[l].as_mut_slice();
                for (i, p) in w.as_mut_slice().iter_mut().enumerate() {
                    update(p, g[i], &mut m[i], &mut v[i]);
                }
            }
            for (l, b) in biases.iter_mut().enumerate() {
                for (i, p) in b.iter_mut().enumerate() {
                    update(
                        p,
                        grads.biases[l][i],
                        &mut adam.m.biases[l][i],
                        &mut adam.v.biases[l][i],
                    );
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss (the last
    /// epoch when there is no validation split).
    pub network: Network,
    pub history: Vec<EpochStats>,
}

/// Trains a classifier with one output per class seen in `ds`.
pub fn train(ds: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let mut sizes = vec![ds.inputs().width()];
    sizes.extend(&cfg.hidden);
    sizes.push(ds.num_classes());
    let mut net = init_network(&sizes, cfg.seed)?;

    let (train_set, val_set) = if cfg.validation_fraction > 0.0 {
        let (a, b) = ds.split(cfg.validation_fraction, cfg.seed)?;
        (a, Some(b))
    } else {
        (ds.clone(), None)
    };
    let rows: Vec<&[f64]> = train_set
        .inputs()
        .rows()
        .iter()
        .map(Vec::as_slice)
        .collect();
    let val_rows: Option<Vec<&[f64]>> = val_set
        .as_ref()
        .map(|v| v.inputs().rows().iter().map(Vec::as_slice).collect());

    let mut adam = AdamState {
        m: Gradients::zeros_like(&net),
        v: Gradients::zeros_like(&net),
        step: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, Network)> = None;
    let mut stale = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| rows[i]).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| train_set.labels()[i]).collect();
            let (l, grads) = loss_and_gradient(&net, &xs, &ys)?;
            if !l.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: format!("loss became {l}"),
                });
            }
            epoch_loss += l * batch.len() as f64;
            apply_update(&mut net, &grads, cfg, &mut adam);
        }
        let train_loss = epoch_loss / rows.len() as f64;
        let validation_loss = match (&val_rows, &val_set) {
            (Some(vr), Some(vs)) => Some(loss(&net, vr, vs.labels())?),
            _ => None,
        };
        info!("epoch {epoch}: train loss {train_loss:.4}, validation loss {validation_loss:?}");
        history.push(EpochStats {
            epoch,
            train_loss,
            validation_loss,
        });
        if let Some(vl) = validation_loss {
            if !vl.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: format!("validation loss became {vl}"),
                });
            }
            if best.as_ref().is_none_or(|(b, _)| vl < *b) {
                best = Some((vl, net.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome {
        network: best.map_or(net, |(_, n)| n),
        history,
    })
}
