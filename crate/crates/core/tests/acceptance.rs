//! Acceptance suite. Every criterion runs, prints one `PASS`/`FAIL` line,
//! and the process exits non-zero if any failed.

mod common;

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use abstractnet::abstraction::abstract_network;
use abstractnet::bounds::{clustering_error, total_error};
use abstractnet::clustering::kmeans;
use abstractnet::data::bundled_digits;
use abstractnet::lifting::{check_containment, pipeline, PipelineConfig};
use abstractnet::trainer::{loss_and_gradient, train, TrainConfig};
use abstractnet::verifier::sample_box;
use abstractnet::{
    accuracy, check_robust, collect_activations, ibp_bounds, identify_clusters, lift_proof,
    lifted_bounds, merge_cluster, reduction_rate, verify_query, AbstractionRecord, Activation,
    ClusterCounts, EpsilonNorm, LabeledDataset, Matrix, Network, RobustnessQuery, Verdict,
};
use common::{random_inputs, random_instance, random_network, random_sizes, rng};
use rand::Rng;

fn verdict_line(criterion: u32, pass: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn finish(criterion: u32, failures: &[String], elapsed: Duration, budget: Duration) {
    let mut failures = failures.to_vec();
    if elapsed > budget {
        failures.push(format!("took {elapsed:?}, budget {budget:?}"));
    }
    let detail = if failures.is_empty() {
        format!("({elapsed:.2?})")
    } else {
        format!("({elapsed:.2?}): {}", failures.join("; "))
    };
    verdict_line(criterion, failures.is_empty(), &detail);
    assert!(
        failures.is_empty(),
        "criterion {criterion} failed: {}",
        failures.join("; ")
    );
}

/// Original network whose two hidden-layer-2 neurons are exact duplicates
/// sharing the outgoing weights; merging them gives the toy abstract network.
fn toy_original() -> Network {
    Network::new(
        vec![
            Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, -1.0]]).unwrap(),
            Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap(),
            Matrix::from_rows(&[vec![1.5, 0.5], vec![0.25, 0.75]]).unwrap(),
        ],
        vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![5.0, 0.0]],
        Activation::Identity,
    )
    .unwrap()
}

fn toy_record(e: f64) -> (Network, AbstractionRecord) {
    let original = toy_original();
    let inputs = abstractnet::InputSet::new(vec![vec![0.0, 0.0], vec![1.0, 0.5]]).unwrap();
    let counts = ClusterCounts::from([(2, 1)]);
    let mut record = abstract_network(&original, &inputs, &counts, 0, EpsilonNorm::L2).unwrap();
    record.layer_epsilons[2] = vec![e];
    for la in &mut record.layers {
        if la.clustering.layer == 2 {
            la.clustering.epsilon = vec![e; 2];
        }
    }
    (original, record)
}

fn criterion_1_toy_golden() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;

    let (original, record) = toy_record(0.0);
    let net = &record.abstract_net;
    if net.layer_sizes() != [2, 2, 1, 2] {
        failures.push(format!("merged layer sizes {:?}", net.layer_sizes()));
    }
    let x = [0.0, 0.0];
    let delta = [1.0, 1.0];
    let b = ibp_bounds(net, &x, &delta).unwrap();
    let (lo, hi) = (b.output_lower(), b.output_upper());
    if !(close(lo[0], 5.0) && close(hi[0], 13.0) && close(lo[1], 0.0) && close(hi[1], 4.0)) {
        failures.push(format!("abstract output bounds {lo:?} {hi:?}"));
    }
    if check_robust(&b, 0).unwrap() != (Verdict::Robust { label: 0 }) {
        failures.push("abstract network not robust for label 0".into());
    }

    for e in [0.0, 0.1, 1.0 / 3.0, 1.0] {
        let (_, record) = toy_record(e);
        let b = lifted_bounds(&record, &x, &delta).unwrap();
        let (lo, hi) = (b.output_lower(), b.output_upper());
        let want_lo = [5.0 - 2.0 * e, -e];
        let want_hi = [13.0 + 2.0 * e, 4.0 + e];
        if !(0..2).all(|i| close(lo[i], want_lo[i]) && close(hi[i], want_hi[i])) {
            failures.push(format!(
                "e = {e}: lifted {lo:?} {hi:?}, want {want_lo:?} {want_hi:?}"
            ));
        }
    }

    let q = RobustnessQuery::new(x.to_vec(), delta.to_vec()).unwrap();
    for e in [0.0, 0.1, 0.3, 0.333, 1.0 / 3.0, 0.34, 0.5, 1.0] {
        let (_, record) = toy_record(e);
        let robust = lift_proof(&original, &record, &q)
            .unwrap()
            .verdict
            .is_robust();
        if robust != (e < 1.0 / 3.0) {
            failures.push(format!("e = {e}: lifted robust = {robust}"));
        }
    }
    finish(1, &failures, start.elapsed(), Duration::from_secs(1));
}

/// Appends a copy of neuron `p` of hidden layer `layer` with fresh outgoing
/// weights; returns the widened network and the copy's index.
fn duplicate_neuron(net: &Network, layer: usize, p: usize, rng: &mut impl Rng) -> (Network, usize) {
    let mut weights = net.weights().to_vec();
    let mut biases = net.biases().to_vec();
    let q = net.layer_sizes()[layer];

    let mut incoming = weights[layer - 1].to_rows();
    incoming.push(incoming[p].clone());
    weights[layer - 1] = Matrix::from_rows(&incoming).unwrap();
    let bias = biases[layer - 1][p];
    biases[layer - 1].push(bias);

    let mut outgoing = weights[layer].to_rows();
    for row in &mut outgoing {
        row.push(rng.gen_range(-1.0..1.0));
    }
    weights[layer] = Matrix::from_rows(&outgoing).unwrap();
    (
        Network::new(weights, biases, net.output_activation()).unwrap(),
        q,
    )
}

fn criterion_2_duplicate_merge_is_exact() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for seed in 0..200u64 {
        let mut r = rng(seed);
        let sizes = random_sizes(&mut r, 4, 9);
        let base = random_network(&mut r, &sizes);
        let layer = r.gen_range(base.hidden_layers());
        let p = r.gen_range(0..sizes[layer]);
        let (net, q) = duplicate_neuron(&base, layer, p, &mut r);
        let merged = merge_cluster(&net, layer, &[p, q], p).unwrap();
        let inputs = random_inputs(&mut r, sizes[0], 64);
        for x in inputs.rows() {
            let a = net.forward(x).unwrap();
            let b = merged.forward(x).unwrap();
            for (u, v) in a.iter().zip(&b) {
                let rel = (u - v).abs() / u.abs().max(v.abs()).max(1.0);
                worst = worst.max(rel);
                if rel > 1e-9 {
                    failures.push(format!("seed {seed}: {u} vs {v}"));
                }
            }
        }
    }
    failures.truncate(5);
    println!("criterion 2: worst relative difference {worst:e}");
    finish(2, &failures, start.elapsed(), Duration::from_secs(10));
}

fn criterion_3_error_bounds_hold() {
    let start = Instant::now();
    let mut failures = Vec::new();
    for seed in 0..200u64 {
        let inst = random_instance(seed);
        let errors = clustering_error(&inst.net, &inst.record).unwrap();
        let e = errors.output();
        let mut r = rng(10_000 + seed);
        let delta: Vec<f64> = (0..inst.net.input_size())
            .map(|_| r.gen_range(0.0..0.2))
            .collect();
        let total = total_error(&inst.net, &inst.record, &delta).unwrap();
        for x in inst.inputs.rows() {
            let d = inst.net.forward(x).unwrap();
            let dt = inst.record.abstract_net.forward(x).unwrap();
            for i in 0..d.len() {
                if (dt[i] - d[i]).abs() > e[i] + 1e-9 {
                    failures.push(format!(
                        "seed {seed}: |diff| {} > E {}",
                        (dt[i] - d[i]).abs(),
                        e[i]
                    ));
                }
            }
            let q = RobustnessQuery::new(x.to_vec(), delta.clone()).unwrap();
            for _ in 0..1000 {
                let xp = sample_box(&q, &mut r);
                let dtp = inst.record.abstract_net.forward(&xp).unwrap();
                for i in 0..d.len() {
                    if (dtp[i] - d[i]).abs() > total[i] + 1e-9 {
                        failures.push(format!(
                            "seed {seed}: perturbed |diff| {} > T {}",
                            (dtp[i] - d[i]).abs(),
                            total[i]
                        ));
                    }
                }
            }
        }
    }
    let n = failures.len();
    failures.truncate(5);
    if n > 5 {
        failures.push(format!("{n} violations in total"));
    }
    finish(3, &failures, start.elapsed(), Duration::from_secs(60));
}

fn criterion_4_lifted_bounds_contain_original() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut output_layer = 0;
    for seed in 0..200u64 {
        let inst = random_instance(seed);
        let mut r = rng(20_000 + seed);
        let delta: Vec<f64> = (0..inst.net.input_size())
            .map(|_| r.gen_range(0.0..0.2))
            .collect();
        let q = RobustnessQuery::new(inst.inputs.get(0).to_vec(), delta).unwrap();
        let c = check_containment(&inst.net, &inst.record, &q).unwrap();
        if !c.holds(1e-9) {
            let (l, m) = c.worst.unwrap();
            if l + 1 == inst.net.num_layers() {
                output_layer += 1;
            }
            failures.push(format!(
                "seed {seed}: layer {l} neuron {m} exceeds by {:.3e}",
                c.max_violation
            ));
        }
    }
    let n = failures.len();
    failures.truncate(3);
    if n > 0 {
        failures.push(format!(
            "{n} of 200 instances violate containment, {output_layer} at the output layer"
        ));
    }
    finish(4, &failures, start.elapsed(), Duration::from_secs(30));
}

struct DigitsSetup {
    network: Network,
    record: AbstractionRecord,
    test: LabeledDataset,
    accuracy_test: f64,
    accuracy_abstract_test: f64,
    alpha: f64,
    elapsed: Duration,
}

/// Train, search cluster counts and abstract on the bundled digits. Shared
/// by criteria 5 and 6.
fn digits_setup() -> &'static DigitsSetup {
    static SETUP: OnceLock<DigitsSetup> = OnceLock::new();
    SETUP.get_or_init(|| {
        let start = Instant::now();
        let all = bundled_digits();
        let (rest, test) = all.split(0.2, 1).unwrap();
        let (train_set, validation) = rest.split(0.15, 2).unwrap();
        let cfg = TrainConfig {
            hidden: vec![100, 100, 100],
            epochs: 30,
            ..TrainConfig::default()
        };
        let network = train(&train_set, &cfg).unwrap().network;
        let accuracy_validation = accuracy(&network, &validation).unwrap();
        let alpha = accuracy_validation - 0.01;
        let inputs = train_set.inputs().truncated(1000);
        let counts =
            identify_clusters(&network, &inputs, &validation, alpha, 0, EpsilonNorm::L2).unwrap();
        let record = abstract_network(&network, &inputs, &counts, 0, EpsilonNorm::L2).unwrap();
        DigitsSetup {
            accuracy_test: accuracy(&network, &test).unwrap(),
            accuracy_abstract_test: accuracy(&record.abstract_net, &test).unwrap(),
            network,
            record,
            test,
            alpha,
            elapsed: start.elapsed(),
        }
    })
}

fn criterion_5_digits_reduction() {
    let s = digits_setup();
    let rate = reduction_rate(&s.record);
    let drop = (s.accuracy_test - s.accuracy_abstract_test) * 100.0;
    println!(
        "criterion 5: test accuracy {:.4}, abstract {:.4}, drop {drop:.2} pt, alpha {:.4}, layers {:?} -> {:?}, reduction {:.2}%",
        s.accuracy_test,
        s.accuracy_abstract_test,
        s.alpha,
        s.network.layer_sizes(),
        s.record.abstract_net.layer_sizes(),
        rate * 100.0
    );
    let mut failures = Vec::new();
    if s.accuracy_test < 0.90 {
        failures.push(format!("test accuracy {:.4} below 0.90", s.accuracy_test));
    }
    if rate <= 0.05 {
        failures.push(format!("reduction {:.2}% not above 5%", rate * 100.0));
    }
    if drop > 1.5 {
        failures.push(format!("accuracy drop {drop:.2} pt above 1.5"));
    }
    finish(5, &failures, s.elapsed, Duration::from_secs(15 * 60));
}

fn time_verification(net: &Network, queries: &[RobustnessQuery], rounds: usize) -> Duration {
    (0..rounds)
        .map(|_| {
            let t = Instant::now();
            for q in queries {
                std::hint::black_box(verify_query(net, q).unwrap());
            }
            t.elapsed()
        })
        .min()
        .unwrap()
}

fn criterion_6_abstract_verification_is_cheaper_and_lifts() {
    let s = digits_setup();
    let start = Instant::now();
    let queries: Vec<RobustnessQuery> = s
        .test
        .inputs()
        .rows()
        .iter()
        .take(100)
        .map(|x| RobustnessQuery::uniform(x.clone(), 0.02).unwrap())
        .collect();

    let mut original_time = Duration::ZERO;
    let mut abstract_time = Duration::ZERO;
    for _ in 0..5 {
        original_time += time_verification(&s.network, &queries, 5);
        abstract_time += time_verification(&s.record.abstract_net, &queries, 5);
    }

    let (mut abstract_robust, mut lifted, mut contained) = (0, 0, 0);
    let mut worst = 0.0f64;
    for q in &queries {
        if verify_query(&s.record.abstract_net, q).unwrap().is_robust() {
            abstract_robust += 1;
            if lift_proof(&s.network, &s.record, q)
                .unwrap()
                .verdict
                .is_robust()
            {
                lifted += 1;
            }
        }
        let c = check_containment(&s.network, &s.record, q).unwrap();
        worst = worst.max(c.max_violation);
        if c.holds(1e-9) {
            contained += 1;
        }
    }
    let rate = reduction_rate(&s.record);
    let lifted_share = if abstract_robust == 0 {
        0.0
    } else {
        lifted as f64 / abstract_robust as f64
    };
    println!(
        "criterion 6: original {original_time:.2?}, abstract {abstract_time:.2?}; abstract robust {abstract_robust}/100, lifted {lifted}; containment {contained}/100 (worst excess {worst:.3e})"
    );
    if abstract_robust == 0 {
        println!("criterion 6 (soft, logged only): vacuous, no query verified on the abstraction at this radius");
    } else if rate <= 0.15 {
        let soft = lifted_share >= 0.8;
        println!(
            "criterion 6 (soft, logged only): {} {:.1}% of abstract proofs lifted at reduction {:.2}%",
            if soft { "met" } else { "missed" },
            lifted_share * 100.0,
            rate * 100.0
        );
    }

    let mut failures = Vec::new();
    if abstract_time > original_time {
        failures.push(format!(
            "abstract verification {abstract_time:.2?} slower than original {original_time:.2?}"
        ));
    }
    if contained < queries.len() {
        failures.push(format!(
            "containment fails on {} of {} queries",
            queries.len() - contained,
            queries.len()
        ));
    }
    finish(6, &failures, start.elapsed(), Duration::from_secs(15 * 60));
}

fn with_param(net: &Network, idx: (usize, Option<(usize, usize)>, usize), delta: f64) -> Network {
    let (l, cell, bias) = idx;
    let mut weights = net.weights().to_vec();
    let mut biases = net.biases().to_vec();
    match cell {
        Some((r, c)) => {
            let v = weights[l].get(r, c);
            weights[l].set(r, c, v + delta);
        }
        None => biases[l][bias] += delta,
    }
    Network::new(weights, biases, net.output_activation()).unwrap()
}

fn criterion_7_gradient_check() {
    let start = Instant::now();
    // Preactivations stay well away from the ReLU kink at these inputs.
    let net = Network::new(
        vec![
            Matrix::from_rows(&[vec![0.7, -0.3], vec![0.4, 0.9]]).unwrap(),
            Matrix::from_rows(&[vec![1.1, -0.6], vec![-0.8, 0.5]]).unwrap(),
        ],
        vec![vec![0.2, 0.1], vec![0.05, -0.1]],
        Activation::Identity,
    )
    .unwrap();
    let xs: Vec<Vec<f64>> = vec![vec![1.0, 0.5], vec![0.3, 0.8], vec![0.9, 0.1]];
    let inputs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let labels = [0, 1, 1];
    let (_, grad) = loss_and_gradient(&net, &inputs, &labels).unwrap();

    let h = 1e-6;
    let loss = |n: &Network| loss_and_gradient(n, &inputs, &labels).unwrap().0;
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    let mut check = |analytic: f64, idx, name: String| {
        let numeric =
            (loss(&with_param(&net, idx, h)) - loss(&with_param(&net, idx, -h))) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
        if rel > 1e-5 {
            failures.push(format!("{name}: analytic {analytic}, numeric {numeric}"));
        }
    };
    for l in 0..2 {
        for r in 0..2 {
            for c in 0..2 {
                check(
                    grad.weights[l].get(r, c),
                    (l, Some((r, c)), 0),
                    format!("W{l}[{r},{c}]"),
                );
            }
            check(grad.biases[l][r], (l, None, r), format!("b{l}[{r}]"));
        }
    }
    println!("criterion 7: worst relative difference {worst:e}");
    finish(7, &failures, start.elapsed(), Duration::from_secs(1));
}

fn criterion_8_determinism() {
    let start = Instant::now();
    let ds = bundled_digits().take(400).unwrap();
    let (train_set, eval) = ds.split(0.25, 3).unwrap();
    let cfg = TrainConfig {
        hidden: vec![24, 24],
        epochs: 3,
        seed: 11,
        ..TrainConfig::default()
    };
    let queries: Vec<RobustnessQuery> = eval
        .inputs()
        .rows()
        .iter()
        .take(10)
        .map(|x| RobustnessQuery::uniform(x.clone(), 0.01).unwrap())
        .collect();

    let run = || {
        let net = train(&train_set, &cfg).unwrap().network;
        let inputs = train_set.inputs().truncated(200);
        let acts = collect_activations(&net, &inputs, 1).unwrap();
        let clustering = kmeans(&acts, 9, 5).unwrap();
        let config = PipelineConfig {
            alpha: accuracy(&net, &eval).unwrap() - 0.05,
            seed: 5,
            epsilon_norm: EpsilonNorm::L2,
            cluster_counts: None,
        };
        let mut report = pipeline(&net, &inputs, &eval, &queries, &config).unwrap();
        report.timings = Default::default();
        let record =
            abstract_network(&net, &inputs, &report.cluster_counts, 5, EpsilonNorm::L2).unwrap();
        (
            net.to_json(),
            serde_json::to_string(&clustering.clusters).unwrap(),
            record.to_json(),
            serde_json::to_string(&report).unwrap(),
        )
    };
    let a = run();
    let b = run();
    let mut failures = Vec::new();
    for (name, x, y) in [
        ("network", &a.0, &b.0),
        ("clustering", &a.1, &b.1),
        ("record", &a.2, &b.2),
        ("report", &a.3, &b.3),
    ] {
        if x != y {
            failures.push(format!("{name} differs between runs"));
        }
    }
    finish(8, &failures, start.elapsed(), Duration::MAX);
}

fn main() {
    // Each criterion prints its own verdict line before failing.
    std::panic::set_hook(Box::new(|_| {}));
    let criteria: [(&str, fn()); 8] = [
        ("toy golden", criterion_1_toy_golden),
        ("duplicate merge", criterion_2_duplicate_merge_is_exact),
        ("error bounds", criterion_3_error_bounds_hold),
        (
            "lifted containment",
            criterion_4_lifted_bounds_contain_original,
        ),
        ("digits reduction", criterion_5_digits_reduction),
        (
            "verification speed and lifting",
            criterion_6_abstract_verification_is_cheaper_and_lifts,
        ),
        ("gradient check", criterion_7_gradient_check),
        ("determinism", criterion_8_determinism),
    ];
    let failed: Vec<&str> = criteria
        .iter()
        .filter(|(_, run)| std::panic::catch_unwind(run).is_err())
        .map(|(name, _)| *name)
        .collect();
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed.len(),
        criteria.len()
    );
    if !failed.is_empty() {
        println!("acceptance: failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
