use std::path::PathBuf;
use std::time::{Duration, Instant};

use abstractnet::abstraction::EPSILON_SCOPE_NOTE;
use abstractnet::lifting::{epsilon_max_per_layer, verify_and_lift, Counts, QueryResult};
use abstractnet::trainer::{train, EpochStats, Optimizer, TrainConfig};
use abstractnet::verifier::falsify;
use abstractnet::{
    abstract_network, accuracy, identify_clusters, reduction_rate, verify_query, AbstractionRecord,
    ClusterCounts, EpsilonNorm, Error, InputSet, LabeledDataset, Network, Result, RobustnessQuery,
    Verdict,
};
use clap::{Args, ValueEnum};
use log::info;
use rayon::prelude::*;
use serde::Serialize;

use crate::input::{parse_cluster_counts, read_vector, resolve_delta, test_queries, DataArgs};

const SCHEMA: u32 = 1;

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn emit(report: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(report).expect("reports serialize");
    println!("{text}");
    Ok(())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Hidden layers as `3x100` or `100,100,100`.
    #[arg(long, default_value = "3x100")]
    pub arch: String,

    #[arg(long, default_value_t = 10)]
    pub epochs: usize,

    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,

    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,

    #[arg(long, value_enum, default_value = "adam")]
    pub optimizer: OptimizerArg,

    /// Fraction of the training split used for early stopping.
    #[arg(long, default_value_t = 0.1)]
    pub validation_fraction: f64,

    /// Epochs without validation improvement before stopping.
    #[arg(long, default_value_t = 3)]
    pub patience: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    #[arg(long)]
    pub out: PathBuf,
}

pub fn parse_arch(text: &str) -> Result<Vec<usize>> {
    let bad = || {
        Error::Argument(format!(
            "bad architecture {text:?}; use 3x100 or 100,100,100"
        ))
    };
    let widths: Vec<usize> = match text.split_once('x') {
        Some((n, w)) => {
            let n: usize = n.trim().parse().map_err(|_| bad())?;
            let w: usize = w.trim().parse().map_err(|_| bad())?;
            vec![w; n]
        }
        None => text
            .split(',')
            .map(|t| t.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?,
    };
    if widths.is_empty() || widths.contains(&0) {
        return Err(bad());
    }
    Ok(widths)
}

#[derive(Serialize)]
struct TrainReport {
    schema: u32,
    layer_sizes: Vec<usize>,
    train_samples: usize,
    test_samples: usize,
    accuracy_train: f64,
    accuracy_test: f64,
    history: Vec<EpochStats>,
    out: PathBuf,
}

pub fn train_cmd(args: &TrainArgs) -> Result<()> {
    let (train_set, test) = args.data.load_split()?;
    let cfg = TrainConfig {
        hidden: parse_arch(&args.arch)?,
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        optimizer: match args.optimizer {
            OptimizerArg::Sgd => Optimizer::Sgd,
            OptimizerArg::Adam => Optimizer::Adam,
        },
        seed: args.seed,
        validation_fraction: args.validation_fraction,
        patience: args.patience,
        ..TrainConfig::default()
    };
    info!("training {:?} on {} samples", cfg.hidden, train_set.len());
    let outcome = train(&train_set, &cfg)?;
    outcome.network.save(&args.out)?;
    emit(&TrainReport {
        schema: SCHEMA,
        layer_sizes: outcome.network.layer_sizes().to_vec(),
        train_samples: train_set.len(),
        test_samples: test.len(),
        accuracy_train: accuracy(&outcome.network, &train_set)?,
        accuracy_test: accuracy(&outcome.network, &test)?,
        history: outcome.history,
        out: args.out.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClusterSource {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    L2,
    Linf,
}

impl From<NormArg> for EpsilonNorm {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::L2 => EpsilonNorm::L2,
            NormArg::Linf => EpsilonNorm::Linf,
        }
    }
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    /// Accuracy floor for the cluster-count search, scored on a validation
    /// split carved from the training split.
    #[arg(long, required_unless_present = "kl", conflicts_with = "kl")]
    pub alpha: Option<f64>,

    /// Explicit cluster counts per hidden layer, e.g. `1:80,2:77` (layer 0
    /// is the input layer).
    #[arg(long)]
    pub kl: Option<String>,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    #[arg(long, value_enum, default_value = "l2")]
    pub epsilon_norm: NormArg,

    /// Which split provides the clustering inputs.
    #[arg(long, value_enum, default_value = "train")]
    pub cluster_data: ClusterSource,

    /// Maximum number of clustering inputs.
    #[arg(long, default_value_t = 1000)]
    pub cluster_size: usize,

    /// Fraction of the training split used to score candidate abstractions.
    #[arg(long, default_value_t = 0.15)]
    pub eval_fraction: f64,
}

struct Prepared {
    record: AbstractionRecord,
    eval: LabeledDataset,
    identify: Duration,
    abstraction: Duration,
}

fn prepare(
    net: &Network,
    train_set: &LabeledDataset,
    test: &LabeledDataset,
    args: &ClusterArgs,
) -> Result<Prepared> {
    let (fit, eval) = train_set.split(args.eval_fraction, args.seed)?;
    if args.cluster_size == 0 {
        return Err(Error::Argument("--cluster-size must be at least 1".into()));
    }
    let inputs: InputSet = match args.cluster_data {
        ClusterSource::Train => fit.inputs().truncated(args.cluster_size),
        ClusterSource::Test => test.inputs().truncated(args.cluster_size),
    };
    let norm = args.epsilon_norm.into();
    let t = Instant::now();
    let counts = match (&args.kl, args.alpha) {
        (Some(kl), _) => parse_cluster_counts(kl)?,
        (None, Some(alpha)) => identify_clusters(net, &inputs, &eval, alpha, args.seed, norm)?,
        (None, None) => unreachable!("clap requires --alpha or --kl"),
    };
    let identify = t.elapsed();
    info!("cluster counts {counts:?}");
    let t = Instant::now();
    let record = abstract_network(net, &inputs, &counts, args.seed, norm)?;
    Ok(Prepared {
        record,
        eval,
        identify,
        abstraction: t.elapsed(),
    })
}

fn removed_neurons(record: &AbstractionRecord) -> usize {
    let before: usize = record.original_layer_sizes().iter().sum();
    let after: usize = record.abstract_net.layer_sizes().iter().sum();
    before - after
}

#[derive(Debug, Args)]
pub struct AbstractArgs {
    #[arg(long)]
    pub net: PathBuf,

    #[command(flatten)]
    pub data: DataArgs,

    #[command(flatten)]
    pub cluster: ClusterArgs,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct AccuracySummary {
    eval_original: f64,
    eval_abstract: f64,
    test_original: f64,
    test_abstract: f64,
    /// Test accuracy lost, in percentage points.
    test_drop_points: f64,
}

#[derive(Serialize)]
struct AbstractTimings {
    identify_ms: f64,
    abstract_ms: f64,
}

#[derive(Serialize)]
struct AbstractReport {
    schema: u32,
    cluster_counts: ClusterCounts,
    original_layer_sizes: Vec<usize>,
    abstract_layer_sizes: Vec<usize>,
    removed_neurons: usize,
    reduction_rate: f64,
    accuracy: AccuracySummary,
    epsilon_max_per_layer: Vec<f64>,
    input_fingerprint: String,
    note: &'static str,
    out: PathBuf,
    timings: AbstractTimings,
}

pub fn abstract_cmd(args: &AbstractArgs) -> Result<()> {
    let net = Network::load(&args.net)?;
    let (train_set, test) = args.data.load_split()?;
    let p = prepare(&net, &train_set, &test, &args.cluster)?;
    p.record.save(&args.out)?;
    let abs = &p.record.abstract_net;
    let test_original = accuracy(&net, &test)?;
    let test_abstract = accuracy(abs, &test)?;
    emit(&AbstractReport {
        schema: SCHEMA,
        cluster_counts: p.record.provenance.cluster_counts.clone(),
        original_layer_sizes: net.layer_sizes().to_vec(),
        abstract_layer_sizes: abs.layer_sizes().to_vec(),
        removed_neurons: removed_neurons(&p.record),
        reduction_rate: reduction_rate(&p.record),
        accuracy: AccuracySummary {
            eval_original: accuracy(&net, &p.eval)?,
            eval_abstract: accuracy(abs, &p.eval)?,
            test_original,
            test_abstract,
            test_drop_points: (test_original - test_abstract) * 100.0,
        },
        epsilon_max_per_layer: epsilon_max_per_layer(&p.record),
        input_fingerprint: p.record.provenance.input_fingerprint.clone(),
        note: EPSILON_SCOPE_NOTE,
        out: args.out.clone(),
        timings: AbstractTimings {
            identify_ms: ms(p.identify),
            abstract_ms: ms(p.abstraction),
        },
    })
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, required_unless_present = "record", conflicts_with = "record")]
    pub net: Option<PathBuf>,

    /// Verify the abstract network stored in an abstraction record.
    #[arg(long)]
    pub record: Option<PathBuf>,

    #[command(flatten)]
    pub data: DataArgs,

    /// A test-split index, or a file holding one input vector.
    #[arg(long)]
    pub input: Option<String>,

    /// Number of leading test inputs to verify when `--input` is absent.
    #[arg(long, default_value_t = 1, conflicts_with = "input")]
    pub count: usize,

    /// Scalar radius for every input, or a file with one radius per input.
    #[arg(long)]
    pub delta: String,

    /// On an unproven query, sample this many box points looking for a
    /// label change.
    #[arg(long)]
    pub falsify: Option<usize>,

    /// Seed of the falsifier.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Serialize)]
struct VerifyTimings {
    verify_ms: f64,
}

#[derive(Serialize)]
struct VerifyLine {
    schema: u32,
    index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    true_label: Option<usize>,
    #[serde(flatten)]
    verdict: Verdict,
    timings: VerifyTimings,
}

pub fn verify_cmd(args: &VerifyArgs) -> Result<()> {
    let net = match (&args.net, &args.record) {
        (Some(path), _) => Network::load(path)?,
        (None, Some(path)) => AbstractionRecord::load(path)?.abstract_net,
        (None, None) => unreachable!("clap requires --net or --record"),
    };
    let delta = resolve_delta(&args.delta, net.input_size())?;

    let mut cases: Vec<(usize, Option<usize>, RobustnessQuery)> = Vec::new();
    match args.input.as_deref() {
        Some(spec) if spec.parse::<usize>().is_err() => {
            let x = read_vector(std::path::Path::new(spec))?;
            cases.push((0, None, RobustnessQuery::new(x, delta)?));
        }
        Some(spec) => {
            let index: usize = spec.parse().expect("checked above");
            let (_, test) = args.data.load_split()?;
            if index >= test.len() {
                return Err(Error::Argument(format!(
                    "input index {index} outside test split of {}",
                    test.len()
                )));
            }
            let x = test.inputs().get(index).to_vec();
            cases.push((
                index,
                Some(test.labels()[index]),
                RobustnessQuery::new(x, delta)?,
            ));
        }
        None => {
            let (_, test) = args.data.load_split()?;
            for (i, q) in test_queries(&test, args.count, &delta)?
                .into_iter()
                .enumerate()
            {
                cases.push((i, Some(test.labels()[i]), q));
            }
        }
    }

    let lines = cases
        .into_par_iter()
        .map(|(index, true_label, q)| {
            let t = Instant::now();
            let mut verdict = verify_query(&net, &q)?;
            if let (Verdict::Unknown, Some(samples)) = (&verdict, args.falsify) {
                if let Some(witness) = falsify(&net, &q, samples, args.seed ^ index as u64)? {
                    verdict = witness;
                }
            }
            Ok(VerifyLine {
                schema: SCHEMA,
                index,
                true_label,
                verdict,
                timings: VerifyTimings {
                    verify_ms: ms(t.elapsed()),
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for line in &lines {
        println!(
            "{}",
            serde_json::to_string(line).expect("reports serialize")
        );
    }
    Ok(())
}

fn check_pair(net: &Network, record: &AbstractionRecord) -> Result<()> {
    if net.layer_sizes() != record.original_layer_sizes() {
        return Err(Error::Validation(format!(
            "record was built from layers {:?}, network has {:?}",
            record.original_layer_sizes(),
            net.layer_sizes()
        )));
    }
    Ok(())
}

/// Runs verification and lifting per query in parallel, keeping query order.
fn lift_all(
    net: &Network,
    record: &AbstractionRecord,
    queries: &[RobustnessQuery],
) -> Result<(Vec<QueryResult>, Counts, f64, f64)> {
    let per_query = queries
        .par_iter()
        .map(|q| verify_and_lift(net, record, std::slice::from_ref(q)))
        .collect::<Result<Vec<_>>>()?;
    let mut results = Vec::with_capacity(queries.len());
    let mut counts = Counts::default();
    let (mut verify_ms, mut lift_ms) = (0.0, 0.0);
    for (index, (mut r, c, v, l)) in per_query.into_iter().enumerate() {
        let mut result = r.remove(0);
        result.index = index;
        results.push(result);
        counts.queries += c.queries;
        counts.abstract_robust += c.abstract_robust;
        counts.lifted_robust += c.lifted_robust;
        counts.unknown += c.unknown;
        verify_ms += v;
        lift_ms += l;
    }
    Ok((results, counts, verify_ms, lift_ms))
}

#[derive(Debug, Args)]
pub struct LiftArgs {
    /// The original network the record was built from.
    #[arg(long)]
    pub net: PathBuf,

    #[arg(long)]
    pub record: PathBuf,

    #[command(flatten)]
    pub data: DataArgs,

    #[arg(long)]
    pub delta: String,

    #[arg(long, default_value_t = 100)]
    pub count: usize,
}

#[derive(Serialize)]
struct LiftTimings {
    /// Summed over queries.
    verify_ms: f64,
    lift_ms: f64,
}

#[derive(Serialize)]
struct LiftReport {
    schema: u32,
    cluster_counts: ClusterCounts,
    original_layer_sizes: Vec<usize>,
    abstract_layer_sizes: Vec<usize>,
    reduction_rate: f64,
    epsilon_max_per_layer: Vec<f64>,
    counts: Counts,
    queries: Vec<QueryResult>,
    note: &'static str,
    timings: LiftTimings,
}

pub fn lift_cmd(args: &LiftArgs) -> Result<()> {
    let net = Network::load(&args.net)?;
    let record = AbstractionRecord::load(&args.record)?;
    check_pair(&net, &record)?;
    let (_, test) = args.data.load_split()?;
    let delta = resolve_delta(&args.delta, net.input_size())?;
    let queries = test_queries(&test, args.count, &delta)?;
    let (results, counts, verify_ms, lift_ms) = lift_all(&net, &record, &queries)?;
    emit(&LiftReport {
        schema: SCHEMA,
        cluster_counts: record.provenance.cluster_counts.clone(),
        original_layer_sizes: net.layer_sizes().to_vec(),
        abstract_layer_sizes: record.abstract_net.layer_sizes().to_vec(),
        reduction_rate: reduction_rate(&record),
        epsilon_max_per_layer: epsilon_max_per_layer(&record),
        counts,
        queries: results,
        note: EPSILON_SCOPE_NOTE,
        timings: LiftTimings { verify_ms, lift_ms },
    })
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub net: PathBuf,

    #[command(flatten)]
    pub data: DataArgs,

    #[command(flatten)]
    pub cluster: ClusterArgs,

    #[arg(long)]
    pub delta: String,

    #[arg(long, default_value_t = 100)]
    pub count: usize,

    /// Wall-clock budget per verification stage; queries not reached in time
    /// count as timed out.
    #[arg(long)]
    pub timeout_s: Option<f64>,
}

#[derive(Serialize)]
struct BenchTimings {
    identify_ms: f64,
    abstract_ms: f64,
    original_verify_ms: f64,
    abstract_verify_ms: f64,
    lift_ms: f64,
}

#[derive(Serialize)]
struct BenchRow {
    schema: u32,
    queries: usize,
    removed_neurons: usize,
    reduction_rate: f64,
    /// Queries proven on the original network through lifting.
    images_verified: usize,
    original_verified: usize,
    abstract_verified: usize,
    original_timed_out: usize,
    abstract_timed_out: usize,
    cluster_counts: ClusterCounts,
    accuracy_test_original: f64,
    accuracy_test_abstract: f64,
    note: &'static str,
    timings: BenchTimings,
}

/// Verifies every query within `budget`; `None` marks a timeout.
fn timed_verify(
    net: &Network,
    queries: &[RobustnessQuery],
    budget: Option<Duration>,
) -> Result<(Vec<Option<Verdict>>, Duration)> {
    let start = Instant::now();
    let verdicts = queries
        .par_iter()
        .map(|q| match budget {
            Some(b) if start.elapsed() > b => Ok(None),
            _ => verify_query(net, q).map(Some),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((verdicts, start.elapsed()))
}

pub fn bench_cmd(args: &BenchArgs) -> Result<()> {
    let budget = match args.timeout_s {
        Some(s) if !(s > 0.0 && s.is_finite()) => {
            return Err(Error::Argument(
                "--timeout-s must be a positive number".into(),
            ))
        }
        s => s.map(Duration::from_secs_f64),
    };
    let net = Network::load(&args.net)?;
    let (train_set, test) = args.data.load_split()?;
    let p = prepare(&net, &train_set, &test, &args.cluster)?;
    let record = &p.record;
    let delta = resolve_delta(&args.delta, net.input_size())?;
    let queries = test_queries(&test, args.count, &delta)?;

    let (original, original_time) = timed_verify(&net, &queries, budget)?;
    let (abstracted, abstract_time) = timed_verify(&record.abstract_net, &queries, budget)?;

    let t = Instant::now();
    let proven: Vec<&RobustnessQuery> = queries
        .iter()
        .zip(&abstracted)
        .filter(|(_, v)| v.as_ref().is_some_and(Verdict::is_robust))
        .map(|(q, _)| q)
        .collect();
    let lifted = proven
        .par_iter()
        .map(|q| abstractnet::lift_proof(&net, record, q).map(|o| o.verdict.is_robust()))
        .collect::<Result<Vec<_>>>()?;
    let lift_time = t.elapsed();

    let count = |vs: &[Option<Verdict>]| {
        vs.iter()
            .filter(|v| v.as_ref().is_some_and(Verdict::is_robust))
            .count()
    };
    let timed_out = |vs: &[Option<Verdict>]| vs.iter().filter(|v| v.is_none()).count();
    emit(&BenchRow {
        schema: SCHEMA,
        queries: queries.len(),
        removed_neurons: removed_neurons(record),
        reduction_rate: reduction_rate(record),
        images_verified: lifted.iter().filter(|&&b| b).count(),
        original_verified: count(&original),
        abstract_verified: count(&abstracted),
        original_timed_out: timed_out(&original),
        abstract_timed_out: timed_out(&abstracted),
        cluster_counts: record.provenance.cluster_counts.clone(),
        accuracy_test_original: accuracy(&net, &test)?,
        accuracy_test_abstract: accuracy(&record.abstract_net, &test)?,
        note: EPSILON_SCOPE_NOTE,
        timings: BenchTimings {
            identify_ms: ms(p.identify),
            abstract_ms: ms(p.abstraction),
            original_verify_ms: ms(original_time),
            abstract_verify_ms: ms(abstract_time),
            lift_ms: ms(lift_time),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_forms() {
        assert_eq!(parse_arch("3x100").unwrap(), vec![100; 3]);
        assert_eq!(parse_arch("20, 10").unwrap(), vec![20, 10]);
        assert!(parse_arch("0x5").is_err());
        assert!(parse_arch("3x0").is_err());
        assert!(parse_arch("a").is_err());
    }
}
