use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use abstractnet::data::{bundled_digits, load_csv, load_idx};
use abstractnet::{ClusterCounts, Error, LabeledDataset, Result, RobustnessQuery};
use clap::{Args, ValueEnum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataFormat {
    Idx,
    Csv,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// IDX image file, CSV file (`label,v1,...,vn` rows), or `digits` for
    /// the bundled 8x8 digits. `.gz` files are decompressed.
    #[arg(long, default_value = "digits")]
    pub data: String,

    /// IDX label file paired with `--data`.
    #[arg(long)]
    pub labels: Option<PathBuf>,

    /// Defaults to `csv` for `.csv`/`.csv.gz` paths and `idx` otherwise.
    #[arg(long, value_enum)]
    pub format: Option<DataFormat>,

    /// Values per CSV row after the label; taken from the first row if omitted.
    #[arg(long)]
    pub inputs: Option<usize>,

    /// Fraction of the dataset held out as the test split.
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,

    /// Seed of the train/test split (kept separate from `--seed` so every
    /// command sees the same split).
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

impl DataArgs {
    pub fn load(&self) -> Result<LabeledDataset> {
        if self.data == "digits" {
            return Ok(bundled_digits());
        }
        let path = Path::new(&self.data);
        let format = self.format.unwrap_or_else(|| {
            let name = self.data.to_ascii_lowercase();
            if name.ends_with(".csv") || name.ends_with(".csv.gz") {
                DataFormat::Csv
            } else {
                DataFormat::Idx
            }
        });
        match format {
            DataFormat::Csv => load_csv(path, self.inputs),
            DataFormat::Idx => {
                let labels = self
                    .labels
                    .as_ref()
                    .ok_or_else(|| Error::Argument("--labels is required for IDX data".into()))?;
                load_idx(path, labels)
            }
        }
    }

    /// `(train, test)`.
    pub fn load_split(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        self.load()?.split(self.test_fraction, self.split_seed)
    }
}

/// Parses `1:80,2:77` into hidden layer -> cluster count.
pub fn parse_cluster_counts(text: &str) -> Result<ClusterCounts> {
    let mut counts = BTreeMap::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (layer, k) = part
            .split_once(':')
            .ok_or_else(|| Error::Argument(format!("expected layer:count, got {part:?}")))?;
        let layer: usize = layer
            .trim()
            .parse()
            .map_err(|_| Error::Argument(format!("bad layer index {layer:?}")))?;
        let k: usize = k
            .trim()
            .parse()
            .map_err(|_| Error::Argument(format!("bad cluster count {k:?}")))?;
        if counts.insert(layer, k).is_some() {
            return Err(Error::Argument(format!("layer {layer} given twice")));
        }
    }
    Ok(counts)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// A JSON array, or numbers separated by commas or whitespace.
pub fn read_vector(path: &Path) -> Result<Vec<f64>> {
    let text = read_text(path)?;
    let source_name = path.display().to_string();
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).map_err(|e| Error::Parse {
            source_name,
            message: e.to_string(),
        });
    }
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>().map_err(|_| Error::Parse {
                source_name: source_name.clone(),
                message: format!("{t:?} is not a number"),
            })
        })
        .collect()
}

/// `--delta`: a scalar broadcast to every input, or a file with one radius
/// per input.
pub fn resolve_delta(arg: &str, width: usize) -> Result<Vec<f64>> {
    let delta = match arg.trim().parse::<f64>() {
        Ok(v) => vec![v; width],
        Err(_) => read_vector(Path::new(arg))?,
    };
    if delta.len() != width {
        return Err(Error::Argument(format!(
            "perturbation has {} entries, network takes {width} inputs",
            delta.len()
        )));
    }
    Ok(delta)
}

/// Queries around the first `count` test inputs.
pub fn test_queries(
    test: &LabeledDataset,
    count: usize,
    delta: &[f64],
) -> Result<Vec<RobustnessQuery>> {
    if count == 0 {
        return Err(Error::Argument("--count must be at least 1".into()));
    }
    test.inputs()
        .rows()
        .iter()
        .take(count)
        .map(|x| RobustnessQuery::new(x.clone(), delta.to_vec()))
        .collect()
}
