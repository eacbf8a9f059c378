//! Input sets, labeled datasets, and activation collection.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::network::Network;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

static DIGITS_CSV_GZ: &[u8] = include_bytes!("../data/digits8x8.csv.gz");

/// A non-empty set of equally sized input vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSet {
    rows: Vec<Vec<f64>>,
}

impl InputSet {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let width = rows
            .first()
            .ok_or_else(|| Error::Validation("input set is empty".into()))?
            .len();
        if let Some(i) = rows.iter().position(|r| r.len() != width) {
            return Err(Error::shape(format!("input {i}"), width, rows[i].len()));
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn width(&self) -> usize {
        self.rows[0].len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    /// First `n` inputs (or all of them if fewer).
    pub fn truncated(&self, n: usize) -> InputSet {
        InputSet {
            rows: self.rows[..n.clamp(1, self.rows.len())].to_vec(),
        }
    }

    /// SHA-256 over the bit patterns of every entry, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.rows.len() as u64).to_le_bytes());
        hasher.update((self.width() as u64).to_le_bytes());
        for v in self.rows.iter().flatten() {
            hasher.update(v.to_bits().to_le_bytes());
        }
        format!("{:x}", hasher.finalize())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: InputSet,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(inputs: InputSet, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Validation(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn inputs(&self) -> &InputSet {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<LabeledDataset> {
        let rows = indices
            .iter()
            .map(|&i| self.inputs.rows[i].clone())
            .collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        LabeledDataset::new(InputSet::new(rows)?, labels)
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Result<LabeledDataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Seeded shuffle-and-split; the second part holds `round(fraction * N)`
    /// samples. Both parts must end up non-empty.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        let n_second = (fraction * self.len() as f64).round() as usize;
        if !(0.0..1.0).contains(&fraction) || n_second == 0 || n_second >= self.len() {
            return Err(Error::Argument(format!(
                "split fraction {fraction} of {} samples leaves an empty part",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (first, second) = idx.split_at(self.len() - n_second);
        Ok((self.subset(first)?, self.subset(second)?))
    }
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    if path.extension().is_some_and(|ext| ext == "gz") {
        Ok(Box::new(GzDecoder::new(reader)))
    } else {
        Ok(Box::new(reader))
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    open_maybe_gz(path)?
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

struct IdxCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl IdxCursor<'_> {
    fn u32(&mut self) -> Result<u32> {
        let chunk = self.take(4)?;
        Ok(u32::from_be_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]))
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                message: format!(
                    "truncated: needed {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let magic = self.u32()?;
        if magic != expected {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                message: format!("bad magic 0x{magic:08x}, expected 0x{expected:08x}"),
            });
        }
        Ok(())
    }
}

/// Reads an IDX image/label pair (optionally `.gz`). Pixels are scaled to
/// `[0, 1]` and images are flattened row-major.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<LabeledDataset> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let image_bytes = read_all(images_path)?;
    let label_bytes = read_all(labels_path)?;

    let mut cur = IdxCursor {
        bytes: &image_bytes,
        pos: 0,
        path: images_path,
    };
    cur.magic(IDX_IMAGES_MAGIC)?;
    let count = cur.u32()? as usize;
    let rows = cur.u32()? as usize;
    let cols = cur.u32()? as usize;
    let pixels = cur.take(count * rows * cols)?;
    let images: Vec<Vec<f64>> = pixels
        .chunks(rows * cols)
        .map(|img| img.iter().map(|&p| f64::from(p) / 255.0).collect())
        .collect();

    let mut cur = IdxCursor {
        bytes: &label_bytes,
        pos: 0,
        path: labels_path,
    };
    cur.magic(IDX_LABELS_MAGIC)?;
    let label_count = cur.u32()? as usize;
    if label_count != count {
        return Err(Error::Validation(format!(
            "{count} images but {label_count} labels"
        )));
    }
    let labels = cur.take(label_count)?.iter().map(|&l| l as usize).collect();
    LabeledDataset::new(InputSet::new(images)?, labels)
}

/// Reads `label, v1, ..., vn` rows (optionally `.gz`). A first row whose
/// leading token is not numeric is treated as a header. Values are not scaled.
/// With `n_inputs` unset, the width is taken from the first data row.
pub fn load_csv(path: impl AsRef<Path>, n_inputs: Option<usize>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    parse_csv(
        BufReader::new(open_maybe_gz(path)?),
        n_inputs,
        &path.display().to_string(),
    )
}

pub fn parse_csv(
    reader: impl Read,
    n_inputs: Option<usize>,
    source_name: &str,
) -> Result<LabeledDataset> {
    let parse_err = |line: u64, message: String| Error::Parse {
        source_name: source_name.to_string(),
        message: format!("line {line}: {message}"),
    };
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut n_inputs = n_inputs;
    for (i, record) in csv.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            message: e.to_string(),
        })?;
        let line_no = record.position().map_or(i as u64 + 1, |p| p.line());
        let mut fields = record.iter();
        let first = fields.next().unwrap_or_default();
        if i == 0 && first.parse::<f64>().is_err() {
            continue;
        }
        let label: usize = first.parse().map_err(|_| {
            parse_err(
                line_no,
                format!("label {first:?} is not a non-negative integer"),
            )
        })?;
        let values = fields
            .enumerate()
            .map(|(j, f)| {
                f.parse::<f64>().map_err(|_| {
                    parse_err(line_no, format!("field {}: {f:?} is not a number", j + 2))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let expected = *n_inputs.get_or_insert(values.len());
        if values.len() != expected {
            return Err(parse_err(
                line_no,
                format!(
                    "expected {expected} values after the label, found {}",
                    values.len()
                ),
            ));
        }
        rows.push(values);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            source_name: source_name.to_string(),
            message: "no data rows".into(),
        });
    }
    LabeledDataset::new(InputSet::new(rows)?, labels)
}

/// The bundled 8x8 handwritten digits (1797 samples, 64 inputs in `[0, 1]`,
/// labels 0-9).
pub fn bundled_digits() -> LabeledDataset {
    parse_csv(
        BufReader::new(GzDecoder::new(DIGITS_CSV_GZ)),
        Some(64),
        "bundled digits",
    )
    .expect("bundled digits parse")
}

/// Fraction of samples whose argmax label matches.
pub fn accuracy(net: &Network, ds: &LabeledDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Validation("accuracy over an empty dataset".into()));
    }
    if ds.inputs.width() != net.input_size() {
        return Err(Error::shape(
            "dataset inputs",
            net.input_size(),
            ds.inputs.width(),
        ));
    }
    let correct: usize = ds
        .inputs
        .rows
        .par_iter()
        .zip(ds.labels.par_iter())
        .map(|(x, &y)| usize::from(net.classify(x).expect("width checked") == y))
        .sum();
    Ok(correct as f64 / ds.len() as f64)
}

/// Activation vectors of one layer over an input set: row `i` holds neuron
/// `i`'s activation on every input, column `j` comes from input `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    pub layer: usize,
    pub values: Matrix,
}

impl ActivationMatrix {
    pub fn num_neurons(&self) -> usize {
        self.values.rows()
    }

    pub fn num_inputs(&self) -> usize {
        self.values.cols()
    }

    pub fn neuron(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }
}

pub fn collect_activations(
    net: &Network,
    inputs: &InputSet,
    layer: usize,
) -> Result<ActivationMatrix> {
    if !net.hidden_layers().contains(&layer) {
        return Err(Error::Argument(format!(
            "layer {layer} is not a hidden layer (hidden layers are {:?})",
            net.hidden_layers()
        )));
    }
    if inputs.width() != net.input_size() {
        return Err(Error::shape("input set", net.input_size(), inputs.width()));
    }
    let columns: Vec<Vec<f64>> = inputs
        .rows
        .par_iter()
        .map(|x| {
            net.forward_trace(x)
                .expect("width checked")
                .activations
                .swap_remove(layer)
        })
        .collect();
    let n = net.layer_sizes()[layer];
    let mut values = Matrix::zeros(n, columns.len());
    for (j, col) in columns.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            values.set(i, j, v);
        }
    }
    Ok(ActivationMatrix { layer, values })
}
