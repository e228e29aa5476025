//! Datasets: CIFAR-10 binary files, synthetic Gaussian clusters and label
//! corruption, plus a seeded minibatch iterator.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const CIFAR_PIXELS: usize = 3 * 32 * 32;
pub const CIFAR_RECORD: usize = CIFAR_PIXELS + 1;
pub const CIFAR_CLASSES: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "Dataset::new",
                left: inputs.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let inputs = self.inputs.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Dataset {
            inputs,
            labels,
            num_classes: self.num_classes,
        })
    }

    /// First `n` examples (or all of them if fewer).
    pub fn prefix(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Splits into the first `n_train` examples and the rest.
    pub fn split(&self, n_train: usize) -> Result<(Dataset, Dataset)> {
        if n_train == 0 || n_train >= self.len() {
            return Err(Error::config(format!(
                "cannot split {} examples at {n_train}",
                self.len()
            )));
        }
        let train: Vec<usize> = (0..n_train).collect();
        let test: Vec<usize> = (n_train..self.len()).collect();
        Ok((self.select(&train)?, self.select(&test)?))
    }

    /// Replaces every label with an i.i.d. uniform draw; inputs are untouched.
    pub fn randomize_labels(&self, rng: &mut Rng) -> Dataset {
        let labels = (0..self.len())
            .map(|_| rng.below(self.num_classes))
            .collect();
        Dataset {
            inputs: self.inputs.clone(),
            labels,
            num_classes: self.num_classes,
        }
    }

    /// Standardizes each of `channels` contiguous feature planes to zero mean
    /// and unit variance over the whole dataset.
    pub fn standardize_channels(&self, channels: usize) -> Result<Dataset> {
        let d = self.dim();
        if channels == 0 || d % channels != 0 {
            return Err(Error::config(format!(
                "{d} features do not split into {channels} channels"
            )));
        }
        let plane = d / channels;
        let mut data = self.inputs.data().to_vec();
        for c in 0..channels {
            let cells = || {
                data.chunks_exact(d)
                    .flat_map(move |row| row[c * plane..(c + 1) * plane].iter().copied())
            };
            let count = (self.len() * plane) as Scalar;
            let mean = cells().fold(0.0, |a, v| a + v) / count;
            let var = cells().fold(0.0, |a, v| a + (v - mean) * (v - mean)) / count;
            let std = if var > 0.0 { var.sqrt() } else { 1.0 };
            for row in data.chunks_exact_mut(d) {
                for v in &mut row[c * plane..(c + 1) * plane] {
                    *v = (*v - mean) / std;
                }
            }
        }
        Dataset::new(
            Tensor::new(self.inputs.shape().to_vec(), data)?,
            self.labels.clone(),
            self.num_classes,
        )
    }
}

/// Decodes concatenated CIFAR-10 binary records: one label byte followed by
/// 3072 pixel bytes (R, G, B planes), pixels scaled by 1/255.
pub fn decode_cifar10(bytes: &[u8], path: &Path, limit: Option<usize>) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!(
                "length {} is not a multiple of {CIFAR_RECORD} (truncated record)",
                bytes.len()
            ),
        });
    }
    let mut n = bytes.len() / CIFAR_RECORD;
    if let Some(limit) = limit {
        n = n.min(limit);
    }
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD).take(n).enumerate() {
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("record {i} has label byte {label}"),
            });
        }
        labels.push(label);
        pixels.extend(record[1..].iter().map(|&b| b as Scalar / 255.0));
    }
    if n == 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "no records".into(),
        });
    }
    Dataset::new(
        Tensor::matrix(n, CIFAR_PIXELS, pixels)?,
        labels,
        CIFAR_CLASSES,
    )
}

/// Loads and concatenates CIFAR-10 batch files in order, keeping at most
/// `limit` records overall.
pub fn load_cifar10_binary<P: AsRef<Path>>(paths: &[P], limit: Option<usize>) -> Result<Dataset> {
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let remaining = limit.map(|l| l.saturating_sub(labels.len()));
        if remaining == Some(0) {
            break;
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let part = decode_cifar10(&bytes, path, remaining)?;
        inputs.extend_from_slice(part.inputs.data());
        labels.extend(part.labels);
    }
    if labels.is_empty() {
        return Err(Error::config("no CIFAR-10 files given"));
    }
    Dataset::new(
        Tensor::matrix(labels.len(), CIFAR_PIXELS, inputs)?,
        labels,
        CIFAR_CLASSES,
    )
}

/// Training batch files (`data_batch_*.bin`) found in a CIFAR-10 directory, sorted.
pub fn cifar10_train_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::config(format!(
            "no data_batch_*.bin files in {}",
            dir.display()
        )));
    }
    Ok(files)
}

/// Inverse of [`decode_cifar10`] for image datasets with 3072 features in [0,1].
pub fn encode_cifar10(dataset: &Dataset) -> Result<Vec<u8>> {
    if dataset.dim() != CIFAR_PIXELS || dataset.num_classes > 256 {
        return Err(Error::config("dataset is not CIFAR-10 shaped"));
    }
    let mut out = Vec::with_capacity(dataset.len() * CIFAR_RECORD);
    for (row, &label) in dataset
        .inputs
        .data()
        .chunks_exact(CIFAR_PIXELS)
        .zip(&dataset.labels)
    {
        out.push(label as u8);
        out.extend(row.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    Ok(out)
}

/// Gaussian clusters: class `c` draws from `N(mu_c, I)` with pairwise mean
/// distance at least `separation`. Example `i` gets class `i mod num_classes`.
pub fn synthetic_clusters(
    rng: &mut Rng,
    n: usize,
    d: usize,
    num_classes: usize,
    separation: f64,
) -> Result<Dataset> {
    if n == 0 || d == 0 || num_classes == 0 {
        return Err(Error::config("synthetic_clusters needs n, d, classes > 0"));
    }
    let means = cluster_means(rng, d, num_classes, separation);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % num_classes;
        labels.push(c);
        data.extend(means[c].iter().map(|&m| (m + rng.normal()) as Scalar));
    }
    Dataset::new(Tensor::matrix(n, d, data)?, labels, num_classes)
}

fn cluster_means(rng: &mut Rng, d: usize, classes: usize, separation: f64) -> Vec<Vec<f64>> {
    if separation == 0.0 || classes == 1 {
        return vec![vec![0.0; d]; classes];
    }
    if classes <= d {
        // Scaled basis vectors are exactly `separation` apart.
        let r = separation / std::f64::consts::SQRT_2;
        return (0..classes)
            .map(|c| {
                let mut m = vec![0.0; d];
                m[c] = r;
                m
            })
            .collect();
    }
    let mut means: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..d).map(|_| rng.normal()).collect())
        .collect();
    let mut min_dist = f64::INFINITY;
    for a in 0..classes {
        for b in a + 1..classes {
            let dist = means[a]
                .iter()
                .zip(&means[b])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            min_dist = min_dist.min(dist);
        }
    }
    let factor = separation / min_dist;
    for m in &mut means {
        for v in m.iter_mut() {
            *v *= factor;
        }
    }
    means
}

/// Endless minibatch stream. Epoch `e` visits the dataset in the order of a
/// permutation determined only by `(seed, e)`; batches run across epoch
/// boundaries so every epoch covers each index exactly once.
#[derive(Debug)]
pub struct BatchIterator<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    rng: Rng,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl<'a> BatchIterator<'a> {
    pub fn new(dataset: &'a Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || dataset.is_empty() {
            return Err(Error::config("batch size and dataset must be non-empty"));
        }
        let rng = Rng::new(seed).fork(0xBA7C);
        let order = epoch_order(&rng, 0, dataset.len());
        Ok(Self {
            dataset,
            batch_size,
            rng,
            epoch: 0,
            order,
            pos: 0,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.pos == self.order.len() {
                self.epoch += 1;
                self.order = epoch_order(&self.rng, self.epoch, self.dataset.len());
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }

    pub fn next_batch(&mut self) -> Result<(Tensor, Vec<usize>)> {
        let idx = self.next_indices();
        let x = self.dataset.inputs.select_rows(&idx)?;
        let y = idx.iter().map(|&i| self.dataset.labels[i]).collect();
        Ok((x, y))
    }
}

fn epoch_order(rng: &Rng, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.fork(epoch).shuffle(&mut order);
    order
}
