//! Datasets, loaders and client partitioning.

mod idx;
mod partition;

pub use idx::{load_idx, parse_idx_images, parse_idx_labels};
pub use partition::{dirichlet_partition, iid_partition, ClientSplit, Partition};

use std::path::Path;

use ndarray::{Array2, Axis};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::losses::LabelProportions;
use crate::rng::{self, Stream};
use crate::scalar::Scalar;

/// Feature matrix with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    features: Array2<T>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(features: Array2<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if features.nrows() != labels.len() {
            return Err(Error::shape("dataset rows", labels.len(), features.nrows()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidLabel {
                label: bad,
                reason: "outside [0, C)",
            });
        }
        Ok(Self {
            features,
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
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Array2<T> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Gather rows `indices` into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Array2<T>, Vec<usize>) {
        let x = self.features.select(Axis(0), indices);
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    /// Row subset as a standalone dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (x, y) = self.batch(indices);
        Self::new(x, y, self.num_classes)
    }

    pub fn class_counts(&self, indices: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &i in indices {
            counts[self.labels[i]] += 1;
        }
        counts
    }

    /// Normalized class histogram of the rows in `indices`.
    pub fn label_proportions(&self, indices: &[usize]) -> Result<LabelProportions<T>> {
        if indices.is_empty() {
            return Err(Error::Empty("index set"));
        }
        LabelProportions::from_counts(&self.class_counts(indices))
    }
}

/// Class-mean lattice: class `c < d` sits at `+e_c`, `d <= c < 2d` at `-e_{c-d}`.
pub fn blob_mean(class: usize, dim: usize) -> Vec<f64> {
    let mut mean = vec![0.0; dim];
    if class < dim {
        mean[class] = 1.0;
    } else {
        mean[class - dim] = -1.0;
    }
    mean
}

/// Isotropic Gaussian clusters, `per_class` samples per class, class-major order.
pub fn synth_blobs<T: Scalar>(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    if num_classes == 0 || dim == 0 || per_class == 0 {
        return Err(Error::InvalidArgument("blob sizes must be positive".into()));
    }
    if num_classes > 2 * dim {
        return Err(Error::InvalidArgument(format!(
            "{num_classes} classes exceed the lattice capacity 2*dim = {}",
            2 * dim
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidArgument("spread must be finite and >= 0".into()));
    }
    let noise = Normal::new(0.0, spread).expect("validated spread");
    let mut rng = rng::derive(seed, Stream::Data, &[num_classes as u64, dim as u64]);
    let n = num_classes * per_class;
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for c in 0..num_classes {
        let mean = blob_mean(c, dim);
        for k in 0..per_class {
            let mut row = features.row_mut(c * per_class + k);
            for (x, m) in row.iter_mut().zip(&mean) {
                let e = if spread == 0.0 { 0.0 } else { noise.sample(&mut rng) };
                *x = T::of(m + e);
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels, num_classes)
}

/// CSV with a header row; the last column is the integer class label.
pub fn load_csv<T: Scalar>(path: &Path, num_classes: Option<usize>) -> Result<Dataset<T>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut rows: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let fields: Vec<&str> = record.iter().collect();
        if fields.len() < 2 {
            return Err(Error::InvalidArgument(format!("{}: row {line} has fewer than 2 columns", path.display())));
        }
        let d = fields.len() - 1;
        if *width.get_or_insert(d) != d {
            return Err(Error::shape("csv row width", width.unwrap_or(d), d));
        }
        for f in &fields[..d] {
            rows.push(f.trim().parse().map_err(|_| {
                Error::InvalidArgument(format!("{}: row {line}: bad number `{f}`", path.display()))
            })?);
        }
        let label: usize = fields[d].trim().parse().map_err(|_| {
            Error::InvalidArgument(format!("{}: row {line}: bad label `{}`", path.display(), fields[d]))
        })?;
        labels.push(label);
    }
    let d = width.ok_or(Error::Empty("csv dataset"))?;
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let features = Array2::from_shape_vec((labels.len(), d), rows.into_iter().map(T::of).collect())
        .expect("rows sized by construction");
    Dataset::new(features, labels, classes)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::InvalidArgument(format!("{}: {e}", path.display()))
}
