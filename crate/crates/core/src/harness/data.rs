use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    GaussianBlobs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::GaussianBlobs,
            classes: 4,
            samples_per_class: 200,
            input_dim: 16,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Dataset(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.samples_per_class == 0 || self.input_dim == 0 {
            return Err(Error::Dataset("samples_per_class and input_dim must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Dataset(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Feature rows with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label { label, classes });
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        Dataset {
            features: Matrix::new(indices.len(), d, data).expect("row-sized chunks"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

/// Shuffles with `seed` and puts the first ⌊4N/5⌋ samples in the train split.
pub fn split_train_test(data: &Dataset, seed: u64) -> Split {
    let mut order: Vec<usize> = (0..data.len()).collect();
    RngStream::new(seed).shuffle(&mut order);
    let cut = data.len() * 4 / 5;
    Split {
        train: data.subset(&order[..cut]),
        test: data.subset(&order[cut..]),
    }
}

/// Gaussian blobs: class `c` is centred on a seed-derived unit vector scaled
/// by `4σ`, samples add isotropic `N(0, σ²)` noise.
///
/// Draw order on the seed stream: all class means, then samples class by
/// class, then the train/test shuffle.
pub fn gen_blobs(spec: &DatasetSpec) -> Result<Split> {
    spec.validate()?;
    let mut rng = RngStream::new(spec.seed);
    let d = spec.input_dim;
    let sigma = spec.noise_sigma;
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let v = rng.normals(d, 1.0);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| 4.0 * sigma * x / norm).collect()
        })
        .collect();
    let total = spec.classes * spec.samples_per_class;
    let mut data = Vec::with_capacity(total * d);
    let mut labels = Vec::with_capacity(total);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            data.extend(mean.iter().map(|m| m + sigma * rng.next_normal()));
            labels.push(c);
        }
    }
    let all = Dataset::new(Matrix::new(total, d, data)?, labels, spec.classes)?;
    Ok(split_train_test(&all, rng.next_u64()))
}

/// Reads a CSV with header `f0,…,f{D−1},label`. The class count is the
/// largest label plus one.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let header = reader
        .headers()
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?
        .clone();
    let cols = header.len();
    if cols < 2 || &header[cols - 1] != "label" {
        return Err(Error::Dataset("header must end with a `label` column".into()));
    }
    for (i, name) in header.iter().take(cols - 1).enumerate() {
        if name != format!("f{i}") {
            return Err(Error::Dataset(format!("column {i} should be `f{i}`, found `{name}`")));
        }
    }
    let dim = cols - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Dataset(format!("row {}: {e}", line + 1)))?;
        for field in record.iter().take(dim) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Dataset(format!("row {}: bad number `{field}`", line + 1)))?;
            data.push(v);
        }
        let label = record[dim].trim();
        labels.push(
            label
                .parse::<usize>()
                .map_err(|_| Error::Dataset(format!("row {}: bad label `{label}`", line + 1)))?,
        );
    }
    if labels.is_empty() {
        return Err(Error::Dataset(format!("{} has no rows", path.display())));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Dataset::new(Matrix::new(labels.len(), dim, data)?, labels, classes)
}
