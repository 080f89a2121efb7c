//! Datasets: CIFAR-10 binary batches, random orthogonal projection, and a
//! synthetic anisotropic Gaussian classification task.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{qr_orthonormal, Matrix, Vector};

pub const CIFAR_IMAGE_BYTES: usize = 3072;
pub const CIFAR_RECORD_BYTES: usize = 1 + CIFAR_IMAGE_BYTES;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Mean separation of the synthetic class centres in whitened units. With
/// 10 classes in 256 dimensions the nearest-mean (Bayes) accuracy is about 0.67.
pub const SYNTHETIC_SEPARATION: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One row per example.
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, split: Split) -> Result<Self> {
        if features.nrows() == 0 || features.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} rows with {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        Ok(Dataset {
            features,
            labels,
            split,
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

    pub fn batch(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        (
            self.features.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Column means, used to centre both splits with the training statistics.
    pub fn feature_means(&self) -> Vector {
        self.features.row_mean().transpose()
    }

    pub fn subtract_means(&mut self, means: &Vector) {
        for (j, mut col) in self.features.column_iter_mut().enumerate() {
            col.add_scalar_mut(-means[j]);
        }
    }
}

/// Reads one CIFAR-10 binary batch: records of one label byte followed by
/// 3072 pixel bytes (R, G, B planes, each 32x32 row-major). Pixels are
/// scaled to `[0, 1]` and kept in file order.
pub fn read_cifar_batch(path: &Path, expected_records: Option<usize>, split: Split) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::Ingestion {
            path: path.to_path_buf(),
            reason: format!(
                "{} bytes is not a whole number of {CIFAR_RECORD_BYTES}-byte records",
                bytes.len()
            ),
        });
    }
    let records = bytes.len() / CIFAR_RECORD_BYTES;
    if let Some(expected) = expected_records {
        if records != expected {
            return Err(Error::Ingestion {
                path: path.to_path_buf(),
                reason: format!("expected {expected} records, found {records}"),
            });
        }
    }
    let mut labels = Vec::with_capacity(records);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(Error::CorruptLabel {
                path: path.to_path_buf(),
                record: r,
                label: rec[0],
            });
        }
        labels.push(rec[0] as usize);
    }
    let features = Matrix::from_row_iterator(
        records,
        CIFAR_IMAGE_BYTES,
        bytes
            .chunks_exact(CIFAR_RECORD_BYTES)
            .flat_map(|rec| rec[1..].iter().map(|&p| p as f64 / 255.0)),
    );
    Dataset::new(features, labels, split)
}

/// Loads the five training batches and the test batch from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let parts = CIFAR_TRAIN_FILES
        .iter()
        .map(|f| read_cifar_batch(&dir.join(f), Some(CIFAR_RECORDS_PER_FILE), Split::Train))
        .collect::<Result<Vec<_>>>()?;
    let rows: usize = parts.iter().map(Dataset::len).sum();
    let mut features = Matrix::zeros(rows, CIFAR_IMAGE_BYTES);
    let mut labels = Vec::with_capacity(rows);
    let mut offset = 0;
    for p in parts {
        features.rows_mut(offset, p.len()).copy_from(&p.features);
        offset += p.len();
        labels.extend(p.labels);
    }
    let train = Dataset::new(features, labels, Split::Train)?;
    let test = read_cifar_batch(&dir.join(CIFAR_TEST_FILE), Some(CIFAR_RECORDS_PER_FILE), Split::Test)?;
    Ok((train, test))
}

pub fn cifar_available(dir: &Path) -> bool {
    CIFAR_TRAIN_FILES
        .iter()
        .chain(std::iter::once(&CIFAR_TEST_FILE))
        .all(|f| dir.join(f).is_file())
}

/// Seeded `d_orig x d_target` matrix with orthonormal columns.
pub fn random_orthonormal(d_orig: usize, d_target: usize, seed: u64) -> Result<Matrix> {
    if d_target > d_orig || d_target == 0 {
        return Err(Error::Shape(format!(
            "cannot project {d_orig} dimensions onto {d_target}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = Matrix::from_fn(d_orig, d_target, |_, _| StandardNormal.sample(&mut rng));
    qr_orthonormal(&m)
}

/// Projects rows of `x` with a seeded random orthonormal basis. Returns the
/// projected features and the basis so the same map can be applied to
/// other splits.
pub fn jl_project(x: &Matrix, d_target: usize, seed: u64) -> Result<(Matrix, Matrix)> {
    let q = random_orthonormal(x.ncols(), d_target, seed)?;
    Ok((x * &q, q))
}

/// Class-conditional Gaussians sharing a covariance whose eigenvalues are
/// geometrically spaced from 1 down to `1/κ` in a random orthonormal basis.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub dim: usize,
    pub classes: usize,
    pub condition: f64,
    /// Square root of the shared covariance.
    pub cov_sqrt: Matrix,
    /// Class centres, one row per class.
    pub means: Matrix,
}

impl SyntheticTask {
    pub fn new(dim: usize, classes: usize, condition: f64, seed: u64) -> Result<Self> {
        if condition < 1.0 || dim == 0 || classes == 0 {
            return Err(Error::Config(format!(
                "synthetic task needs dim, classes > 0 and condition >= 1 (got {dim}, {classes}, {condition})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = qr_orthonormal(&Matrix::from_fn(dim, dim, |_, _| StandardNormal.sample(&mut rng)))?;
        let scales = Vector::from_fn(dim, |k, _| {
            if dim == 1 {
                1.0
            } else {
                condition.powf(-(k as f64) / (dim - 1) as f64).sqrt()
            }
        });
        let cov_sqrt = &basis * Matrix::from_diagonal(&scales) * basis.transpose();
        let spread = SYNTHETIC_SEPARATION / (dim as f64).sqrt();
        let white = Matrix::from_fn(classes, dim, |_, _| {
            spread * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let means = white * &cov_sqrt;
        Ok(SyntheticTask {
            dim,
            classes,
            condition,
            cov_sqrt,
            means,
        })
    }

    /// Draws `n` examples with balanced labels (`i mod classes`).
    pub fn sample(&self, n: usize, seed: u64, split: Split) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Matrix::from_fn(n, self.dim, |_, _| StandardNormal.sample(&mut rng));
        let labels: Vec<usize> = (0..n).map(|i| i % self.classes).collect();
        let mut features = noise * &self.cov_sqrt;
        for (i, &c) in labels.iter().enumerate() {
            let mut row = features.row_mut(i);
            row += self.means.row(c);
        }
        Dataset::new(features, labels, split)
    }
}

pub fn synthetic_anisotropic(n: usize, d: usize, classes: usize, condition: f64, seed: u64) -> Result<Dataset> {
    SyntheticTask::new(d, classes, condition, seed)?.sample(n, seed.wrapping_add(1), Split::Train)
}

fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Shuffled mini-batch indices for one epoch. The final short batch is kept.
pub fn batch_iter(n: usize, batch_size: usize, epoch: u64, seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch));
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
