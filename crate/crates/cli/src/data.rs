//! Resolving the configured data source into centred train/test splits, and
//! the projected-dataset file format written by `project`.

use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use optzoo_core::problems::data::{
    cifar_available, load_cifar10, random_orthonormal, Dataset, Split, SyntheticTask, CIFAR_CLASSES,
};
use optzoo_core::{Error, Matrix, Result};

use crate::config::{DataConfig, DataSource};
use crate::metrics::io_error;

/// Environment variable consulted when `data.dir` is unset.
pub const CIFAR_DIR_ENV: &str = "OPTZOO_CIFAR10_DIR";

const PROJECTED_MAGIC: &[u8; 8] = b"OPTZPRJ1";

#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Dataset,
    pub test: Dataset,
    pub classes: usize,
    /// Human-readable origin, echoed into run summaries.
    pub origin: String,
}

impl TrainData {
    pub fn dim(&self) -> usize {
        self.train.dim()
    }
}

fn cifar_dir(cfg: &DataConfig) -> Option<PathBuf> {
    cfg.dir
        .clone()
        .or_else(|| std::env::var_os(CIFAR_DIR_ENV).map(PathBuf::from))
}

/// Loads the configured source. Both splits are centred with the training
/// means.
pub fn load(cfg: &DataConfig) -> Result<TrainData> {
    let mut data = match cfg.source {
        DataSource::Synthetic => synthetic(cfg)?,
        DataSource::Cifar10 => {
            let dir = cifar_dir(cfg).ok_or_else(|| {
                Error::Config(format!("data.source = cifar10 needs data.dir or {CIFAR_DIR_ENV}"))
            })?;
            cifar(&dir, cfg)?
        }
        DataSource::Auto => match cifar_dir(cfg) {
            Some(dir) if cifar_available(&dir) => cifar(&dir, cfg)?,
            _ => synthetic(cfg)?,
        },
        DataSource::Projected => {
            let path = cfg
                .dir
                .clone()
                .ok_or_else(|| Error::Config("data.source = projected needs data.dir naming the file".into()))?;
            let (train, test) = read_projected(&path)?;
            let classes = train.labels.iter().chain(&test.labels).max().map_or(1, |m| m + 1);
            TrainData {
                train,
                test,
                classes,
                origin: format!("projected file {}", path.display()),
            }
        }
    };
    let means = data.train.feature_means();
    data.train.subtract_means(&means);
    data.test.subtract_means(&means);
    Ok(data)
}

fn synthetic(cfg: &DataConfig) -> Result<TrainData> {
    let task = SyntheticTask::new(cfg.projection_dim, cfg.classes, cfg.condition, cfg.seed)?;
    let train = task.sample(cfg.n_train, cfg.seed.wrapping_add(1), Split::Train)?;
    let test = task.sample(cfg.n_test, cfg.seed.wrapping_add(2), Split::Test)?;
    Ok(TrainData {
        train,
        test,
        classes: cfg.classes,
        origin: format!(
            "synthetic-anisotropic d={} classes={} condition={}",
            cfg.projection_dim, cfg.classes, cfg.condition
        ),
    })
}

fn cifar(dir: &Path, cfg: &DataConfig) -> Result<TrainData> {
    let (train, test) = project_pair(load_cifar10(dir)?, cfg.projection_dim, cfg.seed)?;
    Ok(TrainData {
        train,
        test,
        classes: CIFAR_CLASSES,
        origin: format!("cifar10 {} projected to d={}", dir.display(), cfg.projection_dim),
    })
}

/// Projects both splits with one seeded orthonormal basis.
pub fn project_pair((train, test): (Dataset, Dataset), dim: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let q = random_orthonormal(train.dim(), dim, seed)?;
    let tr = Dataset::new(&train.features * &q, train.labels, Split::Train)?;
    let te = Dataset::new(&test.features * &q, test.labels, Split::Test)?;
    Ok((tr, te))
}

/// Reads CIFAR-10 from `in_dir`, projects to `dim` and writes both splits
/// to `out_file`.
pub fn run_project(in_dir: &Path, out_file: &Path, dim: usize, seed: u64) -> Result<()> {
    let (train, test) = project_pair(load_cifar10(in_dir)?, dim, seed)?;
    write_projected(out_file, &train, &test)
}

/// Layout: magic, then `dim`, `n_train`, `n_test` as little-endian u64,
/// then per example one label byte followed by `dim` little-endian f64.
pub fn write_projected(path: &Path, train: &Dataset, test: &Dataset) -> Result<()> {
    if train.dim() != test.dim() {
        return Err(Error::Shape("train and test dimensions differ".into()));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| io_error(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| io_error(path, e));
    put(PROJECTED_MAGIC)?;
    for n in [train.dim(), train.len(), test.len()] {
        put(&(n as u64).to_le_bytes())?;
    }
    for ds in [train, test] {
        for (i, &label) in ds.labels.iter().enumerate() {
            let label = u8::try_from(label).map_err(|_| Error::Shape(format!("label {label} does not fit a byte")))?;
            put(&[label])?;
            for v in ds.features.row(i).iter() {
                put(&v.to_le_bytes())?;
            }
        }
    }
    w.flush().map_err(|e| io_error(path, e))
}

pub fn read_projected(path: &Path) -> Result<(Dataset, Dataset)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_error(path, e))?;
    let bad = |reason: &str| Error::Ingestion {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 32 || &bytes[..8] != PROJECTED_MAGIC {
        return Err(bad("not a projected dataset file"));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes")) as usize;
    let (dim, n_train, n_test) = (word(0), word(1), word(2));
    let record = 1 + 8 * dim;
    if dim == 0 || bytes.len() != 32 + record * (n_train + n_test) {
        return Err(bad("file length does not match its header"));
    }
    let mut offset = 32;
    let mut split = |n: usize, which: Split| -> Result<Dataset> {
        let mut labels = Vec::with_capacity(n);
        let mut feats = Matrix::zeros(n, dim);
        for i in 0..n {
            labels.push(bytes[offset] as usize);
            for j in 0..dim {
                let at = offset + 1 + 8 * j;
                feats[(i, j)] = f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
            }
            offset += record;
        }
        Dataset::new(feats, labels, which)
    };
    let train = split(n_train, Split::Train)?;
    let test = split(n_test, Split::Test)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projected_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let tr = Dataset::new(Matrix::from_fn(3, 2, |i, j| i as f64 - 0.5 * j as f64), vec![0, 1, 2], Split::Train).unwrap();
        let te = Dataset::new(Matrix::from_fn(1, 2, |_, j| j as f64 + 0.25), vec![9], Split::Test).unwrap();
        write_projected(&path, &tr, &te).unwrap();
        let (a, b) = read_projected(&path).unwrap();
        assert_eq!(a.features, tr.features);
        assert_eq!(a.labels, tr.labels);
        assert_eq!(b.features, te.features);
        assert_eq!(b.labels, te.labels);
    }

    #[test]
    fn truncated_projected_file_is_an_ingestion_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let tr = Dataset::new(Matrix::zeros(2, 2), vec![0, 1], Split::Train).unwrap();
        write_projected(&path, &tr, &tr).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_projected(&path), Err(Error::Ingestion { .. })));
    }

    #[test]
    fn synthetic_splits_are_centred_on_training_means() {
        let cfg = crate::config::ExperimentConfig::defaults(crate::config::ExperimentKind::Train, 4).data;
        let cfg = DataConfig {
            source: DataSource::Synthetic,
            projection_dim: 8,
            n_train: 200,
            n_test: 50,
            ..cfg
        };
        let d = load(&cfg).unwrap();
        assert!(d.train.feature_means().amax() < 1e-12);
        assert_eq!(d.test.len(), 50);
    }
}
