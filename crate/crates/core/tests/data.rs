//! Data ingestion against a fixture written by an independent reader, the
//! projection distortion band, and the synthetic task's covariance.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use optzoo_core::linalg::sym_eig;
use optzoo_core::problems::data::{batch_iter, random_orthonormal, read_cifar_batch, Split, SyntheticTask};
use optzoo_core::{Error, Matrix};

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/cifar_tiny.bin")
}

/// Label, pixel sum, index-weighted pixel sum and four raw pixel bytes
/// (channel starts and the last byte), produced by a separate Python reader.
const FIXTURE_RECORDS: [(usize, f64, f64, [u8; 4]); 3] = [
    (9, 1553.5803921568645, 2379045.870588233, [221, 189, 25, 22]),
    (7, 1522.2549019607827, 2315471.317647062, [107, 155, 204, 237]),
    (7, 1566.5254901960789, 2369921.4862745106, [139, 136, 72, 172]),
];

#[test]
fn cifar_reader_matches_independent_fixture() {
    let ds = read_cifar_batch(&fixture(), Some(3), Split::Test).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.dim(), 3072);
    for (r, (label, sum, weighted, bytes)) in FIXTURE_RECORDS.iter().enumerate() {
        let row = ds.features.row(r);
        assert_eq!(ds.labels[r], *label);
        assert!((row.sum() - sum).abs() < 1e-9);
        let w: f64 = row.iter().enumerate().map(|(k, p)| k as f64 * p).sum();
        assert!((w - weighted).abs() < 1e-6);
        for (idx, b) in [0, 1024, 2048, 3071].into_iter().zip(bytes) {
            assert_eq!(row[idx], *b as f64 / 255.0);
        }
    }
}

#[test]
fn cifar_reader_rejects_malformed_files() {
    let bytes = std::fs::read(fixture()).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let short = dir.path().join("short.bin");
    std::fs::write(&short, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(read_cifar_batch(&short, None, Split::Train), Err(Error::Ingestion { .. })));

    assert!(matches!(
        read_cifar_batch(&fixture(), Some(10_000), Split::Train),
        Err(Error::Ingestion { .. })
    ));

    let mut corrupt = bytes.clone();
    corrupt[3073] = 12;
    let path = dir.path().join("corrupt.bin");
    std::fs::write(&path, corrupt).unwrap();
    match read_cifar_batch(&path, None, Split::Train) {
        Err(Error::CorruptLabel { record, label, .. }) => assert_eq!((record, label), (1, 12)),
        other => panic!("expected a corrupt-label error, got {other:?}"),
    }
}

/// Largest distortion of 1000 pairwise distances after an orthonormal
/// projection from 3072 to 256 dimensions, rescaled by `sqrt(3072/256)`.
/// A numpy run over 40 seeds on uniform pixel-like data peaked at 0.191.
#[test]
fn projection_distortion_stays_in_band() {
    const BAND: f64 = 0.20;
    let (d, k) = (3072, 256);
    let q = random_orthonormal(d, k, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Matrix::from_fn(2000, d, |_, _| rng.random::<f64>());
    let diff = x.rows(0, 1000) - x.rows(1000, 1000);
    let projected = &diff * &q;
    let scale = (d as f64 / k as f64).sqrt();
    let worst = (0..1000)
        .map(|i| (scale * projected.row(i).norm() / diff.row(i).norm() - 1.0).abs())
        .fold(0.0, f64::max);
    assert!(worst <= BAND, "distortion {worst}");
}

#[test]
fn synthetic_noise_covariance_has_requested_condition() {
    let task = SyntheticTask::new(6, 3, 100.0, 8).unwrap();
    let n = 60_000;
    let ds = task.sample(n, 9, Split::Train).unwrap();
    let mut noise = ds.features.clone();
    for (i, &c) in ds.labels.iter().enumerate() {
        let mut row = noise.row_mut(i);
        row -= task.means.row(c);
    }
    let cov = noise.tr_mul(&noise) / n as f64;
    let eig = sym_eig(&cov).unwrap().eigenvalues;
    let ratio = eig.max() / eig.min();
    // Each eigenvalue has relative sampling error about sqrt(2/n).
    let tol = 6.0 * (2.0 / n as f64).sqrt();
    assert!((ratio / 100.0 - 1.0).abs() <= tol, "condition {ratio}");
}

#[test]
fn batches_replay_and_partition() {
    for (n, b) in [(10, 3), (128, 128), (1000, 128), (7, 1)] {
        let first = batch_iter(n, b, 2, 99);
        assert_eq!(first, batch_iter(n, b, 2, 99));
        assert_ne!(batch_iter(n, b, 3, 99), first, "epochs should reshuffle ({n}, {b})");
        let mut all: Vec<usize> = first.concat();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
        assert_eq!(first.len(), n.div_ceil(b));
    }
}
