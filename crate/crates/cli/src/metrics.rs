//! CSV telemetry. Column order is part of the interface.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use optzoo_core::{Error, Result};

pub const METRICS_COLUMNS: [&str; 10] = [
    "step",
    "epoch",
    "lr",
    "wd",
    "train_loss",
    "global_grad_norm",
    "global_weight_norm",
    "max_block_ratio",
    "test_accuracy",
    "wall_ms",
];

/// One telemetry row. Step rows leave `test_accuracy` empty; the row that
/// closes an epoch carries it and repeats the last step's values.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub wd: f64,
    pub train_loss: f64,
    pub global_grad_norm: f64,
    pub global_weight_norm: f64,
    pub max_block_ratio: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub wall_ms: f64,
}

impl MetricsRow {
    fn record(&self) -> [String; 10] {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        [
            self.step.to_string(),
            self.epoch.to_string(),
            self.lr.to_string(),
            self.wd.to_string(),
            self.train_loss.to_string(),
            self.global_grad_norm.to_string(),
            self.global_weight_norm.to_string(),
            opt(self.max_block_ratio),
            opt(self.test_accuracy),
            format!("{:.3}", self.wall_ms),
        ]
    }
}

pub(crate) fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => io_error(path, source),
        other => io_error(path, std::io::Error::other(format!("{other:?}"))),
    }
}

/// Writes CSV records, flushing after every row so a run that aborts leaves
/// a complete prefix on disk.
pub struct CsvSink {
    path: PathBuf,
    writer: csv::Writer<BufWriter<File>>,
}

impl CsvSink {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
        }
        let file = File::create(path).map_err(|e| io_error(path, e))?;
        let mut writer = csv::Writer::from_writer(BufWriter::new(file));
        writer.write_record(header).map_err(|e| csv_error(path, e))?;
        let mut sink = CsvSink {
            path: path.to_path_buf(),
            writer,
        };
        sink.flush()?;
        Ok(sink)
    }

    pub fn write<I, S>(&mut self, record: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(record).map_err(|e| csv_error(&self.path, e))?;
        self.flush()
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| io_error(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub struct MetricsWriter {
    sink: CsvSink,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(MetricsWriter {
            sink: CsvSink::create(path, &METRICS_COLUMNS)?,
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.sink.write(row.record())
    }
}

/// Reads a metrics CSV back, checking the header.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().ne(METRICS_COLUMNS.iter().copied()) {
        return Err(Error::Ingestion {
            path: path.to_path_buf(),
            reason: format!("unexpected metrics header `{}`", header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let bad = |reason: String| Error::Ingestion {
        path: path.to_path_buf(),
        reason,
    };
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let num = |i: usize| -> Result<f64> { rec[i].parse().map_err(|_| bad(format!("bad `{}` value `{}`", METRICS_COLUMNS[i], &rec[i]))) };
        let opt = |i: usize| -> Result<Option<f64>> { if rec[i].is_empty() { Ok(None) } else { num(i).map(Some) } };
        rows.push(MetricsRow {
            step: rec[0].parse().map_err(|_| bad(format!("bad step `{}`", &rec[0])))?,
            epoch: rec[1].parse().map_err(|_| bad(format!("bad epoch `{}`", &rec[1])))?,
            lr: num(2)?,
            wd: num(3)?,
            train_loss: num(4)?,
            global_grad_norm: num(5)?,
            global_weight_norm: num(6)?,
            max_block_ratio: opt(7)?,
            test_accuracy: opt(8)?,
            wall_ms: num(9)?,
        });
    }
    Ok(rows)
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    let mut f = File::create(path).map_err(|e| io_error(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| io_error(path, e))
}
