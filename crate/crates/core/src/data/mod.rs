//! Tabular data ingestion, standardization, synthetic shift streams, and the
//! on-disk stream layout.

pub mod schema;
pub mod standardize;
pub mod synth;
pub mod table;

use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::math::Matrix;

pub use schema::{Feature, FeatureKind, TableSchema};
pub use standardize::Standardizer;
pub use synth::{GroundTruth, LabeledBatch, ShiftSpec, SynthSpec};
pub use table::{load_csv, Dataset};

/// One unlabeled test batch, which is all the adaptation path gets to see.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub t: usize,
    pub features: Matrix,
}

/// Name of the ground-truth sidecar inside a stream directory.
pub const TRUTH_FILE: &str = "truth.jsonl";

fn batch_file_name(t: usize) -> String {
    format!("batch_{t:05}.csv")
}

/// Writes `batch_NNNNN.csv` files (features only) and the truth sidecar.
pub fn write_stream_dir(dir: impl AsRef<Path>, schema: &TableSchema, stream: &[LabeledBatch]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let columns = schema.expanded_columns();
    for item in stream {
        let path = dir.join(batch_file_name(item.batch.t));
        table::write_numeric_csv(&path, &columns, &item.batch.features, None)?;
    }
    let truth_path = dir.join(TRUTH_FILE);
    let file = std::fs::File::create(&truth_path).map_err(|e| Error::io(&truth_path, e))?;
    let mut out = BufWriter::new(file);
    for item in stream {
        serde_json::to_writer(&mut out, &item.truth).map_err(|e| Error::parse(&truth_path, e))?;
        out.write_all(b"\n").map_err(|e| Error::io(&truth_path, e))?;
    }
    out.flush().map_err(|e| Error::io(&truth_path, e))
}

fn batch_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("batch_") && n.ends_with(".csv"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Loads a test stream in the schema's expanded layout (not standardized).
///
/// A directory is read as its `batch_*.csv` files in name order. A single CSV
/// file is cut into consecutive batches of `batch_size` rows. Every file is
/// parsed before this returns, so schema problems surface before adaptation.
pub fn read_stream(path: impl AsRef<Path>, schema: &TableSchema, batch_size: usize) -> Result<Vec<Batch>> {
    let path = path.as_ref();
    let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_dir() {
        batch_files(path)?
            .iter()
            .enumerate()
            .map(|(t, file)| {
                let d = load_csv(file, schema)?;
                Ok(Batch { t, features: d.features })
            })
            .collect()
    } else {
        if batch_size == 0 {
            return Err(Error::InvalidInput("batch_size must be >= 1".into()));
        }
        let d = load_csv(path, schema)?;
        let n = d.len();
        Ok((0..n)
            .step_by(batch_size)
            .enumerate()
            .map(|(t, start)| {
                let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
                Batch {
                    t,
                    features: d.features.select_rows(&idx),
                }
            })
            .collect())
    }
}

/// Reads the truth sidecar of a stream directory, if there is one.
pub fn read_truth(dir: impl AsRef<Path>) -> Result<Option<Vec<GroundTruth>>> {
    let path = dir.as_ref().join(TRUTH_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let truth: GroundTruth = serde_json::from_str(&line)
            .map_err(|e| Error::parse(&path, format!("line {}: {e}", i + 1)))?;
        out.push(truth);
    }
    Ok(Some(out))
}
