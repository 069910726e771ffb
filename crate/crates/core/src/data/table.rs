use std::collections::HashMap;
use std::path::Path;

use crate::data::schema::{FeatureKind, TableSchema};
use crate::error::{Error, Result};
use crate::math::Matrix;

/// Feature matrix in the expanded (one-hot) column layout, plus labels when
/// the source had a label column.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub columns: Vec<String>,
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn select_rows(&self, idx: &[usize]) -> Dataset {
        Dataset {
            columns: self.columns.clone(),
            features: self.features.select_rows(idx),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }
}

/// Reads a CSV with a header row. Feature columns must all be present; the
/// label column is read when present. Other columns are ignored.
///
/// Row numbers in errors count data rows from 1 (the header is row 0).
pub fn load_csv(path: impl AsRef<Path>, schema: &TableSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema).map_err(|e| match e {
        Error::Data { .. } | Error::Schema(_) => e,
        other => Error::parse(path, other),
    })
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &TableSchema) -> Result<Dataset> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::InvalidInput(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    let position: HashMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();

    let mut sources = Vec::with_capacity(schema.features.len());
    for f in &schema.features {
        let idx = *position.get(f.name.as_str()).ok_or_else(|| Error::Data {
            row: 0,
            column: f.name.clone(),
            message: "missing column in header".into(),
        })?;
        sources.push(idx);
    }
    let label_idx = position.get(schema.label.as_str()).copied();
    let level_maps: Vec<HashMap<&str, usize>> = schema
        .features
        .iter()
        .map(|f| f.levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect())
        .collect();

    let width = schema.expanded_width();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0usize;
    for (r, record) in rdr.records().enumerate() {
        let row_no = r + 1;
        let record = record.map_err(|e| Error::Data {
            row: row_no,
            column: String::new(),
            message: e.to_string(),
        })?;
        let cell = |idx: usize, name: &str| -> Result<&str> {
            match record.get(idx) {
                Some(v) if !v.is_empty() => Ok(v),
                _ => Err(Error::Data {
                    row: row_no,
                    column: name.to_owned(),
                    message: "missing value".into(),
                }),
            }
        };
        let start = data.len();
        data.resize(start + width, 0.0);
        let mut col = start;
        for ((f, &src), levels) in schema.features.iter().zip(&sources).zip(&level_maps) {
            let raw = cell(src, &f.name)?;
            match f.kind {
                FeatureKind::Numeric => {
                    let v: f64 = raw.parse().map_err(|_| Error::Data {
                        row: row_no,
                        column: f.name.clone(),
                        message: format!("cannot parse `{raw}` as a number"),
                    })?;
                    if !v.is_finite() {
                        return Err(Error::Data {
                            row: row_no,
                            column: f.name.clone(),
                            message: format!("non-finite value `{raw}`"),
                        });
                    }
                    data[col] = v;
                    col += 1;
                }
                FeatureKind::Categorical => {
                    let level = *levels.get(raw).ok_or_else(|| Error::Data {
                        row: row_no,
                        column: f.name.clone(),
                        message: format!("unknown level `{raw}`"),
                    })?;
                    data[col + level] = 1.0;
                    col += f.levels.len();
                }
            }
        }
        if let Some(li) = label_idx {
            let raw = cell(li, &schema.label)?;
            let class = schema.class_index(raw).ok_or_else(|| Error::Data {
                row: row_no,
                column: schema.label.clone(),
                message: format!("unknown class `{raw}`"),
            })?;
            labels.push(class);
        }
        rows += 1;
    }
    Ok(Dataset {
        columns: schema.expanded_columns(),
        features: Matrix::from_vec(rows, width, data)?,
        labels: label_idx.map(|_| labels),
    })
}

/// Writes a numeric-only table. Values use Rust's shortest round-trip float
/// formatting, so reading the file back reproduces the matrix exactly.
pub fn write_numeric_csv(
    path: impl AsRef<Path>,
    columns: &[String],
    features: &Matrix,
    labels: Option<(&str, &[String], &[usize])>,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e))?;
    let mut header: Vec<&str> = columns.iter().map(String::as_str).collect();
    if let Some((name, _, _)) = labels {
        header.push(name);
    }
    w.write_record(&header).map_err(|e| Error::parse(path, e))?;
    let mut fields = Vec::with_capacity(header.len());
    for i in 0..features.rows() {
        fields.clear();
        fields.extend(features.row(i).iter().map(|v| v.to_string()));
        if let Some((_, classes, ys)) = labels {
            fields.push(classes[ys[i]].clone());
        }
        w.write_record(&fields).map_err(|e| Error::parse(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
