use std::path::Path;

use super::schema::{ColumnKind, SchemaSpec};
use crate::error::{Error, Result};

/// Tokens read as a missing cell, besides the empty field.
pub const MISSING_TOKENS: [&str; 2] = ["NA", "?"];

/// A cell as read from disk, before preprocessing.
#[derive(Clone, Debug, PartialEq)]
pub enum RawValue {
    Num(f64),
    Cat(String),
    Missing,
}

impl RawValue {
    pub fn is_missing(&self) -> bool {
        matches!(self, RawValue::Missing)
    }
}

/// Samples in file order with categorical cells still as labels.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    pub spec: SchemaSpec,
    pub rows: Vec<Vec<RawValue>>,
    pub labels: Vec<usize>,
    pub classes: Vec<String>,
}

fn is_missing_token(s: &str) -> bool {
    s.is_empty() || MISSING_TOKENS.contains(&s)
}

/// Reads a headed CSV whose columns are the schema's features plus one
/// label column, in any order.
pub fn load_csv(path: impl AsRef<Path>, spec: &SchemaSpec) -> Result<RawDataset> {
    let path = path.as_ref();
    spec.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();

    let label_col = match &spec.label.name {
        Some(name) => header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("label column {name:?} not in header")))?,
        None => header
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::Schema("empty header".into()))?,
    };
    let mut feature_cols = vec![usize::MAX; spec.features.len()];
    for (col, name) in header.iter().enumerate() {
        if col == label_col {
            continue;
        }
        match spec.features.iter().position(|f| &f.name == name) {
            Some(i) if feature_cols[i] == usize::MAX => feature_cols[i] = col,
            Some(_) => return Err(Error::Schema(format!("header repeats column {name:?}"))),
            None => return Err(Error::Schema(format!("unknown header name {name:?}"))),
        }
    }
    if let Some(i) = feature_cols.iter().position(|&c| c == usize::MAX) {
        return Err(Error::Schema(format!(
            "feature {:?} missing from header",
            spec.features[i].name
        )));
    }

    let mut rows = Vec::new();
    let mut raw_labels = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(Error::Parse {
                path: path.into(),
                line,
                msg: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let label = &record[label_col];
        if is_missing_token(label) {
            return Err(Error::Parse { path: path.into(), line, msg: "missing label".into() });
        }
        raw_labels.push((label.to_string(), line));
        let mut row = Vec::with_capacity(spec.features.len());
        for (f, &col) in spec.features.iter().zip(&feature_cols) {
            let cell = &record[col];
            row.push(if is_missing_token(cell) {
                RawValue::Missing
            } else {
                match f.kind {
                    ColumnKind::Numerical => match cell.parse::<f64>() {
                        Ok(v) if v.is_finite() => RawValue::Num(v),
                        _ => {
                            return Err(Error::Parse {
                                path: path.into(),
                                line,
                                msg: format!("column {:?}: cannot parse {cell:?} as a number", f.name),
                            })
                        }
                    },
                    ColumnKind::Categorical => RawValue::Cat(cell.to_string()),
                }
            });
        }
        rows.push(row);
    }

    let classes = if spec.label.classes.is_empty() {
        let mut c: Vec<String> = raw_labels.iter().map(|(l, _)| l.clone()).collect();
        c.sort();
        c.dedup();
        c
    } else {
        spec.label.classes.clone()
    };
    let labels = raw_labels
        .into_iter()
        .map(|(l, line)| {
            classes.iter().position(|c| *c == l).ok_or_else(|| Error::Parse {
                path: path.into(),
                line,
                msg: format!("label {l:?} is not one of {classes:?}"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RawDataset { spec: spec.clone(), rows, labels, classes })
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.spec.features.len()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            spec: self.spec.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes.clone(),
        }
    }

    /// Row-major presence grid.
    pub fn present(&self) -> Vec<bool> {
        self.rows.iter().flatten().map(|v| !v.is_missing()).collect()
    }

    /// Marks every cell whose entry in the row-major `present` grid is
    /// false as missing. Cells are never un-masked.
    pub fn with_present(mut self, present: &[bool]) -> Result<Self> {
        let m = self.n_features();
        if present.len() != self.rows.len() * m {
            return Err(Error::shape("with_present", format!("{} cells for {}x{m}", present.len(), self.rows.len())));
        }
        for (i, row) in self.rows.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                if !present[i * m + j] {
                    *cell = RawValue::Missing;
                }
            }
        }
        Ok(self)
    }
}
