//! Named-column feature tables and catalog manifests.
//!
//! Missing values are `NaN` in memory and an empty cell on disk.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{Error, Result};

pub const MISSING: f64 = f64::NAN;

#[inline]
pub fn is_missing(v: f64) -> bool {
    v.is_nan()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("duplicate feature name {0:?}")]
    DuplicateName(String),
    #[error("row has {got} values, table has {expected} columns")]
    RowWidth { expected: usize, got: usize },
    #[error("unknown feature {0:?}")]
    UnknownFeature(String),
    #[error("unknown row id {0:?}")]
    UnknownRow(String),
    #[error("feature matrix rows do not follow the cohort")]
    RowsMisaligned,
}

/// One entry of a catalog manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub unit: String,
    pub definition: String,
}

/// A versioned, ordered list of feature definitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogManifest {
    pub catalog: String,
    pub version: String,
    pub features: Vec<FeatureSpec>,
}

impl CatalogManifest {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|f| f.name.as_str())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

/// Values aligned to a list of names.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.values[i])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn extend(&mut self, other: FeatureVector) {
        self.names.extend(other.names);
        self.values.extend(other.values);
    }

    /// Compact `name=value` lines; missing values print as empty.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (n, v) in self.names.iter().zip(&self.values) {
            s.push_str(n);
            s.push('=');
            s.push_str(&format_value(*v));
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Ecg,
    Ehr,
}

/// Column subsets used to train the three comparison models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalitySubset {
    EhrOnly,
    EcgOnly,
    Multimodal,
}

impl ModalitySubset {
    pub const ALL: [ModalitySubset; 3] = [
        ModalitySubset::EhrOnly,
        ModalitySubset::EcgOnly,
        ModalitySubset::Multimodal,
    ];

    pub fn includes(self, m: Modality) -> bool {
        match self {
            ModalitySubset::EhrOnly => m == Modality::Ehr,
            ModalitySubset::EcgOnly => m == Modality::Ecg,
            ModalitySubset::Multimodal => true,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModalitySubset::EhrOnly => "ehr_only",
            ModalitySubset::EcgOnly => "ecg_only",
            ModalitySubset::Multimodal => "multimodal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub modality: Modality,
}

/// Dense row-major table of features keyed by row id.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub row_ids: Vec<String>,
    pub columns: Vec<Column>,
    data: Vec<f64>,
    /// Free-form provenance (config hash, catalog versions).
    pub provenance: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MatrixSidecar {
    columns: Vec<Column>,
    provenance: BTreeMap<String, String>,
}

impl FeatureMatrix {
    pub fn new(columns: Vec<Column>) -> Result<Self, FeatureError> {
        let mut seen = HashSet::new();
        for c in &columns {
            if !seen.insert(c.name.as_str()) {
                return Err(FeatureError::DuplicateName(c.name.clone()));
            }
        }
        Ok(Self {
            row_ids: Vec::new(),
            columns,
            data: Vec::new(),
            provenance: BTreeMap::new(),
        })
    }

    /// Builds a single-modality matrix from plain rows.
    pub fn from_rows(
        names: Vec<String>,
        modality: Modality,
        rows: Vec<(String, Vec<f64>)>,
    ) -> Result<Self, FeatureError> {
        let columns = names
            .into_iter()
            .map(|name| Column { name, modality })
            .collect();
        let mut m = Self::new(columns)?;
        for (id, row) in rows {
            m.push_row(id, &row)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, id: impl Into<String>, values: &[f64]) -> Result<(), FeatureError> {
        if values.len() != self.columns.len() {
            return Err(FeatureError::RowWidth {
                expected: self.columns.len(),
                got: values.len(),
            });
        }
        self.row_ids.push(id.into());
        self.data.extend_from_slice(values);
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.n_cols();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.n_rows()).map(move |i| self.row(i))
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n_cols() + col]
    }

    pub fn names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|r| self.get(r, col)).collect()
    }

    pub fn row_index(&self) -> BTreeMap<&str, usize> {
        self.row_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }

    /// Keeps the columns whose modality belongs to `subset`, in order.
    pub fn select_modality(&self, subset: ModalitySubset) -> FeatureMatrix {
        let keep: Vec<usize> = (0..self.n_cols())
            .filter(|&j| subset.includes(self.columns[j].modality))
            .collect();
        self.select_columns(&keep)
    }

    pub fn select_columns(&self, keep: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(self.n_rows() * keep.len());
        for r in 0..self.n_rows() {
            let row = self.row(r);
            data.extend(keep.iter().map(|&j| row[j]));
        }
        FeatureMatrix {
            row_ids: self.row_ids.clone(),
            columns: keep.iter().map(|&j| self.columns[j].clone()).collect(),
            data,
            provenance: self.provenance.clone(),
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.n_cols());
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        FeatureMatrix {
            row_ids: rows.iter().map(|&r| self.row_ids[r].clone()).collect(),
            columns: self.columns.clone(),
            data,
            provenance: self.provenance.clone(),
        }
    }

    /// Selects rows by id, in the given order.
    pub fn select_ids<S: AsRef<str>>(&self, ids: &[S]) -> Result<FeatureMatrix, FeatureError> {
        let index = self.row_index();
        let rows = ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_ref())
                    .copied()
                    .ok_or_else(|| FeatureError::UnknownRow(id.as_ref().to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.select_rows(&rows))
    }

    pub fn sidecar_path(csv_path: &Path) -> PathBuf {
        csv_path.with_extension("meta.json")
    }

    /// Writes `<path>` (CSV, first column `example_id`) and the
    /// `<stem>.meta.json` sidecar with column modalities and provenance.
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut line = String::from("example_id");
        for c in &self.columns {
            line.push(',');
            line.push_str(&c.name);
        }
        line.push('\n');
        out.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        for (i, id) in self.row_ids.iter().enumerate() {
            line.clear();
            line.push_str(id);
            for &v in self.row(i) {
                line.push(',');
                line.push_str(&format_value(v));
            }
            line.push('\n');
            out.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))?;
        let sidecar = MatrixSidecar {
            columns: self.columns.clone(),
            provenance: self.provenance.clone(),
        };
        let meta_path = Self::sidecar_path(path);
        let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))
    }

    pub fn read(path: &Path) -> Result<FeatureMatrix> {
        let meta_path = Self::sidecar_path(path);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let sidecar: MatrixSidecar =
            serde_json::from_str(&text).map_err(|e| Error::parse(&meta_path, e))?;
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e))?;
        let header = reader.headers().map_err(|e| Error::parse(path, e))?.clone();
        let names: Vec<&str> = header.iter().skip(1).collect();
        let expected: Vec<&str> = sidecar.columns.iter().map(|c| c.name.as_str()).collect();
        if names != expected {
            return Err(Error::parse(path, "header does not match sidecar columns"));
        }
        let mut m = FeatureMatrix::new(sidecar.columns)?;
        m.provenance = sidecar.provenance;
        let mut values = Vec::with_capacity(m.n_cols());
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::parse(path, e))?;
            values.clear();
            for field in rec.iter().skip(1) {
                values.push(parse_value(field).map_err(|e| Error::parse(path, e))?);
            }
            m.push_row(&rec[0], &values)?;
        }
        Ok(m)
    }
}

/// Shortest round-trip decimal; empty for missing.
pub fn format_value(v: f64) -> String {
    if is_missing(v) {
        String::new()
    } else {
        v.to_string()
    }
}

pub fn parse_value(s: &str) -> Result<f64, String> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(MISSING);
    }
    s.parse::<f64>().map_err(|e| format!("bad value {s:?}: {e}"))
}
