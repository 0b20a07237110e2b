//! Loading, normalizing and splitting tabular datasets.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Matrix, RngStream};

/// A labelled numeric table. `row_ids` is the global ordered index shared by
/// every silo and doubles as the cross-silo linkage key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub feature_names: Vec<String>,
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub row_ids: Vec<usize>,
}

impl Table {
    pub fn n_rows(&self) -> usize {
        self.features.rows()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.features.rows();
        if self.labels.len() != m || self.row_ids.len() != m {
            return Err(Error::Data(format!(
                "table '{}': {} feature rows, {} labels, {} row ids",
                self.name,
                m,
                self.labels.len(),
                self.row_ids.len()
            )));
        }
        if self.feature_names.len() != self.features.cols() {
            return Err(Error::Data(format!(
                "table '{}': {} feature names for {} columns",
                self.name,
                self.feature_names.len(),
                self.features.cols()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.class_names.len()) {
            return Err(Error::Data(format!(
                "table '{}': label id {bad} out of range for {} classes",
                self.name,
                self.class_names.len()
            )));
        }
        Ok(())
    }

    /// Rows at the given positions, preserving their global ids.
    pub fn select_rows(&self, idx: &[usize]) -> Table {
        Table {
            name: self.name.clone(),
            feature_names: self.feature_names.clone(),
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            row_ids: idx.iter().map(|&i| self.row_ids[i]).collect(),
        }
    }

    /// Random subset of `n` rows (all rows if `n >= m`), kept in original order.
    pub fn subsample(&self, n: usize, rng: &mut RngStream) -> Table {
        if n >= self.n_rows() {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.n_rows()).collect();
        idx.shuffle(rng);
        idx.truncate(n);
        idx.sort_unstable();
        let mut t = self.select_rows(&idx);
        t.row_ids = (1..=n).collect();
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitTable {
    pub train: Table,
    pub test: Table,
    pub split_rate: f64,
}

/// Loads a headered CSV. Every column other than `label_column` must parse as
/// a finite number; labels are encoded in first-appearance order.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Table> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .clone();
    if headers.is_empty() {
        return Err(Error::Data(format!("{}: empty file", path.display())));
    }
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| {
            Error::Data(format!(
                "{}: label column '{label_column}' not found",
                path.display()
            ))
        })?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_idx)
        .map(|(_, h)| h.to_string())
        .collect();

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut class_ids: HashMap<String, usize> = HashMap::new();
    let mut class_names = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        // 1-based data row, header excluded
        let row = r + 1;
        let rec = rec.map_err(|e| Error::Data(format!("{}: row {row}: {e}", path.display())))?;
        if rec.len() != headers.len() {
            return Err(Error::Data(format!(
                "{}: row {row} has {} fields, header has {}",
                path.display(),
                rec.len(),
                headers.len()
            )));
        }
        for (i, cell) in rec.iter().enumerate() {
            if i == label_idx {
                if cell.is_empty() {
                    return Err(Error::Data(format!(
                        "{}: row {row} has an empty label",
                        path.display()
                    )));
                }
                let next = class_ids.len();
                let id = *class_ids.entry(cell.to_string()).or_insert_with(|| {
                    class_names.push(cell.to_string());
                    next
                });
                labels.push(id);
            } else {
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => data.push(v),
                    _ => {
                        return Err(Error::NonNumericCell {
                            row,
                            column: headers[i].to_string(),
                            value: cell.to_string(),
                        })
                    }
                }
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    let m = labels.len();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let table = Table {
        name,
        features: Matrix::from_vec(m, feature_names.len(), data)?,
        feature_names,
        labels,
        class_names,
        row_ids: (1..=m).collect(),
    };
    table.validate()?;
    Ok(table)
}

/// Per-column affine map onto `[0, 1]`, fit on one table and applied to others.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(t: &Table) -> Self {
        let d = t.n_features();
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for r in 0..t.n_rows() {
            for (c, &v) in t.features.row(r).iter().enumerate() {
                min[c] = min[c].min(v);
                max[c] = max[c].max(v);
            }
        }
        Self { min, max }
    }

    /// Constant columns map to 0.5; values outside the fitted range are clamped.
    pub fn transform(&self, t: &Table) -> Result<Table> {
        if t.n_features() != self.min.len() {
            return Err(Error::Shape {
                op: "minmax transform",
                lhs: (self.min.len(), 1),
                rhs: t.features.shape(),
            });
        }
        let features = Matrix::from_fn(t.n_rows(), t.n_features(), |r, c| {
            let (lo, hi) = (self.min[c], self.max[c]);
            let span = hi - lo;
            if !(span > 0.0) {
                0.5
            } else {
                ((t.features.get(r, c) - lo) / span).clamp(0.0, 1.0)
            }
        });
        Ok(Table {
            features,
            ..t.clone()
        })
    }
}

pub fn minmax_normalize(t: &Table) -> Table {
    MinMaxScaler::fit(t)
        .transform(t)
        .expect("scaler fit on the same table")
}

/// Uniform random partition; `round(rate * m)` rows go to train, clamped so
/// both sides are non-empty.
pub fn train_test_split(t: &Table, rate: f64, rng: &mut RngStream) -> Result<SplitTable> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "split rate must lie in (0, 1), got {rate}"
        )));
    }
    let m = t.n_rows();
    if m < 2 {
        return Err(Error::InsufficientData(format!(
            "cannot split a table with {m} rows"
        )));
    }
    let n_train = ((rate * m as f64).round() as usize).clamp(1, m - 1);
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(rng);
    let (train_idx, test_idx) = idx.split_at(n_train);
    let mut train_idx = train_idx.to_vec();
    let mut test_idx = test_idx.to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok(SplitTable {
        train: t.select_rows(&train_idx),
        test: t.select_rows(&test_idx),
        split_rate: rate,
    })
}

pub const DEFAULT_SYNTH_MARGIN: f64 = 6.0;

/// Gaussian blobs: class `c` is centred at `±margin` on axis `c / 2` with unit
/// noise elsewhere. Labels cycle `0, 1, .., classes-1` so counts differ by at
/// most one.
pub fn synth_table(m: usize, d: usize, classes: usize, rng: &mut RngStream) -> Result<Table> {
    synth_table_with_margin(m, d, classes, DEFAULT_SYNTH_MARGIN, rng)
}

pub fn synth_table_with_margin(
    m: usize,
    d: usize,
    classes: usize,
    margin: f64,
    rng: &mut RngStream,
) -> Result<Table> {
    if classes < 2 || m < classes || d < 2 || classes > 2 * d {
        return Err(Error::InvalidParameter(format!(
            "synth_table needs m >= classes >= 2, d >= 2, classes <= 2d; got m={m} d={d} classes={classes}"
        )));
    }
    let labels: Vec<usize> = (0..m).map(|r| r % classes).collect();
    let mut data = Vec::with_capacity(m * d);
    for &y in &labels {
        let axis = y / 2;
        let sign = if y % 2 == 0 { 1.0 } else { -1.0 };
        for j in 0..d {
            let noise: f64 = StandardNormal.sample(rng);
            let center = if j == axis { sign * margin } else { 0.0 };
            data.push(center + noise);
        }
    }
    Ok(Table {
        name: "synth".into(),
        feature_names: (0..d).map(|j| format!("f{j}")).collect(),
        features: Matrix::from_vec(m, d, data)?,
        labels,
        class_names: (0..classes).map(|c| format!("class{c}")).collect(),
        row_ids: (1..=m).collect(),
    })
}
