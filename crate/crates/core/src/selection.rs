//! Correlation-based feature selection and standardisation, fitted on
//! training-validation rows only.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::feature_index;
use crate::scalar::Scalar;

/// Named columns of real values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<T> {
    names: Vec<String>,
    columns: Vec<Vec<T>>,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn from_columns(names: Vec<String>, columns: Vec<Vec<T>>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::Dimension(format!("{} names for {} columns", names.len(), columns.len())));
        }
        if let Some(first) = columns.first() {
            if columns.iter().any(|c| c.len() != first.len()) {
                return Err(Error::Dimension("ragged columns".into()));
            }
        }
        Ok(Self { names, columns })
    }

    pub fn from_rows(names: Vec<String>, rows: &[Vec<T>]) -> Result<Self> {
        let mut columns = vec![Vec::with_capacity(rows.len()); names.len()];
        for row in rows {
            if row.len() != names.len() {
                return Err(Error::Dimension(format!("row of {} values for {} names", row.len(), names.len())));
            }
            for (c, v) in columns.iter_mut().zip(row) {
                c.push(*v);
            }
        }
        Self::from_columns(names, columns)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, name: &str) -> Option<&[T]> {
        self.names.iter().position(|n| n == name).map(|i| self.columns[i].as_slice())
    }

    pub fn row(&self, i: usize) -> Vec<T> {
        self.columns.iter().map(|c| c[i]).collect()
    }

    pub fn rows(&self) -> Vec<Vec<T>> {
        (0..self.n_rows()).map(|i| self.row(i)).collect()
    }

    /// Sub-matrix with the given columns, in the given order.
    pub fn select(&self, names: &[String]) -> Result<Self> {
        let columns = names
            .iter()
            .map(|n| {
                self.column(n)
                    .map(<[T]>::to_vec)
                    .ok_or_else(|| Error::Invalid(format!("no feature `{n}`")))
            })
            .collect::<Result<_>>()?;
        Self::from_columns(names.to_vec(), columns)
    }

    /// Sub-matrix with the given rows.
    pub fn take_rows(&self, idx: &[usize]) -> Self {
        Self {
            names: self.names.clone(),
            columns: self.columns.iter().map(|c| idx.iter().map(|&i| c[i]).collect()).collect(),
        }
    }
}

fn mean<T: Scalar>(x: &[T]) -> T {
    x.iter().copied().sum::<T>() / T::from_usize_lossy(x.len())
}

/// Sample Pearson correlation.
pub fn pearson<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Dimension(format!("pearson on lengths {} and {}", x.len(), y.len())));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy = sxy + da * db;
        sxx = sxx + da * da;
        syy = syy + db * db;
    }
    if sxx <= T::zero() || syy <= T::zero() {
        return Err(Error::ConstantInput);
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    Ok(r.max(-T::one()).min(T::one()))
}

fn is_constant<T: Scalar>(x: &[T]) -> bool {
    x.windows(2).all(|w| w[0] == w[1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult<T> {
    pub dropped_constant: Vec<String>,
    pub dropped_redundant: Vec<String>,
    pub selected: Vec<String>,
    pub correlation_with_label: BTreeMap<String, T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionParams {
    pub threshold: f64,
    pub max_partners: usize,
    pub top_n: usize,
}

impl Default for SelectionParams {
    fn default() -> Self {
        Self {
            threshold: 0.8,
            max_partners: 3,
            top_n: 10,
        }
    }
}

/// Drops constant features, then every feature whose |r| exceeds
/// `threshold` with strictly more than `max_partners` others. All counts
/// come from one correlation matrix of the non-constant features.
/// `selected` holds the survivors in input order.
pub fn drop_redundant<T: Scalar>(matrix: &FeatureMatrix<T>, threshold: T, max_partners: usize) -> SelectionResult<T> {
    let mut dropped_constant = Vec::new();
    let mut live = Vec::new();
    for (i, name) in matrix.names.iter().enumerate() {
        if is_constant(&matrix.columns[i]) {
            dropped_constant.push(name.clone());
        } else {
            live.push(i);
        }
    }
    let mut partners = vec![0usize; live.len()];
    for a in 0..live.len() {
        for b in a + 1..live.len() {
            let r = pearson(&matrix.columns[live[a]], &matrix.columns[live[b]]).unwrap_or_else(|_| T::zero());
            if r.abs() > threshold {
                partners[a] += 1;
                partners[b] += 1;
            }
        }
    }
    let mut dropped_redundant = Vec::new();
    let mut selected = Vec::new();
    for (k, &i) in live.iter().enumerate() {
        if partners[k] > max_partners {
            dropped_redundant.push(matrix.names[i].clone());
        } else {
            selected.push(matrix.names[i].clone());
        }
    }
    SelectionResult {
        dropped_constant,
        dropped_redundant,
        selected,
        correlation_with_label: BTreeMap::new(),
    }
}

fn canonical_rank(name: &str) -> (usize, &str) {
    (feature_index(name).unwrap_or(usize::MAX), name)
}

/// Keeps the `n` candidates of `partial.selected` with the largest
/// |point-biserial correlation| with the 0/1 labels.
pub fn select_top<T: Scalar>(
    matrix: &FeatureMatrix<T>,
    labels: &[u8],
    partial: SelectionResult<T>,
    n: usize,
) -> Result<SelectionResult<T>> {
    let y: Vec<T> = labels.iter().map(|&l| T::from_u8(l).expect("0/1 label")).collect();
    if y.len() != matrix.n_rows() {
        return Err(Error::Dimension(format!("{} labels for {} rows", y.len(), matrix.n_rows())));
    }
    if is_constant(&y) {
        return Err(Error::SingleClass);
    }
    let mut scored = Vec::new();
    let mut correlation_with_label = BTreeMap::new();
    for name in &partial.selected {
        let col = matrix
            .column(name)
            .ok_or_else(|| Error::Invalid(format!("no feature `{name}`")))?;
        let r = pearson(col, &y)?;
        correlation_with_label.insert(name.clone(), r);
        scored.push((name.clone(), r.abs()));
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| canonical_rank(&a.0).cmp(&canonical_rank(&b.0)))
    });
    if scored.len() < n {
        warn!("only {} features survive redundancy filtering, wanted {n}", scored.len());
    }
    Ok(SelectionResult {
        selected: scored.into_iter().take(n).map(|(name, _)| name).collect(),
        correlation_with_label,
        ..partial
    })
}

/// Redundancy filter followed by label ranking.
pub fn select_features<T: Scalar>(
    matrix: &FeatureMatrix<T>,
    labels: &[u8],
    params: &SelectionParams,
) -> Result<SelectionResult<T>> {
    let partial = drop_redundant(matrix, T::lit(params.threshold), params.max_partners);
    select_top(matrix, labels, partial, params.top_n)
}

/// Per-feature mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer<T> {
    pub names: Vec<String>,
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

impl<T: Scalar> Standardizer<T> {
    /// Fits on the given rows; constant columns are left out with a warning.
    pub fn fit(matrix: &FeatureMatrix<T>) -> Self {
        let mut s = Self {
            names: Vec::new(),
            mean: Vec::new(),
            std: Vec::new(),
        };
        for (name, col) in matrix.names.iter().zip(&matrix.columns) {
            let m = mean(col);
            let var = col.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / T::from_usize_lossy(col.len());
            let sd = var.sqrt();
            if sd > T::zero() && !is_constant(col) {
                s.names.push(name.clone());
                s.mean.push(m);
                s.std.push(sd);
            } else {
                warn!("dropping constant feature `{name}` from standardisation");
            }
        }
        s
    }

    pub fn apply_row(&self, row: &[T]) -> Result<Vec<T>> {
        if row.len() != self.names.len() {
            return Err(Error::Dimension(format!("row of {} for {} features", row.len(), self.names.len())));
        }
        Ok(row
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&x, (&m, &s))| (x - m) / s)
            .collect())
    }

    /// Standardises the fitted columns of `matrix`, looked up by name.
    pub fn apply(&self, matrix: &FeatureMatrix<T>) -> Result<FeatureMatrix<T>> {
        let sub = matrix.select(&self.names)?;
        let columns = sub
            .columns
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(c, (&m, &s))| c.iter().map(|&x| (x - m) / s).collect())
            .collect();
        FeatureMatrix::from_columns(self.names.clone(), columns)
    }
}
