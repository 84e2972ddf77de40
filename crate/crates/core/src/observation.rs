//! Partially observed outcome matrices.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One revealed cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// The revealed cells of an `n_users x n_items` matrix.
///
/// Entries are kept sorted in row-major order with no duplicate cells, so the
/// mask is exactly the set of cells that carry a value.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    n_users: usize,
    n_items: usize,
    entries: Vec<Observation>,
    rho_hint: Option<f64>,
}

impl ObservationSet {
    pub fn new(n_users: usize, n_items: usize, mut entries: Vec<Observation>) -> Result<Self> {
        if n_users == 0 || n_items == 0 {
            return Err(Error::invalid("observation set needs at least one row and column"));
        }
        for e in &entries {
            if e.row >= n_users || e.col >= n_items {
                return Err(Error::invalid(format!(
                    "cell ({}, {}) outside a {n_users}x{n_items} matrix",
                    e.row, e.col
                )));
            }
            if !e.value.is_finite() {
                return Err(Error::NonFinite);
            }
        }
        entries.sort_by_key(|e| (e.row, e.col));
        if let Some(w) = entries
            .windows(2)
            .find(|w| (w[0].row, w[0].col) == (w[1].row, w[1].col))
        {
            return Err(Error::invalid(format!(
                "duplicate cell ({}, {})",
                w[0].row, w[0].col
            )));
        }
        Ok(Self {
            n_users,
            n_items,
            entries,
            rho_hint: None,
        })
    }

    /// Builds a set from a dense value matrix and a reveal mask.
    pub fn from_dense(values: &Array2<f64>, mask: &Array2<bool>) -> Result<Self> {
        if values.dim() != mask.dim() {
            return Err(Error::DimensionMismatch {
                expected: format!("{:?}", values.dim()),
                got: format!("{:?}", mask.dim()),
            });
        }
        let (n, m) = values.dim();
        let entries = mask
            .indexed_iter()
            .filter(|(_, &revealed)| revealed)
            .map(|((row, col), _)| Observation {
                row,
                col,
                value: values[[row, col]],
            })
            .collect();
        Self::new(n, m, entries)
    }

    pub fn with_rho_hint(mut self, rho: Option<f64>) -> Self {
        self.rho_hint = rho;
        self
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn dim(&self) -> (usize, usize) {
        (self.n_users, self.n_items)
    }

    pub fn rho_hint(&self) -> Option<f64> {
        self.rho_hint
    }

    pub fn entries(&self) -> &[Observation] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn observed_fraction(&self) -> f64 {
        self.entries.len() as f64 / (self.n_users * self.n_items) as f64
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.entries
            .binary_search_by_key(&(row, col), |e| (e.row, e.col))
            .ok()
            .map(|k| self.entries[k].value)
    }

    pub fn is_observed(&self, row: usize, col: usize) -> bool {
        self.get(row, col).is_some()
    }

    /// Binary reveal pattern as a 0/1 real matrix.
    pub fn mask_matrix(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.n_users, self.n_items));
        for e in &self.entries {
            a[[e.row, e.col]] = 1.0;
        }
        a
    }

    /// Revealed values with zeros in the unrevealed cells.
    pub fn zero_filled(&self) -> Array2<f64> {
        let mut y = Array2::zeros((self.n_users, self.n_items));
        for e in &self.entries {
            y[[e.row, e.col]] = e.value;
        }
        y
    }

    /// The observations at the given positions of `entries()`, same shape.
    pub fn select(&self, positions: &[usize]) -> Self {
        let mut entries: Vec<Observation> = positions.iter().map(|&k| self.entries[k]).collect();
        entries.sort_by_key(|e| (e.row, e.col));
        entries.dedup_by_key(|e| (e.row, e.col));
        Self {
            n_users: self.n_users,
            n_items: self.n_items,
            entries,
            rho_hint: self.rho_hint,
        }
    }

    /// Smallest and largest revealed value.
    pub fn value_range(&self) -> Option<(f64, f64)> {
        self.entries.iter().fold(None, |acc, e| match acc {
            None => Some((e.value, e.value)),
            Some((lo, hi)) => Some((lo.min(e.value), hi.max(e.value))),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(row: usize, col: usize, value: f64) -> Observation {
        Observation { row, col, value }
    }

    #[test]
    fn entries_are_sorted_and_queryable() {
        let set = ObservationSet::new(2, 3, vec![obs(1, 2, 5.0), obs(0, 1, 1.5)]).unwrap();
        assert_eq!(set.entries()[0], obs(0, 1, 1.5));
        assert_eq!(set.get(1, 2), Some(5.0));
        assert_eq!(set.get(1, 1), None);
        assert!((set.observed_fraction() - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(set.value_range(), Some((1.5, 5.0)));
    }

    #[test]
    fn rejects_duplicates_and_out_of_bounds() {
        assert!(ObservationSet::new(2, 2, vec![obs(0, 0, 1.0), obs(0, 0, 2.0)]).is_err());
        assert!(ObservationSet::new(2, 2, vec![obs(2, 0, 1.0)]).is_err());
        assert!(ObservationSet::new(2, 2, vec![obs(0, 0, f64::NAN)]).is_err());
    }

    #[test]
    fn mask_matches_values() {
        let set = ObservationSet::new(2, 2, vec![obs(0, 0, 3.0), obs(1, 1, -1.0)]).unwrap();
        let a = set.mask_matrix();
        let y = set.zero_filled();
        for ((i, j), &m) in a.indexed_iter() {
            assert_eq!(m == 1.0, set.is_observed(i, j));
            if m == 0.0 {
                assert_eq!(y[[i, j]], 0.0);
            }
        }
    }
}
