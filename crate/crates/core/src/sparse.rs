//! Sparse and dense vector value types.
//!
//! A [`SparseVector`] stores `(index, value)` pairs with strictly increasing
//! indices. Explicit zeros are allowed: arithmetic results keep them until
//! [`sparsify`] is called, so the number of stored entries of a layer's
//! activation vector always equals the number of neurons it evaluated.

use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SparseVector {
    dim: usize,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl SparseVector {
    /// Builds a vector from parallel index/value lists, checking ordering and range.
    pub fn new(dim: usize, indices: Vec<u32>, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("sparse vector dim must be positive".into()));
        }
        if indices.len() != values.len() {
            return Err(Error::InvalidArgument(format!(
                "{} indices but {} values",
                indices.len(),
                values.len()
            )));
        }
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::InvalidArgument(format!(
                    "indices not strictly increasing at {} -> {}",
                    w[0], w[1]
                )));
            }
        }
        if let Some(&last) = indices.last() {
            if last as usize >= dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: last as usize + 1,
                });
            }
        }
        Ok(Self {
            dim,
            indices,
            values,
        })
    }

    /// Builds a vector from `(index, value)` pairs in any order. Duplicate indices are rejected.
    pub fn from_pairs(dim: usize, mut pairs: Vec<(u32, f64)>) -> Result<Self> {
        pairs.sort_by_key(|&(i, _)| i);
        let (indices, values) = pairs.into_iter().unzip();
        Self::new(dim, indices, values)
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "sparse vector dim must be positive");
        Self {
            dim,
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Caller guarantees the ordering and range invariants.
    pub(crate) fn from_parts_unchecked(dim: usize, indices: Vec<u32>, values: Vec<f64>) -> Self {
        debug_assert_eq!(indices.len(), values.len());
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        debug_assert!(indices.last().is_none_or(|&i| (i as usize) < dim));
        Self {
            dim,
            indices,
            values,
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    #[inline]
    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    /// Value stored at `index`, if the index has an entry.
    pub fn get(&self, index: u32) -> Option<f64> {
        self.indices
            .binary_search(&index)
            .ok()
            .map(|pos| self.values[pos])
    }

    /// Dot product with a dense row; no dimension check.
    #[inline]
    pub fn dot_unchecked(&self, row: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            acc += v * row[i as usize];
        }
        acc
    }

    pub fn into_parts(self) -> (usize, Vec<u32>, Vec<f64>) {
        (self.dim, self.indices, self.values)
    }
}

/// Fixed-length dense vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for DenseVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for DenseVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for DenseVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

/// Sum of `value * row[index]` over the stored entries of `v`.
pub fn sparse_dense_dot(v: &SparseVector, row: &[f64]) -> Result<f64> {
    if v.dim() != row.len() {
        return Err(Error::Dimension {
            expected: v.dim(),
            got: row.len(),
        });
    }
    Ok(v.dot_unchecked(row))
}

pub fn densify(v: &SparseVector) -> DenseVector {
    let mut out = vec![0.0; v.dim()];
    for (i, x) in v.iter() {
        out[i as usize] = x;
    }
    DenseVector(out)
}

/// Keeps exactly the nonzero entries of `row`.
pub fn sparsify(row: &[f64]) -> SparseVector {
    assert!(!row.is_empty(), "cannot sparsify an empty row");
    let mut indices = Vec::new();
    let mut values = Vec::new();
    for (i, &x) in row.iter().enumerate() {
        if x != 0.0 {
            indices.push(i as u32);
            values.push(x);
        }
    }
    SparseVector::from_parts_unchecked(row.len(), indices, values)
}
