use serde::{Deserialize, Serialize};

use super::RetrievalError;

/// Sparse term-weight vector, entries sorted by term id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparseVector {
    pub entries: Vec<(u32, f64)>,
}

impl SparseVector {
    /// Sorts, merges duplicate ids and L2-normalizes.
    pub fn normalized(mut entries: Vec<(u32, f64)>) -> Self {
        entries.sort_by_key(|e| e.0);
        entries.dedup_by(|b, a| {
            if a.0 == b.0 {
                a.1 += b.1;
                true
            } else {
                false
            }
        });
        let norm = entries.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt();
        if norm > 0.0 {
            for e in &mut entries {
                e.1 /= norm;
            }
        }
        Self { entries }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        let (a, b) = (&self.entries, &other.entries);
        while i < a.len() && j < b.len() {
            match a[i].0.cmp(&b[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += a[i].1 * b[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    pub fn cosine(&self, other: &SparseVector) -> f64 {
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            0.0
        } else {
            self.dot(other) / denom
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseVector {
    pub values: Vec<f64>,
}

impl DenseVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        dot(&self.values, &self.values).sqrt()
    }

    /// Scales to unit length; zero vectors are left untouched.
    pub fn normalize(&mut self) {
        normalize_in_place(&mut self.values);
    }
}

/// One unit-norm row per token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl TokenMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, RetrievalError> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || dim == 0 {
            return Err(RetrievalError::Score(
                "token matrix needs at least one non-empty row".into(),
            ));
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(RetrievalError::Score(format!(
                    "ragged token matrix: row of {} vs dim {}",
                    r.len(),
                    dim
                )));
            }
            data.extend(r);
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn normalize_rows(&mut self) {
        for row in self.data.chunks_exact_mut(self.dim) {
            normalize_in_place(row);
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn normalize_in_place(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        for x in v {
            *x /= n;
        }
    }
}

pub fn cosine(a: &DenseVector, b: &DenseVector) -> Result<f64, RetrievalError> {
    check_dim(a.dim(), b.dim())?;
    let denom = a.norm() * b.norm();
    Ok(if denom == 0.0 {
        0.0
    } else {
        dot(&a.values, &b.values) / denom
    })
}

pub fn dot_product(a: &DenseVector, b: &DenseVector) -> Result<f64, RetrievalError> {
    check_dim(a.dim(), b.dim())?;
    Ok(dot(&a.values, &b.values))
}

/// Late-interaction score: for every query row, the best dot product
/// against any document row, summed over query rows. Not symmetric.
pub fn maxsim(query: &TokenMatrix, doc: &TokenMatrix) -> Result<f64, RetrievalError> {
    check_dim(query.dim(), doc.dim())?;
    Ok(query
        .rows()
        .map(|q| doc.rows().map(|d| dot(q, d)).fold(f64::NEG_INFINITY, f64::max))
        .sum())
}

fn check_dim(a: usize, b: usize) -> Result<(), RetrievalError> {
    if a == b {
        Ok(())
    } else {
        Err(RetrievalError::Score(format!("dimension mismatch: {a} vs {b}")))
    }
}
