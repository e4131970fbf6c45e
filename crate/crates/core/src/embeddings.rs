//! Gaussian random embeddings and the near-orthonormality statistics they obey.
//!
//! Every embedding table is a `d x n` matrix whose column `i` is the vector of
//! item `i`, with i.i.d. `N(0, 1/d)` entries. At large `d` such columns have
//! norm close to one, pairwise inner products of order `1/sqrt(d)`, and a
//! random `N(0, 1/d)` matrix remaps them to fresh near-orthogonal vectors.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;

/// `rows x cols` matrix with i.i.d. `N(0, variance)` entries, filled row-major
/// from the stream's generator.
pub fn gaussian_matrix<S: Scalar>(
    rows: usize,
    cols: usize,
    variance: f64,
    stream: &RngStream,
) -> Result<Array2<S>> {
    if rows == 0 || cols == 0 {
        return invalid(format!("gaussian_matrix needs rows, cols >= 1 (got {rows}x{cols})"));
    }
    if !(variance > 0.0) || !variance.is_finite() {
        return invalid(format!("gaussian_matrix needs variance > 0 (got {variance})"));
    }
    let sd = variance.sqrt();
    let mut rng = stream.rng();
    Ok(Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = rng.sample(StandardNormal);
        S::cast(sd * z)
    }))
}

/// Column-indexed embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet<S: Scalar> {
    pub matrix: Array2<S>,
}

impl<S: Scalar> EmbeddingSet<S> {
    /// `n` embeddings of dimension `d` with variance `1/d`.
    pub fn gaussian(d: usize, n: usize, stream: &RngStream) -> Result<Self> {
        Ok(Self {
            matrix: gaussian_matrix(d, n, 1.0 / d as f64, stream)?,
        })
    }

    pub fn from_matrix(matrix: Array2<S>) -> Self {
        Self { matrix }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn len(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.ncols() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrthoStats {
    pub mean_abs_offdiag: f64,
    pub max_abs_offdiag: f64,
    pub min_norm: f64,
    pub max_norm: f64,
    pub self_remap_mean_abs: f64,
}

fn column_norms<S: Scalar>(m: ArrayView2<S>) -> Vec<f64> {
    m.axis_iter(Axis(1))
        .map(|c| c.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt())
        .collect()
}

/// Exact pairwise statistics over all columns of `e`.
///
/// `self_remap_mean_abs` is reported as zero; see [`remap_report`].
pub fn orthogonality_report<S: Scalar>(e: &EmbeddingSet<S>) -> Result<OrthoStats> {
    let n = e.len();
    if n < 2 {
        return invalid(format!("orthogonality_report needs n >= 2 (got {n})"));
    }
    let gram = e.matrix.t().dot(&e.matrix);
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let v = gram[[i, j]].as_f64().abs();
            sum += v;
            max = max.max(v);
        }
    }
    let norms = column_norms(e.matrix.view());
    Ok(OrthoStats {
        mean_abs_offdiag: sum / (n * (n - 1) / 2) as f64,
        max_abs_offdiag: max,
        min_norm: norms.iter().cloned().fold(f64::INFINITY, f64::min),
        max_norm: norms.iter().cloned().fold(0.0, f64::max),
        self_remap_mean_abs: 0.0,
    })
}

/// Statistics of the remapped columns `W0 x`: pairwise overlaps and norms of
/// the remapped set, and the mean of `|x^T W0 x|` over columns.
pub fn remap_report<S: Scalar>(w0: &Array2<S>, e: &EmbeddingSet<S>) -> Result<OrthoStats> {
    let d = e.dim();
    if w0.nrows() != w0.ncols() {
        return invalid(format!("remap matrix must be square (got {:?})", w0.dim()));
    }
    if w0.nrows() != d {
        return invalid(format!(
            "remap matrix is {}x{} but embeddings have dimension {d}",
            w0.nrows(),
            w0.ncols()
        ));
    }
    let mapped = w0.dot(&e.matrix);
    let n = e.len();
    let self_remap: f64 = (0..n)
        .map(|i| {
            e.matrix
                .column(i)
                .iter()
                .zip(mapped.column(i).iter())
                .map(|(a, b)| a.as_f64() * b.as_f64())
                .sum::<f64>()
                .abs()
        })
        .sum::<f64>()
        / n as f64;
    let norms = column_norms(mapped.view());
    let (mean_abs_offdiag, max_abs_offdiag) = if n >= 2 {
        let s = orthogonality_report(&EmbeddingSet::from_matrix(mapped.clone()))?;
        (s.mean_abs_offdiag, s.max_abs_offdiag)
    } else {
        (0.0, 0.0)
    };
    Ok(OrthoStats {
        mean_abs_offdiag,
        max_abs_offdiag,
        min_norm: norms.iter().cloned().fold(f64::INFINITY, f64::min),
        max_norm: norms.iter().cloned().fold(0.0, f64::max),
        self_remap_mean_abs: self_remap,
    })
}

/// Mean `|<a_i, b_j>|` over all column pairs of two independent tables.
pub fn mean_abs_cross<S: Scalar>(a: &Array2<S>, b: &Array2<S>) -> f64 {
    let g = a.t().dot(b);
    g.iter().map(|v| v.as_f64().abs()).sum::<f64>() / g.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn zero_shape_rejected() {
        let s = RngStream::new(0);
        assert!(gaussian_matrix::<f64>(0, 3, 1.0, &s).is_err());
        assert!(gaussian_matrix::<f64>(3, 0, 1.0, &s).is_err());
        assert!(gaussian_matrix::<f64>(3, 3, 0.0, &s).is_err());
    }

    #[test]
    fn deterministic_per_stream() {
        let s = RngStream::new(42).named("we");
        let a = gaussian_matrix::<f64>(16, 9, 0.5, &s).unwrap();
        let b = gaussian_matrix::<f64>(16, 9, 0.5, &s).unwrap();
        assert_eq!(a, b);
        let c = gaussian_matrix::<f64>(16, 9, 0.5, &s.child(1)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_draw_mean_over_seeds() {
        let root = RngStream::new(3);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|i| gaussian_matrix::<f64>(1, 1, 1.0, &root.child(i)).unwrap()[[0, 0]])
            .sum::<f64>()
            / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn duplicate_columns_hit_squared_norm() {
        let s = RngStream::new(5);
        let mut m = gaussian_matrix::<f64>(32, 4, 1.0 / 32.0, &s).unwrap();
        let c0 = m.column(0).to_owned();
        m.column_mut(3).assign(&c0);
        let stats = orthogonality_report(&EmbeddingSet::from_matrix(m)).unwrap();
        let sq = c0.dot(&c0);
        assert!((stats.max_abs_offdiag - sq).abs() < 1e-12);
    }

    #[test]
    fn orthogonality_needs_two_columns() {
        let m = Array2::<f64>::ones((4, 1));
        assert!(orthogonality_report(&EmbeddingSet::from_matrix(m)).is_err());
    }

    #[test]
    fn identity_remap_is_squared_norm() {
        let e = EmbeddingSet::<f64>::gaussian(64, 10, &RngStream::new(8)).unwrap();
        let eye = Array2::<f64>::eye(64);
        let r = remap_report(&eye, &e).unwrap();
        let mean_sq: f64 = (0..10)
            .map(|i| e.matrix.column(i).dot(&e.matrix.column(i)))
            .sum::<f64>()
            / 10.0;
        assert!((r.self_remap_mean_abs - mean_sq).abs() < 1e-12);
        assert!((r.self_remap_mean_abs - 1.0).abs() < 0.2);
    }

    #[test]
    fn remap_dimension_mismatch() {
        let e = EmbeddingSet::<f64>::gaussian(8, 3, &RngStream::new(1)).unwrap();
        assert!(remap_report(&Array2::<f64>::eye(4), &e).is_err());
        assert!(remap_report(&Array2::<f64>::zeros((8, 4)), &e).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let e = EmbeddingSet::<f32>::gaussian(256, 20, &RngStream::new(2)).unwrap();
        let s = orthogonality_report(&e).unwrap();
        assert!(s.min_norm > 0.7 && s.max_norm < 1.3);
    }
}
