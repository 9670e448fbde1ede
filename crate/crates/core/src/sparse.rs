//! Minimal square CSR matrix used for graph propagation.
//!
//! Rows are processed independently in [`Csr::spmm`], so the result is
//! bit-identical regardless of how many rayon workers run it.

use ndarray::Array2;
use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl Csr {
    pub fn empty(n: usize) -> Self {
        Csr {
            n,
            indptr: vec![0; n + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds an `n x n` matrix from `(row, col, value)` triplets. Duplicate
    /// coordinates are summed; column indices inside a row end up sorted.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|t| (t.0, t.1));
        let mut indptr = vec![0usize; n + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < n && c < n, "triplet ({r},{c}) outside {n}x{n}");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indptr[r + 1] += 1;
            indices.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for i in 0..n {
            indptr[i + 1] += indptr[i];
        }
        Csr {
            n,
            indptr,
            indices,
            values,
        }
    }

    /// Symmetric binary matrix with a 1 at `(a, b)` and `(b, a)` for each pair.
    pub fn symmetric_binary(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut triplets = Vec::new();
        for (a, b) in pairs {
            triplets.push((a, b, 1.0));
            triplets.push((b, a, 1.0));
        }
        let mut m = Csr::from_triplets(n, triplets);
        for v in m.values.iter_mut() {
            *v = 1.0;
        }
        m
    }

    /// Same sparsity structure, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        Csr {
            n: self.n,
            indptr: self.indptr.clone(),
            indices: self.indices.clone(),
            values,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row_len(&self, row: usize) -> usize {
        self.indptr[row + 1] - self.indptr[row]
    }

    pub fn row(&self, row: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[row]..self.indptr[row + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let span = self.indptr[row]..self.indptr[row + 1];
        match self.indices[span.clone()].binary_search(&col) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|r| self.row(r).map(|(_, v)| v).sum()).collect()
    }

    /// Iterates `(row, col, value)` over stored entries in row-major order.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n, self.n));
        for (r, c, v) in self.triplets() {
            out[[r, c]] += v;
        }
        out
    }

    /// `self * x` for a dense `n x d` right-hand side.
    pub fn spmm(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.n, "spmm row mismatch");
        let d = x.ncols();
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let mut out = vec![0.0; self.n * d];
        out.par_chunks_mut(d.max(1))
            .enumerate()
            .for_each(|(r, dst)| {
                if d == 0 {
                    return;
                }
                for (c, v) in self.row(r) {
                    let src = &xs[c * d..(c + 1) * d];
                    for (o, s) in dst.iter_mut().zip(src) {
                        *o += v * s;
                    }
                }
            });
        Array2::from_shape_vec((self.n, d), out).expect("shape")
    }
}
