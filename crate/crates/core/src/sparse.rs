//! Compressed sparse row matrices for adjacency operators.
//!
//! Adjacencies are built once per graph (or per batch) and then only read;
//! products against dense features go through [`CsrMatrix::spmm`], and the
//! differentiable variant lives on the tape (`Tape::spmm`).

use std::collections::BTreeSet;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Square sparse matrix in canonical CSR form: columns strictly increasing
/// within a row, no stored zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from raw CSR arrays, validating the canonical-form invariants.
    pub fn from_parts(n: usize, row_offsets: Vec<usize>, col_indices: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if row_offsets.len() != n + 1 || row_offsets[0] != 0 {
            return Err(Error::invalid("csr", "row_offsets must have length n+1 and start at 0"));
        }
        if *row_offsets.last().unwrap() != col_indices.len() || col_indices.len() != values.len() {
            return Err(Error::invalid(
                "csr",
                "last row offset must equal the stored entry count",
            ));
        }
        for i in 0..n {
            let (lo, hi) = (row_offsets[i], row_offsets[i + 1]);
            if lo > hi {
                return Err(Error::invalid("csr", "row_offsets must be nondecreasing"));
            }
            let cols = &col_indices[lo..hi];
            if cols.iter().any(|&c| c >= n) {
                return Err(Error::invalid("csr", format!("column index out of range in row {i}")));
            }
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid(
                    "csr",
                    format!("columns not strictly increasing in row {i}"),
                ));
            }
        }
        if values.contains(&0.0) {
            return Err(Error::invalid("csr", "explicit zero stored"));
        }
        Ok(CsrMatrix {
            n,
            row_offsets,
            col_indices,
            values,
        })
    }

    /// Binary adjacency from an edge list. Duplicates collapse; with
    /// `symmetrize` every `(u, v)` also stores `(v, u)`.
    pub fn from_edges(n: usize, edges: &[(usize, usize)], symmetrize: bool) -> Result<Self> {
        let mut rows: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::invalid(
                    "csr_from_edges",
                    format!("edge ({u}, {v}) out of range for {n} nodes"),
                ));
            }
            rows[u].insert(v);
            if symmetrize {
                rows[v].insert(u);
            }
        }
        let mut row_offsets = Vec::with_capacity(n + 1);
        row_offsets.push(0);
        let mut col_indices = Vec::new();
        for r in &rows {
            col_indices.extend(r.iter().copied());
            row_offsets.push(col_indices.len());
        }
        let values = vec![1.0; col_indices.len()];
        Ok(CsrMatrix {
            n,
            row_offsets,
            col_indices,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Sparse copy of a dense square matrix, dropping zeros.
    pub fn from_dense(t: &Tensor) -> Result<Self> {
        if t.rows() != t.cols() {
            return Err(Error::shape(
                "csr_from_dense",
                "square matrix",
                format!("{:?}", t.shape()),
            ));
        }
        let n = t.rows();
        let mut row_offsets = vec![0];
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        for i in 0..n {
            for (j, &v) in t.row(i).iter().enumerate() {
                if v != 0.0 {
                    col_indices.push(j);
                    values.push(v);
                }
            }
            row_offsets.push(col_indices.len());
        }
        Ok(CsrMatrix {
            n,
            row_offsets,
            col_indices,
            values,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `(column, value)` pairs of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (lo, hi) = (self.row_offsets[i], self.row_offsets[i + 1]);
        self.col_indices[lo..hi]
            .iter()
            .copied()
            .zip(self.values[lo..hi].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (lo, hi) = (self.row_offsets[i], self.row_offsets[i + 1]);
        match self.col_indices[lo..hi].binary_search(&j) {
            Ok(pos) => self.values[lo + pos],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                t.set(i, j, v);
            }
        }
        t
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut counts = vec![0usize; self.n + 1];
        for &c in &self.col_indices {
            counts[c + 1] += 1;
        }
        for i in 0..self.n {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut col_indices = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                let pos = next[j];
                col_indices[pos] = i;
                values[pos] = v;
                next[j] += 1;
            }
        }
        CsrMatrix {
            n: self.n,
            row_offsets: counts,
            col_indices,
            values,
        }
    }

    /// Exact structural and value symmetry.
    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| self.row(i).all(|(j, v)| self.get(j, i) == v))
    }

    /// `S * X`. Each output row is reduced in stored column order.
    pub fn spmm(&self, x: &Tensor) -> Result<Tensor> {
        if x.rows() != self.n {
            return Err(Error::shape(
                "spmm",
                format!("{} rows", self.n),
                format!("{} rows", x.rows()),
            ));
        }
        let d = x.cols();
        let mut out = Tensor::zeros(self.n, d);
        for i in 0..self.n {
            let out_row = out.row_mut(i);
            for (j, v) in self.row(i) {
                for (o, &xv) in out_row.iter_mut().zip(x.row(j)) {
                    *o += v * xv;
                }
            }
        }
        Ok(out)
    }

    /// `Sᵀ * G` without building the transpose.
    pub fn spmm_transposed(&self, g: &Tensor) -> Tensor {
        let d = g.cols();
        let mut out = Tensor::zeros(self.n, d);
        for i in 0..self.n {
            let g_row = g.row(i).to_vec();
            for (j, v) in self.row(i) {
                for (o, gv) in out.row_mut(j).iter_mut().zip(&g_row) {
                    *o += v * gv;
                }
            }
        }
        out
    }

    /// `P A Pᵀ` where `perm[i]` is the new index of node `i`.
    pub fn permute(&self, perm: &[usize]) -> CsrMatrix {
        let mut entries: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.n];
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                entries[perm[i]].push((perm[j], v));
            }
        }
        let mut row_offsets = vec![0];
        let mut col_indices = Vec::with_capacity(self.nnz());
        let mut values = Vec::with_capacity(self.nnz());
        for mut row in entries {
            row.sort_by_key(|&(c, _)| c);
            for (c, v) in row {
                col_indices.push(c);
                values.push(v);
            }
            row_offsets.push(col_indices.len());
        }
        CsrMatrix {
            n: self.n,
            row_offsets,
            col_indices,
            values,
        }
    }
}

/// Symmetric normalization `D^{-1/2} A D^{-1/2}`.
///
/// With `add_self_loops` the normalization runs on `A + I`, where an existing
/// diagonal entry is kept at its stored weight instead of being incremented.
/// Degree-zero nodes get scale 0, so their rows and columns stay empty.
pub fn normalized_adjacency(a: &CsrMatrix, add_self_loops: bool) -> Result<CsrMatrix> {
    if !a.is_symmetric() {
        return Err(Error::invalid(
            "normalized_adjacency",
            "adjacency is not symmetric; use normalized_adjacency_directed",
        ));
    }
    let a = if add_self_loops { with_self_loops(a) } else { a.clone() };
    let degree: Vec<f64> = (0..a.n).map(|i| a.row(i).map(|(_, v)| v).sum()).collect();
    Ok(scale_entries(&a, &degree, &degree))
}

/// `D_out^{-1/2} A D_in^{-1/2}` for directed adjacencies; reduces to
/// [`normalized_adjacency`] on symmetric input.
pub fn normalized_adjacency_directed(a: &CsrMatrix, add_self_loops: bool) -> CsrMatrix {
    let a = if add_self_loops { with_self_loops(a) } else { a.clone() };
    let out_deg: Vec<f64> = (0..a.n).map(|i| a.row(i).map(|(_, v)| v).sum()).collect();
    let mut in_deg = vec![0.0; a.n];
    for i in 0..a.n {
        for (j, v) in a.row(i) {
            in_deg[j] += v;
        }
    }
    scale_entries(&a, &out_deg, &in_deg)
}

fn inv_sqrt(d: f64) -> f64 {
    if d > 0.0 {
        1.0 / d.sqrt()
    } else {
        0.0
    }
}

fn scale_entries(a: &CsrMatrix, row_deg: &[f64], col_deg: &[f64]) -> CsrMatrix {
    let mut row_offsets = vec![0];
    let mut col_indices = Vec::with_capacity(a.nnz());
    let mut values = Vec::with_capacity(a.nnz());
    for (i, &d) in row_deg.iter().enumerate().take(a.n) {
        let si = inv_sqrt(d);
        for (j, v) in a.row(i) {
            let w = si * v * inv_sqrt(col_deg[j]);
            if w != 0.0 {
                col_indices.push(j);
                values.push(w);
            }
        }
        row_offsets.push(col_indices.len());
    }
    CsrMatrix {
        n: a.n,
        row_offsets,
        col_indices,
        values,
    }
}

fn with_self_loops(a: &CsrMatrix) -> CsrMatrix {
    let mut row_offsets = vec![0];
    let mut col_indices = Vec::with_capacity(a.nnz() + a.n);
    let mut values = Vec::with_capacity(a.nnz() + a.n);
    for i in 0..a.n {
        let mut placed = false;
        for (j, v) in a.row(i) {
            if !placed && j >= i {
                if j > i {
                    col_indices.push(i);
                    values.push(1.0);
                }
                placed = true;
            }
            col_indices.push(j);
            values.push(v);
        }
        if !placed {
            col_indices.push(i);
            values.push(1.0);
        }
        row_offsets.push(col_indices.len());
    }
    CsrMatrix {
        n: a.n,
        row_offsets,
        col_indices,
        values,
    }
}

/// `[X, S X, S² X, …, S^K X]` by repeated products.
pub fn power_apply(s: &CsrMatrix, x: &Tensor, k: usize) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(k + 1);
    out.push(x.clone());
    for _ in 0..k {
        let next = s.spmm(out.last().unwrap())?;
        out.push(next);
    }
    Ok(out)
}
