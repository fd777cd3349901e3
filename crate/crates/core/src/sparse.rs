//! Compressed sparse row matrix with just the operations the solver needs:
//! deterministic construction from per-row entry lists, parallel mat-vec,
//! row access, and submatrix extraction for the per-solid smoother blocks.

use nalgebra::DMatrix;
use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Build from per-row entry lists; duplicate column entries are summed,
    /// exact zeros dropped, columns sorted. Deterministic for a given input.
    pub fn from_rows(nrows: usize, ncols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        assert_eq!(rows.len(), nrows);
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            let mut k = 0;
            while k < row.len() {
                let col = row[k].0;
                assert!(col < ncols, "column {col} out of bounds {ncols}");
                let mut v = 0.0;
                while k < row.len() && row[k].0 == col {
                    v += row[k].1;
                    k += 1;
                }
                if v != 0.0 {
                    col_idx.push(col);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    pub fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        let (cols, vals) = self.row(i);
        cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum()
    }

    /// y = A x (parallel over rows).
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        y.par_iter_mut()
            .enumerate()
            .for_each(|(i, yi)| *yi = self.row_dot(i, x));
    }

    pub fn mul_vec_alloc(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.mul_vec(x, &mut y);
        y
    }

    /// Extract the square submatrix over `dofs` (global indices, in order).
    /// Entries whose column is outside the set are dropped.
    pub fn extract(&self, dofs: &[usize]) -> CsrMatrix {
        let mut lookup = vec![usize::MAX; self.ncols];
        for (local, &g) in dofs.iter().enumerate() {
            lookup[g] = local;
        }
        let rows: Vec<Vec<(usize, f64)>> = dofs
            .iter()
            .map(|&g| {
                let (cols, vals) = self.row(g);
                cols.iter()
                    .zip(vals)
                    .filter_map(|(&c, &v)| {
                        let l = lookup[c];
                        (l != usize::MAX).then_some((l, v))
                    })
                    .collect()
            })
            .collect();
        CsrMatrix::from_rows(dofs.len(), dofs.len(), rows)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                d[(i, c)] = v;
            }
        }
        d
    }

    /// Coordinate-format dump (row col value per line) for offline inspection.
    pub fn write_coo(&self, w: &mut impl std::io::Write) -> std::io::Result<()> {
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                writeln!(w, "{i} {c} {v:.17e}")?;
            }
        }
        Ok(())
    }
}


impl CsrMatrix {
    /// Sparse matrix product `self * other` (row-merge accumulation).
    pub fn matmul(&self, other: &CsrMatrix) -> CsrMatrix {
        assert_eq!(self.ncols, other.nrows);
        use rayon::prelude::*;
        let rows: Vec<Vec<(usize, f64)>> = (0..self.nrows)
            .into_par_iter()
            .map(|i| {
                let mut acc: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
                let (cols, vals) = self.row(i);
                for (&k, &v) in cols.iter().zip(vals) {
                    let (kc, kv) = other.row(k);
                    for (&c, &w) in kc.iter().zip(kv) {
                        *acc.entry(c).or_insert(0.0) += v * w;
                    }
                }
                acc.into_iter().collect()
            })
            .collect();
        CsrMatrix::from_rows(self.nrows, other.ncols, rows)
    }
}
