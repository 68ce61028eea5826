use crate::error::{mismatch, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Compressed sparse row matrix acting on flattened `H x W` grids.
///
/// Rows index output pixels of an `out_h x out_w` grid, columns index input
/// pixels of an `in_h x in_w` grid. Values are kept in `f64` and converted at
/// application time.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseOperator {
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseOperator {
    /// Builds from one list of `(column, weight)` pairs per output pixel.
    pub fn from_rows(in_hw: (usize, usize), out_hw: (usize, usize), rows: Vec<Vec<(usize, f64)>>) -> Self {
        assert_eq!(rows.len(), out_hw.0 * out_hw.1);
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in rows {
            for (c, v) in row {
                assert!(c < in_hw.0 * in_hw.1, "column {c} out of range");
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Self { in_hw, out_hw, row_ptr, cols, vals }
    }

    pub fn in_hw(&self) -> (usize, usize) {
        self.in_hw
    }

    pub fn out_hw(&self) -> (usize, usize) {
        self.out_hw
    }

    pub fn rows(&self) -> usize {
        self.out_hw.0 * self.out_hw.1
    }

    pub fn cols(&self) -> usize {
        self.in_hw.0 * self.in_hw.1
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// `(row, col, value)` for every stored entry in row order.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows())
            .flat_map(move |r| (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |j| (r, self.cols[j], self.vals[j])))
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |j| (self.cols[j], self.vals[j]))
    }

    /// Dense `rows x cols` matrix, row-major.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.rows() * self.cols()];
        for (r, c, v) in self.triplets() {
            m[r * self.cols() + c] += v;
        }
        m
    }

    /// True when every row and every column holds exactly one entry equal to 1.
    pub fn is_permutation(&self) -> bool {
        if self.rows() != self.cols() {
            return false;
        }
        let mut hit = vec![false; self.cols()];
        for r in 0..self.rows() {
            let row: Vec<_> = self.row(r).collect();
            if row.len() != 1 || row[0].1 != 1.0 || hit[row[0].0] {
                return false;
            }
            hit[row[0].0] = true;
        }
        true
    }

    /// Applies the operator to every trailing `H x W` plane of `x`.
    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (lead, out_shape) = self.plan(x.shape())?;
        let (ni, no) = (self.cols(), self.rows());
        let src = x.data();
        let mut out = vec![T::zero(); lead * no];
        for p in 0..lead {
            let xs = &src[p * ni..(p + 1) * ni];
            let ys = &mut out[p * no..(p + 1) * no];
            for (r, y) in ys.iter_mut().enumerate() {
                let mut acc = T::zero();
                for j in self.row_ptr[r]..self.row_ptr[r + 1] {
                    acc += T::lit(self.vals[j]) * xs[self.cols[j]];
                }
                *y = acc;
            }
        }
        Tensor::new(out_shape, out)
    }

    /// Applies the transpose: scatters `dy` back onto the input grid.
    pub fn apply_transpose<T: Scalar>(&self, dy: &Tensor<T>, in_shape: &[usize]) -> Result<Tensor<T>> {
        let (lead, out_shape) = self.plan(in_shape)?;
        if dy.shape() != out_shape.as_slice() {
            return Err(mismatch("sparse transpose", out_shape, dy.shape()));
        }
        let (ni, no) = (self.cols(), self.rows());
        let g = dy.data();
        let mut dx = vec![T::zero(); lead * ni];
        for p in 0..lead {
            let gs = &g[p * no..(p + 1) * no];
            let xs = &mut dx[p * ni..(p + 1) * ni];
            for (r, &gv) in gs.iter().enumerate() {
                for j in self.row_ptr[r]..self.row_ptr[r + 1] {
                    xs[self.cols[j]] += T::lit(self.vals[j]) * gv;
                }
            }
        }
        Tensor::new(in_shape.to_vec(), dx)
    }

    fn plan(&self, shape: &[usize]) -> Result<(usize, Vec<usize>)> {
        let nd = shape.len();
        if nd < 2 || (shape[nd - 2], shape[nd - 1]) != self.in_hw {
            return Err(mismatch("sparse operator", self.in_hw, shape));
        }
        let lead: usize = shape[..nd - 2].iter().product();
        let mut out_shape = shape[..nd - 2].to_vec();
        out_shape.push(self.out_hw.0);
        out_shape.push(self.out_hw.1);
        Ok((lead, out_shape))
    }
}
