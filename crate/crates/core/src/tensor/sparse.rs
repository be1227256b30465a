use rand::Rng;

use super::Tensor;

/// Compressed sparse row matrix used for constant node-feature inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn from_dense(t: &Tensor) -> Self {
        let (rows, cols) = (t.rows(), t.cols());
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for r in 0..rows {
            for (c, &v) in t.row(r).iter().enumerate() {
                if v != 0.0 {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(column, value)` pairs of row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn to_dense(&self) -> Tensor {
        let mut data = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                data[r * self.cols + c] = v;
            }
        }
        Tensor::new(vec![self.rows, self.cols], data).expect("csr dimensions are consistent")
    }

    /// Inverted dropout applied to the stored entries (implicit zeros stay zero).
    pub fn dropout<R: Rng + ?Sized>(&self, p: f64, rng: &mut R) -> Self {
        if p == 0.0 {
            return self.clone();
        }
        let keep = 1.0 / (1.0 - p);
        let mut out = Self {
            rows: self.rows,
            cols: self.cols,
            indptr: Vec::with_capacity(self.rows + 1),
            indices: Vec::with_capacity(self.nnz()),
            values: Vec::with_capacity(self.nnz()),
        };
        out.indptr.push(0);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                if rng.gen::<f64>() >= p {
                    out.indices.push(c);
                    out.values.push(v * keep);
                }
            }
            out.indptr.push(out.indices.len());
        }
        out
    }
}
