use std::sync::Arc;

use rand::Rng;

use super::tape::{Op, Tape, Var};
use super::CsrMatrix;
use crate::error::{CsaError, Result};

impl Tape {
    fn expect_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(CsaError::shape(op, other, &[0, 0])),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(CsaError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let n = self.node(a);
        let value = n.value.iter().map(|&x| f(x)).collect();
        let shape = n.shape.clone();
        let tracked = n.tracked;
        self.push(shape, value, op, tracked)
    }

    /// `[m x k] . [k x n] -> [m x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.expect_matrix("matmul", a)?;
        let (k2, n) = self.expect_matrix("matmul", b)?;
        if k != k2 {
            return Err(CsaError::shape("matmul", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        let mut out = vec![0.0; m * n];
        // i-k-j order; zero entries of `a` (sparse bag-of-words features) are skipped.
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                orow.iter_mut().zip(brow).for_each(|(o, b)| *o += aip * b);
            }
        }
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), tracked))
    }

    /// `[m x k] . [k x n]` with a constant sparse left operand.
    pub fn sparse_matmul(&mut self, a: &Arc<CsrMatrix>, b: Var) -> Result<Var> {
        let (k, n) = self.expect_matrix("sparse_matmul", b)?;
        if a.cols() != k {
            return Err(CsaError::shape("sparse_matmul", &[a.rows(), a.cols()], self.shape(b)));
        }
        let bv = self.value(b);
        let mut out = vec![0.0; a.rows() * n];
        for i in 0..a.rows() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, aip) in a.row(i) {
                let brow = &bv[p * n..(p + 1) * n];
                orow.iter_mut().zip(brow).for_each(|(o, b)| *o += aip * b);
            }
        }
        let tracked = self.is_tracked(b);
        Ok(self.push(vec![a.rows(), n], out, Op::SparseMatMul(a.clone(), b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Sub(a, b), tracked))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b), tracked))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().sum();
        let tracked = self.is_tracked(a);
        self.push(Vec::new(), vec![total], Op::Sum(a), tracked)
    }

    /// `max(x, slope * x)` elementwise.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        if slope.is_nan() || slope < 0.0 {
            return Err(CsaError::invalid(format!("leaky_relu slope must be >= 0, got {slope}")));
        }
        Ok(self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x }))
    }

    pub fn elu(&mut self, a: Var, alpha: f64) -> Var {
        self.unary(a, Op::Elu(a, alpha), |x| if x > 0.0 { x } else { alpha * x.exp_m1() })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - p)`.
    ///
    /// With `p == 0` the input handle is returned unchanged and no random
    /// numbers are drawn.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(CsaError::invalid(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let value = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let tracked = self.is_tracked(a);
        Ok(self.push(self.shape(a).to_vec(), value, Op::MaskMul(a, mask), tracked))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(CsaError::invalid("concat_cols needs at least one input"));
        };
        let (rows, _) = self.expect_matrix("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.expect_matrix("concat_cols", p)?;
            if r != rows {
                return Err(CsaError::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let tracked = parts.iter().any(|&p| self.is_tracked(p));
        Ok(self.push(vec![rows, total], value, Op::ConcatCols(parts.to_vec()), tracked))
    }

    /// Selects rows `idx[0], idx[1], ...` of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: Arc<[usize]>) -> Result<Var> {
        let (rows, width) = self.expect_matrix("gather_rows", a)?;
        if let Some(&bad) = idx.iter().find(|&&r| r >= rows) {
            return Err(CsaError::invalid(format!(
                "gather_rows index {bad} out of range for {rows} rows"
            )));
        }
        let src = self.value(a);
        let mut value = Vec::with_capacity(idx.len() * width);
        for &r in idx.iter() {
            value.extend_from_slice(&src[r * width..(r + 1) * width]);
        }
        let tracked = self.is_tracked(a);
        Ok(self.push(vec![idx.len(), width], value, Op::GatherRows(a, idx), tracked))
    }

    /// Softmax of `scores` within groups of entries sharing a segment id.
    ///
    /// Each segment is shifted by its own maximum before exponentiation.
    pub fn segment_softmax(&mut self, scores: Var, segments: Arc<[usize]>, num_segments: usize) -> Result<Var> {
        let x = self.value(scores);
        if x.len() != segments.len() {
            return Err(CsaError::shape(
                "segment_softmax",
                self.shape(scores),
                &[segments.len()],
            ));
        }
        if x.is_empty() {
            return Err(CsaError::invalid("segment_softmax over an empty segment set"));
        }
        if x.iter().any(|v| v.is_nan()) {
            return Err(CsaError::NonFinite("segment_softmax scores"));
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= num_segments) {
            return Err(CsaError::invalid(format!(
                "segment id {bad} >= segment count {num_segments}"
            )));
        }
        let mut max = vec![f64::NEG_INFINITY; num_segments];
        for (&s, &v) in segments.iter().zip(x) {
            if v > max[s] {
                max[s] = v;
            }
        }
        let mut value: Vec<f64> = segments.iter().zip(x).map(|(&s, &v)| (v - max[s]).exp()).collect();
        let mut denom = vec![0.0; num_segments];
        for (&s, &v) in segments.iter().zip(&value) {
            denom[s] += v;
        }
        for (v, &s) in value.iter_mut().zip(segments.iter()) {
            *v /= denom[s];
        }
        let tracked = self.is_tracked(scores);
        let shape = self.shape(scores).to_vec();
        Ok(self.push(
            shape,
            value,
            Op::SegmentSoftmax {
                input: scores,
                segments,
                num_segments,
            },
            tracked,
        ))
    }

    /// `out[s] = sum over e with segments[e] == s of weights[e] * values[e]`.
    ///
    /// `weights` has one entry per row of `values`; the result has
    /// `num_segments` rows.
    pub fn segment_weighted_sum(
        &mut self,
        weights: Var,
        values: Var,
        segments: Arc<[usize]>,
        num_segments: usize,
    ) -> Result<Var> {
        let (rows, width) = self.expect_matrix("segment_weighted_sum", values)?;
        let w = self.value(weights);
        if w.len() != rows || segments.len() != rows {
            return Err(CsaError::shape(
                "segment_weighted_sum",
                self.shape(weights),
                self.shape(values),
            ));
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= num_segments) {
            return Err(CsaError::invalid(format!(
                "segment id {bad} >= segment count {num_segments}"
            )));
        }
        let v = self.value(values);
        let mut out = vec![0.0; num_segments * width];
        for (e, &s) in segments.iter().enumerate() {
            let we = w[e];
            let src = &v[e * width..(e + 1) * width];
            out[s * width..(s + 1) * width]
                .iter_mut()
                .zip(src)
                .for_each(|(o, x)| *o += we * x);
        }
        let tracked = self.is_tracked(weights) || self.is_tracked(values);
        Ok(self.push(
            vec![num_segments, width],
            out,
            Op::SegmentWeightedSum {
                weights,
                values,
                segments,
            },
            tracked,
        ))
    }

    /// Mean negative log-likelihood of `labels` over the rows listed in `mask`.
    pub fn cross_entropy(&mut self, logits: Var, labels: Arc<[usize]>, mask: Arc<[usize]>) -> Result<Var> {
        let (n, c) = self.expect_matrix("cross_entropy", logits)?;
        if mask.is_empty() {
            return Err(CsaError::invalid("cross_entropy over an empty mask"));
        }
        if labels.len() != n {
            return Err(CsaError::shape("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        let x = self.value(logits);
        let mut probs = Vec::with_capacity(mask.len() * c);
        let mut total = 0.0;
        for &i in mask.iter() {
            if i >= n {
                return Err(CsaError::invalid(format!("mask node {i} out of range for {n} rows")));
            }
            let label = labels[i];
            if label >= c {
                return Err(CsaError::invalid(format!("label {label} out of range for {c} classes")));
            }
            let row = &x[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let loss = total / mask.len() as f64;
        let tracked = self.is_tracked(logits);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels,
                mask,
                probs,
            },
            tracked,
        ))
    }
}
