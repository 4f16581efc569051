//! Matrix-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one objective evaluation. Parameter
//! nodes are slices of a flat parameter vector, so [`Tape::backward`] returns
//! the gradient with respect to that flat vector directly.

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

/// `out = beta * out + op(a) * op(b)` where `op` optionally transposes.
fn gemm(a: &Mat, trans_a: bool, b: &Mat, trans_b: bool, beta: f64, out: &mut [f64]) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "inner dimension");
    assert_eq!(out.len(), m * n, "output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides describe exactly the storage of `a`, `b` and `out`,
    // whose lengths were checked against (m, k, n) above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param { offset: usize },
    MatMul { a: Var, b: Var, trans_b: bool },
    AddBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Relu { x: Var },
    RowNorm { x: Var, inv_std: Vec<f64> },
    RowSoftmax { x: Var },
    Dropout { x: Var, mask: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    Row { x: Var, index: usize },
    CrossEntropy { p: Var, target: Vec<f64> },
    HalfSumSquares { x: Var },
    WeightedSqDiff { x: Var, anchor: Vec<f64>, weights: Vec<f64> },
    Sum { parts: Vec<Var> },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Probability floor inside the cross-entropy logarithm.
pub const CE_CLAMP: f64 = 1e-12;

/// Records a computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Input => false,
            Op::Param { .. } => true,
            Op::MatMul { a, b, .. } => self.ng(*a) || self.ng(*b),
            Op::AddBias { x, bias } => self.ng(*x) || self.ng(*bias),
            Op::Add { a, b } => self.ng(*a) || self.ng(*b),
            Op::Scale { x, .. }
            | Op::Relu { x }
            | Op::RowNorm { x, .. }
            | Op::RowSoftmax { x }
            | Op::Dropout { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Row { x, .. }
            | Op::HalfSumSquares { x }
            | Op::WeightedSqDiff { x, .. } => self.ng(*x),
            Op::CrossEntropy { p, .. } => self.ng(*p),
            Op::ConcatCols { parts } | Op::Sum { parts } => parts.iter().any(|p| self.ng(*p)),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input)
    }

    /// A `rows x cols` block of the flat parameter vector starting at `offset`.
    pub fn param(&mut self, theta: &[f64], offset: usize, rows: usize, cols: usize) -> Var {
        let data = theta[offset..offset + rows * cols].to_vec();
        self.push(Mat::from_vec(rows, cols, data), Op::Param { offset })
    }

    /// `a * b`, or `a * b^T` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let m = av.rows;
        let n = if trans_b { bv.rows } else { bv.cols };
        let mut out = Mat::zeros(m, n);
        gemm(av, false, bv, trans_b, 0.0, &mut out.data);
        self.push(out, Op::MatMul { a, b, trans_b })
    }

    /// Adds a `1 x cols` bias to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let mut out = self.value(x).clone();
        let b = &self.value(bias).data;
        assert_eq!(b.len(), out.cols, "bias width");
        for r in 0..out.rows {
            for (o, bb) in out.row_mut(r).iter_mut().zip(b) {
                *o += bb;
            }
        }
        self.push(out, Op::AddBias { x, bias })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        let bv = self.value(b);
        assert_eq!((out.rows, out.cols), (bv.rows, bv.cols), "add shapes");
        for (o, v) in out.data.iter_mut().zip(&bv.data) {
            *o += v;
        }
        self.push(out, Op::Add { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v *= factor);
        self.push(out, Op::Scale { x, factor })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu { x })
    }

    /// Standardizes every row to zero mean and unit variance.
    pub fn row_norm(&mut self, x: Var, eps: f64) -> Var {
        let mut out = self.value(x).clone();
        let cols = out.cols as f64;
        let mut inv_std = Vec::with_capacity(out.rows);
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        self.push(out, Op::RowNorm { x, inv_std })
    }

    pub fn row_softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::RowSoftmax { x })
    }

    /// Elementwise multiply by a fixed mask (already scaled by `1/(1-p)`).
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let mut out = self.value(x).clone();
        assert_eq!(mask.len(), out.data.len(), "dropout mask");
        for (o, m) in out.data.iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(out, Op::Dropout { x, mask })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let src = self.value(x);
        assert!(start + len <= src.cols, "column slice out of range");
        let mut out = Mat::zeros(src.rows, len);
        for r in 0..src.rows {
            out.row_mut(r).copy_from_slice(&src.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut c0 = 0;
        for p in &parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows, rows, "concat rows");
            for r in 0..rows {
                out.row_mut(r)[c0..c0 + pv.cols].copy_from_slice(pv.row(r));
            }
            c0 += pv.cols;
        }
        self.push(out, Op::ConcatCols { parts })
    }

    /// Row `index` as a `1 x cols` matrix.
    pub fn row(&mut self, x: Var, index: usize) -> Var {
        let src = self.value(x);
        let out = Mat::from_vec(1, src.cols, src.row(index).to_vec());
        self.push(out, Op::Row { x, index })
    }

    /// `-sum_j target_j * ln(max(p_j, 1e-12))` over a `1 x C` probability row.
    pub fn cross_entropy(&mut self, p: Var, target: &[f64]) -> Var {
        let pv = &self.value(p).data;
        assert_eq!(pv.len(), target.len(), "cross-entropy length");
        let loss: f64 = pv
            .iter()
            .zip(target)
            .map(|(p, t)| if *t == 0.0 { 0.0 } else { -t * p.max(CE_CLAMP).ln() })
            .sum();
        self.push(
            Mat::from_vec(1, 1, vec![loss]),
            Op::CrossEntropy {
                p,
                target: target.to_vec(),
            },
        )
    }

    /// `0.5 * sum(x^2)`.
    pub fn half_sum_squares(&mut self, x: Var) -> Var {
        let s = 0.5 * self.value(x).data.iter().map(|v| v * v).sum::<f64>();
        self.push(Mat::from_vec(1, 1, vec![s]), Op::HalfSumSquares { x })
    }

    /// `0.5 * sum_i w_i (x_i - a_i)^2`.
    pub fn weighted_sq_diff(&mut self, x: Var, anchor: &[f64], weights: &[f64]) -> Var {
        let xv = &self.value(x).data;
        assert_eq!(xv.len(), anchor.len(), "anchor length");
        assert_eq!(xv.len(), weights.len(), "weights length");
        let s = 0.5
            * xv.iter()
                .zip(anchor)
                .zip(weights)
                .map(|((x, a), w)| w * (x - a) * (x - a))
                .sum::<f64>();
        self.push(
            Mat::from_vec(1, 1, vec![s]),
            Op::WeightedSqDiff {
                x,
                anchor: anchor.to_vec(),
                weights: weights.to_vec(),
            },
        )
    }

    /// Sum of scalar nodes. An empty list yields a constant zero.
    pub fn sum(&mut self, parts: Vec<Var>) -> Var {
        let s = parts.iter().map(|p| self.value(*p).scalar()).sum();
        self.push(Mat::from_vec(1, 1, vec![s]), Op::Sum { parts })
    }

    /// Back-propagates from scalar `loss` and returns the gradient with
    /// respect to the flat parameter vector of length `n_params`.
    pub fn backward(&self, loss: Var, n_params: usize) -> Result<Vec<f64>> {
        let lv = self.value(loss);
        if lv.data.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {}x{}",
                lv.rows, lv.cols
            )));
        }
        if !lv.data[0].is_finite() {
            return Err(Error::NonFinite(format!("loss = {}", lv.data[0])));
        }
        let mut theta_grad = vec![0.0; n_params];
        let mut grads: Vec<Option<Mat>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_vec(1, 1, vec![1.0]));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param { offset } => {
                    for (t, v) in theta_grad[*offset..*offset + g.data.len()]
                        .iter_mut()
                        .zip(&g.data)
                    {
                        *t += v;
                    }
                }
                Op::MatMul { a, b, trans_b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        // dA = dC * op(B)^T
                        let mut da = Mat::zeros(av.rows, av.cols);
                        gemm(&g, false, bv, !*trans_b, 0.0, &mut da.data);
                        accumulate(&mut grads, *a, da);
                    }
                    if self.ng(*b) {
                        let mut db = Mat::zeros(bv.rows, bv.cols);
                        if *trans_b {
                            // C = A B^T  =>  dB = dC^T A
                            gemm(&g, true, av, false, 0.0, &mut db.data);
                        } else {
                            gemm(av, true, &g, false, 0.0, &mut db.data);
                        }
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::AddBias { x, bias } => {
                    if self.ng(*bias) {
                        let mut db = Mat::zeros(1, g.cols);
                        for r in 0..g.rows {
                            for (d, v) in db.data.iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads, *bias, db);
                    }
                    if self.ng(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Add { a, b } => {
                    if self.ng(*a) && self.ng(*b) {
                        accumulate(&mut grads, *a, g.clone());
                        accumulate(&mut grads, *b, g);
                    } else if self.ng(*a) {
                        accumulate(&mut grads, *a, g);
                    } else {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Scale { x, factor } => {
                    let mut d = g;
                    d.data.iter_mut().for_each(|v| *v *= factor);
                    accumulate(&mut grads, *x, d);
                }
                Op::Relu { x } => {
                    let mut d = g;
                    for (dv, xv) in d.data.iter_mut().zip(&self.value(*x).data) {
                        if *xv <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::RowNorm { x, inv_std } => {
                    let y = &node.value;
                    let cols = y.cols as f64;
                    let mut d = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let (gy, yy) = (g.row(r), y.row(r));
                        let mean_g = gy.iter().sum::<f64>() / cols;
                        let mean_gy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / cols;
                        for ((dv, gv), yv) in d.row_mut(r).iter_mut().zip(gy).zip(yy) {
                            *dv = inv_std[r] * (gv - mean_g - yv * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::RowSoftmax { x } => {
                    let y = &node.value;
                    let mut d = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let (gy, yy) = (g.row(r), y.row(r));
                        let dot: f64 = gy.iter().zip(yy).map(|(a, b)| a * b).sum();
                        for ((dv, gv), yv) in d.row_mut(r).iter_mut().zip(gy).zip(yy) {
                            *dv = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Dropout { x, mask } => {
                    let mut d = g;
                    for (dv, m) in d.data.iter_mut().zip(mask) {
                        *dv *= m;
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::SliceCols { x, start } => {
                    let src = self.value(*x);
                    let mut d = Mat::zeros(src.rows, src.cols);
                    for r in 0..src.rows {
                        d.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::ConcatCols { parts } => {
                    let mut c0 = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        if self.ng(*p) {
                            let mut d = Mat::zeros(pv.rows, pv.cols);
                            for r in 0..pv.rows {
                                d.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + pv.cols]);
                            }
                            accumulate(&mut grads, *p, d);
                        }
                        c0 += pv.cols;
                    }
                }
                Op::Row { x, index } => {
                    let src = self.value(*x);
                    let mut d = Mat::zeros(src.rows, src.cols);
                    d.row_mut(*index).copy_from_slice(&g.data);
                    accumulate(&mut grads, *x, d);
                }
                Op::CrossEntropy { p, target } => {
                    let pv = self.value(*p);
                    let up = g.scalar();
                    let data = pv
                        .data
                        .iter()
                        .zip(target)
                        .map(|(p, t)| if *p > CE_CLAMP { -up * t / p } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *p, Mat::from_vec(pv.rows, pv.cols, data));
                }
                Op::HalfSumSquares { x } => {
                    let xv = self.value(*x);
                    let up = g.scalar();
                    let data = xv.data.iter().map(|v| up * v).collect();
                    accumulate(&mut grads, *x, Mat::from_vec(xv.rows, xv.cols, data));
                }
                Op::WeightedSqDiff { x, anchor, weights } => {
                    let xv = self.value(*x);
                    let up = g.scalar();
                    let data = xv
                        .data
                        .iter()
                        .zip(anchor)
                        .zip(weights)
                        .map(|((x, a), w)| up * w * (x - a))
                        .collect();
                    accumulate(&mut grads, *x, Mat::from_vec(xv.rows, xv.cols, data));
                }
                Op::Sum { parts } => {
                    for p in parts {
                        if self.ng(*p) {
                            accumulate(&mut grads, *p, g.clone());
                        }
                    }
                }
            }
        }
        if let Some(bad) = theta_grad.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {bad}")));
        }
        Ok(theta_grad)
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, d: Mat) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data.iter_mut().zip(&d.data) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

/// Numerically stable softmax with max subtraction.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: impl Fn(&mut Tape, Var) -> Var, theta: &[f64]) {
        let mut tape = Tape::new();
        let p = tape.param(theta, 0, 1, theta.len());
        let loss = f(&mut tape, p);
        let grad = tape.backward(loss, theta.len()).unwrap();
        let h = 1e-6;
        for i in 0..theta.len() {
            let eval = |delta: f64| {
                let mut t = theta.to_vec();
                t[i] += delta;
                let mut tape = Tape::new();
                let p = tape.param(&t, 0, 1, t.len());
                let l = f(&mut tape, p);
                tape.value(l).scalar()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                "coord {i}: fd {fd} vs {}",
                grad[i]
            );
        }
    }

    #[test]
    fn half_sum_squares_gradient_is_identity() {
        let theta = [3.0, -4.0, 0.5];
        let mut tape = Tape::new();
        let p = tape.param(&theta, 0, 1, 3);
        let l = tape.half_sum_squares(p);
        assert_eq!(tape.backward(l, 3).unwrap(), theta.to_vec());
    }

    #[test]
    fn matmul_transposed_and_softmax_gradients() {
        let theta: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();
        fd_check(
            |t, p| {
                let r0 = t.slice_cols(p, 0, 4);
                let r1 = t.slice_cols(p, 4, 4);
                let r2 = t.slice_cols(p, 8, 4);
                let s = t.matmul(r0, r1, true);
                let s2 = t.matmul(r2, r1, true);
                let c = t.concat_cols(vec![s, s2, r0]);
                let sm = t.row_softmax(c);
                t.cross_entropy(sm, &[0.1, 0.2, 0.3, 0.1, 0.2, 0.1])
            },
            &theta,
        );
    }

    #[test]
    fn norm_relu_bias_gradients() {
        let theta: Vec<f64> = (0..12).map(|i| (i as f64 * 1.3).sin()).collect();
        fd_check(
            |t, p| {
                let x = t.input(Mat::from_vec(2, 4, vec![0.5, -1.0, 2.0, 0.1, 1.0, 0.0, -0.3, 0.7]));
                let w = t.slice_cols(p, 0, 4);
                let b = t.slice_cols(p, 4, 4);
                let xw = t.matmul(x, w, true);
                let h = t.add_bias(x, b);
                let h = t.relu(h);
                let h = t.add_bias(h, w);
                let n = t.row_norm(h, 1e-5);
                let r = t.row(n, 1);
                let s = t.scale(r, 0.7);
                let q = t.half_sum_squares(s);
                let xw2 = t.half_sum_squares(xw);
                let pr = t.weighted_sq_diff(p, &[0.1; 12], &[2.0; 12]);
                t.sum(vec![q, xw2, pr])
            },
            &theta,
        );
    }
}
