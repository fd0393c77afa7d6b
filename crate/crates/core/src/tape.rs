//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! Every forward operation appends a node holding its value and enough
//! bookkeeping to push a gradient back to its inputs. Parameters never live
//! on the tape: operations that consume them (`linear`, `embedding`,
//! `rect_linear`) refer to the [`ParameterStore`] by id and deposit their
//! gradients straight into a [`GradientMap`] during [`Tape::backward`].

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

use crate::params::{GradientMap, ParamId, ParameterStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Half-open cell rectangle `[r0, r1) x [c0, c1)` on a square grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellRect {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

impl CellRect {
    pub fn is_empty(&self) -> bool {
        self.r0 >= self.r1 || self.c0 >= self.c1
    }

    pub fn cells(&self) -> usize {
        if self.is_empty() {
            0
        } else {
            (self.r1 - self.r0) * (self.c1 - self.c0)
        }
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Linear { x: Var, w: ParamId, b: Option<ParamId> },
    Embedding { table: ParamId, rows: Vec<usize> },
    /// Linear layer whose input is a stack of binary rectangle masks.
    RectLinear { w: ParamId, b: ParamId, grid: usize, value: f64, rects: Vec<Vec<CellRect>> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    Rows(Var, Vec<usize>),
    MeanRows(Var, usize, usize),
    RowDot(Var, Var),
    ScaleRows(Var, Var),
    SegmentSoftmax(Var, Vec<(usize, usize)>),
    SegmentSum { x: Var, segment: Vec<usize> },
    SumAll(Var),
    WeightedSum(Vec<(Var, f64)>),
    SoftCrossEntropy { logits: Var, target: Vec<f64> },
    SmoothL1 { pred: Var, target: Array2<f64>, weights: Vec<f64> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParameterStore,
    nodes: Vec<Node>,
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Fixed-point scale of the summed-area tables.
const FIXED_ONE: f64 = 18_446_744_073_709_551_616.0;

/// Per-(output, channel) summed-area tables of a rectangle-mask weight
/// matrix laid out as `out x (channels * grid * grid)`. Entries are fixed
/// point integers, so a rectangle sum is exact and unaffected by cells
/// outside the rectangle.
fn integral_images(w: &Array2<f64>, grid: usize) -> (Vec<i128>, usize) {
    let (out, cols) = w.dim();
    let channels = cols / (grid * grid);
    let stride = grid + 1;
    let plane = stride * stride;
    let mut tables = vec![0i128; out * channels * plane];
    for o in 0..out {
        let row = w.row(o);
        for ch in 0..channels {
            let t = &mut tables[(o * channels + ch) * plane..(o * channels + ch + 1) * plane];
            for r in 0..grid {
                let mut acc = 0i128;
                for c in 0..grid {
                    acc += (row[ch * grid * grid + r * grid + c] * FIXED_ONE).round() as i128;
                    t[(r + 1) * stride + c + 1] = t[r * stride + c + 1] + acc;
                }
            }
        }
    }
    (tables, channels)
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParameterStore) -> Self {
        Tape { params, nodes: Vec::with_capacity(256) }
    }

    pub fn params(&self) -> &'p ParameterStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn row_constant(&mut self, values: &[f64]) -> Var {
        self.constant(Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape"))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Array2::zeros((rows, cols)))
    }

    /// `x W^T + b` with `W` stored as `out x in`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Var {
        let wv = self.params.get(w);
        let mut y = self.value(x).dot(&wv.t());
        if let Some(b) = b {
            y += &self.params.get(b).row(0);
        }
        self.push(y, Op::Linear { x, w, b })
    }

    pub fn embedding(&mut self, table: ParamId, rows: Vec<usize>) -> Var {
        let t = self.params.get(table);
        let value = t.select(Axis(0), &rows);
        self.push(value, Op::Embedding { table, rows })
    }

    /// Row `n` of the output is `b + sum_ch sum_{cells in rects[n][ch]} W[:, ch, cell]`,
    /// i.e. a dense layer applied to the rasterized rectangles, evaluated
    /// through summed-area tables.
    pub fn rect_linear(&mut self, w: ParamId, b: ParamId, grid: usize, value: f64, rects: Vec<Vec<CellRect>>) -> Var {
        let wv = self.params.get(w);
        let bv = self.params.get(b);
        let out = wv.nrows();
        let (tables, channels) = integral_images(wv, grid);
        let stride = grid + 1;
        let plane = stride * stride;
        let mut y = Array2::zeros((rects.len(), out));
        for (n, row_rects) in rects.iter().enumerate() {
            assert_eq!(row_rects.len(), channels, "one rectangle per mask channel");
            for o in 0..out {
                let mut acc = bv[[0, o]];
                for (ch, r) in row_rects.iter().enumerate() {
                    if r.is_empty() {
                        continue;
                    }
                    let t = &tables[(o * channels + ch) * plane..];
                    let sum = t[r.r1 * stride + r.c1] - t[r.r0 * stride + r.c1] - t[r.r1 * stride + r.c0]
                        + t[r.r0 * stride + r.c0];
                    acc += value * (sum as f64 / FIXED_ONE);
                }
                y[[n, o]] = acc;
            }
        }
        self.push(y, Op::RectLinear { w, b, grid, value, rects })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 - x);
        self.push(v, Op::OneMinus(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    /// Gather rows (repeats allowed).
    pub fn rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let v = self.value(a).select(Axis(0), &idx);
        self.push(v, Op::Rows(a, idx))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        self.rows(a, vec![i])
    }

    /// Mean of rows `start..end` as a single row.
    pub fn mean_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        assert!(start < end, "mean over an empty row range");
        let v = self
            .value(a)
            .slice(s![start..end, ..])
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a, start, end))
    }

    /// Row-wise inner products, `n x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let v = (self.value(a) * self.value(b)).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::RowDot(a, b))
    }

    /// Multiply each row of `a` by the matching entry of the column `w`.
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Var {
        let v = self.value(a) * self.value(w);
        self.push(v, Op::ScaleRows(a, w))
    }

    /// Softmax of a column vector within each contiguous row segment.
    pub fn segment_softmax(&mut self, a: Var, segments: Vec<(usize, usize)>) -> Var {
        let x = self.value(a);
        assert_eq!(x.ncols(), 1, "segment_softmax expects a column");
        let mut v = Array2::zeros(x.dim());
        for &(s, e) in &segments {
            let m = (s..e).map(|i| x[[i, 0]]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in s..e {
                let ex = (x[[i, 0]] - m).exp();
                v[[i, 0]] = ex;
                z += ex;
            }
            for i in s..e {
                v[[i, 0]] /= z;
            }
        }
        self.push(v, Op::SegmentSoftmax(a, segments))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let n = self.shape(a).0;
        self.segment_softmax(a, vec![(0, n)])
    }

    /// Scatter-add row `i` of `x` into output row `segment[i]`.
    pub fn segment_sum(&mut self, x: Var, segment: Vec<usize>, out_rows: usize) -> Var {
        let xv = self.value(x);
        let mut v = Array2::zeros((out_rows, xv.ncols()));
        for (i, &seg) in segment.iter().enumerate() {
            let mut dst = v.row_mut(seg);
            dst += &xv.row(i);
        }
        self.push(v, Op::SegmentSum { x, segment })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    /// `sum_k c_k * x_k` over same-shaped operands.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        assert!(!terms.is_empty());
        let mut v = self.value(terms[0].0) * terms[0].1;
        for &(t, c) in &terms[1..] {
            v.scaled_add(c, self.value(t));
        }
        self.push(v, Op::WeightedSum(terms))
    }

    /// `-sum_m target_m * log_softmax(logits)_m` over all entries of `logits`.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: Vec<f64>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.len(), target.len(), "soft_cross_entropy: length mismatch");
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let loss: f64 = z.iter().zip(&target).map(|(zi, ti)| ti * (lse - zi)).sum();
        self.push(Array2::from_elem((1, 1), loss), Op::SoftCrossEntropy { logits, target })
    }

    /// `sum_n weights[n] * sum_c smooth_l1(pred[n, c] - target[n, c])`.
    pub fn smooth_l1(&mut self, pred: Var, target: Array2<f64>, weights: Vec<f64>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.dim(), target.dim());
        assert_eq!(weights.len(), p.nrows());
        let mut loss = 0.0;
        for (n, w) in weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            let row: f64 = p.row(n).iter().zip(target.row(n)).map(|(a, b)| smooth_l1_value(a - b)).sum();
            loss += w * row;
        }
        self.push(Array2::from_elem((1, 1), loss), Op::SmoothL1 { pred, target, weights })
    }

    /// Gradients of the scalar `output` with respect to every parameter the
    /// tape touched.
    pub fn backward(&self, output: Var) -> GradientMap {
        let mut grads = GradientMap::new(self.params.len());
        self.backward_into(output, &mut grads);
        grads
    }

    pub fn backward_into(&self, output: Var, pgrads: &mut GradientMap) {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut g: Vec<Option<Array2<f64>>> = (0..=output.0).map(|_| None).collect();
        g[output.0] = Some(Array2::from_elem((1, 1), 1.0));

        fn acc(g: &mut [Option<Array2<f64>>], v: Var, d: Array2<f64>) {
            match &mut g[v.0] {
                Some(existing) => *existing += &d,
                slot @ None => *slot = Some(d),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(dy) = g[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Linear { x, w, b } => {
                    let wv = self.params.get(*w);
                    let xv = self.value(*x);
                    let dw = dy.t().dot(xv);
                    *pgrads.slot(*w, wv.dim()) += &dw;
                    if let Some(b) = b {
                        let db = dy.sum_axis(Axis(0));
                        let slot = pgrads.slot(*b, (1, db.len()));
                        let mut r = slot.row_mut(0);
                        r += &db;
                    }
                    acc(&mut g, *x, dy.dot(wv));
                }
                Op::Embedding { table, rows } => {
                    let shape = self.params.get(*table).dim();
                    let slot = pgrads.slot(*table, shape);
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = slot.row_mut(r);
                        dst += &dy.row(i);
                    }
                }
                Op::RectLinear { w, b, grid, value, rects } => {
                    let grid = *grid;
                    let shape = self.params.get(*w).dim();
                    let out = shape.0;
                    let channels = shape.1 / (grid * grid);
                    let stride = grid + 1;
                    let plane = stride * stride;
                    let mut diff = vec![0.0; out * channels * plane];
                    for (n, row_rects) in rects.iter().enumerate() {
                        for (ch, r) in row_rects.iter().enumerate() {
                            if r.is_empty() {
                                continue;
                            }
                            for o in 0..out {
                                let d = value * dy[[n, o]];
                                let t = &mut diff[(o * channels + ch) * plane..];
                                t[r.r0 * stride + r.c0] += d;
                                t[r.r0 * stride + r.c1] -= d;
                                t[r.r1 * stride + r.c0] -= d;
                                t[r.r1 * stride + r.c1] += d;
                            }
                        }
                    }
                    let slot = pgrads.slot(*w, shape);
                    for o in 0..out {
                        let mut row = slot.row_mut(o);
                        for ch in 0..channels {
                            let t = &diff[(o * channels + ch) * plane..(o * channels + ch + 1) * plane];
                            let mut col_acc = vec![0.0; grid];
                            for r in 0..grid {
                                let mut run = 0.0;
                                for c in 0..grid {
                                    run += t[r * stride + c];
                                    col_acc[c] += run;
                                    row[ch * grid * grid + r * grid + c] += col_acc[c];
                                }
                            }
                        }
                    }
                    let db = dy.sum_axis(Axis(0));
                    let bslot = pgrads.slot(*b, (1, out));
                    let mut r = bslot.row_mut(0);
                    r += &db;
                }
                Op::Add(a, b) => {
                    acc(&mut g, *b, dy.clone());
                    acc(&mut g, *a, dy);
                }
                Op::Sub(a, b) => {
                    acc(&mut g, *b, -&dy);
                    acc(&mut g, *a, dy);
                }
                Op::Mul(a, b) => {
                    let da = &dy * self.value(*b);
                    let db = &dy * self.value(*a);
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::Scale(a, c) => acc(&mut g, *a, dy * *c),
                Op::OneMinus(a) => acc(&mut g, *a, -dy),
                Op::Relu(a) => {
                    let mut d = dy;
                    d.zip_mut_with(self.value(*a), |d, x| {
                        if *x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(&mut g, *a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = dy;
                    d.zip_mut_with(&node.value, |d, y| *d *= y * (1.0 - y));
                    acc(&mut g, *a, d);
                }
                Op::Tanh(a) => {
                    let mut d = dy;
                    d.zip_mut_with(&node.value, |d, y| *d *= 1.0 - y * y);
                    acc(&mut g, *a, d);
                }
                Op::Abs(a) => {
                    let mut d = dy;
                    d.zip_mut_with(self.value(*a), |d, x| *d *= x.signum() * (*x != 0.0) as u8 as f64);
                    acc(&mut g, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut c = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        acc(&mut g, *p, dy.slice(s![.., c..c + w]).to_owned());
                        c += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut r = 0;
                    for p in parts {
                        let h = self.shape(*p).0;
                        acc(&mut g, *p, dy.slice(s![r..r + h, ..]).to_owned());
                        r += h;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut d = Array2::zeros(self.shape(*a));
                    d.slice_mut(s![.., *start..*end]).assign(&dy);
                    acc(&mut g, *a, d);
                }
                Op::Rows(a, idx) => {
                    let mut d = Array2::zeros(self.shape(*a));
                    for (i, &r) in idx.iter().enumerate() {
                        let mut dst = d.row_mut(r);
                        dst += &dy.row(i);
                    }
                    acc(&mut g, *a, d);
                }
                Op::MeanRows(a, start, end) => {
                    let mut d = Array2::zeros(self.shape(*a));
                    let inv = 1.0 / (*end - *start) as f64;
                    for r in *start..*end {
                        d.row_mut(r).scaled_add(inv, &dy.row(0));
                    }
                    acc(&mut g, *a, d);
                }
                Op::RowDot(a, b) => {
                    let da = self.value(*b) * &dy;
                    let db = self.value(*a) * &dy;
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::ScaleRows(a, w) => {
                    let da = &dy * self.value(*w);
                    let dw = (&dy * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut g, *a, da);
                    acc(&mut g, *w, dw);
                }
                Op::SegmentSoftmax(a, segments) => {
                    let y = &node.value;
                    let mut d = Array2::zeros(y.dim());
                    for &(s, e) in segments {
                        let dot: f64 = (s..e).map(|i| y[[i, 0]] * dy[[i, 0]]).sum();
                        for i in s..e {
                            d[[i, 0]] = y[[i, 0]] * (dy[[i, 0]] - dot);
                        }
                    }
                    acc(&mut g, *a, d);
                }
                Op::SegmentSum { x, segment } => {
                    let d = dy.select(Axis(0), segment);
                    acc(&mut g, *x, d);
                }
                Op::SumAll(a) => {
                    let d = Array2::from_elem(self.shape(*a), dy[[0, 0]]);
                    acc(&mut g, *a, d);
                }
                Op::WeightedSum(terms) => {
                    for &(t, c) in terms {
                        acc(&mut g, t, &dy * c);
                    }
                }
                Op::SoftCrossEntropy { logits, target } => {
                    let z = self.value(*logits);
                    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = z.iter().map(|v| (v - m).exp()).sum();
                    let total: f64 = target.iter().sum();
                    let scale = dy[[0, 0]];
                    let mut d = Array2::zeros(z.dim());
                    for ((di, zi), ti) in d.iter_mut().zip(z.iter()).zip(target) {
                        *di = scale * (((zi - m).exp() / denom) * total - ti);
                    }
                    acc(&mut g, *logits, d);
                }
                Op::SmoothL1 { pred, target, weights } => {
                    let p = self.value(*pred);
                    let scale = dy[[0, 0]];
                    let mut d = Array2::zeros(p.dim());
                    for (n, w) in weights.iter().enumerate() {
                        if *w == 0.0 {
                            continue;
                        }
                        for c in 0..p.ncols() {
                            d[[n, c]] = scale * w * smooth_l1_grad(p[[n, c]] - target[[n, c]]);
                        }
                    }
                    acc(&mut g, *pred, d);
                }
            }
        }
    }
}

pub fn smooth_l1_value(e: f64) -> f64 {
    if e.abs() < 1.0 {
        0.5 * e * e
    } else {
        e.abs() - 0.5
    }
}

fn smooth_l1_grad(e: f64) -> f64 {
    if e.abs() < 1.0 {
        e
    } else {
        e.signum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use ndarray::array;

    #[test]
    fn affine_mse_matches_closed_form() {
        // loss = sum (x W^T + b - t)^2 ; dW = 2 r^T x, db = 2 sum r
        let mut store = ParameterStore::new();
        let w = store.insert("w", ParamKind::Weight, array![[0.5, -1.0], [2.0, 0.25]]);
        let b = store.insert("b", ParamKind::Bias, array![[0.1, -0.2]]);
        let x = array![[1.0, 2.0], [-1.0, 0.5]];
        let t = array![[0.0, 1.0], [1.0, 0.0]];
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x.clone());
        let y = tape.linear(xv, w, Some(b));
        let tv = tape.constant(t.clone());
        let r = tape.sub(y, tv);
        let sq = tape.mul(r, r);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss);

        let resid = x.dot(&store.get(w).t()) + store.get(b) - &t;
        let dw = resid.t().dot(&x) * 2.0;
        let db = resid.sum_axis(Axis(0)) * 2.0;
        let gw = grads.get(w).unwrap();
        for (a, e) in gw.iter().zip(dw.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
        for (a, e) in grads.get(b).unwrap().iter().zip(db.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_give_zero_gradients_to_inputs() {
        let mut store = ParameterStore::new();
        let w = store.insert("w", ParamKind::Weight, Array2::zeros((3, 2)));
        let mut tape = Tape::new(&store);
        let x = tape.constant(array![[1.0, 2.0]]);
        let y = tape.linear(x, w, None);
        let l = tape.sum_all(y);
        let grads = tape.backward(l);
        assert_eq!(grads.get(w).unwrap(), &array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]);
        assert_eq!(tape.scalar(l), 0.0);
    }

    #[test]
    fn rect_linear_equals_dense_product() {
        let grid = 5;
        let mut store = ParameterStore::new();
        let w = store.init_uniform("w", ParamKind::Weight, 3, 2 * grid * grid, 4, 1);
        let b = store.init_uniform("b", ParamKind::Bias, 1, 3, 4, 2);
        let rects = vec![
            vec![CellRect { r0: 1, r1: 4, c0: 0, c1: 2 }, CellRect { r0: 0, r1: 5, c0: 0, c1: 5 }],
            vec![CellRect { r0: 2, r1: 2, c0: 0, c1: 5 }, CellRect { r0: 4, r1: 5, c0: 3, c1: 4 }],
        ];
        let mut dense = Array2::<f64>::zeros((2, 2 * grid * grid));
        for (n, rs) in rects.iter().enumerate() {
            for (ch, r) in rs.iter().enumerate() {
                for rr in r.r0..r.r1 {
                    for cc in r.c0..r.c1 {
                        dense[[n, ch * grid * grid + rr * grid + cc]] = 1.0;
                    }
                }
            }
        }
        let mut tape = Tape::new(&store);
        let y = tape.rect_linear(w, b, grid, 0.5, rects);
        let expect = dense.dot(&store.get(w).t()) * 0.5 + store.get(b);
        for (a, e) in tape.value(y).iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
        // gradient of sum(y * c) w.r.t. W is c^T dense
        let c = array![[0.3, -1.0, 2.0], [1.5, 0.5, -0.25]];
        let cv = tape.constant(c.clone());
        let prod = tape.mul(y, cv);
        let l = tape.sum_all(prod);
        let grads = tape.backward(l);
        let expect_dw = c.t().dot(&dense) * 0.5;
        for (a, e) in grads.get(w).unwrap().iter().zip(expect_dw.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_cross_entropy_values() {
        let store = ParameterStore::new();
        let mut tape = Tape::new(&store);
        let z = tape.constant(array![[0.0], [0.0], [0.0], [0.0]]);
        let l = tape.soft_cross_entropy(z, vec![0.1, 0.2, 0.3, 0.4]);
        assert!((tape.scalar(l) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn segment_softmax_normalizes_each_segment() {
        let store = ParameterStore::new();
        let mut tape = Tape::new(&store);
        let z = tape.constant(array![[1.0], [2.0], [-3.0], [0.5], [0.5]]);
        let p = tape.segment_softmax(z, vec![(0, 3), (3, 5)]);
        let v = tape.value(p);
        assert!((v[[0, 0]] + v[[1, 0]] + v[[2, 0]] - 1.0).abs() < 1e-12);
        assert_eq!(v[[3, 0]], 0.5);
    }
}
