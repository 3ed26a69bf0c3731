//! A small reverse-mode tape over dense matrices.
//!
//! Nodes are appended in evaluation order, so the tape is already
//! topologically sorted and the backward pass is a single reverse sweep.
//! Only nodes reachable from a `requires_grad` leaf carry gradients.

use std::sync::Arc;

use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    LayerNorm { x: NodeId, inv_std: Vec<f64> },
    MaskedSoftmax(NodeId),
    Transpose(NodeId),
    SliceCols { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize },
    ConcatRows(Vec<NodeId>),
    NormalizeRows { x: NodeId, norms: Vec<f64> },
    CrossEntropy { logits: NodeId, target: usize, probs: Vec<f64> },
    SumSquares(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    needs_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Mat>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node { value, needs_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Mat> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    pub fn param(&mut self, value: Mat) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        assert_eq!(v.shape(), self.value(b).shape(), "sub shape mismatch");
        for (x, y) in v.data.iter_mut().zip(&self.value(b).data) {
            *x -= y;
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scaled(s);
        let ng = self.needs(a);
        self.push(v, ng, Op::Scale(a, s))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let data = x
            .data
            .iter()
            .map(|&u| 0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh()))
            .collect();
        let v = Mat::from_vec(x.rows, x.cols, data);
        let ng = self.needs(a);
        self.push(v, ng, Op::Gelu(a))
    }

    /// Per-row normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> NodeId {
        let x = self.value(a);
        let mut out = Mat::zeros(x.rows, x.cols);
        let mut inv_std = Vec::with_capacity(x.rows);
        let n = x.cols as f64;
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in out.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.needs(a);
        self.push(out, ng, Op::LayerNorm { x: a, inv_std })
    }

    /// Row softmax restricted to the `allowed` entries; disallowed entries
    /// are exactly zero and never enter the max or the normalizer.
    pub fn masked_softmax(&mut self, a: NodeId, allowed: &Arc<[bool]>) -> NodeId {
        let x = self.value(a);
        assert_eq!(allowed.len(), x.rows * x.cols, "mask shape mismatch");
        let mut out = Mat::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let mask = &allowed[r * x.cols..(r + 1) * x.cols];
            let row = x.row(r);
            let mut max = f64::NEG_INFINITY;
            for (v, &ok) in row.iter().zip(mask) {
                if ok && *v > max {
                    max = *v;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            let out_row = out.row_mut(r);
            for ((o, v), &ok) in out_row.iter_mut().zip(row).zip(mask) {
                if ok {
                    *o = (v - max).exp();
                    total += *o;
                }
            }
            for o in out_row.iter_mut() {
                *o /= total;
            }
        }
        let ng = self.needs(a);
        self.push(out, ng, Op::MaskedSoftmax(a))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        let ng = self.needs(a);
        self.push(v, ng, Op::Transpose(a))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = self.value(a);
        assert!(start + len <= x.cols, "column slice out of range");
        let mut v = Mat::zeros(x.rows, len);
        for r in 0..x.rows {
            v.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        let ng = self.needs(a);
        self.push(v, ng, Op::SliceCols { x: a, start })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.row_mut(r)[offset..offset + m.cols].copy_from_slice(m.row(r));
            }
            offset += m.cols;
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(v, ng, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = self.value(a);
        assert!(start + len <= x.rows, "row slice out of range");
        let v = Mat::from_vec(len, x.cols, x.data[start * x.cols..(start + len) * x.cols].to_vec());
        let ng = self.needs(a);
        self.push(v, ng, Op::SliceRows { x: a, start })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(Mat::from_vec(rows, cols, data), ng, Op::ConcatRows(parts.to_vec()))
    }

    /// Scales every row to unit L2 norm. Callers guarantee non-zero rows.
    pub fn normalize_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut v = x.clone();
        let mut norms = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let n = crate::tensor::norm(x.row(r));
            for e in v.row_mut(r) {
                *e /= n;
            }
            norms.push(n);
        }
        let ng = self.needs(a);
        self.push(v, ng, Op::NormalizeRows { x: a, norms })
    }

    /// `-log softmax(logits)[target]` for a single-row logit vector.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> NodeId {
        let x = self.value(logits);
        assert_eq!(x.rows, 1, "cross_entropy expects a row vector");
        assert!(target < x.cols, "cross_entropy target out of range");
        let max = x.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.data.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let loss = total.ln() + max - x.data[target];
        let probs = exps.iter().map(|e| e / total).collect();
        let ng = self.needs(logits);
        self.push(Mat::scalar(loss), ng, Op::CrossEntropy { logits, target, probs })
    }

    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data.iter().map(|v| v * v).sum();
        let ng = self.needs(a);
        self.push(Mat::scalar(s), ng, Op::SumSquares(a))
    }

    /// Backward pass from a scalar output.
    pub fn backward(&mut self, output: NodeId) {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar");
        self.backward_with(&[(output, Mat::scalar(1.0))]);
    }

    /// Backward pass seeded with explicit upstream gradients. Seeds for the
    /// same node accumulate.
    pub fn backward_with(&mut self, seeds: &[(NodeId, Mat)]) {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            assert_eq!(self.value(*id).shape(), g.shape(), "seed shape mismatch");
            accumulate(&mut grads, *id, g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
    }

    #[allow(clippy::needless_range_loop)]
    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let ga = g.matmul(&self.value(*b).transpose());
                    accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = self.value(*a).transpose().matmul(g);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.scaled(-1.0));
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scaled(*s)),
            Op::Gelu(a) => {
                let x = self.value(*a);
                let data = x
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&u, &gy)| {
                        let inner = GELU_C * (u + 0.044715 * u * u * u);
                        let t = inner.tanh();
                        let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * u * u);
                        gy * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dinner)
                    })
                    .collect();
                accumulate(grads, *a, Mat::from_vec(x.rows, x.cols, data));
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let n = y.cols as f64;
                let mut gx = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, gy), yy) in gx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = inv_std[r] * (gy - mean_g - yy * mean_gy);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::MaskedSoftmax(a) => {
                let y = &node.value;
                let mut gx = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yy), gy) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yy * (gy - s);
                    }
                }
                accumulate(grads, *a, gx);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::SliceCols { x, start } => {
                let src = self.value(*x);
                let mut gx = Mat::zeros(src.rows, src.cols);
                for r in 0..g.rows {
                    gx.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let cols = self.value(*p).cols;
                    if self.needs(*p) {
                        let mut gp = Mat::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        accumulate(grads, *p, gp);
                    }
                    offset += cols;
                }
            }
            Op::SliceRows { x, start } => {
                let src = self.value(*x);
                let mut gx = Mat::zeros(src.rows, src.cols);
                gx.data[start * src.cols..(start + g.rows) * src.cols].copy_from_slice(&g.data);
                accumulate(grads, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let m = self.value(*p);
                    if self.needs(*p) {
                        let data = g.data[offset * g.cols..(offset + m.rows) * g.cols].to_vec();
                        accumulate(grads, *p, Mat::from_vec(m.rows, m.cols, data));
                    }
                    offset += m.rows;
                }
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut gx = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yy), gy) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = (gy - yy * proj) / norms[r];
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::CrossEntropy { logits, target, probs } => {
                let upstream = g.data[0];
                let mut data: Vec<f64> = probs.iter().map(|p| p * upstream).collect();
                data[*target] -= upstream;
                accumulate(grads, *logits, Mat::row_vector(data));
            }
            Op::SumSquares(a) => {
                let upstream = g.data[0];
                let x = self.value(*a);
                accumulate(grads, *a, x.scaled(2.0 * upstream));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], id: NodeId, g: Mat) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of `build` (a scalar function of one leaf).
    fn check<F>(input: Mat, build: F)
    where
        F: Fn(&mut Graph, NodeId) -> NodeId,
    {
        let mut g = Graph::new();
        let x = g.param(input.clone());
        let out = build(&mut g, x);
        g.backward(out);
        let analytic = g.grad(x).unwrap().clone();
        let h = 1e-6;
        for i in 0..input.data.len() {
            let eval = |delta: f64| {
                let mut m = input.clone();
                m.data[i] += delta;
                let mut g = Graph::new();
                let x = g.param(m);
                let out = build(&mut g, x);
                g.value(out).data[0]
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "entry {i}: analytic {a} numeric {numeric}");
        }
    }

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::gaussian(rows, cols, 1.0, &mut rng)
    }

    #[test]
    fn grad_matmul_and_sum_squares() {
        let w = rand_mat(3, 2, 1);
        check(rand_mat(2, 3, 2), move |g, x| {
            let w = g.constant(w.clone());
            let y = g.matmul(x, w);
            g.sum_squares(y)
        });
    }

    #[test]
    fn grad_layer_norm_gelu() {
        let w = rand_mat(4, 4, 3);
        check(rand_mat(3, 4, 4), move |g, x| {
            let n = g.layer_norm(x, 1e-5);
            let a = g.gelu(n);
            let w = g.constant(w.clone());
            let y = g.matmul(a, w);
            g.sum_squares(y)
        });
    }

    #[test]
    fn grad_masked_softmax_attention() {
        let mask: Arc<[bool]> = vec![true, false, true, true, true, false, true, true, true].into();
        let v = rand_mat(3, 2, 5);
        check(rand_mat(3, 3, 6), move |g, x| {
            let s = g.masked_softmax(x, &mask);
            let v = g.constant(v.clone());
            let o = g.matmul(s, v);
            g.sum_squares(o)
        });
    }

    #[test]
    fn masked_entries_are_exact_zero() {
        let mut g = Graph::new();
        let x = g.constant(Mat::from_vec(1, 3, vec![1e3, 2.0, -1.0]));
        let mask: Arc<[bool]> = vec![false, true, true].into();
        let s = g.masked_softmax(x, &mask);
        assert_eq!(g.value(s).data[0], 0.0);
        assert!((g.value(s).data[1] + g.value(s).data[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn grad_slices_concats_transpose() {
        check(rand_mat(3, 4, 7), |g, x| {
            let a = g.slice_cols(x, 1, 2);
            let b = g.slice_rows(x, 0, 2);
            let bt = g.transpose(b);
            let c = g.concat_cols(&[a, a]);
            let d = g.concat_rows(&[b, c]);
            let e = g.matmul(d, bt);
            let s = g.scale(e, 0.7);
            g.sum_squares(s)
        });
    }

    #[test]
    fn grad_normalize_cross_entropy() {
        let w = rand_mat(3, 4, 8);
        check(rand_mat(1, 4, 9), move |g, x| {
            let xn = g.normalize_rows(x);
            let w = g.constant(w.clone());
            let wn = g.normalize_rows(w);
            let wt = g.transpose(wn);
            let logits = g.matmul(xn, wt);
            let logits = g.scale(logits, 10.0);
            g.cross_entropy(logits, 2)
        });
    }

    #[test]
    fn grad_add_sub_shared_use() {
        check(rand_mat(2, 2, 10), |g, x| {
            let y = g.add(x, x);
            let z = g.sub(y, x);
            let p = g.matmul(z, x);
            g.sum_squares(p)
        });
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Mat::scalar(2.0));
        let p = g.param(Mat::scalar(3.0));
        let y = g.matmul(c, p);
        let l = g.sum_squares(y);
        g.backward(l);
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(p).unwrap().data[0], 2.0 * 6.0 * 2.0);
    }
}
