//! Reverse-mode differentiation over small dense matrices.
//!
//! Every operation evaluates eagerly and records its parents. Nodes created
//! with [`Tape::constant`] never receive gradients, and any node whose parents
//! are all constant is itself constant, so frozen sub-graphs cost nothing in
//! the backward sweep.

use crate::numerics::{lit, Mat, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `a * s` where `s` is a 1×1 node.
    ScaleBy(NodeId, NodeId),
    ScaleConst(NodeId, T),
    LayerNorm {
        x: NodeId,
        inv_std: Vec<T>,
    },
    Gelu(NodeId),
    SoftmaxRows {
        x: NodeId,
        scale: T,
    },
    ColSlice {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    MeanRows(NodeId),
    L2NormalizeRows {
        x: NodeId,
        norms: Vec<T>,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Mat<T>,
    },
    /// Forward value is fixed; the gradient is routed to `soft` unchanged.
    StraightThrough {
        soft: NodeId,
    },
    Sum(NodeId),
    Mul(NodeId, NodeId),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by node; `None` for constants or untouched nodes.
#[derive(Clone, Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, id: NodeId) -> Option<&Mat<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Mat<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

const LN_EPS: f64 = 1e-5;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].grad)
    }

    /// Trainable input.
    pub fn var(&mut self, value: Mat<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Mat<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Mat<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].grad
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let g = self.needs(&[a, b]);
        self.push(v, Op::MatMul(a, b), g)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_nt(self.value(b));
        let g = self.needs(&[a, b]);
        self.push(v, Op::MatMulNt(a, b), g)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let g = self.needs(&[a, b]);
        self.push(v, Op::Add(a, b), g)
    }

    /// Element-wise product of equal-shaped nodes.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let g = self.needs(&[a, b]);
        self.push(v, Op::Mul(a, b), g)
    }

    /// Multiplies `a` by the 1×1 node `s`.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert_eq!(
            self.value(s).shape(),
            (1, 1),
            "scale_by expects a 1x1 scale"
        );
        let sv = self.value(s).get(0, 0);
        let v = self.value(a).map(|x| x * sv);
        let g = self.needs(&[a, s]);
        self.push(v, Op::ScaleBy(a, s), g)
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        let g = self.needs(&[a]);
        self.push(v, Op::ScaleConst(a, c), g)
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let n = lit::<T>(c as f64);
        let eps = lit::<T>(LN_EPS);
        let mut out = Mat::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let g = self.needs(&[x]);
        self.push(out, Op::LayerNorm { x, inv_std }, g)
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(gelu);
        let g = self.needs(&[x]);
        self.push(v, Op::Gelu(x), g)
    }

    /// Row-wise softmax of `scale · x`.
    pub fn softmax_rows(&mut self, x: NodeId, scale: T) -> NodeId {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let mut out = Mat::zeros(r, c);
        for i in 0..r {
            let row = xv.row(i);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
                *o = ((v - m) * scale).exp();
                total = total + *o;
            }
            out.row_mut(i).iter_mut().for_each(|o| *o = *o / total);
        }
        let g = self.needs(&[x]);
        self.push(out, Op::SoftmaxRows { x, scale }, g)
    }

    pub fn col_slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        assert!(start + len <= xv.cols(), "col_slice out of range");
        let mut out = Mat::zeros(xv.rows(), len);
        for i in 0..xv.rows() {
            out.row_mut(i)
                .copy_from_slice(&xv.row(i)[start..start + len]);
        }
        let g = self.needs(&[x]);
        self.push(out, Op::ColSlice { x, start }, g)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row count");
            for i in 0..rows {
                out.row_mut(i)[off..off + pv.cols()].copy_from_slice(pv.row(i));
            }
            off += pv.cols();
        }
        let g = self.needs(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows column count");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let out = Mat::from_vec(rows, cols, data).expect("concat_rows shape");
        let g = self.needs(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), g)
    }

    /// Mean over rows, giving a 1×cols node.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let n = lit::<T>(xv.rows() as f64);
        let mut out = vec![T::zero(); xv.cols()];
        for i in 0..xv.rows() {
            for (o, &v) in out.iter_mut().zip(xv.row(i)) {
                *o = *o + v;
            }
        }
        let out = Mat::row_vector(out.into_iter().map(|v| v / n).collect());
        let g = self.needs(&[x]);
        self.push(out, Op::MeanRows(x), g)
    }

    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let n = crate::numerics::norm(xv.row(i)).max(lit(1e-12));
            out.row_mut(i).iter_mut().for_each(|v| *v = *v / n);
            norms.push(n);
        }
        let g = self.needs(&[x]);
        self.push(out, Op::L2NormalizeRows { x, norms }, g)
    }

    /// Mean softmax cross-entropy of `logits` rows against class indices.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), labels.len(), "cross_entropy label count");
        let (r, c) = lv.shape();
        let mut probs = Mat::zeros(r, c);
        let mut loss = T::zero();
        for i in 0..r {
            let row = lv.row(i);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let total: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + total.ln();
            loss = loss + (lse - row[labels[i]]);
            for (p, &v) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let loss = loss / lit(r as f64);
        let g = self.needs(&[logits]);
        self.push(
            Mat::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            g,
        )
    }

    /// Node whose forward value is `hard` and whose gradient flows to `soft`.
    pub fn straight_through(&mut self, soft: NodeId, hard: Mat<T>) -> NodeId {
        assert_eq!(
            self.value(soft).shape(),
            hard.shape(),
            "straight_through shape"
        );
        let g = self.needs(&[soft]);
        self.push(hard, Op::StraightThrough { soft }, g)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().copied().sum();
        let g = self.needs(&[x]);
        self.push(Mat::scalar(s), Op::Sum(x), g)
    }

    /// Back-propagates from the 1×1 node `loss`.
    pub fn backward(&self, loss: NodeId) -> Grads<T> {
        assert_eq!(
            self.value(loss).shape(),
            (1, 1),
            "backward expects a scalar loss"
        );
        let mut grads: Vec<Option<Mat<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Mat<T>>], id: NodeId, g: Mat<T>) {
        if !self.nodes[id.0].grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, gout: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, gout.matmul_nt(self.value(*b)));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_tn(gout));
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a bᵀ ; da = gout b ; db = goutᵀ a
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, gout.matmul(self.value(*b)));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, gout.matmul_tn(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, gout.zip_map(self.value(*b), |g, y| g * y));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, gout.zip_map(self.value(*a), |g, x| g * x));
                }
            }
            Op::ScaleBy(a, s) => {
                let sv = self.value(*s).get(0, 0);
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, gout.map(|g| g * sv));
                }
                if self.requires_grad(*s) {
                    let ds = crate::numerics::dot(gout.data(), self.value(*a).data());
                    self.accumulate(grads, *s, Mat::scalar(ds));
                }
            }
            Op::ScaleConst(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, gout.map(|g| g * c));
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let (r, c) = y.shape();
                let n = lit::<T>(c as f64);
                let mut dx = Mat::zeros(r, c);
                for i in 0..r {
                    let gy = gout.row(i);
                    let yr = y.row(i);
                    let mg = gy.iter().copied().sum::<T>() / n;
                    let mgy = crate::numerics::dot(gy, yr) / n;
                    for ((d, &g), &yy) in dx.row_mut(i).iter_mut().zip(gy).zip(yr) {
                        *d = inv_std[i] * (g - mg - yy * mgy);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let dx = gout.zip_map(self.value(*x), |g, v| g * gelu_grad(v));
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxRows { x, scale } => {
                let y = &node.value;
                let (r, c) = y.shape();
                let mut dx = Mat::zeros(r, c);
                for i in 0..r {
                    let gy = gout.row(i);
                    let yr = y.row(i);
                    let s = crate::numerics::dot(gy, yr);
                    for ((d, &g), &yy) in dx.row_mut(i).iter_mut().zip(gy).zip(yr) {
                        *d = *scale * yy * (g - s);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ColSlice { x, start } => {
                let xv = self.value(*x);
                let mut dx = Mat::zeros(xv.rows(), xv.cols());
                let len = gout.cols();
                for i in 0..xv.rows() {
                    dx.row_mut(i)[*start..*start + len].copy_from_slice(gout.row(i));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut dp = Mat::zeros(gout.rows(), pc);
                        for i in 0..gout.rows() {
                            dp.row_mut(i).copy_from_slice(&gout.row(i)[off..off + pc]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    if self.requires_grad(p) {
                        let c = gout.cols();
                        let slice = gout.data()[off * c..(off + pr) * c].to_vec();
                        self.accumulate(grads, p, Mat::from_vec(pr, c, slice).expect("rows"));
                    }
                    off += pr;
                }
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let n = lit::<T>(xv.rows() as f64);
                let mut dx = Mat::zeros(xv.rows(), xv.cols());
                for i in 0..xv.rows() {
                    for (d, &g) in dx.row_mut(i).iter_mut().zip(gout.row(0)) {
                        *d = g / n;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut dx = Mat::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let gy = gout.row(i);
                    let yr = y.row(i);
                    let p = crate::numerics::dot(gy, yr);
                    for ((d, &g), &yy) in dx.row_mut(i).iter_mut().zip(gy).zip(yr) {
                        *d = (g - yy * p) / norms[i];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let g = gout.get(0, 0) / lit(labels.len() as f64);
                let mut dl = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    let v = dl.get(i, y);
                    dl.set(i, y, v - T::one());
                }
                self.accumulate(grads, *logits, dl.map(|v| v * g));
            }
            Op::StraightThrough { soft } => {
                self.accumulate(grads, *soft, gout.clone());
            }
            Op::Sum(x) => {
                let g = gout.get(0, 0);
                let xv = self.value(*x);
                self.accumulate(
                    grads,
                    *x,
                    Mat::from_vec(xv.rows(), xv.cols(), vec![g; xv.data().len()]).expect("sum"),
                );
            }
        }
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = lit::<T>((2.0 / std::f64::consts::PI).sqrt());
    let k = lit::<T>(0.044715);
    let half = lit::<T>(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = lit::<T>((2.0 / std::f64::consts::PI).sqrt());
    let k = lit::<T>(0.044715);
    let half = lit::<T>(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + lit::<T>(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numerical_gradient<T: Scalar>(
    x: &Mat<T>,
    eps: T,
    mut f: impl FnMut(&Mat<T>) -> T,
) -> Mat<T> {
    let mut probe = x.clone();
    let mut out = Mat::zeros(x.rows(), x.cols());
    for k in 0..x.data().len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[k] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[k] = orig;
        out.data_mut()[k] = (up - down) / (eps + eps);
    }
    out
}

/// Largest `|a − n| / max(|a|, |n|, floor)` over all entries.
pub fn max_relative_error<T: Scalar>(analytic: &Mat<T>, numeric: &Mat<T>, floor: T) -> T {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(T::zero(), T::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    type BuildFn = fn(&mut Tape<f64>, NodeId, NodeId) -> NodeId;

    fn check(build: BuildFn, a: Mat<f64>, b: Mat<f64>) {
        let mut tape = Tape::new();
        let ia = tape.var(a.clone());
        let ib = tape.var(b.clone());
        let out = build(&mut tape, ia, ib);
        let grads = tape.backward(out);
        let eval = |a: &Mat<f64>, b: &Mat<f64>| {
            let mut t = Tape::new();
            let ia = t.var(a.clone());
            let ib = t.var(b.clone());
            let o = build(&mut t, ia, ib);
            t.value(o).get(0, 0)
        };
        let na = numerical_gradient(&a, 1e-5, |p| eval(p, &b));
        let nb = numerical_gradient(&b, 1e-5, |p| eval(&a, p));
        let ea = max_relative_error(grads.get(ia).unwrap(), &na, 1e-6);
        let eb = max_relative_error(grads.get(ib).unwrap(), &nb, 1e-6);
        assert!(ea < 1e-6, "grad a rel err {ea}");
        assert!(eb < 1e-6, "grad b rel err {eb}");
    }

    fn rand(r: usize, c: usize, seed: u64) -> Mat<f64> {
        Mat::random_normal(r, c, 1.0, &mut Rng::seed(seed))
    }

    #[test]
    fn quadratic_is_exact() {
        // f(x) = sum(x ⊙ x) ; df/dx = 2x
        let x = rand(3, 2, 1);
        let mut t = Tape::new();
        let ix = t.var(x.clone());
        let sq = t.mul(ix, ix);
        let s = t.sum(sq);
        let g = t.backward(s);
        let n = numerical_gradient(&x, 1e-4, |p| p.data().iter().map(|v| v * v).sum());
        assert!(max_relative_error(g.get(ix).unwrap(), &n, 1e-12) < 1e-6);
        for (gv, xv) in g.get(ix).unwrap().data().iter().zip(x.data()) {
            assert_eq!(*gv, 2.0 * xv);
        }
    }

    #[test]
    fn matmul_grads() {
        check(
            |t, a, b| {
                let m = t.matmul(a, b);
                let g = t.gelu(m);
                t.sum(g)
            },
            rand(3, 4, 2),
            rand(4, 2, 3),
        );
        check(
            |t, a, b| {
                let m = t.matmul_nt(a, b);
                let s = t.softmax_rows(m, 0.7);
                let w = t.mul(s, s);
                t.sum(w)
            },
            rand(3, 4, 4),
            rand(5, 4, 5),
        );
    }

    #[test]
    fn norm_and_slice_grads() {
        check(
            |t, a, b| {
                let x = t.add(a, b);
                let ln = t.layer_norm(x);
                let l = t.col_slice(ln, 1, 2);
                let r = t.col_slice(ln, 0, 1);
                let c = t.concat_cols(&[r, l]);
                let n = t.l2_normalize_rows(c);
                let m = t.mean_rows(n);
                let sq = t.mul(m, m);
                t.sum(sq)
            },
            rand(3, 4, 6),
            rand(3, 4, 7),
        );
    }

    #[test]
    fn cross_entropy_and_scale_grads() {
        check(
            |t, a, b| {
                let s = t.col_slice(b, 0, 1);
                let s = t.mean_rows(s);
                let x = t.scale_by(a, s);
                let x = t.scale(x, 3.0);
                let rows = t.concat_rows(&[x, a]);
                t.cross_entropy(rows, &[0, 2, 1, 1])
            },
            rand(2, 3, 8),
            rand(2, 3, 9),
        );
    }

    #[test]
    fn straight_through_passes_soft_gradient() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.var(Mat::scalar(0.3));
        let soft = t.softmax_rows(x, 1.0);
        let st = t.straight_through(soft, Mat::scalar(0.0));
        assert_eq!(t.value(st).get(0, 0), 0.0);
        let y = t.scale(st, 2.0);
        let s = t.sum(y);
        let g = t.backward(s);
        // softmax over a single entry has zero derivative
        assert_eq!(g.get(x).unwrap().get(0, 0), 0.0);
        assert_eq!(g.get(soft).unwrap().get(0, 0), 2.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t: Tape<f64> = Tape::new();
        let c = t.constant(rand(2, 2, 10));
        let v = t.var(rand(2, 2, 11));
        let m = t.matmul(c, v);
        let s = t.sum(m);
        let g = t.backward(s);
        assert!(g.get(c).is_none());
        assert!(g.get(v).is_some());
        let cc = t.matmul(c, c);
        assert!(!t.requires_grad(cc));
    }
}
