//! A small reverse-mode automatic differentiation tape over `ndarray` tensors.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to run the backward pass. Values are always kept in standard
//! (row-major, contiguous) layout so reshapes are free.
//!
//! Shape mismatches inside the tape are programming errors and panic; the
//! model layers validate user-facing shapes before they reach the tape.

use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn, LinalgScalar, NdFloat};
use num_traits::FromPrimitive;
use std::fmt::Debug;

/// Floating point scalar usable on the tape (`f32` for training, `f64` for
/// gradient checks).
pub trait Real: NdFloat + FromPrimitive + LinalgScalar + Default + Debug + 'static {
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("representable literal")
    }
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddBias(Var, Var),
    MulBias(Var, Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<F> },
    BatchNorm { x: Var, inv_std: Vec<F> },
    MaxAxis { x: Var, argmax: Vec<usize> },
    MeanAxis { x: Var, axis: usize },
    SumLast(Var),
    ConcatLast(Var, Var),
    L2Normalize { x: Var, norms: Vec<F>, eps: F },
    TemporalUnfold { x: Var, kernel: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Array2<F> },
    Mean(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node<F> {
    value: ArrayD<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Statistics produced by a training-mode batch normalization, needed to
/// update running averages outside the tape.
#[derive(Clone, Debug)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
    /// Rows the statistics were computed over.
    pub count: usize,
}

/// Reverse-mode tape. Build a graph with the op methods, then call
/// [`Tape::backward`] on a scalar node.
#[derive(Debug, Default)]
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

/// Gradients returned by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn view2<F>(a: &ArrayD<F>) -> ArrayView2<'_, F> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("rank-2 tensor expected")
}

/// Flattens all leading axes so the last axis becomes columns.
fn rows_view<F>(a: &ArrayD<F>) -> ArrayView2<'_, F> {
    let d = *a.shape().last().expect("rank >= 1");
    let r = if d == 0 { 0 } else { a.len() / d };
    a.view()
        .into_shape_with_order((r, d))
        .expect("standard layout")
}

fn to_dyn<F>(a: Array2<F>) -> ArrayD<F> {
    a.into_dyn()
}

fn standard<F: Clone>(a: ArrayD<F>) -> ArrayD<F> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: standard(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a rank-0 or single-element node.
    pub fn scalar(&self, v: Var) -> F {
        *self.nodes[v.0].value.iter().next().expect("non-empty")
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; no gradient is ever computed for it.
    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let v = self.value(a) * c;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// `a[..., d] + b[d]`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Var {
        let d = *self.shape(a).last().expect("rank >= 1");
        assert_eq!(self.shape(b), &[d], "bias shape mismatch");
        let bias = self.value(b).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut out = rows_view(self.value(a)).to_owned();
        out += &bias;
        let shape = self.shape(a).to_vec();
        let v = out.into_shape_with_order(IxDyn(&shape)).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::AddBias(a, b), rg)
    }

    /// `a[..., d] * b[d]`.
    pub fn mul_bias(&mut self, a: Var, b: Var) -> Var {
        let d = *self.shape(a).last().expect("rank >= 1");
        assert_eq!(self.shape(b), &[d], "scale shape mismatch");
        let s = self.value(b).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut out = rows_view(self.value(a)).to_owned();
        out *= &s;
        let shape = self.shape(a).to_vec();
        let v = out.into_shape_with_order(IxDyn(&shape)).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MulBias(a, b), rg)
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = to_dyn(view2(self.value(a)).dot(&view2(self.value(b))));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `[B, m, k] x [B, k, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        assert_eq!(bv.shape()[0], bs, "bmm batch mismatch");
        assert_eq!(bv.shape()[1], k, "bmm inner mismatch");
        let n = bv.shape()[2];
        let mut out = ArrayD::<F>::zeros(IxDyn(&[bs, m, n]));
        for i in 0..bs {
            let x = av.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
            let y = bv.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
            let mut o = out
                .index_axis_mut(Axis(0), i)
                .into_dimensionality::<Ix2>()
                .unwrap();
            ndarray::linalg::general_mat_mul(F::one(), &x, &y, F::zero(), &mut o);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::BatchMatMul(a, b), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape element count mismatch");
        let rg = self.rg(a);
        self.push(v, Op::Reshape(a), rg)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let v = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let rg = self.rg(a);
        self.push(v, Op::Permute(a, axes.to_vec()), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| if x > F::zero() { x } else { F::zero() });
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = rows_view(self.value(a)).to_owned();
        for mut row in out.rows_mut() {
            let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
            row.mapv_inplace(|x| (x - mx).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let shape = self.shape(a).to_vec();
        let v = out.into_shape_with_order(IxDyn(&shape)).unwrap();
        let rg = self.rg(a);
        self.push(v, Op::Softmax(a), rg)
    }

    /// Normalizes each row over the last axis to zero mean, unit variance.
    /// No affine parameters; compose with [`Tape::mul_bias`] / [`Tape::add_bias`].
    pub fn layer_norm(&mut self, a: Var, eps: F) -> Var {
        let mut out = rows_view(self.value(a)).to_owned();
        let d = F::lit(out.ncols() as f64);
        let mut inv_std = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|x| x - mean);
            let var = row.iter().map(|&x| x * x).fold(F::zero(), |s, x| s + x) / d;
            let is = F::one() / (var + eps).sqrt();
            row.mapv_inplace(|x| x * is);
            inv_std.push(is);
        }
        let shape = self.shape(a).to_vec();
        let v = out.into_shape_with_order(IxDyn(&shape)).unwrap();
        let rg = self.rg(a);
        self.push(v, Op::LayerNorm { x: a, inv_std }, rg)
    }

    /// Training-mode batch normalization: each column (last axis) is
    /// normalized with statistics over all other axes. Returns the
    /// normalized node and the biased batch statistics.
    pub fn batch_norm(&mut self, a: Var, eps: F) -> (Var, BatchStats<F>) {
        let mut out = rows_view(self.value(a)).to_owned();
        let count = out.nrows();
        let n = F::lit(count as f64);
        let mean = out.sum_axis(Axis(0)) / n;
        out -= &mean;
        let var = out.mapv(|x| x * x).sum_axis(Axis(0)) / n;
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let is = ndarray::Array1::from(inv_std.clone());
        out *= &is;
        let shape = self.shape(a).to_vec();
        let v = out.into_shape_with_order(IxDyn(&shape)).unwrap();
        let rg = self.rg(a);
        let stats = BatchStats {
            mean: mean.to_vec(),
            var: var.to_vec(),
            count,
        };
        (self.push(v, Op::BatchNorm { x: a, inv_std }, rg), stats)
    }

    /// Maximum along `axis`, removing it. Gradient routes to the first
    /// maximal element.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Var {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let data = x.as_slice().expect("standard layout");
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * n * inner + i;
                for j in 1..n {
                    let idx = (o * n + j) * inner + i;
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let v = ArrayD::from_shape_vec(IxDyn(&oshape), out).unwrap();
        let rg = self.rg(a);
        self.push(v, Op::MaxAxis { x: a, argmax }, rg)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let v = self.value(a).mean_axis(Axis(axis)).expect("non-empty axis");
        let rg = self.rg(a);
        self.push(v, Op::MeanAxis { x: a, axis }, rg)
    }

    /// Sum over the last axis, removing it.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = x.sum_axis(Axis(x.ndim() - 1));
        let rg = self.rg(a);
        self.push(v, Op::SumLast(a), rg)
    }

    /// Concatenation along the last axis; leading shapes must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa[..sa.len() - 1], sb[..sb.len() - 1], "concat shape mismatch");
        let ax = Axis(sa.len() - 1);
        let v = ndarray::concatenate(ax, &[self.value(a).view(), self.value(b).view()]).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::ConcatLast(a, b), rg)
    }

    /// Divides each row (last axis) by its L2 norm plus `eps`.
    pub fn l2_normalize(&mut self, a: Var, eps: F) -> Var {
        let mut out = rows_view(self.value(a)).to_owned();
        let mut norms = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let n = row.iter().map(|&x| x * x).fold(F::zero(), |s, x| s + x).sqrt();
            let s = n + eps;
            row.mapv_inplace(|x| x / s);
            norms.push(n);
        }
        let shape = self.shape(a).to_vec();
        let v = out.into_shape_with_order(IxDyn(&shape)).unwrap();
        let rg = self.rg(a);
        self.push(v, Op::L2Normalize { x: a, norms, eps }, rg)
    }

    /// `[N, T, V, C] -> [N, T, V, K*C]`: gathers a zero-padded window of
    /// `kernel` frames centred on each frame (im2col along time).
    pub fn temporal_unfold(&mut self, a: Var, kernel: usize) -> Var {
        assert!(kernel % 2 == 1, "temporal kernel must be odd");
        let x = self.value(a);
        let s = x.shape();
        assert_eq!(s.len(), 4, "temporal_unfold expects [N, T, V, C]");
        let (n, t, v, c) = (s[0], s[1], s[2], s[3]);
        let pad = kernel / 2;
        let src = x.as_slice().unwrap();
        let mut out = vec![F::zero(); n * t * v * kernel * c];
        for ni in 0..n {
            for ti in 0..t {
                for k in 0..kernel {
                    let ts = ti + k;
                    if ts < pad || ts - pad >= t {
                        continue;
                    }
                    let ts = ts - pad;
                    for vi in 0..v {
                        let so = ((ni * t + ts) * v + vi) * c;
                        let dof = (((ni * t + ti) * v + vi) * kernel + k) * c;
                        out[dof..dof + c].copy_from_slice(&src[so..so + c]);
                    }
                }
            }
        }
        let val = ArrayD::from_shape_vec(IxDyn(&[n, t, v, kernel * c]), out).unwrap();
        let rg = self.rg(a);
        self.push(val, Op::TemporalUnfold { x: a, kernel }, rg)
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let l = view2(self.value(logits));
        assert_eq!(l.nrows(), targets.len(), "target count mismatch");
        let mut probs = l.to_owned();
        let mut total = F::zero();
        for (mut row, &t) in probs.rows_mut().into_iter().zip(targets) {
            assert!(t < row.len(), "target out of range");
            let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
            row.mapv_inplace(|x| (x - mx).exp());
            let s = row.sum();
            total = total + (s.ln() + mx - (row[t].ln() + mx));
            row.mapv_inplace(|x| x / s);
        }
        let b = F::lit(targets.len().max(1) as f64);
        let v = ArrayD::from_elem(IxDyn(&[]), total / b);
        let rg = self.rg(logits);
        self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.sum() / F::lit(x.len().max(1) as f64);
        let rg = self.rg(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), m), Op::Mean(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::Sum(a), rg)
    }

    /// Runs the backward pass from a single-element node.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<ArrayD<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(self.value(root).raw_dim(), F::one()));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<ArrayD<F>>], v: Var, g: ArrayD<F>) {
        if !self.rg(v) {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v), "gradient shape mismatch");
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(standard(g)),
        }
    }

    fn backprop_node(&self, i: usize, g: &ArrayD<F>, grads: &mut [Option<ArrayD<F>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.rg(*b) {
                    self.acc(grads, *b, g.mapv(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g * self.value(*b));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g * *c),
            Op::AddBias(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.rg(*b) {
                    self.acc(grads, *b, rows_view(g).sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::MulBias(a, b) => {
                let s = self.value(*b).view().into_dimensionality::<ndarray::Ix1>().unwrap();
                if self.rg(*a) {
                    let mut ga = rows_view(g).to_owned();
                    ga *= &s;
                    let ga = ga.into_shape_with_order(IxDyn(self.shape(*a))).unwrap();
                    self.acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    let prod = &rows_view(g) * &rows_view(self.value(*a));
                    self.acc(grads, *b, prod.sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::MatMul(a, b) => {
                let g2 = view2(g);
                if self.rg(*a) {
                    let ga = g2.dot(&view2(self.value(*b)).t());
                    self.acc(grads, *a, ga.into_dyn());
                }
                if self.rg(*b) {
                    let gb = view2(self.value(*a)).t().dot(&g2);
                    self.acc(grads, *b, gb.into_dyn());
                }
            }
            Op::BatchMatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let bs = av.shape()[0];
                let mut ga = self.rg(*a).then(|| ArrayD::<F>::zeros(av.raw_dim()));
                let mut gb = self.rg(*b).then(|| ArrayD::<F>::zeros(bv.raw_dim()));
                for k in 0..bs {
                    let gk = g.index_axis(Axis(0), k).into_dimensionality::<Ix2>().unwrap();
                    let ak = av.index_axis(Axis(0), k).into_dimensionality::<Ix2>().unwrap();
                    let bk = bv.index_axis(Axis(0), k).into_dimensionality::<Ix2>().unwrap();
                    if let Some(ga) = ga.as_mut() {
                        let mut o = ga.index_axis_mut(Axis(0), k).into_dimensionality::<Ix2>().unwrap();
                        ndarray::linalg::general_mat_mul(F::one(), &gk, &bk.t(), F::zero(), &mut o);
                    }
                    if let Some(gb) = gb.as_mut() {
                        let mut o = gb.index_axis_mut(Axis(0), k).into_dimensionality::<Ix2>().unwrap();
                        ndarray::linalg::general_mat_mul(F::one(), &ak.t(), &gk, F::zero(), &mut o);
                    }
                }
                if let Some(ga) = ga {
                    self.acc(grads, *a, ga);
                }
                if let Some(gb) = gb {
                    self.acc(grads, *b, gb);
                }
            }
            Op::Reshape(a) => {
                let ga = g.clone().into_shape_with_order(IxDyn(self.shape(*a))).unwrap();
                self.acc(grads, *a, ga);
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let ga = g
                    .view()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .into_owned();
                self.acc(grads, *a, ga);
            }
            Op::Relu(a) => {
                let mut ga = g.clone();
                ga.zip_mut_with(self.value(*a), |gv, &x| {
                    if x <= F::zero() {
                        *gv = F::zero();
                    }
                });
                self.acc(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let y = rows_view(&node.value);
                let mut ga = rows_view(g).to_owned();
                for (mut gr, yr) in ga.rows_mut().into_iter().zip(y.rows()) {
                    let dot = gr.iter().zip(yr.iter()).fold(F::zero(), |s, (&a, &b)| s + a * b);
                    gr.zip_mut_with(&yr, |gv, &yv| *gv = yv * (*gv - dot));
                }
                let ga = ga.into_shape_with_order(IxDyn(self.shape(*a))).unwrap();
                self.acc(grads, *a, ga);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = rows_view(&node.value);
                let mut ga = rows_view(g).to_owned();
                let d = F::lit(ga.ncols() as f64);
                for ((mut gr, yr), &is) in ga.rows_mut().into_iter().zip(y.rows()).zip(inv_std) {
                    let sg = gr.sum();
                    let sgy = gr.iter().zip(yr.iter()).fold(F::zero(), |s, (&a, &b)| s + a * b);
                    gr.zip_mut_with(&yr, |gv, &yv| *gv = is / d * (d * *gv - sg - yv * sgy));
                }
                let ga = ga.into_shape_with_order(IxDyn(self.shape(*x))).unwrap();
                self.acc(grads, *x, ga);
            }
            Op::BatchNorm { x, inv_std } => {
                let y = rows_view(&node.value);
                let g2 = rows_view(g);
                let n = F::lit(g2.nrows() as f64);
                let sg = g2.sum_axis(Axis(0));
                let sgy = (&g2 * &y).sum_axis(Axis(0));
                let mut ga = g2.to_owned();
                for (mut gr, yr) in ga.rows_mut().into_iter().zip(y.rows()) {
                    for c in 0..gr.len() {
                        gr[c] = inv_std[c] / n * (n * gr[c] - sg[c] - yr[c] * sgy[c]);
                    }
                }
                let ga = ga.into_shape_with_order(IxDyn(self.shape(*x))).unwrap();
                self.acc(grads, *x, ga);
            }
            Op::MaxAxis { x, argmax } => {
                let mut ga = vec![F::zero(); self.value(*x).len()];
                for (gv, &idx) in g.iter().zip(argmax) {
                    ga[idx] = ga[idx] + *gv;
                }
                let ga = ArrayD::from_shape_vec(IxDyn(self.shape(*x)), ga).unwrap();
                self.acc(grads, *x, ga);
            }
            Op::MeanAxis { x, axis } => {
                let shape = self.shape(*x);
                let n = F::lit(shape[*axis] as f64);
                let ge = (g / n).insert_axis(Axis(*axis));
                let ga = ge.broadcast(IxDyn(shape)).unwrap().to_owned();
                self.acc(grads, *x, ga);
            }
            Op::SumLast(a) => {
                let shape = self.shape(*a);
                let ge = g.clone().insert_axis(Axis(shape.len() - 1));
                let ga = ge.broadcast(IxDyn(shape)).unwrap().to_owned();
                self.acc(grads, *a, ga);
            }
            Op::ConcatLast(a, b) => {
                let ax = Axis(g.ndim() - 1);
                let da = *self.shape(*a).last().unwrap();
                let (ga, gb) = g.view().split_at(ax, da);
                self.acc(grads, *a, ga.to_owned());
                self.acc(grads, *b, gb.to_owned());
            }
            Op::L2Normalize { x, norms, eps } => {
                let xv = rows_view(self.value(*x));
                let mut ga = rows_view(g).to_owned();
                for ((mut gr, xr), &n) in ga.rows_mut().into_iter().zip(xv.rows()).zip(norms) {
                    let s = n + *eps;
                    let gx = gr.iter().zip(xr.iter()).fold(F::zero(), |acc, (&a, &b)| acc + a * b);
                    let coef = if n > F::zero() { gx / (s * s * n) } else { F::zero() };
                    gr.zip_mut_with(&xr, |gv, &xv| *gv = *gv / s - xv * coef);
                }
                let ga = ga.into_shape_with_order(IxDyn(self.shape(*x))).unwrap();
                self.acc(grads, *x, ga);
            }
            Op::TemporalUnfold { x, kernel } => {
                let s = self.shape(*x);
                let (n, t, v, c) = (s[0], s[1], s[2], s[3]);
                let pad = kernel / 2;
                let gs = g.as_slice().unwrap();
                let mut ga = vec![F::zero(); n * t * v * c];
                for ni in 0..n {
                    for ti in 0..t {
                        for k in 0..*kernel {
                            let ts = ti + k;
                            if ts < pad || ts - pad >= t {
                                continue;
                            }
                            let ts = ts - pad;
                            for vi in 0..v {
                                let so = ((ni * t + ts) * v + vi) * c;
                                let dof = (((ni * t + ti) * v + vi) * kernel + k) * c;
                                for ci in 0..c {
                                    ga[so + ci] = ga[so + ci] + gs[dof + ci];
                                }
                            }
                        }
                    }
                }
                let ga = ArrayD::from_shape_vec(IxDyn(s), ga).unwrap();
                self.acc(grads, *x, ga);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = *g.iter().next().unwrap() / F::lit(targets.len().max(1) as f64);
                let mut ga = probs.clone();
                for (mut row, &t) in ga.rows_mut().into_iter().zip(targets) {
                    row[t] = row[t] - F::one();
                    row.mapv_inplace(|x| x * scale);
                }
                self.acc(grads, *logits, ga.into_dyn());
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let gv = *g.iter().next().unwrap() / F::lit(x.len().max(1) as f64);
                self.acc(grads, *a, ArrayD::from_elem(x.raw_dim(), gv));
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                let gv = *g.iter().next().unwrap();
                self.acc(grads, *a, ArrayD::from_elem(x.raw_dim(), gv));
            }
        }
    }
}
