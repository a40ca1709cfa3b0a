//! A small tape-based reverse-mode autodiff engine over `f64` arrays.
//!
//! Every forward pass records its nodes into a [`Graph`]. Leaves are either
//! trainable (gradients are accumulated for them) or constant. Calling
//! [`Graph::backward`] on a scalar node returns the gradient of every node
//! that depends on a trainable leaf.
//!
//! All arithmetic is single-threaded and runs in a fixed order, so a forward
//! or backward pass is a deterministic function of its inputs.

use ndarray::{concatenate, Array2, ArrayD, ArrayView2, Axis, Ix2, Ix3, IxDyn, Slice, Zip};

pub type Tensor = ArrayD<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Recip(Var),
    Log(Var),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    SelectRows { x: Var, rows: Vec<usize> },
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    L2Normalize { x: Var, norms: Vec<f64> },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Value of a zero-dimensional (or single-element) node.
    pub fn item(&self, v: Var) -> f64 {
        let t = &self.nodes[v.0].value;
        assert_eq!(t.len(), 1, "item() on a tensor with {} elements", t.len());
        *t.iter().next().unwrap()
    }

    /// Constant copy of `v`'s current value, cut from the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = &self.nodes[a.0].value * k;
        self.push(value, Op::Scale(a, k), &[a])
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| 1.0 / x);
        self.push(value, Op::Recip(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::ln);
        self.push(value, Op::Log(a), &[a])
    }

    /// `(n, k) x (k, m) -> (n, m)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = {
            let av = as2(&self.nodes[a.0].value);
            let bv = as2(&self.nodes[b.0].value);
            av.dot(&bv).into_dyn()
        };
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// `(g, n, k) x (g, k, m) -> (g, n, m)`; with `trans_b` the right
    /// operand is `(g, m, k)` and is transposed per group.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let value = {
            let av = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().expect("bmm lhs must be 3-d");
            let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix3>().expect("bmm rhs must be 3-d");
            let (g, n, k) = av.dim();
            assert_eq!(bv.dim().0, g, "bmm group mismatch");
            let m = if trans_b {
                assert_eq!(bv.dim().2, k, "bmm inner mismatch");
                bv.dim().1
            } else {
                assert_eq!(bv.dim().1, k, "bmm inner mismatch");
                bv.dim().2
            };
            let mut out = ndarray::Array3::<f64>::zeros((g, n, m));
            for i in 0..g {
                let ai = av.index_axis(Axis(0), i);
                let bi = bv.index_axis(Axis(0), i);
                let r = if trans_b { ai.dot(&bi.t()) } else { ai.dot(&bi) };
                out.index_axis_mut(Axis(0), i).assign(&r);
            }
            out.into_dyn()
        };
        self.push(value, Op::BatchMatMul { a, b, trans_b }, &[a, b])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let src = &self.nodes[a.0].value;
        let value = src
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| panic!("cannot reshape {:?} into {:?}", src.shape(), shape));
        self.push(value, Op::Reshape(a), &[a])
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let value = self.nodes[a.0]
            .value
            .view()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .into_owned();
        self.push(value, Op::Permute(a, perm.to_vec()), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let value = {
            let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
            concatenate(Axis(axis), &views).expect("concat shape mismatch")
        };
        self.push(value, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let value = self.nodes[a.0]
            .value
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.push(value, Op::Narrow { x: a, axis, start }, &[a])
    }

    /// Gather entries of axis 0 (rows may repeat). Used for embedding lookup
    /// and batch re-ordering.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let value = self.nodes[a.0].value.select(Axis(0), rows);
        self.push(
            value,
            Op::SelectRows {
                x: a,
                rows: rows.to_vec(),
            },
            &[a],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0]
            .value
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(value, Op::Gelu(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        softmax_last_inplace(&mut value);
        self.push(value, Op::Softmax(a), &[a])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        let last = Axis(value.ndim() - 1);
        for mut lane in value.lanes_mut(last) {
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &x in lane.iter() {
                sum += (x - max).exp();
            }
            let lse = max + sum.ln();
            lane.mapv_inplace(|x| x - lse);
        }
        self.push(value, Op::LogSoftmax(a), &[a])
    }

    /// Normalisation to zero mean and unit variance over the last axis,
    /// without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        let last = Axis(value.ndim() - 1);
        let d = value.shape()[value.ndim() - 1] as f64;
        let mut inv_std = Vec::with_capacity(value.len() / value.shape()[value.ndim() - 1].max(1));
        for mut lane in value.lanes_mut(last) {
            let mean = lane.sum() / d;
            let var = lane.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            lane.mapv_inplace(|x| (x - mean) * inv);
            inv_std.push(inv);
        }
        self.push(value, Op::LayerNorm { x: a, inv_std }, &[a])
    }

    /// Unit-L2 normalisation over the last axis.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        let last = Axis(value.ndim() - 1);
        let mut norms = Vec::new();
        for mut lane in value.lanes_mut(last) {
            let n = lane.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
            lane.mapv_inplace(|x| x / n);
            norms.push(n);
        }
        self.push(value, Op::L2Normalize { x: a, norms }, &[a])
    }

    /// Sum of every element, as a zero-dimensional tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = ArrayD::from_elem(IxDyn(&[]), self.nodes[a.0].value.sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_value = &self.nodes[root.0].value;
        assert_eq!(root_value.len(), 1, "backward() needs a scalar root");
        grads[root.0] = Some(ArrayD::from_elem(root_value.raw_dim(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.nodes[v.0].value.shape());
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, sum_to_shape(g, val(*a).shape()));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, sum_to_shape(g, val(*b).shape()));
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, sum_to_shape(g, val(*a).shape()));
                }
                if wants(*b) {
                    let neg = g.mapv(|x| -x);
                    self.accumulate(grads, *b, sum_to_shape(&neg, val(*b).shape()));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let ga = g * val(*b);
                    self.accumulate(grads, *a, sum_to_shape(&ga, val(*a).shape()));
                }
                if wants(*b) {
                    let gb = g * val(*a);
                    self.accumulate(grads, *b, sum_to_shape(&gb, val(*b).shape()));
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g * *k),
            Op::Recip(a) => {
                let ga = Zip::from(g)
                    .and(val(*a))
                    .map_collect(|&g, &x| -g / (x * x));
                self.accumulate(grads, *a, ga);
            }
            Op::Log(a) => {
                let ga = Zip::from(g).and(val(*a)).map_collect(|&g, &x| g / x);
                self.accumulate(grads, *a, ga);
            }
            Op::MatMul(a, b) => {
                let g2 = as2(g);
                if wants(*a) {
                    let ga = g2.dot(&as2(val(*b)).t());
                    self.accumulate(grads, *a, ga.into_dyn());
                }
                if wants(*b) {
                    let gb = as2(val(*a)).t().dot(&g2);
                    self.accumulate(grads, *b, gb.into_dyn());
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let av = val(*a).view().into_dimensionality::<Ix3>().unwrap();
                let bv = val(*b).view().into_dimensionality::<Ix3>().unwrap();
                let groups = g3.dim().0;
                if wants(*a) {
                    let mut ga = ndarray::Array3::<f64>::zeros(av.raw_dim());
                    for i in 0..groups {
                        let gi = g3.index_axis(Axis(0), i);
                        let bi = bv.index_axis(Axis(0), i);
                        let r = if *trans_b { gi.dot(&bi) } else { gi.dot(&bi.t()) };
                        ga.index_axis_mut(Axis(0), i).assign(&r);
                    }
                    self.accumulate(grads, *a, ga.into_dyn());
                }
                if wants(*b) {
                    let mut gb = ndarray::Array3::<f64>::zeros(bv.raw_dim());
                    for i in 0..groups {
                        let gi = g3.index_axis(Axis(0), i);
                        let ai = av.index_axis(Axis(0), i);
                        let r = if *trans_b { gi.t().dot(&ai) } else { ai.t().dot(&gi) };
                        gb.index_axis_mut(Axis(0), i).assign(&r);
                    }
                    self.accumulate(grads, *b, gb.into_dyn());
                }
            }
            Op::Reshape(a) => {
                let ga = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(val(*a).raw_dim())
                    .unwrap();
                self.accumulate(grads, *a, ga);
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let ga = g.view().permuted_axes(IxDyn(&inv)).as_standard_layout().into_owned();
                self.accumulate(grads, *a, ga);
            }
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).shape()[*axis];
                    if wants(*p) {
                        let gp = g
                            .slice_axis(Axis(*axis), Slice::from(offset..offset + len))
                            .to_owned();
                        self.accumulate(grads, *p, gp);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let mut gx = ArrayD::zeros(val(*x).raw_dim());
                let len = g.shape()[*axis];
                gx.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len))
                    .assign(g);
                self.accumulate(grads, *x, gx);
            }
            Op::SelectRows { x, rows } => {
                let mut gx = ArrayD::zeros(val(*x).raw_dim());
                for (i, &r) in rows.iter().enumerate() {
                    let mut dst = gx.index_axis_mut(Axis(0), r);
                    dst += &g.index_axis(Axis(0), i);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Gelu(a) => {
                let ga = Zip::from(g).and(val(*a)).map_collect(|&g, &x| {
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let p = &node.value;
                let mut ga = g * p;
                let last = Axis(p.ndim() - 1);
                for (mut lane, pl) in ga.lanes_mut(last).into_iter().zip(p.lanes(last)) {
                    let dot: f64 = lane.sum();
                    Zip::from(&mut lane).and(&pl).for_each(|x, &p| *x -= p * dot);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut ga = g.clone();
                let last = Axis(y.ndim() - 1);
                for (mut lane, yl) in ga.lanes_mut(last).into_iter().zip(y.lanes(last)) {
                    let total: f64 = lane.sum();
                    Zip::from(&mut lane)
                        .and(&yl)
                        .for_each(|x, &y| *x -= y.exp() * total);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let mut ga = g.clone();
                let last = Axis(y.ndim() - 1);
                let d = y.shape()[y.ndim() - 1] as f64;
                for ((mut lane, yl), &inv) in ga
                    .lanes_mut(last)
                    .into_iter()
                    .zip(y.lanes(last))
                    .zip(inv_std.iter())
                {
                    let mean_g = lane.sum() / d;
                    let mean_gy = lane.iter().zip(yl.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
                    Zip::from(&mut lane)
                        .and(&yl)
                        .for_each(|gx, &y| *gx = inv * (*gx - mean_g - y * mean_gy));
                }
                self.accumulate(grads, *x, ga);
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let mut ga = g.clone();
                let last = Axis(y.ndim() - 1);
                for ((mut lane, yl), &n) in ga
                    .lanes_mut(last)
                    .into_iter()
                    .zip(y.lanes(last))
                    .zip(norms.iter())
                {
                    let dot = lane.iter().zip(yl.iter()).map(|(a, b)| a * b).sum::<f64>();
                    Zip::from(&mut lane)
                        .and(&yl)
                        .for_each(|gx, &y| *gx = (*gx - y * dot) / n);
                }
                self.accumulate(grads, *x, ga);
            }
            Op::Sum(a) => {
                let s = *g.iter().next().unwrap();
                self.accumulate(grads, *a, ArrayD::from_elem(val(*a).raw_dim(), s));
            }
        }
    }
}

fn as2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view()
        .into_dimensionality::<Ix2>()
        .unwrap_or_else(|_| panic!("expected a 2-d tensor, got {:?}", t.shape()))
}

/// Numerically stable softmax over the last axis, in place. Entries equal to
/// `-inf` receive exactly zero mass.
pub fn softmax_last_inplace(t: &mut Tensor) {
    let last = Axis(t.ndim() - 1);
    for mut lane in t.lanes_mut(last) {
        let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in lane.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        lane.mapv_inplace(|x| x / sum);
    }
}

/// Reduce a broadcast gradient back to `shape` (numpy broadcasting rules).
pub fn sum_to_shape(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (i, &d) in shape.iter().enumerate() {
        if d == 1 && out.shape()[i] != 1 {
            out = out.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    out
}

/// Convenience: a 2-d owned copy of a tensor.
pub fn to_2d(t: &Tensor) -> Array2<f64> {
    as2(t).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Array::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Central differences of `f` around `x`, one coordinate at a time.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-6;
        let mut out = ArrayD::zeros(x.raw_dim());
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            xm.as_slice_mut().unwrap()[i] -= h;
            out.as_slice_mut().unwrap()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn check_unary(shape: &[usize], build: &dyn Fn(&mut Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = rand_tensor(&mut rng, shape);
        let w = {
            let mut g = Graph::new();
            let x = g.constant(x0.clone());
            let y = build(&mut g, x);
            rand_tensor(&mut rng, g.shape(y))
        };
        let eval = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = build(&mut g, xv);
            (g.value(y) * &w).sum()
        };
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let y = build(&mut g, x);
        let wv = g.constant(w.clone());
        let prod = g.mul(y, wv);
        let loss = g.sum(prod);
        let grads = g.backward(loss);
        let analytic = grads.get(x).unwrap();
        let numeric = numeric_grad(&x0, &eval);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let denom = a.abs().max(n.abs()).max(1e-6);
            assert!((a - n).abs() / denom < 1e-5, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn elementwise_and_reduction_grads() {
        check_unary(&[3, 4], &|g, x| g.gelu(x));
        check_unary(&[2, 3, 5], &|g, x| g.softmax(x));
        check_unary(&[2, 5], &|g, x| g.log_softmax(x));
        check_unary(&[3, 6], &|g, x| g.layer_norm(x));
        check_unary(&[4, 3], &|g, x| g.l2_normalize(x));
        check_unary(&[2, 3], &|g, x| {
            let c = g.scalar(3.0);
            let y = g.add(x, c);
            g.recip(y)
        });
        check_unary(&[2, 3], &|g, x| {
            let c = g.scalar(2.0);
            let y = g.add(x, c);
            g.log(y)
        });
    }

    #[test]
    fn structural_grads() {
        check_unary(&[2, 3, 4], &|g, x| g.permute(x, &[1, 0, 2]));
        check_unary(&[2, 3, 4], &|g, x| g.reshape(x, &[6, 4]));
        check_unary(&[2, 5, 3], &|g, x| g.narrow(x, 1, 1, 3));
        check_unary(&[4, 3], &|g, x| g.select_rows(x, &[2, 0, 2, 3]));
        check_unary(&[2, 3], &|g, x| {
            let y = g.scale(x, 2.0);
            g.concat(&[x, y], 0)
        });
    }

    #[test]
    fn matmul_and_broadcast_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = rand_tensor(&mut rng, &[4, 2]);
        check_unary(&[3, 4], &|g, x| {
            let wv = g.constant(w.clone());
            g.matmul(x, wv)
        });
        let b = rand_tensor(&mut rng, &[3, 2, 5]);
        check_unary(&[3, 4, 5], &|g, x| {
            let bv = g.constant(b.clone());
            g.batch_matmul(x, bv, true)
        });
        let c = rand_tensor(&mut rng, &[3, 5, 2]);
        check_unary(&[3, 4, 5], &|g, x| {
            let cv = g.constant(c.clone());
            g.batch_matmul(x, cv, false)
        });
        // The broadcast operand is the one being differentiated.
        let big = rand_tensor(&mut rng, &[2, 3, 4]);
        check_unary(&[4], &|g, x| {
            let bv = g.constant(big.clone());
            let y = g.mul(bv, x);
            g.add(y, x)
        });
        check_unary(&[2, 3, 1], &|g, x| {
            let bv = g.constant(big.clone());
            g.sub(bv, x)
        });
    }

    #[test]
    fn softmax_masks_negative_infinity_exactly() {
        let mut g = Graph::new();
        let x = g.constant(arr2(&[[1.0, f64::NEG_INFINITY, 0.0]]).into_dyn());
        let p = g.softmax(x);
        assert_eq!(g.value(p)[[0, 1]], 0.0);
        let s: f64 = g.value(p).sum();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(arr1(&[1.0, 2.0]).into_dyn());
        let c = g.constant(arr1(&[3.0, 4.0]).into_dyn());
        let y = g.mul(a, c);
        let l = g.sum(y);
        let grads = g.backward(l);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(a).unwrap(), &arr1(&[3.0, 4.0]).into_dyn());
    }
}
