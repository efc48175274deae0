//! A small reverse-mode tape over dense `f64` matrices.
//!
//! Every value on the tape is an [`ndarray::Array2`]. Column vectors are
//! `n x 1` matrices and scalars are `1 x 1`. Layers that need a fused kernel
//! (the selective scan, batch norm, the Cox loss) plug in through
//! [`CustomOp`].

use std::fmt;
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fused operation with a hand-written vector-Jacobian product.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, in input order. `None` means the
    /// input receives no gradient (constants, index tensors).
    fn backward(&self, inputs: &[&Mat], output: &Mat, grad_out: &Mat) -> Vec<Option<Mat>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `x (n x d) + b (1 x d)`
    AddRow(Var, Var),
    /// `x (n x d) * g (1 x d)`
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Silu(Var),
    Softplus(Var),
    Exp(Var),
    LeakyRelu(Var, f64),
    ConcatCols(Var, Var),
    SliceRows(Var, usize),
    GatherRows(Var, Rc<[usize]>),
    /// Softmax of a column vector within groups; `groups[r]` is the group of row `r`.
    SegmentSoftmax(Var, Rc<[usize]>),
    /// `out[dst[e]] += w[e] * v[src[e]]`
    WeightedScatter {
        weights: Var,
        values: Var,
        src: Rc<[usize]>,
        dst: Rc<[usize]>,
    },
    /// Mean of consecutive row ranges, one output row per range.
    SegmentMean(Var, Rc<[(usize, usize)]>),
    Sum(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("len", &self.nodes.len())
            .finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Mat) -> Mat {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(like.raw_dim()))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let out = self.value(x) + self.value(row);
        self.push(out, Op::AddRow(x, row))
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let out = self.value(x) * self.value(row);
        self.push(out, Op::MulRow(x, row))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x) * k;
        self.push(out, Op::Scale(x, k))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(silu);
        self.push(out, Op::Silu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(softplus);
        self.push(out, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::exp);
        self.push(out, Op::Exp(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).mapv(|v| if v >= 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu(x, slope))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let out = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols: row counts differ");
        self.push(out, Op::ConcatCols(a, b))
    }

    /// Rows `start .. start + len` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![start..start + len, ..]).to_owned();
        self.push(out, Op::SliceRows(x, start))
    }

    pub fn gather_rows(&mut self, x: Var, index: Rc<[usize]>) -> Var {
        let out = self.value(x).select(Axis(0), &index);
        self.push(out, Op::GatherRows(x, index))
    }

    pub fn segment_softmax(&mut self, scores: Var, groups: Rc<[usize]>) -> Var {
        let x = self.value(scores);
        assert_eq!(x.ncols(), 1, "segment_softmax expects a column vector");
        let n_groups = groups.iter().copied().max().map_or(0, |m| m + 1);
        let mut max = vec![f64::NEG_INFINITY; n_groups];
        for (r, &g) in groups.iter().enumerate() {
            max[g] = max[g].max(x[[r, 0]]);
        }
        let mut out = Mat::zeros((x.nrows(), 1));
        let mut denom = vec![0.0; n_groups];
        for (r, &g) in groups.iter().enumerate() {
            let e = (x[[r, 0]] - max[g]).exp();
            out[[r, 0]] = e;
            denom[g] += e;
        }
        for (r, &g) in groups.iter().enumerate() {
            out[[r, 0]] /= denom[g];
        }
        self.push(out, Op::SegmentSoftmax(scores, groups))
    }

    pub fn weighted_scatter(
        &mut self,
        weights: Var,
        values: Var,
        src: Rc<[usize]>,
        dst: Rc<[usize]>,
        n_out: usize,
    ) -> Var {
        let w = self.value(weights);
        let v = self.value(values);
        let mut out = Mat::zeros((n_out, v.ncols()));
        for (e, (&j, &i)) in src.iter().zip(dst.iter()).enumerate() {
            let we = w[[e, 0]];
            out.row_mut(i).scaled_add(we, &v.row(j));
        }
        self.push(
            out,
            Op::WeightedScatter {
                weights,
                values,
                src,
                dst,
            },
        )
    }

    pub fn segment_mean(&mut self, x: Var, ranges: Rc<[(usize, usize)]>) -> Var {
        let v = self.value(x);
        let mut out = Mat::zeros((ranges.len(), v.ncols()));
        for (k, &(start, end)) in ranges.iter().enumerate() {
            let n = (end - start) as f64;
            let m = v.slice(s![start..end, ..]).sum_axis(Axis(0)) / n;
            out.row_mut(k).assign(&m);
        }
        self.push(out, Op::SegmentMean(x, ranges))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Mat::from_elem((1, 1), self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn custom(&mut self, inputs: Vec<Var>, output: Mat, op: Box<dyn CustomOp>) -> Var {
        self.push(output, Op::Custom(inputs, op))
    }

    /// Reverse sweep from a `1 x 1` output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(
            self.value(out).dim(),
            (1, 1),
            "backward starts from a scalar"
        );
        let mut grads: Vec<Option<Mat>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Mat::from_elem((1, 1), 1.0));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    acc(&mut grads, *a, g.dot(&bv.t()));
                    acc(&mut grads, *b, av.t().dot(&g));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -&g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * self.value(*b));
                    acc(&mut grads, *b, &g * self.value(*a));
                }
                Op::AddRow(x, row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *x, g.clone());
                }
                Op::MulRow(x, row) => {
                    let gx = &g * self.value(*row);
                    let grow = (&g * self.value(*x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *row, grow);
                }
                Op::Scale(x, k) => acc(&mut grads, *x, &g * *k),
                Op::Relu(x) => {
                    let mut gx = g.clone();
                    Zip::from(&mut gx).and(self.value(*x)).for_each(|gv, &xv| {
                        if xv <= 0.0 {
                            *gv = 0.0
                        }
                    });
                    acc(&mut grads, *x, gx);
                }
                Op::Silu(x) => {
                    let mut gx = g.clone();
                    Zip::from(&mut gx).and(self.value(*x)).for_each(|gv, &xv| {
                        let sg = sigmoid(xv);
                        *gv *= sg * (1.0 + xv * (1.0 - sg));
                    });
                    acc(&mut grads, *x, gx);
                }
                Op::Softplus(x) => {
                    let mut gx = g.clone();
                    Zip::from(&mut gx)
                        .and(self.value(*x))
                        .for_each(|gv, &xv| *gv *= sigmoid(xv));
                    acc(&mut grads, *x, gx);
                }
                Op::Exp(x) => acc(&mut grads, *x, &g * &node.value),
                Op::LeakyRelu(x, slope) => {
                    let mut gx = g.clone();
                    Zip::from(&mut gx).and(self.value(*x)).for_each(|gv, &xv| {
                        if xv < 0.0 {
                            *gv *= slope
                        }
                    });
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).ncols();
                    acc(&mut grads, *a, g.slice(s![.., ..ca]).to_owned());
                    acc(&mut grads, *b, g.slice(s![.., ca..]).to_owned());
                }
                Op::SliceRows(x, start) => {
                    let mut gx = Mat::zeros(self.value(*x).raw_dim());
                    gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *x, gx);
                }
                Op::GatherRows(x, index) => {
                    let mut gx = Mat::zeros(self.value(*x).raw_dim());
                    for (r, &src) in index.iter().enumerate() {
                        let mut row = gx.row_mut(src);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SegmentSoftmax(x, groups) => {
                    let alpha = &node.value;
                    let n_groups = groups.iter().copied().max().map_or(0, |m| m + 1);
                    let mut dot = vec![0.0; n_groups];
                    for (r, &grp) in groups.iter().enumerate() {
                        dot[grp] += alpha[[r, 0]] * g[[r, 0]];
                    }
                    let mut gx = Mat::zeros(alpha.raw_dim());
                    for (r, &grp) in groups.iter().enumerate() {
                        gx[[r, 0]] = alpha[[r, 0]] * (g[[r, 0]] - dot[grp]);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::WeightedScatter {
                    weights,
                    values,
                    src,
                    dst,
                } => {
                    let w = self.value(*weights);
                    let v = self.value(*values);
                    let mut gw = Mat::zeros(w.raw_dim());
                    let mut gv = Mat::zeros(v.raw_dim());
                    for (e, (&j, &i)) in src.iter().zip(dst.iter()).enumerate() {
                        let gi = g.row(i);
                        gw[[e, 0]] = gi.dot(&v.row(j));
                        gv.row_mut(j).scaled_add(w[[e, 0]], &gi);
                    }
                    acc(&mut grads, *weights, gw);
                    acc(&mut grads, *values, gv);
                }
                Op::SegmentMean(x, ranges) => {
                    let mut gx = Mat::zeros(self.value(*x).raw_dim());
                    for (k, &(start, end)) in ranges.iter().enumerate() {
                        let n = (end - start) as f64;
                        let row = g.row(k).mapv(|v| v / n);
                        for r in start..end {
                            gx.row_mut(r).assign(&row);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let gx = Mat::from_elem(self.value(*x).raw_dim(), g[[0, 0]]);
                    acc(&mut grads, *x, gx);
                }
                Op::Custom(inputs, op) => {
                    let vals: Vec<&Mat> = inputs.iter().map(|v| self.value(*v)).collect();
                    let gs = op.backward(&vals, &node.value, &g);
                    debug_assert_eq!(gs.len(), inputs.len(), "{}", op.name());
                    for (v, gv) in inputs.iter().zip(gs) {
                        if let Some(gv) = gv {
                            acc(&mut grads, *v, gv);
                        }
                    }
                }
            }
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Gradients { grads }
    }
}
