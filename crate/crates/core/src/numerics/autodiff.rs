//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every backward rule is written in terms of the same primitive ops, so a
//! backward pass can itself be recorded and differentiated again
//! (reverse-over-reverse). A [`Tape`] owns one training step's graph; nodes
//! are appended in topological order, so the reverse sweep visits each node
//! exactly once by walking indices downward.
//!
//! Values are [`Tensor`]s; a graph belongs to a single thread.

use crate::error::{Error, Result};
use crate::numerics::fft;
use crate::numerics::tensor::{matmul_kernel, transpose_kernel, Tensor};
use std::cell::{Cell, Ref, RefCell};
use std::f64::consts::PI;
use std::rc::Rc;

/// Which GELU formulation the graph uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum GeluKind {
    /// Exact erf form; keeps finite-difference checks tight.
    Exact,
    /// The common tanh approximation.
    Tanh,
}

impl Default for GeluKind {
    fn default() -> Self {
        GeluKind::Exact
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// `a / b` where `b > 0`, defined as 0 where `b == 0`.
    SafeDiv(usize, usize),
    Neg(usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Erf(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Relu(usize),
    /// Heaviside step; derivative defined as zero everywhere.
    Step,
    Matmul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    SumAll(usize),
    BroadcastScalar(usize),
    SumRows(usize),
    RepeatRows(usize),
    SumCols(usize),
    RepeatCols(usize),
    /// Mean over consecutive groups of `g` rows.
    PoolRows(usize, usize),
    /// Repeat each row `g` times scaled by `1/g` (adjoint of PoolRows).
    UnpoolRows(usize, usize),
    /// `(R×C) ⊙ (R×1)` column-broadcast product.
    MulColVec(usize, usize),
    /// Row-wise Euclidean norm, `(R×C) -> (R×1)`; gradient 0 at zero rows.
    L2NormRows(usize),
    SelectRows(usize, Rc<Vec<usize>>),
    /// Scatter-add rows into a zero `(n×C)` tensor.
    ScatterRows(usize, Rc<Vec<usize>>),
    /// Per-row gather: `y[i] = a[i, idx[i]]`.
    GatherCols(usize, Rc<Vec<usize>>),
    /// Per-row scatter into `(R×c)` zeros.
    ScatterCols(usize, Rc<Vec<usize>>),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize, usize),
    SliceCols(usize, usize),
    /// Pad columns with zeros: input occupies `[start, start+len)` of `total`.
    PadCols(usize, usize),
    /// Multiply by a constant real tensor, broadcast over leading axes.
    MulConstBcast(usize, Rc<Tensor>),
    Fft2(usize),
    Ifft2(usize),
    RealToComplex(usize),
    ComplexRe(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation graph for one training step.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    suppress_grad: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one tape node; cheap to copy.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            suppress_grad: Cell::new(false),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert!(value.all_finite(), "non-finite value entered the tape");
        let rg = requires_grad && !self.suppress_grad.get();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad: rg,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// Trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    fn value_of(&self, idx: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[idx].value)
    }

    fn requires(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].requires_grad
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.is_complex() == b.is_complex()
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Clone of the node's value.
    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.idx).clone()
    }

    /// Run a closure against the node's value without cloning.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.value_of(self.idx))
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_of(self.idx).shape().to_vec()
    }

    /// Value of a scalar node.
    pub fn item(&self) -> f64 {
        self.tape.value_of(self.idx).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.idx)
    }

    /// New leaf holding the same value; gradients stop here but may be
    /// taken with respect to it.
    pub fn detach(&self) -> Var<'t> {
        self.tape.leaf(self.value())
    }

    fn unary(
        &self,
        op: impl FnOnce(usize) -> Op,
        f: impl Fn(f64) -> f64,
        name: &str,
    ) -> Var<'t> {
        let v = self.tape.value_of(self.idx);
        assert!(!v.is_complex(), "{name} on complex tensor");
        let data = v.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("unary keeps shape");
        let rg = self.requires_grad();
        drop(v);
        self.tape.push(out, op(self.idx), rg)
    }

    fn binary(
        &self,
        rhs: Var<'t>,
        op: impl FnOnce(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
        name: &str,
        allow_complex: bool,
    ) -> Var<'t> {
        let a = self.tape.value_of(self.idx);
        let b = self.tape.value_of(rhs.idx);
        assert!(
            same_shape(&a, &b),
            "{name}: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
        assert!(allow_complex || !a.is_complex(), "{name} on complex tensor");
        let data: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = if a.is_complex() {
            Tensor::new_complex(a.shape().to_vec(), data).expect("binary keeps shape")
        } else {
            Tensor::new(a.shape().to_vec(), data).expect("binary keeps shape")
        };
        let rg = self.requires_grad() || rhs.requires_grad();
        drop(a);
        drop(b);
        self.tape.push(out, op(self.idx, rhs.idx), rg)
    }

    pub fn add(&self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Add, |x, y| x + y, "add", true)
    }

    pub fn sub(&self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Sub, |x, y| x - y, "sub", true)
    }

    pub fn mul(&self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Mul, |x, y| x * y, "mul", false)
    }

    pub fn div(&self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, Op::Div, |x, y| x / y, "div", false)
    }

    /// Elementwise `a/b` with the convention `b == 0 -> 0`.
    pub fn safe_div(&self, rhs: Var<'t>) -> Var<'t> {
        self.binary(
            rhs,
            Op::SafeDiv,
            |x, y| if y > 0.0 { x / y } else { 0.0 },
            "safe_div",
            false,
        )
    }

    pub fn neg(&self) -> Var<'t> {
        let v = self.tape.value_of(self.idx);
        let data = v.data().iter().map(|x| -x).collect();
        let out = if v.is_complex() {
            Tensor::new_complex(v.shape().to_vec(), data).unwrap()
        } else {
            Tensor::new(v.shape().to_vec(), data).unwrap()
        };
        let rg = self.requires_grad();
        drop(v);
        self.tape.push(out, Op::Neg(self.idx), rg)
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        self.unary(Op::AddScalar, |x| x + s, "add_scalar")
    }

    pub fn mul_scalar(&self, s: f64) -> Var<'t> {
        let v = self.tape.value_of(self.idx);
        let data = v.data().iter().map(|x| x * s).collect();
        let out = if v.is_complex() {
            Tensor::new_complex(v.shape().to_vec(), data).unwrap()
        } else {
            Tensor::new(v.shape().to_vec(), data).unwrap()
        };
        let rg = self.requires_grad();
        drop(v);
        self.tape.push(out, Op::MulScalar(self.idx, s), rg)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp, f64::exp, "exp")
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Op::Ln, f64::ln, "ln")
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(Op::Sqrt, f64::sqrt, "sqrt")
    }

    pub fn erf(&self) -> Var<'t> {
        self.unary(Op::Erf, erf_scalar, "erf")
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh, f64::tanh, "tanh")
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid, sigmoid_scalar, "sigmoid")
    }

    /// `ln(1 + e^x)`, elementwise, numerically stable in both tails.
    pub fn softplus(&self) -> Var<'t> {
        self.unary(Op::Softplus, softplus_scalar, "softplus")
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu, |x| x.max(0.0), "relu")
    }

    /// Heaviside step with zero derivative; used by hinge backward rules.
    pub fn step(&self) -> Var<'t> {
        self.unary(|_| Op::Step, |x| if x > 0.0 { 1.0 } else { 0.0 }, "step")
    }

    /// Matrix product of two 2-D real tensors.
    pub fn matmul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        let a = self.tape.value_of(self.idx);
        let b = self.tape.value_of(rhs.idx);
        if a.is_complex() || b.is_complex() {
            return Err(Error::Shape("matmul on complex tensor".into()));
        }
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::Shape(format!(
                "matmul {:?} @ {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let out = Tensor::matrix(m, n, matmul_kernel(a.data(), b.data(), m, k, n))?;
        let rg = self.requires_grad() || rhs.requires_grad();
        drop(a);
        drop(b);
        Ok(self.tape.push(out, Op::Matmul(self.idx, rhs.idx), rg))
    }

    /// 2-D transpose.
    pub fn t(&self) -> Var<'t> {
        let v = self.tape.value_of(self.idx);
        assert!(!v.is_complex() && v.shape().len() == 2, "t() needs real matrix");
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let out = Tensor::matrix(c, r, transpose_kernel(v.data(), r, c)).unwrap();
        let rg = self.requires_grad();
        drop(v);
        self.tape.push(out, Op::Transpose(self.idx), rg)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Var<'t> {
        let v = self.tape.value_of(self.idx);
        let out = v.reshaped(shape).expect("reshape entry count");
        let rg = self.requires_grad();
        drop(v);
        self.tape.push(out, Op::Reshape(self.idx), rg)
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum_all(&self) -> Var<'t> {
        let v = self.tape.value_of(self.idx);
        assert!(!v.is_complex());
        let s: f64 = v.data().iter().sum();
        let rg = self.requires_grad();
        drop(v);
        self.tape.push(Tensor::scalar(s), Op::SumAll(self.idx), rg)
    }

    /// Mean of all entries, as a `[1]` tensor.
    pub fn mean_all(&self) -> Var<'t> {
        let n = self.tape.value_of(self.idx).numel() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Broadcast a scalar node to an arbitrary real shape.
    pub fn broadcast_scalar(&self, shape: Vec<usize>) -> Var<'t> {
        let v = self.tape.value_of(self.idx);
        assert_eq!(v.numel(), 1, "broadcast_scalar needs scalar input");
        let x = v.item();
        let n: usize = shape.iter().product();
        let rg = self.requires_grad();
        drop(v);
        self.tape.push(
            Tensor::new(shape, vec![x; n]).unwrap(),
            Op::BroadcastScalar(self.idx),
            rg,
        )
    }

    /// Column sums: `(R×C) -> [C]`.
    pub fn sum_rows(&self) -> Var<'t> {
        let v = self.tape.value_of(self.idx);
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += v.data()[i * c + j];
            }
        }
        let rg = self.requires_grad();
        drop(v);
        self.tape
            .push(Tensor::from_slice(&out), Op::SumRows(self.idx), rg)
    }

    /// Tile a `[C]` vector into `(r×C)` rows.
    pub fn repeat_rows(&self, r: usize) -> Var<'t> {
        let v = self.tape.value_of(self.idx);
        assert_eq!(v.shape().len(), 1, "repeat_rows needs a vector");
        let c = v.shape()[0];
        let mut out = Vec::with_capacity(r * c);
        for _ in 0..r {
            out.extend_from_slice(v.data());
        }
        let rg = self.requires_grad();
        drop(v);
        self.tape.push(
            Tensor::matrix(r, c, out).unwrap(),
            Op::RepeatRows(self.idx),
            rg,
        )
    }

    /// Row sums: `(R×C) -> (R×1)`.
    pub fn sum_cols(&self) -> Var<'t> {
        let v = self.tape.value_of(self.idx);
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let out: Vec<f64> = (0..r)
            .map(|i| v.data()[i * c..(i + 1) * c].iter().sum())
            .collect();
        let rg = self.requires_grad();
        drop(v);
        self.tape.push(
            Tensor::matrix(r, 1, out).unwrap(),
            Op::SumCols(self.idx),
            rg,
        )
    }

    /// Tile a `(R×1)` column into `(R×c)`.
    pub fn repeat_cols(&self, c: usize) -> Var<'t> {
        let v = self.tape.value_of(self.idx);
        assert_eq!(v.shape()[1], 1, "repeat_cols needs (R×1)");
        let r = v.shape()[0];
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let x = v.data()[i];
            out.extend(std::iter::repeat(x).take(c));
        }
        let rg = self.requires_grad();
        drop(v);
        self.tape.push(
            Tensor::matrix(r, c, out).unwrap(),
            Op::RepeatCols(self.idx),
            rg,
        )
    }

    /// Mean over consecutive groups of `g` rows: `(G·g×C) -> (G×C)`.
    pub fn pool_rows(&self, g: usize) -> Var<'t> {
        let v = self.tape.value_of(self.idx);
        let (r, c) = (v.shape()[0], v.shape()[1]);
        assert_eq!(r % g, 0, "pool_rows: {} rows not divisible by {}", r, g);
        let groups = r / g;
        let mut out = vec![0.0; groups * c];
        for i in 0..r {
            let dst = (i / g) * c;
            for j in 0..c {
                out[dst + j] += v.data()[i * c + j];
            }
        }
        let inv = 1.0 / g as f64;
        for o in out.iter_mut() {
            *o *= inv;
        }
        let rg = self.requires_grad();
        drop(v);
        self.tape.push(
            Tensor::matrix(groups, c, out).unwrap(),
            Op::PoolRows(self.idx, g),
            rg,
        )
    }

    /// Adjoint of [`Var::pool_rows`]: repeat each row `g` times, scaled `1/g`.
    pub fn unpool_rows(&self, g: usize) -> Var<'t> {
        let v = self.tape.value_of(self.idx);
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let inv = 1.0 / g as f64;
        let mut out = Vec::with_capacity(r * g * c);
        for i in 0..r {
            for _ in 0..g {
                out.extend(v.data()[i * c..(i + 1) * c].iter().map(|x| x * inv));
            }
        }
        let rg = self.requires_grad();
        drop(v);
        self.tape.push(
            Tensor::matrix(r * g, c, out).unwrap(),
            Op::UnpoolRows(self.idx, g),
            rg,
        )
    }

    /// `(R×C) ⊙ (R×1)` with the column vector broadcast across columns.
    pub fn mul_col_vec(&self, v: Var<'t>) -> Var<'t> {
        let a = self.tape.value_of(self.idx);
        let b = self.tape.value_of(v.idx);
        let (r, c) = (a.shape()[0], a.shape()[1]);
        assert_eq!(b.shape(), [r, 1], "mul_col_vec: vector shape {:?}", b.shape());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let s = b.data()[i];
            out.extend(a.data()[i * c..(i + 1) * c].iter().map(|x| x * s));
        }
        let rg = self.requires_grad() || v.requires_grad();
        drop(a);
        drop(b);
        self.tape.push(
            Tensor::matrix(r, c, out).unwrap(),
            Op::MulColVec(self.idx, v.idx),
            rg,
        )
    }

    /// Row-wise Euclidean norms `(R×C) -> (R×1)`. The gradient of a zero row
    /// is the zero vector (subgradient choice).
    pub fn l2_norm_rows(&self) -> Var<'t> {
        let a = self.tape.value_of(self.idx);
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let out: Vec<f64> = (0..r)
            .map(|i| {
                a.data()[i * c..(i + 1) * c]
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let rg = self.requires_grad();
        drop(a);
        self.tape.push(
            Tensor::matrix(r, 1, out).unwrap(),
            Op::L2NormRows(self.idx),
            rg,
        )
    }

    /// Gather rows by index (duplicates allowed).
    pub fn select_rows(&self, idx: Rc<Vec<usize>>) -> Var<'t> {
        let a = self.tape.value_of(self.idx);
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            assert!(i < r, "select_rows: row {} out of {}", i, r);
            out.extend_from_slice(&a.data()[i * c..(i + 1) * c]);
        }
        let rows = idx.len();
        let rg = self.requires_grad();
        drop(a);
        self.tape.push(
            Tensor::matrix(rows, c, out).unwrap(),
            Op::SelectRows(self.idx, idx),
            rg,
        )
    }

    /// Scatter-add rows into an `(n×C)` zero tensor (adjoint of select).
    pub fn scatter_rows(&self, idx: Rc<Vec<usize>>, n: usize) -> Var<'t> {
        let a = self.tape.value_of(self.idx);
        let c = a.shape()[1];
        assert_eq!(a.shape()[0], idx.len());
        let mut out = vec![0.0; n * c];
        for (row, &i) in idx.iter().enumerate() {
            for j in 0..c {
                out[i * c + j] += a.data()[row * c + j];
            }
        }
        let rg = self.requires_grad();
        drop(a);
        self.tape.push(
            Tensor::matrix(n, c, out).unwrap(),
            Op::ScatterRows(self.idx, idx),
            rg,
        )
    }

    /// Per-row single-column gather: `y[i] = a[i, idx[i]]`.
    pub fn gather_cols(&self, idx: Rc<Vec<usize>>) -> Var<'t> {
        let a = self.tape.value_of(self.idx);
        let (r, c) = (a.shape()[0], a.shape()[1]);
        assert_eq!(idx.len(), r);
        let out: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < c, "gather_cols: col {} out of {}", j, c);
                a.data()[i * c + j]
            })
            .collect();
        let rg = self.requires_grad();
        drop(a);
        self.tape.push(
            Tensor::matrix(r, 1, out).unwrap(),
            Op::GatherCols(self.idx, idx),
            rg,
        )
    }

    /// Per-row scatter of a `(R×1)` column into `(R×c)` zeros.
    pub fn scatter_cols(&self, idx: Rc<Vec<usize>>, c: usize) -> Var<'t> {
        let a = self.tape.value_of(self.idx);
        let r = a.shape()[0];
        assert_eq!(a.shape()[1], 1);
        assert_eq!(idx.len(), r);
        let mut out = vec![0.0; r * c];
        for (i, &j) in idx.iter().enumerate() {
            out[i * c + j] = a.data()[i];
        }
        let rg = self.requires_grad();
        drop(a);
        self.tape.push(
            Tensor::matrix(r, c, out).unwrap(),
            Op::ScatterCols(self.idx, idx),
            rg,
        )
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Var<'t> {
        let a = self.tape.value_of(self.idx);
        let (r, c) = (a.shape()[0], a.shape()[1]);
        assert!(start + len <= r);
        let out = a.data()[start * c..(start + len) * c].to_vec();
        let rg = self.requires_grad();
        drop(a);
        self.tape.push(
            Tensor::matrix(len, c, out).unwrap(),
            Op::SliceRows(self.idx, start, len),
            rg,
        )
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Var<'t> {
        let a = self.tape.value_of(self.idx);
        let (r, c) = (a.shape()[0], a.shape()[1]);
        assert!(start + len <= c);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&a.data()[i * c + start..i * c + start + len]);
        }
        let rg = self.requires_grad();
        drop(a);
        self.tape.push(
            Tensor::matrix(r, len, out).unwrap(),
            Op::SliceCols(self.idx, start),
            rg,
        )
    }

    /// Zero-pad columns so the input occupies `[start, start+len)` of `total`.
    pub fn pad_cols(&self, start: usize, total: usize) -> Var<'t> {
        let a = self.tape.value_of(self.idx);
        let (r, len) = (a.shape()[0], a.shape()[1]);
        assert!(start + len <= total);
        let mut out = vec![0.0; r * total];
        for i in 0..r {
            out[i * total + start..i * total + start + len]
                .copy_from_slice(&a.data()[i * len..(i + 1) * len]);
        }
        let rg = self.requires_grad();
        drop(a);
        self.tape.push(
            Tensor::matrix(r, total, out).unwrap(),
            Op::PadCols(self.idx, start),
            rg,
        )
    }

    /// Multiply by a constant real tensor, broadcast over leading axes.
    /// Works on real and complex inputs (mask application on spectra).
    pub fn mul_const_bcast(&self, k: Rc<Tensor>) -> Var<'t> {
        let a = self.tape.value_of(self.idx);
        assert!(!k.is_complex(), "broadcast constant must be real");
        let ks = k.shape();
        let asq = a.shape();
        assert!(
            asq.len() >= ks.len() && asq[asq.len() - ks.len()..] == *ks,
            "mul_const_bcast: {:?} not a suffix of {:?}",
            ks,
            asq
        );
        let kn = k.numel();
        let stride = if a.is_complex() { 2 } else { 1 };
        let mut out = a.data().to_vec();
        let period = kn * stride;
        for (chunk_i, chunk) in out.chunks_mut(period).enumerate() {
            debug_assert!(chunk_i < a.numel() / kn + 1);
            for (e, v) in chunk.iter_mut().enumerate() {
                *v *= k.data()[e / stride];
            }
        }
        let shape = asq.to_vec();
        let complex = a.is_complex();
        let rg = self.requires_grad();
        drop(a);
        let t = if complex {
            Tensor::new_complex(shape, out).unwrap()
        } else {
            Tensor::new(shape, out).unwrap()
        };
        self.tape.push(t, Op::MulConstBcast(self.idx, k), rg)
    }

    /// Forward 2-D DFT over the trailing two axes; output complex.
    pub fn fft2(&self) -> Var<'t> {
        let v = self.tape.value_of(self.idx);
        let out = fft::fft2(&v).expect("fft2 shape");
        let rg = self.requires_grad();
        drop(v);
        self.tape.push(out, Op::Fft2(self.idx), rg)
    }

    /// Inverse 2-D DFT over the trailing two axes.
    pub fn ifft2(&self) -> Var<'t> {
        let v = self.tape.value_of(self.idx);
        let out = fft::ifft2(&v).expect("ifft2 shape");
        let rg = self.requires_grad();
        drop(v);
        self.tape.push(out, Op::Ifft2(self.idx), rg)
    }

    /// Promote a real tensor to complex with zero imaginary part.
    pub fn to_complex(&self) -> Var<'t> {
        let v = self.tape.value_of(self.idx);
        assert!(!v.is_complex());
        let mut data = vec![0.0; 2 * v.numel()];
        for (i, &x) in v.data().iter().enumerate() {
            data[2 * i] = x;
        }
        let out = Tensor::new_complex(v.shape().to_vec(), data).unwrap();
        let rg = self.requires_grad();
        drop(v);
        self.tape.push(out, Op::RealToComplex(self.idx), rg)
    }

    /// Real part of a complex tensor.
    pub fn real(&self) -> Var<'t> {
        let v = self.tape.value_of(self.idx);
        let out = fft::real_part(&v);
        let rg = self.requires_grad();
        drop(v);
        self.tape.push(out, Op::ComplexRe(self.idx), rg)
    }

    /// Gaussian error linear unit.
    pub fn gelu(&self, kind: GeluKind) -> Var<'t> {
        match kind {
            GeluKind::Exact => {
                let cdf = self
                    .mul_scalar(std::f64::consts::FRAC_1_SQRT_2)
                    .erf()
                    .add_scalar(1.0)
                    .mul_scalar(0.5);
                self.mul(cdf)
            }
            GeluKind::Tanh => {
                let c = (2.0 / PI).sqrt();
                let x3 = self.mul(*self).mul(*self).mul_scalar(0.044715);
                let inner = self.add(x3).mul_scalar(c);
                self.mul(inner.tanh().add_scalar(1.0)).mul_scalar(0.5)
            }
        }
    }

    /// Euclidean norm of the whole tensor as a `[1]` scalar node.
    /// Gradient at the zero tensor is the zero vector.
    pub fn l2_norm(&self) -> Var<'t> {
        let n = self.tape.value_of(self.idx).numel();
        self.reshape(vec![1, n]).l2_norm_rows().reshape(vec![1])
    }
}

/// Stack parts vertically (same column count).
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty());
    let tape = parts[0].tape;
    let c = parts[0].shape()[1];
    let mut data = Vec::new();
    let mut rows = 0;
    let mut rg = false;
    for p in parts {
        p.with_value(|v| {
            assert_eq!(v.shape()[1], c, "concat_rows: column mismatch");
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        });
        rg |= p.requires_grad();
    }
    tape.push(
        Tensor::matrix(rows, c, data).unwrap(),
        Op::ConcatRows(parts.iter().map(|p| p.idx).collect()),
        rg,
    )
}

/// Stack parts horizontally (same row count).
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty());
    let tape = parts[0].tape;
    let r = parts[0].shape()[0];
    let widths: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
    let total: usize = widths.iter().sum();
    let mut data = vec![0.0; r * total];
    let mut rg = false;
    let mut off = 0;
    for (p, &w) in parts.iter().zip(widths.iter()) {
        p.with_value(|v| {
            assert_eq!(v.shape()[0], r, "concat_cols: row mismatch");
            for i in 0..r {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&v.data()[i * w..(i + 1) * w]);
            }
        });
        rg |= p.requires_grad();
        off += w;
    }
    tape.push(
        Tensor::matrix(r, total, data).unwrap(),
        Op::ConcatCols(parts.iter().map(|p| p.idx).collect()),
        rg,
    )
}

/// Row-wise softmax cross-entropy: `-log softmax(logits)[label]` per row,
/// returned as a `(B×1)` node. Labels are validated up front.
pub fn softmax_ce_rows<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let (b, c) = {
        let v = logits.tape.value_of(logits.idx);
        if v.is_complex() || v.shape().len() != 2 {
            return Err(Error::Shape("softmax_ce expects a real (B×C) tensor".into()));
        }
        (v.shape()[0], v.shape()[1])
    };
    if c < 2 {
        return Err(Error::Shape(format!("softmax_ce needs >= 2 classes, got {c}")));
    }
    if labels.len() != b {
        return Err(Error::Shape(format!(
            "softmax_ce: {} labels for {} rows",
            labels.len(),
            b
        )));
    }
    for &l in labels {
        if l >= c {
            return Err(Error::Index(format!("label {l} out of range 0..{c}")));
        }
    }
    // Row maxima enter as constants; the shift cancels exactly in the result
    // but keeps exp() in range.
    let maxes: Vec<f64> = logits.with_value(|v| {
        (0..b)
            .map(|i| {
                v.data()[i * c..(i + 1) * c]
                    .iter()
                    .fold(f64::NEG_INFINITY, |m, &x| m.max(x))
            })
            .collect()
    });
    let m = logits.tape.constant(Tensor::matrix(b, 1, maxes)?);
    let shifted = logits.sub(m.repeat_cols(c));
    let lse = shifted.exp().sum_cols().ln().add(m);
    let picked = logits.gather_cols(Rc::new(labels.to_vec()));
    let m_repeat = lse.sub(picked);
    Ok(m_repeat)
}

/// Cross-entropy of a single logit vector against one label (scalar node).
pub fn softmax_ce<'t>(logits: Var<'t>, label: usize) -> Result<Var<'t>> {
    let n = logits.tape.value_of(logits.idx).numel();
    let rows = logits.reshape(vec![1, n]);
    Ok(softmax_ce_rows(rows, &[label])?.reshape(vec![1]))
}

impl<'t> std::ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        Var::add(&self, rhs)
    }
}

impl<'t> std::ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        Var::sub(&self, rhs)
    }
}

impl<'t> std::ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        Var::mul(&self, rhs)
    }
}

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        Var::neg(&self)
    }
}

/// Exact reverse-mode gradients of a scalar `loss` with respect to `wrt`.
///
/// With `build_graph` set, the returned gradients are themselves recorded
/// and differentiable (reverse-over-reverse); otherwise they are detached
/// constants. Vars with no path from the loss yield zeros.
pub fn grad<'t>(loss: Var<'t>, wrt: &[Var<'t>], build_graph: bool) -> Result<Vec<Var<'t>>> {
    let tape = loss.tape;
    {
        let v = tape.value_of(loss.idx);
        if v.numel() != 1 || v.is_complex() {
            return Err(Error::Contract(format!(
                "backward needs a real scalar loss, got {:?}",
                v.shape()
            )));
        }
    }
    let prev_suppress = tape.suppress_grad.get();
    if !build_graph {
        tape.suppress_grad.set(true);
    }
    let result = backward_sweep(loss, wrt);
    tape.suppress_grad.set(prev_suppress);
    result
}

fn zeros_like<'t>(tape: &'t Tape, reference: Var<'t>) -> Var<'t> {
    let v = tape.value_of(reference.idx);
    let t = if v.is_complex() {
        Tensor::zeros_complex(v.shape().to_vec())
    } else {
        Tensor::zeros(v.shape().to_vec())
    };
    drop(v);
    tape.constant(t)
}

fn backward_sweep<'t>(loss: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
    let tape = loss.tape;
    let mut adj: Vec<Option<Var<'t>>> = vec![None; loss.idx + 1];
    adj[loss.idx] = Some(tape.constant(Tensor::scalar(1.0)));

    // Indices are topologically ordered by construction, so one reverse
    // sweep visits every reachable node exactly once.
    for i in (0..=loss.idx).rev() {
        let Some(g) = adj[i] else { continue };
        if !tape.requires(i) {
            continue;
        }
        let op = tape.nodes.borrow()[i].op.clone();
        let out = Var { tape, idx: i };
        let mut accumulate = |target: usize, contrib: Var<'t>| {
            if !tape.requires(target) {
                return;
            }
            adj[target] = Some(match adj[target] {
                Some(existing) => existing.add(contrib),
                None => contrib,
            });
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(a, g);
                accumulate(b, g);
            }
            Op::Sub(a, b) => {
                accumulate(a, g);
                accumulate(b, g.neg());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (Var { tape, idx: a }, Var { tape, idx: b });
                accumulate(a, g.mul(vb));
                accumulate(b, g.mul(va));
            }
            Op::Div(a, b) => {
                let vb = Var { tape, idx: b };
                accumulate(a, g.div(vb));
                accumulate(b, g.mul(out.div(vb)).neg());
            }
            Op::SafeDiv(a, b) => {
                let vb = Var { tape, idx: b };
                accumulate(a, g.safe_div(vb));
                accumulate(b, g.mul(out.safe_div(vb)).neg());
            }
            Op::Neg(a) => accumulate(a, g.neg()),
            Op::AddScalar(a) => accumulate(a, g),
            Op::MulScalar(a, s) => accumulate(a, g.mul_scalar(s)),
            Op::Exp(a) => accumulate(a, g.mul(out)),
            Op::Ln(a) => accumulate(a, g.div(Var { tape, idx: a })),
            Op::Sqrt(a) => accumulate(a, g.safe_div(out).mul_scalar(0.5)),
            Op::Erf(a) => {
                let va = Var { tape, idx: a };
                let d = va.mul(va).neg().exp().mul_scalar(2.0 / PI.sqrt());
                accumulate(a, g.mul(d));
            }
            Op::Tanh(a) => {
                let d = out.mul(out).neg().add_scalar(1.0);
                accumulate(a, g.mul(d));
            }
            Op::Sigmoid(a) => {
                let d = out.mul(out.neg().add_scalar(1.0));
                accumulate(a, g.mul(d));
            }
            Op::Softplus(a) => {
                accumulate(a, g.mul(Var { tape, idx: a }.sigmoid()));
            }
            Op::Relu(a) => {
                accumulate(a, g.mul(Var { tape, idx: a }.step()));
            }
            Op::Step => {}
            Op::Matmul(a, b) => {
                let (va, vb) = (Var { tape, idx: a }, Var { tape, idx: b });
                accumulate(a, g.matmul(vb.t()).expect("adjoint shapes agree"));
                accumulate(b, va.t().matmul(g).expect("adjoint shapes agree"));
            }
            Op::Transpose(a) => accumulate(a, g.t()),
            Op::Reshape(a) => {
                let shape = tape.value_of(a).shape().to_vec();
                accumulate(a, g.reshape(shape));
            }
            Op::SumAll(a) => {
                let shape = tape.value_of(a).shape().to_vec();
                accumulate(a, g.broadcast_scalar(shape));
            }
            Op::BroadcastScalar(a) => accumulate(a, g.sum_all()),
            Op::SumRows(a) => {
                let r = tape.value_of(a).shape()[0];
                accumulate(a, g.repeat_rows(r));
            }
            Op::RepeatRows(a) => accumulate(a, g.sum_rows()),
            Op::SumCols(a) => {
                let c = tape.value_of(a).shape()[1];
                accumulate(a, g.repeat_cols(c));
            }
            Op::RepeatCols(a) => accumulate(a, g.sum_cols()),
            Op::PoolRows(a, gsz) => accumulate(a, g.unpool_rows(gsz)),
            Op::UnpoolRows(a, gsz) => accumulate(a, g.pool_rows(gsz)),
            Op::MulColVec(a, v) => {
                let (va, vv) = (Var { tape, idx: a }, Var { tape, idx: v });
                accumulate(a, g.mul_col_vec(vv));
                accumulate(v, g.mul(va).sum_cols());
            }
            Op::L2NormRows(a) => {
                let va = Var { tape, idx: a };
                accumulate(a, va.mul_col_vec(g.safe_div(out)));
            }
            Op::SelectRows(a, idx) => {
                let n = tape.value_of(a).shape()[0];
                accumulate(a, g.scatter_rows(idx, n));
            }
            Op::ScatterRows(a, idx) => accumulate(a, g.select_rows(idx)),
            Op::GatherCols(a, idx) => {
                let c = tape.value_of(a).shape()[1];
                accumulate(a, g.scatter_cols(idx, c));
            }
            Op::ScatterCols(a, idx) => accumulate(a, g.gather_cols(idx)),
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let len = tape.value_of(p).shape()[0];
                    accumulate(p, g.slice_rows(start, len));
                    start += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let len = tape.value_of(p).shape()[1];
                    accumulate(p, g.slice_cols(start, len));
                    start += len;
                }
            }
            Op::SliceRows(a, start, len) => {
                let n = tape.value_of(a).shape()[0];
                let idx: Vec<usize> = (start..start + len).collect();
                accumulate(a, g.scatter_rows(Rc::new(idx), n));
            }
            Op::SliceCols(a, start) => {
                let total = tape.value_of(a).shape()[1];
                accumulate(a, g.pad_cols(start, total));
            }
            Op::PadCols(a, start) => {
                let len = tape.value_of(a).shape()[1];
                accumulate(a, g.slice_cols(start, len));
            }
            Op::MulConstBcast(a, k) => accumulate(a, g.mul_const_bcast(k)),
            Op::Fft2(a) => {
                let s = tape.value_of(a).shape().to_vec();
                let n = (s[s.len() - 2] * s[s.len() - 1]) as f64;
                let gc = if tape.value_of(g.idx).is_complex() {
                    g
                } else {
                    g.to_complex()
                };
                let contrib = gc.ifft2().mul_scalar(n);
                // real input: project the adjoint back onto the real axis
                let contrib = if tape.value_of(a).is_complex() {
                    contrib
                } else {
                    contrib.real()
                };
                accumulate(a, contrib);
            }
            Op::Ifft2(a) => {
                let s = tape.value_of(a).shape().to_vec();
                let n = (s[s.len() - 2] * s[s.len() - 1]) as f64;
                accumulate(a, g.fft2().mul_scalar(1.0 / n));
            }
            Op::RealToComplex(a) => accumulate(a, g.real()),
            Op::ComplexRe(a) => accumulate(a, g.to_complex()),
        }
    }

    Ok(wrt
        .iter()
        .map(|w| adj.get(w.idx).copied().flatten().unwrap_or_else(|| zeros_like(tape, *w)))
        .collect())
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_scalar(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Error function, accurate to ~1e-15 over the reals.
///
/// Uses the all-positive confluent series
/// `erf(x) = (2x/sqrt(pi)) e^{-x^2} sum_k (2x^2)^k / (2k+1)!!`,
/// which avoids the cancellation of the alternating Taylor series.
pub fn erf_scalar(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let ax = x.abs();
    if ax > 6.0 {
        return x.signum();
    }
    let z = 2.0 * ax * ax;
    let mut term = 1.0f64;
    let mut sum = 1.0f64;
    let mut k = 0u32;
    while term > 1e-18 * sum {
        k += 1;
        term *= z / (2 * k + 1) as f64;
        sum += term;
        if k > 300 {
            break;
        }
    }
    let v = 2.0 * ax * (-ax * ax).exp() / PI.sqrt() * sum;
    v.copysign(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Central finite difference of a scalar function of leaf data.
    fn finite_diff(
        f: impl Fn(&[f64]) -> f64,
        x: &[f64],
        h: f64,
    ) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let orig = xp[i];
            xp[i] = orig + h;
            let up = f(&xp);
            xp[i] = orig - h;
            let dn = f(&xp);
            xp[i] = orig;
            g[i] = (up - dn) / (2.0 * h);
        }
        g
    }

    #[test]
    fn erf_reference_values() {
        // values from standard tables
        assert_abs_diff_eq!(erf_scalar(0.5), 0.5204998778130465, epsilon = 1e-14);
        assert_abs_diff_eq!(erf_scalar(1.0), 0.8427007929497149, epsilon = 1e-14);
        assert_abs_diff_eq!(erf_scalar(2.0), 0.9953222650189527, epsilon = 1e-14);
        assert_abs_diff_eq!(erf_scalar(-1.5), -0.9661051464753107, epsilon = 1e-14);
        assert_abs_diff_eq!(erf_scalar(4.0), 0.9999999845827421, epsilon = 1e-14);
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.mul(x);
        let g = grad(y, &[x], false).unwrap();
        assert_abs_diff_eq!(g[0].item(), 6.0, epsilon = 1e-12);
    }

    #[test]
    fn second_order_cube() {
        // d^2(x^3)/dx^2 at x=2 is 12, via reverse-over-reverse
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = x.mul(x).mul(x);
        let g = grad(y, &[x], true).unwrap()[0];
        let gg = grad(g, &[x], false).unwrap();
        assert_abs_diff_eq!(gg[0].item(), 12.0, epsilon = 1e-12);
    }

    #[test]
    fn matmul_matches_triple_loop_and_grad_checks() {
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
        };
        let a: Vec<f64> = (0..20).map(|_| next()).collect();
        let b: Vec<f64> = (0..15).map(|_| next()).collect();
        // triple-loop oracle
        let mut expect = vec![0.0; 4 * 3];
        for i in 0..4 {
            for j in 0..3 {
                for k in 0..5 {
                    expect[i * 3 + j] += a[i * 5 + k] * b[k * 3 + j];
                }
            }
        }
        let tape = Tape::new();
        let va = tape.leaf(Tensor::matrix(4, 5, a.clone()).unwrap());
        let vb = tape.leaf(Tensor::matrix(5, 3, b.clone()).unwrap());
        let c = va.matmul(vb).unwrap();
        assert_eq!(c.value().data(), expect.as_slice());

        // gradient of sum(c^2) against finite differences
        let loss = c.mul(c).sum_all();
        let g = grad(loss, &[va], false).unwrap()[0].value();
        let f = |ax: &[f64]| {
            let mut s = 0.0;
            for i in 0..4 {
                for j in 0..3 {
                    let mut cij = 0.0;
                    for k in 0..5 {
                        cij += ax[i * 5 + k] * b[k * 3 + j];
                    }
                    s += cij * cij;
                }
            }
            s
        };
        let fd = finite_diff(f, &a, 1e-5);
        for (an, nu) in g.data().iter().zip(fd.iter()) {
            assert!((an - nu).abs() / nu.abs().max(1.0) < 1e-7);
        }
    }

    #[test]
    fn matmul_shape_error() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        assert!(a.matmul(b).is_err());
    }

    #[test]
    fn gelu_fixed_points_and_gradient() {
        let tape = Tape::new();
        let zero = tape.leaf(Tensor::scalar(0.0));
        assert_abs_diff_eq!(zero.gelu(GeluKind::Exact).item(), 0.0, epsilon = 1e-15);
        let big = tape.leaf(Tensor::scalar(20.0));
        assert_abs_diff_eq!(big.gelu(GeluKind::Exact).item(), 20.0, epsilon = 1e-12);

        for kind in [GeluKind::Exact, GeluKind::Tanh] {
            let x = tape.leaf(Tensor::scalar(0.5));
            let y = x.gelu(kind);
            let g = grad(y, &[x], false).unwrap()[0].item();
            let f = |v: &[f64]| {
                let t2 = Tape::new();
                let xv = t2.leaf(Tensor::scalar(v[0]));
                xv.gelu(kind).item()
            };
            let fd = finite_diff(f, &[0.5], 1e-5)[0];
            assert!((g - fd).abs() < 1e-6, "{kind:?}: {g} vs {fd}");
        }
    }

    #[test]
    fn l2_norm_values_and_gradient() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::from_slice(&[3.0, 4.0]));
        assert_abs_diff_eq!(z.l2_norm().item(), 5.0, epsilon = 1e-15);

        let zero = tape.leaf(Tensor::from_slice(&[0.0, 0.0, 0.0]));
        let n = zero.l2_norm();
        assert_eq!(n.item(), 0.0);
        // subgradient choice: zero vector at the origin
        let g = grad(n, &[zero], false).unwrap()[0].value();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0]);

        let x = [0.7, -1.3, 0.4, 1.9];
        let v = tape.leaf(Tensor::from_slice(&x));
        let g = grad(v.l2_norm(), &[v], false).unwrap()[0].value();
        let fd = finite_diff(
            |d| (d.iter().map(|a| a * a).sum::<f64>()).sqrt(),
            &x,
            1e-5,
        );
        for (a, b) in g.data().iter().zip(fd.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn softplus_values() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::scalar(0.0));
        assert_abs_diff_eq!(z.softplus().item(), 2f64.ln(), epsilon = 1e-15);
        let lo = tape.leaf(Tensor::scalar(-40.0));
        let v = lo.softplus().item();
        assert!(v >= 0.0 && v < 1e-15);
        let hi = tape.leaf(Tensor::scalar(40.0));
        assert_abs_diff_eq!(hi.softplus().item(), 40.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_ce_values_and_gradient() {
        let tape = Tape::new();
        let uniform = tape.leaf(Tensor::from_slice(&[0.0, 0.0]));
        assert_abs_diff_eq!(
            softmax_ce(uniform, 0).unwrap().item(),
            2f64.ln(),
            epsilon = 1e-14
        );
        let saturated = tape.leaf(Tensor::from_slice(&[10.0, -10.0]));
        assert!(softmax_ce(saturated, 0).unwrap().item() < 1e-8);

        let x = [0.3, -0.8, 1.1];
        let v = tape.leaf(Tensor::from_slice(&x));
        let g = grad(softmax_ce(v, 2).unwrap(), &[v], false).unwrap()[0].value();
        let fd = finite_diff(
            |d| {
                let m = d.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let lse = m + d.iter().map(|&t| (t - m).exp()).sum::<f64>().ln();
                lse - d[2]
            },
            &x,
            1e-5,
        );
        for (a, b) in g.data().iter().zip(fd.iter()) {
            assert!((a - b).abs() < 1e-6);
        }

        let bad = tape.leaf(Tensor::from_slice(&[0.0, 0.0]));
        assert!(matches!(softmax_ce(bad, 5), Err(Error::Index(_))));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_slice(&[1.0, 2.0]));
        assert!(matches!(grad(x, &[x], false), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_wrt_gets_zeros() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let y = tape.leaf(Tensor::from_slice(&[1.0, 2.0]));
        let loss = x.mul(x);
        let g = grad(loss, &[y], false).unwrap()[0].value();
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn fft_graph_round_trip_and_linearity_gradient() {
        let tape = Tape::new();
        let vals: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).sin()).collect();
        let x = tape.leaf(Tensor::new(vec![4, 4], vals.clone()).unwrap());
        let back = x.fft2().ifft2().real();
        for (a, b) in back.value().data().iter().zip(vals.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        // d/dx of sum(real(ifft2(fft2(x)))) must be all-ones
        let loss = back.sum_all();
        let g = grad(loss, &[x], false).unwrap()[0].value();
        for v in g.data() {
            assert_abs_diff_eq!(v, &1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn hessian_vector_product_matches_fd_of_gradient() {
        // f(x) = sum(sin-free polynomial): use x^2 * y with known Hessian
        let x0 = [1.3, -0.4];
        let hvp = |v: [f64; 2]| -> Vec<f64> {
            let tape = Tape::new();
            let x = tape.leaf(Tensor::from_slice(&x0));
            // f = x0^2 * x1 + exp(x0 * x1)
            let x2 = x.mul(x);
            let prod = x2
                .gather_cols_helper(0)
                .mul(x.gather_cols_helper(1));
            let e = x.gather_cols_helper(0).mul(x.gather_cols_helper(1)).exp();
            let f = prod.add(e).sum_all();
            let g = grad(f, &[x], true).unwrap()[0];
            let vconst = tape.constant(Tensor::from_slice(&v));
            let gv = g.mul(vconst).sum_all();
            grad(gv, &[x], false).unwrap()[0].value().data().to_vec()
        };
        let grad_at = |p: [f64; 2]| -> Vec<f64> {
            let tape = Tape::new();
            let x = tape.leaf(Tensor::from_slice(&p));
            let x2 = x.mul(x);
            let prod = x2
                .gather_cols_helper(0)
                .mul(x.gather_cols_helper(1));
            let e = x.gather_cols_helper(0).mul(x.gather_cols_helper(1)).exp();
            let f = prod.add(e).sum_all();
            grad(f, &[x], false).unwrap()[0].value().data().to_vec()
        };
        for v in [[1.0, 0.0], [0.0, 1.0], [0.3, -0.7]] {
            let analytic = hvp(v);
            let h = 1e-5;
            let gp = grad_at([x0[0] + h * v[0], x0[1] + h * v[1]]);
            let gm = grad_at([x0[0] - h * v[0], x0[1] - h * v[1]]);
            for i in 0..2 {
                let fd = (gp[i] - gm[i]) / (2.0 * h);
                let denom = fd.abs().max(1.0);
                assert!(
                    (analytic[i] - fd).abs() / denom < 1e-3,
                    "hvp {v:?}[{i}]: {} vs {}",
                    analytic[i],
                    fd
                );
            }
        }
    }

    impl<'t> Var<'t> {
        /// Test-only scalar picker for 1-D vectors.
        fn gather_cols_helper(&self, j: usize) -> Var<'t> {
            let n = self.tape.value_of(self.idx).numel();
            self.reshape(vec![1, n])
                .gather_cols(Rc::new(vec![j]))
                .reshape(vec![1])
        }
    }
}
