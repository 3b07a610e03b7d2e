//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive in creation order, which is already a
//! topological order, so [`Tape::backward`] is a single reverse sweep that
//! visits each node once. Gradients arriving at a node from several
//! consumers are summed.
//!
//! ```
//! use mixtfsl::autodiff::Tape;
//! use mixtfsl::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).item(), 6.0);
//! ```
//!
//! [`Tape::stop_gradient`] forwards its input unchanged and returns nothing
//! to it on the way back.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
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
    StopGradient,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    SumRows(Var),
    Max(Var, usize),
    LogSumExpRows(Var),
    GatherRows(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    PutCols(Var, Vec<usize>, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Operation recorder. One tape per forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; all zeros when nothing reached it.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// `None` when no gradient path reached `v`.
    pub fn get_opt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::StopGradient)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        Ok(self.push(v, Op::Div(a, b)))
    }

    /// Adds a row vector (`[N]` or `[1, N]`) to every row of a `B×N` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if ta.rank() != 2 || tr.rows() != 1 || tr.len() != ta.cols() {
            return Err(mismatch("add_row", ta, tr));
        }
        let mut v = ta.clone();
        let c = ta.cols();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x += tr.data()[i % c];
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    fn check_col(&self, op: &'static str, a: Var, col: Var) -> Result<()> {
        let (ta, tc) = (self.value(a), self.value(col));
        if ta.rank() != 2 || tc.len() != ta.rows() || tc.cols() != 1 {
            return Err(mismatch(op, ta, tc));
        }
        Ok(())
    }

    /// Multiplies row `i` of a `B×N` matrix by entry `i` of a `B×1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.check_col("mul_col", a, col)?;
        let (ta, tc) = (self.value(a), self.value(col));
        let c = ta.cols();
        let mut v = ta.clone();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x *= tc.data()[i / c];
        }
        Ok(self.push(v, Op::MulCol(a, col)))
    }

    /// Divides row `i` of a `B×N` matrix by entry `i` of a `B×1` column.
    pub fn div_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.check_col("div_col", a, col)?;
        let (ta, tc) = (self.value(a), self.value(col));
        let c = ta.cols();
        let mut v = ta.clone();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x /= tc.data()[i / c];
        }
        Ok(self.push(v, Op::DivCol(a, col)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    /// Square root. The derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Clamps into `[lo, hi]`; gradient is zero wherever the input lies outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums of a `B×N` matrix as a `B×1` column.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(mismatch("sum_rows", ta, ta));
        }
        let data = (0..ta.rows()).map(|i| ta.row(i).iter().sum()).collect();
        let v = Tensor::matrix(ta.rows(), 1, data)?;
        Ok(self.push(v, Op::SumRows(a)))
    }

    /// Largest element as a scalar; ties send the gradient to the first one.
    pub fn max(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.is_empty() {
            return Err(mismatch("max", ta, ta));
        }
        let mut best = 0;
        for (i, &x) in ta.data().iter().enumerate() {
            if x > ta.data()[best] {
                best = i;
            }
        }
        let v = Tensor::scalar(ta.data()[best]);
        Ok(self.push(v, Op::Max(a, best)))
    }

    /// Numerically stable `log Σ_j exp(a_ij)` per row, as a `B×1` column.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 || ta.cols() == 0 {
            return Err(mismatch("log_sum_exp_rows", ta, ta));
        }
        let data = (0..ta.rows()).map(|i| log_sum_exp(ta.row(i))).collect();
        let v = Tensor::matrix(ta.rows(), 1, data)?;
        Ok(self.push(v, Op::LogSumExpRows(a)))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(a).gather_rows(indices)?;
        Ok(self.push(v, Op::GatherRows(a, indices.to_vec())))
    }

    /// Picks `a[i, cols[i]]` for every row, as a `B×1` column.
    pub fn pick_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        self.check_pick("pick_cols", ta, cols)?;
        let data = cols.iter().enumerate().map(|(i, &j)| ta.get2(i, j)).collect();
        let v = Tensor::matrix(cols.len(), 1, data)?;
        Ok(self.push(v, Op::PickCols(a, cols.to_vec())))
    }

    /// Copy of `a` with `a[i, cols[i]]` replaced by `values[i]`.
    pub fn put_cols(&mut self, a: Var, cols: &[usize], values: Var) -> Result<Var> {
        let (ta, tv) = (self.value(a), self.value(values));
        self.check_pick("put_cols", ta, cols)?;
        if tv.len() != ta.rows() {
            return Err(mismatch("put_cols", ta, tv));
        }
        let mut v = ta.clone();
        let c = ta.cols();
        for (i, &j) in cols.iter().enumerate() {
            v.data_mut()[i * c + j] = tv.data()[i];
        }
        Ok(self.push(v, Op::PutCols(a, cols.to_vec(), values)))
    }

    fn check_pick(&self, op: &'static str, ta: &Tensor, cols: &[usize]) -> Result<()> {
        if ta.rank() != 2 || cols.len() != ta.rows() {
            return Err(Error::Shape {
                op,
                left: ta.shape().to_vec(),
                right: vec![cols.len()],
            });
        }
        if let Some(&j) = cols.iter().find(|&&j| j >= ta.cols()) {
            return Err(Error::Index {
                what: "columns",
                index: j,
                len: ta.cols(),
            });
        }
        Ok(())
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::Div(a, b) => {
                let tb = val(*b);
                accumulate(grads, *a, g.zip_map(tb, |x, y| x / y));
                let q = node.value.zip_map(tb, |o, y| o / y);
                accumulate(grads, *b, g.zip_map(&q, |x, q| -x * q));
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                let c = g.cols();
                let mut gr = Tensor::zeros(val(*row).shape());
                for (i, &x) in g.data().iter().enumerate() {
                    gr.data_mut()[i % c] += x;
                }
                accumulate(grads, *row, gr);
            }
            Op::MulCol(a, col) => {
                let (ta, tc) = (val(*a), val(*col));
                let c = g.cols();
                let mut ga = g.clone();
                let mut gc = Tensor::zeros(tc.shape());
                for (i, x) in ga.data_mut().iter_mut().enumerate() {
                    gc.data_mut()[i / c] += *x * ta.data()[i];
                    *x *= tc.data()[i / c];
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *col, gc);
            }
            Op::DivCol(a, col) => {
                let tc = val(*col);
                let c = g.cols();
                let mut ga = g.clone();
                let mut gc = Tensor::zeros(tc.shape());
                for (i, x) in ga.data_mut().iter_mut().enumerate() {
                    let d = tc.data()[i / c];
                    gc.data_mut()[i / c] -= *x * node.value.data()[i] / d;
                    *x /= d;
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *col, gc);
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                accumulate(grads, *a, g.matmul_t(tb).expect("shapes checked on record"));
                accumulate(grads, *b, ta.t_matmul(g).expect("shapes checked on record"));
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                accumulate(grads, *a, g.matmul(tb).expect("shapes checked on record"));
                accumulate(grads, *b, g.t_matmul(ta).expect("shapes checked on record"));
            }
            Op::Exp(a) => accumulate(grads, *a, g.zip_map(&node.value, |x, y| x * y)),
            Op::Log(a) => accumulate(grads, *a, g.zip_map(val(*a), |x, y| x / y)),
            Op::Sqrt(a) => accumulate(
                grads,
                *a,
                g.zip_map(&node.value, |x, y| if y > 0.0 { x / (2.0 * y) } else { 0.0 }),
            ),
            Op::Relu(a) => accumulate(
                grads,
                *a,
                g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 }),
            ),
            Op::Clamp(a, lo, hi) => accumulate(
                grads,
                *a,
                g.zip_map(val(*a), |x, y| if y >= *lo && y <= *hi { x } else { 0.0 }),
            ),
            Op::Sum(a) => accumulate(grads, *a, Tensor::full(val(*a).shape(), g.item())),
            Op::SumRows(a) => {
                let ta = val(*a);
                let c = ta.cols();
                let mut ga = Tensor::zeros(ta.shape());
                for (i, x) in ga.data_mut().iter_mut().enumerate() {
                    *x = g.data()[i / c];
                }
                accumulate(grads, *a, ga);
            }
            Op::Max(a, at) => {
                let mut ga = Tensor::zeros(val(*a).shape());
                ga.data_mut()[*at] = g.item();
                accumulate(grads, *a, ga);
            }
            Op::LogSumExpRows(a) => {
                let ta = val(*a);
                let c = ta.cols();
                let mut ga = Tensor::zeros(ta.shape());
                for (i, x) in ga.data_mut().iter_mut().enumerate() {
                    let r = i / c;
                    *x = g.data()[r] * (ta.data()[i] - node.value.data()[r]).exp();
                }
                accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, indices) => {
                let ta = val(*a);
                let mut ga = Tensor::zeros(ta.shape());
                for (k, &i) in indices.iter().enumerate() {
                    for (dst, src) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *dst += src;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::PickCols(a, cols) => {
                let ta = val(*a);
                let c = ta.cols();
                let mut ga = Tensor::zeros(ta.shape());
                for (i, &j) in cols.iter().enumerate() {
                    ga.data_mut()[i * c + j] = g.data()[i];
                }
                accumulate(grads, *a, ga);
            }
            Op::PutCols(a, cols, values) => {
                let c = g.cols();
                let mut ga = g.clone();
                let mut gv = Tensor::zeros(val(*values).shape());
                for (i, &j) in cols.iter().enumerate() {
                    gv.data_mut()[i] = g.data()[i * c + j];
                    ga.data_mut()[i * c + j] = 0.0;
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *values, gv);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// `log Σ exp(x)` with max subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_shape_algebra() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[3, 1]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 1]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 1]"), "{msg}");
    }

    #[test]
    fn exp_of_zero_and_vector_sum() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::scalar(0.0));
        let e = tape.exp(z);
        assert_eq!(tape.value(e).item(), 1.0);
        let v = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = tape.sum(v);
        assert_eq!(tape.value(s).item(), 6.0);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).item(), 6.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn stop_gradient_blocks_only_its_edge() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.5));
        let y = tape.leaf(Tensor::scalar(-4.0));
        let sx = tape.stop_gradient(x);
        assert_eq!(tape.value(sx).item().to_bits(), 2.5f64.to_bits());
        let p = tape.mul(sx, y).unwrap();
        let g = tape.backward(p).unwrap();
        assert_eq!(g.get(x).item(), 0.0);
        assert!(g.get_opt(x).is_none());
        assert_eq!(g.get(y).item(), 2.5);
    }

    #[test]
    fn two_logit_nll_gradient() {
        // -log softmax(l)[0] at l = (0, 0)
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let lse = tape.log_sum_exp_rows(l).unwrap();
        let t = tape.pick_cols(l, &[0]).unwrap();
        let nll = tape.sub(lse, t).unwrap();
        let loss = tape.sum(nll);
        let g = tape.backward(loss).unwrap().get(l);
        assert!((g.data()[0] + 0.5).abs() < 1e-15);
        assert!((g.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = (x + x) * x = 2x², dy/dx = 4x
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.5));
        let s = tape.add(x, x).unwrap();
        let y = tape.mul(s, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).item(), 6.0);
    }

    #[test]
    fn clamp_and_sqrt_subgradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-2.0, 0.5, 2.0]));
        let c = tape.clamp(x, -1.0, 1.0);
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap().get(x);
        assert_eq!(g.data(), &[0.0, 1.0, 0.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let r = tape.sqrt(x);
        assert_eq!(tape.backward(r).unwrap().get(x).item(), 0.0);
    }
}
