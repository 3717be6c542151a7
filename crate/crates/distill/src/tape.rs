//! Reverse-mode differentiation over a linear tape of matrix operations.

use crate::tensor::{gemm_acc, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a + bias` with `bias` of shape `[1, cols]` broadcast over rows.
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// Each row scaled by a constant factor.
    MulCol(Var, Vec<f64>),
    Silu(Var),
    Relu(Var),
    Sqrt(Var),
    /// `[n, m] -> [n, 1]` sum of squares per row.
    SumSqRows(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations as they are evaluated; [`Tape::backward`] then walks the
/// record in reverse. Values are computed eagerly.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant; gradients stop here.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Copies the value of `v` into a fresh constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = vec![0.0; va.rows() * vb.cols()];
        gemm_acc(va, false, vb, false, &mut out);
        let t = Tensor::matrix(va.rows(), vb.cols(), out);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::MatMul(a, b), ng)
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(bias));
        assert_eq!(vb.len(), va.cols(), "bias width");
        let c = va.cols();
        let mut d = va.data().to_vec();
        for row in d.chunks_exact_mut(c) {
            for (x, b) in row.iter_mut().zip(vb.data()) {
                *x += b;
            }
        }
        let t = Tensor::matrix(va.rows(), c, d);
        let ng = self.ng(a) || self.ng(bias);
        self.push(t, Op::AddRow(a, bias), ng)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(vb), "elementwise shapes {:?} vs {:?}", va.shape(), vb.shape());
        let t = va.zip_map(vb, f);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(t, Op::AddScalar(a), ng)
    }

    pub fn mul_col(&mut self, a: Var, col: &[f64]) -> Var {
        let va = self.value(a);
        assert_eq!(col.len(), va.rows(), "row factors");
        let c = va.cols();
        let mut d = va.data().to_vec();
        for (row, &s) in d.chunks_exact_mut(c).zip(col) {
            row.iter_mut().for_each(|x| *x *= s);
        }
        let t = Tensor::matrix(va.rows(), c, d);
        let ng = self.ng(a);
        self.push(t, Op::MulCol(a, col.to_vec()), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(t, Op::Silu(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::sqrt);
        let ng = self.ng(a);
        self.push(t, Op::Sqrt(a), ng)
    }

    pub fn sum_sq_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let d = (0..va.rows()).map(|i| va.row(i).iter().map(|x| x * x).sum()).collect();
        let t = Tensor::column(d);
        let ng = self.ng(a);
        self.push(t, Op::SumSqRows(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).data().iter().sum());
        let ng = self.ng(a);
        self.push(t, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let t = Tensor::scalar(va.data().iter().sum::<f64>() / va.len() as f64);
        let ng = self.ng(a);
        self.push(t, Op::Mean(a), ng)
    }

    /// Back-propagates from the scalar `loss`. Earlier gradients are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar, got {:?}", lv.shape())));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let acc = |grads: &mut [Option<Tensor>], v: Var, d: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.data_mut().iter_mut().zip(d.data()).for_each(|(x, y)| *x += y),
                slot => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut d = vec![0.0; va.len()];
                    gemm_acc(g, false, vb, true, &mut d);
                    acc(grads, *a, Tensor::matrix(va.rows(), va.cols(), d));
                }
                if self.ng(*b) {
                    let mut d = vec![0.0; vb.len()];
                    gemm_acc(va, true, g, false, &mut d);
                    acc(grads, *b, Tensor::matrix(vb.rows(), vb.cols(), d));
                }
            }
            Op::AddRow(a, bias) => {
                acc(grads, *a, g.clone());
                if self.ng(*bias) {
                    let c = g.cols();
                    let mut d = vec![0.0; c];
                    for row in g.data().chunks_exact(c) {
                        d.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                    let vb = self.value(*bias);
                    acc(grads, *bias, Tensor::matrix(vb.rows(), vb.cols(), d));
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(grads, *a, g.zip_map(vb, |x, y| x * y));
                acc(grads, *b, g.zip_map(va, |x, y| x * y));
            }
            Op::Scale(a, s) => acc(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::MulCol(a, col) => {
                let c = g.cols();
                let mut d = g.data().to_vec();
                for (row, &s) in d.chunks_exact_mut(c).zip(col) {
                    row.iter_mut().for_each(|x| *x *= s);
                }
                acc(grads, *a, Tensor::matrix(g.rows(), c, d));
            }
            Op::Silu(a) => {
                let d = g.zip_map(self.value(*a), |gy, x| {
                    let s = sigmoid(x);
                    gy * s * (1.0 + x * (1.0 - s))
                });
                acc(grads, *a, d);
            }
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), |gy, x| if x > 0.0 { gy } else { 0.0 });
                acc(grads, *a, d);
            }
            Op::Sqrt(a) => {
                let d = g.zip_map(&node.value, |gy, y| 0.5 * gy / y);
                acc(grads, *a, d);
            }
            Op::SumSqRows(a) => {
                let va = self.value(*a);
                let c = va.cols();
                let mut d = va.data().to_vec();
                for (row, gy) in d.chunks_exact_mut(c).zip(g.data()) {
                    row.iter_mut().for_each(|x| *x *= 2.0 * gy);
                }
                acc(grads, *a, Tensor::matrix(va.rows(), c, d));
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                acc(grads, *a, Tensor::filled(va.rows(), va.cols(), g.item()));
            }
            Op::Mean(a) => {
                let va = self.value(*a);
                acc(grads, *a, Tensor::filled(va.rows(), va.cols(), g.item() / va.len() as f64));
            }
        }
    }

    /// Gradient of the last [`backward`](Self::backward) loss with respect to
    /// `v`; zeros when `v` did not influence it.
    pub fn grad(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => {
                let t = self.value(v);
                Tensor::zeros(t.rows(), t.cols())
            }
        }
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

/// Floor on the denominator of the relative error. Central differences
/// carry about `1e-16 / eps` absolute roundoff, which dominates for
/// gradient entries much smaller than this.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Largest `|g_ad - g_fd| / (|g_fd| + GRAD_CHECK_FLOOR)` over a sample of
/// parameter entries, using central differences with step `eps`.
///
/// `f` builds the scalar loss from parameter leaves. At most `per_tensor`
/// entries of each tensor are checked, evenly strided.
pub fn grad_check<F>(params: &[Tensor], eps: f64, per_tensor: usize, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("loss in gradient check".into()));
        }
        Ok(v)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    let mut work = params.to_vec();
    for (ti, p) in params.iter().enumerate() {
        let g = tape.grad(vars[ti]);
        let n = p.len();
        let stride = (n / per_tensor.max(1)).max(1);
        for j in (0..n).step_by(stride).take(per_tensor.max(1)) {
            let orig = p.data()[j];
            work[ti].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[ti].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[ti].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * eps);
            worst = worst.max((g.data()[j] - fd).abs() / (fd.abs() + GRAD_CHECK_FLOOR));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let err = grad_check(&[Tensor::scalar(3.0)], 1e-5, 1, |t, v| Ok(t.mul(v[0], v[0]))).unwrap();
        assert!(err <= 1e-7, "{err}");
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(3.0));
        let l = tape.mul(w, w);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).item(), 6.0);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let l = tape.add_scalar(c, 1.0);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).item(), 0.0);
        let err = grad_check(&[Tensor::scalar(2.0)], 1e-5, 1, |t, _| {
            let c = t.constant(Tensor::scalar(5.0));
            Ok(t.sum(c))
        })
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn every_op_passes_finite_differences() {
        let x = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect());
        let w = Tensor::matrix(4, 2, (0..8).map(|i| (i as f64 * 0.91).cos()).collect());
        let b = Tensor::matrix(1, 2, vec![0.1, -0.2]);
        let err = grad_check(&[x, w, b], 1e-6, 12, |t, v| {
            let h = t.matmul(v[0], v[1]);
            let h = t.add_row(h, v[2]);
            let s = t.silu(h);
            let r = t.relu(h);
            let m = t.mul(s, r);
            let a = t.add(m, s);
            let d = t.sub(a, h);
            let d = t.scale(d, 1.7);
            let d = t.mul_col(d, &[1.0, -2.0, 0.5]);
            let q = t.sum_sq_rows(d);
            let q = t.add_scalar(q, 0.3);
            let q = t.sqrt(q);
            let s1 = t.mean(q);
            let s2 = t.sum(h);
            let s2 = t.scale(s2, 0.01);
            Ok(t.add(s1, s2))
        })
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn detached_branch_gets_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(2.0));
        let y = tape.mul(w, w);
        let yd = tape.detach(y);
        let l = tape.mul(yd, w);
        tape.backward(l).unwrap();
        // d/dw (stopgrad(w^2) * w) = w^2
        assert_eq!(tape.grad(w).item(), 4.0);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::zeros(2, 2));
        assert!(tape.backward(w).is_err());
    }
}
