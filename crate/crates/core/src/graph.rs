//! Reverse-mode differentiation over a recorded operation graph.
//!
//! Every operation appends a node holding its output value, the handles of
//! its inputs and a backward rule. Nodes are appended in execution order, so
//! the node index is a topological order and `backward` walks it in reverse.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of one recorded operation.
///
/// Receives the input values, the output value and the upstream gradient;
/// returns one gradient buffer per input (`None` where `needs[i]` is false).
pub(crate) trait Function<T: Real>: Send {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Real> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    func: Option<Box<dyn Function<T>>>,
    requires_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
    fault: Option<&'static str>,
    /// Keep sets chosen by every row-wise top-k selection, in call order.
    pub(crate) selections: Vec<Vec<bool>>,
    /// When set, top-k selections are taken from here instead of recomputed.
    pub(crate) replay: Option<std::collections::VecDeque<Vec<bool>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), check_finite: false, fault: None, selections: Vec::new(), replay: None }
    }

    /// Graph that fails with [`Error::NonFinite`] as soon as any operation
    /// produces NaN or infinity (the `-inf` attention mask sentinel excepted).
    pub fn verifying() -> Self {
        Graph { check_finite: true, ..Self::new() }
    }

    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Test hook: corrupts the backward rule of every operation named `op`.
    pub fn inject_backward_fault(&mut self, op: &'static str) {
        self.fault = Some(op);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, inputs: Vec::new(), func: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor<T>,
        inputs: Vec<Var>,
        func: Box<dyn Function<T>>,
    ) -> Result<Var> {
        if self.check_finite && func.name() != "topk_mask" && !value.all_finite() {
            return Err(Error::NonFinite { op: func.name().to_string() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let func = requires_grad.then_some(func);
        self.nodes.push(Node { value, inputs, func, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse accumulation from a scalar `loss`.
    ///
    /// Nodes are visited in exact reverse creation order and each input's
    /// gradient is accumulated in input order, so the result is deterministic.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", loss_value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads: leaf_grads, shapes: self.shapes() });
        }
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let Some(func) = &node.func else {
                leaf_grads[idx] = Some(
                    Tensor::from_vec(node.value.shape(), grad).expect("gradient matches value"),
                );
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| self.value(*v)).collect();
            let needs: Vec<bool> =
                node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let mut local = func.backward(&inputs, &node.value, &grad, &needs);
            if self.fault == Some(func.name()) {
                for g in local.iter_mut().flatten() {
                    g.iter_mut().for_each(|v| *v = *v * T::of(1.5) + T::of(1e-3));
                }
            }
            for (input, g) in node.inputs.iter().zip(local) {
                let Some(g) = g else { continue };
                debug_assert_eq!(g.len(), self.value(*input).numel(), "{}", func.name());
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads: leaf_grads, shapes: self.shapes() })
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        self.nodes.iter().map(|n| n.value.shape().to_vec()).collect()
    }

    pub(crate) fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }
}

/// Gradients of the leaves of a graph after [`Graph::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf. Leaves the loss does not depend on get zeros; a
    /// leaf created without `requires_grad` also gets zeros, with a warning.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get_checked(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        if !graph.requires_grad(v) {
            log::warn!("gradient requested for detached node {}", v.0);
        }
        self.get(v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

// --- elementwise and linear algebra primitives ---------------------------

struct AddFn;
struct SubFn;
struct MulFn;
struct ScaleFn<T>(T);
struct ScaleByFn;
struct SumFn;
struct MeanFn;
struct ReshapeFn;
struct MatMulFn {
    ta: bool,
    tb: bool,
}

impl<T: Real> Function<T> for AddFn {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        needs.iter().map(|&n| n.then(|| g.to_vec())).collect()
    }
}

impl<T: Real> Function<T> for SubFn {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![
            needs[0].then(|| g.to_vec()),
            needs[1].then(|| g.iter().map(|&v| -v).collect()),
        ]
    }
}

impl<T: Real> Function<T> for MulFn {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let prod = |other: &Tensor<T>| g.iter().zip(other.data()).map(|(&g, &o)| g * o).collect();
        vec![needs[0].then(|| prod(x[1])), needs[1].then(|| prod(x[0]))]
    }
}

impl<T: Real> Function<T> for ScaleFn<T> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.iter().map(|&v| v * self.0).collect())]
    }
}

impl<T: Real> Function<T> for ScaleByFn {
    fn name(&self) -> &'static str {
        "scale_by"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let s = x[1].data()[0];
        vec![
            needs[0].then(|| g.iter().map(|&v| v * s).collect()),
            needs[1].then(|| {
                vec![g.iter().zip(x[0].data()).fold(T::zero(), |acc, (&g, &v)| acc + g * v)]
            }),
        ]
    }
}

impl<T: Real> Function<T> for SumFn {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![g[0]; x[0].numel()])]
    }
}

impl<T: Real> Function<T> for MeanFn {
    fn name(&self) -> &'static str {
        "mean"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let n = x[0].numel();
        vec![Some(vec![g[0] / T::of(n as f64); n])]
    }
}

impl<T: Real> Function<T> for ReshapeFn {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        vec![Some(g.to_vec())]
    }
}

/// Strides of `op(M)` for a row-major `rows × cols` matrix `M`.
fn op_strides(cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

fn swap((a, b): (isize, isize)) -> (isize, isize) {
    (b, a)
}

impl<T: Real> Function<T> for MatMulFn {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, x: &[&Tensor<T>], out: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (x[0], x[1]);
        let (m, n) = (out.shape()[0], out.shape()[1]);
        let k = if self.ta { a.shape()[0] } else { a.shape()[1] };
        let sa = op_strides(a.shape()[1], self.ta);
        let sb = op_strides(b.shape()[1], self.tb);
        let sg = (n as isize, 1);
        // dA' = G·B'ᵀ written straight into A's layout through A' strides.
        let da = needs[0].then(|| {
            let mut da = vec![T::zero(); a.numel()];
            T::gemm(m, n, k, g, sg, b.data(), swap(sb), &mut da, sa, false);
            da
        });
        // dB' = A'ᵀ·G.
        let db = needs[1].then(|| {
            let mut db = vec![T::zero(); b.numel()];
            T::gemm(k, m, n, a.data(), swap(sa), g, sg, &mut db, sb, false);
            db
        });
        vec![da, db]
    }
}

impl<T: Real> Graph<T> {
    fn zip_values(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let out = self.zip_values(a, b, |x, y| x + y);
        self.push(out, vec![a, b], Box::new(AddFn))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let out = self.zip_values(a, b, |x, y| x - y);
        self.push(out, vec![a, b], Box::new(SubFn))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let out = self.zip_values(a, b, |x, y| x * y);
        self.push(out, vec![a, b], Box::new(MulFn))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        self.push(out, vec![a], Box::new(ScaleFn(c)))
    }

    /// Multiply every element of `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape("scale_by", format!("factor shape {:?}", self.shape(s))));
        }
        let c = self.value(s).data()[0];
        let out = self.value(a).map(|v| v * c);
        self.push(out, vec![a, s], Box::new(ScaleByFn))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, vec![a], Box::new(SumFn))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / T::of(t.numel() as f64));
        self.push(out, vec![a], Box::new(MeanFn))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push(out, vec![a], Box::new(ReshapeFn))
    }

    /// Plain matrix product `A·B`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(A)·op(B)` where `op` optionally transposes its operand.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", format!("expected matrices, got {sa:?} and {sb:?}")));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner extents {k} and {k2} differ")));
        }
        let mut out = vec![T::zero(); m * n];
        let (ta_, tb_) = (self.value(a), self.value(b));
        T::gemm(
            m,
            k,
            n,
            ta_.data(),
            op_strides(sa[1], ta),
            tb_.data(),
            op_strides(sb[1], tb),
            &mut out,
            (n as isize, 1),
            false,
        );
        let out = Tensor::from_vec(&[m, n], out)?;
        self.push(out, vec![a, b], Box::new(MatMulFn { ta, tb }))
    }
}

/// Fourth-order central-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    h: f64,
) -> Tensor<f64> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let mut at = |d: f64| {
            probe.data_mut()[i] = orig + d;
            f(&probe)
        };
        let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
        probe.data_mut()[i] = orig;
        grad.push((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h));
    }
    Tensor::from_vec(x.shape(), grad).expect("same shape as x")
}

/// Largest elementwise relative error `|a−b| / max(|a|, |b|, floor)`.
pub fn max_rel_err(a: &Tensor<f64>, b: &Tensor<f64>, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let denom = x.abs().max(y.abs()).max(floor);
            if x.is_nan() || y.is_nan() {
                f64::INFINITY
            } else {
                (x - y).abs() / denom
            }
        })
        .fold(0.0, f64::max)
}
