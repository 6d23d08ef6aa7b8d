//! Reverse-mode differentiable tensors.
//!
//! A `Tensor` is an immutable row-major array plus an optional gradient
//! slot. Operations record their parents and a backward closure; calling
//! [`forward_backward`] on a scalar root walks the graph in reverse
//! topological order and accumulates gradients into every leaf that
//! requires them. Gradients accumulate additively across calls until the
//! caller clears them.
//!
//! Non-finite values are detected at op construction and poison the
//! result; `forward_backward` reports the first offending op instead of
//! silently propagating NaNs into an update.

use std::cell::{Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::ops::Range;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

type BackwardFn<S> = Box<dyn Fn(&[S], &[S], &[Tensor<S>])>;

struct Node<S: Scalar> {
    dims: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<S>>>,
    parents: Vec<Tensor<S>>,
    backward: Option<BackwardFn<S>>,
    poison: Option<String>,
}

/// Handle to a node of the computation graph. Cloning is cheap.
#[derive(Clone)]
pub struct Tensor<S: Scalar> {
    node: Rc<Node<S>>,
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("dims", &self.node.dims)
            .field("requires_grad", &self.node.requires_grad)
            .finish_non_exhaustive()
    }
}

fn numel(dims: &[usize]) -> usize {
    dims.iter().product()
}

impl<S: Scalar> Tensor<S> {
    fn leaf(dims: Vec<usize>, data: Vec<S>, requires_grad: bool) -> Self {
        assert!(
            !dims.is_empty() && dims.iter().all(|&d| d > 0),
            "tensor dims must be positive, got {dims:?}"
        );
        assert_eq!(
            numel(&dims),
            data.len(),
            "dims {dims:?} do not match data length {}",
            data.len()
        );
        let poison = data
            .iter()
            .any(|v| !v.is_finite_v())
            .then(|| "non-finite value in leaf tensor".to_string());
        Tensor {
            node: Rc::new(Node {
                dims,
                data,
                requires_grad,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
                poison,
            }),
        }
    }

    /// Differentiable leaf.
    pub fn param(dims: &[usize], data: Vec<S>) -> Self {
        Self::leaf(dims.to_vec(), data, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(dims: &[usize], data: Vec<S>) -> Self {
        Self::leaf(dims.to_vec(), data, false)
    }

    pub fn scalar(v: S) -> Self {
        Self::constant(&[1], vec![v])
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::constant(dims, vec![S::ZERO; numel(dims)])
    }

    pub fn full(dims: &[usize], v: S) -> Self {
        Self::constant(dims, vec![v; numel(dims)])
    }

    /// New non-differentiable leaf sharing this tensor's values.
    pub fn detach(&self) -> Self {
        Self::leaf(self.dims().to_vec(), self.data().to_vec(), false)
    }

    pub fn dims(&self) -> &[usize] {
        &self.node.dims
    }

    pub fn len(&self) -> usize {
        self.node.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node.data.is_empty()
    }

    /// Row/column counts for 2-D tensors.
    pub fn rows(&self) -> usize {
        assert_eq!(self.dims().len(), 2, "rows() on non-2D tensor");
        self.dims()[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.dims().len(), 2, "cols() on non-2D tensor");
        self.dims()[1]
    }

    pub fn data(&self) -> &[S] {
        &self.node.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.len(), 1, "item() on tensor with {} elements", self.len());
        self.node.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn poison(&self) -> Option<&str> {
        self.node.poison.as_deref()
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.node.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<S>>> {
        self.node.grad.borrow()
    }

    pub fn clear_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    fn grad_mut(&self) -> RefMut<'_, Option<Vec<S>>> {
        self.node.grad.borrow_mut()
    }

    /// Accumulate into the grad buffer (allocating zeros on first touch).
    /// No-op when the tensor does not require gradients.
    pub(crate) fn accum_grad_with(&self, f: impl FnOnce(&mut [S])) {
        if !self.node.requires_grad {
            return;
        }
        let mut slot = self.grad_mut();
        let buf = slot.get_or_insert_with(|| vec![S::ZERO; self.len()]);
        f(buf);
    }

    fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.node) as usize
    }
}

/// Construct an op node: propagates poison, scans the fresh data for
/// non-finite values, and wires the backward closure.
pub(crate) fn make_op<S: Scalar>(
    name: &str,
    dims: Vec<usize>,
    data: Vec<S>,
    parents: Vec<Tensor<S>>,
    backward: BackwardFn<S>,
) -> Tensor<S> {
    assert_eq!(numel(&dims), data.len(), "{name}: dims/data mismatch");
    let requires_grad = parents.iter().any(Tensor::requires_grad);
    let poison = parents
        .iter()
        .find_map(|p| p.node.poison.clone())
        .or_else(|| {
            data.iter()
                .any(|v| !v.is_finite_v())
                .then(|| format!("non-finite value produced by op `{name}`"))
        });
    Tensor {
        node: Rc::new(Node {
            dims,
            data,
            requires_grad,
            grad: RefCell::new(None),
            parents,
            backward: Some(backward),
            poison,
        }),
    }
}

/// Run the backward pass from a scalar root. Returns the root value.
///
/// Leaves reachable from the root accumulate `d root / d leaf` into their
/// grad slots, additively across calls. A root that does not require
/// gradients is a no-op (all grads stay zero).
pub fn forward_backward<S: Scalar>(root: &Tensor<S>) -> Result<f64> {
    if let Some(msg) = root.poison() {
        return Err(Error::Numeric(msg.to_string()));
    }
    if root.len() != 1 {
        return Err(Error::Shape(format!(
            "backward root must be scalar, got dims {:?}",
            root.dims()
        )));
    }
    let value = root.item().to_f64();
    if !root.requires_grad() {
        return Ok(value);
    }

    // Post-order DFS over parents gives a topological order.
    let mut order: Vec<Tensor<S>> = Vec::new();
    let mut visited: HashSet<usize> = HashSet::new();
    let mut stack: Vec<(Tensor<S>, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.ptr_id());
    while let Some((t, child)) = stack.pop() {
        if child < t.node.parents.len() {
            stack.push((t.clone(), child + 1));
            let p = t.node.parents[child].clone();
            if p.requires_grad() && visited.insert(p.ptr_id()) {
                stack.push((p, 0));
            }
        } else {
            order.push(t);
        }
    }

    // Interior grads are transient scratch for this pass; only leaves
    // accumulate across calls.
    for t in &order {
        if t.node.backward.is_some() {
            *t.grad_mut() = None;
        }
    }
    root.accum_grad_with(|g| g[0] += S::ONE);
    for t in order.iter().rev() {
        let Some(backward) = t.node.backward.as_ref() else {
            continue;
        };
        let grad = t.node.grad.borrow();
        let Some(g) = grad.as_ref() else { continue };
        backward(g, &t.node.data, &t.node.parents);
    }
    Ok(value)
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

fn assert_same_dims<S: Scalar>(name: &str, a: &Tensor<S>, b: &Tensor<S>) {
    assert_eq!(
        a.dims(),
        b.dims(),
        "{name}: shape mismatch {:?} vs {:?}",
        a.dims(),
        b.dims()
    );
}

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, other: &Tensor<S>) -> Tensor<S> {
        assert_same_dims("add", self, other);
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        make_op(
            "add",
            self.dims().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, _out, parents| {
                parents[0].accum_grad_with(|ga| {
                    for (x, &gi) in ga.iter_mut().zip(g) {
                        *x += gi;
                    }
                });
                parents[1].accum_grad_with(|gb| {
                    for (x, &gi) in gb.iter_mut().zip(g) {
                        *x += gi;
                    }
                });
            }),
        )
    }

    pub fn sub(&self, other: &Tensor<S>) -> Tensor<S> {
        assert_same_dims("sub", self, other);
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a - b)
            .collect();
        make_op(
            "sub",
            self.dims().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, _out, parents| {
                parents[0].accum_grad_with(|ga| {
                    for (x, &gi) in ga.iter_mut().zip(g) {
                        *x += gi;
                    }
                });
                parents[1].accum_grad_with(|gb| {
                    for (x, &gi) in gb.iter_mut().zip(g) {
                        *x += -gi;
                    }
                });
            }),
        )
    }

    pub fn mul(&self, other: &Tensor<S>) -> Tensor<S> {
        assert_same_dims("mul", self, other);
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        make_op(
            "mul",
            self.dims().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, _out, parents| {
                let a = parents[0].data();
                let b = parents[1].data();
                parents[0].accum_grad_with(|ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * b[i];
                    }
                });
                parents[1].accum_grad_with(|gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * a[i];
                    }
                });
            }),
        )
    }

    pub fn div(&self, other: &Tensor<S>) -> Tensor<S> {
        assert_same_dims("div", self, other);
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a / b)
            .collect();
        make_op(
            "div",
            self.dims().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, _out, parents| {
                let a = parents[0].data();
                let b = parents[1].data();
                parents[0].accum_grad_with(|ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / b[i];
                    }
                });
                parents[1].accum_grad_with(|gb| {
                    for i in 0..g.len() {
                        gb[i] += -(g[i] * a[i] / (b[i] * b[i]));
                    }
                });
            }),
        )
    }

    pub fn neg(&self) -> Tensor<S> {
        self.scale(-1.0)
    }

    /// Multiply by a compile-time constant factor.
    pub fn scale(&self, c: f64) -> Tensor<S> {
        let cs = S::from_f64(c);
        let data = self.data().iter().map(|&a| a * cs).collect();
        make_op(
            "scale",
            self.dims().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _out, parents| {
                parents[0].accum_grad_with(|ga| {
                    for (x, &gi) in ga.iter_mut().zip(g) {
                        *x += gi * cs;
                    }
                });
            }),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<S> {
        let cs = S::from_f64(c);
        let data = self.data().iter().map(|&a| a + cs).collect();
        make_op(
            "add_scalar",
            self.dims().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g, _out, parents| {
                parents[0].accum_grad_with(|ga| {
                    for (x, &gi) in ga.iter_mut().zip(g) {
                        *x += gi;
                    }
                });
            }),
        )
    }

    /// Multiply every element by a scalar tensor (both sides get grads).
    pub fn scale_by(&self, s: &Tensor<S>) -> Tensor<S> {
        assert_eq!(s.len(), 1, "scale_by expects a scalar tensor");
        let sv = s.item();
        let data = self.data().iter().map(|&a| a * sv).collect();
        make_op(
            "scale_by",
            self.dims().to_vec(),
            data,
            vec![self.clone(), s.clone()],
            Box::new(|g, _out, parents| {
                let x = parents[0].data();
                let sv = parents[1].data()[0];
                parents[0].accum_grad_with(|ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * sv;
                    }
                });
                parents[1].accum_grad_with(|gs| {
                    let mut acc = S::ZERO;
                    for i in 0..g.len() {
                        acc += g[i] * x[i];
                    }
                    gs[0] += acc;
                });
            }),
        )
    }

    /// Elementwise sum of several same-shaped tensors.
    pub fn add_n(terms: &[Tensor<S>]) -> Tensor<S> {
        assert!(!terms.is_empty(), "add_n on empty list");
        for t in &terms[1..] {
            assert_same_dims("add_n", &terms[0], t);
        }
        let mut data = terms[0].data().to_vec();
        for t in &terms[1..] {
            for (d, &v) in data.iter_mut().zip(t.data()) {
                *d += v;
            }
        }
        make_op(
            "add_n",
            terms[0].dims().to_vec(),
            data,
            terms.to_vec(),
            Box::new(|g, _out, parents| {
                for p in parents {
                    p.accum_grad_with(|gp| {
                        for (x, &gi) in gp.iter_mut().zip(g) {
                            *x += gi;
                        }
                    });
                }
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor<S> {
        let mut acc = S::ZERO;
        for &v in self.data() {
            acc += v;
        }
        make_op(
            "sum_all",
            vec![1],
            vec![acc],
            vec![self.clone()],
            Box::new(|g, _out, parents| {
                let gi = g[0];
                parents[0].accum_grad_with(|ga| {
                    for x in ga.iter_mut() {
                        *x += gi;
                    }
                });
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor<S> {
        let n = self.len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Row sums of a 2-D tensor: `[m, n] -> [m, 1]`.
    pub fn row_sums(&self) -> Tensor<S> {
        let (m, n) = (self.rows(), self.cols());
        let x = self.data();
        let mut data = vec![S::ZERO; m];
        for i in 0..m {
            let mut acc = S::ZERO;
            for &v in &x[i * n..(i + 1) * n] {
                acc += v;
            }
            data[i] = acc;
        }
        make_op(
            "row_sums",
            vec![m, 1],
            data,
            vec![self.clone()],
            Box::new(move |g, _out, parents| {
                parents[0].accum_grad_with(|ga| {
                    for i in 0..m {
                        let gi = g[i];
                        for x in ga[i * n..(i + 1) * n].iter_mut() {
                            *x += gi;
                        }
                    }
                });
            }),
        )
    }

    /// Column means of a 2-D tensor: `[m, n] -> [1, n]`.
    pub fn mean_rows(&self) -> Tensor<S> {
        let (m, n) = (self.rows(), self.cols());
        let x = self.data();
        let inv = S::from_f64(1.0 / m as f64);
        let mut data = vec![S::ZERO; n];
        for i in 0..m {
            for j in 0..n {
                data[j] += x[i * n + j];
            }
        }
        for v in data.iter_mut() {
            *v = *v * inv;
        }
        make_op(
            "mean_rows",
            vec![1, n],
            data,
            vec![self.clone()],
            Box::new(move |g, _out, parents| {
                parents[0].accum_grad_with(|ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j] * inv;
                        }
                    }
                });
            }),
        )
    }

    /// Add a bias row to every row: `[m, n] + [n]`.
    pub fn row_bias_add(&self, bias: &Tensor<S>) -> Tensor<S> {
        let (m, n) = (self.rows(), self.cols());
        assert_eq!(bias.len(), n, "row_bias_add: bias length mismatch");
        let x = self.data();
        let b = bias.data();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(x[i * n + j] + b[j]);
            }
        }
        make_op(
            "row_bias_add",
            vec![m, n],
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _out, parents| {
                parents[0].accum_grad_with(|ga| {
                    for (x, &gi) in ga.iter_mut().zip(g) {
                        *x += gi;
                    }
                });
                parents[1].accum_grad_with(|gb| {
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g[i * n + j];
                        }
                    }
                });
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

// out[m,n] += a[m,k] * b[n,k]^T
fn matmul_nt_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::ZERO;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            out[i * n + j] += acc;
        }
    }
}

// out[k,n] += a[m,k]^T * b[m,n]
fn matmul_tn_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

impl<S: Scalar> Tensor<S> {
    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor<S>) -> Tensor<S> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let mut data = vec![S::ZERO; m * n];
        matmul_raw(self.data(), other.data(), m, k, n, &mut data);
        make_op(
            "matmul",
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _out, parents| {
                let a = parents[0].data();
                let b = parents[1].data();
                if parents[0].requires_grad() {
                    parents[0].accum_grad_with(|ga| {
                        // gA = g * B^T : [m,n] x [k,n]^T
                        matmul_nt_raw(g, b, m, n, k, ga);
                    });
                }
                if parents[1].requires_grad() {
                    parents[1].accum_grad_with(|gb| {
                        // gB = A^T * g : [m,k]^T x [m,n]
                        matmul_tn_raw(a, g, m, k, n, gb);
                    });
                }
            }),
        )
    }

    /// `[m, k] x [n, k]^T -> [m, n]`.
    pub fn matmul_nt(&self, other: &Tensor<S>) -> Tensor<S> {
        let (m, k) = (self.rows(), self.cols());
        let (n, k2) = (other.rows(), other.cols());
        assert_eq!(k, k2, "matmul_nt: inner dims {k} vs {k2}");
        let mut data = vec![S::ZERO; m * n];
        matmul_nt_raw(self.data(), other.data(), m, k, n, &mut data);
        make_op(
            "matmul_nt",
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _out, parents| {
                let a = parents[0].data();
                let b = parents[1].data();
                if parents[0].requires_grad() {
                    parents[0].accum_grad_with(|ga| {
                        // gA = g * B : [m,n] x [n,k]
                        matmul_raw(g, b, m, n, k, ga);
                    });
                }
                if parents[1].requires_grad() {
                    parents[1].accum_grad_with(|gb| {
                        // gB = g^T * A : [n,m] x [m,k]
                        matmul_tn_raw(g, a, m, n, k, gb);
                    });
                }
            }),
        )
    }

    /// `x · W + b` for 2-D `x` with `W: [in, out]`.
    pub fn linear(&self, weight: &Tensor<S>, bias: Option<&Tensor<S>>) -> Tensor<S> {
        let y = self.matmul(weight);
        match bias {
            Some(b) => y.row_bias_add(b),
            None => y,
        }
    }
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

impl<S: Scalar> Tensor<S> {
    /// Arbitrary index map: `out[i] = x[index[i]]`. Backward scatter-adds.
    pub fn gather(&self, dims: &[usize], index: &[usize]) -> Tensor<S> {
        assert_eq!(numel(dims), index.len(), "gather: dims/index mismatch");
        let x = self.data();
        let data: Vec<S> = index
            .iter()
            .map(|&i| {
                assert!(i < x.len(), "gather index {i} out of range {}", x.len());
                x[i]
            })
            .collect();
        let index: Vec<usize> = index.to_vec();
        make_op(
            "gather",
            dims.to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _out, parents| {
                parents[0].accum_grad_with(|ga| {
                    for (pos, &src) in index.iter().enumerate() {
                        ga[src] += g[pos];
                    }
                });
            }),
        )
    }

    /// Same data, new dims.
    pub fn reshape(&self, dims: &[usize]) -> Tensor<S> {
        assert_eq!(numel(dims), self.len(), "reshape: element count mismatch");
        make_op(
            "reshape",
            dims.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            Box::new(|g, _out, parents| {
                parents[0].accum_grad_with(|ga| {
                    for (x, &gi) in ga.iter_mut().zip(g) {
                        *x += gi;
                    }
                });
            }),
        )
    }

    /// 2-D transpose.
    pub fn transpose2(&self) -> Tensor<S> {
        let (m, n) = (self.rows(), self.cols());
        let mut index = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                index.push(i * n + j);
            }
        }
        self.gather(&[n, m], &index)
    }

    pub fn slice_rows(&self, r: Range<usize>) -> Tensor<S> {
        let (m, n) = (self.rows(), self.cols());
        assert!(r.end <= m && r.start < r.end, "slice_rows out of range");
        let index: Vec<usize> = (r.start * n..r.end * n).collect();
        self.gather(&[r.end - r.start, n], &index)
    }

    pub fn slice_cols(&self, r: Range<usize>) -> Tensor<S> {
        let (m, n) = (self.rows(), self.cols());
        assert!(r.end <= n && r.start < r.end, "slice_cols out of range");
        let mut index = Vec::with_capacity(m * (r.end - r.start));
        for i in 0..m {
            for j in r.clone() {
                index.push(i * n + j);
            }
        }
        self.gather(&[m, r.end - r.start], &index)
    }

    /// Stack 2-D tensors with equal column counts along the row axis.
    pub fn concat_rows(parts: &[Tensor<S>]) -> Tensor<S> {
        assert!(!parts.is_empty());
        let n = parts[0].cols();
        let mut data = Vec::new();
        let mut m = 0;
        for p in parts {
            assert_eq!(p.cols(), n, "concat_rows: column mismatch");
            m += p.rows();
            data.extend_from_slice(p.data());
        }
        let sizes: Vec<usize> = parts.iter().map(Tensor::len).collect();
        make_op(
            "concat_rows",
            vec![m, n],
            data,
            parts.to_vec(),
            Box::new(move |g, _out, parents| {
                let mut off = 0;
                for (p, &sz) in parents.iter().zip(&sizes) {
                    p.accum_grad_with(|gp| {
                        for (x, &gi) in gp.iter_mut().zip(&g[off..off + sz]) {
                            *x += gi;
                        }
                    });
                    off += sz;
                }
            }),
        )
    }

    /// Stack 2-D tensors with equal row counts along the column axis.
    pub fn concat_cols(parts: &[Tensor<S>]) -> Tensor<S> {
        assert!(!parts.is_empty());
        let m = parts[0].rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                assert_eq!(p.rows(), m, "concat_cols: row mismatch");
                p.cols()
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut data = vec![S::ZERO; m * n];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let pd = p.data();
            for i in 0..m {
                data[i * n + off..i * n + off + w].copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            off += w;
        }
        make_op(
            "concat_cols",
            vec![m, n],
            data,
            parts.to_vec(),
            Box::new(move |g, _out, parents| {
                let mut off = 0;
                for (p, &w) in parents.iter().zip(&widths) {
                    p.accum_grad_with(|gp| {
                        for i in 0..m {
                            for j in 0..w {
                                gp[i * w + j] += g[i * n + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

impl<S: Scalar> Tensor<S> {
    fn unary(
        &self,
        name: &str,
        fwd: impl Fn(S) -> S,
        // dy/dx as a function of (x, y)
        dydx: impl Fn(S, S) -> S + 'static,
    ) -> Tensor<S> {
        let data: Vec<S> = self.data().iter().map(|&v| fwd(v)).collect();
        make_op(
            name,
            self.dims().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, out, parents| {
                let x = parents[0].data();
                parents[0].accum_grad_with(|ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * dydx(x[i], out[i]);
                    }
                });
            }),
        )
    }

    pub fn exp(&self) -> Tensor<S> {
        self.unary("exp", |v| v.exp_v(), |_x, y| y)
    }

    pub fn ln(&self) -> Tensor<S> {
        self.unary("ln", |v| v.ln_v(), |x, _y| S::ONE / x)
    }

    pub fn sqrt(&self) -> Tensor<S> {
        self.unary(
            "sqrt",
            |v| v.sqrt_v(),
            |_x, y| S::ONE / (y + y),
        )
    }

    /// Elementwise `x^p` for constant `p`; domain `x > 0`.
    pub fn powf(&self, p: f64) -> Tensor<S> {
        let ps = S::from_f64(p);
        let pm1 = S::from_f64(p - 1.0);
        self.unary(
            "powf",
            move |v| v.powf_v(ps),
            move |x, _y| ps * x.powf_v(pm1),
        )
    }

    pub fn tanh(&self) -> Tensor<S> {
        self.unary("tanh", |v| v.tanh_v(), |_x, y| S::ONE - y * y)
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        self.unary(
            "sigmoid",
            |v| S::ONE / (S::ONE + (-v).exp_v()),
            |_x, y| y * (S::ONE - y),
        )
    }

    /// GELU, tanh approximation. The backward differentiates the exact
    /// formula implemented in the forward, so finite differences agree to
    /// machine precision.
    pub fn gelu(&self) -> Tensor<S> {
        let k0 = S::from_f64(0.7978845608028654); // sqrt(2/pi)
        let k1 = S::from_f64(0.044715);
        let half = S::from_f64(0.5);
        let three = S::from_f64(3.0);
        self.unary(
            "gelu",
            move |x| {
                let u = k0 * (x + k1 * x * x * x);
                half * x * (S::ONE + u.tanh_v())
            },
            move |x, _y| {
                let u = k0 * (x + k1 * x * x * x);
                let t = u.tanh_v();
                let du = k0 * (S::ONE + three * k1 * x * x);
                half * (S::ONE + t) + half * x * (S::ONE - t * t) * du
            },
        )
    }

    /// Swish / SiLU: `x * sigmoid(x)`.
    pub fn swish(&self) -> Tensor<S> {
        self.unary(
            "swish",
            |x| x / (S::ONE + (-x).exp_v()),
            |x, _y| {
                let s = S::ONE / (S::ONE + (-x).exp_v());
                s * (S::ONE + x * (S::ONE - s))
            },
        )
    }

    /// `x ln x` with the continuous extension 0 at x = 0.
    pub fn xlogx(&self) -> Tensor<S> {
        self.unary(
            "xlogx",
            |x| {
                if x == S::ZERO {
                    S::ZERO
                } else {
                    x * x.ln_v()
                }
            },
            |x, _y| {
                if x == S::ZERO {
                    S::ZERO
                } else {
                    x.ln_v() + S::ONE
                }
            },
        )
    }
}

// ---------------------------------------------------------------------------
// Row softmax / logsumexp
// ---------------------------------------------------------------------------

impl<S: Scalar> Tensor<S> {
    /// Row-wise softmax over a valid prefix of each row; entries at or
    /// beyond the valid length are exactly zero. `valid = None` uses full
    /// rows.
    pub fn softmax_rows(&self, valid: Option<&[usize]>) -> Tensor<S> {
        let (m, n) = (self.rows(), self.cols());
        if let Some(v) = valid {
            assert_eq!(v.len(), m, "softmax_rows: valid length mismatch");
            assert!(
                v.iter().all(|&l| l >= 1 && l <= n),
                "softmax_rows: valid lengths must be in 1..=cols"
            );
        }
        let valid: Vec<usize> = match valid {
            Some(v) => v.to_vec(),
            None => vec![n; m],
        };
        let x = self.data();
        let mut data = vec![S::ZERO; m * n];
        for i in 0..m {
            let l = valid[i];
            let row = &x[i * n..i * n + l];
            let mut mx = row[0];
            for &v in row {
                mx = mx.max_v(v);
            }
            let mut denom = S::ZERO;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp_v();
                data[i * n + j] = e;
                denom += e;
            }
            for j in 0..l {
                data[i * n + j] = data[i * n + j] / denom;
            }
        }
        make_op(
            "softmax_rows",
            vec![m, n],
            data,
            vec![self.clone()],
            Box::new(move |g, out, parents| {
                parents[0].accum_grad_with(|ga| {
                    for i in 0..m {
                        let l = valid[i];
                        let y = &out[i * n..i * n + l];
                        let gr = &g[i * n..i * n + l];
                        let mut dot = S::ZERO;
                        for j in 0..l {
                            dot += gr[j] * y[j];
                        }
                        for j in 0..l {
                            ga[i * n + j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }),
        )
    }

    /// Row-wise log-sum-exp: `[m, n] -> [m, 1]`.
    pub fn logsumexp_rows(&self) -> Tensor<S> {
        let (m, n) = (self.rows(), self.cols());
        let x = self.data();
        let mut data = vec![S::ZERO; m];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mut mx = row[0];
            for &v in row {
                mx = mx.max_v(v);
            }
            let mut acc = S::ZERO;
            for &v in row {
                acc += (v - mx).exp_v();
            }
            data[i] = mx + acc.ln_v();
        }
        make_op(
            "logsumexp_rows",
            vec![m, 1],
            data,
            vec![self.clone()],
            Box::new(move |g, out, parents| {
                let x = parents[0].data();
                parents[0].accum_grad_with(|ga| {
                    for i in 0..m {
                        let lse = out[i];
                        for j in 0..n {
                            ga[i * n + j] += g[i] * (x[i * n + j] - lse).exp_v();
                        }
                    }
                });
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Layer normalization
// ---------------------------------------------------------------------------

impl<S: Scalar> Tensor<S> {
    /// Row-wise layer norm with affine parameters: `y = g * (x-mu)/sigma + b`.
    pub fn layer_norm_rows(&self, gamma: &Tensor<S>, beta: &Tensor<S>, eps: f64) -> Tensor<S> {
        let (m, n) = (self.rows(), self.cols());
        assert_eq!(gamma.len(), n, "layer_norm: gamma length mismatch");
        assert_eq!(beta.len(), n, "layer_norm: beta length mismatch");
        let x = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let epss = S::from_f64(eps);
        let invn = S::from_f64(1.0 / n as f64);

        let mut data = vec![S::ZERO; m * n];
        let mut xhat = vec![S::ZERO; m * n];
        let mut inv_std = vec![S::ZERO; m];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mut mean = S::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean * invn;
            let mut var = S::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var = var * invn;
            let inv = S::ONE / (var + epss).sqrt_v();
            inv_std[i] = inv;
            for j in 0..n {
                let xh = (row[j] - mean) * inv;
                xhat[i * n + j] = xh;
                data[i * n + j] = gm[j] * xh + bt[j];
            }
        }
        make_op(
            "layer_norm",
            vec![m, n],
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, _out, parents| {
                let gm = parents[1].data();
                if parents[0].requires_grad() {
                    parents[0].accum_grad_with(|gx| {
                        for i in 0..m {
                            let gr = &g[i * n..(i + 1) * n];
                            let xh = &xhat[i * n..(i + 1) * n];
                            let mut mean_gh = S::ZERO;
                            let mut mean_ghx = S::ZERO;
                            for j in 0..n {
                                let gh = gm[j] * gr[j];
                                mean_gh += gh;
                                mean_ghx += gh * xh[j];
                            }
                            mean_gh = mean_gh * invn;
                            mean_ghx = mean_ghx * invn;
                            for j in 0..n {
                                let gh = gm[j] * gr[j];
                                gx[i * n + j] +=
                                    inv_std[i] * (gh - mean_gh - xh[j] * mean_ghx);
                            }
                        }
                    });
                }
                parents[1].accum_grad_with(|gg| {
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                });
                parents[2].accum_grad_with(|gb| {
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g[i * n + j];
                        }
                    }
                });
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

impl<S: Scalar> Tensor<S> {
    /// Grouped 1-D convolution.
    ///
    /// `self: [c_in, len]`, `weight: [c_out, c_in/groups, k]`,
    /// `bias: [c_out]`; zero padding of `pad` on both sides.
    pub fn conv1d(
        &self,
        weight: &Tensor<S>,
        bias: Option<&Tensor<S>>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Tensor<S> {
        let (c_in, len) = (self.rows(), self.cols());
        let wd = weight.dims();
        assert_eq!(wd.len(), 3, "conv1d: weight must be rank 3");
        let (c_out, cpg_in, k) = (wd[0], wd[1], wd[2]);
        assert_eq!(c_in % groups, 0, "conv1d: c_in not divisible by groups");
        assert_eq!(c_out % groups, 0, "conv1d: c_out not divisible by groups");
        assert_eq!(cpg_in, c_in / groups, "conv1d: weight in-channels mismatch");
        assert!(
            len + 2 * pad >= k,
            "conv1d: input length {len} (+2*{pad}) shorter than kernel {k}"
        );
        let out_len = (len + 2 * pad - k) / stride + 1;
        let cpg_out = c_out / groups;

        let x = self.data();
        let w = weight.data();
        let mut data = vec![S::ZERO; c_out * out_len];
        for co in 0..c_out {
            let gidx = co / cpg_out;
            for t in 0..out_len {
                let mut acc = S::ZERO;
                for cl in 0..cpg_in {
                    let ci = gidx * cpg_in + cl;
                    let xrow = &x[ci * len..(ci + 1) * len];
                    let wrow = &w[(co * cpg_in + cl) * k..(co * cpg_in + cl + 1) * k];
                    for (kk, &wv) in wrow.iter().enumerate() {
                        let j = t * stride + kk;
                        if j >= pad && j - pad < len {
                            acc += wv * xrow[j - pad];
                        }
                    }
                }
                data[co * out_len + t] = acc;
            }
        }
        if let Some(b) = bias {
            assert_eq!(b.len(), c_out, "conv1d: bias length mismatch");
            let bd = b.data();
            for co in 0..c_out {
                for t in 0..out_len {
                    data[co * out_len + t] += bd[co];
                }
            }
        }

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        make_op(
            "conv1d",
            vec![c_out, out_len],
            data,
            parents,
            Box::new(move |g, _out, parents| {
                let x = parents[0].data();
                let w = parents[1].data();
                if parents[0].requires_grad() {
                    parents[0].accum_grad_with(|gx| {
                        for co in 0..c_out {
                            let gidx = co / cpg_out;
                            for t in 0..out_len {
                                let go = g[co * out_len + t];
                                for cl in 0..cpg_in {
                                    let ci = gidx * cpg_in + cl;
                                    for kk in 0..k {
                                        let j = t * stride + kk;
                                        if j >= pad && j - pad < len {
                                            gx[ci * len + (j - pad)] +=
                                                go * w[(co * cpg_in + cl) * k + kk];
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                if parents[1].requires_grad() {
                    parents[1].accum_grad_with(|gw| {
                        for co in 0..c_out {
                            let gidx = co / cpg_out;
                            for t in 0..out_len {
                                let go = g[co * out_len + t];
                                for cl in 0..cpg_in {
                                    let ci = gidx * cpg_in + cl;
                                    for kk in 0..k {
                                        let j = t * stride + kk;
                                        if j >= pad && j - pad < len {
                                            gw[(co * cpg_in + cl) * k + kk] +=
                                                go * x[ci * len + (j - pad)];
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                if parents.len() > 2 {
                    parents[2].accum_grad_with(|gb| {
                        for co in 0..c_out {
                            for t in 0..out_len {
                                gb[co] += g[co * out_len + t];
                            }
                        }
                    });
                }
            }),
        )
    }

    /// 2-D convolution (no grouping).
    ///
    /// `self: [c_in, h, w]`, `weight: [c_out, c_in, kh, kw]`, `bias: [c_out]`.
    pub fn conv2d(
        &self,
        weight: &Tensor<S>,
        bias: Option<&Tensor<S>>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Tensor<S> {
        let d = self.dims();
        assert_eq!(d.len(), 3, "conv2d: input must be rank 3");
        let (c_in, h, w) = (d[0], d[1], d[2]);
        let wd = weight.dims();
        assert_eq!(wd.len(), 4, "conv2d: weight must be rank 4");
        let (c_out, c_in2, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
        assert_eq!(c_in, c_in2, "conv2d: channel mismatch");
        let (sh, sw) = stride;
        let (ph, pw) = pad;
        assert!(h + 2 * ph >= kh && w + 2 * pw >= kw, "conv2d: input too small");
        let oh = (h + 2 * ph - kh) / sh + 1;
        let ow = (w + 2 * pw - kw) / sw + 1;

        let x = self.data();
        let wt = weight.data();
        let mut data = vec![S::ZERO; c_out * oh * ow];
        for co in 0..c_out {
            for ci in 0..c_in {
                let xplane = &x[ci * h * w..(ci + 1) * h * w];
                let wplane = &wt[(co * c_in + ci) * kh * kw..(co * c_in + ci + 1) * kh * kw];
                for ti in 0..oh {
                    for tj in 0..ow {
                        let mut acc = S::ZERO;
                        for ki in 0..kh {
                            let ii = ti * sh + ki;
                            if ii < ph || ii - ph >= h {
                                continue;
                            }
                            for kj in 0..kw {
                                let jj = tj * sw + kj;
                                if jj < pw || jj - pw >= w {
                                    continue;
                                }
                                acc += wplane[ki * kw + kj] * xplane[(ii - ph) * w + (jj - pw)];
                            }
                        }
                        data[(co * oh + ti) * ow + tj] += acc;
                    }
                }
            }
        }
        if let Some(b) = bias {
            assert_eq!(b.len(), c_out, "conv2d: bias length mismatch");
            let bd = b.data();
            for co in 0..c_out {
                for p in 0..oh * ow {
                    data[co * oh * ow + p] += bd[co];
                }
            }
        }

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        make_op(
            "conv2d",
            vec![c_out, oh, ow],
            data,
            parents,
            Box::new(move |g, _out, parents| {
                let x = parents[0].data();
                let wt = parents[1].data();
                if parents[0].requires_grad() {
                    parents[0].accum_grad_with(|gx| {
                        for co in 0..c_out {
                            for ci in 0..c_in {
                                let wplane = &wt[(co * c_in + ci) * kh * kw
                                    ..(co * c_in + ci + 1) * kh * kw];
                                for ti in 0..oh {
                                    for tj in 0..ow {
                                        let go = g[(co * oh + ti) * ow + tj];
                                        for ki in 0..kh {
                                            let ii = ti * sh + ki;
                                            if ii < ph || ii - ph >= h {
                                                continue;
                                            }
                                            for kj in 0..kw {
                                                let jj = tj * sw + kj;
                                                if jj < pw || jj - pw >= w {
                                                    continue;
                                                }
                                                gx[ci * h * w + (ii - ph) * w + (jj - pw)] +=
                                                    go * wplane[ki * kw + kj];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                if parents[1].requires_grad() {
                    parents[1].accum_grad_with(|gw| {
                        for co in 0..c_out {
                            for ci in 0..c_in {
                                let xplane = &x[ci * h * w..(ci + 1) * h * w];
                                for ti in 0..oh {
                                    for tj in 0..ow {
                                        let go = g[(co * oh + ti) * ow + tj];
                                        for ki in 0..kh {
                                            let ii = ti * sh + ki;
                                            if ii < ph || ii - ph >= h {
                                                continue;
                                            }
                                            for kj in 0..kw {
                                                let jj = tj * sw + kj;
                                                if jj < pw || jj - pw >= w {
                                                    continue;
                                                }
                                                gw[(co * c_in + ci) * kh * kw + ki * kw + kj] +=
                                                    go * xplane[(ii - ph) * w + (jj - pw)];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                if parents.len() > 2 {
                    parents[2].accum_grad_with(|gb| {
                        for co in 0..c_out {
                            for p in 0..oh * ow {
                                gb[co] += g[co * oh * ow + p];
                            }
                        }
                    });
                }
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Straight-through hard selection
// ---------------------------------------------------------------------------

impl<S: Scalar> Tensor<S> {
    /// Per-row hard one-hot at the argmax (ties to the lower index).
    /// Forward is discrete; backward passes the incoming gradient through
    /// unchanged, i.e. the straight-through estimator.
    pub fn straight_through_hard_rows(&self) -> Tensor<S> {
        let (m, n) = (self.rows(), self.cols());
        let x = self.data();
        let mut data = vec![S::ZERO; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            data[i * n + best] = S::ONE;
        }
        make_op(
            "straight_through",
            vec![m, n],
            data,
            vec![self.clone()],
            Box::new(|g, _out, parents| {
                parents[0].accum_grad_with(|ga| {
                    for (x, &gi) in ga.iter_mut().zip(g) {
                        *x += gi;
                    }
                });
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Central-difference check of an op built from `inputs` by `f`.
    /// The loss is sum(op_output * c) for a fixed random weighting c so
    /// every output coordinate contributes.
    fn fd_check(
        seeds: std::ops::Range<u64>,
        input_dims: &[&[usize]],
        positive: bool,
        f: impl Fn(&[Tensor<f64>]) -> Tensor<f64>,
    ) {
        for seed in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor<f64>> = input_dims
                .iter()
                .map(|dims| {
                    let n = dims.iter().product();
                    let mut data = randn_vec(&mut rng, n);
                    if positive {
                        for v in data.iter_mut() {
                            *v = v.abs() + 0.5;
                        }
                    }
                    Tensor::param(dims, data)
                })
                .collect();
            let out = f(&inputs);
            let c = Tensor::constant(out.dims(), randn_vec(&mut rng, out.len()));
            let loss = out.mul(&c).sum_all();
            forward_backward(&loss).unwrap();

            let h = 1e-6;
            for (pi, inp) in inputs.iter().enumerate() {
                let analytic = inp.grad().expect("missing grad");
                for ei in 0..inp.len() {
                    let eval = |delta: f64| {
                        let perturbed: Vec<Tensor<f64>> = inputs
                            .iter()
                            .enumerate()
                            .map(|(qi, q)| {
                                if qi == pi {
                                    let mut d = q.data().to_vec();
                                    d[ei] += delta;
                                    Tensor::param(q.dims(), d)
                                } else {
                                    q.clone()
                                }
                            })
                            .collect();
                        f(&perturbed).mul(&c).sum_all().item()
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let a = analytic[ei];
                    let rel = (a - fd).abs() / (a.abs().max(fd.abs()) + 1e-6);
                    assert!(
                        rel <= 1e-4,
                        "seed {seed} input {pi} elem {ei}: analytic {a} vs fd {fd} (rel {rel})"
                    );
                }
            }
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        let w = Tensor::param(&[2], vec![1.0, 2.0]);
        let loss = w.mul(&w).sum_all();
        let v = forward_backward(&loss).unwrap();
        assert_eq!(v, 5.0);
        assert_eq!(w.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn constant_root_leaves_grads_zero() {
        let w = Tensor::param(&[2], vec![1.0, 2.0]);
        let c = Tensor::scalar(3.0f64);
        let v = forward_backward(&c).unwrap();
        assert_eq!(v, 3.0);
        assert!(w.grad().is_none());
    }

    #[test]
    fn grads_accumulate_until_cleared() {
        let w = Tensor::param(&[1], vec![2.0]);
        let loss = w.mul(&w).sum_all();
        forward_backward(&loss).unwrap();
        forward_backward(&loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![8.0]);
        w.clear_grad();
        assert!(w.grad().is_none());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let w = Tensor::param(&[2], vec![1.0, 2.0]);
        assert!(matches!(
            forward_backward(&w.mul(&w)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn nan_poisons_and_reports_op() {
        let a = Tensor::param(&[1], vec![1.0f64]);
        let b = Tensor::param(&[1], vec![0.0f64]);
        let bad = a.div(&b).sum_all();
        match forward_backward(&bad) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("div"), "{msg}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let x = Tensor::param(&[4, 4], randn_vec(&mut rng, 16));
            let w = Tensor::param(&[4, 4], randn_vec(&mut rng, 16));
            let loss = x.matmul(&w).gelu().sum_all();
            forward_backward(&loss).unwrap();
            (x.grad().unwrap(), w.grad().unwrap())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert!(a1.iter().zip(&a2).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(b1.iter().zip(&b2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn corrupted_backward_fails_fd_check() {
        // Negative control: an op with a wrong backward rule must be
        // caught by finite differences.
        let x = Tensor::param(&[3], vec![0.3, -0.7, 1.1]);
        let bad = make_op(
            "bad_square",
            vec![3],
            x.data().iter().map(|&v| v * v).collect(),
            vec![x.clone()],
            Box::new(|g, _out, parents| {
                let xv = parents[0].data();
                parents[0].accum_grad_with(|ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * xv[i]; // should be 2x
                    }
                });
            }),
        );
        let loss = bad.sum_all();
        forward_backward(&loss).unwrap();
        let analytic = x.grad().unwrap();
        let h = 1e-6;
        let f = |d: &[f64]| d.iter().map(|v| v * v).sum::<f64>();
        let mut worst = 0.0f64;
        for i in 0..3 {
            let mut plus = x.data().to_vec();
            plus[i] += h;
            let mut minus = x.data().to_vec();
            minus[i] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let rel = (analytic[i] - fd).abs() / (analytic[i].abs().max(fd.abs()) + 1e-6);
            worst = worst.max(rel);
        }
        assert!(worst > 1e-2, "corrupted backward slipped through: {worst}");
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        // Every differentiable primitive, >= 10 seeds across the suite.
        fd_check(0..10, &[&[3, 4], &[3, 4]], false, |t| t[0].add(&t[1]));
        fd_check(0..10, &[&[3, 4], &[3, 4]], false, |t| t[0].sub(&t[1]));
        fd_check(0..10, &[&[3, 4], &[3, 4]], false, |t| t[0].mul(&t[1]));
        fd_check(0..10, &[&[3, 4], &[3, 4]], true, |t| t[0].div(&t[1]));
        fd_check(0..10, &[&[3, 4]], false, |t| t[0].scale(1.7));
        fd_check(0..10, &[&[3, 4]], false, |t| t[0].add_scalar(0.3));
        fd_check(0..10, &[&[2, 3], &[1]], false, |t| t[0].scale_by(&t[1]));
        fd_check(0..10, &[&[2, 3], &[2, 3], &[2, 3]], false, |t| {
            Tensor::add_n(&[t[0].clone(), t[1].clone(), t[2].clone()])
        });
        fd_check(0..10, &[&[3, 4], &[4, 2]], false, |t| t[0].matmul(&t[1]));
        fd_check(0..10, &[&[3, 4], &[2, 4]], false, |t| t[0].matmul_nt(&t[1]));
        fd_check(0..10, &[&[3, 4], &[4]], false, |t| t[0].row_bias_add(&t[1]));
        fd_check(0..10, &[&[3, 4]], false, |t| t[0].sum_all());
        fd_check(0..10, &[&[3, 4]], false, |t| t[0].mean_all());
        fd_check(0..10, &[&[3, 4]], false, |t| t[0].row_sums());
        fd_check(0..10, &[&[3, 4]], false, |t| t[0].mean_rows());
        fd_check(0..10, &[&[3, 4]], false, |t| {
            t[0].gather(&[2, 3], &[0, 5, 5, 2, 7, 11])
        });
        fd_check(0..10, &[&[3, 4]], false, |t| t[0].reshape(&[2, 6]));
        fd_check(0..10, &[&[3, 4]], false, |t| t[0].transpose2());
        fd_check(0..10, &[&[4, 3]], false, |t| t[0].slice_rows(1..3));
        fd_check(0..10, &[&[3, 4]], false, |t| t[0].slice_cols(1..4));
        fd_check(0..10, &[&[2, 3], &[4, 3]], false, |t| {
            Tensor::concat_rows(&[t[0].clone(), t[1].clone()])
        });
        fd_check(0..10, &[&[3, 2], &[3, 4]], false, |t| {
            Tensor::concat_cols(&[t[0].clone(), t[1].clone()])
        });
        fd_check(0..10, &[&[3, 4]], false, |t| t[0].exp());
        fd_check(0..10, &[&[3, 4]], true, |t| t[0].ln());
        fd_check(0..10, &[&[3, 4]], true, |t| t[0].sqrt());
        fd_check(0..10, &[&[3, 4]], true, |t| t[0].powf(-0.5));
        fd_check(0..10, &[&[3, 4]], false, |t| t[0].tanh());
        fd_check(0..10, &[&[3, 4]], false, |t| t[0].sigmoid());
        fd_check(0..10, &[&[3, 4]], false, |t| t[0].gelu());
        fd_check(0..10, &[&[3, 4]], false, |t| t[0].swish());
        fd_check(0..10, &[&[3, 4]], true, |t| t[0].xlogx());
        fd_check(0..10, &[&[3, 5]], false, |t| t[0].softmax_rows(None));
        fd_check(0..10, &[&[3, 5]], false, |t| {
            t[0].softmax_rows(Some(&[2, 5, 3]))
        });
        fd_check(0..10, &[&[3, 5]], false, |t| t[0].logsumexp_rows());
        fd_check(0..10, &[&[3, 5], &[5], &[5]], false, |t| {
            t[0].layer_norm_rows(&t[1], &t[2], 1e-5)
        });
        fd_check(0..10, &[&[2, 9], &[3, 2, 3], &[3]], false, |t| {
            t[0].conv1d(&t[1], Some(&t[2]), 2, 1, 1)
        });
        fd_check(0..10, &[&[4, 9], &[4, 1, 3], &[4]], false, |t| {
            t[0].conv1d(&t[1], Some(&t[2]), 1, 1, 4)
        });
        fd_check(0..10, &[&[2, 5, 6], &[3, 2, 3, 3], &[3]], false, |t| {
            t[0].conv2d(&t[1], Some(&t[2]), (2, 2), (1, 1))
        });
        // straight_through_hard_rows has a discontinuous forward, so finite
        // differences do not apply; its estimator contract is covered by the
        // quantizer tests.
    }

    #[test]
    fn masked_softmax_zeroes_invalid_positions() {
        let x = Tensor::constant(&[2, 4], vec![0.3, 0.1, 9.0, 9.0, 0.5, 0.5, 0.5, 0.5]);
        let y = x.softmax_rows(Some(&[2, 4]));
        let d = y.data();
        assert_eq!(d[2], 0.0);
        assert_eq!(d[3], 0.0);
        let r0: f64 = d[0] + d[1];
        let r1: f64 = d[4..8].iter().sum();
        assert!((r0 - 1.0).abs() < 1e-12);
        assert!((r1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn straight_through_rows_are_one_hot_with_low_tie_break() {
        let x = Tensor::param(&[2, 3], vec![0.5, 0.5, 0.1, 0.0, 2.0, 2.0]);
        let y = x.straight_through_hard_rows();
        assert_eq!(y.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn conv1d_matches_hand_result() {
        // x = [1,2,3,4], w = [1,1], stride 1, no pad.
        let x = Tensor::constant(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let w = Tensor::constant(&[1, 1, 2], vec![1.0, 1.0]);
        let y = x.conv1d(&w, None, 1, 0, 1);
        assert_eq!(y.dims(), &[1, 3]);
        assert_eq!(y.data(), &[3.0, 5.0, 7.0]);
    }

    #[test]
    fn conv2d_shape_follows_ceiling_division() {
        let x = Tensor::constant(&[1, 5, 80], vec![0.0; 5 * 80]);
        let w = Tensor::constant(&[32, 1, 3, 3], vec![0.0; 32 * 9]);
        let y = x.conv2d(&w, None, (2, 2), (1, 1));
        assert_eq!(y.dims(), &[32, 3, 40]);
    }
}
