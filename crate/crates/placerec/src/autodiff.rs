//! Reverse-mode automatic differentiation on `f32` tensors.
//!
//! A small tape: every operation creates a node holding its value, its
//! parents, and a closure that routes the output gradient to the parents.
//! Node ids increase in creation order, so walking ids in reverse is a
//! valid topological order for backpropagation.
//!
//! Values are `ndarray::ArrayD<f32>`. The engine is single-threaded and
//! fully deterministic: identical inputs produce bit-identical values and
//! gradients.

use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording disabled; nodes created inside are
/// constants with no parents, so inference builds no tape.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// `(grad_out, value_out, parents)` -> accumulate into parent grads.
type BackwardFn = Box<dyn Fn(&ArrayD<f32>, &ArrayD<f32>, &[Tensor])>;

struct Inner {
    id: u64,
    value: RefCell<ArrayD<f32>>,
    grad: RefCell<Option<ArrayD<f32>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// A node in the computation graph. Cloning is cheap (shared `Rc`).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn new_node(
    value: ArrayD<f32>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
) -> Tensor {
    Tensor {
        inner: Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value: RefCell::new(value),
            grad: RefCell::new(None),
            requires_grad,
            parents,
            backward,
        }),
    }
}

/// Builds an op node; collapses to a constant when no parent needs gradients
/// or recording is disabled.
fn op_node(value: ArrayD<f32>, parents: Vec<Tensor>, backward: BackwardFn) -> Tensor {
    let track = grad_enabled() && parents.iter().any(|p| p.inner.requires_grad);
    if track {
        new_node(value, true, parents, Some(backward))
    } else {
        new_node(value, false, Vec::new(), None)
    }
}

impl Tensor {
    /// Leaf tensor that accumulates gradients (a trainable parameter).
    pub fn param(value: ArrayD<f32>) -> Tensor {
        new_node(value, true, Vec::new(), None)
    }

    /// Leaf tensor without gradient tracking.
    pub fn constant(value: ArrayD<f32>) -> Tensor {
        new_node(value, false, Vec::new(), None)
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn from_vec(v: Vec<f32>) -> Tensor {
        let n = v.len();
        Tensor::constant(ArrayD::from_shape_vec(IxDyn(&[n]), v).unwrap())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.value.borrow().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Clone of the current value.
    pub fn value(&self) -> ArrayD<f32> {
        self.inner.value.borrow().clone()
    }

    /// Borrowed view of the value (do not hold across ops that mutate it).
    pub fn value_ref(&self) -> std::cell::Ref<'_, ArrayD<f32>> {
        self.inner.value.borrow()
    }

    /// Value as a 2-D array (panics if not 2-D).
    pub fn value2(&self) -> Array2<f32> {
        self.value().into_dimensionality().expect("expected 2-D tensor")
    }

    /// Value as a 1-D array.
    pub fn value1(&self) -> Array1<f32> {
        self.value().into_dimensionality().expect("expected 1-D tensor")
    }

    /// Scalar value (panics if not 0-D).
    pub fn scalar_value(&self) -> f32 {
        let v = self.inner.value.borrow();
        assert!(v.ndim() == 0, "expected scalar tensor, got shape {:?}", v.shape());
        *v.first().unwrap()
    }

    /// Clone of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<ArrayD<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrites the stored value in place (used by the optimizer).
    pub fn set_value(&self, value: ArrayD<f32>) {
        let mut v = self.inner.value.borrow_mut();
        assert_eq!(v.shape(), value.shape(), "set_value must preserve shape");
        *v = value;
    }

    fn accum_grad(&self, g: ArrayD<f32>) {
        if !self.inner.requires_grad {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        }
    }
}

/// Backpropagates from a scalar `loss`, accumulating gradients into every
/// reachable tensor with `requires_grad`.
pub fn backward(loss: &Tensor) {
    assert!(
        loss.inner.value.borrow().ndim() == 0,
        "backward requires a scalar loss"
    );
    // Collect the reachable subgraph, then replay in descending id order.
    let mut visited = std::collections::HashSet::new();
    let mut nodes: Vec<Tensor> = Vec::new();
    let mut stack = vec![loss.clone()];
    while let Some(t) = stack.pop() {
        if !visited.insert(t.inner.id) {
            continue;
        }
        for p in &t.inner.parents {
            stack.push(p.clone());
        }
        nodes.push(t);
    }
    nodes.sort_by(|a, b| b.inner.id.cmp(&a.inner.id));

    loss.accum_grad(ArrayD::from_elem(IxDyn(&[]), 1.0));
    for node in &nodes {
        let Some(back) = &node.inner.backward else { continue };
        let grad = node.inner.grad.borrow().clone();
        let Some(grad) = grad else { continue };
        let value = node.inner.value.borrow().clone();
        back(&grad, &value, &node.inner.parents);
    }
}

// ---------------------------------------------------------------------------
// Shape helpers
// ---------------------------------------------------------------------------

fn as2(a: &ArrayD<f32>) -> Array2<f32> {
    a.clone().into_dimensionality().expect("expected 2-D array")
}

fn as3(a: &ArrayD<f32>) -> Array3<f32> {
    a.clone().into_dimensionality().expect("expected 3-D array")
}

fn dyn2(a: Array2<f32>) -> ArrayD<f32> {
    a.into_dyn()
}

// ---------------------------------------------------------------------------
// Elementwise and arithmetic ops
// ---------------------------------------------------------------------------

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        let value = &*self.value_ref() + &*other.value_ref();
        op_node(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, _v, parents| {
                parents[0].accum_grad(g.clone());
                parents[1].accum_grad(g.clone());
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        let value = &*self.value_ref() - &*other.value_ref();
        op_node(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, _v, parents| {
                parents[0].accum_grad(g.clone());
                parents[1].accum_grad(-g);
            }),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "mul: shape mismatch");
        let value = &*self.value_ref() * &*other.value_ref();
        op_node(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, _v, parents| {
                let a = parents[0].value();
                let b = parents[1].value();
                parents[0].accum_grad(g * &b);
                parents[1].accum_grad(g * &a);
            }),
        )
    }

    pub fn scale(&self, c: f32) -> Tensor {
        let value = &*self.value_ref() * c;
        op_node(
            value,
            vec![self.clone()],
            Box::new(move |g, _v, parents| parents[0].accum_grad(g * c)),
        )
    }

    pub fn add_scalar(&self, c: f32) -> Tensor {
        let value = &*self.value_ref() + c;
        op_node(
            value,
            vec![self.clone()],
            Box::new(|g, _v, parents| parents[0].accum_grad(g.clone())),
        )
    }

    pub fn relu(&self) -> Tensor {
        let value = self.value_ref().mapv(|x| x.max(0.0));
        op_node(
            value,
            vec![self.clone()],
            Box::new(|g, v, parents| {
                let mask = v.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                parents[0].accum_grad(g * &mask);
            }),
        )
    }

    pub fn exp(&self) -> Tensor {
        let value = self.value_ref().mapv(f32::exp);
        op_node(
            value,
            vec![self.clone()],
            Box::new(|g, v, parents| parents[0].accum_grad(g * v)),
        )
    }

    pub fn ln(&self) -> Tensor {
        let value = self.value_ref().mapv(f32::ln);
        op_node(
            value,
            vec![self.clone()],
            Box::new(|g, _v, parents| {
                let x = parents[0].value();
                parents[0].accum_grad(g / &x);
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let s = self.value_ref().sum();
        op_node(
            ArrayD::from_elem(IxDyn(&[]), s),
            vec![self.clone()],
            Box::new(|g, _v, parents| {
                let gs = *g.first().unwrap();
                let shape = parents[0].value_ref().raw_dim();
                parents[0].accum_grad(ArrayD::from_elem(shape, gs));
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.value_ref().len().max(1) as f32;
        self.sum_all().scale(1.0 / n)
    }

    /// Identity in the forward pass; multiplies the incoming gradient by
    /// `lambda` in the backward pass (gradient reversal when `lambda < 0`).
    pub fn grl(&self, lambda: f32) -> Tensor {
        let value = self.value();
        op_node(
            value,
            vec![self.clone()],
            Box::new(move |g, _v, parents| parents[0].accum_grad(g * lambda)),
        )
    }
}

// ---------------------------------------------------------------------------
// Matrix / shape ops
// ---------------------------------------------------------------------------

impl Tensor {
    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let a = as2(&self.value_ref());
        let b = as2(&other.value_ref());
        assert_eq!(a.ncols(), b.nrows(), "matmul: inner dims differ");
        let value = dyn2(a.dot(&b));
        op_node(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, _v, parents| {
                let g2 = as2(g);
                let a = as2(&parents[0].value_ref());
                let b = as2(&parents[1].value_ref());
                parents[0].accum_grad(dyn2(g2.dot(&b.t())));
                parents[1].accum_grad(dyn2(a.t().dot(&g2)));
            }),
        )
    }

    pub fn transpose(&self) -> Tensor {
        let value = dyn2(as2(&self.value_ref()).reversed_axes());
        op_node(
            value,
            vec![self.clone()],
            Box::new(|g, _v, parents| {
                parents[0].accum_grad(dyn2(as2(g).reversed_axes()));
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        // normalize to C layout first; transposed views are not reshapeable
        let value = self
            .value_ref()
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        op_node(
            value,
            vec![self.clone()],
            Box::new(|g, _v, parents| {
                let shape = parents[0].value_ref().raw_dim();
                let g = g.as_standard_layout().to_owned();
                parents[0].accum_grad(g.into_shape_with_order(shape).unwrap());
            }),
        )
    }

    /// Adds a `[n]` bias row-broadcast onto a `[m,n]` matrix.
    pub fn add_bias(&self, bias: &Tensor) -> Tensor {
        let x = as2(&self.value_ref());
        let b: Array1<f32> = bias.value().into_dimensionality().unwrap();
        assert_eq!(x.ncols(), b.len(), "add_bias: width mismatch");
        let value = dyn2(&x + &b);
        op_node(
            value,
            vec![self.clone(), bias.clone()],
            Box::new(|g, _v, parents| {
                let g2 = as2(g);
                parents[0].accum_grad(g.clone());
                parents[1].accum_grad(g2.sum_axis(Axis(0)).into_dyn());
            }),
        )
    }

    /// Columns `[start, end)` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor {
        let x = as2(&self.value_ref());
        assert!(start < end && end <= x.ncols(), "slice_cols out of range");
        let value = dyn2(x.slice(ndarray::s![.., start..end]).to_owned());
        op_node(
            value,
            vec![self.clone()],
            Box::new(move |g, _v, parents| {
                let g2 = as2(g);
                let p = as2(&parents[0].value_ref());
                let mut full = Array2::<f32>::zeros((p.nrows(), p.ncols()));
                full.slice_mut(ndarray::s![.., start..end]).assign(&g2);
                parents[0].accum_grad(dyn2(full));
            }),
        )
    }

    /// Per-row dot product of two equal-shaped 2-D tensors: `[m,n] -> [m]`.
    pub fn row_dot(&self, other: &Tensor) -> Tensor {
        let a = as2(&self.value_ref());
        let b = as2(&other.value_ref());
        assert_eq!(a.shape(), b.shape(), "row_dot: shape mismatch");
        let value = (&a * &b).sum_axis(Axis(1)).into_dyn();
        op_node(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, _v, parents| {
                let g1: Array1<f32> = g.clone().into_dimensionality().unwrap();
                let a = as2(&parents[0].value_ref());
                let b = as2(&parents[1].value_ref());
                let gcol = g1.insert_axis(Axis(1));
                parents[0].accum_grad(dyn2(&b * &gcol));
                parents[1].accum_grad(dyn2(&a * &gcol));
            }),
        )
    }

    /// Dot product of two 1-D tensors -> scalar.
    pub fn dot(&self, other: &Tensor) -> Tensor {
        let a: Array1<f32> = self.value().into_dimensionality().unwrap();
        let b: Array1<f32> = other.value().into_dimensionality().unwrap();
        assert_eq!(a.len(), b.len(), "dot: length mismatch");
        let value = ArrayD::from_elem(IxDyn(&[]), a.dot(&b));
        op_node(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, _v, parents| {
                let gs = *g.first().unwrap();
                let a = parents[0].value();
                let b = parents[1].value();
                parents[0].accum_grad(b * gs);
                parents[1].accum_grad(a * gs);
            }),
        )
    }

    /// Selects entries of a 1-D tensor (indices may repeat).
    pub fn gather_1d(&self, indices: &[usize]) -> Tensor {
        let x: Array1<f32> = self.value().into_dimensionality().unwrap();
        let value = Array1::from_iter(indices.iter().map(|&i| x[i])).into_dyn();
        let idx = indices.to_vec();
        op_node(
            value,
            vec![self.clone()],
            Box::new(move |g, _v, parents| {
                let g1: Array1<f32> = g.clone().into_dimensionality().unwrap();
                let n = parents[0].value_ref().len();
                let mut full = Array1::<f32>::zeros(n);
                for (k, &i) in idx.iter().enumerate() {
                    full[i] += g1[k];
                }
                parents[0].accum_grad(full.into_dyn());
            }),
        )
    }
}

/// Concatenates 2-D tensors along rows (axis 0).
pub fn concat_rows(parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty());
    let views: Vec<Array2<f32>> = parts.iter().map(|t| as2(&t.value_ref())).collect();
    let value = ndarray::concatenate(
        Axis(0),
        &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
    )
    .unwrap();
    let rows: Vec<usize> = views.iter().map(|v| v.nrows()).collect();
    op_node(
        dyn2(value),
        parts.to_vec(),
        Box::new(move |g, _v, parents| {
            let g2 = as2(g);
            let mut off = 0;
            for (p, &r) in parents.iter().zip(&rows) {
                let slice = g2.slice(ndarray::s![off..off + r, ..]).to_owned();
                p.accum_grad(dyn2(slice));
                off += r;
            }
        }),
    )
}

/// Concatenates 2-D tensors along columns (axis 1).
pub fn concat_cols(parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty());
    let views: Vec<Array2<f32>> = parts.iter().map(|t| as2(&t.value_ref())).collect();
    let value = ndarray::concatenate(
        Axis(1),
        &views.iter().map(|v| v.view()).collect::<Vec<_>>(),
    )
    .unwrap();
    let cols: Vec<usize> = views.iter().map(|v| v.ncols()).collect();
    op_node(
        dyn2(value),
        parts.to_vec(),
        Box::new(move |g, _v, parents| {
            let g2 = as2(g);
            let mut off = 0;
            for (p, &c) in parents.iter().zip(&cols) {
                let slice = g2.slice(ndarray::s![.., off..off + c]).to_owned();
                p.accum_grad(dyn2(slice));
                off += c;
            }
        }),
    )
}

/// Stacks scalar tensors into a 1-D tensor.
pub fn stack_scalars(parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty());
    let value = Array1::from_iter(parts.iter().map(|t| t.scalar_value())).into_dyn();
    op_node(
        value,
        parts.to_vec(),
        Box::new(|g, _v, parents| {
            let g1: Array1<f32> = g.clone().into_dimensionality().unwrap();
            for (k, p) in parents.iter().enumerate() {
                p.accum_grad(ArrayD::from_elem(IxDyn(&[]), g1[k]));
            }
        }),
    )
}

/// Sums equal-shaped tensors.
pub fn sum_tensors(parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty());
    let mut value = parts[0].value();
    for p in &parts[1..] {
        value += &*p.value_ref();
    }
    op_node(
        value,
        parts.to_vec(),
        Box::new(|g, _v, parents| {
            for p in parents {
                p.accum_grad(g.clone());
            }
        }),
    )
}

/// Elementwise maximum of equal-shaped tensors. On ties the gradient is
/// routed to the earliest input, matching stable ascending-index tie-breaks.
pub fn maximum(parts: &[Tensor]) -> Tensor {
    assert!(!parts.is_empty());
    let vals: Vec<ArrayD<f32>> = parts.iter().map(|t| t.value()).collect();
    let mut value = vals[0].clone();
    let mut argmax = ArrayD::<usize>::zeros(value.raw_dim());
    for (k, v) in vals.iter().enumerate().skip(1) {
        ndarray::Zip::from(&mut value)
            .and(&mut argmax)
            .and(v)
            .for_each(|m, a, &x| {
                if x > *m {
                    *m = x;
                    *a = k;
                }
            });
    }
    op_node(
        value,
        parts.to_vec(),
        Box::new(move |g, _v, parents| {
            for (k, p) in parents.iter().enumerate() {
                let mask = argmax.mapv(|a| if a == k { 1.0 } else { 0.0 });
                p.accum_grad(g * &mask);
            }
        }),
    )
}

// ---------------------------------------------------------------------------
// Row-wise neural ops
// ---------------------------------------------------------------------------

fn softmax_rows_value(x: &Array2<f32>) -> Array2<f32> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl Tensor {
    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&self) -> Tensor {
        let value = dyn2(softmax_rows_value(&as2(&self.value_ref())));
        op_node(
            value,
            vec![self.clone()],
            Box::new(|g, v, parents| {
                let g2 = as2(g);
                let y = as2(v);
                let mut gx = Array2::<f32>::zeros(y.raw_dim());
                for i in 0..y.nrows() {
                    let yr = y.row(i);
                    let gr = g2.row(i);
                    let dot = yr.dot(&gr);
                    for j in 0..y.ncols() {
                        gx[[i, j]] = yr[j] * (gr[j] - dot);
                    }
                }
                parents[0].accum_grad(dyn2(gx));
            }),
        )
    }

    /// Row-wise layer normalization with affine parameters:
    /// `y = gamma * (x - mean) / sqrt(var + eps) + beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f32) -> Tensor {
        let x = as2(&self.value_ref());
        let gm: Array1<f32> = gamma.value().into_dimensionality().unwrap();
        let bt: Array1<f32> = beta.value().into_dimensionality().unwrap();
        assert_eq!(x.ncols(), gm.len(), "layer_norm: gamma width");
        let n = x.ncols() as f32;
        let mut xhat = Array2::<f32>::zeros(x.raw_dim());
        let mut inv_std = Array1::<f32>::zeros(x.nrows());
        for i in 0..x.nrows() {
            let row = x.row(i);
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..x.ncols() {
                xhat[[i, j]] = (x[[i, j]] - mean) * is;
            }
        }
        let value = &xhat * &gm + &bt;
        op_node(
            dyn2(value),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, _v, parents| {
                let g2 = as2(g);
                let gm: Array1<f32> = parents[1].value().into_dimensionality().unwrap();
                let rows = xhat.nrows();
                let cols = xhat.ncols();
                let nf = cols as f32;
                let mut gx = Array2::<f32>::zeros((rows, cols));
                let mut ggamma = Array1::<f32>::zeros(cols);
                let mut gbeta = Array1::<f32>::zeros(cols);
                for i in 0..rows {
                    let ghat: Vec<f32> = (0..cols).map(|j| g2[[i, j]] * gm[j]).collect();
                    let mean_ghat = ghat.iter().sum::<f32>() / nf;
                    let mean_ghat_xhat = (0..cols)
                        .map(|j| ghat[j] * xhat[[i, j]])
                        .sum::<f32>()
                        / nf;
                    for j in 0..cols {
                        gx[[i, j]] = inv_std[i]
                            * (ghat[j] - mean_ghat - xhat[[i, j]] * mean_ghat_xhat);
                        ggamma[j] += g2[[i, j]] * xhat[[i, j]];
                        gbeta[j] += g2[[i, j]];
                    }
                }
                parents[0].accum_grad(dyn2(gx));
                parents[1].accum_grad(ggamma.into_dyn());
                parents[2].accum_grad(gbeta.into_dyn());
            }),
        )
    }

    /// L2-normalizes each row of a 2-D tensor.
    pub fn l2_normalize_rows(&self) -> Tensor {
        let x = as2(&self.value_ref());
        let mut norms = Array1::<f32>::zeros(x.nrows());
        let mut y = x.clone();
        for i in 0..x.nrows() {
            let n = x.row(i).dot(&x.row(i)).max(1e-24).sqrt();
            norms[i] = n;
            for j in 0..x.ncols() {
                y[[i, j]] /= n;
            }
        }
        op_node(
            dyn2(y),
            vec![self.clone()],
            Box::new(move |g, v, parents| {
                let g2 = as2(g);
                let y = as2(v);
                let mut gx = Array2::<f32>::zeros(y.raw_dim());
                for i in 0..y.nrows() {
                    let yr = y.row(i);
                    let gr = g2.row(i);
                    let dot = yr.dot(&gr);
                    for j in 0..y.ncols() {
                        gx[[i, j]] = (gr[j] - yr[j] * dot) / norms[i];
                    }
                }
                parents[0].accum_grad(dyn2(gx));
            }),
        )
    }

    /// L2-normalizes the whole tensor viewed as one flat vector.
    pub fn l2_normalize_flat(&self) -> Tensor {
        let n = self.value_ref().len();
        self.reshape(&[1, n])
            .l2_normalize_rows()
            .reshape(&[n])
    }

    /// Mean softmax cross-entropy over rows of `[B,K]` logits.
    pub fn cross_entropy_mean(&self, labels: &[usize]) -> Tensor {
        let x = as2(&self.value_ref());
        assert_eq!(x.nrows(), labels.len(), "cross_entropy: label count");
        assert!(labels.iter().all(|&l| l < x.ncols()), "label out of range");
        let b = x.nrows() as f32;
        let mut loss = 0.0f32;
        for (i, &label) in labels.iter().enumerate() {
            let row = x.row(i);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
            loss += lse - row[label];
        }
        loss /= b;
        let labels = labels.to_vec();
        op_node(
            ArrayD::from_elem(IxDyn(&[]), loss),
            vec![self.clone()],
            Box::new(move |g, _v, parents| {
                let gs = *g.first().unwrap();
                let x = as2(&parents[0].value_ref());
                let mut gx = softmax_rows_value(&x);
                for (i, &label) in labels.iter().enumerate() {
                    gx[[i, label]] -= 1.0;
                }
                gx *= gs / labels.len() as f32;
                parents[0].accum_grad(dyn2(gx));
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Convolution / pooling ops on [C,H,W] maps
// ---------------------------------------------------------------------------

fn conv2d_same_value(x: &Array3<f32>, w: &ndarray::Array4<f32>, b: &Array1<f32>) -> Array3<f32> {
    let (ci, h, wd) = x.dim();
    let (co, ci_w, kh, kw) = w.dim();
    assert_eq!(ci, ci_w, "conv2d: channel mismatch");
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = Array3::<f32>::zeros((co, h, wd));
    for o in 0..co {
        for y in 0..h {
            for xp in 0..wd {
                let mut acc = b[o];
                for c in 0..ci {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let sy = y as isize + dy as isize - ph as isize;
                            let sx = xp as isize + dx as isize - pw as isize;
                            if sy >= 0 && sy < h as isize && sx >= 0 && sx < wd as isize {
                                acc += x[[c, sy as usize, sx as usize]] * w[[o, c, dy, dx]];
                            }
                        }
                    }
                }
                out[[o, y, xp]] = acc;
            }
        }
    }
    out
}

impl Tensor {
    /// 2-D convolution with same padding and stride 1. `self` is `[C_in,H,W]`,
    /// `weight` is `[C_out,C_in,kh,kw]` (odd kernel), `bias` is `[C_out]`.
    pub fn conv2d_same(&self, weight: &Tensor, bias: &Tensor) -> Tensor {
        let x = as3(&self.value_ref());
        let w: ndarray::Array4<f32> = weight.value().into_dimensionality().unwrap();
        let b: Array1<f32> = bias.value().into_dimensionality().unwrap();
        let value = conv2d_same_value(&x, &w, &b).into_dyn();
        op_node(
            value,
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(|g, _v, parents| {
                let g3 = as3(g);
                let x = as3(&parents[0].value_ref());
                let w: ndarray::Array4<f32> =
                    parents[1].value().into_dimensionality().unwrap();
                let (ci, h, wd) = x.dim();
                let (co, _, kh, kw) = w.dim();
                let (ph, pw) = (kh / 2, kw / 2);
                let mut gx = Array3::<f32>::zeros((ci, h, wd));
                let mut gw = ndarray::Array4::<f32>::zeros((co, ci, kh, kw));
                let mut gb = Array1::<f32>::zeros(co);
                for o in 0..co {
                    for y in 0..h {
                        for xp in 0..wd {
                            let go = g3[[o, y, xp]];
                            gb[o] += go;
                            for c in 0..ci {
                                for dy in 0..kh {
                                    for dx in 0..kw {
                                        let sy = y as isize + dy as isize - ph as isize;
                                        let sx = xp as isize + dx as isize - pw as isize;
                                        if sy >= 0
                                            && sy < h as isize
                                            && sx >= 0
                                            && sx < wd as isize
                                        {
                                            let (sy, sx) = (sy as usize, sx as usize);
                                            gx[[c, sy, sx]] += go * w[[o, c, dy, dx]];
                                            gw[[o, c, dy, dx]] += go * x[[c, sy, sx]];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                parents[0].accum_grad(gx.into_dyn());
                parents[1].accum_grad(gw.into_dyn());
                parents[2].accum_grad(gb.into_dyn());
            }),
        )
    }

    /// 2x2 average pooling with stride 2 (floor; trailing row/col dropped).
    pub fn avg_pool2x2(&self) -> Tensor {
        let x = as3(&self.value_ref());
        let (c, h, w) = x.dim();
        assert!(h >= 2 && w >= 2, "avg_pool2x2 requires H,W >= 2");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Array3::<f32>::zeros((c, oh, ow));
        for ch in 0..c {
            for y in 0..oh {
                for xp in 0..ow {
                    out[[ch, y, xp]] = (x[[ch, 2 * y, 2 * xp]]
                        + x[[ch, 2 * y, 2 * xp + 1]]
                        + x[[ch, 2 * y + 1, 2 * xp]]
                        + x[[ch, 2 * y + 1, 2 * xp + 1]])
                        / 4.0;
                }
            }
        }
        op_node(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(|g, _v, parents| {
                let g3 = as3(g);
                let (c, oh, ow) = g3.dim();
                let shape = parents[0].value_ref().raw_dim();
                let mut gx = ArrayD::<f32>::zeros(shape);
                for ch in 0..c {
                    for y in 0..oh {
                        for xp in 0..ow {
                            let gv = g3[[ch, y, xp]] / 4.0;
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                gx[[ch, 2 * y + dy, 2 * xp + dx]] += gv;
                            }
                        }
                    }
                }
                parents[0].accum_grad(gx);
            }),
        )
    }

    /// Global average pooling: `[C,H,W] -> [C]`.
    pub fn global_avg_pool(&self) -> Tensor {
        let x = as3(&self.value_ref());
        let (c, h, w) = x.dim();
        let n = (h * w) as f32;
        let mut out = Array1::<f32>::zeros(c);
        for ch in 0..c {
            out[ch] = x.index_axis(Axis(0), ch).sum() / n;
        }
        op_node(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |g, _v, parents| {
                let g1: Array1<f32> = g.clone().into_dimensionality().unwrap();
                let shape = parents[0].value_ref().raw_dim();
                let mut gx = ArrayD::<f32>::zeros(shape);
                let (h, w) = (shape_dim(&gx, 1), shape_dim(&gx, 2));
                let scale = 1.0 / (h * w) as f32;
                for ch in 0..g1.len() {
                    for y in 0..h {
                        for xp in 0..w {
                            gx[[ch, y, xp]] = g1[ch] * scale;
                        }
                    }
                }
                parents[0].accum_grad(gx);
            }),
        )
    }
}

fn shape_dim(a: &ArrayD<f32>, i: usize) -> usize {
    a.shape()[i]
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
