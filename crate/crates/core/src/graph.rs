//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every differentiable op pushes one node onto the graph: the computed
//! value, the parent node ids, and a backward closure. [`Graph::backward`]
//! walks the tape once in reverse execution order, propagating the
//! vector-Jacobian product to each parent.
//!
//! Broadcast contract for elementwise binary ops (add/sub/mul):
//!   * identical shapes, or
//!   * one operand is a scalar (shape `[1]`), or
//!   * a `[T, D]` matrix with a `[D]` vector, applied row-wise.
//! The gradient of a broadcast operand is reduced by summation over the
//! broadcast positions. Anything else is a hard shape error naming the op
//! and both shapes.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{Dtype, Tensor};

type BackFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    back: Option<BackFn>,
}

struct GraphInner {
    nodes: Vec<Node>,
    grad_enabled: bool,
    dtype: Dtype,
}

/// Shared handle to one computation tape. Cheap to clone; single-threaded.
#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

/// A tensor recorded on a graph.
#[derive(Clone)]
pub struct Tx {
    g: Graph,
    pub id: usize,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> ! {
    panic!("shape mismatch in {op}: {a:?} vs {b:?}");
}

/// How two operand shapes combine elementwise.
enum Bcast {
    Same,
    ScalarRight,
    ScalarLeft,
    RowRight,  // left [T,D], right [D]
    RowLeft,   // left [D], right [T,D]
}

fn bcast(op: &str, a: &[usize], b: &[usize]) -> Bcast {
    if a == b {
        Bcast::Same
    } else if b == [1] {
        Bcast::ScalarRight
    } else if a == [1] {
        Bcast::ScalarLeft
    } else if a.len() == 2 && b.len() == 1 && a[1] == b[0] {
        Bcast::RowRight
    } else if b.len() == 2 && a.len() == 1 && b[1] == a[0] {
        Bcast::RowLeft
    } else {
        shape_err(op, a, b)
    }
}

/// Sum a full-shape gradient back down to a broadcast operand's shape.
fn reduce_to(grad: &Tensor, shape: &[usize], dtype: Dtype) -> Tensor {
    if grad.shape == shape {
        return grad.clone();
    }
    if shape == [1] {
        return Tensor::scalar(grad.data.iter().sum(), dtype);
    }
    // [T,D] -> [D]
    let d = shape[0];
    let mut out = vec![0.0; d];
    for (i, v) in grad.data.iter().enumerate() {
        out[i % d] += v;
    }
    Tensor::new(vec![d], out, dtype)
}

impl Graph {
    pub fn new(dtype: Dtype) -> Graph {
        Graph {
            inner: Rc::new(RefCell::new(GraphInner {
                nodes: Vec::new(),
                grad_enabled: true,
                dtype,
            })),
        }
    }

    /// A graph that records values only; `backward` on it is a bug.
    pub fn inference(dtype: Dtype) -> Graph {
        let g = Graph::new(dtype);
        g.inner.borrow_mut().grad_enabled = false;
        g
    }

    pub fn dtype(&self) -> Dtype {
        self.inner.borrow().dtype
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Handle for an already-recorded node.
    pub fn tx(&self, id: usize) -> Tx {
        assert!(id < self.len());
        Tx { g: self.clone(), id }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, back: Option<BackFn>) -> Tx {
        let mut inner = self.inner.borrow_mut();
        let back = if inner.grad_enabled { back } else { None };
        let parents = if inner.grad_enabled { parents } else { Vec::new() };
        inner.nodes.push(Node { value, parents, back });
        Tx { g: self.clone(), id: inner.nodes.len() - 1 }
    }

    /// Record a custom differentiable op with one parent. The backward
    /// closure receives (grad_out, parent values, output value) and
    /// returns the parent gradient. Used for ops whose gradient is
    /// cheaper computed analytically than composed from primitives (CTC).
    pub fn custom_unary<F>(&self, parent: &Tx, value: Tensor, back: F) -> Tx
    where
        F: Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor> + 'static,
    {
        let value = value.to_dtype(self.dtype());
        self.push(value, vec![parent.id], Some(Box::new(back)))
    }

    /// Leaf with gradient flow (parameters, differentiable inputs).
    pub fn leaf(&self, t: Tensor) -> Tx {
        let t = t.to_dtype(self.dtype());
        self.push(t, vec![], None)
    }

    /// Constant: identical to `leaf` on this tape (leaves have no backward
    /// fn either way); kept separate for readability at call sites.
    pub fn constant(&self, t: Tensor) -> Tx {
        self.leaf(t)
    }

    pub fn scalar(&self, v: f64) -> Tx {
        self.leaf(Tensor::scalar(v, self.dtype()))
    }

    /// Gradients of a scalar loss with respect to every node, by reverse
    /// traversal. Returns one slot per node id; `None` where the loss does
    /// not depend on the node.
    pub fn backward(&self, loss: &Tx) -> Vec<Option<Tensor>> {
        let inner = self.inner.borrow();
        assert!(inner.grad_enabled, "backward on an inference graph");
        assert!(!inner.nodes.is_empty(), "backward on an empty tape");
        let loss_val = &inner.nodes[loss.id].value;
        assert_eq!(loss_val.numel(), 1, "backward requires a scalar loss, got shape {:?}", loss_val.shape);
        let dtype = inner.dtype;
        let mut grads: Vec<Option<Tensor>> = vec![None; inner.nodes.len()];
        grads[loss.id] = Some(Tensor::scalar(1.0, dtype));
        for id in (0..=loss.id).rev() {
            let Some(gout) = grads[id].clone() else { continue };
            let node = &inner.nodes[id];
            let Some(back) = &node.back else { continue };
            let pvals: Vec<&Tensor> = node.parents.iter().map(|&p| &inner.nodes[p].value).collect();
            let pgrads = back(&gout, &pvals, &node.value);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                match &mut grads[p] {
                    Some(acc) => {
                        assert_eq!(acc.shape, pg.shape);
                        for (a, b) in acc.data.iter_mut().zip(&pg.data) {
                            *a = dtype.quantize(*a + b);
                        }
                    }
                    slot => *slot = Some(pg),
                }
            }
        }
        grads
    }
}

impl Tx {
    pub fn graph(&self) -> &Graph {
        &self.g
    }

    pub fn value(&self) -> Tensor {
        self.g.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.g.inner.borrow().nodes[self.id].value.shape.clone()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tx {
        let v = self.value();
        let dtype = self.g.dtype();
        let out = Tensor::new(v.shape.clone(), v.data.iter().map(|&x| f(x)).collect(), dtype);
        self.g.push(
            out,
            vec![self.id],
            Some(Box::new(move |gout, pv, ov| {
                let x = pv[0];
                let data = gout
                    .data
                    .iter()
                    .zip(x.data.iter().zip(&ov.data))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect();
                vec![Tensor::new(x.shape.clone(), data, gout.dtype)]
            })),
        )
    }

    fn binary(&self, rhs: &Tx, op: &'static str, f: fn(f64, f64) -> f64) -> Tx {
        let a = self.value();
        let b = rhs.value();
        let dtype = self.g.dtype();
        let mode = bcast(op, &a.shape, &b.shape);
        let (shape, data): (Vec<usize>, Vec<f64>) = match mode {
            Bcast::Same => (a.shape.clone(), a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()),
            Bcast::ScalarRight => (a.shape.clone(), a.data.iter().map(|&x| f(x, b.data[0])).collect()),
            Bcast::ScalarLeft => (b.shape.clone(), b.data.iter().map(|&y| f(a.data[0], y)).collect()),
            Bcast::RowRight => {
                let d = b.shape[0];
                (a.shape.clone(), a.data.iter().enumerate().map(|(i, &x)| f(x, b.data[i % d])).collect())
            }
            Bcast::RowLeft => {
                let d = a.shape[0];
                (b.shape.clone(), b.data.iter().enumerate().map(|(i, &y)| f(a.data[i % d], y)).collect())
            }
        };
        let out = Tensor::new(shape, data, dtype);
        let back: BackFn = match op {
            "add" => Box::new(move |gout, pv, _| {
                vec![
                    reduce_to(gout, &pv[0].shape, gout.dtype),
                    reduce_to(gout, &pv[1].shape, gout.dtype),
                ]
            }),
            "sub" => Box::new(move |gout, pv, _| {
                let neg = Tensor::new(gout.shape.clone(), gout.data.iter().map(|x| -x).collect(), gout.dtype);
                vec![
                    reduce_to(gout, &pv[0].shape, gout.dtype),
                    reduce_to(&neg, &pv[1].shape, gout.dtype),
                ]
            }),
            "mul" => Box::new(move |gout, pv, _| {
                let (a, b) = (pv[0], pv[1]);
                let expand = |t: &Tensor, i: usize| -> f64 {
                    match t.numel() {
                        1 => t.data[0],
                        n if n == gout.numel() => t.data[i],
                        _ => t.data[i % t.shape[0]], // row vector
                    }
                };
                let ga_full = Tensor::new(
                    gout.shape.clone(),
                    gout.data.iter().enumerate().map(|(i, &g)| g * expand(b, i)).collect(),
                    gout.dtype,
                );
                let gb_full = Tensor::new(
                    gout.shape.clone(),
                    gout.data.iter().enumerate().map(|(i, &g)| g * expand(a, i)).collect(),
                    gout.dtype,
                );
                vec![reduce_to(&ga_full, &a.shape, gout.dtype), reduce_to(&gb_full, &b.shape, gout.dtype)]
            }),
            _ => unreachable!(),
        };
        self.g.push(out, vec![self.id, rhs.id], Some(back))
    }

    pub fn add(&self, rhs: &Tx) -> Tx {
        self.binary(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tx) -> Tx {
        self.binary(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tx) -> Tx {
        self.binary(rhs, "mul", |a, b| a * b)
    }

    pub fn neg(&self) -> Tx {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Tx {
        self.unary(move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tx {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn exp(&self) -> Tx {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn log(&self) -> Tx {
        self.unary(|x| x.ln(), |x, _| 1.0 / x)
    }

    pub fn tanh(&self) -> Tx {
        self.unary(|x| x.tanh(), |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Tx {
        self.unary(|x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn relu(&self) -> Tx {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// x * sigmoid(x) (swish); the conformer's gated activation pairs this
    /// with a GLU built from `slice_cols` + `sigmoid` + `mul`.
    pub fn silu(&self) -> Tx {
        self.unary(
            |x| x / (1.0 + (-x).exp()),
            |x, _| {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    pub fn square(&self) -> Tx {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn matmul(&self, rhs: &Tx) -> Tx {
        let a = self.value();
        let b = rhs.value();
        if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
            shape_err("matmul", &a.shape, &b.shape);
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let dtype = self.g.dtype();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let out = Tensor::new(vec![m, n], out, dtype);
        self.g.push(
            out,
            vec![self.id, rhs.id],
            Some(Box::new(move |gout, pv, _| {
                let (a, b) = (pv[0], pv[1]);
                let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
                // ga = gout . b^T
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += gout.data[i * n + j] * b.data[p * n + j];
                        }
                        ga[i * k + p] = s;
                    }
                }
                // gb = a^T . gout
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = a.data[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            gb[p * n + j] += av * gout.data[i * n + j];
                        }
                    }
                }
                vec![
                    Tensor::new(vec![m, k], ga, gout.dtype),
                    Tensor::new(vec![k, n], gb, gout.dtype),
                ]
            })),
        )
    }

    pub fn transpose(&self) -> Tx {
        let a = self.value();
        assert_eq!(a.rank(), 2, "transpose expects rank 2, got {:?}", a.shape);
        let (m, n) = (a.shape[0], a.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a.data[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], out, self.g.dtype());
        self.g.push(
            out,
            vec![self.id],
            Some(Box::new(move |gout, pv, _| {
                let (m, n) = (pv[0].shape[0], pv[0].shape[1]);
                let mut g = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        g[j * n + i] = gout.data[i * m + j];
                    }
                }
                vec![Tensor::new(vec![m, n], g, gout.dtype)]
            })),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Tx {
        let a = self.value();
        let d = a.cols();
        let rows = a.numel() / d.max(1);
        let dtype = self.g.dtype();
        let mut out = a.data.clone();
        for r in 0..rows {
            softmax_row(&mut out[r * d..(r + 1) * d]);
        }
        let out = Tensor::new(a.shape.clone(), out, dtype);
        self.g.push(
            out,
            vec![self.id],
            Some(Box::new(move |gout, pv, ov| {
                let d = pv[0].cols();
                let rows = pv[0].numel() / d.max(1);
                let mut g = vec![0.0; pv[0].numel()];
                for r in 0..rows {
                    let y = &ov.data[r * d..(r + 1) * d];
                    let go = &gout.data[r * d..(r + 1) * d];
                    let dot: f64 = y.iter().zip(go).map(|(&y, &g)| y * g).sum();
                    for j in 0..d {
                        g[r * d + j] = y[j] * (go[j] - dot);
                    }
                }
                vec![Tensor::new(pv[0].shape.clone(), g, gout.dtype)]
            })),
        )
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Tx {
        let a = self.value();
        let d = a.cols();
        let rows = a.numel() / d.max(1);
        let dtype = self.g.dtype();
        let mut out = a.data.clone();
        for r in 0..rows {
            log_softmax_row(&mut out[r * d..(r + 1) * d]);
        }
        let out = Tensor::new(a.shape.clone(), out, dtype);
        self.g.push(
            out,
            vec![self.id],
            Some(Box::new(move |gout, pv, ov| {
                let d = pv[0].cols();
                let rows = pv[0].numel() / d.max(1);
                let mut g = vec![0.0; pv[0].numel()];
                for r in 0..rows {
                    let ly = &ov.data[r * d..(r + 1) * d];
                    let go = &gout.data[r * d..(r + 1) * d];
                    let gsum: f64 = go.iter().sum();
                    for j in 0..d {
                        g[r * d + j] = go[j] - ly[j].exp() * gsum;
                    }
                }
                vec![Tensor::new(pv[0].shape.clone(), g, gout.dtype)]
            })),
        )
    }

    /// Layer normalization over the last axis, no affine terms. A constant
    /// row normalizes to the zero vector (variance floored by `eps`).
    pub fn layer_norm(&self, eps: f64) -> Tx {
        let a = self.value();
        let d = a.cols();
        let rows = a.numel() / d.max(1);
        let dtype = self.g.dtype();
        let mut out = vec![0.0; a.numel()];
        for r in 0..rows {
            let x = &a.data[r * d..(r + 1) * d];
            let mean: f64 = x.iter().sum::<f64>() / d as f64;
            let var: f64 = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (x[j] - mean) * inv;
            }
        }
        let out = Tensor::new(a.shape.clone(), out, dtype);
        self.g.push(
            out,
            vec![self.id],
            Some(Box::new(move |gout, pv, _| {
                let a = pv[0];
                let d = a.cols();
                let rows = a.numel() / d.max(1);
                let mut g = vec![0.0; a.numel()];
                for r in 0..rows {
                    let x = &a.data[r * d..(r + 1) * d];
                    let go = &gout.data[r * d..(r + 1) * d];
                    let n = d as f64;
                    let mean: f64 = x.iter().sum::<f64>() / n;
                    let var: f64 = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xc: Vec<f64> = x.iter().map(|&v| v - mean).collect();
                    let gsum: f64 = go.iter().sum();
                    let gdot: f64 = go.iter().zip(&xc).map(|(&g, &c)| g * c).sum();
                    for j in 0..d {
                        g[r * d + j] = inv * (go[j] - gsum / n - xc[j] * gdot * inv * inv / n);
                    }
                }
                vec![Tensor::new(a.shape.clone(), g, gout.dtype)]
            })),
        )
    }

    /// 1-D depthwise convolution over a `[T, D]` sequence with a `[K, D]`
    /// kernel, zero "same" padding, odd K.
    pub fn depthwise_conv1d(&self, kernel: &Tx) -> Tx {
        let x = self.value();
        let w = kernel.value();
        if x.rank() != 2 || w.rank() != 2 || x.shape[1] != w.shape[1] || w.shape[0] % 2 == 0 {
            shape_err("depthwise_conv1d", &x.shape, &w.shape);
        }
        let (t, d, k) = (x.shape[0], x.shape[1], w.shape[0]);
        let half = k / 2;
        let dtype = self.g.dtype();
        let mut out = vec![0.0; t * d];
        for i in 0..t {
            for q in 0..k {
                let src = i as isize + q as isize - half as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let src = src as usize;
                for j in 0..d {
                    out[i * d + j] += x.data[src * d + j] * w.data[q * d + j];
                }
            }
        }
        let out = Tensor::new(vec![t, d], out, dtype);
        self.g.push(
            out,
            vec![self.id, kernel.id],
            Some(Box::new(move |gout, pv, _| {
                let (x, w) = (pv[0], pv[1]);
                let (t, d, k) = (x.shape[0], x.shape[1], w.shape[0]);
                let half = k / 2;
                let mut gx = vec![0.0; t * d];
                let mut gw = vec![0.0; k * d];
                for i in 0..t {
                    for q in 0..k {
                        let src = i as isize + q as isize - half as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let src = src as usize;
                        for j in 0..d {
                            let g = gout.data[i * d + j];
                            gx[src * d + j] += g * w.data[q * d + j];
                            gw[q * d + j] += g * x.data[src * d + j];
                        }
                    }
                }
                vec![
                    Tensor::new(vec![t, d], gx, gout.dtype),
                    Tensor::new(vec![k, d], gw, gout.dtype),
                ]
            })),
        )
    }

    /// Row gather: out[i] = self[idx[i]]. Backward scatter-adds.
    pub fn gather_rows(&self, idx: &[usize]) -> Tx {
        let a = self.value();
        assert_eq!(a.rank(), 2, "gather_rows expects rank 2, got {:?}", a.shape);
        let d = a.shape[1];
        for &i in idx {
            assert!(i < a.shape[0], "gather_rows index {} out of range for {:?}", i, a.shape);
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(a.row(i));
        }
        let out = Tensor::new(vec![idx.len(), d], out, self.g.dtype());
        let idx = idx.to_vec();
        self.g.push(
            out,
            vec![self.id],
            Some(Box::new(move |gout, pv, _| {
                let (t, d) = (pv[0].shape[0], pv[0].shape[1]);
                let mut g = vec![0.0; t * d];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        g[i * d + j] += gout.data[r * d + j];
                    }
                }
                vec![Tensor::new(vec![t, d], g, gout.dtype)]
            })),
        )
    }

    /// Column slice of a `[T, D]` matrix: columns `[start, start+len)`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Tx {
        let a = self.value();
        assert_eq!(a.rank(), 2, "slice_cols expects rank 2, got {:?}", a.shape);
        let (t, d) = (a.shape[0], a.shape[1]);
        assert!(start + len <= d, "slice_cols [{start}, {}) out of {d} columns", start + len);
        let mut out = Vec::with_capacity(t * len);
        for i in 0..t {
            out.extend_from_slice(&a.data[i * d + start..i * d + start + len]);
        }
        let out = Tensor::new(vec![t, len], out, self.g.dtype());
        self.g.push(
            out,
            vec![self.id],
            Some(Box::new(move |gout, pv, _| {
                let (t, d) = (pv[0].shape[0], pv[0].shape[1]);
                let mut g = vec![0.0; t * d];
                for i in 0..t {
                    for j in 0..len {
                        g[i * d + start + j] = gout.data[i * len + j];
                    }
                }
                vec![Tensor::new(vec![t, d], g, gout.dtype)]
            })),
        )
    }

    /// Concatenate `[T, D_i]` matrices along columns.
    pub fn concat_cols(parts: &[Tx]) -> Tx {
        assert!(!parts.is_empty());
        let g = parts[0].g.clone();
        let vals: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let t = vals[0].shape[0];
        for v in &vals {
            if v.rank() != 2 || v.shape[0] != t {
                shape_err("concat_cols", &vals[0].shape, &v.shape);
            }
        }
        let widths: Vec<usize> = vals.iter().map(|v| v.shape[1]).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(t * total);
        for i in 0..t {
            for v in &vals {
                out.extend_from_slice(v.row(i));
            }
        }
        let out = Tensor::new(vec![t, total], out, g.dtype());
        let w2 = widths.clone();
        g.clone().push(
            out,
            parts.iter().map(|p| p.id).collect(),
            Some(Box::new(move |gout, pv, _| {
                let t = pv[0].shape[0];
                let total: usize = w2.iter().sum();
                let mut grads = Vec::with_capacity(w2.len());
                let mut off = 0;
                for &w in &w2 {
                    let mut g = Vec::with_capacity(t * w);
                    for i in 0..t {
                        g.extend_from_slice(&gout.data[i * total + off..i * total + off + w]);
                    }
                    grads.push(Tensor::new(vec![t, w], g, gout.dtype));
                    off += w;
                }
                grads
            })),
        )
    }

    /// Concatenate `[T_i, D]` matrices along rows.
    pub fn concat_rows(parts: &[Tx]) -> Tx {
        assert!(!parts.is_empty());
        let g = parts[0].g.clone();
        let vals: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let d = vals[0].shape[1];
        for v in &vals {
            if v.rank() != 2 || v.shape[1] != d {
                shape_err("concat_rows", &vals[0].shape, &v.shape);
            }
        }
        let heights: Vec<usize> = vals.iter().map(|v| v.shape[0]).collect();
        let total: usize = heights.iter().sum();
        let mut out = Vec::with_capacity(total * d);
        for v in &vals {
            out.extend_from_slice(&v.data);
        }
        let out = Tensor::new(vec![total, d], out, g.dtype());
        let h2 = heights.clone();
        g.clone().push(
            out,
            parts.iter().map(|p| p.id).collect(),
            Some(Box::new(move |gout, pv, _| {
                let d = pv[0].shape[1];
                let mut grads = Vec::with_capacity(h2.len());
                let mut off = 0;
                for &h in &h2 {
                    grads.push(Tensor::new(
                        vec![h, d],
                        gout.data[off * d..(off + h) * d].to_vec(),
                        gout.dtype,
                    ));
                    off += h;
                }
                grads
            })),
        )
    }

    pub fn sum(&self) -> Tx {
        let a = self.value();
        let out = Tensor::scalar(a.data.iter().sum(), self.g.dtype());
        self.g.push(
            out,
            vec![self.id],
            Some(Box::new(move |gout, pv, _| {
                vec![Tensor::full(pv[0].shape.clone(), gout.data[0], gout.dtype)]
            })),
        )
    }

    pub fn mean(&self) -> Tx {
        let n = self.value().numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Replace elements where `mask != 0` with a constant. Gradient is
    /// zeroed at masked positions.
    pub fn masked_fill(&self, mask: &Tensor, value: f64) -> Tx {
        let a = self.value();
        if a.shape != mask.shape {
            shape_err("masked_fill", &a.shape, &mask.shape);
        }
        let dtype = self.g.dtype();
        let data = a
            .data
            .iter()
            .zip(&mask.data)
            .map(|(&x, &m)| if m != 0.0 { value } else { x })
            .collect();
        let out = Tensor::new(a.shape.clone(), data, dtype);
        let mask = mask.clone();
        self.g.push(
            out,
            vec![self.id],
            Some(Box::new(move |gout, pv, _| {
                let data = gout
                    .data
                    .iter()
                    .zip(&mask.data)
                    .map(|(&g, &m)| if m != 0.0 { 0.0 } else { g })
                    .collect();
                vec![Tensor::new(pv[0].shape.clone(), data, gout.dtype)]
            })),
        )
    }

    /// Rotary position embedding over a `[T, d]` per-head block: pair
    /// (2i, 2i+1) of row m rotates by angle (start_pos + m) * base^(-2i/d).
    /// d must be even. Backward applies the inverse rotation.
    pub fn rotary(&self, base: f64, start_pos: usize) -> Tx {
        let a = self.value();
        if a.rank() != 2 || a.shape[1] % 2 != 0 {
            panic!("rotary expects [T, even d], got {:?}", a.shape);
        }
        let (t, d) = (a.shape[0], a.shape[1]);
        let dtype = self.g.dtype();
        let angles = rotary_angles(base, d);
        let mut out = vec![0.0; t * d];
        for m in 0..t {
            let pos = (start_pos + m) as f64;
            for i in 0..d / 2 {
                let (s, c) = (pos * angles[i]).sin_cos();
                let x0 = a.data[m * d + 2 * i];
                let x1 = a.data[m * d + 2 * i + 1];
                out[m * d + 2 * i] = c * x0 - s * x1;
                out[m * d + 2 * i + 1] = s * x0 + c * x1;
            }
        }
        let out = Tensor::new(vec![t, d], out, dtype);
        self.g.push(
            out,
            vec![self.id],
            Some(Box::new(move |gout, pv, _| {
                let (t, d) = (pv[0].shape[0], pv[0].shape[1]);
                let angles = rotary_angles(base, d);
                let mut g = vec![0.0; t * d];
                for m in 0..t {
                    let pos = (start_pos + m) as f64;
                    for i in 0..d / 2 {
                        let (s, c) = (pos * angles[i]).sin_cos();
                        let g0 = gout.data[m * d + 2 * i];
                        let g1 = gout.data[m * d + 2 * i + 1];
                        g[m * d + 2 * i] = c * g0 + s * g1;
                        g[m * d + 2 * i + 1] = -s * g0 + c * g1;
                    }
                }
                vec![Tensor::new(vec![t, d], g, gout.dtype)]
            })),
        )
    }
}

pub fn rotary_angles(base: f64, head_dim: usize) -> Vec<f64> {
    (0..head_dim / 2)
        .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
        .collect()
}

pub fn softmax_row(row: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

pub fn log_softmax_row(row: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
    let lz = m + z.ln();
    for x in row.iter_mut() {
        *x -= lz;
    }
}

pub fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g64() -> Graph {
        Graph::new(Dtype::F64)
    }

    #[test]
    fn matmul_1x1() {
        let g = g64();
        let a = g.leaf(Tensor::new(vec![1, 1], vec![2.0], Dtype::F64));
        let b = g.leaf(Tensor::new(vec![1, 1], vec![3.0], Dtype::F64));
        assert_eq!(a.matmul(&b).value().data, vec![6.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let g = g64();
        let x = g.leaf(Tensor::new(vec![2], vec![0.0, 0.0], Dtype::F64));
        assert_eq!(x.softmax().value().data, vec![0.5, 0.5]);
    }

    #[test]
    fn layernorm_constant_vector_is_zero() {
        let g = g64();
        let x = g.leaf(Tensor::new(vec![4], vec![3.0; 4], Dtype::F64));
        let y = x.layer_norm(1e-6).value();
        for v in y.data {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn backward_square() {
        let g = g64();
        let x = g.leaf(Tensor::scalar(3.0, Dtype::F64));
        let loss = x.square();
        let grads = g.backward(&loss);
        assert_eq!(grads[x.id].as_ref().unwrap().data, vec![6.0]);
    }

    #[test]
    fn backward_log_softmax_pick() {
        let g = g64();
        let x = g.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0], Dtype::F64));
        let ls = x.log_softmax();
        let loss = ls.slice_cols(0, 1).sum();
        let grads = g.backward(&loss);
        let gx = grads[x.id].as_ref().unwrap();
        assert!((gx.data[0] - 0.5).abs() < 1e-12);
        assert!((gx.data[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn unreachable_leaf_has_no_grad() {
        let g = g64();
        let x = g.leaf(Tensor::scalar(3.0, Dtype::F64));
        let p = g.leaf(Tensor::scalar(5.0, Dtype::F64));
        let loss = x.square();
        let grads = g.backward(&loss);
        assert!(grads[p.id].is_none());
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn non_scalar_loss_is_an_error() {
        let g = g64();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0], Dtype::F64));
        let y = x.square();
        g.backward(&y);
    }

    #[test]
    #[should_panic(expected = "shape mismatch in add")]
    fn add_shape_mismatch_names_op() {
        let g = g64();
        let a = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0], Dtype::F64));
        let b = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0], Dtype::F64));
        a.add(&b);
    }

    #[test]
    fn rotary_position_zero_is_identity() {
        let g = g64();
        let x = g.leaf(Tensor::new(vec![1, 4], vec![0.3, -1.2, 2.0, 0.5], Dtype::F64));
        let y = x.rotary(10000.0, 0).value();
        assert_eq!(y.data, vec![0.3, -1.2, 2.0, 0.5]);
    }

    #[test]
    fn rotary_2d_rotation_formula() {
        let g = g64();
        let m = 3usize;
        let x = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 0.0], Dtype::F64));
        let y = x.rotary(10000.0, m).value();
        assert!((y.data[0] - (m as f64).cos()).abs() < 1e-12);
        assert!((y.data[1] - (m as f64).sin()).abs() < 1e-12);
    }

    #[test]
    fn rotary_preserves_pair_norms() {
        let g = g64();
        let x = g.leaf(Tensor::new(vec![2, 4], vec![0.3, -1.2, 2.0, 0.5, 1.0, 1.0, -0.5, 0.25], Dtype::F64));
        let y = x.rotary(10000.0, 7).value();
        let v = x.value();
        for r in 0..2 {
            for i in 0..2 {
                let n0 = v.data[r * 4 + 2 * i].hypot(v.data[r * 4 + 2 * i + 1]);
                let n1 = y.data[r * 4 + 2 * i].hypot(y.data[r * 4 + 2 * i + 1]);
                assert!((n0 - n1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_sequence_flows_through_ops() {
        let g = g64();
        let x = g.leaf(Tensor::zeros(vec![0, 4], Dtype::F64));
        let w = g.leaf(Tensor::zeros(vec![4, 4], Dtype::F64));
        let y = x.matmul(&w).layer_norm(1e-6).softmax();
        assert_eq!(y.shape(), vec![0, 4]);
    }
}
