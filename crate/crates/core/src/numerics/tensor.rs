//! Reverse-mode automatic differentiation over dense 64-bit arrays.
//!
//! Every operation eagerly computes its value and, when any input requires a
//! gradient, records a closure mapping the output gradient to input gradients.
//! [`Tensor::backward`] walks the recorded graph in reverse topological order.
//! Gradients are stored only on leaves created with [`Tensor::param`];
//! intermediate gradients live for the duration of one backward pass.
//!
//! GELU uses the exact erf form, `x * Phi(x)`, everywhere.

// Backward kernels index several row buffers with the same counter.
#![allow(clippy::needless_range_loop)]

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use statrs::function::erf::erf;

use super::Array;
use crate::error::{Error, Result};

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// A node in the computation graph. Cloning is cheap and shares the node.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const LAYER_NORM_EPS: f64 = 1e-12;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn leaf(shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Self {
        assert_eq!(
            numel(&shape),
            value.len(),
            "shape {shape:?} does not hold {} values",
            value.len()
        );
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
        Tensor(Rc::new(Node {
            shape,
            value,
            requires_grad,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// A value that never receives a gradient.
    pub fn constant(shape: Vec<usize>, value: Vec<f64>) -> Self {
        Self::leaf(shape, value, false)
    }

    pub fn constant_from(array: &Array) -> Self {
        Self::constant(array.shape().to_vec(), array.data().to_vec())
    }

    /// A trainable leaf.
    pub fn param(array: &Array) -> Self {
        Self::leaf(array.shape().to_vec(), array.data().to_vec(), true)
    }

    pub fn scalar(value: f64) -> Self {
        Self::constant(vec![], vec![value])
    }

    pub fn row(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::constant(vec![1, n], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        Self::constant(vec![rows, cols], values)
    }

    fn from_op(shape: Vec<usize>, value: Vec<f64>, parents: Vec<Tensor>, backward: BackwardFn) -> Self {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let (parents, backward) = if requires_grad {
            (parents, Some(backward))
        } else {
            (Vec::new(), None)
        };
        Tensor(Rc::new(Node {
            shape,
            value,
            requires_grad,
            grad: RefCell::new(None),
            parents,
            backward,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.0.value
    }

    pub fn numel(&self) -> usize {
        self.0.value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on shape {:?}", self.shape());
        self.0.value[0]
    }

    pub fn to_array(&self) -> Array {
        let shape = if self.shape().is_empty() {
            vec![1]
        } else {
            self.shape().to_vec()
        };
        Array::new(shape, self.values().to_vec()).expect("tensor shape is valid")
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.shape().to_vec(), self.values().to_vec())
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    fn dims2(&self) -> (usize, usize) {
        match self.shape() {
            [r, c] => (*r, *c),
            s => panic!("expected a rank-2 tensor, got shape {s:?}"),
        }
    }

    /// Row `r` of a rank-2 tensor as plain values.
    pub fn row_values(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values()[r * c..(r + 1) * c]
    }

    /// Accumulates d(self)/d(leaf) into every reachable trainable leaf.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarRoot(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<*const Node, Vec<f64>> = HashMap::new();
        pending.insert(Rc::as_ptr(&self.0), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&Rc::as_ptr(&node.0)) else {
                continue;
            };
            match &node.0.backward {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(f) => {
                    let parent_grads = f(&g);
                    for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel());
                        pending
                            .entry(Rc::as_ptr(&parent.0))
                            .and_modify(|acc| acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b))
                            .or_insert(pg);
                    }
                }
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // (node, children expanded)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&t.0);
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(key) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in &t.0.parents {
                if p.requires_grad() && !visited.contains(&Rc::as_ptr(&p.0)) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    fn map_unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
        let value: Vec<f64> = self.values().iter().map(|&x| f(x)).collect();
        let x = self.clone();
        let y = value.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            value,
            vec![self.clone()],
            Box::new(move |g| {
                vec![g
                    .iter()
                    .zip(x.values())
                    .zip(&y)
                    .map(|((g, &x), &y)| g * df(x, y))
                    .collect()]
            }),
        )
    }

    fn assert_same_shape(&self, other: &Tensor, op: &str) {
        assert_eq!(
            self.shape(),
            other.shape(),
            "{op}: shape {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
    }

    // ---- elementwise ----

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "add");
        let value = self.values().iter().zip(other.values()).map(|(a, b)| a + b).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![g.to_vec(), g.to_vec()]),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "sub");
        let value = self.values().iter().zip(other.values()).map(|(a, b)| a - b).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![g.to_vec(), g.iter().map(|x| -x).collect()]),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "mul");
        let value = self.values().iter().zip(other.values()).map(|(a, b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            self.shape().to_vec(),
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                vec![
                    g.iter().zip(b.values()).map(|(g, b)| g * b).collect(),
                    g.iter().zip(a.values()).map(|(g, a)| g * a).collect(),
                ]
            }),
        )
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        self.assert_same_shape(other, "div");
        let value = self.values().iter().zip(other.values()).map(|(a, b)| a / b).collect();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            self.shape().to_vec(),
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                vec![
                    g.iter().zip(b.values()).map(|(g, b)| g / b).collect(),
                    g.iter()
                        .zip(a.values().iter().zip(b.values()))
                        .map(|(g, (a, b))| -g * a / (b * b))
                        .collect(),
                ]
            }),
        )
    }

    /// Multiplies by a constant.
    pub fn scale(&self, c: f64) -> Tensor {
        let value = self.values().iter().map(|x| x * c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            value,
            vec![self.clone()],
            Box::new(move |g| vec![g.iter().map(|g| g * c).collect()]),
        )
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    pub fn exp(&self) -> Tensor {
        self.map_unary(f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Tensor {
        self.map_unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.map_unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn gelu(&self) -> Tensor {
        self.map_unary(gelu_scalar, |x, _| gelu_grad_scalar(x))
    }

    // ---- reductions ----

    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        let value = vec![self.values().iter().sum()];
        Tensor::from_op(vec![], value, vec![self.clone()], Box::new(move |g| vec![vec![g[0]; n]]))
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let value = vec![self.values().iter().sum::<f64>() / n as f64];
        Tensor::from_op(
            vec![],
            value,
            vec![self.clone()],
            Box::new(move |g| vec![vec![g[0] / n as f64; n]]),
        )
    }

    /// Column-wise mean over rows: `R x C -> 1 x C`.
    pub fn mean_rows(&self) -> Tensor {
        let (r, c) = self.dims2();
        let mut value = vec![0.0; c];
        for i in 0..r {
            for (v, x) in value.iter_mut().zip(self.row_values(i)) {
                *v += x;
            }
        }
        value.iter_mut().for_each(|v| *v /= r as f64);
        Tensor::from_op(
            vec![1, c],
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let mut out = Vec::with_capacity(r * c);
                for _ in 0..r {
                    out.extend(g.iter().map(|g| g / r as f64));
                }
                vec![out]
            }),
        )
    }

    /// Column-wise maximum over rows: `R x C -> 1 x C`. The gradient flows to
    /// the first row attaining each maximum.
    pub fn max_rows(&self) -> Tensor {
        let (argmax, _) = self.max_rows_with_argmax();
        let (r, c) = self.dims2();
        let value: Vec<f64> = (0..c).map(|j| self.values()[argmax[j] * c + j]).collect();
        Tensor::from_op(
            vec![1, c],
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let mut out = vec![0.0; r * c];
                for j in 0..c {
                    out[argmax[j] * c + j] = g[j];
                }
                vec![out]
            }),
        )
    }

    /// Per-column argmax row index and maximum value.
    pub fn max_rows_with_argmax(&self) -> (Vec<usize>, Vec<f64>) {
        let (r, c) = self.dims2();
        let mut argmax = vec![0usize; c];
        let mut best = self.row_values(0).to_vec();
        for i in 1..r {
            for (j, &x) in self.row_values(i).iter().enumerate() {
                if x > best[j] {
                    best[j] = x;
                    argmax[j] = i;
                }
            }
        }
        (argmax, best)
    }

    /// Euclidean norm of each row: `R x C -> R x 1`.
    pub fn l2_norm_rows(&self) -> Tensor {
        let (r, c) = self.dims2();
        let norms: Vec<f64> = (0..r)
            .map(|i| self.row_values(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let x = self.clone();
        let n = norms.clone();
        Tensor::from_op(
            vec![r, 1],
            norms,
            vec![self.clone()],
            Box::new(move |g| {
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    if n[i] == 0.0 {
                        continue;
                    }
                    for j in 0..c {
                        out[i * c + j] = g[i] * x.values()[i * c + j] / n[i];
                    }
                }
                vec![out]
            }),
        )
    }

    // ---- broadcasting ----

    /// Adds a `1 x C` (or length-C) row to every row.
    pub fn add_row(&self, row: &Tensor) -> Tensor {
        let (r, c) = self.dims2();
        assert_eq!(row.numel(), c, "add_row: {c} columns vs row of {}", row.numel());
        let mut value = self.values().to_vec();
        for i in 0..r {
            for (v, b) in value[i * c..(i + 1) * c].iter_mut().zip(row.values()) {
                *v += b;
            }
        }
        Tensor::from_op(
            self.shape().to_vec(),
            value,
            vec![self.clone(), row.clone()],
            Box::new(move |g| {
                let mut gb = vec![0.0; c];
                for i in 0..r {
                    for (acc, x) in gb.iter_mut().zip(&g[i * c..(i + 1) * c]) {
                        *acc += x;
                    }
                }
                vec![g.to_vec(), gb]
            }),
        )
    }

    /// Divides row `i` by `col[i]`; `col` is `R x 1`.
    pub fn div_col(&self, col: &Tensor) -> Tensor {
        let (r, c) = self.dims2();
        assert_eq!(col.numel(), r, "div_col: {r} rows vs column of {}", col.numel());
        let mut value = self.values().to_vec();
        for i in 0..r {
            let d = col.values()[i];
            value[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= d);
        }
        let (x, d) = (self.clone(), col.clone());
        Tensor::from_op(
            self.shape().to_vec(),
            value,
            vec![self.clone(), col.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; r * c];
                let mut gd = vec![0.0; r];
                for i in 0..r {
                    let di = d.values()[i];
                    for j in 0..c {
                        let k = i * c + j;
                        gx[k] = g[k] / di;
                        gd[i] -= g[k] * x.values()[k] / (di * di);
                    }
                }
                vec![gx, gd]
            }),
        )
    }

    // ---- linear algebra & layout ----

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = self.dims2();
        let (k2, n) = other.dims2();
        assert_eq!(k, k2, "matmul: {:?} x {:?}", self.shape(), other.shape());
        let value = matmul_raw(self.values(), other.values(), m, k, n);
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            vec![m, n],
            value,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                // dA = G B^T, dB = A^T G
                let ga = if a.requires_grad() {
                    matmul_raw(g, &transpose_raw(b.values(), k, n), m, n, k)
                } else {
                    vec![0.0; m * k]
                };
                let gb = if b.requires_grad() {
                    matmul_raw(&transpose_raw(a.values(), m, k), g, k, m, n)
                } else {
                    vec![0.0; k * n]
                };
                vec![ga, gb]
            }),
        )
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.dims2();
        Tensor::from_op(
            vec![c, r],
            transpose_raw(self.values(), r, c),
            vec![self.clone()],
            Box::new(move |g| vec![transpose_raw(g, c, r)]),
        )
    }

    pub fn concat_rows(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let c = parts[0].cols();
        assert!(parts.iter().all(|p| p.cols() == c), "concat_rows: column mismatch");
        let sizes: Vec<usize> = parts.iter().map(Tensor::numel).collect();
        let value: Vec<f64> = parts.iter().flat_map(|p| p.values().iter().copied()).collect();
        let rows = value.len() / c;
        Tensor::from_op(
            vec![rows, c],
            value,
            parts.to_vec(),
            Box::new(move |g| {
                let mut off = 0;
                sizes
                    .iter()
                    .map(|&s| {
                        let piece = g[off..off + s].to_vec();
                        off += s;
                        piece
                    })
                    .collect()
            }),
        )
    }

    pub fn concat_cols(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let r = parts[0].rows();
        assert!(parts.iter().all(|p| p.rows() == r), "concat_cols: row mismatch");
        let widths: Vec<usize> = parts.iter().map(Tensor::cols).collect();
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                value.extend_from_slice(p.row_values(i));
            }
        }
        Tensor::from_op(
            vec![r, total],
            value,
            parts.to_vec(),
            Box::new(move |g| {
                let mut out: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(r * w)).collect();
                for i in 0..r {
                    let mut off = i * total;
                    for (o, &w) in out.iter_mut().zip(&widths) {
                        o.extend_from_slice(&g[off..off + w]);
                        off += w;
                    }
                }
                out
            }),
        )
    }

    /// Rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let (r, c) = self.dims2();
        assert!(start < end && end <= r, "slice_rows {start}..{end} of {r}");
        let value = self.values()[start * c..end * c].to_vec();
        Tensor::from_op(
            vec![end - start, c],
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let mut out = vec![0.0; r * c];
                out[start * c..end * c].copy_from_slice(g);
                vec![out]
            }),
        )
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor {
        let (r, c) = self.dims2();
        assert!(start < end && end <= c, "slice_cols {start}..{end} of {c}");
        let w = end - start;
        let mut value = Vec::with_capacity(r * w);
        for i in 0..r {
            value.extend_from_slice(&self.values()[i * c + start..i * c + end]);
        }
        Tensor::from_op(
            vec![r, w],
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    out[i * c + start..i * c + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                vec![out]
            }),
        )
    }

    /// Selects rows by index (repeats allowed); this is also the embedding lookup.
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor {
        let (r, c) = self.dims2();
        assert!(!indices.is_empty(), "gather_rows with no indices");
        let mut value = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            assert!(i < r, "gather_rows index {i} of {r}");
            value.extend_from_slice(self.row_values(i));
        }
        let idx = indices.to_vec();
        Tensor::from_op(
            vec![indices.len(), c],
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let mut out = vec![0.0; r * c];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        out[i * c + j] += g[k * c + j];
                    }
                }
                vec![out]
            }),
        )
    }

    /// Picks individual entries `(row, col)` of a rank-2 tensor into a vector.
    pub fn gather(&self, positions: &[(usize, usize)]) -> Tensor {
        let (r, c) = self.dims2();
        let flat: Vec<usize> = positions
            .iter()
            .map(|&(i, j)| {
                assert!(i < r && j < c, "gather ({i},{j}) of {r}x{c}");
                i * c + j
            })
            .collect();
        let value = flat.iter().map(|&k| self.values()[k]).collect();
        let n = r * c;
        Tensor::from_op(
            vec![flat.len()],
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let mut out = vec![0.0; n];
                for (gk, &k) in g.iter().zip(&flat) {
                    out[k] += gk;
                }
                vec![out]
            }),
        )
    }

    // ---- normalization ----

    /// Row-wise softmax with max subtraction. Rejects non-finite input.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (r, c) = self.dims2();
        if self.values().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("softmax_rows input"));
        }
        let value = softmax_rows_raw(self.values(), r, c);
        let y = value.clone();
        Ok(Tensor::from_op(
            vec![r, c],
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let row = i * c..(i + 1) * c;
                    let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                    for k in row {
                        out[k] = y[k] * (g[k] - dot);
                    }
                }
                vec![out]
            }),
        ))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gain` and `bias` (both length C).
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Tensor {
        let (r, c) = self.dims2();
        assert_eq!(gain.numel(), c);
        assert_eq!(bias.numel(), c);
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = self.row_values(i);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mu) * inv;
            }
        }
        let value: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(k, &xh)| xh * gain.values()[k % c] + bias.values()[k % c])
            .collect();
        let gn = gain.clone();
        Tensor::from_op(
            vec![r, c],
            value,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; r * c];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for i in 0..r {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        let k = i * c + j;
                        gg[j] += g[k] * xhat[k];
                        gb[j] += g[k];
                        let d = g[k] * gn.values()[j];
                        mean_d += d;
                        mean_dx += d * xhat[k];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for j in 0..c {
                        let k = i * c + j;
                        let d = g[k] * gn.values()[j];
                        gx[k] = inv_std[i] * (d - mean_d - xhat[k] * mean_dx);
                    }
                }
                vec![gx, gg, gb]
            }),
        )
    }

    /// For each term `(row, cols)` returns `log sum_{c in cols} exp(x[row, c])`,
    /// computed with max subtraction.
    pub fn logsumexp_select(&self, terms: &[(usize, Vec<usize>)]) -> Tensor {
        let (r, c) = self.dims2();
        let mut value = Vec::with_capacity(terms.len());
        let mut weights: Vec<Vec<f64>> = Vec::with_capacity(terms.len());
        for (row, cols) in terms {
            assert!(*row < r && !cols.is_empty(), "logsumexp_select: bad term");
            let xs: Vec<f64> = cols
                .iter()
                .map(|&j| {
                    assert!(j < c, "logsumexp_select column {j} of {c}");
                    self.values()[row * c + j]
                })
                .collect();
            let (lse, w) = logsumexp_with_weights(&xs);
            value.push(lse);
            weights.push(w);
        }
        let terms = terms.to_vec();
        Tensor::from_op(
            vec![terms.len()],
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let mut out = vec![0.0; r * c];
                for ((gt, (row, cols)), w) in g.iter().zip(&terms).zip(&weights) {
                    for (&j, wj) in cols.iter().zip(w) {
                        out[row * c + j] += gt * wj;
                    }
                }
                vec![out]
            }),
        )
    }

    /// Reshapes without copying semantics; the element count must match.
    pub fn reshape(&self, shape: Vec<usize>) -> Tensor {
        assert_eq!(numel(&shape), self.numel(), "reshape {:?} -> {shape:?}", self.shape());
        Tensor::from_op(shape, self.values().to_vec(), vec![self.clone()], Box::new(|g| vec![g.to_vec()]))
    }
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / SQRT_2))
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Stable `log sum exp(xs)` plus the softmax weights.
pub fn logsumexp_with_weights(xs: &[f64]) -> (f64, Vec<f64>) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    (m + s.ln(), exps.into_iter().map(|e| e / s).collect())
}

pub(crate) fn softmax_rows_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x[i * c..(i + 1) * c];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for j in 0..c {
            let e = (row[j] - m).exp();
            out[i * c + j] = e;
            s += e;
        }
        out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= s);
    }
    out
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}
