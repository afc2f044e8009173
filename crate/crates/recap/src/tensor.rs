//! Dense f64 tensors with reverse-mode differentiation on a per-step graph.
//!
//! Every differentiable op records a backward closure; `backward` on a scalar
//! root replays them in reverse topological order. The graph is rebuilt each
//! training step and dropped afterwards, so memory stays bounded at toy scale.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{contract_err, dim_err, Result};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled (forward values only).
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackFn = Box<dyn FnOnce(&[f64], &[Tensor])>;

pub struct Node {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: RefCell<Option<BackFn>>,
}

/// Shared handle to a graph node. Cloning is cheap (Rc bump).
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn make(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, parents: Vec<Tensor>, back: Option<BackFn>) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents,
            backward: RefCell::new(back),
        }))
    }

    /// Result node of an op: keeps the graph only when recording is on and
    /// some parent needs gradients.
    fn from_op(shape: Vec<usize>, data: Vec<f64>, parents: Vec<Tensor>, back: impl FnOnce(&[f64], &[Tensor]) + 'static) -> Tensor {
        let rg = grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        if rg {
            Tensor::make(shape, data, true, parents, Some(Box::new(back)))
        } else {
            Tensor::make(shape, data, false, Vec::new(), None)
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return dim_err(format!("shape {:?} needs {} values, got {}", shape, numel(shape), data.len()));
        }
        Ok(Tensor::make(shape.to_vec(), data, false, Vec::new(), None))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::make(vec![1], vec![v], false, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::make(shape.to_vec(), vec![0.0; numel(shape)], false, Vec::new(), None)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::make(shape.to_vec(), vec![v; numel(shape)], false, Vec::new(), None)
    }

    pub fn randn(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
        let data = (0..numel(shape)).map(|_| { let z: f64 = rng.sample(StandardNormal); z * std }).collect();
        Tensor::make(shape.to_vec(), data, false, Vec::new(), None)
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(numel(shape), data.len(), "param shape/data mismatch");
        Tensor::make(shape.to_vec(), data, true, Vec::new(), None)
    }

    pub fn param_randn(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
        let t = Tensor::randn(rng, shape, std);
        Tensor::make(t.0.shape.clone(), t.data_vec(), true, Vec::new(), None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn data_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.0.data.borrow())
    }

    /// Overwrites the stored values (used by the optimizer and checkpoint load).
    pub fn set_data(&self, data: Vec<f64>) {
        assert_eq!(data.len(), self.numel(), "set_data length mismatch");
        *self.0.data.borrow_mut() = data;
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.0.data.borrow()[0]
    }

    pub fn grad_vec(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.borrow().iter().all(|v| v.is_finite())
    }

    /// Cuts the graph: same values, no history, no grad requirement.
    pub fn detach(&self) -> Tensor {
        Tensor::make(self.0.shape.clone(), self.data_vec(), false, Vec::new(), None)
    }

    fn ptr(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    fn acc_grad(&self, g: &[f64]) {
        if !self.0.requires_grad {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, gi) in acc.iter_mut().zip(g) {
                    *a += gi;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return contract_err(format!("backward root must be scalar, got shape {:?}", self.shape()));
        }
        if !self.0.requires_grad {
            return Ok(()); // nothing reachable needs gradients
        }
        // Iterative postorder DFS over parent links.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.ptr());
        while let Some((node, idx)) = stack.pop() {
            if idx < node.0.parents.len() {
                let parent = node.0.parents[idx].clone();
                stack.push((node, idx + 1));
                if parent.0.requires_grad && visited.insert(parent.ptr()) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        self.acc_grad(&[1.0]);
        for node in order.iter().rev() {
            let back = node.0.backward.borrow_mut().take();
            if let Some(back) = back {
                let g = node.0.grad.borrow().clone();
                if let Some(g) = g {
                    back(&g, &node.0.parents);
                }
            }
        }
        Ok(())
    }

    // ── elementwise ──────────────────────────────────────────────────

    fn zip(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        assert_eq!(self.shape(), other.shape(), "{op}: shape {:?} vs {:?}", self.shape(), other.shape());
        let a = self.0.data.borrow();
        let b = other.0.data.borrow();
        a.iter().zip(b.iter()).map(|(x, y)| f(*x, *y)).collect()
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        let out = self.zip(other, "add", |x, y| x + y);
        Tensor::from_op(self.0.shape.clone(), out, vec![self.clone(), other.clone()], |g, ps| {
            ps[0].acc_grad(g);
            ps[1].acc_grad(g);
        })
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let out = self.zip(other, "sub", |x, y| x - y);
        Tensor::from_op(self.0.shape.clone(), out, vec![self.clone(), other.clone()], |g, ps| {
            ps[0].acc_grad(g);
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            ps[1].acc_grad(&neg);
        })
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let out = self.zip(other, "mul", |x, y| x * y);
        Tensor::from_op(self.0.shape.clone(), out, vec![self.clone(), other.clone()], |g, ps| {
            let a = ps[0].0.data.borrow();
            let b = ps[1].0.data.borrow();
            let ga: Vec<f64> = g.iter().zip(b.iter()).map(|(gi, y)| gi * y).collect();
            let gb: Vec<f64> = g.iter().zip(a.iter()).map(|(gi, x)| gi * x).collect();
            drop(a);
            drop(b);
            ps[0].acc_grad(&ga);
            ps[1].acc_grad(&gb);
        })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.0.data.borrow().iter().map(|v| v * c).collect();
        Tensor::from_op(self.0.shape.clone(), out, vec![self.clone()], move |g, ps| {
            let gs: Vec<f64> = g.iter().map(|v| v * c).collect();
            ps[0].acc_grad(&gs);
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.0.data.borrow().iter().map(|v| v + c).collect();
        Tensor::from_op(self.0.shape.clone(), out, vec![self.clone()], |g, ps| ps[0].acc_grad(g))
    }

    fn map_op(&self, f: impl Fn(f64) -> f64, dfda: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
        // dfda receives (input, output) so activations can reuse their output.
        let input = self.data_vec();
        let out: Vec<f64> = input.iter().map(|v| f(*v)).collect();
        let saved_in = input;
        let saved_out = out.clone();
        Tensor::from_op(self.0.shape.clone(), out, vec![self.clone()], move |g, ps| {
            let gs: Vec<f64> = g
                .iter()
                .zip(saved_in.iter().zip(saved_out.iter()))
                .map(|(gi, (x, y))| gi * dfda(*x, *y))
                .collect();
            ps[0].acc_grad(&gs);
        })
    }

    pub fn exp(&self) -> Tensor {
        self.map_op(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.map_op(f64::ln, |x, _| 1.0 / x)
    }

    pub fn tanh(&self) -> Tensor {
        self.map_op(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map_op(|x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn leaky_relu(&self, alpha: f64) -> Tensor {
        self.map_op(move |x| if x > 0.0 { x } else { alpha * x }, move |x, _| if x > 0.0 { 1.0 } else { alpha })
    }

    /// Clamp with zero gradient outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.map_op(move |x| x.clamp(lo, hi), move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 })
    }

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.0.data.borrow().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![1], vec![s], vec![self.clone()], move |g, ps| {
            let gs = vec![g[0]; n];
            ps[0].acc_grad(&gs);
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    // ── shape ops ────────────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return dim_err(format!("reshape {:?} -> {:?}: element count differs", self.shape(), shape));
        }
        let out = self.data_vec();
        Ok(Tensor::from_op(shape.to_vec(), out, vec![self.clone()], |g, ps| ps[0].acc_grad(g)))
    }

    /// 2-d transpose (copies).
    pub fn t(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2, "t() needs a matrix");
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let a = self.0.data.borrow();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        drop(a);
        Tensor::from_op(vec![n, m], out, vec![self.clone()], move |g, ps| {
            let mut gt = vec![0.0; m * n];
            for j in 0..n {
                for i in 0..m {
                    gt[i * n + j] = g[j * m + i];
                }
            }
            ps[0].acc_grad(&gt);
        })
    }

    /// Concatenation along axis 0 of matrices (or vectors treated as rows×1).
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        assert!(!parts.is_empty());
        let ncols = parts[0].shape().get(1).copied().unwrap_or(1);
        let mut rows = 0;
        for p in parts {
            let c = p.shape().get(1).copied().unwrap_or(1);
            if c != ncols {
                return dim_err(format!("concat_rows: column mismatch {} vs {}", ncols, c));
            }
            rows += p.shape()[0];
        }
        let mut data = Vec::with_capacity(rows * ncols);
        for p in parts {
            data.extend_from_slice(&p.0.data.borrow());
        }
        let parents: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
        Ok(Tensor::from_op(vec![rows, ncols], data, parents, move |g, ps| {
            let mut off = 0;
            for (p, sz) in ps.iter().zip(sizes.iter()) {
                p.acc_grad(&g[off..off + sz]);
                off += sz;
            }
        }))
    }

    pub fn slice_rows(&self, r0: usize, r1: usize) -> Tensor {
        assert_eq!(self.shape().len(), 2);
        let n = self.shape()[1];
        assert!(r0 < r1 && r1 <= self.shape()[0], "slice_rows out of range");
        let data = self.0.data.borrow()[r0 * n..r1 * n].to_vec();
        let total = self.numel();
        Tensor::from_op(vec![r1 - r0, n], data, vec![self.clone()], move |g, ps| {
            let mut full = vec![0.0; total];
            full[r0 * n..r1 * n].copy_from_slice(g);
            ps[0].acc_grad(&full);
        })
    }

    /// Column `c` of a matrix as a length-M vector (shape [M]).
    pub fn col(&self, c: usize) -> Tensor {
        assert_eq!(self.shape().len(), 2);
        let (m, n) = (self.shape()[0], self.shape()[1]);
        assert!(c < n);
        let a = self.0.data.borrow();
        let data: Vec<f64> = (0..m).map(|i| a[i * n + c]).collect();
        drop(a);
        Tensor::from_op(vec![m], data, vec![self.clone()], move |g, ps| {
            let mut full = vec![0.0; m * n];
            for i in 0..m {
                full[i * n + c] = g[i];
            }
            ps[0].acc_grad(&full);
        })
    }

    /// Embedding-style row gather from a [V, E] table.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        assert_eq!(self.shape().len(), 2);
        let (v, e) = (self.shape()[0], self.shape()[1]);
        for &id in ids {
            if id >= v {
                return dim_err(format!("gather_rows: id {} out of table rows {}", id, v));
            }
        }
        let a = self.0.data.borrow();
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            data.extend_from_slice(&a[id * e..(id + 1) * e]);
        }
        drop(a);
        let ids = ids.to_vec();
        Ok(Tensor::from_op(vec![ids.len(), e], data, vec![self.clone()], move |g, ps| {
            let mut full = vec![0.0; v * e];
            for (row, &id) in ids.iter().enumerate() {
                for j in 0..e {
                    full[id * e + j] += g[row * e + j];
                }
            }
            ps[0].acc_grad(&full);
        }))
    }

    // ── matrix / broadcast ops ───────────────────────────────────────

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a_sh, b_sh) = (self.shape(), other.shape());
        // Vectors are treated as single-column matrices.
        let (m, k) = match a_sh.len() {
            2 => (a_sh[0], a_sh[1]),
            1 => (a_sh[0], 1),
            _ => return dim_err(format!("matmul lhs rank {:?}", a_sh)),
        };
        let (k2, n) = match b_sh.len() {
            2 => (b_sh[0], b_sh[1]),
            1 => (b_sh[0], 1),
            _ => return dim_err(format!("matmul rhs rank {:?}", b_sh)),
        };
        if k != k2 {
            return dim_err(format!("matmul: inner dims differ, lhs {:?} vs rhs {:?}", a_sh, b_sh));
        }
        let mut out = vec![0.0; m * n];
        matmul_raw(&self.0.data.borrow(), &other.0.data.borrow(), m, k, n, &mut out);
        let out_shape = if n == 1 && b_sh.len() == 1 { vec![m] } else { vec![m, n] };
        Ok(Tensor::from_op(out_shape, out, vec![self.clone(), other.clone()], move |g, ps| {
            // dA = dC · Bᵀ ; dB = Aᵀ · dC
            let a = ps[0].0.data.borrow();
            let b = ps[1].0.data.borrow();
            let mut ga = vec![0.0; m * k];
            matmul_bt(g, &b, m, n, k, &mut ga);
            let mut gb = vec![0.0; k * n];
            matmul_at(&a, g, m, k, n, &mut gb);
            drop(a);
            drop(b);
            ps[0].acc_grad(&ga);
            ps[1].acc_grad(&gb);
        }))
    }

    /// out[m, n] = self[m, n] * v[m]
    pub fn colvec_mul(&self, v: &Tensor) -> Result<Tensor> {
        let (m, n) = (self.shape()[0], self.shape()[1]);
        if v.numel() != m {
            return dim_err(format!("colvec_mul: matrix {:?} vs vector {:?}", self.shape(), v.shape()));
        }
        let a = self.0.data.borrow();
        let vv = v.0.data.borrow();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = a[i * n + j] * vv[i];
            }
        }
        drop(a);
        drop(vv);
        Ok(Tensor::from_op(self.0.shape.clone(), out, vec![self.clone(), v.clone()], move |g, ps| {
            let a = ps[0].0.data.borrow();
            let vv = ps[1].0.data.borrow();
            let mut ga = vec![0.0; m * n];
            let mut gv = vec![0.0; m];
            for i in 0..m {
                for j in 0..n {
                    ga[i * n + j] = g[i * n + j] * vv[i];
                    gv[i] += g[i * n + j] * a[i * n + j];
                }
            }
            drop(a);
            drop(vv);
            ps[0].acc_grad(&ga);
            ps[1].acc_grad(&gv);
        }))
    }

    /// out[m, n] = self[m, n] + v[m]  (bias broadcast across columns)
    pub fn colvec_add(&self, v: &Tensor) -> Result<Tensor> {
        let (m, n) = (self.shape()[0], self.shape()[1]);
        if v.numel() != m {
            return dim_err(format!("colvec_add: matrix {:?} vs vector {:?}", self.shape(), v.shape()));
        }
        let a = self.0.data.borrow();
        let vv = v.0.data.borrow();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = a[i * n + j] + vv[i];
            }
        }
        drop(a);
        drop(vv);
        Ok(Tensor::from_op(self.0.shape.clone(), out, vec![self.clone(), v.clone()], move |g, ps| {
            ps[0].acc_grad(g);
            let mut gv = vec![0.0; m];
            for i in 0..m {
                for j in 0..n {
                    gv[i] += g[i * n + j];
                }
            }
            ps[1].acc_grad(&gv);
        }))
    }

    /// Numerically stable softmax along `axis` of a 1-d or 2-d tensor.
    pub fn softmax_axis(&self, axis: usize) -> Result<Tensor> {
        let rank = self.shape().len();
        if axis >= rank {
            return dim_err(format!("softmax: axis {} out of range for shape {:?}", axis, self.shape()));
        }
        let (rows, cols) = if rank == 1 { (1, self.shape()[0]) } else { (self.shape()[0], self.shape()[1]) };
        // Normalize over `cols` slices when axis is the last one; otherwise
        // work on the transpose layout.
        let along_cols = rank == 1 || axis == 1;
        let a = self.data_vec();
        let mut out = vec![0.0; rows * cols];
        let (nslices, slice_len, stride, step) = if along_cols {
            (rows, cols, 1usize, cols)
        } else {
            (cols, rows, cols, 1usize)
        };
        for s in 0..nslices {
            let base = s * step;
            let mut mx = f64::NEG_INFINITY;
            for i in 0..slice_len {
                mx = mx.max(a[base + i * stride]);
            }
            let mut z = 0.0;
            for i in 0..slice_len {
                let e = (a[base + i * stride] - mx).exp();
                out[base + i * stride] = e;
                z += e;
            }
            for i in 0..slice_len {
                out[base + i * stride] /= z;
            }
        }
        let saved = out.clone();
        Ok(Tensor::from_op(self.0.shape.clone(), out, vec![self.clone()], move |g, ps| {
            let mut gi = vec![0.0; rows * cols];
            for s in 0..nslices {
                let base = s * step;
                let mut dot = 0.0;
                for i in 0..slice_len {
                    let idx = base + i * stride;
                    dot += g[idx] * saved[idx];
                }
                for i in 0..slice_len {
                    let idx = base + i * stride;
                    gi[idx] = saved[idx] * (g[idx] - dot);
                }
            }
            ps[0].acc_grad(&gi);
        }))
    }

    /// Row-wise log-softmax of a [R, C] matrix.
    pub fn log_softmax_rows(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2);
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let a = self.data_vec();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &a[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let saved = out.clone();
        Tensor::from_op(self.0.shape.clone(), out, vec![self.clone()], move |g, ps| {
            let mut gi = vec![0.0; r * c];
            for i in 0..r {
                let gsum: f64 = g[i * c..(i + 1) * c].iter().sum();
                for j in 0..c {
                    let idx = i * c + j;
                    gi[idx] = g[idx] - saved[idx].exp() * gsum;
                }
            }
            ps[0].acc_grad(&gi);
        })
    }

    /// Masked negative log-likelihood over row-wise log-probabilities.
    pub fn masked_nll(&self, targets: &[usize], mask: &[bool]) -> Result<Tensor> {
        assert_eq!(self.shape().len(), 2);
        let (r, c) = (self.shape()[0], self.shape()[1]);
        if targets.len() != r || mask.len() != r {
            return dim_err(format!("masked_nll: {} rows vs {} targets / {} mask", r, targets.len(), mask.len()));
        }
        for (&t, &m) in targets.iter().zip(mask) {
            if m && t >= c {
                return dim_err(format!("masked_nll: target {} out of {} classes", t, c));
            }
        }
        let a = self.0.data.borrow();
        let mut s = 0.0;
        for i in 0..r {
            if mask[i] {
                s -= a[i * c + targets[i]];
            }
        }
        drop(a);
        let targets = targets.to_vec();
        let mask = mask.to_vec();
        Ok(Tensor::from_op(vec![1], vec![s], vec![self.clone()], move |g, ps| {
            let mut gi = vec![0.0; r * c];
            for i in 0..r {
                if mask[i] {
                    gi[i * c + targets[i]] = -g[0];
                }
            }
            ps[0].acc_grad(&gi);
        }))
    }

    // ── spatial ops on [C, H, W] ─────────────────────────────────────

    pub fn conv2d(&self, kernel: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
        let xs = self.shape();
        let ks = kernel.shape();
        if xs.len() != 3 || ks.len() != 4 {
            return dim_err(format!("conv2d: input {:?} (want CxHxW), kernel {:?} (want C'xCxhxw)", xs, ks));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (co, ci, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if ci != c {
            return dim_err(format!("conv2d: input channels {} vs kernel channels {}", c, ci));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return dim_err(format!("conv2d: kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * padding, w + 2 * padding));
        }
        if let Some(b) = bias {
            if b.numel() != co {
                return dim_err(format!("conv2d: bias {:?} vs {} output channels", b.shape(), co));
            }
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let ckk = c * kh * kw;
        let cols = im2col(&self.0.data.borrow(), c, h, w, kh, kw, stride, padding, oh, ow);
        let mut out = vec![0.0; co * oh * ow];
        matmul_raw(&kernel.0.data.borrow(), &cols, co, ckk, oh * ow, &mut out);
        if let Some(b) = bias {
            let bv = b.0.data.borrow();
            for o in 0..co {
                for p in 0..oh * ow {
                    out[o * oh * ow + p] += bv[o];
                }
            }
        }
        let mut parents = vec![self.clone(), kernel.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let has_bias = bias.is_some();
        Ok(Tensor::from_op(vec![co, oh, ow], out, parents, move |g, ps| {
            let np = oh * ow;
            // im2col is recomputed here rather than stored; it is cheap next
            // to the matmuls and keeps graph memory small.
            let cols = im2col(&ps[0].0.data.borrow(), c, h, w, kh, kw, stride, padding, oh, ow);
            let mut gk = vec![0.0; co * ckk];
            matmul_bt(g, &cols, co, np, ckk, &mut gk);
            let mut gcols = vec![0.0; ckk * np];
            matmul_at(&ps[1].0.data.borrow(), g, co, ckk, np, &mut gcols);
            let gx = col2im(&gcols, c, h, w, kh, kw, stride, padding, oh, ow);
            ps[0].acc_grad(&gx);
            ps[1].acc_grad(&gk);
            if has_bias {
                let mut gb = vec![0.0; co];
                for o in 0..co {
                    gb[o] = g[o * np..(o + 1) * np].iter().sum();
                }
                ps[2].acc_grad(&gb);
            }
        }))
    }

    /// Nearest-neighbor 2x upsampling of a [C, H, W] tensor.
    pub fn upsample2x(&self) -> Result<Tensor> {
        let xs = self.shape();
        if xs.len() != 3 {
            return dim_err(format!("upsample2x: want CxHxW, got {:?}", xs));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let a = self.0.data.borrow();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for x in 0..w2 {
                    out[ch * h2 * w2 + y * w2 + x] = a[ch * h * w + (y / 2) * w + x / 2];
                }
            }
        }
        drop(a);
        Ok(Tensor::from_op(vec![c, h2, w2], out, vec![self.clone()], move |g, ps| {
            let mut gi = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..h2 {
                    for x in 0..w2 {
                        gi[ch * h * w + (y / 2) * w + x / 2] += g[ch * h2 * w2 + y * w2 + x];
                    }
                }
            }
            ps[0].acc_grad(&gi);
        }))
    }
}

// ── raw kernels ──────────────────────────────────────────────────────

/// out(m×n) += a(m×k) · b(k×n); out must be zeroed by the caller.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out(m×k) += a(m×n) · bᵀ where b is (k×n).
fn matmul_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for p in 0..n {
                s += arow[p] * brow[p];
            }
            out[i * k + j] += s;
        }
    }
}

/// out(k×n) += aᵀ · c where a is (m×k), c is (m×n).
fn matmul_at(a: &[f64], c: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for p in 0..m {
        let crow = &c[p * n..(p + 1) * n];
        for i in 0..k {
            let av = a[p * k + i];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * crow[j];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Vec<f64> {
    let np = oh * ow;
    let mut cols = vec![0.0; c * kh * kw * np];
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let base = row * np;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[base + oy * ow + ox] = x[ch * h * w + iy * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Vec<f64> {
    let np = oh * ow;
    let mut x = vec![0.0; c * h * w];
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let base = row * np;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[ch * h * w + iy * w + ix as usize] += cols[base + oy * ow + ox];
                    }
                }
            }
        }
    }
    x
}

// ── gradient verification ────────────────────────────────────────────

/// Central finite-difference check of d f / d x against the recorded graph.
/// Returns the max over coordinates of |analytic − numeric| / max(1, |numeric|).
pub fn grad_check(f: &dyn Fn(&Tensor) -> Result<Tensor>, x: &Tensor, eps: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return contract_err(format!("grad_check: eps {} outside [1e-7, 1e-3]", eps));
    }
    let leaf = Tensor::param(x.shape(), x.data_vec());
    let y = f(&leaf)?;
    if y.numel() != 1 {
        return contract_err(format!("grad_check: f returned shape {:?}, want scalar", y.shape()));
    }
    y.backward()?;
    let analytic = leaf.grad_vec().unwrap_or_else(|| vec![0.0; leaf.numel()]);
    let mut max_rel = 0.0f64;
    let base = leaf.data_vec();
    for i in 0..leaf.numel() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let probe_p = Tensor::from_vec(x.shape(), plus)?;
        let probe_m = Tensor::from_vec(x.shape(), minus)?;
        let (fp, fm) = no_grad(|| -> Result<(f64, f64)> { Ok((f(&probe_p)?.item(), f(&probe_m)?.item())) })?;
        let numeric = (fp - fm) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
