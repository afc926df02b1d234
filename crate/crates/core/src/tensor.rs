//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! Row-major flat storage, no views, no aliasing: every op materializes its
//! output. Graphs are built eagerly; [`Tensor::backward`] walks the graph in
//! reverse topological order and releases it afterwards. Single-threaded by
//! construction (`Rc`), which keeps the gradient bookkeeping trivial.

use std::cell::{Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

type BackwardFn = Box<dyn Fn(&[f32])>;

struct Inner {
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    /// Leaf parameter: gradient is kept (and accumulated) after backward.
    requires_grad: bool,
    /// This node or an ancestor requires a gradient.
    needs_grad: bool,
    parents: Vec<Tensor>,
    backward_fn: RefCell<Option<BackwardFn>>,
}

/// A dense N-dimensional f32 array, optionally tracked by the autodiff graph.
///
/// Cloning is cheap (reference-counted); two clones share storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_shape_data(shape: &[usize], len: usize) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::msg(format!(
            "shape {:?} wants {} elements, got {}",
            shape, numel, len
        )));
    }
    Ok(())
}

impl Tensor {
    fn leaf(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                needs_grad: requires_grad,
                parents: Vec::new(),
                backward_fn: RefCell::new(None),
            }),
        }
    }

    fn from_op(
        shape: Vec<usize>,
        data: Vec<f32>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let needs_grad = parents.iter().any(|p| p.inner.needs_grad);
        let (parents, backward_fn) = if needs_grad {
            (parents, Some(backward))
        } else {
            // Inference path: keep no graph at all.
            (Vec::new(), None)
        };
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: false,
                needs_grad,
                parents,
                backward_fn: RefCell::new(backward_fn),
            }),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        check_shape_data(shape, data.len())?;
        Ok(Tensor::leaf(shape.to_vec(), data, false))
    }

    /// Leaf that accumulates a gradient on backward: a trainable parameter.
    pub fn param(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        check_shape_data(shape, data.len())?;
        Ok(Tensor::leaf(shape.to_vec(), data, true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::leaf(shape.to_vec(), vec![0.0; numel], false)
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        let numel = shape.iter().product();
        Tensor::leaf(shape.to_vec(), vec![value; numel], false)
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::leaf(vec![1], vec![value], false)
    }

    pub fn randn<R: Rng>(shape: &[usize], std: f32, rng: &mut R) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f32 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Tensor::leaf(shape.to_vec(), data, false)
    }

    /// Re-flag a leaf as trainable. Data is shared only logically: the
    /// returned tensor owns a fresh copy.
    pub fn trainable(&self) -> Tensor {
        Tensor::leaf(self.inner.shape.clone(), self.to_vec(), true)
    }

    /// Same values, cut off from any graph.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.inner.shape.clone(), self.to_vec(), false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        self.inner.data.borrow()
    }

    /// Mutable access to leaf storage (optimizer updates, checkpoint loads).
    pub fn data_mut(&self) -> RefMut<'_, Vec<f32>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(Error::msg(format!(
                "item() on non-scalar tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data.borrow()[0])
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn accum_grad(&self, g: &[f32]) {
        if !self.inner.needs_grad {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Fills `grad` on every
    /// `requires_grad` leaf and releases the graph.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::msg(format!(
                "backward() requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        // Iterative post-order DFS; dedupe by node address.
        let mut topo: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<*const Inner> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        seen.insert(Rc::as_ptr(&self.inner));
        while let Some((node, child)) = stack.pop() {
            if child < node.inner.parents.len() {
                let parent = node.inner.parents[child].clone();
                stack.push((node, child + 1));
                if parent.inner.needs_grad && seen.insert(Rc::as_ptr(&parent.inner)) {
                    stack.push((parent, 0));
                }
            } else {
                topo.push(node);
            }
        }

        self.accum_grad(&[1.0]);
        for node in topo.iter().rev() {
            let bw = node.inner.backward_fn.borrow_mut().take();
            if let Some(bw) = bw {
                let g = node.inner.grad.borrow().clone();
                if let Some(g) = g {
                    bw(&g);
                }
            }
            if !node.inner.requires_grad {
                *node.inner.grad.borrow_mut() = None;
            }
        }
        Ok(())
    }

    // ── elementwise ──────────────────────────────────────────────────

    fn zip_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_same_shape(other, "add")?;
        let out: Vec<f32> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.inner.shape.clone(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                pa.accum_grad(g);
                pb.accum_grad(g);
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_same_shape(other, "sub")?;
        let out: Vec<f32> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.inner.shape.clone(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                pa.accum_grad(g);
                let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                pb.accum_grad(&neg);
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_same_shape(other, "mul")?;
        let out: Vec<f32> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.inner.shape.clone(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ga: Vec<f32> = g.iter().zip(pb.data().iter()).map(|(g, b)| g * b).collect();
                let gb: Vec<f32> = g.iter().zip(pa.data().iter()).map(|(g, a)| g * a).collect();
                pa.accum_grad(&ga);
                pb.accum_grad(&gb);
            }),
        ))
    }

    pub fn scale(&self, s: f32) -> Tensor {
        let out: Vec<f32> = self.data().iter().map(|v| v * s).collect();
        let pa = self.clone();
        Tensor::from_op(
            self.inner.shape.clone(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let ga: Vec<f32> = g.iter().map(|v| v * s).collect();
                pa.accum_grad(&ga);
            }),
        )
    }

    pub fn add_scalar(&self, s: f32) -> Tensor {
        let out: Vec<f32> = self.data().iter().map(|v| v + s).collect();
        let pa = self.clone();
        Tensor::from_op(
            self.inner.shape.clone(),
            out,
            vec![self.clone()],
            Box::new(move |g| pa.accum_grad(g)),
        )
    }

    pub fn silu(&self) -> Tensor {
        let out: Vec<f32> = self
            .data()
            .iter()
            .map(|&x| x / (1.0 + (-x).exp()))
            .collect();
        let pa = self.clone();
        Tensor::from_op(
            self.inner.shape.clone(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let ga: Vec<f32> = g
                    .iter()
                    .zip(pa.data().iter())
                    .map(|(g, &x)| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                pa.accum_grad(&ga);
            }),
        )
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes through interior
    /// points and is zero at clipped ones.
    pub fn clamp(&self, lo: f32, hi: f32) -> Tensor {
        let out: Vec<f32> = self.data().iter().map(|&x| x.clamp(lo, hi)).collect();
        let pa = self.clone();
        Tensor::from_op(
            self.inner.shape.clone(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let ga: Vec<f32> = g
                    .iter()
                    .zip(pa.data().iter())
                    .map(|(g, &x)| if x > lo && x < hi { *g } else { 0.0 })
                    .collect();
                pa.accum_grad(&ga);
            }),
        )
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum_all(&self) -> Tensor {
        let s: f32 = self.data().iter().sum();
        let pa = self.clone();
        let n = self.numel();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g| {
                pa.accum_grad(&vec![g[0]; n]);
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        self.sum_all().scale(1.0 / n as f32)
    }

    /// Mean squared error against `target`, as a scalar graph node.
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        let d = self.sub(target)?;
        Ok(d.mul(&d)?.mean_all())
    }

    // ── shape ops ────────────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        check_shape_data(shape, self.numel())?;
        let pa = self.clone();
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(move |g| pa.accum_grad(g)),
        ))
    }

    /// Swap the last two dimensions (materialized).
    pub fn transpose2(&self) -> Result<Tensor> {
        if self.rank() < 2 {
            return Err(Error::msg("transpose2 needs rank >= 2"));
        }
        let shape = self.shape();
        let (m, n) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch: usize = shape[..shape.len() - 2].iter().product();
        let data = self.data();
        let mut out = vec![0.0f32; data.len()];
        for b in 0..batch {
            let src = &data[b * m * n..(b + 1) * m * n];
            let dst = &mut out[b * m * n..(b + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        drop(data);
        let mut new_shape = shape.to_vec();
        let l = new_shape.len();
        new_shape.swap(l - 2, l - 1);
        let pa = self.clone();
        Ok(Tensor::from_op(
            new_shape,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gin = vec![0.0f32; g.len()];
                for b in 0..batch {
                    let src = &g[b * m * n..(b + 1) * m * n];
                    let dst = &mut gin[b * m * n..(b + 1) * m * n];
                    for j in 0..n {
                        for i in 0..m {
                            dst[i * n + j] = src[j * m + i];
                        }
                    }
                }
                pa.accum_grad(&gin);
            }),
        ))
    }

    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::msg("concat_rows: empty input"));
        }
        let cols = parts[0].shape().last().copied().unwrap_or(0);
        let mut rows = 0usize;
        for p in parts {
            if p.rank() != 2 || p.shape()[1] != cols {
                return Err(Error::shape("concat_rows", parts[0].shape(), p.shape()));
            }
            rows += p.shape()[0];
        }
        let mut out = Vec::with_capacity(rows * cols);
        for p in parts {
            out.extend_from_slice(&p.data());
        }
        let owners: Vec<Tensor> = parts.to_vec();
        let row_counts: Vec<usize> = parts.iter().map(|p| p.shape()[0]).collect();
        Ok(Tensor::from_op(
            vec![rows, cols],
            out,
            parts.to_vec(),
            Box::new(move |g| {
                let mut offset = 0usize;
                for (p, &r) in owners.iter().zip(&row_counts) {
                    p.accum_grad(&g[offset..offset + r * cols]);
                    offset += r * cols;
                }
            }),
        ))
    }

    pub fn slice_rows(&self, r0: usize, r1: usize) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::msg("slice_rows needs rank 2"));
        }
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        if r0 > r1 || r1 > rows {
            return Err(Error::msg(format!(
                "slice_rows {}..{} out of range for {} rows",
                r0, r1, rows
            )));
        }
        let out = self.data()[r0 * cols..r1 * cols].to_vec();
        let pa = self.clone();
        let total = rows * cols;
        Ok(Tensor::from_op(
            vec![r1 - r0, cols],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gin = vec![0.0f32; total];
                gin[r0 * cols..r1 * cols].copy_from_slice(g);
                pa.accum_grad(&gin);
            }),
        ))
    }

    pub fn slice_cols(&self, c0: usize, c1: usize) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::msg("slice_cols needs rank 2"));
        }
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        if c0 > c1 || c1 > cols {
            return Err(Error::msg(format!(
                "slice_cols {}..{} out of range for {} cols",
                c0, c1, cols
            )));
        }
        let w = c1 - c0;
        let data = self.data();
        let mut out = Vec::with_capacity(rows * w);
        for i in 0..rows {
            out.extend_from_slice(&data[i * cols + c0..i * cols + c1]);
        }
        drop(data);
        let pa = self.clone();
        Ok(Tensor::from_op(
            vec![rows, w],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gin = vec![0.0f32; rows * cols];
                for i in 0..rows {
                    gin[i * cols + c0..i * cols + c1].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                pa.accum_grad(&gin);
            }),
        ))
    }

    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::msg("concat_cols: empty input"));
        }
        let rows = parts[0].shape()[0];
        let mut cols = 0usize;
        for p in parts {
            if p.rank() != 2 || p.shape()[0] != rows {
                return Err(Error::shape("concat_cols", parts[0].shape(), p.shape()));
            }
            cols += p.shape()[1];
        }
        let mut out = vec![0.0f32; rows * cols];
        let mut offset = 0usize;
        for p in parts {
            let w = p.shape()[1];
            let data = p.data();
            for i in 0..rows {
                out[i * cols + offset..i * cols + offset + w]
                    .copy_from_slice(&data[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let owners: Vec<Tensor> = parts.to_vec();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
        Ok(Tensor::from_op(
            vec![rows, cols],
            out,
            parts.to_vec(),
            Box::new(move |g| {
                let mut offset = 0usize;
                for (p, &w) in owners.iter().zip(&widths) {
                    let mut gp = vec![0.0f32; rows * w];
                    for i in 0..rows {
                        gp[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * cols + offset..i * cols + offset + w]);
                    }
                    p.accum_grad(&gp);
                    offset += w;
                }
            }),
        ))
    }

    /// Select rows by index; duplicate indices accumulate gradient
    /// (embedding-table lookup).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::msg("gather_rows needs rank 2"));
        }
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        for &i in indices {
            if i >= rows {
                return Err(Error::msg(format!(
                    "gather_rows: index {} out of range for {} rows",
                    i, rows
                )));
            }
        }
        let data = self.data();
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&data[i * cols..(i + 1) * cols]);
        }
        drop(data);
        let pa = self.clone();
        let idx: Vec<usize> = indices.to_vec();
        Ok(Tensor::from_op(
            vec![indices.len(), cols],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gin = vec![0.0f32; rows * cols];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..cols {
                        gin[i * cols + j] += g[k * cols + j];
                    }
                }
                pa.accum_grad(&gin);
            }),
        ))
    }

    /// Repeat each row `k` times consecutively: (L, d) -> (L*k, d).
    pub fn repeat_rows(&self, k: usize) -> Result<Tensor> {
        if self.rank() != 2 || k == 0 {
            return Err(Error::msg("repeat_rows needs rank 2 and k >= 1"));
        }
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        let data = self.data();
        let mut out = Vec::with_capacity(rows * k * cols);
        for i in 0..rows {
            for _ in 0..k {
                out.extend_from_slice(&data[i * cols..(i + 1) * cols]);
            }
        }
        drop(data);
        let pa = self.clone();
        Ok(Tensor::from_op(
            vec![rows * k, cols],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gin = vec![0.0f32; rows * cols];
                for i in 0..rows {
                    for r in 0..k {
                        let src = &g[(i * k + r) * cols..(i * k + r + 1) * cols];
                        for j in 0..cols {
                            gin[i * cols + j] += src[j];
                        }
                    }
                }
                pa.accum_grad(&gin);
            }),
        ))
    }

    // ── row-vector broadcasts over the last dimension ────────────────

    fn rowvec_check(&self, v: &Tensor, op: &'static str) -> Result<(usize, usize)> {
        let d = *self.shape().last().ok_or_else(|| Error::msg("empty shape"))?;
        if v.rank() != 1 || v.shape()[0] != d {
            return Err(Error::shape(op, self.shape(), v.shape()));
        }
        Ok((self.numel() / d, d))
    }

    pub fn add_rowvec(&self, v: &Tensor) -> Result<Tensor> {
        let (rows, d) = self.rowvec_check(v, "add_rowvec")?;
        let data = self.data();
        let vd = v.data();
        let mut out = vec![0.0f32; rows * d];
        for i in 0..rows {
            for j in 0..d {
                out[i * d + j] = data[i * d + j] + vd[j];
            }
        }
        drop(data);
        drop(vd);
        let (pa, pv) = (self.clone(), v.clone());
        Ok(Tensor::from_op(
            self.inner.shape.clone(),
            out,
            vec![self.clone(), v.clone()],
            Box::new(move |g| {
                pa.accum_grad(g);
                let mut gv = vec![0.0f32; d];
                for i in 0..rows {
                    for j in 0..d {
                        gv[j] += g[i * d + j];
                    }
                }
                pv.accum_grad(&gv);
            }),
        ))
    }

    pub fn mul_rowvec(&self, v: &Tensor) -> Result<Tensor> {
        let (rows, d) = self.rowvec_check(v, "mul_rowvec")?;
        let data = self.data();
        let vd = v.data();
        let mut out = vec![0.0f32; rows * d];
        for i in 0..rows {
            for j in 0..d {
                out[i * d + j] = data[i * d + j] * vd[j];
            }
        }
        drop(data);
        drop(vd);
        let (pa, pv) = (self.clone(), v.clone());
        Ok(Tensor::from_op(
            self.inner.shape.clone(),
            out,
            vec![self.clone(), v.clone()],
            Box::new(move |g| {
                let vd = pv.data();
                let xd = pa.data();
                let mut ga = vec![0.0f32; g.len()];
                let mut gv = vec![0.0f32; d];
                for i in 0..rows {
                    for j in 0..d {
                        ga[i * d + j] = g[i * d + j] * vd[j];
                        gv[j] += g[i * d + j] * xd[i * d + j];
                    }
                }
                drop(vd);
                drop(xd);
                pa.accum_grad(&ga);
                pv.accum_grad(&gv);
            }),
        ))
    }

    // ── matmul ───────────────────────────────────────────────────────

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`.
    ///
    /// Leading dimensions must match exactly, or one operand must be rank 2
    /// (shared across the other's batch).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, ka) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if ka != kb {
            return Err(Error::shape("matmul", sa, sb));
        }
        let k = ka;
        let batch_a: usize = sa[..sa.len() - 2].iter().product();
        let batch_b: usize = sb[..sb.len() - 2].iter().product();
        let (batch, lead): (usize, Vec<usize>) = if sa.len() == 2 && sb.len() == 2 {
            (1, vec![])
        } else if sb.len() == 2 {
            (batch_a, sa[..sa.len() - 2].to_vec())
        } else if sa.len() == 2 {
            (batch_b, sb[..sb.len() - 2].to_vec())
        } else if sa[..sa.len() - 2] == sb[..sb.len() - 2] {
            (batch_a, sa[..sa.len() - 2].to_vec())
        } else {
            return Err(Error::shape("matmul", sa, sb));
        };
        let stride_a = if sa.len() > 2 { m * k } else { 0 };
        let stride_b = if sb.len() > 2 { k * n } else { 0 };

        let mut out = vec![0.0f32; batch * m * n];
        {
            let da = self.data();
            let db = other.data();
            for b in 0..batch {
                mm_nn(
                    &da[b * stride_a..b * stride_a + m * k],
                    &db[b * stride_b..b * stride_b + k * n],
                    m,
                    k,
                    n,
                    &mut out[b * m * n..(b + 1) * m * n],
                );
            }
        }
        let mut shape = lead;
        shape.push(m);
        shape.push(n);
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let da = pa.data();
                let db = pb.data();
                let mut ga = vec![0.0f32; da.len()];
                let mut gb = vec![0.0f32; db.len()];
                for b in 0..batch {
                    let gc = &g[b * m * n..(b + 1) * m * n];
                    // dA = dC * B^T
                    mm_nt(
                        gc,
                        &db[b * stride_b..b * stride_b + k * n],
                        m,
                        n,
                        k,
                        &mut ga[b * stride_a..b * stride_a + m * k],
                    );
                    // dB = A^T * dC
                    mm_tn(
                        &da[b * stride_a..b * stride_a + m * k],
                        gc,
                        m,
                        k,
                        n,
                        &mut gb[b * stride_b..b * stride_b + k * n],
                    );
                }
                drop(da);
                drop(db);
                pa.accum_grad(&ga);
                pb.accum_grad(&gb);
            }),
        ))
    }

    // ── normalization & attention primitives ─────────────────────────

    /// Numerically stabilized softmax over the last dimension.
    /// `-inf` entries are treated as masked-out (weight 0); an all-`-inf`
    /// slice yields zeros. NaN in the input is an error.
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        let d = *self
            .shape()
            .last()
            .ok_or_else(|| Error::msg("softmax on empty shape"))?;
        if d == 0 {
            return Err(Error::msg("softmax: last dimension is 0"));
        }
        let rows = self.numel() / d;
        let data = self.data();
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::msg("softmax: NaN in input"));
        }
        let mut out = vec![0.0f32; rows * d];
        for i in 0..rows {
            let row = &data[i * d..(i + 1) * d];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            if max == f32::NEG_INFINITY {
                continue; // fully masked slice
            }
            let mut sum = 0.0f32;
            for j in 0..d {
                let e = (row[j] - max).exp();
                out[i * d + j] = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for j in 0..d {
                out[i * d + j] *= inv;
            }
        }
        drop(data);
        let pa = self.clone();
        let y = out.clone();
        Ok(Tensor::from_op(
            self.inner.shape.clone(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gin = vec![0.0f32; g.len()];
                for i in 0..rows {
                    let yr = &y[i * d..(i + 1) * d];
                    let gr = &g[i * d..(i + 1) * d];
                    let dot: f32 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..d {
                        gin[i * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                pa.accum_grad(&gin);
            }),
        ))
    }

    /// LayerNorm over the last dimension with affine `gamma`/`beta`
    /// (epsilon 1e-5).
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        const EPS: f32 = 1e-5;
        let d = *self
            .shape()
            .last()
            .ok_or_else(|| Error::msg("layer_norm on empty shape"))?;
        if gamma.rank() != 1 || gamma.shape()[0] != d {
            return Err(Error::shape("layer_norm gamma", self.shape(), gamma.shape()));
        }
        if beta.rank() != 1 || beta.shape()[0] != d {
            return Err(Error::shape("layer_norm beta", self.shape(), beta.shape()));
        }
        let rows = self.numel() / d;
        let data = self.data();
        let gd = gamma.data();
        let bd = beta.data();
        let mut out = vec![0.0f32; rows * d];
        let mut xhat = vec![0.0f32; rows * d];
        let mut inv_std = vec![0.0f32; rows];
        for i in 0..rows {
            let row = &data[i * d..(i + 1) * d];
            let mean: f32 = row.iter().sum::<f32>() / d as f32;
            let var: f32 = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f32>() / d as f32;
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std[i] = istd;
            for j in 0..d {
                let xh = (row[j] - mean) * istd;
                xhat[i * d + j] = xh;
                out[i * d + j] = xh * gd[j] + bd[j];
            }
        }
        drop(data);
        drop(gd);
        drop(bd);
        let (pa, pg, pb) = (self.clone(), gamma.clone(), beta.clone());
        Ok(Tensor::from_op(
            self.inner.shape.clone(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g| {
                let gd = pg.data();
                let mut gin = vec![0.0f32; g.len()];
                let mut ggamma = vec![0.0f32; d];
                let mut gbeta = vec![0.0f32; d];
                for i in 0..rows {
                    let gr = &g[i * d..(i + 1) * d];
                    let xh = &xhat[i * d..(i + 1) * d];
                    let mut mean_dxhat = 0.0f32;
                    let mut mean_dxhat_xhat = 0.0f32;
                    for j in 0..d {
                        let dxh = gr[j] * gd[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[j];
                        ggamma[j] += gr[j] * xh[j];
                        gbeta[j] += gr[j];
                    }
                    mean_dxhat /= d as f32;
                    mean_dxhat_xhat /= d as f32;
                    for j in 0..d {
                        let dxh = gr[j] * gd[j];
                        gin[i * d + j] =
                            inv_std[i] * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                    }
                }
                drop(gd);
                pa.accum_grad(&gin);
                pg.accum_grad(&ggamma);
                pb.accum_grad(&gbeta);
            }),
        ))
    }

    /// Set positions where `invalid` is true to `-inf` (pre-softmax masking).
    /// Gradient is zero at masked positions.
    pub fn mask_fill_neg_inf(&self, invalid: &[bool]) -> Result<Tensor> {
        if invalid.len() != self.numel() {
            return Err(Error::msg(format!(
                "mask length {} != tensor numel {}",
                invalid.len(),
                self.numel()
            )));
        }
        let out: Vec<f32> = self
            .data()
            .iter()
            .zip(invalid)
            .map(|(&v, &m)| if m { f32::NEG_INFINITY } else { v })
            .collect();
        let pa = self.clone();
        let mask: Vec<bool> = invalid.to_vec();
        Ok(Tensor::from_op(
            self.inner.shape.clone(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let gin: Vec<f32> = g
                    .iter()
                    .zip(&mask)
                    .map(|(&v, &m)| if m { 0.0 } else { v })
                    .collect();
                pa.accum_grad(&gin);
            }),
        ))
    }

    /// Rotate channel pairs by per-position angles given as pairwise-expanded
    /// `cos`/`sin` tables of the same length as the tensor. Channels beyond
    /// the table's rotated span must carry cos=1, sin=0.
    pub fn rope_apply(&self, cos: &[f32], sin: &[f32]) -> Result<Tensor> {
        let n = self.numel();
        if cos.len() != n || sin.len() != n {
            return Err(Error::msg(format!(
                "rope tables of length {}/{} do not match tensor numel {}",
                cos.len(),
                sin.len(),
                n
            )));
        }
        let d = *self.shape().last().unwrap_or(&0);
        if d % 2 != 0 {
            return Err(Error::msg("rope_apply: last dimension must be even"));
        }
        let data = self.data();
        let mut out = vec![0.0f32; n];
        for base in (0..n).step_by(d) {
            for p in (0..d).step_by(2) {
                let (c, s) = (cos[base + p], sin[base + p]);
                let (x0, x1) = (data[base + p], data[base + p + 1]);
                out[base + p] = x0 * c - x1 * s;
                out[base + p + 1] = x0 * s + x1 * c;
            }
        }
        drop(data);
        let pa = self.clone();
        let (cos, sin) = (cos.to_vec(), sin.to_vec());
        Ok(Tensor::from_op(
            self.inner.shape.clone(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gin = vec![0.0f32; g.len()];
                for base in (0..g.len()).step_by(d) {
                    for p in (0..d).step_by(2) {
                        let (c, s) = (cos[base + p], sin[base + p]);
                        let (g0, g1) = (g[base + p], g[base + p + 1]);
                        gin[base + p] = g0 * c + g1 * s;
                        gin[base + p + 1] = -g0 * s + g1 * c;
                    }
                }
                pa.accum_grad(&gin);
            }),
        ))
    }
}

// Plain f32 matmul kernels, ikj loop order.
fn mm_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            1.0,
            out.as_mut_ptr(), n as isize, 1,
        );
    }
}

// out[m,k] += a[m,n] * b[k,n]^T
fn mm_nt(a: &[f32], b: &[f32], m: usize, n: usize, k: usize, out: &mut [f32]) {
    debug_assert!(a.len() >= m * n && b.len() >= k * n && out.len() >= m * k);
    unsafe {
        matrixmultiply::sgemm(
            m, n, k, 1.0,
            a.as_ptr(), n as isize, 1,
            b.as_ptr(), 1, n as isize,
            1.0,
            out.as_mut_ptr(), k as isize, 1,
        );
    }
}

// out[k,n] += a[m,k]^T * b[m,n]
fn mm_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert!(a.len() >= m * k && b.len() >= m * n && out.len() >= k * n);
    unsafe {
        matrixmultiply::sgemm(
            k, m, n, 1.0,
            a.as_ptr(), 1, k as isize,
            b.as_ptr(), n as isize, 1,
            1.0,
            out.as_mut_ptr(), n as isize, 1,
        );
    }
}
