//! Primitive differentiable ops: elementwise arithmetic, matmul, structural
//! rearrangement and reductions.

use crate::error::{Error, Result};
use crate::tensor::gemm::{gemm, Mat};
use crate::tensor::value::{numel, split_axis};
use crate::tensor::{Backward, GradCtx, Tape, Tensor, Var};

/// Period of `b` when broadcast against `a`: equal shapes, or `b` missing the
/// leading batch extent (dropped or set to 1).
fn broadcast_period(op: &'static str, a: &[usize], b: &[usize]) -> Result<usize> {
    if a == b {
        return Ok(numel(a));
    }
    let tail_ok = if b.len() == a.len() {
        b[0] == 1 && b[1..] == a[1..]
    } else {
        b.len() + 1 == a.len() && b == &a[1..]
    };
    if tail_ok {
        Ok(numel(b))
    } else {
        Err(Error::shape(op, a, b))
    }
}

struct AddOp {
    period: usize,
}

impl Backward for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, ctx: &mut GradCtx<'_>) {
        let g = ctx.grad_out().to_vec();
        if let Some(ga) = ctx.grad_mut(0) {
            ga.iter_mut().zip(&g).for_each(|(a, v)| *a += v);
        }
        let period = self.period;
        if let Some(gb) = ctx.grad_mut(1) {
            for chunk in g.chunks(period) {
                gb.iter_mut().zip(chunk).for_each(|(b, v)| *b += v);
            }
        }
    }
}

struct MulOp {
    period: usize,
}

impl Backward for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, ctx: &mut GradCtx<'_>) {
        let g = ctx.grad_out().to_vec();
        let a = ctx.input(0).data().to_vec();
        let b = ctx.input(1).data().to_vec();
        let p = self.period;
        if let Some(ga) = ctx.grad_mut(0) {
            for (i, v) in ga.iter_mut().enumerate() {
                *v += g[i] * b[i % p];
            }
        }
        if let Some(gb) = ctx.grad_mut(1) {
            for (i, (&gi, &ai)) in g.iter().zip(&a).enumerate() {
                gb[i % p] += gi * ai;
            }
        }
    }
}

struct ScaleOp(f64);

impl Backward for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, ctx: &mut GradCtx<'_>) {
        let g = ctx.grad_out().to_vec();
        if let Some(ga) = ctx.grad_mut(0) {
            ga.iter_mut().zip(&g).for_each(|(a, v)| *a += self.0 * v);
        }
    }
}

struct SumOp {
    scale: f64,
}

impl Backward for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, ctx: &mut GradCtx<'_>) {
        let g = ctx.grad_out()[0] * self.scale;
        if let Some(ga) = ctx.grad_mut(0) {
            ga.iter_mut().for_each(|a| *a += g);
        }
    }
}

/// Batched matmul over the trailing two extents; `b` either shares the batch
/// extents of `a` or is a plain matrix shared by every batch entry.
struct MatMulOp {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_shared: bool,
    transpose_b: bool,
}

impl MatMulOp {
    fn b_block<'a>(&self, b: &'a [f64], i: usize) -> Mat<'a> {
        let size = self.k * self.n;
        let off = if self.b_shared { 0 } else { i * size };
        let block = &b[off..off + size];
        if self.transpose_b {
            Mat::new(block, self.n, self.k).t()
        } else {
            Mat::new(block, self.k, self.n)
        }
    }
}

impl Backward for MatMulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, ctx: &mut GradCtx<'_>) {
        let (m, k, n) = (self.m, self.k, self.n);
        let g = ctx.grad_out().to_vec();
        let a = ctx.input(0).data().to_vec();
        let b = ctx.input(1).data().to_vec();
        if let Some(ga) = ctx.grad_mut(0) {
            for i in 0..self.batch {
                let gi = Mat::new(&g[i * m * n..(i + 1) * m * n], m, n);
                gemm(gi, self.b_block(&b, i).t(), 1.0, &mut ga[i * m * k..(i + 1) * m * k]);
            }
        }
        if let Some(gb) = ctx.grad_mut(1) {
            for i in 0..self.batch {
                let ai = Mat::new(&a[i * m * k..(i + 1) * m * k], m, k);
                let gi = Mat::new(&g[i * m * n..(i + 1) * m * n], m, n);
                let off = if self.b_shared { 0 } else { i * k * n };
                let dst = &mut gb[off..off + k * n];
                if self.transpose_b {
                    // d(bᵀ) = aᵀ g, so d(b) = gᵀ a
                    gemm(gi.t(), ai, 1.0, dst);
                } else {
                    gemm(ai.t(), gi, 1.0, dst);
                }
            }
        }
    }
}

/// `out[i] = x[index[i]]`; covers transposes, slices and window shuffles.
pub(crate) struct GatherOp {
    pub index: Vec<usize>,
}

impl Backward for GatherOp {
    fn name(&self) -> &'static str {
        "gather"
    }
    fn backward(&self, ctx: &mut GradCtx<'_>) {
        let g = ctx.grad_out().to_vec();
        if let Some(gx) = ctx.grad_mut(0) {
            for (&src, v) in self.index.iter().zip(&g) {
                gx[src] += v;
            }
        }
    }
}

struct ReshapeOp;

impl Backward for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, ctx: &mut GradCtx<'_>) {
        let g = ctx.grad_out().to_vec();
        if let Some(gx) = ctx.grad_mut(0) {
            gx.iter_mut().zip(&g).for_each(|(a, v)| *a += v);
        }
    }
}

struct ConcatOp {
    outer: usize,
    inner: usize,
    extents: Vec<usize>,
}

impl Backward for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, ctx: &mut GradCtx<'_>) {
        let g = ctx.grad_out().to_vec();
        let total: usize = self.extents.iter().sum();
        let mut offset = 0;
        for (i, &ext) in self.extents.iter().enumerate() {
            if let Some(gi) = ctx.grad_mut(i) {
                let block = ext * self.inner;
                for o in 0..self.outer {
                    let src = &g[(o * total + offset) * self.inner..][..block];
                    gi[o * block..(o + 1) * block]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, v)| *a += v);
                }
            }
            offset += ext;
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Source index for every element of `x.permute(perm)`.
fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let total = numel(shape);
    let mut index = Vec::with_capacity(total);
    let mut counter = vec![0usize; shape.len()];
    for _ in 0..total {
        let src: usize = counter.iter().zip(perm).map(|(&c, &p)| c * src_strides[p]).sum();
        index.push(src);
        for ax in (0..counter.len()).rev() {
            counter[ax] += 1;
            if counter[ax] < out_shape[ax] {
                break;
            }
            counter[ax] = 0;
        }
    }
    index
}

impl Tape {
    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, usize)> {
        let (av, bv) = (self.value(a), self.value(b));
        let period = broadcast_period(op_name, av.shape(), bv.shape())?;
        let bd = bv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % period]))
            .collect();
        Ok((Tensor::new(av.shape(), data)?, period))
    }

    /// Elementwise sum; `b` may omit (or set to 1) the leading batch extent.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, period) = self.binary_elementwise("add", a, b, |x, y| x + y)?;
        self.record(out, &[a, b], AddOp { period })
    }

    /// `a - b`, with the same broadcasting as [`Tape::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// Elementwise product; `b` may omit (or set to 1) the leading batch extent.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, period) = self.binary_elementwise("mul", a, b, |x, y| x * y)?;
        self.record(out, &[a, b], MulOp { period })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * factor).collect();
        let out = Tensor::new(av.shape(), data)?;
        self.record(out, &[a], ScaleOp(factor))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.record(Tensor::scalar(s), &[a], SumOp { scale: 1.0 })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let n = v.len() as f64;
        let s = v.sum() / n;
        self.record(Tensor::scalar(s), &[a], SumOp { scale: 1.0 / n })
    }

    /// Matrix product on the trailing two extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` on the trailing two extents.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (bk, n) = if transpose_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let b_shared = batch_b.is_empty() && !batch_a.is_empty();
        if k != bk || !(b_shared || batch_a == batch_b) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch: usize = batch_a.iter().product();
        let op = MatMulOp {
            batch,
            m,
            k,
            n,
            b_shared,
            transpose_b,
        };
        let mut data = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            let ai = Mat::new(&ad[i * m * k..(i + 1) * m * k], m, k);
            gemm(ai, op.b_block(bd, i), 0.0, &mut data[i * m * n..(i + 1) * m * n]);
        }
        let mut shape = batch_a.to_vec();
        shape.extend([m, n]);
        self.record(Tensor::new(&shape, data)?, &[a, b], op)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.record(out, &[a], ReshapeOp)
    }

    /// Output element `i` reads input element `index[i]`.
    pub(crate) fn gather(&mut self, a: Var, shape: &[usize], index: Vec<usize>) -> Result<Var> {
        let src = self.value(a).data();
        debug_assert!(index.iter().all(|&i| i < src.len()));
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape, data)?;
        self.record(out, &[a], GatherOp { index })
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() {
            return Err(Error::invalid(
                "permute",
                format!("permutation {perm:?} for rank {}", shape.len()),
            ));
        }
        for &p in perm {
            if p >= shape.len() {
                return Err(Error::AxisOutOfRange {
                    op: "permute",
                    axis: p,
                    rank: shape.len(),
                });
            }
            if std::mem::replace(&mut seen[p], true) {
                return Err(Error::invalid("permute", format!("repeated axis in {perm:?}")));
            }
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let index = permute_index(&shape, perm);
        self.gather(a, &out_shape, index)
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, ax1: usize, ax2: usize) -> Result<Var> {
        let rank = self.shape(a).len();
        for ax in [ax1, ax2] {
            if ax >= rank {
                return Err(Error::AxisOutOfRange {
                    op: "transpose",
                    axis: ax,
                    rank,
                });
            }
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(ax1, ax2);
        self.permute(a, &perm)
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::AxisOutOfRange {
                op: "slice",
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} on extent {}", start + len, shape[axis]),
            ));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            index.extend(base..base + len * inner);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(a, &out_shape, index)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => return Err(Error::invalid("concat", "no inputs")),
        };
        if axis >= first.len() {
            return Err(Error::AxisOutOfRange {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut extents = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            extents.push(s[axis]);
        }
        let total: usize = extents.iter().sum();
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &ext) in parts.iter().zip(&extents) {
                let d = self.value(p).data();
                data.extend_from_slice(&d[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let op = ConcatOp { outer, inner, extents };
        self.record(Tensor::new(&shape, data)?, parts, op)
    }
}
