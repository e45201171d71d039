//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Values
//! are computed eagerly; [`Graph::backward`] replays the tape in reverse and
//! accumulates gradients into every node that depends on a tracked leaf.
//! Leaf gradients persist across `backward` calls until [`Graph::zero_grad`].

use crate::error::{contract, dim_err, Result};
use crate::tensor::{gemm, strides, MatView, Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Bcast {
    Same,
    /// Input is a trailing suffix of the output shape.
    Modulo(usize),
    /// Input is a leading prefix of the output shape followed by unit extents.
    Div(usize),
    Index(Vec<usize>),
}

impl Bcast {
    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Modulo(n) => i % n,
            Bcast::Div(n) => i / n,
            Bcast::Index(v) => v[i],
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn broadcast_map(input: &[usize], out: &[usize]) -> Bcast {
    if input == out {
        return Bcast::Same;
    }
    let in_numel: usize = input.iter().product();
    let out_numel: usize = out.iter().product();
    let rank = out.len();
    let padded: Vec<usize> = std::iter::repeat(1)
        .take(rank - input.len())
        .chain(input.iter().copied())
        .collect();
    // suffix: leading dims all 1 up to some k, trailing equal
    if let Some(k) = padded.iter().position(|&d| d != 1) {
        if padded[k..] == out[k..] {
            return Bcast::Modulo(in_numel);
        }
        let last = padded.iter().rposition(|&d| d != 1).unwrap_or(0);
        if padded[..=last] == out[..=last] {
            return Bcast::Div(out_numel / in_numel);
        }
    } else {
        return Bcast::Div(out_numel);
    }
    let in_strides = strides(&padded);
    let out_strides = strides(out);
    let map = (0..out_numel)
        .map(|i| {
            let mut off = 0;
            for d in 0..rank {
                let coord = (i / out_strides[d]) % out[d];
                if padded[d] != 1 {
                    off += coord * in_strides[d];
                }
            }
            off
        })
        .collect();
    Bcast::Index(map)
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var, Bcast, Bcast),
    Sub(Var, Var, Bcast, Bcast),
    Mul(Var, Var, Bcast, Bcast),
    Scale(Var, T),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch_a: Bcast,
        batch_b: Bcast,
        flat: bool,
    },
    Softmax(Var),
    Gelu(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    RepeatOuter { x: Var },
    GatherRows { x: Var, index: Vec<usize> },
    Unfold3x3 { x: Var, h: usize, w: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Sum(Var),
    Mean(Var),
}

/// Recording tape of tensor operations.
pub struct Graph<T: Real = f32> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    tracked: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            ops: Vec::new(),
            tracked: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Drops every node created after the first `len`, so a prefix of the
    /// tape (bound parameters, cached conditioning) can be reused.
    pub fn truncate(&mut self, len: usize) {
        self.values.truncate(len);
        self.ops.truncate(len);
        self.tracked.truncate(len);
        self.grads.truncate(len);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Result<Var> {
        #[cfg(debug_assertions)]
        value.check_finite(op_name(&op))?;
        self.values.push(value);
        self.ops.push(op);
        self.tracked.push(tracked);
        self.grads.push(None);
        Ok(Var(self.values.len() - 1))
    }

    /// Leaf that accumulates a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(Op::Leaf);
        self.tracked.push(requires_grad);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.tracked[v.0]
    }

    /// Accumulated gradient of a node, shaped like its value.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.values[v.0].shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Copy of a node's value as an untracked leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.values[v.0].clone();
        self.constant(value)
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.tracked[v.0])
    }

    fn binary(&mut self, a: Var, b: Var, kind: u8) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| {
            dim_err(format!("cannot broadcast {sa:?} with {sb:?}"))
        })?;
        let ma = broadcast_map(&sa, &out_shape);
        let mb = broadcast_map(&sb, &out_shape);
        let n: usize = out_shape.iter().product();
        let (da, db) = (self.values[a.0].data(), self.values[b.0].data());
        let data: Vec<T> = match kind {
            0 => (0..n).map(|i| da[ma.at(i)] + db[mb.at(i)]).collect(),
            1 => (0..n).map(|i| da[ma.at(i)] - db[mb.at(i)]).collect(),
            _ => (0..n).map(|i| da[ma.at(i)] * db[mb.at(i)]).collect(),
        };
        let op = match kind {
            0 => Op::Add(a, b, ma, mb),
            1 => Op::Sub(a, b, ma, mb),
            _ => Op::Mul(a, b, ma, mb),
        };
        let tracked = self.any_tracked(&[a, b]);
        self.push(Tensor::new(out_shape, data)?, op, tracked)
    }

    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 1)
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 2)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.values[x.0].map(|v| v * c);
        let tracked = self.tracked[x.0];
        self.push(value, Op::Scale(x, c), tracked)
    }

    /// Batched matrix product `a[.., p, q] x b[.., q, r]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched product with the last two axes of `b` transposed: `a[.., p, q] x b[.., r, q]^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || {
            dim_err(format!(
                "matmul{} shapes {sa:?} and {sb:?} are incompatible",
                if trans_b { "_t" } else { "" }
            ))
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (qb, r) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if q != qb {
            return Err(mismatch());
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let bo = broadcast_shape(ba, bb).ok_or_else(mismatch)?;
        let flat = bb.is_empty();
        let batch_a = broadcast_map(ba, &bo);
        let batch_b = broadcast_map(bb, &bo);
        let nb: usize = bo.iter().product();
        let mut out = vec![T::zero(); nb * p * r];
        let (ad, bd) = (self.values[a.0].data(), self.values[b.0].data());
        let bview = |off: usize| {
            if trans_b {
                MatView::transposed(off, q)
            } else {
                MatView::row_major(off, r)
            }
        };
        if flat {
            gemm(
                nb * p,
                q,
                r,
                T::one(),
                ad,
                MatView::row_major(0, q),
                bd,
                bview(0),
                T::zero(),
                &mut out,
                MatView::row_major(0, r),
            );
        } else {
            for o in 0..nb {
                let (ia, ib) = (batch_a.at(o), batch_b.at(o));
                gemm(
                    p,
                    q,
                    r,
                    T::one(),
                    ad,
                    MatView::row_major(ia * p * q, q),
                    bd,
                    bview(ib * q * r),
                    T::zero(),
                    &mut out,
                    MatView::row_major(o * p * r, r),
                );
            }
        }
        let mut shape = bo;
        shape.extend([p, r]);
        let tracked = self.any_tracked(&[a, b]);
        self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                trans_b,
                batch_a,
                batch_b,
                flat,
            },
            tracked,
        )
    }

    /// `x W + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(dim_err(format!(
                "linear: input {sx:?} does not match weight {sw:?}"
            )));
        }
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => {
                if self.shape(b) != [sw[1]] {
                    return Err(dim_err(format!(
                        "linear: bias {:?} does not match weight {sw:?}",
                        self.shape(b)
                    )));
                }
                self.add(y, b)
            }
            None => Ok(y),
        }
    }

    /// Softmax over the last axis, stabilised by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.weighted_softmax(x, None)
    }

    /// `y_j = w_j exp(x_j) / sum_k w_k exp(x_k)` over the last axis.
    /// With unit weights this is the ordinary softmax.
    pub fn weighted_softmax(&mut self, x: Var, weights: Option<&[T]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let m = *shape.last().ok_or_else(|| dim_err("softmax of a rank-0 value"))?;
        if let Some(w) = weights {
            if w.len() != m {
                return Err(dim_err(format!(
                    "softmax weights of length {} for last axis {m}",
                    w.len()
                )));
            }
            if w.iter().all(|&v| v <= T::zero()) {
                return Err(contract("softmax weights must have a positive entry"));
            }
        }
        let src = self.values[x.0].data();
        let mut out = vec![T::zero(); src.len()];
        for (row, dst) in src.chunks_exact(m).zip(out.chunks_exact_mut(m)) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for (j, (d, &v)) in dst.iter_mut().zip(row).enumerate() {
                let e = (v - mx).exp();
                *d = match weights {
                    Some(w) => e * w[j],
                    None => e,
                };
                total += *d;
            }
            let inv = T::one() / total;
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        let tracked = self.tracked[x.0];
        self.push(Tensor::new(shape, out)?, Op::Softmax(x), tracked)
    }

    /// Exact GELU, `x * Phi(x)` with the erf form of the Gaussian CDF.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.values[x.0].map(gelu_scalar);
        let tracked = self.tracked[x.0];
        self.push(value, Op::Gelu(x), tracked)
    }

    /// Normalises the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let m = *shape.last().ok_or_else(|| dim_err("layer_norm of a rank-0 value"))?;
        let src = self.values[x.0].data();
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(src.len() / m);
        let mf = T::c(m as f64);
        for (row, dst) in src.chunks_exact(m).zip(out.chunks_exact_mut(m)) {
            let mean = row.iter().copied().sum::<T>() / mf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
            let is = T::one() / (var + T::c(eps)).sqrt();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let tracked = self.tracked[x.0];
        self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, inv_std }, tracked)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.values[x.0].clone().reshape(shape.to_vec())?;
        let tracked = self.tracked[x.0];
        self.push(value, Op::Reshape(x), tracked)
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let (out_shape, data) = permute_data(self.values[x.0].data(), &shape, perm);
        let tracked = self.tracked[x.0];
        self.push(
            Tensor::new(out_shape, data)?,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            tracked,
        )
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| dim_err("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(dim_err(format!("concat axis {axis} for rank {}", first.len())));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(dim_err(format!(
                    "concat along {axis}: {s:?} does not match {first:?}"
                )));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.values[p.0].data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let tracked = self.any_tracked(parts);
        self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            tracked,
        )
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(dim_err(format!(
                "slice {start}..{} along axis {axis} of {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.values[x.0].data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let tracked = self.tracked[x.0];
        self.push(Tensor::new(out_shape, data)?, Op::Slice { x, axis, start }, tracked)
    }

    /// Repeats a `[1, ..]` value `times` times along the leading axis.
    pub fn repeat_outer(&mut self, x: Var, times: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.first() != Some(&1) || times == 0 {
            return Err(dim_err(format!("repeat_outer needs a [1, ..] value, got {shape:?}")));
        }
        let src = self.values[x.0].data();
        let data: Vec<T> = (0..times).flat_map(|_| src.iter().copied()).collect();
        let mut out_shape = shape;
        out_shape[0] = times;
        let tracked = self.tracked[x.0];
        self.push(Tensor::new(out_shape, data)?, Op::RepeatOuter { x }, tracked)
    }

    /// Token gather on `[B, S, D]`: output row `(b, s)` is input row `(b, index[b][s])`.
    pub fn gather_rows(&mut self, x: Var, index: &[Vec<usize>]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || index.len() != shape[0] {
            return Err(dim_err(format!(
                "gather_rows on {shape:?} with {} index rows",
                index.len()
            )));
        }
        let (s, d) = (shape[1], shape[2]);
        let out_s = index[0].len();
        if out_s == 0 || index.iter().any(|r| r.len() != out_s || r.iter().any(|&i| i >= s)) {
            return Err(dim_err("gather_rows: ragged or out-of-range index"));
        }
        let src = self.values[x.0].data();
        let mut data = Vec::with_capacity(shape[0] * out_s * d);
        let mut flat = Vec::with_capacity(shape[0] * out_s);
        for (b, row) in index.iter().enumerate() {
            for &i in row {
                let at = (b * s + i) * d;
                data.extend_from_slice(&src[at..at + d]);
                flat.push(b * s + i);
            }
        }
        let tracked = self.tracked[x.0];
        self.push(
            Tensor::new([shape[0], out_s, d], data)?,
            Op::GatherRows { x, index: flat },
            tracked,
        )
    }

    /// 3x3 neighbourhood extraction on a `[B, h*w, C]` token grid with zero
    /// padding; output is `[B, h*w, 9*C]` ordered (dy, dx, channel).
    pub fn unfold3x3(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != h * w {
            return Err(dim_err(format!("unfold3x3 of {shape:?} on a {h}x{w} grid")));
        }
        let (b, c) = (shape[0], shape[2]);
        let src = self.values[x.0].data();
        let mut data = vec![T::zero(); b * h * w * 9 * c];
        for_each_unfold(b, h, w, c, |dst, s| {
            data[dst..dst + c].copy_from_slice(&src[s..s + c]);
        });
        let tracked = self.tracked[x.0];
        self.push(
            Tensor::new([b, h * w, 9 * c], data)?,
            Op::Unfold3x3 { x, h, w },
            tracked,
        )
    }

    /// Row lookup into a `[V, D]` table; output is `out_shape ++ [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], out_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || out_shape.iter().product::<usize>() != ids.len() {
            return Err(dim_err(format!(
                "embedding: table {ts:?}, {} ids for shape {out_shape:?}",
                ids.len()
            )));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(dim_err(format!("embedding id {bad} outside table of {v} rows")));
        }
        let src = self.values[table.0].data();
        let data: Vec<T> = ids
            .iter()
            .flat_map(|&i| src[i * d..(i + 1) * d].iter().copied())
            .collect();
        let mut shape = out_shape.to_vec();
        shape.push(d);
        let tracked = self.tracked[table.0];
        self.push(
            Tensor::new(shape, data)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            tracked,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.values[x.0].data().iter().copied().sum();
        let tracked = self.tracked[x.0];
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.values[x.0].data();
        let s = v.iter().copied().sum::<T>() / T::c(v.len() as f64);
        let tracked = self.tracked[x.0];
        self.push(Tensor::scalar(s), Op::Mean(x), tracked)
    }

    /// Mean squared error between two equally shaped values.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!(
                "mse between {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Accumulates `d loss / d node` into every tracked node.
    ///
    /// Intermediate gradients are recomputed on each call; leaf gradients
    /// accumulate until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.tracked[loss.0] {
            return Ok(());
        }
        for i in 0..=loss.0 {
            if !matches!(self.ops[i], Op::Leaf) {
                self.grads[i] = None;
            }
        }
        accumulate(&mut self.grads[loss.0], 1, |g| g[0] += T::one());
        for i in (0..=loss.0).rev() {
            if matches!(self.ops[i], Op::Leaf) || !self.tracked[i] {
                continue;
            }
            let Some(dy) = self.grads[i].take() else { continue };
            self.backprop(i, &dy)?;
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    fn backprop(&mut self, i: usize, dy: &[T]) -> Result<()> {
        let Graph {
            values,
            ops,
            tracked,
            grads,
        } = self;
        let numel = |v: Var| values[v.0].numel();
        match &ops[i] {
            Op::Leaf => {}
            Op::Add(a, b, ma, mb) | Op::Sub(a, b, ma, mb) => {
                let sign = if matches!(ops[i], Op::Sub(..)) { -T::one() } else { T::one() };
                if tracked[a.0] {
                    accumulate(&mut grads[a.0], numel(*a), |g| {
                        for (k, &d) in dy.iter().enumerate() {
                            g[ma.at(k)] += d;
                        }
                    });
                }
                if tracked[b.0] {
                    accumulate(&mut grads[b.0], numel(*b), |g| {
                        for (k, &d) in dy.iter().enumerate() {
                            g[mb.at(k)] += sign * d;
                        }
                    });
                }
            }
            Op::Mul(a, b, ma, mb) => {
                let (av, bv) = (values[a.0].data(), values[b.0].data());
                if tracked[a.0] {
                    accumulate(&mut grads[a.0], av.len(), |g| {
                        for (k, &d) in dy.iter().enumerate() {
                            g[ma.at(k)] += d * bv[mb.at(k)];
                        }
                    });
                }
                if tracked[b.0] {
                    accumulate(&mut grads[b.0], bv.len(), |g| {
                        for (k, &d) in dy.iter().enumerate() {
                            g[mb.at(k)] += d * av[ma.at(k)];
                        }
                    });
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                accumulate(&mut grads[x.0], dy.len(), |g| {
                    for (g, &d) in g.iter_mut().zip(dy) {
                        *g += d * c;
                    }
                });
            }
            Op::MatMul {
                a,
                b,
                trans_b,
                batch_a,
                batch_b,
                flat,
            } => {
                let (sa, sb) = (values[a.0].shape(), values[b.0].shape());
                let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let r = if *trans_b { sb[sb.len() - 2] } else { sb[sb.len() - 1] };
                let nb = dy.len() / (p * r);
                let (ad, bd) = (values[a.0].data(), values[b.0].data());
                let one = T::one();
                if tracked[a.0] {
                    accumulate(&mut grads[a.0], ad.len(), |g| {
                        let bview = |off| {
                            if *trans_b {
                                MatView::row_major(off, q)
                            } else {
                                MatView::transposed(off, r)
                            }
                        };
                        if *flat {
                            gemm(nb * p, r, q, one, dy, MatView::row_major(0, r), bd, bview(0), one, g, MatView::row_major(0, q));
                        } else {
                            for o in 0..nb {
                                let (ia, ib) = (batch_a.at(o), batch_b.at(o));
                                gemm(p, r, q, one, dy, MatView::row_major(o * p * r, r), bd, bview(ib * q * r), one, g, MatView::row_major(ia * p * q, q));
                            }
                        }
                    });
                }
                if tracked[b.0] {
                    accumulate(&mut grads[b.0], bd.len(), |g| {
                        if *flat {
                            if *trans_b {
                                // dB[r,q] += dY^T[r, rows] A[rows, q]
                                gemm(r, nb * p, q, one, dy, MatView::transposed(0, r), ad, MatView::row_major(0, q), one, g, MatView::row_major(0, q));
                            } else {
                                gemm(q, nb * p, r, one, ad, MatView::transposed(0, q), dy, MatView::row_major(0, r), one, g, MatView::row_major(0, r));
                            }
                        } else {
                            for o in 0..nb {
                                let (ia, ib) = (batch_a.at(o), batch_b.at(o));
                                if *trans_b {
                                    gemm(r, p, q, one, dy, MatView::transposed(o * p * r, r), ad, MatView::row_major(ia * p * q, q), one, g, MatView::row_major(ib * q * r, q));
                                } else {
                                    gemm(q, p, r, one, ad, MatView::transposed(ia * p * q, q), dy, MatView::row_major(o * p * r, r), one, g, MatView::row_major(ib * q * r, r));
                                }
                            }
                        }
                    });
                }
            }
            Op::Softmax(x) => {
                let y = values[i].data();
                let m = *values[i].shape().last().expect("rank");
                accumulate(&mut grads[x.0], y.len(), |g| {
                    for ((yr, dr), gr) in y.chunks_exact(m).zip(dy.chunks_exact(m)).zip(g.chunks_exact_mut(m)) {
                        let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                        for ((g, &yv), &d) in gr.iter_mut().zip(yr).zip(dr) {
                            *g += yv * (d - dot);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = values[x.0].data();
                accumulate(&mut grads[x.0], xv.len(), |g| {
                    for ((g, &v), &d) in g.iter_mut().zip(xv).zip(dy) {
                        *g += d * gelu_grad_scalar(v);
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let y = values[i].data();
                let m = *values[i].shape().last().expect("rank");
                let mf = T::c(m as f64);
                accumulate(&mut grads[x.0], y.len(), |g| {
                    for (((yr, dr), gr), &is) in y
                        .chunks_exact(m)
                        .zip(dy.chunks_exact(m))
                        .zip(g.chunks_exact_mut(m))
                        .zip(inv_std)
                    {
                        let mean_d = dr.iter().copied().sum::<T>() / mf;
                        let mean_dy = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum::<T>() / mf;
                        for ((g, &yv), &d) in gr.iter_mut().zip(yr).zip(dr) {
                            *g += is * (d - mean_d - yv * mean_dy);
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                accumulate(&mut grads[x.0], dy.len(), |g| add_into(g, dy));
            }
            Op::Permute { x, perm } => {
                let out_shape = values[i].shape();
                let mut inv = vec![0; perm.len()];
                for (k, &p) in perm.iter().enumerate() {
                    inv[p] = k;
                }
                let (_, back) = permute_data(dy, out_shape, &inv);
                accumulate(&mut grads[x.0], dy.len(), |g| add_into(g, &back));
            }
            Op::Concat { parts, axis } => {
                let out_shape = values[i].shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = values[p.0].shape()[*axis] * inner;
                    if tracked[p.0] {
                        accumulate(&mut grads[p.0], outer * chunk, |g| {
                            for o in 0..outer {
                                add_into(
                                    &mut g[o * chunk..(o + 1) * chunk],
                                    &dy[o * total + offset..o * total + offset + chunk],
                                );
                            }
                        });
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = values[x.0].shape();
                let len = values[i].shape()[*axis];
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                accumulate(&mut grads[x.0], values[x.0].numel(), |g| {
                    for o in 0..outer {
                        let base = (o * in_shape[*axis] + start) * inner;
                        add_into(&mut g[base..base + len * inner], &dy[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::RepeatOuter { x } => {
                let n = values[x.0].numel();
                accumulate(&mut grads[x.0], n, |g| {
                    for chunk in dy.chunks_exact(n) {
                        add_into(g, chunk);
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let d = *values[x.0].shape().last().expect("rank");
                accumulate(&mut grads[x.0], values[x.0].numel(), |g| {
                    for (k, &row) in index.iter().enumerate() {
                        add_into(&mut g[row * d..(row + 1) * d], &dy[k * d..(k + 1) * d]);
                    }
                });
            }
            Op::Unfold3x3 { x, h, w } => {
                let s = values[x.0].shape();
                let (b, c) = (s[0], s[2]);
                accumulate(&mut grads[x.0], values[x.0].numel(), |g| {
                    for_each_unfold(b, *h, *w, c, |dst, src| {
                        add_into(&mut g[src..src + c], &dy[dst..dst + c]);
                    });
                });
            }
            Op::Embedding { table, ids } => {
                let d = values[table.0].shape()[1];
                accumulate(&mut grads[table.0], values[table.0].numel(), |g| {
                    for (k, &id) in ids.iter().enumerate() {
                        add_into(&mut g[id * d..(id + 1) * d], &dy[k * d..(k + 1) * d]);
                    }
                });
            }
            Op::Sum(x) => {
                let d = dy[0];
                accumulate(&mut grads[x.0], numel(*x), |g| g.iter_mut().for_each(|g| *g += d));
            }
            Op::Mean(x) => {
                let n = numel(*x);
                let d = dy[0] / T::c(n as f64);
                accumulate(&mut grads[x.0], n, |g| g.iter_mut().for_each(|g| *g += d));
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let g = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(g);
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn for_each_unfold(b: usize, h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize)) {
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let cell = (bi * h * w + y * w + x) * 9 * c;
                for dy in 0..3 {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let sx = x as isize + dx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = (bi * h * w + sy as usize * w + sx as usize) * c;
                        f(cell + (dy * 3 + dx) * c, src);
                    }
                }
            }
        }
    }
}

pub(crate) fn permute_data<T: Copy>(src: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let rank = shape.len();
    // stride in the source for each output axis
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..src.len() {
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

#[inline]
pub fn gelu_scalar<T: Real>(x: T) -> T {
    x * T::c(0.5) * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let cdf = T::c(0.5) * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::c(0.5)).exp() * T::c(0.398_942_280_401_432_7);
    cdf + x * pdf
}

#[allow(dead_code)]
fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::MatMul { .. } => "matmul",
        Op::Softmax(_) => "softmax",
        Op::Gelu(_) => "gelu",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Reshape(_) => "reshape",
        Op::Permute { .. } => "permute",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::RepeatOuter { .. } => "repeat_outer",
        Op::GatherRows { .. } => "gather_rows",
        Op::Unfold3x3 { .. } => "unfold3x3",
        Op::Embedding { .. } => "embedding",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
    }
}
