//! Eager reverse-mode tape.
//!
//! Every primitive evaluates immediately and records its operands. `backward`
//! walks the tape in reverse and accumulates vector-Jacobian products.

use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::{Axis, Tensor3};
use crate::error::{Error, Result};
use crate::kan::SplineGrid;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Conv1d { x: Var, w: Var },
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    Softmax { x: Var, axis: Axis },
    Concat { parts: Vec<Var>, axis: Axis },
    Slice { x: Var, axis: Axis, start: usize },
    SliceWrite { base: Var, patch: Var, axis: Axis, start: usize },
    LayerNorm { x: Var, eps: f64 },
    MeanSquare(Var),
    Kan(Box<KanOperands>),
}

#[derive(Debug, Clone)]
struct KanOperands {
    x: Var,
    coef: Var,
    base_w: Var,
    spline_w: Var,
    grid: SplineGrid,
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor3,
    op: Op,
    requires_grad: bool,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn broadcast_dims(op: &'static str, a: [usize; 3], b: [usize; 3]) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for ax in 0..3 {
        out[ax] = if a[ax] == b[ax] {
            a[ax]
        } else if a[ax] == 1 {
            b[ax]
        } else if b[ax] == 1 {
            a[ax]
        } else {
            return Err(Error::shape(
                op,
                format!("cannot broadcast {a:?} with {b:?}"),
            ));
        };
    }
    Ok(out)
}

/// Offset into a (possibly broadcast) operand for output index (b, c, l).
#[inline]
fn bcast_offset(dims: [usize; 3], b: usize, c: usize, l: usize) -> usize {
    let b = if dims[0] == 1 { 0 } else { b };
    let c = if dims[1] == 1 { 0 } else { c };
    let l = if dims[2] == 1 { 0 } else { l };
    (b * dims[1] + c) * dims[2] + l
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor3>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor3> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the given shape if nothing flowed to it.
    pub fn get_or_zeros(&self, v: Var, dims: [usize; 3]) -> Tensor3 {
        self.get(v).cloned().unwrap_or_else(|| Tensor3::zeros(dims))
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: BTreeMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor3 {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> [usize; 3] {
        self.nodes[v.0].value.dims()
    }

    /// Leaf node. Tracks gradients iff the tensor is marked `requires_grad`.
    pub fn input(&mut self, t: Tensor3) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::NonFinite("input".into()));
        }
        let requires_grad = t.requires_grad();
        Ok(self.push(t, Op::Leaf, requires_grad))
    }

    /// Leaf node that never receives a gradient.
    pub fn constant(&mut self, t: Tensor3) -> Result<Var> {
        self.input(t.with_grad(false))
    }

    /// Binds a named tensor from `store`. Binding the same name twice returns
    /// the same node, so shared weights accumulate a single gradient.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let v = self.input(store.get(name)?.clone())?;
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Named nodes bound through [`Graph::param`].
    pub fn bound_params(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.bound.iter()
    }

    fn push(&mut self, value: Tensor3, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor3, op: Op, rg: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
        Ok(self.push(value, op, rg))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let dims = broadcast_dims(name, ta.dims(), tb.dims())?;
        let out = if ta.dims() == tb.dims() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor3::new(dims, data)?
        } else {
            let (da, db) = (ta.dims(), tb.dims());
            let (xa, xb) = (ta.data(), tb.data());
            Tensor3::from_fn(dims, |i, j, k| {
                f(xa[bcast_offset(da, i, j, k)], xb[bcast_offset(db, i, j, k)])
            })
        };
        let rg = self.rg(a) || self.rg(b);
        self.push_checked(name, out, op, rg)
    }

    /// Elementwise sum with broadcasting over size-1 axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product with broadcasting over size-1 axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push_checked("scale", out, Op::Scale(a, s), rg)
    }

    /// `a: B×M×K` times `b: B×K×N` (or `1×K×N`, shared across the batch).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let [bs, m, k] = ta.dims();
        let [bb, k2, n] = tb.dims();
        if k != k2 || (bb != bs && bb != 1) {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.dims(), tb.dims()),
            ));
        }
        let mut out = vec![0.0; bs * m * n];
        let (xa, xb) = (ta.data(), tb.data());
        for bi in 0..bs {
            let boff = if bb == 1 { 0 } else { bi * k * n };
            for i in 0..m {
                let row = &mut out[(bi * m + i) * n..(bi * m + i + 1) * n];
                for p in 0..k {
                    let av = xa[(bi * m + i) * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &xb[boff + p * n..boff + (p + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        let out = Tensor3::new([bs, m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("matmul", out, Op::MatMul(a, b), rg)
    }

    /// Swaps the channel and feature axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let [b, c, l] = t.dims();
        let out = Tensor3::from_fn([b, l, c], |i, j, k| t.at(i, k, j));
        let rg = self.rg(a);
        self.push_checked("transpose", out, Op::Transpose(a), rg)
    }

    /// 1-D convolution along the feature axis. `w` is `C_out×C_in×k` with odd
    /// `k`; zero padding keeps the feature length.
    pub fn conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let [bs, cin, len] = tx.dims();
        let [cout, cin2, k] = tw.dims();
        if cin != cin2 || k % 2 == 0 {
            return Err(Error::shape(
                "conv1d",
                format!("input {:?}, kernel {:?}", tx.dims(), tw.dims()),
            ));
        }
        let pad = k / 2;
        let mut out = Tensor3::zeros([bs, cout, len]);
        {
            let (xd, wd) = (tx.data(), tw.data());
            let od = out.data_mut();
            for b in 0..bs {
                for o in 0..cout {
                    let orow = &mut od[(b * cout + o) * len..(b * cout + o + 1) * len];
                    for i in 0..cin {
                        let xrow = &xd[(b * cin + i) * len..(b * cin + i + 1) * len];
                        for t in 0..k {
                            let wv = wd[(o * cin + i) * k + t];
                            // out[l] += w * x[l + t - pad]
                            let (lo, hi) = (pad.saturating_sub(t), (len + pad).saturating_sub(t).min(len));
                            for l in lo..hi {
                                orow[l] += wv * xrow[l + t - pad];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        self.push_checked("conv1d", out, Op::Conv1d { x, w }, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push_checked("sigmoid", out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push_checked("tanh", out, Op::Tanh(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(silu);
        let rg = self.rg(a);
        self.push_checked("silu", out, Op::Silu(a), rg)
    }

    pub fn softmax(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let t = self.value(a);
        let [bs, c, l] = t.dims();
        let mut out = t.clone().with_grad(false);
        match axis {
            Axis::Feature => {
                for row in out.data_mut().chunks_mut(l.max(1)) {
                    softmax_in_place(row.iter_mut());
                }
            }
            Axis::Channel => {
                let od = out.data_mut();
                for b in 0..bs {
                    for k in 0..l {
                        let idx: Vec<usize> = (0..c).map(|j| (b * c + j) * l + k).collect();
                        let mut col: Vec<f64> = idx.iter().map(|&i| od[i]).collect();
                        softmax_in_place(col.iter_mut());
                        for (&i, v) in idx.iter().zip(col) {
                            od[i] = v;
                        }
                    }
                }
            }
        }
        let rg = self.rg(a);
        self.push_checked("softmax", out, Op::Softmax { x: a, axis }, rg)
    }

    /// Concatenation along `axis`; every other axis must agree.
    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no operands"))?;
        let ax = axis.index();
        let mut dims = self.dims(first);
        dims[ax] = 0;
        for (n, &p) in parts.iter().enumerate() {
            let d = self.dims(p);
            for other in 0..3 {
                if other != ax && d[other] != dims[other] {
                    return Err(Error::shape(
                        "concat",
                        format!("operand {n} has dims {d:?}, expected {:?} off-axis", dims),
                    ));
                }
            }
            dims[ax] += d[ax];
        }
        let mut out = Tensor3::zeros(dims);
        let mut at = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            let [bs, c, l] = t.dims();
            for b in 0..bs {
                for j in 0..c {
                    for k in 0..l {
                        match axis {
                            Axis::Channel => out.set(b, at + j, k, t.at(b, j, k)),
                            Axis::Feature => out.set(b, j, at + k, t.at(b, j, k)),
                        }
                    }
                }
            }
            at += t.dims()[ax];
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push_checked(
            "concat",
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    pub fn slice(&mut self, a: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice(axis, start, len)?;
        let rg = self.rg(a);
        self.push_checked("slice", out, Op::Slice { x: a, axis, start }, rg)
    }

    /// Copy of `base` with the range `start..start+len(patch)` along `axis`
    /// replaced by `patch`.
    pub fn slice_write(&mut self, base: Var, patch: Var, axis: Axis, start: usize) -> Result<Var> {
        let (tb, tp) = (self.value(base), self.value(patch));
        let ax = axis.index();
        let (db, dp) = (tb.dims(), tp.dims());
        let fits = (0..3).all(|i| if i == ax { start + dp[i] <= db[i] } else { dp[i] == db[i] });
        if !fits {
            return Err(Error::shape(
                "slice_write",
                format!("patch {dp:?} at {start} does not fit base {db:?}"),
            ));
        }
        let mut out = tb.clone().with_grad(false);
        for b in 0..dp[0] {
            for c in 0..dp[1] {
                for l in 0..dp[2] {
                    let v = tp.at(b, c, l);
                    match axis {
                        Axis::Channel => out.set(b, c + start, l, v),
                        Axis::Feature => out.set(b, c, l + start, v),
                    }
                }
            }
        }
        let rg = self.rg(base) || self.rg(patch);
        self.push_checked(
            "slice_write",
            out,
            Op::SliceWrite {
                base,
                patch,
                axis,
                start,
            },
            rg,
        )
    }

    /// Standardizes each (batch, channel) row over the feature axis. No affine.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        let l = t.features();
        let mut out = t.clone().with_grad(false);
        if l > 0 {
            for row in out.data_mut().chunks_mut(l) {
                let (mean, inv) = row_stats(row, eps);
                for v in row.iter_mut() {
                    *v = (*v - mean) * inv;
                }
            }
        }
        let rg = self.rg(a);
        self.push_checked("layer_norm", out, Op::LayerNorm { x: a, eps }, rg)
    }

    /// Mean of squared entries, as a `1×1×1` tensor.
    pub fn mean_square(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::shape("mean_square", "empty operand"));
        }
        let v = t.data().iter().map(|x| x * x).sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push_checked("mean_square", Tensor3::full([1, 1, 1], v), Op::MeanSquare(a), rg)
    }

    /// KAN layer over the feature axis: `out[.., j] = Σ_i w_b[j,i]·silu(x_i) +
    /// w_s[j,i]·Σ_q coef[j,i,q]·B_q(x_i)`.
    ///
    /// Shapes: `x: B×C×n`, `coef: m×n×(G+k)`, `base_w`/`spline_w: 1×m×n`.
    pub fn kan(
        &mut self,
        x: Var,
        coef: Var,
        base_w: Var,
        spline_w: Var,
        grid: &SplineGrid,
    ) -> Result<Var> {
        let tx = self.value(x);
        let [bs, c, n] = tx.dims();
        let [m, n2, nb] = self.dims(coef);
        if n2 != n || nb != grid.num_basis() {
            return Err(Error::shape(
                "kan",
                format!(
                    "input width {n}, coefficients {:?}, grid basis {}",
                    self.dims(coef),
                    grid.num_basis()
                ),
            ));
        }
        for (w, label) in [(base_w, "base weight"), (spline_w, "spline weight")] {
            if self.dims(w) != [1, m, n] {
                return Err(Error::shape(
                    "kan",
                    format!("{label} dims {:?}, expected [1, {m}, {n}]", self.dims(w)),
                ));
            }
        }
        let (cd, bd, sd) = (
            self.value(coef).data(),
            self.value(base_w).data(),
            self.value(spline_w).data(),
        );
        let xd = tx.data();
        let mut out = vec![0.0; bs * c * m];
        let mut basis = vec![0.0; n * nb];
        let mut act = vec![0.0; n];
        let mut scratch = Vec::new();
        for row in 0..bs * c {
            let xr = &xd[row * n..(row + 1) * n];
            for i in 0..n {
                act[i] = silu(xr[i]);
                grid.basis_into(xr[i], &mut basis[i * nb..(i + 1) * nb], None, &mut scratch);
            }
            let orow = &mut out[row * m..(row + 1) * m];
            for j in 0..m {
                let mut acc = 0.0;
                for i in 0..n {
                    let e = j * n + i;
                    let cr = &cd[e * nb..(e + 1) * nb];
                    let br = &basis[i * nb..(i + 1) * nb];
                    let s: f64 = cr.iter().zip(br).map(|(a, b)| a * b).sum();
                    acc += bd[e] * act[i] + sd[e] * s;
                }
                orow[j] = acc;
            }
        }
        let out = Tensor3::new([bs, c, m], out)?;
        let rg = [x, coef, base_w, spline_w].iter().any(|&v| self.rg(v));
        self.push_checked(
            "kan",
            out,
            Op::Kan(Box::new(KanOperands {
                x,
                coef,
                base_w,
                spline_w,
                grid: grid.clone(),
            })),
            rg,
        )
    }

    /// Reverse pass. Returns `∂(seed · output)/∂node` for every node that
    /// requires a gradient.
    pub fn backward(&self, output: Var, seed: &Tensor3) -> Result<Gradients> {
        if seed.dims() != self.dims(output) {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} vs output {:?}", seed.dims(), self.dims(output)),
            ));
        }
        let mut grads: Vec<Option<Tensor3>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.clone().with_grad(false));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor3>], v: Var, g: Tensor3) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Sums a broadcast gradient back down to `dims`.
    fn reduce_to(g: &Tensor3, dims: [usize; 3]) -> Tensor3 {
        if g.dims() == dims {
            return g.clone();
        }
        let mut out = Tensor3::zeros(dims);
        let [bs, c, l] = g.dims();
        let od = out.data_mut();
        for b in 0..bs {
            for j in 0..c {
                for k in 0..l {
                    od[bcast_offset(dims, b, j, k)] += g.at(b, j, k);
                }
            }
        }
        out
    }

    fn backprop_node(&self, node: &Node, g: &Tensor3, grads: &mut [Option<Tensor3>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let ga = Self::reduce_to(g, self.dims(*a));
                self.accumulate(grads, *a, ga);
                let gb = Self::reduce_to(g, self.dims(*b));
                self.accumulate(grads, *b, gb);
            }
            Op::Sub(a, b) => {
                let ga = Self::reduce_to(g, self.dims(*a));
                self.accumulate(grads, *a, ga);
                let gb = Self::reduce_to(&g.map(|v| -v), self.dims(*b));
                self.accumulate(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let dims = g.dims();
                if self.rg(*a) {
                    let full = Tensor3::from_fn(dims, |i, j, k| {
                        g.at(i, j, k) * tb.data()[bcast_offset(tb.dims(), i, j, k)]
                    });
                    self.accumulate(grads, *a, Self::reduce_to(&full, ta.dims()));
                }
                if self.rg(*b) {
                    let full = Tensor3::from_fn(dims, |i, j, k| {
                        g.at(i, j, k) * ta.data()[bcast_offset(ta.dims(), i, j, k)]
                    });
                    self.accumulate(grads, *b, Self::reduce_to(&full, tb.dims()));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let [bs, m, k] = ta.dims();
                let [bb, _, n] = tb.dims();
                let (xa, xb, gd) = (ta.data(), tb.data(), g.data());
                if self.rg(*a) {
                    // dA = dY · Bᵀ
                    let mut ga = vec![0.0; bs * m * k];
                    for bi in 0..bs {
                        let boff = if bb == 1 { 0 } else { bi * k * n };
                        for i in 0..m {
                            let grow = &gd[(bi * m + i) * n..(bi * m + i + 1) * n];
                            for p in 0..k {
                                let brow = &xb[boff + p * n..boff + (p + 1) * n];
                                ga[(bi * m + i) * k + p] =
                                    grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            }
                        }
                    }
                    self.accumulate(grads, *a, Tensor3::new([bs, m, k], ga)?);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · dY, summed over the batch when B is shared.
                    let mut gb = vec![0.0; bb * k * n];
                    for bi in 0..bs {
                        let boff = if bb == 1 { 0 } else { bi * k * n };
                        for i in 0..m {
                            let grow = &gd[(bi * m + i) * n..(bi * m + i + 1) * n];
                            for p in 0..k {
                                let av = xa[(bi * m + i) * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                let dst = &mut gb[boff + p * n..boff + (p + 1) * n];
                                for (d, &gv) in dst.iter_mut().zip(grow) {
                                    *d += av * gv;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *b, Tensor3::new([bb, k, n], gb)?);
                }
            }
            Op::Transpose(a) => {
                let [b, c, l] = g.dims();
                let gt = Tensor3::from_fn([b, l, c], |i, j, k| g.at(i, k, j));
                self.accumulate(grads, *a, gt);
            }
            Op::Conv1d { x, w } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let [bs, cin, len] = tx.dims();
                let [cout, _, k] = tw.dims();
                let pad = k / 2;
                let mut gx = Tensor3::zeros(tx.dims());
                let mut gw = Tensor3::zeros(tw.dims());
                {
                    let (xd, wd, gd) = (tx.data(), tw.data(), g.data());
                    let gxd = gx.data_mut();
                    for b in 0..bs {
                        for o in 0..cout {
                            let grow = &gd[(b * cout + o) * len..(b * cout + o + 1) * len];
                            for i in 0..cin {
                                let xoff = (b * cin + i) * len;
                                for t in 0..k {
                                    let wi = (o * cin + i) * k + t;
                                    let wv = wd[wi];
                                    let (lo, hi) =
                                        (pad.saturating_sub(t), (len + pad).saturating_sub(t).min(len));
                                    let mut acc = 0.0;
                                    for l in lo..hi {
                                        let xi = xoff + l + t - pad;
                                        gxd[xi] += wv * grow[l];
                                        acc += xd[xi] * grow[l];
                                    }
                                    gw.data_mut()[wi] += acc;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *w, gw);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let ga = Tensor3::new(
                    g.dims(),
                    g.data().iter().zip(y.data()).map(|(gv, s)| gv * s * (1.0 - s)).collect(),
                )?;
                self.accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let ga = Tensor3::new(
                    g.dims(),
                    g.data().iter().zip(y.data()).map(|(gv, t)| gv * (1.0 - t * t)).collect(),
                )?;
                self.accumulate(grads, *a, ga);
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                let ga = Tensor3::new(
                    g.dims(),
                    g.data().iter().zip(x.data()).map(|(gv, &xv)| gv * silu_grad(xv)).collect(),
                )?;
                self.accumulate(grads, *a, ga);
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let [bs, c, l] = y.dims();
                let mut gx = Tensor3::zeros(y.dims());
                match axis {
                    Axis::Feature => {
                        for r in 0..bs * c {
                            let (ys, gs) = (&y.data()[r * l..(r + 1) * l], &g.data()[r * l..(r + 1) * l]);
                            let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                            for k in 0..l {
                                gx.data_mut()[r * l + k] = ys[k] * (gs[k] - dot);
                            }
                        }
                    }
                    Axis::Channel => {
                        for b in 0..bs {
                            for k in 0..l {
                                let dot: f64 = (0..c).map(|j| y.at(b, j, k) * g.at(b, j, k)).sum();
                                for j in 0..c {
                                    gx.set(b, j, k, y.at(b, j, k) * (g.at(b, j, k) - dot));
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { parts, axis } => {
                let ax = axis.index();
                let mut at = 0;
                for &p in parts {
                    let len = self.dims(p)[ax];
                    if self.rg(p) {
                        self.accumulate(grads, p, g.slice(*axis, at, len)?);
                    }
                    at += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let mut gx = Tensor3::zeros(self.dims(*x));
                let [bs, c, l] = g.dims();
                for b in 0..bs {
                    for j in 0..c {
                        for k in 0..l {
                            match axis {
                                Axis::Channel => gx.set(b, j + start, k, g.at(b, j, k)),
                                Axis::Feature => gx.set(b, j, k + start, g.at(b, j, k)),
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SliceWrite {
                base,
                patch,
                axis,
                start,
            } => {
                let pd = self.dims(*patch);
                let len = pd[axis.index()];
                if self.rg(*patch) {
                    self.accumulate(grads, *patch, g.slice(*axis, *start, len)?);
                }
                if self.rg(*base) {
                    let mut gb = g.clone();
                    for b in 0..pd[0] {
                        for j in 0..pd[1] {
                            for k in 0..pd[2] {
                                match axis {
                                    Axis::Channel => gb.set(b, j + start, k, 0.0),
                                    Axis::Feature => gb.set(b, j, k + start, 0.0),
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *base, gb);
                }
            }
            Op::LayerNorm { x, eps } => {
                let tx = self.value(*x);
                let l = tx.features();
                let mut gx = Tensor3::zeros(tx.dims());
                for r in 0..tx.len() / l.max(1) {
                    let xs = &tx.data()[r * l..(r + 1) * l];
                    let ys = &node.value.data()[r * l..(r + 1) * l];
                    let gs = &g.data()[r * l..(r + 1) * l];
                    let (_, inv) = row_stats(xs, *eps);
                    let gmean = gs.iter().sum::<f64>() / l as f64;
                    let gymean = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / l as f64;
                    for k in 0..l {
                        gx.data_mut()[r * l + k] = inv * (gs[k] - gmean - ys[k] * gymean);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::MeanSquare(a) => {
                let t = self.value(*a);
                let s = g.data()[0] * 2.0 / t.len() as f64;
                self.accumulate(grads, *a, t.map(|v| v * s));
            }
            Op::Kan(ops) => self.backprop_kan(ops, g, grads)?,
        }
        Ok(())
    }

    fn backprop_kan(&self, ops: &KanOperands, g: &Tensor3, grads: &mut [Option<Tensor3>]) -> Result<()> {
        let tx = self.value(ops.x);
        let [bs, c, n] = tx.dims();
        let [m, _, nb] = self.dims(ops.coef);
        let (cd, bd, sd) = (
            self.value(ops.coef).data(),
            self.value(ops.base_w).data(),
            self.value(ops.spline_w).data(),
        );
        let mut gx = Tensor3::zeros(tx.dims());
        let mut gc = vec![0.0; m * n * nb];
        let mut gbw = vec![0.0; m * n];
        let mut gsw = vec![0.0; m * n];
        let mut basis = vec![0.0; n * nb];
        let mut dbasis = vec![0.0; n * nb];
        let mut act = vec![0.0; n];
        let mut dact = vec![0.0; n];
        let mut scratch = Vec::new();
        let need_coef = self.rg(ops.coef) || self.rg(ops.spline_w);
        for row in 0..bs * c {
            let xr = &tx.data()[row * n..(row + 1) * n];
            for i in 0..n {
                act[i] = silu(xr[i]);
                dact[i] = silu_grad(xr[i]);
                grid_basis(&ops.grid, xr[i], &mut basis[i * nb..(i + 1) * nb], &mut dbasis[i * nb..(i + 1) * nb], &mut scratch);
            }
            let grow = &g.data()[row * m..(row + 1) * m];
            let gxr = &mut gx.data_mut()[row * n..(row + 1) * n];
            for j in 0..m {
                let gj = grow[j];
                if gj == 0.0 {
                    continue;
                }
                for i in 0..n {
                    let e = j * n + i;
                    let cr = &cd[e * nb..(e + 1) * nb];
                    let br = &basis[i * nb..(i + 1) * nb];
                    let dr = &dbasis[i * nb..(i + 1) * nb];
                    let mut s = 0.0;
                    let mut ds = 0.0;
                    for q in 0..nb {
                        s += cr[q] * br[q];
                        ds += cr[q] * dr[q];
                    }
                    gxr[i] += gj * (bd[e] * dact[i] + sd[e] * ds);
                    gbw[e] += gj * act[i];
                    gsw[e] += gj * s;
                    if need_coef {
                        let scale = gj * sd[e];
                        let dst = &mut gc[e * nb..(e + 1) * nb];
                        for q in 0..nb {
                            dst[q] += scale * br[q];
                        }
                    }
                }
            }
        }
        self.accumulate(grads, ops.x, gx);
        self.accumulate(grads, ops.coef, Tensor3::new([m, n, nb], gc)?);
        self.accumulate(grads, ops.base_w, Tensor3::new([1, m, n], gbw)?);
        self.accumulate(grads, ops.spline_w, Tensor3::new([1, m, n], gsw)?);
        Ok(())
    }
}

fn grid_basis(grid: &SplineGrid, x: f64, values: &mut [f64], deriv: &mut [f64], scratch: &mut Vec<f64>) {
    grid.basis_into(x, values, Some(deriv), scratch);
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let l = row.len() as f64;
    let mean = row.iter().sum::<f64>() / l;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / l;
    (mean, 1.0 / (var + eps).sqrt())
}

fn softmax_in_place<'a>(vals: impl Iterator<Item = &'a mut f64>) {
    let mut v: Vec<&mut f64> = vals.collect();
    let max = v.iter().map(|x| **x).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        **x = (**x - max).exp();
        sum += **x;
    }
    for x in v.iter_mut() {
        **x /= sum;
    }
}
