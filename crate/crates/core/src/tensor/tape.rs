//! Define-by-run reverse-mode autodiff.
//!
//! A `Tape` records one step's operations; backward replays them in exact
//! reverse order, adding (never overwriting) into parent gradients. Leaves
//! keep their accumulated gradient on the tensor itself; interior gradients
//! live in a transient workspace so repeated backward calls accumulate only
//! at the leaves. Tapes are rebuilt every step.

use super::kernels as k;
use super::{Scalar, Tensor};
use crate::error::{param_err, shape_err, Result, UdiError};

/// Clamp applied inside cross-entropy's log; teacher sharpening at low
/// temperatures underflows single precision otherwise.
pub const EPS_LOG: f64 = 1e-12;
/// Row-sum tolerance for probability inputs of cross-entropy.
pub const ROW_SUM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub struct BwdCtx<'a, T: Scalar> {
    nodes: &'a [Node<T>],
    parents: &'a [Var],
    needs: &'a [bool],
    pub out: &'a Tensor<T>,
    pub g: &'a [T],
}

impl<'a, T: Scalar> BwdCtx<'a, T> {
    pub fn input(&self, j: usize) -> &Tensor<T> {
        &self.nodes[self.parents[j].0].value
    }
    pub fn needs(&self, j: usize) -> bool {
        self.needs[j]
    }
}

type BackFn<T> = Box<dyn Fn(&BwdCtx<T>) -> Vec<Vec<T>>>;

struct Rule<T: Scalar> {
    parents: Vec<Var>,
    back: BackFn<T>,
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    rule: Option<Rule<T>>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a leaf. Gradients accumulate on `value.grad` when
    /// `requires_grad` holds.
    pub fn leaf(&mut self, mut value: Tensor<T>, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        self.nodes.push(Node { value, requires_grad, rule: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        parents: Vec<Var>,
        back: impl Fn(&BwdCtx<T>) -> Vec<Vec<T>> + 'static,
    ) -> Var {
        let requires = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let rule = if requires { Some(Rule { parents, back: Box::new(back) }) } else { None };
        self.nodes.push(Node { value, requires_grad: requires, rule });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate across
    /// calls; interior gradients are recomputed fresh each call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(param_err!("backward on an empty tape"));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(param_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            ));
        }
        let n = loss.0 + 1;
        let mut ws: Vec<Option<Vec<T>>> = Vec::with_capacity(n);
        ws.resize_with(n, || None);
        ws[loss.0] = Some(vec![T::ONE]);
        for i in (0..n).rev() {
            let Some(g) = ws[i].take() else { continue };
            if self.nodes[i].rule.is_some() {
                let contribs = {
                    let node = &self.nodes[i];
                    let rule = node.rule.as_ref().unwrap();
                    let needs: Vec<bool> =
                        rule.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
                    let ctx = BwdCtx {
                        nodes: &self.nodes,
                        parents: &rule.parents,
                        needs: &needs,
                        out: &node.value,
                        g: &g,
                    };
                    (rule.back)(&ctx)
                };
                let parents = self.nodes[i].rule.as_ref().unwrap().parents.clone();
                for (p, c) in parents.into_iter().zip(contribs) {
                    if c.is_empty() || !self.nodes[p.0].requires_grad {
                        continue;
                    }
                    match &mut ws[p.0] {
                        Some(acc) => k::add_into(acc, &c),
                        slot => *slot = Some(c),
                    }
                }
            } else if self.nodes[i].requires_grad {
                let t = &mut self.nodes[i].value;
                match &mut t.grad {
                    Some(acc) => k::add_into(acc, &g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    // ── elementwise ──────────────────────────────────────────────

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa != sb {
            return Err(shape_err!("{op}: shape {sa:?} vs {sb:?}"));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "add")?;
        let mut data = self.nodes[a.0].value.data().to_vec();
        k::add_into(&mut data, self.nodes[b.0].value.data());
        Ok(self.push(Tensor::new(shape, data)?, vec![a, b], |ctx| {
            vec![ctx.g.to_vec(), ctx.g.to_vec()]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "sub")?;
        let data: Vec<T> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x - y)
            .collect();
        Ok(self.push(Tensor::new(shape, data)?, vec![a, b], |ctx| {
            vec![ctx.g.to_vec(), ctx.g.iter().map(|&v| -v).collect()]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "mul")?;
        let data: Vec<T> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(Tensor::new(shape, data)?, vec![a, b], |ctx| {
            let da = if ctx.needs(0) {
                ctx.g.iter().zip(ctx.input(1).data()).map(|(&g, &y)| g * y).collect()
            } else {
                vec![]
            };
            let db = if ctx.needs(1) {
                ctx.g.iter().zip(ctx.input(0).data()).map(|(&g, &x)| g * x).collect()
            } else {
                vec![]
            };
            vec![da, db]
        }))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = &self.nodes[a.0].value;
        let t = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&x| x * c).collect(),
            grad: None,
            requires_grad: false,
        };
        self.push(t, vec![a], move |ctx| vec![ctx.g.iter().map(|&g| g * c).collect()])
    }

    /// Broadcast add of a trailing-axis vector: x[.., n] + b[n].
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.nodes[b.0].value.numel();
        let xv = &self.nodes[x.0].value;
        if xv.last_dim() != n || self.nodes[b.0].value.shape().len() != 1 {
            return Err(shape_err!("add_bias: last axis {} vs bias {n}", xv.last_dim()));
        }
        let bd = self.nodes[b.0].value.data();
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            k::add_into(row, bd);
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, vec![x, b], move |ctx| {
            let db = if ctx.needs(1) {
                let mut acc = vec![T::ZERO; n];
                for row in ctx.g.chunks_exact(n) {
                    k::add_into(&mut acc, row);
                }
                acc
            } else {
                vec![]
            };
            vec![ctx.g.to_vec(), db]
        }))
    }

    /// Per-row scaling: x[m, ..] scaled by s[m] (drop-path masks and similar).
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let m = xv.shape()[0];
        let row = xv.numel() / m;
        if self.nodes[s.0].value.shape() != [m] {
            return Err(shape_err!("mul_rows: expected scale [{m}]"));
        }
        let sd = self.nodes[s.0].value.data();
        let mut data = xv.data().to_vec();
        for (i, chunk) in data.chunks_exact_mut(row).enumerate() {
            let c = sd[i];
            for v in chunk {
                *v *= c;
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, vec![x, s], move |ctx| {
            let sd = ctx.input(1).data();
            let dx = if ctx.needs(0) {
                let mut dx = ctx.g.to_vec();
                for (i, chunk) in dx.chunks_exact_mut(row).enumerate() {
                    let c = sd[i];
                    for v in chunk {
                        *v *= c;
                    }
                }
                dx
            } else {
                vec![]
            };
            let ds = if ctx.needs(1) {
                let xd = ctx.input(0).data();
                (0..m)
                    .map(|i| T::from_f64(k::dot_f64(&ctx.g[i * row..(i + 1) * row], &xd[i * row..(i + 1) * row])))
                    .collect()
            } else {
                vec![]
            };
            vec![dx, ds]
        }))
    }

    // ── linear algebra ───────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.nodes[a.0].value.dims2()?;
        let (kb, n) = self.nodes[b.0].value.dims2()?;
        if ka != kb {
            return Err(shape_err!("matmul: inner dims {ka} vs {kb}"));
        }
        let data = k::matmul(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), m, ka, n);
        Ok(self.push(Tensor::new(vec![m, n], data)?, vec![a, b], move |ctx| {
            let da = if ctx.needs(0) {
                k::matmul_nt(ctx.g, ctx.input(1).data(), m, n, ka)
            } else {
                vec![]
            };
            let db = if ctx.needs(1) {
                let mut db = vec![T::ZERO; ka * n];
                k::matmul_tn_acc(ctx.input(0).data(), ctx.g, m, ka, n, &mut db);
                db
            } else {
                vec![]
            };
            vec![da, db]
        }))
    }

    /// Batched scores: a[P,m,k] · b[P,n,k]ᵀ → [P,m,n].
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, m, ka) = self.nodes[a.0].value.dims3()?;
        let (pb, n, kb) = self.nodes[b.0].value.dims3()?;
        if p != pb || ka != kb {
            return Err(shape_err!("bmm_nt: [{p},{m},{ka}] vs [{pb},{n},{kb}]"));
        }
        let data = k::bmm_nt(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), p, m, ka, n);
        Ok(self.push(Tensor::new(vec![p, m, n], data)?, vec![a, b], move |ctx| {
            let da = if ctx.needs(0) {
                k::bmm_nn(ctx.g, ctx.input(1).data(), p, m, n, ka)
            } else {
                vec![]
            };
            let db = if ctx.needs(1) {
                let mut db = vec![T::ZERO; p * n * ka];
                k::bmm_tn_acc(ctx.g, ctx.input(0).data(), p, m, n, ka, &mut db);
                db
            } else {
                vec![]
            };
            vec![da, db]
        }))
    }

    /// Batched mix: a[P,m,k] · b[P,k,n] → [P,m,n].
    pub fn bmm_nn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, m, ka) = self.nodes[a.0].value.dims3()?;
        let (pb, kb, n) = self.nodes[b.0].value.dims3()?;
        if p != pb || ka != kb {
            return Err(shape_err!("bmm_nn: [{p},{m},{ka}] vs [{pb},{kb},{n}]"));
        }
        let data = k::bmm_nn(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), p, m, ka, n);
        Ok(self.push(Tensor::new(vec![p, m, n], data)?, vec![a, b], move |ctx| {
            let da = if ctx.needs(0) {
                k::bmm_nt(ctx.g, ctx.input(1).data(), p, m, n, ka)
            } else {
                vec![]
            };
            let db = if ctx.needs(1) {
                let mut db = vec![T::ZERO; p * ka * n];
                k::bmm_tn_acc(ctx.input(0).data(), ctx.g, p, m, ka, n, &mut db);
                db
            } else {
                vec![]
            };
            vec![da, db]
        }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.nodes[x.0].value.dims2()?;
        let data = k::transpose(self.nodes[x.0].value.data(), m, n);
        Ok(self.push(Tensor::new(vec![n, m], data)?, vec![x], move |ctx| {
            vec![k::transpose(ctx.g, n, m)]
        }))
    }

    // ── nonlinearities ───────────────────────────────────────────

    /// Row softmax over the last axis: softmax(x / temperature).
    pub fn softmax(&mut self, x: Var, temperature: T) -> Result<Var> {
        if temperature <= T::ZERO {
            return Err(param_err!("softmax temperature must be positive"));
        }
        let xv = &self.nodes[x.0].value;
        let n = xv.last_dim();
        let mut data = vec![T::ZERO; xv.numel()];
        for (out, row) in data.chunks_exact_mut(n).zip(xv.data().chunks_exact(n)) {
            k::softmax_row(row, temperature, out);
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, vec![x], move |ctx| {
            let y = ctx.out.data();
            let mut dx = vec![T::ZERO; y.len()];
            let inv_t = T::ONE / temperature;
            for ((dxr, yr), gr) in
                dx.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(ctx.g.chunks_exact(n))
            {
                let dot = T::from_f64(k::dot_f64(gr, yr));
                for ((d, &yv), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
                    *d = yv * (gv - dot) * inv_t;
                }
            }
            vec![dx]
        }))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let n = xv.last_dim();
        if n == 0 || xv.numel() == 0 {
            return Err(shape_err!("layer_norm on empty axis"));
        }
        if self.nodes[gain.0].value.shape() != [n] || self.nodes[bias.0].value.shape() != [n] {
            return Err(shape_err!("layer_norm: gain/bias must be [{n}]"));
        }
        let gd = self.nodes[gain.0].value.data();
        let bd = self.nodes[bias.0].value.data();
        let mut data = vec![T::ZERO; xv.numel()];
        for (out, row) in data.chunks_exact_mut(n).zip(xv.data().chunks_exact(n)) {
            let mean = T::from_f64(k::sum_f64(row) / n as f64);
            let mut var = 0.0f64;
            for &v in row {
                let d = (v - mean).to_f64();
                var += d * d;
            }
            let inv_sigma = T::from_f64(1.0 / (var / n as f64 + eps.to_f64()).sqrt());
            for (j, (o, &v)) in out.iter_mut().zip(row).enumerate() {
                *o = (v - mean) * inv_sigma * gd[j] + bd[j];
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, vec![x, gain, bias], move |ctx| {
            let xd = ctx.input(0).data();
            let gd = ctx.input(1).data();
            let rows = xd.len() / n;
            let mut dx = if ctx.needs(0) { vec![T::ZERO; xd.len()] } else { vec![] };
            let mut dgain = if ctx.needs(1) { vec![T::ZERO; n] } else { vec![] };
            let mut dbias = if ctx.needs(2) { vec![T::ZERO; n] } else { vec![] };
            for r in 0..rows {
                let row = &xd[r * n..(r + 1) * n];
                let gr = &ctx.g[r * n..(r + 1) * n];
                let mean = T::from_f64(k::sum_f64(row) / n as f64);
                let mut var = 0.0f64;
                for &v in row {
                    let d = (v - mean).to_f64();
                    var += d * d;
                }
                let inv_sigma = T::from_f64(1.0 / (var / n as f64 + eps.to_f64()).sqrt());
                if !dgain.is_empty() || !dbias.is_empty() {
                    for j in 0..n {
                        let xhat = (row[j] - mean) * inv_sigma;
                        if !dgain.is_empty() {
                            dgain[j] += gr[j] * xhat;
                        }
                        if !dbias.is_empty() {
                            dbias[j] += gr[j];
                        }
                    }
                }
                if !dx.is_empty() {
                    let mut s1 = 0.0f64;
                    let mut s2 = 0.0f64;
                    for j in 0..n {
                        let gg = (gr[j] * gd[j]).to_f64();
                        let xhat = ((row[j] - mean) * inv_sigma).to_f64();
                        s1 += gg;
                        s2 += gg * xhat;
                    }
                    let m1 = T::from_f64(s1 / n as f64);
                    let m2 = T::from_f64(s2 / n as f64);
                    let dxr = &mut dx[r * n..(r + 1) * n];
                    for j in 0..n {
                        let xhat = (row[j] - mean) * inv_sigma;
                        dxr[j] = (gr[j] * gd[j] - m1 - xhat * m2) * inv_sigma;
                    }
                }
            }
            vec![dx, dgain, dbias]
        }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let data: Vec<T> = xv.data().iter().map(|&v| gelu_fwd(v)).collect();
        let t = Tensor { shape: xv.shape().to_vec(), data, grad: None, requires_grad: false };
        self.push(t, vec![x], |ctx| {
            vec![ctx
                .g
                .iter()
                .zip(ctx.input(0).data())
                .map(|(&g, &v)| g * gelu_grad(v))
                .collect()]
        })
    }

    /// Natural log; errors on any non-positive entry.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.data().iter().any(|&v| v <= T::ZERO) {
            return Err(UdiError::Domain("log of non-positive entry".into()));
        }
        let data: Vec<T> = xv.data().iter().map(|&v| v.fast_ln()).collect();
        let t = Tensor { shape: xv.shape().to_vec(), data, grad: None, requires_grad: false };
        Ok(self.push(t, vec![x], |ctx| {
            vec![ctx.g.iter().zip(ctx.input(0).data()).map(|(&g, &v)| g / v).collect()]
        }))
    }

    // ── reductions / reshapes ────────────────────────────────────

    /// Mean along one axis of a matrix. axis 0 → column means [n]; axis 1 →
    /// row means [m].
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.nodes[x.0].value.dims2()?;
        let s = self.sum_axis(x, axis)?;
        let c = T::ONE / T::from_usize(if axis == 0 { m } else { n });
        Ok(self.scale(s, c))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.nodes[x.0].value.dims2()?;
        if axis > 1 {
            return Err(param_err!("sum_axis: axis {axis} out of range for rank 2"));
        }
        let xd = self.nodes[x.0].value.data();
        let (out_len, data) = if axis == 0 {
            let mut acc = vec![T::ZERO; n];
            for row in xd.chunks_exact(n) {
                k::add_into(&mut acc, row);
            }
            (n, acc)
        } else {
            (m, xd.chunks_exact(n).map(|r| T::from_f64(k::sum_f64(r))).collect())
        };
        Ok(self.push(Tensor::new(vec![out_len], data)?, vec![x], move |ctx| {
            let mut dx = vec![T::ZERO; m * n];
            if axis == 0 {
                for row in dx.chunks_exact_mut(n) {
                    k::add_into(row, ctx.g);
                }
            } else {
                for (i, row) in dx.chunks_exact_mut(n).enumerate() {
                    for v in row {
                        *v = ctx.g[i];
                    }
                }
            }
            vec![dx]
        }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = T::from_f64(k::sum_f64(self.nodes[x.0].value.data()));
        let numel = self.nodes[x.0].value.numel();
        self.push(Tensor::scalar(total), vec![x], move |ctx| vec![vec![ctx.g[0]; numel]])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let numel = self.nodes[x.0].value.numel();
        let s = self.sum_all(x);
        self.scale(s, T::ONE / T::from_usize(numel))
    }

    /// Concatenate along axis 0; trailing dimensions must agree.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(param_err!("concat of zero tensors"));
        }
        let tail: Vec<usize> = self.nodes[xs[0].0].value.shape()[1..].to_vec();
        let mut rows = 0usize;
        for &v in xs {
            let s = self.nodes[v.0].value.shape();
            if s[1..] != tail[..] {
                return Err(shape_err!("concat_rows: trailing dims differ"));
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * tail.iter().product::<usize>().max(1));
        for &v in xs {
            data.extend_from_slice(self.nodes[v.0].value.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let sizes: Vec<usize> = xs.iter().map(|&v| self.nodes[v.0].value.numel()).collect();
        Ok(self.push(Tensor::new(shape, data)?, xs.to_vec(), move |ctx| {
            let mut out = Vec::with_capacity(sizes.len());
            let mut off = 0;
            for (j, &sz) in sizes.iter().enumerate() {
                if ctx.needs(j) {
                    out.push(ctx.g[off..off + sz].to_vec());
                } else {
                    out.push(vec![]);
                }
                off += sz;
            }
            out
        }))
    }

    /// Select rows (with possible repetition); backward scatter-adds.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let m = xv.shape()[0];
        let row = xv.numel() / m;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(shape_err!("gather_rows: index {bad} out of {m}"));
        }
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in &idx {
            data.extend_from_slice(&xv.data()[i * row..(i + 1) * row]);
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = idx.len();
        Ok(self.push(Tensor::new(shape, data)?, vec![x], move |ctx| {
            let mut dx = vec![T::ZERO; m * row];
            for (j, &i) in idx.iter().enumerate() {
                k::add_into(&mut dx[i * row..(i + 1) * row], &ctx.g[j * row..(j + 1) * row]);
            }
            vec![dx]
        }))
    }

    /// [S·M, H·hd] → [S·H, M, hd]: group the token matrix of S sequences into
    /// per-head slices for batched attention.
    pub fn split_heads(&mut self, x: Var, seqs: usize, len: usize, heads: usize) -> Result<Var> {
        let (rows, d) = self.nodes[x.0].value.dims2()?;
        if rows != seqs * len || d % heads != 0 {
            return Err(shape_err!("split_heads: rows {rows} != {seqs}x{len} or heads∤{d}"));
        }
        let hd = d / heads;
        let xd = self.nodes[x.0].value.data();
        let mut data = vec![T::ZERO; xd.len()];
        for s in 0..seqs {
            for i in 0..len {
                for h in 0..heads {
                    let src = (s * len + i) * d + h * hd;
                    let dst = ((s * heads + h) * len + i) * hd;
                    data[dst..dst + hd].copy_from_slice(&xd[src..src + hd]);
                }
            }
        }
        Ok(self.push(Tensor::new(vec![seqs * heads, len, hd], data)?, vec![x], move |ctx| {
            let mut dx = vec![T::ZERO; ctx.g.len()];
            for s in 0..seqs {
                for i in 0..len {
                    for h in 0..heads {
                        let src = (s * len + i) * d + h * hd;
                        let dst = ((s * heads + h) * len + i) * hd;
                        dx[src..src + hd].copy_from_slice(&ctx.g[dst..dst + hd]);
                    }
                }
            }
            vec![dx]
        }))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, seqs: usize, len: usize, heads: usize) -> Result<Var> {
        let (p, m, hd) = self.nodes[x.0].value.dims3()?;
        if p != seqs * heads || m != len {
            return Err(shape_err!("merge_heads: [{p},{m},{hd}] vs {seqs}x{heads}, {len}"));
        }
        let d = heads * hd;
        let xd = self.nodes[x.0].value.data();
        let mut data = vec![T::ZERO; xd.len()];
        for s in 0..seqs {
            for i in 0..len {
                for h in 0..heads {
                    let src = ((s * heads + h) * len + i) * hd;
                    let dst = (s * len + i) * d + h * hd;
                    data[dst..dst + hd].copy_from_slice(&xd[src..src + hd]);
                }
            }
        }
        Ok(self.push(Tensor::new(vec![seqs * len, d], data)?, vec![x], move |ctx| {
            let mut dx = vec![T::ZERO; ctx.g.len()];
            for s in 0..seqs {
                for i in 0..len {
                    for h in 0..heads {
                        let src = ((s * heads + h) * len + i) * hd;
                        let dst = (s * len + i) * d + h * hd;
                        dx[src..src + hd].copy_from_slice(&ctx.g[dst..dst + hd]);
                    }
                }
            }
            vec![dx]
        }))
    }

    /// Normalize each row to unit L2 norm.
    pub fn l2norm_rows(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let n = xv.last_dim();
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            let nrm = T::from_f64((k::dot_f64(row, row) + 1e-24).sqrt());
            for v in row {
                *v = *v / nrm;
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, vec![x], move |ctx| {
            let xd = ctx.input(0).data();
            let mut dx = vec![T::ZERO; xd.len()];
            for ((dxr, xr), (yr, gr)) in dx
                .chunks_exact_mut(n)
                .zip(xd.chunks_exact(n))
                .zip(ctx.out.data().chunks_exact(n).zip(ctx.g.chunks_exact(n)))
            {
                let nrm = T::from_f64((k::dot_f64(xr, xr) + 1e-24).sqrt());
                let dot = T::from_f64(k::dot_f64(yr, gr));
                for ((d, &yv), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
                    *d = (gv - yv * dot) / nrm;
                }
            }
            vec![dx]
        }))
    }

    /// Normalize each column of a matrix to unit L2 norm (prototype bank).
    pub fn l2norm_cols(&mut self, x: Var) -> Result<Var> {
        let t = self.transpose(x)?;
        let nrm = self.l2norm_rows(t)?;
        self.transpose(nrm)
    }

    /// Mean over rows of −Σₖ target·log(pred), with pred clamped below by
    /// `EPS_LOG`. Both arguments must be row-stochastic. Gradients flow to
    /// whichever side requires them; targets are detached in training.
    pub fn cross_entropy_rows(&mut self, target: Var, pred: Var) -> Result<Var> {
        let shape = self.same_shape(target, pred, "cross_entropy_rows")?;
        if shape.len() != 2 {
            return Err(shape_err!("cross_entropy_rows expects [m,K]"));
        }
        let (m, kdim) = (shape[0], shape[1]);
        for (name, v) in [("target", target), ("pred", pred)] {
            for (i, row) in self.nodes[v.0].value.data().chunks_exact(kdim).enumerate() {
                let s = k::sum_f64(row);
                if (s - 1.0).abs() > ROW_SUM_TOL {
                    return Err(UdiError::Domain(format!(
                        "cross_entropy_rows: {name} row {i} sums to {s}, not 1"
                    )));
                }
            }
        }
        let eps = T::from_f64(EPS_LOG);
        let td = self.nodes[target.0].value.data();
        let pd = self.nodes[pred.0].value.data();
        let mut total = 0.0f64;
        for (&t, &p) in td.iter().zip(pd) {
            if t > T::ZERO {
                total -= (t * p.maxv(eps).fast_ln()).to_f64();
            }
        }
        let loss = T::from_f64(total / m as f64);
        Ok(self.push(Tensor::scalar(loss), vec![target, pred], move |ctx| {
            let g = ctx.g[0] / T::from_usize(m);
            let td = ctx.input(0).data();
            let pd = ctx.input(1).data();
            let dt = if ctx.needs(0) {
                pd.iter().map(|&p| -g * p.maxv(eps).fast_ln()).collect()
            } else {
                vec![]
            };
            let dp = if ctx.needs(1) {
                td.iter()
                    .zip(pd)
                    .map(|(&t, &p)| if t > T::ZERO && p > eps { -g * t / p } else { T::ZERO })
                    .collect()
            } else {
                vec![]
            };
            vec![dt, dp]
        }))
    }
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let u = c * (x + a * x * x * x);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + u.fast_tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.fast_tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * c * (T::ONE + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn square_gradient_and_accumulation() {
        // d(x²)/dx at x=3 → 6; a second backward doubles the leaf grad
        let mut tape = Tape::new();
        let x = tape.leaf(t64(vec![1], vec![3.0]), true);
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[12.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(vec![2], vec![1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(UdiError::Param(_))));
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(vec![2], vec![1.0, 2.0]), true);
        let c = tape.constant(t64(vec![2], vec![5.0, 7.0]));
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[5.0, 7.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn softmax_basics() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(vec![1, 3], vec![0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 1.0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        // stabilization under huge logits
        let x = tape.constant(t64(vec![1, 2], vec![1000.0, 0.0]));
        let y = tape.softmax(x, 1.0).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1].abs() < 1e-12 && d.iter().all(|v| v.is_finite()));
        // sharpening monotonicity: lower temperature → lower entropy
        let x = tape.constant(t64(vec![1, 3], vec![1.0, 2.0, 3.0]));
        let sharp = tape.softmax(x, 0.1).unwrap();
        let soft = tape.softmax(x, 1.0).unwrap();
        let h_sharp = k::entropy_row(tape.value(sharp).data());
        let h_soft = k::entropy_row(tape.value(soft).data());
        assert!(h_sharp < h_soft);
        // temperature must be positive
        assert!(tape.softmax(x, 0.0).is_err());
    }

    #[test]
    fn layer_norm_normalizes_and_handles_constant_rows() {
        let mut tape = Tape::<f64>::new();
        let gain = tape.constant(t64(vec![4], vec![1.0; 4]));
        let bias = tape.constant(t64(vec![4], vec![0.0; 4]));
        // constant row → all zeros via eps
        let x = tape.constant(t64(vec![1, 4], vec![2.5; 4]));
        let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.0);
        }
        // random row → mean 0, var 1
        let x = tape.constant(t64(vec![2, 4], vec![0.3, -1.2, 2.2, 0.7, 9.0, 3.0, -4.0, 0.5]));
        let y = tape.layer_norm(x, gain, bias, 1e-10).unwrap();
        for row in tape.value(y).data().chunks_exact(4) {
            let mu: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 4.0;
            assert!(mu.abs() < 1e-7, "mean {mu}");
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
    }

    #[test]
    fn gelu_and_log_edges() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(vec![1], vec![0.0]));
        let y = tape.gelu(x);
        assert_eq!(tape.value(y).data()[0], 0.0);
        let bad = tape.constant(t64(vec![1], vec![-1.0]));
        assert!(matches!(tape.log(bad), Err(UdiError::Domain(_))));
    }

    #[test]
    fn mean_axis_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(vec![1, 2], vec![2.0, 4.0]));
        let m = tape.mean_axis(x, 1).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0]);
        let m0 = tape.mean_axis(x, 0).unwrap();
        assert_eq!(tape.value(m0).data(), &[2.0, 4.0]);
    }

    #[test]
    fn cross_entropy_identities() {
        let mut tape = Tape::<f64>::new();
        // H(p,p) = ln 2 for p=[0.5,0.5]
        let p = tape.constant(t64(vec![1, 2], vec![0.5, 0.5]));
        let h = tape.cross_entropy_rows(p, p).unwrap();
        assert!((tape.scalar_value(h) - std::f64::consts::LN_2).abs() < 1e-12);
        // one-hot target: H([1,0],[0.9,0.1]) = -ln 0.9
        let t = tape.constant(t64(vec![1, 2], vec![1.0, 0.0]));
        let q = tape.constant(t64(vec![1, 2], vec![0.9, 0.1]));
        let h = tape.cross_entropy_rows(t, q).unwrap();
        assert!((tape.scalar_value(h) + 0.9f64.ln()).abs() < 1e-12);
        // non-stochastic rows rejected
        let bad = tape.constant(t64(vec![1, 2], vec![0.9, 0.2]));
        assert!(matches!(tape.cross_entropy_rows(bad, q), Err(UdiError::Domain(_))));
    }

    #[test]
    fn gibbs_inequality_on_random_pairs() {
        // H(p,q) ≥ H(p,p) over random distribution pairs
        use rand::Rng;
        let mut rng = crate::rng::stream(11, crate::rng::Stream::Init, &[0]);
        for _ in 0..1000 {
            let kdim = 2 + rng.gen_range(0..6);
            let mk_row = |rng: &mut rand_chacha::ChaCha8Rng| {
                let mut v: Vec<f64> = (0..kdim).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = v.iter().sum();
                v.iter_mut().for_each(|x| *x /= s);
                v
            };
            let p = mk_row(&mut rng);
            let q = mk_row(&mut rng);
            let mut tape = Tape::<f64>::new();
            let pv = tape.constant(t64(vec![1, kdim], p.clone()));
            let qv = tape.constant(t64(vec![1, kdim], q));
            let hpq = tape.cross_entropy_rows(pv, qv).unwrap();
            let hpp = tape.cross_entropy_rows(pv, pv).unwrap();
            assert!(tape.scalar_value(hpq) >= tape.scalar_value(hpp) - 1e-12);
        }
    }

    #[test]
    fn gather_scatter_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]), true);
        let gathered = tape.gather_rows(x, vec![2, 0, 2]).unwrap();
        assert_eq!(tape.value(gathered).data(), &[5., 6., 1., 2., 5., 6.]);
        let s = tape.sum_all(gathered);
        tape.backward(s).unwrap();
        // row 2 selected twice → grad 2, row 1 never → 0
        assert_eq!(tape.grad(x).unwrap(), &[1., 1., 0., 0., 2., 2.]);
    }

    #[test]
    fn head_split_merge_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 4).map(|i| i as f64).collect();
        let x = tape.constant(t64(vec![6, 4], data.clone()));
        let h = tape.split_heads(x, 2, 3, 2).unwrap();
        let back = tape.merge_heads(h, 2, 3, 2).unwrap();
        assert_eq!(tape.value(back).data(), &data[..]);
    }
}
