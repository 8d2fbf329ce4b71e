//! A small dense-tensor engine with reverse-mode differentiation.
//!
//! A [`Graph`] records every forward op on a tape together with its output
//! value. [`Graph::backward`] walks the tape in reverse and accumulates
//! vector-Jacobian products into per-node gradients. Tensors are row-major;
//! image tensors use NHWC layout.

pub mod gradcheck;
mod kernels;
pub mod optim;
pub mod params;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};
use kernels::{ConvGeom, DenseGrads};

pub use optim::{adam_step, sgd_step, Optimizer, OptimizerKind};
pub use params::{Param, ParamId, ParamStore};

/// Element type of tensors: `f32` for training, `f64` for verification.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub const BN_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sum(Var),
    Reshape(Var),
    Permute { x: Var, map: Vec<usize> },
    Concat(Vec<Var>),
    Dense { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geo: ConvGeom },
    Depthwise { x: Var, w: Var, geo: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Softmax(Var),
    BatchMatmul { a: Var, b: Var, trans_b: bool },
    Bce { llr: Var, sign: Vec<T>, count: usize },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics of a training-mode batch norm, for running averages.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Batch-norm mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Infer,
}

/// A differentiation tape.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    /// Gradient of the last [`Graph::backward`] root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Constant input; no gradient is propagated into it.
    pub fn input(&mut self, shape: &[usize], value: Vec<T>) -> Result<Var> {
        self.leaf(shape, value, false)
    }

    /// Input whose gradient is tracked.
    pub fn input_with_grad(&mut self, shape: &[usize], value: Vec<T>) -> Result<Var> {
        self.leaf(shape, value, true)
    }

    fn leaf(&mut self, shape: &[usize], value: Vec<T>, needs_grad: bool) -> Result<Var> {
        if numel(shape) != value.len() {
            return shape_err(format!("shape {shape:?} needs {} values, got {}", numel(shape), value.len()));
        }
        Ok(self.push(shape.to_vec(), value, Op::Input, needs_grad))
    }

    /// Bind a stored parameter as a leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.shape.clone(), p.value.clone(), Op::Param(id), p.trainable)
    }

    /// Gradients of every bound parameter after [`Graph::backward`], summed
    /// when a parameter was bound more than once.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<T>)> {
        let mut out: Vec<(ParamId, Vec<T>)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                let Some(g) = self.grads.get(i).and_then(|g| g.as_ref()) else { continue };
                match out.iter_mut().find(|(pid, _)| *pid == id) {
                    Some((_, acc)) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                    None => out.push((id, g.clone())),
                }
            }
        }
        out
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).iter().map(|&a| a * s).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), v, Op::Scale(x, s), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).iter().map(|&a| if a > T::zero() { a } else { T::zero() }).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), v, Op::Relu(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let ng = self.ng(x);
        self.push(vec![1], vec![s], Op::Sum(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return shape_err(format!("reshape {:?} -> {shape:?}", self.shape(x)));
        }
        let v = self.value(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(shape.to_vec(), v, Op::Reshape(x), ng))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let mut seen = vec![false; in_shape.len()];
        if perm.len() != in_shape.len()
            || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true))
        {
            return shape_err(format!("invalid permutation {perm:?} for shape {in_shape:?}"));
        }
        let map = kernels::permute_map(&in_shape, perm);
        let src = self.value(x);
        let v = map.iter().map(|&i| src[i]).collect();
        let out_shape = perm.iter().map(|&p| in_shape[p]).collect();
        let ng = self.ng(x);
        Ok(self.push(out_shape, v, Op::Permute { x, map }, ng))
    }

    /// Concatenate along the last axis.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return shape_err("concat of nothing".into());
        };
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        for &x in xs {
            let s = self.shape(x);
            if s.len() != lead.len() + 1 || &s[..lead.len()] != lead {
                return shape_err(format!("concat: {:?} vs {:?}", self.shape(first), s));
            }
        }
        let widths: Vec<usize> = xs.iter().map(|&x| *self.shape(x).last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let rows = numel(lead);
        let mut v = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                v.extend_from_slice(&self.value(x)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(shape, v, Op::Concat(xs.to_vec()), ng))
    }

    /// Affine map over the last axis; `w` is `[n_in, n_out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return shape_err(format!("dense: input {xs:?}, weight {ws:?}"));
        }
        let (n_in, n_out) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [n_out] {
                return shape_err(format!("dense bias {:?} for {n_out} outputs", self.shape(b)));
            }
        }
        let mut out = vec![T::zero(); numel(&xs) / n_in * n_out];
        kernels::dense_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), n_in, n_out, &mut out);
        let mut shape = xs;
        *shape.last_mut().unwrap() = n_out;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(shape, out, Op::Dense { x, w, b }, ng))
    }

    fn conv_geom(&self, x: Var, kh: usize, kw: usize, dil: usize, what: &str) -> Result<(ConvGeom, usize)> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return shape_err(format!("{what}: expected NHWC input, got {xs:?}"));
        }
        if kh.is_multiple_of(2) || kw.is_multiple_of(2) || dil == 0 {
            return shape_err(format!("{what}: same padding needs odd kernels and dilation >= 1"));
        }
        Ok((ConvGeom { n: xs[0], h: xs[1], w: xs[2], kh, kw, dil }, xs[3]))
    }

    /// Same-padded cross-correlation; `w` is `[kh, kw, cin, cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 {
            return shape_err(format!("conv2d weight must be 4-D, got {ws:?}"));
        }
        let (geo, cin) = self.conv_geom(x, ws[0], ws[1], dilation, "conv2d")?;
        if cin != ws[2] {
            return shape_err(format!("conv2d: input has {cin} channels, weight expects {}", ws[2]));
        }
        let cout = ws[3];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return shape_err(format!("conv2d bias {:?} for {cout} channels", self.shape(b)));
            }
        }
        let mut out = vec![T::zero(); geo.n * geo.h * geo.w * cout];
        kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geo, cin, cout, &mut out);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(vec![geo.n, geo.h, geo.w, cout], out, Op::Conv2d { x, w, b, geo }, ng))
    }

    /// Same-padded per-channel convolution; `w` is `[kh, kw, c]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 {
            return shape_err(format!("depthwise weight must be 3-D, got {ws:?}"));
        }
        let (geo, c) = self.conv_geom(x, ws[0], ws[1], dilation, "depthwise_conv2d")?;
        if c != ws[2] {
            return shape_err(format!("depthwise: input has {c} channels, weight {}", ws[2]));
        }
        let mut out = vec![T::zero(); self.value(x).len()];
        kernels::depthwise_forward(self.value(x), self.value(w), geo, c, &mut out);
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Depthwise { x, w, geo }, ng))
    }

    /// Depthwise 3x3 followed by pointwise 1x1 mixing with bias.
    pub fn separable_conv2d(&mut self, x: Var, depthwise: Var, pointwise: Var, bias: Var) -> Result<Var> {
        let d = self.depthwise_conv2d(x, depthwise, 1)?;
        self.dense(d, pointwise, Some(bias))
    }

    /// Batch normalization over every axis but the last.
    ///
    /// With `running = None` the batch statistics are used and returned; with
    /// `running = Some((mean, var))` those fixed statistics are used instead.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().ok_or_else(|| Error::Shape("batchnorm of a scalar".into()))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(format!("batchnorm params must be [{c}]"));
        }
        let rows = numel(&xs) / c.max(1);
        if rows == 0 {
            return Err(Error::Shape("batchnorm over an empty batch".into()));
        }
        let xv = self.value(x);
        let eps = T::of(BN_EPS);
        let (mean, var, stats) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return shape_err("running statistics length".into());
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                let n = T::from_usize(rows).unwrap();
                let mut mean = vec![T::zero(); c];
                for r in xv.chunks_exact(c) {
                    kernels::axpy(T::one(), r, &mut mean);
                }
                mean.iter_mut().for_each(|m| *m /= n);
                let mut var = vec![T::zero(); c];
                for r in xv.chunks_exact(c) {
                    for ((v, &x), &m) in var.iter_mut().zip(r).zip(&mean) {
                        *v += (x - m) * (x - m);
                    }
                }
                var.iter_mut().for_each(|v| *v /= n);
                (mean.clone(), var.clone(), Some(BatchStats { mean, var }))
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for r in xv.chunks_exact(c) {
            for i in 0..c {
                let h = (r[i] - mean[i]) * inv_std[i];
                xhat.push(h);
                out.push(g[i] * h + b[i]);
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let batch_stats = stats.is_some();
        let v = self.push(xs, out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats }, ng);
        Ok((v, stats))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let l = *xs.last().ok_or_else(|| Error::Shape("softmax of a scalar".into()))?;
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(l) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let ng = self.ng(x);
        Ok(self.push(xs, out, Op::Softmax(x), ng))
    }

    /// Batched `[bt, m, k] x [bt, k, n]`, or `x [bt, n, k]^T` with `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err(format!("batch_matmul: {sa:?} x {sb:?}"));
        }
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return shape_err(format!("batch_matmul inner dims: {sa:?} x {sb:?} (trans_b={trans_b})"));
        }
        let mut out = vec![T::zero(); bt * m * n];
        kernels::batch_matmul(self.value(a), self.value(b), bt, m, k, n, trans_b, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![bt, m, n], out, Op::BatchMatmul { a, b, trans_b }, ng))
    }

    /// Masked binary cross-entropy in bits per unmasked bit.
    ///
    /// `bits[i]` is the transmitted bit; positive LLRs favour 0, so
    /// `q(b = 0) = sigmoid(llr)`. Entries with `mask[i] == false` are ignored.
    pub fn bce_from_llr(&mut self, llr: Var, bits: &[u8], mask: &[bool]) -> Result<Var> {
        let n = self.value(llr).len();
        if bits.len() != n || mask.len() != n {
            return shape_err(format!("bce: {n} LLRs, {} bits, {} mask entries", bits.len(), mask.len()));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Shape("bce with every entry masked".into()));
        }
        let sign: Vec<T> = bits
            .iter()
            .zip(mask)
            .map(|(&b, &m)| match (m, b) {
                (false, _) => T::zero(),
                (true, 0) => T::one(),
                (true, _) => -T::one(),
            })
            .collect();
        let ln2 = T::of(std::f64::consts::LN_2);
        let mut total = T::zero();
        for (&l, &s) in self.value(llr).iter().zip(&sign) {
            if s != T::zero() {
                total += softplus(-s * l);
            }
        }
        let loss = total / ln2 / T::from_usize(count).unwrap();
        let ng = self.ng(llr);
        Ok(self.push(vec![1], vec![loss], Op::Bce { llr, sign, count }, ng))
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar root, got shape {:?}", self.shape(root))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.vjp(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn vjp(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;

        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = accumulator(nodes, v, grads) {
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(d) = accumulator(nodes, *a, grads) {
                    d.iter_mut().zip(g).zip(vb).for_each(|((d, &g), &y)| *d += g * y);
                }
                if let Some(d) = accumulator(nodes, *b, grads) {
                    d.iter_mut().zip(g).zip(va).for_each(|((d, &g), &x)| *d += g * x);
                }
            }
            Op::Scale(x, s) => {
                if let Some(d) = accumulator(nodes, *x, grads) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *s);
                }
            }
            Op::Relu(x) => {
                let xv = &nodes[x.0].value;
                if let Some(d) = accumulator(nodes, *x, grads) {
                    for ((d, &g), &xv) in d.iter_mut().zip(g).zip(xv) {
                        if xv > T::zero() {
                            *d += g;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = accumulator(nodes, *x, grads) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = accumulator(nodes, *x, grads) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
            }
            Op::Permute { x, map } => {
                if let Some(d) = accumulator(nodes, *x, grads) {
                    for (&src, &gv) in map.iter().zip(g) {
                        d[src] += gv;
                    }
                }
            }
            Op::Concat(xs) => {
                let total = *node.shape.last().unwrap();
                let rows = node.value.len() / total.max(1);
                let mut off = 0;
                for &x in xs {
                    let w = *nodes[x.0].shape.last().unwrap();
                    if let Some(d) = accumulator(nodes, x, grads) {
                        for r in 0..rows {
                            let src = &g[r * total + off..r * total + off + w];
                            d[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(d, &g)| *d += g);
                        }
                    }
                    off += w;
                }
            }
            Op::Dense { x, w, b } => {
                let ws = &nodes[w.0].shape;
                let (n_in, n_out) = (ws[0], ws[1]);
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                let mut dx = accumulator(nodes, *x, grads).map(std::mem::take);
                let mut dw = accumulator(nodes, *w, grads).map(std::mem::take);
                let mut db = b.and_then(|b| accumulator(nodes, b, grads)).map(std::mem::take);
                kernels::dense_backward(
                    xv,
                    wv,
                    g,
                    n_in,
                    n_out,
                    DenseGrads { dx: dx.as_deref_mut(), dw: dw.as_deref_mut(), db: db.as_deref_mut() },
                );
                restore(grads, *x, dx);
                restore(grads, *w, dw);
                if let Some(b) = b {
                    restore(grads, *b, db);
                }
            }
            Op::Conv2d { x, w, b, geo } => {
                let ws = &nodes[w.0].shape;
                let (cin, cout) = (ws[2], ws[3]);
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                let mut dx = accumulator(nodes, *x, grads).map(std::mem::take);
                let mut dw = accumulator(nodes, *w, grads).map(std::mem::take);
                let mut db = b.and_then(|b| accumulator(nodes, b, grads)).map(std::mem::take);
                kernels::conv2d_backward(
                    xv,
                    wv,
                    g,
                    *geo,
                    cin,
                    cout,
                    DenseGrads { dx: dx.as_deref_mut(), dw: dw.as_deref_mut(), db: db.as_deref_mut() },
                );
                restore(grads, *x, dx);
                restore(grads, *w, dw);
                if let Some(b) = b {
                    restore(grads, *b, db);
                }
            }
            Op::Depthwise { x, w, geo } => {
                let c = *nodes[x.0].shape.last().unwrap();
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                let mut dx = accumulator(nodes, *x, grads).map(std::mem::take);
                let mut dw = accumulator(nodes, *w, grads).map(std::mem::take);
                kernels::depthwise_backward(xv, wv, g, *geo, c, dx.as_deref_mut(), dw.as_deref_mut());
                restore(grads, *x, dx);
                restore(grads, *w, dw);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let c = inv_std.len();
                let gv = &nodes[gamma.0].value;
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for i in 0..c {
                        dgamma[i] += gr[i] * hr[i];
                        dbeta[i] += gr[i];
                    }
                }
                if let Some(d) = accumulator(nodes, *x, grads) {
                    if *batch_stats {
                        let n = T::from_usize(g.len() / c).unwrap();
                        // mean(dxhat) = gamma dbeta / n, mean(dxhat xhat) = gamma dgamma / n
                        let m1: Vec<T> = (0..c).map(|i| gv[i] * dbeta[i] / n).collect();
                        let m2: Vec<T> = (0..c).map(|i| gv[i] * dgamma[i] / n).collect();
                        for ((dr, gr), hr) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(xhat.chunks_exact(c)) {
                            for i in 0..c {
                                dr[i] += inv_std[i] * (gv[i] * gr[i] - m1[i] - hr[i] * m2[i]);
                            }
                        }
                    } else {
                        for (dr, gr) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                            for i in 0..c {
                                dr[i] += gv[i] * inv_std[i] * gr[i];
                            }
                        }
                    }
                }
                if let Some(d) = accumulator(nodes, *gamma, grads) {
                    d.iter_mut().zip(&dgamma).for_each(|(d, &v)| *d += v);
                }
                if let Some(d) = accumulator(nodes, *beta, grads) {
                    d.iter_mut().zip(&dbeta).for_each(|(d, &v)| *d += v);
                }
            }
            Op::Softmax(x) => {
                let l = *node.shape.last().unwrap();
                let y = &node.value;
                if let Some(d) = accumulator(nodes, *x, grads) {
                    for ((dr, gr), yr) in d.chunks_exact_mut(l).zip(g.chunks_exact(l)).zip(y.chunks_exact(l)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for i in 0..l {
                            dr[i] += yr[i] * (gr[i] - dot);
                        }
                    }
                }
            }
            Op::BatchMatmul { a, b, trans_b } => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(d) = accumulator(nodes, *a, grads) {
                    // dA = G B^T  (or G B when B was transposed)
                    let mut tmp = vec![T::zero(); bt * m * k];
                    kernels::batch_matmul(g, bv, bt, m, n, k, !*trans_b, &mut tmp);
                    d.iter_mut().zip(&tmp).for_each(|(d, &v)| *d += v);
                }
                if let Some(d) = accumulator(nodes, *b, grads) {
                    // A^T G is k x n; with trans_b we need G^T A, n x k.
                    for t in 0..bt {
                        let at = &av[t * m * k..(t + 1) * m * k];
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let dt = &mut d[t * k * n..(t + 1) * k * n];
                        for i in 0..m {
                            for p in 0..k {
                                let a_ip = at[i * k + p];
                                for j in 0..n {
                                    let idx = if *trans_b { j * k + p } else { p * n + j };
                                    dt[idx] += a_ip * gt[i * n + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::Bce { llr, sign, count } => {
                let lv = &nodes[llr.0].value;
                let scale = g[0] / (T::of(std::f64::consts::LN_2) * T::from_usize(*count).unwrap());
                if let Some(d) = accumulator(nodes, *llr, grads) {
                    for ((d, &l), &s) in d.iter_mut().zip(lv).zip(sign) {
                        if s != T::zero() {
                            // d softplus(-s l) / dl = -s sigmoid(-s l)
                            *d += -s * sigmoid(-s * l) * scale;
                        }
                    }
                }
            }
        }
    }
}

fn accumulator<'g, T: Scalar>(nodes: &[Node<T>], v: Var, grads: &'g mut [Option<Vec<T>>]) -> Option<&'g mut Vec<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn restore<T>(grads: &mut [Option<Vec<T>>], v: Var, d: Option<Vec<T>>) {
    if let Some(d) = d {
        grads[v.0] = Some(d);
    }
}

pub fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests;
