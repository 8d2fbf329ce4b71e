//! Raw NHWC loops behind the differentiable ops. Inner loops run over the
//! contiguous channel axis so they vectorize.

use super::Scalar;

#[inline]
pub(crate) fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

#[inline]
fn add_into<T: Scalar>(x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += xv;
    }
}

/// Row-major transpose of a `rows x cols` block.
pub(crate) fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `out[r, :] = bias + x[r, :] * w` for `x: rows x n_in`, `w: n_in x n_out`.
pub(crate) fn dense_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, n_in: usize, n_out: usize, out: &mut [T]) {
    for (xr, or) in x.chunks_exact(n_in).zip(out.chunks_exact_mut(n_out)) {
        match bias {
            Some(b) => or.copy_from_slice(b),
            None => or.fill(T::zero()),
        }
        for (k, &a) in xr.iter().enumerate() {
            axpy(a, &w[k * n_out..(k + 1) * n_out], or);
        }
    }
}

pub(crate) struct DenseGrads<'a, T> {
    pub dx: Option<&'a mut [T]>,
    pub dw: Option<&'a mut [T]>,
    pub db: Option<&'a mut [T]>,
}

pub(crate) fn dense_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    g: &[T],
    n_in: usize,
    n_out: usize,
    grads: DenseGrads<'_, T>,
) {
    if let Some(dx) = grads.dx {
        let wt = transpose(w, n_in, n_out);
        for (gr, dxr) in g.chunks_exact(n_out).zip(dx.chunks_exact_mut(n_in)) {
            for (j, &a) in gr.iter().enumerate() {
                axpy(a, &wt[j * n_in..(j + 1) * n_in], dxr);
            }
        }
    }
    if let Some(dw) = grads.dw {
        for (xr, gr) in x.chunks_exact(n_in).zip(g.chunks_exact(n_out)) {
            for (k, &a) in xr.iter().enumerate() {
                axpy(a, gr, &mut dw[k * n_out..(k + 1) * n_out]);
            }
        }
    }
    if let Some(db) = grads.db {
        for gr in g.chunks_exact(n_out) {
            add_into(gr, db);
        }
    }
}

/// Geometry of a same-padded 2-D convolution over NHWC data.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub dil: usize,
}

impl ConvGeom {
    /// Input pixel for output pixel `(i, j)` and tap `(ki, kj)`, if inside.
    #[inline]
    fn tap(&self, i: usize, j: usize, ki: usize, kj: usize) -> Option<(usize, usize)> {
        let ph = self.dil * (self.kh - 1) / 2;
        let pw = self.dil * (self.kw - 1) / 2;
        let ii = (i + ki * self.dil).checked_sub(ph)?;
        let jj = (j + kj * self.dil).checked_sub(pw)?;
        (ii < self.h && jj < self.w).then_some((ii, jj))
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        // f(out_pixel, in_pixel, tap)
        for b in 0..self.n {
            for i in 0..self.h {
                for j in 0..self.w {
                    let op = (b * self.h + i) * self.w + j;
                    for ki in 0..self.kh {
                        for kj in 0..self.kw {
                            if let Some((ii, jj)) = self.tap(i, j, ki, kj) {
                                f(op, (b * self.h + ii) * self.w + jj, ki * self.kw + kj);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Full convolution, weights `[kh, kw, cin, cout]`.
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    geo: ConvGeom,
    cin: usize,
    cout: usize,
    out: &mut [T],
) {
    match bias {
        Some(b) => out.chunks_exact_mut(cout).for_each(|o| o.copy_from_slice(b)),
        None => out.fill(T::zero()),
    }
    let block = cin * cout;
    geo.for_each_tap(|op, ip, tap| {
        let xp = &x[ip * cin..(ip + 1) * cin];
        let wk = &w[tap * block..(tap + 1) * block];
        let o = &mut out[op * cout..(op + 1) * cout];
        for (c, &a) in xp.iter().enumerate() {
            axpy(a, &wk[c * cout..(c + 1) * cout], o);
        }
    });
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    g: &[T],
    geo: ConvGeom,
    cin: usize,
    cout: usize,
    grads: DenseGrads<'_, T>,
) {
    let block = cin * cout;
    let taps = geo.kh * geo.kw;
    if let Some(dx) = grads.dx {
        let wt: Vec<T> = (0..taps).flat_map(|t| transpose(&w[t * block..(t + 1) * block], cin, cout)).collect();
        geo.for_each_tap(|op, ip, tap| {
            let gp = &g[op * cout..(op + 1) * cout];
            let wk = &wt[tap * block..(tap + 1) * block];
            let d = &mut dx[ip * cin..(ip + 1) * cin];
            for (o, &a) in gp.iter().enumerate() {
                axpy(a, &wk[o * cin..(o + 1) * cin], d);
            }
        });
    }
    if let Some(dw) = grads.dw {
        geo.for_each_tap(|op, ip, tap| {
            let gp = &g[op * cout..(op + 1) * cout];
            let xp = &x[ip * cin..(ip + 1) * cin];
            let dk = &mut dw[tap * block..(tap + 1) * block];
            for (c, &a) in xp.iter().enumerate() {
                axpy(a, gp, &mut dk[c * cout..(c + 1) * cout]);
            }
        });
    }
    if let Some(db) = grads.db {
        for gp in g.chunks_exact(cout) {
            add_into(gp, db);
        }
    }
}

/// Per-channel convolution, weights `[kh, kw, c]`.
pub(crate) fn depthwise_forward<T: Scalar>(x: &[T], w: &[T], geo: ConvGeom, c: usize, out: &mut [T]) {
    out.fill(T::zero());
    geo.for_each_tap(|op, ip, tap| {
        let xp = &x[ip * c..(ip + 1) * c];
        let wk = &w[tap * c..(tap + 1) * c];
        for ((o, &xv), &wv) in out[op * c..(op + 1) * c].iter_mut().zip(xp).zip(wk) {
            *o += xv * wv;
        }
    });
}

pub(crate) fn depthwise_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    g: &[T],
    geo: ConvGeom,
    c: usize,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    geo.for_each_tap(|op, ip, tap| {
        let gp = &g[op * c..(op + 1) * c];
        let wk = &w[tap * c..(tap + 1) * c];
        if let Some(dx) = dx.as_deref_mut() {
            for ((d, &gv), &wv) in dx[ip * c..(ip + 1) * c].iter_mut().zip(gp).zip(wk) {
                *d += gv * wv;
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let xp = &x[ip * c..(ip + 1) * c];
            for ((d, &gv), &xv) in dw[tap * c..(tap + 1) * c].iter_mut().zip(gp).zip(xp) {
                *d += gv * xv;
            }
        }
    });
}

/// `C[b] = A[b] B[b]` (or `A[b] B[b]^T`), `A: m x k`.
pub(crate) fn batch_matmul<T: Scalar>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
    out: &mut [T],
) {
    out.fill(T::zero());
    for t in 0..batch {
        let at = &a[t * m * k..(t + 1) * m * k];
        let bt = &b[t * k * n..(t + 1) * k * n];
        let ot = &mut out[t * m * n..(t + 1) * m * n];
        for i in 0..m {
            let orow = &mut ot[i * n..(i + 1) * n];
            if trans_b {
                // b is n x k
                for (j, o) in orow.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for (&x, &y) in at[i * k..(i + 1) * k].iter().zip(&bt[j * k..(j + 1) * k]) {
                        acc += x * y;
                    }
                    *o = acc;
                }
            } else {
                for (p, &av) in at[i * k..(i + 1) * k].iter().enumerate() {
                    axpy(av, &bt[p * n..(p + 1) * n], orow);
                }
            }
        }
    }
}

/// Row-major strides.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every output linear index of a permutation, the source linear index.
pub(crate) fn permute_map(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..total {
        map.push(src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    map
}
