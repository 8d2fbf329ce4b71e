//! Independent reference computations for the classical receiver.
//!
//! Nothing here touches `nalgebra` or the receiver code paths: matrices are
//! plain row-major vectors, solves use Gaussian elimination with partial
//! pivoting, and inverse square roots use the Denman-Beavers iteration.

use num_complex::Complex64;
use rand::Rng;

use crate::linalg::{CMat, CVec};
use crate::modem::{qam_constellation, Constellation};
use crate::rng::{complex_normal, seeded};
use crate::rxchain;

/// Row-major dense complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![Complex64::new(0.0, 0.0); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn at(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }

    pub fn from_nalgebra(m: &CMat) -> Self {
        let mut d = Self::zeros(m.nrows(), m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                d.data[r * m.ncols() + c] = m[(r, c)];
            }
        }
        d
    }

    pub fn from_vector(v: &CVec) -> Self {
        Self { rows: v.len(), cols: 1, data: v.iter().copied().collect() }
    }

    pub fn mul(&self, o: &Dense) -> Dense {
        assert_eq!(self.cols, o.rows);
        let mut out = Dense::zeros(self.rows, o.cols);
        for i in 0..self.rows {
            for j in 0..o.cols {
                let mut acc = Complex64::new(0.0, 0.0);
                for k in 0..self.cols {
                    acc += self.at(i, k) * o.at(k, j);
                }
                out.data[i * o.cols + j] = acc;
            }
        }
        out
    }

    pub fn adjoint(&self) -> Dense {
        let mut out = Dense::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.at(i, j).conj();
            }
        }
        out
    }

    pub fn add(&self, o: &Dense) -> Dense {
        Dense { rows: self.rows, cols: self.cols, data: self.data.iter().zip(&o.data).map(|(a, b)| a + b).collect() }
    }

    pub fn sub(&self, o: &Dense) -> Dense {
        Dense { rows: self.rows, cols: self.cols, data: self.data.iter().zip(&o.data).map(|(a, b)| a - b).collect() }
    }

    pub fn scale(&self, s: Complex64) -> Dense {
        Dense { rows: self.rows, cols: self.cols, data: self.data.iter().map(|a| a * s).collect() }
    }

    /// Solve `self * X = b` by Gaussian elimination with partial pivoting.
    pub fn solve(&self, b: &Dense) -> Dense {
        assert_eq!(self.rows, self.cols);
        let n = self.rows;
        let mut a = self.clone();
        let mut x = b.clone();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| a.at(i, col).norm().total_cmp(&a.at(j, col).norm())).unwrap();
            if piv != col {
                for c in 0..n {
                    a.data.swap(col * n + c, piv * n + c);
                }
                for c in 0..x.cols {
                    x.data.swap(col * x.cols + c, piv * x.cols + c);
                }
            }
            let p = a.at(col, col);
            for r in col + 1..n {
                let f = a.at(r, col) / p;
                if f == Complex64::new(0.0, 0.0) {
                    continue;
                }
                for c in col..n {
                    let v = a.at(col, c);
                    a.data[r * n + c] -= f * v;
                }
                for c in 0..x.cols {
                    let v = x.at(col, c);
                    x.data[r * x.cols + c] -= f * v;
                }
            }
        }
        for col in (0..n).rev() {
            let p = a.at(col, col);
            for c in 0..x.cols {
                let mut acc = x.at(col, c);
                for k in col + 1..n {
                    acc -= a.at(col, k) * x.at(k, c);
                }
                x.data[col * x.cols + c] = acc / p;
            }
        }
        x
    }

    pub fn inverse(&self) -> Dense {
        self.solve(&Dense::identity(self.rows))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

/// Largest absolute deviation, relative to the oracle's largest entry.
pub fn rel_err(got: &Dense, want: &Dense) -> f64 {
    let diff = got.sub(want).max_abs();
    diff / want.max_abs().max(f64::MIN_POSITIVE)
}

pub fn pilot_estimate(y: &Dense, x_p: Complex64, r_s: &Dense, sigma2: f64) -> Dense {
    let n = r_s.rows;
    let a = r_s.add(&Dense::identity(n).scale(Complex64::new(sigma2, 0.0)));
    r_s.mul(&a.solve(y)).scale(x_p.conj())
}

/// `A^{-1/2}` for Hermitian positive definite `A` via Denman-Beavers.
pub fn inv_sqrt(a: &Dense) -> Dense {
    let n = a.rows;
    // Scale to unit trace for fast convergence.
    let tr: f64 = (0..n).map(|i| a.at(i, i).re).sum::<f64>() / n as f64;
    let mut y = a.scale(Complex64::new(1.0 / tr, 0.0));
    let mut z = Dense::identity(n);
    for _ in 0..100 {
        let yi = y.inverse();
        let zi = z.inverse();
        let ny = y.add(&zi).scale(Complex64::new(0.5, 0.0));
        let nz = z.add(&yi).scale(Complex64::new(0.5, 0.0));
        let done = ny.sub(&y).max_abs() < 1e-15 * ny.max_abs();
        y = ny;
        z = nz;
        if done {
            break;
        }
    }
    z.scale(Complex64::new(1.0 / tr.sqrt(), 0.0))
}

pub fn equalize(h_t: &Dense, y_t: &Dense) -> Dense {
    let g = h_t.mul(&h_t.adjoint()).add(&Dense::identity(h_t.rows));
    h_t.adjoint().mul(&g.solve(y_t))
}

pub fn posteq_cov(h_t: &Dense) -> Dense {
    let g = h_t.mul(&h_t.adjoint()).add(&Dense::identity(h_t.rows));
    Dense::identity(h_t.cols).sub(&h_t.adjoint().mul(&g.solve(h_t)))
}

/// Brute-force Gaussian LLRs without log-domain stabilization, clipped like
/// the receiver.
pub fn demap(xhat: Complex64, r: f64, constellation: &Constellation) -> Vec<f64> {
    let k = constellation.bits_per_symbol();
    (0..k)
        .map(|j| {
            let mut num = 0.0;
            let mut den = 0.0;
            for (p, c) in constellation.points().iter().enumerate() {
                let v = (-(c - xhat).norm_sqr() / r).exp();
                if (constellation.labels()[p] >> (k - 1 - j)) & 1 == 0 {
                    num += v;
                } else {
                    den += v;
                }
            }
            (num.ln() - den.ln()).clamp(-rxchain::LLR_CLIP, rxchain::LLR_CLIP)
        })
        .collect()
}

/// Outcome of one oracle comparison family.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub name: &'static str,
    pub cases: usize,
    pub max_err: f64,
    pub tolerance: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.max_err <= self.tolerance
    }
}

fn random_hpd<R: Rng>(rng: &mut R, n: usize, ridge: f64) -> CMat {
    let a = CMat::from_fn(n, n, |_, _| complex_normal(rng, 1.0));
    &a * a.adjoint() + CMat::identity(n, n).scale(ridge)
}

/// Linear-algebra comparisons on `cases` random instances with `N_r, N_u <= 4`.
pub fn linear_algebra_suite(seed: u64, cases: usize) -> Vec<OracleReport> {
    const TOL: f64 = 1e-10;
    let mut rng = seeded(seed);
    let mut worst = [0.0f64; 4];
    for _ in 0..cases {
        let n_r = rng.random_range(1..=4);
        let n_u = rng.random_range(1..=4);
        let sigma2 = 10f64.powf(rng.random_range(-2.0..1.0));
        // lmmse_pilot_estimate
        let r_s = random_hpd(&mut rng, n_r, 0.0);
        let y = CVec::from_fn(n_r, |_, _| complex_normal(&mut rng, 1.0));
        let x_p = Complex64::from_polar(1.0, rng.random_range(0.0..std::f64::consts::TAU));
        let got = rxchain::lmmse_pilot_estimate(&y, x_p, &r_s, sigma2).expect("valid inputs");
        let want = pilot_estimate(&Dense::from_vector(&y), x_p, &Dense::from_nalgebra(&r_s), sigma2);
        worst[0] = worst[0].max(rel_err(&Dense::from_vector(&got), &want));
        // whiten
        let r_w = random_hpd(&mut rng, n_r, sigma2);
        let hhat = CMat::from_fn(n_r, n_u, |_, _| complex_normal(&mut rng, 1.0));
        let (yt, ht) = rxchain::whiten(&y, &hhat, &r_w).expect("positive definite");
        let w = inv_sqrt(&Dense::from_nalgebra(&r_w));
        let e1 = rel_err(&Dense::from_vector(&yt), &w.mul(&Dense::from_vector(&y)));
        let e2 = rel_err(&Dense::from_nalgebra(&ht), &w.mul(&Dense::from_nalgebra(&hhat)));
        worst[1] = worst[1].max(e1.max(e2));
        // lmmse_equalize and posteq_cov
        let got = rxchain::lmmse_equalize(&ht, &yt).expect("shapes agree");
        let want = equalize(&Dense::from_nalgebra(&ht), &Dense::from_vector(&yt));
        worst[2] = worst[2].max(rel_err(&Dense::from_vector(&got), &want));
        let got = rxchain::posteq_cov(&ht);
        let want = posteq_cov(&Dense::from_nalgebra(&ht));
        worst[3] = worst[3].max(rel_err(&Dense::from_nalgebra(&got), &want));
    }
    ["lmmse_pilot_estimate", "whiten", "lmmse_equalize", "posteq_cov"]
        .into_iter()
        .zip(worst)
        .map(|(name, max_err)| OracleReport { name, cases, max_err, tolerance: TOL })
        .collect()
}

/// Gaussian demapper against the brute-force sum for QPSK and 16-QAM, plus the
/// QPSK closed form `2 sqrt(2) Re(x) / r`.
pub fn demapper_suite(seed: u64, cases: usize) -> Vec<OracleReport> {
    const TOL: f64 = 1e-9;
    let mut rng = seeded(seed);
    let mut reports = Vec::new();
    for k in [2usize, 4] {
        let con = qam_constellation(k).expect("supported constellation");
        let mut worst = 0.0f64;
        let mut worst_closed = 0.0f64;
        for _ in 0..cases {
            let x = Complex64::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
            let r = rng.random_range(0.05..2.0);
            let got = rxchain::gaussian_demap(x, r, &con).expect("positive variance");
            let want = demap(x, r, &con);
            for (g, w) in got.iter().zip(&want) {
                worst = worst.max((g - w).abs());
            }
            if k == 2 {
                let closed =
                    [x.re, x.im].map(|v| (2.0 * 2f64.sqrt() * v / r).clamp(-rxchain::LLR_CLIP, rxchain::LLR_CLIP));
                for (g, w) in got.iter().zip(closed) {
                    worst_closed = worst_closed.max((g - w).abs());
                }
            }
        }
        let name = if k == 2 { "gaussian_demap_qpsk" } else { "gaussian_demap_16qam" };
        reports.push(OracleReport { name, cases, max_err: worst, tolerance: TOL });
        if k == 2 {
            reports.push(OracleReport {
                name: "gaussian_demap_qpsk_closed_form",
                cases,
                max_err: worst_closed,
                tolerance: TOL,
            });
        }
    }
    reports
}
