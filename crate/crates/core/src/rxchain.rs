//! Classical receiver: pilot LMMSE estimation with nearest-pilot extension,
//! noise whitening, LMMSE equalization and Gaussian demapping.

use num_complex::Complex64;

use crate::channel::ChannelRealization;
use crate::error::{Error, Result};
use crate::grid::{GridDims, PilotPattern, ResourceGrid, UserGrid};
use crate::linalg::{hermitian_inv_sqrt, hermitize, hpd_inverse, identity, CMat, CVec};
use crate::modem::Constellation;

/// LLR magnitude limit applied by the demapper.
pub const LLR_CLIP: f64 = 20.0;

/// Per-RE channel estimate plus grid-constant error statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelEstimate {
    pub hhat: ResourceGrid<CMat>,
    /// Composite estimation-error covariance `R_e`.
    pub r_e: CMat,
    /// Effective noise covariance `R_w = R_e + sigma^2 I`.
    pub r_w: CMat,
}

/// Equalized symbols and their post-equalization error variances.
#[derive(Debug, Clone, PartialEq)]
pub struct EqualizedOutput {
    pub xhat: UserGrid<Complex64>,
    pub r_x: UserGrid<f64>,
}

/// LLRs laid out `[user][m][n][j]`; positive favours bit 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LlrGrid {
    n_u: usize,
    dims: GridDims,
    k: usize,
    data: Vec<f64>,
}

impl LlrGrid {
    pub fn zeros(n_u: usize, dims: GridDims, k: usize) -> Self {
        Self { n_u, dims, k, data: vec![0.0; n_u * dims.num_res() * k] }
    }

    pub fn from_vec(n_u: usize, dims: GridDims, k: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_u * dims.num_res() * k {
            return Err(Error::Shape(format!(
                "LLR grid needs {} values, got {}",
                n_u * dims.num_res() * k,
                data.len()
            )));
        }
        Ok(Self { n_u, dims, k, data })
    }

    pub fn n_users(&self) -> usize {
        self.n_u
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.k
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn symbol(&self, user: usize, re: crate::grid::ReIndex) -> &[f64] {
        let o = (user * self.dims.num_res() + self.dims.linear(re)) * self.k;
        &self.data[o..o + self.k]
    }

    pub fn symbol_mut(&mut self, user: usize, re: crate::grid::ReIndex) -> &mut [f64] {
        let o = (user * self.dims.num_res() + self.dims.linear(re)) * self.k;
        &mut self.data[o..o + self.k]
    }
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if sigma2 > 0.0 && sigma2.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("noise variance must be positive, got {sigma2}")))
    }
}

/// `R_s (R_s + sigma^2 I)^{-1}`, the pilot-RE LMMSE filter.
pub fn lmmse_filter(r_s: &CMat, sigma2: f64) -> Result<CMat> {
    check_sigma2(sigma2)?;
    let n = r_s.nrows();
    let inv = hpd_inverse(&(r_s + identity(n).scale(sigma2)))?;
    Ok(r_s * inv)
}

/// LMMSE channel estimate at a pilot RE: `x_p^* R_s (R_s + sigma^2 I)^{-1} y`.
pub fn lmmse_pilot_estimate(y: &CVec, x_p: Complex64, r_s: &CMat, sigma2: f64) -> Result<CVec> {
    if (x_p.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("pilot must have unit magnitude, got {}", x_p.norm())));
    }
    if y.len() != r_s.nrows() || !r_s.is_square() {
        return Err(Error::Shape("received vector and covariance sizes differ".into()));
    }
    Ok((lmmse_filter(r_s, sigma2)? * y) * x_p.conj())
}

/// Pilot-RE error covariance `R_s - R_s (R_s + sigma^2 I)^{-1} R_s`.
pub fn pilot_error_cov(r_s: &CMat, sigma2: f64) -> Result<CMat> {
    let w = lmmse_filter(r_s, sigma2)?;
    Ok(hermitize(&(r_s - w * r_s)))
}

/// Nearest-pilot estimation over a whole grid.
pub fn estimate_grid(
    rx: &ResourceGrid<CVec>,
    pattern: &PilotPattern,
    r_s: &[CMat],
    sigma2: f64,
) -> Result<ChannelEstimate> {
    check_sigma2(sigma2)?;
    let n_u = pattern.n_users();
    if r_s.len() != n_u {
        return Err(Error::Shape(format!("{} spatial covariances for {n_u} users", r_s.len())));
    }
    if rx.dims() != pattern.dims() {
        return Err(Error::Shape("received grid and pilot pattern dims differ".into()));
    }
    let n_r = r_s[0].nrows();
    let filters: Vec<CMat> = r_s.iter().map(|r| lmmse_filter(r, sigma2)).collect::<Result<_>>()?;
    // Pilot-RE estimates, indexed by linear RE.
    let dims = rx.dims();
    let mut at_pilot: Vec<Option<CVec>> = vec![None; dims.num_res()];
    for u in 0..n_u {
        let conj = pattern.pilot_value(u).conj();
        for &re in pattern.pilots(u) {
            let y = &rx[re];
            if y.len() != n_r {
                return Err(Error::Shape(format!("received vector of length {} for {n_r} antennas", y.len())));
            }
            at_pilot[dims.linear(re)] = Some((&filters[u] * y) * conj);
        }
    }
    let hhat = ResourceGrid::from_fn(dims, |re| {
        let mut h = CMat::zeros(n_r, n_u);
        for u in 0..n_u {
            let src = pattern.nearest_unchecked(u, re);
            let est = at_pilot[dims.linear(src)].as_ref().expect("every pilot RE has an estimate");
            h.set_column(u, est);
        }
        h
    });
    let mut r_e = CMat::zeros(n_r, n_r);
    for (r, w) in r_s.iter().zip(&filters) {
        r_e += r - w * r;
    }
    let r_e = hermitize(&r_e);
    let r_w = &r_e + identity(n_r).scale(sigma2);
    Ok(ChannelEstimate { hhat, r_e, r_w })
}

/// Genie estimate: the true channel with zero estimation error.
pub fn perfect_csi(channel: &ChannelRealization, sigma2: f64) -> Result<ChannelEstimate> {
    check_sigma2(sigma2)?;
    let n_r = channel.n_r;
    Ok(ChannelEstimate { hhat: channel.h.clone(), r_e: CMat::zeros(n_r, n_r), r_w: identity(n_r).scale(sigma2) })
}

/// `R_w^{-1/2}` applied to a received vector and a channel matrix.
pub fn whiten(y: &CVec, hhat: &CMat, r_w: &CMat) -> Result<(CVec, CMat)> {
    let w = hermitian_inv_sqrt(r_w)?;
    Ok((&w * y, &w * hhat))
}

/// `(I + H^H H)^{-1}`, equal to `I - H^H (H H^H + I)^{-1} H`.
fn posterior_cov(h_t: &CMat) -> CMat {
    let n_u = h_t.ncols();
    let gram = h_t.adjoint() * h_t + identity(n_u);
    hpd_inverse(&hermitize(&gram)).expect("I + H^H H is positive definite")
}

/// LMMSE estimate `H^H (H H^H + I)^{-1} y` on whitened quantities.
pub fn lmmse_equalize(h_t: &CMat, y_t: &CVec) -> Result<CVec> {
    if h_t.nrows() != y_t.len() {
        return Err(Error::Shape("whitened channel and received vector sizes differ".into()));
    }
    Ok(posterior_cov(h_t) * (h_t.adjoint() * y_t))
}

/// Post-equalization error covariance `R_z`.
pub fn posteq_cov(h_t: &CMat) -> CMat {
    posterior_cov(h_t)
}

/// Whiten, equalize and extract error variances for every RE.
pub fn equalize_grid(rx: &ResourceGrid<CVec>, est: &ChannelEstimate) -> Result<EqualizedOutput> {
    if rx.dims() != est.hhat.dims() {
        return Err(Error::Shape("received grid and estimate dims differ".into()));
    }
    let w = hermitian_inv_sqrt(&est.r_w)?;
    let dims = rx.dims();
    let n_u = est.hhat.as_slice()[0].ncols();
    let mut xhat = UserGrid::filled(n_u, dims, Complex64::new(0.0, 0.0));
    let mut r_x = UserGrid::filled(n_u, dims, 1.0);
    for (re, y) in rx.iter() {
        let h_t = &w * &est.hhat[re];
        let y_t = &w * y;
        let p = posterior_cov(&h_t);
        let x = &p * (h_t.adjoint() * y_t);
        for u in 0..n_u {
            xhat.set(u, re, x[u]);
            r_x.set(u, re, p[(u, u)].re.clamp(f64::MIN_POSITIVE, 1.0));
        }
    }
    Ok(EqualizedOutput { xhat, r_x })
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + it.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-bit LLRs of one equalized symbol under a Gaussian error of variance `r`.
pub fn gaussian_demap(xhat: Complex64, r: f64, constellation: &Constellation) -> Result<Vec<f64>> {
    let mut out = vec![0.0; constellation.bits_per_symbol()];
    gaussian_demap_into(xhat, r, constellation, &mut out)?;
    Ok(out)
}

pub fn gaussian_demap_into(xhat: Complex64, r: f64, constellation: &Constellation, out: &mut [f64]) -> Result<()> {
    if !(r > 0.0) {
        return Err(Error::Domain(format!("error variance must be positive, got {r}")));
    }
    let k = constellation.bits_per_symbol();
    let metric: Vec<f64> = constellation.points().iter().map(|c| -(c - xhat).norm_sqr() / r).collect();
    for (j, o) in out.iter_mut().enumerate().take(k) {
        let zero = log_sum_exp((0..metric.len()).filter(|&p| constellation.bit(p, j) == 0).map(|p| metric[p]));
        let one = log_sum_exp((0..metric.len()).filter(|&p| constellation.bit(p, j) == 1).map(|p| metric[p]));
        *o = (zero - one).clamp(-LLR_CLIP, LLR_CLIP);
    }
    Ok(())
}

/// Gaussian demapping of an entire equalized grid.
pub fn demap_grid(eq: &EqualizedOutput, constellation: &Constellation) -> Result<LlrGrid> {
    let n_u = eq.xhat.n_users();
    let dims = eq.xhat.dims();
    let mut llr = LlrGrid::zeros(n_u, dims, constellation.bits_per_symbol());
    for u in 0..n_u {
        for re in dims.iter() {
            gaussian_demap_into(*eq.xhat.get(u, re), *eq.r_x.get(u, re), constellation, llr.symbol_mut(u, re))?;
        }
    }
    Ok(llr)
}
