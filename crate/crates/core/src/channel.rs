//! Synthetic correlated MU-MIMO channels, AWGN and grid SNR.
//!
//! Each user's channel is a tapped delay line with an exponential power-delay
//! profile. Every tap is a receive-correlated complex Gaussian vector that
//! evolves over OFDM symbols as a first-order autoregressive process; the
//! per-subcarrier response is the DFT of the tap vector.

use std::io::{Read, Write};

use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{GridDims, ResourceGrid};
use crate::linalg::{hermitian_sqrt, CMat, CVec};
use crate::rng::complex_normal;

/// Parameters of the synthetic channel model.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelModelCfg {
    pub n_r: usize,
    pub n_u: usize,
    /// Exponential receive correlation between adjacent antennas, in `[0, 1)`.
    pub rho_rx: f64,
    /// AR(1) coefficient of tap evolution per OFDM symbol, in `[0, 1]`.
    pub ar_time: f64,
    pub n_taps: usize,
    /// Power ratio between consecutive taps, in `(0, 1]`.
    pub tap_decay: f64,
    /// Per-user average gain (linear). Empty means all ones.
    #[serde(default)]
    pub gains: Vec<f64>,
    /// Mixing coefficient of shared-cluster mode: user `2k+1` reuses this
    /// fraction of user `2k`'s innovations. Zero disables the mode.
    #[serde(default)]
    pub cluster_mix: f64,
}

impl ChannelModelCfg {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_r == 0 || self.n_u == 0 {
            return bad(format!("n_r and n_u must be positive (n_r={}, n_u={})", self.n_r, self.n_u));
        }
        if !(0.0..1.0).contains(&self.rho_rx) {
            return bad(format!("rho_rx {} outside [0, 1)", self.rho_rx));
        }
        if !(0.0..=1.0).contains(&self.ar_time) {
            return bad(format!("ar_time {} outside [0, 1]", self.ar_time));
        }
        if self.n_taps == 0 {
            return bad("n_taps must be positive".into());
        }
        if !(self.tap_decay > 0.0 && self.tap_decay <= 1.0) {
            return bad(format!("tap_decay {} outside (0, 1]", self.tap_decay));
        }
        if !self.gains.is_empty() && self.gains.len() != self.n_u {
            return bad(format!("{} gains for {} users", self.gains.len(), self.n_u));
        }
        if self.gains.iter().any(|&g| !(g > 0.0)) {
            return bad("user gains must be positive".into());
        }
        if !(0.0..1.0).contains(&self.cluster_mix) {
            return bad(format!("cluster_mix {} outside [0, 1)", self.cluster_mix));
        }
        Ok(())
    }

    pub fn gain(&self, user: usize) -> f64 {
        self.gains.get(user).copied().unwrap_or(1.0)
    }

    /// Normalized power-delay profile; sums to one.
    pub fn pdp(&self) -> Vec<f64> {
        let raw: Vec<f64> = (0..self.n_taps).map(|l| self.tap_decay.powi(l as i32)).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|p| p / total).collect()
    }
}

/// Per-RE composite channels and the per-user spatial covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub n_r: usize,
    pub n_u: usize,
    /// `H_{m,n}`, `n_r x n_u` per RE.
    pub h: ResourceGrid<CMat>,
    /// `R_s^{(i)}`, `n_r x n_r` per user.
    pub r_s: Vec<CMat>,
}

impl ChannelRealization {
    pub fn dims(&self) -> GridDims {
        self.h.dims()
    }

    /// Received grid `y = H x` (noise is added separately).
    pub fn apply(&self, tx: &ResourceGrid<CVec>) -> Result<ResourceGrid<CVec>> {
        if tx.dims() != self.dims() {
            return Err(Error::Shape("tx grid and channel dims differ".into()));
        }
        let mut out = Vec::with_capacity(self.dims().num_res());
        for ((_, h), (_, x)) in self.h.iter().zip(tx.iter()) {
            if x.len() != self.n_u {
                return Err(Error::Shape(format!("tx vector of length {} for {} users", x.len(), self.n_u)));
            }
            out.push(h * x);
        }
        ResourceGrid::from_vec(self.dims(), out)
    }

    /// `sum_{m,n} ||H_{m,n}||_F^2`.
    pub fn total_power(&self) -> f64 {
        self.h.as_slice().iter().map(|h| h.iter().map(|z| z.norm_sqr()).sum::<f64>()).sum()
    }

    /// Binary dump: `n_f, n_t, n_r, n_u` as little-endian u64, then every RE
    /// in row-major `(m, n)` order with `H` row-major as interleaved re/im f64.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.dims();
        for v in [d.n_f, d.n_t, self.n_r, self.n_u] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for h in self.h.as_slice() {
            for r in 0..self.n_r {
                for c in 0..self.n_u {
                    let z = h[(r, c)];
                    w.write_all(&z.re.to_le_bytes())?;
                    w.write_all(&z.im.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    /// Read a dump written by [`Self::write_binary`]. The spatial covariances are
    /// not part of the dump and must be supplied.
    pub fn read_binary<R: Read>(mut r: R, r_s: Vec<CMat>) -> Result<Self> {
        let mut u = [0u8; 8];
        let mut next_u64 = |r: &mut R| -> Result<usize> {
            r.read_exact(&mut u)?;
            Ok(u64::from_le_bytes(u) as usize)
        };
        let (n_f, n_t, n_r, n_u) = (next_u64(&mut r)?, next_u64(&mut r)?, next_u64(&mut r)?, next_u64(&mut r)?);
        let dims = GridDims::new(n_f, n_t)?;
        if r_s.len() != n_u || r_s.iter().any(|m| m.shape() != (n_r, n_r)) {
            return Err(Error::Shape("spatial covariances do not match the dump header".into()));
        }
        let mut f = [0u8; 8];
        let mut data = Vec::with_capacity(dims.num_res());
        for _ in 0..dims.num_res() {
            let mut h = CMat::zeros(n_r, n_u);
            for row in 0..n_r {
                for col in 0..n_u {
                    r.read_exact(&mut f)?;
                    let re = f64::from_le_bytes(f);
                    r.read_exact(&mut f)?;
                    let im = f64::from_le_bytes(f);
                    h[(row, col)] = Complex64::new(re, im);
                }
            }
            data.push(h);
        }
        Ok(Self { n_r, n_u, h: ResourceGrid::from_vec(dims, data)?, r_s })
    }
}

/// Exponential receive correlation `[R]_{a,b} = gain * rho^{|a-b|}`.
pub fn spatial_cov(cfg: &ChannelModelCfg, user: usize) -> Result<CMat> {
    cfg.validate()?;
    if user >= cfg.n_u {
        return Err(Error::Config(format!("user {user} out of range for {} users", cfg.n_u)));
    }
    let g = cfg.gain(user);
    Ok(CMat::from_fn(cfg.n_r, cfg.n_r, |a, b| Complex64::new(g * cfg.rho_rx.powi(a.abs_diff(b) as i32), 0.0)))
}

/// Draw one channel realization over `dims`.
pub fn gen_channel<R: Rng + ?Sized>(cfg: &ChannelModelCfg, dims: GridDims, rng: &mut R) -> Result<ChannelRealization> {
    cfg.validate()?;
    let (n_r, n_u, n_taps) = (cfg.n_r, cfg.n_u, cfg.n_taps);
    let r_s: Vec<CMat> = (0..n_u).map(|u| spatial_cov(cfg, u)).collect::<Result<_>>()?;
    let colour: Vec<CMat> = r_s.iter().map(hermitian_sqrt).collect();
    let amp: Vec<f64> = cfg.pdp().into_iter().map(f64::sqrt).collect();
    let a = cfg.ar_time;
    let innov = (1.0 - a * a).max(0.0).sqrt();
    let mix = cfg.cluster_mix;
    let own = (1.0 - mix * mix).sqrt();

    // White innovations for every (user, tap), mixed pairwise in cluster mode.
    let draw_white = |rng: &mut R| -> Vec<Vec<CVec>> {
        let mut w: Vec<Vec<CVec>> = (0..n_u)
            .map(|_| (0..n_taps).map(|_| CVec::from_fn(n_r, |_, _| complex_normal(rng, 1.0))).collect())
            .collect();
        if mix > 0.0 {
            for u in (1..n_u).step_by(2) {
                for l in 0..n_taps {
                    w[u][l] = w[u - 1][l].scale(mix) + w[u][l].scale(own);
                }
            }
        }
        w
    };

    // Taps per symbol: taps[n][u][l].
    let mut taps: Vec<Vec<Vec<CVec>>> = Vec::with_capacity(dims.n_t);
    let first = draw_white(rng);
    taps.push(first.iter().enumerate().map(|(u, ws)| ws.iter().map(|w| &colour[u] * w).collect()).collect());
    for n in 1..dims.n_t {
        let step = if innov > 0.0 { Some(draw_white(rng)) } else { None };
        let prev = &taps[n - 1];
        let cur = (0..n_u)
            .map(|u| {
                (0..n_taps)
                    .map(|l| match &step {
                        Some(w) => prev[u][l].scale(a) + (&colour[u] * &w[u][l]).scale(innov),
                        None => prev[u][l].clone(),
                    })
                    .collect()
            })
            .collect();
        taps.push(cur);
    }

    // Twiddles e^{-j 2 pi m l / n_f}.
    let twiddle = |m: usize, l: usize| -> Complex64 {
        let phase = -2.0 * std::f64::consts::PI * ((m * l) % dims.n_f) as f64 / dims.n_f as f64;
        Complex64::from_polar(1.0, phase)
    };
    let h = ResourceGrid::from_fn(dims, |re| {
        let mut hm = CMat::zeros(n_r, n_u);
        for u in 0..n_u {
            let mut col = CVec::zeros(n_r);
            for l in 0..n_taps {
                let w = twiddle(re.m, l) * amp[l];
                col.axpy(w, &taps[re.n][u][l], Complex64::new(1.0, 0.0));
            }
            hm.set_column(u, &col);
        }
        hm
    });
    Ok(ChannelRealization { n_r, n_u, h, r_s })
}

/// Linear grid SNR `sum ||H||_F^2 / (N_f N_t N_r N_u sigma^2)`.
pub fn compute_snr(real: &ChannelRealization, sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::Domain(format!("noise variance must be positive, got {sigma2}")));
    }
    let d = real.dims();
    Ok(real.total_power() / (d.num_res() * real.n_r * real.n_u) as f64 / sigma2)
}

pub fn snr_to_db(snr: f64) -> f64 {
    10.0 * snr.log10()
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Noise variance giving the requested grid SNR on this realization.
pub fn calibrate_sigma2(real: &ChannelRealization, target_snr_db: f64) -> Result<f64> {
    let d = real.dims();
    let mean_power = real.total_power() / (d.num_res() * real.n_r * real.n_u) as f64;
    if !(mean_power > 0.0) {
        return Err(Error::Domain("cannot calibrate SNR on an all-zero channel".into()));
    }
    Ok(mean_power / db_to_linear(target_snr_db))
}

/// Noise variance giving the requested SNR against the model's average
/// channel power rather than the instantaneous one.
pub fn average_sigma2(cfg: &ChannelModelCfg, target_snr_db: f64) -> f64 {
    let mean_gain = (0..cfg.n_u).map(|u| cfg.gain(u)).sum::<f64>() / cfg.n_u as f64;
    mean_gain / db_to_linear(target_snr_db)
}

/// Add circular complex Gaussian noise of variance `sigma2` per sample.
pub fn add_awgn<R: Rng + ?Sized>(signal: &ResourceGrid<CVec>, sigma2: f64, rng: &mut R) -> Result<ResourceGrid<CVec>> {
    if !(sigma2 >= 0.0) {
        return Err(Error::Domain(format!("noise variance must be non-negative, got {sigma2}")));
    }
    if sigma2 == 0.0 {
        return Ok(signal.clone());
    }
    Ok(signal.map(|_, y| y.map(|z| z + complex_normal(rng, sigma2))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{frobenius, hermitian_eigenvalues};
    use crate::rng::seeded;

    fn cfg(n_r: usize, n_u: usize) -> ChannelModelCfg {
        ChannelModelCfg {
            n_r,
            n_u,
            rho_rx: 0.5,
            ar_time: 0.95,
            n_taps: 3,
            tap_decay: 0.5,
            gains: vec![],
            cluster_mix: 0.0,
        }
    }

    #[test]
    fn spatial_cov_examples() {
        let mut c = cfg(3, 1);
        c.rho_rx = 0.0;
        assert_eq!(spatial_cov(&c, 0).unwrap(), CMat::identity(3, 3));
        let mut c = cfg(2, 1);
        c.rho_rx = 0.5;
        let r = spatial_cov(&c, 0).unwrap();
        let want = CMat::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0].map(|x| Complex64::new(x, 0.0)));
        assert_eq!(r, want);
        for rho in [0.0, 0.3, 0.9, 0.99] {
            let mut c = cfg(6, 1);
            c.rho_rx = rho;
            assert!(hermitian_eigenvalues(&spatial_cov(&c, 0).unwrap())[0] >= -1e-12);
        }
        assert!(spatial_cov(&c, 1).is_err());
    }

    #[test]
    fn cfg_validation() {
        let mut c = cfg(2, 2);
        c.rho_rx = 1.0;
        assert!(c.validate().is_err());
        let mut c = cfg(2, 2);
        c.gains = vec![1.0, 0.0];
        assert!(c.validate().is_err());
        let mut c = cfg(2, 2);
        c.tap_decay = 0.0;
        assert!(c.validate().is_err());
        assert!(cfg(2, 2).validate().is_ok());
    }

    #[test]
    fn block_fading_is_flat() {
        let mut c = cfg(4, 2);
        c.ar_time = 1.0;
        c.n_taps = 1;
        let d = GridDims::new(6, 5).unwrap();
        let ch = gen_channel(&c, d, &mut seeded(3)).unwrap();
        let h0 = ch.h[crate::grid::ReIndex::new(0, 0)].clone();
        assert!(ch.h.as_slice().iter().all(|h| *h == h0));
    }

    #[test]
    fn deterministic_per_seed() {
        let c = cfg(4, 2);
        let d = GridDims::new(6, 5).unwrap();
        let a = gen_channel(&c, d, &mut seeded(9)).unwrap();
        let b = gen_channel(&c, d, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
        let e = gen_channel(&c, d, &mut seeded(10)).unwrap();
        assert_ne!(a, e);
    }

    #[test]
    fn per_antenna_variance_matches_gain() {
        let mut c = cfg(2, 1);
        c.rho_rx = 0.0;
        let d = GridDims::new(3, 2).unwrap();
        let mut rng = seeded(11);
        let draws = 100_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let ch = gen_channel(&c, d, &mut rng).unwrap();
            acc += ch.h[crate::grid::ReIndex::new(2, 1)][(0, 0)].norm_sqr();
        }
        let var = acc / draws as f64;
        assert!((var - 1.0).abs() < 0.03, "per-antenna variance {var}");
    }

    #[test]
    fn empirical_covariance_matches_spatial_cov() {
        let mut c = cfg(3, 1);
        c.rho_rx = 0.7;
        let d = GridDims::new(2, 2).unwrap();
        let mut rng = seeded(12);
        let draws = 100_000;
        let mut acc = CMat::zeros(3, 3);
        for _ in 0..draws {
            let ch = gen_channel(&c, d, &mut rng).unwrap();
            let h = ch.h[crate::grid::ReIndex::new(1, 1)].column(0).into_owned();
            acc += &h * h.adjoint();
        }
        acc /= Complex64::new(draws as f64, 0.0);
        let r = spatial_cov(&c, 0).unwrap();
        let rel = frobenius(&(&acc - &r)) / frobenius(&r);
        assert!(rel < 0.05, "relative Frobenius error {rel}");
    }

    #[test]
    fn cluster_mode_correlates_paired_users() {
        let mut c = cfg(1, 2);
        c.cluster_mix = 0.8;
        c.n_taps = 1;
        let d = GridDims::new(1, 1).unwrap();
        let mut rng = seeded(13);
        let draws = 50_000;
        let mut cross = Complex64::new(0.0, 0.0);
        let mut p1 = 0.0;
        for _ in 0..draws {
            let h = gen_channel(&c, d, &mut rng).unwrap().h.as_slice()[0].clone();
            cross += h[(0, 1)] * h[(0, 0)].conj();
            p1 += h[(0, 1)].norm_sqr();
        }
        let rho = cross.re / draws as f64;
        assert!((rho - 0.8).abs() < 0.03, "{rho}");
        assert!((p1 / draws as f64 - 1.0).abs() < 0.03);
    }

    fn unit_channel(d: GridDims, n_r: usize, n_u: usize) -> ChannelRealization {
        let h = ResourceGrid::from_fn(d, |re| {
            CMat::from_fn(n_r, n_u, |a, b| Complex64::from_polar(1.0, (re.m + a * 3 + b) as f64))
        });
        ChannelRealization { n_r, n_u, h, r_s: vec![CMat::identity(n_r, n_r); n_u] }
    }

    #[test]
    fn snr_examples() {
        let d = GridDims::new(4, 3).unwrap();
        let ch = unit_channel(d, 2, 3);
        assert!((compute_snr(&ch, 0.1).unwrap() - 10.0).abs() < 1e-12);
        assert!((snr_to_db(compute_snr(&ch, 0.1).unwrap()) - 10.0).abs() < 1e-12);
        let zero = ChannelRealization { h: ResourceGrid::from_fn(d, |_| CMat::zeros(2, 3)), ..ch.clone() };
        assert_eq!(compute_snr(&zero, 0.1).unwrap(), 0.0);
        assert!(compute_snr(&ch, 0.0).is_err());
        assert!(calibrate_sigma2(&zero, 10.0).is_err());
        assert!((calibrate_sigma2(&ch, 10.0).unwrap() - 0.1).abs() < 1e-15);
        assert!((calibrate_sigma2(&ch, 0.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn snr_matches_double_loop_and_round_trips() {
        let c = cfg(3, 2);
        let d = GridDims::new(5, 4).unwrap();
        for seed in 0..20 {
            let ch = gen_channel(&c, d, &mut seeded(seed)).unwrap();
            let mut total = 0.0;
            for m in 0..d.n_f {
                for n in 0..d.n_t {
                    let h = &ch.h[crate::grid::ReIndex::new(m, n)];
                    for a in 0..3 {
                        for b in 0..2 {
                            total += h[(a, b)].re * h[(a, b)].re + h[(a, b)].im * h[(a, b)].im;
                        }
                    }
                }
            }
            let brute = total / (d.num_res() * 6) as f64 / 0.37;
            let snr = compute_snr(&ch, 0.37).unwrap();
            assert!((snr - brute).abs() / brute < 1e-12);
            for target in [-5.0, 0.0, 12.5, 30.0] {
                let s2 = calibrate_sigma2(&ch, target).unwrap();
                let back = snr_to_db(compute_snr(&ch, s2).unwrap());
                assert!((back - target).abs() <= 1e-12 * target.abs().max(1.0));
            }
        }
    }

    #[test]
    fn snr_scaling_and_permutation() {
        let c = cfg(2, 2);
        let d = GridDims::new(3, 3).unwrap();
        let ch = gen_channel(&c, d, &mut seeded(4)).unwrap();
        let alpha = Complex64::new(0.6, -1.1);
        let scaled = ChannelRealization { h: ch.h.map(|_, h| h * alpha), ..ch.clone() };
        let ratio = compute_snr(&scaled, 1.0).unwrap() / compute_snr(&ch, 1.0).unwrap();
        assert!((ratio - alpha.norm_sqr()).abs() < 1e-12);
        let mut rev: Vec<CMat> = ch.h.as_slice().to_vec();
        rev.reverse();
        let permuted = ChannelRealization { h: ResourceGrid::from_vec(d, rev).unwrap(), ..ch.clone() };
        let a = compute_snr(&ch, 1.0).unwrap();
        let b = compute_snr(&permuted, 1.0).unwrap();
        assert!((a - b).abs() < 1e-12 * a);
    }

    #[test]
    fn awgn_moments() {
        let d = GridDims::new(1000, 1).unwrap();
        let zero = ResourceGrid::from_fn(d, |_| CVec::zeros(1000));
        let same = add_awgn(&zero, 0.0, &mut seeded(1)).unwrap();
        assert_eq!(same, zero);
        let sigma2 = 0.3;
        let noisy = add_awgn(&zero, sigma2, &mut seeded(2)).unwrap();
        let samples: Vec<Complex64> = noisy.as_slice().iter().flat_map(|v| v.iter().copied()).collect();
        let n = samples.len() as f64;
        let mean: Complex64 = samples.iter().sum::<Complex64>() / n;
        let var = samples.iter().map(|z| (z - mean).norm_sqr()).sum::<f64>() / (n - 1.0);
        assert!((var - sigma2).abs() / sigma2 < 0.01, "{var}");
        let se = (sigma2 / 2.0 / n).sqrt();
        assert!(mean.re.abs() < 3.0 * se && mean.im.abs() < 3.0 * se);
        assert!(add_awgn(&zero, -1.0, &mut seeded(1)).is_err());
    }

    #[test]
    fn binary_dump_round_trip() {
        let c = cfg(2, 3);
        let d = GridDims::new(3, 2).unwrap();
        let ch = gen_channel(&c, d, &mut seeded(5)).unwrap();
        let mut buf = Vec::new();
        ch.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 32 + 6 * 6 * 16);
        let back = ChannelRealization::read_binary(&buf[..], ch.r_s.clone()).unwrap();
        assert_eq!(back, ch);
    }
}
