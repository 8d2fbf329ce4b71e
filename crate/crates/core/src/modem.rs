//! Gray-labelled QAM, bit mapping and slot assembly.

use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{GridDims, PilotPattern, ReIndex, ResourceGrid, UserGrid};
use crate::linalg::CVec;

/// Unit-energy constellation with `2^K` labelled points.
///
/// Bit `j` of a point (`j = 0` first) is `(label >> (K - 1 - j)) & 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    k: usize,
    points: Vec<Complex64>,
    labels: Vec<u32>,
    /// `point_of_label[label]` is the index into `points`.
    point_of_label: Vec<usize>,
}

impl Constellation {
    pub fn new(k: usize, points: Vec<Complex64>, labels: Vec<u32>) -> Result<Self> {
        let m = 1usize << k;
        if points.len() != m || labels.len() != m {
            return Err(Error::Config(format!("constellation with K={k} needs {m} points and labels")));
        }
        let mut point_of_label = vec![usize::MAX; m];
        for (i, &l) in labels.iter().enumerate() {
            let slot =
                point_of_label.get_mut(l as usize).ok_or_else(|| Error::Config(format!("label {l} out of range")))?;
            if *slot != usize::MAX {
                return Err(Error::Config(format!("label {l} used twice")));
            }
            *slot = i;
        }
        Ok(Self { k, points, labels, point_of_label })
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.k
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Bit `j` of point `p`.
    #[inline]
    pub fn bit(&self, p: usize, j: usize) -> u8 {
        ((self.labels[p] >> (self.k - 1 - j)) & 1) as u8
    }

    pub fn label_of_bits(&self, bits: &[u8]) -> u32 {
        bits.iter().fold(0u32, |acc, &b| (acc << 1) | u32::from(b & 1))
    }

    pub fn map(&self, bits: &[u8]) -> Complex64 {
        self.points[self.point_of_label[self.label_of_bits(bits) as usize]]
    }

    pub fn mean_energy(&self) -> f64 {
        self.points.iter().map(|p| p.norm_sqr()).sum::<f64>() / self.points.len() as f64
    }

    /// Index of the nearest point.
    pub fn nearest(&self, x: Complex64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = (p - x).norm_sqr();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    pub fn hard_demap(&self, x: Complex64) -> Vec<u8> {
        let p = self.nearest(x);
        (0..self.k).map(|j| self.bit(p, j)).collect()
    }
}

/// Gray-labelled square QAM for `K = 2` (QPSK) or `K = 4` (16-QAM).
///
/// Even bits select the in-phase level and odd bits the quadrature level, bit
/// value 0 mapping to the positive half-plane.
pub fn qam_constellation(k: usize) -> Result<Constellation> {
    let (scale, per_axis): (f64, usize) = match k {
        2 => (1.0 / 2f64.sqrt(), 1),
        4 => (1.0 / 10f64.sqrt(), 2),
        _ => return Err(Error::Config(format!("unsupported bits per symbol {k}; use 2 or 4"))),
    };
    // Amplitude of a Gray-coded PAM axis from its bits (b_sign, b_mag...).
    let level = |bits: &[u8]| -> f64 {
        match bits {
            [s] => 1.0 - 2.0 * f64::from(*s),
            [s, mag] => (1.0 - 2.0 * f64::from(*s)) * (2.0 - (1.0 - 2.0 * f64::from(*mag))),
            _ => unreachable!(),
        }
    };
    let m = 1usize << k;
    let mut points = Vec::with_capacity(m);
    let mut labels = Vec::with_capacity(m);
    for label in 0..m as u32 {
        let bits: Vec<u8> = (0..k).map(|j| ((label >> (k - 1 - j)) & 1) as u8).collect();
        let i_bits: Vec<u8> = (0..per_axis).map(|a| bits[2 * a]).collect();
        let q_bits: Vec<u8> = (0..per_axis).map(|a| bits[2 * a + 1]).collect();
        points.push(Complex64::new(level(&i_bits), level(&q_bits)) * scale);
        labels.push(label);
    }
    Constellation::new(k, points, labels)
}

/// Payload bits `[user][m][n][j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BitGrid {
    n_u: usize,
    dims: GridDims,
    k: usize,
    bits: Vec<u8>,
}

impl BitGrid {
    pub fn zeros(n_u: usize, dims: GridDims, k: usize) -> Self {
        Self { n_u, dims, k, bits: vec![0; n_u * dims.num_res() * k] }
    }

    pub fn from_vec(n_u: usize, dims: GridDims, k: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != n_u * dims.num_res() * k {
            return Err(Error::Shape(format!("bit grid needs {} bits, got {}", n_u * dims.num_res() * k, bits.len())));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Domain("bits must be 0 or 1".into()));
        }
        Ok(Self { n_u, dims, k, bits })
    }

    pub fn random<R: Rng + ?Sized>(n_u: usize, dims: GridDims, k: usize, rng: &mut R) -> Self {
        let bits = (0..n_u * dims.num_res() * k).map(|_| rng.random::<bool>() as u8).collect();
        Self { n_u, dims, k, bits }
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

    pub fn as_slice(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    fn offset(&self, user: usize, re: ReIndex) -> usize {
        (user * self.dims.num_res() + self.dims.linear(re)) * self.k
    }

    pub fn symbol_bits(&self, user: usize, re: ReIndex) -> &[u8] {
        let o = self.offset(user, re);
        &self.bits[o..o + self.k]
    }

    pub fn symbol_bits_mut(&mut self, user: usize, re: ReIndex) -> &mut [u8] {
        let o = self.offset(user, re);
        &mut self.bits[o..o + self.k]
    }
}

/// Map every `(user, RE)` bit group through the constellation labels.
pub fn map_bits(bits: &BitGrid, constellation: &Constellation) -> Result<UserGrid<Complex64>> {
    if bits.k != constellation.bits_per_symbol() {
        return Err(Error::Config(format!(
            "bit grid carries {} bits per symbol, constellation {}",
            bits.k,
            constellation.bits_per_symbol()
        )));
    }
    let data = bits.bits.chunks_exact(bits.k).map(|c| constellation.map(c)).collect();
    UserGrid::from_vec(bits.n_u, bits.dims, data)
}

/// Compose the per-RE transmit vectors.
///
/// On a pilot RE owned by user `i`, user `i` sends its pilot and every other
/// user is silent. All other REs carry each user's data symbol.
pub fn assemble_tx_grid(x: &UserGrid<Complex64>, pattern: &PilotPattern) -> Result<ResourceGrid<CVec>> {
    if x.dims() != pattern.dims() || x.n_users() != pattern.n_users() {
        return Err(Error::Shape(format!(
            "symbol grid ({} users, {:?}) does not match the pilot pattern ({} users, {:?})",
            x.n_users(),
            x.dims(),
            pattern.n_users(),
            pattern.dims()
        )));
    }
    let n_u = x.n_users();
    Ok(ResourceGrid::from_fn(x.dims(), |re| match pattern.owner(re) {
        Some(owner) => {
            CVec::from_fn(n_u, |u, _| if u == owner { pattern.pilot_value(u) } else { Complex64::new(0.0, 0.0) })
        }
        None => CVec::from_fn(n_u, |u, _| *x.get(u, re)),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_pilot_pattern;
    use crate::rng::seeded;

    #[test]
    fn qpsk_unit_magnitude() {
        let c = qam_constellation(2).unwrap();
        assert_eq!(c.points().len(), 4);
        for p in c.points() {
            assert!((p.norm() - 1.0).abs() < 1e-15);
        }
        // bit 0 on the real axis, 0 -> positive
        for p in 0..4 {
            assert_eq!(c.bit(p, 0) == 0, c.points()[p].re > 0.0);
            assert_eq!(c.bit(p, 1) == 0, c.points()[p].im > 0.0);
        }
    }

    #[test]
    fn unit_energy() {
        for k in [2, 4] {
            let c = qam_constellation(k).unwrap();
            assert!((c.mean_energy() - 1.0).abs() < 1e-12);
        }
        assert!(qam_constellation(3).is_err());
        assert!(qam_constellation(6).is_err());
    }

    #[test]
    fn gray_neighbours_differ_in_one_bit() {
        for k in [2, 4] {
            let c = qam_constellation(k).unwrap();
            let step = if k == 2 { 2.0 / 2f64.sqrt() } else { 2.0 / 10f64.sqrt() };
            let mut pairs = 0;
            for a in 0..c.points().len() {
                for b in a + 1..c.points().len() {
                    let d = c.points()[a] - c.points()[b];
                    let lattice_neighbour = (d.norm() - step).abs() < 1e-9;
                    if lattice_neighbour {
                        pairs += 1;
                        assert_eq!((c.labels()[a] ^ c.labels()[b]).count_ones(), 1);
                    }
                }
            }
            assert_eq!(pairs, if k == 2 { 4 } else { 24 });
        }
    }

    #[test]
    fn labels_are_bijective_round_trip() {
        for k in [2, 4] {
            let c = qam_constellation(k).unwrap();
            for label in 0..(1u32 << k) {
                let bits: Vec<u8> = (0..k).map(|j| ((label >> (k - 1 - j)) & 1) as u8).collect();
                assert_eq!(c.hard_demap(c.map(&bits)), bits);
            }
        }
    }

    #[test]
    fn map_bits_examples() {
        let d = GridDims::new(3, 2).unwrap();
        let c = qam_constellation(2).unwrap();
        let x = map_bits(&BitGrid::zeros(2, d, 2), &c).unwrap();
        let p00 = c.map(&[0, 0]);
        assert!(x.as_slice().iter().all(|&s| s == p00));
        assert!(map_bits(&BitGrid::zeros(2, d, 4), &c).is_err());

        let bits = BitGrid::random(2, d, 2, &mut seeded(1));
        let x = map_bits(&bits, &c).unwrap();
        for u in 0..2 {
            for re in d.iter() {
                assert_eq!(c.hard_demap(*x.get(u, re)), bits.symbol_bits(u, re));
            }
        }
    }

    #[test]
    fn mapping_is_pointwise() {
        let d = GridDims::new(4, 1).unwrap();
        let c = qam_constellation(4).unwrap();
        let bits = BitGrid::random(1, d, 4, &mut seeded(2));
        let mut rev = bits.clone();
        for m in 0..4 {
            let src = bits.symbol_bits(0, ReIndex::new(3 - m, 0)).to_vec();
            rev.symbol_bits_mut(0, ReIndex::new(m, 0)).copy_from_slice(&src);
        }
        let x = map_bits(&bits, &c).unwrap();
        let y = map_bits(&rev, &c).unwrap();
        for m in 0..4 {
            assert_eq!(x.get(0, ReIndex::new(m, 0)), y.get(0, ReIndex::new(3 - m, 0)));
        }
    }

    #[test]
    fn random_bit_energy() {
        let d = GridDims::new(100, 100).unwrap();
        let c = qam_constellation(4).unwrap();
        let x = map_bits(&BitGrid::random(1, d, 4, &mut seeded(3)), &c).unwrap();
        let e = x.as_slice().iter().map(|s| s.norm_sqr()).sum::<f64>() / 10_000.0;
        // per-symbol energy std for 16-QAM is 0.8; 4 standard errors
        assert!((e - 1.0).abs() < 4.0 * 0.8 / 100.0, "{e}");
    }

    #[test]
    fn pilot_res_silence_other_users() {
        let d = GridDims::new(8, 14).unwrap();
        let pattern = make_pilot_pattern(d, 4, &[2, 11]).unwrap();
        let c = qam_constellation(2).unwrap();
        let x = map_bits(&BitGrid::random(4, d, 2, &mut seeded(4)), &c).unwrap();
        let tx = assemble_tx_grid(&x, &pattern).unwrap();
        let v = &tx[ReIndex::new(0, 2)];
        assert_eq!(v[0], Complex64::new(1.0, 0.0));
        assert!(v.iter().skip(1).all(|z| *z == Complex64::new(0.0, 0.0)));
        let data_per_user = tx.iter().filter(|(_, v)| v.iter().all(|z| z.norm() > 0.5)).count();
        assert_eq!(data_per_user, 8 * 14 - pattern.num_pilot_res());
        assert_eq!(data_per_user, 8 * 14 - 16);
    }

    #[test]
    fn assemble_rejects_mismatch() {
        let d = GridDims::new(8, 14).unwrap();
        let pattern = make_pilot_pattern(d, 4, &[2]).unwrap();
        let x = UserGrid::filled(2, d, Complex64::new(1.0, 0.0));
        assert!(assemble_tx_grid(&x, &pattern).is_err());
        let empty = PilotPattern::new(d, vec![vec![]], vec![Complex64::new(1.0, 0.0)]);
        assert!(empty.is_err());
    }
}
