//! OFDM resource-grid geometry and per-user comb pilot patterns.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Size of one slot: `n_f` subcarriers by `n_t` OFDM symbols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridDims {
    pub n_f: usize,
    pub n_t: usize,
}

impl GridDims {
    pub fn new(n_f: usize, n_t: usize) -> Result<Self> {
        if n_f == 0 || n_t == 0 {
            return Err(Error::Config(format!("grid dims must be positive, got {n_f}x{n_t}")));
        }
        Ok(Self { n_f, n_t })
    }

    pub fn num_res(&self) -> usize {
        self.n_f * self.n_t
    }

    pub fn contains(&self, re: ReIndex) -> bool {
        re.m < self.n_f && re.n < self.n_t
    }

    /// Row-major (subcarrier-major) linear index.
    #[inline]
    pub fn linear(&self, re: ReIndex) -> usize {
        re.m * self.n_t + re.n
    }

    #[inline]
    pub fn re_at(&self, idx: usize) -> ReIndex {
        ReIndex { m: idx / self.n_t, n: idx % self.n_t }
    }

    /// All REs in linear order.
    pub fn iter(&self) -> impl Iterator<Item = ReIndex> + '_ {
        (0..self.num_res()).map(move |i| self.re_at(i))
    }
}

/// A resource element: subcarrier `m`, OFDM symbol `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ReIndex {
    pub m: usize,
    pub n: usize,
}

impl ReIndex {
    pub const fn new(m: usize, n: usize) -> Self {
        Self { m, n }
    }

    pub fn manhattan(&self, other: ReIndex) -> usize {
        self.m.abs_diff(other.m) + self.n.abs_diff(other.n)
    }
}

/// Dense per-RE container in row-major `(m, n)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct ResourceGrid<T> {
    dims: GridDims,
    data: Vec<T>,
}

impl<T> ResourceGrid<T> {
    pub fn from_fn(dims: GridDims, mut f: impl FnMut(ReIndex) -> T) -> Self {
        let data = dims.iter().map(&mut f).collect();
        Self { dims, data }
    }

    pub fn from_vec(dims: GridDims, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.num_res() {
            return Err(Error::Shape(format!(
                "grid of {}x{} needs {} entries, got {}",
                dims.n_f,
                dims.n_t,
                dims.num_res(),
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn get(&self, re: ReIndex) -> &T {
        &self.data[self.dims.linear(re)]
    }

    pub fn get_mut(&mut self, re: ReIndex) -> &mut T {
        let i = self.dims.linear(re);
        &mut self.data[i]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn iter(&self) -> impl Iterator<Item = (ReIndex, &T)> {
        let dims = self.dims;
        self.data.iter().enumerate().map(move |(i, v)| (dims.re_at(i), v))
    }

    pub fn map<U>(&self, mut f: impl FnMut(ReIndex, &T) -> U) -> ResourceGrid<U> {
        ResourceGrid { dims: self.dims, data: self.iter().map(|(re, v)| f(re, v)).collect() }
    }
}

impl<T> std::ops::Index<ReIndex> for ResourceGrid<T> {
    type Output = T;
    fn index(&self, re: ReIndex) -> &T {
        self.get(re)
    }
}

impl<T> std::ops::IndexMut<ReIndex> for ResourceGrid<T> {
    fn index_mut(&mut self, re: ReIndex) -> &mut T {
        self.get_mut(re)
    }
}

/// Per-user grids, laid out `[user][m][n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UserGrid<T> {
    n_u: usize,
    dims: GridDims,
    data: Vec<T>,
}

impl<T: Clone> UserGrid<T> {
    pub fn filled(n_u: usize, dims: GridDims, value: T) -> Self {
        Self { n_u, dims, data: vec![value; n_u * dims.num_res()] }
    }
}

impl<T> UserGrid<T> {
    pub fn from_vec(n_u: usize, dims: GridDims, data: Vec<T>) -> Result<Self> {
        if data.len() != n_u * dims.num_res() {
            return Err(Error::Shape(format!(
                "user grid {}x{}x{} needs {} entries, got {}",
                n_u,
                dims.n_f,
                dims.n_t,
                n_u * dims.num_res(),
                data.len()
            )));
        }
        Ok(Self { n_u, dims, data })
    }

    pub fn n_users(&self) -> usize {
        self.n_u
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    #[inline]
    fn offset(&self, user: usize, re: ReIndex) -> usize {
        user * self.dims.num_res() + self.dims.linear(re)
    }

    pub fn get(&self, user: usize, re: ReIndex) -> &T {
        &self.data[self.offset(user, re)]
    }

    pub fn set(&mut self, user: usize, re: ReIndex, value: T) {
        let i = self.offset(user, re);
        self.data[i] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    /// One user's grid in row-major `(m, n)` order.
    pub fn user(&self, user: usize) -> &[T] {
        let r = self.dims.num_res();
        &self.data[user * r..(user + 1) * r]
    }
}

/// Per-user pilot REs (pairwise disjoint) and pilot symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotPattern {
    dims: GridDims,
    assignments: Vec<Vec<ReIndex>>,
    pilot_values: Vec<Complex64>,
    /// Pilot owner of each RE, if any.
    owner: Vec<Option<usize>>,
    /// Cached `nearest_pilot` for every (user, RE).
    nearest: Vec<Vec<ReIndex>>,
}

impl PilotPattern {
    /// Build a pattern from explicit assignments, checking every invariant.
    pub fn new(dims: GridDims, assignments: Vec<Vec<ReIndex>>, pilot_values: Vec<Complex64>) -> Result<Self> {
        if assignments.is_empty() {
            return Err(Error::Config("pilot pattern needs at least one user".into()));
        }
        if pilot_values.len() != assignments.len() {
            return Err(Error::Config(format!("{} pilot values for {} users", pilot_values.len(), assignments.len())));
        }
        for (u, v) in pilot_values.iter().enumerate() {
            if (v.norm() - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!("pilot of user {u} has magnitude {}", v.norm())));
            }
        }
        let mut owner = vec![None; dims.num_res()];
        for (u, set) in assignments.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::Invariant(format!("user {u} has no pilot RE")));
            }
            for &re in set {
                if !dims.contains(re) {
                    return Err(Error::Config(format!("pilot RE {re:?} outside the grid")));
                }
                let slot = &mut owner[dims.linear(re)];
                match *slot {
                    Some(prev) if prev == u => {
                        return Err(Error::Config(format!("duplicate pilot RE {re:?} for user {u}")))
                    }
                    Some(prev) => {
                        return Err(Error::Invariant(format!("pilot RE {re:?} shared by users {prev} and {u}")))
                    }
                    None => *slot = Some(u),
                }
            }
        }
        let nearest = assignments.iter().map(|set| dims.iter().map(|re| brute_nearest(set, re)).collect()).collect();
        Ok(Self { dims, assignments, pilot_values, owner, nearest })
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn n_users(&self) -> usize {
        self.assignments.len()
    }

    pub fn pilots(&self, user: usize) -> &[ReIndex] {
        &self.assignments[user]
    }

    pub fn pilot_value(&self, user: usize) -> Complex64 {
        self.pilot_values[user]
    }

    /// The user whose pilot occupies `re`, if any.
    pub fn owner(&self, re: ReIndex) -> Option<usize> {
        self.owner[self.dims.linear(re)]
    }

    pub fn is_pilot(&self, re: ReIndex) -> bool {
        self.owner(re).is_some()
    }

    /// Total number of pilot REs across users.
    pub fn num_pilot_res(&self) -> usize {
        self.assignments.iter().map(Vec::len).sum()
    }

    /// REs carrying payload for every user, in linear order.
    pub fn data_res(&self) -> Vec<ReIndex> {
        self.dims.iter().filter(|&re| !self.is_pilot(re)).collect()
    }

    /// Nearest pilot RE of `user` to `re` under the Manhattan metric.
    ///
    /// Ties go to the smaller symbol index, then the smaller subcarrier.
    pub fn nearest_pilot(&self, user: usize, re: ReIndex) -> Result<ReIndex> {
        if user >= self.n_users() {
            return Err(Error::Config(format!("user {user} out of range")));
        }
        if !self.dims.contains(re) {
            return Err(Error::Config(format!("RE {re:?} outside the grid")));
        }
        Ok(self.nearest[user][self.dims.linear(re)])
    }

    /// Unchecked variant for hot loops; `user` and `re` must be in range.
    #[inline]
    pub(crate) fn nearest_unchecked(&self, user: usize, re: ReIndex) -> ReIndex {
        self.nearest[user][self.dims.linear(re)]
    }
}

fn brute_nearest(set: &[ReIndex], re: ReIndex) -> ReIndex {
    *set.iter().min_by_key(|p| (p.manhattan(re), p.n, p.m)).expect("pilot sets are non-empty")
}

/// Frequency-comb pattern: on each listed symbol, user `i` owns every
/// subcarrier with `m % n_u == i`. Pilot symbols default to `1`.
pub fn make_pilot_pattern(dims: GridDims, n_u: usize, pilot_symbol_times: &[usize]) -> Result<PilotPattern> {
    if n_u == 0 {
        return Err(Error::Config("n_u must be at least 1".into()));
    }
    if dims.n_f == 0 || dims.n_t == 0 {
        return Err(Error::Config("grid dims must be positive".into()));
    }
    if pilot_symbol_times.is_empty() {
        return Err(Error::Config("at least one pilot symbol time is required".into()));
    }
    if let Some(&t) = pilot_symbol_times.iter().find(|&&t| t >= dims.n_t) {
        return Err(Error::Config(format!("pilot symbol {t} outside 0..{}", dims.n_t)));
    }
    if dims.n_f < n_u {
        return Err(Error::InfeasiblePattern { n_f: dims.n_f, n_u });
    }
    let mut times = pilot_symbol_times.to_vec();
    times.sort_unstable();
    times.dedup();
    let assignments = (0..n_u)
        .map(|u| times.iter().flat_map(|&n| (u..dims.n_f).step_by(n_u).map(move |m| ReIndex::new(m, n))).collect())
        .collect();
    PilotPattern::new(dims, assignments, vec![Complex64::new(1.0, 0.0); n_u])
}
