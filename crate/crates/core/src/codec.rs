//! Regular LDPC codes: progressive-edge-growth construction, systematic
//! encoding and flooding sum-product decoding.
//!
//! LLRs follow the convention `log P(b=0) / P(b=1)`: positive favours 0.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

/// Magnitude at which channel LLRs are saturated before decoding.
pub const LLR_CLIP: f64 = 20.0;
pub const DEFAULT_MAX_ITERS: usize = 50;

const COL_DEGREE: usize = 3;
const ROW_DEGREE: usize = 6;

/// Binary parity-check code with a systematic encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ParityCheckCode {
    n: usize,
    /// Variable indices of each check.
    checks: Vec<Vec<usize>>,
    /// Check indices of each variable.
    vars: Vec<Vec<usize>>,
    rank: usize,
    /// Codeword positions carrying information bits, ascending.
    info_positions: Vec<usize>,
    /// For each pivot (parity) position, the information indices it sums.
    parity_eqs: Vec<(usize, Vec<usize>)>,
}

impl ParityCheckCode {
    /// Build from the checks' variable lists.
    pub fn from_checks(n: usize, checks: Vec<Vec<usize>>) -> Result<Self> {
        let mut vars = vec![Vec::new(); n];
        for (c, row) in checks.iter().enumerate() {
            for &v in row {
                if v >= n {
                    return Err(Error::Config(format!("check {c} references column {v} >= n={n}")));
                }
                if vars[v].contains(&c) {
                    return Err(Error::Config(format!("duplicate entry ({c}, {v})")));
                }
                vars[v].push(c);
            }
        }
        let (rank, info_positions, parity_eqs) = systematic_form(n, &checks);
        Ok(Self { n, checks, vars, rank, info_positions, parity_eqs })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of information bits, `n - rank(H)`.
    pub fn k(&self) -> usize {
        self.n - self.rank
    }

    pub fn num_checks(&self) -> usize {
        self.checks.len()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn rate(&self) -> f64 {
        self.k() as f64 / self.n as f64
    }

    pub fn checks(&self) -> &[Vec<usize>] {
        &self.checks
    }

    pub fn column_degree(&self, v: usize) -> usize {
        self.vars[v].len()
    }

    pub fn info_positions(&self) -> &[usize] {
        &self.info_positions
    }

    pub fn syndrome_is_zero(&self, word: &[u8]) -> bool {
        self.checks.iter().all(|row| row.iter().fold(0u8, |acc, &v| acc ^ word[v]) == 0)
    }

    /// True when no two columns share more than one check (no 4-cycles).
    pub fn girth_at_least_6(&self) -> bool {
        let mut seen = vec![usize::MAX; self.n];
        for v in 0..self.n {
            for &c in &self.vars[v] {
                for &w in &self.checks[c] {
                    if w == v {
                        continue;
                    }
                    if seen[w] == v {
                        return false;
                    }
                    seen[w] = v;
                }
            }
        }
        true
    }

    pub fn encode(&self, info: &[u8]) -> Result<Vec<u8>> {
        if info.len() != self.k() {
            return Err(Error::Shape(format!("expected {} info bits, got {}", self.k(), info.len())));
        }
        let mut word = vec![0u8; self.n];
        for (&pos, &b) in self.info_positions.iter().zip(info) {
            word[pos] = b & 1;
        }
        for (pos, deps) in &self.parity_eqs {
            word[*pos] = deps.iter().fold(0u8, |acc, &j| acc ^ (info[j] & 1));
        }
        Ok(word)
    }

    pub fn extract_info(&self, word: &[u8]) -> Vec<u8> {
        self.info_positions.iter().map(|&p| word[p]).collect()
    }

    /// Coordinate-list export, one `row col` pair per line.
    pub fn write_coo<W: Write>(&self, mut w: W) -> Result<()> {
        for (c, row) in self.checks.iter().enumerate() {
            let mut row = row.clone();
            row.sort_unstable();
            for v in row {
                writeln!(w, "{c} {v}")?;
            }
        }
        Ok(())
    }

    pub fn read_coo<R: BufRead>(n: usize, r: R) -> Result<Self> {
        let mut checks: Vec<Vec<usize>> = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace().map(str::parse::<usize>);
            let (Some(Ok(c)), Some(Ok(v)), None) = (it.next(), it.next(), it.next()) else {
                return Err(Error::Config(format!("bad coordinate line {}: {line:?}", lineno + 1)));
            };
            if checks.len() <= c {
                checks.resize(c + 1, Vec::new());
            }
            checks[c].push(v);
        }
        Self::from_checks(n, checks)
    }
}

/// Gaussian elimination over GF(2): rank, free (info) columns and the
/// expression of each pivot column in terms of the free columns.
fn systematic_form(n: usize, checks: &[Vec<usize>]) -> (usize, Vec<usize>, Vec<(usize, Vec<usize>)>) {
    let words = n.div_ceil(64);
    let mut rows: Vec<Vec<u64>> = checks
        .iter()
        .map(|row| {
            let mut bits = vec![0u64; words];
            for &v in row {
                bits[v / 64] ^= 1 << (v % 64);
            }
            bits
        })
        .collect();
    let get = |r: &[u64], c: usize| (r[c / 64] >> (c % 64)) & 1 == 1;
    let mut pivots = Vec::new();
    let mut rank = 0;
    for col in 0..n {
        let Some(p) = (rank..rows.len()).find(|&r| get(&rows[r], col)) else {
            continue;
        };
        rows.swap(rank, p);
        let pivot_row = rows[rank].clone();
        for (r, row) in rows.iter_mut().enumerate() {
            if r != rank && get(row, col) {
                for (a, b) in row.iter_mut().zip(&pivot_row) {
                    *a ^= b;
                }
            }
        }
        pivots.push(col);
        rank += 1;
    }
    let is_pivot: Vec<bool> = (0..n).map(|c| pivots.contains(&c)).collect();
    let info_positions: Vec<usize> = (0..n).filter(|&c| !is_pivot[c]).collect();
    let parity_eqs = pivots
        .iter()
        .enumerate()
        .map(|(r, &pc)| {
            let deps = info_positions.iter().enumerate().filter(|&(_, &f)| get(&rows[r], f)).map(|(j, _)| j).collect();
            (pc, deps)
        })
        .collect();
    (rank, info_positions, parity_eqs)
}

/// (3,6)-regular rate-1/2 code by progressive edge growth.
///
/// Retries with derived seeds until the construction is exactly regular and,
/// for `n >= 96`, free of 4-cycles.
pub fn make_regular_ldpc(n: usize, seed: u64) -> Result<ParityCheckCode> {
    if n == 0 || !n.is_multiple_of(ROW_DEGREE) {
        return Err(Error::Config(format!("block length {n} must be a positive multiple of {ROW_DEGREE}")));
    }
    let m = n * COL_DEGREE / ROW_DEGREE;
    if m < COL_DEGREE {
        return Err(Error::Config(format!("block length {n} too short for column degree {COL_DEGREE}")));
    }
    for attempt in 0..200u64 {
        let mut rng = seeded(derive_seed(seed, &[attempt]));
        if let Some(checks) = peg(n, m, &mut rng) {
            let code = ParityCheckCode::from_checks(n, checks)?;
            if n < 96 || code.girth_at_least_6() {
                return Ok(code);
            }
        }
    }
    Err(Error::Config(format!("could not construct a regular code with n={n}")))
}

fn peg<R: Rng>(n: usize, m: usize, rng: &mut R) -> Option<Vec<Vec<usize>>> {
    let mut checks: Vec<Vec<usize>> = vec![Vec::new(); m];
    let mut vars: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut order: Vec<usize> = (0..m).collect();
    for v in 0..n {
        for e in 0..COL_DEGREE {
            order.shuffle(rng);
            let open = |c: usize, checks: &Vec<Vec<usize>>, vars: &Vec<Vec<usize>>| {
                checks[c].len() < ROW_DEGREE && !vars[v].contains(&c)
            };
            let candidates: Vec<usize> = if e == 0 {
                order.iter().copied().filter(|&c| open(c, &checks, &vars)).collect()
            } else {
                let depth = bfs_depths(v, &checks, &vars, m);
                let open_checks: Vec<usize> = order.iter().copied().filter(|&c| open(c, &checks, &vars)).collect();
                let unreached: Vec<usize> = open_checks.iter().copied().filter(|&c| depth[c] == usize::MAX).collect();
                if !unreached.is_empty() {
                    unreached
                } else {
                    let far = open_checks.iter().map(|&c| depth[c]).max()?;
                    open_checks.into_iter().filter(|&c| depth[c] == far).collect()
                }
            };
            let min_deg = candidates.iter().map(|&c| checks[c].len()).min()?;
            let c = *candidates.iter().find(|&&c| checks[c].len() == min_deg)?;
            checks[c].push(v);
            vars[v].push(c);
        }
    }
    checks.iter().all(|r| r.len() == ROW_DEGREE).then_some(checks)
}

/// Check-node depth from variable `v` in the current Tanner graph.
fn bfs_depths(v: usize, checks: &[Vec<usize>], vars: &[Vec<usize>], m: usize) -> Vec<usize> {
    let mut depth = vec![usize::MAX; m];
    let mut seen_var = vec![false; vars.len()];
    seen_var[v] = true;
    let mut queue = VecDeque::new();
    for &c in &vars[v] {
        depth[c] = 0;
        queue.push_back(c);
    }
    while let Some(c) = queue.pop_front() {
        for &w in &checks[c] {
            if seen_var[w] {
                continue;
            }
            seen_var[w] = true;
            for &c2 in &vars[w] {
                if depth[c2] == usize::MAX {
                    depth[c2] = depth[c] + 1;
                    queue.push_back(c2);
                }
            }
        }
    }
    depth
}

/// Check-node update rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckRule {
    /// `2 atanh(prod tanh(L/2))`.
    #[default]
    Tanh,
    /// Pairwise exact box-plus: min-sum with the two logarithmic corrections.
    BoxPlus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub codeword: Vec<u8>,
    pub info: Vec<u8>,
    pub converged: bool,
    pub iterations: usize,
}

/// Exact pairwise check combination of two LLRs.
pub fn boxplus(a: f64, b: f64) -> f64 {
    let s = a.signum() * b.signum();
    s * a.abs().min(b.abs()) + (-(a + b).abs()).exp().ln_1p() - (-(a - b).abs()).exp().ln_1p()
}

const TANH_LIMIT: f64 = 1.0 - 1e-15;

/// Flooding sum-product decoder.
#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    code: &'a ParityCheckCode,
    rule: CheckRule,
    /// Edge ids per check, in the order of `code.checks`.
    check_edges: Vec<Vec<usize>>,
    /// Edge ids per variable.
    var_edges: Vec<Vec<usize>>,
    edge_var: Vec<usize>,
}

impl<'a> Decoder<'a> {
    pub fn new(code: &'a ParityCheckCode, rule: CheckRule) -> Self {
        let mut check_edges = Vec::with_capacity(code.checks.len());
        let mut var_edges = vec![Vec::new(); code.n];
        let mut edge_var = Vec::new();
        for row in &code.checks {
            let mut ids = Vec::with_capacity(row.len());
            for &v in row {
                let e = edge_var.len();
                edge_var.push(v);
                var_edges[v].push(e);
                ids.push(e);
            }
            check_edges.push(ids);
        }
        Self { code, rule, check_edges, var_edges, edge_var }
    }

    /// One check-node pass: outgoing message on every edge of a check given the
    /// incoming ones, excluding each edge's own input.
    fn check_update(&self, incoming: &[f64], outgoing: &mut [f64]) {
        let d = incoming.len();
        match self.rule {
            CheckRule::Tanh => {
                let t: Vec<f64> = incoming.iter().map(|&x| (x / 2.0).tanh()).collect();
                let mut prefix = vec![1.0; d + 1];
                for i in 0..d {
                    prefix[i + 1] = prefix[i] * t[i];
                }
                let mut suffix = 1.0;
                for i in (0..d).rev() {
                    let p = (prefix[i] * suffix).clamp(-TANH_LIMIT, TANH_LIMIT);
                    outgoing[i] = 2.0 * p.atanh();
                    suffix *= t[i];
                }
            }
            CheckRule::BoxPlus => {
                let mut prefix = vec![0.0; d];
                let mut acc = f64::INFINITY;
                for i in 0..d {
                    prefix[i] = acc;
                    acc = if i == 0 { incoming[0] } else { boxplus(acc, incoming[i]) };
                }
                let mut suffix = f64::INFINITY;
                for i in (0..d).rev() {
                    outgoing[i] = match (prefix[i].is_infinite(), suffix.is_infinite()) {
                        (true, true) => 0.0,
                        (true, false) => suffix,
                        (false, true) => prefix[i],
                        (false, false) => boxplus(prefix[i], suffix),
                    };
                    suffix = if suffix.is_infinite() { incoming[i] } else { boxplus(suffix, incoming[i]) };
                }
            }
        }
    }

    /// Decode channel LLRs; stops early once the hard decision satisfies every check.
    ///
    /// A bit whose posterior LLR is exactly zero counts as erased and blocks
    /// convergence.
    pub fn decode(&self, llrs: &[f64], max_iters: usize) -> Result<DecodeOutput> {
        let n = self.code.n;
        if llrs.len() != n {
            return Err(Error::Shape(format!("expected {n} LLRs, got {}", llrs.len())));
        }
        let channel: Vec<f64> = llrs.iter().map(|&l| l.clamp(-LLR_CLIP, LLR_CLIP)).collect();
        let n_edges = self.edge_var.len();
        let mut v2c: Vec<f64> = self.edge_var.iter().map(|&v| channel[v]).collect();
        let mut c2v = vec![0.0; n_edges];
        let mut hard = vec![0u8; n];
        let mut incoming = Vec::new();
        let mut outgoing = Vec::new();
        for iter in 1..=max_iters {
            for edges in &self.check_edges {
                incoming.clear();
                incoming.extend(edges.iter().map(|&e| v2c[e]));
                outgoing.resize(edges.len(), 0.0);
                self.check_update(&incoming, &mut outgoing);
                for (&e, &o) in edges.iter().zip(&outgoing) {
                    c2v[e] = o;
                }
            }
            let mut erased = false;
            for v in 0..n {
                let total = channel[v] + self.var_edges[v].iter().map(|&e| c2v[e]).sum::<f64>();
                hard[v] = u8::from(total < 0.0);
                erased |= total == 0.0;
                for &e in &self.var_edges[v] {
                    v2c[e] = total - c2v[e];
                }
            }
            if !erased && self.code.syndrome_is_zero(&hard) {
                return Ok(DecodeOutput {
                    info: self.code.extract_info(&hard),
                    codeword: hard,
                    converged: true,
                    iterations: iter,
                });
            }
        }
        if max_iters == 0 {
            for v in 0..n {
                hard[v] = u8::from(channel[v] < 0.0);
            }
        }
        Ok(DecodeOutput {
            info: self.code.extract_info(&hard),
            codeword: hard,
            converged: false,
            iterations: max_iters,
        })
    }
}

/// Convenience wrapper around [`Decoder`] with the tanh rule.
pub fn ldpc_decode(code: &ParityCheckCode, llrs: &[f64], max_iters: usize) -> Result<DecodeOutput> {
    Decoder::new(code, CheckRule::Tanh).decode(llrs, max_iters)
}

pub fn ldpc_encode(code: &ParityCheckCode, info: &[u8]) -> Result<Vec<u8>> {
    code.encode(info)
}
