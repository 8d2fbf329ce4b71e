//! Convolutional-transformer demapper and the ResNet comparison model.
//!
//! Both map equalized symbols and their post-equalization error variances,
//! laid out `(B, N_u, N_f, N_t, ·)`, to per-bit LLRs `(B, N_f, N_t, N_u, K)`
//! with positive values favouring bit 0. Users are folded into the batch
//! for every convolution; only the attention step of the CvT mixes users,
//! and only across users at the same resource element.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridDims;
use crate::rng::{seeded, SimRng};
use crate::rxchain::{EqualizedOutput, LlrGrid};
use crate::tensor::{BatchStats, Graph, Mode, ParamId, ParamStore, Scalar, Var};

pub const BN_MOMENTUM: f64 = 0.99;
/// Additive logit applied to masked attention keys.
const MASKED_LOGIT: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvtConfig {
    pub d_m: usize,
    pub d_k: usize,
    pub n_h: usize,
    pub n_blocks: usize,
    pub k: usize,
}

impl CvtConfig {
    pub fn new(d_m: usize, n_h: usize, n_blocks: usize, k: usize) -> Result<Self> {
        if n_h == 0 || !d_m.is_multiple_of(n_h) {
            return Err(Error::Config(format!("d_m = {d_m} is not divisible by {n_h} heads")));
        }
        let cfg = Self { d_m, d_k: d_m / n_h, n_h, n_blocks, k };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_m == 0 || self.k == 0 {
            return Err(Error::Config("d_m and k must be positive".into()));
        }
        if self.n_h * self.d_k != self.d_m {
            return Err(Error::Config(format!(
                "d_m = {} must equal n_h * d_k = {} * {}",
                self.d_m, self.n_h, self.d_k
            )));
        }
        Ok(())
    }

    /// Trainable scalars, counted from the layer formulas.
    pub fn param_count(&self) -> usize {
        let (d, k) = (self.d_m, self.k);
        let sep = 9 * d + d * d + d;
        let bn = 2 * d;
        let dense = d * d + d;
        let block = 3 * (sep + bn) + 4 * dense + bn + 2 * sep;
        (9 * 3 * d + d) + self.n_blocks * block + (d * k + k)
    }
}

impl Default for CvtConfig {
    fn default() -> Self {
        Self { d_m: 64, d_k: 8, n_h: 8, n_blocks: 3, k: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResnetConfig {
    pub d_m: usize,
    pub n_blocks: usize,
    pub k: usize,
}

impl ResnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_m == 0 || self.k == 0 {
            return Err(Error::Config("d_m and k must be positive".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (d, k) = (self.d_m, self.k);
        let block = 2 * (2 * d) + 2 * (9 * d * d + d);
        (9 * 3 * d + d) + self.n_blocks * block + (d * k + k)
    }
}

impl Default for ResnetConfig {
    fn default() -> Self {
        Self { d_m: 64, n_blocks: 5, k: 2 }
    }
}

/// Network input for a batch of slots.
#[derive(Debug, Clone, PartialEq)]
pub struct DemapInput<T> {
    pub batch: usize,
    pub n_u: usize,
    pub dims: GridDims,
    /// `(B, N_u, N_f, N_t, 2)`: real and imaginary parts of x̂.
    pub xhat_ri: Vec<T>,
    /// `(B, N_u, N_f, N_t, 1)`, entries in (0, 1].
    pub r_x: Vec<T>,
}

impl<T: Scalar> DemapInput<T> {
    pub fn new(batch: usize, n_u: usize, dims: GridDims, xhat_ri: Vec<T>, r_x: Vec<T>) -> Result<Self> {
        let n = batch * n_u * dims.num_res();
        if batch == 0 || n_u == 0 {
            return Err(Error::Shape("batch and user count must be positive".into()));
        }
        if xhat_ri.len() != 2 * n || r_x.len() != n {
            return Err(Error::Shape(format!(
                "expected {} symbol and {n} variance entries, got {} and {}",
                2 * n,
                xhat_ri.len(),
                r_x.len()
            )));
        }
        Ok(Self { batch, n_u, dims, xhat_ri, r_x })
    }

    /// Stack per-slot equalizer outputs into one batch.
    pub fn from_equalized(slots: &[EqualizedOutput]) -> Result<Self> {
        let first = slots.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
        let (n_u, dims) = (first.xhat.n_users(), first.xhat.dims());
        let mut xhat_ri = Vec::with_capacity(slots.len() * n_u * dims.num_res() * 2);
        let mut r_x = Vec::with_capacity(slots.len() * n_u * dims.num_res());
        for s in slots {
            if s.xhat.n_users() != n_u || s.xhat.dims() != dims {
                return Err(Error::Shape("slots in a batch must share dimensions".into()));
            }
            for x in s.xhat.as_slice() {
                xhat_ri.push(T::of(x.re));
                xhat_ri.push(T::of(x.im));
            }
            r_x.extend(s.r_x.as_slice().iter().map(|&r| T::of(r)));
        }
        Self::new(slots.len(), n_u, dims, xhat_ri, r_x)
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.batch, self.n_u, self.dims.n_f, self.dims.n_t]
    }

    /// Reorder users: output user `i` is input user `perm[i]`.
    pub fn permute_users(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n_u {
            return Err(Error::Shape("user permutation length".into()));
        }
        let per = self.dims.num_res();
        let mut x = Vec::with_capacity(self.xhat_ri.len());
        let mut r = Vec::with_capacity(self.r_x.len());
        for b in 0..self.batch {
            for &u in perm {
                let base = (b * self.n_u + u) * per;
                x.extend_from_slice(&self.xhat_ri[2 * base..2 * (base + per)]);
                r.extend_from_slice(&self.r_x[base..base + per]);
            }
        }
        Self::new(self.batch, self.n_u, self.dims, x, r)
    }
}

/// Convert a `(B, N_f, N_t, N_u, K)` output into per-slot LLR grids.
pub fn llr_grids<T: Scalar>(values: &[T], batch: usize, n_u: usize, dims: GridDims, k: usize) -> Result<Vec<LlrGrid>> {
    let per = dims.num_res() * n_u * k;
    if values.len() != batch * per {
        return Err(Error::Shape(format!("{} LLR values for {batch} slots of {per}", values.len())));
    }
    (0..batch)
        .map(|b| {
            let mut out = LlrGrid::zeros(n_u, dims, k);
            for re in dims.iter() {
                for u in 0..n_u {
                    let src = ((b * dims.num_res() + dims.linear(re)) * n_u + u) * k;
                    for (dst, &v) in out.symbol_mut(u, re).iter_mut().zip(&values[src..src + k]) {
                        *dst = v.to_f64_lossy();
                    }
                }
            }
            Ok(out)
        })
        .collect()
}

/// Batch-norm statistics to fold into the running averages after a step.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub stats: BatchStats<T>,
}

/// One recorded layer output shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeRow {
    pub layer: String,
    pub shape: Vec<usize>,
    pub var: Var,
}

/// Result of a forward pass.
#[derive(Debug)]
pub struct Forward<T> {
    /// `(B, N_f, N_t, N_u, K)` LLRs.
    pub llr: Var,
    pub bn_updates: Vec<BnUpdate<T>>,
    pub trace: Vec<ShapeRow>,
}

/// Common interface of the neural demappers.
pub trait Demapper<T: Scalar> {
    fn forward(&self, g: &mut Graph<T>, input: &DemapInput<T>, mode: Mode) -> Result<Forward<T>>;
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    fn bits_per_symbol(&self) -> usize;
    /// Human-readable configuration and size summary.
    fn model_card(&self) -> String;

    fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        let store = self.params_mut();
        for u in updates {
            store.update_running(u.mean_id, &u.stats.mean, BN_MOMENTUM);
            store.update_running(u.var_id, &u.stats.var, BN_MOMENTUM);
        }
    }

    /// Inference-mode LLR grids, one per batch element.
    fn infer(&self, input: &DemapInput<T>) -> Result<Vec<LlrGrid>> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, input, Mode::Infer)?;
        llr_grids(g.value(f.llr), input.batch, input.n_u, input.dims, self.bits_per_symbol())
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct SepIds {
    dw: ParamId,
    pw: ParamId,
    pb: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct BnIds {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

fn glorot<T: Scalar>(rng: &mut SimRng, n: usize, fan_in: usize, fan_out: usize) -> Vec<T> {
    let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| T::of(rng.random_range(-lim..lim))).collect()
}

struct Builder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: SimRng,
}

impl<T: Scalar> Builder<'_, T> {
    fn conv(&mut self, name: &str, kh: usize, cin: usize, cout: usize) -> Result<ConvIds> {
        let taps = kh * kh;
        let w = glorot(&mut self.rng, taps * cin * cout, taps * cin, taps * cout);
        Ok(ConvIds {
            w: self.store.add(&format!("{name}.w"), &[kh, kh, cin, cout], w, true)?,
            b: self.store.add(&format!("{name}.b"), &[cout], vec![T::zero(); cout], true)?,
        })
    }

    fn dense(&mut self, name: &str, n_in: usize, n_out: usize) -> Result<ConvIds> {
        let w = glorot(&mut self.rng, n_in * n_out, n_in, n_out);
        Ok(ConvIds {
            w: self.store.add(&format!("{name}.w"), &[n_in, n_out], w, true)?,
            b: self.store.add(&format!("{name}.b"), &[n_out], vec![T::zero(); n_out], true)?,
        })
    }

    fn sep(&mut self, name: &str, c: usize) -> Result<SepIds> {
        let dw = glorot(&mut self.rng, 9 * c, 9 * c, 9);
        let pw = glorot(&mut self.rng, c * c, c, c);
        Ok(SepIds {
            dw: self.store.add(&format!("{name}.depthwise"), &[3, 3, c], dw, true)?,
            pw: self.store.add(&format!("{name}.pointwise"), &[c, c], pw, true)?,
            pb: self.store.add(&format!("{name}.bias"), &[c], vec![T::zero(); c], true)?,
        })
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<BnIds> {
        Ok(BnIds {
            gamma: self.store.add(&format!("{name}.gamma"), &[c], vec![T::one(); c], true)?,
            beta: self.store.add(&format!("{name}.beta"), &[c], vec![T::zero(); c], true)?,
            mean: self.store.add(&format!("{name}.running_mean"), &[c], vec![T::zero(); c], false)?,
            var: self.store.add(&format!("{name}.running_var"), &[c], vec![T::one(); c], false)?,
        })
    }
}

/// Per-pass state threaded through the layer helpers.
struct Pass<'a, T: Scalar> {
    g: &'a mut Graph<T>,
    store: &'a ParamStore<T>,
    mode: Mode,
    updates: Vec<BnUpdate<T>>,
    trace: Vec<ShapeRow>,
}

impl<T: Scalar> Pass<'_, T> {
    fn p(&mut self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }

    fn record(&mut self, layer: impl Into<String>, v: Var) {
        let shape = self.g.shape(v).to_vec();
        self.trace.push(ShapeRow { layer: layer.into(), shape, var: v });
    }

    fn conv(&mut self, x: Var, ids: ConvIds) -> Result<Var> {
        let (w, b) = (self.p(ids.w), self.p(ids.b));
        self.g.conv2d(x, w, Some(b), 1)
    }

    fn dense(&mut self, x: Var, ids: ConvIds) -> Result<Var> {
        let (w, b) = (self.p(ids.w), self.p(ids.b));
        self.g.dense(x, w, Some(b))
    }

    fn sep(&mut self, x: Var, ids: SepIds) -> Result<Var> {
        let (dw, pw, pb) = (self.p(ids.dw), self.p(ids.pw), self.p(ids.pb));
        self.g.separable_conv2d(x, dw, pw, pb)
    }

    fn bn(&mut self, x: Var, ids: BnIds) -> Result<Var> {
        let (gamma, beta) = (self.p(ids.gamma), self.p(ids.beta));
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.g.batchnorm(x, gamma, beta, None)?;
                if let Some(stats) = stats {
                    self.updates.push(BnUpdate { mean_id: ids.mean, var_id: ids.var, stats });
                }
                Ok(y)
            }
            Mode::Infer => {
                let mean = &self.store.get(ids.mean).value;
                let var = &self.store.get(ids.var).value;
                Ok(self.g.batchnorm(x, gamma, beta, Some((mean, var)))?.0)
            }
        }
    }

    /// Input stack shared by both models: concat, fold users, `Conv_in`.
    fn stem(&mut self, input: &DemapInput<T>, conv_in: ConvIds) -> Result<Var> {
        let [b, u, f, t] = input.shape();
        let x = self.g.input(&[b, u, f, t, 2], input.xhat_ri.clone())?;
        self.record("input_xhat", x);
        let r = self.g.input(&[b, u, f, t, 1], input.r_x.clone())?;
        self.record("input_r_x", r);
        let z = self.g.concat_last(&[x, r])?;
        self.record("concat", z);
        let z = self.g.reshape(z, &[b * u, f, t, 3])?;
        self.record("reshape", z);
        let z = self.conv(z, conv_in)?;
        self.record("conv_in", z);
        Ok(z)
    }

    /// `Conv_out` then unfold to `(B, N_f, N_t, N_u, K)`.
    fn head(&mut self, z: Var, input: &DemapInput<T>, conv_out: ConvIds, k: usize) -> Result<Var> {
        let [b, u, f, t] = input.shape();
        let z = self.conv(z, conv_out)?;
        self.record("conv_out", z);
        let z = self.g.reshape(z, &[b, u, f, t, k])?;
        let z = self.g.permute(z, &[0, 2, 3, 1, 4])?;
        self.record("output_llr", z);
        Ok(z)
    }
}

#[derive(Debug, Clone, Copy)]
struct CvtBlockIds {
    q: (SepIds, BnIds),
    k: (SepIds, BnIds),
    v: (SepIds, BnIds),
    mha_q: ConvIds,
    mha_k: ConvIds,
    mha_v: ConvIds,
    mha_o: ConvIds,
    bn: BnIds,
    sep1: SepIds,
    sep2: SepIds,
}

/// The convolutional-transformer demapper.
#[derive(Debug, Clone)]
pub struct CvtDemapper<T: Scalar> {
    cfg: CvtConfig,
    store: ParamStore<T>,
    conv_in: ConvIds,
    blocks: Vec<CvtBlockIds>,
    conv_out: ConvIds,
}

impl<T: Scalar> CvtDemapper<T> {
    pub fn new(cfg: CvtConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_m;
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store, rng: seeded(seed) };
        let conv_in = b.conv("conv_in", 3, 3, d)?;
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for i in 0..cfg.n_blocks {
            let p = format!("cvt{i}");
            let mut branch = |n: &str| -> Result<(SepIds, BnIds)> {
                Ok((b.sep(&format!("{p}.{n}_sep"), d)?, b.bn(&format!("{p}.{n}_bn"), d)?))
            };
            let (q, k, v) = (branch("q")?, branch("k")?, branch("v")?);
            blocks.push(CvtBlockIds {
                q,
                k,
                v,
                mha_q: b.dense(&format!("{p}.mha.q"), d, d)?,
                mha_k: b.dense(&format!("{p}.mha.k"), d, d)?,
                mha_v: b.dense(&format!("{p}.mha.v"), d, d)?,
                mha_o: b.dense(&format!("{p}.mha.o"), d, d)?,
                bn: b.bn(&format!("{p}.bn"), d)?,
                sep1: b.sep(&format!("{p}.sep1"), d)?,
                sep2: b.sep(&format!("{p}.sep2"), d)?,
            });
        }
        let conv_out = b.conv("conv_out", 1, d, cfg.k)?;
        Ok(Self { cfg, store, conv_in, blocks, conv_out })
    }

    pub fn config(&self) -> &CvtConfig {
        &self.cfg
    }

    /// Forward pass where attention keys of users with `key_mask[u] == false`
    /// receive no weight.
    pub fn forward_masked(
        &self,
        g: &mut Graph<T>,
        input: &DemapInput<T>,
        mode: Mode,
        key_mask: Option<&[bool]>,
    ) -> Result<Forward<T>> {
        if let Some(m) = key_mask {
            if m.len() != input.n_u || !m.iter().any(|&k| k) {
                return Err(Error::Shape("key mask must cover every user and keep at least one".into()));
            }
        }
        let mut pass = Pass { g, store: &self.store, mode, updates: Vec::new(), trace: Vec::new() };
        let mut z = pass.stem(input, self.conv_in)?;
        for (i, blk) in self.blocks.iter().enumerate() {
            z = self.block(&mut pass, i, blk, z, input, key_mask)?.1;
        }
        let llr = pass.head(z, input, self.conv_out, self.cfg.k)?;
        Ok(Forward { llr, bn_updates: pass.updates, trace: pass.trace })
    }

    /// Returns the state after the attention residual and the block output.
    fn block(
        &self,
        pass: &mut Pass<'_, T>,
        i: usize,
        ids: &CvtBlockIds,
        z: Var,
        input: &DemapInput<T>,
        key_mask: Option<&[bool]>,
    ) -> Result<(Var, Var)> {
        let [b, u, f, t] = input.shape();
        let d = self.cfg.d_m;
        let proj = |pass: &mut Pass<'_, T>, (sep, bn): (SepIds, BnIds), name: &str| -> Result<Var> {
            let y = pass.sep(z, sep)?;
            let y = pass.bn(y, bn)?;
            pass.record(format!("cvt{i}.{name}_proj"), y);
            let y = pass.g.reshape(y, &[b, u, f, t, d])?;
            let y = pass.g.permute(y, &[0, 2, 3, 1, 4])?;
            let y = pass.g.reshape(y, &[b * f * t, u, d])?;
            pass.record(format!("cvt{i}.{name}_rearranged"), y);
            Ok(y)
        };
        let q = proj(pass, ids.q, "q")?;
        let k = proj(pass, ids.k, "k")?;
        let v = proj(pass, ids.v, "v")?;
        let a = self.mha(pass, i, ids, q, k, v, key_mask)?;
        let a = pass.g.reshape(a, &[b, f, t, u, d])?;
        let a = pass.g.permute(a, &[0, 3, 1, 2, 4])?;
        let a = pass.g.reshape(a, &[b * u, f, t, d])?;
        pass.record(format!("cvt{i}.attention_rearranged"), a);
        let z1 = pass.g.add(z, a)?;
        let w = pass.bn(z1, ids.bn)?;
        let w = pass.g.relu(w);
        let w = pass.sep(w, ids.sep1)?;
        let w = pass.g.relu(w);
        let w = pass.sep(w, ids.sep2)?;
        let out = pass.g.add(z1, w)?;
        pass.record(format!("cvt{i}.out"), out);
        Ok((z1, out))
    }

    #[allow(clippy::too_many_arguments)]
    fn mha(
        &self,
        pass: &mut Pass<'_, T>,
        i: usize,
        ids: &CvtBlockIds,
        q: Var,
        k: Var,
        v: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (rows, u) = (pass.g.shape(q)[0], pass.g.shape(q)[1]);
        let (h, dk, d) = (self.cfg.n_h, self.cfg.d_k, self.cfg.d_m);
        let heads = |pass: &mut Pass<'_, T>, x: Var, dense: ConvIds| -> Result<Var> {
            let y = pass.dense(x, dense)?;
            let y = pass.g.reshape(y, &[rows, u, h, dk])?;
            let y = pass.g.permute(y, &[0, 2, 1, 3])?;
            pass.g.reshape(y, &[rows * h, u, dk])
        };
        let qh = heads(pass, q, ids.mha_q)?;
        let kh = heads(pass, k, ids.mha_k)?;
        let vh = heads(pass, v, ids.mha_v)?;
        let s = pass.g.batch_matmul(qh, kh, true)?;
        let mut s = pass.g.scale(s, T::of(1.0 / (dk as f64).sqrt()));
        if let Some(mask) = key_mask {
            let bias: Vec<T> = (0..rows * h * u)
                .flat_map(|_| mask.iter().map(|&keep| if keep { T::zero() } else { T::of(MASKED_LOGIT) }))
                .collect();
            let m = pass.g.input(&[rows * h, u, u], bias)?;
            s = pass.g.add(s, m)?;
        }
        let p = pass.g.softmax(s)?;
        pass.record(format!("cvt{i}.attention_weights"), p);
        let a = pass.g.batch_matmul(p, vh, false)?;
        let a = pass.g.reshape(a, &[rows, h, u, dk])?;
        let a = pass.g.permute(a, &[0, 2, 1, 3])?;
        let a = pass.g.reshape(a, &[rows, u, d])?;
        let a = pass.dense(a, ids.mha_o)?;
        pass.record(format!("cvt{i}.mha_out"), a);
        Ok(a)
    }
}

impl<T: Scalar> Demapper<T> for CvtDemapper<T> {
    fn forward(&self, g: &mut Graph<T>, input: &DemapInput<T>, mode: Mode) -> Result<Forward<T>> {
        self.forward_masked(g, input, mode, None)
    }

    fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn bits_per_symbol(&self) -> usize {
        self.cfg.k
    }

    fn model_card(&self) -> String {
        let c = &self.cfg;
        format!(
            "model = cvt\nd_m = {}\nd_k = {}\nn_h = {}\nn_blocks = {}\nk = {}\ntrainable_params = {}\nstored_tensors = {}\n",
            c.d_m,
            c.d_k,
            c.n_h,
            c.n_blocks,
            c.k,
            self.store.num_trainable(),
            self.store.len()
        )
    }
}

#[derive(Debug, Clone, Copy)]
struct ResBlockIds {
    bn1: BnIds,
    conv1: ConvIds,
    bn2: BnIds,
    conv2: ConvIds,
}

/// Same outer stack as the CvT with residual conv blocks; users never mix.
#[derive(Debug, Clone)]
pub struct ResnetDemapper<T: Scalar> {
    cfg: ResnetConfig,
    store: ParamStore<T>,
    conv_in: ConvIds,
    blocks: Vec<ResBlockIds>,
    conv_out: ConvIds,
}

impl<T: Scalar> ResnetDemapper<T> {
    pub fn new(cfg: ResnetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_m;
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store, rng: seeded(seed) };
        let conv_in = b.conv("conv_in", 3, 3, d)?;
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for i in 0..cfg.n_blocks {
            blocks.push(ResBlockIds {
                bn1: b.bn(&format!("res{i}.bn1"), d)?,
                conv1: b.conv(&format!("res{i}.conv1"), 3, d, d)?,
                bn2: b.bn(&format!("res{i}.bn2"), d)?,
                conv2: b.conv(&format!("res{i}.conv2"), 3, d, d)?,
            });
        }
        let conv_out = b.conv("conv_out", 1, d, cfg.k)?;
        Ok(Self { cfg, store, conv_in, blocks, conv_out })
    }

    pub fn config(&self) -> &ResnetConfig {
        &self.cfg
    }
}

impl<T: Scalar> Demapper<T> for ResnetDemapper<T> {
    fn forward(&self, g: &mut Graph<T>, input: &DemapInput<T>, mode: Mode) -> Result<Forward<T>> {
        let mut pass = Pass { g, store: &self.store, mode, updates: Vec::new(), trace: Vec::new() };
        let mut z = pass.stem(input, self.conv_in)?;
        for (i, blk) in self.blocks.iter().enumerate() {
            let w = pass.bn(z, blk.bn1)?;
            let w = pass.g.relu(w);
            let w = pass.conv(w, blk.conv1)?;
            let w = pass.bn(w, blk.bn2)?;
            let w = pass.g.relu(w);
            let w = pass.conv(w, blk.conv2)?;
            z = pass.g.add(z, w)?;
            pass.record(format!("res{i}.out"), z);
        }
        let llr = pass.head(z, input, self.conv_out, self.cfg.k)?;
        Ok(Forward { llr, bn_updates: pass.updates, trace: pass.trace })
    }

    fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn bits_per_symbol(&self) -> usize {
        self.cfg.k
    }

    fn model_card(&self) -> String {
        let c = &self.cfg;
        format!(
            "model = resnet\nd_m = {}\nn_blocks = {}\nk = {}\ntrainable_params = {}\nstored_tensors = {}\n",
            c.d_m,
            c.n_blocks,
            c.k,
            self.store.num_trainable(),
            self.store.len()
        )
    }
}
