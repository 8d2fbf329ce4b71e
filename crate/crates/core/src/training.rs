//! Training data through the full link, the BCE training loop and the
//! achievable-rate estimate.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{add_awgn, average_sigma2, calibrate_sigma2, gen_channel, ChannelModelCfg, ChannelRealization};
use crate::error::{Error, Result};
use crate::grid::{make_pilot_pattern, GridDims, PilotPattern, ResourceGrid};
use crate::linalg::CVec;
use crate::modem::{assemble_tx_grid, map_bits, qam_constellation, BitGrid, Constellation};
use crate::neuraldemap::{DemapInput, Demapper};
use crate::rng::{derive_seed, seeded, SimRng};
use crate::rxchain::{equalize_grid, estimate_grid, EqualizedOutput};
use crate::tensor::{softplus, Graph, Mode, Optimizer, OptimizerKind, Scalar};

/// How a target SNR in dB is turned into a noise variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnrMode {
    /// Calibrate against each realization's own power.
    #[default]
    Instantaneous,
    /// Calibrate against the model's average power, so fading is visible.
    Average,
}

/// Everything fixed about the link: grid, pilots, channel model, modulation.
#[derive(Debug, Clone)]
pub struct Link {
    pub dims: GridDims,
    pub pattern: PilotPattern,
    pub channel: ChannelModelCfg,
    pub constellation: Constellation,
    pub snr_mode: SnrMode,
}

/// One transmitted slot as seen by the receivers.
#[derive(Debug, Clone)]
pub struct Slot {
    pub bits: BitGrid,
    pub channel: ChannelRealization,
    pub sigma2: f64,
    pub rx: ResourceGrid<CVec>,
}

impl Link {
    pub fn new(
        dims: GridDims,
        pilot_symbols: &[usize],
        channel: ChannelModelCfg,
        bits_per_symbol: usize,
        snr_mode: SnrMode,
    ) -> Result<Self> {
        channel.validate()?;
        let pattern = make_pilot_pattern(dims, channel.n_u, pilot_symbols)?;
        let constellation = qam_constellation(bits_per_symbol)?;
        Ok(Self { dims, pattern, channel, constellation, snr_mode })
    }

    pub fn n_u(&self) -> usize {
        self.channel.n_u
    }

    pub fn k(&self) -> usize {
        self.constellation.bits_per_symbol()
    }

    pub fn sigma2(&self, channel: &ChannelRealization, snr_db: f64) -> Result<f64> {
        match self.snr_mode {
            SnrMode::Instantaneous => calibrate_sigma2(channel, snr_db),
            SnrMode::Average => Ok(average_sigma2(&self.channel, snr_db)),
        }
    }

    /// Map `bits`, draw a channel, then noise, in that order from `rng`.
    pub fn transmit<R: Rng + ?Sized>(&self, bits: BitGrid, snr_db: f64, rng: &mut R) -> Result<Slot> {
        let x = map_bits(&bits, &self.constellation)?;
        let tx = assemble_tx_grid(&x, &self.pattern)?;
        let channel = gen_channel(&self.channel, self.dims, rng)?;
        let sigma2 = self.sigma2(&channel, snr_db)?;
        let rx = add_awgn(&channel.apply(&tx)?, sigma2, rng)?;
        Ok(Slot { bits, channel, sigma2, rx })
    }

    /// Nearest-pilot estimate followed by equalization.
    pub fn np_equalize(&self, slot: &Slot) -> Result<EqualizedOutput> {
        let est = estimate_grid(&slot.rx, &self.pattern, &slot.channel.r_s, slot.sigma2)?;
        equalize_grid(&slot.rx, &est)
    }

    /// Data-RE mask in `(N_f, N_t, N_u, K)` order; pilot REs of any user are
    /// excluded for every user.
    pub fn data_mask(&self) -> Vec<bool> {
        let (n_u, k) = (self.n_u(), self.k());
        let mut mask = Vec::with_capacity(self.dims.num_res() * n_u * k);
        for re in self.dims.iter() {
            let data = !self.pattern.is_pilot(re);
            mask.extend(std::iter::repeat_n(data, n_u * k));
        }
        mask
    }
}

/// Reorder `[u][m][n][j]` bits into the network's `(N_f, N_t, N_u, K)` order.
pub fn bits_network_order(bits: &BitGrid) -> Vec<u8> {
    let (n_u, dims, k) = (bits.n_users(), bits.dims(), bits.bits_per_symbol());
    let mut out = Vec::with_capacity(bits.as_slice().len());
    for re in dims.iter() {
        for u in 0..n_u {
            out.extend_from_slice(&bits.symbol_bits(u, re)[..k]);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainCfg {
    pub snr_range_db: [f64; 2],
    pub batch: usize,
    pub iterations: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Record the loss every this many iterations.
    pub log_every: usize,
    /// Write a checkpoint every this many iterations; 0 keeps only the last.
    pub checkpoint_every: usize,
    pub snr_mode: SnrMode,
    /// Reuse the first batch for every step (overfitting diagnostics).
    pub reuse_batch: bool,
}

impl Default for TrainCfg {
    fn default() -> Self {
        Self {
            snr_range_db: [7.0, 34.0],
            batch: 2,
            iterations: 1000,
            lr: 1e-3,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
            log_every: 10,
            checkpoint_every: 0,
            snr_mode: SnrMode::Instantaneous,
            reuse_batch: false,
        }
    }
}

impl TrainCfg {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.snr_range_db;
        if !(lo < hi) {
            return Err(Error::Config(format!("snr_range_db [{lo}, {hi}] must have low < high")));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// A training batch in the network's layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch<T> {
    pub input: DemapInput<T>,
    /// `(B, N_f, N_t, N_u, K)`.
    pub bits: Vec<u8>,
    /// Same layout; `false` at pilot REs.
    pub mask: Vec<bool>,
    pub snr_db: Vec<f64>,
}

/// Uncoded bits through the link at SNRs uniform in dB, NP-equalized.
pub fn gen_training_batch<T: Scalar>(
    link: &Link,
    batch: usize,
    snr_range_db: [f64; 2],
    rng: &mut SimRng,
) -> Result<TrainingBatch<T>> {
    let mask1 = link.data_mask();
    let mut eqs = Vec::with_capacity(batch);
    let mut bits = Vec::with_capacity(batch * mask1.len());
    let mut mask = Vec::with_capacity(batch * mask1.len());
    let mut snr_db = Vec::with_capacity(batch);
    for _ in 0..batch {
        let b = BitGrid::random(link.n_u(), link.dims, link.k(), rng);
        let snr = rng.random_range(snr_range_db[0]..snr_range_db[1]);
        let slot = link.transmit(b, snr, rng)?;
        eqs.push(link.np_equalize(&slot)?);
        bits.extend(bits_network_order(&slot.bits));
        mask.extend_from_slice(&mask1);
        snr_db.push(snr);
    }
    Ok(TrainingBatch { input: DemapInput::from_equalized(&eqs)?, bits, mask, snr_db })
}

/// Masked BCE in bits, positive LLR favouring 0.
pub fn bce_bits(llr: &[f64], bits: &[u8], mask: &[bool]) -> Result<f64> {
    if llr.len() != bits.len() || llr.len() != mask.len() {
        return Err(Error::Shape(format!("{} LLRs, {} bits, {} mask entries", llr.len(), bits.len(), mask.len())));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ((&l, &b), &m) in llr.iter().zip(bits).zip(mask) {
        if m {
            let s = if b == 0 { 1.0 } else { -1.0 };
            total += softplus(-s * l);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Shape("every entry is masked".into()));
    }
    Ok(total / std::f64::consts::LN_2 / count as f64)
}

/// Achievable-rate estimate `1 - BCE`, in bits per coded bit.
pub fn rate_estimate(llr: &[f64], bits: &[u8], mask: &[bool]) -> Result<f64> {
    Ok(1.0 - bce_bits(llr, bits, mask)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss_bits: f64,
    pub snr_mean_db: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub trace: Vec<LossRecord>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn write_loss_csv<W: Write>(w: W, trace: &[LossRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["iteration", "loss_bits", "snr_mean_db"])?;
    for r in trace {
        wr.write_record([r.iteration.to_string(), format!("{:.9}", r.loss_bits), format!("{:.6}", r.snr_mean_db)])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn checkpoint_path(run: &Path, iteration: usize) -> PathBuf {
    run.join(format!("{iteration}.ckpt"))
}

/// One forward/backward/step on a batch; returns the loss.
pub fn train_step<M: Demapper<f32>>(
    model: &mut M,
    opt: &mut Optimizer<f32>,
    batch: &TrainingBatch<f32>,
    iteration: usize,
) -> Result<f64> {
    let mut g = Graph::new();
    let f = model.forward(&mut g, &batch.input, Mode::Train)?;
    let loss = g.bce_from_llr(f.llr, &batch.bits, &batch.mask)?;
    let value = g.value(loss)[0] as f64;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { iteration, lr: opt.lr });
    }
    g.backward(loss)?;
    if cfg!(debug_assertions) {
        if let Some(d) = g.grad(f.llr) {
            debug_assert!(d.iter().zip(&batch.mask).all(|(&v, &m)| m || v == 0.0));
        }
    }
    let grads = g.param_grads();
    if grads.iter().any(|(_, v)| v.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFiniteLoss { iteration, lr: opt.lr });
    }
    opt.step(model.params_mut(), &grads);
    model.apply_bn_updates(&f.bn_updates);
    Ok(value)
}

/// Train `model` on fresh link batches.
///
/// With `run_dir`, writes `loss.csv` and checkpoints `<run>/<iteration>.ckpt`.
pub fn train<M: Demapper<f32>>(
    model: &mut M,
    link: &Link,
    cfg: &TrainCfg,
    run_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut link = link.clone();
    link.snr_mode = cfg.snr_mode;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr)?;
    let mut rng = seeded(derive_seed(cfg.seed, &[0x74_7261_696e]));
    let mut report = TrainReport::default();
    let mut fixed: Option<TrainingBatch<f32>> = None;
    let meta = model.model_card();
    for it in 0..cfg.iterations {
        let batch = match (&fixed, cfg.reuse_batch) {
            (Some(b), true) => b.clone(),
            _ => gen_training_batch(&link, cfg.batch, cfg.snr_range_db, &mut rng)?,
        };
        if cfg.reuse_batch && fixed.is_none() {
            fixed = Some(batch.clone());
        }
        let loss = train_step(model, &mut opt, &batch, it)?;
        if it % cfg.log_every == 0 || it + 1 == cfg.iterations {
            let snr_mean_db = batch.snr_db.iter().sum::<f64>() / batch.snr_db.len() as f64;
            report.trace.push(LossRecord { iteration: it, loss_bits: loss, snr_mean_db });
        }
        if let Some(dir) = run_dir {
            let done = it + 1;
            if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) || done == cfg.iterations {
                let p = checkpoint_path(dir, done);
                model.params().save(&p, &meta)?;
                report.checkpoints.push(p);
            }
        }
    }
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
        let f = std::fs::File::create(dir.join("loss.csv"))?;
        write_loss_csv(std::io::BufWriter::new(f), &report.trace)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests;
