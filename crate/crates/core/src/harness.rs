//! Sectioned configuration, BER trials over the four receivers and CSV
//! reporting.
//!
//! Every trial draws its bits, channel and noise from one seed that depends
//! only on the SNR point and trial index, so all receivers see the same
//! realization and differ only in their processing.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelModelCfg;
use crate::codec::{make_regular_ldpc, CheckRule, Decoder, ParityCheckCode, DEFAULT_MAX_ITERS};
use crate::error::{Error, Result};
use crate::grid::{GridDims, ReIndex};
use crate::modem::BitGrid;
use crate::neuraldemap::{CvtConfig, CvtDemapper, DemapInput, Demapper, ResnetConfig, ResnetDemapper};
use crate::rng::{derive_seed, seeded};
use crate::rxchain::{demap_grid, equalize_grid, perfect_csi, LlrGrid};
use crate::tensor::ParamStore;
use crate::training::{Link, Slot, SnrMode, TrainCfg};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReceiverKind {
    PerfectCsiGaussian,
    NpGaussianBaseline,
    ResnetDemapper,
    CvtDemapper,
}

impl ReceiverKind {
    pub const ALL: [ReceiverKind; 4] =
        [Self::PerfectCsiGaussian, Self::NpGaussianBaseline, Self::ResnetDemapper, Self::CvtDemapper];

    pub fn name(self) -> &'static str {
        match self {
            Self::PerfectCsiGaussian => "perfect_csi_gaussian",
            Self::NpGaussianBaseline => "np_gaussian_baseline",
            Self::ResnetDemapper => "resnet_demapper",
            Self::CvtDemapper => "cvt_demapper",
        }
    }

    pub fn is_neural(self) -> bool {
        matches!(self, Self::ResnetDemapper | Self::CvtDemapper)
    }
}

impl std::fmt::Display for ReceiverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ReceiverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|r| r.name() == s).ok_or_else(|| Error::Config(format!("unknown receiver {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridCfg {
    pub n_f: usize,
    pub n_t: usize,
    /// OFDM symbols carrying pilots.
    pub pilot_symbols: Vec<usize>,
}

impl Default for GridCfg {
    fn default() -> Self {
        Self { n_f: 24, n_t: 14, pilot_symbols: vec![2, 11] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModemCfg {
    pub bits_per_symbol: usize,
}

impl Default for ModemCfg {
    fn default() -> Self {
        Self { bits_per_symbol: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecCfg {
    /// Codeword length of the (3, 6)-regular code.
    pub n: usize,
    /// Construction and interleaver seed.
    pub seed: u64,
    pub max_iters: usize,
    pub rule: CheckRule,
}

impl Default for CodecCfg {
    fn default() -> Self {
        Self { n: 96, seed: 1, max_iters: DEFAULT_MAX_ITERS, rule: CheckRule::Tanh }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    #[default]
    Cvt,
    Resnet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvtSection {
    pub d_m: usize,
    pub n_h: usize,
    pub n_blocks: usize,
}

impl Default for CvtSection {
    fn default() -> Self {
        Self { d_m: 64, n_h: 8, n_blocks: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResnetSection {
    pub d_m: usize,
    pub n_blocks: usize,
}

impl Default for ResnetSection {
    fn default() -> Self {
        Self { d_m: 64, n_blocks: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelCfg {
    /// Architecture built by `train`.
    pub arch: Arch,
    /// Initialization seed.
    pub seed: u64,
    pub cvt: CvtSection,
    pub resnet: ResnetSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepCfg {
    pub receivers: Vec<ReceiverKind>,
    pub snr_db: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub coded: bool,
    pub snr_mode: SnrMode,
    pub cvt_checkpoint: Option<PathBuf>,
    pub resnet_checkpoint: Option<PathBuf>,
}

impl Default for SweepCfg {
    fn default() -> Self {
        Self {
            receivers: vec![ReceiverKind::PerfectCsiGaussian, ReceiverKind::NpGaussianBaseline],
            snr_db: vec![10.0, 13.0, 16.0, 19.0, 22.0, 25.0, 28.0, 31.0],
            trials: 200,
            seed: 0,
            coded: true,
            snr_mode: SnrMode::Average,
            cvt_checkpoint: None,
            resnet_checkpoint: None,
        }
    }
}

/// Mildly selective, slowly varying, with correlated user pairs. Harsher
/// settings (more taps, faster fading) floor the nearest-pilot baseline well
/// above BER 1e-2.
fn default_channel() -> ChannelModelCfg {
    ChannelModelCfg {
        n_r: 8,
        n_u: 4,
        rho_rx: 0.7,
        ar_time: 0.99,
        n_taps: 2,
        tap_decay: 0.5,
        gains: vec![],
        cluster_mix: 0.7,
    }
}

/// The complete run configuration, one section per concern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub grid: GridCfg,
    pub channel: ChannelModelCfg,
    pub modem: ModemCfg,
    pub codec: CodecCfg,
    pub model: ModelCfg,
    pub train: TrainCfg,
    pub sweep: SweepCfg,
}

impl Default for Config {
    /// The desk-scale evaluation setup.
    fn default() -> Self {
        Self {
            grid: GridCfg::default(),
            channel: default_channel(),
            modem: ModemCfg::default(),
            codec: CodecCfg::default(),
            model: ModelCfg::default(),
            train: TrainCfg::default(),
            sweep: SweepCfg::default(),
        }
    }
}

impl Config {
    /// Small setup for smoke runs.
    pub fn tiny() -> Self {
        let mut c = Self::default();
        c.grid.n_f = 12;
        c.channel.n_u = 2;
        c.channel.n_r = 4;
        c.model.cvt = CvtSection { d_m: 16, n_h: 2, n_blocks: 3 };
        c.model.resnet = ResnetSection { d_m: 16, n_blocks: 5 };
        c.train.iterations = 500;
        c.sweep.snr_db = vec![10.0, 20.0, 30.0];
        c.sweep.trials = 10;
        c
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        GridDims::new(self.grid.n_f, self.grid.n_t)?;
        self.channel.validate()?;
        self.train.validate()?;
        self.cvt_config()?;
        self.resnet_config().validate()?;
        if self.sweep.trials == 0 {
            return Err(Error::Config("sweep.trials must be at least 1".into()));
        }
        if self.sweep.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("sweep SNRs must be finite".into()));
        }
        if self.codec.n < 6 || !self.codec.n.is_multiple_of(2) {
            return Err(Error::Config(format!("codec.n = {} must be even and at least 6", self.codec.n)));
        }
        Ok(())
    }

    pub fn dims(&self) -> Result<GridDims> {
        GridDims::new(self.grid.n_f, self.grid.n_t)
    }

    pub fn link(&self, snr_mode: SnrMode) -> Result<Link> {
        Link::new(self.dims()?, &self.grid.pilot_symbols, self.channel.clone(), self.modem.bits_per_symbol, snr_mode)
    }

    pub fn cvt_config(&self) -> Result<CvtConfig> {
        let c = &self.model.cvt;
        CvtConfig::new(c.d_m, c.n_h, c.n_blocks, self.modem.bits_per_symbol)
    }

    pub fn resnet_config(&self) -> ResnetConfig {
        let c = &self.model.resnet;
        ResnetConfig { d_m: c.d_m, n_blocks: c.n_blocks, k: self.modem.bits_per_symbol }
    }
}

/// Error counts of one or more trials.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrialCounts {
    pub n_bits: u64,
    pub n_bit_errors: u64,
    pub n_blocks: u64,
    pub n_block_errors: u64,
}

impl TrialCounts {
    pub fn merge(&mut self, o: &TrialCounts) {
        self.n_bits += o.n_bits;
        self.n_bit_errors += o.n_bit_errors;
        self.n_blocks += o.n_blocks;
        self.n_block_errors += o.n_block_errors;
    }

    pub fn ber(&self) -> f64 {
        if self.n_bits == 0 {
            0.0
        } else {
            self.n_bit_errors as f64 / self.n_bits as f64
        }
    }
}

/// One CSV row: aggregated counts for a (receiver, SNR) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResultRow {
    pub snr_db: f64,
    pub receiver: ReceiverKind,
    pub n_bits: u64,
    pub n_bit_errors: u64,
    pub ber: f64,
    pub n_blocks: u64,
    pub n_block_errors: u64,
    pub coded: bool,
}

impl SweepResultRow {
    pub fn from_counts(snr_db: f64, receiver: ReceiverKind, coded: bool, c: &TrialCounts) -> Self {
        Self {
            snr_db,
            receiver,
            n_bits: c.n_bits,
            n_bit_errors: c.n_bit_errors,
            ber: c.ber(),
            n_blocks: c.n_blocks,
            n_block_errors: c.n_block_errors,
            coded,
        }
    }
}

pub const CSV_HEADER: &str = "snr_db,receiver,n_bits,n_bit_errors,ber,n_blocks,n_block_errors,coded";

pub fn write_csv<W: Write>(w: W, rows: &[SweepResultRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<SweepResultRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Config(format!("unexpected CSV header {:?}", header.join(","))));
    }
    Ok(rd.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Per-trial counts kept for paired statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub snr_db: f64,
    pub trial: usize,
    pub receiver: ReceiverKind,
    pub counts: TrialCounts,
}

#[derive(Debug, Clone, Default)]
pub struct SweepOutput {
    pub rows: Vec<SweepResultRow>,
    pub trials: Vec<TrialRecord>,
}

/// Seed of trial `trial` at `snr_db`; shared by every receiver.
pub fn trial_seed(base: u64, snr_db: f64, trial: usize) -> u64 {
    derive_seed(base, &[snr_db.to_bits(), trial as u64])
}

/// A drawn slot plus the information bits it carries.
#[derive(Debug, Clone)]
pub struct TrialSlot {
    pub slot: Slot,
    /// Per user: information bits, concatenated over codewords (coded) or
    /// all data bits (uncoded).
    pub info: Vec<Vec<u8>>,
}

/// Configured receivers ready to run trials.
pub struct Harness {
    pub link: Link,
    code: ParityCheckCode,
    codec: CodecCfg,
    /// Per user: data slot (RE, bit) for every coded-bit position.
    layout: Vec<Vec<(ReIndex, usize)>>,
    cvt: Option<CvtDemapper<f32>>,
    resnet: Option<ResnetDemapper<f32>>,
}

impl Harness {
    /// Build the link and code; load a model for every neural receiver in
    /// `cfg.sweep.receivers`.
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let link = cfg.link(cfg.sweep.snr_mode)?;
        let code = make_regular_ldpc(cfg.codec.n, cfg.codec.seed)?;
        let data = link.pattern.data_res();
        let k = link.k();
        let mut layout = Vec::with_capacity(link.n_u());
        for u in 0..link.n_u() {
            let mut slots: Vec<(ReIndex, usize)> = data.iter().flat_map(|&re| (0..k).map(move |j| (re, j))).collect();
            slots.shuffle(&mut seeded(derive_seed(cfg.codec.seed, &[0x696c, u as u64])));
            layout.push(slots);
        }
        let mut h = Self { link, code, codec: cfg.codec.clone(), layout, cvt: None, resnet: None };
        for r in &cfg.sweep.receivers {
            match r {
                ReceiverKind::CvtDemapper => {
                    let path = cfg.sweep.cvt_checkpoint.as_deref().ok_or_else(|| missing(*r))?;
                    let mut m = CvtDemapper::new(cfg.cvt_config()?, cfg.model.seed)?;
                    load_into(m.params_mut(), path)?;
                    h.cvt = Some(m);
                }
                ReceiverKind::ResnetDemapper => {
                    let path = cfg.sweep.resnet_checkpoint.as_deref().ok_or_else(|| missing(*r))?;
                    let mut m = ResnetDemapper::new(cfg.resnet_config(), cfg.model.seed)?;
                    load_into(m.params_mut(), path)?;
                    h.resnet = Some(m);
                }
                _ => {}
            }
        }
        Ok(h)
    }

    /// Use an in-memory CvT model instead of a checkpoint.
    pub fn with_cvt(mut self, m: CvtDemapper<f32>) -> Self {
        self.cvt = Some(m);
        self
    }

    pub fn with_resnet(mut self, m: ResnetDemapper<f32>) -> Self {
        self.resnet = Some(m);
        self
    }

    pub fn code(&self) -> &ParityCheckCode {
        &self.code
    }

    /// Codewords per user per slot.
    pub fn codewords_per_user(&self) -> usize {
        self.layout[0].len() / self.code.n()
    }

    /// Bits, channel and noise of one trial, all from `seed`.
    pub fn draw_slot(&self, snr_db: f64, seed: u64, coded: bool) -> Result<TrialSlot> {
        let mut rng = seeded(seed);
        let link = &self.link;
        let mut bits = BitGrid::random(link.n_u(), link.dims, link.k(), &mut rng);
        let mut info = Vec::with_capacity(link.n_u());
        for (u, slots) in self.layout.iter().enumerate() {
            if coded {
                let (n, kc) = (self.code.n(), self.code.k());
                let mut user_info = Vec::with_capacity(self.codewords_per_user() * kc);
                for c in 0..self.codewords_per_user() {
                    let msg: Vec<u8> = (0..kc).map(|_| rng.random_range(0..2u8)).collect();
                    let word = self.code.encode(&msg)?;
                    for (i, &b) in word.iter().enumerate() {
                        let (re, j) = slots[c * n + i];
                        bits.symbol_bits_mut(u, re)[j] = b;
                    }
                    user_info.extend(msg);
                }
                info.push(user_info);
            } else {
                info.push(slots.iter().map(|&(re, j)| bits.symbol_bits(u, re)[j]).collect());
            }
        }
        let slot = link.transmit(bits, snr_db, &mut rng)?;
        Ok(TrialSlot { slot, info })
    }

    /// Soft outputs of `receiver` on a slot.
    pub fn llrs(&self, receiver: ReceiverKind, slot: &Slot) -> Result<LlrGrid> {
        let link = &self.link;
        match receiver {
            ReceiverKind::PerfectCsiGaussian => {
                let est = perfect_csi(&slot.channel, slot.sigma2)?;
                demap_grid(&equalize_grid(&slot.rx, &est)?, &link.constellation)
            }
            ReceiverKind::NpGaussianBaseline => demap_grid(&link.np_equalize(slot)?, &link.constellation),
            ReceiverKind::CvtDemapper | ReceiverKind::ResnetDemapper => {
                let input = DemapInput::<f32>::from_equalized(&[link.np_equalize(slot)?])?;
                let mut out = match receiver {
                    ReceiverKind::CvtDemapper => self.cvt.as_ref().ok_or_else(|| missing(receiver))?.infer(&input)?,
                    _ => self.resnet.as_ref().ok_or_else(|| missing(receiver))?.infer(&input)?,
                };
                Ok(out.remove(0))
            }
        }
    }

    /// Count information-bit errors of `receiver` on a drawn slot.
    pub fn score(&self, receiver: ReceiverKind, ts: &TrialSlot, coded: bool) -> Result<TrialCounts> {
        let llr = self.llrs(receiver, &ts.slot)?;
        let mut c = TrialCounts::default();
        for (u, slots) in self.layout.iter().enumerate() {
            let soft: Vec<f64> = slots.iter().map(|&(re, j)| llr.symbol(u, re)[j]).collect();
            if coded {
                let (n, kc) = (self.code.n(), self.code.k());
                let dec = Decoder::new(&self.code, self.codec.rule);
                for cw in 0..self.codewords_per_user() {
                    let out = dec.decode(&soft[cw * n..(cw + 1) * n], self.codec.max_iters)?;
                    let sent = &ts.info[u][cw * kc..(cw + 1) * kc];
                    let errs = out.info.iter().zip(sent).filter(|(a, b)| a != b).count() as u64;
                    c.n_bits += kc as u64;
                    c.n_bit_errors += errs;
                    c.n_blocks += 1;
                    c.n_block_errors += (errs > 0) as u64;
                }
            } else {
                let errs = soft.iter().zip(&ts.info[u]).filter(|(&l, &b)| (l < 0.0) != (b == 1)).count();
                c.n_bits += soft.len() as u64;
                c.n_bit_errors += errs as u64;
            }
        }
        Ok(c)
    }

    /// One full trial of a single receiver.
    pub fn run_trial(&self, receiver: ReceiverKind, snr_db: f64, seed: u64, coded: bool) -> Result<TrialCounts> {
        let ts = self.draw_slot(snr_db, seed, coded)?;
        self.score(receiver, &ts, coded)
    }

    /// Aggregate every receiver over `trials` paired trials per SNR point.
    pub fn run_sweep(
        &self,
        receivers: &[ReceiverKind],
        snr_list_db: &[f64],
        trials: usize,
        seed: u64,
        coded: bool,
    ) -> Result<SweepOutput> {
        let mut out = SweepOutput::default();
        for &snr in snr_list_db {
            let mut totals = vec![TrialCounts::default(); receivers.len()];
            for t in 0..trials {
                let ts = self.draw_slot(snr, trial_seed(seed, snr, t), coded)?;
                for (i, &r) in receivers.iter().enumerate() {
                    let c = self.score(r, &ts, coded)?;
                    totals[i].merge(&c);
                    out.trials.push(TrialRecord { snr_db: snr, trial: t, receiver: r, counts: c });
                }
            }
            for (i, &r) in receivers.iter().enumerate() {
                out.rows.push(SweepResultRow::from_counts(snr, r, coded, &totals[i]));
            }
        }
        Ok(out)
    }
}

fn missing(r: ReceiverKind) -> Error {
    Error::Config(format!("receiver {r} needs a model checkpoint"))
}

fn load_into(store: &mut ParamStore<f32>, path: &Path) -> Result<()> {
    let (ckpt, _) = ParamStore::<f32>::load(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    store.load_values_from(&ckpt)
}

/// SNR at which `ber` crosses `target`, interpolating linearly in
/// `log10(ber)` between the first bracketing pair of points.
pub fn snr_at_ber(points: &[(f64, f64)], target: f64) -> Option<f64> {
    let mut pts: Vec<(f64, f64)> = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    for w in pts.windows(2) {
        let ((s0, b0), (s1, b1)) = (w[0], w[1]);
        if b0 >= target && b1 <= target && b0 > 0.0 && b1 > 0.0 {
            if b0 == b1 {
                return Some(s0);
            }
            let (l0, l1, lt) = (b0.log10(), b1.log10(), target.log10());
            return Some(s0 + (s1 - s0) * (l0 - lt) / (l0 - l1));
        }
    }
    None
}
