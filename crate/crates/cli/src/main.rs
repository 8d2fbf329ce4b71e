//! Command-line front end: training, BER sweeps and verification suites.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cvtdemap::harness::{write_csv, Arch, Config, Harness, ReceiverKind};
use cvtdemap::neuraldemap::{CvtDemapper, Demapper, ResnetDemapper};
use cvtdemap::oracle;
use cvtdemap::tensor::{gradcheck, ParamStore};
use cvtdemap::training::train;

#[derive(Parser)]
#[command(name = "cvtdemap", version, about = "Neural MU-MIMO demapper simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the model selected by `model.arch`.
    Train(Common),
    /// Run a BER sweep over the configured receivers and SNR points.
    Sweep(Common),
    /// Finite-difference gradient checks of every op and a tiny full model.
    Gradcheck(Common),
    /// Compare the classical receiver against brute-force oracles.
    Oracle(Common),
    /// Print the model card of the configured model or a checkpoint.
    Info(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration with grid, channel, modem, codec, model, train and sweep sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output path: run directory for `train`, CSV file for `sweep`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model checkpoint for neural receivers.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<Config> {
        match &self.config {
            Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display())),
            None => Ok(Config::default()),
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Train(c) => cmd_train(&c),
        Cmd::Sweep(c) => cmd_sweep(&c),
        Cmd::Gradcheck(c) => cmd_gradcheck(&c),
        Cmd::Oracle(c) => cmd_oracle(&c),
        Cmd::Info(c) => cmd_info(&c),
    }
}

fn cmd_train(c: &Common) -> Result<bool> {
    let mut cfg = c.config()?;
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    let run_dir = c.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(arch_name(cfg.model.arch)));
    let link = cfg.link(cfg.train.snr_mode)?;
    let report = match cfg.model.arch {
        Arch::Cvt => {
            let mut m = CvtDemapper::<f32>::new(cfg.cvt_config()?, cfg.model.seed)?;
            resume(m.params_mut(), c.checkpoint.as_deref())?;
            let r = train(&mut m, &link, &cfg.train, Some(&run_dir))?;
            write_card(&run_dir, &m.model_card())?;
            r
        }
        Arch::Resnet => {
            let mut m = ResnetDemapper::<f32>::new(cfg.resnet_config(), cfg.model.seed)?;
            resume(m.params_mut(), c.checkpoint.as_deref())?;
            let r = train(&mut m, &link, &cfg.train, Some(&run_dir))?;
            write_card(&run_dir, &m.model_card())?;
            r
        }
    };
    if let Some(last) = report.trace.last() {
        println!("final loss {:.5} bits at iteration {}", last.loss_bits, last.iteration);
    }
    for p in &report.checkpoints {
        println!("checkpoint {}", p.display());
    }
    Ok(true)
}

fn arch_name(a: Arch) -> &'static str {
    match a {
        Arch::Cvt => "cvt",
        Arch::Resnet => "resnet",
    }
}

fn resume(store: &mut ParamStore<f32>, ckpt: Option<&Path>) -> Result<()> {
    if let Some(p) = ckpt {
        let (loaded, _) = ParamStore::<f32>::load(p).with_context(|| format!("reading {}", p.display()))?;
        store.load_values_from(&loaded)?;
    }
    Ok(())
}

fn write_card(dir: &Path, card: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("model_card.txt"), card)?;
    Ok(())
}

fn cmd_sweep(c: &Common) -> Result<bool> {
    let mut cfg = c.config()?;
    if let Some(s) = c.seed {
        cfg.sweep.seed = s;
    }
    if let Some(p) = &c.checkpoint {
        let neural: Vec<ReceiverKind> = cfg.sweep.receivers.iter().copied().filter(|r| r.is_neural()).collect();
        match neural.as_slice() {
            [ReceiverKind::CvtDemapper] => cfg.sweep.cvt_checkpoint = Some(p.clone()),
            [ReceiverKind::ResnetDemapper] => cfg.sweep.resnet_checkpoint = Some(p.clone()),
            [] => bail!("--checkpoint given but no neural receiver is configured"),
            _ => bail!("--checkpoint is ambiguous with two neural receivers; set sweep.cvt_checkpoint and sweep.resnet_checkpoint"),
        }
    }
    let h = Harness::new(&cfg)?;
    let s = &cfg.sweep;
    let out = h.run_sweep(&s.receivers, &s.snr_db, s.trials, s.seed, s.coded)?;
    match &c.out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            let f = std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
            write_csv(std::io::BufWriter::new(f), &out.rows)?;
        }
        None => write_csv(std::io::stdout().lock(), &out.rows)?,
    }
    Ok(true)
}

fn cmd_gradcheck(c: &Common) -> Result<bool> {
    let reports = gradcheck::full_suite(c.seed.unwrap_or(0))?;
    let mut ok = true;
    let mut out = std::io::stdout().lock();
    for r in &reports {
        let verdict = if r.passed() { "pass" } else { "FAIL" };
        writeln!(out, "{verdict} {:<24} max_rel_err {:.3e} (tol {:.0e})", r.name, r.max_rel_err, r.tolerance)?;
        ok &= r.passed();
    }
    Ok(ok)
}

fn cmd_oracle(c: &Common) -> Result<bool> {
    let seed = c.seed.unwrap_or(0);
    let mut reports = oracle::linear_algebra_suite(seed, 100);
    reports.extend(oracle::demapper_suite(seed, 10_000));
    let mut ok = true;
    let mut out = std::io::stdout().lock();
    for r in &reports {
        let verdict = if r.passed() { "pass" } else { "FAIL" };
        writeln!(
            out,
            "{verdict} {:<28} cases {:>6} max_err {:.3e} (tol {:.0e})",
            r.name, r.cases, r.max_err, r.tolerance
        )?;
        ok &= r.passed();
    }
    Ok(ok)
}

fn cmd_info(c: &Common) -> Result<bool> {
    if let Some(p) = &c.checkpoint {
        let (store, card) = ParamStore::<f32>::load(p).with_context(|| format!("reading {}", p.display()))?;
        print!("{card}");
        println!("checkpoint_tensors = {}", store.len());
        println!("checkpoint_trainable_params = {}", store.num_trainable());
        return Ok(true);
    }
    let cfg = c.config()?;
    let card = match cfg.model.arch {
        Arch::Cvt => CvtDemapper::<f32>::new(cfg.cvt_config()?, cfg.model.seed)?.model_card(),
        Arch::Resnet => ResnetDemapper::<f32>::new(cfg.resnet_config(), cfg.model.seed)?.model_card(),
    };
    print!("{card}");
    Ok(true)
}
