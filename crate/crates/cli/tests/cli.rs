use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cvtdemap"))
}

const TINY: &str = r#"
[grid]
n_f = 8
n_t = 14

[channel]
n_r = 2
n_u = 2
rho_rx = 0.5
ar_time = 0.99
n_taps = 2
tap_decay = 0.5

[model]
arch = "cvt"

[model.cvt]
d_m = 8
n_h = 2
n_blocks = 1

[train]
iterations = 20
log_every = 5
seed = 4

[sweep]
receivers = ["perfect_csi_gaussian", "np_gaussian_baseline", "cvt_demapper"]
snr_db = [5.0, 15.0]
trials = 2
"#;

fn write_cfg(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn train_then_sweep_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path());
    let run = dir.path().join("run");
    let st = bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&run).status().unwrap();
    assert!(st.success());
    let ckpt = run.join("20.ckpt");
    assert!(ckpt.exists());
    assert!(run.join("loss.csv").exists());
    assert!(run.join("model_card.txt").exists());

    let csv = dir.path().join("r.csv");
    let st = bin()
        .args(["sweep", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(&csv)
        .status()
        .unwrap();
    assert!(st.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "snr_db,receiver,n_bits,n_bit_errors,ber,n_blocks,n_block_errors,coded");
    let kinds = ["perfect_csi_gaussian", "np_gaussian_baseline", "resnet_demapper", "cvt_demapper"];
    let mut n = 0;
    for l in lines {
        let recv = l.split(',').nth(1).unwrap();
        assert!(kinds.contains(&recv), "{recv}");
        n += 1;
    }
    assert_eq!(n, 6);

    let out = bin().args(["info", "--checkpoint"]).arg(&ckpt).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("model = cvt"));
}

#[test]
fn sweep_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[grid]\nn_f = 8\n[channel]\nn_r = 2\nn_u = 2\nrho_rx = 0.5\nar_time = 0.99\nn_taps = 2\ntap_decay = 0.5\n[sweep]\nsnr_db = [6.0]\ntrials = 3\n").unwrap();
    let run = |name: &str| {
        let p = dir.path().join(name);
        let st = bin().args(["sweep", "--seed", "9", "--config"]).arg(&cfg).arg("--out").arg(&p).status().unwrap();
        assert!(st.success());
        std::fs::read(p).unwrap()
    };
    assert_eq!(run("a.csv"), run("b.csv"));
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[nonsense]\nx = 1\n").unwrap();
    let out = bin().args(["sweep", "--config"]).arg(&bad).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let out = bin().args(["sweep", "--bogus-flag"]).output().unwrap();
    assert!(!out.status.success());

    // neural receiver without a checkpoint
    let cfg = write_cfg(dir.path());
    let out = bin().args(["sweep", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn oracle_and_gradcheck_pass() {
    let out = bin().args(["oracle", "--seed", "3"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.lines().all(|l| l.starts_with("pass")));

    let out = bin().arg("gradcheck").output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("cvt_tiny_model"));
}

#[test]
fn info_reports_default_model() {
    let out = bin().arg("info").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("trainable_params = 124418"), "{text}");
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["tiny.toml", "desk.toml"] {
        let out = bin().args(["info", "--config"]).arg(dir.join(name)).output().unwrap();
        assert!(out.status.success(), "{name}: {}", String::from_utf8_lossy(&out.stderr));
    }
}
