use super::*;
use crate::neuraldemap::{CvtConfig, CvtDemapper};

fn tiny_link(n_f: usize, n_u: usize, n_r: usize) -> Link {
    let ch = ChannelModelCfg {
        n_r,
        n_u,
        rho_rx: 0.5,
        ar_time: 0.98,
        n_taps: 3,
        tap_decay: 0.5,
        gains: vec![],
        cluster_mix: 0.0,
    };
    Link::new(GridDims::new(n_f, 14).unwrap(), &[2, 11], ch, 2, SnrMode::Instantaneous).unwrap()
}

#[test]
fn batch_is_deterministic() {
    let link = tiny_link(6, 2, 2);
    let a: TrainingBatch<f32> = gen_training_batch(&link, 2, [7.0, 34.0], &mut seeded(3)).unwrap();
    let b: TrainingBatch<f32> = gen_training_batch(&link, 2, [7.0, 34.0], &mut seeded(3)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.input.shape(), [2, 2, 6, 14]);
    assert_eq!(a.bits.len(), 2 * 6 * 14 * 2 * 2);
    assert!(a.input.r_x.iter().all(|&r| r > 0.0 && r <= 1.0));
}

#[test]
fn mask_excludes_every_pilot_re() {
    let link = tiny_link(6, 2, 2);
    let mask = link.data_mask();
    let per = 2 * 2;
    for re in link.dims.iter() {
        let m = &mask[link.dims.linear(re) * per..][..per];
        assert!(m.iter().all(|&v| v == !link.pattern.is_pilot(re)));
    }
    assert_eq!(mask.iter().filter(|&&m| !m).count(), link.pattern.num_pilot_res() * per);
}

#[test]
fn bit_mean_is_one_half() {
    let link = tiny_link(24, 4, 2);
    let mut rng = seeded(4);
    let (mut ones, mut n) = (0u64, 0u64);
    while n < 1_000_000 {
        let b = BitGrid::random(link.n_u(), link.dims, link.k(), &mut rng);
        ones += b.as_slice().iter().map(|&x| x as u64).sum::<u64>();
        n += b.as_slice().len() as u64;
    }
    let p = ones as f64 / n as f64;
    assert!((p - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt(), "{p}");
}

#[test]
fn snr_samples_are_uniform_in_db() {
    // Kolmogorov-Smirnov distance against U[7, 34]
    let link = tiny_link(2, 1, 1);
    let mut rng = seeded(5);
    let mut s: Vec<f64> = Vec::new();
    for _ in 0..400 {
        let b: TrainingBatch<f64> = gen_training_batch(&link, 2, [7.0, 34.0], &mut rng).unwrap();
        s.extend(b.snr_db);
    }
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let d = s
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = (x - 7.0) / 27.0;
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    // 1% critical value 1.63 / sqrt(n)
    assert!(d < 1.63 / n.sqrt(), "{d}");
    assert!(s.iter().all(|&x| (7.0..34.0).contains(&x)));
}

#[test]
fn rate_reference_values() {
    let bits = [0u8, 1, 0, 1];
    assert_eq!(rate_estimate(&[0.0; 4], &bits, &[true; 4]).unwrap(), 0.0);
    let r = rate_estimate(&[20.0, -20.0, 20.0, -20.0], &bits, &[true; 4]).unwrap();
    assert!((1.0 - r - 2.97e-9).abs() < 0.01e-9);
    assert!(rate_estimate(&[-5.0; 4], &[0; 4], &[true; 4]).unwrap() < 0.0);
}

#[test]
fn bce_matches_graph_op() {
    let llr = [1.5, -0.25, 3.0, 0.0, -7.0];
    let bits = [0u8, 0, 1, 1, 1];
    let mask = [true, true, false, true, true];
    let mut g = Graph::<f64>::new();
    let x = g.input(&[5], llr.to_vec()).unwrap();
    let l = g.bce_from_llr(x, &bits, &mask).unwrap();
    assert!((g.value(l)[0] - bce_bits(&llr, &bits, &mask).unwrap()).abs() < 1e-15);
}

#[test]
fn loss_is_batch_permutation_invariant_and_mean_like() {
    let link = tiny_link(4, 2, 2);
    let model = CvtDemapper::<f64>::new(CvtConfig::new(8, 2, 1, 2).unwrap(), 1).unwrap();
    let b: TrainingBatch<f64> = gen_training_batch(&link, 2, [7.0, 34.0], &mut seeded(6)).unwrap();
    let loss_and_grads = |batch: &TrainingBatch<f64>| {
        let mut g = Graph::new();
        let f = model.forward(&mut g, &batch.input, Mode::Train).unwrap();
        let l = g.bce_from_llr(f.llr, &batch.bits, &batch.mask).unwrap();
        g.backward(l).unwrap();
        (g.value(l)[0], g.param_grads())
    };
    let per_in = b.input.r_x.len() / 2;
    let per_bits = b.bits.len() / 2;
    let reorder = |order: &[usize]| -> TrainingBatch<f64> {
        let mut x = Vec::new();
        let mut r = Vec::new();
        let (mut bits, mut mask) = (Vec::new(), Vec::new());
        for &i in order {
            x.extend_from_slice(&b.input.xhat_ri[2 * i * per_in..2 * (i + 1) * per_in]);
            r.extend_from_slice(&b.input.r_x[i * per_in..(i + 1) * per_in]);
            bits.extend_from_slice(&b.bits[i * per_bits..(i + 1) * per_bits]);
            mask.extend_from_slice(&b.mask[i * per_bits..(i + 1) * per_bits]);
        }
        let input = DemapInput::new(order.len(), 2, b.input.dims, x, r).unwrap();
        TrainingBatch { input, bits, mask, snr_db: vec![] }
    };
    let (l0, g0) = loss_and_grads(&b);
    let (l1, _) = loss_and_grads(&reorder(&[1, 0]));
    assert!((l0 - l1).abs() < 1e-12);
    let (l2, g2) = loss_and_grads(&reorder(&[0, 1, 0, 1]));
    assert!((l0 - l2).abs() < 1e-12);
    for ((_, a), (_, c)) in g0.iter().zip(&g2) {
        for (x, y) in a.iter().zip(c) {
            assert!((x - y).abs() < 1e-9 * (1.0 + x.abs()));
        }
    }
}

#[test]
fn zero_lr_keeps_loss_constant_on_a_fixed_batch() {
    let link = tiny_link(4, 2, 2);
    let mut model = CvtDemapper::<f32>::new(CvtConfig::new(8, 2, 1, 2).unwrap(), 2).unwrap();
    let cfg = TrainCfg { iterations: 6, lr: 0.0, log_every: 1, reuse_batch: true, ..TrainCfg::default() };
    let rep = train(&mut model, &link, &cfg, None).unwrap();
    assert_eq!(rep.trace.len(), 6);
    assert!(rep.trace.iter().all(|r| r.loss_bits == rep.trace[0].loss_bits));
}

#[test]
fn pilot_llrs_get_no_gradient() {
    let link = tiny_link(4, 2, 2);
    let model = CvtDemapper::<f64>::new(CvtConfig::new(8, 2, 1, 2).unwrap(), 3).unwrap();
    let b: TrainingBatch<f64> = gen_training_batch(&link, 1, [7.0, 34.0], &mut seeded(7)).unwrap();
    let mut g = Graph::new();
    let f = model.forward(&mut g, &b.input, Mode::Train).unwrap();
    let l = g.bce_from_llr(f.llr, &b.bits, &b.mask).unwrap();
    g.backward(l).unwrap();
    let d = g.grad(f.llr).unwrap();
    assert!(b.mask.iter().any(|&m| !m));
    for (v, m) in d.iter().zip(&b.mask) {
        if !m {
            assert_eq!(*v, 0.0);
        }
    }
}

#[test]
fn non_finite_loss_aborts_with_diagnostic() {
    let link = tiny_link(4, 2, 2);
    let mut model = CvtDemapper::<f32>::new(CvtConfig::new(8, 2, 1, 2).unwrap(), 4).unwrap();
    let id = model.params().id("conv_out.b").unwrap();
    model.params_mut().get_mut(id).value[0] = f32::NAN;
    let cfg = TrainCfg { iterations: 3, lr: 0.5, ..TrainCfg::default() };
    match train(&mut model, &link, &cfg, None) {
        Err(Error::NonFiniteLoss { iteration, lr }) => {
            assert_eq!(iteration, 0);
            assert_eq!(lr, 0.5);
        }
        other => panic!("expected divergence error, got {other:?}"),
    }
}

#[test]
fn smoke_training_reduces_loss_and_writes_artifacts() {
    let link = tiny_link(12, 2, 4);
    let mut model = CvtDemapper::<f32>::new(CvtConfig::new(16, 2, 3, 2).unwrap(), 5).unwrap();
    let cfg = TrainCfg { iterations: 500, log_every: 10, checkpoint_every: 250, seed: 9, ..TrainCfg::default() };
    let dir = tempfile::tempdir().unwrap();
    let rep = train(&mut model, &link, &cfg, Some(dir.path())).unwrap();
    let head: f64 = rep.trace[..5].iter().map(|r| r.loss_bits).sum::<f64>() / 5.0;
    let tail: f64 = rep.trace[rep.trace.len() - 5..].iter().map(|r| r.loss_bits).sum::<f64>() / 5.0;
    assert!(tail < head, "initial {head}, final {tail}");
    assert_eq!(rep.checkpoints, vec![checkpoint_path(dir.path(), 250), checkpoint_path(dir.path(), 500)]);
    let (store, card) = crate::tensor::ParamStore::<f32>::load(&rep.checkpoints[1]).unwrap();
    assert!(card.contains("d_m = 16"));
    assert_eq!(store.len(), model.params().len());
    let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert!(csv.starts_with("iteration,loss_bits,snr_mean_db\n"));
}

#[test]
fn invalid_cfg_rejected() {
    assert!(TrainCfg { snr_range_db: [10.0, 10.0], ..TrainCfg::default() }.validate().is_err());
    assert!(TrainCfg { batch: 0, ..TrainCfg::default() }.validate().is_err());
    assert!(TrainCfg { lr: -1.0, ..TrainCfg::default() }.validate().is_err());
}
