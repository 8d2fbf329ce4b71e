use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::Rng;

use cvtdemap::codec::{make_regular_ldpc, CheckRule, Decoder};
use cvtdemap::harness::{Config, Harness, ReceiverKind};
use cvtdemap::neuraldemap::{CvtDemapper, Demapper, ResnetDemapper};
use cvtdemap::rng::seeded;
use cvtdemap::tensor::{Graph, Mode, Optimizer, OptimizerKind};
use cvtdemap::training::{gen_training_batch, train_step, SnrMode};

fn desk_config() -> Config {
    let mut c = Config::default();
    c.model.cvt.d_m = 32;
    c.model.cvt.n_h = 4;
    c
}

fn rxchain(c: &mut Criterion) {
    let cfg = desk_config();
    let h = Harness::new(&cfg).unwrap();
    let ts = h.draw_slot(10.0, 1, false).unwrap();
    c.bench_function("rxchain/np_baseline_slot", |b| {
        b.iter(|| h.llrs(ReceiverKind::NpGaussianBaseline, &ts.slot).unwrap())
    });
    c.bench_function("rxchain/draw_slot", |b| b.iter(|| h.draw_slot(10.0, 2, true).unwrap()));
}

fn ldpc(c: &mut Criterion) {
    let code = make_regular_ldpc(576, 1).unwrap();
    let mut rng = seeded(5);
    // all-zero codeword through BPSK at 2 dB
    let sigma2 = 10f64.powf(-0.2);
    let llrs: Vec<f64> = (0..code.n())
        .map(|_| {
            let y = 1.0 + sigma2.sqrt() * rng.random_range(-1.7..1.7);
            2.0 * y / sigma2
        })
        .collect();
    for (name, rule) in [("tanh", CheckRule::Tanh), ("boxplus", CheckRule::BoxPlus)] {
        let dec = Decoder::new(&code, rule);
        c.bench_function(&format!("ldpc/decode_576_{name}"), |b| b.iter(|| dec.decode(&llrs, 50).unwrap()));
    }
}

fn neural(c: &mut Criterion) {
    let cfg = desk_config();
    let link = cfg.link(SnrMode::Instantaneous).unwrap();
    let batch = gen_training_batch::<f32>(&link, 2, [7.0, 34.0], &mut seeded(3)).unwrap();
    let mut group = c.benchmark_group("neural");
    group.sample_size(10);

    let cvt = CvtDemapper::<f32>::new(cfg.cvt_config().unwrap(), 0).unwrap();
    group.bench_function("cvt_forward_infer", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            cvt.forward(&mut g, &batch.input, Mode::Infer).unwrap()
        })
    });
    group.bench_function("cvt_train_step", |b| {
        b.iter_batched(
            || (cvt.clone(), Optimizer::new(OptimizerKind::Adam, 1e-3).unwrap()),
            |(mut m, mut opt)| train_step(&mut m, &mut opt, &batch, 0).unwrap(),
            BatchSize::LargeInput,
        )
    });

    let resnet = ResnetDemapper::<f32>::new(cfg.resnet_config(), 0).unwrap();
    group.bench_function("resnet_train_step", |b| {
        b.iter_batched(
            || (resnet.clone(), Optimizer::new(OptimizerKind::Sgd, 1e-3).unwrap()),
            |(mut m, mut opt)| train_step(&mut m, &mut opt, &batch, 0).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, rxchain, ldpc, neural);
criterion_main!(benches);
