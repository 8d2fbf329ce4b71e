use super::*;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn relu_values() {
    let mut g = Graph::<f64>::new();
    let x = g.input(&[2], vec![-1.0, 2.0]).unwrap();
    let y = g.relu(x);
    assert_eq!(g.value(y), &[0.0, 2.0]);
}

#[test]
fn softmax_uniform_and_single() {
    let mut g = Graph::<f64>::new();
    let x = g.input(&[2, 4], vec![3.0; 8]).unwrap();
    let y = g.softmax(x).unwrap();
    assert!(g.value(y).iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let x1 = g.input(&[3, 1], vec![-7.0, 0.0, 1e6]).unwrap();
    let y1 = g.softmax(x1).unwrap();
    assert_eq!(g.value(y1), &[1.0, 1.0, 1.0]);
}

#[test]
fn softmax_is_stable_for_large_logits() {
    let mut g = Graph::<f32>::new();
    let x = g.input(&[1, 3], vec![1000.0, 1000.0, -1000.0]).unwrap();
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y), &[0.5, 0.5, 0.0]);
}

#[test]
fn identity_1x1_conv() {
    let c = 3;
    let mut w = vec![0.0; c * c];
    for i in 0..c {
        w[i * c + i] = 1.0;
    }
    let xv: Vec<f64> = (0..2 * 4 * 4 * c).map(|i| (i as f64 * 0.37).sin()).collect();
    let mut g = Graph::new();
    let x = g.input(&[2, 4, 4, c], xv.clone()).unwrap();
    let wv = g.input(&[1, 1, c, c], w).unwrap();
    let b = g.input(&[c], vec![0.0; c]).unwrap();
    let y = g.conv2d(x, wv, Some(b), 1).unwrap();
    assert_eq!(g.value(y), xv.as_slice());
}

#[test]
fn ones_filter_plateau() {
    let (h, w) = (7, 7);
    let mut xv = vec![0.0; h * w];
    xv[3 * w + 3] = 1.0;
    let mut g = Graph::<f64>::new();
    let x = g.input(&[1, h, w, 1], xv).unwrap();
    let k = g.input(&[3, 3, 1, 1], vec![1.0; 9]).unwrap();
    let y = g.conv2d(x, k, None, 1).unwrap();
    let out = g.value(y);
    for i in 0..h {
        for j in 0..w {
            let want = if i.abs_diff(3) <= 1 && j.abs_diff(3) <= 1 { 1.0 } else { 0.0 };
            assert_eq!(out[i * w + j], want, "({i},{j})");
        }
    }
}

#[test]
fn conv_shape_mismatch() {
    let mut g = Graph::<f64>::new();
    let x = g.input(&[1, 2, 2, 3], vec![0.0; 12]).unwrap();
    let k = g.input(&[3, 3, 2, 1], vec![0.0; 18]).unwrap();
    assert!(matches!(g.conv2d(x, k, None, 1), Err(Error::Shape(_))));
}

#[test]
fn separable_delta_identity() {
    let c = 2;
    let mut dw = vec![0.0; 9 * c];
    for ch in 0..c {
        dw[4 * c + ch] = 1.0;
    }
    let xv: Vec<f64> = (0..3 * 5 * c).map(|i| i as f64 - 7.5).collect();
    let mut g = Graph::new();
    let x = g.input(&[1, 3, 5, c], xv.clone()).unwrap();
    let d = g.input(&[3, 3, c], dw).unwrap();
    let p = g.input(&[c, c], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let b = g.input(&[c], vec![0.0; c]).unwrap();
    let y = g.separable_conv2d(x, d, p, b).unwrap();
    assert_eq!(g.value(y), xv.as_slice());
}

#[test]
fn separable_equals_conv2d_composition() {
    let mut rng = crate::rng::seeded(5);
    let (c, co) = (3, 4);
    let mut rnd = |n: usize| -> Vec<f64> { (0..n).map(|_| crate::rng::standard_normal(&mut rng)).collect() };
    let xv = rnd(2 * 4 * 5 * c);
    let dw = rnd(9 * c);
    let pw = rnd(c * co);
    let bias = rnd(co);
    let mut g = Graph::new();
    let x = g.input(&[2, 4, 5, c], xv).unwrap();
    let d = g.input(&[3, 3, c], dw.clone()).unwrap();
    let p = g.input(&[c, co], pw.clone()).unwrap();
    let b = g.input(&[co], bias).unwrap();
    let y = g.separable_conv2d(x, d, p, b).unwrap();
    // depthwise as a full conv with a diagonal channel block per tap
    let mut full = vec![0.0; 9 * c * c];
    for t in 0..9 {
        for ch in 0..c {
            full[t * c * c + ch * c + ch] = dw[t * c + ch];
        }
    }
    let fk = g.input(&[3, 3, c, c], full).unwrap();
    let pk = g.input(&[1, 1, c, co], pw).unwrap();
    let z1 = g.conv2d(x, fk, None, 1).unwrap();
    let z = g.conv2d(z1, pk, Some(b), 1).unwrap();
    assert!(close(g.value(y), g.value(z), 1e-12));
}

#[test]
fn batchnorm_train_normalizes() {
    let c = 3;
    let xv: Vec<f64> = (0..40 * c).map(|i| ((i * 7919) % 101) as f64 * 0.3 + (i % c) as f64 * 10.0).collect();
    let mut g = Graph::new();
    let x = g.input(&[5, 8, c], xv).unwrap();
    let gam = g.input(&[c], vec![1.0; c]).unwrap();
    let bet = g.input(&[c], vec![0.0; c]).unwrap();
    let (y, stats) = g.batchnorm(x, gam, bet, None).unwrap();
    assert!(stats.is_some());
    let out = g.value(y);
    for ch in 0..c {
        let col: Vec<f64> = out.iter().skip(ch).step_by(c).copied().collect();
        let m = col.iter().sum::<f64>() / col.len() as f64;
        let v = col.iter().map(|z| (z - m).powi(2)).sum::<f64>() / col.len() as f64;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-3);
    }
}

#[test]
fn batchnorm_infer_inverse() {
    let mean = [0.5, -2.0];
    let var = [4.0, 0.25];
    let xv = vec![1.0, 2.0, -3.0, 0.125, 7.0, -1.0];
    let mut g = Graph::new();
    let x = g.input(&[3, 2], xv.clone()).unwrap();
    let gam = g.input(&[2], var.iter().map(|v| (v + BN_EPS).sqrt()).collect()).unwrap();
    let bet = g.input(&[2], mean.to_vec()).unwrap();
    let (y, stats) = g.batchnorm(x, gam, bet, Some((&mean, &var))).unwrap();
    assert!(stats.is_none());
    assert!(close(g.value(y), &xv, 1e-12));
}

#[test]
fn batchnorm_empty_batch_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.input(&[0, 2], vec![]).unwrap();
    let gam = g.input(&[2], vec![1.0; 2]).unwrap();
    let bet = g.input(&[2], vec![0.0; 2]).unwrap();
    assert!(g.batchnorm(x, gam, bet, None).is_err());
}

#[test]
fn bce_reference_values() {
    let mut g = Graph::<f64>::new();
    let z = g.input(&[8], vec![0.0; 8]).unwrap();
    let bits = [0, 1, 1, 0, 1, 0, 0, 1];
    let l = g.bce_from_llr(z, &bits, &[true; 8]).unwrap();
    assert_eq!(g.value(l)[0], 1.0);
    let p = g.input(&[4], vec![20.0; 4]).unwrap();
    let l2 = g.bce_from_llr(p, &[0; 4], &[true; 4]).unwrap();
    let want = (-20.0f64).exp().ln_1p() / std::f64::consts::LN_2;
    assert!((g.value(l2)[0] - want).abs() < 1e-20);
    assert!((g.value(l2)[0] - 2.97e-9).abs() < 0.01e-9);
}

#[test]
fn bce_mask_excludes_entries() {
    let mut g = Graph::<f64>::new();
    let x = g.input_with_grad(&[3], vec![0.0, -50.0, 0.0]).unwrap();
    let l = g.bce_from_llr(x, &[0, 0, 1], &[true, false, true]).unwrap();
    assert_eq!(g.value(l)[0], 1.0);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap()[1], 0.0);
}

#[test]
fn scalar_add_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.input_with_grad(&[1], vec![3.0]).unwrap();
    let y = g.input_with_grad(&[1], vec![4.0]).unwrap();
    let s = g.add(x, y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0]);
    assert_eq!(g.grad(y).unwrap(), &[1.0]);
}

#[test]
fn non_scalar_root_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.input_with_grad(&[2], vec![1.0, 2.0]).unwrap();
    let y = g.relu(x);
    assert!(g.backward(y).is_err());
}

#[test]
fn unused_param_has_zero_gradient() {
    let mut store = ParamStore::<f64>::new();
    let used = store.add("used", &[2], vec![1.0, 2.0], true).unwrap();
    let unused = store.add("unused", &[3], vec![1.0; 3], true).unwrap();
    let mut g = Graph::new();
    let u = g.param(&store, used);
    let _ = g.param(&store, unused);
    let s = g.sum(u);
    g.backward(s).unwrap();
    let grads = g.param_grads();
    assert!(grads.iter().all(|(id, _)| *id != unused));
    let full: Vec<f64> = grads.iter().find(|(id, _)| *id == used).unwrap().1.clone();
    assert_eq!(full, vec![1.0, 1.0]);
}

#[test]
fn shared_param_grads_accumulate() {
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", &[1], vec![2.0], true).unwrap();
    let mut g = Graph::new();
    let a = g.param(&store, p);
    let b = g.param(&store, p);
    let m = g.mul(a, b).unwrap();
    g.backward(m).unwrap();
    assert_eq!(g.param_grads(), vec![(p, vec![4.0])]);
}

#[test]
fn permute_matches_index_arithmetic() {
    let xv: Vec<f64> = (0..24).map(f64::from).collect();
    let mut g = Graph::new();
    let x = g.input(&[2, 3, 4], xv).unwrap();
    let y = g.permute(x, &[2, 0, 1]).unwrap();
    assert_eq!(g.shape(y), &[4, 2, 3]);
    let out = g.value(y);
    for k in 0..4 {
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(out[(k * 2 + i) * 3 + j], (i * 12 + j * 4 + k) as f64);
            }
        }
    }
    assert!(g.permute(x, &[0, 0, 1]).is_err());
}

#[test]
fn forward_is_bit_reproducible() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.input(&[1, 4, 4, 2], (0..32).map(|i| (i as f32 * 0.77).cos()).collect()).unwrap();
        let w = g.input(&[3, 3, 2, 3], (0..54).map(|i| (i as f32 * 0.31).sin()).collect()).unwrap();
        let y = g.conv2d(x, w, None, 1).unwrap();
        g.value(y).to_vec()
    };
    assert_eq!(run(), run());
}
