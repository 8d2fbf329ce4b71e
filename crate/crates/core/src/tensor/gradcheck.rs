//! Central finite-difference checks of the reverse-mode gradients.

use rand::Rng;

use super::{Graph, Mode, ParamId, Var};
use crate::error::Result;
use crate::grid::GridDims;
use crate::neuraldemap::{CvtConfig, CvtDemapper, DemapInput, Demapper};
use crate::rng::{seeded, standard_normal, SimRng};

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Gradient norms below this are compared absolutely: central differences
/// of an O(1) loss carry roughly 1e-11 of roundoff per entry, which would
/// otherwise dominate parameters whose gradient is structurally zero
/// (biases cancelled by a following batch norm, uniform attention-logit shifts).
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    /// Worst over checked tensors of `|g - g_fd| / max(|g|, |g_fd|, GRAD_FLOOR)`.
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

/// A leaf tensor of a gradient check.
#[derive(Debug, Clone)]
pub struct Leaf {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    /// Whether its gradient is checked; `false` leaves are constants.
    pub check: bool,
}

impl Leaf {
    pub fn random(shape: &[usize], rng: &mut SimRng) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), value: (0..n).map(|_| standard_normal(rng)).collect(), check: true }
    }

    pub fn constant(shape: &[usize], value: Vec<f64>) -> Self {
        Self { shape: shape.to_vec(), value, check: false }
    }
}

pub(crate) fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / na.max(nb).max(GRAD_FLOOR)
}

/// Compare analytic and central-difference gradients of `f` over `leaves`.
///
/// `f` builds a scalar from the bound leaves; it must be a pure function
/// of their values.
pub fn check<F>(name: &str, leaves: &[Leaf], eps: f64, tol: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Vec<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = leaves.iter().zip(vals).map(|(l, v)| g.input(&l.shape, v.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok(g.value(out)[0])
    };
    let mut g = Graph::new();
    let vars = leaves
        .iter()
        .map(
            |l| if l.check { g.input_with_grad(&l.shape, l.value.clone()) } else { g.input(&l.shape, l.value.clone()) },
        )
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let mut vals: Vec<Vec<f64>> = leaves.iter().map(|l| l.value.clone()).collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (li, leaf) in leaves.iter().enumerate() {
        if !leaf.check {
            continue;
        }
        let analytic = g.grad(vars[li]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; leaf.value.len()]);
        let mut numeric = vec![0.0; leaf.value.len()];
        for i in 0..leaf.value.len() {
            let orig = vals[li][i];
            vals[li][i] = orig + eps;
            let up = eval(&vals)?;
            vals[li][i] = orig - eps;
            let dn = eval(&vals)?;
            vals[li][i] = orig;
            numeric[i] = (up - dn) / (2.0 * eps);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
        checked += 1;
    }
    Ok(GradCheckReport { name: name.to_string(), max_rel_err: worst, tolerance: tol, checked })
}

/// Contract an arbitrary tensor to a scalar with fixed random weights so
/// every output element contributes.
pub fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = seeded(seed);
    let n = g.value(x).len();
    let w = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let shape = g.shape(x).to_vec();
    let c = g.input(&shape, w)?;
    let p = g.mul(x, c)?;
    Ok(g.sum(p))
}

/// Finite-difference check of every differentiable op on random inputs.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = seeded(seed);
    let r = &mut rng;
    let (eps, tol) = (FD_EPS, FD_TOL);
    let mut out = Vec::new();

    out.push(check("add", &[Leaf::random(&[3, 4], r), Leaf::random(&[3, 4], r)], eps, tol, |g, v| {
        let y = g.add(v[0], v[1])?;
        project(g, y, 1)
    })?);
    out.push(check("mul", &[Leaf::random(&[3, 4], r), Leaf::random(&[3, 4], r)], eps, tol, |g, v| {
        let y = g.mul(v[0], v[1])?;
        project(g, y, 2)
    })?);
    out.push(check("scale", &[Leaf::random(&[5], r)], eps, tol, |g, v| {
        let y = g.scale(v[0], -1.7);
        project(g, y, 3)
    })?);
    out.push(check("relu", &[Leaf::random(&[4, 5], r)], eps, tol, |g, v| {
        let y = g.relu(v[0]);
        project(g, y, 4)
    })?);
    out.push(check("reshape", &[Leaf::random(&[2, 6], r)], eps, tol, |g, v| {
        let y = g.reshape(v[0], &[3, 4])?;
        project(g, y, 5)
    })?);
    out.push(check("permute", &[Leaf::random(&[2, 3, 4, 2], r)], eps, tol, |g, v| {
        let y = g.permute(v[0], &[2, 0, 3, 1])?;
        project(g, y, 6)
    })?);
    out.push(check("concat", &[Leaf::random(&[2, 3, 2], r), Leaf::random(&[2, 3, 1], r)], eps, tol, |g, v| {
        let y = g.concat_last(&[v[0], v[1]])?;
        project(g, y, 7)
    })?);
    out.push(check(
        "dense",
        &[Leaf::random(&[2, 3, 4], r), Leaf::random(&[4, 5], r), Leaf::random(&[5], r)],
        eps,
        tol,
        |g, v| {
            let y = g.dense(v[0], v[1], Some(v[2]))?;
            project(g, y, 8)
        },
    )?);
    for dil in [1, 2] {
        out.push(check(
            &format!("conv2d_3x3_dil{dil}"),
            &[Leaf::random(&[2, 4, 4, 3], r), Leaf::random(&[3, 3, 3, 2], r), Leaf::random(&[2], r)],
            eps,
            tol,
            move |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), dil)?;
                project(g, y, 9)
            },
        )?);
    }
    out.push(check(
        "conv2d_1x1",
        &[Leaf::random(&[1, 3, 2, 3], r), Leaf::random(&[1, 1, 3, 4], r)],
        eps,
        tol,
        |g, v| {
            let y = g.conv2d(v[0], v[1], None, 1)?;
            project(g, y, 10)
        },
    )?);
    out.push(check("depthwise", &[Leaf::random(&[2, 4, 3, 3], r), Leaf::random(&[3, 3, 3], r)], eps, tol, |g, v| {
        let y = g.depthwise_conv2d(v[0], v[1], 1)?;
        project(g, y, 11)
    })?);
    out.push(check(
        "separable",
        &[Leaf::random(&[1, 4, 4, 3], r), Leaf::random(&[3, 3, 3], r), Leaf::random(&[3, 2], r), Leaf::random(&[2], r)],
        eps,
        tol,
        |g, v| {
            let y = g.separable_conv2d(v[0], v[1], v[2], v[3])?;
            project(g, y, 12)
        },
    )?);
    out.push(check(
        "batchnorm_train",
        &[Leaf::random(&[2, 3, 2, 4], r), Leaf::random(&[4], r), Leaf::random(&[4], r)],
        eps,
        tol,
        |g, v| {
            let (y, _) = g.batchnorm(v[0], v[1], v[2], None)?;
            project(g, y, 13)
        },
    )?);
    let mean: Vec<f64> = (0..4).map(|_| standard_normal(r)).collect();
    let var: Vec<f64> = (0..4).map(|_| r.random_range(0.5..2.0)).collect();
    out.push(check(
        "batchnorm_infer",
        &[Leaf::random(&[3, 4], r), Leaf::random(&[4], r), Leaf::random(&[4], r)],
        eps,
        tol,
        move |g, v| {
            let (y, _) = g.batchnorm(v[0], v[1], v[2], Some((&mean, &var)))?;
            project(g, y, 14)
        },
    )?);
    out.push(check("softmax", &[Leaf::random(&[3, 5], r)], eps, tol, |g, v| {
        let y = g.softmax(v[0])?;
        project(g, y, 15)
    })?);
    out.push(check("batch_matmul", &[Leaf::random(&[2, 3, 4], r), Leaf::random(&[2, 4, 5], r)], eps, tol, |g, v| {
        let y = g.batch_matmul(v[0], v[1], false)?;
        project(g, y, 16)
    })?);
    out.push(check(
        "batch_matmul_trans_b",
        &[Leaf::random(&[2, 3, 4], r), Leaf::random(&[2, 5, 4], r)],
        eps,
        tol,
        |g, v| {
            let y = g.batch_matmul(v[0], v[1], true)?;
            project(g, y, 17)
        },
    )?);
    let bits: Vec<u8> = (0..12).map(|_| r.random_range(0..2u8)).collect();
    let mask: Vec<bool> = (0..12).map(|i| i % 5 != 0).collect();
    out.push(check("bce_from_llr", &[Leaf::random(&[3, 4], r)], eps, tol, move |g, v| {
        g.bce_from_llr(v[0], &bits, &mask)
    })?);
    Ok(out)
}

/// Check every trainable parameter of a model against central differences
/// of the training-mode BCE loss.
pub fn check_model<M: Demapper<f64>>(
    name: &str,
    model: &mut M,
    input: &DemapInput<f64>,
    bits: &[u8],
    mask: &[bool],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let loss = |m: &M| -> Result<(Graph<f64>, Var)> {
        let mut g = Graph::new();
        let f = m.forward(&mut g, input, Mode::Train)?;
        let l = g.bce_from_llr(f.llr, bits, mask)?;
        Ok((g, l))
    };
    let (mut g, l) = loss(model)?;
    g.backward(l)?;
    let grads = g.param_grads();
    let ids: Vec<ParamId> = model.params().iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut worst = 0.0f64;
    for &id in &ids {
        let n = model.params().get(id).value.len();
        let analytic = grads.iter().find(|(pid, _)| *pid == id).map(|(_, v)| v.clone()).unwrap_or_else(|| vec![0.0; n]);
        let mut numeric = vec![0.0; n];
        for i in 0..n {
            let orig = model.params().get(id).value[i];
            model.params_mut().get_mut(id).value[i] = orig + eps;
            let (gu, lu) = loss(model)?;
            model.params_mut().get_mut(id).value[i] = orig - eps;
            let (gd, ld) = loss(model)?;
            model.params_mut().get_mut(id).value[i] = orig;
            numeric[i] = (gu.value(lu)[0] - gd.value(ld)[0]) / (2.0 * eps);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    Ok(GradCheckReport { name: name.to_string(), max_rel_err: worst, tolerance: tol, checked: ids.len() })
}

/// Full CvT model on `B = 1, N_u = 2, N_f = 4, N_t = 4, d_m = 8`.
pub fn tiny_cvt_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = seeded(seed);
    let cfg = CvtConfig::new(8, 2, 3, 2)?;
    let mut model = CvtDemapper::<f64>::new(cfg, seed)?;
    // move batch-norm scales off their initial values so every path is exercised
    let ids: Vec<ParamId> = model.params().ids().collect();
    for id in ids {
        let p = model.params_mut().get_mut(id);
        if p.trainable && (p.name.ends_with(".bias") || p.name.ends_with(".b") || p.name.ends_with(".beta")) {
            p.value.iter_mut().for_each(|v| *v = 0.1 * standard_normal(&mut rng));
        }
    }
    let dims = GridDims::new(4, 4)?;
    let n = 2 * dims.num_res();
    let xhat: Vec<f64> = (0..2 * n).map(|_| standard_normal(&mut rng)).collect();
    let r_x: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let input = DemapInput::new(1, 2, dims, xhat, r_x)?;
    let bits: Vec<u8> = (0..2 * n).map(|_| rng.random_range(0..2u8)).collect();
    let mask: Vec<bool> = (0..2 * n).map(|_| rng.random_bool(0.8)).collect();
    check_model("cvt_tiny_model", &mut model, &input, &bits, &mask, FD_EPS, FD_TOL)
}

/// Every op plus the tiny full model.
pub fn full_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut out = op_suite(seed)?;
    out.push(tiny_cvt_check(seed)?);
    Ok(out)
}
