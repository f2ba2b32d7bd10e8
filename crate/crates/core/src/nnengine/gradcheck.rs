//! Central finite-difference checks of the analytic gradients.
//!
//! Each check projects the op output onto a fixed random direction `w`, so
//! the analytic side is one backward pass seeded with `w` and the numeric
//! side is `(<w, f(x + e)> - <w, f(x - e)>) / 2e` per input element, with the
//! projection accumulated in f64. The reported error is
//! `|g_num - g_ana| / max(|g_num|, |g_ana|)` over all inputs jointly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::graph::{concat_cols, concat_rows, Graph, Var};
use super::layers::gru_cell;
use super::tensor::Tensor;
use crate::error::Result;
use crate::pqmf::PrototypeFilter;

pub const OP_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_EPS: f32 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn project(out: &Tensor, w: &[f32]) -> f64 {
    out.data.iter().zip(w).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Checks `f` at `inputs` against central differences.
pub fn check<F>(name: &str, inputs: &[Tensor], eps: f32, tolerance: f64, seed: u64, f: F) -> Result<GradCheck>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&g, &vars)?;
    let w: Vec<f32> = (0..out.numel()).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let grads = g.backward_from(out, w.clone())?;
    let analytic: Vec<Vec<f32>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let g = Graph::inference();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| g.constant(t.clone())).collect();
        Ok(project(&f(&g, &vars)?.value(), &w))
    };
    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    let mut xs = inputs.to_vec();
    for (i, an) in analytic.iter().enumerate() {
        for j in 0..xs[i].numel() {
            let x0 = inputs[i].data[j];
            let (xp, xm) = (x0 + eps, x0 - eps);
            xs[i].data[j] = xp;
            let fp = eval(&xs)?;
            xs[i].data[j] = xm;
            let fm = eval(&xs)?;
            xs[i].data[j] = x0;
            let num = (fp - fm) / (xp as f64 - xm as f64);
            let a = an[j] as f64;
            diff += (num - a) * (num - a);
            na += a * a;
            nn += num * num;
        }
    }
    let denom = na.sqrt().max(nn.sqrt()).max(1e-12);
    let rel_error = diff.sqrt() / denom;
    Ok(GradCheck {
        name: name.to_string(),
        rel_error,
        tolerance,
        passed: rel_error < tolerance,
    })
}

/// Directional variant of [`check`] for scalar functions of many inputs.
///
/// Each input tensor in turn is moved along `directions` random unit vectors
/// `d` confined to that tensor, and the central difference
/// `(f(x + h d) - f(x - h d)) / 2h` is compared with `<grad, d>`. The step
/// is sized so that the loss moves by about `loss_change`, capped at
/// `max_step`, which keeps steep directions inside the region where the loss
/// is close to quadratic. The error is the norm of the differences over the
/// norm of the larger side, taken over all directions of all inputs.
#[allow(clippy::too_many_arguments)]
pub fn check_directional<F>(
    name: &str,
    inputs: &[Tensor],
    max_step: f32,
    loss_change: f64,
    tolerance: f64,
    seed: u64,
    directions: usize,
    f: F,
) -> Result<GradCheck>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&g, &vars)?;
    if out.numel() != 1 {
        return Err(crate::error::Error::NotScalarLoss(out.shape()));
    }
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<f32>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let g = Graph::inference();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &vars)?.value().data[0] as f64)
    };
    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    let mut xs = inputs.to_vec();
    for (i, an) in analytic.iter().enumerate() {
        for _ in 0..directions {
            let mut d: Vec<f64> = (0..an.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            d.iter_mut().for_each(|v| *v /= norm);
            let slope: f64 = an.iter().zip(&d).map(|(&g, &x)| g as f64 * x).sum();
            let h = (loss_change / slope.abs().max(1e-300)).min(max_step as f64);
            let shift = |step: f64| -> Vec<f32> { inputs[i].data.iter().zip(&d).map(|(&x, dx)| x + (step * dx) as f32).collect() };
            let (plus, minus) = (shift(h), shift(-h));
            xs[i].data.clone_from(&plus);
            let fp = eval(&xs)?;
            xs[i].data.clone_from(&minus);
            let fm = eval(&xs)?;
            xs[i].data.clone_from(&inputs[i].data);
            let num = (fp - fm) / (2.0 * h);
            // Small steps round in f32, so the analytic side uses the step
            // that was actually taken.
            let a = an.iter().zip(plus.iter().zip(&minus)).map(|(&g, (&p, &m))| g as f64 * (p as f64 - m as f64)).sum::<f64>() / (2.0 * h);
            diff += (num - a) * (num - a);
            na += a * a;
            nn += num * num;
        }
    }
    let rel_error = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-12);
    Ok(GradCheck {
        name: name.to_string(),
        rel_error,
        tolerance,
        passed: rel_error < tolerance,
    })
}

/// Random tensor with entries in `[lo, hi)`, optionally kept `gap` away from 0.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32, gap: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.gen_range(lo..hi);
            if v.abs() >= gap {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Runs the finite-difference check over every differentiable op.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| random_tensor(&mut rng, shape, -1.0, 1.0, 0.0);
    let e = DEFAULT_EPS;
    let tol = OP_TOLERANCE;
    let mut out = Vec::new();
    let s = seed.wrapping_add(1);

    let (a, b) = (r(&[3, 5]), r(&[3, 5]));
    out.push(check("add", &[a.clone(), b.clone()], e, tol, s, |_, v| v[0].add(v[1]))?);
    out.push(check("sub", &[a.clone(), b.clone()], e, tol, s, |_, v| v[0].sub(v[1]))?);
    out.push(check("mul", &[a.clone(), b.clone()], e, tol, s, |_, v| v[0].mul(v[1]))?);
    out.push(check("scale", &[a.clone()], e, tol, s, |_, v| Ok(v[0].scale(-1.7)))?);
    out.push(check("add_scalar", &[a.clone()], e, tol, s, |_, v| Ok(v[0].add_scalar(0.3)))?);
    out.push(check("one_minus", &[a.clone()], e, tol, s, |_, v| Ok(v[0].one_minus()))?);
    out.push(check("sum", &[a.clone()], e, tol, s, |_, v| Ok(v[0].sum()))?);
    out.push(check("mean", &[a.clone()], e, tol, s, |_, v| Ok(v[0].mean()))?);
    out.push(check("square", &[a.clone()], e, tol, s, |_, v| Ok(v[0].square()))?);
    out.push(check("tanh", &[a.clone()], e, tol, s, |_, v| Ok(v[0].tanh()))?);
    out.push(check("sigmoid", &[a.clone()], e, tol, s, |_, v| Ok(v[0].sigmoid()))?);
    out.push(check("gated", &[a.clone(), b.clone()], e, tol, s, |_, v| v[0].gated(v[1]))?);

    let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let away = random_tensor(&mut rng2, &[3, 5], -1.0, 1.0, 0.05);
    let pos = random_tensor(&mut rng2, &[3, 5], 0.1, 2.0, 0.0);
    out.push(check("abs", &[away.clone()], e, tol, s, |_, v| Ok(v[0].abs()))?);
    out.push(check("leaky_relu", &[away], e, tol, s, |_, v| Ok(v[0].leaky_relu(0.2)))?);
    out.push(check("sqrt", &[pos.clone()], e, tol, s, |_, v| Ok(v[0].sqrt()))?);
    out.push(check("log_clamped", &[pos], e, tol, s, |_, v| Ok(v[0].log_clamped(1e-7)))?);

    let x = r(&[4, 6]);
    out.push(check("rows_cols", &[x.clone()], e, tol, s, |_, v| v[0].rows(1, 2)?.cols(2, 3))?);
    out.push(check("concat", &[x.clone(), r(&[2, 6])], e, tol, s, |_, v| {
        let c = concat_rows(&[v[0], v[1]])?;
        concat_cols(&[c, c.cols(0, 2)?])
    })?);
    let hist: Vec<f32> = (0..4 * 6).map(|i| (i as f32 * 0.37).sin()).collect();
    let hist2 = hist.clone();
    out.push(check("depthwise", &[x.clone(), r(&[4, 7])], e, tol, s, move |_, v| v[0].depthwise(v[1], Some(&hist)))?);
    out.push(check("pointwise", &[x.clone(), r(&[3, 4]), r(&[3])], e, tol, s, |_, v| v[0].pointwise(v[1], v[2]))?);
    out.push(check("conv1d", &[x.clone(), r(&[2, 4, 7]), r(&[2])], e, tol, s, move |_, v| v[0].conv1d(v[1], v[2], Some(&hist2)))?);
    out.push(check("channel_norm", &[x.clone()], e, tol, s, |_, v| v[0].channel_normalize())?);
    out.push(check("channel_affine", &[x.clone(), r(&[4]), r(&[4])], e, tol, s, |_, v| v[0].channel_affine(v[1], v[2]))?);
    out.push(check("interp_down", &[r(&[3, 10])], e, tol, s, |_, v| v[0].interp_linear(2, 5))?);
    out.push(check("interp_up", &[r(&[3, 4])], e, tol, s, |_, v| v[0].interp_linear(2, 1))?);
    out.push(check("interp_causal", &[r(&[3, 4])], e, tol, s, |_, v| v[0].interp_causal(5, 2, Some(&[0.1, -0.2, 0.3])))?);
    out.push(check("nearest_up", &[r(&[3, 4])], e, tol, s, |_, v| v[0].nearest_up(3))?);
    out.push(check(
        "gru_step",
        &[r(&[3, 1]), r(&[4, 1]), r(&[12, 3]), r(&[12, 4]), r(&[12]), r(&[12])],
        e,
        tol,
        s,
        |_, v| gru_cell(v[0], v[1], v[2], v[3], v[4], v[5]),
    )?);
    out.push(check("conv2d", &[r(&[2, 5, 9]), r(&[3, 2, 3, 5]), r(&[3])], e, tol, s, |_, v| v[0].conv2d(v[1], v[2], (1, 2), (1, 2)))?);
    let proto = PrototypeFilter::default_for(4)?.clone();
    out.push(check("pqmf_synthesis", &[r(&[4, 24])], e, tol, s, move |_, v| v[0].pqmf_synthesis(&proto))?);
    out.push(check("stft", &[r(&[80])], e, tol, s, |_, v| v[0].stft(32, 8))?);
    out.push(check("stft_magnitude", &[r(&[80])], e, tol, s, |_, v| v[0].stft(32, 8)?.complex_magnitude())?);
    Ok(out)
}

/// Compares the straight-through quantizer gradient with the plain `tanh`
/// gradient at the same points; returns the maximum absolute difference.
pub fn straight_through_matches_tanh(z: &Tensor) -> Result<f32> {
    let g = Graph::new();
    let a = g.input(z.clone());
    let (q, _) = a.quantize_st();
    let ga = g.backward(q.sum())?.get_or_zeros(a);
    let g2 = Graph::new();
    let b = g2.input(z.clone());
    let gb = g2.backward(b.tanh().sum())?.get_or_zeros(b);
    Ok(ga.iter().zip(&gb).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for c in op_suite(7).unwrap() {
            assert!(c.passed, "{}: {}", c.name, c.rel_error);
        }
    }

    #[test]
    fn straight_through_equals_tanh_path() {
        let z = Tensor::new(vec![5], vec![-2.0, -0.3, 0.0, 0.4, 3.0]).unwrap();
        assert_eq!(straight_through_matches_tanh(&z).unwrap(), 0.0);
    }
}
