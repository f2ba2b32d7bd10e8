//! Reconstruction, least-squares adversarial and feature-matching losses.
//!
//! Each loss has a plain form on numbers (used for reporting and as a
//! reference) and a graph form that records gradients.

use serde::Serialize;

use super::stft::Spectrogram;
use crate::error::{Error, Result};
use crate::nnengine::{Graph, Tensor, Var};

/// Magnitudes are floored here before taking logs.
pub const MAG_FLOOR: f32 = 1e-7;
/// Weight of the feature-matching term in the generator objective.
pub const FEATURE_WEIGHT: f64 = 10.0;
pub const ENSEMBLE_SIZE: usize = 4;

fn same_shape(op: &'static str, a: &Spectrogram, b: &Spectrogram) -> Result<()> {
    if a.shape() != b.shape() || a.mag.len() != b.mag.len() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `‖|X| - |X̂|‖_F / ‖|X|‖_F`.
pub fn loss_sc(x: &Spectrogram, xh: &Spectrogram) -> Result<f64> {
    same_shape("loss_sc", x, xh)?;
    let den: f64 = x.mag.iter().map(|&a| (a as f64).powi(2)).sum();
    if den == 0.0 {
        return Err(Error::ZeroReference);
    }
    let num: f64 = x.mag.iter().zip(&xh.mag).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    Ok(num.sqrt() / den.sqrt())
}

/// Mean absolute difference of natural-log magnitudes.
pub fn loss_mag(x: &Spectrogram, xh: &Spectrogram) -> Result<f64> {
    same_shape("loss_mag", x, xh)?;
    if x.mag.is_empty() {
        return Err(Error::shape("loss_mag", "empty spectrogram"));
    }
    let log = |v: f32| (v.max(MAG_FLOOR) as f64).ln();
    let s: f64 = x.mag.iter().zip(&xh.mag).map(|(&a, &b)| (log(a) - log(b)).abs()).sum();
    Ok(s / x.mag.len() as f64)
}

fn check_ensemble(n: usize) -> Result<()> {
    if n != ENSEMBLE_SIZE {
        return Err(Error::WrongEnsembleSize {
            expected: ENSEMBLE_SIZE,
            actual: n,
        });
    }
    Ok(())
}

fn mean_sq_dist(map: &[f32], target: f64) -> Result<f64> {
    if map.is_empty() {
        return Err(Error::shape("lsgan", "empty output map"));
    }
    Ok(map.iter().map(|&v| (v as f64 - target).powi(2)).sum::<f64>() / map.len() as f64)
}

/// `Σ_k mean((D_k(G(x)) - 1)^2)`.
pub fn loss_adv_gen(fake: &[Vec<f32>]) -> Result<f64> {
    check_ensemble(fake.len())?;
    fake.iter().map(|m| mean_sq_dist(m, 1.0)).sum()
}

/// `Σ_k [mean((D_k(x) - 1)^2) + mean(D_k(G(x))^2)]`.
pub fn loss_disc(real: &[Vec<f32>], fake: &[Vec<f32>]) -> Result<f64> {
    check_ensemble(real.len())?;
    check_ensemble(fake.len())?;
    let mut s = 0.0;
    for (r, f) in real.iter().zip(fake) {
        s += mean_sq_dist(r, 1.0)? + mean_sq_dist(f, 0.0)?;
    }
    Ok(s)
}

/// Feature maps indexed `[discriminator][layer]`, each flattened.
pub type FeatureSet = Vec<Vec<Vec<f32>>>;

/// Mean absolute difference per layer, averaged over each discriminator's
/// layers and summed over discriminators. A discriminator without layers
/// contributes nothing.
pub fn loss_feat(real: &FeatureSet, fake: &FeatureSet) -> Result<f64> {
    if real.len() != fake.len() {
        return Err(Error::shape("loss_feat", format!("{} vs {} discriminators", real.len(), fake.len())));
    }
    let mut total = 0.0;
    for (rd, fd) in real.iter().zip(fake) {
        if rd.len() != fd.len() {
            return Err(Error::shape("loss_feat", format!("{} vs {} layers", rd.len(), fd.len())));
        }
        if rd.is_empty() {
            continue;
        }
        let mut acc = 0.0;
        for (r, f) in rd.iter().zip(fd) {
            if r.len() != f.len() || r.is_empty() {
                return Err(Error::shape("loss_feat", format!("maps of {} and {} values", r.len(), f.len())));
            }
            acc += r.iter().zip(f).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum::<f64>() / r.len() as f64;
        }
        total += acc / rd.len() as f64;
    }
    Ok(total)
}

/// Loss values of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossReport {
    pub sc: f64,
    pub mag: f64,
    pub adv: f64,
    pub feat: f64,
    pub disc: f64,
    /// Generator objective `sc + mag + adv + 10 feat`.
    pub weighted_total: f64,
}

impl LossReport {
    pub fn new(sc: f64, mag: f64, adv: f64, feat: f64, disc: f64) -> Self {
        Self {
            sc,
            mag,
            adv,
            feat,
            disc,
            weighted_total: sc + mag + adv + FEATURE_WEIGHT * feat,
        }
    }

    pub fn reconstruction(&self) -> f64 {
        self.sc + self.mag
    }
}

fn sum_vars<'g>(g: &'g Graph, parts: Vec<Var<'g>>) -> Result<Var<'g>> {
    let mut it = parts.into_iter();
    match it.next() {
        None => Ok(g.constant(Tensor::scalar(0.0))),
        Some(first) => it.try_fold(first, |a, b| a.add(b)),
    }
}

/// Graph form of [`loss_sc`] with a constant reference.
pub fn sc_graph<'g>(reference: &Spectrogram, gen: Var<'g>) -> Result<Var<'g>> {
    let den: f64 = reference.mag.iter().map(|&a| (a as f64).powi(2)).sum();
    if den == 0.0 {
        return Err(Error::ZeroReference);
    }
    let r = gen.graph().constant(Tensor::matrix(reference.bins, reference.frames, reference.mag.clone())?);
    // The tiny offset keeps the square root differentiable at a perfect fit.
    Ok(gen.sub(r)?.square().sum().add_scalar(1e-12).sqrt().scale((1.0 / den.sqrt()) as f32))
}

/// Graph form of [`loss_mag`] with a constant reference.
pub fn mag_graph<'g>(reference: &Spectrogram, gen: Var<'g>) -> Result<Var<'g>> {
    let log_ref = reference.mag.iter().map(|&a| a.max(MAG_FLOOR).ln()).collect();
    let r = gen.graph().constant(Tensor::matrix(reference.bins, reference.frames, log_ref)?);
    Ok(gen.log_clamped(MAG_FLOOR).sub(r)?.abs().mean())
}

pub fn adv_gen_graph<'g>(g: &'g Graph, fake: &[Var<'g>]) -> Result<Var<'g>> {
    check_ensemble(fake.len())?;
    sum_vars(g, fake.iter().map(|o| o.add_scalar(-1.0).square().mean()).collect())
}

pub fn disc_graph<'g>(g: &'g Graph, real: &[Var<'g>], fake: &[Var<'g>]) -> Result<Var<'g>> {
    check_ensemble(real.len())?;
    check_ensemble(fake.len())?;
    let mut parts = Vec::with_capacity(2 * real.len());
    for (r, f) in real.iter().zip(fake) {
        parts.push(r.add_scalar(-1.0).square().mean());
        parts.push(f.square().mean());
    }
    sum_vars(g, parts)
}

pub fn feat_graph<'g>(g: &'g Graph, real: &[Vec<Var<'g>>], fake: &[Vec<Var<'g>>]) -> Result<Var<'g>> {
    if real.len() != fake.len() {
        return Err(Error::shape("loss_feat", "discriminator counts differ"));
    }
    let mut parts = Vec::new();
    for (rd, fd) in real.iter().zip(fake) {
        if rd.len() != fd.len() {
            return Err(Error::shape("loss_feat", "layer counts differ"));
        }
        if rd.is_empty() {
            continue;
        }
        let per: Vec<Var<'g>> = rd.iter().zip(fd).map(|(r, f)| Ok(f.sub(*r)?.abs().mean())).collect::<Result<_>>()?;
        parts.push(sum_vars(g, per)?.scale(1.0 / rd.len() as f32));
    }
    sum_vars(g, parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(v: Vec<f32>) -> Spectrogram {
        let n = v.len();
        Spectrogram::from_magnitudes(v, 1, n).unwrap()
    }

    #[test]
    fn trivial_points() {
        let a = spec(vec![1.0, 2.0, 3.0]);
        assert_eq!(loss_sc(&a, &a).unwrap(), 0.0);
        assert_eq!(loss_mag(&a, &a).unwrap(), 0.0);
        assert_eq!(loss_sc(&spec(vec![1.0]), &spec(vec![0.0])).unwrap(), 1.0);
        assert!((loss_mag(&spec(vec![std::f32::consts::E]), &spec(vec![1.0])).unwrap() - 1.0).abs() < 1e-7);
        assert!(matches!(loss_sc(&spec(vec![0.0]), &spec(vec![1.0])), Err(Error::ZeroReference)));
        assert!(matches!(loss_sc(&a, &spec(vec![1.0])), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn lsgan_points() {
        let ones = vec![vec![1.0f32; 3]; 4];
        let zeros = vec![vec![0.0f32; 3]; 4];
        assert_eq!(loss_adv_gen(&ones).unwrap(), 0.0);
        assert_eq!(loss_adv_gen(&zeros).unwrap(), 4.0);
        assert_eq!(loss_disc(&ones, &zeros).unwrap(), 0.0);
        assert_eq!(loss_disc(&zeros, &ones).unwrap(), 8.0);
        assert!(matches!(loss_adv_gen(&ones[..3]), Err(Error::WrongEnsembleSize { expected: 4, actual: 3 })));
    }

    #[test]
    fn feature_points() {
        let real: FeatureSet = vec![vec![vec![1.0]], vec![], vec![], vec![]];
        let fake: FeatureSet = vec![vec![vec![0.0]], vec![], vec![], vec![]];
        assert_eq!(loss_feat(&real, &fake).unwrap(), 1.0);
        assert_eq!(loss_feat(&real, &real).unwrap(), 0.0);
    }

    #[test]
    fn report_weighting() {
        let r = LossReport::new(1.0, 2.0, 3.0, 0.5, 7.0);
        assert_eq!(r.weighted_total, 11.0);
    }
}
