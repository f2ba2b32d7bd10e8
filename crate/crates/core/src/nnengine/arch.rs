//! Layer descriptions and the parameter/FLOP accounting derived from them.
//!
//! FLOPs follow one convention throughout: a multiply-accumulate is 2 FLOPs,
//! bias adds, normalization arithmetic and activations are 1 FLOP per scalar
//! operation. Rates are output steps per second.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    CausalConv1d,
    Dsconv1d,
    PointwiseConv,
    ChannelNorm,
    Gated,
    Gru,
    Linear,
    Interp,
    /// Affine modulation of a normalized activation by (gamma, beta).
    Tade,
    /// Elementwise sum of two activations (residuals and merges).
    Add,
    /// Elementwise `tanh`.
    Activation,
    /// PQMF filtering; `kernel_size` is the prototype length.
    Fir,
    /// Log-mel front end; `in_channels` is the FFT size, `kernel_size` the
    /// analysis window, `out_channels` the mel count.
    MelFrontEnd,
}

/// Exact ratio of output rate to input rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rational {
    pub num: usize,
    pub den: usize,
}

impl Rational {
    pub const ONE: Rational = Rational { num: 1, den: 1 };

    pub fn new(num: usize, den: usize) -> Self {
        let g = gcd(num, den);
        Self {
            num: num / g,
            den: den / g,
        }
    }

    pub fn recip(self) -> Self {
        Self::new(self.den, self.num)
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a.max(1)
    } else {
        gcd(b, a % b)
    }
}

const ALLOWED_FACTORS: [(usize, usize); 8] = [(1, 1), (2, 1), (5, 2), (4, 1), (10, 1), (20, 1), (40, 1), (80, 1)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub interp_factor: Rational,
    /// Output steps per second.
    pub rate_hz: u64,
    /// Channel norm carries its own scale and shift.
    pub affine: bool,
    /// For layers fed by sample-repeated conditioning: distinct output
    /// columns per 20 ms frame. Only those are evaluated.
    pub distinct_per_frame: Option<usize>,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind, in_channels: usize, out_channels: usize, kernel_size: usize, rate_hz: u64) -> Self {
        Self {
            name: name.into(),
            kind,
            in_channels,
            out_channels,
            kernel_size,
            interp_factor: Rational::ONE,
            rate_hz,
            affine: false,
            distinct_per_frame: None,
        }
    }

    /// Top-level block the layer belongs to (text before the first dot).
    pub fn block(&self) -> &str {
        self.name.split('.').next().unwrap_or(&self.name)
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (ci, co, k) = (self.in_channels, self.out_channels, self.kernel_size);
        let n = |s: &str| format!("{}.{s}", self.name);
        match self.kind {
            LayerKind::CausalConv1d => vec![(n("w"), vec![co, ci, k]), (n("b"), vec![co])],
            LayerKind::Dsconv1d => vec![(n("dw"), vec![ci, k]), (n("pw"), vec![co, ci]), (n("b"), vec![co])],
            LayerKind::PointwiseConv | LayerKind::Linear => vec![(n("w"), vec![co, ci]), (n("b"), vec![co])],
            LayerKind::ChannelNorm if self.affine => vec![(n("scale"), vec![ci]), (n("shift"), vec![ci])],
            LayerKind::Gru => vec![
                (n("w_ih"), vec![3 * co, ci]),
                (n("w_hh"), vec![3 * co, co]),
                (n("b_ih"), vec![3 * co]),
                (n("b_hh"), vec![3 * co]),
            ],
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// FLOPs per output step (per frame for the mel front end).
    pub fn flops_per_step(&self) -> u64 {
        let (ci, co, k) = (self.in_channels as u64, self.out_channels as u64, self.kernel_size as u64);
        match self.kind {
            LayerKind::CausalConv1d => 2 * ci * co * k + co,
            LayerKind::Dsconv1d => 2 * ci * k + 2 * ci * co + co,
            LayerKind::PointwiseConv | LayerKind::Linear => 2 * ci * co + co,
            LayerKind::ChannelNorm => 5 * ci + 2 + if self.affine { 2 * ci } else { 0 },
            LayerKind::Gated => 3 * co,
            LayerKind::Gru => 6 * co * (ci + co) + 17 * co,
            LayerKind::Interp => {
                if self.interp_factor == Rational::ONE {
                    0
                } else {
                    3 * co
                }
            }
            LayerKind::Tade => 2 * co,
            LayerKind::Add | LayerKind::Activation => co,
            LayerKind::Fir => 2 * k,
            LayerKind::MelFrontEnd => {
                let bins = ci / 2 + 1;
                k + 5 * ci * (ci as f64).log2().round() as u64 + 3 * bins + 2 * co * bins + co
            }
        }
    }

    /// Output steps actually evaluated per second.
    pub fn executed_rate_hz(&self) -> u64 {
        match self.distinct_per_frame {
            Some(d) => (d as u64 * 50).min(self.rate_hz),
            None => self.rate_hz,
        }
    }

    pub fn flops_per_second(&self) -> u64 {
        self.flops_per_step() * self.executed_rate_hz()
    }

    /// FLOPs/s if every output column were evaluated.
    pub fn dense_flops_per_second(&self) -> u64 {
        self.flops_per_step() * self.rate_hz
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("layer `{}`: {m}", self.name)));
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("zero channels".into());
        }
        match self.kind {
            LayerKind::CausalConv1d | LayerKind::Dsconv1d if self.kernel_size != 7 => {
                return bad(format!("kernel size {} (signal-path convolutions use 7)", self.kernel_size));
            }
            LayerKind::PointwiseConv | LayerKind::Linear if self.kernel_size != 1 => {
                return bad(format!("pointwise layer with kernel {}", self.kernel_size));
            }
            LayerKind::Interp => {
                let f = self.interp_factor;
                let ok = ALLOWED_FACTORS
                    .iter()
                    .any(|&(n, d)| (f.num, f.den) == (n, d) || (f.num, f.den) == (d, n));
                if !ok {
                    return bad(format!("interpolation factor {}/{}", f.num, f.den));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

pub fn count_params(specs: &[LayerSpec]) -> usize {
    specs.iter().map(LayerSpec::param_count).sum()
}

pub fn count_flops_per_second(specs: &[LayerSpec]) -> u64 {
    specs.iter().map(LayerSpec::flops_per_second).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockCost {
    pub block: String,
    pub params: usize,
    pub flops_per_second: u64,
}

/// Totals plus a per-block breakdown whose entries sum to the totals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub params: usize,
    pub flops_per_second: u64,
    pub gflops: f64,
    /// Same count with sample-repeated conditioning convolved column by column.
    pub dense_equivalent_gflops: f64,
    pub convention: &'static str,
    pub blocks: Vec<BlockCost>,
}

pub const FLOP_CONVENTION: &str = "MAC = 2 FLOPs; bias, normalization and activation = 1 FLOP per scalar op; per 20 ms frame x 50 frames/s; PQMF filtering included";

pub fn complexity(specs: &[LayerSpec]) -> Result<ComplexityReport> {
    for s in specs {
        s.validate()?;
    }
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<String, (usize, u64)> = BTreeMap::new();
    for s in specs {
        let b = s.block().to_string();
        if !acc.contains_key(&b) {
            order.push(b.clone());
        }
        let e = acc.entry(b).or_default();
        e.0 += s.param_count();
        e.1 += s.flops_per_second();
    }
    let blocks: Vec<BlockCost> = order
        .into_iter()
        .map(|b| {
            let (params, flops_per_second) = acc[&b];
            BlockCost {
                block: b,
                params,
                flops_per_second,
            }
        })
        .collect();
    let params = blocks.iter().map(|b| b.params).sum();
    let flops: u64 = blocks.iter().map(|b| b.flops_per_second).sum();
    let dense: u64 = specs.iter().map(LayerSpec::dense_flops_per_second).sum();
    Ok(ComplexityReport {
        params,
        flops_per_second: flops,
        gflops: flops as f64 / 1e9,
        dense_equivalent_gflops: dense as f64 / 1e9,
        convention: FLOP_CONVENTION,
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dsconv_param_count() {
        let s = LayerSpec::new("x", LayerKind::Dsconv1d, 8, 16, 7, 4000);
        assert_eq!(s.param_count(), 8 * 7 + 8 * 16 + 16);
        assert_eq!(s.param_count(), 200);
    }

    #[test]
    fn bad_factor_is_rejected() {
        let mut s = LayerSpec::new("x", LayerKind::Interp, 4, 4, 1, 100);
        s.interp_factor = Rational::new(3, 1);
        assert!(matches!(s.validate(), Err(Error::InvalidConfig(_))));
        s.interp_factor = Rational::new(2, 5);
        assert!(s.validate().is_ok());
    }
}
