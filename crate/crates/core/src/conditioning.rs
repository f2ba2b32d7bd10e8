//! 80-band log-mel conditioning, one vector per 20 ms frame.
//!
//! Frame `i` analyses the 480 samples `[320i - 80, 320i + 400)`: 5 ms of past
//! context, the 20 ms frame itself and 5 ms of look-ahead. The signal is
//! zero-padded before its start and after its end.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audioio::{AudioBuffer, WB_RATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub num_mels: usize,
    pub frame_ms: usize,
    pub context_ms: usize,
    pub lookahead_ms: usize,
    pub sample_rate: u32,
    pub fft_size: usize,
    pub mel_fmin: f64,
    pub mel_fmax: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            num_mels: 80,
            frame_ms: 20,
            context_ms: 5,
            lookahead_ms: 5,
            sample_rate: WB_RATE,
            fft_size: 512,
            mel_fmin: 0.0,
            mel_fmax: 8000.0,
            log_floor: 1e-5,
        }
    }
}

impl MelConfig {
    fn samples(&self, ms: usize) -> usize {
        ms * self.sample_rate as usize / 1000
    }

    pub fn hop(&self) -> usize {
        self.samples(self.frame_ms)
    }

    pub fn context(&self) -> usize {
        self.samples(self.context_ms)
    }

    pub fn lookahead(&self) -> usize {
        self.samples(self.lookahead_ms)
    }

    pub fn window_len(&self) -> usize {
        self.context() + self.hop() + self.lookahead()
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len() > self.fft_size || self.num_mels == 0 || self.mel_fmax <= self.mel_fmin {
            return Err(Error::InvalidConfig(format!(
                "mel window {} vs fft {}, {} mels over {}..{} Hz",
                self.window_len(),
                self.fft_size,
                self.num_mels,
                self.mel_fmin,
                self.mel_fmax
            )));
        }
        Ok(())
    }
}

/// Natural-log mel energies of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MelVector {
    pub values: Vec<f32>,
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Centre frequency of every mel filter, in Hz.
pub fn mel_center_frequencies(cfg: &MelConfig) -> Vec<f64> {
    let edges = mel_edges(cfg);
    edges[1..=cfg.num_mels].to_vec()
}

fn mel_edges(cfg: &MelConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.mel_fmin), hz_to_mel(cfg.mel_fmax));
    (0..cfg.num_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.num_mels + 1) as f64))
        .collect()
}

/// Triangular filters on the FFT bin grid, `[num_mels][bins]`.
pub fn mel_filterbank(cfg: &MelConfig) -> Vec<Vec<f64>> {
    let edges = mel_edges(cfg);
    let bins = cfg.fft_size / 2 + 1;
    let df = cfg.sample_rate as f64 / cfg.fft_size as f64;
    (0..cfg.num_mels)
        .map(|m| {
            let (l, c, h) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * df;
                    if f <= l || f >= h {
                        0.0
                    } else if f <= c {
                        (f - l) / (c - l)
                    } else {
                        (h - f) / (h - c)
                    }
                })
                .collect()
        })
        .collect()
}

/// Reusable mel analyser (FFT plan, window and filterbank).
pub struct MelAnalyzer {
    cfg: MelConfig,
    window: Vec<f64>,
    bank: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelAnalyzer {
    pub fn new(cfg: MelConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.window_len();
        // Periodic Hann.
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let bank = mel_filterbank(&cfg);
        let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
        Ok(Self {
            cfg,
            window,
            bank,
            fft,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    pub fn frame(&self, window: &[f32]) -> Result<MelVector> {
        let n = self.cfg.window_len();
        if window.len() != n {
            return Err(Error::WindowLengthMismatch {
                expected: n,
                actual: window.len(),
            });
        }
        let mut buf = vec![Complex64::new(0.0, 0.0); self.cfg.fft_size];
        for ((b, &x), &w) in buf.iter_mut().zip(window).zip(&self.window) {
            *b = Complex64::new(x as f64 * w, 0.0);
        }
        self.fft.process(&mut buf);
        let mag: Vec<f64> = buf[..self.cfg.fft_size / 2 + 1].iter().map(|c| c.norm()).collect();
        let values = self
            .bank
            .iter()
            .map(|filt| {
                let e: f64 = filt.iter().zip(&mag).map(|(a, b)| a * b).sum();
                e.max(self.cfg.log_floor).ln() as f32
            })
            .collect();
        Ok(MelVector { values })
    }

    /// Window of frame `i` from a signal, zero-padded outside it.
    pub fn frame_window(&self, x: &[f32], i: usize) -> Vec<f32> {
        let start = (i * self.cfg.hop()) as isize - self.cfg.context() as isize;
        (0..self.cfg.window_len() as isize)
            .map(|j| {
                let idx = start + j;
                if idx < 0 || idx as usize >= x.len() {
                    0.0
                } else {
                    x[idx as usize]
                }
            })
            .collect()
    }

    /// One vector per full hop of `x`.
    pub fn stream(&self, x: &[f32]) -> Result<Vec<MelVector>> {
        let frames = x.len() / self.cfg.hop();
        crate::par::try_map(frames, |i| self.frame(&self.frame_window(x, i)))
    }
}

pub fn mel_frame(window: &[f32], cfg: &MelConfig) -> Result<MelVector> {
    MelAnalyzer::new(cfg.clone())?.frame(window)
}

pub fn mel_stream(x: &AudioBuffer, cfg: &MelConfig) -> Result<Vec<MelVector>> {
    x.expect_rate(cfg.sample_rate)?;
    MelAnalyzer::new(cfg.clone())?.stream(&x.samples)
}
