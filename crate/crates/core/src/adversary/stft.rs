//! Magnitude spectrograms for the reconstruction losses.

use crate::error::{Error, Result};
use crate::nnengine::graph::{hann, stft_complex};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub window: usize,
    pub hop: usize,
}

impl StftConfig {
    pub fn new(window: usize, hop: usize) -> Result<Self> {
        if window < 2 || hop == 0 || hop > window {
            return Err(Error::InvalidConfig(format!("STFT window {window}, hop {hop}")));
        }
        Ok(Self { window, hop })
    }

    /// Resolution of the spectral convergence and log-magnitude losses.
    pub fn loss_default() -> Self {
        Self { window: 1024, hop: 256 }
    }
}

/// `|X|` as a `[bins, frames]` row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub mag: Vec<f32>,
    pub bins: usize,
    pub frames: usize,
    pub window_length: usize,
    pub hop_length: usize,
}

impl Spectrogram {
    /// Wraps raw magnitudes; checks the shape and that entries are non-negative.
    pub fn from_magnitudes(mag: Vec<f32>, bins: usize, frames: usize) -> Result<Self> {
        if mag.len() != bins * frames || mag.iter().any(|&m| !(m >= 0.0)) {
            return Err(Error::shape("spectrogram", format!("{} values for {bins}x{frames}", mag.len())));
        }
        let window_length = 2 * bins.saturating_sub(1);
        Ok(Self {
            mag,
            bins,
            frames,
            window_length,
            hop_length: 0,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.bins, self.frames)
    }
}

/// Hann-windowed STFT magnitude; frames start at multiples of the hop and
/// the signal is not padded.
pub fn stft_magnitude(x: &[f32], cfg: &StftConfig) -> Spectrogram {
    let (re, im, bins, frames) = stft_complex(x, &hann(cfg.window), cfg.hop);
    let mag = re.iter().zip(&im).map(|(a, b)| (a * a + b * b).sqrt()).collect();
    Spectrogram {
        mag,
        bins,
        frames,
        window_length: cfg.window,
        hop_length: cfg.hop,
    }
}
