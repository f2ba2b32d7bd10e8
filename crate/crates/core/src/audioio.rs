//! Mono WAV I/O, delay alignment and waveform metrics.

use std::io::{Cursor, Read, Seek};
use std::path::Path;

use serde::Serialize;

use crate::adversary::stft::{stft_magnitude, StftConfig};
use crate::adversary::losses::{loss_mag, loss_sc};
use crate::error::{Error, Result};
use crate::pqmf::{self, PrototypeFilter};

pub const WB_RATE: u32 = 16_000;
pub const SWB_RATE: u32 = 32_000;
/// SNR reported for bit-exact matches.
pub const SNR_CAP_DB: f64 = 120.0;

/// A mono sample buffer at 16 kHz or 32 kHz.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate != WB_RATE && sample_rate != SWB_RATE {
            return Err(Error::UnsupportedFormat(format!(
                "sample rate {sample_rate} Hz (only 16000 and 32000 are supported)"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn expect_rate(&self, rate: u32) -> Result<()> {
        if self.sample_rate != rate {
            return Err(Error::RateMismatch {
                expected: rate,
                actual: self.sample_rate,
            });
        }
        Ok(())
    }
}

fn map_hound(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::CorruptHeader("unexpected end of file".into())
        }
        // hound reports short reads as `Other`.
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::Other => Error::CorruptHeader(io.to_string()),
        hound::Error::IoError(io) => Error::Io(io),
        hound::Error::FormatError(m) => Error::CorruptHeader(m.into()),
        hound::Error::TooWide => Error::UnsupportedFormat("sample width".into()),
        hound::Error::UnfinishedSample => Error::CorruptHeader("truncated sample data".into()),
        hound::Error::Unsupported => Error::UnsupportedFormat("WAV subformat".into()),
        hound::Error::InvalidSampleFormat => Error::UnsupportedFormat("sample format".into()),
    }
}

/// Converts a 16-bit PCM sample to float by symmetric scaling with 32768.
pub fn pcm16_to_f32(s: i16) -> f32 {
    s as f32 / 32768.0
}

/// Converts a float sample to 16-bit PCM, saturating outside [-1, 1).
pub fn f32_to_pcm16(x: f32) -> i16 {
    let v = (x * 32768.0).round();
    v.clamp(i16::MIN as f32, i16::MAX as f32) as i16
}

/// Decodes a WAV byte stream. Samples are pulled incrementally, so a header
/// that overstates the data length cannot trigger a large allocation.
pub fn decode_wav<R: Read + Seek>(reader: R) -> Result<AudioBuffer> {
    let mut wav = hound::WavReader::new(reader).map_err(map_hound)?;
    let spec = wav.spec();
    if spec.channels != 1 {
        return Err(Error::NotMono(spec.channels));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => wav
            .samples::<f32>()
            .map(|s| s.map_err(map_hound))
            .collect::<Result<_>>()?,
        (hound::SampleFormat::Int, 16) => wav
            .samples::<i16>()
            .map(|s| s.map(pcm16_to_f32).map_err(map_hound))
            .collect::<Result<_>>()?,
        (fmt, bits) => {
            return Err(Error::UnsupportedFormat(format!("{fmt:?} {bits}-bit")));
        }
    };
    AudioBuffer::new(samples, spec.sample_rate)
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let bytes = std::fs::read(path)?;
    decode_wav(Cursor::new(bytes))
}

/// Output sample encoding for [`write_wav_as`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Float32,
    Pcm16,
}

pub fn encode_wav(buf: &AudioBuffer, encoding: WavEncoding) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buf.sample_rate,
        bits_per_sample: match encoding {
            WavEncoding::Float32 => 32,
            WavEncoding::Pcm16 => 16,
        },
        sample_format: match encoding {
            WavEncoding::Float32 => hound::SampleFormat::Float,
            WavEncoding::Pcm16 => hound::SampleFormat::Int,
        },
    };
    let mut out = Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut out, spec).map_err(map_hound)?;
        for &s in &buf.samples {
            match encoding {
                WavEncoding::Float32 => w.write_sample(s),
                WavEncoding::Pcm16 => w.write_sample(f32_to_pcm16(s)),
            }
            .map_err(map_hound)?;
        }
        w.finalize().map_err(map_hound)?;
    }
    Ok(out.into_inner())
}

/// Writes 32-bit float WAV.
pub fn write_wav(path: impl AsRef<Path>, buf: &AudioBuffer) -> Result<()> {
    write_wav_as(path, buf, WavEncoding::Float32)
}

pub fn write_wav_as(path: impl AsRef<Path>, buf: &AudioBuffer, encoding: WavEncoding) -> Result<()> {
    std::fs::write(path, encode_wav(buf, encoding)?)?;
    Ok(())
}

/// Comparison of a test signal against a reference after lag alignment.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub snr_db: f64,
    /// SNR per PQMF band (4 bands at 16 kHz, 8 at 32 kHz).
    pub band_snr_db: Vec<f64>,
    /// Spectral convergence; `None` when the overlap is shorter than one STFT window.
    pub sc: Option<f64>,
    pub mag: Option<f64>,
    pub delay_samples: usize,
}

pub fn snr_db(reference: &[f32], test: &[f32]) -> f64 {
    let (mut sig, mut err) = (0.0f64, 0.0f64);
    for (&r, &t) in reference.iter().zip(test) {
        sig += (r as f64) * (r as f64);
        let d = r as f64 - t as f64;
        err += d * d;
    }
    if err == 0.0 {
        return SNR_CAP_DB;
    }
    if sig == 0.0 {
        return -SNR_CAP_DB;
    }
    (10.0 * (sig / err).log10()).min(SNR_CAP_DB)
}

/// Lag in `0..=max_lag` maximizing `sum ref[n] * test[n + lag]`.
pub fn best_lag(reference: &[f32], test: &[f32], max_lag: usize) -> usize {
    let lags = max_lag.min(test.len().saturating_sub(1));
    let scores = crate::par::map(lags + 1, reference.len(), |lag| {
        reference
            .iter()
            .zip(&test[lag..])
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum::<f64>()
    });
    let mut best = 0;
    for (lag, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = lag;
        }
    }
    best
}

/// Finds the delay of `test` relative to `reference` and reports waveform,
/// per-band and spectral metrics at that delay.
pub fn align_and_snr(reference: &AudioBuffer, test: &AudioBuffer, max_lag: usize) -> Result<MetricReport> {
    test.expect_rate(reference.sample_rate)?;
    if reference.is_empty() || test.is_empty() {
        return Err(Error::EmptySignal);
    }
    let lag = best_lag(&reference.samples, &test.samples, max_lag);
    let bands = (reference.sample_rate / pqmf::SUBBAND_RATE) as usize;
    let overlap = reference.len().min(test.len() - lag);
    let n = overlap - overlap % bands;
    if n == 0 {
        return Err(Error::EmptySignal);
    }
    let r = &reference.samples[..n];
    let t = &test.samples[lag..lag + n];

    let proto = PrototypeFilter::default_for(bands)?;
    let rb = pqmf::analysis(&AudioBuffer::new(r.to_vec(), reference.sample_rate)?, &proto)?;
    let tb = pqmf::analysis(&AudioBuffer::new(t.to_vec(), reference.sample_rate)?, &proto)?;
    let band_snr_db = (0..bands).map(|k| snr_db(rb.band(k), tb.band(k))).collect();

    let stft = StftConfig::loss_default();
    let (sc, mag) = if n >= stft.window {
        let rs = stft_magnitude(r, &stft);
        let ts = stft_magnitude(t, &stft);
        (loss_sc(&rs, &ts).ok(), loss_mag(&rs, &ts).ok())
    } else {
        (None, None)
    };

    Ok(MetricReport {
        snr_db: snr_db(r, t),
        band_snr_db,
        sc,
        mag,
        delay_samples: lag,
    })
}
