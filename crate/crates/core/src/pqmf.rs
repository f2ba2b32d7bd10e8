//! Pseudo-QMF filter banks: prototype design plus batch and streaming
//! analysis/synthesis for the 4-band (16 kHz) and 8-band (32 kHz) banks.
//!
//! Band `k` of an `N`-band bank is the prototype lowpass modulated by
//! `cos((2k+1) pi/(2N) (n - (L-1)/2) ± (-1)^k pi/4)` (plus for analysis, minus
//! for synthesis). Analysis output `j` is the filter output at input index
//! `jN`; synthesis places subband sample `j` at output index `jN`. The
//! analysis-synthesis chain therefore delays its input by exactly `L - 1`
//! samples.
//!
//! Prototypes have odd length `L = N * taps_per_band + 1`. With 16 taps per
//! band the 4-band prototype (65 taps at 16 kHz) and the 8-band prototype
//! (129 taps at 32 kHz) share the same modulation centre in seconds, so
//! subbands produced by the 4-band analysis can be fed straight into the
//! 8-band synthesis.

use std::f64::consts::PI;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audioio::{snr_db, AudioBuffer};
use crate::error::{Error, Result};
use crate::nnengine::{Tensor, WeightStore};
use crate::par;

/// Every subband in this crate runs at 4 kHz.
pub const SUBBAND_RATE: u32 = 4000;
pub const DEFAULT_TAPS_PER_BAND: usize = 16;
pub const DEFAULT_BETA: f64 = 9.0;
pub const DEFAULT_STOPBAND_DB: f64 = 100.0;
/// Minimum acceptable analysis-synthesis reconstruction SNR.
pub const MIN_RECONSTRUCTION_SNR_DB: f64 = 60.0;

const SEARCH_SEED: u64 = 0x5eed_f11e;
const GOLDEN_TOL: f64 = 1e-7;

/// Kaiser's empirical window shape for a given stopband attenuation.
pub fn kaiser_beta(attenuation_db: f64) -> f64 {
    if attenuation_db > 50.0 {
        0.1102 * (attenuation_db - 8.7)
    } else if attenuation_db >= 21.0 {
        0.5842 * (attenuation_db - 21.0).powf(0.4) + 0.07886 * (attenuation_db - 21.0)
    } else {
        0.0
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn kaiser_window(len: usize, beta: f64) -> Vec<f64> {
    let m = (len - 1) as f64;
    let denom = bessel_i0(beta);
    (0..len)
        .map(|n| {
            let r = 2.0 * n as f64 / m - 1.0;
            bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / denom
        })
        .collect()
}

/// Windowed-sinc lowpass with cutoff `cutoff * pi` rad/sample.
fn windowed_sinc(len: usize, cutoff: f64, beta: f64) -> Vec<f64> {
    let centre = (len - 1) as f64 / 2.0;
    kaiser_window(len, beta)
        .into_iter()
        .enumerate()
        .map(|(n, w)| {
            let t = n as f64 - centre;
            let ideal = if t == 0.0 {
                cutoff
            } else {
                (PI * cutoff * t).sin() / (PI * t)
            };
            ideal * w
        })
        .collect()
}

/// A designed prototype lowpass plus its cosine-modulated band filters.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeFilter {
    pub num_bands: usize,
    pub taps: Vec<f32>,
    /// Cutoff as a fraction of Nyquist.
    pub cutoff: f64,
    pub window_beta: f64,
    analysis: Vec<Vec<f32>>,
    /// Synthesis filters with the interpolation gain `N` folded in.
    synthesis: Vec<Vec<f32>>,
}

impl PrototypeFilter {
    /// Builds the bank for an explicit cutoff and window shape.
    pub fn from_params(num_bands: usize, taps_per_band: usize, cutoff: f64, window_beta: f64) -> Result<Self> {
        check_bands(num_bands)?;
        if taps_per_band < 8 {
            return Err(Error::InvalidConfig(format!(
                "taps_per_band {taps_per_band} < 8"
            )));
        }
        let len = num_bands * taps_per_band + 1;
        let proto = windowed_sinc(len, cutoff, window_beta);
        Ok(Self::from_taps(num_bands, proto, cutoff, window_beta))
    }

    fn from_taps(num_bands: usize, proto: Vec<f64>, cutoff: f64, window_beta: f64) -> Self {
        let len = proto.len();
        let centre = (len - 1) as f64 / 2.0;
        let n_f = num_bands as f64;
        let modulated = |sign: f64, gain: f64| -> Vec<Vec<f32>> {
            (0..num_bands)
                .map(|k| {
                    let phase = if k % 2 == 0 { PI / 4.0 } else { -PI / 4.0 };
                    proto
                        .iter()
                        .enumerate()
                        .map(|(n, &h)| {
                            let arg = (2 * k + 1) as f64 * PI / (2.0 * n_f) * (n as f64 - centre);
                            (gain * 2.0 * h * (arg + sign * phase).cos()) as f32
                        })
                        .collect()
                })
                .collect()
        };
        Self {
            num_bands,
            taps: proto.iter().map(|&h| h as f32).collect(),
            cutoff,
            window_beta,
            analysis: modulated(1.0, 1.0),
            synthesis: modulated(-1.0, n_f),
        }
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// Analysis-synthesis delay in full-rate samples.
    pub fn delay(&self) -> usize {
        self.len() - 1
    }

    pub fn sample_rate(&self) -> u32 {
        self.num_bands as u32 * SUBBAND_RATE
    }

    pub fn analysis_filters(&self) -> &[Vec<f32>] {
        &self.analysis
    }

    pub fn synthesis_filters(&self) -> &[Vec<f32>] {
        &self.synthesis
    }

    /// Past subband samples per band the synthesis filter reaches back to.
    pub fn synthesis_history(&self) -> usize {
        (self.len() - 1).div_ceil(self.num_bands)
    }

    /// Packs the bank into a weight container: `prototype` `[L]`,
    /// `analysis` and `synthesis` `[N, L]`, with the design parameters as
    /// the configuration text.
    pub fn to_store(&self) -> Result<WeightStore> {
        let config = serde_json::json!({
            "kind": "pqmf",
            "num_bands": self.num_bands,
            "taps_per_band": (self.len() - 1) / self.num_bands,
            "length": self.len(),
            "cutoff": self.cutoff,
            "window_beta": self.window_beta,
            "delay": self.delay(),
        });
        let mut store = WeightStore::new(config.to_string());
        let rows = |f: &[Vec<f32>]| f.iter().flatten().copied().collect::<Vec<f32>>();
        store.insert("prototype", Tensor::new(vec![self.len()], self.taps.clone())?);
        store.insert("analysis", Tensor::new(vec![self.num_bands, self.len()], rows(&self.analysis))?);
        store.insert("synthesis", Tensor::new(vec![self.num_bands, self.len()], rows(&self.synthesis))?);
        Ok(store)
    }

    /// Shared default bank (16 taps per band), designed once per process.
    pub fn default_for(num_bands: usize) -> Result<&'static PrototypeFilter> {
        static FOUR: OnceLock<PrototypeFilter> = OnceLock::new();
        static EIGHT: OnceLock<PrototypeFilter> = OnceLock::new();
        let cell = match num_bands {
            4 => &FOUR,
            8 => &EIGHT,
            n => return Err(Error::UnsupportedBandCount(n)),
        };
        Ok(cell.get_or_init(|| {
            design_prototype(num_bands, DEFAULT_TAPS_PER_BAND, DEFAULT_STOPBAND_DB)
                .expect("default prototype design reaches the reconstruction target")
        }))
    }
}

fn check_bands(num_bands: usize) -> Result<()> {
    if num_bands == 4 || num_bands == 8 {
        Ok(())
    } else {
        Err(Error::UnsupportedBandCount(num_bands))
    }
}

/// White noise used to score reconstruction quality.
pub fn white_noise(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

/// Analysis-synthesis SNR against the input delayed by `L - 1`, ignoring
/// edge regions of length `2L` at both ends.
pub fn reconstruction_snr(proto: &PrototypeFilter, x: &[f32]) -> Result<f64> {
    let rate = proto.sample_rate();
    let buf = AudioBuffer::new(x.to_vec(), rate)?;
    let y = synthesis(&analysis(&buf, proto)?, proto)?;
    let d = proto.delay();
    let edge = 2 * proto.len();
    if x.len() < d + 2 * edge + proto.num_bands {
        return Err(Error::InvalidConfig(format!(
            "signal of {} samples too short to score a {}-tap bank",
            x.len(),
            proto.len()
        )));
    }
    let reference = &x[edge..x.len() - d - edge];
    let out = &y.samples[edge + d..x.len() - edge];
    Ok(snr_db(reference, out))
}

/// Designs a Kaiser-windowed-sinc prototype whose cutoff maximizes
/// white-noise reconstruction SNR (golden-section search over the bracket
/// `(0.5/(2N), 1.5/(2N))` of Nyquist).
///
/// The window shape is Kaiser's formula for `stopband_attenuation_db`, capped
/// at [`DEFAULT_BETA`]: steeper windows widen the transition band beyond what
/// 16 taps per band can trade for reconstruction accuracy.
pub fn design_prototype(num_bands: usize, taps_per_band: usize, stopband_attenuation_db: f64) -> Result<PrototypeFilter> {
    check_bands(num_bands)?;
    if taps_per_band < 8 {
        return Err(Error::InvalidConfig(format!(
            "taps_per_band {taps_per_band} < 8"
        )));
    }
    let beta = kaiser_beta(stopband_attenuation_db).min(DEFAULT_BETA);
    let rate = num_bands * SUBBAND_RATE as usize;
    let probe = white_noise(rate / 4, SEARCH_SEED);
    let score = |cutoff: f64| -> f64 {
        PrototypeFilter::from_params(num_bands, taps_per_band, cutoff, beta)
            .and_then(|p| reconstruction_snr(&p, &probe))
            .unwrap_or(f64::NEG_INFINITY)
    };

    let nb = num_bands as f64;
    let (mut lo, mut hi) = (0.5 / (2.0 * nb), 1.5 / (2.0 * nb));
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - inv_phi * (hi - lo);
    let mut b = lo + inv_phi * (hi - lo);
    let (mut fa, mut fb) = (score(a), score(b));
    while hi - lo > GOLDEN_TOL {
        if fa >= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - inv_phi * (hi - lo);
            fa = score(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + inv_phi * (hi - lo);
            fb = score(b);
        }
    }
    let cutoff = if fa >= fb { a } else { b };
    let proto = PrototypeFilter::from_params(num_bands, taps_per_band, cutoff, beta)?;
    let snr = reconstruction_snr(&proto, &white_noise(rate, SEARCH_SEED + 1))?;
    if snr < MIN_RECONSTRUCTION_SNR_DB {
        return Err(Error::DesignFailure {
            snr_db: snr,
            target_db: MIN_RECONSTRUCTION_SNR_DB,
        });
    }
    Ok(proto)
}

/// Critically sampled subbands, `num_bands` rows of `len` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandSignal {
    pub num_bands: usize,
    pub len: usize,
    /// Row-major `num_bands x len`.
    pub data: Vec<f32>,
    pub subband_rate: u32,
}

impl SubbandSignal {
    pub fn zeros(num_bands: usize, len: usize) -> Self {
        Self {
            num_bands,
            len,
            data: vec![0.0; num_bands * len],
            subband_rate: SUBBAND_RATE,
        }
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let len = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != len) {
            return Err(Error::shape("SubbandSignal::from_rows", "ragged rows"));
        }
        Ok(Self {
            num_bands: rows.len(),
            len,
            data: rows.concat(),
            subband_rate: SUBBAND_RATE,
        })
    }

    pub fn band(&self, k: usize) -> &[f32] {
        &self.data[k * self.len..(k + 1) * self.len]
    }

    pub fn band_mut(&mut self, k: usize) -> &mut [f32] {
        &mut self.data[k * self.len..(k + 1) * self.len]
    }

    /// Sample rate of the full-band signal these subbands represent.
    pub fn full_rate(&self) -> u32 {
        self.subband_rate * self.num_bands as u32
    }

    pub fn energy(&self, k: usize) -> f64 {
        self.band(k).iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    /// Columns `start..start+len` of every band.
    pub fn slice(&self, start: usize, len: usize) -> SubbandSignal {
        let mut out = SubbandSignal::zeros(self.num_bands, len);
        for k in 0..self.num_bands {
            out.band_mut(k)
                .copy_from_slice(&self.band(k)[start..start + len]);
        }
        out
    }

    /// Appends `other` along time.
    pub fn append(&mut self, other: &SubbandSignal) {
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        for k in 0..self.num_bands {
            data.extend_from_slice(self.band(k));
            data.extend_from_slice(other.band(k));
        }
        self.len += other.len;
        self.data = data;
    }
}

/// Per-stream filter memory. Zero-initialized; owned by one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct PqmfState {
    num_bands: usize,
    /// Last `L - 1` input samples.
    analysis_hist: Vec<f32>,
    /// Last `ceil((L-1)/N)` subband samples per band, row-major.
    synthesis_hist: Vec<f32>,
    synthesis_depth: usize,
}

impl PqmfState {
    pub fn new(proto: &PrototypeFilter) -> Self {
        let depth = proto.synthesis_history();
        Self {
            num_bands: proto.num_bands,
            analysis_hist: vec![0.0; proto.len() - 1],
            synthesis_hist: vec![0.0; depth * proto.num_bands],
            synthesis_depth: depth,
        }
    }

    pub fn reset(&mut self) {
        self.analysis_hist.iter_mut().for_each(|v| *v = 0.0);
        self.synthesis_hist.iter_mut().for_each(|v| *v = 0.0);
    }
}

fn check_frame(len: usize, num_bands: usize) -> Result<()> {
    if len % num_bands != 0 {
        return Err(Error::FrameAlignment {
            len,
            multiple: num_bands,
        });
    }
    Ok(())
}

/// Filters one frame of input given the preceding `L - 1` samples.
fn analysis_kernel(history: &[f32], frame: &[f32], proto: &PrototypeFilter) -> SubbandSignal {
    let n_bands = proto.num_bands;
    let taps = proto.len();
    let out_len = frame.len() / n_bands;
    let mut ext = Vec::with_capacity(history.len() + frame.len());
    ext.extend_from_slice(history);
    ext.extend_from_slice(frame);
    let rows = par::map(n_bands, out_len * taps, |k| {
        let h = &proto.analysis[k];
        (0..out_len)
            .map(|j| {
                // ext[taps - 1 + j*N - n] for n in 0..taps, i.e. a reversed window.
                let end = taps - 1 + j * n_bands;
                let window = &ext[end + 1 - taps..=end];
                let mut acc = 0.0f32;
                for (n, &c) in h.iter().enumerate() {
                    acc += c * window[taps - 1 - n];
                }
                acc
            })
            .collect::<Vec<f32>>()
    });
    let mut out = SubbandSignal::zeros(n_bands, out_len);
    for (k, row) in rows.into_iter().enumerate() {
        out.band_mut(k).copy_from_slice(&row);
    }
    out
}

fn synthesis_kernel(history: &[f32], depth: usize, sb: &SubbandSignal, proto: &PrototypeFilter) -> Vec<f32> {
    let n_bands = proto.num_bands;
    let taps = proto.len() as isize;
    let t_len = sb.len;
    let out_len = t_len * n_bands;
    // Row k of the extended signal: `depth` history samples then the frame.
    let ext_len = depth + t_len;
    let mut ext = vec![0.0f32; n_bands * ext_len];
    for k in 0..n_bands {
        ext[k * ext_len..k * ext_len + depth].copy_from_slice(&history[k * depth..(k + 1) * depth]);
        ext[k * ext_len + depth..(k + 1) * ext_len].copy_from_slice(sb.band(k));
    }
    let nb = n_bands as isize;
    let mut out = vec![0.0f32; out_len];
    par::for_each_chunk_mut(&mut out, n_bands, n_bands * proto.len(), |j_blk, chunk| {
        for (r, y) in chunk.iter_mut().enumerate() {
            let m = (j_blk * n_bands + r) as isize;
            // Subband indices j with 0 <= m - jN < L.
            let j_lo = (m - taps + 1).div_euclid(nb) + if (m - taps + 1).rem_euclid(nb) == 0 { 0 } else { 1 };
            let j_hi = m.div_euclid(nb);
            let mut acc = 0.0f32;
            for k in 0..n_bands {
                let f = &proto.synthesis[k];
                let row = &ext[k * ext_len..(k + 1) * ext_len];
                for j in j_lo..=j_hi {
                    let idx = j + depth as isize;
                    if idx < 0 {
                        continue;
                    }
                    acc += f[(m - j * nb) as usize] * row[idx as usize];
                }
            }
            *y = acc;
        }
    });
    out
}

/// Splits a full-band signal into `N` critically sampled subbands.
pub fn analysis(x: &AudioBuffer, proto: &PrototypeFilter) -> Result<SubbandSignal> {
    x.expect_rate(proto.sample_rate())?;
    let mut state = PqmfState::new(proto);
    analysis_step(&x.samples, proto, &mut state)
}

/// Recombines `N` subbands into a full-band signal delayed by `L - 1`.
pub fn synthesis(sb: &SubbandSignal, proto: &PrototypeFilter) -> Result<AudioBuffer> {
    let mut state = PqmfState::new(proto);
    let samples = synthesis_step(sb, proto, &mut state)?;
    AudioBuffer::new(samples, proto.sample_rate())
}

/// Streaming analysis of one frame; concatenated outputs equal [`analysis`]
/// on the concatenated input bit for bit.
pub fn analysis_step(frame: &[f32], proto: &PrototypeFilter, state: &mut PqmfState) -> Result<SubbandSignal> {
    check_frame(frame.len(), proto.num_bands)?;
    if state.num_bands != proto.num_bands {
        return Err(Error::BandCountMismatch {
            expected: proto.num_bands,
            actual: state.num_bands,
        });
    }
    let out = analysis_kernel(&state.analysis_hist, frame, proto);
    let keep = state.analysis_hist.len();
    if frame.len() >= keep {
        state.analysis_hist.copy_from_slice(&frame[frame.len() - keep..]);
    } else {
        state.analysis_hist.drain(..frame.len());
        state.analysis_hist.extend_from_slice(frame);
    }
    Ok(out)
}

/// Streaming synthesis of one block of subbands.
pub fn synthesis_step(sb: &SubbandSignal, proto: &PrototypeFilter, state: &mut PqmfState) -> Result<Vec<f32>> {
    if sb.num_bands != proto.num_bands {
        return Err(Error::BandCountMismatch {
            expected: proto.num_bands,
            actual: sb.num_bands,
        });
    }
    if state.num_bands != proto.num_bands {
        return Err(Error::BandCountMismatch {
            expected: proto.num_bands,
            actual: state.num_bands,
        });
    }
    let depth = state.synthesis_depth;
    let out = synthesis_kernel(&state.synthesis_hist, depth, sb, proto);
    for k in 0..proto.num_bands {
        let hist = &mut state.synthesis_hist[k * depth..(k + 1) * depth];
        let band = sb.band(k);
        if band.len() >= depth {
            hist.copy_from_slice(&band[band.len() - depth..]);
        } else {
            hist.rotate_left(band.len());
            hist[depth - band.len()..].copy_from_slice(band);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, rate: u32, len: usize) -> Vec<f32> {
        (0..len)
            .map(|n| (2.0 * PI * freq * n as f64 / rate as f64).sin() as f32)
            .collect()
    }

    #[test]
    fn container_round_trip() {
        let p = PrototypeFilter::default_for(4).unwrap();
        let bytes = crate::nnengine::save_weights(&p.to_store().unwrap());
        let back = crate::nnengine::load_weights(&bytes).unwrap();
        assert_eq!(back.get("prototype").unwrap().data, p.taps);
        assert_eq!(back.get("analysis").unwrap().shape, vec![4, 65]);
        assert!(back.config.contains("\"num_bands\":4"));
    }

    #[test]
    fn prototype_is_symmetric_with_expected_length() {
        for n in [4, 8] {
            let p = PrototypeFilter::default_for(n).unwrap();
            assert_eq!(p.len(), n * 16 + 1);
            assert_eq!((p.len() - 1) % n, 0);
            for i in 0..p.len() {
                assert!((p.taps[i] - p.taps[p.len() - 1 - i]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn unsupported_band_count() {
        assert!(matches!(
            design_prototype(3, 16, 100.0),
            Err(Error::UnsupportedBandCount(3))
        ));
    }

    #[test]
    fn too_few_taps_fail_the_reconstruction_target() {
        // 8 taps per band cannot reach 60 dB.
        assert!(matches!(
            design_prototype(4, 8, 100.0),
            Err(Error::DesignFailure { .. })
        ));
    }

    #[test]
    fn eight_band_cutoff_is_inside_search_bracket() {
        let p = design_prototype(8, 16, 100.0).unwrap();
        assert!(p.cutoff > 0.5 / 16.0 && p.cutoff < 1.5 / 16.0, "{}", p.cutoff);
        assert!(p.cutoff > 0.0 && p.cutoff < 0.5);
    }

    #[test]
    fn four_band_design_reaches_target_on_one_second_of_noise() {
        let p = design_prototype(4, 16, 100.0).unwrap();
        let snr = reconstruction_snr(&p, &white_noise(16000, 99)).unwrap();
        assert!(snr >= 60.0, "snr {snr}");
    }

    #[test]
    fn zero_in_zero_out() {
        let p = PrototypeFilter::default_for(4).unwrap();
        let sb = analysis(&AudioBuffer::zeros(320, 16000).unwrap(), p).unwrap();
        assert!(sb.data.iter().all(|&v| v == 0.0));
        assert_eq!(sb.len, 80);
        let y = synthesis(&SubbandSignal::zeros(4, 80), p).unwrap();
        assert!(y.samples.iter().all(|&v| v == 0.0));
        assert_eq!(y.len(), 320);
    }

    #[test]
    fn tones_land_in_their_band() {
        let p = PrototypeFilter::default_for(4).unwrap();
        for (freq, band) in [(1000.0, 0), (5000.0, 2)] {
            let x = AudioBuffer::new(tone(freq, 16000, 16000), 16000).unwrap();
            let sb = analysis(&x, p).unwrap();
            let total: f64 = (0..4).map(|k| sb.energy(k)).sum();
            assert!(sb.energy(band) / total >= 0.99, "{freq} Hz");
        }
    }

    #[test]
    fn impulse_reconstructs_after_l_minus_one() {
        for n in [4, 8] {
            let p = PrototypeFilter::default_for(n).unwrap();
            let rate = p.sample_rate();
            let mut x = vec![0.0f32; 8 * p.len()];
            x[3 * n] = 1.0;
            let y = synthesis(&analysis(&AudioBuffer::new(x.clone(), rate).unwrap(), p).unwrap(), p).unwrap();
            let d = p.delay();
            let mut expected = vec![0.0f32; x.len()];
            expected[3 * n + d] = 1.0;
            let err: f64 = expected
                .iter()
                .zip(&y.samples)
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum();
            assert!(10.0 * err.log10() <= -60.0, "{n} bands: residual {} dB", 10.0 * err.log10());
        }
    }

    #[test]
    fn band_count_mismatch() {
        let p = PrototypeFilter::default_for(8).unwrap();
        assert!(matches!(
            synthesis(&SubbandSignal::zeros(5, 10), p),
            Err(Error::BandCountMismatch { .. })
        ));
    }

    #[test]
    fn misaligned_and_wrong_rate_inputs_are_rejected() {
        let p = PrototypeFilter::default_for(4).unwrap();
        assert!(matches!(
            analysis(&AudioBuffer::zeros(321, 16000).unwrap(), p),
            Err(Error::FrameAlignment { .. })
        ));
        assert!(matches!(
            analysis(&AudioBuffer::zeros(320, 32000).unwrap(), p),
            Err(Error::RateMismatch { .. })
        ));
    }

    #[test]
    fn streaming_matches_batch_bit_exact() {
        for n in [4usize, 8] {
            let p = PrototypeFilter::default_for(n).unwrap();
            let rate = p.sample_rate();
            let x = white_noise(rate as usize * 2, 7);
            let frame = rate as usize / 50;
            let batch = analysis(&AudioBuffer::new(x.clone(), rate).unwrap(), p).unwrap();
            let mut st = PqmfState::new(p);
            let mut streamed = SubbandSignal::zeros(n, 0);
            for chunk in x.chunks(frame) {
                streamed.append(&analysis_step(chunk, p, &mut st).unwrap());
            }
            assert_eq!(streamed, batch);

            let y_batch = synthesis(&batch, p).unwrap().samples;
            let mut st = PqmfState::new(p);
            let mut y = Vec::new();
            for f in 0..100 {
                let blk = batch.slice(f * frame / n, frame / n);
                y.extend(synthesis_step(&blk, p, &mut st).unwrap());
            }
            assert_eq!(y, y_batch);
        }
    }

    #[test]
    fn short_frames_keep_state_consistent() {
        let p = PrototypeFilter::default_for(4).unwrap();
        let x = white_noise(400, 8);
        let batch = analysis(&AudioBuffer::new(x.clone(), 16000).unwrap(), p).unwrap();
        let mut st = PqmfState::new(p);
        let mut streamed = SubbandSignal::zeros(4, 0);
        for chunk in x.chunks(4) {
            streamed.append(&analysis_step(chunk, p, &mut st).unwrap());
        }
        assert_eq!(streamed, batch);
        let y_batch = synthesis(&batch, p).unwrap().samples;
        let mut st = PqmfState::new(p);
        let mut y = Vec::new();
        for j in 0..batch.len {
            y.extend(synthesis_step(&batch.slice(j, 1), p, &mut st).unwrap());
        }
        assert_eq!(y, y_batch);
    }

    #[test]
    fn first_zero_frame_gives_zero_output() {
        let p = PrototypeFilter::default_for(8).unwrap();
        let mut st = PqmfState::new(p);
        let sb = analysis_step(&[0.0; 640], p, &mut st).unwrap();
        assert!(sb.data.iter().all(|&v| v == 0.0));
        let y = synthesis_step(&sb, p, &mut st).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }
}
