mod common;

use std::f64::consts::PI;

use proptest::prelude::*;
use ubgan::pqmf::{analysis, analysis_step, design_prototype, synthesis, synthesis_step, PqmfState, PrototypeFilter};
use ubgan::{AudioBuffer, Error};

use common::{rng, uniform};

fn bank(n: usize) -> &'static PrototypeFilter {
    PrototypeFilter::default_for(n).unwrap()
}

fn snr(reference: &[f32], test: &[f32]) -> f64 {
    let num: f64 = reference.iter().map(|&v| (v as f64).powi(2)).sum();
    let den: f64 = reference.iter().zip(test).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    10.0 * (num / den.max(1e-300)).log10()
}

#[test]
fn default_banks_geometry() {
    for (n, len) in [(4, 65), (8, 129)] {
        let p = bank(n);
        assert_eq!(p.len(), len);
        assert_eq!(p.delay(), len - 1);
        assert_eq!(p.sample_rate(), n as u32 * 4000);
        assert_eq!(p.analysis_filters().len(), n);
        assert!(p.window_beta <= 9.0);
    }
    // The prototype is linear phase.
    let p = bank(8);
    for i in 0..p.len() {
        assert_eq!(p.taps[i], p.taps[p.len() - 1 - i]);
    }
}

#[test]
fn eight_taps_per_band_cannot_reach_the_target() {
    assert!(matches!(design_prototype(8, 8, 100.0), Err(Error::DesignFailure { .. })));
    assert!(matches!(design_prototype(6, 16, 100.0), Err(Error::UnsupportedBandCount(6))));
}

#[test]
fn analysis_matches_direct_convolution() {
    for n in [4, 8] {
        let p = bank(n);
        let x = uniform(&mut rng(n as u64), 40 * n, 1.0);
        let sb = analysis(&AudioBuffer::new(x.clone(), p.sample_rate()).unwrap(), p).unwrap();
        assert_eq!(sb.len, 40);
        for k in 0..n {
            let h = &p.analysis_filters()[k];
            for j in 0..sb.len {
                let want: f64 = (0..h.len())
                    .filter(|&m| j * n >= m)
                    .map(|m| h[m] as f64 * x[j * n - m] as f64)
                    .sum();
                assert!((sb.band(k)[j] as f64 - want).abs() < 1e-5, "band {k} sample {j}");
            }
        }
    }
}

#[test]
fn modulation_follows_the_cosine_rule() {
    let p = bank(4);
    let c = (p.len() - 1) as f64 / 2.0;
    for k in 0..4 {
        let phase = if k % 2 == 0 { PI / 4.0 } else { -PI / 4.0 };
        for (m, &h) in p.taps.iter().enumerate() {
            let arg = (2 * k + 1) as f64 * PI / 8.0 * (m as f64 - c);
            let a = 2.0 * h as f64 * (arg + phase).cos();
            let s = 4.0 * 2.0 * h as f64 * (arg - phase).cos();
            assert!((p.analysis_filters()[k][m] as f64 - a).abs() < 1e-6);
            assert!((p.synthesis_filters()[k][m] as f64 - s).abs() < 1e-5);
        }
    }
}

#[test]
fn tones_land_in_their_band() {
    for n in [4usize, 8] {
        let p = bank(n);
        let fs = p.sample_rate() as f64;
        let width = fs / 2.0 / n as f64;
        for k in 0..n {
            let f = (k as f64 + 0.5) * width;
            let x: Vec<f32> = (0..4000 * n).map(|t| (2.0 * PI * f * t as f64 / fs).sin() as f32).collect();
            let sb = analysis(&AudioBuffer::new(x, p.sample_rate()).unwrap(), p).unwrap();
            // Skip the onset transient of the abrupt tone start.
            let settle = p.len();
            let steady = |b: usize| -> f64 { sb.band(b)[settle..].iter().map(|&v| (v as f64).powi(2)).sum() };
            let e = steady(k);
            for other in 0..n {
                if other != k {
                    let rel = 10.0 * (steady(other) / e).log10();
                    assert!(rel < -50.0, "{n} bands: tone in {k}, band {other} at {rel:.1} dB");
                }
            }
        }
    }
}

#[test]
fn misaligned_frames_and_band_mismatch_are_rejected() {
    let p4 = bank(4);
    let mut st = PqmfState::new(p4);
    assert!(matches!(analysis_step(&[0.0; 6], p4, &mut st), Err(Error::FrameAlignment { len: 6, multiple: 4 })));
    let sb8 = analysis(&AudioBuffer::zeros(64, 32000).unwrap(), bank(8)).unwrap();
    assert!(matches!(synthesis(&sb8, p4), Err(Error::BandCountMismatch { .. })));
    assert!(analysis(&AudioBuffer::zeros(64, 32000).unwrap(), p4).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn perfect_reconstruction_up_to_delay(eight in any::<bool>(), blocks in 40usize..200, seed in any::<u64>()) {
        let n = if eight { 8 } else { 4 };
        let p = bank(n);
        let x = uniform(&mut rng(seed), blocks * n, 1.0);
        let sb = analysis(&AudioBuffer::new(x.clone(), p.sample_rate()).unwrap(), p).unwrap();
        prop_assert_eq!(sb.num_bands, n);
        prop_assert_eq!(sb.len * n, x.len());
        let y = synthesis(&sb, p).unwrap().samples;
        prop_assert_eq!(y.len(), x.len());
        let d = p.delay();
        let s = snr(&x[..x.len() - d], &y[d..]);
        prop_assert!(s >= 60.0, "{} bands: {:.2} dB", n, s);
    }

    #[test]
    fn streaming_is_bit_exact(eight in any::<bool>(), seed in any::<u64>(), cuts in prop::collection::vec(0usize..40, 1..8)) {
        let n = if eight { 8 } else { 4 };
        let p = bank(n);
        let x = uniform(&mut rng(seed), 60 * n, 1.0);
        let batch = analysis(&AudioBuffer::new(x.clone(), p.sample_rate()).unwrap(), p).unwrap();
        let batch_y = synthesis(&batch, p).unwrap().samples;

        let mut ast = PqmfState::new(p);
        let mut sst = PqmfState::new(p);
        let mut streamed = Vec::new();
        let mut y = Vec::new();
        let mut pos = 0;
        for c in cuts.into_iter().chain(std::iter::once(usize::MAX)) {
            let take = (c.saturating_mul(n)).min(x.len() - pos);
            let sb = analysis_step(&x[pos..pos + take], p, &mut ast).unwrap();
            y.extend(synthesis_step(&sb, p, &mut sst).unwrap());
            streamed.push(sb);
            pos += take;
            if pos == x.len() {
                break;
            }
        }
        let mut all = streamed.remove(0);
        for s in &streamed {
            all.append(s);
        }
        prop_assert_eq!(&all.data, &batch.data);
        prop_assert_eq!(y, batch_y);
    }

    #[test]
    fn analysis_is_causal(seed in any::<u64>(), at in 0usize..256) {
        let p = bank(8);
        let mut x = uniform(&mut rng(seed), 256, 1.0);
        let a = analysis(&AudioBuffer::new(x.clone(), 32000).unwrap(), p).unwrap();
        x[at] += 1.0;
        let b = analysis(&AudioBuffer::new(x, 32000).unwrap(), p).unwrap();
        // Output j depends on input up to index jN.
        let safe = at.div_ceil(8);
        for k in 0..8 {
            prop_assert_eq!(&a.band(k)[..safe], &b.band(k)[..safe]);
        }
    }
}
