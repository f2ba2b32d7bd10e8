mod common;

use std::f64::consts::PI;

use proptest::prelude::*;
use ubgan::conditioning::{mel_center_frequencies, mel_frame, mel_stream, MelAnalyzer, MelConfig};
use ubgan::{par, AudioBuffer, Error};

use common::{rng, uniform};

fn htk(f: f64) -> f64 {
    1127.0 * (1.0 + f / 700.0).ln()
}

/// Direct DFT, HTK triangles and natural log, all in f64.
fn oracle(window: &[f32]) -> Vec<f64> {
    let n = window.len();
    let fft = 512;
    let hann: Vec<f64> = (0..n).map(|i| (PI * i as f64 / n as f64).sin().powi(2)).collect();
    let mag: Vec<f64> = (0..=fft / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, (&x, &w)) in window.iter().zip(&hann).enumerate() {
                let a = -2.0 * PI * (k * t) as f64 / fft as f64;
                re += x as f64 * w * a.cos();
                im += x as f64 * w * a.sin();
            }
            re.hypot(im)
        })
        .collect();
    let top = htk(8000.0);
    let edge = |i: usize| {
        let m = top * i as f64 / 81.0;
        700.0 * ((m / 1127.0).exp() - 1.0)
    };
    (0..80)
        .map(|b| {
            let (l, c, h) = (edge(b), edge(b + 1), edge(b + 2));
            let e: f64 = mag
                .iter()
                .enumerate()
                .map(|(k, &m)| {
                    let f = k as f64 * 16000.0 / 512.0;
                    let w = if f > l && f <= c {
                        (f - l) / (c - l)
                    } else if f > c && f < h {
                        (h - f) / (h - c)
                    } else {
                        0.0
                    };
                    w * m
                })
                .sum();
            e.max(1e-5).ln()
        })
        .collect()
}

fn tone(f: f64, amp: f64, len: usize) -> Vec<f32> {
    (0..len).map(|t| (amp * (2.0 * PI * f * t as f64 / 16000.0).sin()) as f32).collect()
}

#[test]
fn geometry() {
    let cfg = MelConfig::default();
    assert_eq!((cfg.hop(), cfg.context(), cfg.lookahead(), cfg.window_len()), (320, 80, 80, 480));
    let c = mel_center_frequencies(&cfg);
    assert_eq!(c.len(), 80);
    assert!(c.windows(2).all(|w| w[0] < w[1]));
    assert!(c[79] < 8000.0);
    let bad = MelConfig { fft_size: 256, ..MelConfig::default() };
    assert!(matches!(MelAnalyzer::new(bad), Err(Error::InvalidConfig(_))));
}

#[test]
fn frame_matches_direct_dft_oracle() {
    let mut r = rng(11);
    for _ in 0..4 {
        let w = uniform(&mut r, 480, 1.0);
        let got = mel_frame(&w, &MelConfig::default()).unwrap();
        let want = oracle(&w);
        for (a, b) in got.values.iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-4, "{a} vs {b}");
        }
    }
}

#[test]
fn tone_peaks_at_the_nearest_centre() {
    let cfg = MelConfig::default();
    let centres = mel_center_frequencies(&cfg);
    for f in [440.0, 1000.0, 3100.0, 6000.0] {
        let v = mel_frame(&tone(f, 0.5, 480), &cfg).unwrap().values;
        let argmax = (0..80).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        let nearest = (0..80).min_by(|&a, &b| (centres[a] - f).abs().total_cmp(&(centres[b] - f).abs())).unwrap();
        assert!(argmax.abs_diff(nearest) <= 1, "{f} Hz: argmax {argmax}, nearest {nearest}");
    }
    let v = mel_frame(&tone(1000.0, 0.5, 480), &cfg).unwrap().values;
    let argmax = (0..80).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
    let nearest = (0..80).min_by(|&a, &b| (centres[a] - 1000.0).abs().total_cmp(&(centres[b] - 1000.0).abs())).unwrap();
    assert_eq!(argmax, nearest);
}

#[test]
fn framing_uses_context_and_lookahead() {
    let a = MelAnalyzer::new(MelConfig::default()).unwrap();
    let x: Vec<f32> = (0..1000).map(|i| i as f32).collect();
    let w0 = a.frame_window(&x, 0);
    assert!(w0[..80].iter().all(|&v| v == 0.0));
    assert_eq!(w0[80], 0.0);
    assert_eq!(w0[479], 399.0);
    let w2 = a.frame_window(&x, 2);
    assert_eq!(w2[0], 560.0);
    assert_eq!(&w2[..440], &x[560..1000]);
    assert!(w2[440..].iter().all(|&v| v == 0.0));
    assert_eq!(a.stream(&x).unwrap().len(), 3);
}

#[test]
fn wrong_rate_is_a_consistency_error() {
    let x = AudioBuffer::zeros(640, 32000).unwrap();
    let err = mel_stream(&x, &MelConfig::default()).unwrap_err();
    assert_eq!(err.class(), ubgan::ErrorClass::Consistency);
}

#[test]
fn parallel_and_sequential_agree() {
    let x = AudioBuffer::new(uniform(&mut rng(5), 16000, 0.5), 16000).unwrap();
    par::set_parallel(false);
    let seq = mel_stream(&x, &MelConfig::default()).unwrap();
    par::set_parallel(true);
    let parallel = mel_stream(&x, &MelConfig::default()).unwrap();
    assert_eq!(seq, parallel);
    assert_eq!(seq, mel_stream(&x, &MelConfig::default()).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn frame_depends_only_on_its_window(seed in any::<u64>(), frame in 0usize..20, delta in 1.0f32..5.0) {
        let x = uniform(&mut rng(seed), 20 * 320, 1.0);
        let before = MelAnalyzer::new(MelConfig::default()).unwrap().stream(&x).unwrap();
        let horizon = frame * 320 + 400;
        let mut y = x.clone();
        for v in &mut y[horizon.min(x.len())..] {
            *v += delta;
        }
        if frame * 320 >= 80 {
            for v in &mut y[..frame * 320 - 80] {
                *v -= delta;
            }
        }
        let after = MelAnalyzer::new(MelConfig::default()).unwrap().stream(&y).unwrap();
        prop_assert_eq!(&before[frame], &after[frame]);
    }

    #[test]
    fn louder_input_never_lowers_any_band(seed in any::<u64>(), gain in 1.01f32..4.0) {
        let w = uniform(&mut rng(seed), 480, 0.5);
        let cfg = MelConfig::default();
        let a = mel_frame(&w, &cfg).unwrap().values;
        let b = mel_frame(&w.iter().map(|v| v * gain).collect::<Vec<_>>(), &cfg).unwrap().values;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(y >= x);
            // Above the floor, magnitude scales linearly.
            if *x > -11.0 {
                prop_assert!((y - x - gain.ln()).abs() < 1e-3);
            }
        }
    }
}
