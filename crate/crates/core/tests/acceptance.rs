//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the report is always printed. Exits
//! non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::Rng;
use ubgan::adversary::train::end_to_end_gradcheck;
use ubgan::adversary::{loss_adv_gen, loss_disc, loss_feat, loss_mag, loss_sc, speech_like_clip, surrogate_pair, toy_train, Spectrogram, TrainConfig};
use ubgan::audioio::{align_and_snr, WB_RATE};
use ubgan::generator::{extend_streaming, system_delay, WB_FRAME};
use ubgan::nnengine::gradcheck::{op_suite, straight_through_matches_tanh, OP_TOLERANCE};
use ubgan::nnengine::{Ctx, Graph, Tensor};
use ubgan::pqmf::{self, PrototypeFilter, SubbandSignal};
use ubgan::{extend, sideinfo, AudioBuffer, CondSource, Generator, GeneratorConfig, Mode};

use common::{active_model, max_abs_diff, rng, uniform};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value / target - 1.0).abs() <= tol
}

fn c1_pqmf_reconstruction() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    for bands in [8usize, 4] {
        let proto = pqmf::design_prototype(bands, pqmf::DEFAULT_TAPS_PER_BAND, pqmf::DEFAULT_STOPBAND_DB).map_err(|e| e.to_string())?;
        let noise = pqmf::white_noise(proto.sample_rate() as usize, 1234 + bands as u64);
        let snr = pqmf::reconstruction_snr(&proto, &noise).map_err(|e| e.to_string())?;
        ensure(snr >= 60.0, || format!("{bands}-band SNR {snr:.2} dB < 60"))?;
        parts.push(format!("{bands}-band {snr:.2} dB at delay {}", proto.delay()));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 5.0, || format!("took {secs:.2} s"))?;
    Ok(format!("{}, {secs:.2} s", parts.join(", ")))
}

fn c2_parameter_counts() -> Outcome {
    let mut parts = Vec::new();
    for (mode, target) in [(Mode::Blind, 250_000.0), (Mode::Guided, 364_000.0)] {
        let m = Generator::init(GeneratorConfig::new(mode), 0).map_err(|e| e.to_string())?;
        let report = m.complexity().map_err(|e| e.to_string())?;
        let sum: usize = report.blocks.iter().map(|b| b.params).sum();
        let stored = m.store.total_len();
        ensure(sum == report.params, || format!("{mode:?}: blocks sum to {sum}, total {}", report.params))?;
        ensure(stored == report.params, || format!("{mode:?}: {stored} stored values vs {} counted", report.params))?;
        ensure(within(report.params as f64, target, 0.20), || format!("{mode:?}: {} params vs {target}", report.params))?;
        parts.push(format!("{mode:?} {} ({:+.1}%)", report.params, 100.0 * (report.params as f64 / target - 1.0)));
    }
    Ok(parts.join(", "))
}

fn c3_complexity() -> Outcome {
    let mut parts = Vec::new();
    for (mode, target) in [(Mode::Blind, 0.214), (Mode::Guided, 0.246)] {
        let m = Generator::init(GeneratorConfig::new(mode), 0).map_err(|e| e.to_string())?;
        let report = m.complexity().map_err(|e| e.to_string())?;
        let sum: u64 = report.blocks.iter().map(|b| b.flops_per_second).sum();
        ensure(sum == report.flops_per_second, || format!("{mode:?}: block FLOPs do not sum to the total"))?;
        ensure(within(report.gflops, target, 0.25), || format!("{mode:?}: {:.4} GFLOPS vs {target}", report.gflops))?;
        parts.push(format!("{mode:?} {:.4} GFLOPS ({:+.1}%)", report.gflops, 100.0 * (report.gflops / target - 1.0)));
    }
    Ok(parts.join(", "))
}

fn c4_bitrate() -> Outcome {
    let model = Generator::init(GeneratorConfig::guided(), 3).map_err(|e| e.to_string())?;
    let mut r = rng(4);
    for frames in [1usize, 7, 50, 131] {
        let x = AudioBuffer::new(uniform(&mut r, frames * 640, 0.5), 32_000).map_err(|e| e.to_string())?;
        let codes = sideinfo::encode(&x, &model).map_err(|e| e.to_string())?;
        // bits / (samples / 32000) == 200, in integers.
        let bits = 4 * codes.len();
        ensure(codes.len() == frames && bits * 32_000 == 200 * x.len(), || format!("{frames} frames: {} codes, {bits} bits", codes.len()))?;
        let packed = sideinfo::pack(&codes).map_err(|e| e.to_string())?;
        ensure(packed.len() - 12 == frames.div_ceil(2), || format!("payload {} bytes for {frames} frames", packed.len() - 12))?;
    }
    for _ in 0..10_000 {
        let n = r.gen_range(0..300);
        let codes: Vec<u8> = (0..n).map(|_| r.gen_range(0..16u8)).collect();
        let back = sideinfo::unpack(&sideinfo::pack(&codes).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        ensure(back == codes, || format!("round trip failed for {n} codes"))?;
    }
    Ok("200 bit/s on 1, 7, 50, 131 frames; 10000 random round trips bit-exact".into())
}

fn c5_geometry() -> Outcome {
    let mut parts = Vec::new();
    for mode in [Mode::Blind, Mode::Guided] {
        let model = Generator::init(GeneratorConfig::new(mode), 5).map_err(|e| e.to_string())?;
        let cfg = &model.cfg;
        let down = cfg.total_down_factor();
        ensure(down.num == 40 && down.den == 1, || format!("down factor {down:?}"))?;
        let steps = cfg.block_input_steps().map_err(|e| e.to_string())?;
        ensure(steps == vec![80, 80, 40, 20, 10, 4], || format!("conditioning factors {steps:?}"))?;
        ensure(cfg.cond_up_factors == vec![80, 80, 40, 20, 10, 4], || format!("cond_up {:?}", cfg.cond_up_factors))?;
        let g = Graph::inference();
        let mut ctx = Ctx::new(&g, &model.store, None);
        let x = g.constant(Tensor::matrix(4, 160, uniform(&mut rng(6), 640, 0.3)).unwrap());
        let c = g.constant(Tensor::matrix(cfg.cond_dim, 2, vec![0.1; 2 * cfg.cond_dim]).unwrap());
        let f = model.subbands(&mut ctx, x, c).map_err(|e| e.to_string())?;
        ensure(f.bottleneck.shape() == vec![64, 4], || format!("bottleneck for 2 frames {:?}", f.bottleneck.shape()))?;
        ensure(f.bands.shape() == vec![8, 160], || format!("bands {:?}", f.bands.shape()))?;
        parts.push(format!("{mode:?}"));
    }
    Ok(format!("{}: bottleneck 64 x 2 per frame, down product 40, conditioning [80,80,40,20,10,4]", parts.join("/")))
}

fn c6_streaming_and_causality() -> Outcome {
    let model = active_model(Mode::Blind, 6);
    let mut r = rng(66);
    let mut worst = 0.0f32;
    for i in 0..10 {
        let x = AudioBuffer::new(uniform(&mut r, 2 * WB_RATE as usize, 0.5), WB_RATE).unwrap();
        let batch = extend(&x, CondSource::Blind, &model).map_err(|e| e.to_string())?;
        let chunk = r.gen_range(1..2000);
        let stream = extend_streaming(&x, CondSource::Blind, &model, chunk).map_err(|e| e.to_string())?;
        ensure(batch.audio.len() == stream.audio.len(), || format!("input {i}: lengths differ"))?;
        worst = worst.max(max_abs_diff(&batch.audio.samples, &stream.audio.samples));
    }
    ensure(worst <= 1e-5, || format!("streaming vs batch max abs error {worst:e}"))?;

    // Output of frame i (the first 640 (i + 1) samples) may only depend on
    // input before 320 (i + 1) + 80: the frame plus 5 ms of look-ahead.
    let x = uniform(&mut r, 40 * WB_FRAME, 0.5);
    let run = |v: &[f32]| extend(&AudioBuffer::new(v.to_vec(), WB_RATE).unwrap(), CondSource::Blind, &model).unwrap().audio.samples;
    let base = run(&x);
    for frame in [0usize, 9, 23] {
        let horizon = (frame + 1) * WB_FRAME + 80;
        let visible = 640 * (frame + 1);
        let mut beyond = x.clone();
        for v in &mut beyond[horizon..] {
            *v = r.gen_range(-0.5..0.5);
        }
        let y = run(&beyond);
        ensure(base[..visible] == y[..visible], || format!("frame {frame} changed by input beyond the look-ahead"))?;
        let mut inside = x.clone();
        inside[horizon - 1] += 0.5;
        let y = run(&inside);
        ensure(base[..visible] != y[..visible], || format!("frame {frame} ignores its last look-ahead sample"))?;
    }
    Ok(format!("10 x 2 s random inputs, max abs error {worst:.2e}; horizon 320(i+1)+80 is exact"))
}

fn c7_gradients() -> Outcome {
    let ops = op_suite(7).map_err(|e| e.to_string())?;
    let worst_op = ops.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    if let Some(bad) = ops.iter().find(|c| !c.passed || c.rel_error >= OP_TOLERANCE) {
        return Err(format!("op {} rel error {:e}", bad.name, bad.rel_error));
    }
    let mut worst_e2e = 0.0f64;
    for seed in 1..=3 {
        let e2e = end_to_end_gradcheck(seed, 1e-2).map_err(|e| e.to_string())?;
        ensure(e2e.passed && e2e.rel_error < 1e-2, || format!("end-to-end seed {seed}: {:e}", e2e.rel_error))?;
        worst_e2e = worst_e2e.max(e2e.rel_error);
    }
    let z = Tensor::new(vec![200], uniform(&mut rng(77), 200, 4.0)).unwrap();
    let st = straight_through_matches_tanh(&z).map_err(|e| e.to_string())?;
    ensure(st == 0.0, || format!("straight-through differs from tanh by {st:e}"))?;
    Ok(format!("{} op checks (worst {worst_op:.2e}), end-to-end worst {worst_e2e:.2e} over 3 seeds, straight-through == tanh", ops.len()))
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn c8_loss_oracles() -> Outcome {
    let mut r = rng(8);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (bins, frames) = (r.gen_range(1..9), r.gen_range(1..7));
        let a: Vec<f32> = (0..bins * frames).map(|_| r.gen_range(0.0..2.0)).collect();
        let b: Vec<f32> = (0..bins * frames).map(|_| r.gen_range(0.0..2.0)).collect();
        let (sa, sb) = (Spectrogram::from_magnitudes(a.clone(), bins, frames).unwrap(), Spectrogram::from_magnitudes(b.clone(), bins, frames).unwrap());

        let mut num = 0.0f64;
        let mut den = 0.0f64;
        let mut logs = 0.0f64;
        for k in 0..bins {
            for t in 0..frames {
                let (x, y) = (a[k * frames + t] as f64, b[k * frames + t] as f64);
                num += (x - y) * (x - y);
                den += x * x;
                logs += (x.max(1e-7).ln() - y.max(1e-7).ln()).abs();
            }
        }
        worst = worst.max(rel(loss_sc(&sa, &sb).unwrap(), (num / den).sqrt()));
        worst = worst.max(rel(loss_mag(&sa, &sb).unwrap(), logs / (bins * frames) as f64));

        let maps = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f32>> { (0..4).map(|_| (0..r.gen_range(1..12)).map(|_| r.gen_range(-2.0..2.0)).collect()).collect() };
        let (real, fake) = (maps(&mut r), maps(&mut r));
        let mut adv = 0.0;
        for m in &fake {
            adv += m.iter().map(|&v| (v as f64 - 1.0).powi(2)).sum::<f64>() / m.len() as f64;
        }
        worst = worst.max(rel(loss_adv_gen(&fake).unwrap(), adv));
        let mut disc = 0.0;
        for (rm, fm) in real.iter().zip(&fake) {
            disc += rm.iter().map(|&v| (v as f64 - 1.0).powi(2)).sum::<f64>() / rm.len() as f64;
            disc += fm.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / fm.len() as f64;
        }
        worst = worst.max(rel(loss_disc(&real, &fake).unwrap(), disc));

        let layers = r.gen_range(1..5);
        let sizes: Vec<usize> = (0..layers).map(|_| r.gen_range(1..10)).collect();
        let feats = |r: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<Vec<f32>>> {
            (0..4).map(|_| sizes.iter().map(|&n| (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).collect()).collect()
        };
        let (fr, ff) = (feats(&mut r), feats(&mut r));
        let mut feat = 0.0;
        for (dr, df) in fr.iter().zip(&ff) {
            let mut per = 0.0;
            for (lr, lf) in dr.iter().zip(df) {
                per += lr.iter().zip(lf).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>() / lr.len() as f64;
            }
            feat += per / layers as f64;
        }
        worst = worst.max(rel(loss_feat(&fr, &ff).unwrap(), feat));
    }
    ensure(worst <= 1e-6, || format!("worst relative deviation {worst:e}"))?;

    let s = Spectrogram::from_magnitudes(vec![0.5, 1.0, 0.0, 2.0], 2, 2).unwrap();
    ensure(loss_sc(&s, &s).unwrap() == 0.0 && loss_mag(&s, &s).unwrap() == 0.0, || "identical spectrograms".into())?;
    let ones = vec![vec![1.0f32; 5]; 4];
    let zeros = vec![vec![0.0f32; 5]; 4];
    ensure(loss_adv_gen(&ones).unwrap() == 0.0, || "adversarial loss at outputs 1".into())?;
    ensure(loss_disc(&ones, &zeros).unwrap() == 0.0, || "discriminator loss at its optimum".into())?;
    let f = vec![vec![vec![0.3f32, -1.0]; 3]; 4];
    ensure(loss_feat(&f, &f).unwrap() == 0.0, || "feature loss of identical maps".into())?;
    Ok(format!("50 random cases, worst relative deviation {worst:.1e}; zero points exact"))
}

fn c9_toy_overfit() -> Outcome {
    let clip = speech_like_clip(1.0, 9).map_err(|e| e.to_string())?;
    let mut cfg = TrainConfig::new(Mode::Blind, 500);
    cfg.seed = 9;
    let start = Instant::now();
    let out = toy_train(&clip, &cfg).map_err(|e| e.to_string())?;
    ensure(out.trace.iter().all(|t| t.reconstruction().is_finite()), || "non-finite loss".into())?;
    let at10 = out.trace[9].reconstruction();
    let (best_step, best) = out
        .trace
        .iter()
        .map(|t| (t.step, t.reconstruction()))
        .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    ensure(best <= 0.5 * at10, || format!("best {best:.4} at step {best_step} vs {at10:.4} at step 10"))?;
    let blind_secs = start.elapsed().as_secs_f64();

    let mut gcfg = TrainConfig::new(Mode::Guided, 100);
    gcfg.seed = 9;
    let g = toy_train(&clip, &gcfg).map_err(|e| e.to_string())?;
    let mut codes = g.codes.clone();
    codes.sort_unstable();
    codes.dedup();
    ensure(codes.len() >= 2, || format!("guided training used {} distinct codes", codes.len()))?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs <= 900.0, || format!("took {secs:.0} s"))?;
    Ok(format!(
        "blind: step 10 {at10:.4} -> {best:.4} ({:.0}%) at step {best_step} in {blind_secs:.0} s; guided: {} distinct codes; {secs:.0} s total",
        100.0 * best / at10,
        codes.len()
    ))
}

fn c10_passthrough() -> Outcome {
    let model = active_model(Mode::Blind, 10);
    let clip = speech_like_clip(1.0, 10).map_err(|e| e.to_string())?;
    let wb = surrogate_pair(&clip).map_err(|e| e.to_string())?.wb;
    let y = extend(&wb, CondSource::Blind, &model).map_err(|e| e.to_string())?.audio;

    // Reference: the input's four subbands through the 8-band synthesis with
    // empty upper bands, i.e. the same chain without the generator.
    let mut xp = wb.samples.clone();
    xp.extend(std::iter::repeat(0.0).take(WB_FRAME));
    let sb4 = pqmf::analysis(&AudioBuffer::new(xp, WB_RATE).unwrap(), PrototypeFilter::default_for(4).unwrap()).unwrap();
    let mut sb8 = SubbandSignal::zeros(8, sb4.len);
    for k in 0..4 {
        sb8.band_mut(k).copy_from_slice(sb4.band(k));
    }
    let reference = pqmf::synthesis(&sb8, PrototypeFilter::default_for(8).unwrap()).unwrap();
    let m = align_and_snr(&reference, &y, 2 * system_delay().unwrap()).map_err(|e| e.to_string())?;
    ensure(m.delay_samples == 0, || format!("alignment found lag {}", m.delay_samples))?;
    for k in 0..3 {
        ensure(m.band_snr_db[k] >= 30.0, || format!("band {k} SNR {:.2} dB", m.band_snr_db[k]))?;
    }
    // The generated bands must carry signal for the check to mean anything.
    let yb = pqmf::analysis(&y, PrototypeFilter::default_for(8).unwrap()).unwrap();
    let low: f64 = (0..4).map(|k| yb.energy(k)).sum();
    let high: f64 = (4..8).map(|k| yb.energy(k)).sum();
    ensure(high > 1e-3 * low, || format!("generated bands nearly silent ({:.1} dB)", 10.0 * (high / low).log10()))?;
    Ok(format!(
        "band SNR {:.1} / {:.1} / {:.1} dB (band 3 exempt at {:.1} dB; generated bands at {:+.1} dB relative to the low band)",
        m.band_snr_db[0],
        m.band_snr_db[1],
        m.band_snr_db[2],
        m.band_snr_db[3],
        10.0 * (high / low).log10()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("1 PQMF reconstruction", c1_pqmf_reconstruction),
        ("2 parameter counts", c2_parameter_counts),
        ("3 complexity", c3_complexity),
        ("4 bitrate exactness", c4_bitrate),
        ("5 frame geometry", c5_geometry),
        ("6 streaming equivalence and causality", c6_streaming_and_causality),
        ("7 gradient suite", c7_gradients),
        ("8 loss oracles", c8_loss_oracles),
        ("9 toy overfit", c9_toy_overfit),
        ("10 low-band passthrough", c10_passthrough),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {name}: PASS ({secs:.1} s) {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {name}: FAIL ({secs:.1} s) {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
