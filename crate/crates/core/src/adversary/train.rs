//! Desk-scale trainer used to check that the whole system learns.
//!
//! Training pairs come from an ideal-codec surrogate: the clip is split by
//! the 8-band analysis bank, the upper four bands are dropped and the lower
//! four resynthesized at 16 kHz. The target is the clip delayed by the
//! end-to-end latency (surrogate plus extension), so the causal generator
//! never has to predict the future.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::discriminator::DiscConfig;
use super::losses::{self, adv_gen_graph, disc_graph, feat_graph, mag_graph, sc_graph, LossReport};
use super::optim::OptimizerState;
use super::stft::{stft_magnitude, Spectrogram, StftConfig};
use crate::audioio::{AudioBuffer, SWB_RATE};
use crate::conditioning::{MelAnalyzer, MelConfig};
use crate::error::{Error, Result};
use crate::generator::{system_delay, Generator, GeneratorConfig, Mode, SWB_FRAME};
use crate::nnengine::gradcheck::{self, GradCheck};
use crate::nnengine::{Ctx, Graph, Tensor, Var, WeightStore};
use crate::pqmf::{self, PrototypeFilter, SubbandSignal};
use crate::sideinfo;

/// Longest clip the toy trainer accepts, in seconds.
pub const MAX_CLIP_SECS: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: Mode,
    pub steps: usize,
    /// Adds the adversarial and feature losses after `pretrain_steps`.
    pub adversarial: bool,
    pub pretrain_steps: usize,
    pub seed: u64,
    pub disc: DiscConfig,
    pub stft: StftConfig,
    /// Each step sees the whole clip; this many steps make an epoch.
    pub steps_per_epoch: usize,
}

impl TrainConfig {
    pub fn new(mode: Mode, steps: usize) -> Self {
        Self {
            mode,
            steps,
            adversarial: false,
            pretrain_steps: steps / 2,
            seed: 0,
            disc: DiscConfig::default(),
            stft: StftConfig::loss_default(),
            steps_per_epoch: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub sc: f64,
    pub mag: f64,
    pub adv: f64,
    pub feat: f64,
    pub disc: f64,
}

impl TraceRow {
    pub const CSV_HEADER: &'static str = "step,sc,mag,adv,feat,disc";

    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{},{}", self.step, self.sc, self.mag, self.adv, self.feat, self.disc)
    }

    pub fn reconstruction(&self) -> f64 {
        self.sc + self.mag
    }
}

pub struct TrainOutcome {
    pub model: Generator,
    pub discriminators: Option<WeightStore>,
    pub trace: Vec<TraceRow>,
    /// Quantizer indices of the last step (guided mode).
    pub codes: Vec<u8>,
}

/// One training example with everything that does not depend on weights.
pub struct TrainPair {
    pub wb: AudioBuffer,
    /// 32 kHz target aligned with the extension output.
    pub target: Vec<f32>,
    pub frames: usize,
    sb4: SubbandSignal,
    mel: Tensor,
    windows: Tensor,
}

/// Builds the surrogate coded input and the aligned target for a clip.
pub fn surrogate_pair(clip: &AudioBuffer) -> Result<TrainPair> {
    clip.expect_rate(SWB_RATE)?;
    if clip.is_empty() {
        return Err(Error::ClipTooShort {
            len: 0,
            min: SWB_FRAME,
        });
    }
    if clip.len() % SWB_FRAME != 0 {
        return Err(Error::FrameAlignment {
            len: clip.len(),
            multiple: SWB_FRAME,
        });
    }
    let a8 = PrototypeFilter::default_for(8)?;
    let a4 = PrototypeFilter::default_for(4)?;
    let frames = clip.len() / SWB_FRAME;
    let sb8 = pqmf::analysis(clip, a8)?;
    let low: Vec<&[f32]> = (0..4).map(|k| sb8.band(k)).collect();
    let wb = pqmf::synthesis(&SubbandSignal::from_rows(&low)?, a4)?;
    // Group delay of the surrogate, in 32 kHz samples.
    let wb_delay = a8.delay() / 2 + a4.delay();
    let target = delayed(&clip.samples, wb_delay + system_delay()?);
    let encoder_input = AudioBuffer::new(delayed(&clip.samples, wb_delay), SWB_RATE)?;
    let windows = sideinfo::window_matrix(&pqmf::analysis(&encoder_input, a8)?, frames)?;

    let mel_frames = MelAnalyzer::new(MelConfig::default())?.stream(&wb.samples)?;
    let dim = mel_frames.first().map_or(0, |m| m.values.len());
    let mut mel = vec![0.0f32; dim * frames];
    for (f, v) in mel_frames.iter().enumerate() {
        for (c, &x) in v.values.iter().enumerate() {
            mel[c * frames + f] = x;
        }
    }
    let sb4 = pqmf::analysis(&wb, a4)?;
    Ok(TrainPair {
        wb,
        target,
        frames,
        sb4,
        mel: Tensor::matrix(dim, frames, mel)?,
        windows,
    })
}

fn delayed(x: &[f32], d: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; x.len()];
    if d < x.len() {
        y[d..].copy_from_slice(&x[..x.len() - d]);
    }
    y
}

/// Generator-side graph for one pair.
pub struct Objective<'g> {
    pub output: Var<'g>,
    pub sc: Var<'g>,
    pub mag: Var<'g>,
    pub adv: Option<Var<'g>>,
    pub feat: Option<Var<'g>>,
    pub total: Var<'g>,
    pub codes: Vec<u8>,
}

/// Discriminator ensemble with its weights and the features of the target.
pub struct AdversarySetup<'a> {
    pub cfg: &'a DiscConfig,
    pub store: &'a WeightStore,
    pub real_features: &'a [Vec<Vec<f32>>],
}

/// Records `sc + mag (+ adv + 10 feat)` for the current weights.
pub fn objective<'g>(
    ctx: &mut Ctx<'_, 'g>,
    model: &Generator,
    pair: &TrainPair,
    target_spec: &Spectrogram,
    stft: &StftConfig,
    adversary: Option<&AdversarySetup<'_>>,
) -> Result<Objective<'g>> {
    let g = ctx.graph;
    let sb4 = g.constant(Tensor::matrix(4, pair.sb4.len, pair.sb4.data.clone())?);
    let (cond, codes) = match model.mode() {
        Mode::Blind => (g.constant(pair.mel.clone()), Vec::new()),
        Mode::Guided => {
            let w = g.constant(pair.windows.clone());
            let h0 = g.constant(Tensor::zeros(&[model.cfg.side_hidden, 1]));
            let (z, _) = sideinfo::encoder_graph(ctx, w, h0)?;
            let (dq, codes) = z.quantize_st();
            (model.expand(ctx, dq)?, codes)
        }
    };
    let mut obj = subband_objective(ctx, model, sb4, cond, target_spec, stft, adversary)?;
    obj.codes = codes;
    Ok(obj)
}

/// Loss of the extension output for given coded subbands `[4, T]` and
/// conditioning `[cond_dim, T / 80]`.
pub fn subband_objective<'g>(
    ctx: &mut Ctx<'_, 'g>,
    model: &Generator,
    sb4: Var<'g>,
    cond: Var<'g>,
    target_spec: &Spectrogram,
    stft: &StftConfig,
    adversary: Option<&AdversarySetup<'_>>,
) -> Result<Objective<'g>> {
    let g = ctx.graph;
    let fwd = model.subbands(ctx, sb4, cond)?;
    let y = fwd.bands.pqmf_synthesis(PrototypeFilter::default_for(8)?)?;
    let spec = y.stft(stft.window, stft.hop)?.complex_magnitude()?;
    let sc = sc_graph(target_spec, spec)?;
    let mag = mag_graph(target_spec, spec)?;
    let mut total = sc.add(mag)?;
    let (mut adv, mut feat) = (None, None);
    if let Some(a) = adversary {
        let dctx = Ctx::new(g, a.store, None);
        let out = a.cfg.forward(&dctx, y)?;
        let real: Vec<Vec<Var<'g>>> = a
            .real_features
            .iter()
            .zip(&out.features)
            .map(|(rd, fd)| {
                rd.iter()
                    .zip(fd)
                    .map(|(r, f)| Ok(g.constant(Tensor::new(f.shape(), r.clone())?)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let a_loss = adv_gen_graph(g, &out.outputs)?;
        let f_loss = feat_graph(g, &real, &out.features)?;
        total = total.add(a_loss)?.add(f_loss.scale(losses::FEATURE_WEIGHT as f32))?;
        adv = Some(a_loss);
        feat = Some(f_loss);
    }
    Ok(Objective {
        output: y,
        sc,
        mag,
        adv,
        feat,
        total,
        codes: Vec::new(),
    })
}

fn param_grads(ctx: &Ctx<'_, '_>, grads: &crate::nnengine::Gradients, prefix_filter: impl Fn(&str) -> bool) -> Vec<(String, Vec<f32>)> {
    let mut out: Vec<(String, Vec<f32>)> = ctx
        .touched_params()
        .into_iter()
        .filter(|(n, _)| prefix_filter(n))
        .filter_map(|(n, v)| grads.get(v).map(|g| (n, g.to_vec())))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Trains a freshly initialized model on one clip.
///
/// Phase one minimizes `sc + mag`; with `adversarial` set, steps after
/// `pretrain_steps` add the least-squares adversarial loss and ten times the
/// feature loss, alternating with discriminator updates.
pub fn toy_train(clip: &AudioBuffer, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let min = cfg.stft.window.max(SWB_FRAME);
    if clip.len() < min {
        return Err(Error::ClipTooShort { len: clip.len(), min });
    }
    if clip.duration_secs() > MAX_CLIP_SECS {
        return Err(Error::InvalidConfig(format!("toy clips are limited to {MAX_CLIP_SECS} s")));
    }
    if cfg.adversarial && clip.len() < cfg.disc.min_len() {
        return Err(Error::ClipTooShort {
            len: clip.len(),
            min: cfg.disc.min_len(),
        });
    }
    let pair = surrogate_pair(clip)?;
    let target_spec = stft_magnitude(&pair.target, &cfg.stft);
    let mut model = Generator::init(GeneratorConfig::new(cfg.mode), cfg.seed)?;
    let mut opt_g = OptimizerState::generator();
    let mut opt_d = OptimizerState::discriminator();
    let mut disc_store = if cfg.adversarial { Some(cfg.disc.init(cfg.seed ^ 0xd15c)?) } else { None };
    let real_features = match &disc_store {
        Some(store) => {
            let g = Graph::inference();
            let ctx = Ctx::new(&g, store, None);
            let x = g.constant(Tensor::new(vec![pair.target.len()], pair.target.clone())?);
            Some(cfg.disc.forward(&ctx, x)?.feature_values())
        }
        None => None,
    };
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut codes = Vec::new();
    for step in 1..=cfg.steps {
        let adversarial = cfg.adversarial && step > cfg.pretrain_steps;
        // Features of the target change whenever the discriminators do.
        let real_now = match (&disc_store, adversarial) {
            (Some(store), true) => {
                let g = Graph::inference();
                let ctx = Ctx::new(&g, store, None);
                let x = g.constant(Tensor::new(vec![pair.target.len()], pair.target.clone())?);
                Some(cfg.disc.forward(&ctx, x)?.feature_values())
            }
            _ => real_features.clone(),
        };
        let g = Graph::new();
        let mut ctx = Ctx::new(&g, &model.store, None);
        let setup = match (&disc_store, &real_now, adversarial) {
            (Some(store), Some(rf), true) => Some(AdversarySetup {
                cfg: &cfg.disc,
                store,
                real_features: rf,
            }),
            _ => None,
        };
        let obj = objective(&mut ctx, &model, &pair, &target_spec, &cfg.stft, setup.as_ref())?;
        let report_g = (
            obj.sc.item() as f64,
            obj.mag.item() as f64,
            obj.adv.map_or(0.0, |v| v.item() as f64),
            obj.feat.map_or(0.0, |v| v.item() as f64),
        );
        if !obj.total.item().is_finite() {
            return Err(Error::NonFiniteLoss(step));
        }
        let grads = g.backward(obj.total)?;
        let gen_grads = param_grads(&ctx, &grads, |n| !n.starts_with("disc"));
        if gen_grads.iter().any(|(_, gv)| gv.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteLoss(step));
        }
        let fake = obj.output.value().data.clone();
        codes = obj.codes;
        drop(ctx);
        opt_g.apply(&mut model.store, &gen_grads)?;

        let mut disc_loss = 0.0;
        if let (true, Some(store)) = (adversarial, disc_store.as_mut()) {
            let g = Graph::new();
            let dctx = Ctx::new(&g, store, None);
            let real = g.constant(Tensor::new(vec![pair.target.len()], pair.target.clone())?);
            let fake = g.constant(Tensor::new(vec![fake.len()], fake)?);
            let r = cfg.disc.forward(&dctx, real)?;
            let f = cfg.disc.forward(&dctx, fake)?;
            let loss = disc_graph(&g, &r.outputs, &f.outputs)?;
            disc_loss = loss.item() as f64;
            if !disc_loss.is_finite() {
                return Err(Error::NonFiniteLoss(step));
            }
            let grads = g.backward(loss)?;
            let dg = param_grads(&dctx, &grads, |_| true);
            drop(dctx);
            opt_d.apply(store, &dg)?;
        }
        let report = LossReport::new(report_g.0, report_g.1, report_g.2, report_g.3, disc_loss);
        trace.push(TraceRow {
            step,
            sc: report.sc,
            mag: report.mag,
            adv: report.adv,
            feat: report.feat,
            disc: report.disc,
        });
        if step % cfg.steps_per_epoch.max(1) == 0 {
            opt_g.advance_epoch();
            opt_d.advance_epoch();
        }
    }
    Ok(TrainOutcome {
        model,
        discriminators: disc_store,
        trace,
        codes,
    })
}

/// Training steps taken before the end-to-end check.
pub const E2E_WARMUP_STEPS: usize = 200;
/// Largest step of the end-to-end check along a unit direction.
pub const E2E_MAX_STEP: f32 = 1e-3;
/// Loss change the end-to-end check aims for with each step.
pub const E2E_LOSS_CHANGE: f64 = 1e-4;

/// Finite-difference check of the full blind-mode loss (two frames) against
/// the analytic gradient of every generator parameter.
///
/// The log-magnitude term is the hard part. A freshly initialized generator
/// emits narrowband high bands whose spectral valleys sit five orders of
/// magnitude below their peaks, so `f32` rounding of the waveform swamps the
/// finite differences there. The check therefore runs at a trained point:
/// random output layers and bias offsets (zero biases would leave columns
/// computed only from zero history constant across channels, where each
/// channel norm amplifies gradients by `1/sqrt(eps)`), then a short training
/// run on a noise clip. The clip carries a DC offset so that the real-valued
/// DC bins stay clear of zero. The target is twice the model's own output,
/// which keeps every log-magnitude difference near ln 2, away from the kink
/// of the absolute value.
pub fn end_to_end_gradcheck(seed: u64, tolerance: f64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Generator::init(GeneratorConfig::blind(), seed)?;
    let names: Vec<String> = model.store.tensors.keys().cloned().collect();
    for name in &names {
        let output_layer = matches!(name.as_str(), "post.pw" | "post.b" | "comp.conv2.w");
        let offset = name.ends_with(".b") || name.ends_with(".shift");
        if !output_layer && !offset {
            continue;
        }
        let t = model.store.get(name)?.as_ref().clone();
        let data = t
            .data
            .iter()
            .map(|&v| if output_layer { rng.gen_range(-0.3f32..0.3) } else { v + rng.gen_range(-0.2f32..0.2) })
            .collect();
        model.store.insert(name.clone(), Tensor::new(t.shape.clone(), data)?);
    }
    let samples: Vec<f32> = (0..2 * SWB_FRAME).map(|_| 0.25 + rng.gen_range(-0.5f32..0.5)).collect();
    let pair = surrogate_pair(&AudioBuffer::new(samples, SWB_RATE)?)?;
    let stft = StftConfig::loss_default();

    let real_spec = stft_magnitude(&pair.target, &stft);
    let mut opt = OptimizerState::generator();
    for _ in 0..E2E_WARMUP_STEPS {
        let g = Graph::new();
        let mut ctx = Ctx::new(&g, &model.store, None);
        let obj = objective(&mut ctx, &model, &pair, &real_spec, &stft, None)?;
        let grads = g.backward(obj.total)?;
        let step = param_grads(&ctx, &grads, |_| true);
        drop(ctx);
        opt.apply(&mut model.store, &step)?;
    }

    let doubled: Vec<f32> = {
        let g = Graph::inference();
        let mut ctx = Ctx::new(&g, &model.store, None);
        let y = objective(&mut ctx, &model, &pair, &real_spec, &stft, None)?.output.value();
        y.data.iter().map(|v| 2.0 * v).collect()
    };
    let target_spec = stft_magnitude(&doubled, &stft);
    let inputs: Vec<Tensor> = names.iter().map(|n| model.store.get(n).map(|t| t.as_ref().clone())).collect::<Result<_>>()?;
    gradcheck::check_directional("end_to_end_blind", &inputs, E2E_MAX_STEP, E2E_LOSS_CHANGE, tolerance, seed, 1, |g, vars| {
        let mut ctx = Ctx::new(g, &model.store, None);
        for (n, v) in names.iter().zip(vars) {
            ctx.bind(n, *v);
        }
        Ok(objective(&mut ctx, &model, &pair, &target_spec, &stft, None)?.total)
    })
}

/// A deterministic speech-like test signal at 32 kHz: voiced syllables
/// (glottal pulses through moving formant resonators), fricative noise
/// bursts with energy up to 14 kHz, and short pauses. The length is rounded
/// down to whole 20 ms frames.
pub fn speech_like_clip(seconds: f64, seed: u64) -> Result<AudioBuffer> {
    let fs = SWB_RATE as f64;
    let n = ((seconds * fs) as usize) / SWB_FRAME * SWB_FRAME;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![0.0f32; n];
    let mut pos = 0usize;
    let mut phase = 0.0f64;
    while pos < n {
        let kind = rng.gen_range(0..10);
        let len = (rng.gen_range(0.08..0.22) * fs) as usize;
        let end = (pos + len).min(n);
        let seg = end - pos;
        let ramp = (0.01 * fs) as usize;
        let env = |i: usize| -> f64 {
            let a = (i.min(seg - 1 - i.min(seg - 1)) as f64 / ramp as f64).min(1.0);
            0.5 - 0.5 * (std::f64::consts::PI * a).cos()
        };
        match kind {
            0..=5 => {
                let f0 = rng.gen_range(100.0..190.0);
                let formants: Vec<(f64, f64, f64)> = [
                    (rng.gen_range(300.0..800.0), 80.0, 1.0),
                    (rng.gen_range(900.0..2300.0), 110.0, 0.6),
                    (rng.gen_range(2400.0..3200.0), 160.0, 0.35),
                    (rng.gen_range(3500.0..4500.0), 250.0, 0.2),
                    (rng.gen_range(5500.0..7500.0), 600.0, 0.08),
                    (rng.gen_range(9000.0..12000.0), 1200.0, 0.03),
                ]
                .to_vec();
                let mut res: Vec<Resonator> = formants.iter().map(|&(f, bw, g)| Resonator::new(f, bw, g, fs)).collect();
                for i in 0..seg {
                    let f = f0 * (1.0 + 0.03 * (2.0 * std::f64::consts::PI * 5.0 * i as f64 / fs).sin());
                    phase += f / fs;
                    let pulse = if phase >= 1.0 {
                        phase -= 1.0;
                        1.0
                    } else {
                        0.0
                    };
                    let src = pulse + 0.02 * rng.gen_range(-1.0..1.0);
                    let y: f64 = res.iter_mut().map(|r| r.tick(src)).sum();
                    x[pos + i] = (0.8 * y * env(i)) as f32;
                }
            }
            6..=8 => {
                let centre = rng.gen_range(4500.0..11000.0);
                let mut res = [Resonator::new(centre, 2500.0, 1.0, fs), Resonator::new(centre * 1.3, 3000.0, 0.7, fs)];
                let amp = rng.gen_range(0.1..0.3);
                for i in 0..seg {
                    let src = rng.gen_range(-1.0..1.0);
                    let y: f64 = res.iter_mut().map(|r| r.tick(src)).sum();
                    x[pos + i] = (amp * y * env(i)) as f32;
                }
            }
            _ => {}
        }
        pos = end;
    }
    let peak = x.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    AudioBuffer::new(x, SWB_RATE)
}

struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bandwidth: f64, gain: f64, fs: f64) -> Self {
        let r = (-std::f64::consts::PI * bandwidth / fs).exp();
        let theta = 2.0 * std::f64::consts::PI * freq / fs;
        Self {
            a1: 2.0 * r * theta.cos(),
            a2: -r * r,
            gain: gain * (1.0 - r),
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_clip_is_too_short() {
        let clip = AudioBuffer::new(Vec::new(), SWB_RATE).unwrap();
        let cfg = TrainConfig::new(Mode::Blind, 1);
        assert!(matches!(toy_train(&clip, &cfg), Err(Error::ClipTooShort { len: 0, .. })));
    }

    #[test]
    fn surrogate_keeps_the_low_band() {
        let clip = speech_like_clip(0.5, 3).unwrap();
        let pair = surrogate_pair(&clip).unwrap();
        assert_eq!(pair.wb.len() * 2, clip.len());
        assert_eq!(pair.target.len(), clip.len());
        assert!(pair.target[..256].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn speech_clip_is_framed_and_bounded() {
        let c = speech_like_clip(1.0, 9).unwrap();
        assert_eq!(c.len(), 32000);
        assert!(c.samples.iter().all(|v| v.abs() <= 0.5 + 1e-6));
    }
}
