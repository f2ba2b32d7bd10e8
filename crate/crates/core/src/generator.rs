//! The synthesis network and the full 16 kHz -> 32 kHz extension pipeline.
//!
//! Pipeline per 20 ms frame: 4-band analysis of the wideband input, a U-Net
//! of six downsample and six upsample blocks producing four high subbands,
//! overlap compensation of (coded band 3, generated band 0), and 8-band
//! synthesis. The downsample blocks also turn the conditioning into TADE
//! parameters for their mirror upsample blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audioio::{AudioBuffer, SWB_RATE, WB_RATE};
use crate::conditioning::{MelAnalyzer, MelConfig};
use crate::error::{Error, Result};
use crate::nnengine::{self, concat_rows, dequantize, ComplexityReport, Ctx, Graph, LayerKind, LayerSpec, Rational, StreamState, Tensor, Var, WeightStore};
use crate::pqmf::{self, PqmfState, PrototypeFilter, SubbandSignal};
use crate::sideinfo;

pub const FRAME_RATE: u64 = 50;
/// Wideband samples per 20 ms frame.
pub const WB_FRAME: usize = 320;
/// Super-wideband samples per 20 ms frame.
pub const SWB_FRAME: usize = 640;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Blind,
    Guided,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blind" => Ok(Mode::Blind),
            "guided" => Ok(Mode::Guided),
            other => Err(Error::InvalidConfig(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub mode: Mode,
    pub down_channels: Vec<usize>,
    /// Rate reduction of each downsample block.
    pub down_factors: Vec<Rational>,
    pub cond_up_factors: Vec<usize>,
    pub kernel_size: usize,
    pub frame_subband_steps: usize,
    pub bottleneck_channels: usize,
    pub bottleneck_steps: usize,
    pub cond_dim: usize,
    pub num_bands: usize,
    pub pre_channels: usize,
    pub comp_hidden: usize,
    /// Side-info encoder widths (guided mode).
    pub side_window: usize,
    pub side_hidden: usize,
}

impl GeneratorConfig {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            down_channels: vec![8, 16, 32, 48, 48, 64],
            down_factors: vec![
                Rational::ONE,
                Rational::new(2, 1),
                Rational::new(2, 1),
                Rational::new(2, 1),
                Rational::new(5, 2),
                Rational::new(2, 1),
            ],
            cond_up_factors: vec![80, 80, 40, 20, 10, 4],
            kernel_size: 7,
            frame_subband_steps: 80,
            bottleneck_channels: 64,
            bottleneck_steps: 2,
            cond_dim: 80,
            num_bands: 4,
            pre_channels: 8,
            comp_hidden: 16,
            side_window: sideinfo::WINDOW_LEN,
            side_hidden: 80,
        }
    }

    pub fn blind() -> Self {
        Self::new(Mode::Blind)
    }

    pub fn guided() -> Self {
        Self::new(Mode::Guided)
    }

    /// Product of the downsample factors as an exact ratio.
    pub fn total_down_factor(&self) -> Rational {
        let (n, d) = self
            .down_factors
            .iter()
            .fold((1usize, 1usize), |(n, d), f| (n * f.num, d * f.den));
        Rational::new(n, d)
    }

    /// Steps per frame at the input of each downsample block.
    pub fn block_input_steps(&self) -> Result<Vec<usize>> {
        let mut steps = Vec::with_capacity(self.down_factors.len());
        let mut t = self.frame_subband_steps;
        for f in &self.down_factors {
            steps.push(t);
            if (t * f.den) % f.num != 0 {
                return Err(Error::InvalidConfig(format!("{t} steps do not divide by {}/{}", f.num, f.den)));
            }
            t = t * f.den / f.num;
        }
        Ok(steps)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.down_channels.len();
        if n == 0 || self.down_factors.len() != n || self.cond_up_factors.len() != n {
            return Err(Error::InvalidConfig("block lists differ in length".into()));
        }
        if self.num_bands != 4 || self.kernel_size != 7 {
            return Err(Error::InvalidConfig("4 input bands and kernel size 7 are fixed".into()));
        }
        let steps = self.block_input_steps()?;
        if steps != self.cond_up_factors {
            return Err(Error::InvalidConfig(format!(
                "conditioning factors {:?} differ from block input steps {steps:?}",
                self.cond_up_factors
            )));
        }
        let total = self.total_down_factor();
        if total.den != 1 || self.frame_subband_steps / total.num != self.bottleneck_steps || self.frame_subband_steps % total.num != 0 {
            return Err(Error::InvalidConfig(format!(
                "{} steps / {}/{} != {} bottleneck steps",
                self.frame_subband_steps, total.num, total.den, self.bottleneck_steps
            )));
        }
        if self.down_channels.last() != Some(&self.bottleneck_channels) {
            return Err(Error::InvalidConfig("last block width must equal the bottleneck".into()));
        }
        Ok(())
    }
}

fn rate_after(rate: u64, f: Rational) -> u64 {
    rate * f.den as u64 / f.num as u64
}

/// Every layer of the configured system, in execution order.
pub fn layer_specs(cfg: &GeneratorConfig) -> Result<Vec<LayerSpec>> {
    use LayerKind::*;
    cfg.validate()?;
    let k = cfg.kernel_size;
    let sr = pqmf::SUBBAND_RATE as u64;
    let mut v = Vec::new();
    let spec = |name: String, kind, ci, co, kk, rate| LayerSpec::new(name, kind, ci, co, kk, rate);

    let a4 = PrototypeFilter::default_for(4)?;
    let s8 = PrototypeFilter::default_for(8)?;
    v.push(spec("pqmf.analysis4".into(), Fir, 1, 4, a4.len(), WB_RATE as u64));
    match cfg.mode {
        Mode::Blind => {
            let mel = MelConfig::default();
            v.push(spec("mel".into(), MelFrontEnd, mel.fft_size, mel.num_mels, mel.window_len(), FRAME_RATE));
        }
        Mode::Guided => {
            let h = cfg.side_hidden;
            v.push(spec("side.analysis8".into(), Fir, 1, 8, s8.len(), SWB_RATE as u64));
            v.push(spec("side.pw_in".into(), PointwiseConv, cfg.side_window, h, 1, FRAME_RATE));
            v.push(spec("side.gru".into(), Gru, h, h, 1, FRAME_RATE));
            v.push(spec("side.pw_out".into(), PointwiseConv, h, h, 1, FRAME_RATE));
            v.push(spec("side.act".into(), Activation, h, h, 1, FRAME_RATE));
            v.push(spec("side.proj".into(), Linear, h, 1, 1, FRAME_RATE));
            v.push(spec("side.expand".into(), Linear, 1, cfg.cond_dim, 1, FRAME_RATE));
        }
    }

    v.push(spec("pre".into(), Dsconv1d, cfg.num_bands, cfg.pre_channels, k, sr));
    let mut rate = sr;
    let mut cin = cfg.pre_channels;
    let mut blocks = Vec::new();
    for (i, (&c, &f)) in cfg.down_channels.iter().zip(&cfg.down_factors).enumerate() {
        let rout = rate_after(rate, f);
        let mut norm = spec(format!("down{i}.norm"), ChannelNorm, cin, cin, 1, rate);
        norm.affine = true;
        v.push(norm);
        v.push(spec(format!("down{i}.gate_in"), Dsconv1d, cin, 2 * c, k, rate));
        v.push(spec(format!("down{i}.gate"), Gated, c, c, 1, rate));
        v.push(spec(format!("down{i}.conv_a"), Dsconv1d, c, c, k, rate));
        if f != Rational::ONE {
            let mut r = spec(format!("down{i}.resample"), Interp, c, c, 1, rout);
            r.interp_factor = f.recip();
            v.push(r);
        }
        v.push(spec(format!("down{i}.conv_b"), Dsconv1d, c, c, k, rout));

        let mut cc = spec(format!("cond{i}.conv"), Dsconv1d, cfg.cond_dim, 2 * c, k, rate);
        cc.distinct_per_frame = Some(cfg.cond_up_factors[i].min(k));
        v.push(cc);
        v.push(spec(format!("cond{i}.merge"), Add, 2 * c, 2 * c, 1, rate));
        if f != Rational::ONE {
            let mut r = spec(format!("cond{i}.resample"), Interp, 2 * c, 2 * c, 1, rout);
            r.interp_factor = f.recip();
            v.push(r);
        }
        for name in ["gamma1", "beta1", "gamma2", "beta2"] {
            v.push(spec(format!("tade{i}.{name}"), Dsconv1d, 2 * c, c, k, rout));
        }
        blocks.push((cin, c, rate, rout, f));
        rate = rout;
        cin = c;
    }
    for (i, &(cin, c, rin, rout, f)) in blocks.iter().enumerate().rev() {
        for round in 1..=2 {
            v.push(spec(format!("up{i}.norm{round}"), ChannelNorm, c, c, 1, rout));
            v.push(spec(format!("up{i}.tade{round}"), Tade, c, c, 1, rout));
            v.push(spec(format!("up{i}.conv{round}"), Dsconv1d, c, 2 * c, k, rout));
            v.push(spec(format!("up{i}.gate{round}"), Gated, c, c, 1, rout));
        }
        v.push(spec(format!("up{i}.residual"), Add, c, c, 1, rout));
        v.push(spec(format!("up{i}.proj"), Dsconv1d, c, cin, k, rout));
        if f != Rational::ONE {
            let mut r = spec(format!("up{i}.resample"), Interp, cin, cin, 1, rin);
            r.interp_factor = f;
            v.push(r);
        }
    }
    v.push(spec("post".into(), Dsconv1d, cfg.pre_channels, cfg.num_bands, k, sr));
    v.push(spec("comp.conv1".into(), CausalConv1d, 2, cfg.comp_hidden, k, sr));
    v.push(spec("comp.act".into(), Activation, cfg.comp_hidden, cfg.comp_hidden, 1, sr));
    v.push(spec("comp.conv2".into(), CausalConv1d, cfg.comp_hidden, 2, k, sr));
    v.push(spec("comp.residual".into(), Add, 2, 2, 1, sr));
    v.push(spec("pqmf.synthesis8".into(), Fir, 8, 1, s8.len(), SWB_RATE as u64));
    for s in &v {
        s.validate()?;
    }
    Ok(v)
}

pub fn count_params(cfg: &GeneratorConfig) -> Result<usize> {
    Ok(nnengine::count_params(&layer_specs(cfg)?))
}

pub fn count_flops_per_second(cfg: &GeneratorConfig) -> Result<u64> {
    Ok(nnengine::count_flops_per_second(&layer_specs(cfg)?))
}

/// Initial scale of a layer's weights relative to `1/sqrt(fan_in)`.
fn init_gain(layer: &str) -> f32 {
    if layer.starts_with("cond") {
        0.1
    } else {
        1.0
    }
}

/// Random initial weights. The post-conv pointwise weights and the second
/// compensator layer start at zero, so an untrained model outputs silent high
/// bands and passes the coded bands through unchanged.
pub fn init_weights(cfg: &GeneratorConfig, seed: u64) -> Result<WeightStore> {
    let specs = layer_specs(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new(serde_json::to_string(cfg).map_err(|e| Error::InvalidConfig(e.to_string()))?);
    for s in &specs {
        let gain = init_gain(&s.name);
        for (name, shape) in s.param_shapes() {
            let n: usize = shape.iter().product();
            let suffix = name.rsplit('.').next().unwrap_or("");
            let fan_in = match (s.kind, suffix) {
                (LayerKind::Dsconv1d, "dw") => s.kernel_size,
                (LayerKind::CausalConv1d, "w") => s.in_channels * s.kernel_size,
                (LayerKind::Gru, _) => s.out_channels,
                _ => s.in_channels,
            };
            let bound = gain / (fan_in as f32).sqrt();
            let zero = (s.name == "post" && suffix != "dw") || s.name == "comp.conv2";
            let data: Vec<f32> = match suffix {
                _ if zero => vec![0.0; n],
                "scale" => vec![1.0; n],
                "shift" => vec![0.0; n],
                "b" if s.name.contains(".gamma") => vec![1.0; n],
                "b" if s.kind != LayerKind::CausalConv1d => vec![0.0; n],
                _ => (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
            };
            store.insert(name, Tensor::new(shape, data)?);
        }
    }
    Ok(store)
}

/// Outputs of one forward pass.
pub struct Forward<'g> {
    /// All eight subbands entering the synthesis bank, `[8, T]`.
    pub bands: Var<'g>,
    /// Generated high bands before compensation, `[4, T]`.
    pub generated: Var<'g>,
    /// Last downsample block output, `[64, T / 40]`.
    pub bottleneck: Var<'g>,
}

/// A built model: configuration, validated weights and layer list.
#[derive(Debug, Clone)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub store: WeightStore,
    specs: Vec<LayerSpec>,
}

impl Generator {
    pub fn build(cfg: GeneratorConfig, store: WeightStore) -> Result<Self> {
        let specs = layer_specs(&cfg)?;
        store.validate(&specs)?;
        Ok(Self { cfg, store, specs })
    }

    pub fn init(cfg: GeneratorConfig, seed: u64) -> Result<Self> {
        let store = init_weights(&cfg, seed)?;
        Self::build(cfg, store)
    }

    /// Builds from a container, reading the configuration it carries.
    pub fn from_store(store: WeightStore) -> Result<Self> {
        let cfg: GeneratorConfig = serde_json::from_str(&store.config)
            .map_err(|e| Error::InvalidConfig(format!("weight file config: {e}")))?;
        Self::build(cfg, store)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_store(nnengine::load_weights(bytes)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        nnengine::save_weights(&self.store)
    }

    pub fn mode(&self) -> Mode {
        self.cfg.mode
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn param_count(&self) -> usize {
        nnengine::count_params(&self.specs)
    }

    pub fn complexity(&self) -> Result<ComplexityReport> {
        nnengine::complexity(&self.specs)
    }

    /// Fresh zeroed stream state for the decoder-side layers.
    pub fn new_state(&self) -> StreamState {
        StreamState::new(&self.specs)
    }

    /// Synthesis network: `[4, T]` subbands and `[cond_dim, T / 80]`
    /// conditioning to `[4, T]` generated high bands.
    pub fn forward<'g>(&self, ctx: &mut Ctx<'_, 'g>, x: Var<'g>, cond: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let cfg = &self.cfg;
        let steps = x.shape()[1];
        let frames = cond.shape()[1];
        if x.shape()[0] != cfg.num_bands || steps != frames * cfg.frame_subband_steps || cond.shape()[0] != cfg.cond_dim {
            return Err(Error::shape(
                "generator",
                format!("subbands {:?} with conditioning {:?}", x.shape(), cond.shape()),
            ));
        }
        let mut h = ctx.dsconv("pre", x)?;
        let mut tade = Vec::with_capacity(cfg.down_channels.len());
        for (i, (&c, &f)) in cfg.down_channels.iter().zip(&cfg.down_factors).enumerate() {
            let n = ctx.channel_norm(&format!("down{i}.norm"), h)?;
            let pre = ctx.dsconv(&format!("down{i}.gate_in"), n)?;
            let g = pre.rows(0, c)?.gated(pre.rows(c, c)?)?;
            let a = ctx.dsconv(&format!("down{i}.conv_a"), g)?;
            let d = downsample(a, f)?;
            h = ctx.dsconv(&format!("down{i}.conv_b"), d)?;
            let cu = ctx.cond_dsconv(&format!("cond{i}.conv"), cond, cfg.cond_up_factors[i])?;
            let m = pre.add(cu)?;
            tade.push(downsample(m, f)?);
        }
        let bottleneck = h;
        for (i, (&c, &f)) in cfg.down_channels.iter().zip(&cfg.down_factors).enumerate().rev() {
            let x_in = h;
            let mut a = x_in;
            for round in 1..=2 {
                let gamma = ctx.dsconv(&format!("tade{i}.gamma{round}"), tade[i])?;
                let beta = ctx.dsconv(&format!("tade{i}.beta{round}"), tade[i])?;
                let z = a.channel_normalize()?.mul(gamma)?.add(beta)?;
                let p = ctx.dsconv(&format!("up{i}.conv{round}"), z)?;
                a = p.rows(0, c)?.gated(p.rows(c, c)?)?;
            }
            let y = x_in.add(a)?;
            let p = ctx.dsconv(&format!("up{i}.proj"), y)?;
            h = if f == Rational::ONE {
                p
            } else {
                ctx.upsample(&format!("up{i}.resample"), p, f.num, f.den)?
            };
        }
        let out = ctx.dsconv("post", h)?;
        Ok((out, bottleneck))
    }

    /// Residual correction of (coded band 3, generated band 0), each `[1, T]`.
    pub fn compensate<'g>(&self, ctx: &mut Ctx<'_, 'g>, coded_top: Var<'g>, gen_bottom: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        if coded_top.shape() != gen_bottom.shape() {
            return Err(Error::shape("overlap_compensate", format!("{:?} vs {:?}", coded_top.shape(), gen_bottom.shape())));
        }
        let x = concat_rows(&[coded_top, gen_bottom])?;
        let h = ctx.conv1d("comp.conv1", x)?.tanh();
        let c = ctx.conv1d("comp.conv2", h)?;
        let y = x.add(c)?;
        Ok((y.rows(0, 1)?, y.rows(1, 1)?))
    }

    /// Generator plus compensation: the eight synthesis-bank inputs.
    pub fn subbands<'g>(&self, ctx: &mut Ctx<'_, 'g>, sb4: Var<'g>, cond: Var<'g>) -> Result<Forward<'g>> {
        let (generated, bottleneck) = self.forward(ctx, sb4, cond)?;
        let (c3, g0) = self.compensate(ctx, sb4.rows(3, 1)?, generated.rows(0, 1)?)?;
        let bands = concat_rows(&[sb4.rows(0, 3)?, c3, g0, generated.rows(1, 3)?])?;
        Ok(Forward {
            bands,
            generated,
            bottleneck,
        })
    }

    /// Guided conditioning from dequantized codes `[1, F]` to `[cond_dim, F]`.
    pub fn expand<'g>(&self, ctx: &Ctx<'_, 'g>, dequant: Var<'g>) -> Result<Var<'g>> {
        if self.cfg.mode != Mode::Guided {
            return Err(Error::InvalidConfig("side-info expansion needs a guided model".into()));
        }
        ctx.pointwise("side.expand", dequant)
    }

    pub fn expand_sideinfo(&self, dequant: f32) -> Result<Tensor> {
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &self.store, None);
        let v = self.expand(&ctx, g.constant(Tensor::matrix(1, 1, vec![dequant])?))?;
        Tensor::new(vec![self.cfg.cond_dim], v.value().data.clone())
    }

    /// One 20 ms frame: `[4, 80]` coded subbands and a conditioning vector in,
    /// `[4, 80]` generated high bands out. Also returns the bottleneck shape.
    pub fn forward_frame(&self, sb_in: &SubbandSignal, cond: &Tensor, state: &mut StreamState) -> Result<(SubbandSignal, Vec<usize>)> {
        let g = Graph::inference();
        let x = g.constant(Tensor::matrix(sb_in.num_bands, sb_in.len, sb_in.data.clone())?);
        let c = g.constant(Tensor::matrix(cond.numel(), 1, cond.data.clone())?);
        let mut ctx = Ctx::new(&g, &self.store, Some(state));
        let (out, bn) = self.forward(&mut ctx, x, c)?;
        let v = out.value();
        Ok((
            SubbandSignal {
                num_bands: v.shape[0],
                len: v.shape[1],
                data: v.data.clone(),
                subband_rate: pqmf::SUBBAND_RATE,
            },
            bn.shape(),
        ))
    }

    /// Stateless overlap compensation of two equal-length band signals.
    pub fn overlap_compensate(&self, coded_top: &[f32], gen_bottom: &[f32]) -> Result<(Vec<f32>, Vec<f32>)> {
        let g = Graph::inference();
        let a = g.constant(Tensor::matrix(1, coded_top.len(), coded_top.to_vec())?);
        let b = g.constant(Tensor::matrix(1, gen_bottom.len(), gen_bottom.to_vec())?);
        let mut ctx = Ctx::new(&g, &self.store, None);
        let (x, y) = self.compensate(&mut ctx, a, b)?;
        let (x, y) = (x.value(), y.value());
        Ok((x.data.clone(), y.data.clone()))
    }
}

fn downsample<'g>(x: Var<'g>, f: Rational) -> Result<Var<'g>> {
    if f == Rational::ONE {
        Ok(x)
    } else {
        x.interp_linear(f.den, f.num)
    }
}

/// Where the per-frame conditioning comes from.
#[derive(Debug, Clone, Copy)]
pub enum CondSource<'a> {
    Blind,
    /// One 4-bit code per 20 ms frame.
    Guided(&'a [u8]),
}

/// Result of [`extend`].
#[derive(Debug, Clone)]
pub struct Extended {
    pub audio: AudioBuffer,
    /// Output sample `2n + delay_samples` corresponds to input sample `n`.
    pub delay_samples: usize,
}

/// Total delay of analysis (4 bands, 16 kHz) plus synthesis (8 bands,
/// 32 kHz), in 32 kHz samples.
pub fn system_delay() -> Result<usize> {
    let a4 = PrototypeFilter::default_for(4)?;
    let s8 = PrototypeFilter::default_for(8)?;
    Ok(a4.delay() + s8.delay() / 2)
}

fn check_mode(model: &Generator, source: &CondSource<'_>) -> Result<()> {
    match (model.mode(), source) {
        (Mode::Blind, CondSource::Blind) | (Mode::Guided, CondSource::Guided(_)) => Ok(()),
        (m, _) => Err(Error::InvalidConfig(format!("conditioning source does not match a {m:?} model"))),
    }
}

fn check_codes(codes: &[u8], frames: usize) -> Result<()> {
    if codes.len() != frames {
        return Err(Error::FrameCountMismatch {
            bitstream: codes.len(),
            audio: frames,
        });
    }
    if let Some(&c) = codes.iter().find(|&&c| c > 15) {
        return Err(Error::CodeOutOfRange(c));
    }
    Ok(())
}

/// Conditioning value for the flush frame past the end: the last code held.
fn flush_code(codes: &[u8]) -> u8 {
    codes.last().copied().unwrap_or(8)
}

/// Batch extension of a whole 16 kHz signal in one pass.
///
/// The input is followed by one zero frame so the synthesis tail is flushed;
/// the output holds `2 * len + delay_samples` samples.
pub fn extend(x_wb: &AudioBuffer, source: CondSource<'_>, model: &Generator) -> Result<Extended> {
    x_wb.expect_rate(WB_RATE)?;
    check_mode(model, &source)?;
    if x_wb.len() % WB_FRAME != 0 {
        return Err(Error::FrameAlignment {
            len: x_wb.len(),
            multiple: WB_FRAME,
        });
    }
    let frames = x_wb.len() / WB_FRAME;
    let mut xp = x_wb.samples.clone();
    xp.extend(std::iter::repeat(0.0).take(WB_FRAME));
    let a4 = PrototypeFilter::default_for(4)?;
    let s8 = PrototypeFilter::default_for(8)?;
    let sb = pqmf::analysis(&AudioBuffer::new(xp.clone(), WB_RATE)?, a4)?;

    let g = Graph::inference();
    let mut ctx = Ctx::new(&g, &model.store, None);
    let cond = match source {
        CondSource::Blind => {
            let mel = MelAnalyzer::new(MelConfig::default())?.stream(&xp)?;
            let mut m = vec![0.0f32; model.cfg.cond_dim * (frames + 1)];
            for (f, v) in mel.iter().enumerate() {
                for (c, &x) in v.values.iter().enumerate() {
                    m[c * (frames + 1) + f] = x;
                }
            }
            g.constant(Tensor::matrix(model.cfg.cond_dim, frames + 1, m)?)
        }
        CondSource::Guided(codes) => {
            check_codes(codes, frames)?;
            let mut dq: Vec<f32> = codes.iter().map(|&c| dequantize(c)).collect();
            dq.push(dequantize(flush_code(codes)));
            let d = g.constant(Tensor::matrix(1, frames + 1, dq)?);
            model.expand(&ctx, d)?
        }
    };
    let x = g.constant(Tensor::matrix(4, sb.len, sb.data)?);
    let fwd = model.subbands(&mut ctx, x, cond)?;
    let bands = fwd.bands.value();
    let sb8 = SubbandSignal {
        num_bands: 8,
        len: bands.shape[1],
        data: bands.data.clone(),
        subband_rate: pqmf::SUBBAND_RATE,
    };
    let mut y = pqmf::synthesis(&sb8, s8)?.samples;
    let delay = system_delay()?;
    y.truncate(2 * x_wb.len() + delay);
    Ok(Extended {
        audio: AudioBuffer::new(y, SWB_RATE)?,
        delay_samples: delay,
    })
}

/// Frame-by-frame extension with a 5 ms look-ahead.
///
/// Frame `i` is processed once input samples up to `320 (i + 1) + 80` are
/// available. Feeding a signal in any chunking and calling [`finish`]
/// produces exactly the output of [`extend`].
///
/// [`finish`]: Extender::finish
pub struct Extender<'m> {
    model: &'m Generator,
    codes: Option<Vec<u8>>,
    mel: MelAnalyzer,
    a4_state: PqmfState,
    s8_state: PqmfState,
    state: StreamState,
    /// Input samples from `base` on.
    buf: Vec<f32>,
    base: usize,
    received: usize,
    next_frame: usize,
    emitted: usize,
    finished: bool,
}

impl<'m> Extender<'m> {
    pub fn new(model: &'m Generator, source: CondSource<'_>) -> Result<Self> {
        check_mode(model, &source)?;
        let codes = match source {
            CondSource::Blind => None,
            CondSource::Guided(c) => {
                if let Some(&bad) = c.iter().find(|&&v| v > 15) {
                    return Err(Error::CodeOutOfRange(bad));
                }
                Some(c.to_vec())
            }
        };
        Ok(Self {
            model,
            codes,
            mel: MelAnalyzer::new(MelConfig::default())?,
            a4_state: PqmfState::new(PrototypeFilter::default_for(4)?),
            s8_state: PqmfState::new(PrototypeFilter::default_for(8)?),
            state: model.new_state(),
            buf: Vec::new(),
            base: 0,
            received: 0,
            next_frame: 0,
            emitted: 0,
            finished: false,
        })
    }

    /// Samples of look-ahead beyond the current frame.
    pub fn lookahead(&self) -> usize {
        self.mel.config().lookahead()
    }

    /// Feeds input; returns every output sample that became available.
    pub fn push(&mut self, chunk: &[f32]) -> Result<Vec<f32>> {
        if self.finished {
            return Err(Error::InvalidConfig("push after finish".into()));
        }
        self.buf.extend_from_slice(chunk);
        self.received += chunk.len();
        let mut out = Vec::new();
        while (self.next_frame + 1) * WB_FRAME + self.lookahead() <= self.base + self.buf.len() {
            out.extend(self.process_frame(false)?);
        }
        self.emitted += out.len();
        Ok(out)
    }

    /// Flushes the remaining frames and the synthesis tail.
    pub fn finish(mut self) -> Result<Vec<f32>> {
        if self.received % WB_FRAME != 0 {
            return Err(Error::FrameAlignment {
                len: self.received,
                multiple: WB_FRAME,
            });
        }
        let frames = self.received / WB_FRAME;
        if let Some(codes) = &self.codes {
            check_codes(codes, frames)?;
        }
        self.finished = true;
        let pad = (frames + 1) * WB_FRAME + self.lookahead() - (self.base + self.buf.len());
        self.buf.extend(std::iter::repeat(0.0).take(pad));
        let mut out = Vec::new();
        while self.next_frame <= frames {
            let flush = self.next_frame == frames;
            out.extend(self.process_frame(flush)?);
        }
        let total = 2 * self.received + system_delay()?;
        out.truncate(total.saturating_sub(self.emitted));
        Ok(out)
    }

    fn process_frame(&mut self, flush: bool) -> Result<Vec<f32>> {
        let i = self.next_frame;
        let start = i * WB_FRAME - self.base;
        let frame = self.buf[start..start + WB_FRAME].to_vec();
        let cond = match &self.codes {
            None => {
                let ctx_start = (i * WB_FRAME) as isize - self.mel.config().context() as isize;
                let win: Vec<f32> = (0..self.mel.config().window_len() as isize)
                    .map(|j| {
                        let idx = ctx_start + j;
                        if idx < 0 {
                            0.0
                        } else {
                            self.buf[idx as usize - self.base]
                        }
                    })
                    .collect();
                Tensor::new(vec![self.model.cfg.cond_dim], self.mel.frame(&win)?.values)?
            }
            Some(codes) => {
                let code = if flush {
                    flush_code(codes)
                } else {
                    *codes.get(i).ok_or(Error::FrameCountMismatch {
                        bitstream: codes.len(),
                        audio: i + 1,
                    })?
                };
                self.model.expand_sideinfo(dequantize(code))?
            }
        };
        let a4 = PrototypeFilter::default_for(4)?;
        let s8 = PrototypeFilter::default_for(8)?;
        let sb = pqmf::analysis_step(&frame, a4, &mut self.a4_state)?;

        let g = Graph::inference();
        let x = g.constant(Tensor::matrix(4, sb.len, sb.data)?);
        let c = g.constant(Tensor::matrix(cond.numel(), 1, cond.data)?);
        let mut ctx = Ctx::new(&g, &self.model.store, Some(&mut self.state));
        let fwd = self.model.subbands(&mut ctx, x, c)?;
        let bands = fwd.bands.value();
        let sb8 = SubbandSignal {
            num_bands: 8,
            len: bands.shape[1],
            data: bands.data.clone(),
            subband_rate: pqmf::SUBBAND_RATE,
        };
        let y = pqmf::synthesis_step(&sb8, s8, &mut self.s8_state)?;

        self.next_frame += 1;
        // Keep the mel context of the next frame.
        let keep_from = (self.next_frame * WB_FRAME).saturating_sub(self.mel.config().context());
        if keep_from > self.base {
            self.buf.drain(..keep_from - self.base);
            self.base = keep_from;
        }
        Ok(y)
    }
}

/// Streams `x` through an [`Extender`] in chunks of `chunk` samples.
pub fn extend_streaming(x_wb: &AudioBuffer, source: CondSource<'_>, model: &Generator, chunk: usize) -> Result<Extended> {
    x_wb.expect_rate(WB_RATE)?;
    let mut ex = Extender::new(model, source)?;
    let mut y = Vec::with_capacity(2 * x_wb.len() + 1024);
    for c in x_wb.samples.chunks(chunk.max(1)) {
        y.extend(ex.push(c)?);
    }
    y.extend(ex.finish()?);
    Ok(Extended {
        audio: AudioBuffer::new(y, SWB_RATE)?,
        delay_samples: system_delay()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_geometry() {
        let cfg = GeneratorConfig::blind();
        cfg.validate().unwrap();
        assert_eq!(cfg.total_down_factor(), Rational::new(40, 1));
        assert_eq!(cfg.block_input_steps().unwrap(), vec![80, 80, 40, 20, 10, 4]);
    }

    #[test]
    fn inconsistent_factors_are_rejected() {
        let mut cfg = GeneratorConfig::blind();
        cfg.cond_up_factors[3] = 25;
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn system_delay_is_four_ms() {
        assert_eq!(system_delay().unwrap(), 128);
    }
}
