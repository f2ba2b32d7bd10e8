//! Guided-mode side information: a small recurrent encoder that turns the
//! four upper 32 kHz subbands into one 4-bit code per 20 ms frame
//! (200 bit/s), and the `UBS1` bitstream that carries the codes.
//!
//! Bitstream layout (little-endian): magic `UBS1`, u16 version, u16 frame
//! duration in ms, u32 frame count, then the codes packed two per byte with
//! the earlier frame in the high nibble. An odd count leaves the final low
//! nibble zero.

use crate::audioio::{AudioBuffer, SWB_RATE};
use crate::error::{Error, Result};
use crate::generator::{Generator, Mode, SWB_FRAME};
use crate::nnengine::{concat_cols, Ctx, Graph, Tensor, Var};
use crate::pqmf::{self, PqmfState, PrototypeFilter, SubbandSignal};

pub const BITSTREAM_MAGIC: [u8; 4] = *b"UBS1";
pub const BITSTREAM_VERSION: u16 = 1;
pub const FRAME_MS: u16 = 20;
const HEADER_LEN: usize = 12;

/// Subband steps of past context in each encoder window.
pub const HISTORY: usize = 20;
/// Subband steps per frame.
pub const CURRENT: usize = 80;
/// Subband steps of look-ahead (5 ms).
pub const LOOKAHEAD: usize = 20;
/// Upper subbands seen by the encoder.
pub const HIGH_BANDS: usize = 4;
pub const WINDOW_LEN: usize = HIGH_BANDS * (HISTORY + CURRENT + LOOKAHEAD);

/// Packs 4-bit codes into a `UBS1` bitstream.
pub fn pack(codes: &[u8]) -> Result<Vec<u8>> {
    if let Some(&c) = codes.iter().find(|&&c| c > 15) {
        return Err(Error::CodeOutOfRange(c));
    }
    let n = u32::try_from(codes.len()).map_err(|_| Error::InvalidConfig("too many frames".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + codes.len().div_ceil(2));
    out.extend_from_slice(&BITSTREAM_MAGIC);
    out.extend_from_slice(&BITSTREAM_VERSION.to_le_bytes());
    out.extend_from_slice(&FRAME_MS.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    for pair in codes.chunks(2) {
        let lo = pair.get(1).copied().unwrap_or(0);
        out.push((pair[0] << 4) | lo);
    }
    Ok(out)
}

/// Parses a `UBS1` bitstream back into codes.
pub fn unpack(bytes: &[u8]) -> Result<Vec<u8>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedFile("bitstream header"));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != BITSTREAM_MAGIC {
        return Err(Error::BadMagic {
            expected: BITSTREAM_MAGIC,
            found: magic,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != BITSTREAM_VERSION {
        return Err(Error::UnsupportedVersion(version as u32));
    }
    let frame_ms = u16::from_le_bytes([bytes[6], bytes[7]]);
    if frame_ms != FRAME_MS {
        return Err(Error::CorruptHeader(format!("frame duration {frame_ms} ms")));
    }
    let frames = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != frames.div_ceil(2) {
        return Err(Error::LengthMismatch {
            header: frames,
            payload: payload.len(),
        });
    }
    if frames % 2 == 1 && payload[payload.len() - 1] & 0x0f != 0 {
        return Err(Error::CorruptHeader("non-zero padding nibble".into()));
    }
    Ok((0..frames)
        .map(|i| {
            let b = payload[i / 2];
            if i % 2 == 0 {
                b >> 4
            } else {
                b & 0x0f
            }
        })
        .collect())
}

/// Encoder input of frame `i`: for each upper band, 20 steps of history,
/// the 80 steps of the frame and 20 steps of look-ahead. Steps outside
/// `sb` are zero.
pub fn rolling_window(sb: &SubbandSignal, frame: usize) -> Result<Vec<f32>> {
    if sb.num_bands != 2 * HIGH_BANDS {
        return Err(Error::BandCountMismatch {
            expected: 2 * HIGH_BANDS,
            actual: sb.num_bands,
        });
    }
    let span = HISTORY + CURRENT + LOOKAHEAD;
    let start = (frame * CURRENT) as isize - HISTORY as isize;
    let mut w = Vec::with_capacity(WINDOW_LEN);
    for k in HIGH_BANDS..2 * HIGH_BANDS {
        let band = sb.band(k);
        w.extend((0..span as isize).map(|j| {
            let idx = start + j;
            if idx < 0 || idx as usize >= band.len() {
                0.0
            } else {
                band[idx as usize]
            }
        }));
    }
    Ok(w)
}

/// Windows of all frames as a `[480, F]` matrix.
pub fn window_matrix(sb: &SubbandSignal, frames: usize) -> Result<Tensor> {
    let cols = (0..frames).map(|f| rolling_window(sb, f)).collect::<Result<Vec<_>>>()?;
    let mut data = vec![0.0f32; WINDOW_LEN * frames];
    for (f, c) in cols.iter().enumerate() {
        for (r, &v) in c.iter().enumerate() {
            data[r * frames + f] = v;
        }
    }
    Tensor::matrix(WINDOW_LEN, frames, data)
}

/// Encoder network on a window matrix: pointwise in, GRU over frames starting
/// from `h0`, pointwise out with `tanh`, and the scalar projection. Returns
/// the pre-quantization values `[1, F]` and the final hidden state.
pub fn encoder_graph<'g>(ctx: &Ctx<'_, 'g>, windows: Var<'g>, h0: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
    let frames = windows.shape()[1];
    if frames == 0 {
        return Err(Error::EmptySignal);
    }
    let p = ctx.pointwise("side.pw_in", windows)?;
    let mut h = h0;
    let mut hs = Vec::with_capacity(frames);
    for f in 0..frames {
        h = ctx.gru_step("side.gru", p.cols(f, 1)?, h)?;
        hs.push(h);
    }
    let q = ctx.pointwise("side.pw_out", concat_cols(&hs)?)?.tanh();
    Ok((ctx.pointwise("side.proj", q)?, h))
}

fn check_guided(model: &Generator) -> Result<()> {
    if model.mode() != Mode::Guided {
        return Err(Error::InvalidConfig("side-info encoding needs a guided model".into()));
    }
    Ok(())
}

/// Codes for a whole 32 kHz signal (length a multiple of 640).
pub fn encode(x_swb: &AudioBuffer, model: &Generator) -> Result<Vec<u8>> {
    x_swb.expect_rate(SWB_RATE)?;
    check_guided(model)?;
    if x_swb.len() % SWB_FRAME != 0 {
        return Err(Error::FrameAlignment {
            len: x_swb.len(),
            multiple: SWB_FRAME,
        });
    }
    let frames = x_swb.len() / SWB_FRAME;
    if frames == 0 {
        return Ok(Vec::new());
    }
    let sb = pqmf::analysis(x_swb, PrototypeFilter::default_for(8)?)?;
    let g = Graph::inference();
    let ctx = Ctx::new(&g, &model.store, None);
    let w = g.constant(window_matrix(&sb, frames)?);
    let h0 = g.constant(Tensor::zeros(&[model.cfg.side_hidden, 1]));
    let (z, _) = encoder_graph(&ctx, w, h0)?;
    Ok(z.quantize_st().1)
}

/// Frame-by-frame encoder. Code `i` is emitted once the 32 kHz input reaches
/// `640 (i + 1) + 160` samples (the 20-step look-ahead).
pub struct SideInfoEncoder<'m> {
    model: &'m Generator,
    a8: PqmfState,
    /// Upper four bands from subband step `base` on.
    bands: Vec<Vec<f32>>,
    base: usize,
    hidden: Vec<f32>,
    pending: Vec<f32>,
    received: usize,
    next_frame: usize,
}

impl<'m> SideInfoEncoder<'m> {
    pub fn new(model: &'m Generator) -> Result<Self> {
        check_guided(model)?;
        Ok(Self {
            model,
            a8: PqmfState::new(PrototypeFilter::default_for(8)?),
            bands: vec![Vec::new(); HIGH_BANDS],
            base: 0,
            hidden: vec![0.0; model.cfg.side_hidden],
            pending: Vec::new(),
            received: 0,
            next_frame: 0,
        })
    }

    pub fn push(&mut self, chunk: &[f32]) -> Result<Vec<u8>> {
        self.pending.extend_from_slice(chunk);
        self.received += chunk.len();
        let a8 = PrototypeFilter::default_for(8)?;
        let usable = self.pending.len() / 8 * 8;
        if usable > 0 {
            let frame: Vec<f32> = self.pending.drain(..usable).collect();
            let sb = pqmf::analysis_step(&frame, a8, &mut self.a8)?;
            for (k, b) in self.bands.iter_mut().enumerate() {
                b.extend_from_slice(sb.band(HIGH_BANDS + k));
            }
        }
        let mut codes = Vec::new();
        while self.base + self.bands[0].len() >= (self.next_frame + 1) * CURRENT + LOOKAHEAD {
            codes.push(self.step()?);
        }
        Ok(codes)
    }

    /// Emits the codes still waiting for look-ahead, treating steps past the
    /// end as zero.
    pub fn finish(mut self) -> Result<Vec<u8>> {
        if self.received % SWB_FRAME != 0 {
            return Err(Error::FrameAlignment {
                len: self.received,
                multiple: SWB_FRAME,
            });
        }
        let frames = self.received / SWB_FRAME;
        let mut codes = Vec::new();
        while self.next_frame < frames {
            codes.push(self.step()?);
        }
        Ok(codes)
    }

    fn step(&mut self) -> Result<u8> {
        let i = self.next_frame;
        let span = HISTORY + CURRENT + LOOKAHEAD;
        let start = (i * CURRENT) as isize - HISTORY as isize;
        let mut w = Vec::with_capacity(WINDOW_LEN);
        for b in &self.bands {
            w.extend((0..span as isize).map(|j| {
                let idx = start + j - self.base as isize;
                if idx < 0 || idx as usize >= b.len() {
                    0.0
                } else {
                    b[idx as usize]
                }
            }));
        }
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &self.model.store, None);
        let win = g.constant(Tensor::matrix(WINDOW_LEN, 1, w)?);
        let h0 = g.constant(Tensor::matrix(self.hidden.len(), 1, self.hidden.clone())?);
        let (z, h) = encoder_graph(&ctx, win, h0)?;
        self.hidden = h.value().data.clone();
        self.next_frame += 1;
        let keep_from = (self.next_frame * CURRENT).saturating_sub(HISTORY);
        if keep_from > self.base {
            let drop = keep_from - self.base;
            for b in &mut self.bands {
                b.drain(..drop.min(b.len()));
            }
            self.base = keep_from;
        }
        Ok(z.quantize_st().1[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_layout() {
        let b = pack(&[1, 2, 3]).unwrap();
        assert_eq!(&b[..4], b"UBS1");
        assert_eq!(&b[12..], &[0x12, 0x30]);
        assert_eq!(unpack(&b).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn bad_streams() {
        assert!(matches!(pack(&[16]), Err(Error::CodeOutOfRange(16))));
        let mut b = pack(&[1, 2, 3, 4]).unwrap();
        b.pop();
        assert!(matches!(unpack(&b), Err(Error::LengthMismatch { header: 4, payload: 1 })));
        b[0] = b'X';
        assert!(matches!(unpack(&b), Err(Error::BadMagic { .. })));
        assert!(matches!(unpack(&b[..5]), Err(Error::TruncatedFile(_))));
    }

    #[test]
    fn window_layout() {
        let rows: Vec<Vec<f32>> = (0..8).map(|k| (0..200).map(|j| (k * 1000 + j) as f32).collect()).collect();
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let sb = SubbandSignal::from_rows(&refs).unwrap();
        let w = rolling_window(&sb, 1).unwrap();
        assert_eq!(w.len(), WINDOW_LEN);
        assert_eq!(w[0], 4060.0);
        assert_eq!(w[119], 4179.0);
        assert_eq!(w[120], 5060.0);
        let w0 = rolling_window(&sb, 0).unwrap();
        assert!(w0[..20].iter().all(|&v| v == 0.0));
        assert_eq!(w0[20], 4000.0);
    }
}
