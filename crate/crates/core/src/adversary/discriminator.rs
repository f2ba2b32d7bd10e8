//! Ensemble of four complex-STFT discriminators.
//!
//! Each member takes the `[2, bins, frames]` (real, imaginary) STFT of a
//! 32 kHz waveform and applies five 2-D convolutions: a (3, 9) input layer,
//! three (3, 9) layers striding 2 along time, and a (3, 3) output layer with
//! one channel. Leaky-ReLU activations after the first four layers are the
//! feature maps used for feature matching.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnengine::{Ctx, Tensor, Var, WeightStore};

pub const DISC_WINDOWS: [usize; 4] = [2048, 1024, 512, 256];
pub const LEAKY_SLOPE: f32 = 0.2;
pub const DEFAULT_CHANNELS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscConfig {
    pub windows: Vec<usize>,
    /// Hidden channel count of every member.
    pub channels: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            windows: DISC_WINDOWS.to_vec(),
            channels: DEFAULT_CHANNELS,
        }
    }
}

struct ConvLayer {
    ci: usize,
    co: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    activate: bool,
}

impl DiscConfig {
    pub fn with_channels(channels: usize) -> Self {
        Self {
            channels,
            ..Self::default()
        }
    }

    pub fn hop(window: usize) -> usize {
        window / 4
    }

    /// Shortest waveform every member can analyse.
    pub fn min_len(&self) -> usize {
        self.windows.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.windows.len() != DISC_WINDOWS.len() || self.channels == 0 || self.windows.iter().any(|&w| w < 16 || w % 4 != 0) {
            return Err(Error::InvalidConfig(format!("discriminator windows {:?}, {} channels", self.windows, self.channels)));
        }
        Ok(())
    }

    fn layers(&self) -> Vec<ConvLayer> {
        let c = self.channels;
        let mid = |ci, stride| ConvLayer {
            ci,
            co: c,
            kernel: (3, 9),
            stride: (1, stride),
            pad: (1, 4),
            activate: true,
        };
        vec![
            mid(2, 1),
            mid(c, 2),
            mid(c, 2),
            mid(c, 2),
            ConvLayer {
                ci: c,
                co: 1,
                kernel: (3, 3),
                stride: (1, 1),
                pad: (1, 1),
                activate: false,
            },
        ]
    }

    /// Parameter names and shapes (`disc{k}.conv{l}.w` / `.b`).
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        for k in 0..self.windows.len() {
            for (l, c) in self.layers().iter().enumerate() {
                v.push((format!("disc{k}.conv{l}.w"), vec![c.co, c.ci, c.kernel.0, c.kernel.1]));
                v.push((format!("disc{k}.conv{l}.b"), vec![c.co]));
            }
        }
        v
    }

    pub fn init(&self, seed: u64) -> Result<WeightStore> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = serde_json::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut store = WeightStore::new(cfg);
        for (name, shape) in self.param_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".b") {
                vec![0.0; n]
            } else {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
                let bound = 1.0 / fan_in.sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            store.insert(name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }

    /// Runs every member on a 1-D waveform variable.
    pub fn forward<'g>(&self, ctx: &Ctx<'_, 'g>, x: Var<'g>) -> Result<DiscOutput<'g>> {
        let mut outputs = Vec::with_capacity(self.windows.len());
        let mut features = Vec::with_capacity(self.windows.len());
        for (k, &w) in self.windows.iter().enumerate() {
            let mut h = x.stft(w, Self::hop(w))?;
            let mut feats = Vec::new();
            for (l, c) in self.layers().iter().enumerate() {
                let wv = ctx.param(&format!("disc{k}.conv{l}.w"))?;
                let bv = ctx.param(&format!("disc{k}.conv{l}.b"))?;
                h = h.conv2d(wv, bv, c.stride, c.pad)?;
                if c.activate {
                    h = h.leaky_relu(LEAKY_SLOPE);
                    feats.push(h);
                }
            }
            outputs.push(h);
            features.push(feats);
        }
        Ok(DiscOutput { outputs, features })
    }
}

/// Output maps and intermediate features of every member.
pub struct DiscOutput<'g> {
    pub outputs: Vec<Var<'g>>,
    pub features: Vec<Vec<Var<'g>>>,
}

impl DiscOutput<'_> {
    pub fn output_values(&self) -> Vec<Vec<f32>> {
        self.outputs.iter().map(|o| o.value().data.clone()).collect()
    }

    pub fn feature_values(&self) -> Vec<Vec<Vec<f32>>> {
        self.features
            .iter()
            .map(|d| d.iter().map(|f| f.value().data.clone()).collect())
            .collect()
    }
}
