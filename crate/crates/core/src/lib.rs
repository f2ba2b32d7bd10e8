//! Streaming subband bandwidth extension from 16 kHz to 32 kHz.
//!
//! A 4-band PQMF splits the wideband input into 4 kHz subbands, a small
//! causal U-Net generates the four missing upper subbands, and an 8-band
//! PQMF reassembles the 32 kHz output. The generator runs blind (log-mel
//! conditioning) or guided by 4-bit side information at 200 bit/s.
//!
//! Modules:
//! - [`pqmf`]: prototype design and analysis/synthesis banks
//! - [`conditioning`]: log-mel features
//! - [`nnengine`]: tensors, autograd, layers, weights, accounting
//! - [`generator`]: the network and the extension pipeline
//! - [`sideinfo`]: side-info encoder and bitstream
//! - [`adversary`]: losses, discriminators, optimizers, toy trainer
//! - [`audioio`]: WAV I/O and metrics

pub mod adversary;
pub mod audioio;
pub mod conditioning;
pub mod error;
pub mod generator;
pub mod nnengine;
pub mod par;
pub mod pqmf;
pub mod sideinfo;

pub use audioio::AudioBuffer;
pub use error::{Error, ErrorClass, Result};
pub use generator::{extend, CondSource, Extender, Generator, GeneratorConfig, Mode};
