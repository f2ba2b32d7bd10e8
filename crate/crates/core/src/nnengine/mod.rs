//! A small tensor engine holding exactly the layer set the bandwidth
//! extender needs: causal (depthwise-separable) convolutions, channel
//! normalization, gated activations, GRU, rational-factor interpolation and a
//! straight-through quantizer, with reverse-mode gradients, weight
//! serialization and parameter/FLOP accounting.

pub mod arch;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod state;
pub mod tensor;
pub mod weights;

pub use arch::{complexity, count_flops_per_second, count_params, ComplexityReport, LayerKind, LayerSpec, Rational};
pub use graph::{concat_cols, concat_rows, dequantize, quantize_scalar, Gradients, Graph, Var};
pub use layers::Ctx;
pub use state::StreamState;
pub use tensor::Tensor;
pub use weights::{load_weights, save_weights, WeightStore};
