//! Training side: STFT losses, the discriminator ensemble, optimizers and a
//! desk-scale trainer.

pub mod discriminator;
pub mod losses;
pub mod optim;
pub mod stft;
pub mod train;

pub use discriminator::{DiscConfig, DiscOutput, DISC_WINDOWS};
pub use losses::{loss_adv_gen, loss_disc, loss_feat, loss_mag, loss_sc, LossReport, FEATURE_WEIGHT};
pub use optim::{OptimizerKind, OptimizerState};
pub use stft::{stft_magnitude, Spectrogram, StftConfig};
pub use train::{speech_like_clip, surrogate_pair, toy_train, TraceRow, TrainConfig, TrainOutcome};
