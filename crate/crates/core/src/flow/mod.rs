//! Invertible affine-coupling surrogates of the mechanistic simulators.

mod coupling;
mod train;

pub use coupling::{ChainConfig, CouplingChain, CouplingLayer, LOG_SCALE_CLAMP, LOG_SCALE_LINEAR};
pub use train::{
    swap_study, train_inverse_surrogate, ChainCheckpoint, ChainReport, ChainTrainConfig,
    SwapReport, SwapSample, TrainStatus, TrainedChain,
};
