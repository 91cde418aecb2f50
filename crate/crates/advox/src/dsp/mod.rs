//! Signal processing: WAV I/O and differentiable spectral features.
//!
//! The STFT is expressed as a 1-d convolution with fixed windowed DFT
//! kernels, so features and spectral losses live inside the autodiff
//! graph and gradients reach the waveform exactly.

mod features;
mod stft;
mod stft_loss;
mod wav;

pub use features::{mel_center_frequencies, LogMelConfig, LogMelExtractor};
pub use stft::StftBasis;
pub use stft_loss::{
    multi_res_stft_loss, MultiResStftLoss, StftLossResolution, DEFAULT_RESOLUTIONS,
};
pub use wav::{load_waveform, save_waveform};
