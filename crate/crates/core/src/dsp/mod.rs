//! Analysis/synthesis transforms, input features and complex masking.

mod features;
mod mask;
mod stft;
pub mod wav;

pub use features::{denormalize_per_frequency, log_amplitude_features, normalize_per_frequency, NormStats, EPS_FLOOR};
pub use mask::{apply_mask, ComplexMask};
pub use stft::{istft, istft_on_tape, stft, Spectrogram, StftConfig, StftEngine, WindowKind};
