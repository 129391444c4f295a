//! Audio frontend: WAV ingestion, STFT, log-mel filterbanks, min/max
//! normalization and `(context, future)` window extraction.

pub mod grid;
pub mod normalize;
pub mod spectrum;
pub mod wav;
pub mod windows;

pub use grid::Grid;
pub use normalize::{fit_normalization, normalize, NormalizationStats, NormalizedSpectrogram};
pub use spectrum::{
    log_mel, log_mel_spectrogram, stft_power, FrontendConfig, MelConfig, MelFilterbank,
    MelSpectrogram, PowerSpectrogram,
};
pub use wav::{load_wav, read_wav, write_wav, PcmSignal};
pub use windows::{grid_window_pairs, window_pairs, WindowPair};
