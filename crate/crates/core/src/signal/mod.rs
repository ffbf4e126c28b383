//! Waveform and time-frequency primitives shared by every other module.
//!
//! Everything runs at a single processing rate of 24 kHz. Audio enters through
//! [`wav_read`], which resamples foreign rates, and leaves through
//! [`wav_write`].

mod audio;
mod dsp;
mod stft;

pub use audio::{resample, wav_read, wav_write, AudioBuffer, WavEncoding};
pub use dsp::{
    convolve, convolve_direct, fractional_delay, rms, scale_to_snr, sinc_taps, SINC_HALF_WIDTH,
};
pub use stft::{istft, stft, FrameSpec, Spectrogram, StftEngine};

/// The only processing rate.
pub const SAMPLE_RATE: u32 = 24_000;

/// Speed of sound in m/s.
pub const SPEED_OF_SOUND: f64 = 343.0;
