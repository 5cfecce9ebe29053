//! Audio frontend: WAV ingestion, log-Mel spectrograms, pretraining
//! augmentation, and patch tokenization.

mod mel;
mod patch;
mod wav;

pub use mel::{
    crop_and_jitter, cyclic_crop_jitter, draw_gain_db, fit_frames, gain_offset, hz_to_mel,
    log_mel, mel_to_hz, standardize, FrontendConfig, MelFilterbank, MelFrontend, MelSpectrogram,
};
pub use patch::{patchify, sincos_positions, unpatchify, PatchGrid};
pub use wav::{
    decode_wav, encode_wav, read_wav, resample_linear, write_wav, Waveform, SAMPLE_RATE,
};
