//! Log-Mel filterbank features: 25 ms Hann frames every 10 ms, power
//! spectrum, triangular Mel filters, natural-log compression.

use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::wav::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FrontendConfig {
    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    /// Frames per model input; 1024 covers a 10 s clip.
    pub target_frames: usize,
    /// Patch (time, frequency) extent.
    pub patch: (usize, usize),
    pub jitter_db: f64,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            n_mels: 128,
            win_ms: 25.0,
            hop_ms: 10.0,
            fft_size: 512,
            target_frames: 128,
            patch: (16, 16),
            jitter_db: 6.0,
            log_floor: 1e-10,
        }
    }
}

impl FrontendConfig {
    pub fn win_samples(&self) -> usize {
        (self.win_ms * f64::from(SAMPLE_RATE) / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * f64::from(SAMPLE_RATE) / 1000.0).round() as usize
    }

    /// Patch grid as (time rows, frequency columns).
    pub fn grid(&self) -> (usize, usize) {
        (self.target_frames / self.patch.0, self.n_mels / self.patch.1)
    }

    pub fn patch_len(&self) -> usize {
        self.patch.0 * self.patch.1
    }

    pub fn validate(&self) -> Result<()> {
        let (ph, pw) = self.patch;
        if ph == 0 || pw == 0 || self.n_mels == 0 || self.target_frames == 0 {
            return Err(Error::Config("frontend sizes must be positive".into()));
        }
        if self.target_frames % ph != 0 {
            return Err(Error::Config(format!(
                "target_frames {} not divisible by patch height {ph}",
                self.target_frames
            )));
        }
        if self.n_mels % pw != 0 {
            return Err(Error::Config(format!(
                "n_mels {} not divisible by patch width {pw}",
                self.n_mels
            )));
        }
        if self.hop_samples() == 0 || self.win_samples() == 0 {
            return Err(Error::Config("window and hop must be positive".into()));
        }
        if self.fft_size < self.win_samples() {
            return Err(Error::Config(format!(
                "fft_size {} shorter than the {}-sample window",
                self.fft_size,
                self.win_samples()
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        if !(self.jitter_db >= 0.0) {
            return Err(Error::Config("jitter_db must be non-negative".into()));
        }
        Ok(())
    }
}

/// Log-energy grid, `[frames x n_mels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Array2<f32>,
    pub frame_hop_ms: f64,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters evenly spaced on the Mel scale between 0 Hz and Nyquist.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `[n_mels x (fft_size/2 + 1)]`
    pub weights: Array2<f64>,
    pub centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, fft_size: usize, sample_rate: u32) -> Self {
        let n_bins = fft_size / 2 + 1;
        let nyquist = f64::from(sample_rate) / 2.0;
        let mel_max = hz_to_mel(nyquist);
        let points: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_max * i as f64 / (n_mels + 1) as f64)
            .collect();
        let bin_hz = |k: usize| k as f64 * f64::from(sample_rate) / fft_size as f64;

        let mut weights = Array2::<f64>::zeros((n_mels, n_bins));
        for m in 0..n_mels {
            let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
            for k in 0..n_bins {
                let mel = hz_to_mel(bin_hz(k));
                let w = if mel > left && mel <= center {
                    (mel - left) / (center - left)
                } else if mel > center && mel < right {
                    (right - mel) / (right - center)
                } else {
                    0.0
                };
                weights[[m, k]] = w;
            }
            // Low filters can be narrower than one FFT bin; give them the
            // bin nearest their center so no band is identically empty.
            if weights.row(m).sum() <= 0.0 {
                let c_hz = mel_to_hz(center);
                let k = ((c_hz / bin_hz(1)).round() as usize).min(n_bins - 1);
                weights[[m, k]] = 1.0;
            }
        }
        let centers_hz = points[1..=n_mels].iter().map(|&m| mel_to_hz(m)).collect();
        Self {
            weights,
            centers_hz,
        }
    }
}

/// Reusable framing/FFT state for one frontend configuration.
pub struct MelFrontend {
    cfg: FrontendConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    filterbank: MelFilterbank,
}

impl MelFrontend {
    pub fn new(cfg: &FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.win_samples();
        // Symmetric Hann window.
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        let filterbank = MelFilterbank::new(cfg.n_mels, cfg.fft_size, SAMPLE_RATE);
        Ok(Self {
            cfg: cfg.clone(),
            window,
            fft,
            filterbank,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Power spectrum (`fft_size/2 + 1` bins) of one windowed frame.
    pub fn power_spectrum(&self, frame: &[f32]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        for (slot, (&s, &w)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
            slot.re = f64::from(s) * w;
        }
        self.fft.process(&mut buf);
        buf[..self.cfg.fft_size / 2 + 1]
            .iter()
            .map(|c| c.norm_sqr())
            .collect()
    }

    /// All frames of the waveform as raw natural-log Mel energies, without
    /// cropping or standardization.
    pub fn log_mel_frames(&self, w: &Waveform) -> Result<Array2<f32>> {
        if w.samples.is_empty() {
            return Err(Error::EmptyInput("waveform has no samples"));
        }
        if w.sample_rate_hz != SAMPLE_RATE {
            return Err(Error::Precondition(format!(
                "waveform at {} Hz, expected {SAMPLE_RATE}",
                w.sample_rate_hz
            )));
        }
        let win = self.cfg.win_samples();
        let hop = self.cfg.hop_samples();
        if w.samples.len() < win {
            return Err(Error::EmptyInput("waveform shorter than one window"));
        }
        let n_frames = 1 + (w.samples.len() - win) / hop;
        let mut out = Array2::<f32>::zeros((n_frames, self.cfg.n_mels));
        for (t, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let power = self.power_spectrum(&w.samples[t * hop..t * hop + win]);
            for (m, slot) in row.iter_mut().enumerate() {
                let energy: f64 = self
                    .filterbank
                    .weights
                    .row(m)
                    .iter()
                    .zip(&power)
                    .map(|(a, b)| a * b)
                    .sum();
                *slot = energy.max(self.cfg.log_floor).ln() as f32;
            }
        }
        Ok(out)
    }

    /// Model-ready spectrogram: frames cropped or zero-padded to
    /// `target_frames`, then standardized per instance.
    pub fn log_mel(&self, w: &Waveform) -> Result<MelSpectrogram> {
        let frames = self.log_mel_frames(w)?;
        let mut values = fit_frames(&frames, self.cfg.target_frames);
        standardize(&mut values);
        Ok(MelSpectrogram {
            values,
            frame_hop_ms: self.cfg.hop_ms,
        })
    }
}

pub fn log_mel(w: &Waveform, cfg: &FrontendConfig) -> Result<MelSpectrogram> {
    MelFrontend::new(cfg)?.log_mel(w)
}

/// Crop to the first `target` frames, or zero-pad at the end.
pub fn fit_frames(frames: &Array2<f32>, target: usize) -> Array2<f32> {
    let mut out = Array2::<f32>::zeros((target, frames.ncols()));
    let n = frames.nrows().min(target);
    out.slice_mut(ndarray::s![..n, ..])
        .assign(&frames.slice(ndarray::s![..n, ..]));
    out
}

/// In-place zero-mean, unit-variance scaling over all entries. Constant
/// inputs are only centered.
pub fn standardize(values: &mut Array2<f32>) {
    let n = values.len();
    if n == 0 {
        return;
    }
    let mean = values.iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
    let var = values
        .iter()
        .map(|&v| (f64::from(v) - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
    values.mapv_inplace(|v| ((f64::from(v) - mean) * scale) as f32);
}

/// Additive log-energy offset for a gain of `db` decibels on magnitude.
pub fn gain_offset(db: f64) -> f64 {
    10f64.powf(db / 20.0).ln()
}

/// Deterministic core of the pretraining augmentation: cyclic crop starting
/// at `start`, then a uniform log-domain gain of `gain_db`.
pub fn crop_and_jitter(
    frames: &Array2<f32>,
    target_frames: usize,
    start: usize,
    gain_db: f64,
) -> Result<Array2<f32>> {
    let len = frames.nrows();
    if len == 0 {
        return Err(Error::EmptyInput("spectrogram has no frames"));
    }
    let offset = gain_offset(gain_db);
    let mut out = Array2::<f32>::zeros((target_frames, frames.ncols()));
    for (t, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let src = frames.row((start + t) % len);
        row.iter_mut()
            .zip(src)
            .for_each(|(o, &v)| *o = (f64::from(v) + offset) as f32);
    }
    Ok(out)
}

/// Random start in `[0, len)`, cyclic wrap to `target_frames`, and a single
/// gain drawn uniformly from `[-jitter_db, +jitter_db]`. The result is not
/// standardized.
pub fn cyclic_crop_jitter<R: Rng + ?Sized>(
    frames: &Array2<f32>,
    cfg: &FrontendConfig,
    rng: &mut R,
) -> Result<MelSpectrogram> {
    if frames.nrows() == 0 {
        return Err(Error::EmptyInput("spectrogram has no frames"));
    }
    let start = rng.random_range(0..frames.nrows());
    let gain_db = draw_gain_db(cfg.jitter_db, rng);
    Ok(MelSpectrogram {
        values: crop_and_jitter(frames, cfg.target_frames, start, gain_db)?,
        frame_hop_ms: cfg.hop_ms,
    })
}

pub fn draw_gain_db<R: Rng + ?Sized>(bound_db: f64, rng: &mut R) -> f64 {
    if bound_db == 0.0 {
        0.0
    } else {
        rng.random_range(-bound_db..=bound_db)
    }
}
