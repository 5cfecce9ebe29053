//! PCM16 WAV ingestion and writing.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

/// Sample rate every waveform is brought to on ingestion.
pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Self {
        Self {
            samples,
            sample_rate_hz,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate_hz)
    }
}

fn map_hound(err: hound::Error) -> Error {
    match err {
        hound::Error::Unsupported => Error::UnsupportedFormat("codec not supported".into()),
        hound::Error::FormatError(msg) => Error::Decode(msg.to_string()),
        other => Error::Decode(other.to_string()),
    }
}

/// Decode a RIFF/WAVE PCM16 byte stream into a mono 16 kHz waveform.
///
/// Stereo is averaged to mono and int16 samples are scaled by 1/32768.
/// Other sample rates are resampled by linear interpolation.
pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    let mut reader = hound::WavReader::new(Cursor::new(bytes)).map_err(map_hound)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedFormat(format!(
            "{:?} {}-bit samples (only PCM 16-bit is accepted)",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let channels = usize::from(spec.channels);
    if channels == 0 || channels > 2 {
        return Err(Error::UnsupportedFormat(format!("{channels} channels")));
    }
    if spec.sample_rate == 0 {
        return Err(Error::Decode("zero sample rate".into()));
    }

    let raw = reader
        .samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(map_hound)?;
    let samples: Vec<f32> = raw
        .chunks_exact(channels)
        .map(|frame| {
            let sum: f32 = frame.iter().map(|&s| f32::from(s) / 32768.0).sum();
            sum / channels as f32
        })
        .collect();

    let samples = if spec.sample_rate == SAMPLE_RATE {
        samples
    } else {
        resample_linear(&samples, spec.sample_rate, SAMPLE_RATE)
    };
    Ok(Waveform::new(samples, SAMPLE_RATE))
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes).map_err(|e| match e {
        Error::Decode(msg) => Error::Decode(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Encode a mono waveform as PCM16. Samples are clipped to [-1, 1).
pub fn encode_wav(w: &Waveform) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut buf = Cursor::new(Vec::new());
    {
        let mut writer = hound::WavWriter::new(&mut buf, spec).map_err(map_hound)?;
        for &s in &w.samples {
            let q = (f64::from(s) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            writer.write_sample(q).map_err(map_hound)?;
        }
        writer.finalize().map_err(map_hound)?;
    }
    Ok(buf.into_inner())
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let bytes = encode_wav(w)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Linear-interpolation resampler. Output sample `i` sits at input time
/// `i * from / to`; the output covers the input span exactly.
pub fn resample_linear(samples: &[f32], from_hz: u32, to_hz: u32) -> Vec<f32> {
    if samples.is_empty() || from_hz == to_hz {
        return samples.to_vec();
    }
    let n = samples.len();
    let out_len = ((n as u64 - 1) * u64::from(to_hz) / u64::from(from_hz)) as usize + 1;
    let ratio = f64::from(from_hz) / f64::from(to_hz);
    (0..out_len)
        .map(|i| {
            let t = i as f64 * ratio;
            let lo = (t.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            let frac = (t - lo as f64) as f32;
            samples[lo] * (1.0 - frac) + samples[hi] * frac
        })
        .collect()
}
