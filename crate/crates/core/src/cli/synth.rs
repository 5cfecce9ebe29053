//! Tone and amplitude-modulation datasets whose classes separate in the Mel
//! domain.

use std::f64::consts::TAU;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::LABELS_FILE;
use crate::error::{Error, Result};
use crate::seed;
use crate::spectro::{write_wav, Waveform, SAMPLE_RATE};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRecipe {
    pub tones_hz: Vec<f64>,
    pub am_rate_hz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub clips_per_class: usize,
    pub duration_s: f64,
    pub recipes: Vec<ClassRecipe>,
    /// White-noise level relative to full scale; `None` writes clean tones.
    pub noise_db: Option<f64>,
    pub seed: u64,
    /// One or two classes per clip, listed in `labels.csv`.
    pub multi_label: bool,
}

const LOWEST_HZ: f64 = 200.0;
const HIGHEST_BASE_HZ: f64 = 5000.0;
const PEAK: f64 = 0.9;

/// Class `k` gets a base tone on a geometric ladder, a partner at 1.5x, and
/// its own modulation rate.
pub fn default_recipes(n_classes: usize) -> Vec<ClassRecipe> {
    let ratio = if n_classes > 1 {
        (HIGHEST_BASE_HZ / LOWEST_HZ).powf(1.0 / (n_classes - 1) as f64).min(1.8)
    } else {
        1.0
    };
    (0..n_classes)
        .map(|k| {
            let base = LOWEST_HZ * ratio.powi(k as i32);
            ClassRecipe {
                tones_hz: vec![base, 1.5 * base],
                am_rate_hz: 2.0 + 2.5 * k as f64,
            }
        })
        .collect()
}

impl SyntheticSpec {
    pub fn new(n_classes: usize, clips_per_class: usize, seed: u64) -> Self {
        Self {
            n_classes,
            clips_per_class,
            duration_s: 2.0,
            recipes: default_recipes(n_classes),
            noise_db: Some(-30.0),
            seed,
            multi_label: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.clips_per_class == 0 {
            return Err(Error::Config("need at least one class and one clip".into()));
        }
        if self.recipes.len() != self.n_classes {
            return Err(Error::Config("one recipe per class required".into()));
        }
        if !(self.duration_s > 0.0) {
            return Err(Error::Config("duration must be positive".into()));
        }
        let nyquist = f64::from(SAMPLE_RATE) / 2.0;
        for (i, r) in self.recipes.iter().enumerate() {
            if r.tones_hz.is_empty() || r.tones_hz.iter().any(|&f| !(f > 0.0 && f < nyquist)) {
                return Err(Error::Config(format!("class {i}: tones must lie in (0, {nyquist}) Hz")));
            }
            if self.recipes[..i].contains(r) {
                return Err(Error::Config(format!("class {i} repeats an earlier recipe")));
            }
        }
        if self.multi_label && self.n_classes < 2 {
            return Err(Error::Config("multi-label data needs two or more classes".into()));
        }
        Ok(())
    }

    pub fn class_name(k: usize) -> String {
        format!("class_{k}")
    }
}

/// Sum of the recipes' modulated tones with per-clip detune and phases,
/// scaled to a random peak in [0.45, 0.9].
fn render<R: Rng + ?Sized>(recipes: &[&ClassRecipe], n: usize, rng: &mut R) -> Vec<f64> {
    let sr = f64::from(SAMPLE_RATE);
    let mut x = vec![0.0; n];
    for r in recipes {
        let detune = rng.random_range(0.97..1.03);
        let am_phase = rng.random_range(0.0..TAU);
        for &f in &r.tones_hz {
            let phase = rng.random_range(0.0..TAU);
            let w = TAU * f * detune / sr;
            let am = TAU * r.am_rate_hz / sr;
            for (t, v) in x.iter_mut().enumerate() {
                let env = 0.75 + 0.25 * (am * t as f64 + am_phase).sin();
                *v += env * (w * t as f64 + phase).sin();
            }
        }
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let target = PEAK * rng.random_range(0.5..=1.0);
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= target / peak);
    }
    x
}

/// One clip; deterministic in `(spec.seed, index)`.
pub fn synth_clip(spec: &SyntheticSpec, classes: &[usize], index: u64) -> Waveform {
    let mut rng = seed::stream(spec.seed, "synth", index);
    let n = (spec.duration_s * f64::from(SAMPLE_RATE)).round() as usize;
    let recipes: Vec<&ClassRecipe> = classes.iter().map(|&k| &spec.recipes[k]).collect();
    let mut x = render(&recipes, n, &mut rng);
    if let Some(db) = spec.noise_db {
        let noise = Normal::new(0.0, 10f64.powf(db / 20.0)).expect("finite noise level");
        for v in &mut x {
            *v = (*v + noise.sample(&mut rng)).clamp(-1.0, 1.0);
        }
    }
    Waveform::new(x.into_iter().map(|v| v as f32).collect(), SAMPLE_RATE)
}

/// Writes the dataset under `root`: `root/class_k/clip_nnn.wav`, or for
/// multi-label data `root/clips/clip_nnnn.wav` plus `root/labels.csv`.
/// Returns the number of files written.
pub fn gen_synthetic(spec: &SyntheticSpec, root: &Path) -> Result<usize> {
    spec.validate()?;
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(root)?;
    let total = spec.n_classes * spec.clips_per_class;
    if !spec.multi_label {
        for k in 0..spec.n_classes {
            let dir = root.join(SyntheticSpec::class_name(k));
            mkdir(&dir)?;
            for c in 0..spec.clips_per_class {
                let index = (k * spec.clips_per_class + c) as u64;
                write_wav(&dir.join(format!("clip_{c:03}.wav")), &synth_clip(spec, &[k], index))?;
            }
        }
        return Ok(total);
    }
    let dir = root.join("clips");
    mkdir(&dir)?;
    let labels_path = root.join(LABELS_FILE);
    let mut csv = Vec::new();
    writeln!(csv, "file,labels").expect("in-memory write");
    for i in 0..total {
        let mut rng = seed::stream(spec.seed, "synth_labels", i as u64);
        // Cycle the primary class so every class has positives.
        let first = i % spec.n_classes;
        let mut classes = vec![first];
        if rng.random_bool(0.5) {
            let other = (first + rng.random_range(1..spec.n_classes)) % spec.n_classes;
            classes.push(other);
            classes.sort_unstable();
        }
        let name = format!("clips/clip_{i:04}.wav");
        write_wav(&root.join(&name), &synth_clip(spec, &classes, i as u64))?;
        let names: Vec<String> = classes.iter().map(|&k| SyntheticSpec::class_name(k)).collect();
        writeln!(csv, "{name},{}", names.join(";")).expect("in-memory write");
    }
    std::fs::write(&labels_path, csv).map_err(|e| Error::io(&labels_path, e))?;
    Ok(total)
}
