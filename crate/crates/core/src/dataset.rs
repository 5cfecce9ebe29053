//! WAV datasets and the model-input views built from them.
//!
//! Labeled sets use `root/<class_name>/*.wav`; multi-label sets keep the
//! clips anywhere under `root` and list them in `root/labels.csv` as
//! `file,labels` rows with `;`-separated class names.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;
use crate::spectro::{
    cyclic_crop_jitter, fit_frames, patchify, read_wav, standardize, FrontendConfig, MelFrontend,
    MelSpectrogram, PatchGrid,
};

pub const LABELS_FILE: &str = "labels.csv";

#[derive(Debug, Clone)]
pub struct Clip {
    pub path: PathBuf,
    /// Raw log-Mel frames of the whole clip, `[frames x n_mels]`.
    pub frames: Array2<f32>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub clips: Vec<Clip>,
    pub class_names: Vec<String>,
    pub multi_label: bool,
}

fn wav_files(dir: &Path, recursive: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            if recursive {
                out.extend(wav_files(&path, true)?);
            }
        } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Every `.wav` under `dir`, recursively, without labels.
    pub fn load_unlabeled(dir: &Path, frontend: &MelFrontend) -> Result<Self> {
        let files = wav_files(dir, true)?;
        let clips = files
            .into_iter()
            .map(|path| {
                let frames = frontend.log_mel_frames(&read_wav(&path)?)?;
                Ok(Clip {
                    path,
                    frames,
                    labels: vec![],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if clips.is_empty() {
            return Err(Error::EmptyInput("no .wav files in the data directory"));
        }
        Ok(Self {
            clips,
            class_names: vec![],
            multi_label: false,
        })
    }

    pub fn load_labeled(dir: &Path, frontend: &MelFrontend) -> Result<Self> {
        let labels_path = dir.join(LABELS_FILE);
        let ds = if labels_path.exists() {
            Self::load_multi_label(dir, &labels_path, frontend)?
        } else {
            Self::load_class_dirs(dir, frontend)?
        };
        if ds.clips.is_empty() {
            return Err(Error::EmptyInput("no labeled .wav files in the data directory"));
        }
        Ok(ds)
    }

    fn load_class_dirs(dir: &Path, frontend: &MelFrontend) -> Result<Self> {
        let mut class_dirs = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                class_dirs.push(path);
            }
        }
        class_dirs.sort();
        let mut clips = Vec::new();
        let mut class_names = Vec::new();
        for (label, class_dir) in class_dirs.iter().enumerate() {
            class_names.push(class_dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
            for path in wav_files(class_dir, false)? {
                let frames = frontend.log_mel_frames(&read_wav(&path)?)?;
                clips.push(Clip {
                    path,
                    frames,
                    labels: vec![label],
                });
            }
        }
        Ok(Self {
            clips,
            class_names,
            multi_label: false,
        })
    }

    fn load_multi_label(dir: &Path, labels_path: &Path, frontend: &MelFrontend) -> Result<Self> {
        let mut reader = csv::Reader::from_path(labels_path)
            .map_err(|e| Error::Decode(format!("{}: {e}", labels_path.display())))?;
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::Decode(format!("{}: {e}", labels_path.display())))?;
            let file = rec.get(0).unwrap_or_default().to_string();
            let names: Vec<String> = rec
                .get(1)
                .unwrap_or_default()
                .split(';')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect();
            rows.push((file, names));
        }
        let mut class_names: Vec<String> = rows.iter().flat_map(|(_, n)| n.iter().cloned()).collect();
        class_names.sort();
        class_names.dedup();
        let clips = rows
            .into_iter()
            .map(|(file, names)| {
                let path = dir.join(&file);
                let frames = frontend.log_mel_frames(&read_wav(&path)?)?;
                let mut labels: Vec<usize> = names
                    .iter()
                    .map(|n| class_names.binary_search(n).expect("collected above"))
                    .collect();
                labels.sort_unstable();
                Ok(Clip { path, frames, labels })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            clips,
            class_names,
            multi_label: true,
        })
    }

    /// Deterministic per-class split; roughly `eval_fraction` of each class
    /// (by first label) goes to the second set.
    pub fn split(&self, eval_fraction: f64, seed_value: u64) -> (Dataset, Dataset) {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.n_classes().max(1)];
        for (i, c) in self.clips.iter().enumerate() {
            by_class[c.labels.first().copied().unwrap_or(0)].push(i);
        }
        let mut rng = seed::stream(seed_value, "split", 0);
        let (mut train, mut eval) = (Vec::new(), Vec::new());
        for mut idx in by_class {
            idx.shuffle(&mut rng);
            let n_eval = ((idx.len() as f64) * eval_fraction).round() as usize;
            let n_eval = n_eval.min(idx.len().saturating_sub(1));
            eval.extend_from_slice(&idx[..n_eval]);
            train.extend_from_slice(&idx[n_eval..]);
        }
        train.sort_unstable();
        eval.sort_unstable();
        let subset = |ids: &[usize]| Dataset {
            clips: ids.iter().map(|&i| self.clips[i].clone()).collect(),
            class_names: self.class_names.clone(),
            multi_label: self.multi_label,
        };
        (subset(&train), subset(&eval))
    }

    /// Multi-hot label row per clip.
    pub fn label_matrix(&self) -> Array2<f32> {
        let mut m = Array2::zeros((self.len(), self.n_classes()));
        for (i, c) in self.clips.iter().enumerate() {
            for &l in &c.labels {
                m[[i, l]] = 1.0;
            }
        }
        m
    }
}

/// Evaluation view: the first `target_frames` frames (zero padded),
/// standardized and patchified.
pub fn eval_input(frames: &Array2<f32>, cfg: &FrontendConfig) -> Result<PatchGrid> {
    let mut values = fit_frames(frames, cfg.target_frames);
    standardize(&mut values);
    patchify(
        &MelSpectrogram {
            values,
            frame_hop_ms: cfg.hop_ms,
        },
        cfg.patch,
    )
}

/// Pretraining view: cyclic crop at a random start, random gain, then
/// standardization and patchification.
pub fn pretrain_input<R: Rng + ?Sized>(
    frames: &Array2<f32>,
    cfg: &FrontendConfig,
    rng: &mut R,
) -> Result<PatchGrid> {
    let mut m = cyclic_crop_jitter(frames, cfg, rng)?;
    standardize(&mut m.values);
    patchify(&m, cfg.patch)
}
