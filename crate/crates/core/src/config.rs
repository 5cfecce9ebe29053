//! Flat `key = value` run configuration. `#` starts a comment; unknown keys
//! and repeated keys are errors.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::finetune::{FinetuneConfig, RMConfig};
use crate::pretrain::PretrainSettings;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub pretrain: PretrainSettings,
    /// Pretraining epochs; 0 runs until `total_steps`.
    pub epochs: u64,
    pub finetune: FinetuneConfig,
    pub probe: FinetuneConfig,
    /// Share of each class held out for evaluation.
    pub eval_fraction: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            pretrain: PretrainSettings::default(),
            epochs: 0,
            finetune: FinetuneConfig::default(),
            probe: FinetuneConfig::probe(),
            eval_fraction: 0.2,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

impl Config {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        let mut patch_len_given = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: `{key}` given twice", n + 1)));
            }
            patch_len_given |= key == "patch_len";
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        if !patch_len_given {
            cfg.pretrain.model.patch_len = cfg.pretrain.frontend.patch_len();
        }
        cfg.pretrain.curriculum.total_steps = cfg.pretrain.optim.total_steps;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::Config("eval_fraction must lie in [0, 1)".into()));
        }
        for ft in [&self.finetune, &self.probe] {
            if !(ft.lr > 0.0) || ft.batch_size == 0 || !(ft.weight_decay >= 0.0) {
                return Err(Error::Config("fine-tuning needs lr > 0, batch_size > 0, weight_decay >= 0".into()));
            }
        }
        let (rows, cols) = self.pretrain.frontend.grid();
        self.finetune.rm.validate(rows * cols)
    }

    /// Assigns one key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let p = &mut self.pretrain;
        let fe = &mut p.frontend;
        let sa = &mut p.sampler;
        let mo = &mut p.model;
        let op = &mut p.optim;
        match key {
            "n_mels" => fe.n_mels = parse(key, v)?,
            "win_ms" => fe.win_ms = parse(key, v)?,
            "hop_ms" => fe.hop_ms = parse(key, v)?,
            "fft_size" => fe.fft_size = parse(key, v)?,
            "target_frames" => fe.target_frames = parse(key, v)?,
            "patch_time" => fe.patch.0 = parse(key, v)?,
            "patch_freq" => fe.patch.1 = parse(key, v)?,
            "jitter_db" => fe.jitter_db = parse(key, v)?,
            "log_floor" => fe.log_floor = parse(key, v)?,

            "n_targets_block" => sa.n_targets_block = parse(key, v)?,
            "block_scale_min" => sa.block_scale.0 = parse(key, v)?,
            "block_scale_max" => sa.block_scale.1 = parse(key, v)?,
            "block_aspect_min" => sa.block_aspect.0 = parse(key, v)?,
            "block_aspect_max" => sa.block_aspect.1 = parse(key, v)?,
            "n_targets_tf" => sa.n_targets_tf = parse(key, v)?,
            "tf_scale_min" => sa.tf_scale.0 = parse(key, v)?,
            "tf_scale_max" => sa.tf_scale.1 = parse(key, v)?,
            "context_scale_min" => sa.context_scale.0 = parse(key, v)?,
            "context_scale_max" => sa.context_scale.1 = parse(key, v)?,
            "context_aspect" => sa.context_aspect = parse(key, v)?,
            "min_ratio" => sa.min_ratio = parse(key, v)?,
            "max_tries" => sa.max_tries = parse(key, v)?,

            "embed_dim" => mo.embed_dim = parse(key, v)?,
            "enc_depth" => mo.enc_depth = parse(key, v)?,
            "n_heads" => mo.n_heads = parse(key, v)?,
            "pred_depth" => mo.pred_depth = parse(key, v)?,
            "pred_dim" => mo.pred_dim = parse(key, v)?,
            "mlp_ratio" => mo.mlp_ratio = parse(key, v)?,
            "patch_len" => mo.patch_len = parse(key, v)?,

            "lr" => op.lr = parse(key, v)?,
            "beta1" => op.betas.0 = parse(key, v)?,
            "beta2" => op.betas.1 = parse(key, v)?,
            "weight_decay" => op.weight_decay = parse(key, v)?,
            "warmup_steps" => op.warmup_steps = parse(key, v)?,
            "total_steps" => op.total_steps = parse(key, v)?,
            "batch_size" => op.batch_size = parse(key, v)?,

            "c0" => p.curriculum.c0 = parse(key, v)?,
            "curriculum" => p.curriculum.kind = parse(key, v)?,
            "target_norm" => p.target_norm = parse(key, v)?,
            "ema_start" => p.ema_start = parse(key, v)?,
            "ema_end" => p.ema_end = parse(key, v)?,
            "checkpoint_every" => p.checkpoint_every = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,

            "ft_lr" => self.finetune.lr = parse(key, v)?,
            "ft_weight_decay" => self.finetune.weight_decay = parse(key, v)?,
            "ft_epochs" => self.finetune.epochs = parse(key, v)?,
            "ft_batch_size" => self.finetune.batch_size = parse(key, v)?,
            "rm_ratio" => self.finetune.rm.ratio = parse(key, v)?,
            "rm_per_layer" => self.finetune.rm.per_layer = parse_bool(key, v)?,
            "eval_fraction" => self.eval_fraction = parse(key, v)?,

            "probe_lr" => self.probe.lr = parse(key, v)?,
            "probe_weight_decay" => self.probe.weight_decay = parse(key, v)?,
            "probe_epochs" => self.probe.epochs = parse(key, v)?,
            "probe_batch_size" => self.probe.batch_size = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, grouped by section.
    pub fn sections(&self) -> Vec<(&'static str, Vec<(&'static str, String)>)> {
        fn s(v: impl Display) -> String {
            v.to_string()
        }
        let p = &self.pretrain;
        let (fe, sa, mo, op) = (&p.frontend, &p.sampler, &p.model, &p.optim);
        let rm: &RMConfig = &self.finetune.rm;
        vec![
            (
                "frontend",
                vec![
                    ("n_mels", s(fe.n_mels)),
                    ("win_ms", s(fe.win_ms)),
                    ("hop_ms", s(fe.hop_ms)),
                    ("fft_size", s(fe.fft_size)),
                    ("target_frames", s(fe.target_frames)),
                    ("patch_time", s(fe.patch.0)),
                    ("patch_freq", s(fe.patch.1)),
                    ("jitter_db", s(fe.jitter_db)),
                    ("log_floor", s(fe.log_floor)),
                ],
            ),
            (
                "mask sampler",
                vec![
                    ("n_targets_block", s(sa.n_targets_block)),
                    ("block_scale_min", s(sa.block_scale.0)),
                    ("block_scale_max", s(sa.block_scale.1)),
                    ("block_aspect_min", s(sa.block_aspect.0)),
                    ("block_aspect_max", s(sa.block_aspect.1)),
                    ("n_targets_tf", s(sa.n_targets_tf)),
                    ("tf_scale_min", s(sa.tf_scale.0)),
                    ("tf_scale_max", s(sa.tf_scale.1)),
                    ("context_scale_min", s(sa.context_scale.0)),
                    ("context_scale_max", s(sa.context_scale.1)),
                    ("context_aspect", s(sa.context_aspect)),
                    ("min_ratio", s(sa.min_ratio)),
                    ("max_tries", s(sa.max_tries)),
                ],
            ),
            (
                "model",
                vec![
                    ("embed_dim", s(mo.embed_dim)),
                    ("enc_depth", s(mo.enc_depth)),
                    ("n_heads", s(mo.n_heads)),
                    ("pred_depth", s(mo.pred_depth)),
                    ("pred_dim", s(mo.pred_dim)),
                    ("mlp_ratio", s(mo.mlp_ratio)),
                    ("patch_len", s(mo.patch_len)),
                ],
            ),
            (
                "optimizer (reference scale: lr 2e-4, batch 512)",
                vec![
                    ("lr", s(op.lr)),
                    ("beta1", s(op.betas.0)),
                    ("beta2", s(op.betas.1)),
                    ("weight_decay", s(op.weight_decay)),
                    ("warmup_steps", s(op.warmup_steps)),
                    ("total_steps", s(op.total_steps)),
                    ("batch_size", s(op.batch_size)),
                ],
            ),
            (
                "pretraining",
                vec![
                    ("c0", s(p.curriculum.c0)),
                    ("curriculum", s(p.curriculum.kind)),
                    ("target_norm", s(p.target_norm)),
                    ("ema_start", s(p.ema_start)),
                    ("ema_end", s(p.ema_end)),
                    ("checkpoint_every", s(p.checkpoint_every)),
                    ("epochs", s(self.epochs)),
                ],
            ),
            (
                "fine-tuning",
                vec![
                    ("ft_lr", s(self.finetune.lr)),
                    ("ft_weight_decay", s(self.finetune.weight_decay)),
                    ("ft_epochs", s(self.finetune.epochs)),
                    ("ft_batch_size", s(self.finetune.batch_size)),
                    ("rm_ratio", s(rm.ratio)),
                    ("rm_per_layer", s(rm.per_layer)),
                    ("eval_fraction", s(self.eval_fraction)),
                ],
            ),
            (
                "linear probe",
                vec![
                    ("probe_lr", s(self.probe.lr)),
                    ("probe_weight_decay", s(self.probe.weight_decay)),
                    ("probe_epochs", s(self.probe.epochs)),
                    ("probe_batch_size", s(self.probe.batch_size)),
                ],
            ),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, (title, entries)) in self.sections().into_iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&format!("# {title}\n"));
            for (k, v) in entries {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }
}
