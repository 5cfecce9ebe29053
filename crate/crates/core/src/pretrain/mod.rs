//! Latent-prediction pretraining: loss, optimizer step, EMA teacher and the
//! epoch loop with CSV logging and resumable checkpoints.

mod optim;

pub use optim::{lr_at, momentum_at, AdamW, OptimizerConfig, ADAM_EPS};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;

use crate::dataset::{pretrain_input, Dataset};
use crate::error::{Error, Result};
use crate::maskgen::{build_mask_plan, CurriculumSchedule, MaskMode, SamplerConfig};
use crate::model::{ema_update, Checkpoint, Jepa, ModelConfig, ParamStore, Scalar, TargetNorm};
use crate::seed;
use crate::spectro::{FrontendConfig, PatchGrid};

pub const LOSS_CSV: &str = "pretrain_loss.csv";
pub const LOSS_HEADER: &str = "step,loss,f_s,mode_tf_fraction,lr";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const STATE_FILE: &str = "train_state.txt";

/// Everything the pretraining step needs besides the model itself.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSettings {
    pub frontend: FrontendConfig,
    pub sampler: SamplerConfig,
    pub model: ModelConfig,
    pub optim: OptimizerConfig,
    pub curriculum: CurriculumSchedule,
    pub target_norm: TargetNorm,
    pub ema_start: f64,
    pub ema_end: f64,
    /// Write `checkpoint.bin` every this many steps; 0 writes only at the end.
    pub checkpoint_every: u64,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        let optim = OptimizerConfig::default();
        Self {
            frontend: FrontendConfig::default(),
            sampler: SamplerConfig::default(),
            model: ModelConfig::default(),
            curriculum: CurriculumSchedule::new(optim.total_steps),
            optim,
            target_norm: TargetNorm::LayerNorm,
            ema_start: 0.996,
            ema_end: 1.0,
            checkpoint_every: 0,
        }
    }
}

impl PretrainSettings {
    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.sampler.validate()?;
        self.model.validate()?;
        self.optim.validate()?;
        self.curriculum.validate()?;
        if self.model.patch_len != self.frontend.patch_len() {
            return Err(Error::Config(format!(
                "patch_len {} does not match the {}x{} patch",
                self.model.patch_len, self.frontend.patch.0, self.frontend.patch.1
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_start) || !(0.0..=1.0).contains(&self.ema_end) {
            return Err(Error::Config("EMA momenta must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Online networks, their optimizer moments, and the step counter. Random
/// draws are keyed by `(seed, step, sample)`, so no generator state is kept.
#[derive(Debug, Clone)]
pub struct TrainState<F> {
    pub seed: u64,
    pub step: u64,
    pub model: Jepa<F>,
    pub opt_encoder: AdamW<F>,
    pub opt_predictor: AdamW<F>,
}

impl<F: Scalar> TrainState<F> {
    pub fn new(settings: &PretrainSettings, seed_value: u64) -> Result<Self> {
        settings.validate()?;
        let (rows, cols) = settings.frontend.grid();
        let grid = crate::maskgen::GridShape::new(rows, cols);
        let model = Jepa::new(&settings.model, grid, &mut seed::stream(seed_value, "init", 0))?;
        Ok(Self {
            seed: seed_value,
            step: 0,
            opt_encoder: AdamW::new(&model.context.params),
            opt_predictor: AdamW::new(&model.predictor.params),
            model,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        ck.push_store("adam.encoder.m", &self.opt_encoder.m);
        ck.push_store("adam.encoder.v", &self.opt_encoder.v);
        ck.push_store("adam.predictor.m", &self.opt_predictor.m);
        ck.push_store("adam.predictor.v", &self.opt_predictor.v);
        ck
    }

    /// Writes the checkpoint and the step sidecar into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.to_checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
        let text = format!(
            "seed = {}\nstep = {}\nadam_t_encoder = {}\nadam_t_predictor = {}\n",
            self.seed, self.step, self.opt_encoder.t, self.opt_predictor.t
        );
        let path = dir.join(STATE_FILE);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Restores a state written by [`TrainState::save`].
    pub fn load(settings: &PretrainSettings, dir: &Path) -> Result<Self> {
        let path = dir.join(STATE_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let field = |key: &str| -> Result<u64> {
            text.lines()
                .filter_map(|l| l.split_once('='))
                .find(|(k, _)| k.trim() == key)
                .and_then(|(_, v)| v.trim().parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing `{key}`", path.display())))
        };
        let mut state = Self::new(settings, field("seed")?)?;
        state.step = field("step")?;
        state.opt_encoder.t = field("adam_t_encoder")?;
        state.opt_predictor.t = field("adam_t_predictor")?;
        let ck = Checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
        state.model.load_checkpoint(&ck)?;
        ck.load_store("adam.encoder.m", &mut state.opt_encoder.m)?;
        ck.load_store("adam.encoder.v", &mut state.opt_encoder.v)?;
        ck.load_store("adam.predictor.m", &mut state.opt_predictor.m)?;
        ck.load_store("adam.predictor.v", &mut state.opt_predictor.v)?;
        Ok(state)
    }
}

/// Mean over masks of the per-mask mean squared error.
pub fn jepa_loss<F: Scalar>(preds: &[Array2<F>], targets: &[Array2<F>]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("target mask list"));
    }
    if preds.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        if p.dim() != t.dim() {
            return Err(Error::Shape(format!("prediction {:?} vs target {:?}", p.dim(), t.dim())));
        }
        if p.is_empty() {
            return Err(Error::EmptyInput("target mask"));
        }
        let sq: f64 = p.iter().zip(t).map(|(&a, &b)| (a - b).f64().powi(2)).sum();
        total += sq / p.len() as f64;
    }
    Ok(total / preds.len() as f64)
}

/// Gradients for the online networks. The target encoder never gets one.
#[derive(Debug, Clone)]
pub struct JepaGrads<F> {
    pub encoder: ParamStore<F>,
    pub predictor: ParamStore<F>,
}

impl<F: Scalar> JepaGrads<F> {
    pub fn zeros(model: &Jepa<F>) -> Self {
        Self {
            encoder: model.context.params.zeros_like(),
            predictor: model.predictor.params.zeros_like(),
        }
    }
}

/// Loss of one sample under one mask plan, with gradients scaled by `weight`
/// added to `grads`.
pub fn sample_loss_and_grads<F: Scalar>(
    model: &Jepa<F>,
    patches: ArrayView2<F>,
    plan: &crate::maskgen::MaskPlan,
    norm: TargetNorm,
    weight: f64,
    grads: &mut JepaGrads<F>,
) -> Result<f64> {
    if plan.targets.is_empty() {
        return Err(Error::EmptyInput("target mask list"));
    }
    let target = model.encode_target(patches, norm)?;
    let (ctx, ctx_cache) = model.encode_context(patches, plan)?;
    let ctx_pos = plan.context.indices();
    let n_masks = plan.targets.len() as f64;
    let mut dctx = Array2::<F>::zeros(ctx.raw_dim());
    let mut loss = 0.0;
    for set in &plan.targets {
        let (pred, cache) = model.predict_targets(ctx.view(), ctx_pos, set)?;
        let diff = pred - &target.select(Axis(0), set.indices());
        let n = diff.len() as f64;
        loss += diff.iter().map(|d| d.f64().powi(2)).sum::<f64>() / n / n_masks;
        let dpred = diff * F::of(2.0 * weight / (n * n_masks));
        dctx += &model.predictor.backward(&cache, dpred.view(), &mut grads.predictor);
    }
    model.context.backward(&ctx_cache, dctx.view(), &mut grads.encoder);
    Ok(loss)
}

/// One logged training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the step just taken.
    pub step: u64,
    pub loss: f64,
    pub f_s: f64,
    pub mode_tf_fraction: f64,
    pub lr: f64,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8},{:.8},{:.6},{:.8e}",
            self.step, self.loss, self.f_s, self.mode_tf_fraction, self.lr
        )
    }
}

/// Mask plans, loss, AdamW update of the online networks, then the EMA
/// update of the target encoder.
pub fn training_step<F: Scalar>(
    state: &mut TrainState<F>,
    batch: &[PatchGrid],
    settings: &PretrainSettings,
) -> Result<StepRecord> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("training batch"));
    }
    let s = state.step;
    let grid = state.model.grid();
    let mut grads = JepaGrads::zeros(&state.model);
    let weight = 1.0 / batch.len() as f64;
    let (mut loss, mut n_tf) = (0.0, 0usize);
    for (i, sample) in batch.iter().enumerate() {
        let mut rng = seed::stream2(state.seed, "masks", s, i as u64);
        let plan = build_mask_plan(grid, &settings.sampler, s, &settings.curriculum, &mut rng)?;
        n_tf += usize::from(plan.mode == MaskMode::TimeFrequency);
        let patches = sample.tokens.mapv(|v| F::of(f64::from(v)));
        loss += weight
            * sample_loss_and_grads(&state.model, patches.view(), &plan, settings.target_norm, weight, &mut grads)?;
    }
    let lr = lr_at(s, &settings.optim);
    let model = &mut state.model;
    state
        .opt_encoder
        .step(&mut model.context.params, &grads.encoder, lr, &settings.optim)?;
    state
        .opt_predictor
        .step(&mut model.predictor.params, &grads.predictor, lr, &settings.optim)?;
    let m = momentum_at(s, settings.optim.total_steps, settings.ema_start, settings.ema_end);
    ema_update(&mut model.target.params, &model.context.params, m)?;
    state.step += 1;
    Ok(StepRecord {
        step: state.step,
        loss,
        f_s: settings.curriculum.f(s),
        mode_tf_fraction: n_tf as f64 / batch.len() as f64,
        lr,
    })
}

/// Where the loop writes its outputs. Without an output directory nothing is
/// written and checkpoints are skipped.
#[derive(Debug, Clone, Default)]
pub struct LoopOutput {
    pub dir: Option<PathBuf>,
    /// Stop after this many total steps even if epochs remain.
    pub max_steps: Option<u64>,
}

fn steps_per_epoch(n: usize, batch: usize) -> u64 {
    (n / batch).max(1) as u64
}

/// Sample order of one epoch: a seeded shuffle, cycled if the set is smaller
/// than one batch.
fn epoch_order(n: usize, batch: usize, seed_value: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::stream(seed_value, "shuffle", epoch));
    let need = steps_per_epoch(n, batch) as usize * batch;
    (0..need).map(|i| order[i % n]).collect()
}

/// Runs `epochs` epochs from `state.step`, which may be mid-run after a
/// resume. Returns the records of the steps taken here.
pub fn pretrain_loop(
    state: &mut TrainState<f32>,
    data: &Dataset,
    settings: &PretrainSettings,
    epochs: u64,
    out: &LoopOutput,
) -> Result<Vec<StepRecord>> {
    if data.is_empty() {
        return Err(Error::EmptyInput("pretraining dataset"));
    }
    settings.validate()?;
    let batch = settings.optim.batch_size;
    let per_epoch = steps_per_epoch(data.len(), batch);
    let mut end = epochs * per_epoch;
    if let Some(cap) = out.max_steps {
        end = end.min(cap);
    }
    let mut log = match &out.dir {
        Some(dir) => Some(open_loss_log(dir, state.step)?),
        None => None,
    };
    let mut records = Vec::new();
    while state.step < end {
        let epoch = state.step / per_epoch;
        let order = epoch_order(data.len(), batch, state.seed, epoch);
        let offset = (state.step % per_epoch) as usize * batch;
        let mut inputs = Vec::with_capacity(batch);
        for (i, &idx) in order[offset..offset + batch].iter().enumerate() {
            let mut rng = seed::stream2(state.seed, "augment", state.step, i as u64);
            inputs.push(pretrain_input(&data.clips[idx].frames, &settings.frontend, &mut rng)?);
        }
        let rec = training_step(state, &inputs, settings)?;
        if !rec.loss.is_finite() {
            return Err(Error::Precondition(format!("non-finite loss at step {}", rec.step)));
        }
        if let Some((w, path)) = log.as_mut() {
            writeln!(w, "{}", rec.csv_row()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        records.push(rec);
        if let Some(dir) = &out.dir {
            if settings.checkpoint_every > 0 && state.step % settings.checkpoint_every == 0 {
                flush(&mut log)?;
                state.save(dir)?;
            }
        }
    }
    flush(&mut log)?;
    if let Some(dir) = &out.dir {
        state.save(dir)?;
    }
    Ok(records)
}

type LossLog = (BufWriter<File>, PathBuf);

fn flush(log: &mut Option<LossLog>) -> Result<()> {
    if let Some((w, path)) = log.as_mut() {
        w.flush().map_err(|e| Error::io(path.as_path(), e))?;
    }
    Ok(())
}

/// Opens the loss log, keeping the rows of steps already taken when
/// resuming and dropping any written after the last checkpoint.
fn open_loss_log(dir: &Path, resume_step: u64) -> Result<LossLog> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(LOSS_CSV);
    let mut kept = vec![LOSS_HEADER.to_string()];
    if resume_step > 0 {
        if let Ok(text) = std::fs::read_to_string(&path) {
            kept.extend(
                text.lines()
                    .skip(1)
                    .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= resume_step))
                    .map(str::to_string),
            );
        }
    }
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for line in kept {
        writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    Ok((w, path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn loss_examples() {
        let a = array![[1.0f64, 2.0], [3.0, 4.0]];
        assert_eq!(jepa_loss(&[a.clone()], &[a.clone()]).unwrap(), 0.0);
        let b = &a + 1.0;
        assert_eq!(jepa_loss(&[b], &[a.clone()]).unwrap(), 1.0);
        let z = Array2::<f64>::zeros((1, 5));
        let p1 = Array2::from_elem((1, 5), 0.2f64.sqrt());
        let p2 = Array2::from_elem((1, 5), 0.4f64.sqrt());
        let l = jepa_loss(&[p1, p2], &[z.clone(), z]).unwrap();
        assert!((l - 0.3).abs() < 1e-12);
        assert!(matches!(jepa_loss::<f64>(&[], &[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn epoch_order_cycles_small_sets() {
        let o = epoch_order(3, 4, 1, 0);
        assert_eq!(o.len(), 4);
        assert_eq!(o[3], o[0]);
        assert_eq!(epoch_order(10, 4, 1, 2), epoch_order(10, 4, 1, 2));
        assert_ne!(epoch_order(10, 4, 1, 2), epoch_order(10, 4, 1, 3));
    }
}
