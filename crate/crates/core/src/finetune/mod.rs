//! Classification on top of the context encoder: regularized masking,
//! mean pooling, a linear head, losses, the training loop and metrics.

mod metrics;

pub use metrics::{average_precision, metric_accuracy, metric_map};

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::{eval_input, Dataset};
use crate::error::{Error, Result};
use crate::maskgen::{GridShape, MaskIndexSet};
use crate::model::layers::{linear, linear_backward, LinearIds};
use crate::model::{Checkpoint, Encoder, EncoderCache, KeyExclusion, ParamStore, Scalar};
use crate::pretrain::{lr_at, AdamW, OptimizerConfig};
use crate::seed;
use crate::spectro::FrontendConfig;

pub const METRICS_CSV: &str = "finetune_metrics.csv";
pub const METRICS_HEADER: &str = "epoch,train_loss,eval_accuracy,eval_map";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RMConfig {
    pub ratio: f64,
    /// Training passes set this; evaluation never applies masking.
    pub active: bool,
    /// Draw a fresh set for every layer instead of sharing one.
    pub per_layer: bool,
}

impl Default for RMConfig {
    fn default() -> Self {
        Self {
            ratio: 0.10,
            active: true,
            per_layer: false,
        }
    }
}

impl RMConfig {
    pub fn off() -> Self {
        Self {
            ratio: 0.0,
            active: false,
            per_layer: false,
        }
    }

    pub fn validate(&self, n_tokens: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.ratio) || rm_count(n_tokens, self.ratio) >= n_tokens {
            return Err(Error::Config(format!(
                "rm ratio {} leaves no token of {n_tokens} unmasked",
                self.ratio
            )));
        }
        Ok(())
    }
}

fn rm_count(n_tokens: usize, ratio: f64) -> usize {
    (ratio * n_tokens as f64).floor() as usize
}

/// `floor(ratio * n)` distinct token indices, uniformly without replacement.
pub fn sample_rm_mask<R: Rng + ?Sized>(grid: GridShape, ratio: f64, rng: &mut R) -> Result<MaskIndexSet> {
    let n = grid.len();
    RMConfig {
        ratio,
        ..RMConfig::default()
    }
    .validate(n)?;
    let picked = rand::seq::index::sample(rng, n, rm_count(n, ratio)).into_vec();
    MaskIndexSet::from_unsorted(picked, grid)
}

/// The key-exclusion flags of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum RmDraw {
    None,
    Shared(Vec<bool>),
    PerLayer(Vec<Vec<bool>>),
}

impl RmDraw {
    pub fn draw<R: Rng + ?Sized>(grid: GridShape, depth: usize, rm: &RMConfig, rng: &mut R) -> Result<Self> {
        if !rm.active {
            return Ok(RmDraw::None);
        }
        if rm.per_layer {
            let layers = (0..depth)
                .map(|_| sample_rm_mask(grid, rm.ratio, rng).map(|m| m.to_flags()))
                .collect::<Result<_>>()?;
            Ok(RmDraw::PerLayer(layers))
        } else {
            Ok(RmDraw::Shared(sample_rm_mask(grid, rm.ratio, rng)?.to_flags()))
        }
    }

    pub fn exclusion(&self) -> KeyExclusion<'_> {
        match self {
            RmDraw::None => KeyExclusion::None,
            RmDraw::Shared(f) => KeyExclusion::Shared(f),
            RmDraw::PerLayer(l) => KeyExclusion::PerLayer(l),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PooledCache<F> {
    encoder: EncoderCache<F>,
    n_tokens: usize,
}

impl<F> PooledCache<F> {
    pub fn encoder(&self) -> &EncoderCache<F> {
        &self.encoder
    }
}

/// Full-grid encoder pass under `draw`, mean-pooled over every token.
pub fn pooled_forward<F: Scalar>(
    encoder: &Encoder<F>,
    patches: ArrayView2<F>,
    draw: &RmDraw,
) -> Result<(Array1<F>, PooledCache<F>)> {
    let all: Vec<usize> = (0..encoder.grid().len()).collect();
    let (tokens, cache) = encoder.forward(patches, &all, draw.exclusion())?;
    let pooled = tokens.sum_axis(Axis(0)) * F::of(1.0 / all.len() as f64);
    Ok((
        pooled,
        PooledCache {
            encoder: cache,
            n_tokens: all.len(),
        },
    ))
}

/// Draws a regularized mask per `rm` and runs [`pooled_forward`].
pub fn rm_forward<F: Scalar, R: Rng + ?Sized>(
    encoder: &Encoder<F>,
    patches: ArrayView2<F>,
    rm: &RMConfig,
    rng: &mut R,
) -> Result<(Array1<F>, PooledCache<F>)> {
    let draw = RmDraw::draw(encoder.grid(), encoder.layout.blocks.len(), rm, rng)?;
    pooled_forward(encoder, patches, &draw)
}

pub fn pooled_backward<F: Scalar>(
    encoder: &Encoder<F>,
    cache: &PooledCache<F>,
    dpooled: ArrayView1<F>,
    grads: &mut ParamStore<F>,
) {
    let scale = F::of(1.0 / cache.n_tokens as f64);
    let row = dpooled.mapv(|v| v * scale);
    let dout = row.broadcast((cache.n_tokens, row.len())).expect("row broadcast").to_owned();
    encoder.backward(&cache.encoder, dout.view(), grads);
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<F> {
    pub params: ParamStore<F>,
    pub ids: LinearIds,
}

impl<F: Scalar> ClassifierHead<F> {
    pub fn new<R: Rng + ?Sized>(dim: usize, n_classes: usize, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        let ids = LinearIds::register(&mut params, "fc", dim, n_classes, rng);
        Self { params, ids }
    }

    pub fn dim(&self) -> usize {
        self.params.get(self.ids.w).shape[0]
    }

    pub fn n_classes(&self) -> usize {
        self.params.get(self.ids.w).shape[1]
    }
}

/// Logits `pooled . W + b`, one row per pooled row.
pub fn classify<F: Scalar>(pooled: ArrayView2<F>, head: &ClassifierHead<F>) -> Result<Array2<F>> {
    if pooled.ncols() != head.dim() {
        return Err(Error::Shape(format!(
            "pooled width {} vs head input {}",
            pooled.ncols(),
            head.dim()
        )));
    }
    Ok(linear(pooled, &head.params, head.ids))
}

/// Mean softmax cross-entropy and its logit gradient.
pub fn softmax_cross_entropy<F: Scalar>(logits: ArrayView2<F>, labels: &[usize]) -> Result<(f64, Array2<F>)> {
    let (b, c) = logits.dim();
    if b != labels.len() || b == 0 {
        return Err(Error::Shape(format!("{b} logit rows for {} labels", labels.len())));
    }
    if labels.iter().any(|&l| l >= c) {
        return Err(Error::Shape(format!("label outside {c} classes")));
    }
    let mut grad = Array2::<F>::zeros((b, c));
    let mut loss = 0.0;
    for ((row, mut g), &label) in logits.rows().into_iter().zip(grad.rows_mut()).zip(labels) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
        let exps: Vec<f64> = row.iter().map(|v| (v.f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() + max - row[label].f64();
        for (k, (gk, e)) in g.iter_mut().zip(&exps).enumerate() {
            let onehot = if k == label { 1.0 } else { 0.0 };
            *gk = F::of((e / z - onehot) / b as f64);
        }
    }
    Ok((loss / b as f64, grad))
}

/// Per-class sigmoid binary cross-entropy, averaged over all cells.
pub fn sigmoid_bce<F: Scalar>(logits: ArrayView2<F>, targets: ArrayView2<F>) -> Result<(f64, Array2<F>)> {
    if logits.dim() != targets.dim() || logits.is_empty() {
        return Err(Error::Shape(format!("logits {:?} vs targets {:?}", logits.dim(), targets.dim())));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::<F>::zeros(logits.raw_dim());
    for ((g, &x), &t) in grad.iter_mut().zip(&logits).zip(&targets) {
        let (x, t) = (x.f64(), t.f64());
        loss += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
        *g = F::of((1.0 / (1.0 + (-x).exp()) - t) / n);
    }
    Ok((loss / n, grad))
}

fn multi_hot<F: Scalar>(labels: &[Vec<usize>], n_classes: usize) -> Array2<F> {
    let mut m = Array2::zeros((labels.len(), n_classes));
    for (i, ls) in labels.iter().enumerate() {
        for &l in ls {
            m[[i, l]] = F::one();
        }
    }
    m
}

/// Loss and logit gradient for the task type of `labels`.
pub fn task_loss<F: Scalar>(logits: ArrayView2<F>, labels: &[Vec<usize>], multi_label: bool) -> Result<(f64, Array2<F>)> {
    if multi_label {
        sigmoid_bce(logits, multi_hot(labels, logits.ncols()).view())
    } else {
        let first: Vec<usize> = labels
            .iter()
            .map(|l| l.first().copied().ok_or(Error::EmptyInput("clip label")))
            .collect::<Result<_>>()?;
        softmax_cross_entropy(logits, &first)
    }
}

/// Encoder plus head.
#[derive(Debug, Clone)]
pub struct Classifier<F> {
    pub encoder: Encoder<F>,
    pub head: ClassifierHead<F>,
}

#[derive(Debug, Clone)]
pub struct ClassifierGrads<F> {
    pub encoder: ParamStore<F>,
    pub head: ParamStore<F>,
}

impl<F: Scalar> Classifier<F> {
    pub fn zero_grads(&self) -> ClassifierGrads<F> {
        ClassifierGrads {
            encoder: self.encoder.params.zeros_like(),
            head: self.head.params.zeros_like(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push_store("encoder", &self.encoder.params);
        ck.push_store("head", &self.head.params);
        ck
    }

    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.load_store("encoder", &mut self.encoder.params)?;
        ck.load_store("head", &mut self.head.params)
    }

    /// Dense pooled features, one row per input.
    pub fn features(&self, inputs: &[Array2<F>]) -> Result<Array2<F>> {
        let mut out = Array2::zeros((inputs.len(), self.encoder.embed_dim()));
        for (i, x) in inputs.iter().enumerate() {
            let (p, _) = pooled_forward(&self.encoder, x.view(), &RmDraw::None)?;
            out.row_mut(i).assign(&p);
        }
        Ok(out)
    }

    /// Mean batch loss. Gradients are accumulated into `grads`; encoder
    /// gradients only when `train_encoder` is set.
    pub fn batch_loss_and_grads(
        &self,
        inputs: &[ArrayView2<F>],
        labels: &[Vec<usize>],
        multi_label: bool,
        draws: &[RmDraw],
        train_encoder: bool,
        grads: &mut ClassifierGrads<F>,
    ) -> Result<f64> {
        if inputs.len() != labels.len() || inputs.len() != draws.len() || inputs.is_empty() {
            return Err(Error::Shape("inputs, labels and masks must pair up".into()));
        }
        let mut pooled = Array2::zeros((inputs.len(), self.encoder.embed_dim()));
        let mut caches = Vec::with_capacity(inputs.len());
        for (i, (x, d)) in inputs.iter().zip(draws).enumerate() {
            let (p, c) = pooled_forward(&self.encoder, *x, d)?;
            pooled.row_mut(i).assign(&p);
            caches.push(c);
        }
        let logits = classify(pooled.view(), &self.head)?;
        let (loss, dlogits) = task_loss(logits.view(), labels, multi_label)?;
        let dpooled = linear_backward(pooled.view(), dlogits.view(), &self.head.params, self.head.ids, &mut grads.head);
        if train_encoder {
            for (c, d) in caches.iter().zip(dpooled.rows()) {
                pooled_backward(&self.encoder, c, d, &mut grads.encoder);
            }
        }
        Ok(loss)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub rm: RMConfig,
    /// Linear probe: only the head is trained.
    pub freeze_encoder: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 0.05,
            epochs: 10,
            batch_size: 16,
            rm: RMConfig::default(),
            freeze_encoder: false,
        }
    }
}

impl FinetuneConfig {
    /// Frozen encoder, dense forward.
    pub fn probe() -> Self {
        Self {
            lr: 1e-2,
            weight_decay: 0.0,
            epochs: 100,
            batch_size: 16,
            rm: RMConfig::off(),
            freeze_encoder: true,
        }
    }

    fn optimizer(&self, total_steps: u64) -> OptimizerConfig {
        OptimizerConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_steps: total_steps / 10,
            total_steps,
            batch_size: self.batch_size,
            ..OptimizerConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    pub train_loss: f64,
    pub eval_accuracy: f64,
    pub eval_map: f64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8},{:.6},{:.6}",
            self.epoch, self.train_loss, self.eval_accuracy, self.eval_map
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub map: f64,
    pub logits: Array2<f32>,
}

fn labels_of(data: &Dataset) -> Vec<Vec<usize>> {
    data.clips.iter().map(|c| c.labels.clone()).collect()
}

fn model_inputs(data: &Dataset, frontend: &FrontendConfig) -> Result<Vec<Array2<f32>>> {
    data.clips
        .iter()
        .map(|c| eval_input(&c.frames, frontend).map(|g| g.tokens))
        .collect()
}

fn report(logits: Array2<f32>, data: &Dataset) -> Result<EvalReport> {
    let labels = labels_of(data);
    Ok(EvalReport {
        accuracy: metric_accuracy(logits.view(), &labels)?,
        map: metric_map(logits.view(), multi_hot::<f32>(&labels, logits.ncols()).view())?,
        logits,
    })
}

/// Dense evaluation of `model` on every clip of `data`.
pub fn evaluate(model: &Classifier<f32>, data: &Dataset, frontend: &FrontendConfig) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    if data.n_classes() != model.head.n_classes() {
        return Err(Error::Shape(format!(
            "dataset has {} classes, head has {}",
            data.n_classes(),
            model.head.n_classes()
        )));
    }
    let feats = model.features(&model_inputs(data, frontend)?)?;
    report(classify(feats.view(), &model.head)?, data)
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: Classifier<f32>,
    pub records: Vec<EpochRecord>,
}

/// Trains a fresh head (and, unless frozen, the encoder) on `train`,
/// evaluating on `eval` after every epoch. Writes the metrics CSV into
/// `out_dir` when given.
pub fn finetune_loop(
    encoder: Encoder<f32>,
    train: &Dataset,
    eval: &Dataset,
    frontend: &FrontendConfig,
    cfg: &FinetuneConfig,
    seed_value: u64,
    out_dir: Option<&Path>,
) -> Result<FinetuneOutcome> {
    if train.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    if eval.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let grid = encoder.grid();
    cfg.rm.validate(grid.len())?;
    let n_classes = train.n_classes();
    let head = ClassifierHead::new(encoder.embed_dim(), n_classes, &mut seed::stream(seed_value, "head", 0));
    let mut model = Classifier { encoder, head };
    let train_inputs = model_inputs(train, frontend)?;
    let eval_inputs = model_inputs(eval, frontend)?;
    let train_labels = labels_of(train);

    let rm_on = cfg.rm.active && cfg.rm.ratio > 0.0;
    let cached = cfg.freeze_encoder && !rm_on;
    let (train_feats, eval_feats) = if cached {
        (Some(model.features(&train_inputs)?), Some(model.features(&eval_inputs)?))
    } else {
        (None, None)
    };

    let n = train.len();
    let per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let optim = cfg.optimizer((cfg.epochs * per_epoch).max(1));
    let mut opt_head = AdamW::new(&model.head.params);
    let mut opt_encoder = AdamW::new(&model.encoder.params);

    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_CSV);
            let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
            writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };

    let mut records = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::stream(seed_value, "ft_shuffle", epoch));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = model.zero_grads();
            let labels: Vec<Vec<usize>> = chunk.iter().map(|&i| train_labels[i].clone()).collect();
            let loss = if let Some(feats) = &train_feats {
                let pooled = feats.select(Axis(0), chunk);
                let logits = classify(pooled.view(), &model.head)?;
                let (loss, dlogits) = task_loss(logits.view(), &labels, train.multi_label)?;
                linear_backward(pooled.view(), dlogits.view(), &model.head.params, model.head.ids, &mut grads.head);
                loss
            } else {
                let draws = (0..chunk.len())
                    .map(|i| {
                        let mut rng = seed::stream2(seed_value, "rm", step, i as u64);
                        RmDraw::draw(grid, model.encoder.layout.blocks.len(), &cfg.rm, &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let inputs: Vec<ArrayView2<f32>> = chunk.iter().map(|&i| train_inputs[i].view()).collect();
                model.batch_loss_and_grads(&inputs, &labels, train.multi_label, &draws, !cfg.freeze_encoder, &mut grads)?
            };
            if !loss.is_finite() {
                return Err(Error::Precondition(format!("non-finite loss in epoch {}", epoch + 1)));
            }
            let lr = lr_at(step, &optim);
            opt_head.step(&mut model.head.params, &grads.head, lr, &optim)?;
            if !cfg.freeze_encoder {
                opt_encoder.step(&mut model.encoder.params, &grads.encoder, lr, &optim)?;
            }
            epoch_loss += loss * chunk.len() as f64 / n as f64;
            step += 1;
        }
        let feats = match &eval_feats {
            Some(f) => f.clone(),
            None => model.features(&eval_inputs)?,
        };
        let r = report(classify(feats.view(), &model.head)?, eval)?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            train_loss: epoch_loss,
            eval_accuracy: r.accuracy,
            eval_map: r.map,
        };
        if let Some((f, path)) = log.as_mut() {
            writeln!(f, "{}", rec.csv_row()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        records.push(rec);
    }
    if let Some((f, path)) = log.as_mut() {
        f.flush().map_err(|e| Error::io(path.as_path(), e))?;
    }
    Ok(FinetuneOutcome { model, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rm_mask_sizes() {
        let g = GridShape::new(8, 8);
        let mut rng = seed::stream(0, "t", 0);
        assert!(sample_rm_mask(g, 0.0, &mut rng).unwrap().is_empty());
        assert_eq!(sample_rm_mask(g, 0.10, &mut rng).unwrap().len(), 6);
        assert!(matches!(sample_rm_mask(g, 1.0, &mut rng), Err(Error::Config(_))));
        assert!(matches!(
            sample_rm_mask(GridShape::new(1, 1), 0.5, &mut rng).map(|m| m.len()),
            Ok(0)
        ));
    }

    #[test]
    fn rm_mask_is_uniform() {
        let g = GridShape::new(8, 8);
        let mut rng = seed::stream(3, "t", 0);
        let mut counts = [0usize; 64];
        let draws = 10_000;
        for _ in 0..draws {
            for &i in sample_rm_mask(g, 0.10, &mut rng).unwrap().indices() {
                counts[i] += 1;
            }
        }
        let p = 6.0 / 64.0;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() < 3.5 * sd, "count {c}");
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let l = Array2::<f64>::zeros((3, 4));
        let (loss, g) = softmax_cross_entropy(l.view(), &[0, 1, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.3863).abs() < 1e-4);
        for row in g.rows() {
            assert!(row.sum().abs() < 1e-12);
        }
    }

    #[test]
    fn bce_closed_form() {
        let l = array![[0.0f64, 0.0]];
        let t = array![[1.0f64, 0.0]];
        let (loss, g) = sigmoid_bce(l.view(), t.view()).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        assert_eq!(g, array![[-0.25, 0.25]]);
    }

    #[test]
    fn classify_cases() {
        let mut head = ClassifierHead::<f64>::new(3, 3, &mut seed::stream(0, "h", 0));
        head.params.fill_zero();
        head.params.vec_mut(head.ids.b).assign(&array![1.0, 2.0, 3.0]);
        let x = array![[0.5, -1.0, 2.0]];
        assert_eq!(classify(x.view(), &head).unwrap(), array![[1.0, 2.0, 3.0]]);
        head.params.vec_mut(head.ids.b).fill(0.0);
        head.params.mat_mut(head.ids.w).assign(&Array2::eye(3));
        let onehot = array![[0.0, 1.0, 0.0]];
        assert_eq!(classify(onehot.view(), &head).unwrap(), onehot);
        let y = classify((&x * 3.0).view(), &head).unwrap();
        assert_eq!(y, classify(x.view(), &head).unwrap() * 3.0);
        assert!(classify(array![[1.0, 2.0]].view(), &head).is_err());
    }
}
