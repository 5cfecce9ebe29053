#![allow(dead_code)]

use ajepa::finetune::{Classifier, ClassifierHead, RmDraw};
use ajepa::maskgen::{GridShape, MaskIndexSet, MaskMode, MaskPlan};
use ajepa::model::{Encoder, Jepa, ModelConfig, ParamStore, TargetNorm};
use ajepa::pretrain::{sample_loss_and_grads, JepaGrads};
use ajepa::seed;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const EPS: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor for relative errors of near-zero gradients.
pub const ABS_FLOOR: f64 = 1e-6;

pub fn toy_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        enc_depth: 2,
        n_heads: 2,
        pred_depth: 2,
        pred_dim: 4,
        mlp_ratio: 2.0,
        patch_len: 6,
    }
}

pub fn toy_grid() -> GridShape {
    GridShape::new(4, 4)
}

pub fn toy_patches(salt: u64) -> Array2<f64> {
    let mut rng = seed::stream(salt, "patches", 0);
    Array2::from_shape_fn((16, 6), |_| rng.random_range(-1.5..1.5))
}

/// Replaces every value with a draw of the given spread so that activations
/// and gradients are far from the near-zero initialization.
pub fn randomize(store: &mut ParamStore<f64>, seed_value: u64, std: f64) {
    let normal = Normal::new(0.0, std).unwrap();
    let mut rng = seed::stream(seed_value, "randomize", 0);
    for p in store.iter_mut() {
        let gain_like = p.name.ends_with(".gain");
        for v in &mut p.data {
            *v = normal.sample(&mut rng) + if gain_like { 1.0 } else { 0.0 };
        }
    }
}

pub fn toy_plan() -> MaskPlan {
    let g = toy_grid();
    MaskPlan {
        context: MaskIndexSet::new(vec![0, 1, 2, 4, 5, 6, 8, 12], g).unwrap(),
        targets: vec![
            MaskIndexSet::new(vec![10, 11, 14, 15], g).unwrap(),
            MaskIndexSet::new(vec![3, 7], g).unwrap(),
        ],
        target_blocks: Vec::new(),
        mode: MaskMode::Block,
    }
}

pub fn toy_jepa() -> Jepa<f64> {
    let mut m = Jepa::new(&toy_config(), toy_grid(), &mut seed::stream(4, "init", 0)).unwrap();
    randomize(&mut m.context.params, 11, 0.3);
    randomize(&mut m.target.params, 12, 0.3);
    randomize(&mut m.predictor.params, 13, 0.3);
    m
}

pub fn toy_classifier(n_classes: usize) -> Classifier<f64> {
    let mut encoder = Encoder::new(&toy_config(), toy_grid(), &mut seed::stream(5, "init", 0)).unwrap();
    randomize(&mut encoder.params, 21, 0.3);
    let mut head = ClassifierHead::new(8, n_classes, &mut seed::stream(5, "head", 0));
    randomize(&mut head.params, 22, 0.3);
    Classifier { encoder, head }
}

pub fn jepa_loss_only(m: &Jepa<f64>, x: &Array2<f64>, plan: &MaskPlan) -> f64 {
    let mut g = JepaGrads::zeros(m);
    sample_loss_and_grads(m, x.view(), plan, TargetNorm::LayerNorm, 1.0, &mut g).unwrap()
}

pub struct ClassifierCase {
    pub inputs: Vec<Array2<f64>>,
    pub labels: Vec<Vec<usize>>,
    pub multi_label: bool,
    pub draws: Vec<RmDraw>,
}

impl ClassifierCase {
    pub fn new(multi_label: bool) -> Self {
        let mut shared = vec![false; 16];
        shared[3] = true;
        shared[9] = true;
        let mut layer1 = vec![false; 16];
        layer1[0] = true;
        Self {
            inputs: (0..3).map(|i| toy_patches(40 + i)).collect(),
            labels: if multi_label {
                vec![vec![0, 2], vec![1], vec![]]
            } else {
                vec![vec![0], vec![2], vec![1]]
            },
            multi_label,
            draws: vec![RmDraw::None, RmDraw::Shared(shared.clone()), RmDraw::PerLayer(vec![shared, layer1])],
        }
    }

    pub fn loss(&self, m: &Classifier<f64>, grads: &mut ajepa::finetune::ClassifierGrads<f64>) -> f64 {
        let views: Vec<_> = self.inputs.iter().map(|x| x.view()).collect();
        m.batch_loss_and_grads(&views, &self.labels, self.multi_label, &self.draws, true, grads)
            .unwrap()
    }
}

#[derive(Debug, Default)]
pub struct CheckReport {
    pub arrays: usize,
    pub coords: usize,
    /// Arrays smaller than the per-array sample, checked exhaustively.
    pub small: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl CheckReport {
    pub fn merge(&mut self, other: CheckReport) {
        self.arrays += other.arrays;
        self.coords += other.coords;
        self.small += other.small;
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = other.worst;
        }
    }
}

/// Central differences on `per_array` random coordinates of every array in
/// the store chosen by `select`, compared with `analytic`.
pub fn check_store<M>(
    model: &mut M,
    select: fn(&mut M) -> &mut ParamStore<f64>,
    analytic: &ParamStore<f64>,
    loss: &dyn Fn(&M) -> f64,
    per_array: usize,
    seed_value: u64,
) -> CheckReport {
    let mut rng = seed::stream(seed_value, "coords", 0);
    let mut report = CheckReport::default();
    let names: Vec<(String, usize)> = select(model).iter().map(|p| (p.name.clone(), p.len())).collect();
    for (a, (name, len)) in names.iter().enumerate() {
        let coords: Vec<usize> = if *len <= per_array {
            (0..*len).collect()
        } else {
            rand::seq::index::sample(&mut rng, *len, per_array).into_vec()
        };
        report.arrays += 1;
        report.small += usize::from(*len < per_array);
        for c in coords {
            let orig = select(model).iter().nth(a).unwrap().data[c];
            set(select(model), a, c, orig + EPS);
            let up = loss(model);
            set(select(model), a, c, orig - EPS);
            let down = loss(model);
            set(select(model), a, c, orig);
            let numeric = (up - down) / (2.0 * EPS);
            let exact = analytic.iter().nth(a).unwrap().data[c];
            let rel = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(ABS_FLOOR);
            report.coords += 1;
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = format!("{name}[{c}] analytic {exact:.6e} numeric {numeric:.6e}");
            }
        }
    }
    report
}

fn set(store: &mut ParamStore<f64>, array: usize, coord: usize, v: f64) {
    store.iter_mut().nth(array).unwrap().data[coord] = v;
}

/// Gradient check of the pretraining loss (encoder and predictor) and of
/// the classification losses (encoder under masking, head).
pub fn full_gradient_check(per_array: usize) -> Vec<(&'static str, CheckReport)> {
    let mut out = Vec::new();

    let mut m = toy_jepa();
    let x = toy_patches(1);
    let plan = toy_plan();
    let mut g = JepaGrads::zeros(&m);
    sample_loss_and_grads(&m, x.view(), &plan, TargetNorm::LayerNorm, 1.0, &mut g).unwrap();
    let loss = |m: &Jepa<f64>| jepa_loss_only(m, &x, &plan);
    out.push(("encoder", check_store(&mut m, |m| &mut m.context.params, &g.encoder, &loss, per_array, 1)));
    out.push(("predictor", check_store(&mut m, |m| &mut m.predictor.params, &g.predictor, &loss, per_array, 2)));

    for (label, multi) in [("classifier (softmax)", false), ("classifier (sigmoid)", true)] {
        let mut c = toy_classifier(3);
        let case = ClassifierCase::new(multi);
        let mut g = c.zero_grads();
        case.loss(&c, &mut g);
        let loss = |m: &Classifier<f64>| case.loss(m, &mut m.zero_grads());
        let mut r = check_store(&mut c, |m| &mut m.encoder.params, &g.encoder, &loss, per_array, 3);
        r.merge(check_store(&mut c, |m| &mut m.head.params, &g.head, &loss, per_array, 4));
        out.push((label, r));
    }
    out
}

/// 8x8 patch grid from 64 frames x 64 Mel bands, small model.
pub fn small_settings(total_steps: u64) -> ajepa::pretrain::PretrainSettings {
    use ajepa::pretrain::{OptimizerConfig, PretrainSettings};
    use ajepa::spectro::FrontendConfig;
    let frontend = FrontendConfig {
        n_mels: 64,
        target_frames: 64,
        patch: (8, 8),
        ..FrontendConfig::default()
    };
    let optim = OptimizerConfig {
        lr: 1e-3,
        warmup_steps: total_steps / 10,
        total_steps,
        batch_size: 8,
        ..OptimizerConfig::default()
    };
    PretrainSettings {
        model: ModelConfig {
            embed_dim: 32,
            enc_depth: 2,
            n_heads: 2,
            pred_depth: 2,
            pred_dim: 16,
            mlp_ratio: 2.0,
            patch_len: 64,
        },
        curriculum: ajepa::maskgen::CurriculumSchedule::new(total_steps),
        frontend,
        optim,
        ..PretrainSettings::default()
    }
}

/// A small synthetic labeled set written to `dir` and loaded with the
/// frontend of `settings`.
pub fn small_dataset(dir: &std::path::Path, clips_per_class: usize, seed_value: u64, settings: &ajepa::pretrain::PretrainSettings) -> ajepa::dataset::Dataset {
    use ajepa::cli::{gen_synthetic, SyntheticSpec};
    let mut spec = SyntheticSpec::new(4, clips_per_class, seed_value);
    spec.duration_s = 1.0;
    gen_synthetic(&spec, dir).unwrap();
    let fe = ajepa::spectro::MelFrontend::new(&settings.frontend).unwrap();
    ajepa::dataset::Dataset::load_labeled(dir, &fe).unwrap()
}
