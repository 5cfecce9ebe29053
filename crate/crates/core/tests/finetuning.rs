mod common;

use ajepa::finetune::{
    average_precision, finetune_loop, metric_map, pooled_forward, rm_forward, FinetuneConfig, RMConfig, RmDraw,
    METRICS_CSV, METRICS_HEADER,
};
use ajepa::model::Encoder;
use ajepa::seed;
use common::{small_dataset, small_settings, toy_classifier, toy_patches};
use ndarray::Array2;

#[test]
fn inactive_or_empty_masking_is_the_dense_forward() {
    let c = toy_classifier(3);
    let x = toy_patches(7);
    let (dense, _) = pooled_forward(&c.encoder, x.view(), &RmDraw::None).unwrap();
    let mut rng = seed::stream(0, "rm", 0);
    let (a, _) = rm_forward(&c.encoder, x.view(), &RMConfig { active: false, ..RMConfig::default() }, &mut rng).unwrap();
    let (b, _) = rm_forward(&c.encoder, x.view(), &RMConfig { active: false, ..RMConfig::default() }, &mut rng).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, dense);
    let zero = RMConfig {
        ratio: 0.0,
        ..RMConfig::default()
    };
    let (z, _) = rm_forward(&c.encoder, x.view(), &zero, &mut rng).unwrap();
    assert!((&z - &dense).iter().all(|d| d.abs() < 1e-6));
}

#[test]
fn masked_keys_get_no_weight_in_any_layer() {
    let c = toy_classifier(3);
    let x = toy_patches(8);
    let rm = RMConfig {
        ratio: 0.25,
        ..RMConfig::default()
    };
    for per_layer in [false, true] {
        let rm = RMConfig { per_layer, ..rm };
        let mut rng = seed::stream(1, "rm", per_layer as u64);
        let draw = RmDraw::draw(c.encoder.grid(), 2, &rm, &mut rng).unwrap();
        let (pooled, cache) = pooled_forward(&c.encoder, x.view(), &draw).unwrap();
        assert_eq!(pooled.len(), 8);
        for (l, block) in cache.encoder().blocks.iter().enumerate() {
            let flags = match &draw {
                RmDraw::Shared(f) => f.clone(),
                RmDraw::PerLayer(v) => v[l].clone(),
                RmDraw::None => unreachable!(),
            };
            assert_eq!(flags.iter().filter(|&&f| f).count(), 4);
            for probs in &block.attn.probs {
                assert_eq!(probs.nrows(), 16);
                for row in probs.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-6);
                    for (j, &p) in row.iter().enumerate() {
                        if flags[j] {
                            assert_eq!(p, 0.0);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn probe_keeps_encoder_bytes_and_training_reduces_loss() {
    let dir = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let settings = small_settings(10);
    let data = small_dataset(dir.path(), 6, 11, &settings);
    let (train, eval) = data.split(0.25, 3);
    assert_eq!(train.len() + eval.len(), data.len());
    let encoder = Encoder::<f32>::new(&settings.model, ajepa::maskgen::GridShape::new(8, 8), &mut seed::stream(1, "init", 0)).unwrap();

    // Frozen encoder with masking active takes the uncached path.
    let frozen = FinetuneConfig {
        freeze_encoder: true,
        epochs: 3,
        batch_size: 8,
        ..FinetuneConfig::default()
    };
    let r = finetune_loop(encoder.clone(), &train, &eval, &settings.frontend, &frozen, 2, Some(out.path())).unwrap();
    assert_eq!(r.model.encoder.params, encoder.params);
    let text = std::fs::read_to_string(out.path().join(METRICS_CSV)).unwrap();
    assert_eq!(text.lines().next().unwrap(), METRICS_HEADER);
    assert_eq!(text.lines().count(), 4);

    let full = FinetuneConfig {
        epochs: 5,
        batch_size: 8,
        lr: 1e-3,
        ..FinetuneConfig::default()
    };
    let r = finetune_loop(encoder.clone(), &train, &eval, &settings.frontend, &full, 2, None).unwrap();
    assert_ne!(r.model.encoder.params, encoder.params);
    let losses: Vec<f64> = r.records.iter().map(|e| e.train_loss).collect();
    println!("fine-tune losses {losses:?}");
    assert!(losses[4] < losses[0], "{losses:?}");
}

#[test]
fn multi_label_training_reports_map() {
    let dir = tempfile::tempdir().unwrap();
    let settings = small_settings(10);
    let mut spec = ajepa::cli::SyntheticSpec::new(4, 6, 3);
    spec.duration_s = 1.0;
    spec.multi_label = true;
    ajepa::cli::gen_synthetic(&spec, dir.path()).unwrap();
    let fe = ajepa::spectro::MelFrontend::new(&settings.frontend).unwrap();
    let data = ajepa::dataset::Dataset::load_labeled(dir.path(), &fe).unwrap();
    assert!(data.multi_label);
    assert_eq!(data.n_classes(), 4);
    let (train, eval) = data.split(0.25, 1);
    let encoder = Encoder::<f32>::new(&settings.model, ajepa::maskgen::GridShape::new(8, 8), &mut seed::stream(1, "init", 0)).unwrap();
    let cfg = FinetuneConfig {
        epochs: 2,
        batch_size: 8,
        ..FinetuneConfig::probe()
    };
    let r = finetune_loop(encoder, &train, &eval, &settings.frontend, &cfg, 1, None).unwrap();
    let last = r.records.last().unwrap();
    assert!((0.0..=1.0).contains(&last.eval_map));
}

fn brute_ap(order: &[usize], positive: &[bool]) -> Option<f64> {
    let total = positive.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            let hits_so_far = order[..=rank].iter().filter(|&&j| positive[j]).count();
            sum += hits_so_far as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

#[test]
fn map_matches_brute_force_on_three_item_permutations() {
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    for bits in 1u8..8 {
        let positive: Vec<bool> = (0..3).map(|i| bits >> i & 1 == 1).collect();
        for order in perms {
            let mut scores = [0.0; 3];
            for (rank, &i) in order.iter().enumerate() {
                scores[i] = 3.0 - rank as f64;
            }
            let expected = brute_ap(&order, &positive).unwrap();
            assert!((average_precision(&scores, &positive).unwrap() - expected).abs() < 1e-12);
            let s = Array2::from_shape_fn((3, 1), |(i, _)| scores[i] as f32);
            let t = Array2::from_shape_fn((3, 1), |(i, _)| if positive[i] { 1.0 } else { 0.0 });
            assert!((metric_map(s.view(), t.view()).unwrap() - expected).abs() < 1e-6);
        }
    }
}
