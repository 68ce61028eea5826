use basisconv::basis::{make_baseline_basis, BaselineKind, Basis};
use basisconv::data::LabeledImageSet;
use basisconv::group::{rotate_exact90, RotationMethod};
use basisconv::nn::{Model, ModelSpec};
use basisconv::train::{
    augment, evaluate, evaluate_images, train, translate, Augmentation, RotationAugment, TrainConfig, TrainLog,
};
use basisconv::Error;
use basisconv_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Ten 8×8 images, one per class, each a bright bar at a class-specific place.
fn toy_set(per_class: usize) -> LabeledImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..per_class {
        for c in 0..10 {
            let mut img = vec![0.0f32; 64];
            let (row, col) = (c % 5 + 1, c / 5 * 3 + 1);
            for v in 0..3 {
                img[row * 8 + col + v] = 1.0;
            }
            for p in &mut img {
                *p = (*p + rng.gen_range(0.0..0.1f32)).min(1.0);
            }
            data.extend(img);
            labels.push(c);
        }
    }
    LabeledImageSet {
        images: Tensor::new([10 * per_class, 1, 8, 8], data).unwrap(),
        labels,
        classes: 10,
        split: "toy".into(),
    }
}

fn small_basis() -> Basis {
    make_baseline_basis(BaselineKind::Random, 8, 9, 3, None, 5).unwrap()
}

#[test]
fn no_augmentation_is_identity() {
    let x = Tensor::from_fn([3, 2, 6, 6], |i| i as f32 * 0.01);
    assert_eq!(augment(&x, &Augmentation::none(), 9).unwrap(), x);
}

#[test]
fn translation_moves_impulse_and_fills_zeros() {
    let mut img = vec![0.0f32; 100];
    img[2 * 10 + 3] = 1.0;
    let out = translate(&img, 1, 10, 10, 4, 0);
    assert_eq!(out[6 * 10 + 3], 1.0);
    assert_eq!(out.iter().sum::<f32>(), 1.0);
    let gone = translate(&img, 1, 10, 10, -4, 0);
    assert_eq!(gone.iter().sum::<f32>(), 0.0);
}

#[test]
fn quarter_rotation_augmentation_only_permutes() {
    let x = Tensor::from_fn([16, 1, 6, 6], |i| (i % 37) as f32);
    let aug = Augmentation { rotation: RotationAugment::Quarter, ..Augmentation::none() };
    let out = augment(&x, &aug, 4).unwrap();
    for i in 0..16 {
        let slice = |t: &Tensor<f32>| Tensor::new([1, 6, 6], t.data()[i * 36..(i + 1) * 36].to_vec()).unwrap();
        let (src, got) = (slice(&x), slice(&out));
        assert!((0..4).any(|q| rotate_exact90(&src, q).unwrap() == got), "image {i}");
    }
}

#[test]
fn augmentation_is_seeded() {
    let x = Tensor::from_fn([4, 1, 8, 8], |i| (i % 11) as f32);
    let aug =
        Augmentation { rotation: RotationAugment::Full, method: RotationMethod::Bilinear, ..Augmentation::default() };
    assert_eq!(augment(&x, &aug, 1).unwrap(), augment(&x, &aug, 1).unwrap());
    assert_ne!(augment(&x, &aug, 1).unwrap(), augment(&x, &aug, 2).unwrap());
}

#[test]
fn rotation_augment_names_round_trip() {
    for r in [RotationAugment::None, RotationAugment::Quarter, RotationAugment::Eighth, RotationAugment::Full] {
        assert_eq!(r.name().parse::<RotationAugment>().unwrap(), r);
    }
    assert!("30".parse::<RotationAugment>().is_err());
}

fn quick_config(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig { epochs, lr, batch_size: 10, augmentation: Augmentation::none(), seed: 7, ..TrainConfig::default() }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let basis = small_basis();
    let mut model: Model<f32> = Model::new(ModelSpec::group(1, [2, 3], 10, 8), Some(&basis), 0).unwrap();
    let before = model.params.clone();
    train(&mut model, &toy_set(1), None, &quick_config(2, 0.0), Some(&basis)).unwrap();
    assert_eq!(model.params, before);
}

#[test]
fn overfits_ten_images() {
    let set = toy_set(1);
    let mut model: Model<f32> = Model::new(ModelSpec::translational(1, [6, 8], 10), None, 1).unwrap();
    let log = train(&mut model, &set, None, &quick_config(200, 1e-2), None).unwrap();
    assert_eq!(log.rows.len(), 200);
    assert_eq!(evaluate(&mut model, &set).unwrap().accuracy, 1.0);
}

#[test]
fn basis_is_frozen_and_training_is_deterministic() {
    let basis = small_basis();
    let bytes = basis.to_bytes();
    let set = toy_set(2);
    let run = || {
        let mut model: Model<f32> = Model::new(ModelSpec::group(1, [2, 3], 10, 8), Some(&basis), 0).unwrap();
        let log = train(&mut model, &set, Some(&set), &quick_config(2, 1e-3), Some(&basis)).unwrap();
        (log, model.params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert_eq!(basis.to_bytes(), bytes);
}

#[test]
fn fingerprint_mismatch_is_rejected() {
    let basis = small_basis();
    let other = make_baseline_basis(BaselineKind::Random, 8, 9, 3, None, 6).unwrap();
    let mut model: Model<f32> = Model::new(ModelSpec::group(1, [2, 3], 10, 8), Some(&basis), 0).unwrap();
    let r = train(&mut model, &toy_set(1), None, &quick_config(1, 1e-3), Some(&other));
    assert!(matches!(r, Err(Error::FingerprintMismatch { .. })));
}

#[test]
fn normalization_statistics_are_stored_with_the_model() {
    let set = toy_set(1);
    let mut model: Model<f32> = Model::new(ModelSpec::translational(1, [2, 2], 10), None, 0).unwrap();
    let mut cfg = quick_config(1, 1e-3);
    cfg.augmentation.normalize = true;
    train(&mut model, &set, None, &cfg, None).unwrap();
    assert_eq!(model.input_norm, Some(set.channel_stats()));
}

#[test]
fn constant_predictor_scores_ten_percent() {
    let set = toy_set(3);
    let mut model: Model<f32> = Model::new(ModelSpec::translational(1, [2, 2], 10), None, 0).unwrap();
    let n = model.params.len();
    model.params[n - 2] = Tensor::zeros(model.params[n - 2].shape().to_vec());
    let mut bias = vec![0.0f32; 10];
    bias[4] = 1.0;
    model.params[n - 1] = Tensor::new([10], bias).unwrap();
    let e = evaluate(&mut model, &set).unwrap();
    assert!((e.accuracy - 0.1).abs() < 1e-12);
    assert_eq!(e, evaluate(&mut model, &set).unwrap());
    for (row, count) in e.confusion.iter().zip(set.class_counts()) {
        assert_eq!(row.iter().sum::<usize>(), count);
        assert_eq!(row[4], count);
    }
}

#[test]
fn empty_set_is_an_error() {
    let mut model: Model<f32> = Model::new(ModelSpec::translational(1, [2, 2], 10), None, 0).unwrap();
    let x = Tensor::zeros([1, 1, 8, 8]);
    assert!(matches!(evaluate_images(&mut model, &x, &[], 10), Err(Error::EmptySet)));
}

#[test]
fn log_csv_has_fixed_columns() {
    let set = toy_set(1);
    let mut model: Model<f32> = Model::new(ModelSpec::translational(1, [2, 2], 10), None, 0).unwrap();
    let log: TrainLog = train(&mut model, &set, Some(&set), &quick_config(3, 1e-3), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    log.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,train_acc,val_acc");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("1,"));
}
