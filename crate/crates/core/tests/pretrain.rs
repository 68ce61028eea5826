use basisconv::basis::{populate_partial, Basis, BasisKind};
use basisconv::group::{interpolated_operator, RotationIndex, RotationMethod};
use basisconv::pretrain::{
    equivariance_loss, evaluate_losses, orthogonality_loss, pretrain, reconstruction_loss, total_loss, write_loss_csv,
    LossGeometry, LossWeights, PretrainConfig, RecScale,
};
use basisconv::Error;
use basisconv_tensor::gradcheck::check_gradients;
use basisconv_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn r8(i: i64) -> RotationIndex {
    RotationIndex::new(i, 8)
}

fn config() -> PretrainConfig {
    PretrainConfig::default()
}

/// Dense `HW x HW` matrix of zero-padded same-size correlation with `k`.
fn corr_matrix(n: usize, k: &[f64], ks: usize) -> Vec<f64> {
    let p = ks as isize / 2;
    let mut m = vec![0.0; n * n * n * n];
    for y in 0..n {
        for x in 0..n {
            for u in 0..ks {
                for v in 0..ks {
                    let (sy, sx) = (y as isize + u as isize - p, x as isize + v as isize - p);
                    if sy >= 0 && sx >= 0 && (sy as usize) < n && (sx as usize) < n {
                        m[(y * n + x) * n * n + sy as usize * n + sx as usize] += k[u * ks + v];
                    }
                }
            }
        }
    }
    m
}

fn matvec(m: &[f64], x: &[f64], transpose: bool) -> Vec<f64> {
    let d = x.len();
    (0..d).map(|i| (0..d).map(|j| if transpose { m[j * d + i] * x[j] } else { m[i * d + j] * x[j] }).sum()).collect()
}

fn rotation_matrix(n: usize, r: RotationIndex) -> Vec<f64> {
    match r.quarter_turns() {
        Some(q) => basisconv::group::exact90_operator(n, q as i64).to_dense(),
        None => interpolated_operator(n, r.angle(), RotationMethod::Gaussian).unwrap().to_dense(),
    }
}

fn cropped_mean_abs(v: &[f64], n: usize, c: usize) -> f64 {
    let mut s = 0.0;
    for y in c..n - c {
        for x in c..n - c {
            s += v[y * n + x].abs();
        }
    }
    s
}

/// Both losses recomputed from dense operators, image by image.
fn dense_losses(
    images: &Tensor<f64>,
    basis: &Basis,
    s: RotationIndex,
    r: RotationIndex,
    scale: RecScale,
) -> (f64, f64) {
    let (b, n) = (images.shape()[0], images.shape()[2]);
    let c = n / 4;
    let keep = n - 2 * c;
    let rel = r.relative_to(s).unwrap();
    let rot = rotation_matrix(n, s);
    let kk = basis.k() * basis.k();
    let (mut equiv, mut rec) = (0.0, 0.0);
    for img in images.data().chunks(n * n) {
        let fs = matvec(&rot, img, false);
        let mut recon = vec![0.0; n * n];
        for i in 0..basis.n() {
            let cr = corr_matrix(n, &basis.slot(r.value())[i * kk..(i + 1) * kk], basis.k());
            let crel = corr_matrix(n, &basis.slot(rel.value())[i * kk..(i + 1) * kk], basis.k());
            let lhs = matvec(&cr, &fs, false);
            let rhs = matvec(&rot, &matvec(&crel, img, false), false);
            let d: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
            equiv += cropped_mean_abs(&d, n, c);
            let back = matvec(&cr, &rhs, true);
            for (o, v) in recon.iter_mut().zip(back) {
                *o += v;
            }
        }
        let w = if scale == RecScale::Mean { 1.0 / basis.n() as f64 } else { 1.0 };
        let d: Vec<f64> = fs.iter().zip(&recon).map(|(a, b)| a - w * b).collect();
        rec += cropped_mean_abs(&d, n, c);
    }
    let norm = (b * keep * keep) as f64;
    (equiv / norm, rec / norm)
}

#[test]
fn losses_match_dense_operator_oracles() {
    let images = random(&[2, 1, 9, 9], 1);
    let basis = Basis::new(random(&[8, 3, 3, 3], 2), BasisKind::Full).unwrap();
    for (s, r) in [(1, 1), (3, 6), (2, 5), (0, 1)] {
        for scale in [RecScale::Sum, RecScale::Mean] {
            let cfg = PretrainConfig { rec_scale: scale, ..config() };
            let got = evaluate_losses(&images, &basis, r8(s), r8(r), &cfg).unwrap();
            let (equiv, rec) = dense_losses(&images, &basis, r8(s), r8(r), scale);
            assert!((got.equiv - equiv).abs() < 1e-12, "equiv {s},{r}: {} vs {equiv}", got.equiv);
            assert!((got.rec - rec).abs() < 1e-12, "rec {s},{r}: {} vs {rec}", got.rec);
        }
    }
    let off = evaluate_losses(&images, &basis, r8(1), r8(1), &config()).unwrap();
    assert!(off.equiv > 0.0);
}

#[test]
fn identity_rotation_has_zero_equivariance_loss() {
    let images = random(&[3, 1, 12, 12], 3);
    let basis = Basis::new(random(&[8, 9, 3, 3], 4), BasisKind::Full).unwrap();
    for r in 0..8 {
        assert_eq!(evaluate_losses(&images, &basis, r8(0), r8(r), &config()).unwrap().equiv, 0.0);
    }
}

#[test]
fn partial_basis_is_exact_on_the_quarter_turn_subgroup() {
    let images = random(&[2, 1, 16, 16], 5);
    let basis = populate_partial(&random(&[2, 9, 3, 3], 6), 8).unwrap();
    for s in [0, 2, 4, 6] {
        for r in [0, 2, 4, 6] {
            let v = evaluate_losses(&images, &basis, r8(s), r8(r), &config()).unwrap();
            assert!(v.equiv <= 1e-6, "{s},{r}: {}", v.equiv);
        }
    }
    let v = evaluate_losses(&images, &basis, r8(1), r8(1), &config()).unwrap();
    assert!(v.equiv > 1e-3);
}

#[test]
fn dirac_reconstruction_is_exact() {
    let images = random(&[2, 1, 12, 12], 7);
    let dirac = Basis::dirac(8, 3).unwrap();
    let v = evaluate_losses(&images, &dirac, r8(0), r8(0), &config()).unwrap();
    assert!(v.rec < 1e-15, "{}", v.rec);
    let zeros = Tensor::zeros([2, 1, 12, 12]);
    let basis = Basis::new(random(&[8, 9, 3, 3], 8), BasisKind::Full).unwrap();
    assert_eq!(evaluate_losses(&zeros, &basis, r8(3), r8(5), &config()).unwrap().rec, 0.0);
}

#[test]
fn zero_basis_assembles_from_definitions() {
    let images = random(&[2, 1, 12, 12], 9);
    let basis = Basis::new(Tensor::zeros([8, 9, 3, 3]), BasisKind::Full).unwrap();
    let s = r8(3);
    let v = evaluate_losses(&images, &basis, s, r8(1), &config()).unwrap();
    assert_eq!(v.orth, 72.0);
    assert_eq!(v.equiv, 0.0);
    let rot = rotation_matrix(12, s);
    let mut expected = 0.0;
    for img in images.data().chunks(144) {
        expected += cropped_mean_abs(&matvec(&rot, img, false), 12, 3);
    }
    expected /= (2 * 36) as f64;
    assert!((v.rec - expected).abs() < 1e-12);
    assert!((v.total - (v.equiv + v.orth + v.rec)).abs() < 1e-12);
}

#[test]
fn weights_select_terms() {
    let images = random(&[2, 1, 10, 10], 10);
    let basis = Basis::new(random(&[8, 4, 3, 3], 11), BasisKind::Full).unwrap();
    let cfg = PretrainConfig { weights: LossWeights { equiv: 1.0, orth: 0.0, rec: 0.0 }, ..config() };
    let v = evaluate_losses(&images, &basis, r8(1), r8(2), &cfg).unwrap();
    assert_eq!(v.total, v.equiv);
    assert!(v.equiv >= 0.0 && v.orth >= 0.0 && v.rec >= 0.0);
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let images = random(&[2, 1, 8, 8], 12);
    let geo = LossGeometry::new(8, 8, 0.25, RotationMethod::Gaussian).unwrap();
    let cfg = config();
    let pairs = [(r8(1), r8(3))];
    let report = check_gradients(&[random(&[8, 2, 3, 3], 13)], 1e-6, |tape, v| {
        let x = tape.constant(images.clone());
        Ok(total_loss(tape, &geo, x, v[0], &pairs, &cfg).unwrap().total)
    })
    .unwrap();
    assert!(report.max_relative_error() <= 1e-4, "{}", report.max_relative_error());
}

#[test]
fn single_terms_are_differentiable() {
    let images = random(&[1, 1, 8, 8], 14);
    let geo = LossGeometry::new(8, 8, 0.25, RotationMethod::Bilinear).unwrap();
    let report = check_gradients(&[random(&[8, 2, 3, 3], 15)], 1e-6, |tape, v| {
        let x = tape.constant(images.clone());
        let a = equivariance_loss(tape, &geo, x, v[0], r8(5), r8(2)).unwrap();
        let b = reconstruction_loss(tape, &geo, x, v[0], r8(5), r8(2), RecScale::Mean).unwrap();
        let c = orthogonality_loss(tape, v[0]).unwrap();
        let ab = tape.add(a, b)?;
        tape.add(ab, c)
    })
    .unwrap();
    assert!(report.max_relative_error() <= 1e-4, "{}", report.max_relative_error());
}

fn corpus() -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    Tensor::from_fn([12, 1, 10, 10], |_| rng.gen_range(0.0..1.0))
}

fn quick() -> PretrainConfig {
    PretrainConfig { epochs: 2, batch_size: 4, n: 4, ..config() }
}

#[test]
fn zero_learning_rate_keeps_the_initial_basis() {
    let cfg = PretrainConfig { lr: 0.0, epochs: 1, ..quick() };
    let out = pretrain::<f64>(&corpus(), &cfg).unwrap();
    assert_eq!(out.basis.to_bytes(), out.initial.to_bytes());
    assert_eq!(out.log.len(), 1);
}

#[test]
fn pretraining_is_deterministic() {
    let a = pretrain::<f32>(&corpus(), &quick()).unwrap();
    let b = pretrain::<f32>(&corpus(), &quick()).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.basis.to_bytes(), b.basis.to_bytes());
    assert_ne!(a.basis.to_bytes(), a.initial.to_bytes());
    assert_eq!(a.basis.config_fingerprint(), quick().fingerprint());
}

#[test]
fn partial_pretraining_keeps_the_quarter_turn_constraint() {
    let cfg = PretrainConfig { partial: true, ..quick() };
    let out = pretrain::<f32>(&corpus(), &cfg).unwrap();
    assert_eq!(out.basis.kind(), BasisKind::Partial);
    out.basis.check_partial().unwrap();
    let all = PretrainConfig { sum_all_pairs: true, epochs: 1, ..cfg };
    pretrain::<f64>(&corpus(), &all).unwrap().basis.check_partial().unwrap();
}

#[test]
fn non_finite_input_aborts() {
    let mut c = corpus();
    c.data_mut()[5] = f64::NAN;
    assert!(matches!(pretrain::<f64>(&c, &quick()), Err(Error::Divergence { epoch: 0, .. })));
}

#[test]
fn invalid_configs_are_rejected() {
    let c = corpus();
    let bad = PretrainConfig { k: 4, ..quick() };
    assert!(pretrain::<f64>(&c, &bad).is_err());
    let bad = PretrainConfig { partial: true, order: 6, ..quick() };
    assert!(matches!(pretrain::<f64>(&c, &bad), Err(Error::OrderNotQuarterDivisible(6))));
    let bad = PretrainConfig { crop_fraction: 0.5, ..quick() };
    assert!(pretrain::<f64>(&c, &bad).is_err());
}

#[test]
fn loss_log_csv() {
    let out = pretrain::<f32>(&corpus(), &quick()).unwrap();
    let mut buf = Vec::new();
    write_loss_csv(&out.log, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("epoch,L_equiv,L_orth,L_rec,L_total\n"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn orthogonality_loss_sums_orientations() {
    let basis = random(&[8, 3, 3, 3], 17);
    let mut tape = Tape::new();
    let b = tape.constant(basis.clone());
    let l = orthogonality_loss(&mut tape, b).unwrap();
    let expected: f64 =
        (0..8).map(|r| basisconv::basis::orthogonality_defect(&basis.data()[r * 27..(r + 1) * 27], 3)).sum();
    assert!((tape.value(l).item().unwrap() - expected).abs() < 1e-12);
}
