use basisconv::basis::{make_baseline_basis, BaselineKind, Basis};
use basisconv::group::{act_on_group_feature_map, rotate_exact90, RotationIndex, RotationMethod};
use basisconv::nn::{gconv_input, gconv_intermediate, Model, ModelSpec, GROUP_WIDTHS, TRANSLATIONAL_WIDTHS};
use basisconv::Error;
use basisconv_tensor::gradcheck::check_gradients;
use basisconv_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn filter(basis: &Tensor<f64>, coeffs: &[f64], r: usize, u: usize, v: usize) -> f64 {
    coeffs.iter().enumerate().map(|(i, c)| c * basis.at(&[r, i, u, v])).sum()
}

fn pixel(f: &Tensor<f64>, idx: &[usize], y: isize, x: isize) -> f64 {
    let s = f.shape();
    let (h, w) = (s[s.len() - 2] as isize, s[s.len() - 1] as isize);
    if y < 0 || x < 0 || y >= h || x >= w {
        return 0.0;
    }
    let mut full = idx.to_vec();
    full.extend([y as usize, x as usize]);
    f.at(&full)
}

#[test]
fn gconv_input_matches_loops() {
    let (b, ci, co, g, n, k, hw) = (2, 2, 3, 8, 5, 3, 6);
    let basis = random(&[g, n, k, k], 1);
    let coeffs = random(&[co, ci, n], 2);
    let f = random(&[b, ci, hw, hw], 3);
    let mut tape = Tape::new();
    let (fv, cv, bv) = (tape.constant(f.clone()), tape.constant(coeffs.clone()), tape.constant(basis.clone()));
    let y = gconv_input(&mut tape, fv, cv, bv).unwrap();
    let y = tape.value(y);
    assert_eq!(y.shape(), [b, co, g, hw, hw]);
    for bi in 0..b {
        for o in 0..co {
            for r in 0..g {
                for py in 0..hw {
                    for px in 0..hw {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            let cf: Vec<f64> = (0..n).map(|i| coeffs.at(&[o, c, i])).collect();
                            for u in 0..k {
                                for v in 0..k {
                                    let sy = (py + u) as isize - 1;
                                    let sx = (px + v) as isize - 1;
                                    acc += pixel(&f, &[bi, c], sy, sx) * filter(&basis, &cf, r, u, v);
                                }
                            }
                        }
                        assert!((y.at(&[bi, o, r, py, px]) - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn gconv_intermediate_matches_loops() {
    let (b, ci, co, g, n, k, hw) = (1, 2, 2, 4, 3, 3, 5);
    let basis = random(&[g, n, k, k], 4);
    let coeffs = random(&[co, ci, g, n], 5);
    let f = random(&[b, ci, g, hw, hw], 6);
    let mut tape = Tape::new();
    let (fv, cv, bv) = (tape.constant(f.clone()), tape.constant(coeffs.clone()), tape.constant(basis.clone()));
    let y = gconv_intermediate(&mut tape, fv, cv, bv).unwrap();
    let y = tape.value(y);
    assert_eq!(y.shape(), [b, co, g, hw, hw]);
    for o in 0..co {
        for r in 0..g {
            for py in 0..hw {
                for px in 0..hw {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for s in 0..g {
                            let t = (s + g - r) % g;
                            let cf: Vec<f64> = (0..n).map(|i| coeffs.at(&[o, c, t, i])).collect();
                            for u in 0..k {
                                for v in 0..k {
                                    let sy = (py + u) as isize - 1;
                                    let sx = (px + v) as isize - 1;
                                    acc += pixel(&f, &[0, c, s], sy, sx) * filter(&basis, &cf, r, u, v);
                                }
                            }
                        }
                    }
                    assert!((y.at(&[0, o, r, py, px]) - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn gconv_gradients_match_finite_differences() {
    let basis = random(&[4, 3, 3, 3], 7);
    let inputs = [random(&[1, 2, 4, 4], 8), random(&[2, 2, 3], 9), random(&[2, 2, 4, 3], 10)];
    let report = check_gradients(&inputs, 1e-5, |tape, v| {
        let b = tape.constant(basis.clone());
        let h = gconv_input(tape, v[0], v[1], b).unwrap();
        let h = gconv_intermediate(tape, h, v[2], b).unwrap();
        let h = tape.mul(h, h)?;
        tape.sum(h)
    })
    .unwrap();
    assert!(report.max_relative_error() < 1e-5, "{}", report.max_relative_error());
}

#[test]
fn intermediate_rejects_wrong_orientation_extent() {
    let mut tape = Tape::new();
    let f = tape.constant(Tensor::<f64>::zeros([1, 2, 3, 4, 4]));
    let c = tape.constant(Tensor::zeros([1, 2, 4, 3]));
    let b = tape.constant(Tensor::zeros([4, 3, 3, 3]));
    assert!(matches!(
        gconv_intermediate(&mut tape, f, c, b),
        Err(Error::OrientationExtent { expected: 4, got: 3, .. })
    ));
}

fn quarter_basis() -> Basis {
    let e0 = random(&[9, 3, 3], 11);
    make_baseline_basis(BaselineKind::Interpolated(RotationMethod::Gaussian), 8, 9, 3, Some(&e0), 0).unwrap()
}

#[test]
fn group_model_is_equivariant_to_quarter_turns() {
    let basis = quarter_basis();
    let mut model: Model<f64> = Model::new(ModelSpec::group(3, [3, 4], 10, 8), Some(&basis), 12).unwrap();
    let x = random(&[2, 3, 16, 16], 13);
    let (logits, acts) = model.infer(&x).unwrap();
    for q in 1..4 {
        let xr = rotate_exact90(&x, q).unwrap();
        let (logits_r, acts_r) = model.infer(&xr).unwrap();
        assert!(logits.max_abs_diff(&logits_r).unwrap() < 1e-10);
        let s = RotationIndex::new(2 * q, 8);
        for ((name, a), (_, ar)) in acts.iter().zip(&acts_r) {
            let expected = act_on_group_feature_map(a, s, RotationMethod::Exact90).unwrap();
            let err = expected.max_abs_diff(ar).unwrap();
            assert!(err < 1e-10, "{name} q={q} err={err}");
        }
    }
}

#[test]
fn translational_model_is_invariant_only_up_to_global_pooling() {
    let mut model: Model<f64> = Model::new(ModelSpec::translational(1, [4, 6], 10), None, 14).unwrap();
    let x = random(&[1, 1, 8, 8], 15);
    let (_, acts) = model.infer(&x).unwrap();
    assert_eq!(acts.len(), 9);
    assert_eq!(acts[0].1.shape(), [1, 4, 8, 8]);
    assert_eq!(acts[8].1.shape(), [1, 6, 2, 2]);
}

#[test]
fn paper_width_parameter_counts_are_comparable() {
    let basis = Basis::new(Tensor::zeros([8, 9, 3, 3]), basisconv::basis::BasisKind::Full).unwrap();
    let t: Model<f32> = Model::new(ModelSpec::translational(3, TRANSLATIONAL_WIDTHS, 10), None, 0).unwrap();
    let g: Model<f32> = Model::new(ModelSpec::group(3, GROUP_WIDTHS, 10, 8), Some(&basis), 0).unwrap();
    let (pt, pg) = (t.num_parameters() as f64, g.num_parameters() as f64);
    assert!((pt - pg).abs() / pt < 0.15, "{pt} vs {pg}");
}

#[test]
fn group_model_requires_matching_basis() {
    let spec = ModelSpec::group(1, [2, 2], 10, 8);
    assert!(Model::<f32>::new(spec.clone(), None, 0).is_err());
    let b4 = Basis::new(Tensor::zeros([4, 9, 3, 3]), basisconv::basis::BasisKind::Full).unwrap();
    assert!(Model::<f32>::new(spec, Some(&b4), 0).is_err());
}

#[test]
fn checkpoint_round_trip_and_rejections() {
    let basis = quarter_basis();
    let spec = ModelSpec::group(1, [2, 3], 10, 8);
    let mut a: Model<f32> = Model::new(spec.clone(), Some(&basis), 1).unwrap();
    a.input_norm = Some((vec![0.5], vec![0.25]));
    a.bn[0].mean[1] = 0.75;
    let bytes = a.to_bytes();

    let mut b: Model<f32> = Model::new(spec.clone(), Some(&basis), 2).unwrap();
    b.load_bytes(&bytes).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.bn, b.bn);
    assert_eq!(a.input_norm, b.input_norm);

    let mut corrupt = bytes.clone();
    corrupt[20] ^= 1;
    assert!(matches!(b.load_bytes(&corrupt), Err(Error::ChecksumMismatch { .. })));
    assert!(matches!(b.load_bytes(&bytes[..10]), Err(Error::Truncated { .. })));

    let other = make_baseline_basis(BaselineKind::Random, 8, 9, 3, None, 3).unwrap();
    let mut c: Model<f32> = Model::new(spec, Some(&other), 1).unwrap();
    assert!(matches!(c.load_bytes(&bytes), Err(Error::FingerprintMismatch { .. })));

    let mut d: Model<f32> = Model::new(ModelSpec::group(1, [2, 4], 10, 8), Some(&basis), 1).unwrap();
    assert!(matches!(d.load_bytes(&bytes), Err(Error::Format { .. })));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    a.save(&path).unwrap();
    b.load(&path).unwrap();
    assert_eq!(a.params, b.params);
    assert!(matches!(b.load(dir.path().join("missing")), Err(Error::MissingFile(_))));
}

#[test]
fn whole_model_gradients_match_finite_differences() {
    use basisconv_tensor::BatchNormMode;
    use std::cell::RefCell;
    let basis = make_baseline_basis(BaselineKind::Random, 4, 3, 3, None, 16).unwrap();
    let spec = ModelSpec::group(1, [2, 2], 3, 4);
    let model: Model<f64> = Model::new(spec, Some(&basis), 17).unwrap();
    let x = random(&[3, 1, 4, 4], 18);
    let inputs = model.params.clone();
    let model = RefCell::new(model);
    let report = check_gradients(&inputs, 1e-5, |tape, v| {
        let out = model.borrow_mut().forward(tape, &x, v, BatchNormMode::Train).unwrap();
        tape.softmax_cross_entropy(out.logits, &[0, 1, 2])
    })
    .unwrap();
    assert!(report.max_relative_error() < 1e-4, "{:?}", report.relative_errors);
}
