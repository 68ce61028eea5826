//! Property suites run by `basisconv verify` and the acceptance target.

use std::sync::Arc;

use basisconv_tensor::gradcheck::check_gradients;
use basisconv_tensor::{BatchNormMode, BatchNormStats, Padding, SparseOperator, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::basis::{populate_partial, Basis};
use crate::equivariance::robustness_suite;
use crate::error::Result;
use crate::group::torus::{act_on_group, group_correlate, lift, P4};
use crate::group::{
    mat3_mul, rotate_exact90, unitarity_defect, GroupElement, Mat3, RotationIndex, RotationMethod, RotationOperator,
};
use crate::nn::{gconv_input, gconv_intermediate, global_group_maxpool, Model, ModelSpec};
use crate::pretrain::{
    equivariance_loss, evaluate_losses, orthogonality_loss, reconstruction_loss, LossGeometry, PretrainConfig, RecScale,
};

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-5;

/// One measured property and its verdict.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    /// Passes when `value <= threshold`, or `value > threshold` if set.
    pub above: bool,
}

impl Check {
    fn at_most(suite: &'static str, name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self { suite, name: name.into(), value, threshold, above: false }
    }

    fn above(suite: &'static str, name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self { suite, name: name.into(), value, threshold, above: true }
    }

    pub fn passed(&self) -> bool {
        if self.above {
            self.value > self.threshold
        } else {
            self.value <= self.threshold
        }
    }
}

pub fn format_table(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(4).max(4);
    let mut out = format!("{:<12} {:<width$} {:>12} {:>12}  result\n", "suite", "check", "value", "bound");
    for c in checks {
        let bound = format!("{}{:.0e}", if c.above { ">" } else { "<=" }, c.threshold);
        let verdict = if c.passed() { "PASS" } else { "FAIL" };
        out.push_str(&format!("{:<12} {:<width$} {:>12.3e} {:>12}  {verdict}\n", c.suite, c.name, c.value, bound));
    }
    out
}

fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 + 1.0) * 0.37 / n as f64).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).expect("shape matches")
}

fn weigh(tape: &mut Tape<f64>, y: Var, seed: u64) -> basisconv_tensor::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(away_from_zero(tape.shape(y), &mut rng));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

struct GradCase {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: Box<dyn Fn(&mut Tape<f64>, &[Var]) -> basisconv_tensor::Result<Var>>,
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> basisconv_tensor::Result<Var> + 'static,
) -> GradCase {
    GradCase { name, inputs, f: Box::new(f) }
}

fn lift_err<T>(r: Result<T>) -> basisconv_tensor::Result<T> {
    r.map_err(|e| match e {
        crate::Error::Tensor(t) => t,
        other => basisconv_tensor::TensorError::Invalid(other.to_string()),
    })
}

fn grad_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let (p, q, w) = (r.gen_range(2..=4), r.gen_range(2..=5), r.gen_range(1..=3));
    let a = away_from_zero(&[p, q], r);
    let b = away_from_zero(&[p, q], r);
    let m = away_from_zero(&[q, w], r);
    let sparse_rows: Vec<Vec<(usize, f64)>> =
        (0..9).map(|i| (0..3).map(|j| ((i * 5 + j * 7) % 9, r.gen_range(-1.0..1.0))).collect()).collect();
    let op = Arc::new(SparseOperator::from_rows((3, 3), (3, 3), sparse_rows));
    let remap_src = Arc::new(vec![0, 0, p * q - 1, 1, p * q / 2, 1]);
    let g = 4;
    let mut cases = vec![
        case("add", vec![a.clone(), b.clone()], |t, v| {
            let y = t.add(v[0], v[1])?;
            weigh(t, y, 1)
        }),
        case("sub", vec![a.clone(), b.clone()], |t, v| {
            let y = t.sub(v[0], v[1])?;
            weigh(t, y, 2)
        }),
        case("mul", vec![a.clone(), b.clone()], |t, v| {
            let y = t.mul(v[0], v[1])?;
            weigh(t, y, 3)
        }),
        case("scale", vec![a.clone()], |t, v| {
            let y = t.scale(v[0], -1.7)?;
            weigh(t, y, 4)
        }),
        case("relu", vec![a.clone()], |t, v| {
            let y = t.relu(v[0])?;
            weigh(t, y, 5)
        }),
        case("l1_norm", vec![a.clone()], |t, v| t.l1_norm(v[0])),
        case("sum", vec![a.clone()], |t, v| t.sum(v[0])),
        case("matmul", vec![a.clone(), m], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weigh(t, y, 6)
        }),
        case("permute", vec![a.clone()], |t, v| {
            let y = t.permute(v[0], &[1, 0])?;
            weigh(t, y, 7)
        }),
        case("remap", vec![a.clone()], move |t, v| {
            let y = t.remap(v[0], [2, 3], remap_src.clone())?;
            weigh(t, y, 8)
        }),
        case("narrow+reshape", vec![a], move |t, v| {
            let y = t.narrow(v[0], 1, 1, q - 1)?;
            let y = t.reshape(y, [p * (q - 1)])?;
            weigh(t, y, 9)
        }),
        case("sparse_apply", vec![away_from_zero(&[2, 3, 3], r)], move |t, v| {
            let y = t.sparse_apply(v[0], op.clone())?;
            weigh(t, y, 10)
        }),
    ];
    for (name, padding, stride) in [
        ("correlate2d same/1", Padding::Same, 1),
        ("correlate2d same/2", Padding::Same, 2),
        ("correlate2d valid/1", Padding::Valid, 1),
        ("correlate2d valid/2", Padding::Valid, 2),
    ] {
        let (bn, ci, co) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
        let (h, w) = (r.gen_range(4..=7), r.gen_range(4..=7));
        let inputs = vec![away_from_zero(&[bn, ci, h, w], r), away_from_zero(&[co, ci, 3, 3], r)];
        cases.push(case(name, inputs, move |t, v| {
            let y = t.correlate2d(v[0], v[1], padding, stride)?;
            weigh(t, y, 11)
        }));
    }
    let (bn, ci, co, h, w) =
        (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(3..=6), r.gen_range(3..=6));
    cases.push(case(
        "transpose_correlate2d",
        vec![away_from_zero(&[bn, co, h, w], r), away_from_zero(&[co, ci, 3, 3], r)],
        |t, v| {
            let y = t.transpose_correlate2d(v[0], v[1])?;
            weigh(t, y, 12)
        },
    ));
    let pool = distinct(&[r.gen_range(1..=2), r.gen_range(1..=3), 2 * r.gen_range(1..=3), 2 * r.gen_range(1..=3)], r);
    cases.push(case("maxpool2x2", vec![pool.clone()], |t, v| {
        let y = t.maxpool2x2(v[0])?;
        weigh(t, y, 13)
    }));
    cases.push(case("max_trailing", vec![pool], |t, v| {
        let y = t.max_trailing(v[0], 2)?;
        weigh(t, y, 14)
    }));
    for (name, mode) in [("batchnorm train", BatchNormMode::Train), ("batchnorm eval", BatchNormMode::Eval)] {
        let bn = r.gen_range(2..=4);
        let inputs = vec![away_from_zero(&[bn, 2, 2, 3, 3], r), away_from_zero(&[2], r), away_from_zero(&[2], r)];
        cases.push(case(name, inputs, move |t, v| {
            let mut stats = BatchNormStats::new(2);
            stats.mean = vec![0.3, -0.2];
            stats.var = vec![0.5, 2.0];
            let y = t.batchnorm(v[0], v[1], v[2], 1, &mut stats, mode)?;
            weigh(t, y, 15)
        }));
    }
    cases.push(case("softmax_cross_entropy", vec![away_from_zero(&[4, 5], r)], |t, v| {
        t.softmax_cross_entropy(v[0], &[0, 4, 2, 2])
    }));
    cases.push(case("add_bias", vec![away_from_zero(&[3, 4], r), away_from_zero(&[4], r)], |t, v| {
        let y = t.add_bias(v[0], v[1], 1)?;
        weigh(t, y, 16)
    }));
    cases.push(case(
        "gconv_input",
        vec![away_from_zero(&[2, 2, h + 1, h + 1], r), away_from_zero(&[3, 2, 4], r), away_from_zero(&[g, 4, 3, 3], r)],
        |t, v| {
            let y = lift_err(gconv_input(t, v[0], v[1], v[2]))?;
            weigh(t, y, 17)
        },
    ));
    cases.push(case(
        "gconv_intermediate",
        vec![away_from_zero(&[1, 2, g, 4, 4], r), away_from_zero(&[2, 2, g, 3], r), away_from_zero(&[g, 3, 3, 3], r)],
        |t, v| {
            let y = lift_err(gconv_intermediate(t, v[0], v[1], v[2]))?;
            weigh(t, y, 18)
        },
    ));
    cases.push(case("global_group_maxpool", vec![distinct(&[2, 2, g, 3, 3], r)], |t, v| {
        let y = lift_err(global_group_maxpool(t, v[0]))?;
        weigh(t, y, 19)
    }));
    let geo = Arc::new(LossGeometry::new(8, 8, 0.25, RotationMethod::Gaussian).expect("valid geometry"));
    let (s, rr) = (RotationIndex::new(3, 8), RotationIndex::new(6, 8));
    let images = away_from_zero(&[2, 1, 8, 8], r);
    let basis = away_from_zero(&[8, 2, 3, 3], r);
    let geo1 = Arc::clone(&geo);
    cases.push(case("equivariance_loss", vec![images.clone(), basis.clone()], move |t, v| {
        lift_err(equivariance_loss(t, &geo1, v[0], v[1], s, rr))
    }));
    for (name, scale) in [("reconstruction_loss sum", RecScale::Sum), ("reconstruction_loss mean", RecScale::Mean)] {
        let geo = Arc::clone(&geo);
        cases.push(case(name, vec![images.clone(), basis.clone()], move |t, v| {
            lift_err(reconstruction_loss(t, &geo, v[0], v[1], s, rr, scale))
        }));
    }
    cases.push(case("orthogonality_loss", vec![basis], |t, v| lift_err(orthogonality_loss(t, v[0]))));
    cases
}

/// Central finite differences against the tape for every differentiable
/// operation and every composite layer and loss.
pub fn gradient_checks(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for c in grad_cases(seed) {
        let report = check_gradients(&c.inputs, GRAD_STEP, &c.f)?;
        out.push(Check::at_most("gradients", c.name, report.max_relative_error(), GRAD_TOL));
    }
    Ok(out)
}

fn mat_diff(a: &Mat3, b: &Mat3) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Closure, identity and inverse of the homogeneous matrices over all
/// `|G|²` rotation pairs with random integer translations.
pub fn group_law_check(order: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ident = GroupElement::identity(order).homogeneous();
    let mut worst = 0.0f64;
    for a in 0..order as i64 {
        for b in 0..order as i64 {
            let z1 = [rng.gen_range(-20..=20) as f64, rng.gen_range(-20..=20) as f64];
            let z2 = [rng.gen_range(-20..=20) as f64, rng.gen_range(-20..=20) as f64];
            let g = GroupElement::new(RotationIndex::new(a, order), z1);
            let h = GroupElement::new(RotationIndex::new(b, order), z2);
            let gh = g.compose(&h).expect("same order");
            worst = worst
                .max(mat_diff(&mat3_mul(&g.homogeneous(), &h.homogeneous()), &gh.homogeneous()))
                .max(mat_diff(&mat3_mul(&g.homogeneous(), &g.inverse().homogeneous()), &ident))
                .max(mat_diff(&mat3_mul(&g.inverse().homogeneous(), &g.homogeneous()), &ident))
                .max(mat_diff(&mat3_mul(&g.homogeneous(), &ident), &g.homogeneous()));
        }
    }
    Check::at_most("group", format!("homogeneous law, {} pairs", order * order), worst, 1e-12)
}

/// Lifting and group correlation on the periodic `n x n` grid commute with
/// every element of the rotation-translation subgroup.
pub fn torus_check(n: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_vec = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let f = rand_vec(n * n);
    let psi = rand_vec(n * n);
    let big_psi = rand_vec(4 * n * n);
    let lifted = lift(n, &f, &psi);
    let corr = group_correlate(n, &lifted, &big_psi);
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let mut worst = 0.0f64;
    for t in P4::all(n) {
        let lhs = group_correlate(n, &act_on_group(n, t, &lifted), &big_psi);
        worst = worst.max(diff(&lhs, &act_on_group(n, t, &corr)));
    }
    Check::at_most("group", format!("torus group correlation, {n}x{n}"), worst, 1e-12)
}

/// Unitarity defect at each quarter turn and at the first non-quarter turn.
pub fn unitarity_checks(size: usize, seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for method in [RotationMethod::Exact90, RotationMethod::Gaussian, RotationMethod::Bilinear] {
        let op = RotationOperator::new(method, 8, size)?;
        let mut worst = 0.0f64;
        for q in 0..4 {
            worst = worst.max(unitarity_defect(&op, RotationIndex::new(2 * q, 8), 20, seed)?);
        }
        out.push(Check::at_most("unitarity", format!("{method} quarter turns"), worst, 1e-12));
        if method != RotationMethod::Exact90 {
            let d = unitarity_defect(&op, RotationIndex::new(1, 8), 20, seed)?;
            out.push(Check::above("unitarity", format!("{method} 45 deg"), d, 1e-3));
        }
    }
    Ok(out)
}

/// `R_S[f] ⋆ R_R[ψ]` against `R_S[f ⋆ R_{S⁻¹R}[ψ]]` on the interior for all
/// quarter turns `S, R`.
pub fn rotated_filter_check(size: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = Tensor::from_fn([1, 1, size, size], |_| rng.gen_range(-1.0..1.0));
    let psi = Tensor::from_fn([1, 1, 3, 3], |_| rng.gen_range(-1.0..1.0));
    let mut worst = 0.0f64;
    for s in 0..4i64 {
        for r in 0..4i64 {
            let mut tape = Tape::<f64>::new();
            let fs = tape.constant(rotate_exact90(&f, s)?);
            let pr = tape.constant(rotate_exact90(&psi, r)?);
            let lhs = tape.correlate2d(fs, pr, Padding::Same, 1)?;
            let fv = tape.constant(f.clone());
            let prel = tape.constant(rotate_exact90(&psi, r - s)?);
            let inner = tape.correlate2d(fv, prel, Padding::Same, 1)?;
            let rhs = rotate_exact90(tape.value(inner), s)?;
            let lhs = tape.value(lhs);
            for y in 1..size - 1 {
                for x in 1..size - 1 {
                    worst = worst.max((lhs.at(&[0, 0, y, x]) - rhs.at(&[0, 0, y, x])).abs());
                }
            }
        }
    }
    Ok(Check::at_most("equivariance", "rotated filter identity", worst, 1e-6))
}

/// Quarter-turn invariance of logits and per-layer residuals of an
/// untrained partial-basis group model on `size x size` inputs.
pub fn partial_model_checks(size: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let learned = Tensor::from_fn([2, 9, 3, 3], |_| rng.gen_range(-1.0..1.0));
    let basis = populate_partial(&learned, 8)?;
    let mut model: Model<f64> = Model::new(ModelSpec::group(1, [3, 4], 10, 8), Some(&basis), seed)?;
    let x = Tensor::from_fn([2, 1, size, size], |_| rng.gen_range(0.0..1.0));
    Ok(model_invariance_checks(&mut model, &x)?)
}

/// Logit invariance and per-layer equivariance under exact quarter turns for
/// any model whose basis is partial.
pub fn model_invariance_checks(model: &mut Model<f64>, x: &Tensor<f64>) -> Result<Vec<Check>> {
    let (base, _) = model.infer(x)?;
    let scale = base.max_abs().max(1e-30);
    let mut worst = 0.0f64;
    for q in 1..4 {
        let (turned, _) = model.infer(&rotate_exact90(x, q)?)?;
        worst = worst.max(turned.max_abs_diff(&base)? / scale);
    }
    let angles: Vec<_> = [2, 4, 6].into_iter().map(|r| RotationIndex::new(r, 8)).collect();
    let report = robustness_suite(model, x, &angles, RotationMethod::Exact90, 0.25, "partial")?;
    let layer_worst = report.layers.iter().map(|r| r.value).fold(0.0, f64::max);
    Ok(vec![
        Check::at_most("equivariance", "logits under quarter turns (relative)", worst, 1e-4),
        Check::at_most("equivariance", "per-layer residual, quarter turns", layer_worst, 1e-5),
    ])
}

/// Reconstruction loss of the one-element Dirac basis at `S = R = 0`.
pub fn dirac_reconstruction_check(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = Tensor::from_fn([3, 1, 16, 16], |_| rng.gen_range(0.0..1.0));
    let basis = Basis::dirac(8, 3)?;
    let config = PretrainConfig { n: 1, ..Default::default() };
    let zero = RotationIndex::identity(8);
    let v = evaluate_losses(&images, &basis, zero, zero, &config)?;
    Ok(Check::at_most("equivariance", "Dirac basis reconstruction", v.rec, 1e-15))
}

/// Every suite, in the order `verify` prints them.
pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    let mut out = gradient_checks(seed)?;
    out.push(group_law_check(8, seed));
    out.push(torus_check(8, seed));
    out.extend(unitarity_checks(9, seed)?);
    out.push(rotated_filter_check(12, seed)?);
    out.extend(partial_model_checks(32, seed)?);
    out.push(dirac_reconstruction_check(seed)?);
    Ok(out)
}
