//! Offline basis learning: minimize `L_equiv + L_orth + L_rec` over images.

use std::io::Write;
use std::sync::Arc;

use basisconv_tensor::{Padding, Scalar, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::basis::{init_elements, partial_sources, Basis, BasisKind};
use crate::error::{Error, Result};
use crate::group::{RotationIndex, RotationMethod, RotationOperator};
use crate::optim::{AmsGrad, AmsGradConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub equiv: f64,
    pub orth: f64,
    pub rec: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { equiv: 1.0, orth: 1.0, rec: 1.0 }
    }
}

/// How the per-element reconstructions combine into the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecScale {
    /// `Σ_i` as written.
    Sum,
    /// `(1/N) Σ_i`.
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub order: usize,
    pub n: usize,
    pub k: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub crop_fraction: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub partial: bool,
    pub sum_all_pairs: bool,
    pub rec_scale: RecScale,
    pub interpolation: RotationMethod,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            order: 8,
            n: 9,
            k: 3,
            lr: 1e-3,
            weight_decay: 1e-6,
            batch_size: 100,
            epochs: 30,
            crop_fraction: 0.25,
            seed: 0,
            weights: LossWeights::default(),
            partial: false,
            sum_all_pairs: false,
            rec_scale: RecScale::Sum,
            interpolation: RotationMethod::Gaussian,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if !(self.crop_fraction > 0.0 && self.crop_fraction < 0.5) {
            return bad(format!("crop fraction {} outside (0, 1/2)", self.crop_fraction));
        }
        if self.k % 2 == 0 {
            return bad(format!("filter size {} must be odd", self.k));
        }
        if self.n == 0 || self.batch_size == 0 || self.order == 0 {
            return bad("order, element count and batch size must be positive".into());
        }
        if self.partial && self.order % 4 != 0 {
            return Err(Error::OrderNotQuarterDivisible(self.order));
        }
        Ok(())
    }

    pub fn key_values(&self) -> Vec<(&'static str, String)> {
        vec![
            ("order", self.order.to_string()),
            ("n", self.n.to_string()),
            ("k", self.k.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("crop_fraction", self.crop_fraction.to_string()),
            ("seed", self.seed.to_string()),
            ("w_equiv", self.weights.equiv.to_string()),
            ("w_orth", self.weights.orth.to_string()),
            ("w_rec", self.weights.rec.to_string()),
            ("partial", self.partial.to_string()),
            ("sum_all_pairs", self.sum_all_pairs.to_string()),
            ("rec_scale", format!("{:?}", self.rec_scale).to_lowercase()),
            ("interpolation", self.interpolation.to_string()),
        ]
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.key_values() {
            h.update(format!("{k}={v}\n"));
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn kind(&self) -> BasisKind {
        if self.partial {
            BasisKind::Partial
        } else if self.n > self.k * self.k {
            BasisKind::Overcomplete
        } else {
            BasisKind::Full
        }
    }
}

/// Rotation maps and crop width for one image size.
#[derive(Clone, Debug)]
pub struct LossGeometry {
    pub rotations: RotationOperator,
    pub crop: usize,
}

impl LossGeometry {
    pub fn new(order: usize, size: usize, crop_fraction: f64, method: RotationMethod) -> Result<Self> {
        let crop = (size as f64 * crop_fraction).floor() as usize;
        if 2 * crop >= size {
            return Err(Error::Invalid(format!("crop {crop} leaves nothing of {size} pixels")));
        }
        Ok(Self { rotations: RotationOperator::new(method, order, size)?, crop })
    }

    fn order(&self) -> usize {
        self.rotations.order()
    }

    fn rotate<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, r: usize) -> Result<Var> {
        let map = self.rotations.map(RotationIndex::new(r as i64, self.order()))?;
        Ok(tape.sparse_apply(x, Arc::clone(map))?)
    }

    /// Mean absolute value over batch and retained pixels of the interior.
    fn cropped_l1<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (b, h) = (s[0], s[2]);
        let keep = h - 2 * self.crop;
        let y = tape.narrow(x, 2, self.crop, keep)?;
        let y = tape.narrow(y, 3, self.crop, keep)?;
        let l = tape.l1_norm(y)?;
        Ok(tape.scale(l, T::lit(1.0 / (b * keep * keep) as f64))?)
    }
}

/// Orientation slot `r` of a `[|G|, N, k, k]` basis as an `[N, 1, k, k]` kernel.
fn slot_kernel<T: Scalar>(tape: &mut Tape<T>, basis: Var, r: usize) -> Result<Var> {
    let s = tape.shape(basis).to_vec();
    let e = tape.narrow(basis, 0, r, 1)?;
    Ok(tape.reshape(e, [s[1], 1, s[2], s[3]])?)
}

/// `corr(R_S f, e_R^i)` against `R_S corr(f, e_{S⁻¹R}^i)` on the interior.
pub fn equivariance_loss<T: Scalar>(
    tape: &mut Tape<T>,
    geo: &LossGeometry,
    images: Var,
    basis: Var,
    s: RotationIndex,
    r: RotationIndex,
) -> Result<Var> {
    let rel = r.relative_to(s)?;
    let rotated = geo.rotate(tape, images, s.value())?;
    let e_r = slot_kernel(tape, basis, r.value())?;
    let lhs = tape.correlate2d(rotated, e_r, Padding::Same, 1)?;
    let e_rel = slot_kernel(tape, basis, rel.value())?;
    let resp = tape.correlate2d(images, e_rel, Padding::Same, 1)?;
    let rhs = geo.rotate(tape, resp, s.value())?;
    let d = tape.sub(lhs, rhs)?;
    geo.cropped_l1(tape, d)
}

/// `R_S f - Σ_i R_S[f ⋆ e^i_{RS⁻¹}] ⋆ ē_R^i` on the interior.
pub fn reconstruction_loss<T: Scalar>(
    tape: &mut Tape<T>,
    geo: &LossGeometry,
    images: Var,
    basis: Var,
    s: RotationIndex,
    r: RotationIndex,
    scale: RecScale,
) -> Result<Var> {
    let rel = r.relative_to(s)?;
    let n = tape.shape(basis)[1];
    let target = geo.rotate(tape, images, s.value())?;
    let e_rel = slot_kernel(tape, basis, rel.value())?;
    let resp = tape.correlate2d(images, e_rel, Padding::Same, 1)?;
    let resp = geo.rotate(tape, resp, s.value())?;
    let e_r = slot_kernel(tape, basis, r.value())?;
    let mut rec = tape.transpose_correlate2d(resp, e_r)?;
    if scale == RecScale::Mean {
        rec = tape.scale(rec, T::lit(1.0 / n as f64))?;
    }
    let d = tape.sub(target, rec)?;
    geo.cropped_l1(tape, d)
}

/// `Σ_R ‖E_R E_Rᵀ - I_N‖₁` on the `N x k²` flattening.
pub fn orthogonality_loss<T: Scalar>(tape: &mut Tape<T>, basis: Var) -> Result<Var> {
    let s = tape.shape(basis).to_vec();
    let (g, n, kk) = (s[0], s[1], s[2] * s[3]);
    let eye = tape.constant(Tensor::from_fn([n, n], |i| if i / n == i % n { T::one() } else { T::zero() }));
    let flat = tape.reshape(basis, [g, n, kk])?;
    let mut total: Option<Var> = None;
    for r in 0..g {
        let e = tape.narrow(flat, 0, r, 1)?;
        let e = tape.reshape(e, [n, kk])?;
        let et = tape.permute(e, &[1, 0])?;
        let gram = tape.matmul(e, et)?;
        let d = tape.sub(gram, eye)?;
        let l = tape.l1_norm(d)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    Ok(total.expect("at least one orientation"))
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub equiv: Var,
    pub orth: Var,
    pub rec: Var,
    pub total: Var,
}

/// Weighted sum of the three terms for one `(S, R)` pair, or summed over all
/// pairs when `config.sum_all_pairs` is set.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    geo: &LossGeometry,
    images: Var,
    basis: Var,
    pairs: &[(RotationIndex, RotationIndex)],
    config: &PretrainConfig,
) -> Result<LossVars> {
    let mut equiv: Option<Var> = None;
    let mut rec: Option<Var> = None;
    for &(s, r) in pairs {
        let e = equivariance_loss(tape, geo, images, basis, s, r)?;
        let c = reconstruction_loss(tape, geo, images, basis, s, r, config.rec_scale)?;
        equiv = Some(match equiv {
            Some(a) => tape.add(a, e)?,
            None => e,
        });
        rec = Some(match rec {
            Some(a) => tape.add(a, c)?,
            None => c,
        });
    }
    let (Some(equiv), Some(rec)) = (equiv, rec) else {
        return Err(Error::Invalid("total_loss needs at least one (S, R) pair".into()));
    };
    let orth = orthogonality_loss(tape, basis)?;
    let w = config.weights;
    let we = tape.scale(equiv, T::lit(w.equiv))?;
    let wo = tape.scale(orth, T::lit(w.orth))?;
    let wr = tape.scale(rec, T::lit(w.rec))?;
    let t = tape.add(we, wo)?;
    let total = tape.add(t, wr)?;
    Ok(LossVars { equiv, orth, rec, total })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub equiv: f64,
    pub orth: f64,
    pub rec: f64,
    pub total: f64,
}

/// Evaluates the three terms of a stored basis at one `(S, R)` pair in `f64`.
pub fn evaluate_losses(
    images: &Tensor<f64>,
    basis: &Basis,
    s: RotationIndex,
    r: RotationIndex,
    config: &PretrainConfig,
) -> Result<LossValues> {
    let size = images.shape()[2];
    let geo = LossGeometry::new(basis.order(), size, config.crop_fraction, config.interpolation)?;
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(images.clone());
    let b = tape.constant(basis.elements().clone());
    let v = total_loss(&mut tape, &geo, x, b, &[(s, r)], config)?;
    let get = |t: &Tape<f64>, v: Var| t.value(v).item();
    Ok(LossValues {
        equiv: get(&tape, v.equiv)?,
        orth: get(&tape, v.orth)?,
        rec: get(&tape, v.rec)?,
        total: get(&tape, v.total)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub equiv: f64,
    pub orth: f64,
    pub rec: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub basis: Basis,
    pub initial: Basis,
    pub log: Vec<EpochLog>,
}

/// Learnable tensor of a fresh run: `[|G|/4, N, k, k]` for a partial basis,
/// `[|G|, N, k, k]` otherwise.
pub fn initial_parameters(config: &PretrainConfig, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let slots = if config.partial { config.order / 4 } else { config.order };
    init_elements(slots, config.n, config.k, rng)
}

fn materialize(learned: &Tensor<f64>, config: &PretrainConfig, src: Option<&[usize]>) -> Result<Basis> {
    let elements = match src {
        Some(src) => {
            let d = learned.data();
            Tensor::new([config.order, config.n, config.k, config.k], src.iter().map(|&i| d[i]).collect())?
        }
        None => learned.clone(),
    };
    Ok(Basis::new(elements, config.kind())?.with_config_fingerprint(config.fingerprint()))
}

fn batch<T: Scalar>(corpus: &Tensor<f64>, idx: &[usize]) -> Result<Tensor<T>> {
    let s = corpus.shape();
    let per: usize = s[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend(corpus.data()[i * per..(i + 1) * per].iter().map(|&v| T::lit(v)));
    }
    let mut shape = s.to_vec();
    shape[0] = idx.len();
    Ok(Tensor::new(shape, data)?)
}

/// Runs the pretraining loop on `corpus [M, 1, H, W]` in precision `T`.
///
/// Each minibatch draws one `(S, R)` pair uniformly from the `|G|` angles,
/// unless `sum_all_pairs` is set. A partial basis keeps only the first
/// quarter of the orientations learnable and gathers the rest as exact
/// quarter turns, so the constraint holds after every step.
pub fn pretrain<T: Scalar>(corpus: &Tensor<f64>, config: &PretrainConfig) -> Result<PretrainOutcome> {
    config.validate()?;
    let s = corpus.shape();
    if s.len() != 4 || s[0] == 0 {
        return Err(Error::EmptySet);
    }
    if s[1] != 1 || s[2] != s[3] {
        return Err(Error::Invalid(format!("pretraining expects [M, 1, H, H] images, got {s:?}")));
    }
    let geo = LossGeometry::new(config.order, s[2], config.crop_fraction, config.interpolation)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let src = if config.partial { Some(Arc::new(partial_sources(config.order, config.n, config.k)?)) } else { None };
    let init = initial_parameters(config, &mut rng);
    let initial = materialize(&init, config, src.as_deref().map(|v| v.as_slice()))?;
    let mut learned: Tensor<T> = init.cast();
    let mut opt =
        AmsGrad::<T>::new(AmsGradConfig { lr: config.lr, weight_decay: config.weight_decay, ..Default::default() });
    let all_pairs: Vec<(RotationIndex, RotationIndex)> = (0..config.order)
        .flat_map(|s| (0..config.order).map(move |r| (s, r)))
        .map(|(s, r)| (RotationIndex::new(s as i64, config.order), RotationIndex::new(r as i64, config.order)))
        .collect();
    let full_shape = [config.order, config.n, config.k, config.k];
    let mut order: Vec<usize> = (0..s[0]).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut steps = 0usize;
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let pairs = if config.sum_all_pairs {
                all_pairs.clone()
            } else {
                let s = rng.gen_range(0..config.order) as i64;
                let r = rng.gen_range(0..config.order) as i64;
                vec![(RotationIndex::new(s, config.order), RotationIndex::new(r, config.order))]
            };
            let mut tape = Tape::<T>::new();
            let images = tape.constant(batch::<T>(corpus, idx)?);
            let param = tape.leaf(learned.clone());
            let basis = match &src {
                Some(src) => tape.remap(param, full_shape, Arc::clone(src))?,
                None => param,
            };
            let v = total_loss(&mut tape, &geo, images, basis, &pairs, config)?;
            let vals = [v.equiv, v.orth, v.rec, v.total].map(|x| tape.value(x).data()[0].as_f64());
            if vals.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    detail: format!("equiv={} orth={} rec={} total={}", vals[0], vals[1], vals[2], vals[3]),
                });
            }
            let mut grads = tape.backward(v.total)?;
            let g = grads.take(param).expect("leaf gradient");
            opt.step(&mut [&mut learned], &[&g])?;
            if !learned.is_finite() {
                return Err(Error::Divergence { epoch, step, detail: "non-finite basis after update".into() });
            }
            if let Some(src) = &src {
                materialize(&learned.cast(), config, Some(src))?.check_partial()?;
            }
            for (acc, x) in sums.iter_mut().zip(vals) {
                *acc += x;
            }
            steps += 1;
        }
        let m = steps.max(1) as f64;
        log.push(EpochLog { epoch, equiv: sums[0] / m, orth: sums[1] / m, rec: sums[2] / m, total: sums[3] / m });
    }
    let basis = materialize(&learned.cast(), config, src.as_deref().map(|v| v.as_slice()))?;
    if let Some((slot, element)) = basis.find_zero_element() {
        return Err(Error::DegenerateElement { slot, element });
    }
    Ok(PretrainOutcome { basis, initial, log })
}

pub fn write_loss_csv<W: Write>(log: &[EpochLog], mut w: W) -> std::io::Result<()> {
    writeln!(w, "epoch,L_equiv,L_orth,L_rec,L_total")?;
    for e in log {
        writeln!(w, "{},{},{},{},{}", e.epoch, e.equiv, e.orth, e.rec, e.total)?;
    }
    Ok(())
}
