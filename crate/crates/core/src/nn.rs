//! Group-convolution layers by basis switching, and the two classifier
//! architectures (translational and roto-translational).

use std::fs;
use std::path::Path;
use std::sync::Arc;

use basisconv_tensor::{BatchNormMode, BatchNormStats, Padding, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::basis::Basis;
use crate::error::{Error, Result};

pub const TRANSLATIONAL_WIDTHS: [usize; 2] = [96, 192];
pub const GROUP_WIDTHS: [usize; 2] = [33, 67];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    /// Lifts `[B, C, H, W]` to `[B, C_out, |G|, H, W]`.
    GConvInput {
        k: usize,
        c_out: usize,
    },
    /// `[B, C, |G|, H, W]` to `[B, C_out, |G|, H, W]`.
    GConvIntermediate {
        k: usize,
        c_out: usize,
    },
    Conv {
        k: usize,
        c_out: usize,
    },
    BatchNorm,
    Relu,
    MaxPool2x2,
    /// Max over every axis after the channel axis.
    GlobalMaxPool,
    LinearSoftmax {
        classes: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Translational,
    Group,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub in_channels: usize,
    pub order: usize,
    pub layers: Vec<LayerSpec>,
}

fn block(layers: &mut Vec<LayerSpec>, conv: LayerSpec) {
    layers.extend([conv, LayerSpec::BatchNorm, LayerSpec::Relu]);
}

impl ModelSpec {
    /// conv3-a ×3, pool, conv3-b ×3, pool, conv3-b, conv1-b ×2, global max pool, softmax.
    pub fn translational(in_channels: usize, widths: [usize; 2], classes: usize) -> Self {
        let [a, b] = widths;
        let mut layers = Vec::new();
        for _ in 0..3 {
            block(&mut layers, LayerSpec::Conv { k: 3, c_out: a });
        }
        layers.push(LayerSpec::MaxPool2x2);
        for _ in 0..3 {
            block(&mut layers, LayerSpec::Conv { k: 3, c_out: b });
        }
        layers.push(LayerSpec::MaxPool2x2);
        block(&mut layers, LayerSpec::Conv { k: 3, c_out: b });
        for _ in 0..2 {
            block(&mut layers, LayerSpec::Conv { k: 1, c_out: b });
        }
        layers.extend([LayerSpec::GlobalMaxPool, LayerSpec::LinearSoftmax { classes }]);
        Self { kind: ModelKind::Translational, in_channels, order: 1, layers }
    }

    /// The group analogue with Gconv layers; the last two are 1×1.
    pub fn group(in_channels: usize, widths: [usize; 2], classes: usize, order: usize) -> Self {
        let [a, b] = widths;
        let mut layers = Vec::new();
        block(&mut layers, LayerSpec::GConvInput { k: 3, c_out: a });
        for _ in 0..2 {
            block(&mut layers, LayerSpec::GConvIntermediate { k: 3, c_out: a });
        }
        layers.push(LayerSpec::MaxPool2x2);
        for _ in 0..3 {
            block(&mut layers, LayerSpec::GConvIntermediate { k: 3, c_out: b });
        }
        layers.push(LayerSpec::MaxPool2x2);
        block(&mut layers, LayerSpec::GConvIntermediate { k: 3, c_out: b });
        for _ in 0..2 {
            block(&mut layers, LayerSpec::GConvIntermediate { k: 1, c_out: b });
        }
        layers.extend([LayerSpec::GlobalMaxPool, LayerSpec::LinearSoftmax { classes }]);
        Self { kind: ModelKind::Group, in_channels, order, layers }
    }

    pub fn architecture_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{self:?}"));
        hex::encode(&h.finalize()[..8])
    }
}

fn kernel_of<T: Scalar>(tape: &mut Tape<T>, basis: Var) -> Result<(Var, [usize; 3])> {
    let s = tape.shape(basis).to_vec();
    if s.len() != 4 {
        return Err(Error::Invalid(format!("basis must be [|G|, N, k, k], got {s:?}")));
    }
    let (g, n, k) = (s[0], s[1], s[2]);
    let e = tape.permute(basis, &[1, 0, 2, 3])?;
    Ok((tape.reshape(e, [n, g * k * k])?, [g, n, k]))
}

fn gather_input(co: usize, ci: usize, g: usize, k: usize) -> Vec<usize> {
    let kk = k * k;
    let mut src = Vec::with_capacity(co * g * ci * kk);
    for o in 0..co {
        for r in 0..g {
            for c in 0..ci {
                let base = (o * ci + c) * g * kk + r * kk;
                src.extend(base..base + kk);
            }
        }
    }
    src
}

fn gather_intermediate(co: usize, ci: usize, g: usize, k: usize) -> Vec<usize> {
    let kk = k * k;
    let mut src = Vec::with_capacity(co * g * ci * g * kk);
    for o in 0..co {
        for r in 0..g {
            for c in 0..ci {
                for s in 0..g {
                    let t = (s + g - r) % g;
                    let base = (((o * ci + c) * g + t) * g + r) * kk;
                    src.extend(base..base + kk);
                }
            }
        }
    }
    src
}

/// Output slice `r` is `f ⋆ Σ_i ψ̂_i e_r^i` for coefficients `[C_out, C_in, N]`.
pub fn gconv_input<T: Scalar>(tape: &mut Tape<T>, f: Var, coeffs: Var, basis: Var) -> Result<Var> {
    let (e, [g, n, k]) = kernel_of(tape, basis)?;
    let cs = tape.shape(coeffs).to_vec();
    if cs.len() != 3 || cs[2] != n {
        return Err(Error::Invalid(format!("input coefficients must be [C_out, C_in, {n}], got {cs:?}")));
    }
    let (co, ci) = (cs[0], cs[1]);
    let c2 = tape.reshape(coeffs, [co * ci, n])?;
    let filters = tape.matmul(c2, e)?;
    let kernel = tape.remap(filters, [co * g, ci, k, k], Arc::new(gather_input(co, ci, g, k)))?;
    let y = tape.correlate2d(f, kernel, Padding::Same, 1)?;
    let s = tape.shape(y).to_vec();
    Ok(tape.reshape(y, [s[0], co, g, s[2], s[3]])?)
}

/// Output slice `r` is `Σ_s f_s ⋆ Σ_i ψ̂[·, ·, (s - r) mod |G|, i] e_r^i` for
/// coefficients `[C_out, C_in, |G|, N]` and input `[B, C_in, |G|, H, W]`.
pub fn gconv_intermediate<T: Scalar>(tape: &mut Tape<T>, f: Var, coeffs: Var, basis: Var) -> Result<Var> {
    let (e, [g, n, k]) = kernel_of(tape, basis)?;
    let cs = tape.shape(coeffs).to_vec();
    if cs.len() != 4 || cs[2] != g || cs[3] != n {
        return Err(Error::Invalid(format!("intermediate coefficients must be [C_out, C_in, {g}, {n}], got {cs:?}")));
    }
    let fs = tape.shape(f).to_vec();
    if fs.len() != 5 || fs[2] != g {
        return Err(Error::OrientationExtent {
            op: "gconv_intermediate",
            expected: g,
            got: if fs.len() == 5 { fs[2] } else { 0 },
        });
    }
    let (co, ci) = (cs[0], cs[1]);
    let c2 = tape.reshape(coeffs, [co * ci * g, n])?;
    let filters = tape.matmul(c2, e)?;
    let kernel = tape.remap(filters, [co * g, ci * g, k, k], Arc::new(gather_intermediate(co, ci, g, k)))?;
    let x = tape.reshape(f, [fs[0], fs[1] * g, fs[3], fs[4]])?;
    let y = tape.correlate2d(x, kernel, Padding::Same, 1)?;
    Ok(tape.reshape(y, [fs[0], co, g, fs[3], fs[4]])?)
}

/// Per `(batch, channel)` maximum over orientation and space.
pub fn global_group_maxpool<T: Scalar>(tape: &mut Tape<T>, f: Var) -> Result<Var> {
    Ok(tape.max_trailing(f, 2)?)
}

#[derive(Clone, Debug)]
enum LayerState {
    Conv { weight: usize },
    GConvInput { coeffs: usize, basis: usize },
    GConvIntermediate { coeffs: usize, basis: usize },
    BatchNorm { gamma: usize, beta: usize, stats: usize },
    Linear { weight: usize, bias: usize },
    Stateless,
}

/// Output of one forward pass: logits and the activation after every
/// conv block (after its ReLU).
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    pub activations: Vec<(String, Var)>,
}

/// A classifier with its parameters, batch-norm statistics and frozen bases.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub spec: ModelSpec,
    pub params: Vec<Tensor<T>>,
    pub bn: Vec<BatchNormStats<T>>,
    /// Per-channel input `(mean, std)`, applied before the first layer.
    pub input_norm: Option<(Vec<f64>, Vec<f64>)>,
    bases: Vec<Tensor<T>>,
    basis_fingerprint: String,
    layers: Vec<LayerState>,
}

impl<T: Scalar> Model<T> {
    /// Builds a model with seeded uniform weights in `±1/√fan_in`. Group models need a
    /// basis of matching order for their 3×3 layers; 1×1 group layers use
    /// the unit basis.
    pub fn new(spec: ModelSpec, basis: Option<&Basis>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut bn = Vec::new();
        let mut bases: Vec<Tensor<T>> = Vec::new();
        let mut basis_idx: Vec<(usize, usize)> = Vec::new();
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut channels = spec.in_channels;
        let g = spec.order;
        let mut basis_for = |k: usize, bases: &mut Vec<Tensor<T>>| -> Result<(usize, usize)> {
            if let Some(&(_, i)) = basis_idx.iter().find(|(kk, _)| *kk == k) {
                return Ok((i, bases[i].shape()[1]));
            }
            let b = if k == 1 {
                Basis::unit(g)
            } else {
                let b = basis.ok_or_else(|| Error::Invalid("group model requires a basis".into()))?;
                if b.order() != g || b.k() != k {
                    return Err(Error::Invalid(format!(
                        "basis has |G|={} k={}, model needs |G|={g} k={k}",
                        b.order(),
                        b.k()
                    )));
                }
                b.clone()
            };
            bases.push(b.elements().cast());
            basis_idx.push((k, bases.len() - 1));
            Ok((bases.len() - 1, b.n()))
        };
        let uniform = |shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng| {
            let a = (1.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-a..a)))
        };
        for layer in &spec.layers {
            let state = match *layer {
                LayerSpec::Conv { k, c_out } => {
                    params.push(uniform(vec![c_out, channels, k, k], channels * k * k, &mut rng));
                    channels = c_out;
                    LayerState::Conv { weight: params.len() - 1 }
                }
                LayerSpec::GConvInput { k, c_out } => {
                    let (b, n) = basis_for(k, &mut bases)?;
                    params.push(uniform(vec![c_out, channels, n], channels * n, &mut rng));
                    channels = c_out;
                    LayerState::GConvInput { coeffs: params.len() - 1, basis: b }
                }
                LayerSpec::GConvIntermediate { k, c_out } => {
                    let (b, n) = basis_for(k, &mut bases)?;
                    params.push(uniform(vec![c_out, channels, g, n], channels * g * n, &mut rng));
                    channels = c_out;
                    LayerState::GConvIntermediate { coeffs: params.len() - 1, basis: b }
                }
                LayerSpec::BatchNorm => {
                    params.push(Tensor::full([channels], T::one()));
                    params.push(Tensor::zeros([channels]));
                    bn.push(BatchNormStats::new(channels));
                    LayerState::BatchNorm { gamma: params.len() - 2, beta: params.len() - 1, stats: bn.len() - 1 }
                }
                LayerSpec::LinearSoftmax { classes } => {
                    params.push(uniform(vec![channels, classes], channels, &mut rng));
                    params.push(Tensor::zeros([classes]));
                    LayerState::Linear { weight: params.len() - 2, bias: params.len() - 1 }
                }
                LayerSpec::Relu | LayerSpec::MaxPool2x2 | LayerSpec::GlobalMaxPool => LayerState::Stateless,
            };
            layers.push(state);
        }
        let basis_fingerprint = match (spec.kind, basis) {
            (ModelKind::Group, Some(b)) => b.fingerprint(),
            _ => String::new(),
        };
        Ok(Self { spec, params, bn, input_norm: None, bases, basis_fingerprint, layers })
    }

    pub fn basis_fingerprint(&self) -> &str {
        &self.basis_fingerprint
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            bn: self
                .bn
                .iter()
                .map(|s| BatchNormStats {
                    mean: s.mean.iter().map(|v| U::lit(v.as_f64())).collect(),
                    var: s.var.iter().map(|v| U::lit(v.as_f64())).collect(),
                    momentum: U::lit(s.momentum.as_f64()),
                    eps: U::lit(s.eps.as_f64()),
                })
                .collect(),
            input_norm: self.input_norm.clone(),
            bases: self.bases.iter().map(Tensor::cast).collect(),
            basis_fingerprint: self.basis_fingerprint.clone(),
            layers: self.layers.clone(),
        }
    }

    /// Records parameters on the tape, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| if trainable { tape.leaf(p.clone()) } else { tape.constant(p.clone()) }).collect()
    }

    pub fn normalize_input(&self, x: &Tensor<T>) -> Tensor<T> {
        let Some((mean, std)) = &self.input_norm else {
            return x.clone();
        };
        let s = x.shape();
        let (c, hw) = (s[1], s[2] * s[3]);
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / hw) % c;
            *v = (*v - T::lit(mean[ch])) / T::lit(std[ch].max(1e-12));
        }
        out
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        params: &[Var],
        mode: BatchNormMode,
    ) -> Result<Forward> {
        if params.len() != self.params.len() {
            return Err(Error::Invalid(format!(
                "{} parameter handles for {} parameters",
                params.len(),
                self.params.len()
            )));
        }
        let basis_vars: Vec<Var> = self.bases.iter().map(|b| tape.constant(b.clone())).collect();
        let mut h = tape.constant(self.normalize_input(x));
        let mut activations = Vec::new();
        let mut block = 0;
        for (spec, state) in self.spec.layers.iter().zip(&self.layers) {
            h = match (spec, state) {
                (_, LayerState::Conv { weight }) => tape.correlate2d(h, params[*weight], Padding::Same, 1)?,
                (_, LayerState::GConvInput { coeffs, basis }) => {
                    gconv_input(tape, h, params[*coeffs], basis_vars[*basis])?
                }
                (_, LayerState::GConvIntermediate { coeffs, basis }) => {
                    gconv_intermediate(tape, h, params[*coeffs], basis_vars[*basis])?
                }
                (_, LayerState::BatchNorm { gamma, beta, stats }) => {
                    tape.batchnorm(h, params[*gamma], params[*beta], 1, &mut self.bn[*stats], mode)?
                }
                (_, LayerState::Linear { weight, bias }) => {
                    let y = tape.matmul(h, params[*weight])?;
                    tape.add_bias(y, params[*bias], 1)?
                }
                (LayerSpec::Relu, _) => {
                    let y = tape.relu(h)?;
                    block += 1;
                    activations.push((format!("block{block}"), y));
                    y
                }
                (LayerSpec::MaxPool2x2, _) => tape.maxpool2x2(h)?,
                (LayerSpec::GlobalMaxPool, _) => tape.max_trailing(h, 2)?,
                _ => unreachable!("layer without state"),
            };
        }
        Ok(Forward { logits: h, activations })
    }

    /// Eval-mode logits and block activations as plain tensors.
    pub fn infer(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<(String, Tensor<T>)>)> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, x, &params, BatchNormMode::Eval)?;
        let acts = out.activations.iter().map(|(n, v)| (n.clone(), tape.value(*v).clone())).collect();
        Ok((tape.value(out.logits).clone(), acts))
    }

    /// Eval-mode logits of a batch, computed in chunks of `chunk`.
    pub fn logits(&mut self, x: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
        let s = x.shape().to_vec();
        let per: usize = s[1..].iter().product();
        let mut out = Vec::new();
        let mut classes = 0;
        for start in (0..s[0]).step_by(chunk.max(1)) {
            let m = chunk.min(s[0] - start);
            let mut shape = s.clone();
            shape[0] = m;
            let xb = Tensor::new(shape, x.data()[start * per..(start + m) * per].to_vec())?;
            let mut tape = Tape::new();
            let params = self.bind(&mut tape, false);
            let f = self.forward(&mut tape, &xb, &params, BatchNormMode::Eval)?;
            let l = tape.value(f.logits);
            classes = l.shape()[1];
            out.extend_from_slice(l.data());
        }
        Ok(Tensor::new([s[0], classes], out)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(CKPT_MAGIC);
        b.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        put_str(&mut b, &self.spec.architecture_hash());
        put_str(&mut b, &self.basis_fingerprint);
        put_u32(&mut b, self.params.len());
        for p in &self.params {
            put_u32(&mut b, p.ndim());
            for &d in p.shape() {
                put_u32(&mut b, d);
            }
            put_f64s(&mut b, p.data().iter().map(|v| v.as_f64()));
        }
        put_u32(&mut b, self.bn.len());
        for s in &self.bn {
            put_u32(&mut b, s.mean.len());
            put_f64s(&mut b, s.mean.iter().map(|v| v.as_f64()));
            put_f64s(&mut b, s.var.iter().map(|v| v.as_f64()));
        }
        match &self.input_norm {
            Some((m, s)) => {
                put_u32(&mut b, m.len());
                put_f64s(&mut b, m.iter().copied());
                put_f64s(&mut b, s.iter().copied());
            }
            None => put_u32(&mut b, 0),
        }
        let sum = Sha256::digest(&b);
        b.extend_from_slice(&sum);
        b
    }

    /// Restores parameters into a model built from the same spec and basis.
    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let what = "checkpoint";
        if bytes.len() < CKPT_MAGIC.len() + 32 {
            return Err(Error::Truncated { what: what.into() });
        }
        if &bytes[..8] != CKPT_MAGIC {
            return Err(Error::BadMagic {
                what: what.into(),
                found: u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")),
            });
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(Error::ChecksumMismatch { what: what.into() });
        }
        let mut rd = Cursor { b: body, pos: 8 };
        let version = rd.u32()? as u32;
        if version != CKPT_VERSION {
            return Err(Error::VersionMismatch { what: what.into(), found: version, expected: CKPT_VERSION });
        }
        let arch = rd.string()?;
        if arch != self.spec.architecture_hash() {
            return Err(Error::Format {
                what: what.into(),
                reason: format!("architecture {arch} does not match {}", self.spec.architecture_hash()),
            });
        }
        let fp = rd.string()?;
        if fp != self.basis_fingerprint {
            return Err(Error::FingerprintMismatch { expected: self.basis_fingerprint.clone(), found: fp });
        }
        let count = rd.u32()?;
        if count != self.params.len() {
            return Err(Error::Format {
                what: what.into(),
                reason: format!("{count} parameters, model has {}", self.params.len()),
            });
        }
        let mut params = Vec::with_capacity(count);
        for p in &self.params {
            let nd = rd.u32()?;
            let shape = (0..nd).map(|_| rd.u32()).collect::<Result<Vec<_>>>()?;
            if shape != p.shape() {
                return Err(Error::Format {
                    what: what.into(),
                    reason: format!("parameter shape {shape:?}, expected {:?}", p.shape()),
                });
            }
            let data = rd.f64s(p.numel())?.into_iter().map(T::lit).collect();
            params.push(Tensor::new(shape, data)?);
        }
        let nbn = rd.u32()?;
        if nbn != self.bn.len() {
            return Err(Error::Format { what: what.into(), reason: "batch-norm layer count differs".into() });
        }
        let mut bn = self.bn.clone();
        for s in &mut bn {
            let c = rd.u32()?;
            s.mean = rd.f64s(c)?.into_iter().map(T::lit).collect();
            s.var = rd.f64s(c)?.into_iter().map(T::lit).collect();
        }
        let c = rd.u32()?;
        let input_norm = if c > 0 { Some((rd.f64s(c)?, rd.f64s(c)?)) } else { None };
        self.params = params;
        self.bn = bn;
        self.input_norm = input_norm;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load_bytes(&bytes)
    }
}

const CKPT_MAGIC: &[u8; 8] = b"BCCKPT1\0";
const CKPT_VERSION: u32 = 1;

fn put_u32(b: &mut Vec<u8>, v: usize) {
    b.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    put_u32(b, s.len());
    b.extend_from_slice(s.as_bytes());
}

fn put_f64s(b: &mut Vec<u8>, it: impl Iterator<Item = f64>) {
    for v in it {
        b.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.b.len())
            .ok_or_else(|| Error::Truncated { what: "checkpoint".into() })?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format { what: "checkpoint".into(), reason: "string is not UTF-8".into() })
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}
