//! Task training on a frozen basis: augmentation, the AMSGrad loop and evaluation.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use basisconv_tensor::{BatchNormMode, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::basis::Basis;
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::group::{rotate_exact90, rotation_operator_degrees, RotationMethod};
use crate::nn::{Model, ModelKind};
use crate::optim::{AmsGrad, AmsGradConfig};

pub const MAX_SHIFT: i64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RotationAugment {
    None,
    /// Multiples of 90°, always exact permutations.
    Quarter,
    /// Multiples of 45°.
    Eighth,
    /// Uniform in [0°, 360°).
    Full,
}

impl RotationAugment {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Quarter => "90",
            Self::Eighth => "45",
            Self::Full => "full",
        }
    }
}

impl fmt::Display for RotationAugment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RotationAugment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "90" => Ok(Self::Quarter),
            "45" => Ok(Self::Eighth),
            "full" => Ok(Self::Full),
            _ => Err(Error::Invalid(format!("unknown rotation augmentation '{s}' (none, 90, 45, full)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub flip: bool,
    /// Per-channel normalization by training-set statistics, stored in the model.
    pub normalize: bool,
    pub translate: bool,
    pub rotation: RotationAugment,
    pub method: RotationMethod,
}

impl Augmentation {
    pub fn none() -> Self {
        Self {
            flip: false,
            normalize: false,
            translate: false,
            rotation: RotationAugment::None,
            method: RotationMethod::Gaussian,
        }
    }
}

impl Default for Augmentation {
    fn default() -> Self {
        Self { flip: true, normalize: true, translate: true, ..Self::none() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub augmentation: Augmentation,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-3,
            weight_decay: 1e-6,
            batch_size: 100,
            augmentation: Augmentation::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn key_values(&self) -> Vec<(&'static str, String)> {
        let a = &self.augmentation;
        vec![
            ("epochs", self.epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("flip", a.flip.to_string()),
            ("normalize", a.normalize.to_string()),
            ("translate", a.translate.to_string()),
            ("rotation", a.rotation.to_string()),
            ("rotation_method", a.method.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

/// Shifts every plane of a `[C, H, W]` image by `(dy, dx)` with zero fill.
pub fn translate(image: &[f32], c: usize, h: usize, w: usize, dy: i64, dx: i64) -> Vec<f32> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h as i64 {
            let sy = y - dy;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            for x in 0..w as i64 {
                let sx = x - dx;
                if sx >= 0 && sx < w as i64 {
                    out[(ch * h + y as usize) * w + x as usize] = image[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

fn flip(image: &mut [f32], w: usize) {
    for row in image.chunks_mut(w) {
        row.reverse();
    }
}

/// Rotates a batch by `degrees` counter-clockwise, exact at quarter turns.
pub fn rotate_batch(x: &Tensor<f32>, degrees: f64, method: RotationMethod) -> Result<Tensor<f32>> {
    let turns = degrees / 90.0;
    if (turns - turns.round()).abs() < 1e-12 {
        return rotate_exact90(x, turns.round() as i64);
    }
    let n = x.shape()[x.ndim() - 1];
    Ok(rotation_operator_degrees(n, degrees, method)?.apply(x)?)
}

/// Random flip, translation and rotation of a `[B, C, H, W]` batch.
/// Normalization is applied by the model from its stored statistics.
pub fn augment(batch: &Tensor<f32>, aug: &Augmentation, seed: u64) -> Result<Tensor<f32>> {
    let s = batch.shape().to_vec();
    let (c, h, w) = (s[1], s[2], s[3]);
    let per = c * h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(batch.numel());
    for img in batch.data().chunks(per) {
        let mut img = img.to_vec();
        if aug.flip && rng.gen_bool(0.5) {
            flip(&mut img, w);
        }
        if aug.translate {
            let dy = rng.gen_range(-MAX_SHIFT..=MAX_SHIFT);
            let dx = rng.gen_range(-MAX_SHIFT..=MAX_SHIFT);
            img = translate(&img, c, h, w, dy, dx);
        }
        let degrees = match aug.rotation {
            RotationAugment::None => 0.0,
            RotationAugment::Quarter => 90.0 * rng.gen_range(0..4) as f64,
            RotationAugment::Eighth => 45.0 * rng.gen_range(0..8) as f64,
            RotationAugment::Full => rng.gen_range(0.0..360.0),
        };
        if degrees != 0.0 {
            let t = Tensor::new([c, h, w], img)?;
            img = rotate_batch(&t, degrees, aug.method)?.into_data();
        }
        out.extend(img);
    }
    Ok(Tensor::new(s, out)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
}

impl TrainLog {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut s = String::from("epoch,train_loss,train_acc,val_acc\n");
        for r in &self.rows {
            let val = r.val_acc.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.train_acc, val));
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

fn batch_of(set: &LabeledImageSet, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
    let s = set.images.shape();
    let per: usize = s[1..].iter().product();
    let d = set.images.data();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&d[i * per..(i + 1) * per]);
    }
    let mut shape = s.to_vec();
    shape[0] = idx.len();
    let labels = idx.iter().map(|&i| set.labels[i]).collect();
    (Tensor::new(shape, data).expect("consistent shape"), labels)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Trains coefficients, batch-norm and linear parameters. The basis stays
/// frozen; when `basis` is given its fingerprint must match the model's.
pub fn train(
    model: &mut Model<f32>,
    trainset: &LabeledImageSet,
    val: Option<&LabeledImageSet>,
    config: &TrainConfig,
    basis: Option<&Basis>,
) -> Result<TrainLog> {
    if trainset.is_empty() {
        return Err(Error::EmptySet);
    }
    if config.batch_size == 0 {
        return Err(Error::Invalid("batch_size must be positive".into()));
    }
    if let (ModelKind::Group, Some(b)) = (model.spec.kind, basis) {
        if b.fingerprint() != model.basis_fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected: model.basis_fingerprint().to_string(),
                found: b.fingerprint(),
            });
        }
    }
    if config.augmentation.normalize {
        model.input_norm = Some(trainset.channel_stats());
    }
    let mut opt =
        AmsGrad::new(AmsGradConfig { lr: config.lr, weight_decay: config.weight_decay, ..AmsGradConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..trainset.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let (x, labels) = batch_of(trainset, idx);
            let x = augment(&x, &config.augmentation, rng.gen())?;
            let mut tape = Tape::new();
            let params = model.bind(&mut tape, true);
            let out = model.forward(&mut tape, &x, &params, BatchNormMode::Train)?;
            let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
            let value = tape.value(loss).item()? as f64;
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, step, detail: format!("cross-entropy is {value}") });
            }
            let logits = tape.value(out.logits);
            let classes = logits.shape()[1];
            for (row, &l) in logits.data().chunks(classes).zip(&labels) {
                correct += (argmax(row) == l) as usize;
            }
            loss_sum += value * idx.len() as f64;
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Tensor<f32>> = params
                .iter()
                .zip(&model.params)
                .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
                .collect();
            let mut refs: Vec<&mut Tensor<f32>> = model.params.iter_mut().collect();
            opt.step(&mut refs, &grads.iter().collect::<Vec<_>>())?;
        }
        let n = trainset.len() as f64;
        let val_acc = match val {
            Some(v) => Some(evaluate(model, v)?.accuracy),
            None => None,
        };
        log.rows.push(EpochRow { epoch, train_loss: loss_sum / n, train_acc: correct as f64 / n, val_acc });
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Evaluation {
    pub fn error(&self) -> f64 {
        1.0 - self.accuracy
    }
}

pub const EVAL_CHUNK: usize = 250;

pub fn evaluate_images(
    model: &mut Model<f32>,
    images: &Tensor<f32>,
    labels: &[usize],
    classes: usize,
) -> Result<Evaluation> {
    if labels.is_empty() {
        return Err(Error::EmptySet);
    }
    let logits = model.logits(images, EVAL_CHUNK)?;
    let k = logits.shape()[1];
    let mut confusion = vec![vec![0; classes.max(k)]; classes];
    let mut correct = 0;
    for (row, &l) in logits.data().chunks(k).zip(labels) {
        let p = argmax(row);
        confusion[l][p] += 1;
        correct += (p == l) as usize;
    }
    Ok(Evaluation { accuracy: correct as f64 / labels.len() as f64, confusion })
}

/// Eval-mode accuracy and confusion counts.
pub fn evaluate(model: &mut Model<f32>, set: &LabeledImageSet) -> Result<Evaluation> {
    evaluate_images(model, &set.images, &set.labels, set.classes)
}

pub fn write_confusion_csv(eval: &Evaluation, mut w: impl Write) -> std::io::Result<()> {
    let k = eval.confusion.first().map_or(0, Vec::len);
    let header: Vec<String> = (0..k).map(|j| format!("pred_{j}")).collect();
    writeln!(w, "true,{}", header.join(","))?;
    for (i, row) in eval.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(usize::to_string).collect();
        writeln!(w, "{i},{}", cells.join(","))?;
    }
    Ok(())
}
