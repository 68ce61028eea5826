//! MNIST (IDX) and CIFAR-10 (binary batch) loaders, caching and subsetting.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use basisconv_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CACHE_ENV: &str = "BASISCONV_CACHE_DIR";
const IDX_IMAGES: u32 = 0x0803;
const IDX_LABELS: u32 = 0x0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const CACHE_MAGIC: &[u8; 8] = b"BCDSET1\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Images `[M, C, H, W]` scaled to `[0, 1]` with labels in `[0, classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: String,
}

impl LabeledImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Items at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::EmptySet);
        }
        let per: usize = self.image_shape().iter().product();
        let mut data = Vec::with_capacity(idx.len() * per);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Invalid(format!("index {i} out of range for {} items", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        Ok(Self { images: Tensor::new(shape, data)?, labels, classes: self.classes, split: self.split.clone() })
    }

    /// Single-channel luma version (ITU-R 601 weights for three channels).
    pub fn luma(&self) -> Tensor<f64> {
        let s = self.images.shape();
        let (m, c, hw) = (s[0], s[1], s[2] * s[3]);
        let w: &[f64] = if c == 3 { &[0.299, 0.587, 0.114] } else { &[1.0] };
        let d = self.images.data();
        let mut out = Vec::with_capacity(m * hw);
        for i in 0..m {
            for p in 0..hw {
                let v: f64 = (0..c)
                    .map(|ch| w.get(ch).copied().unwrap_or(1.0 / c as f64) * d[(i * c + ch) * hw + p] as f64)
                    .sum();
                out.push(v);
            }
        }
        Tensor::new([m, 1, s[2], s[3]], out).expect("consistent shape")
    }

    /// Per-channel mean and population standard deviation.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let s = self.images.shape();
        let (m, c, hw) = (s[0], s[1], s[2] * s[3]);
        let d = self.images.data();
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for i in 0..m {
            for ch in 0..c {
                for &v in &d[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                    mean[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let cnt = (m * hw) as f64;
        let std = mean.iter().zip(&sq).map(|(s, q)| (q / cnt - (s / cnt).powi(2)).max(0.0).sqrt()).collect();
        (mean.iter().map(|s| s / cnt).collect(), std)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(b: &[u8], at: usize, what: &str) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_be_bytes(s.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Truncated { what: what.into() })
}

/// `(count, rows, cols, pixels)` of an IDX3 image file.
pub fn parse_idx_images(b: &[u8], what: &str) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(b, 0, what)?;
    if magic != IDX_IMAGES {
        return Err(Error::BadMagic { what: what.into(), found: magic as u64 });
    }
    let (n, r, c) = (be_u32(b, 4, what)? as usize, be_u32(b, 8, what)? as usize, be_u32(b, 12, what)? as usize);
    let body = &b[16..];
    let need = n * r * c;
    if body.len() < need {
        return Err(Error::Truncated { what: what.into() });
    }
    if body.len() > need {
        return Err(Error::Format { what: what.into(), reason: format!("{} trailing bytes", body.len() - need) });
    }
    Ok((n, r, c, body.to_vec()))
}

pub fn parse_idx_labels(b: &[u8], what: &str) -> Result<Vec<u8>> {
    let magic = be_u32(b, 0, what)?;
    if magic != IDX_LABELS {
        return Err(Error::BadMagic { what: what.into(), found: magic as u64 });
    }
    let n = be_u32(b, 4, what)? as usize;
    let body = &b[8..];
    if body.len() < n {
        return Err(Error::Truncated { what: what.into() });
    }
    if body.len() > n {
        return Err(Error::Format { what: what.into(), reason: format!("{} trailing bytes", body.len() - n) });
    }
    Ok(body.to_vec())
}

pub fn write_idx_images(path: &Path, count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), count * rows * cols);
    let mut b = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES, count as u32, rows as u32, cols as u32] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend_from_slice(pixels);
    fs::write(path, b).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut b = Vec::with_capacity(8 + labels.len());
    b.extend_from_slice(&IDX_LABELS.to_be_bytes());
    b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    fs::write(path, b).map_err(|e| Error::io(path, e))
}

/// One CIFAR-10 record per `(label, 3072 channel-major pixels)`.
pub fn write_cifar_batch(path: &Path, records: &[(u8, Vec<u8>)]) -> Result<()> {
    let mut b = Vec::with_capacity(records.len() * CIFAR_RECORD);
    for (l, px) in records {
        assert_eq!(px.len(), CIFAR_RECORD - 1);
        b.push(*l);
        b.extend_from_slice(px);
    }
    fs::write(path, b).map_err(|e| Error::io(path, e))
}

pub fn mnist_files(split: Split) -> [&'static str; 2] {
    match split {
        Split::Train => ["train-images-idx3-ubyte", "train-labels-idx1-ubyte"],
        Split::Test => ["t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"],
    }
}

pub fn cifar_files(split: Split) -> Vec<String> {
    match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    }
}

struct Raw {
    shape: [usize; 3],
    labels: Vec<u8>,
    pixels: Vec<u8>,
}

fn finish(raw: Raw, classes: usize, split: Split) -> Result<LabeledImageSet> {
    if raw.labels.is_empty() {
        return Err(Error::EmptySet);
    }
    if let Some(&l) = raw.labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Format { what: "labels".into(), reason: format!("label {l} outside [0, {classes})") });
    }
    let [c, h, w] = raw.shape;
    let images = Tensor::new([raw.labels.len(), c, h, w], raw.pixels.iter().map(|&p| p as f32 / 255.0).collect())?;
    Ok(LabeledImageSet {
        images,
        labels: raw.labels.iter().map(|&l| l as usize).collect(),
        classes,
        split: split.name().into(),
    })
}

fn cache_path(dir: &Path, files: &[Vec<u8>]) -> PathBuf {
    let mut h = Sha256::new();
    for f in files {
        h.update((f.len() as u64).to_le_bytes());
        h.update(f);
    }
    dir.join(format!("{}.bcds", hex::encode(&h.finalize()[..16])))
}

fn read_cache(path: &Path) -> Option<Raw> {
    let b = fs::read(path).ok()?;
    if b.len() < 8 + 20 || &b[..8] != CACHE_MAGIC {
        return None;
    }
    let u = |i: usize| u32::from_le_bytes(b[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (n, c, h, w) = (u(0), u(1), u(2), u(3));
    let body = &b[24..];
    if body.len() != n + n * c * h * w {
        return None;
    }
    Some(Raw { shape: [c, h, w], labels: body[..n].to_vec(), pixels: body[n..].to_vec() })
}

fn write_cache(path: &Path, raw: &Raw) -> Result<()> {
    let mut b = Vec::with_capacity(24 + raw.labels.len() + raw.pixels.len());
    b.extend_from_slice(CACHE_MAGIC);
    for v in [raw.labels.len(), raw.shape[0], raw.shape[1], raw.shape[2]] {
        b.extend_from_slice(&(v as u32).to_le_bytes());
    }
    b.extend_from_slice(&raw.labels);
    b.extend_from_slice(&raw.pixels);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, b).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Cache directory from the explicit argument, else the environment.
pub fn resolve_cache_dir(explicit: Option<&Path>) -> Option<PathBuf> {
    explicit.map(Path::to_path_buf).or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from))
}

fn load_with_cache(
    raws: Vec<Vec<u8>>,
    cache: Option<&Path>,
    parse: impl FnOnce(&[Vec<u8>]) -> Result<Raw>,
) -> Result<Raw> {
    let Some(dir) = cache else {
        return parse(&raws);
    };
    let path = cache_path(dir, &raws);
    if let Some(raw) = read_cache(&path) {
        return Ok(raw);
    }
    let raw = parse(&raws)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_cache(&path, &raw)?;
    Ok(raw)
}

pub fn load_mnist(dir: &Path, split: Split, cache: Option<&Path>) -> Result<LabeledImageSet> {
    let names = mnist_files(split);
    let raws = names.iter().map(|n| read(&dir.join(n))).collect::<Result<Vec<_>>>()?;
    let raw = load_with_cache(raws, cache, |raws| {
        let (n, r, c, pixels) = parse_idx_images(&raws[0], names[0])?;
        let labels = parse_idx_labels(&raws[1], names[1])?;
        if labels.len() != n {
            return Err(Error::Format {
                what: names[1].into(),
                reason: format!("{} labels for {n} images", labels.len()),
            });
        }
        Ok(Raw { shape: [1, r, c], labels, pixels })
    })?;
    finish(raw, 10, split)
}

pub fn load_cifar10(dir: &Path, split: Split, cache: Option<&Path>) -> Result<LabeledImageSet> {
    let names = cifar_files(split);
    let raws = names.iter().map(|n| read(&dir.join(n))).collect::<Result<Vec<_>>>()?;
    let raw = load_with_cache(raws, cache, |raws| {
        let mut labels = Vec::new();
        let mut pixels = Vec::new();
        for (name, b) in names.iter().zip(raws) {
            if b.len() % CIFAR_RECORD != 0 {
                return Err(Error::Truncated { what: name.clone() });
            }
            for rec in b.chunks_exact(CIFAR_RECORD) {
                labels.push(rec[0]);
                pixels.extend_from_slice(&rec[1..]);
            }
        }
        Ok(Raw { shape: [3, 32, 32], labels, pixels })
    })?;
    finish(raw, 10, split)
}

/// Indices of a class-stratified sample of `n` items, ascending.
///
/// Classes receive `n / classes` items each and the remainder goes to a
/// seeded random choice of classes, so per-class counts differ by at most one
/// whenever every class has enough items. `n == len` keeps everything.
pub fn stratified_indices(labels: &[usize], n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > labels.len() {
        return Err(Error::SubsetTooLarge { requested: n, available: labels.len() });
    }
    if n == labels.len() {
        return Ok((0..n).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    for v in by_class.values_mut() {
        v.shuffle(&mut rng);
    }
    let mut quota: BTreeMap<usize, usize> = by_class.keys().map(|&c| (c, 0)).collect();
    let mut remaining = n;
    while remaining > 0 {
        let mut open: Vec<usize> = by_class.iter().filter(|(c, v)| quota[c] < v.len()).map(|(&c, _)| c).collect();
        let share = remaining / open.len();
        if share == 0 {
            open.shuffle(&mut rng);
            for c in open.into_iter().take(remaining) {
                *quota.get_mut(&c).expect("class") += 1;
            }
            break;
        }
        for c in open {
            let room = by_class[&c].len() - quota[&c];
            let add = share.min(room);
            *quota.get_mut(&c).expect("class") += add;
            remaining -= add;
        }
    }
    let mut out: Vec<usize> = by_class.iter().flat_map(|(c, v)| v[..quota[c]].iter().copied()).collect();
    out.sort_unstable();
    Ok(out)
}

pub fn subset(set: &LabeledImageSet, n: usize, seed: u64) -> Result<LabeledImageSet> {
    set.select(&stratified_indices(&set.labels, n, seed)?)
}

/// A stratified sample of `n` items and the remaining items, both ascending.
pub fn split_off(set: &LabeledImageSet, n: usize, seed: u64) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let picked = stratified_indices(&set.labels, n, seed)?;
    let mut taken = vec![false; set.len()];
    for &i in &picked {
        taken[i] = true;
    }
    let rest: Vec<usize> = (0..set.len()).filter(|&i| !taken[i]).collect();
    Ok((set.select(&picked)?, set.select(&rest)?))
}
