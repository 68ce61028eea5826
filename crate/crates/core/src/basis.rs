//! Filter bases `e[r][i]`: `|G|` orientations of `N` elements of `k x k` taps.
//!
//! A filter is a coefficient vector `ψ̂` expanded in the basis of one
//! orientation, `ψ_r = Σ_i ψ̂_i e_r^i`. The same `ψ̂` is used at every
//! orientation, so rotating a filter means switching basis.

use std::fmt;
use std::fs;
use std::path::Path;

use basisconv_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::group::{exact90_sources, rotate_interp, RotationIndex, RotationMethod};

const MAGIC: &[u8; 8] = b"BCBASIS\0";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BasisKind {
    Full,
    Partial,
    Overcomplete,
    Random,
    Interpolated(RotationMethod),
}

impl BasisKind {
    fn tag(self) -> u8 {
        match self {
            BasisKind::Full => 0,
            BasisKind::Partial => 1,
            BasisKind::Overcomplete => 2,
            BasisKind::Random => 3,
            BasisKind::Interpolated(RotationMethod::Gaussian) => 4,
            BasisKind::Interpolated(RotationMethod::Bilinear) => 5,
            BasisKind::Interpolated(RotationMethod::Exact90) => 6,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => BasisKind::Full,
            1 => BasisKind::Partial,
            2 => BasisKind::Overcomplete,
            3 => BasisKind::Random,
            4 => BasisKind::Interpolated(RotationMethod::Gaussian),
            5 => BasisKind::Interpolated(RotationMethod::Bilinear),
            6 => BasisKind::Interpolated(RotationMethod::Exact90),
            _ => return None,
        })
    }
}

impl fmt::Display for BasisKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BasisKind::Full => f.write_str("full"),
            BasisKind::Partial => f.write_str("partial"),
            BasisKind::Overcomplete => f.write_str("overcomplete"),
            BasisKind::Random => f.write_str("random"),
            BasisKind::Interpolated(m) => write!(f, "{m}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Basis {
    elements: Tensor<f64>,
    kind: BasisKind,
    config_fingerprint: String,
}

impl Basis {
    /// `elements` is `[|G|, N, k, k]` with `k` odd.
    pub fn new(elements: Tensor<f64>, kind: BasisKind) -> Result<Self> {
        let s = elements.shape();
        if s.len() != 4 || s[2] != s[3] || s[2] % 2 == 0 {
            return Err(Error::Invalid(format!("basis elements must be [|G|, N, k, k] with odd k, got {s:?}")));
        }
        let basis = Self { elements, kind, config_fingerprint: String::new() };
        if kind == BasisKind::Partial {
            basis.check_partial()?;
        }
        Ok(basis)
    }

    /// One element equal to 1 at every orientation; the spatial basis of
    /// 1×1 group convolutions, where rotation acts as a pure roll.
    pub fn unit(order: usize) -> Self {
        Self::new(Tensor::full([order, 1, 1, 1], 1.0), BasisKind::Full).expect("valid unit basis")
    }

    /// One centered Dirac element at every orientation.
    pub fn dirac(order: usize, k: usize) -> Result<Self> {
        let mut e = Tensor::zeros([order, 1, k, k]);
        for r in 0..order {
            e.set(&[r, 0, k / 2, k / 2], 1.0);
        }
        Self::new(e, BasisKind::Full)
    }

    pub fn with_config_fingerprint(mut self, fp: impl Into<String>) -> Self {
        self.config_fingerprint = fp.into();
        self
    }

    pub fn order(&self) -> usize {
        self.elements.shape()[0]
    }

    pub fn n(&self) -> usize {
        self.elements.shape()[1]
    }

    pub fn k(&self) -> usize {
        self.elements.shape()[2]
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn elements(&self) -> &Tensor<f64> {
        &self.elements
    }

    pub fn config_fingerprint(&self) -> &str {
        &self.config_fingerprint
    }

    /// Flattened `E_r`, `N x k²` row-major.
    pub fn slot(&self, r: usize) -> &[f64] {
        let len = self.n() * self.k() * self.k();
        &self.elements.data()[r * len..(r + 1) * len]
    }

    /// `Σ_i ψ̂_i e_r^i` as a `[k, k]` filter.
    pub fn synthesize(&self, coeffs: &[f64], r: RotationIndex) -> Result<Tensor<f64>> {
        if r.order() != self.order() {
            return Err(Error::MixedOrder(self.order(), r.order()));
        }
        if coeffs.len() != self.n() {
            return Err(Error::Invalid(format!(
                "coefficient vector of length {} for a basis of {} elements",
                coeffs.len(),
                self.n()
            )));
        }
        let kk = self.k() * self.k();
        let slot = self.slot(r.value());
        let mut out = vec![0.0; kk];
        for (c, e) in coeffs.iter().zip(slot.chunks(kk)) {
            for (o, v) in out.iter_mut().zip(e) {
                *o += c * v;
            }
        }
        Ok(Tensor::new([self.k(), self.k()], out)?)
    }

    /// `‖E_r E_rᵀ - I_N‖₁`.
    pub fn orthogonality_defect(&self, r: RotationIndex) -> f64 {
        orthogonality_defect(self.slot(r.value()), self.n())
    }

    /// Slot `r + (|G|/4) q` must equal slot `r` turned by `q` quarter turns, bitwise.
    pub fn check_partial(&self) -> Result<()> {
        let src = partial_sources(self.order(), self.n(), self.k())?;
        let d = self.elements.data();
        let span = self.n() * self.k() * self.k();
        for (i, &s) in src.iter().enumerate() {
            if d[i].to_bits() != d[s].to_bits() {
                return Err(Error::PartialInvariant { slot: i / span, source_slot: s / span });
            }
        }
        Ok(())
    }

    /// First `(orientation, element)` whose taps are all zero.
    pub fn find_zero_element(&self) -> Option<(usize, usize)> {
        let kk = self.k() * self.k();
        self.elements.data().chunks(kk).position(|e| e.iter().all(|&v| v == 0.0)).map(|i| (i / self.n(), i % self.n()))
    }

    /// Content hash over kind, shape and element bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update([self.kind.tag()]);
        for d in self.elements.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in self.elements.data() {
            h.update(v.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.elements.numel() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for d in [self.order(), self.n(), self.k()] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(self.kind.tag());
        out.extend_from_slice(&(self.config_fingerprint.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_fingerprint.as_bytes());
        for v in self.elements.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let what = || "basis file".to_string();
        let mut rd = Reader::new(bytes, what());
        let magic = rd.take(8)?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                what: what(),
                found: u64::from_le_bytes(magic.try_into().expect("8 bytes")),
            });
        }
        let version = rd.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch { what: what(), found: version, expected: VERSION });
        }
        let (order, n, k) = (rd.u32()? as usize, rd.u32()? as usize, rd.u32()? as usize);
        let tag = rd.take(1)?[0];
        let fp_len = rd.u32()? as usize;
        let fp = rd.take(fp_len)?.to_vec();
        let count = order
            .checked_mul(n)
            .and_then(|v| v.checked_mul(k * k))
            .ok_or_else(|| Error::Format { what: what(), reason: "header dimensions overflow".into() })?;
        let raw = rd.take(count * 8)?;
        let body_len = rd.pos;
        let sum = rd.take(32)?;
        if rd.pos != bytes.len() {
            return Err(Error::Format { what: what(), reason: "trailing bytes".into() });
        }
        if Sha256::digest(&bytes[..body_len]).as_slice() != sum {
            return Err(Error::ChecksumMismatch { what: what() });
        }
        let kind = BasisKind::from_tag(tag)
            .ok_or_else(|| Error::Format { what: what(), reason: format!("unknown basis kind tag {tag}") })?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let fp = String::from_utf8(fp)
            .map_err(|_| Error::Format { what: what(), reason: "config fingerprint is not UTF-8".into() })?;
        Ok(Self::new(Tensor::new([order, n, k, k], data)?, kind)?.with_config_fingerprint(fp))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Portable graymap with one row per orientation and one column per
    /// element, each tap drawn as a `zoom x zoom` block; zero is mid-gray.
    pub fn render_pgm(&self, zoom: usize) -> Vec<u8> {
        let (g, n, k) = (self.order(), self.n(), self.k());
        let cell = k * zoom + 1;
        let (w, h) = (n * cell + 1, g * cell + 1);
        let scale = self.elements.max_abs().max(1e-12);
        let mut px = vec![0u8; w * h];
        for r in 0..g {
            for i in 0..n {
                for u in 0..k {
                    for v in 0..k {
                        let val = self.elements.at(&[r, i, u, v]) / scale;
                        let b = (127.5 + 127.5 * val).round().clamp(0.0, 255.0) as u8;
                        for dy in 0..zoom {
                            for dx in 0..zoom {
                                let y = r * cell + 1 + u * zoom + dy;
                                let x = i * cell + 1 + v * zoom + dx;
                                px[y * w + x] = b;
                            }
                        }
                    }
                }
            }
        }
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        out.extend_from_slice(&px);
        out
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: String,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: String) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Truncated { what: self.what.clone() });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// `‖E Eᵀ - I_N‖₁` of a row-major `N x k²` matrix.
pub fn orthogonality_defect(e: &[f64], n: usize) -> f64 {
    let kk = e.len() / n;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = e[i * kk..(i + 1) * kk].iter().zip(&e[j * kk..(j + 1) * kk]).map(|(a, b)| a * b).sum();
            total += (dot - if i == j { 1.0 } else { 0.0 }).abs();
        }
    }
    total
}

/// Gather map from a partial basis `[|G|, N, k, k]` to its learned range
/// `[|G|/4, N, k, k]`: slot `r + (|G|/4) q` reads slot `r` turned `q` times.
pub fn partial_sources(order: usize, n: usize, k: usize) -> Result<Vec<usize>> {
    if order % 4 != 0 || order == 0 {
        return Err(Error::OrderNotQuarterDivisible(order));
    }
    let learned = order / 4;
    let kk = k * k;
    let turns: Vec<Vec<usize>> = (0..4).map(|q| exact90_sources(k, q)).collect();
    let mut src = Vec::with_capacity(order * n * kk);
    for slot in 0..order {
        let (r, q) = (slot % learned, slot / learned);
        for i in 0..n {
            src.extend(turns[q].iter().map(|&s| (r * n + i) * kk + s));
        }
    }
    Ok(src)
}

/// Fills every quarter-turn slot from the learned range `[|G|/4, N, k, k]`.
pub fn populate_partial(learned: &Tensor<f64>, order: usize) -> Result<Basis> {
    let s = learned.shape();
    if order % 4 != 0 || order == 0 {
        return Err(Error::OrderNotQuarterDivisible(order));
    }
    if s.len() != 4 || s[0] != order / 4 {
        return Err(Error::Invalid(format!("learned range must be [{}, N, k, k], got {s:?}", order / 4)));
    }
    let src = partial_sources(order, s[1], s[2])?;
    let d = learned.data();
    let e = Tensor::new([order, s[1], s[2], s[3]], src.iter().map(|&i| d[i]).collect())?;
    Basis::new(e, BasisKind::Partial)
}

/// Polar factor of a row-major `rows x cols` matrix: the nearest matrix whose
/// singular values are all one, by scaled Newton-Schulz iteration.
pub fn polar_factor(e: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let fro = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    if fro == 0.0 {
        return e.to_vec();
    }
    let mut x: Vec<f64> = e.iter().map(|v| v / fro).collect();
    for _ in 0..200 {
        let mut gram = vec![0.0; rows * rows];
        for i in 0..rows {
            for j in 0..rows {
                gram[i * rows + j] = (0..cols).map(|t| x[i * cols + t] * x[j * cols + t]).sum();
            }
        }
        let mut next = vec![0.0; rows * cols];
        for i in 0..rows {
            for t in 0..cols {
                let gx: f64 = (0..rows).map(|j| gram[i * rows + j] * x[j * cols + t]).sum();
                next[i * cols + t] = 1.5 * x[i * cols + t] - 0.5 * gx;
            }
        }
        let delta = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        x = next;
        if delta < 1e-15 {
            break;
        }
    }
    x
}

/// `slots` independent draws of `N x k x k` elements, uniform in `±√(1/k²)`,
/// each projected onto the nearest matrix with orthonormal rows (or
/// orthonormal columns when `N > k²`).
pub fn init_elements(slots: usize, n: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let kk = k * k;
    let a = (1.0 / kk as f64).sqrt();
    let mut data = Vec::with_capacity(slots * n * kk);
    for _ in 0..slots {
        let e: Vec<f64> = (0..n * kk).map(|_| rng.gen_range(-a..a)).collect();
        data.extend(polar_factor(&e, n, kk));
    }
    Tensor::new([slots, n, k, k], data).expect("consistent shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    Random,
    Interpolated(RotationMethod),
}

/// Handcrafted comparison bases.
///
/// `Random` draws every orientation independently. `Interpolated` rotates a
/// given zero-orientation slot `[N, k, k]` to every orientation.
pub fn make_baseline_basis(
    kind: BaselineKind,
    order: usize,
    n: usize,
    k: usize,
    zero_orientation: Option<&Tensor<f64>>,
    seed: u64,
) -> Result<Basis> {
    match kind {
        BaselineKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Basis::new(init_elements(order, n, k, &mut rng), BasisKind::Random)
        }
        BaselineKind::Interpolated(method) => {
            let e0 = zero_orientation
                .ok_or_else(|| Error::Invalid("interpolated baseline needs a zero-orientation basis".into()))?;
            if e0.shape() != [n, k, k] {
                return Err(Error::Invalid(format!(
                    "zero-orientation basis must be [{n}, {k}, {k}], got {:?}",
                    e0.shape()
                )));
            }
            let mut data = Vec::with_capacity(order * e0.numel());
            for r in 0..order {
                let rotated = rotate_interp(e0, RotationIndex::new(r as i64, order), method)?;
                data.extend_from_slice(rotated.data());
            }
            Basis::new(Tensor::new([order, n, k, k], data)?, BasisKind::Interpolated(method))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicated_unit_vector_defect() {
        let e = [1.0, 0.0, 1.0, 0.0];
        assert_eq!(orthogonality_defect(&e, 2), 2.0);
        assert_eq!(orthogonality_defect(&[0.0; 18], 2), 2.0);
    }

    #[test]
    fn corner_goes_to_bottom_left() {
        let mut learned = Tensor::zeros([2, 1, 3, 3]);
        learned.set(&[0, 0, 0, 0], 1.0);
        let b = populate_partial(&learned, 8).unwrap();
        let e2 = &b.slot(2);
        assert_eq!(e2[6], 1.0);
        assert_eq!(e2.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn order_must_divide_by_four() {
        let learned = Tensor::zeros([1, 1, 3, 3]);
        assert!(matches!(populate_partial(&learned, 6), Err(Error::OrderNotQuarterDivisible(6))));
    }
}
