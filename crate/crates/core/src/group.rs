//! The roto-translation group `C_n ⋉ Z²` and its actions on images and
//! group feature maps.
//!
//! Images are `[..., H, W]` tensors with row index `y` growing downwards.
//! Rotations are counter-clockwise as displayed: one exact quarter turn sends
//! pixel `(y, x)` to `(W - 1 - x, y)`. Group feature maps carry an orientation
//! axis directly before the two spatial axes.

use std::f64::consts::PI;
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;
use std::sync::Arc;

use basisconv_tensor::{Scalar, SparseOperator, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const GAUSSIAN_SIGMA: f64 = 0.5;

/// Rotation by `r · 2π / order`, arithmetic modulo `order`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RotationIndex {
    r: usize,
    order: usize,
}

impl RotationIndex {
    pub fn new(r: i64, order: usize) -> Self {
        assert!(order > 0, "group order must be positive");
        Self { r: r.rem_euclid(order as i64) as usize, order }
    }

    pub fn identity(order: usize) -> Self {
        Self::new(0, order)
    }

    pub fn value(self) -> usize {
        self.r
    }

    pub fn order(self) -> usize {
        self.order
    }

    pub fn angle(self) -> f64 {
        self.r as f64 * 2.0 * PI / self.order as f64
    }

    /// Number of quarter turns if the angle is a multiple of 90°.
    pub fn quarter_turns(self) -> Option<usize> {
        (4 * self.r % self.order == 0).then_some(4 * self.r / self.order)
    }

    pub fn compose(self, other: Self) -> Result<Self> {
        self.check(other)?;
        Ok(Self::new((self.r + other.r) as i64, self.order))
    }

    pub fn inverse(self) -> Self {
        Self::new(-(self.r as i64), self.order)
    }

    /// `other⁻¹ · self`, which for a cyclic group is `self - other`.
    pub fn relative_to(self, other: Self) -> Result<Self> {
        self.check(other)?;
        Ok(Self::new(self.r as i64 - other.r as i64, self.order))
    }

    fn check(self, other: Self) -> Result<()> {
        if self.order != other.order {
            return Err(Error::MixedOrder(self.order, other.order));
        }
        Ok(())
    }
}

/// A rotation followed by a translation `z = (x, y)` in the plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupElement {
    pub rot: RotationIndex,
    pub z: [f64; 2],
}

pub type Mat3 = [[f64; 3]; 3];

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for (i, row) in c.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn rotate_vec(theta: f64, v: [f64; 2]) -> [f64; 2] {
    let (s, c) = theta.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() <= 1e-9 {
        r
    } else {
        v
    }
}

impl GroupElement {
    pub fn new(rot: RotationIndex, z: [f64; 2]) -> Self {
        Self { rot, z }
    }

    pub fn identity(order: usize) -> Self {
        Self::new(RotationIndex::identity(order), [0.0, 0.0])
    }

    /// `[[R, z], [0ᵀ, 1]]`.
    pub fn homogeneous(&self) -> Mat3 {
        let (s, c) = self.rot.angle().sin_cos();
        [[c, -s, self.z[0]], [s, c, self.z[1]], [0.0, 0.0, 1.0]]
    }

    /// `(R, z)(S, x) = (RS, Rx + z)`. Components within 1e-9 of an integer
    /// are snapped to it.
    pub fn compose(&self, other: &Self) -> Result<Self> {
        let rot = self.rot.compose(other.rot)?;
        let rz = rotate_vec(self.rot.angle(), other.z);
        Ok(Self::new(rot, [snap(rz[0] + self.z[0]), snap(rz[1] + self.z[1])]))
    }

    /// `(R⁻¹, -R⁻¹z)`.
    pub fn inverse(&self) -> Self {
        let rot = self.rot.inverse();
        let v = rotate_vec(rot.angle(), self.z);
        Self::new(rot, [snap(-v[0]), snap(-v[1])])
    }

    pub fn is_lattice(&self) -> bool {
        self.z.iter().all(|v| v.fract() == 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RotationMethod {
    Exact90,
    Gaussian,
    Bilinear,
}

impl RotationMethod {
    pub fn name(self) -> &'static str {
        match self {
            RotationMethod::Exact90 => "exact90",
            RotationMethod::Gaussian => "gaussian",
            RotationMethod::Bilinear => "bilinear",
        }
    }
}

impl fmt::Display for RotationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RotationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact90" => Ok(RotationMethod::Exact90),
            "gaussian" => Ok(RotationMethod::Gaussian),
            "bilinear" => Ok(RotationMethod::Bilinear),
            _ => Err(Error::Invalid(format!("unknown rotation method {s:?}"))),
        }
    }
}

fn spatial(op: &'static str, shape: &[usize]) -> Result<usize> {
    let nd = shape.len();
    if nd < 2 {
        return Err(Error::NotSquare { op, h: 0, w: 0 });
    }
    let (h, w) = (shape[nd - 2], shape[nd - 1]);
    if h != w {
        return Err(Error::NotSquare { op, h, w });
    }
    Ok(h)
}

/// Source pixel of every target pixel of an `n x n` plane under `q` quarter turns.
pub fn exact90_sources(n: usize, q: i64) -> Vec<usize> {
    let q = q.rem_euclid(4);
    let mut src = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let (y, x) = match q {
                0 => (i, j),
                1 => (j, n - 1 - i),
                2 => (n - 1 - i, n - 1 - j),
                _ => (n - 1 - j, i),
            };
            src.push(y * n + x);
        }
    }
    src
}

/// Pure index permutation of every trailing square plane.
pub fn rotate_exact90<T: Scalar>(x: &Tensor<T>, quarter_turns: i64) -> Result<Tensor<T>> {
    let n = spatial("rotate_exact90", x.shape())?;
    let src = exact90_sources(n, quarter_turns);
    let plane = n * n;
    let d = x.data();
    let mut out = Vec::with_capacity(d.len());
    for p in d.chunks(plane) {
        out.extend(src.iter().map(|&s| p[s]));
    }
    Ok(Tensor::new(x.shape().to_vec(), out)?)
}

pub fn exact90_operator(n: usize, quarter_turns: i64) -> SparseOperator {
    let rows = exact90_sources(n, quarter_turns).into_iter().map(|s| vec![(s, 1.0)]).collect();
    SparseOperator::from_rows((n, n), (n, n), rows)
}

/// Interpolated rotation by `theta` radians about the grid center.
///
/// Every target pixel samples the inversely rotated coordinate. Sources
/// outside `[-0.5, n - 0.5]²` give an empty row; neighbours outside the grid
/// are dropped and the remaining weights renormalized.
pub fn interpolated_operator(n: usize, theta: f64, method: RotationMethod) -> Result<SparseOperator> {
    let c = (n as f64 - 1.0) / 2.0;
    let (s, co) = theta.sin_cos();
    let lim = n as f64 - 0.5;
    let inside = |v: i64| v >= 0 && v < n as i64;
    let mut rows = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let (u, v) = (j as f64 - c, c - i as f64);
            let (su, sv) = (co * u + s * v, -s * u + co * v);
            let (sr, sc) = (c - sv, c + su);
            let mut row = Vec::new();
            if (-0.5..=lim).contains(&sr) && (-0.5..=lim).contains(&sc) {
                match method {
                    RotationMethod::Gaussian => {
                        let (r0, c0) = (sr.round() as i64, sc.round() as i64);
                        for y in r0 - 1..=r0 + 1 {
                            for x in c0 - 1..=c0 + 1 {
                                if inside(y) && inside(x) {
                                    let d2 = (y as f64 - sr).powi(2) + (x as f64 - sc).powi(2);
                                    let w = (-d2 / (2.0 * GAUSSIAN_SIGMA * GAUSSIAN_SIGMA)).exp();
                                    row.push((y as usize * n + x as usize, w));
                                }
                            }
                        }
                    }
                    RotationMethod::Bilinear => {
                        let (r0, c0) = (sr.floor(), sc.floor());
                        let (fr, fc) = (sr - r0, sc - c0);
                        let (r0, c0) = (r0 as i64, c0 as i64);
                        for (y, wy) in [(r0, 1.0 - fr), (r0 + 1, fr)] {
                            for (x, wx) in [(c0, 1.0 - fc), (c0 + 1, fc)] {
                                let w = wy * wx;
                                if inside(y) && inside(x) && w > 0.0 {
                                    row.push((y as usize * n + x as usize, w));
                                }
                            }
                        }
                    }
                    RotationMethod::Exact90 => {
                        return Err(Error::Invalid(format!("exact rotation cannot realize angle {theta}")))
                    }
                }
            }
            let total: f64 = row.iter().map(|e| e.1).sum();
            if total > 0.0 {
                row.iter_mut().for_each(|e| e.1 /= total);
            } else {
                row.clear();
            }
            rows.push(row);
        }
    }
    Ok(SparseOperator::from_rows((n, n), (n, n), rows))
}

/// Rotation by an arbitrary angle in degrees; multiples of 90° are exact.
pub fn rotation_operator_degrees(n: usize, degrees: f64, method: RotationMethod) -> Result<SparseOperator> {
    let turns = degrees / 90.0;
    if (turns - turns.round()).abs() < 1e-12 {
        return Ok(exact90_operator(n, turns.round() as i64));
    }
    interpolated_operator(n, degrees.to_radians(), method)
}

/// The `order` rotation maps of one method on `n x n` grids.
///
/// Interpolating methods short-circuit to the exact permutation at
/// multiples of 90°; `Exact90` defines only those.
#[derive(Clone, Debug)]
pub struct RotationOperator {
    method: RotationMethod,
    order: usize,
    size: usize,
    maps: Vec<Option<Arc<SparseOperator>>>,
}

impl RotationOperator {
    pub fn new(method: RotationMethod, order: usize, size: usize) -> Result<Self> {
        let mut maps = Vec::with_capacity(order);
        for r in 0..order {
            let idx = RotationIndex::new(r as i64, order);
            let m = match (idx.quarter_turns(), method) {
                (Some(q), _) => Some(exact90_operator(size, q as i64)),
                (None, RotationMethod::Exact90) => None,
                (None, _) => Some(interpolated_operator(size, idx.angle(), method)?),
            };
            maps.push(m.map(Arc::new));
        }
        Ok(Self { method, order, size, maps })
    }

    pub fn method(&self) -> RotationMethod {
        self.method
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn map(&self, r: RotationIndex) -> Result<&Arc<SparseOperator>> {
        if r.order() != self.order {
            return Err(Error::MixedOrder(self.order, r.order()));
        }
        self.maps[r.value()].as_ref().ok_or(Error::NotQuarterTurn { r: r.value(), order: self.order })
    }

    /// Rotates every trailing plane of `x`.
    pub fn apply<T: Scalar>(&self, x: &Tensor<T>, r: RotationIndex) -> Result<Tensor<T>> {
        let n = spatial("rotate", x.shape())?;
        if n != self.size {
            return Err(Error::Invalid(format!("operator built for {0}x{0} grids, got {n}x{n}", self.size)));
        }
        match r.quarter_turns() {
            Some(q) if r.order() == self.order => rotate_exact90(x, q as i64),
            _ => Ok(self.map(r)?.apply(x)?),
        }
    }

    /// Spatial rotation of every slice followed by a roll of the orientation axis.
    pub fn act_on_group_feature_map<T: Scalar>(&self, f: &Tensor<T>, r: RotationIndex) -> Result<Tensor<T>> {
        let rotated = self.apply(f, r)?;
        roll_orientations(&rotated, r)
    }
}

/// Rotation of every trailing square plane by `r`; exact at quarter turns.
pub fn rotate_interp<T: Scalar>(x: &Tensor<T>, r: RotationIndex, method: RotationMethod) -> Result<Tensor<T>> {
    let n = spatial("rotate_interp", x.shape())?;
    match r.quarter_turns() {
        Some(q) => rotate_exact90(x, q as i64),
        None if method == RotationMethod::Exact90 => Err(Error::NotQuarterTurn { r: r.value(), order: r.order() }),
        None => Ok(interpolated_operator(n, r.angle(), method)?.apply(x)?),
    }
}

/// Output slice `s` is input slice `(s - r) mod |G|` along the orientation axis.
pub fn roll_orientations<T: Scalar>(f: &Tensor<T>, r: RotationIndex) -> Result<Tensor<T>> {
    let shape = f.shape();
    let nd = shape.len();
    let g = r.order();
    if nd < 3 || shape[nd - 3] != g {
        return Err(Error::OrientationExtent {
            op: "roll_orientations",
            expected: g,
            got: if nd < 3 { 0 } else { shape[nd - 3] },
        });
    }
    let plane = shape[nd - 2] * shape[nd - 1];
    let d = f.data();
    let mut out = Vec::with_capacity(d.len());
    for block in d.chunks(g * plane) {
        for s in 0..g {
            let src = (s + g - r.value()) % g;
            out.extend_from_slice(&block[src * plane..(src + 1) * plane]);
        }
    }
    Ok(Tensor::new(shape.to_vec(), out)?)
}

/// Rotation plus roll, the induced action of `r` on `[..., |G|, H, W]` maps.
pub fn act_on_group_feature_map<T: Scalar>(
    f: &Tensor<T>,
    r: RotationIndex,
    method: RotationMethod,
) -> Result<Tensor<T>> {
    let rotated = rotate_interp(f, r, method)?;
    roll_orientations(&rotated, r)
}

/// `max |⟨L f, L ψ⟩ - ⟨f, ψ⟩| / |⟨f, ψ⟩|` over `trials` random nonnegative pairs.
pub fn unitarity_defect(op: &RotationOperator, r: RotationIndex, trials: usize, seed: u64) -> Result<f64> {
    if trials == 0 {
        return Err(Error::Invalid("unitarity_defect needs at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = op.size();
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let f = Tensor::<f64>::from_fn([n, n], |_| rng.gen::<f64>());
        let psi = Tensor::<f64>::from_fn([n, n], |_| rng.gen::<f64>());
        let base = f.dot(&psi)?;
        let moved = op.apply(&f, r)?.dot(&op.apply(&psi, r)?)?;
        worst = worst.max((moved - base).abs() / base.abs());
    }
    Ok(worst)
}

/// Writes `row col value` lines, one per stored entry.
pub fn write_triplets<W: Write>(op: &SparseOperator, mut w: W) -> io::Result<()> {
    for (r, c, v) in op.triplets() {
        writeln!(w, "{r} {c} {v:e}")?;
    }
    Ok(())
}

pub fn read_triplets<R: BufRead>(r: R) -> Result<Vec<(usize, usize, f64)>> {
    let bad = |line: &str| Error::Format { what: "triplet file".into(), reason: format!("malformed line {line:?}") };
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(|e| Error::io("<triplets>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(a), Some(b), Some(c), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(bad(&line));
        };
        out.push((
            a.parse().map_err(|_| bad(&line))?,
            b.parse().map_err(|_| bad(&line))?,
            c.parse().map_err(|_| bad(&line))?,
        ));
    }
    Ok(out)
}

/// The quarter-turn group p4 acting on periodic `n x n` signals.
///
/// Element `(q, t)` moves pixel `p` to `ρ^q(p) + t (mod n)`, where `ρ` is the
/// quarter turn of [`rotate_exact90`]. Signals on the group are indexed
/// `[q][ty][tx]`.
pub mod torus {
    use super::exact90_sources;

    #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
    pub struct P4 {
        pub q: usize,
        pub t: (usize, usize),
    }

    fn rho(n: usize, p: (usize, usize)) -> (usize, usize) {
        (n - 1 - p.1, p.0)
    }

    /// `(y, x) -> (-x, y)`, the linear part of `ρ`.
    fn linear(n: usize, q: usize, t: (usize, usize)) -> (usize, usize) {
        let mut t = t;
        for _ in 0..q % 4 {
            t = ((n - t.1) % n, t.0);
        }
        t
    }

    impl P4 {
        pub fn all(n: usize) -> impl Iterator<Item = P4> {
            (0..4).flat_map(move |q| (0..n * n).map(move |i| P4 { q, t: (i / n, i % n) }))
        }

        pub fn index(self, n: usize) -> usize {
            (self.q * n + self.t.0) * n + self.t.1
        }

        pub fn apply(self, n: usize, p: (usize, usize)) -> (usize, usize) {
            let mut p = p;
            for _ in 0..self.q {
                p = rho(n, p);
            }
            ((p.0 + self.t.0) % n, (p.1 + self.t.1) % n)
        }

        pub fn compose(self, n: usize, h: P4) -> P4 {
            let at = linear(n, self.q, h.t);
            P4 { q: (self.q + h.q) % 4, t: ((at.0 + self.t.0) % n, (at.1 + self.t.1) % n) }
        }

        pub fn inverse(self, n: usize) -> P4 {
            let q = (4 - self.q) % 4;
            let at = linear(n, q, self.t);
            P4 { q, t: ((n - at.0) % n, (n - at.1) % n) }
        }
    }

    /// `L_g[f](p) = f(g⁻¹ p)` on a periodic image.
    pub fn act_on_plane(n: usize, g: P4, f: &[f64]) -> Vec<f64> {
        let inv = g.inverse(n);
        (0..n * n)
            .map(|i| {
                let s = inv.apply(n, (i / n, i % n));
                f[s.0 * n + s.1]
            })
            .collect()
    }

    /// The same action realized as an exact grid rotation followed by a periodic shift.
    pub fn act_on_plane_by_rotation(n: usize, g: P4, f: &[f64]) -> Vec<f64> {
        let src = exact90_sources(n, g.q as i64);
        let rotated: Vec<f64> = src.iter().map(|&s| f[s]).collect();
        (0..n * n)
            .map(|i| {
                let (y, x) = (i / n, i % n);
                rotated[((y + n - g.t.0) % n) * n + (x + n - g.t.1) % n]
            })
            .collect()
    }

    /// `L_g[F](h) = F(g⁻¹ h)` on a signal over the group.
    pub fn act_on_group(n: usize, g: P4, f: &[f64]) -> Vec<f64> {
        let inv = g.inverse(n);
        P4::all(n).map(|h| f[inv.compose(n, h).index(n)]).collect()
    }

    /// `[f ⋆ ψ](g) = Σ_p f(p) ψ(g⁻¹ p)` for planar `f` and `ψ`.
    pub fn lift(n: usize, f: &[f64], psi: &[f64]) -> Vec<f64> {
        P4::all(n)
            .map(|g| {
                let inv = g.inverse(n);
                (0..n * n)
                    .map(|i| {
                        let s = inv.apply(n, (i / n, i % n));
                        f[i] * psi[s.0 * n + s.1]
                    })
                    .sum()
            })
            .collect()
    }

    /// `[F ⋆ Ψ](g) = Σ_h F(h) Ψ(g⁻¹ h)` for signals on the group.
    pub fn group_correlate(n: usize, f: &[f64], psi: &[f64]) -> Vec<f64> {
        let elems: Vec<P4> = P4::all(n).collect();
        elems
            .iter()
            .map(|g| {
                let inv = g.inverse(n);
                elems.iter().map(|h| f[h.index(n)] * psi[inv.compose(n, *h).index(n)]).sum()
            })
            .collect()
    }
}
