//! Shared numerical primitives: a splittable PRNG, a dense matrix, special
//! functions, Gamma sampling and power-iteration spectral norm estimates.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Deterministic random stream backed by ChaCha8.
///
/// A stream is identified by its 64-bit seed. [`Rng::substream`] derives an
/// independent child stream from the parent's seed and a text label; the child
/// does not depend on how much of the parent has been consumed.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream labelled `label`. Same (seed, label) always yields the same stream.
    pub fn substream(&self, label: &str) -> Rng {
        Rng::new(splitmix64(self.seed ^ splitmix64(fnv1a(label.as_bytes()))))
    }

    /// Child stream labelled by an integer, for indexed trials and epochs.
    pub fn substream_indexed(&self, label: &str, index: u64) -> Rng {
        Rng::new(splitmix64(
            self.seed ^ splitmix64(fnv1a(label.as_bytes()) ^ splitmix64(index.wrapping_add(1))),
        ))
    }

    /// Uniform draw on the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        loop {
            // 53 random mantissa bits
            let u = (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        // rejection keeps the draw unbiased
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let x = self.inner.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }

    /// Draw an index from a categorical distribution with the given weights.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut target = self.uniform() * total;
        for (i, w) in weights.iter().enumerate() {
            if target < *w {
                return i;
            }
            target -= w;
        }
        // rounding left a sliver past the last bucket
        weights.iter().rposition(|w| *w > 0.0).unwrap_or(weights.len() - 1)
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Dense row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return domain("matrix entries must be finite");
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `W x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `Wᵀ y`
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, yr) in y.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|x| *x == 0.0)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the Gamma function for positive arguments (Lanczos, g = 7).
pub fn log_gamma(x: f64) -> Result<f64> {
    if !x.is_finite() || x <= 0.0 {
        return domain(format!("log_gamma requires finite x > 0, got {x}"));
    }
    Ok(ln_gamma_pos(x))
}

fn ln_gamma_pos(x: f64) -> f64 {
    if x < 0.5 {
        // reflection: Γ(x)Γ(1-x) = π / sin(πx)
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma_pos(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS_COEF[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// One draw from Gamma(shape, 1) by the Marsaglia-Tsang squeeze method.
///
/// Shapes below one are boosted: `G(shape) = G(shape + 1) · U^(1/shape)`.
pub fn sample_gamma(shape: f64, rng: &mut Rng) -> Result<f64> {
    if !shape.is_finite() || shape <= 0.0 {
        return domain(format!("gamma shape must be finite and > 0, got {shape}"));
    }
    Ok(gamma_unchecked(shape, rng))
}

pub(crate) fn gamma_unchecked(shape: f64, rng: &mut Rng) -> f64 {
    if shape < 1.0 {
        let boost = rng.uniform().powf(1.0 / shape);
        return marsaglia_tsang(shape + 1.0, rng) * boost;
    }
    marsaglia_tsang(shape, rng)
}

fn marsaglia_tsang(shape: f64, rng: &mut Rng) -> f64 {
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let (x, v) = loop {
            let x = rng.normal();
            let v = 1.0 + c * x;
            if v > 0.0 {
                break (x, v * v * v);
            }
        };
        let u = rng.uniform();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return domain("softmax of an empty vector");
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return domain("softmax logits must be finite");
    }
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= total);
    out
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|x| **x > 0.0)
        .map(|x| x * x.ln())
        .sum::<f64>()
}

/// Result of a power-iteration estimate of the largest singular value.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralEstimate {
    pub sigma: f64,
    /// Left singular vector estimate (length = rows).
    pub u: Vec<f64>,
    /// Right singular vector estimate (length = cols).
    pub v: Vec<f64>,
    /// Set when the matrix is zero and no direction exists.
    pub degenerate: bool,
}

/// Largest singular value by power iteration from a random start.
pub fn spectral_sigma(w: &Matrix, iters: usize, rng: &mut Rng) -> Result<SpectralEstimate> {
    let u0: Vec<f64> = (0..w.rows()).map(|_| rng.normal()).collect();
    spectral_sigma_warm(w, &u0, iters)
}

/// Power iteration warm-started from a previous left vector `u`.
pub fn spectral_sigma_warm(w: &Matrix, u: &[f64], iters: usize) -> Result<SpectralEstimate> {
    if iters == 0 {
        return domain("power iteration needs at least one iteration");
    }
    if u.len() != w.rows() {
        return Err(Error::Dimension(format!(
            "warm-start vector has length {}, matrix has {} rows",
            u.len(),
            w.rows()
        )));
    }
    let degenerate = SpectralEstimate {
        sigma: 0.0,
        u: u.to_vec(),
        v: vec![0.0; w.cols()],
        degenerate: true,
    };
    if w.is_zero() {
        return Ok(degenerate);
    }
    let mut u = u.to_vec();
    if norm2(&u) == 0.0 {
        u = vec![1.0; w.rows()];
    }
    let mut v = vec![0.0; w.cols()];
    for _ in 0..iters {
        v = w.matvec_t(&u);
        if !normalize(&mut v) {
            // start vector orthogonal to the row space; restart from a fixed direction
            v = vec![1.0; w.cols()];
            normalize(&mut v);
        }
        u = w.matvec(&v);
        if !normalize(&mut u) {
            return Ok(degenerate);
        }
    }
    let sigma = dot(&u, &w.matvec(&v));
    Ok(SpectralEstimate {
        sigma,
        u,
        v,
        degenerate: false,
    })
}

/// Power sums of a scalar stream, enough for the mean, the variance and
/// the standard errors of both.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MomentSums {
    n: u64,
    s1: f64,
    s2: f64,
    s3: f64,
    s4: f64,
}

impl MomentSums {
    pub fn push(&mut self, x: f64) {
        let x2 = x * x;
        self.n += 1;
        self.s1 += x;
        self.s2 += x2;
        self.s3 += x2 * x;
        self.s4 += x2 * x2;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.s1 / self.n as f64
    }

    /// Population variance (divides by n).
    pub fn var(&self) -> f64 {
        let n = self.n as f64;
        let m = self.mean();
        (self.s2 / n - m * m).max(0.0)
    }

    fn central4(&self) -> f64 {
        let n = self.n as f64;
        let m = self.mean();
        let m2 = m * m;
        self.s4 / n - 4.0 * m * self.s3 / n + 6.0 * m2 * self.s2 / n - 3.0 * m2 * m2
    }

    pub fn se_mean(&self) -> f64 {
        (self.var() / self.n as f64).sqrt()
    }

    /// Large-sample standard error of [`var`](Self::var): `sqrt((mu4 − sigma^4)/n)`.
    pub fn se_var(&self) -> f64 {
        let v = self.var();
        ((self.central4() - v * v).max(0.0) / self.n as f64).sqrt()
    }
}

fn normalize(x: &mut [f64]) -> bool {
    let n = norm2(x);
    if n == 0.0 || !n.is_finite() {
        return false;
    }
    x.iter_mut().for_each(|v| *v /= n);
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moment_sums_small_sample() {
        let mut m = MomentSums::default();
        for x in [1.0, 2.0, 3.0, 4.0] {
            m.push(x);
        }
        assert_eq!(m.count(), 4);
        assert!((m.mean() - 2.5).abs() < 1e-15);
        assert!((m.var() - 1.25).abs() < 1e-15);
        // central fourth moment of {1,2,3,4} is 2.5625
        assert!((m.se_var() - ((2.5625 - 1.5625) / 4.0f64).sqrt()).abs() < 1e-14);
    }

    fn ln_factorial(n: u32) -> f64 {
        (1..=n).map(|i| f64::from(i).ln()).sum()
    }

    #[test]
    fn log_gamma_fixed_points() {
        assert!(log_gamma(1.0).unwrap().abs() < 1e-14);
        assert!(log_gamma(2.0).unwrap().abs() < 1e-14);
        let ln_sqrt_pi = 0.5 * std::f64::consts::PI.ln();
        assert!((log_gamma(0.5).unwrap() - ln_sqrt_pi).abs() < 1e-14);
        assert!((log_gamma(0.5).unwrap() - 0.572_364_942_9).abs() < 1e-10);
    }

    #[test]
    fn log_gamma_matches_factorials_and_half_integers() {
        for n in 3..150u32 {
            let expect = ln_factorial(n - 1);
            let got = log_gamma(f64::from(n)).unwrap();
            assert!(((got - expect) / expect).abs() < 1e-12, "n={n}");
        }
        // Γ(n + 1/2) = (2n)! √π / (4ⁿ n!)
        for n in 1..60u32 {
            let expect = ln_factorial(2 * n) + 0.5 * std::f64::consts::PI.ln()
                - f64::from(n) * 4f64.ln()
                - ln_factorial(n);
            let got = log_gamma(f64::from(n) + 0.5).unwrap();
            assert!(((got - expect) / expect).abs() < 1e-12, "n={n}");
        }
    }

    #[test]
    fn log_gamma_extremes_of_range() {
        // Stirling series with four correction terms is exact to f64 at 1e6.
        let x = 1e6f64;
        let stirling = (x - 0.5) * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI).ln()
            + 1.0 / (12.0 * x)
            - 1.0 / (360.0 * x.powi(3));
        assert!(((log_gamma(x).unwrap() - stirling) / stirling).abs() < 1e-12);
        // Γ(x) ≈ 1/x - γ near zero; lnΓ(1e-3) from the series ln(1/x) - γx + (π²/12 + γ²/2)x²
        let x = 1e-3f64;
        let gamma_e = 0.577_215_664_901_532_9;
        let zeta2 = std::f64::consts::PI.powi(2) / 6.0;
        let series = -x.ln() - gamma_e * x + 0.5 * zeta2 * x * x - 1.202_056_903_159_594_3 / 3.0 * x.powi(3);
        assert!(((log_gamma(x).unwrap() - series) / series).abs() < 1e-12);
    }

    #[test]
    fn log_gamma_rejects_bad_input() {
        assert!(log_gamma(0.0).is_err());
        assert!(log_gamma(-1.0).is_err());
        assert!(log_gamma(f64::NAN).is_err());
        assert!(log_gamma(f64::INFINITY).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&[0.0, 0.0, 0.0]).unwrap();
        s.iter().for_each(|x| assert!((x - 1.0 / 3.0).abs() < 1e-15));
        let s = softmax(&[1000.0, 0.0]).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12 && s[1] < 1e-12 && s[1] >= 0.0);
        let s = softmax(&[2f64.ln(), 1f64.ln()]).unwrap();
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(softmax(&[]).is_err());
        assert!(softmax(&[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-15);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
        let brute = -(0.575f64 * 0.575f64.ln()) - 0.425 * 0.425f64.ln();
        assert!((entropy(&[0.575, 0.425]) - brute).abs() < 1e-15);
        assert!((entropy(&[0.575, 0.425]) - 0.681_854_608_730_783_4).abs() < 1e-12);
    }

    #[test]
    fn spectral_sigma_simple_matrices() {
        let mut rng = Rng::new(3);
        let est = spectral_sigma(&Matrix::identity(3), 1, &mut rng).unwrap();
        assert!((est.sigma - 1.0).abs() < 1e-12);
        let d = Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let est = spectral_sigma(&d, 50, &mut rng).unwrap();
        assert!((est.sigma - 3.0).abs() < 1e-6);
        let z = Matrix::zeros(2, 3);
        let est = spectral_sigma(&z, 5, &mut rng).unwrap();
        assert!(est.degenerate);
        assert_eq!(est.sigma, 0.0);
        assert!(spectral_sigma(&d, 0, &mut rng).is_err());
    }

    #[test]
    fn substreams_are_reproducible_and_distinct() {
        let root = Rng::new(11);
        let mut a = root.substream("data");
        let mut b = root.substream("data");
        let mut c = root.substream("init");
        let xa: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..8).map(|_| c.next_u64()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
        let mut used = Rng::new(11);
        used.next_u64();
        assert_eq!(used.substream("data").next_u64(), xa[0]);
    }

    #[test]
    fn matrix_validates_shape_and_finiteness() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m.matvec(&[1.0, 1.0]), vec![3.0, 7.0]);
        assert_eq!(m.matvec_t(&[1.0, 1.0]), vec![4.0, 6.0]);
    }
}
