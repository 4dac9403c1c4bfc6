//! Dirichlet and courtroom (extended flexible Dirichlet) distributions on the
//! probability simplex.
//!
//! The courtroom distribution is parameterized by a shared evidence vector
//! `alpha`, per-advocate plausibility weights `omega` and per-advocate
//! advocacy strengths `tau`. Advocate `k` holds the opinion
//! `Dir(alpha + tau_k e_k)` and the verdict mixes the advocates with weights
//! `omega`. Moments are available in closed form through
//!
//! ```text
//! kappa1 = Σ_j omega_j / (A + tau_j)
//! kappa2 = Σ_j omega_j / ((A + tau_j)(A + tau_j + 1)),    A = ‖alpha‖₁
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::numerics::{gamma_unchecked, log_gamma, Rng};

/// Tolerance on the unit-sum constraint of a simplex vector.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A point on the (closed) probability simplex.
///
/// Entries are non-negative and sum to one within [`SIMPLEX_TOL`]. Zero
/// entries are allowed so that degenerate verdicts (one-hot weights) can be
/// represented; operations that need the open simplex check
/// [`SimplexVec::is_interior`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SimplexVec(Vec<f64>);

impl SimplexVec {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return domain("simplex vector must be nonempty");
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return domain(format!("simplex entries must be finite and >= 0: {probs:?}"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return domain(format!("simplex entries sum to {total}, not 1"));
        }
        Ok(Self(probs))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(k: usize, index: usize) -> Result<Self> {
        if index >= k {
            return Err(Error::Index { index, len: k });
        }
        let mut v = vec![0.0; k];
        v[index] = 1.0;
        Ok(Self(v))
    }

    /// Normalize a positive vector onto the simplex.
    pub fn normalized(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if weights.is_empty() || weights.iter().any(|w| !w.is_finite() || *w < 0.0) || total <= 0.0 {
            return domain("cannot normalize: weights must be finite, >= 0, with positive sum");
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_interior(&self) -> bool {
        self.0.iter().all(|p| *p > 0.0)
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for SimplexVec {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for SimplexVec {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SimplexVec> for Vec<f64> {
    fn from(s: SimplexVec) -> Self {
        s.0
    }
}

/// First index of the maximum value.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

fn check_positive(name: &str, xs: &[f64]) -> Result<()> {
    if xs.is_empty() {
        return domain(format!("{name} must be nonempty"));
    }
    if xs.iter().any(|x| !x.is_finite() || *x <= 0.0) {
        return domain(format!("{name} entries must be finite and > 0: {xs:?}"));
    }
    Ok(())
}

/// Dirichlet distribution with concentration `alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletDist {
    alpha: Vec<f64>,
}

impl DirichletDist {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        check_positive("alpha", &alpha)?;
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn precision(&self) -> f64 {
        self.alpha.iter().sum()
    }

    pub fn k(&self) -> usize {
        self.alpha.len()
    }
}

pub fn dir_mean(d: &DirichletDist) -> SimplexVec {
    let a = d.precision();
    SimplexVec(d.alpha.iter().map(|x| x / a).collect())
}

/// Per-coordinate variance `alpha_j (A - alpha_j) / (A² (A + 1))`.
pub fn dir_var(d: &DirichletDist) -> Vec<f64> {
    let a = d.precision();
    d.alpha
        .iter()
        .map(|x| x * (a - x) / (a * a * (a + 1.0)))
        .collect()
}

/// Dirichlet log-density at an interior point of the simplex.
pub fn dir_logpdf(d: &DirichletDist, p: &SimplexVec) -> Result<f64> {
    if p.len() != d.k() {
        return Err(Error::Dimension(format!(
            "point has {} coordinates, distribution has {}",
            p.len(),
            d.k()
        )));
    }
    if !p.is_interior() {
        return domain("Dirichlet density is evaluated only at interior points");
    }
    let mut lp = log_gamma(d.precision())?;
    for (a, x) in d.alpha.iter().zip(p.as_slice()) {
        lp += (a - 1.0) * x.ln() - log_gamma(*a)?;
    }
    Ok(lp)
}

/// Draw from `Dir(alpha)` by normalizing independent unit-scale Gammas.
pub fn dir_sample(d: &DirichletDist, rng: &mut Rng) -> SimplexVec {
    let mut g: Vec<f64> = d.alpha.iter().map(|a| gamma_unchecked(*a, rng)).collect();
    normalize_in_place(&mut g);
    SimplexVec(g)
}

fn normalize_in_place(g: &mut [f64]) {
    let total: f64 = g.iter().sum();
    g.iter_mut().for_each(|x| *x /= total);
}

/// Parameters `(alpha, omega, tau)` of the courtroom distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct CourtroomParams {
    alpha: Vec<f64>,
    omega: SimplexVec,
    tau: Vec<f64>,
    alpha_sum: f64,
}

#[derive(Serialize, Deserialize)]
struct RawParams {
    alpha: Vec<f64>,
    omega: Vec<f64>,
    tau: Vec<f64>,
}

impl TryFrom<RawParams> for CourtroomParams {
    type Error = Error;

    fn try_from(r: RawParams) -> Result<Self> {
        CourtroomParams::new(r.alpha, SimplexVec::new(r.omega)?, r.tau)
    }
}

impl From<CourtroomParams> for RawParams {
    fn from(c: CourtroomParams) -> Self {
        RawParams {
            alpha: c.alpha,
            omega: c.omega.into_vec(),
            tau: c.tau,
        }
    }
}

impl CourtroomParams {
    pub fn new(alpha: Vec<f64>, omega: SimplexVec, tau: Vec<f64>) -> Result<Self> {
        check_positive("alpha", &alpha)?;
        check_positive("tau", &tau)?;
        if omega.len() != alpha.len() || tau.len() != alpha.len() {
            return Err(Error::Dimension(format!(
                "alpha, omega, tau lengths differ: {}, {}, {}",
                alpha.len(),
                omega.len(),
                tau.len()
            )));
        }
        let alpha_sum = alpha.iter().sum();
        Ok(Self {
            alpha,
            omega,
            tau,
            alpha_sum,
        })
    }

    /// Convenience constructor from raw slices; `omega` must already lie on the simplex.
    pub fn from_slices(alpha: &[f64], omega: &[f64], tau: &[f64]) -> Result<Self> {
        Self::new(alpha.to_vec(), SimplexVec::new(omega.to_vec())?, tau.to_vec())
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn omega(&self) -> &SimplexVec {
        &self.omega
    }

    pub fn tau(&self) -> &[f64] {
        &self.tau
    }

    /// `A = ‖alpha‖₁`
    pub fn alpha_sum(&self) -> f64 {
        self.alpha_sum
    }

    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    pub fn kappa1(&self) -> f64 {
        let a = self.alpha_sum;
        self.omega
            .as_slice()
            .iter()
            .zip(&self.tau)
            .map(|(w, t)| w / (a + t))
            .sum()
    }

    pub fn kappa2(&self) -> f64 {
        let a = self.alpha_sum;
        self.omega
            .as_slice()
            .iter()
            .zip(&self.tau)
            .map(|(w, t)| w / ((a + t) * (a + t + 1.0)))
            .sum()
    }
}

/// Concentration of advocate `k`: `alpha + tau_k e_k`.
pub fn expert_concentration(cp: &CourtroomParams, k: usize) -> Result<DirichletDist> {
    if k >= cp.k() {
        return Err(Error::Index { index: k, len: cp.k() });
    }
    let mut alpha = cp.alpha.clone();
    alpha[k] += cp.tau[k];
    Ok(DirichletDist { alpha })
}

/// Closed-form mean `mu_k = alpha_k kappa1 + tau_k omega_k / (A + tau_k)`.
pub fn efd_mean(cp: &CourtroomParams) -> SimplexVec {
    let a = cp.alpha_sum;
    let k1 = cp.kappa1();
    let mean = (0..cp.k())
        .map(|k| cp.alpha[k] * k1 + cp.tau[k] * cp.omega[k] / (a + cp.tau[k]))
        .collect();
    SimplexVec(mean)
}

/// Closed-form per-coordinate variance of the courtroom distribution.
pub fn efd_var(cp: &CourtroomParams) -> Vec<f64> {
    let a = cp.alpha_sum;
    let k1 = cp.kappa1();
    let k2 = cp.kappa2();
    (0..cp.k())
        .map(|k| {
            let (al, w, t) = (cp.alpha[k], cp.omega[k], cp.tau[k]);
            let at = a + t;
            al * al * (k2 - k1 * k1) + w * t * (2.0 * al + t + 1.0) / (at * (at + 1.0)) + al * k2
                - w * w * t * t / (at * at)
                - k1 * 2.0 * al * w * t / at
        })
        .collect()
}

/// Generative-process draw: pick an advocate `L ~ Cat(omega)` then
/// `pi ~ Dir(alpha + tau_L e_L)`.
pub fn efd_sample_mixture(cp: &CourtroomParams, rng: &mut Rng) -> SimplexVec {
    let l = rng.categorical(cp.omega.as_slice());
    let mut g: Vec<f64> = cp
        .alpha
        .iter()
        .enumerate()
        .map(|(j, a)| {
            let shape = if j == l { a + cp.tau[l] } else { *a };
            gamma_unchecked(shape, rng)
        })
        .collect();
    normalize_in_place(&mut g);
    SimplexVec(g)
}

/// Normalized Gamma-basis draw: `Y_k = W_k + Z_k U_k`, `pi = Y / ΣY`, with
/// `W_k ~ Gamma(alpha_k)`, `Z ~ Multinomial(1, omega)`, `U_k ~ Gamma(tau_k)`.
///
/// Only the `U_k` selected by `Z` contributes, so only that one is drawn.
pub fn efd_sample_basis(cp: &CourtroomParams, rng: &mut Rng) -> SimplexVec {
    let mut y: Vec<f64> = cp.alpha.iter().map(|a| gamma_unchecked(*a, rng)).collect();
    let z = rng.categorical(cp.omega.as_slice());
    y[z] += gamma_unchecked(cp.tau[z], rng);
    normalize_in_place(&mut y);
    SimplexVec(y)
}

/// The courtroom distribution viewed as a weighted set of Dirichlet experts.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureRepr {
    pub weights: SimplexVec,
    pub expert_means: Vec<SimplexVec>,
}

impl MixtureRepr {
    /// `Σ_k omega_k mu^(k)`
    pub fn aggregate(&self) -> Vec<f64> {
        let k = self.weights.len();
        let mut out = vec![0.0; self.expert_means.first().map_or(k, SimplexVec::len)];
        for (w, mu) in self.weights.as_slice().iter().zip(&self.expert_means) {
            for (o, m) in out.iter_mut().zip(mu.as_slice()) {
                *o += w * m;
            }
        }
        out
    }
}

pub fn mixture_repr(cp: &CourtroomParams) -> MixtureRepr {
    let expert_means = (0..cp.k())
        .map(|k| dir_mean(&expert_concentration(cp, k).expect("k < K")))
        .collect();
    MixtureRepr {
        weights: cp.omega.clone(),
        expert_means,
    }
}

/// The predictive mean as a blend of the base evidential predictor `alpha / A`
/// and the softmax predictor `omega`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdlSoftmaxRepr {
    pub lambda_edl: f64,
    pub lambda_sm: Vec<f64>,
    pub p_edl: SimplexVec,
    pub p_sm: SimplexVec,
}

impl EdlSoftmaxRepr {
    /// `lambda_edl p_edl + lambda_sm ⊙ p_sm`
    pub fn reconstruct(&self) -> Vec<f64> {
        self.p_edl
            .as_slice()
            .iter()
            .zip(self.p_sm.as_slice())
            .zip(&self.lambda_sm)
            .map(|((e, s), l)| self.lambda_edl * e + l * s)
            .collect()
    }
}

pub fn edl_softmax_repr(cp: &CourtroomParams) -> EdlSoftmaxRepr {
    let a = cp.alpha_sum;
    let lambda_edl = cp
        .omega
        .as_slice()
        .iter()
        .zip(&cp.tau)
        .map(|(w, t)| a * w / (a + t))
        .sum();
    let lambda_sm = cp.tau.iter().map(|t| t / (a + t)).collect();
    EdlSoftmaxRepr {
        lambda_edl,
        lambda_sm,
        p_edl: SimplexVec(cp.alpha.iter().map(|x| x / a).collect()),
        p_sm: cp.omega.clone(),
    }
}

/// Degenerate sub-families of the courtroom distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Flexible Dirichlet: one advocacy strength shared by every class.
    Fd,
    /// Plain Dirichlet `Dir(alpha)`: `tau = 1`, `omega = alpha / A`.
    Dirichlet,
}

pub fn reduction_params(kind: Reduction, cp: &CourtroomParams) -> CourtroomParams {
    match kind {
        Reduction::Fd => {
            let shared = cp.tau.iter().sum::<f64>() / cp.k() as f64;
            CourtroomParams {
                tau: vec![shared; cp.k()],
                ..cp.clone()
            }
        }
        Reduction::Dirichlet => {
            let a = cp.alpha_sum;
            CourtroomParams {
                omega: SimplexVec(cp.alpha.iter().map(|x| x / a).collect()),
                tau: vec![1.0; cp.k()],
                ..cp.clone()
            }
        }
    }
}
