//! Aleatoric and epistemic uncertainty of a courtroom prediction.
//!
//! Aleatoric uncertainty (AU) is the entropy, in nats, of the predictive mean.
//! Epistemic uncertainty (EU) is the trace of the covariance of the class
//! probability vector. EU splits exactly into disagreement between the expert
//! means (inter) and the average spread inside each expert (intra).

use serde::{Deserialize, Serialize};

use crate::numerics::entropy;
use crate::simplex_dist::{
    dir_var, efd_mean, efd_var, expert_concentration, mixture_repr, CourtroomParams, SimplexVec,
};

/// Entropy of the predictive mean, in nats.
pub fn aleatoric(cp: &CourtroomParams) -> f64 {
    entropy(efd_mean(cp).as_slice())
}

/// Total variance of the class-probability vector.
pub fn epistemic(cp: &CourtroomParams) -> f64 {
    efd_var(cp).iter().sum()
}

/// Inter/intra split of the epistemic uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpistemicParts {
    pub inter: f64,
    pub intra: f64,
}

impl EpistemicParts {
    pub fn total(&self) -> f64 {
        self.inter + self.intra
    }
}

pub fn epistemic_decompose(cp: &CourtroomParams) -> EpistemicParts {
    let mix = mixture_repr(cp);
    let center = mix.aggregate();
    let weights = mix.weights.as_slice();
    let mut inter = 0.0;
    let mut intra = 0.0;
    for (k, (w, mu)) in weights.iter().zip(&mix.expert_means).enumerate() {
        let spread: f64 = mu
            .as_slice()
            .iter()
            .zip(&center)
            .map(|(m, c)| (m - c) * (m - c))
            .sum();
        inter += w * spread;
        let within: f64 = dir_var(&expert_concentration(cp, k).expect("k < K"))
            .iter()
            .sum();
        intra += w * within;
    }
    EpistemicParts { inter, intra }
}

/// Inter-expert disagreement in pairwise form: `½ Σ_k Σ_j w_k w_j ‖mu_k − mu_j‖²`.
pub fn inter_pairwise(cp: &CourtroomParams) -> f64 {
    let mix = mixture_repr(cp);
    let w = mix.weights.as_slice();
    let mut total = 0.0;
    for (k, mk) in mix.expert_means.iter().enumerate() {
        for (j, mj) in mix.expert_means.iter().enumerate() {
            let d2: f64 = mk
                .as_slice()
                .iter()
                .zip(mj.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += w[k] * w[j] * d2;
        }
    }
    0.5 * total
}

/// Everything a single prediction reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    /// Argmax of the mean, lowest index on ties.
    pub predicted_class: usize,
    pub mean: SimplexVec,
    /// Nats.
    pub au: f64,
    pub eu: f64,
    pub eu_inter: f64,
    pub eu_intra: f64,
}

pub fn report(cp: &CourtroomParams) -> UncertaintyReport {
    let mean = efd_mean(cp);
    let parts = epistemic_decompose(cp);
    UncertaintyReport {
        predicted_class: mean.argmax(),
        au: entropy(mean.as_slice()),
        eu: epistemic(cp),
        eu_inter: parts.inter,
        eu_intra: parts.intra,
        mean,
    }
}
