//! Feature extractor with three prediction heads, the composite objective and
//! its exact reverse-mode gradient.
//!
//! For an input `x` the network computes `z = f(x)` and then
//!
//! ```text
//! alpha = exp(g_alpha(z))      shared evidence
//! omega = softmax(g_omega(z))  advocate plausibility
//! tau   = exp(g_tau(z))        advocacy strength
//! ```
//!
//! Alpha and tau logits are clamped to `[-MAX_LOGIT, MAX_LOGIT]` before the
//! exponential. Inside the clamp the gradient is exact; at the clamp it is zero.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::numerics::{softmax_unchecked, spectral_sigma_warm, Matrix, Rng};
use crate::simplex_dist::{efd_mean, CourtroomParams, SimplexVec};

pub const MAX_LOGIT: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
            Activation::Relu => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Relu),
            t => Err(Error::Checkpoint(format!("unknown activation tag {t}"))),
        }
    }
}

/// Fully connected layer `y = act(W x + b)`; `W` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.weight.matvec(x);
        for (v, b) in y.iter_mut().zip(&self.bias) {
            *v = self.activation.apply(*v + b);
        }
        y
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Switches that remove parts of the model, for ablations and the
/// evidential baseline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Pin `omega` to the uniform vector; the omega head receives no gradient.
    pub fix_omega_uniform: bool,
    /// Replace `tau` by its mean across classes.
    pub fix_tau_shared: bool,
    /// Drop the `‖y − omega‖²` term.
    pub drop_omega_reg: bool,
    /// Drop the `KL(softmax(tau) ‖ smoothed y)` term.
    pub drop_tau_reg: bool,
}

impl Ablation {
    /// The evidential-baseline configuration: uniform plausibility and one
    /// shared advocacy strength.
    pub fn edl_baseline() -> Self {
        Self {
            fix_omega_uniform: true,
            fix_tau_shared: true,
            ..Self::default()
        }
    }

    fn bits(self) -> u8 {
        u8::from(self.fix_omega_uniform)
            | u8::from(self.fix_tau_shared) << 1
            | u8::from(self.drop_omega_reg) << 2
            | u8::from(self.drop_tau_reg) << 3
    }

    fn from_bits(b: u8) -> Result<Self> {
        if b >> 4 != 0 {
            return Err(Error::Checkpoint(format!("unknown ablation bits {b:#x}")));
        }
        Ok(Self {
            fix_omega_uniform: b & 1 != 0,
            fix_tau_shared: b & 2 != 0,
            drop_omega_reg: b & 4 != 0,
            drop_tau_reg: b & 8 != 0,
        })
    }
}

/// Architecture of a freshly initialized model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Widths of the extractor layers; the last one is the feature size.
    pub extractor_widths: Vec<usize>,
    /// Hidden widths inside each head; empty means a single linear layer.
    pub head_widths: Vec<usize>,
    pub classes: usize,
    pub extractor_activation: Activation,
    pub head_activation: Activation,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn small(input_dim: usize, hidden: usize, classes: usize) -> Self {
        Self {
            input_dim,
            extractor_widths: vec![hidden],
            head_widths: Vec::new(),
            classes,
            extractor_activation: Activation::Tanh,
            head_activation: Activation::Tanh,
            ablation: Ablation::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes < 2 || self.extractor_widths.is_empty() {
            return domain("model needs input_dim >= 1, classes >= 2 and at least one extractor layer");
        }
        if self.extractor_widths.iter().chain(&self.head_widths).any(|w| *w == 0) {
            return domain("layer widths must be positive");
        }
        Ok(())
    }
}

/// Which group of layers a layer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Extractor,
    HeadAlpha,
    HeadOmega,
    HeadTau,
}

impl Part {
    pub const ALL: [Part; 4] = [Part::Extractor, Part::HeadAlpha, Part::HeadOmega, Part::HeadTau];

    pub fn name(self) -> &'static str {
        match self {
            Part::Extractor => "extractor",
            Part::HeadAlpha => "head_alpha",
            Part::HeadOmega => "head_omega",
            Part::HeadTau => "head_tau",
        }
    }

    /// Parts whose matrices are spectrally normalized.
    pub fn is_normalized(self) -> bool {
        matches!(self, Part::Extractor | Part::HeadAlpha)
    }
}

/// Power-iteration warm-start vectors for one normalized matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SnState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub input_dim: usize,
    pub feature_dim: usize,
    pub classes: usize,
    pub extractor: Vec<Layer>,
    pub head_alpha: Vec<Layer>,
    pub head_omega: Vec<Layer>,
    pub head_tau: Vec<Layer>,
    /// One entry per matrix of the extractor followed by the alpha head.
    pub sn_state: Vec<SnState>,
    pub ablation: Ablation,
}

fn build_layers(
    input: usize,
    widths: &[usize],
    hidden_act: Activation,
    last_act: Activation,
    init: &mut dyn FnMut(usize, usize) -> (Matrix, Vec<f64>),
) -> Vec<Layer> {
    let mut layers = Vec::with_capacity(widths.len());
    let mut fan_in = input;
    for (i, w) in widths.iter().enumerate() {
        let (weight, bias) = init(*w, fan_in);
        let activation = if i + 1 == widths.len() { last_act } else { hidden_act };
        layers.push(Layer {
            weight,
            bias,
            activation,
        });
        fan_in = *w;
    }
    layers
}

impl ModelState {
    /// Random initialization: weights and biases uniform on `±1/√fan_in`.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut draw = |rows: usize, cols: usize| {
            let bound = 1.0 / (cols as f64).sqrt();
            let mut w = Matrix::zeros(rows, cols);
            w.data_mut()
                .iter_mut()
                .for_each(|x| *x = (2.0 * rng.uniform() - 1.0) * bound);
            let b = (0..rows).map(|_| (2.0 * rng.uniform() - 1.0) * bound).collect();
            (w, b)
        };
        let mut m = Self::build(cfg, &mut draw);
        let mut sn_rng = rng.substream("spectral");
        for s in &mut m.sn_state {
            s.u.iter_mut().for_each(|x| *x = sn_rng.normal());
        }
        Ok(m)
    }

    /// All weights and biases zero.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::build(cfg, &mut |r, c| (Matrix::zeros(r, c), vec![0.0; r])))
    }

    fn build(cfg: &ModelConfig, init: &mut dyn FnMut(usize, usize) -> (Matrix, Vec<f64>)) -> Self {
        let extractor = build_layers(
            cfg.input_dim,
            &cfg.extractor_widths,
            cfg.extractor_activation,
            cfg.extractor_activation,
            init,
        );
        let feature_dim = *cfg.extractor_widths.last().expect("validated");
        let mut head_widths = cfg.head_widths.clone();
        head_widths.push(cfg.classes);
        let head = |init: &mut dyn FnMut(usize, usize) -> (Matrix, Vec<f64>)| {
            build_layers(feature_dim, &head_widths, cfg.head_activation, Activation::Identity, init)
        };
        let head_alpha = head(init);
        let head_omega = head(init);
        let head_tau = head(init);
        let sn_state = extractor
            .iter()
            .chain(&head_alpha)
            .map(|l| SnState {
                u: vec![1.0; l.out_dim()],
                v: vec![0.0; l.in_dim()],
            })
            .collect();
        Self {
            input_dim: cfg.input_dim,
            feature_dim,
            classes: cfg.classes,
            extractor,
            head_alpha,
            head_omega,
            head_tau,
            sn_state,
            ablation: cfg.ablation,
        }
    }

    pub fn part(&self, part: Part) -> &[Layer] {
        match part {
            Part::Extractor => &self.extractor,
            Part::HeadAlpha => &self.head_alpha,
            Part::HeadOmega => &self.head_omega,
            Part::HeadTau => &self.head_tau,
        }
    }

    fn part_mut(&mut self, part: Part) -> &mut Vec<Layer> {
        match part {
            Part::Extractor => &mut self.extractor,
            Part::HeadAlpha => &mut self.head_alpha,
            Part::HeadOmega => &mut self.head_omega,
            Part::HeadTau => &mut self.head_tau,
        }
    }

    /// Layers in canonical order: extractor, alpha, omega, tau.
    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.extractor
            .iter()
            .chain(&self.head_alpha)
            .chain(&self.head_omega)
            .chain(&self.head_tau)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.extractor
            .iter_mut()
            .chain(self.head_alpha.iter_mut())
            .chain(self.head_omega.iter_mut())
            .chain(self.head_tau.iter_mut())
    }

    /// Matrices subject to spectral normalization.
    pub fn normalized_matrices(&self) -> impl Iterator<Item = &Matrix> {
        self.extractor.iter().chain(&self.head_alpha).map(|l| &l.weight)
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(|l| l.weight.data().len() + l.bias.len()).sum()
    }

    /// Flat parameter access in canonical order (weights then bias, per layer).
    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for layer in self.layers_mut() {
            let nw = layer.weight.data().len();
            if index < nw {
                return &mut layer.weight.data_mut()[index];
            }
            index -= nw;
            if index < layer.bias.len() {
                return &mut layer.bias[index];
            }
            index -= layer.bias.len();
        }
        panic!("parameter index out of range");
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim
            )));
        }
        Ok(())
    }

    /// Courtroom parameters for one input.
    pub fn forward(&self, x: &[f64]) -> Result<CourtroomParams> {
        self.check_input(x)?;
        let z = run_layers(&self.extractor, x);
        let heads = HeadOutputs::compute(self, &z, self.ablation);
        heads.params()
    }

    /// Divide every extractor and alpha-head matrix by a one-step,
    /// warm-started power-iteration estimate of its spectral norm.
    /// Omega and tau heads are left alone.
    pub fn spectral_normalize(&mut self) {
        let mut idx = 0;
        for part in [Part::Extractor, Part::HeadAlpha] {
            let n = self.part(part).len();
            for i in 0..n {
                let warm = self.sn_state[idx].u.clone();
                let layer = &mut self.part_mut(part)[i];
                let est = spectral_sigma_warm(&layer.weight, &warm, 1)
                    .expect("sn_state shape follows the layer");
                if est.degenerate || est.sigma <= 0.0 {
                    log::warn!("{} layer {i}: zero matrix left unnormalized", part.name());
                } else {
                    layer.weight.scale(1.0 / est.sigma);
                    self.sn_state[idx] = SnState { u: est.u, v: est.v };
                }
                idx += 1;
            }
        }
    }
}

fn run_layers(layers: &[Layer], x: &[f64]) -> Vec<f64> {
    layers.iter().fold(x.to_vec(), |h, l| l.forward(&h))
}

/// Forward pass that keeps every layer's input and output.
fn trace_layers(layers: &[Layer], x: &[f64]) -> Vec<Vec<f64>> {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(x.to_vec());
    for l in layers {
        let next = l.forward(acts.last().expect("nonempty"));
        acts.push(next);
    }
    acts
}

/// Head logits and the activated parameter vectors for one feature vector.
struct HeadOutputs {
    alpha_logits: Vec<f64>,
    tau_logits: Vec<f64>,
    alpha: Vec<f64>,
    omega: Vec<f64>,
    /// Per-class tau before the shared-tau ablation.
    tau_raw: Vec<f64>,
    tau: Vec<f64>,
}

impl HeadOutputs {
    fn compute(m: &ModelState, z: &[f64], ablation: Ablation) -> Self {
        let a = run_layers(&m.head_alpha, z);
        let o = run_layers(&m.head_omega, z);
        let t = run_layers(&m.head_tau, z);
        Self::from_logits(a, &o, t, ablation)
    }

    fn from_logits(alpha_logits: Vec<f64>, o: &[f64], tau_logits: Vec<f64>, ablation: Ablation) -> Self {
        let k = alpha_logits.len();
        let alpha = alpha_logits.iter().map(|v| clamp_exp(*v)).collect();
        let omega = if ablation.fix_omega_uniform {
            vec![1.0 / k as f64; k]
        } else if o.iter().all(|v| v.is_finite()) {
            softmax_unchecked(o)
        } else {
            vec![f64::NAN; k]
        };
        let tau_raw: Vec<f64> = tau_logits.iter().map(|v| clamp_exp(*v)).collect();
        let tau = if ablation.fix_tau_shared {
            vec![tau_raw.iter().sum::<f64>() / k as f64; k]
        } else {
            tau_raw.clone()
        };
        Self {
            alpha_logits,
            tau_logits,
            alpha,
            omega,
            tau_raw,
            tau,
        }
    }

    fn params(&self) -> Result<CourtroomParams> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.alpha) || !finite(&self.omega) || !finite(&self.tau) {
            return Err(Error::Training(
                "non-finite head output (exploding logits)".into(),
            ));
        }
        CourtroomParams::new(
            self.alpha.clone(),
            SimplexVec::new(self.omega.clone())?,
            self.tau.clone(),
        )
    }
}

#[inline]
fn clamp_exp(v: f64) -> f64 {
    v.clamp(-MAX_LOGIT, MAX_LOGIT).exp()
}

#[inline]
fn inside_clamp(v: f64) -> bool {
    v.abs() < MAX_LOGIT
}

/// Label-smoothed target `(1 − eps) y + eps/(K − 1) (1 − y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedTarget(pub SimplexVec);

pub fn smoothed_target(y: usize, eps: f64, k: usize) -> Result<SmoothedTarget> {
    if k < 2 {
        return domain("label smoothing needs at least two classes");
    }
    if y >= k {
        return Err(Error::Index { index: y, len: k });
    }
    if !(0.0..=1.0).contains(&eps) {
        return domain(format!("label smoothing eps must lie in [0, 1], got {eps}"));
    }
    let off = eps / (k - 1) as f64;
    let mut v = vec![off; k];
    v[y] = 1.0 - eps;
    Ok(SmoothedTarget(SimplexVec::new(v)?))
}

/// The three terms of the per-example objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    /// `‖y − E[pi]‖²`
    pub mse: f64,
    /// `‖y − omega‖²`
    pub omega_reg: f64,
    /// `KL(softmax(tau) ‖ smoothed y)`, natural log.
    pub tau_reg: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.mse + self.omega_reg + self.tau_reg
    }

    pub fn total_with(&self, ablation: Ablation) -> f64 {
        let mut t = self.mse;
        if !ablation.drop_omega_reg {
            t += self.omega_reg;
        }
        if !ablation.drop_tau_reg {
            t += self.tau_reg;
        }
        t
    }
}

fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    let mut kl = 0.0;
    for (pi, qi) in p.iter().zip(q) {
        if *pi == 0.0 {
            continue;
        }
        if *qi == 0.0 {
            return domain("KL divergence is infinite: target has a zero where softmax(tau) does not");
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl)
}

pub fn loss_terms(cp: &CourtroomParams, y: usize, eps: f64) -> Result<LossTerms> {
    let k = cp.k();
    let target = smoothed_target(y, eps, k)?;
    let mean = efd_mean(cp);
    let sq = |v: &[f64]| -> f64 {
        v.iter()
            .enumerate()
            .map(|(j, x)| {
                let d = if j == y { 1.0 - x } else { -x };
                d * d
            })
            .sum()
    };
    let tau_soft = softmax_unchecked(cp.tau());
    Ok(LossTerms {
        mse: sq(mean.as_slice()),
        omega_reg: sq(cp.omega().as_slice()),
        tau_reg: kl_divergence(&tau_soft, target.0.as_slice())?,
    })
}

/// Per-example objective: all three terms.
pub fn loss(cp: &CourtroomParams, y: usize, eps: f64) -> Result<f64> {
    Ok(loss_terms(cp, y, eps)?.total())
}

/// Cotangents shaped like the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub extractor: Vec<LayerGrad>,
    pub head_alpha: Vec<LayerGrad>,
    pub head_omega: Vec<LayerGrad>,
    pub head_tau: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(m: &ModelState) -> Self {
        let z = |ls: &[Layer]| {
            ls.iter()
                .map(|l| LayerGrad {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect()
        };
        Self {
            extractor: z(&m.extractor),
            head_alpha: z(&m.head_alpha),
            head_omega: z(&m.head_omega),
            head_tau: z(&m.head_tau),
        }
    }

    pub fn part(&self, part: Part) -> &[LayerGrad] {
        match part {
            Part::Extractor => &self.extractor,
            Part::HeadAlpha => &self.head_alpha,
            Part::HeadOmega => &self.head_omega,
            Part::HeadTau => &self.head_tau,
        }
    }

    fn part_mut(&mut self, part: Part) -> &mut [LayerGrad] {
        match part {
            Part::Extractor => &mut self.extractor,
            Part::HeadAlpha => &mut self.head_alpha,
            Part::HeadOmega => &mut self.head_omega,
            Part::HeadTau => &mut self.head_tau,
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerGrad> {
        self.extractor
            .iter()
            .chain(&self.head_alpha)
            .chain(&self.head_omega)
            .chain(&self.head_tau)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut LayerGrad> {
        self.extractor
            .iter_mut()
            .chain(self.head_alpha.iter_mut())
            .chain(self.head_omega.iter_mut())
            .chain(self.head_tau.iter_mut())
    }

    /// Flat view in the same order as [`ModelState::param_mut`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in self.layers() {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    fn scale(&mut self, s: f64) {
        for l in self.layers_mut() {
            l.weight.scale(s);
            l.bias.iter_mut().for_each(|b| *b *= s);
        }
    }

    /// First part/layer holding a non-finite entry.
    pub fn first_non_finite(&self) -> Option<(Part, usize)> {
        Part::ALL.into_iter().find_map(|p| {
            self.part(p)
                .iter()
                .position(|l| l.weight.data().iter().chain(&l.bias).any(|x| !x.is_finite()))
                .map(|i| (p, i))
        })
    }
}

/// Backpropagate `g_out` (cotangent of the last layer's output) through
/// `layers`, accumulating into `grads`; returns the cotangent of the input.
fn backprop_layers(layers: &[Layer], acts: &[Vec<f64>], mut g_out: Vec<f64>, grads: &mut [LayerGrad]) -> Vec<f64> {
    for (i, layer) in layers.iter().enumerate().rev() {
        let input = &acts[i];
        let output = &acts[i + 1];
        for (g, y) in g_out.iter_mut().zip(output) {
            *g *= layer.activation.derivative_from_output(*y);
        }
        let lg = &mut grads[i];
        for (r, g) in g_out.iter().enumerate() {
            if *g == 0.0 {
                continue;
            }
            lg.bias[r] += g;
            let row = &mut lg.weight.data_mut()[r * input.len()..(r + 1) * input.len()];
            for (w, x) in row.iter_mut().zip(input) {
                *w += g * x;
            }
        }
        g_out = layer.weight.matvec_t(&g_out);
    }
    g_out
}

/// Cotangents of the objective with respect to the head logits.
struct LogitGrads {
    alpha: Vec<f64>,
    omega: Vec<f64>,
    tau: Vec<f64>,
}

fn objective_and_logit_grads(
    h: &HeadOutputs,
    y: usize,
    target: &[f64],
    ablation: Ablation,
) -> Result<(f64, LogitGrads)> {
    let k = h.alpha.len();
    let (alpha, omega, tau) = (&h.alpha, &h.omega, &h.tau);
    let a_sum: f64 = alpha.iter().sum();
    let mut kappa1 = 0.0;
    let mut kappa1_prime = 0.0; // Σ_j omega_j / (A + tau_j)²
    for j in 0..k {
        let at = a_sum + tau[j];
        kappa1 += omega[j] / at;
        kappa1_prime += omega[j] / (at * at);
    }
    let mean: Vec<f64> = (0..k)
        .map(|j| alpha[j] * kappa1 + tau[j] * omega[j] / (a_sum + tau[j]))
        .collect();
    let onehot = |j: usize| if j == y { 1.0 } else { 0.0 };

    let mut total = 0.0;
    let mut g_alpha = vec![0.0; k];
    let mut g_omega = vec![0.0; k];
    let mut g_tau = vec![0.0; k];

    // mean-squared error on the predictive mean
    let g_mean: Vec<f64> = (0..k).map(|j| 2.0 * (mean[j] - onehot(j))).collect();
    total += (0..k).map(|j| (mean[j] - onehot(j)).powi(2)).sum::<f64>();
    let shared_a: f64 = (0..k)
        .map(|j| {
            let at = a_sum + tau[j];
            g_mean[j] * (-alpha[j] * kappa1_prime - tau[j] * omega[j] / (at * at))
        })
        .sum();
    let g_dot_alpha: f64 = (0..k).map(|j| g_mean[j] * alpha[j]).sum();
    for j in 0..k {
        let at = a_sum + tau[j];
        g_alpha[j] = g_mean[j] * kappa1 + shared_a;
        g_omega[j] = g_dot_alpha / at + g_mean[j] * tau[j] / at;
        g_tau[j] = -g_dot_alpha * omega[j] / (at * at) + g_mean[j] * omega[j] * a_sum / (at * at);
    }

    if !ablation.drop_omega_reg {
        for j in 0..k {
            let d = omega[j] - onehot(j);
            total += d * d;
            g_omega[j] += 2.0 * d;
        }
    }

    if !ablation.drop_tau_reg {
        let soft = softmax_unchecked(tau);
        total += kl_divergence(&soft, target)?;
        // dKL/dsoft_j = ln(soft_j / target_j) + 1; the constant cancels in the softmax Jacobian
        let ell: Vec<f64> = soft
            .iter()
            .zip(target)
            .map(|(s, t)| if *s > 0.0 { (s / t).ln() } else { 0.0 })
            .collect();
        let mean_ell: f64 = soft.iter().zip(&ell).map(|(s, l)| s * l).sum();
        for j in 0..k {
            g_tau[j] += soft[j] * (ell[j] - mean_ell);
        }
    }

    // through the activations
    let g_tau_raw = if ablation.fix_tau_shared {
        vec![g_tau.iter().sum::<f64>() / k as f64; k]
    } else {
        g_tau
    };
    let alpha_logits: Vec<f64> = (0..k)
        .map(|j| {
            if inside_clamp(h.alpha_logits[j]) {
                g_alpha[j] * alpha[j]
            } else {
                0.0
            }
        })
        .collect();
    let tau_logits: Vec<f64> = (0..k)
        .map(|j| {
            if inside_clamp(h.tau_logits[j]) {
                g_tau_raw[j] * h.tau_raw[j]
            } else {
                0.0
            }
        })
        .collect();
    let omega_logits = if ablation.fix_omega_uniform {
        vec![0.0; k]
    } else {
        let dotp: f64 = omega.iter().zip(&g_omega).map(|(w, g)| w * g).sum();
        (0..k).map(|j| omega[j] * (g_omega[j] - dotp)).collect()
    };
    Ok((
        total,
        LogitGrads {
            alpha: alpha_logits,
            omega: omega_logits,
            tau: tau_logits,
        },
    ))
}

/// Mean objective over a batch and its exact gradient.
///
/// Examples are accumulated in batch order so the result is bit-reproducible.
pub fn backward(m: &ModelState, xs: &[&[f64]], ys: &[usize], eps: f64) -> Result<(f64, Gradients)> {
    if xs.is_empty() {
        return domain("backward needs a nonempty batch");
    }
    if xs.len() != ys.len() {
        return Err(Error::Dimension(format!(
            "{} inputs but {} labels",
            xs.len(),
            ys.len()
        )));
    }
    let mut grads = Gradients::zeros_like(m);
    let mut total = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        m.check_input(x)?;
        let target = smoothed_target(*y, eps, m.classes)?;
        total += accumulate_example(m, x, *y, target.0.as_slice(), &mut grads)?;
    }
    let n = xs.len() as f64;
    grads.scale(1.0 / n);
    let mean_loss = total / n;
    if !mean_loss.is_finite() {
        return Err(Error::Training(format!("non-finite loss {mean_loss}")));
    }
    if let Some((part, i)) = grads.first_non_finite() {
        return Err(Error::Training(format!(
            "non-finite gradient in {} layer {i}",
            part.name()
        )));
    }
    Ok((mean_loss, grads))
}

fn accumulate_example(m: &ModelState, x: &[f64], y: usize, target: &[f64], grads: &mut Gradients) -> Result<f64> {
    let ext = trace_layers(&m.extractor, x);
    let z = ext.last().expect("nonempty");
    let ta = trace_layers(&m.head_alpha, z);
    let to = trace_layers(&m.head_omega, z);
    let tt = trace_layers(&m.head_tau, z);
    let heads = HeadOutputs::from_logits(
        ta.last().expect("nonempty").clone(),
        to.last().expect("nonempty"),
        tt.last().expect("nonempty").clone(),
        m.ablation,
    );
    heads.params()?;
    let (value, lg) = objective_and_logit_grads(&heads, y, target, m.ablation)?;
    let mut gz = backprop_layers(&m.head_alpha, &ta, lg.alpha, grads.part_mut(Part::HeadAlpha));
    let go = backprop_layers(&m.head_omega, &to, lg.omega, grads.part_mut(Part::HeadOmega));
    let gt = backprop_layers(&m.head_tau, &tt, lg.tau, grads.part_mut(Part::HeadTau));
    for ((a, b), c) in gz.iter_mut().zip(&go).zip(&gt) {
        *a += b + c;
    }
    backprop_layers(&m.extractor, &ext, gz, grads.part_mut(Part::Extractor));
    Ok(value)
}

/// Mean objective over a batch without gradients, honoring the ablation flags.
pub fn batch_loss(m: &ModelState, xs: &[&[f64]], ys: &[usize], eps: f64) -> Result<f64> {
    if xs.is_empty() {
        return domain("empty batch");
    }
    let mut total = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let cp = m.forward(x)?;
        total += loss_terms(&cp, *y, eps)?.total_with(m.ablation);
    }
    Ok(total / xs.len() as f64)
}

const MAGIC: &[u8; 8] = b"MODEXCKP";
const VERSION: u32 = 1;

/// Serialize to the versioned checkpoint format.
///
/// Layout, all integers `u32` and all reals `f64`, little-endian:
///
/// ```text
/// magic "MODEXCKP" | version | input_dim | feature_dim | classes | ablation bits (u8)
/// 4 × part: layer count, then per layer rows | cols | activation tag (u8)
///           | rows·cols row-major weights | rows biases
/// sn count, then per entry: len(u) | u | len(v) | v
/// ```
pub fn checkpoint_bytes(m: &ModelState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let put_u32 = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    let put_f64s = |out: &mut Vec<u8>, vs: &[f64]| {
        for v in vs {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    put_u32(&mut out, VERSION as usize);
    put_u32(&mut out, m.input_dim);
    put_u32(&mut out, m.feature_dim);
    put_u32(&mut out, m.classes);
    out.push(m.ablation.bits());
    for part in Part::ALL {
        let layers = m.part(part);
        put_u32(&mut out, layers.len());
        for l in layers {
            put_u32(&mut out, l.weight.rows());
            put_u32(&mut out, l.weight.cols());
            out.push(l.activation.tag());
            put_f64s(&mut out, l.weight.data());
            put_f64s(&mut out, &l.bias);
        }
    }
    put_u32(&mut out, m.sn_state.len());
    for s in &m.sn_state {
        put_u32(&mut out, s.u.len());
        put_f64s(&mut out, &s.u);
        put_u32(&mut out, s.v.len());
        put_f64s(&mut out, &s.v);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<ModelState> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let input_dim = r.u32()?;
    let feature_dim = r.u32()?;
    let classes = r.u32()?;
    let ablation = Ablation::from_bits(r.u8()?)?;
    let mut parts: Vec<Vec<Layer>> = Vec::with_capacity(4);
    for _ in Part::ALL {
        let n = r.u32()?;
        let mut layers = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let rows = r.u32()?;
            let cols = r.u32()?;
            let activation = Activation::from_tag(r.u8()?)?;
            let weight = Matrix::from_vec(rows, cols, r.f64s(rows * cols)?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            let bias = r.f64s(rows)?;
            layers.push(Layer {
                weight,
                bias,
                activation,
            });
        }
        parts.push(layers);
    }
    let n_sn = r.u32()?;
    let mut sn_state = Vec::with_capacity(n_sn.min(1024));
    for _ in 0..n_sn {
        let nu = r.u32()?;
        let u = r.f64s(nu)?;
        let nv = r.u32()?;
        let v = r.f64s(nv)?;
        sn_state.push(SnState { u, v });
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let head_tau = parts.pop().expect("4 parts");
    let head_omega = parts.pop().expect("4 parts");
    let head_alpha = parts.pop().expect("4 parts");
    let extractor = parts.pop().expect("4 parts");
    let m = ModelState {
        input_dim,
        feature_dim,
        classes,
        extractor,
        head_alpha,
        head_omega,
        head_tau,
        sn_state,
        ablation,
    };
    validate_shapes(&m)?;
    Ok(m)
}

fn validate_shapes(m: &ModelState) -> Result<()> {
    let bad = |msg: String| Err(Error::Checkpoint(msg));
    let chain = |layers: &[Layer], input: usize, output: usize, name: &str| -> Result<()> {
        if layers.is_empty() {
            return bad(format!("{name} has no layers"));
        }
        let mut fan = input;
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim() != fan || l.bias.len() != l.out_dim() {
                return bad(format!("{name} layer {i} does not compose"));
            }
            fan = l.out_dim();
        }
        if fan != output {
            return bad(format!("{name} ends at width {fan}, expected {output}"));
        }
        Ok(())
    };
    chain(&m.extractor, m.input_dim, m.feature_dim, "extractor")?;
    for part in [Part::HeadAlpha, Part::HeadOmega, Part::HeadTau] {
        chain(m.part(part), m.feature_dim, m.classes, part.name())?;
    }
    if m.classes < 2 {
        return bad("fewer than two classes".into());
    }
    let normalized: Vec<&Layer> = m.extractor.iter().chain(&m.head_alpha).collect();
    if normalized.len() != m.sn_state.len()
        || normalized
            .iter()
            .zip(&m.sn_state)
            .any(|(l, s)| s.u.len() != l.out_dim() || s.v.len() != l.in_dim())
    {
        return bad("spectral-norm state does not match the layers".into());
    }
    Ok(())
}

pub fn save_checkpoint(m: &ModelState, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&checkpoint_bytes(m))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    checkpoint_from_bytes(&buf)
}
