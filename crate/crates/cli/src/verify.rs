//! Identity suite for the courtroom distribution.
//!
//! Closed-form identities are checked on every trial. The Monte Carlo checks
//! (two samplers against each other and against the closed-form moments) are
//! expensive and run on the first `mc_trials` trials only.

use std::fmt::Write as _;

use modex::simplex_dist::{
    dir_mean, dir_var, edl_softmax_repr, efd_mean, efd_sample_basis, efd_sample_mixture, efd_var,
    mixture_repr, reduction_params, Reduction,
};
use modex::uncertainty::{epistemic, epistemic_decompose, inter_pairwise, EpistemicParts};
use modex::{CourtroomParams, DirichletDist, MomentSums, Rng};

use crate::CliError;

/// The operations under test. The default methods call the library; a test
/// can override one to check that the suite catches the fault.
pub trait Subject {
    fn efd_mean(&self, cp: &CourtroomParams) -> Vec<f64> {
        efd_mean(cp).into_vec()
    }
    fn efd_var(&self, cp: &CourtroomParams) -> Vec<f64> {
        efd_var(cp)
    }
    fn mixture_aggregate(&self, cp: &CourtroomParams) -> Vec<f64> {
        mixture_repr(cp).aggregate()
    }
    fn edl_softmax_reconstruct(&self, cp: &CourtroomParams) -> Vec<f64> {
        edl_softmax_repr(cp).reconstruct()
    }
    fn epistemic(&self, cp: &CourtroomParams) -> f64 {
        epistemic(cp)
    }
    fn epistemic_parts(&self, cp: &CourtroomParams) -> EpistemicParts {
        epistemic_decompose(cp)
    }
    fn inter_pairwise(&self, cp: &CourtroomParams) -> f64 {
        inter_pairwise(cp)
    }
    fn reduce(&self, kind: Reduction, cp: &CourtroomParams) -> CourtroomParams {
        reduction_params(kind, cp)
    }
    fn sample_basis(&self, cp: &CourtroomParams, rng: &mut Rng) -> Vec<f64> {
        efd_sample_basis(cp, rng).into_vec()
    }
    fn sample_mixture(&self, cp: &CourtroomParams, rng: &mut Rng) -> Vec<f64> {
        efd_sample_mixture(cp, rng).into_vec()
    }
}

pub struct Library;

impl Subject for Library {}

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub trials: usize,
    pub seed: u64,
    pub mc_trials: usize,
    pub mc_draws: usize,
    /// Allowed standard errors for Monte Carlo comparisons.
    pub mc_z: f64,
}

impl SuiteConfig {
    pub fn new(trials: usize, seed: u64) -> Self {
        Self {
            trials,
            seed,
            mc_trials: 10,
            mc_draws: 1_000_000,
            mc_z: 5.0,
        }
    }
}

pub const EXACT_TOL: f64 = 1e-12;
pub const DECOMPOSITION_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub trials: usize,
    /// Largest absolute error, or largest z-score for Monte Carlo checks.
    pub worst: f64,
    pub tolerance: f64,
    pub failures: usize,
    pub first_failure: Option<CourtroomParams>,
}

impl CheckResult {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            trials: 0,
            worst: 0.0,
            tolerance,
            failures: 0,
            first_failure: None,
        }
    }

    fn record(&mut self, err: f64, cp: &CourtroomParams) {
        self.trials += 1;
        // NaN counts as a failure
        let ok = err <= self.tolerance;
        if err > self.worst || err.is_nan() {
            self.worst = err;
        }
        if !ok {
            self.failures += 1;
            if self.first_failure.is_none() {
                self.first_failure = Some(cp.clone());
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn failed_names(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.passed()).map(|c| c.name).collect()
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<28} {:>7} {:>12} {:>10}  {}\n",
            "check", "trials", "worst", "tolerance", "status"
        );
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{:<28} {:>7} {:>12.3e} {:>10.1e}  {}",
                c.name,
                c.trials,
                c.worst,
                c.tolerance,
                if c.passed() { "pass" } else { "FAIL" }
            );
        }
        s
    }

    /// Failing parameters as JSON, one object per failed check.
    pub fn failures_json(&self) -> String {
        let items: Vec<serde_json::Value> = self
            .checks
            .iter()
            .filter(|c| !c.passed())
            .map(|c| {
                serde_json::json!({
                    "check": c.name,
                    "failures": c.failures,
                    "params": c.first_failure,
                })
            })
            .collect();
        serde_json::to_string_pretty(&items).expect("plain data serializes")
    }
}

fn log_uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.uniform() * (hi.ln() - lo.ln())).exp()
}

/// Random parameters: K from {2, 3, 5, 10}, alpha log-uniform on (0.1, 50),
/// tau log-uniform on (0.01, 50), omega from a flat Dirichlet.
pub fn random_params(rng: &mut Rng) -> CourtroomParams {
    let k = [2, 3, 5, 10][rng.below(4)];
    let alpha: Vec<f64> = (0..k).map(|_| log_uniform(rng, 0.1, 50.0)).collect();
    let tau: Vec<f64> = (0..k).map(|_| log_uniform(rng, 0.01, 50.0)).collect();
    let flat = DirichletDist::new(vec![1.0; k]).expect("positive");
    let omega = modex::simplex_dist::dir_sample(&flat, rng);
    CourtroomParams::new(alpha, omega, tau).expect("valid by construction")
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn moments(draw: &mut dyn FnMut() -> Vec<f64>, k: usize, n: usize) -> Vec<MomentSums> {
    let mut sums = vec![MomentSums::default(); k];
    for _ in 0..n {
        for (s, x) in sums.iter_mut().zip(draw()) {
            s.push(x);
        }
    }
    sums
}

/// Largest z-score between two independent samples, over means and variances.
fn two_sample_z(a: &[MomentSums], b: &[MomentSums]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let zm = (x.mean() - y.mean()).abs() / x.se_mean().hypot(y.se_mean());
            let zv = (x.var() - y.var()).abs() / x.se_var().hypot(y.se_var());
            zm.max(zv)
        })
        .fold(0.0, f64::max)
}

/// Largest z-score of a sample against closed-form means and variances.
pub fn oracle_z(s: &[MomentSums], mean: &[f64], var: &[f64]) -> f64 {
    s.iter()
        .zip(mean.iter().zip(var))
        .map(|(x, (m, v))| {
            let zm = (x.mean() - m).abs() / x.se_mean();
            let zv = (x.var() - v).abs() / x.se_var();
            zm.max(zv)
        })
        .fold(0.0, f64::max)
}

pub fn run_suite(subject: &dyn Subject, cfg: &SuiteConfig) -> Result<SuiteReport, CliError> {
    if cfg.trials == 0 {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }
    let root = Rng::new(cfg.seed);
    let mut dirichlet = CheckResult::new("dirichlet_reduction", EXACT_TOL);
    let mut fd = CheckResult::new("fd_reduction", EXACT_TOL);
    let mut aggregation = CheckResult::new("mixture_aggregation", EXACT_TOL);
    let mut reconstruction = CheckResult::new("edl_softmax_reconstruction", EXACT_TOL);
    let mut decomposition = CheckResult::new("eu_decomposition", DECOMPOSITION_TOL);
    let mut pairwise = CheckResult::new("inter_pairwise", DECOMPOSITION_TOL);
    let mut dual = CheckResult::new("dual_sampling", cfg.mc_z);
    let mut oracle = CheckResult::new("moment_oracle", cfg.mc_z);

    for t in 0..cfg.trials {
        let cp = random_params(&mut root.substream_indexed("params", t as u64));
        let mean = subject.efd_mean(&cp);
        let k = cp.k();

        let d = subject.reduce(Reduction::Dirichlet, &cp);
        let dd = DirichletDist::new(cp.alpha().to_vec())?;
        let err = max_abs_diff(&subject.efd_mean(&d), dir_mean(&dd).as_slice())
            .max(max_abs_diff(&subject.efd_var(&d), &dir_var(&dd)));
        dirichlet.record(err, &cp);

        let f = subject.reduce(Reduction::Fd, &cp);
        let shared = cp.tau().iter().sum::<f64>() / k as f64;
        let a = cp.alpha_sum();
        let fd_mean: Vec<f64> = cp
            .alpha()
            .iter()
            .zip(cp.omega().as_slice())
            .map(|(al, w)| (al + shared * w) / (a + shared))
            .collect();
        let spread = max_abs_diff(f.tau(), &vec![shared; k]);
        fd.record(spread.max(max_abs_diff(&subject.efd_mean(&f), &fd_mean)), &cp);

        aggregation.record(max_abs_diff(&subject.mixture_aggregate(&cp), &mean), &cp);
        reconstruction.record(max_abs_diff(&subject.edl_softmax_reconstruct(&cp), &mean), &cp);

        let parts = subject.epistemic_parts(&cp);
        decomposition.record((parts.total() - subject.epistemic(&cp)).abs(), &cp);
        pairwise.record((subject.inter_pairwise(&cp) - parts.inter).abs(), &cp);

        if t < cfg.mc_trials {
            let mut rb = root.substream_indexed("basis", t as u64);
            let mut rm = root.substream_indexed("mixture", t as u64);
            let basis = moments(&mut || subject.sample_basis(&cp, &mut rb), k, cfg.mc_draws);
            let mixture = moments(&mut || subject.sample_mixture(&cp, &mut rm), k, cfg.mc_draws);
            dual.record(two_sample_z(&basis, &mixture), &cp);
            let var = subject.efd_var(&cp);
            oracle.record(oracle_z(&basis, &mean, &var).max(oracle_z(&mixture, &mean, &var)), &cp);
        }
    }
    Ok(SuiteReport {
        checks: vec![dirichlet, fd, aggregation, reconstruction, decomposition, pairwise, dual, oracle],
    })
}

/// `verify` entry point: prints the table, and the failing parameters on failure.
pub fn cmd_verify(cfg: &SuiteConfig) -> Result<SuiteReport, CliError> {
    let report = run_suite(&Library, cfg)?;
    print!("{}", report.table());
    if !report.passed() {
        eprintln!("failing parameters:\n{}", report.failures_json());
    }
    Ok(report)
}
