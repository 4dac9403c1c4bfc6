//! Run configuration: one flat TOML table covering data, training and evaluation.

use std::path::{Path, PathBuf};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use modex::data::{add_label_ambiguity, apply_imbalance, gen_blobs, load_csv, LabeledDataset};
use modex::nnet::{Ablation, Activation};
use modex::trainer::{Architecture, TrainConfig};
use modex::Rng;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Blobs,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Accuracy,
    Misclassification,
    Ood,
    Shift,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Label used in result files and report rows.
    pub method: String,
    /// Root seed. Every random component draws from a labelled substream of it.
    pub seed: u64,

    pub dataset: DatasetKind,
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub imbalance_rho: Option<f64>,
    pub ambiguity_fraction: f64,
    pub ambiguity_pairs: Vec<[usize; 2]>,
    pub test_per_class: usize,
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    /// Share of the training pool held out for early stopping.
    pub val_fraction: f64,

    pub max_epochs: usize,
    pub lr: f64,
    pub step_size: usize,
    pub gamma: f64,
    pub batch_size: usize,
    pub eps: f64,
    pub early_stop_patience: usize,
    pub fix_omega_uniform: bool,
    pub fix_tau_shared: bool,
    pub drop_omega_reg: bool,
    pub drop_tau_reg: bool,
    pub extractor_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub extractor_activation: Activation,
    pub head_activation: Activation,

    pub tasks: Vec<Task>,
    pub ood_offset_scale: f64,
    pub shift_severities: Vec<u8>,
    pub out_dir: PathBuf,
    pub report_formats: Vec<ReportFormat>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let arch = Architecture::tiny(32);
        Self {
            method: "modex".into(),
            seed: 0,
            dataset: DatasetKind::Blobs,
            classes: 5,
            per_class: 500,
            dim: 2,
            spread: 1.0,
            imbalance_rho: None,
            ambiguity_fraction: 0.0,
            ambiguity_pairs: Vec::new(),
            test_per_class: 200,
            train_csv: None,
            test_csv: None,
            val_fraction: 0.05,
            max_epochs: train.max_epochs,
            lr: train.lr,
            step_size: train.step_size,
            gamma: train.gamma,
            batch_size: train.batch_size,
            eps: train.eps,
            early_stop_patience: train.early_stop_patience,
            fix_omega_uniform: false,
            fix_tau_shared: false,
            drop_omega_reg: false,
            drop_tau_reg: false,
            extractor_widths: arch.extractor_widths,
            head_widths: arch.head_widths,
            extractor_activation: arch.extractor_activation,
            head_activation: arch.head_activation,
            tasks: vec![Task::Accuracy],
            ood_offset_scale: 5.0,
            shift_severities: vec![1, 3, 5],
            out_dir: PathBuf::from("runs"),
            report_formats: vec![ReportFormat::Csv, ReportFormat::Json],
        }
    }
}

/// Seed for one labelled component of a run.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    Rng::new(root).substream(label).next_u64()
}

pub struct Splits {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.classes < 2 || self.dim < 2 || self.per_class == 0 || self.test_per_class == 0 {
            return bad("classes and dim must be >= 2, per_class and test_per_class >= 1".into());
        }
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return bad(format!("spread must be finite and >= 0, got {}", self.spread));
        }
        if let Some(rho) = self.imbalance_rho {
            if !(rho > 0.0 && rho <= 1.0) {
                return bad(format!("imbalance_rho must lie in (0, 1], got {rho}"));
            }
        }
        if !(0.0..=1.0).contains(&self.ambiguity_fraction) {
            return bad(format!("ambiguity_fraction must lie in [0, 1], got {}", self.ambiguity_fraction));
        }
        if self.ambiguity_pairs.iter().flatten().any(|c| *c >= self.classes) {
            return bad("ambiguity_pairs names a class outside 0..classes".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        if self.dataset == DatasetKind::Csv && (self.train_csv.is_none() || self.test_csv.is_none()) {
            return bad("dataset = \"csv\" needs train_csv and test_csv".into());
        }
        if self.tasks.is_empty() {
            return bad("tasks must not be empty".into());
        }
        if !(self.ood_offset_scale > 0.0 && self.ood_offset_scale.is_finite()) {
            return bad(format!("ood_offset_scale must be positive, got {}", self.ood_offset_scale));
        }
        if self.shift_severities.iter().any(|s| !(1..=5).contains(s)) {
            return bad("shift_severities must lie in 1..=5".into());
        }
        self.train_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            fix_omega_uniform: self.fix_omega_uniform,
            fix_tau_shared: self.fix_tau_shared,
            drop_omega_reg: self.drop_omega_reg,
            drop_tau_reg: self.drop_tau_reg,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            max_epochs: self.max_epochs,
            lr: self.lr,
            step_size: self.step_size,
            gamma: self.gamma,
            batch_size: self.batch_size,
            eps: self.eps,
            seed: derive_seed(self.seed, "train"),
            early_stop_patience: self.early_stop_patience,
            ablation: self.ablation(),
            arch: Architecture {
                extractor_widths: self.extractor_widths.clone(),
                head_widths: self.head_widths.clone(),
                extractor_activation: self.extractor_activation,
                head_activation: self.head_activation,
            },
        }
    }

    /// Training, validation and test sets. Generated sets are a pure function
    /// of the config; the test set is balanced and drawn from its own stream.
    pub fn datasets(&self) -> Result<Splits, CliError> {
        let (pool, test) = match self.dataset {
            DatasetKind::Blobs => {
                let pool = gen_blobs(
                    self.classes,
                    self.per_class,
                    self.dim,
                    self.spread,
                    derive_seed(self.seed, "data-train"),
                )?;
                let test = gen_blobs(
                    self.classes,
                    self.test_per_class,
                    self.dim,
                    self.spread,
                    derive_seed(self.seed, "data-test"),
                )?;
                (pool, test)
            }
            DatasetKind::Csv => {
                let train = self.train_csv.as_deref().expect("validated");
                let test = self.test_csv.as_deref().expect("validated");
                (load_csv(train, Some(self.classes))?, load_csv(test, Some(self.classes))?)
            }
        };
        let mut pool = pool;
        if let Some(rho) = self.imbalance_rho {
            pool = apply_imbalance(&pool, rho, derive_seed(self.seed, "imbalance"))?;
        }
        if self.ambiguity_fraction > 0.0 && !self.ambiguity_pairs.is_empty() {
            let pairs: Vec<(usize, usize)> = self.ambiguity_pairs.iter().map(|p| (p[0], p[1])).collect();
            pool = add_label_ambiguity(&pool, self.ambiguity_fraction, &pairs, derive_seed(self.seed, "ambiguity"))?;
        }
        let (train, val) = pool.split(1.0 - self.val_fraction, derive_seed(self.seed, "split"));
        if train.is_empty() || val.is_empty() {
            return Err(CliError::Config("training pool too small for the validation split".into()));
        }
        if test.dim() != train.dim() {
            return Err(CliError::Config("train and test data disagree on the feature count".into()));
        }
        Ok(Splits { train, val, test })
    }
}
