//! `train` and `eval`.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use modex::data::gen_ood;
use modex::eval::{misclassification_task, ood_task, shift_task, DetectionResult};
use modex::nnet::{load_checkpoint, save_checkpoint, ModelState};
use modex::trainer::{accuracy, train, History};

use crate::config::{derive_seed, ReportFormat, RunConfig, Task};
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";

pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub history_path: PathBuf,
    pub history: History,
    pub model: ModelState,
}

/// Train on the configured data and write the checkpoint and history into `out_dir`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutput, CliError> {
    let splits = cfg.datasets()?;
    let (model, history) = train(&cfg.train_config(), &splits.train, &splits.val).map_err(|e| match e {
        modex::Error::Training(msg) => CliError::Divergence(msg),
        other => CliError::Core(other),
    })?;
    fs::create_dir_all(&cfg.out_dir)?;
    let checkpoint = cfg.out_dir.join(CHECKPOINT_FILE);
    let history_path = cfg.out_dir.join(HISTORY_FILE);
    save_checkpoint(&model, &checkpoint)?;
    history.write_csv(&history_path)?;
    log::info!(
        "trained {} epochs (best {}), wrote {}",
        history.epochs.len(),
        history.best_epoch,
        checkpoint.display()
    );
    Ok(TrainOutput {
        checkpoint,
        history_path,
        history,
        model,
    })
}

/// One line of a results file. Metrics are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub task: String,
    pub dataset: String,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
    pub n_pos: Option<usize>,
    pub n_neg: Option<usize>,
}

impl ResultRow {
    fn detection(cfg: &RunConfig, task: String, dataset: String, r: &DetectionResult) -> Self {
        Self {
            method: cfg.method.clone(),
            task,
            dataset,
            seed: cfg.seed,
            accuracy: None,
            auroc: Some(100.0 * r.auroc),
            aupr: Some(100.0 * r.aupr),
            n_pos: Some(r.n_pos),
            n_neg: Some(r.n_neg),
        }
    }

    /// The headline number: accuracy, or AUPR for detection tasks.
    pub fn headline(&self) -> Option<f64> {
        self.accuracy.or(self.aupr)
    }
}

pub fn results_stem(cfg: &RunConfig) -> String {
    format!("results-{}-seed{}", cfg.method, cfg.seed)
}

fn load_model(path: &Path) -> Result<ModelState, CliError> {
    load_checkpoint(path).map_err(|e| match e {
        modex::Error::Io(io) if io.kind() == ErrorKind::NotFound => {
            CliError::Incompatible(format!("checkpoint {} not found", path.display()))
        }
        other => CliError::Incompatible(format!("checkpoint {}: {other}", path.display())),
    })
}

/// Run the configured tasks against a checkpoint and write the results files.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<Vec<ResultRow>, CliError> {
    let model = load_model(checkpoint)?;
    let splits = cfg.datasets()?;
    let test = &splits.test;
    if model.input_dim != test.dim() || model.classes != test.classes {
        return Err(CliError::Incompatible(format!(
            "checkpoint expects D={} K={}, data has D={} K={}",
            model.input_dim,
            model.classes,
            test.dim(),
            test.classes
        )));
    }
    let name = test.meta.name.clone();
    let mut rows = Vec::new();
    for task in &cfg.tasks {
        match task {
            Task::Accuracy => rows.push(ResultRow {
                method: cfg.method.clone(),
                task: "accuracy".into(),
                dataset: name.clone(),
                seed: cfg.seed,
                accuracy: Some(100.0 * accuracy(&model, test)?),
                auroc: None,
                aupr: None,
                n_pos: None,
                n_neg: None,
            }),
            Task::Misclassification => match misclassification_task(&model, test) {
                Ok(r) => rows.push(ResultRow::detection(cfg, "misclassification".into(), name.clone(), &r)),
                Err(modex::Error::Domain(msg)) => log::warn!("misclassification skipped: {msg}"),
                Err(e) => return Err(e.into()),
            },
            Task::Ood => {
                let ood = gen_ood(test, cfg.ood_offset_scale, derive_seed(cfg.seed, "ood"))?;
                let r = ood_task(&model, test, &ood)?;
                let dataset = format!("{name}|ood-x{}", cfg.ood_offset_scale);
                rows.push(ResultRow::detection(cfg, "ood".into(), dataset, &r));
            }
            Task::Shift => {
                let results = shift_task(&model, test, &cfg.shift_severities, derive_seed(cfg.seed, "shift"))?;
                for (s, r) in results {
                    rows.push(ResultRow::detection(cfg, format!("shift-s{s}"), format!("{name}-c{s}"), &r));
                }
            }
        }
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let stem = results_stem(cfg);
    for format in &cfg.report_formats {
        match format {
            ReportFormat::Csv => write_results_csv(&rows, &cfg.out_dir.join(format!("{stem}.csv")))?,
            ReportFormat::Json => {
                let text = serde_json::to_string_pretty(&rows).map_err(modex::Error::from)?;
                fs::write(cfg.out_dir.join(format!("{stem}.json")), text + "\n")?;
            }
        }
    }
    Ok(rows)
}

pub fn write_results_csv(rows: &[ResultRow], path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    r.deserialize()
        .map(|row| row.map_err(|e| CliError::Config(format!("{}: {e}", path.display()))))
        .collect()
}

fn csv_error(e: csv::Error) -> CliError {
    CliError::Io(std::io::Error::new(ErrorKind::Other, e.to_string()))
}
