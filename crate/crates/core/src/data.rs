//! Synthetic classification benchmarks and CSV ingestion.
//!
//! Blobs are isotropic Gaussian clusters whose centroids sit evenly on a
//! circle of radius [`CENTROID_RADIUS`] in the first two feature dimensions.
//! The layout depends only on `(K, D)`, so train and test sets drawn with
//! different seeds share their centroids.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::numerics::{norm2, Matrix, Rng};

pub const CENTROID_RADIUS: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    /// Tail-to-head class-count ratio, when long-tailed.
    pub imbalance_rho: Option<f64>,
    /// Corruption noise scale relative to the feature std, when corrupted.
    pub noise_level: Option<f64>,
    pub seed: u64,
    pub class_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub meta: DatasetMeta,
}

fn class_counts(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for y in labels {
        counts[*y] += 1;
    }
    counts
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, classes: usize, name: &str, seed: u64) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|y| **y >= classes) {
            return domain(format!("label {bad} out of range for {classes} classes"));
        }
        Ok(Self {
            meta: DatasetMeta {
                name: name.to_string(),
                imbalance_rho: None,
                noise_level: None,
                seed,
                class_counts: class_counts(&labels, classes),
            },
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn rows(&self) -> Vec<&[f64]> {
        (0..self.len()).map(|i| self.x(i)).collect()
    }

    /// Rows `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.x(i));
            labels.push(self.labels[i]);
        }
        let mut meta = self.meta.clone();
        meta.class_counts = class_counts(&labels, self.classes);
        Self {
            features: Matrix::from_vec(indices.len(), d, data).expect("rows of a valid matrix"),
            labels,
            classes: self.classes,
            meta,
        }
    }

    /// The first `n` rows.
    pub fn prefix(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Random split; the first part receives `round(fraction · N)` rows.
    pub fn split(&self, fraction: f64, seed: u64) -> (Self, Self) {
        let perm = Rng::new(seed).substream("split").permutation(self.len());
        let n_first = ((self.len() as f64) * fraction).round() as usize;
        let (a, b) = perm.split_at(n_first.min(self.len()));
        (self.subset(a), self.subset(b))
    }

    /// Per-class feature means; classes without rows are `None`.
    pub fn class_means(&self) -> Vec<Option<Vec<f64>>> {
        let d = self.dim();
        let mut sums = vec![vec![0.0; d]; self.classes];
        let mut counts = vec![0usize; self.classes];
        for (i, y) in self.labels.iter().enumerate() {
            counts[*y] += 1;
            for (s, x) in sums[*y].iter_mut().zip(self.x(i)) {
                *s += x;
            }
        }
        sums.into_iter()
            .zip(counts)
            .map(|(s, c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
            .collect()
    }

    /// Per-feature population standard deviation.
    pub fn feature_std(&self) -> Vec<f64> {
        let n = self.len() as f64;
        (0..self.dim())
            .map(|j| {
                let mean = (0..self.len()).map(|i| self.features.get(i, j)).sum::<f64>() / n;
                let var = (0..self.len())
                    .map(|i| (self.features.get(i, j) - mean).powi(2))
                    .sum::<f64>()
                    / n;
                var.sqrt()
            })
            .collect()
    }
}

/// Centroid of class `k` in the blob layout.
pub fn blob_centroid(k: usize, classes: usize, dim: usize) -> Vec<f64> {
    let angle = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
    let mut c = vec![0.0; dim];
    c[0] = CENTROID_RADIUS * angle.cos();
    c[1] = CENTROID_RADIUS * angle.sin();
    c
}

/// Balanced Gaussian blobs, `per_class` rows per class, class-major order.
pub fn gen_blobs(classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<LabeledDataset> {
    if classes < 2 || per_class == 0 || dim < 2 {
        return domain("blobs need K >= 2, per_class >= 1, D >= 2");
    }
    if !spread.is_finite() || spread < 0.0 {
        return domain("spread must be finite and >= 0");
    }
    let mut rng = Rng::new(seed).substream("blobs");
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for k in 0..classes {
        let c = blob_centroid(k, classes, dim);
        for _ in 0..per_class {
            data.extend(c.iter().map(|m| m + spread * rng.normal()));
            labels.push(k);
        }
    }
    LabeledDataset::new(Matrix::from_vec(n, dim, data)?, labels, classes, "blobs", seed)
}

/// Long-tailed subsample: class `k` keeps `⌈n_head · rho^(k/(K−1))⌉` rows.
pub fn apply_imbalance(ds: &LabeledDataset, rho: f64, seed: u64) -> Result<LabeledDataset> {
    if !(rho > 0.0 && rho <= 1.0) {
        return domain(format!("imbalance ratio must lie in (0, 1], got {rho}"));
    }
    let counts = &ds.meta.class_counts;
    let n_head = counts.iter().copied().max().unwrap_or(0);
    if counts.iter().any(|c| *c != n_head) {
        return domain("imbalance is applied to a balanced dataset");
    }
    let k_minus_1 = (ds.classes - 1) as f64;
    let targets: Vec<usize> = (0..ds.classes)
        .map(|k| {
            let exact = n_head as f64 * rho.powf(k as f64 / k_minus_1);
            // absorb rounding noise such as 10.000000000000002
            (exact - 1e-9).ceil().max(0.0) as usize
        })
        .collect();
    if targets.last().copied().unwrap_or(0) == 0 {
        return domain("imbalance leaves the tail class empty");
    }
    let mut rng = Rng::new(seed).substream("imbalance");
    let mut keep = Vec::new();
    for (k, target) in targets.iter().enumerate() {
        let members: Vec<usize> = (0..ds.len()).filter(|i| ds.labels[*i] == k).collect();
        let perm = rng.permutation(members.len());
        let mut chosen: Vec<usize> = perm[..*target].iter().map(|p| members[*p]).collect();
        chosen.sort_unstable();
        keep.extend(chosen);
    }
    keep.sort_unstable();
    let mut out = ds.subset(&keep);
    out.meta.imbalance_rho = Some(rho);
    out.meta.name = format!("{}-lt", ds.meta.name);
    Ok(out)
}

/// Blend a `fraction` of each listed class with random rows of its partner
/// class (50/50 convex combination). Labels are unchanged.
pub fn add_label_ambiguity(
    ds: &LabeledDataset,
    fraction: f64,
    pairs: &[(usize, usize)],
    seed: u64,
) -> Result<LabeledDataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return domain(format!("ambiguity fraction must lie in [0, 1], got {fraction}"));
    }
    for (a, b) in pairs {
        for c in [a, b] {
            if *c >= ds.classes {
                return Err(Error::Index { index: *c, len: ds.classes });
            }
        }
    }
    let mut out = ds.clone();
    let mut rng = Rng::new(seed).substream("ambiguity");
    for (a, b) in pairs {
        for (own, partner) in [(*a, *b), (*b, *a)] {
            let members: Vec<usize> = (0..ds.len()).filter(|i| ds.labels[*i] == own).collect();
            let partners: Vec<usize> = (0..ds.len()).filter(|i| ds.labels[*i] == partner).collect();
            if members.is_empty() || partners.is_empty() {
                continue;
            }
            let n_blend = (fraction * members.len() as f64).round() as usize;
            let perm = rng.permutation(members.len());
            for p in &perm[..n_blend] {
                let i = members[*p];
                let j = partners[rng.below(partners.len())];
                for c in 0..ds.dim() {
                    let v = 0.5 * ds.features.get(i, c) + 0.5 * ds.features.get(j, c);
                    out.features.set(i, c, v);
                }
            }
        }
    }
    Ok(out)
}

/// Additive Gaussian corruption with per-feature std `severity · 0.25 · std(feature)`.
pub fn corrupt(ds: &LabeledDataset, severity: u8, seed: u64) -> Result<LabeledDataset> {
    if !(1..=5).contains(&severity) {
        return domain(format!("severity must lie in 1..=5, got {severity}"));
    }
    let scale = 0.25 * f64::from(severity);
    let std = ds.feature_std();
    let mut rng = Rng::new(seed).substream_indexed("corrupt", u64::from(severity));
    let mut out = ds.clone();
    for i in 0..ds.len() {
        for (j, s) in std.iter().enumerate() {
            let v = ds.features.get(i, j) + scale * s * rng.normal();
            out.features.set(i, j, v);
        }
    }
    out.meta.noise_level = Some(scale);
    out.meta.name = format!("{}-c{severity}", ds.meta.name);
    Ok(out)
}

/// Out-of-distribution features: resampled rows of `ds` translated together
/// along a random direction by `offset_scale · (2 R + D_max)`, where `R` is the
/// largest centroid distance from the centroid mean and `D_max` the largest
/// inter-centroid distance. At scale zero the output follows the ID distribution.
pub fn gen_ood(ds: &LabeledDataset, offset_scale: f64, seed: u64) -> Result<Matrix> {
    if !offset_scale.is_finite() || offset_scale < 0.0 {
        return domain(format!("offset scale must be finite and >= 0, got {offset_scale}"));
    }
    if ds.is_empty() {
        return domain("OOD generation needs a nonempty reference set");
    }
    let centroids: Vec<Vec<f64>> = ds.class_means().into_iter().flatten().collect();
    let d = ds.dim();
    let mut center = vec![0.0; d];
    for c in &centroids {
        for (m, v) in center.iter_mut().zip(c) {
            *m += v / centroids.len() as f64;
        }
    }
    let dist = |a: &[f64], b: &[f64]| norm2(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>());
    let hull_radius = centroids.iter().map(|c| dist(c, &center)).fold(0.0, f64::max);
    let mut max_between = 0.0f64;
    for (i, a) in centroids.iter().enumerate() {
        for b in &centroids[i + 1..] {
            max_between = max_between.max(dist(a, b));
        }
    }
    let mut rng = Rng::new(seed).substream("ood");
    let mut dir: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let n = norm2(&dir);
    dir.iter_mut().for_each(|x| *x /= n);
    let magnitude = offset_scale * (2.0 * hull_radius + max_between);
    let mut data = Vec::with_capacity(ds.len() * d);
    for _ in 0..ds.len() {
        let j = rng.below(ds.len());
        data.extend(ds.x(j).iter().zip(&dir).map(|(x, u)| x + magnitude * u));
    }
    Matrix::from_vec(ds.len(), d, data)
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    classes: usize,
    meta: DatasetMeta,
}

/// Write `f0,…,f{D−1},label` rows plus a `<path>.meta.json` sidecar.
pub fn save_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(csv_io)?;
    for i in 0..ds.len() {
        let mut row: Vec<String> = ds.x(i).iter().map(|v| format!("{v:?}")).collect();
        row.push(ds.labels[i].to_string());
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush()?;
    let side = Sidecar {
        classes: ds.classes,
        meta: ds.meta.clone(),
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line: 0,
            msg: format!("{other:?}"),
        },
    }
}

/// Read a dataset written by [`save_csv`] or by hand. The class count comes
/// from the sidecar when present, else from `classes`, else `max label + 1`.
pub fn load_csv(path: &Path, classes: Option<usize>) -> Result<LabeledDataset> {
    let side: Option<Sidecar> = match std::fs::read_to_string(sidecar_path(path)) {
        Ok(s) => Some(serde_json::from_str(&s)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(csv_io)?;
    let header = rdr.headers().map_err(|e| parse_err(1, e))?.clone();
    if header.is_empty() || header.iter().all(str::is_empty) {
        return Err(Error::Parse {
            line: 1,
            msg: "empty file".into(),
        });
    }
    let d = header.len() - 1;
    let expected: Vec<String> = (0..d).map(|j| format!("f{j}")).chain(["label".to_string()]).collect();
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header must be f0..f{},label", d.saturating_sub(1)),
        });
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e)
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        for cell in rec.iter().take(d) {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("non-numeric cell {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("non-finite cell {cell:?}"),
                });
            }
            data.push(v);
        }
        let label = &rec[d];
        let y: usize = label.trim().parse().map_err(|_| Error::Parse {
            line,
            msg: format!("label {label:?} is not a class index"),
        })?;
        if let Some(k) = side.as_ref().map(|s| s.classes).or(classes) {
            if y >= k {
                return Err(Error::Parse {
                    line,
                    msg: format!("label {y} >= class count {k}"),
                });
            }
        }
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(Error::Parse {
            line: 2,
            msg: "no data rows".into(),
        });
    }
    let k = side
        .as_ref()
        .map(|s| s.classes)
        .or(classes)
        .unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1).max(2));
    let n = labels.len();
    let mut ds = LabeledDataset::new(Matrix::from_vec(n, d, data)?, labels, k, "csv", 0)?;
    if let Some(s) = side {
        ds.meta = s.meta;
        ds.meta.class_counts = class_counts(&ds.labels, k);
    }
    Ok(ds)
}

fn parse_err(line: usize, e: csv::Error) -> Error {
    Error::Parse {
        line,
        msg: e.to_string(),
    }
}
