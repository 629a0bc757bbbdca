//! Datasets: synthetic Gaussian mixtures, CSV interchange, train/test splits
//! and per-feature standardization.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Samples with optional labels. Training code only ever receives `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub labels: Option<Vec<usize>>,
    pub feature_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(x: Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        if x.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "dataset must be a matrix, got shape {:?}",
                x.shape()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != x.rows() {
                return Err(Error::Dimension(format!(
                    "{} labels for {} samples",
                    l.len(),
                    x.rows()
                )));
            }
        }
        Ok(Self {
            x,
            labels,
            feature_names: None,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Number of distinct label values (`max + 1`), or 0 when unlabeled.
    pub fn num_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max().map(|m| m + 1))
            .unwrap_or(0)
    }

    /// Rows `idx` with matching labels.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            x: self.x.select_rows(idx)?,
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
            feature_names: self.feature_names.clone(),
        })
    }
}

/// `k` unit-covariance Gaussians with means at `separation` times random unit
/// directions. Sample `i` belongs to cluster `i mod k`.
pub fn gen_gaussian_mixture(k: usize, d: usize, n: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if k == 0 || d == 0 || n < k {
        return Err(Error::Parameter(format!(
            "need k >= 1, d >= 1 and n >= k, got k={k} d={d} n={n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|a| separation * a / norm).collect()
        })
        .collect();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        labels.push(c);
        for m in &means[c] {
            data.push(m + rng.sample::<f64, _>(StandardNormal));
        }
    }
    Dataset::new(Tensor::matrix(n, d, data)?, Some(labels))
}

/// Reads a headered CSV of floats. A final column named `label` is parsed as
/// nonnegative integers.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text).map_err(|e| e.context(path.display()))
}

pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Structure { line: 1, msg: "missing header row".into() });
    }
    let has_label = header.last().map(String::as_str) == Some("label");
    let d = header.len() - usize::from(has_label);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::Parse { line, msg: e.to_string() }
        })?;
        let line = rec.position().map_or(rows + 2, |p| p.line() as usize);
        if rec.len() != header.len() {
            return Err(Error::Structure {
                line,
                msg: format!("{} fields, header has {}", rec.len(), header.len()),
            });
        }
        for (j, field) in rec.iter().enumerate() {
            if has_label && j == d {
                let v: usize = field.parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("label {field:?} is not a nonnegative integer"),
                })?;
                labels.push(v);
            } else {
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("column {:?}: {field:?} is not a number", header[j]),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse { line, msg: format!("non-finite value {field:?}") });
                }
                data.push(v);
            }
        }
        rows += 1;
    }
    let mut ds = Dataset::new(Tensor::matrix(rows, d, data)?, has_label.then_some(labels))?;
    ds.feature_names = Some(header[..d].to_vec());
    Ok(ds)
}

/// Writes the dataset with 17 significant digits per value, so every `f64`
/// reads back bit-exactly.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, format_csv(ds)).map_err(|e| Error::io(path, e))
}

pub fn format_csv(ds: &Dataset) -> String {
    let names: Vec<String> = match &ds.feature_names {
        Some(n) if n.len() == ds.dim() => n.clone(),
        _ => (0..ds.dim()).map(|j| format!("x{j}")).collect(),
    };
    let mut out = names.join(",");
    if ds.labels.is_some() {
        out.push_str(",label");
    }
    out.push('\n');
    for i in 0..ds.len() {
        let mut fields: Vec<String> = ds.x.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        if let Some(l) = &ds.labels {
            fields.push(l[i].to_string());
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Seeded shuffle split into `(train, test)` with
/// `round(fraction · n)` training rows.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (tr, te) = split_indices(ds.len(), train_fraction, seed)?;
    Ok((ds.subset(&tr)?, ds.subset(&te)?))
}

pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Parameter(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Parameter(format!(
            "fraction {train_fraction} of {n} samples leaves one side empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

/// Per-feature statistics from a training set.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(train: &Tensor) -> Result<Self> {
        let (n, d) = (train.rows(), train.cols());
        if n == 0 {
            return Err(Error::Parameter("cannot standardize an empty set".into()));
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(train.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(train.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n as f64).sqrt()).collect();
        Ok(Self { mean, std })
    }

    /// `(x − mean) / std`; features with zero spread pass through unchanged.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "{} features, statistics cover {}",
                x.cols(),
                self.mean.len()
            )));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for ((v, m), s) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                if *s > 0.0 {
                    *v = (*v - m) / s;
                }
            }
        }
        Ok(out)
    }
}

/// Fits on `train` and applies to `train` followed by every set in
/// `others`.
pub fn standardize(train: &Dataset, others: &[&Dataset]) -> Result<(Vec<Dataset>, Standardizer)> {
    let st = Standardizer::fit(&train.x)?;
    let mut out = Vec::with_capacity(others.len() + 1);
    for ds in std::iter::once(train).chain(others.iter().copied()) {
        out.push(Dataset {
            x: st.apply(&ds.x)?,
            ..ds.clone()
        });
    }
    Ok((out, st))
}
