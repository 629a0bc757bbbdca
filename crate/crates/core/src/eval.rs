//! Embedding quality measures: a linear probe, k-means clustering accuracy
//! with optimal cluster-to-label matching, and the distribution of cosine
//! similarities between original and augmented embeddings.

use nalgebra::{DMatrix, SymmetricEigen};
use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    /// Multinomial logistic regression.
    Logistic,
    /// Multiclass hinge loss (linear SVM).
    Hinge,
}

impl std::fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProbeKind::Logistic => "logistic",
            ProbeKind::Hinge => "hinge",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    pub iterations: usize,
    pub step: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            kind: ProbeKind::Logistic,
            iterations: 2000,
            step: 0.1,
            l2: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub correct: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub probe_kind: ProbeKind,
}

/// Centering and ZCA whitening fitted on the training embeddings. Both are
/// equivariant under rotations, so the probe is too.
struct Whitener {
    mean: Vec<f64>,
    w: DMatrix<f64>,
}

impl Whitener {
    fn fit(x: &Tensor) -> Self {
        let (n, d) = (x.rows(), x.cols());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v / n as f64;
            }
        }
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for i in 0..n {
            let r: Vec<f64> = x.row(i).iter().zip(&mean).map(|(v, m)| v - m).collect();
            for a in 0..d {
                for b in a..d {
                    cov[(a, b)] += r[a] * r[b] / n as f64;
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                cov[(a, b)] = cov[(b, a)];
            }
        }
        let eig = SymmetricEigen::new(cov);
        let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let floor = (top * 1e-6).max(1e-12);
        let scale = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / (l.max(0.0) + floor).sqrt()));
        let w = &eig.eigenvectors * scale * eig.eigenvectors.transpose();
        Self { mean, w }
    }

    fn apply(&self, x: &Tensor) -> Vec<Vec<f64>> {
        let d = self.mean.len();
        (0..x.rows())
            .map(|i| {
                let r: Vec<f64> = x.row(i).iter().zip(&self.mean).map(|(v, m)| v - m).collect();
                (0..d)
                    .map(|a| (0..d).map(|b| self.w[(a, b)] * r[b]).sum())
                    .collect()
            })
            .collect()
    }
}

fn scores(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
    w.iter()
        .zip(b)
        .map(|(wc, bc)| bc + wc.iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
        .collect()
}

fn argmax(s: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in s.iter().enumerate() {
        if *v > s[best] {
            best = j;
        }
    }
    best
}

fn check_embeddings(name: &str, x: &Tensor, labels: &[usize]) -> Result<()> {
    if x.rows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{name}: {} rows, {} labels",
            x.rows(),
            labels.len()
        )));
    }
    if !x.is_finite() {
        return Err(Error::Numeric(format!("{name} embeddings are not finite")));
    }
    Ok(())
}

/// Fits a linear classifier on frozen training embeddings by full-batch
/// gradient descent and reports test accuracy.
pub fn linear_probe(
    train_emb: &Tensor,
    train_labels: &[usize],
    test_emb: &Tensor,
    test_labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    check_embeddings("train", train_emb, train_labels)?;
    check_embeddings("test", test_emb, test_labels)?;
    if train_emb.cols() != test_emb.cols() {
        return Err(Error::Dimension(format!(
            "train has {} features, test has {}",
            train_emb.cols(),
            test_emb.cols()
        )));
    }
    let mut distinct = train_labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Protocol("probe needs at least two classes in train".into()));
    }
    let classes = 1 + train_labels.iter().chain(test_labels).max().copied().unwrap_or(0);
    let d = train_emb.cols();
    let n = train_labels.len() as f64;

    let white = Whitener::fit(train_emb);
    let xs = white.apply(train_emb);
    let mut w = vec![vec![0.0; d]; classes];
    let mut b = vec![0.0; classes];
    for _ in 0..cfg.iterations {
        let mut gw = vec![vec![0.0; d]; classes];
        let mut gb = vec![0.0; classes];
        for (x, &y) in xs.iter().zip(train_labels) {
            let s = scores(&w, &b, x);
            let coef: Vec<f64> = match cfg.kind {
                ProbeKind::Logistic => {
                    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    e.iter()
                        .enumerate()
                        .map(|(c, v)| v / z - if c == y { 1.0 } else { 0.0 })
                        .collect()
                }
                ProbeKind::Hinge => {
                    let mut coef = vec![0.0; classes];
                    for c in 0..classes {
                        if c != y && 1.0 + s[c] - s[y] > 0.0 {
                            coef[c] += 1.0;
                            coef[y] -= 1.0;
                        }
                    }
                    coef
                }
            };
            for c in 0..classes {
                if coef[c] != 0.0 {
                    for (g, v) in gw[c].iter_mut().zip(x) {
                        *g += coef[c] * v;
                    }
                    gb[c] += coef[c];
                }
            }
        }
        for c in 0..classes {
            for (wv, g) in w[c].iter_mut().zip(&gw[c]) {
                *wv -= cfg.step * (g / n + cfg.l2 * *wv);
            }
            b[c] -= cfg.step * gb[c] / n;
        }
    }

    let correct = white
        .apply(test_emb)
        .iter()
        .zip(test_labels)
        .filter(|(x, &y)| argmax(&scores(&w, &b, x)) == y)
        .count();
    let n_test = test_labels.len();
    Ok(ProbeReport {
        accuracy: if n_test == 0 { 0.0 } else { correct as f64 / n_test as f64 },
        correct,
        n_train: train_labels.len(),
        n_test,
        seed: cfg.seed,
        probe_kind: cfg.kind,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// One Lloyd run from k-means++ seeding; returns `(assignment, inertia)`.
fn lloyd(x: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, f64) {
    let n = x.rows();
    let mut centers: Vec<Vec<f64>> = vec![x.row(rng.random_range(0..n)).to_vec()];
    let mut best_d: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = best_d.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, d) in best_d.iter().enumerate() {
                if u < *d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.push(x.row(pick).to_vec());
        for (i, bd) in best_d.iter_mut().enumerate() {
            *bd = bd.min(sq_dist(x.row(i), &centers[centers.len() - 1]));
        }
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..300 {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(x.row(i), center);
                if d < bd {
                    bd = d;
                    best = c;
                }
            }
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; x.cols()]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = assign
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(x.row(i), &centers[a]))
        .sum();
    (assign, inertia)
}

/// Largest total agreement between clusters and labels under a one-to-one
/// matching.
pub fn matched_agreement(assign: &[usize], labels: &[usize]) -> usize {
    let size = 1 + assign.iter().chain(labels).max().copied().unwrap_or(0);
    let mut counts = Matrix::new(size, size, 0i64);
    for (&a, &l) in assign.iter().zip(labels) {
        counts[(a, l)] += 1;
    }
    kuhn_munkres(&counts).0 as usize
}

/// Best-inertia k-means (k-means++ seeding, 20 restarts) scored against
/// `labels` after optimal cluster-to-label matching.
pub fn kmeans_accuracy(emb: &Tensor, labels: &[usize], k: usize, seed: u64) -> Result<f64> {
    let n = emb.rows();
    if k == 0 || n < k {
        return Err(Error::Parameter(format!("need 1 <= k <= n, got k={k}, n={n}")));
    }
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} rows", labels.len())));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for restart in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(restart);
        let (assign, inertia) = lloyd(emb, k, &mut rng);
        if best.as_ref().is_none_or(|(_, b)| inertia < *b) {
            best = Some((assign, inertia));
        }
    }
    let (assign, _) = best.expect("at least one restart");
    Ok(matched_agreement(&assign, labels) as f64 / n as f64)
}

/// Histogram of per-pair cosine similarities on 50 equal bins over `[−1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineProfile {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub similarities: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub const COSINE_BINS: usize = 50;

impl CosineProfile {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,count\n");
        for (b, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", self.edges[b], self.edges[b + 1], c));
        }
        out
    }
}

pub fn cosine_similarity_profile(orig: &Tensor, aug: &Tensor) -> Result<CosineProfile> {
    if orig.rows() != aug.rows() || orig.cols() != aug.cols() {
        return Err(Error::Dimension(format!(
            "paired embeddings differ in shape: {:?} vs {:?}",
            orig.shape(),
            aug.shape()
        )));
    }
    let mut sims = Vec::with_capacity(orig.rows());
    for i in 0..orig.rows() {
        let (a, b) = (orig.row(i), aug.row(i));
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::Numeric(format!("row {i} has a zero-norm vector")));
        }
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        sims.push((dot / (na * nb)).clamp(-1.0, 1.0));
    }
    let edges: Vec<f64> = (0..=COSINE_BINS)
        .map(|b| -1.0 + 2.0 * b as f64 / COSINE_BINS as f64)
        .collect();
    let mut counts = vec![0; COSINE_BINS];
    for s in &sims {
        let b = (((s + 1.0) / 2.0) * COSINE_BINS as f64).floor() as usize;
        counts[b.min(COSINE_BINS - 1)] += 1;
    }
    let m = sims.len().max(1) as f64;
    let mean = sims.iter().sum::<f64>() / m;
    let std = (sims.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / m).sqrt();
    Ok(CosineProfile {
        edges,
        counts,
        similarities: sims,
        mean,
        std,
    })
}
