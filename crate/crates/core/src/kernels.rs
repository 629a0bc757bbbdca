//! Student-t similarity kernel, pairwise similarity matrices and soft pair
//! weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Clamp margin for probabilities entering a log.
pub const EPS_P: f64 = 1e-7;

// Lanczos approximation, g = 7, n = 9.
const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection: Γ(x)Γ(1-x) = π / sin(πx)
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS_COEF[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

pub fn gamma(x: f64) -> f64 {
    ln_gamma(x).exp()
}

/// Which embedding a kernel is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Y,
    Z,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConfig {
    nu: f64,
    pub applies_to: Space,
    /// `Γ((ν+1)/2) / (√(νπ) Γ(ν/2))`, the kernel value at zero distance.
    peak: f64,
}

impl KernelConfig {
    pub fn new(nu: f64, applies_to: Space) -> Result<Self> {
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(Error::Parameter(format!(
                "degrees of freedom must be positive, got {nu}"
            )));
        }
        let ln_peak = ln_gamma((nu + 1.0) / 2.0)
            - ln_gamma(nu / 2.0)
            - 0.5 * (nu * std::f64::consts::PI).ln();
        Ok(Self {
            nu,
            applies_to,
            peak: ln_peak.exp(),
        })
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    /// Unnormalized density at zero distance.
    pub fn peak(&self) -> f64 {
        self.peak
    }

    /// Kernel value divided by its value at zero distance, from a squared
    /// distance. Lies in `(0, 1]`.
    pub fn rescaled_sq(&self, d2: f64) -> f64 {
        (1.0 + d2 / self.nu).powf(-(self.nu + 1.0) / 2.0)
    }

    pub fn eval(&self, d: f64) -> f64 {
        self.peak * self.rescaled_sq(d * d)
    }
}

/// Student-t density of a distance `d ≥ 0` with `nu` degrees of freedom.
pub fn t_kernel(d: f64, nu: f64) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(Error::Parameter(format!("distance must be >= 0, got {d}")));
    }
    Ok(KernelConfig::new(nu, Space::Z)?.eval(d))
}

/// `Q[i][j] = S(‖e_i − e_j‖)`; with `rescale`, divided by `S(0)` so the
/// diagonal is exactly 1.
pub fn pairwise_q_with(emb: &Tensor, cfg: &KernelConfig, rescale: bool) -> Result<Tensor> {
    if !emb.is_finite() {
        return Err(Error::Numeric("embeddings contain non-finite values".into()));
    }
    let n = emb.rows();
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        q[i * n + i] = if rescale { 1.0 } else { cfg.peak() };
        for j in i + 1..n {
            let d2: f64 = emb
                .row(i)
                .iter()
                .zip(emb.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let mut v = cfg.rescaled_sq(d2);
            if !rescale {
                v *= cfg.peak();
            }
            q[i * n + j] = v;
            q[j * n + i] = v;
        }
    }
    Tensor::matrix(n, n, q)
}

pub fn pairwise_q(emb: &Tensor, cfg: &KernelConfig) -> Result<Tensor> {
    pairwise_q_with(emb, cfg, true)
}

/// Soft pair weight `(1 + h(e^β − 1))·q`, clamped to `[0, 1 − EPS_P]`.
pub fn soft_weight(q: f64, h: bool, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    Ok((soft_weight_factor(h, beta) * q).clamp(0.0, 1.0 - EPS_P))
}

pub(crate) fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Parameter(format!("beta must lie in [0, 1], got {beta}")));
    }
    Ok(())
}

/// The multiplier `R = 1 + h(e^β − 1)`.
pub fn soft_weight_factor(h: bool, beta: f64) -> f64 {
    if h {
        1.0 + beta.exp_m1()
    } else {
        1.0
    }
}

/// Binary positive/negative indicator over a batch, row-major `n × n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairIndicator {
    n: usize,
    h: Vec<bool>,
}

impl PairIndicator {
    /// All-negative indicator with the diagonal set.
    pub fn new(n: usize) -> Self {
        let mut h = vec![false; n * n];
        for i in 0..n {
            h[i * n + i] = true;
        }
        Self { n, h }
    }

    pub fn from_matrix(rows: &[Vec<u8>]) -> Result<Self> {
        let n = rows.len();
        let mut out = Self::new(n);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(Error::Dimension(format!("indicator row {i} is not length {n}")));
            }
            for (j, &v) in r.iter().enumerate() {
                match v {
                    0 | 1 => {
                        if i != j {
                            out.h[i * n + j] = v == 1;
                        }
                    }
                    other => {
                        return Err(Error::Parameter(format!(
                            "indicator entries must be 0 or 1, got {other}"
                        )))
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.h[i * self.n + j]
    }

    /// Sets a symmetric pair. The diagonal cannot be cleared.
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        if i != j {
            self.h[i * self.n + j] = v;
            self.h[j * self.n + i] = v;
        }
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.h[i * self.n..(i + 1) * self.n]
    }
}
