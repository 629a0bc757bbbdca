use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Per-step noise levels for a `T`-step diffusion. Steps are numbered
/// `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β schedule from `beta_start` to `beta_end`, `α_t = 1 − β_t`,
    /// `ᾱ_t = Π_{s≤t} α_s`, and posterior standard deviation
    /// `σ_t² = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · (1 − α_t)` with `σ_1 = 0`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Parameter("diffusion needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Parameter(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_alphas(betas.iter().map(|b| 1.0 - b).collect())
    }

    /// Schedule from explicit per-step `α_t` values.
    pub fn from_alphas(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() || alpha.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::Parameter(format!(
                "every alpha must lie in (0, 1), got {alpha:?}"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma = (0..alpha.len())
            .map(|i| {
                if i == 0 {
                    0.0
                } else {
                    ((1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i]) * (1.0 - alpha[i])).sqrt()
                }
            })
            .collect();
        Ok(Self {
            steps: alpha.len(),
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps {
            return Err(Error::Parameter(format!(
                "step {t} outside 1..={}",
                self.steps
            )));
        }
        Ok(t - 1)
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.idx(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.idx(t)?])
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok(self.sigma[self.idx(t)?])
    }
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(steps, beta_start, beta_end)
}

/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · delta`.
pub fn forward_noise(x0: &Tensor, t: usize, delta: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(delta, |x, d| a * x + b * d)
}

/// Row-wise variant where each row has its own step.
pub fn forward_noise_rows(
    x0: &Tensor,
    steps: &[usize],
    delta: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if steps.len() != x0.rows() || x0.shape() != delta.shape() {
        return Err(Error::Dimension(format!(
            "{} steps for {} rows; data {:?} vs noise {:?}",
            steps.len(),
            x0.rows(),
            x0.shape(),
            delta.shape()
        )));
    }
    let mut out = x0.clone();
    for (i, &t) in steps.iter().enumerate() {
        let ab = sched.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        for (o, d) in out.row_mut(i).iter_mut().zip(delta.row(i)) {
            *o = a * *o + b * d;
        }
    }
    Ok(out)
}

/// Sinusoidal step encoding: `sin(t·ω_k)` for the first half,
/// `cos(t·ω_k)` for the second, `ω_k = 10000^(−2k/channels)`.
pub fn time_encode(t: usize, channels: usize) -> Result<Tensor> {
    if channels == 0 || channels % 2 != 0 {
        return Err(Error::Parameter(format!(
            "time encoding needs an even, positive channel count, got {channels}"
        )));
    }
    let half = channels / 2;
    let mut out = vec![0.0; channels];
    for k in 0..half {
        let freq = 10000f64.powf(-((2 * k) as f64) / channels as f64);
        let arg = t as f64 * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    Tensor::vector(out)
}
