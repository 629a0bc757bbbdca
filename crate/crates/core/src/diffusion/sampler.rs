use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::denoiser::Denoiser;
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One reverse step given the predicted noise:
/// `x_{t−1} = (x_t − (1−α_t)/√(1−ᾱ_t) · ε̂) / √α_t + σ_t · noise`.
/// At `t = 1` the noise term is dropped.
pub fn denoise_step_with_prediction(
    x_t: &Tensor,
    t: usize,
    eps_pred: &Tensor,
    sched: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    if x_t.shape() != eps_pred.shape() || x_t.shape() != noise.shape() {
        return Err(Error::Dimension(format!(
            "state {:?}, prediction {:?}, noise {:?}",
            x_t.shape(),
            eps_pred.shape(),
            noise.shape()
        )));
    }
    let a = sched.alpha(t)?;
    let ab = sched.alpha_bar(t)?;
    let sigma = if t == 1 { 0.0 } else { sched.sigma(t)? };
    let coef = (1.0 - a) / (1.0 - ab).sqrt();
    let inv_sqrt_a = 1.0 / a.sqrt();
    let mut out = x_t.clone();
    for ((o, e), n) in out.data_mut().iter_mut().zip(eps_pred.data()).zip(noise.data()) {
        *o = inv_sqrt_a * (*o - coef * e) + if t == 1 { 0.0 } else { sigma * n };
    }
    Ok(out)
}

/// One reverse step using the denoiser's prediction. `x_t` is
/// `[batch × data_dim]`; `cond` is `[batch × cond_dim]` for a conditional
/// model.
pub fn denoise_step(
    x_t: &Tensor,
    t: usize,
    cond: Option<&Tensor>,
    denoiser: &Denoiser,
    sched: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    let steps = vec![t; x_t.rows()];
    let eps = denoiser.predict(x_t, &steps, cond)?;
    let eps = eps.reshape(x_t.shape().to_vec())?;
    denoise_step_with_prediction(x_t, t, &eps, sched, noise)
}

fn normal_tensor<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("finite normals")
}

/// Runs the full reverse chain `t = T..1` from `δ ~ N(0, I)` for `rows`
/// samples, drawing all randomness from `rng`.
pub fn generate_batch<R: Rng + ?Sized>(
    cond: Option<&Tensor>,
    rows: usize,
    denoiser: &Denoiser,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    if let Some(c) = cond {
        if c.rows() != rows {
            return Err(Error::Dimension(format!(
                "{} condition rows for {rows} samples",
                c.rows()
            )));
        }
    }
    let d = denoiser.data_dim;
    let mut x = normal_tensor(rows, d, rng);
    for t in (1..=sched.steps()).rev() {
        let noise = if t > 1 {
            normal_tensor(rows, d, rng)
        } else {
            Tensor::zeros(&[rows, d])
        };
        x = denoise_step(&x, t, cond, denoiser, sched, &noise)
            .map_err(|e| e.context(format!("reverse step {t}")))?;
        if !x.is_finite() {
            return Err(Error::Numeric(format!("non-finite sample at reverse step {t}")));
        }
    }
    Ok(x)
}

/// One sample for condition `z_cond` (a single row, or `None` for an
/// unconditional model). A pure function of the seed, condition and weights.
pub fn generate(
    z_cond: Option<&Tensor>,
    denoiser: &Denoiser,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cond = match z_cond {
        Some(z) => Some(z.clone().reshape(vec![1, z.len()])?),
        None => None,
    };
    let out = generate_batch(cond.as_ref(), 1, denoiser, sched, &mut rng)?;
    out.reshape(vec![denoiser.data_dim])
}
