use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::background::Minibatch;
use super::encoder::Encoder;
use crate::diffusion::{forward_noise_rows, Denoiser, NoiseSchedule};
use crate::error::Result;
use crate::losses::{diffusion_loss_graph, infonce_loss_graph, scl_loss_graph, SclConfig};
use crate::numerics::{adamw_step, gradient, OptState, Tensor};

/// Encoder objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Scl,
    InfoNce,
}

/// Contrastive loss of `encoder` on `batch` and its parameter gradients.
pub fn contrastive_gradient(
    batch: &Minibatch,
    encoder: &Encoder,
    kind: LossKind,
    scl: &SclConfig,
) -> Result<(f64, Vec<Tensor>)> {
    gradient(encoder, |g, vars| {
        let x = g.input(batch.x.clone());
        let (y, z) = encoder.forward_graph(g, vars, x)?;
        match kind {
            LossKind::Scl => scl_loss_graph(g, y, z, &batch.pairs, scl),
            LossKind::InfoNce => infonce_loss_graph(g, z, &batch.pairs, &scl.kernel_z),
        }
    })
}

/// One AdamW step on the contrastive loss; returns the loss before the
/// update.
pub fn a_step(
    batch: &Minibatch,
    encoder: &mut Encoder,
    opt: &mut OptState,
    kind: LossKind,
    scl: &SclConfig,
) -> Result<f64> {
    let (loss, grads) = contrastive_gradient(batch, encoder, kind, scl)?;
    adamw_step(encoder, &grads, opt)?;
    Ok(loss)
}

/// Noise-prediction loss and gradients for clean rows `x` at the given steps
/// and noise.
pub fn diffusion_gradient(
    x: &Tensor,
    cond: Option<&Tensor>,
    steps: &[usize],
    delta: &Tensor,
    denoiser: &Denoiser,
    sched: &NoiseSchedule,
) -> Result<(f64, Vec<Tensor>)> {
    let x_t = forward_noise_rows(x, steps, delta, sched)?;
    gradient(denoiser, |g, vars| {
        let xt = g.input(x_t);
        let c = cond.map(|c| g.input(c.clone()));
        let pred = denoiser.forward_graph(g, vars, xt, steps, c)?;
        let d = g.input(delta.clone());
        diffusion_loss_graph(g, pred, d)
    })
}

/// One AdamW step of the denoiser on `x` with uniformly drawn steps and
/// standard normal noise.
pub fn diffusion_step<R: Rng + ?Sized>(
    x: &Tensor,
    cond: Option<&Tensor>,
    denoiser: &mut Denoiser,
    opt: &mut OptState,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    let rows = x.rows();
    let steps: Vec<usize> = (0..rows).map(|_| rng.random_range(1..=sched.steps())).collect();
    let noise = (0..rows * x.cols()).map(|_| rng.sample(StandardNormal)).collect();
    let delta = Tensor::matrix(rows, x.cols(), noise)?;
    let (loss, grads) = diffusion_gradient(x, cond, &steps, &delta, denoiser, sched)?;
    adamw_step(denoiser, &grads, opt)?;
    Ok(loss)
}

/// Denoiser update conditioned on the encoder's `z` for the rows of `x`. The
/// encoder is only read.
pub fn b_step<R: Rng + ?Sized>(
    x: &Tensor,
    encoder: &Encoder,
    denoiser: &mut Denoiser,
    opt: &mut OptState,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    let z = if denoiser.cond_dim > 0 {
        Some(encoder.embed(x)?.1)
    } else {
        None
    };
    diffusion_step(x, z.as_ref(), denoiser, opt, sched, rng)
}
