//! Reverse-mode gradients against central differences of the plain forward
//! pass and the scalar losses.

mod common;

use common::*;
use diffaug::diffusion::make_schedule;
use diffaug::losses::{diffusion_loss_graph, infonce_loss_graph, scl_loss_graph};
use diffaug::numerics::{gradient, MlpParams, NormMode, Parameters, Tensor};
use diffaug::trainer::{
    contrastive_gradient, diffusion_gradient, sample_minibatch, AugmentKind, Generator, LossKind,
    StagePlan,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn check(name: &str, analytic: &[Tensor], numeric: &[Tensor]) {
    let err = relative_error(analytic, numeric);
    assert!(err < GRAD_TOL, "{name}: relative error {err:e}");
}

#[test]
fn mlp_output_gradient() {
    for (seed, norm) in [(1, NormMode::None), (2, NormMode::Instance)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = MlpParams::init(&[3, 6, 5, 2], norm, &mut rng).unwrap();
        let x = normal(4, 3, &mut rng);
        let w = normal(4, 2, &mut rng);
        let (_, grads) = gradient(&net, |g, vars| {
            let xi = g.input(x.clone());
            let out = net.forward_graph(g, vars, xi)?;
            let wv = g.input(w.clone());
            let prod = g.mul(out, wv)?;
            g.sum(prod)
        })
        .unwrap();
        let numeric = finite_differences(&net, |p: &MlpParams| {
            let out = p.forward(&x).unwrap();
            out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        });
        check(&format!("mlp {norm:?}"), &grads, &numeric);
    }
}

#[test]
fn scl_through_the_encoder() {
    for seed in 0..4 {
        let norm = if seed % 2 == 0 { NormMode::None } else { NormMode::Instance };
        let case = encoder_case(seed, norm);
        let (value, grads) = gradient(&case.encoder, |g, vars| {
            let x = g.input(case.x.clone());
            let (y, z) = case.encoder.forward_graph(g, vars, x)?;
            scl_loss_graph(g, y, z, &case.pairs, &case.scl)
        })
        .unwrap();
        assert!((value - scl_reference(&case.encoder, &case)).abs() < 1e-10);
        let numeric = finite_differences(&case.encoder, |e| scl_reference(e, &case));
        check(&format!("scl seed {seed}"), &grads, &numeric);
    }
}

#[test]
fn infonce_through_the_encoder() {
    for seed in 10..14 {
        let case = encoder_case(seed, NormMode::None);
        let (value, grads) = gradient(&case.encoder, |g, vars| {
            let x = g.input(case.x.clone());
            let (_, z) = case.encoder.forward_graph(g, vars, x)?;
            infonce_loss_graph(g, z, &case.pairs, &case.scl.kernel_z)
        })
        .unwrap();
        assert!((value - infonce_reference(&case.encoder, &case)).abs() < 1e-10);
        let numeric = finite_differences(&case.encoder, |e| infonce_reference(e, &case));
        check(&format!("infonce seed {seed}"), &grads, &numeric);
    }
}

#[test]
fn diffusion_through_the_denoiser() {
    for seed in 20..24 {
        let case = denoiser_case(seed);
        let (value, grads) = diffusion_gradient(
            &case.x,
            Some(&case.cond),
            &case.steps,
            &case.delta,
            &case.denoiser,
            &case.sched,
        )
        .unwrap();
        assert!((value - diffusion_reference(&case.denoiser, &case)).abs() < 1e-10);
        let numeric = finite_differences(&case.denoiser, |d| diffusion_reference(d, &case));
        check(&format!("diffusion seed {seed}"), &grads, &numeric);
    }
}

#[test]
fn diffusion_loss_gradient_wrt_prediction() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pred = normal(3, 2, &mut rng);
    let delta = normal(3, 2, &mut rng);
    let net = MlpParams::from_layers(
        vec![diffaug::numerics::Layer { weight: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(), bias: Tensor::zeros(&[2]) }],
        NormMode::None,
    )
    .unwrap();
    // the identity layer routes the gradient to its bias: d/db = −2(δ − p)/rows summed
    let (_, grads) = gradient(&net, |g, vars| {
        let p = g.input(pred.clone());
        let out = net.forward_graph(g, vars, p)?;
        let d = g.input(delta.clone());
        diffusion_loss_graph(g, out, d)
    })
    .unwrap();
    for j in 0..2 {
        let want: f64 = (0..3).map(|i| -2.0 * (delta.get2(i, j) - pred.get2(i, j)) / 3.0).sum();
        assert!((grads[1].data()[j] - want).abs() < 1e-12);
    }
}

#[test]
fn encoder_step_on_a_sampled_minibatch() {
    // a 4-sample batch with a generated positive, through the trainer's own path
    let case = encoder_case(31, NormMode::None);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = normal(12, 4, &mut rng);
    let den = diffaug::diffusion::Denoiser::init(
        4,
        3,
        &diffaug::diffusion::DenoiserConfig { time_dim: 4, hidden: 6, blocks: 1, ..Default::default() },
        &mut rng,
    )
    .unwrap();
    let sched = make_schedule(5, 1e-3, 0.1).unwrap();
    let gen = Generator { encoder: &case.encoder, denoiser: &den, schedule: &sched };
    let plan = StagePlan { stages: StagePlan::default().stages, lambda: 1.0, batch_size: 4, positives_per_center: 1 };
    let batch = sample_minibatch(
        &data,
        &[2, 7],
        &plan,
        &AugmentKind::GaussianNoise { sigma: 0.3 },
        Some(&gen),
        &mut ChaCha8Rng::seed_from_u64(6),
        &mut ChaCha8Rng::seed_from_u64(7),
    )
    .unwrap();
    assert!(batch.generated() > 0);
    for kind in [LossKind::Scl, LossKind::InfoNce] {
        let (_, grads) = contrastive_gradient(&batch, &case.encoder, kind, &case.scl).unwrap();
        let numeric = finite_differences(&case.encoder, |e| {
            contrastive_gradient(&batch, e, kind, &case.scl).unwrap().0
        });
        check(&format!("{kind:?} minibatch"), &grads, &numeric);
    }
    assert!(case.encoder.num_scalars() > 0);
}
