//! Shared helpers for the integration suites.
#![allow(dead_code)]

use diffaug::diffusion::{Denoiser, DenoiserConfig, NoiseSchedule};
use diffaug::kernels::{PairIndicator, Space, KernelConfig};
use diffaug::losses::{
    diffusion_loss, infonce_loss, scl_loss, ContrastiveBatchView, PairSet, SclConfig,
};
use diffaug::numerics::{LayerSpec, NormMode, Parameters, Tensor};
use diffaug::trainer::{Encoder, EncoderConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-5;

pub fn normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Central differences of `f` with respect to every scalar of `params`.
pub fn finite_differences<P: Parameters + Clone>(params: &P, f: impl Fn(&P) -> f64) -> Vec<Tensor> {
    let shapes: Vec<Vec<usize>> = params.tensors().iter().map(|t| t.shape().to_vec()).collect();
    let mut out = Vec::with_capacity(shapes.len());
    for (k, shape) in shapes.iter().enumerate() {
        let len: usize = shape.iter().product();
        let mut g = vec![0.0; len];
        for (i, gi) in g.iter_mut().enumerate() {
            let mut plus = params.clone();
            plus.tensors_mut()[k].data_mut()[i] += FD_STEP;
            let mut minus = params.clone();
            minus.tensors_mut()[k].data_mut()[i] -= FD_STEP;
            *gi = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
        }
        out.push(Tensor::new(shape.clone(), g).unwrap());
    }
    out
}

/// `‖a − n‖ / (‖a‖ + ‖n‖)` over all gradient entries.
pub fn relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.shape(), n.shape());
        for (x, y) in a.data().iter().zip(n.data()) {
            diff += (x - y) * (x - y);
            na += x * x;
            nn += y * y;
        }
    }
    let denom = na.sqrt() + nn.sqrt();
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

/// A random encoder, a single-center batch (row 0 is the center, row 1 its
/// positive, the rest negatives) and a random kernel setting.
pub struct EncoderCase {
    pub encoder: Encoder,
    pub x: Tensor,
    pub pairs: PairSet,
    pub scl: SclConfig,
}

pub fn encoder_case(seed: u64, norm: NormMode) -> EncoderCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 4;
    let n = rng.random_range(4..8);
    let cfg = EncoderConfig {
        trunk: LayerSpec(vec![-1, 7, 5]),
        z_dim: 3,
        norm,
        ..Default::default()
    };
    let encoder = Encoder::init(d, &cfg, &mut rng).unwrap();
    let x = normal(n, d, &mut rng);
    let mut pairs = PairSet::default();
    let comp: Vec<(usize, bool)> = (1..n).map(|j| (j, j == 1)).collect();
    pairs.push_group(0, &comp);
    let scl = SclConfig {
        kernel_y: KernelConfig::new(rng.random_range(0.5..5.0), Space::Y).unwrap(),
        kernel_z: KernelConfig::new(rng.random_range(0.5..5.0), Space::Z).unwrap(),
        beta: rng.random_range(0.05..1.0),
    };
    EncoderCase { encoder, x, pairs, scl }
}

fn indicator(n: usize, pairs: &PairSet) -> PairIndicator {
    let mut h = PairIndicator::new(n);
    for (&(c, j), &pos) in pairs.pairs.iter().zip(&pairs.positive) {
        h.set(c, j, pos);
        h.set(j, c, pos);
    }
    h
}

/// Soft contrastive loss of a single-center case through the plain forward
/// pass and the scalar loss.
pub fn scl_reference(enc: &Encoder, case: &EncoderCase) -> f64 {
    let (y, z) = enc.embed(&case.x).unwrap();
    let h = indicator(case.x.rows(), &case.pairs);
    let view = ContrastiveBatchView::from_embeddings(&y, &z, h, 0, &case.scl).unwrap();
    scl_loss(&view)
}

/// InfoNCE of a single-center case through the plain forward pass.
pub fn infonce_reference(enc: &Encoder, case: &EncoderCase) -> f64 {
    let (_, z) = enc.embed(&case.x).unwrap();
    let q = diffaug::kernels::pairwise_q(&z, &case.scl.kernel_z).unwrap();
    let negs: Vec<f64> = (2..case.x.rows()).map(|j| q.get2(0, j)).collect();
    infonce_loss(q.get2(0, 1), &negs).unwrap()
}

/// A random conditional denoiser with a noisy batch.
pub struct DenoiserCase {
    pub denoiser: Denoiser,
    pub sched: NoiseSchedule,
    pub x: Tensor,
    pub cond: Tensor,
    pub steps: Vec<usize>,
    pub delta: Tensor,
}

pub fn denoiser_case(seed: u64) -> DenoiserCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, c, rows) = (3, 2, 4);
    let cfg = DenoiserConfig { time_dim: 4, hidden: 6, blocks: 2, norm: NormMode::None };
    let denoiser = Denoiser::init(d, c, &cfg, &mut rng).unwrap();
    let sched = diffaug::diffusion::make_schedule(10, 1e-3, 0.2).unwrap();
    let steps = (0..rows).map(|_| rng.random_range(1..=10)).collect();
    DenoiserCase {
        denoiser,
        sched,
        x: normal(rows, d, &mut rng),
        cond: normal(rows, c, &mut rng),
        steps,
        delta: normal(rows, d, &mut rng),
    }
}

pub fn diffusion_reference(den: &Denoiser, case: &DenoiserCase) -> f64 {
    let xt = diffaug::diffusion::forward_noise_rows(&case.x, &case.steps, &case.delta, &case.sched).unwrap();
    let pred = den.predict(&xt, &case.steps, Some(&case.cond)).unwrap();
    diffusion_loss(&pred, &case.delta).unwrap()
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
