use rand::seq::index::sample;
use rand::Rng;

use super::augment::{augment_slice, AugmentKind};
use super::encoder::Encoder;
use super::schedule::StagePlan;
use crate::diffusion::{generate_batch, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::kernels::PairIndicator;
use crate::losses::PairSet;
use crate::numerics::Tensor;

/// Where a companion came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    DatasetNegative,
    HandAugmented,
    Generated,
}

impl Provenance {
    pub fn is_positive(self) -> bool {
        self != Provenance::DatasetNegative
    }
}

/// A center and its `B` companions.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundBatch {
    pub center: Tensor,
    /// `[B × d]`
    pub companions: Tensor,
    pub h: Vec<bool>,
    pub provenance: Vec<Provenance>,
}

impl BackgroundBatch {
    pub fn validate(&self) -> Result<()> {
        let b = self.companions.rows();
        if self.h.len() != b || self.provenance.len() != b {
            return Err(Error::Dimension(format!(
                "{b} companions, {} indicators, {} provenance tags",
                self.h.len(),
                self.provenance.len()
            )));
        }
        if self.companions.cols() != self.center.len() {
            return Err(Error::Dimension(format!(
                "companions have {} features, center has {}",
                self.companions.cols(),
                self.center.len()
            )));
        }
        if let Some(j) = (0..b).find(|&j| self.h[j] != self.provenance[j].is_positive()) {
            return Err(Error::Parameter(format!(
                "companion {j}: indicator {} disagrees with provenance {:?}",
                self.h[j], self.provenance[j]
            )));
        }
        if !self.h.iter().any(|&v| v) || self.h.iter().all(|&v| v) {
            return Err(Error::Parameter(
                "a background batch needs at least one positive and one negative".into(),
            ));
        }
        Ok(())
    }

    /// Counts of `[dataset-negative, hand-augmented, generated]`.
    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for p in &self.provenance {
            c[*p as usize] += 1;
        }
        c
    }

    /// Indicator over `[center, companions…]`, center at index 0.
    pub fn indicator(&self) -> PairIndicator {
        let mut ind = PairIndicator::new(self.h.len() + 1);
        for (j, &h) in self.h.iter().enumerate() {
            ind.set(0, j + 1, h);
        }
        ind
    }
}

/// Frozen networks used to draw replacement positives.
#[derive(Debug, Clone, Copy)]
pub struct Generator<'a> {
    pub encoder: &'a Encoder,
    pub denoiser: &'a Denoiser,
    pub schedule: &'a NoiseSchedule,
}

/// Several centers sharing one set of dataset negatives, stacked as
/// `[centers; positives; negatives]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    pub x: Tensor,
    pub pairs: PairSet,
    pub centers: usize,
    /// Provenance of every non-center row, in row order.
    pub provenance: Vec<Provenance>,
}

impl Minibatch {
    pub fn generated(&self) -> usize {
        self.provenance
            .iter()
            .filter(|p| **p == Provenance::Generated)
            .count()
    }

    /// Stacks independent background batches, each as `[center; companions]`.
    pub fn from_backgrounds(batches: &[BackgroundBatch]) -> Result<Self> {
        let mut parts: Vec<Tensor> = Vec::new();
        let mut pairs = PairSet::default();
        let mut provenance = Vec::new();
        let mut offset = 0;
        for b in batches {
            b.validate()?;
            parts.push(b.center.clone().reshape(vec![1, b.center.len()])?);
            parts.push(b.companions.clone());
            let comp: Vec<(usize, bool)> = b
                .h
                .iter()
                .enumerate()
                .map(|(j, &h)| (offset + 1 + j, h))
                .collect();
            pairs.push_group(offset, &comp);
            provenance.extend(&b.provenance);
            offset += 1 + b.h.len();
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Self {
            x: Tensor::vstack(&refs)?,
            pairs,
            centers: batches.len(),
            provenance,
        })
    }
}

/// Builds the background sets for `centers`.
///
/// Every center gets `positives_per_center` hand-augmented copies of itself;
/// `B − positives_per_center` negatives are drawn uniformly without
/// replacement from `data` and shared by all centers. Each positive is then
/// replaced by a generated sample with probability `λ`, using
/// `replace_rng` only, so `λ` never changes what `data_rng` produces.
/// Without a generator `λ` is treated as 0.
pub fn sample_minibatch<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    data: &Tensor,
    centers: &[usize],
    plan: &StagePlan,
    augment: &AugmentKind,
    generator: Option<&Generator>,
    data_rng: &mut R1,
    replace_rng: &mut R2,
) -> Result<Minibatch> {
    let (n, d) = (data.rows(), data.cols());
    let (b, ppc) = (plan.batch_size, plan.positives_per_center);
    if ppc == 0 || ppc >= b {
        return Err(Error::Parameter(format!(
            "need 1 <= positives_per_center < batch_size, got {ppc} and {b}"
        )));
    }
    if n < b {
        return Err(Error::Sampling(format!(
            "dataset has {n} samples, batch needs {b}"
        )));
    }
    if let Some(&c) = centers.iter().find(|&&c| c >= n) {
        return Err(Error::Sampling(format!("center {c} outside dataset of {n}")));
    }
    let m = centers.len();
    let negs = b - ppc;
    let mut rows: Vec<f64> = Vec::with_capacity((m * (1 + ppc) + negs) * d);
    for &c in centers {
        rows.extend_from_slice(data.row(c));
    }
    for &c in centers {
        for _ in 0..ppc {
            let mut v = data.row(c).to_vec();
            let partner = if augment.needs_partner() {
                Some(data.row(data_rng.random_range(0..n)))
            } else {
                None
            };
            augment_slice(&mut v, augment, partner, data_rng)?;
            rows.extend(v);
        }
    }
    for j in sample(data_rng, n, negs) {
        rows.extend_from_slice(data.row(j));
    }
    let total = m * (1 + ppc) + negs;
    let mut x = Tensor::matrix(total, d, rows)?;

    let mut provenance = vec![Provenance::HandAugmented; m * ppc];
    provenance.extend(std::iter::repeat_n(Provenance::DatasetNegative, negs));
    if let Some(gen) = generator {
        if plan.lambda > 0.0 {
            let slots: Vec<usize> = (0..m * ppc)
                .filter(|_| replace_rng.random::<f64>() < plan.lambda)
                .collect();
            if !slots.is_empty() {
                let owners: Vec<usize> = slots.iter().map(|s| s / ppc).collect();
                let center_x = x.select_rows(&owners)?;
                let cond = if gen.denoiser.cond_dim > 0 {
                    Some(gen.encoder.embed(&center_x)?.1)
                } else {
                    None
                };
                let out = generate_batch(cond.as_ref(), slots.len(), gen.denoiser, gen.schedule, replace_rng)
                    .map_err(|e| e.context("generating positives"))?;
                for (k, &s) in slots.iter().enumerate() {
                    x.row_mut(m + s).copy_from_slice(out.row(k));
                    provenance[s] = Provenance::Generated;
                }
            }
        }
    }

    let mut pairs = PairSet::default();
    for ci in 0..m {
        let mut comp: Vec<(usize, bool)> = (0..ppc).map(|k| (m + ci * ppc + k, true)).collect();
        comp.extend((0..negs).map(|j| (m + m * ppc + j, false)));
        pairs.push_group(ci, &comp);
    }
    Ok(Minibatch {
        x,
        pairs,
        centers: m,
        provenance,
    })
}

/// The background set of a single center.
pub fn sample_background<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    data: &Tensor,
    center: usize,
    plan: &StagePlan,
    augment: &AugmentKind,
    generator: Option<&Generator>,
    data_rng: &mut R1,
    replace_rng: &mut R2,
) -> Result<BackgroundBatch> {
    let mb = sample_minibatch(data, &[center], plan, augment, generator, data_rng, replace_rng)?;
    let idx: Vec<usize> = (1..mb.x.rows()).collect();
    let batch = BackgroundBatch {
        center: Tensor::vector(mb.x.row(0).to_vec())?,
        companions: mb.x.select_rows(&idx)?,
        h: mb.provenance.iter().map(|p| p.is_positive()).collect(),
        provenance: mb.provenance,
    };
    batch.validate()?;
    Ok(batch)
}
