use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Hand-designed augmentation used to build positives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugmentKind {
    /// `x + σ·N(0, I)`.
    GaussianNoise { sigma: f64 },
    /// `m·x + (1 − m)·partner` with `m ~ U[low, high]`.
    Mixup { low: f64, high: f64 },
    /// Zeroes `round(fraction · d)` randomly chosen coordinates.
    DimensionMask { fraction: f64 },
}

impl Default for AugmentKind {
    fn default() -> Self {
        AugmentKind::GaussianNoise { sigma: 0.5 }
    }
}

impl AugmentKind {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            AugmentKind::GaussianNoise { sigma } => sigma >= 0.0 && sigma.is_finite(),
            AugmentKind::Mixup { low, high } => (0.0..=1.0).contains(&low) && (low..=1.0).contains(&high),
            AugmentKind::DimensionMask { fraction } => (0.0..1.0).contains(&fraction),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("invalid augmentation {self:?}")))
        }
    }

    pub fn needs_partner(&self) -> bool {
        matches!(self, AugmentKind::Mixup { .. })
    }
}

/// Applies `kind` to `x`. `partner` (same shape as `x`) is required for
/// mixup and ignored otherwise.
pub fn hand_augment<R: Rng + ?Sized>(
    x: &Tensor,
    kind: &AugmentKind,
    partner: Option<&Tensor>,
    rng: &mut R,
) -> Result<Tensor> {
    kind.validate()?;
    let mut out = x.clone();
    augment_slice(out.data_mut(), kind, partner.map(Tensor::data), rng)?;
    Ok(out)
}

pub(crate) fn augment_slice<R: Rng + ?Sized>(
    x: &mut [f64],
    kind: &AugmentKind,
    partner: Option<&[f64]>,
    rng: &mut R,
) -> Result<()> {
    match *kind {
        AugmentKind::GaussianNoise { sigma } => {
            for v in x.iter_mut() {
                *v += sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        AugmentKind::Mixup { low, high } => {
            let p = partner.ok_or_else(|| Error::Parameter("mixup needs a partner sample".into()))?;
            if p.len() != x.len() {
                return Err(Error::Dimension(format!(
                    "mixup partner has {} values, sample has {}",
                    p.len(),
                    x.len()
                )));
            }
            let m = if high > low { rng.random_range(low..=high) } else { low };
            for (v, q) in x.iter_mut().zip(p) {
                *v = m * *v + (1.0 - m) * q;
            }
        }
        AugmentKind::DimensionMask { fraction } => {
            let k = (fraction * x.len() as f64).round() as usize;
            for i in sample(rng, x.len(), k.min(x.len())) {
                x[i] = 0.0;
            }
        }
    }
    Ok(())
}
