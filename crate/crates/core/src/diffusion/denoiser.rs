use rand::Rng;
use serde::{Deserialize, Serialize};

use super::schedule::time_encode;
use crate::error::{Error, Result};
use crate::numerics::{Graph, MlpParams, NormMode, Parameters, Tensor, Var};

/// Shape of the noise-prediction network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Channels of the sinusoidal step encoding (even).
    pub time_dim: usize,
    /// Width inside each residual block.
    pub hidden: usize,
    /// Number of residual blocks.
    pub blocks: usize,
    pub norm: NormMode,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            time_dim: 16,
            hidden: 64,
            blocks: 4,
            norm: NormMode::None,
        }
    }
}

/// Conditional noise predictor `g(x_t, t, z)`.
///
/// The step encoding and the projected condition are both mapped to the data
/// dimension and added to the input of every block; block `k` also receives
/// the sum of all earlier block outputs as a residual:
///
/// ```text
/// c   = time_proj(enc(t)) + cond_proj(z)
/// h_1 = block_1(x + c)
/// h_k = block_k(h_{k-1} + c) + h_1 + … + h_{k-1}
/// g   = h_K
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub data_dim: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub time_proj: MlpParams,
    /// Absent for an unconditional model (`cond_dim == 0`).
    pub cond_projector: Option<MlpParams>,
    pub blocks: Vec<MlpParams>,
}

impl Denoiser {
    pub fn init<R: Rng + ?Sized>(
        data_dim: usize,
        cond_dim: usize,
        cfg: &DenoiserConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if data_dim == 0 || cfg.blocks == 0 || cfg.hidden == 0 {
            return Err(Error::Parameter(format!(
                "denoiser needs positive data_dim, blocks and hidden (got {data_dim}, {}, {})",
                cfg.blocks, cfg.hidden
            )));
        }
        if cfg.time_dim == 0 || cfg.time_dim % 2 != 0 {
            return Err(Error::Parameter(format!(
                "time_dim must be even and positive, got {}",
                cfg.time_dim
            )));
        }
        let time_proj = MlpParams::init(&[cfg.time_dim, data_dim], NormMode::None, rng)?;
        let cond_projector = if cond_dim > 0 {
            Some(MlpParams::init(
                &[cond_dim, cfg.hidden, data_dim],
                NormMode::None,
                rng,
            )?)
        } else {
            None
        };
        let blocks = (0..cfg.blocks)
            .map(|_| MlpParams::init(&[data_dim, cfg.hidden, data_dim], cfg.norm, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            data_dim,
            cond_dim,
            time_dim: cfg.time_dim,
            time_proj,
            cond_projector,
            blocks,
        })
    }

    fn parts(&self) -> Vec<(&'static str, Option<usize>, &MlpParams)> {
        let mut v = vec![("time_proj", None, &self.time_proj)];
        if let Some(c) = &self.cond_projector {
            v.push(("cond_proj", None, c));
        }
        for (k, b) in self.blocks.iter().enumerate() {
            v.push(("block", Some(k), b));
        }
        v
    }

    fn time_features(&self, steps: &[usize]) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = steps
            .iter()
            .map(|&t| time_encode(t, self.time_dim).map(Tensor::into_data))
            .collect::<Result<_>>()?;
        Tensor::from_rows(&rows)
    }

    /// Records the prediction for a batch. `vars` are the parameter vars in
    /// [`Parameters`] order; `cond` must be `[batch × cond_dim]` when the
    /// model is conditional.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        vars: &[Var],
        x_t: Var,
        steps: &[usize],
        cond: Option<Var>,
    ) -> Result<Var> {
        let batch = g.value(x_t).rows();
        if g.value(x_t).cols() != self.data_dim {
            return Err(Error::Dimension(format!(
                "denoiser input has {} columns, expected {}",
                g.value(x_t).cols(),
                self.data_dim
            )));
        }
        if steps.len() != batch {
            return Err(Error::Dimension(format!(
                "{} steps for a batch of {batch}",
                steps.len()
            )));
        }
        let mut offset = 0;
        let mut take = |n: usize| {
            let s = &vars[offset..offset + n];
            offset += n;
            s
        };
        if vars.len() != self.tensors().len() {
            return Err(Error::Dimension(format!(
                "expected {} parameter vars, got {}",
                self.tensors().len(),
                vars.len()
            )));
        }

        let tf = g.input(self.time_features(steps)?);
        let mut c = self
            .time_proj
            .forward_graph(g, take(2), tf)
            .map_err(|e| e.context("time projection"))?;
        match (&self.cond_projector, cond) {
            (Some(proj), Some(z)) => {
                let zv = g.value(z);
                if zv.rows() != batch || zv.cols() != self.cond_dim {
                    return Err(Error::Dimension(format!(
                        "condition has shape {:?}, expected [{batch}, {}]",
                        zv.shape(),
                        self.cond_dim
                    )));
                }
                let n = 2 * proj.layers.len();
                let cd = proj
                    .forward_graph(g, take(n), z)
                    .map_err(|e| e.context("condition projection"))?;
                c = g.add(c, cd)?;
            }
            (None, None) => {}
            (Some(_), None) => {
                return Err(Error::Parameter("conditional denoiser needs a condition".into()))
            }
            (None, Some(_)) => {
                return Err(Error::Parameter(
                    "unconditional denoiser was given a condition".into(),
                ))
            }
        }

        let mut outputs: Vec<Var> = Vec::with_capacity(self.blocks.len());
        let mut prev = x_t;
        for (k, block) in self.blocks.iter().enumerate() {
            let inp = g.add(prev, c)?;
            let n = 2 * block.layers.len();
            let mut h = block
                .forward_graph(g, take(n), inp)
                .map_err(|e| e.context(format!("block {k}")))?;
            for &o in &outputs {
                h = g.add(h, o)?;
            }
            outputs.push(h);
            prev = h;
        }
        Ok(prev)
    }

    /// Plain prediction (no gradients).
    pub fn predict(&self, x_t: &Tensor, steps: &[usize], cond: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| g.input(t.clone()))
            .collect();
        let x = g.input(x_t.clone().reshape(vec![x_t.rows(), x_t.cols()])?);
        let c = cond.map(|c| g.input(c.clone()));
        let out = self.forward_graph(&mut g, &vars, x, steps, c)?;
        Ok(g.value(out).clone())
    }
}

impl Parameters for Denoiser {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.parts()
            .into_iter()
            .flat_map(|(name, k, m)| {
                let prefix = match k {
                    Some(k) => format!("{name}.{k}"),
                    None => name.to_string(),
                };
                m.named_tensors()
                    .into_iter()
                    .map(move |(n, t)| (format!("{prefix}.{n}"), t))
            })
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.time_proj.tensors_mut();
        if let Some(c) = &mut self.cond_projector {
            v.extend(c.tensors_mut());
        }
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parameter_order_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut d = Denoiser::init(3, 2, &DenoiserConfig::default(), &mut rng).unwrap();
        let names: Vec<String> = d.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "time_proj.0.weight");
        assert_eq!(names[2], "cond_proj.0.weight");
        assert!(names.last().unwrap().starts_with("block.3."));
        let shapes: Vec<Vec<usize>> = d.tensors().iter().map(|t| t.shape().to_vec()).collect();
        let shapes_mut: Vec<Vec<usize>> =
            d.tensors_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, shapes_mut);
    }

    #[test]
    fn predict_shapes_and_condition_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = DenoiserConfig {
            blocks: 2,
            hidden: 8,
            ..Default::default()
        };
        let d = Denoiser::init(3, 2, &cfg, &mut rng).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -0.1, 0.0, 1.0]).unwrap();
        let z = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = d.predict(&x, &[1, 5], Some(&z)).unwrap();
        assert_eq!(out.shape(), &[2, 3]);
        assert!(d.predict(&x, &[1, 5], None).is_err());
        assert!(d.predict(&x, &[1], Some(&z)).is_err());

        let u = Denoiser::init(3, 0, &cfg, &mut rng).unwrap();
        assert!(u.cond_projector.is_none());
        assert!(u.predict(&x, &[2, 2], None).is_ok());
        assert!(u.predict(&x, &[2, 2], Some(&z)).is_err());
    }

    #[test]
    fn condition_changes_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = Denoiser::init(2, 2, &DenoiserConfig::default(), &mut rng).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.5, -0.5]).unwrap();
        let a = d.predict(&x, &[3], Some(&Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap())).unwrap();
        let b = d.predict(&x, &[3], Some(&Tensor::matrix(1, 2, vec![-1.0, 2.0]).unwrap())).unwrap();
        assert_ne!(a, b);
    }
}
