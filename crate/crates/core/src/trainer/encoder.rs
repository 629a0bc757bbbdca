use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{KernelConfig, Space};
use crate::losses::SclConfig;
use crate::numerics::{Graph, LayerSpec, MlpParams, NormMode, Parameters, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Trunk widths; a leading `-1` stands for the data dimension.
    pub trunk: LayerSpec,
    /// Width of the low-dimensional head.
    pub z_dim: usize,
    pub norm: NormMode,
    pub nu_y: f64,
    pub nu_z: f64,
    pub beta: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            trunk: LayerSpec(vec![-1, 500, 300, 80]),
            z_dim: 16,
            norm: NormMode::None,
            nu_y: 1.0,
            nu_z: 1.0,
            beta: 1.0,
        }
    }
}

impl EncoderConfig {
    pub fn scl(&self) -> Result<SclConfig> {
        Ok(SclConfig {
            kernel_y: KernelConfig::new(self.nu_y, Space::Y)?,
            kernel_z: KernelConfig::new(self.nu_z, Space::Z)?,
            beta: self.beta,
        })
    }
}

/// Two-head encoder: `y = trunk(x)`, `z = head(y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub trunk: MlpParams,
    pub head: MlpParams,
}

impl Encoder {
    pub fn init<R: Rng + ?Sized>(data_dim: usize, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let widths = cfg.trunk.resolve(data_dim)?;
        if cfg.z_dim == 0 {
            return Err(Error::Parameter("z_dim must be positive".into()));
        }
        let trunk = MlpParams::init(&widths, cfg.norm, rng)?;
        let head = MlpParams::init(&[trunk.output_dim(), cfg.z_dim], NormMode::None, rng)?;
        Ok(Self { trunk, head })
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn y_dim(&self) -> usize {
        self.trunk.output_dim()
    }

    pub fn z_dim(&self) -> usize {
        self.head.output_dim()
    }

    /// `(y, z)` for every row of `x`.
    pub fn embed(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let y = self.trunk.forward(x).map_err(|e| e.context("encoder trunk"))?;
        let z = self.head.forward(&y).map_err(|e| e.context("encoder head"))?;
        Ok((y, z))
    }

    /// Records `(y, z)` on the graph; `vars` follow [`Parameters`] order.
    pub fn forward_graph(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<(Var, Var)> {
        let nt = 2 * self.trunk.layers.len();
        if vars.len() != nt + 2 * self.head.layers.len() {
            return Err(Error::Dimension(format!(
                "expected {} encoder vars, got {}",
                nt + 2 * self.head.layers.len(),
                vars.len()
            )));
        }
        let y = self
            .trunk
            .forward_graph(g, &vars[..nt], x)
            .map_err(|e| e.context("encoder trunk"))?;
        let z = self
            .head
            .forward_graph(g, &vars[nt..], y)
            .map_err(|e| e.context("encoder head"))?;
        Ok((y, z))
    }
}

impl Parameters for Encoder {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = self
            .trunk
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (format!("trunk.{n}"), t))
            .collect();
        v.extend(
            self.head
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (format!("head.{n}"), t)),
        );
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.trunk.tensors_mut();
        v.extend(self.head.tensors_mut());
        v
    }
}
