use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{instance_norm_forward, Graph, Unary, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Slope of the leaky rectifier on the negative side.
pub const LEAKY_SLOPE: f64 = 0.01;
/// Variance floor inside instance normalization.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    #[default]
    None,
    Instance,
}

/// Anything that owns an ordered list of trainable tensors.
///
/// The order of [`Parameters::named_tensors`] and [`Parameters::tensors_mut`]
/// must agree; optimizers, gradients and checkpoints all rely on it.
pub trait Parameters {
    fn named_tensors(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `[out × in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

/// Layer widths where the first entry may be `-1`, meaning "whatever the
/// input dimension turns out to be".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec(pub Vec<i64>);

impl LayerSpec {
    pub fn resolve(&self, input_dim: usize) -> Result<Vec<usize>> {
        if self.0.len() < 2 {
            return Err(Error::Parameter(format!(
                "layer spec {:?} needs at least an input and an output width",
                self.0
            )));
        }
        self.0
            .iter()
            .enumerate()
            .map(|(i, &w)| match (i, w) {
                (0, -1) => Ok(input_dim),
                (0, w) if w as usize != input_dim => Err(Error::Dimension(format!(
                    "layer spec expects input width {w}, data has {input_dim}"
                ))),
                (_, w) if w >= 1 => Ok(w as usize),
                (i, w) => Err(Error::Parameter(format!(
                    "layer spec entry {i} is {w}; widths must be >= 1 (or -1 for the input)"
                ))),
            })
            .collect()
    }
}

/// Affine stack: every hidden layer is affine, then optional instance
/// normalization, then a leaky rectifier; the last layer is affine only.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub widths: Vec<usize>,
    pub slope: f64,
    pub norm: NormMode,
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], norm: NormMode, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Parameter(format!("invalid widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..=limit))
                    .collect();
                Layer {
                    weight: Tensor::matrix(fan_out, fan_in, data).expect("finite init"),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Ok(Self {
            layers,
            widths: widths.to_vec(),
            slope: LEAKY_SLOPE,
            norm,
        })
    }

    /// Builds from explicit layers, checking that widths chain.
    pub fn from_layers(layers: Vec<Layer>, norm: NormMode) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::Parameter("no layers".into()));
        };
        let mut widths = vec![first.weight.cols()];
        for (k, l) in layers.iter().enumerate() {
            if l.weight.shape().len() != 2 {
                return Err(Error::Dimension(format!("layer {k}: weight must be a matrix")));
            }
            if l.weight.cols() != *widths.last().unwrap() {
                return Err(Error::Dimension(format!(
                    "layer {k} takes {} inputs but the previous layer emits {}",
                    l.weight.cols(),
                    widths.last().unwrap()
                )));
            }
            if l.bias.len() != l.weight.rows() {
                return Err(Error::Dimension(format!(
                    "layer {k}: bias has {} entries for {} outputs",
                    l.bias.len(),
                    l.weight.rows()
                )));
            }
            widths.push(l.weight.rows());
        }
        Ok(Self {
            layers,
            widths,
            slope: LEAKY_SLOPE,
            norm,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Plain forward pass on `x: [batch × in]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input has {} columns, network expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = x.clone().reshape(vec![x.rows(), x.cols()])?;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = h.matmul_t(&layer.weight)?;
            let c = z.cols();
            for i in 0..z.rows() {
                for (v, b) in z.row_mut(i).iter_mut().zip(layer.bias.data()) {
                    *v += b;
                }
            }
            debug_assert_eq!(c, layer.weight.rows());
            if k < last {
                if self.norm == NormMode::Instance {
                    z = instance_norm_forward(&z, NORM_EPS).0;
                }
                let s = self.slope;
                z = z.map(|v| if v > 0.0 { v } else { s * v });
            }
            if !z.is_finite() {
                return Err(Error::Numeric(format!("non-finite output in layer {k}")));
            }
            h = z;
        }
        Ok(h)
    }

    /// Registers every tensor as a differentiable leaf, in parameter order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors().into_iter().map(|t| g.param(t.clone())).collect()
    }

    /// Forward pass recorded on `g`. `vars` come from [`MlpParams::bind`] (or
    /// any slice in the same order).
    pub fn forward_graph(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        if vars.len() != 2 * self.layers.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameter vars, got {}",
                2 * self.layers.len(),
                vars.len()
            )));
        }
        if g.value(x).cols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input has {} columns, network expects {}",
                g.value(x).cols(),
                self.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for k in 0..self.layers.len() {
            let layer_err = |e: Error| e.context(format!("layer {k}"));
            let z = g.matmul_t(h, vars[2 * k]).map_err(layer_err)?;
            let mut z = g.add_row(z, vars[2 * k + 1]).map_err(layer_err)?;
            if k < last {
                if self.norm == NormMode::Instance {
                    z = g.instance_norm(z, NORM_EPS).map_err(layer_err)?;
                }
                z = g.unary(z, Unary::LeakyRelu(self.slope)).map_err(layer_err)?;
            }
            h = z;
        }
        Ok(h)
    }
}

impl Parameters for MlpParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(k, l)| {
                [
                    (format!("{k}.weight"), &l.weight),
                    (format!("{k}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(w: &[f64], rows: usize, cols: usize, b: &[f64]) -> Layer {
        Layer {
            weight: Tensor::matrix(rows, cols, w.to_vec()).unwrap(),
            bias: Tensor::vector(b.to_vec()).unwrap(),
        }
    }

    #[test]
    fn zero_weights_emit_bias() {
        let net = MlpParams::from_layers(vec![layer(&[0.0; 6], 2, 3, &[0.5, -2.0])], NormMode::None)
            .unwrap();
        let x = Tensor::matrix(2, 3, vec![1., 2., 3., -4., 5., 6.]).unwrap();
        let y = net.forward(&x).unwrap();
        assert_eq!(y.data(), &[0.5, -2.0, 0.5, -2.0]);
    }

    #[test]
    fn identity_single_layer() {
        let net = MlpParams::from_layers(vec![layer(&[1., 0., 0., 1.], 2, 2, &[0., 0.])], NormMode::None)
            .unwrap();
        let x = Tensor::matrix(1, 2, vec![-3.0, 7.5]).unwrap();
        assert_eq!(net.forward(&x).unwrap().data(), x.data());
    }

    #[test]
    fn two_layer_hand_trace() {
        // hidden = leaky([1 -1; 2 0.5]·x + [0, -1]), out = [1 2]·hidden + 0.5
        let net = MlpParams::from_layers(
            vec![
                layer(&[1., -1., 2., 0.5], 2, 2, &[0., -1.]),
                layer(&[1., 2.], 1, 2, &[0.5]),
            ],
            NormMode::None,
        )
        .unwrap();
        let x = Tensor::matrix(1, 2, vec![1.0, 3.0]).unwrap();
        // pre-activations: 1 - 3 = -2 -> -0.02 ; 2 + 1.5 - 1 = 2.5 -> 2.5
        // out: -0.02 + 5.0 + 0.5 = 5.48
        let y = net.forward(&x).unwrap();
        assert!((y.data()[0] - 5.48).abs() < 1e-12);
    }

    #[test]
    fn widths_must_chain() {
        let err = MlpParams::from_layers(
            vec![layer(&[1.; 4], 2, 2, &[0.; 2]), layer(&[1.; 3], 1, 3, &[0.])],
            NormMode::None,
        );
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn spec_resolves_sentinel() {
        assert_eq!(
            LayerSpec(vec![-1, 500, 300, 80]).resolve(20).unwrap(),
            vec![20, 500, 300, 80]
        );
        assert!(LayerSpec(vec![4, 2]).resolve(3).is_err());
        assert!(LayerSpec(vec![-1, 0]).resolve(3).is_err());
    }

    #[test]
    fn rejects_wrong_input_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = MlpParams::init(&[3, 4, 2], NormMode::None, &mut rng).unwrap();
        let x = Tensor::matrix(1, 2, vec![1., 2.]).unwrap();
        assert!(matches!(net.forward(&x), Err(Error::Dimension(_))));
    }

    #[test]
    fn graph_forward_matches_plain_forward_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for norm in [NormMode::None, NormMode::Instance] {
            let net = MlpParams::init(&[5, 8, 6, 3], norm, &mut rng).unwrap();
            let x = Tensor::matrix(4, 5, (0..20).map(|i| (i as f64 * 0.37).sin()).collect())
                .unwrap();
            let plain = net.forward(&x).unwrap();
            let mut g = Graph::new();
            let vars = net.bind(&mut g);
            let xv = g.input(x.clone());
            let out = net.forward_graph(&mut g, &vars, xv).unwrap();
            assert_eq!(g.value(out).data(), plain.data());
        }
    }

    #[test]
    fn init_is_bounded_and_bias_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = MlpParams::init(&[10, 30], NormMode::None, &mut rng).unwrap();
        let limit = (6.0f64 / 40.0).sqrt();
        assert!(net.layers[0].weight.data().iter().all(|w| w.abs() <= limit));
        assert!(net.layers[0].bias.data().iter().all(|&b| b == 0.0));
    }
}
