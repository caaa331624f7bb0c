use rand::Rng;

use crate::error::Result;
use crate::nn::layers::uniform_tensor;
use crate::nn::{ConvLayerSpec, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerKind {
    Conv(ConvLayerSpec),
    Linear { inputs: usize, outputs: usize },
}

impl LayerKind {
    pub fn weight_shape(&self) -> Vec<usize> {
        match self {
            LayerKind::Conv(spec) => spec.weight_shape().to_vec(),
            LayerKind::Linear { inputs, outputs } => vec![*outputs, *inputs],
        }
    }

    pub fn bias_len(&self) -> usize {
        match self {
            LayerKind::Conv(spec) => spec.out_channels,
            LayerKind::Linear { outputs, .. } => *outputs,
        }
    }

    fn init_bound(&self) -> f64 {
        match self {
            LayerKind::Conv(spec) => spec.init_bound(),
            LayerKind::Linear { inputs, .. } => (1.0 / *inputs as f64).sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Ordered parameter set of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<Layer>,
}

/// Tape handles for each layer's `(weight, bias)`, in layer order.
#[derive(Clone, Debug)]
pub struct ParamBinding {
    pub vars: Vec<(Var, Var)>,
}

impl ParamBinding {
    pub fn layer(&self, i: usize) -> (Var, Var) {
        self.vars[i]
    }
}

impl NetworkParams {
    /// Seeded uniform initialisation, drawn in layer order (weights then bias).
    pub fn init<R: Rng>(rng: &mut R, specs: &[(String, LayerKind)]) -> Self {
        let layers = specs
            .iter()
            .map(|(name, kind)| {
                let bound = kind.init_bound();
                let weight = uniform_tensor(rng, &kind.weight_shape(), bound);
                let bias = uniform_tensor(rng, &[kind.bias_len()], bound);
                Layer {
                    name: name.clone(),
                    kind: *kind,
                    weight,
                    bias,
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(specs: &[(String, LayerKind)]) -> Self {
        let layers = specs
            .iter()
            .map(|(name, kind)| Layer {
                name: name.clone(),
                kind: *kind,
                weight: Tensor::zeros(&kind.weight_shape()),
                bias: Tensor::zeros(&[kind.bias_len()]),
            })
            .collect();
        Self { layers }
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn param_count(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors_mut().for_each(Tensor::zero_grad);
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors().map(Tensor::max_abs).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    /// Bit-level digest of every value, for cheap equality checks.
    pub fn checksum(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for t in self.tensors() {
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Puts every tensor on the tape. Trainable bindings collect gradients;
    /// frozen ones only let gradients pass through to their inputs.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ParamBinding {
        let vars = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.param(&l.weight), tape.param(&l.bias))
                } else {
                    (tape.constant(&l.weight), tape.constant(&l.bias))
                }
            })
            .collect();
        ParamBinding { vars }
    }

    /// Adds the tape's accumulated leaf gradients into each tensor.
    pub fn collect_grads(&mut self, tape: &Tape, binding: &ParamBinding) {
        for (layer, &(w, b)) in self.layers.iter_mut().zip(&binding.vars) {
            layer.weight.accumulate_grad(&tape.grad(w));
            layer.bias.accumulate_grad(&tape.grad(b));
        }
    }

    /// Flat copy of all values, in [`Self::tensors`] order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`Self::flatten`].
    pub fn load_flat(&mut self, values: &[f64]) -> Result<()> {
        let total = self.param_count();
        if values.len() != total {
            return Err(crate::Error::Dimension {
                context: "NetworkParams::load_flat",
                axis: "len",
                expected: total,
                actual: values.len(),
            });
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}
