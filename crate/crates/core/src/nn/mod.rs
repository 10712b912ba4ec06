//! Dense multilayer perceptrons with exact reverse-mode gradients and Adam.
//!
//! Everything here is fixed-topology: a network is a stack of affine layers
//! with one activation for the hidden layers and one for the output layer.
//! Batches are row-major `Array2<f64>` (one sample per row).

mod adam;
mod rng;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use rng::Rng;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed in terms of the activation's output.
    #[inline]
    fn derivative_at_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// One affine layer: `y = x · weights + bias`, weights stored fan_in × fan_out.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn fan_in(&self) -> usize {
        self.weights.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.ncols()
    }

    fn zeros_like(&self) -> Self {
        Self {
            weights: Array2::zeros(self.weights.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "MlpCheckpoint", try_from = "MlpCheckpoint")]
pub struct Mlp {
    layers: Vec<Dense>,
    hidden_activation: Activation,
    output_activation: Activation,
}

/// Per-layer activations recorded during a forward pass; `outputs[0]` is the
/// input batch and the last entry is the network output.
#[derive(Debug, Clone)]
pub struct Trace {
    outputs: Vec<Array2<f64>>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().expect("trace always holds the input")
    }
}

/// Gradients with the same layout as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite())
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Flat iteration in the same order as [`Mlp::parameters`].
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Backward {
    pub params: Gradients,
    /// Gradient with respect to the input batch.
    pub input: Array2<f64>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn init(
        layer_sizes: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config(format!(
                "an MLP needs at least 2 layer sizes, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "layer sizes must be positive, got {layer_sizes:?}"
            )));
        }
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights =
                    Array2::from_shape_simple_fn((fan_in, fan_out), || rng.uniform(-limit, limit));
                Dense {
                    weights,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self {
            layers,
            hidden_activation,
            output_activation,
        })
    }

    /// Builds a network from explicit layers; dimensions must chain.
    pub fn from_layers(
        layers: Vec<Dense>,
        hidden_activation: Activation,
        output_activation: Activation,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.fan_out() {
                return Err(Error::Shape(format!(
                    "layer {i}: bias length {} != fan_out {}",
                    layer.bias.len(),
                    layer.fan_out()
                )));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::Shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].fan_out(),
                    i + 1,
                    pair[1].fan_in()
                )));
            }
        }
        Ok(Self {
            layers,
            hidden_activation,
            output_activation,
        })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn output_activation(&self) -> Activation {
        self.output_activation
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Dense::fan_out))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Flat view of all parameters: per layer, weights row-major then bias.
    pub fn parameters(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    fn activation_for(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input width {} != network input size {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            h = self.affine(i, layer, h.view());
        }
        Ok(h)
    }

    /// Forward pass that keeps every intermediate activation for [`Mlp::backward`].
    pub fn forward_trace(&self, x: ArrayView2<f64>) -> Result<Trace> {
        self.check_input(&x)?;
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        outputs.push(x.to_owned());
        for (i, layer) in self.layers.iter().enumerate() {
            let next = self.affine(i, layer, outputs[i].view());
            outputs.push(next);
        }
        Ok(Trace { outputs })
    }

    fn affine(&self, index: usize, layer: &Dense, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&layer.weights);
        z += &layer.bias;
        let act = self.activation_for(index);
        if act != Activation::Identity {
            z.mapv_inplace(|v| act.apply(v));
        }
        z
    }

    /// Reverse-mode pass: gradients of `sum(output ⊙ upstream)` with respect
    /// to every parameter and to the input.
    pub fn backward(&self, trace: &Trace, upstream: ArrayView2<f64>) -> Result<Backward> {
        let out = trace.output();
        if upstream.dim() != out.dim() || trace.outputs.len() != self.layers.len() + 1 {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match network output {:?}",
                upstream.dim(),
                out.dim()
            )));
        }
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.to_owned();
        for i in (0..self.layers.len()).rev() {
            let act = self.activation_for(i);
            if act != Activation::Identity {
                Zip::from(&mut delta)
                    .and(&trace.outputs[i + 1])
                    .for_each(|d, &y| *d *= act.derivative_at_output(y));
            }
            let layer = &self.layers[i];
            let input = &trace.outputs[i];
            grads.push(Dense {
                weights: input.t().dot(&delta),
                bias: delta.sum_axis(Axis(0)),
            });
            delta = delta.dot(&layer.weights.t());
        }
        grads.reverse();
        Ok(Backward {
            params: Gradients { layers: grads },
            input: delta,
        })
    }

    fn same_architecture(&self, other: &Mlp) -> bool {
        self.layer_sizes() == other.layer_sizes()
            && self.hidden_activation == other.hidden_activation
            && self.output_activation == other.output_activation
    }

    /// In place: `self ← tau·online + (1 − tau)·self`.
    pub fn soft_update_from(&mut self, online: &Mlp, tau: f64) -> Result<()> {
        if !self.same_architecture(online) {
            return Err(Error::Shape(format!(
                "soft update between {:?} and {:?}",
                self.layer_sizes(),
                online.layer_sizes()
            )));
        }
        for (t, o) in self.parameters_mut().zip(online.parameters()) {
            *t = tau * o + (1.0 - tau) * *t;
        }
        Ok(())
    }
}

/// Returns `tau·online + (1 − tau)·target`.
pub fn soft_update(target: &Mlp, online: &Mlp, tau: f64) -> Result<Mlp> {
    let mut next = target.clone();
    next.soft_update_from(online, tau)?;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Activations {
    pub hidden: Activation,
    pub output: Activation,
}

/// On-disk network format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub version: u32,
    pub layer_sizes: Vec<usize>,
    pub activations: Activations,
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
}

impl From<Mlp> for MlpCheckpoint {
    fn from(mlp: Mlp) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            layer_sizes: mlp.layer_sizes(),
            activations: Activations {
                hidden: mlp.hidden_activation,
                output: mlp.output_activation,
            },
            weights: mlp
                .layers
                .iter()
                .map(|l| l.weights.rows().into_iter().map(|r| r.to_vec()).collect())
                .collect(),
            biases: mlp.layers.iter().map(|l| l.bias.to_vec()).collect(),
        }
    }
}

impl TryFrom<MlpCheckpoint> for Mlp {
    type Error = Error;

    fn try_from(ck: MlpCheckpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported network checkpoint version {}",
                ck.version
            )));
        }
        if ck.layer_sizes.len() < 2
            || ck.weights.len() != ck.layer_sizes.len() - 1
            || ck.biases.len() != ck.weights.len()
        {
            return Err(Error::Shape(format!(
                "checkpoint has {} layer sizes, {} weight matrices, {} biases",
                ck.layer_sizes.len(),
                ck.weights.len(),
                ck.biases.len()
            )));
        }
        let mut layers = Vec::with_capacity(ck.weights.len());
        for (i, (w, b)) in ck.weights.into_iter().zip(ck.biases).enumerate() {
            let (fan_in, fan_out) = (ck.layer_sizes[i], ck.layer_sizes[i + 1]);
            if w.len() != fan_in || w.iter().any(|row| row.len() != fan_out) {
                return Err(Error::Shape(format!(
                    "checkpoint layer {i} weights are not {fan_in}x{fan_out}"
                )));
            }
            let flat: Vec<f64> = w.into_iter().flatten().collect();
            let weights = Array2::from_shape_vec((fan_in, fan_out), flat)
                .map_err(|e| Error::Shape(e.to_string()))?;
            layers.push(Dense {
                weights,
                bias: Array1::from(b),
            });
        }
        let mlp = Mlp::from_layers(layers, ck.activations.hidden, ck.activations.output)?;
        if mlp.parameters().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("checkpoint holds non-finite parameters".into()));
        }
        Ok(mlp)
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    fn linear(w: Array2<f64>, b: Array1<f64>) -> Mlp {
        Mlp::from_layers(
            vec![Dense {
                weights: w,
                bias: b,
            }],
            Activation::Identity,
            Activation::Identity,
        )
        .unwrap()
    }

    #[test]
    fn init_rejects_short_layer_list() {
        let mut rng = Rng::new(0);
        assert!(matches!(
            Mlp::init(&[3], Activation::Relu, Activation::Identity, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn init_is_deterministic_with_zero_bias_and_bounded_weights() {
        let a = Mlp::init(&[4, 8, 2], Activation::Relu, Activation::Tanh, &mut Rng::new(9)).unwrap();
        let b = Mlp::init(&[4, 8, 2], Activation::Relu, Activation::Tanh, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        for layer in a.layers() {
            assert!(layer.bias.iter().all(|&v| v == 0.0));
            let limit = (6.0 / (layer.fan_in() + layer.fan_out()) as f64).sqrt();
            assert!(layer.weights.iter().all(|w| w.abs() <= limit));
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = linear(Array2::zeros((3, 2)), Array1::zeros(2));
        let out = net.forward(Array2::from_elem((5, 3), 1.7).view()).unwrap();
        assert_eq!(out.dim(), (5, 2));
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_hand_case() {
        // [1, 2]·[[1, 2], [3, 4]] + [0.5, -1] = [7.5, 9]
        let net = linear(array![[1.0, 2.0], [3.0, 4.0]], array![0.5, -1.0]);
        let out = net.forward(array![[1.0, 2.0], [0.0, -1.0]].view()).unwrap();
        assert_eq!(out, array![[7.5, 9.0], [-2.5, -5.0]]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = linear(Array2::zeros((3, 1)), Array1::zeros(1));
        assert!(matches!(
            net.forward(Array2::zeros((2, 4)).view()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn linear_weight_gradient_is_input_outer_upstream() {
        let net = linear(array![[0.3, -0.2], [0.1, 0.4]], array![0.0, 0.0]);
        let x = array![[2.0, -1.0]];
        let up = array![[0.5, 3.0]];
        let trace = net.forward_trace(x.view()).unwrap();
        let back = net.backward(&trace, up.view()).unwrap();
        assert_eq!(
            back.params.layers[0].weights,
            array![[1.0, 6.0], [-0.5, -3.0]]
        );
        assert_eq!(back.params.layers[0].bias, array![0.5, 3.0]);
        // input gradient = upstream · Wᵀ
        let expected = [0.5 * 0.3 + 3.0 * -0.2, 0.5 * 0.1 + 3.0 * 0.4];
        for (got, want) in back.input.iter().zip(expected) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net = Mlp::init(&[3, 5, 2], Activation::Tanh, Activation::Identity, &mut Rng::new(1)).unwrap();
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64) - (j as f64) * 0.3);
        let trace = net.forward_trace(x.view()).unwrap();
        let back = net.backward(&trace, Array2::zeros((4, 2)).view()).unwrap();
        assert_eq!(back.params.max_abs(), 0.0);
        assert!(back.input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_mismatched_upstream() {
        let net = Mlp::init(&[3, 2], Activation::Tanh, Activation::Identity, &mut Rng::new(1)).unwrap();
        let trace = net.forward_trace(Array2::zeros((4, 3)).view()).unwrap();
        assert!(net.backward(&trace, Array2::zeros((4, 3)).view()).is_err());
    }

    #[test]
    fn soft_update_limits() {
        let mut rng = Rng::new(2);
        let a = Mlp::init(&[2, 3, 1], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let b = Mlp::init(&[2, 3, 1], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        assert_eq!(soft_update(&a, &b, 1.0).unwrap(), b);
        assert_eq!(soft_update(&a, &b, 0.0).unwrap(), a);

        let zero = linear(array![[0.0]], array![0.0]);
        let two = linear(array![[2.0]], array![2.0]);
        let half = soft_update(&zero, &two, 0.5).unwrap();
        assert!(half.parameters().all(|p| p == 1.0));

        let other = Mlp::init(&[2, 4, 1], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        assert!(soft_update(&a, &other, 0.5).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_lossless() {
        let net = Mlp::init(&[3, 7, 2], Activation::Relu, Activation::Tanh, &mut Rng::new(11)).unwrap();
        let json = serde_json::to_string(&net).unwrap();
        let back: Mlp = serde_json::from_str(&json).unwrap();
        assert_eq!(net, back);
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(value["layer_sizes"], serde_json::json!([3, 7, 2]));
        assert_eq!(value["activations"]["hidden"], "relu");
    }

    #[test]
    fn checkpoint_rejects_bad_shapes() {
        let json = r#"{"version":1,"layer_sizes":[2,1],"activations":{"hidden":"relu","output":"identity"},
                       "weights":[[[1.0],[2.0],[3.0]]],"biases":[[0.0]]}"#;
        assert!(serde_json::from_str::<Mlp>(json).is_err());
    }
}
