//! Fully connected networks and the parameter plumbing shared by every
//! trainable component.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Activation, NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Anything holding trainable tensors in a stable order.
pub trait Parameterized {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Records every parameter as a tape leaf, in `params()` order.
    fn bind(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params()
            .into_iter()
            .map(|p| tape.leaf(p.clone()))
            .collect()
    }
}

/// One affine layer followed by an activation. `weight` is `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Dense {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weight.shape().len() != 2 || bias.len() != weight.shape()[1] {
            return Err(Error::shape(format!(
                "dense layer: weight {:?} with bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Dense {
            weight,
            bias,
            activation,
        })
    }

    /// Gaussian init with variance `gain / fan_in`.
    pub fn random<R: Rng + ?Sized>(
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let gain: f64 = match activation {
            Activation::Silu => 2.0,
            _ => 1.0,
        };
        let std = (gain / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Dense {
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("consistent shape"),
            bias: Tensor::zeros(&[fan_out]),
            activation,
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize, activation: Activation) -> Self {
        Dense {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
            activation,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let z = x.matmul(&self.weight)?.add_row(&self.bias)?;
        Ok(match self.activation {
            Activation::Linear => z,
            act => z.map(|v| act.apply(v)),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    layers: Vec<Dense>,
}

impl MlpParams {
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].fan_out(),
                    i + 1,
                    pair[1].fan_in()
                )));
            }
        }
        Ok(MlpParams { layers })
    }

    /// `widths = [in, h1, .., out]`; `hidden` on all but the last layer.
    pub fn random<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "need input and output widths");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                Dense::random(widths[i], widths[i + 1], act, rng)
            })
            .collect();
        MlpParams { layers }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.forward_range(input, 0..self.layers.len())
    }

    /// Runs only `layers[range]`.
    pub fn forward_range(&self, input: &Tensor, range: std::ops::Range<usize>) -> Result<Tensor> {
        let mut x = input.as_matrix();
        for i in range {
            let layer = &self.layers[i];
            if x.cols() != layer.fan_in() {
                return Err(Error::shape(format!(
                    "layer {i} expects width {} but received {}",
                    layer.fan_in(),
                    x.cols()
                )));
            }
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    /// Tape version of [`forward_range`](Self::forward_range). `params` are
    /// this network's bound nodes, two per layer.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        input: NodeId,
        range: std::ops::Range<usize>,
    ) -> Result<NodeId> {
        let mut x = input;
        for i in range {
            let layer = &self.layers[i];
            let width = tape.value(x).cols();
            if width != layer.fan_in() {
                return Err(Error::shape(format!(
                    "layer {i} expects width {} but received {width}",
                    layer.fan_in()
                )));
            }
            let z = tape.matmul(x, params[2 * i])?;
            let z = tape.add_row(z, params[2 * i + 1])?;
            x = tape.activation(z, layer.activation);
        }
        Ok(x)
    }

    pub fn forward_tape_all(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        input: NodeId,
    ) -> Result<NodeId> {
        self.forward_tape(tape, params, input, 0..self.layers.len())
    }
}

impl Parameterized for MlpParams {
    fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Sinusoidal features of a scalar: `[sin(x f_k), cos(x f_k)]` with
/// geometrically spaced frequencies.
pub fn sinusoidal_embedding(values: &[f64], width: usize, max_period: f64) -> Tensor {
    let half = width / 2;
    let mut data = Vec::with_capacity(values.len() * width);
    for &x in values {
        for k in 0..half {
            let freq = (-(max_period.ln()) * k as f64 / half as f64).exp();
            data.push((x * freq).sin());
        }
        for k in 0..half {
            let freq = (-(max_period.ln()) * k as f64 / half as f64).exp();
            data.push((x * freq).cos());
        }
        if width % 2 == 1 {
            data.push(0.0);
        }
    }
    Tensor::new(vec![values.len(), width], data).expect("consistent shape")
}
