//! Dense ReLU networks with hand-written reverse-mode gradients and Adam.
//!
//! Activations are batched row-wise: an input of shape `(batch, in)` goes
//! through `x W + b` per layer with `W` stored as `(fan_in, fan_out)`.
//! Hidden layers use ReLU (derivative 0 at the kink), the output layer is
//! linear.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn fan_in(&self) -> usize {
        self.weights.nrows()
    }

    fn fan_out(&self) -> usize {
        self.weights.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "FlatParams", try_from = "FlatParams")]
pub struct Mlp {
    sizes: Vec<usize>,
    layers: Vec<Dense>,
}

/// Per-layer gradients, laid out exactly like the network parameters.
pub type Gradients = Vec<Dense>;

/// Activations recorded by [`Mlp::forward`]: the input of every layer.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layer_inputs: Vec<Array2<f64>>,
}

impl Mlp {
    /// Network with all parameters zero.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        check_sizes(sizes)?;
        let layers = sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            layers,
        })
    }

    /// Glorot-uniform weights in `+-sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn xavier<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        for layer in &mut net.layers {
            let bound = xavier_bound(layer.fan_in(), layer.fan_out());
            layer
                .weights
                .iter_mut()
                .for_each(|w| *w = rng.random_range(-bound..=bound));
        }
        Ok(net)
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        let mut sizes = vec![layers[0].fan_in()];
        for layer in &layers {
            if layer.fan_in() != *sizes.last().unwrap() || layer.bias.len() != layer.fan_out() {
                return Err(Error::Shape("layer shapes do not chain".into()));
            }
            sizes.push(layer.fan_out());
        }
        Ok(Self { sizes, layers })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn check_input(&self, input: &ArrayView2<f64>) -> Result<()> {
        if input.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} features, network expects {}",
                input.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Forward pass without recording activations.
    pub fn predict(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&input)?;
        let mut x = affine(&self.layers[0], input);
        for layer in &self.layers[1..] {
            relu_inplace(&mut x);
            x = affine(layer, x.view());
        }
        Ok(x)
    }

    pub fn predict_one(&self, input: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.predict(view)?.into_raw_vec_and_offset().0)
    }

    pub fn forward(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&input)?;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut x = input.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = affine(layer, x.view());
            layer_inputs.push(x);
            if i + 1 < self.layers.len() {
                relu_inplace(&mut z);
            }
            x = z;
        }
        Ok((x, ForwardCache { layer_inputs }))
    }

    /// Reverse pass for the scalar `sum(output * output_grad)`. Returns the
    /// gradient with respect to every parameter and to the input batch.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: ArrayView2<f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        self.backprop(cache, output_grad, true)
            .map(|(g, x)| (g.expect("parameter gradients requested"), x))
    }

    /// Like [`Mlp::backward`] but skips parameter gradients.
    pub fn input_gradient(
        &self,
        cache: &ForwardCache,
        output_grad: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        self.backprop(cache, output_grad, false).map(|(_, x)| x)
    }

    fn backprop(
        &self,
        cache: &ForwardCache,
        output_grad: ArrayView2<f64>,
        with_params: bool,
    ) -> Result<(Option<Gradients>, Array2<f64>)> {
        let batch = cache
            .layer_inputs
            .first()
            .map(|x| x.nrows())
            .ok_or_else(|| Error::Shape("empty forward cache".into()))?;
        if cache.layer_inputs.len() != self.layers.len()
            || output_grad.dim() != (batch, self.output_dim())
        {
            return Err(Error::Shape(format!(
                "output gradient {:?} does not match batch {batch} x {}",
                output_grad.dim(),
                self.output_dim()
            )));
        }
        let mut grads = with_params.then(|| Vec::with_capacity(self.layers.len()));
        let mut delta = output_grad.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.layer_inputs[i];
            if let Some(g) = grads.as_mut() {
                g.push(Dense {
                    weights: input.t().dot(&delta),
                    bias: delta.sum_axis(Axis(0)),
                });
            }
            let mut back = delta.dot(&layer.weights.t());
            if i > 0 {
                // the layer input is a ReLU output; zero where the unit was off
                Zip::from(&mut back).and(input).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            delta = back;
        }
        if let Some(g) = grads.as_mut() {
            g.reverse();
        }
        Ok((grads, delta))
    }

    /// Parameters flattened layer by layer: weights row-major, then bias.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend(layer.weights.iter());
            out.extend(layer.bias.iter());
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut values = flat.iter();
        for layer in &mut self.layers {
            layer
                .weights
                .iter_mut()
                .chain(layer.bias.iter_mut())
                .for_each(|p| *p = *values.next().unwrap());
        }
        Ok(())
    }
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::Shape(format!("invalid layer sizes {sizes:?}")));
    }
    Ok(())
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn affine(layer: &Dense, x: ArrayView2<f64>) -> Array2<f64> {
    let mut z = x.dot(&layer.weights);
    z += &layer.bias;
    z
}

fn relu_inplace(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

pub fn zero_gradients(net: &Mlp) -> Gradients {
    net.layers
        .iter()
        .map(|l| Dense::zeros(l.fan_in(), l.fan_out()))
        .collect()
}

/// Adam optimiser state for one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first_moment: Mlp,
    second_moment: Mlp,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPSILON: f64 = 1e-8;

    pub fn new(net: &Mlp, lr: f64) -> Self {
        Self::with_params(net, lr, Self::BETA1, Self::BETA2, Self::EPSILON)
    }

    pub fn with_params(net: &Mlp, lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros = Mlp::zeros(net.sizes()).expect("sizes validated by the network");
        Self {
            lr,
            beta1,
            beta2,
            epsilon,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn first_moment(&self) -> &Mlp {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &Mlp {
        &self.second_moment
    }
}

/// One bias-corrected Adam descent step.
pub fn adam_step(net: &mut Mlp, grads: &[Dense], state: &mut AdamState) -> Result<()> {
    if grads.len() != net.layers.len()
        || state.first_moment.sizes() != net.sizes()
        || grads
            .iter()
            .zip(&net.layers)
            .any(|(g, l)| g.weights.dim() != l.weights.dim() || g.bias.len() != l.bias.len())
    {
        return Err(Error::Shape("gradients do not match network".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.epsilon, state.lr);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let update = |p: &mut f64, m: &mut f64, v: &mut f64, &g: &f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };
    for (((layer, g), m), v) in net
        .layers
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first_moment.layers)
        .zip(&mut state.second_moment.layers)
    {
        Zip::from(&mut layer.weights)
            .and(&mut m.weights)
            .and(&mut v.weights)
            .and(&g.weights)
            .for_each(update);
        Zip::from(&mut layer.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .and(&g.bias)
            .for_each(update);
    }
    Ok(())
}

/// `target <- tau * target + (1 - tau) * main`, elementwise.
pub fn polyak_update(target: &mut Mlp, main: &Mlp, tau: f64) -> Result<()> {
    if target.sizes != main.sizes {
        return Err(Error::Shape(format!(
            "target {:?} vs main {:?}",
            target.sizes, main.sizes
        )));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Domain(format!("tau must lie in [0, 1], got {tau}")));
    }
    for (t, m) in target.layers.iter_mut().zip(&main.layers) {
        Zip::from(&mut t.weights)
            .and(&m.weights)
            .for_each(|t, &m| *t = tau * *t + (1.0 - tau) * m);
        Zip::from(&mut t.bias)
            .and(&m.bias)
            .for_each(|t, &m| *t = tau * *t + (1.0 - tau) * m);
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct FlatParams {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

impl From<Mlp> for FlatParams {
    fn from(net: Mlp) -> Self {
        Self {
            params: net.params_flat(),
            sizes: net.sizes,
        }
    }
}

impl TryFrom<FlatParams> for Mlp {
    type Error = Error;

    fn try_from(flat: FlatParams) -> Result<Self> {
        let mut net = Mlp::zeros(&flat.sizes)?;
        net.set_params_flat(&flat.params)?;
        Ok(net)
    }
}
