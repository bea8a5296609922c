//! Small dense feed-forward networks with unit dropout.
//!
//! Every latent surface in the model is one of these networks: a stack of
//! affine maps with relu between them and an identity output. Dropout acts on
//! hidden units only, after the activation, and is never rescaled by the keep
//! probability. That keeps `forward(net, x, masks)` exactly equal to a plain
//! forward pass through `net.apply_mask_to_params(masks)`.
//!
//! Forward and backward passes work on row-major mini-batches (one record per
//! row) so training can lean on GEMM; the single-vector entry points are thin
//! wrappers over a one-row batch.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DncError, Result};

/// Maximum number of affine layers per network.
pub const MAX_LAYERS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNetwork {
    widths: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    hidden_activation: Activation,
    output_activation: Activation,
}

/// Binary keep vectors for the hidden layers of one network, stored as 0.0/1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMaskSet {
    per_layer_keep: Vec<Array1<f64>>,
}

/// Parameter gradients with the same layout as the owning network.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Intermediate values of a batched forward pass.
///
/// `inputs[l]` is the (masked) input to affine layer `l`, `pre[l]` its
/// pre-activation. The masks used are kept so that `backward` can refuse a
/// mismatched mask set.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
    masks: Option<DropoutMaskSet>,
}

impl ForwardCache {
    /// Network output, one row per record.
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn batch_size(&self) -> usize {
        self.output.nrows()
    }
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        return Err(DncError::Shape(format!(
            "a network needs at least input and output widths, got {widths:?}"
        )));
    }
    if widths.len() - 1 > MAX_LAYERS {
        return Err(DncError::Shape(format!(
            "at most {MAX_LAYERS} layers are supported, got {}",
            widths.len() - 1
        )));
    }
    if widths.iter().any(|&w| w == 0) {
        return Err(DncError::Shape(format!("zero layer width in {widths:?}")));
    }
    Ok(())
}

impl DenseNetwork {
    /// All-zero network with the given layer widths `[K_0, ..., K_L]`.
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        check_widths(widths)?;
        let weights = widths
            .windows(2)
            .map(|w| Array2::zeros((w[1], w[0])))
            .collect();
        let biases = widths[1..].iter().map(|&k| Array1::zeros(k)).collect();
        Ok(Self {
            widths: widths.to_vec(),
            weights,
            biases,
            hidden_activation: Activation::Relu,
            output_activation: Activation::Identity,
        })
    }

    /// He initialisation: weights ~ N(0, 2 / fan_in), zero biases.
    pub fn he_init<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        for w in net.weights.iter_mut() {
            let fan_in = w.ncols() as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt())
                .map_err(|e| DncError::InvalidParameter(e.to_string()))?;
            w.iter_mut().for_each(|x| *x = normal.sample(rng));
        }
        Ok(net)
    }

    pub fn from_parts(
        widths: &[usize],
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
    ) -> Result<Self> {
        check_widths(widths)?;
        let layers = widths.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(DncError::Shape(format!(
                "expected {layers} weight matrices and bias vectors, got {} and {}",
                weights.len(),
                biases.len()
            )));
        }
        for l in 0..layers {
            if weights[l].dim() != (widths[l + 1], widths[l]) {
                return Err(DncError::Shape(format!(
                    "layer {} weight is {:?}, expected ({}, {})",
                    l + 1,
                    weights[l].dim(),
                    widths[l + 1],
                    widths[l]
                )));
            }
            if biases[l].len() != widths[l + 1] {
                return Err(DncError::Shape(format!(
                    "layer {} bias has {} entries, expected {}",
                    l + 1,
                    biases[l].len(),
                    widths[l + 1]
                )));
            }
        }
        let net = Self {
            widths: widths.to_vec(),
            weights,
            biases,
            hidden_activation: Activation::Relu,
            output_activation: Activation::Identity,
        };
        net.check_finite()?;
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn output_activation(&self) -> Activation {
        self.output_activation
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Array2<f64> {
        &mut self.weights[layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Array1<f64> {
        &mut self.biases[layer]
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Parameters as one vector: per layer, the weight matrix row-major then the bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(DncError::Shape(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                params.len()
            )));
        }
        let mut offset = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for x in w.iter_mut() {
                *x = params[offset];
                offset += 1;
            }
            for x in b.iter_mut() {
                *x = params[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    /// Mutable (weight, bias) slices per layer, in flattening order.
    pub(crate) fn param_slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| {
                [
                    w.as_slice_mut().expect("weights are standard layout"),
                    b.as_slice_mut().expect("biases are contiguous"),
                ]
            })
    }

    /// Sum of squared weights and sum of squared biases over all layers.
    pub fn squared_norms(&self) -> (f64, f64) {
        let w = self.weights.iter().map(|w| w.iter().map(|x| x * x).sum::<f64>()).sum();
        let b = self.biases.iter().map(|b| b.iter().map(|x| x * x).sum::<f64>()).sum();
        (w, b)
    }

    fn check_finite(&self) -> Result<()> {
        let finite = self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()));
        if finite {
            Ok(())
        } else {
            Err(DncError::Numeric("network parameter is not finite".into()))
        }
    }

    fn check_masks(&self, masks: &DropoutMaskSet) -> Result<()> {
        let hidden = &self.widths[1..self.widths.len() - 1];
        if masks.per_layer_keep.len() != hidden.len() {
            return Err(DncError::Shape(format!(
                "network has {} hidden layers but {} masks were given",
                hidden.len(),
                masks.per_layer_keep.len()
            )));
        }
        for (l, (z, &k)) in masks.per_layer_keep.iter().zip(hidden).enumerate() {
            if z.len() != k {
                return Err(DncError::Shape(format!(
                    "mask for hidden layer {} has length {}, expected {k}",
                    l + 1,
                    z.len()
                )));
            }
        }
        Ok(())
    }

    /// Forward pass for a single input vector.
    pub fn forward(
        &self,
        input: &[f64],
        masks: Option<&DropoutMaskSet>,
    ) -> Result<(Array1<f64>, ForwardCache)> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| DncError::Shape(e.to_string()))?;
        let cache = self.forward_batch(x, masks)?;
        let out = cache.output.row(0).to_owned();
        Ok((out, cache))
    }

    /// Forward pass over a batch with one record per row.
    pub fn forward_batch(
        &self,
        inputs: ArrayView2<f64>,
        masks: Option<&DropoutMaskSet>,
    ) -> Result<ForwardCache> {
        if inputs.ncols() != self.input_dim() {
            return Err(DncError::Shape(format!(
                "input has {} columns, network expects {}",
                inputs.ncols(),
                self.input_dim()
            )));
        }
        if let Some(m) = masks {
            self.check_masks(m)?;
        }
        if !inputs.iter().all(|x| x.is_finite()) {
            return Err(DncError::Numeric("network input is not finite".into()));
        }
        self.check_finite()?;

        let layers = self.n_layers();
        let mut cache_inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers);
        let mut current = inputs.to_owned();
        for l in 0..layers {
            let mut z = current.dot(&self.weights[l].t());
            z += &self.biases[l];
            let last = l + 1 == layers;
            let act = if last {
                self.output_activation
            } else {
                self.hidden_activation
            };
            let mut a = z.mapv(|v| act.apply(v));
            if !last {
                if let Some(m) = masks {
                    a *= &m.per_layer_keep[l];
                }
            }
            cache_inputs.push(current);
            pre.push(z);
            current = a;
        }
        Ok(ForwardCache {
            inputs: cache_inputs,
            pre,
            output: current,
            masks: masks.cloned(),
        })
    }

    /// Forward pass without retaining intermediates.
    pub fn predict_batch(
        &self,
        inputs: ArrayView2<f64>,
        masks: Option<&DropoutMaskSet>,
    ) -> Result<Array2<f64>> {
        Ok(self.forward_batch(inputs, masks)?.output)
    }

    /// Gradient of a loss with respect to all parameters given `d loss / d output`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: &[f64],
        masks: Option<&DropoutMaskSet>,
    ) -> Result<GradientSet> {
        let g = ArrayView2::from_shape((1, output_grad.len()), output_grad)
            .map_err(|e| DncError::Shape(e.to_string()))?;
        self.backward_batch(cache, g, masks)
    }

    /// Batched backward pass; gradients are summed over the rows of `output_grad`.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        output_grad: ArrayView2<f64>,
        masks: Option<&DropoutMaskSet>,
    ) -> Result<GradientSet> {
        if cache.masks.as_ref() != masks {
            return Err(DncError::Consistency(
                "masks differ from those used in the forward pass".into(),
            ));
        }
        if cache.pre.len() != self.n_layers()
            || cache
                .pre
                .iter()
                .zip(&self.widths[1..])
                .any(|(z, &k)| z.ncols() != k)
        {
            return Err(DncError::Consistency(
                "cache was produced by a different network".into(),
            ));
        }
        if output_grad.dim() != cache.output.dim() {
            return Err(DncError::Shape(format!(
                "output gradient is {:?}, forward output was {:?}",
                output_grad.dim(),
                cache.output.dim()
            )));
        }

        let layers = self.n_layers();
        let mut grad_w = vec![Array2::zeros((0, 0)); layers];
        let mut grad_b = vec![Array1::zeros(0); layers];

        let out_act = self.output_activation;
        let mut delta = &output_grad * &cache.pre[layers - 1].mapv(|v| out_act.derivative(v));
        for l in (0..layers).rev() {
            grad_w[l] = delta.t().dot(&cache.inputs[l]);
            grad_b[l] = delta.sum_axis(Axis(0));
            if l == 0 {
                break;
            }
            let mut upstream = delta.dot(&self.weights[l]);
            if let Some(m) = masks {
                upstream *= &m.per_layer_keep[l - 1];
            }
            let act = self.hidden_activation;
            upstream.zip_mut_with(&cache.pre[l - 1], |g, &z| *g *= act.derivative(z));
            delta = upstream;
        }
        Ok(GradientSet {
            weights: grad_w,
            biases: grad_b,
        })
    }

    /// Zero row `k` of `W_l` and entry `k` of `b_l` for every dropped hidden unit.
    ///
    /// A relu unit with zeroed incoming weights and bias outputs exactly 0, so
    /// the returned network evaluated without masks equals `self` evaluated
    /// with `masks`.
    pub fn apply_mask_to_params(&self, masks: &DropoutMaskSet) -> Result<DenseNetwork> {
        self.check_masks(masks)?;
        let mut out = self.clone();
        for (l, z) in masks.per_layer_keep.iter().enumerate() {
            for (k, &keep) in z.iter().enumerate() {
                if keep == 0.0 {
                    out.weights[l].row_mut(k).fill(0.0);
                    out.biases[l][k] = 0.0;
                }
            }
        }
        Ok(out)
    }

    /// Copy whose hidden activations are multiplied by `keep_prob` before
    /// each following affine map: the expected pre-activation under dropout.
    pub fn weight_scaled(&self, keep_prob: f64) -> Result<DenseNetwork> {
        check_keep_prob(keep_prob)?;
        let mut out = self.clone();
        for w in out.weights.iter_mut().skip(1) {
            w.mapv_inplace(|v| v * keep_prob);
        }
        Ok(out)
    }

    /// Independent Bernoulli(keep_prob) keep decisions for every hidden unit.
    pub fn sample_masks<R: Rng + ?Sized>(
        &self,
        keep_prob: f64,
        rng: &mut R,
    ) -> Result<DropoutMaskSet> {
        check_keep_prob(keep_prob)?;
        let per_layer_keep = self.widths[1..self.widths.len() - 1]
            .iter()
            .map(|&k| {
                Array1::from_iter((0..k).map(|_| if rng.random_bool(keep_prob) { 1.0 } else { 0.0 }))
            })
            .collect();
        Ok(DropoutMaskSet { per_layer_keep })
    }

    /// Masks that keep every hidden unit.
    pub fn ones_masks(&self) -> DropoutMaskSet {
        DropoutMaskSet {
            per_layer_keep: self.widths[1..self.widths.len() - 1]
                .iter()
                .map(|&k| Array1::ones(k))
                .collect(),
        }
    }
}

pub(crate) fn check_keep_prob(keep_prob: f64) -> Result<()> {
    if keep_prob > 0.0 && keep_prob <= 1.0 {
        Ok(())
    } else {
        Err(DncError::InvalidParameter(format!(
            "keep probability must lie in (0, 1], got {keep_prob}"
        )))
    }
}

impl DropoutMaskSet {
    /// Builds a mask set from explicit keep vectors; every entry must be 0 or 1.
    pub fn new(per_layer_keep: Vec<Vec<f64>>) -> Result<Self> {
        if per_layer_keep
            .iter()
            .flatten()
            .any(|&v| v != 0.0 && v != 1.0)
        {
            return Err(DncError::InvalidParameter(
                "mask entries must be exactly 0 or 1".into(),
            ));
        }
        Ok(Self {
            per_layer_keep: per_layer_keep.into_iter().map(Array1::from).collect(),
        })
    }

    pub fn layers(&self) -> &[Array1<f64>] {
        &self.per_layer_keep
    }

    pub fn layer(&self, l: usize) -> ArrayView1<'_, f64> {
        self.per_layer_keep[l].view()
    }
}

impl GradientSet {
    pub fn zeros_like(net: &DenseNetwork) -> Self {
        Self {
            weights: net.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub(crate) fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| {
            [
                w.as_slice().expect("gradients are standard layout"),
                b.as_slice().expect("gradients are contiguous"),
            ]
        })
    }

    /// Adds the gradient of `lambda_w * ||W||^2 + lambda_b * ||b||^2`.
    pub fn add_l2(&mut self, net: &DenseNetwork, lambda_w: f64, lambda_b: f64) {
        for (g, w) in self.weights.iter_mut().zip(&net.weights) {
            g.scaled_add(2.0 * lambda_w, w);
        }
        for (g, b) in self.biases.iter_mut().zip(&net.biases) {
            g.scaled_add(2.0 * lambda_b, b);
        }
    }

    pub fn matches(&self, net: &DenseNetwork) -> bool {
        self.weights.len() == net.weights.len()
            && self
                .weights
                .iter()
                .zip(&net.weights)
                .all(|(g, w)| g.dim() == w.dim())
            && self
                .biases
                .iter()
                .zip(&net.biases)
                .all(|(g, b)| g.len() == b.len())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }
}
