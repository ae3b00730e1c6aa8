//! Dense multilayer perceptrons trained with plain mini-batch SGD.
//!
//! Parameters are kept as one flat `f32` vector per layer (weights in
//! row-major `[out][in]` order, then the bias), so the quantiser and the
//! cost model can work layer by layer.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::rng::rng_from_seed;

/// Nonlinearity applied to a layer's pre-activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Output layer; softmax is folded into the cross-entropy loss.
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl LayerSpec {
    /// Weights plus bias.
    pub fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

/// Layer layout of a model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    layers: Vec<LayerSpec>,
    layer_dims: Vec<usize>,
    total_dim: usize,
}

impl ModelSpec {
    /// Builds a spec, checking that consecutive layers chain, every layer
    /// is non-empty, and only the last layer is a softmax output.
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        for (i, layer) in layers.iter().enumerate() {
            if layer.inputs == 0 || layer.outputs == 0 {
                return Err(invalid(format!("layer {i} has a zero width")));
            }
            let last = i + 1 == layers.len();
            if last != (layer.activation == Activation::Softmax) {
                return Err(invalid(format!(
                    "layer {i}: only the output layer may (and must) use softmax"
                )));
            }
            if let Some(next) = layers.get(i + 1) {
                if next.inputs != layer.outputs {
                    return Err(invalid(format!(
                        "layer {} expects {} inputs but layer {i} produces {}",
                        i + 1,
                        next.inputs,
                        layer.outputs
                    )));
                }
            }
        }
        let layer_dims: Vec<usize> = layers.iter().map(LayerSpec::param_count).collect();
        let total_dim = layer_dims.iter().sum();
        Ok(Self {
            layers,
            layer_dims,
            total_dim,
        })
    }

    /// ReLU MLP through the given widths, e.g. `[784, 32, 10]`.
    pub fn mlp(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(invalid("an MLP needs at least an input and an output width"));
        }
        let n = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerSpec {
                inputs: w[0],
                outputs: w[1],
                activation: if i + 1 == n {
                    Activation::Softmax
                } else {
                    Activation::Relu
                },
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Parameter count per layer, `d_ℓ`.
    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    /// Total parameter count, `d`.
    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    fn check_shape(&self, layers: &[Vec<f32>], what: &str) -> Result<()> {
        if layers.len() != self.layer_dims.len() {
            return Err(Error::ShapeMismatch(format!(
                "{what} has {} layers, model has {}",
                layers.len(),
                self.layer_dims.len()
            )));
        }
        for (i, (v, &d)) in layers.iter().zip(&self.layer_dims).enumerate() {
            if v.len() != d {
                return Err(Error::ShapeMismatch(format!(
                    "{what} layer {i} has {} values, expected {d}",
                    v.len()
                )));
            }
        }
        Ok(())
    }
}

macro_rules! layered_vector {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            pub per_layer: Vec<Vec<f32>>,
        }

        impl $name {
            pub fn new(per_layer: Vec<Vec<f32>>) -> Self {
                Self { per_layer }
            }

            pub fn zeros(spec: &ModelSpec) -> Self {
                Self {
                    per_layer: spec.layer_dims().iter().map(|&d| vec![0.0; d]).collect(),
                }
            }

            pub fn layer_count(&self) -> usize {
                self.per_layer.len()
            }

            pub fn len(&self) -> usize {
                self.per_layer.iter().map(Vec::len).sum()
            }

            pub fn is_empty(&self) -> bool {
                self.len() == 0
            }

            /// All values, layer after layer.
            pub fn iter(&self) -> impl Iterator<Item = f32> + '_ {
                self.per_layer.iter().flat_map(|l| l.iter().copied())
            }

            pub fn is_finite(&self) -> bool {
                self.iter().all(f32::is_finite)
            }

            /// Whether `other` has the same layer count and layer lengths.
            pub fn same_shape(&self, other: &[Vec<f32>]) -> bool {
                self.per_layer.len() == other.len()
                    && self.per_layer.iter().zip(other).all(|(a, b)| a.len() == b.len())
            }
        }
    };
}

layered_vector!(Parameters);
layered_vector!(Update);

/// Settings for one client's local optimisation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    /// Seed for the per-epoch shuffles.
    pub seed: u64,
}

impl LocalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid("local epochs must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning rate must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_model(spec: &ModelSpec, seed: u64) -> Parameters {
    let mut rng = rng_from_seed(seed);
    let per_layer = spec
        .layers()
        .iter()
        .map(|layer| {
            let limit = libm::sqrtf(6.0 / (layer.inputs + layer.outputs) as f32);
            let mut values = vec![0.0f32; layer.param_count()];
            for w in &mut values[..layer.inputs * layer.outputs] {
                *w = rng.random_range(-limit..=limit);
            }
            values
        })
        .collect();
    Parameters { per_layer }
}

/// Reusable activation buffers for a forward/backward pass.
struct Workspace {
    /// Post-activation outputs per layer; `acts[0]` is the input.
    acts: Vec<Vec<f32>>,
    deltas: Vec<Vec<f32>>,
}

impl Workspace {
    fn new(spec: &ModelSpec) -> Self {
        let mut acts = vec![vec![0.0; spec.input_width()]];
        acts.extend(spec.layers().iter().map(|l| vec![0.0; l.outputs]));
        let deltas = spec.layers().iter().map(|l| vec![0.0; l.outputs]).collect();
        Self { acts, deltas }
    }
}

fn forward(spec: &ModelSpec, params: &Parameters, x: &[f32], ws: &mut Workspace) {
    ws.acts[0].copy_from_slice(x);
    for (l, layer) in spec.layers().iter().enumerate() {
        let (before, after) = ws.acts.split_at_mut(l + 1);
        let input = &before[l];
        let out = &mut after[0];
        let w = &params.per_layer[l];
        let bias = &w[layer.inputs * layer.outputs..];
        for (o, slot) in out.iter_mut().enumerate() {
            let row = &w[o * layer.inputs..(o + 1) * layer.inputs];
            let z = row.iter().zip(input).fold(bias[o], |acc, (a, b)| acc + a * b);
            *slot = match layer.activation {
                Activation::Relu => z.max(0.0),
                Activation::Softmax => z,
            };
        }
    }
}

/// Cross-entropy of the logits in `ws` against `label`; leaves the softmax
/// probabilities minus the one-hot target in the output delta.
fn softmax_cross_entropy(logits: &[f32], label: usize, delta: &mut [f32]) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for (d, &z) in delta.iter_mut().zip(logits) {
        let e = libm::exp(f64::from(z - max));
        *d = e as f32;
        sum += e;
    }
    for (i, d) in delta.iter_mut().enumerate() {
        let p = f64::from(*d) / sum;
        *d = (p - if i == label { 1.0 } else { 0.0 }) as f32;
    }
    libm::log(sum) - f64::from(logits[label] - max)
}

fn backward(
    spec: &ModelSpec,
    params: &Parameters,
    ws: &mut Workspace,
    grad: &mut [Vec<f64>],
) {
    for l in (0..spec.layers().len()).rev() {
        let layer = spec.layers()[l];
        let w = &params.per_layer[l];
        let g = &mut grad[l];
        let input = &ws.acts[l];
        let (lower, upper) = ws.deltas.split_at_mut(l);
        let delta = &upper[0];
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let d = f64::from(d);
            let row = &mut g[o * layer.inputs..(o + 1) * layer.inputs];
            for (gw, &a) in row.iter_mut().zip(input) {
                *gw += d * f64::from(a);
            }
            g[layer.inputs * layer.outputs + o] += d;
        }
        if l > 0 {
            let prev = &mut lower[l - 1];
            for (i, p) in prev.iter_mut().enumerate() {
                // ReLU derivative: the post-activation is positive iff active.
                if ws.acts[l][i] <= 0.0 {
                    *p = 0.0;
                    continue;
                }
                *p = delta
                    .iter()
                    .enumerate()
                    .fold(0.0, |acc, (o, &d)| acc + w[o * layer.inputs + i] * d);
            }
        }
    }
}

fn check_data(spec: &ModelSpec, params: &Parameters, data: &Dataset) -> Result<()> {
    spec.check_shape(&params.per_layer, "parameters")?;
    if data.feature_dim() != spec.input_width() {
        return Err(Error::ShapeMismatch(format!(
            "dataset has {} features, model expects {}",
            data.feature_dim(),
            spec.input_width()
        )));
    }
    if data.class_count() > spec.output_width() {
        return Err(Error::ShapeMismatch(format!(
            "dataset has {} classes, model outputs {}",
            data.class_count(),
            spec.output_width()
        )));
    }
    Ok(())
}

/// Mean cross-entropy and its gradient over the rows `rows` of `data`.
pub fn loss_and_grad_rows(
    spec: &ModelSpec,
    params: &Parameters,
    data: &Dataset,
    rows: &[usize],
) -> Result<(f64, Update)> {
    check_data(spec, params, data)?;
    if rows.is_empty() {
        return Err(invalid("empty batch"));
    }
    let mut ws = Workspace::new(spec);
    let mut acc: Vec<Vec<f64>> = spec.layer_dims().iter().map(|&d| vec![0.0; d]).collect();
    let mut loss = 0.0;
    let last = spec.layers().len();
    for &r in rows {
        forward(spec, params, data.row(r), &mut ws);
        let label = data.label(r) as usize;
        loss += softmax_cross_entropy(&ws.acts[last], label, &mut ws.deltas[last - 1]);
        backward(spec, params, &mut ws, &mut acc);
    }
    let n = rows.len() as f64;
    let per_layer = acc
        .into_iter()
        .map(|layer| layer.into_iter().map(|g| (g / n) as f32).collect())
        .collect();
    Ok((loss / n, Update { per_layer }))
}

/// Mean cross-entropy and gradient over the whole dataset.
pub fn loss_and_grad(spec: &ModelSpec, params: &Parameters, data: &Dataset) -> Result<(f64, Update)> {
    let rows: Vec<usize> = (0..data.len()).collect();
    loss_and_grad_rows(spec, params, data, &rows)
}

/// Mean loss and accuracy of `params` on `data`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

pub fn evaluate(spec: &ModelSpec, params: &Parameters, data: &Dataset) -> Result<Evaluation> {
    check_data(spec, params, data)?;
    if data.is_empty() {
        return Err(invalid("cannot evaluate on an empty dataset"));
    }
    let mut ws = Workspace::new(spec);
    let last = spec.layers().len();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for r in 0..data.len() {
        forward(spec, params, data.row(r), &mut ws);
        let label = data.label(r) as usize;
        let logits = &ws.acts[last];
        let predicted = logits
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |best, (i, &z)| if z > best.1 { (i, z) } else { best })
            .0;
        if predicted == label {
            correct += 1;
        }
        loss += softmax_cross_entropy(logits, label, &mut ws.deltas[last - 1]);
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}

/// Result of [`local_train_traced`].
#[derive(Debug, Clone)]
pub struct TrainTrace {
    pub params: Parameters,
    /// Mean mini-batch loss observed during each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Runs `cfg.epochs` of shuffled mini-batch SGD from `params`.
pub fn local_train(
    spec: &ModelSpec,
    params: &Parameters,
    data: &Dataset,
    cfg: &LocalTrainConfig,
) -> Result<Parameters> {
    local_train_traced(spec, params, data, cfg).map(|t| t.params)
}

pub fn local_train_traced(
    spec: &ModelSpec,
    params: &Parameters,
    data: &Dataset,
    cfg: &LocalTrainConfig,
) -> Result<TrainTrace> {
    cfg.validate()?;
    check_data(spec, params, data)?;
    if data.is_empty() {
        return Err(invalid("cannot train on an empty dataset"));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let mut current = params.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grad) = loss_and_grad_rows(spec, &current, data, batch)?;
            for (w, g) in current.per_layer.iter_mut().zip(&grad.per_layer) {
                for (wi, &gi) in w.iter_mut().zip(g) {
                    *wi -= cfg.learning_rate * gi;
                }
            }
            if !current.is_finite() {
                return Err(Error::NonFinite);
            }
            epoch_loss += loss;
            batches += 1;
        }
        epoch_losses.push(epoch_loss / batches as f64);
    }
    Ok(TrainTrace {
        params: current,
        epoch_losses,
    })
}

/// `local − global`, layer by layer.
pub fn compute_update(local: &Parameters, global: &Parameters) -> Result<Update> {
    if !local.same_shape(&global.per_layer) {
        return Err(Error::ShapeMismatch("local and global parameters differ in shape".into()));
    }
    let per_layer = local
        .per_layer
        .iter()
        .zip(&global.per_layer)
        .map(|(l, g)| l.iter().zip(g).map(|(a, b)| a - b).collect())
        .collect();
    Ok(Update { per_layer })
}

/// `params + scale · update`, layer by layer.
pub fn apply_update(params: &Parameters, update: &Update, scale: f32) -> Result<Parameters> {
    if !params.same_shape(&update.per_layer) {
        return Err(Error::ShapeMismatch("parameters and update differ in shape".into()));
    }
    let per_layer = params
        .per_layer
        .iter()
        .zip(&update.per_layer)
        .map(|(p, u)| p.iter().zip(u).map(|(a, b)| a + scale * b).collect())
        .collect();
    Ok(Parameters { per_layer })
}
