//! Minimal dense feed-forward network with manual backpropagation and
//! plain SGD. One shared trunk of dense layers feeds any number of named
//! output heads; a head is either a softmax/cross-entropy classifier or
//! a bank of independent sigmoid units under a masked multilabel
//! binary-cross-entropy loss.
//!
//! Losses are SUM-reduced over the batch, not averaged. All arithmetic
//! is f64 and all initialization flows through a seeded ChaCha8 stream,
//! so identical seeds give bitwise-identical networks and training runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor2;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the post-activation value.
    fn derivative_from_output(&self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Identity => 1.0,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SoftmaxCe,
    MultilabelBce,
}

#[derive(Debug, Clone)]
pub struct Layer {
    /// in_dim x out_dim, row-major.
    pub weights: Tensor2,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct Head {
    pub name: String,
    pub weights: Tensor2,
    pub biases: Vec<f64>,
    pub loss_kind: LossKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadSpec {
    pub name: String,
    pub width: usize,
    pub loss_kind: LossKind,
}

impl HeadSpec {
    pub fn softmax(name: &str, width: usize) -> Self {
        HeadSpec {
            name: name.into(),
            width,
            loss_kind: LossKind::SoftmaxCe,
        }
    }

    pub fn multilabel(name: &str, width: usize) -> Self {
        HeadSpec {
            name: name.into(),
            width,
            loss_kind: LossKind::MultilabelBce,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenseNetwork {
    pub layers: Vec<Layer>,
    pub heads: Vec<Head>,
    input_dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs_per_phase: usize,
    pub seed: u64,
    pub plateau_tolerance: f64,
    pub plateau_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs_per_phase: 20,
            seed: 0,
            plateau_tolerance: 1e-3,
            plateau_window: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || self.batch_size == 0 || self.max_epochs_per_phase == 0 {
            return Err(Error::Config(
                "learning_rate, batch_size and max_epochs_per_phase must be positive".into(),
            ));
        }
        if self.plateau_window == 0 {
            return Err(Error::Config("plateau_window must be positive".into()));
        }
        Ok(())
    }
}

/// Scaled-uniform init on +-sqrt(6/(fan_in+fan_out)), biases zero.
fn init_weights(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor2 {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor2::from_vec(fan_in, fan_out, data).expect("sized by construction")
}

/// Builds a seeded network: `layer_sizes` is input dim followed by the
/// hidden dims, all hidden layers use `activation`, each head hangs off
/// the last hidden dim.
pub fn init_network_with(
    layer_sizes: &[usize],
    activation: Activation,
    head_specs: &[HeadSpec],
    seed: u64,
) -> Result<DenseNetwork> {
    if layer_sizes.len() < 2 || layer_sizes.iter().any(|&s| s == 0) {
        return Err(Error::InvalidArchitecture(format!(
            "layer_sizes must have >=2 positive entries, got {layer_sizes:?}"
        )));
    }
    if head_specs.is_empty() || head_specs.iter().any(|h| h.width == 0) {
        return Err(Error::InvalidArchitecture(
            "need >=1 head, all widths positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = layer_sizes
        .windows(2)
        .map(|w| Layer {
            weights: init_weights(&mut rng, w[0], w[1]),
            biases: vec![0.0; w[1]],
            activation,
        })
        .collect();
    let last = *layer_sizes.last().unwrap();
    let heads = head_specs
        .iter()
        .map(|spec| Head {
            name: spec.name.clone(),
            weights: init_weights(&mut rng, last, spec.width),
            biases: vec![0.0; spec.width],
            loss_kind: spec.loss_kind,
        })
        .collect();
    Ok(DenseNetwork {
        layers,
        heads,
        input_dim: layer_sizes[0],
    })
}

/// `init_network_with` with ReLU hidden layers.
pub fn init_network(layer_sizes: &[usize], head_specs: &[HeadSpec], seed: u64) -> Result<DenseNetwork> {
    init_network_with(layer_sizes, Activation::Relu, head_specs, seed)
}

impl DenseNetwork {
    /// Assembles a network from explicit parts, checking that layer
    /// dimensions chain and every head hangs off the final hidden dim.
    pub fn from_parts(input_dim: usize, layers: Vec<Layer>, heads: Vec<Head>) -> Result<Self> {
        let mut dim = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            if layer.weights.rows() != dim || layer.biases.len() != layer.weights.cols() {
                return Err(Error::InvalidArchitecture(format!(
                    "layer {i} does not chain: expected input dim {dim}"
                )));
            }
            dim = layer.weights.cols();
        }
        for head in &heads {
            if head.weights.rows() != dim || head.biases.len() != head.weights.cols() {
                return Err(Error::InvalidArchitecture(format!(
                    "head '{}' does not match final hidden dim {dim}",
                    head.name
                )));
            }
        }
        Ok(DenseNetwork {
            layers,
            heads,
            input_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn head_index(&self, name: &str) -> Option<usize> {
        self.heads.iter().position(|h| h.name == name)
    }

    pub fn param_count(&self) -> usize {
        let layer_params: usize = self
            .layers
            .iter()
            .map(|l| l.weights.values().len() + l.biases.len())
            .sum();
        let head_params: usize = self
            .heads
            .iter()
            .map(|h| h.weights.values().len() + h.biases.len())
            .sum();
        layer_params + head_params
    }

    /// Flat parameter vector: layers (weights then biases) then heads.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.values());
            out.extend_from_slice(&l.biases);
        }
        for h in &self.heads {
            out.extend_from_slice(h.weights.values());
            out.extend_from_slice(&h.biases);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "expected {} params, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut it = params.iter();
        for l in &mut self.layers {
            for w in l.weights.values_mut() {
                *w = *it.next().unwrap();
            }
            for b in &mut l.biases {
                *b = *it.next().unwrap();
            }
        }
        for h in &mut self.heads {
            for w in h.weights.values_mut() {
                *w = *it.next().unwrap();
            }
            for b in &mut h.biases {
                *b = *it.next().unwrap();
            }
        }
        Ok(())
    }

    /// Hidden activations for every layer, input included as entry 0.
    fn trunk_forward(&self, batch: &Tensor2) -> Result<Vec<Tensor2>> {
        if batch.cols() != self.input_dim {
            return Err(Error::Shape(format!(
                "batch cols {} != input dim {}",
                batch.cols(),
                self.input_dim
            )));
        }
        let mut activations = vec![batch.clone()];
        for layer in &self.layers {
            let mut z = activations.last().unwrap().matmul(&layer.weights)?;
            for r in 0..z.rows() {
                let row = z.row_mut(r);
                for (v, b) in row.iter_mut().zip(&layer.biases) {
                    *v = layer.activation.apply(*v + b);
                }
            }
            activations.push(z);
        }
        Ok(activations)
    }

    fn head_logits(&self, hidden: &Tensor2, head: &Head) -> Result<Tensor2> {
        let mut logits = hidden.matmul(&head.weights)?;
        for r in 0..logits.rows() {
            for (v, b) in logits.row_mut(r).iter_mut().zip(&head.biases) {
                *v += b;
            }
        }
        Ok(logits)
    }

    /// Runs the batch through the trunk and every head. Softmax heads
    /// return probability rows; multilabel heads return sigmoid outputs.
    pub fn forward(&self, batch: &Tensor2) -> Result<Vec<Tensor2>> {
        let activations = self.trunk_forward(batch)?;
        let hidden = activations.last().unwrap();
        self.heads
            .iter()
            .map(|head| {
                let logits = self.head_logits(hidden, head)?;
                Ok(match head.loss_kind {
                    LossKind::SoftmaxCe => softmax_rows(&logits),
                    LossKind::MultilabelBce => {
                        let mut out = logits;
                        out.values_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
                        out
                    }
                })
            })
            .collect()
    }
}

fn softmax_rows(logits: &Tensor2) -> Tensor2 {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

const PROB_FLOOR: f64 = 1e-15;

/// Sum-reduced cross-entropy `sum_rows -ln q(target)` plus the gradient
/// with respect to the pre-softmax logits (`q - onehot`).
pub fn loss_softmax_ce(probs: &Tensor2, targets: &[usize]) -> Result<(f64, Tensor2)> {
    if targets.len() != probs.rows() {
        return Err(Error::Shape(format!(
            "{} targets for {} rows",
            targets.len(),
            probs.rows()
        )));
    }
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (r, &t) in targets.iter().enumerate() {
        if t >= probs.cols() {
            return Err(Error::Label(format!("target {t} >= {} classes", probs.cols())));
        }
        loss -= probs.get(r, t).max(PROB_FLOOR).ln();
        let g = grad.get(r, t);
        grad.set(r, t, g - 1.0);
    }
    Ok((loss, grad))
}

/// Sum-reduced multilabel binary cross-entropy over the units whose
/// `active` flag is set; inactive units contribute zero loss and zero
/// gradient. The gradient is with respect to the pre-sigmoid logits
/// (`y - t` on active units).
pub fn loss_multilabel_bce(
    outputs: &Tensor2,
    targets: &Tensor2,
    active: &[bool],
) -> Result<(f64, Tensor2)> {
    if outputs.rows() != targets.rows() || outputs.cols() != targets.cols() {
        return Err(Error::Shape("outputs/targets shape mismatch".into()));
    }
    if active.len() != outputs.cols() {
        return Err(Error::Shape(format!(
            "mask length {} != {} output units",
            active.len(),
            outputs.cols()
        )));
    }
    let mut loss = 0.0;
    let mut grad = Tensor2::zeros(outputs.rows(), outputs.cols());
    for r in 0..outputs.rows() {
        for c in 0..outputs.cols() {
            let t = targets.get(r, c);
            if t != 0.0 && t != 1.0 {
                return Err(Error::Label(format!("non-binary target {t} at ({r},{c})")));
            }
            if !active[c] {
                continue;
            }
            let y = outputs.get(r, c).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            loss -= t * y.ln() + (1.0 - t) * (1.0 - y).ln();
            grad.set(r, c, outputs.get(r, c) - t);
        }
    }
    Ok((loss, grad))
}

/// Supervision for one head during a backward pass.
#[derive(Debug, Clone)]
pub enum HeadTargets<'a> {
    Classes(&'a [usize]),
    Multilabel {
        targets: &'a Tensor2,
        active: &'a [bool],
    },
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub layer_weights: Vec<Tensor2>,
    pub layer_biases: Vec<Vec<f64>>,
    pub head_weights: Vec<Tensor2>,
    pub head_biases: Vec<Vec<f64>>,
}

impl Gradients {
    /// Flat vector in the same order as `DenseNetwork::params`.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.layer_weights.iter().zip(&self.layer_biases) {
            out.extend_from_slice(w.values());
            out.extend_from_slice(b);
        }
        for (w, b) in self.head_weights.iter().zip(&self.head_biases) {
            out.extend_from_slice(w.values());
            out.extend_from_slice(b);
        }
        out
    }
}

/// Full forward/backward pass driving the given head; heads without
/// supervision get zero gradients. Returns the batch loss.
pub fn gradients(
    net: &DenseNetwork,
    batch: &Tensor2,
    head_index: usize,
    targets: &HeadTargets,
) -> Result<(f64, Gradients)> {
    let head = net
        .heads
        .get(head_index)
        .ok_or_else(|| Error::Shape(format!("no head {head_index}")))?;
    let activations = net.trunk_forward(batch)?;
    let hidden = activations.last().unwrap();
    let logits = net.head_logits(hidden, head)?;

    let (loss, grad_logits) = match (head.loss_kind, targets) {
        (LossKind::SoftmaxCe, HeadTargets::Classes(classes)) => {
            loss_softmax_ce(&softmax_rows(&logits), classes)?
        }
        (LossKind::MultilabelBce, HeadTargets::Multilabel { targets, active }) => {
            let mut outputs = logits.clone();
            outputs.values_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
            loss_multilabel_bce(&outputs, targets, active)?
        }
        _ => {
            return Err(Error::Label(format!(
                "targets do not match loss kind of head '{}'",
                head.name
            )))
        }
    };

    let mut head_weights: Vec<Tensor2> = net
        .heads
        .iter()
        .map(|h| Tensor2::zeros(h.weights.rows(), h.weights.cols()))
        .collect();
    let mut head_biases: Vec<Vec<f64>> =
        net.heads.iter().map(|h| vec![0.0; h.biases.len()]).collect();
    head_weights[head_index] = hidden.transpose().matmul(&grad_logits)?;
    head_biases[head_index] = column_sums(&grad_logits);

    // into the trunk
    let mut grad_activation = grad_logits.matmul(&head.weights.transpose())?;
    let mut layer_weights = Vec::with_capacity(net.layers.len());
    let mut layer_biases = Vec::with_capacity(net.layers.len());
    for (k, layer) in net.layers.iter().enumerate().rev() {
        let output = &activations[k + 1];
        let mut grad_z = grad_activation;
        for r in 0..grad_z.rows() {
            for c in 0..grad_z.cols() {
                let g = grad_z.get(r, c) * layer.activation.derivative_from_output(output.get(r, c));
                grad_z.set(r, c, g);
            }
        }
        layer_weights.push(activations[k].transpose().matmul(&grad_z)?);
        layer_biases.push(column_sums(&grad_z));
        grad_activation = grad_z.matmul(&layer.weights.transpose())?;
    }
    layer_weights.reverse();
    layer_biases.reverse();

    Ok((
        loss,
        Gradients {
            layer_weights,
            layer_biases,
            head_weights,
            head_biases,
        },
    ))
}

fn column_sums(t: &Tensor2) -> Vec<f64> {
    let mut out = vec![0.0; t.cols()];
    for r in 0..t.rows() {
        for (o, v) in out.iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    out
}

/// One SGD step: `w <- w - lr * dL/dw`.
pub fn sgd_step(net: &mut DenseNetwork, grads: &Gradients, learning_rate: f64) {
    for (layer, (gw, gb)) in net
        .layers
        .iter_mut()
        .zip(grads.layer_weights.iter().zip(&grads.layer_biases))
    {
        for (w, g) in layer.weights.values_mut().iter_mut().zip(gw.values()) {
            *w -= learning_rate * g;
        }
        for (b, g) in layer.biases.iter_mut().zip(gb) {
            *b -= learning_rate * g;
        }
    }
    for (head, (gw, gb)) in net
        .heads
        .iter_mut()
        .zip(grads.head_weights.iter().zip(&grads.head_biases))
    {
        for (w, g) in head.weights.values_mut().iter_mut().zip(gw.values()) {
            *w -= learning_rate * g;
        }
        for (b, g) in head.biases.iter_mut().zip(gb) {
            *b -= learning_rate * g;
        }
    }
}

/// Forward, backward and one SGD step on the given head; returns the
/// pre-step batch loss.
pub fn backward_and_step(
    net: &mut DenseNetwork,
    batch: &Tensor2,
    head_index: usize,
    targets: &HeadTargets,
    config: &TrainConfig,
) -> Result<f64> {
    let (loss, grads) = gradients(net, batch, head_index, targets)?;
    sgd_step(net, &grads, config.learning_rate);
    Ok(loss)
}

/// Parameters above which the finite-difference check samples a seeded
/// subset instead of sweeping every parameter.
const GRAD_CHECK_FULL_SWEEP_LIMIT: usize = 10_000;
const GRAD_CHECK_SAMPLES: usize = 2_000;

/// Compares the analytic gradient against central finite differences
/// `(f(w+eps) - f(w-eps)) / (2 eps)` and returns the maximum relative
/// error over the checked parameters.
pub fn grad_check(
    net: &DenseNetwork,
    batch: &Tensor2,
    head_index: usize,
    targets: &HeadTargets,
    epsilon: f64,
) -> Result<f64> {
    if !(1e-7..=1e-4).contains(&epsilon) {
        return Err(Error::Config(format!(
            "epsilon {epsilon} outside [1e-7, 1e-4]"
        )));
    }
    let (_, analytic) = gradients(net, batch, head_index, targets)?;
    let analytic = analytic.flat();
    let base = net.params();
    let indices: Vec<usize> = if base.len() <= GRAD_CHECK_FULL_SWEEP_LIMIT {
        (0..base.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x67ad_c43c);
        (0..GRAD_CHECK_SAMPLES)
            .map(|_| rng.gen_range(0..base.len()))
            .collect()
    };

    let mut probe = net.clone();
    let mut params = base.clone();
    let mut max_err = 0.0f64;
    for &i in &indices {
        params[i] = base[i] + epsilon;
        probe.set_params(&params)?;
        let (loss_plus, _) = gradients(&probe, batch, head_index, targets)?;
        params[i] = base[i] - epsilon;
        probe.set_params(&params)?;
        let (loss_minus, _) = gradients(&probe, batch, head_index, targets)?;
        params[i] = base[i];
        let numeric = (loss_plus - loss_minus) / (2.0 * epsilon);
        let denom = analytic[i].abs().max(numeric.abs());
        if denom > 1e-10 {
            max_err = max_err.max((analytic[i] - numeric).abs() / denom);
        }
    }
    Ok(max_err)
}
