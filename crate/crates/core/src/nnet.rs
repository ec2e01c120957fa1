//! Minimal dense network engine.
//!
//! Hidden layers use ReLU and the output layer is an elementwise sigmoid, so every
//! output lies in `(0, 1)`. Weights are stored row-major with shape
//! `(out_dim, in_dim)`. Gradients are exact (hand-written backprop), the optimizer is
//! Adam with decoupled weight decay, and [`train_loop`] adds seeded minibatching with
//! early stopping on a validation loss.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{parse_err, shape_check, Error, Result};

/// Seeded generator used throughout the crate.
pub type Rng = ChaCha8Rng;

pub const NET_MAGIC: &str = "SEQLABEL-NET-1";

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Inverted dropout applied to the last hidden layer during training.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut Rng,
}

/// Parameters of a multilayer perceptron.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    sizes: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// Activations recorded by a forward pass, consumed by [`DenseNet::backward`].
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input seen by each layer (after dropout for the output layer).
    inputs: Vec<Vec<f64>>,
    /// Post-activation output of each layer, before dropout.
    outputs: Vec<Vec<f64>>,
    mask: Option<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.outputs.last().expect("net has at least one layer")
    }
}

/// Gradients with the same shapes as the parameters of a [`DenseNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.values_mut().for_each(|x| *x *= s);
    }

    /// Every entry, weights then biases, layer by layer.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.biases).flat_map(|v| v.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .flat_map(|v| v.iter_mut())
    }

    pub fn max_abs(&self) -> f64 {
        self.values().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    /// Index of the first layer holding a non-finite entry.
    pub fn first_non_finite_layer(&self) -> Option<usize> {
        (0..self.weights.len()).find(|&l| {
            self.weights[l]
                .iter()
                .chain(&self.biases[l])
                .any(|x| !x.is_finite())
        })
    }
}

impl DenseNet {
    fn check_sizes(sizes: &[usize]) -> Result<()> {
        if sizes.len() < 2 {
            return Err(Error::Config(format!(
                "a network needs at least input and output sizes, got {sizes:?}"
            )));
        }
        if sizes.contains(&0) {
            return Err(Error::Config(format!("layer sizes must be positive: {sizes:?}")));
        }
        Ok(())
    }

    /// Network with every weight and bias set to zero.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        Self::check_sizes(sizes)?;
        Ok(Self {
            sizes: sizes.to_vec(),
            weights: sizes.windows(2).map(|w| vec![0.0; w[0] * w[1]]).collect(),
            biases: sizes.windows(2).map(|w| vec![0.0; w[1]]).collect(),
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(sizes: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        for (l, w) in net.weights.iter_mut().enumerate() {
            let limit = (6.0 / (sizes[l] + sizes[l + 1]) as f64).sqrt();
            w.iter_mut().for_each(|x| *x = rng.gen_range(-limit..=limit));
        }
        Ok(net)
    }

    pub fn seeded(sizes: &[usize], seed: u64) -> Result<Self> {
        Self::init(sizes, &mut Rng::seed_from_u64(seed))
    }

    pub fn from_parts(sizes: Vec<usize>, weights: Vec<Vec<f64>>, biases: Vec<Vec<f64>>) -> Result<Self> {
        Self::check_sizes(&sizes)?;
        let layers = sizes.len() - 1;
        shape_check("weight matrices", layers, weights.len())?;
        shape_check("bias vectors", layers, biases.len())?;
        for l in 0..layers {
            shape_check(&format!("weights[{l}]"), sizes[l] * sizes[l + 1], weights[l].len())?;
            shape_check(&format!("biases[{l}]"), sizes[l + 1], biases[l].len())?;
        }
        Ok(Self {
            sizes,
            weights,
            biases,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        self.sizes[self.sizes.len() - 1]
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Vec::len).sum()
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        &self.weights[layer]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.weights[layer]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        &self.biases[layer]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut [f64] {
        &mut self.biases[layer]
    }

    /// Every parameter, weights then biases, layer by layer (same order as
    /// [`Gradients::values`]).
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.biases).flat_map(|v| v.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .flat_map(|v| v.iter_mut())
    }

    fn affine(&self, layer: usize, input: &[f64]) -> Vec<f64> {
        let (n_in, n_out) = (self.sizes[layer], self.sizes[layer + 1]);
        let w = &self.weights[layer];
        let b = &self.biases[layer];
        (0..n_out)
            .map(|r| {
                let row = &w[r * n_in..(r + 1) * n_in];
                b[r] + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>()
            })
            .collect()
    }

    fn activate(&self, layer: usize, z: &mut [f64]) {
        if layer + 1 == self.num_layers() {
            z.iter_mut().for_each(|v| *v = sigmoid(*v));
        } else {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }

    /// Inference forward pass (dropout disabled).
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        shape_check("network input", self.input_dim(), x.len())?;
        let mut cur = x.to_vec();
        for l in 0..self.num_layers() {
            let mut z = self.affine(l, &cur);
            self.activate(l, &mut z);
            cur = z;
        }
        Ok(cur)
    }

    /// Forward pass that records activations for backprop. Dropout, when given, is
    /// applied to the last hidden layer (the input of the output layer).
    pub fn forward_traced(&self, x: &[f64], mut dropout: Option<&mut Dropout<'_>>) -> Result<Trace> {
        shape_check("network input", self.input_dim(), x.len())?;
        let layers = self.num_layers();
        let mut inputs = Vec::with_capacity(layers);
        let mut outputs = Vec::with_capacity(layers);
        let mut mask = None;
        let mut cur = x.to_vec();
        for l in 0..layers {
            if l + 1 == layers && l > 0 {
                if let Some(d) = dropout.take().filter(|d| d.rate > 0.0) {
                    let keep = 1.0 / (1.0 - d.rate);
                    let m: Vec<f64> = cur
                        .iter()
                        .map(|_| if d.rng.gen::<f64>() < d.rate { 0.0 } else { keep })
                        .collect();
                    cur.iter_mut().zip(&m).for_each(|(a, k)| *a *= k);
                    mask = Some(m);
                }
            }
            let mut z = self.affine(l, &cur);
            self.activate(l, &mut z);
            inputs.push(std::mem::replace(&mut cur, z.clone()));
            outputs.push(z);
        }
        Ok(Trace {
            inputs,
            outputs,
            mask,
        })
    }

    /// Gradients of `upstream · output` with respect to every parameter.
    pub fn backward(&self, trace: &Trace, upstream: &[f64]) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self);
        self.backward_into(trace, upstream, 1.0, &mut grads)?;
        Ok(grads)
    }

    /// Recomputes a dropout-free forward pass at `x` and backpropagates `upstream`.
    pub fn backward_at(&self, x: &[f64], upstream: &[f64]) -> Result<Gradients> {
        let trace = self.forward_traced(x, None)?;
        self.backward(&trace, upstream)
    }

    /// Accumulates `scale * d(upstream · output)/dθ` into `grads`.
    pub fn backward_into(&self, trace: &Trace, upstream: &[f64], scale: f64, grads: &mut Gradients) -> Result<()> {
        shape_check("upstream gradient", self.output_dim(), upstream.len())?;
        shape_check("trace depth", self.num_layers(), trace.outputs.len())?;
        let layers = self.num_layers();
        let mut delta: Vec<f64> = upstream
            .iter()
            .zip(trace.output())
            .map(|(g, y)| scale * g * y * (1.0 - y))
            .collect();
        for l in (0..layers).rev() {
            let n_in = self.sizes[l];
            let u = &trace.inputs[l];
            let gw = &mut grads.weights[l];
            let gb = &mut grads.biases[l];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[r] += d;
                gw[r * n_in..(r + 1) * n_in]
                    .iter_mut()
                    .zip(u)
                    .for_each(|(g, x)| *g += d * x);
            }
            if l == 0 {
                break;
            }
            let w = &self.weights[l];
            let mut du = vec![0.0; n_in];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                du.iter_mut()
                    .zip(&w[r * n_in..(r + 1) * n_in])
                    .for_each(|(acc, wv)| *acc += wv * d);
            }
            if l + 1 == layers {
                if let Some(m) = &trace.mask {
                    du.iter_mut().zip(m).for_each(|(a, k)| *a *= k);
                }
            }
            // ReLU: derivative 1 where the unit was active, 0 otherwise (including z = 0).
            delta = du
                .iter()
                .zip(&trace.outputs[l - 1])
                .map(|(g, a)| if *a > 0.0 { *g } else { 0.0 })
                .collect();
        }
        Ok(())
    }

    /// Text serialization: magic line, layer sizes, then each layer's weights
    /// (row-major) and biases.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{NET_MAGIC}").unwrap();
        let sizes: Vec<String> = self.sizes.iter().map(usize::to_string).collect();
        writeln!(s, "layers {}", sizes.join(" ")).unwrap();
        for l in 0..self.num_layers() {
            writeln!(s, "weights {l} {}", join_f64(&self.weights[l])).unwrap();
            writeln!(s, "biases {l} {}", join_f64(&self.biases[l])).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        Self::read_lines(&mut lines)
    }

    /// Reads one serialized network from a stream of `(line_number, line)` pairs,
    /// leaving the iterator positioned right after it.
    pub fn read_lines<'a, I>(lines: &mut I) -> Result<Self>
    where
        I: Iterator<Item = (usize, &'a str)>,
    {
        let mut next = |what: &str| -> Result<(usize, &'a str)> {
            lines
                .find(|(_, l)| !l.trim().is_empty())
                .ok_or_else(|| parse_err(0, format!("unexpected end of input, expected {what}")))
        };
        let (ln, magic) = next("magic header")?;
        if magic.trim() != NET_MAGIC {
            return Err(parse_err(ln, format!("expected header {NET_MAGIC}, found {:?}", magic.trim())));
        }
        let (ln, layers) = next("layer sizes")?;
        let sizes = parse_tagged::<usize>(ln, layers, "layers", None)?;
        DenseNet::check_sizes(&sizes).map_err(|e| parse_err(ln, e.to_string()))?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..sizes.len() - 1 {
            let (ln, line) = next("weights")?;
            let w = parse_tagged::<f64>(ln, line, "weights", Some(l))?;
            if w.len() != sizes[l] * sizes[l + 1] {
                return Err(parse_err(ln, format!("weights {l}: expected {} values, got {}", sizes[l] * sizes[l + 1], w.len())));
            }
            let (ln, line) = next("biases")?;
            let b = parse_tagged::<f64>(ln, line, "biases", Some(l))?;
            if b.len() != sizes[l + 1] {
                return Err(parse_err(ln, format!("biases {l}: expected {} values, got {}", sizes[l + 1], b.len())));
            }
            weights.push(w);
            biases.push(b);
        }
        DenseNet::from_parts(sizes, weights, biases)
    }
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

fn parse_tagged<T: std::str::FromStr>(ln: usize, line: &str, tag: &str, index: Option<usize>) -> Result<Vec<T>> {
    let mut toks = line.split_whitespace();
    if toks.next() != Some(tag) {
        return Err(parse_err(ln, format!("expected `{tag}` line")));
    }
    if let Some(i) = index {
        let got = toks.next().and_then(|t| t.parse::<usize>().ok());
        if got != Some(i) {
            return Err(parse_err(ln, format!("expected `{tag} {i}`")));
        }
    }
    toks.map(|t| t.parse::<T>().map_err(|_| parse_err(ln, format!("bad number {t:?}"))))
        .collect()
}

/// Adam moment accumulators.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Gradients,
    pub v: Gradients,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(net: &DenseNet) -> Self {
        Self {
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Hyperparameters for [`train_loop`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Probability of dropping a unit of the last hidden layer.
    pub dropout_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Treat the starting parameters as an epoch-0 candidate for the best model.
    pub keep_initial: bool,
}

impl TrainConfig {
    /// Defaults for the per-label base network.
    pub fn base_defaults() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            dropout_rate: 0.8,
            batch_size: 4,
            patience: 20,
            max_epochs: 500,
            seed: 0,
            keep_initial: false,
        }
    }

    /// Defaults for the conditional (integrator) network.
    pub fn sequential_defaults() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            dropout_rate: 0.1,
            batch_size: 16,
            patience: 20,
            max_epochs: 500,
            seed: 0,
            keep_initial: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be >= 0");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be positive");
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::sequential_defaults()
    }
}

/// One Adam update with decoupled weight decay.
///
/// Fails without touching the parameters when any gradient entry is not finite.
pub fn adam_step(net: &mut DenseNet, grads: &Gradients, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if let Some(l) = grads.first_non_finite_layer() {
        return Err(Error::Numeric(format!("non-finite gradient in layer {l}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let lr = cfg.learning_rate;
    let decay = 1.0 - lr * cfg.weight_decay;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let params = net.params_mut();
    let moments = state.m.values_mut().zip(state.v.values_mut());
    for ((p, g), (m, v)) in params.zip(grads.values()).zip(moments) {
        *p *= decay;
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
    }
    Ok(())
}

/// A training objective over an indexed training set plus a validation set.
pub trait Objective {
    fn train_len(&self) -> usize;

    /// Mean loss and mean gradients over the given training indices.
    fn batch_loss(&mut self, net: &DenseNet, batch: &[usize], dropout: Option<&mut Dropout<'_>>) -> Result<(f64, Gradients)>;

    fn validation_loss(&mut self, net: &DenseNet) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned; 0 means the starting parameters.
    pub best_epoch: usize,
    pub best_valid_loss: Option<f64>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,valid_loss\n");
        for r in &self.epochs {
            writeln!(s, "{},{:?},{:?}", r.epoch, r.train_loss, r.valid_loss).unwrap();
        }
        s
    }
}

/// Minibatch Adam training with early stopping on the validation loss.
///
/// Returns the parameters of the best validation epoch.
pub fn train_loop<O: Objective + ?Sized>(mut net: DenseNet, objective: &mut O, cfg: &TrainConfig) -> Result<(DenseNet, History)> {
    cfg.validate()?;
    let mut history = History::default();
    if cfg.max_epochs == 0 {
        return Ok((net, history));
    }
    let n = objective.train_len();
    if n == 0 {
        return Err(Error::Contract("training set is empty".into()));
    }
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(&net);
    let mut best = net.clone();
    let mut best_loss = f64::INFINITY;
    if cfg.keep_initial {
        best_loss = objective.validation_loss(&net)?;
        history.best_valid_loss = Some(best_loss);
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut dropout = Dropout {
                rate: cfg.dropout_rate,
                rng: &mut rng,
            };
            let (loss, grads) = objective.batch_loss(&net, batch, Some(&mut dropout))?;
            if loss.is_nan() {
                return Err(Error::Numeric(format!("NaN training loss at epoch {epoch}")));
            }
            adam_step(&mut net, &grads, &mut state, cfg)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}: {e}")))?;
            total += loss * batch.len() as f64;
        }
        let valid_loss = objective.validation_loss(&net)?;
        if valid_loss.is_nan() {
            return Err(Error::Numeric(format!("NaN validation loss at epoch {epoch}")));
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: total / n as f64,
            valid_loss,
        });
        if valid_loss < best_loss {
            best_loss = valid_loss;
            best = net.clone();
            history.best_epoch = epoch;
            history.best_valid_loss = Some(valid_loss);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok((best, history))
}
