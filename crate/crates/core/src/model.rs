//! Small multinomial classifier: optional ReLU hidden layer, softmax output,
//! mean cross-entropy loss and mini-batch SGD.
//!
//! Parameters are stored per dense layer as a `[inputs, outputs]` weight
//! matrix (row-major) followed by an `[outputs]` bias. Canonical entry order
//! is `hidden.weight`, `hidden.bias` (only when `hidden_dim > 0`), then
//! `output.weight`, `output.bias`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::exec::{Execution, EXAMPLE_CHUNK};
use crate::tensor::{ModelParams, Tensor};

pub const HIDDEN_WEIGHT: &str = "hidden.weight";
pub const HIDDEN_BIAS: &str = "hidden.bias";
pub const OUTPUT_WEIGHT: &str = "output.weight";
pub const OUTPUT_BIAS: &str = "output.bias";

/// Half-width of the uniform weight initialisation interval.
pub const INIT_RANGE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub input_dim: usize,
    /// Zero means plain multinomial logistic regression.
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim < 1 {
            return Err(ModelError::Config("input_dim must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(ModelError::Config("num_classes must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub features: Tensor,
    pub label: usize,
}

impl LabeledExample {
    pub fn new(features: Vec<f64>, label: usize) -> Result<Self, ModelError> {
        Ok(Self {
            features: Tensor::vector(features)?,
            label,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            learning_rate: 0.1,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size < 1 {
            return Err(ModelError::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::Config(
                "learning_rate must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Accuracy and mean cross-entropy of a model over a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Deterministic initial parameters: weights uniform in `[-0.05, 0.05)`, zero biases.
pub fn init_params(config: &ClassifierConfig) -> Result<ModelParams, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut uniform = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| rng.random::<f64>() * (2.0 * INIT_RANGE) - INIT_RANGE)
            .collect()
    };
    let mut entries = Vec::with_capacity(4);
    let out_inputs = if config.hidden_dim > 0 {
        let (i, h) = (config.input_dim, config.hidden_dim);
        entries.push((HIDDEN_WEIGHT.to_string(), Tensor::new(vec![i, h], uniform(i * h))?));
        entries.push((HIDDEN_BIAS.to_string(), Tensor::zeros(vec![h])));
        h
    } else {
        config.input_dim
    };
    let c = config.num_classes;
    entries.push((
        OUTPUT_WEIGHT.to_string(),
        Tensor::new(vec![out_inputs, c], uniform(out_inputs * c))?,
    ));
    entries.push((OUTPUT_BIAS.to_string(), Tensor::zeros(vec![c])));
    ModelParams::new(entries)
}

#[derive(Clone, Copy)]
struct Dense<'a> {
    weight: &'a [f64],
    bias: &'a [f64],
    inputs: usize,
    outputs: usize,
}

impl Dense<'_> {
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(self.bias);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.weight[i * self.outputs..(i + 1) * self.outputs];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
    }
}

/// Borrowed view of a parameter list as a network.
#[derive(Clone, Copy)]
struct Network<'a> {
    hidden: Option<Dense<'a>>,
    output: Dense<'a>,
}

fn dense<'a>(params: &'a ModelParams, w: &str, b: &str) -> Result<Dense<'a>, ModelError> {
    let weight = params
        .get(w)
        .ok_or_else(|| ModelError::Structure(format!("missing {w}")))?;
    let bias = params
        .get(b)
        .ok_or_else(|| ModelError::Structure(format!("missing {b}")))?;
    match (weight.shape(), bias.shape()) {
        ([i, o], [ob]) if o == ob => Ok(Dense {
            weight: weight.data(),
            bias: bias.data(),
            inputs: *i,
            outputs: *o,
        }),
        (ws, bs) => Err(ModelError::Structure(format!(
            "{w} {ws:?} incompatible with {b} {bs:?}"
        ))),
    }
}

impl<'a> Network<'a> {
    fn from_params(params: &'a ModelParams) -> Result<Self, ModelError> {
        let (hidden, expected_len) = if params.get(HIDDEN_WEIGHT).is_some() {
            (Some(dense(params, HIDDEN_WEIGHT, HIDDEN_BIAS)?), 4)
        } else {
            (None, 2)
        };
        let output = dense(params, OUTPUT_WEIGHT, OUTPUT_BIAS)?;
        if params.len() != expected_len {
            return Err(ModelError::Structure(format!(
                "expected {expected_len} tensors, found {}",
                params.len()
            )));
        }
        if let Some(h) = hidden {
            if h.outputs != output.inputs {
                return Err(ModelError::Structure("hidden width does not match output layer".into()));
            }
        }
        if output.outputs < 2 {
            return Err(ModelError::Structure("need at least two classes".into()));
        }
        Ok(Self { hidden, output })
    }

    fn input_dim(&self) -> usize {
        self.hidden.map_or(self.output.inputs, |h| h.inputs)
    }

    fn num_classes(&self) -> usize {
        self.output.outputs
    }

    fn check_example(&self, ex: &LabeledExample) -> Result<(), ModelError> {
        self.check_features(&ex.features)?;
        if ex.label >= self.num_classes() {
            return Err(ModelError::Precondition(format!(
                "label {} outside {} classes",
                ex.label,
                self.num_classes()
            )));
        }
        Ok(())
    }

    fn check_features(&self, x: &Tensor) -> Result<(), ModelError> {
        if x.shape() != [self.input_dim()] {
            return Err(ModelError::Shape(format!(
                "features {:?}, model expects [{}]",
                x.shape(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Writes logits, keeping hidden pre-activations in `z` when present.
    fn logits(&self, x: &[f64], z: &mut [f64], a: &mut [f64], logits: &mut [f64]) {
        match self.hidden {
            Some(h) => {
                h.apply(x, z);
                for (ai, &zi) in a.iter_mut().zip(z.iter()) {
                    *ai = zi.max(0.0);
                }
                self.output.apply(a, logits);
            }
            None => self.output.apply(x, logits),
        }
    }

    fn scratch(&self) -> Scratch {
        let h = self.hidden.map_or(0, |h| h.outputs);
        Scratch {
            z: vec![0.0; h],
            a: vec![0.0; h],
            logits: vec![0.0; self.num_classes()],
            delta: vec![0.0; self.num_classes()],
            hidden_delta: vec![0.0; h],
        }
    }
}

struct Scratch {
    z: Vec<f64>,
    a: Vec<f64>,
    logits: Vec<f64>,
    delta: Vec<f64>,
    hidden_delta: Vec<f64>,
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Softmax class probabilities for one feature vector.
pub fn forward(params: &ModelParams, features: &Tensor) -> Result<Vec<f64>, ModelError> {
    let net = Network::from_params(params)?;
    net.check_features(features)?;
    let mut s = net.scratch();
    net.logits(features.data(), &mut s.z, &mut s.a, &mut s.logits);
    let lse = log_sum_exp(&s.logits);
    Ok(s.logits.iter().map(|l| (l - lse).exp()).collect())
}

/// Index of the most probable class, ties broken towards the lowest index.
pub fn predict(params: &ModelParams, features: &Tensor) -> Result<usize, ModelError> {
    forward(params, features).map(|p| argmax(&p))
}

/// Sum of per-example losses and gradients over one chunk, in flat canonical layout.
fn chunk_loss_grad(net: &Network<'_>, chunk: &[&LabeledExample]) -> (f64, Vec<f64>) {
    let c = net.num_classes();
    let (hidden_len, out_w_off) = match net.hidden {
        Some(h) => (h.inputs * h.outputs + h.outputs, h.inputs * h.outputs + h.outputs),
        None => (0, 0),
    };
    let out_b_off = out_w_off + net.output.inputs * c;
    let mut grad = vec![0.0; hidden_len + net.output.inputs * c + c];
    let mut loss = 0.0;
    let mut s = net.scratch();
    for ex in chunk {
        let x = ex.features.data();
        net.logits(x, &mut s.z, &mut s.a, &mut s.logits);
        let lse = log_sum_exp(&s.logits);
        loss += lse - s.logits[ex.label];
        for (d, &l) in s.delta.iter_mut().zip(&s.logits) {
            *d = (l - lse).exp();
        }
        s.delta[ex.label] -= 1.0;

        let out_in: &[f64] = if net.hidden.is_some() { &s.a } else { x };
        for (i, &ai) in out_in.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            let row = &mut grad[out_w_off + i * c..out_w_off + (i + 1) * c];
            for (g, &d) in row.iter_mut().zip(&s.delta) {
                *g += ai * d;
            }
        }
        for (g, &d) in grad[out_b_off..].iter_mut().zip(&s.delta) {
            *g += d;
        }

        if let Some(h) = net.hidden {
            let hd = h.outputs;
            for (i, dh) in s.hidden_delta.iter_mut().enumerate() {
                if s.z[i] > 0.0 {
                    let row = &net.output.weight[i * c..(i + 1) * c];
                    *dh = row.iter().zip(&s.delta).map(|(w, d)| w * d).sum();
                } else {
                    *dh = 0.0;
                }
            }
            for (i, &xi) in x.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let row = &mut grad[i * hd..(i + 1) * hd];
                for (g, &d) in row.iter_mut().zip(&s.hidden_delta) {
                    *g += xi * d;
                }
            }
            let hb = h.inputs * hd;
            for (g, &d) in grad[hb..hb + hd].iter_mut().zip(&s.hidden_delta) {
                *g += d;
            }
        }
    }
    (loss, grad)
}

fn batch_loss_grad(exec: Execution, net: &Network<'_>, batch: &[&LabeledExample]) -> (f64, Vec<f64>) {
    let partials = exec.map_chunks(batch, EXAMPLE_CHUNK, |chunk| chunk_loss_grad(net, chunk));
    let mut iter = partials.into_iter();
    let (mut loss, mut grad) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let n = batch.len() as f64;
    for g in &mut grad {
        *g /= n;
    }
    (loss / n, grad)
}

/// Mean cross-entropy over `batch` and its gradient with respect to every parameter.
pub fn loss_and_gradient(params: &ModelParams, batch: &[LabeledExample]) -> Result<(f64, ModelParams), ModelError> {
    loss_and_gradient_with(Execution::default(), params, batch)
}

pub fn loss_and_gradient_with(
    exec: Execution,
    params: &ModelParams,
    batch: &[LabeledExample],
) -> Result<(f64, ModelParams), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::Precondition("empty batch".into()));
    }
    let net = Network::from_params(params)?;
    let refs: Vec<&LabeledExample> = batch.iter().collect();
    for ex in &refs {
        net.check_example(ex)?;
    }
    let (loss, grad) = batch_loss_grad(exec, &net, &refs);
    Ok((loss, params.with_flat(&grad)?))
}

/// Runs `cfg.epochs` epochs of mini-batch SGD over `shard`, returning new parameters.
///
/// Each epoch shuffles example indices with a ChaCha generator seeded by
/// `shuffle_seed + epoch`; the final partial batch is kept. Indices inside a
/// batch are visited in ascending order so a full batch reproduces the
/// unshuffled gradient exactly.
pub fn local_train(
    params: &ModelParams,
    shard: &[LabeledExample],
    cfg: &TrainConfig,
) -> Result<ModelParams, ModelError> {
    local_train_with(Execution::default(), params, shard, cfg)
}

pub fn local_train_with(
    exec: Execution,
    params: &ModelParams,
    shard: &[LabeledExample],
    cfg: &TrainConfig,
) -> Result<ModelParams, ModelError> {
    cfg.validate()?;
    if shard.is_empty() {
        return Err(ModelError::Precondition("empty shard".into()));
    }
    let net = Network::from_params(params)?;
    for ex in shard {
        net.check_example(ex)?;
    }
    let mut flat = params.flatten();
    let mut order: Vec<usize> = (0..shard.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed.wrapping_add(epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        for batch_idx in order.chunks(cfg.batch_size) {
            let mut sorted = batch_idx.to_vec();
            sorted.sort_unstable();
            let batch: Vec<&LabeledExample> = sorted.iter().map(|&i| &shard[i]).collect();
            let current = params.with_flat(&flat)?;
            let net = Network::from_params(&current)?;
            let (_, grad) = batch_loss_grad(exec, &net, &batch);
            for (w, g) in flat.iter_mut().zip(&grad) {
                *w -= cfg.learning_rate * g;
            }
            if flat.iter().any(|w| !w.is_finite()) {
                return Err(ModelError::NonFinite(format!("weights after epoch {epoch}")));
            }
        }
    }
    params.with_flat(&flat)
}

/// Accuracy (argmax, lowest index on ties) and mean loss over `dataset`.
pub fn evaluate(params: &ModelParams, dataset: &[LabeledExample]) -> Result<Evaluation, ModelError> {
    evaluate_with(Execution::default(), params, dataset)
}

pub fn evaluate_with(
    exec: Execution,
    params: &ModelParams,
    dataset: &[LabeledExample],
) -> Result<Evaluation, ModelError> {
    if dataset.is_empty() {
        return Err(ModelError::Precondition("empty dataset".into()));
    }
    let net = Network::from_params(params)?;
    for ex in dataset {
        net.check_example(ex)?;
    }
    let partials = exec.map_chunks(dataset, EXAMPLE_CHUNK, |chunk| {
        let mut s = net.scratch();
        let mut correct = 0usize;
        let mut loss = 0.0;
        for ex in chunk {
            net.logits(ex.features.data(), &mut s.z, &mut s.a, &mut s.logits);
            loss += log_sum_exp(&s.logits) - s.logits[ex.label];
            if argmax(&s.logits) == ex.label {
                correct += 1;
            }
        }
        (correct, loss)
    });
    let (correct, loss) = partials.into_iter().fold((0, 0.0), |(c, l), (pc, pl)| (c + pc, l + pl));
    let n = dataset.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        mean_loss: loss / n,
    })
}

/// `params - rate * grad`, component-wise.
pub fn sgd_step(params: &ModelParams, grad: &ModelParams, rate: f64) -> Result<ModelParams, ModelError> {
    if !params.same_structure(grad) {
        return Err(ModelError::Structure("gradient structure differs from params".into()));
    }
    let mut out = params.clone();
    for ((_, t), (_, g)) in out.entries_mut().iter_mut().zip(grad.entries()) {
        for (w, d) in t.data_mut().iter_mut().zip(g.data()) {
            *w -= rate * d;
        }
    }
    out.with_flat(&out.flatten())
}
