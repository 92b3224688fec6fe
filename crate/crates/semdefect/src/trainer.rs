//! Classification-head training over frozen embeddings: softmax
//! cross-entropy, AdamW with decoupled weight decay, cosine learning-rate
//! schedule with linear warmup. All arithmetic is 64-bit and every run is
//! deterministic given its seed.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedder::EmbeddingStore;
use crate::error::{Error, Result};

/// Activation between head layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Gelu,
}

/// Head architecture: linear probe or one hidden GELU layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSpec {
    Linear,
    Mlp { hidden: usize },
}

/// One affine layer: `rows` outputs, `cols` inputs, row-major weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Classification head parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

impl HeadParams {
    /// Glorot-uniform initialization, biases zero, seeded.
    pub fn init(input_dim: usize, class_count: usize, spec: HeadSpec, seed: u64) -> Self {
        let dims: Vec<(usize, usize)> = match spec {
            HeadSpec::Linear => vec![(class_count, input_dim)],
            HeadSpec::Mlp { hidden } => vec![(hidden, input_dim), (class_count, hidden)],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .into_iter()
            .map(|(rows, cols)| {
                let a = (6.0 / (rows + cols) as f64).sqrt();
                let weights = (0..rows * cols)
                    .map(|_| a * (2.0 * rng.random::<f64>() - 1.0))
                    .collect();
                Layer {
                    rows,
                    cols,
                    weights,
                    bias: vec![0.0; rows],
                }
            })
            .collect();
        HeadParams {
            layers,
            activation: match spec {
                HeadSpec::Linear => Activation::None,
                HeadSpec::Mlp { .. } => Activation::Gelu,
            },
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn class_count(&self) -> usize {
        self.layers.last().map(|l| l.rows).unwrap_or(0)
    }
}

/// AdamW hyperparameters plus run length; see module docs for defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub epochs: usize,
}

impl TrainConfig {
    /// Default configuration for full-batch training of `epochs` steps:
    /// peak 1e-3 to min 0 with 10% linear warmup, weight decay 0.01.
    pub fn for_epochs(epochs: usize) -> Self {
        TrainConfig {
            peak_lr: 1e-3,
            min_lr: 0.0,
            total_steps: epochs,
            warmup_steps: epochs / 10,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            epochs,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_lr < 0.0 || self.peak_lr < self.min_lr {
            return Err(Error::Config(format!(
                "need 0 <= min_lr <= peak_lr, got min {} peak {}",
                self.min_lr, self.peak_lr
            )));
        }
        if self.warmup_steps >= self.total_steps.max(1) {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.epochs > self.total_steps {
            return Err(Error::Config(format!(
                "epochs {} exceed schedule horizon total_steps {}",
                self.epochs, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Per-parameter AdamW moments and the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: usize,
}

impl OptimizerState {
    pub fn for_head(head: &HeadParams) -> Self {
        let mut m = Vec::new();
        let mut v = Vec::new();
        for layer in &head.layers {
            m.push(vec![0.0; layer.weights.len()]);
            m.push(vec![0.0; layer.bias.len()]);
            v.push(vec![0.0; layer.weights.len()]);
            v.push(vec![0.0; layer.bias.len()]);
        }
        OptimizerState { m, v, step: 0 }
    }
}

/// Gradients mirroring [`HeadParams`] layer shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(head: &HeadParams) -> Self {
        Gradients {
            weights: head.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: head.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    // tanh approximation
    const S: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (S * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    const S: f64 = 0.7978845608028654;
    let u = S * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * S * (1.0 + 3.0 * 0.044715 * x * x)
}

fn apply_activation(act: Activation, x: f64) -> f64 {
    match act {
        Activation::None => x,
        Activation::Gelu => gelu(x),
    }
}

fn activation_prime(act: Activation, x: f64) -> f64 {
    match act {
        Activation::None => 1.0,
        Activation::Gelu => gelu_prime(x),
    }
}

/// `y = W x + b` for a whole batch; `x` is `batch x cols` row-major.
fn affine(layer: &Layer, x: &[f64], batch: usize) -> Vec<f64> {
    let mut y = vec![0.0; batch * layer.rows];
    for b in 0..batch {
        let xi = &x[b * layer.cols..(b + 1) * layer.cols];
        let yo = &mut y[b * layer.rows..(b + 1) * layer.rows];
        for r in 0..layer.rows {
            let row = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
            let mut acc = layer.bias[r];
            for (w, v) in row.iter().zip(xi) {
                acc += w * v;
            }
            yo[r] = acc;
        }
    }
    y
}

struct ForwardTrace {
    /// Pre-activation outputs per layer.
    pre: Vec<Vec<f64>>,
    /// Post-activation outputs per non-final layer.
    post: Vec<Vec<f64>>,
}

fn forward_trace(head: &HeadParams, embeddings: &[f64], batch: usize) -> Result<ForwardTrace> {
    if batch * head.input_dim() != embeddings.len() {
        return Err(Error::Dimension {
            what: "head input batch".into(),
            expected: batch * head.input_dim(),
            got: embeddings.len(),
        });
    }
    let mut pre = Vec::with_capacity(head.layers.len());
    let mut post = Vec::new();
    let mut current = embeddings.to_vec();
    for (i, layer) in head.layers.iter().enumerate() {
        let z = affine(layer, &current, batch);
        if i + 1 < head.layers.len() {
            let h: Vec<f64> = z.iter().map(|&v| apply_activation(head.activation, v)).collect();
            current = h.clone();
            post.push(h);
        }
        pre.push(z);
    }
    Ok(ForwardTrace { pre, post })
}

/// Affine chain with the configured activation; returns `batch x C` logits.
pub fn forward(head: &HeadParams, embeddings: &[f64], batch: usize) -> Result<Vec<f64>> {
    let mut trace = forward_trace(head, embeddings, batch)?;
    Ok(trace.pre.pop().expect("head has at least one layer"))
}

/// Numerically stable mean softmax cross-entropy.
///
/// Returns the mean loss over the batch and its gradient with respect to
/// the logits, `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy(
    logits: &[f64],
    labels: &[u32],
    class_count: usize,
) -> Result<(f64, Vec<f64>)> {
    let batch = labels.len();
    if logits.len() != batch * class_count {
        return Err(Error::Dimension {
            what: "logits".into(),
            expected: batch * class_count,
            got: logits.len(),
        });
    }
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for b in 0..batch {
        let label = labels[b] as usize;
        if label >= class_count {
            return Err(Error::Data(format!(
                "label {label} out of range for {class_count} classes"
            )));
        }
        let row = &logits[b * class_count..(b + 1) * class_count];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += (v - max).exp();
        }
        let log_sum = sum.ln();
        loss -= row[label] - max - log_sum;
        let grow = &mut grad[b * class_count..(b + 1) * class_count];
        for (c, g) in grow.iter_mut().enumerate() {
            let p = (row[c] - max).exp() / sum;
            *g = (p - if c == label { 1.0 } else { 0.0 }) / batch as f64;
        }
    }
    Ok((loss / batch as f64, grad))
}

/// Cosine schedule with linear warmup from zero.
///
/// `lr(t) = peak * t / T_w` for `t <= T_w`, then
/// `min + (peak - min) * (1 + cos(pi (t - T_w) / (T - T_w))) / 2`.
pub fn cosine_warmup_lr(t: usize, config: &TrainConfig) -> Result<f64> {
    let total = config.total_steps;
    let warmup = config.warmup_steps;
    if t > total {
        return Err(Error::Config(format!("step {t} beyond schedule horizon {total}")));
    }
    if warmup > 0 && t <= warmup {
        return Ok(config.peak_lr * t as f64 / warmup as f64);
    }
    let progress = (t - warmup) as f64 / (total - warmup) as f64;
    Ok(config.min_lr
        + 0.5 * (config.peak_lr - config.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// One AdamW update with decoupled weight decay.
///
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`, bias-corrected, then
/// `theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + lambda theta)`.
pub fn adamw_step(
    head: &mut HeadParams,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    for (li, g) in grads.weights.iter().enumerate() {
        for (vi, &gv) in g.iter().enumerate() {
            if !gv.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite weight gradient at layer {li} index {vi}: {gv}"
                )));
            }
        }
        for (vi, &gv) in grads.bias[li].iter().enumerate() {
            if !gv.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite bias gradient at layer {li} index {vi}: {gv}"
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for (li, layer) in head.layers.iter_mut().enumerate() {
        let (ms, vs) = (&mut state.m[li * 2], &mut state.v[li * 2]);
        update_tensor(&mut layer.weights, &grads.weights[li], ms, vs, lr, bc1, bc2, config);
        let (mb, vb) = (&mut state.m[li * 2 + 1], &mut state.v[li * 2 + 1]);
        update_tensor(&mut layer.bias, &grads.bias[li], mb, vb, lr, bc1, bc2, config);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn update_tensor(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    bc1: f64,
    bc2: f64,
    config: &TrainConfig,
) {
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
        v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= lr * (m_hat / (v_hat.sqrt() + config.epsilon) + config.weight_decay * theta[i]);
    }
}

/// Exact gradients of the loss with respect to every weight and bias,
/// given the upstream gradient on the logits. Recomputes the forward pass.
pub fn backward(
    head: &HeadParams,
    embeddings: &[f64],
    batch: usize,
    dlogits: &[f64],
) -> Result<Gradients> {
    let trace = forward_trace(head, embeddings, batch)?;
    let last = head.layers.len() - 1;
    if dlogits.len() != batch * head.layers[last].rows {
        return Err(Error::Dimension {
            what: "upstream logit gradient".into(),
            expected: batch * head.layers[last].rows,
            got: dlogits.len(),
        });
    }

    let mut grads = Gradients::zeros_like(head);
    let mut delta = dlogits.to_vec();
    for li in (0..=last).rev() {
        let layer = &head.layers[li];
        let input: &[f64] = if li == 0 {
            embeddings
        } else {
            &trace.post[li - 1]
        };
        for b in 0..batch {
            let drow = &delta[b * layer.rows..(b + 1) * layer.rows];
            let xrow = &input[b * layer.cols..(b + 1) * layer.cols];
            let gw = &mut grads.weights[li];
            for r in 0..layer.rows {
                let d = drow[r];
                if d != 0.0 {
                    let dst = &mut gw[r * layer.cols..(r + 1) * layer.cols];
                    for (wslot, x) in dst.iter_mut().zip(xrow) {
                        *wslot += d * x;
                    }
                }
                grads.bias[li][r] += d;
            }
        }
        if li > 0 {
            // propagate through the activation into the previous layer
            let prev_pre = &trace.pre[li - 1];
            let cols = layer.cols;
            let mut next_delta = vec![0.0; batch * cols];
            for b in 0..batch {
                let drow = &delta[b * layer.rows..(b + 1) * layer.rows];
                let out = &mut next_delta[b * cols..(b + 1) * cols];
                for r in 0..layer.rows {
                    let d = drow[r];
                    if d != 0.0 {
                        let wrow = &layer.weights[r * cols..(r + 1) * cols];
                        for (o, w) in out.iter_mut().zip(wrow) {
                            *o += d * w;
                        }
                    }
                }
                let pre_row = &prev_pre[b * cols..(b + 1) * cols];
                for (o, &z) in out.iter_mut().zip(pre_row) {
                    *o *= activation_prime(head.activation, z);
                }
            }
            delta = next_delta;
        }
    }
    Ok(grads)
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Total objective value at the start of the step.
    pub loss: f64,
    pub labeled_loss: f64,
    /// Weighted pseudo-label component; zero when no pseudo data is used.
    pub pseudo_loss: f64,
    pub lr: f64,
    pub val_accuracy: Option<f64>,
}

/// Trained head plus its history.
#[derive(Debug, Clone)]
pub struct TrainedHead {
    pub head: HeadParams,
    pub history: Vec<EpochStats>,
    pub warnings: Vec<String>,
    /// Epoch of the returned snapshot when a validation store was supplied.
    pub best_epoch: Option<usize>,
}

/// Internal full-batch training problem shared by supervised and
/// pseudo-label training. The pseudo term enters the objective as
/// `alpha * CE(pseudo)`; `alpha_ramp` scales alpha linearly from zero over
/// the first half of the steps.
pub(crate) struct TrainProblem<'a> {
    pub labeled: &'a EmbeddingStore,
    pub labeled_targets: &'a [u32],
    pub pseudo: Option<(&'a EmbeddingStore, &'a [usize], &'a [u32])>,
    pub alpha: f64,
    pub alpha_ramp: bool,
    pub class_count: usize,
    pub spec: HeadSpec,
    pub val: Option<(&'a EmbeddingStore, &'a [u32])>,
    /// Reuse this head instead of a fresh seeded init.
    pub initial: Option<HeadParams>,
}

fn store_to_f64(store: &EmbeddingStore, rows: Option<&[usize]>) -> Vec<f64> {
    match rows {
        None => store.data.iter().map(|&v| v as f64).collect(),
        Some(rows) => {
            let mut out = Vec::with_capacity(rows.len() * store.dim);
            for &r in rows {
                out.extend(store.row(r).iter().map(|&v| v as f64));
            }
            out
        }
    }
}

pub(crate) fn run_training(problem: &TrainProblem, config: &TrainConfig) -> Result<TrainedHead> {
    config.validate()?;
    let labeled_n = problem.labeled.count();
    if labeled_n == 0 {
        return Err(Error::Data("training requires a nonempty labeled store".into()));
    }
    if problem.labeled_targets.len() != labeled_n {
        return Err(Error::Dimension {
            what: "labeled targets".into(),
            expected: labeled_n,
            got: problem.labeled_targets.len(),
        });
    }
    let c = problem.class_count;
    let mut warnings = Vec::new();
    let mut present = vec![false; c];
    for &t in problem.labeled_targets {
        if (t as usize) < c {
            present[t as usize] = true;
        }
    }
    for (ix, p) in present.iter().enumerate() {
        if !p {
            warnings.push(format!("class index {ix} has no labeled training data"));
        }
    }

    let x_l = store_to_f64(problem.labeled, None);
    let pseudo_data = problem.pseudo.map(|(store, rows, targets)| {
        (store_to_f64(store, Some(rows)), targets.to_vec(), rows.len())
    });

    let mut head = match &problem.initial {
        Some(h) => h.clone(),
        None => HeadParams::init(problem.labeled.dim, c, problem.spec, config.seed),
    };
    let mut state = OptimizerState::for_head(&head);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, HeadParams)> = None;

    for epoch in 0..config.epochs {
        let step = epoch + 1;
        let (labeled_loss, mut grads) = {
            let logits = forward(&head, &x_l, labeled_n)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, problem.labeled_targets, c)?;
            (loss, backward(&head, &x_l, labeled_n, &dlogits)?)
        };

        let alpha_t = if problem.alpha_ramp {
            let half = (config.epochs / 2).max(1);
            problem.alpha * (step.min(half) as f64 / half as f64)
        } else {
            problem.alpha
        };
        let mut pseudo_loss = 0.0;
        if alpha_t != 0.0 {
            if let Some((x_p, targets, n_p)) = &pseudo_data {
                if *n_p > 0 {
                    let logits = forward(&head, x_p, *n_p)?;
                    let (loss, dlogits) = softmax_cross_entropy(&logits, targets, c)?;
                    let g = backward(&head, x_p, *n_p, &dlogits)?;
                    grads.add_scaled(&g, alpha_t);
                    pseudo_loss = alpha_t * loss;
                }
            }
        }

        let loss = labeled_loss + pseudo_loss;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss} at step {step}")));
        }

        let lr = cosine_warmup_lr(step, config)?;
        adamw_step(&mut head, &grads, &mut state, lr, config)?;

        let val_accuracy = match problem.val {
            Some((store, targets)) => {
                let acc = accuracy_on(&head, store, targets)?;
                if best.as_ref().map(|(b, _, _)| acc > *b).unwrap_or(true) {
                    best = Some((acc, epoch, head.clone()));
                }
                Some(acc)
            }
            None => None,
        };
        history.push(EpochStats {
            epoch,
            loss,
            labeled_loss,
            pseudo_loss,
            lr,
            val_accuracy,
        });
    }

    let (head, best_epoch) = match best {
        Some((_, epoch, snapshot)) => (snapshot, Some(epoch)),
        None => (head, None),
    };
    Ok(TrainedHead {
        head,
        history,
        warnings,
        best_epoch,
    })
}

/// Train a head on a labeled store (targets must be dense `[0, C)`).
///
/// Full-batch AdamW for `config.epochs` steps. With a validation store the
/// best-validation-accuracy snapshot is returned, otherwise the final
/// parameters.
pub fn train_head(
    labeled: &EmbeddingStore,
    class_count: usize,
    spec: HeadSpec,
    config: &TrainConfig,
    val: Option<(&EmbeddingStore, &[u32])>,
) -> Result<TrainedHead> {
    let targets = labeled
        .labels
        .clone()
        .ok_or_else(|| Error::Data("training requires labels".into()))?;
    run_training(
        &TrainProblem {
            labeled,
            labeled_targets: &targets,
            pseudo: None,
            alpha: 0.0,
            alpha_ramp: false,
            class_count,
            spec,
            val,
            initial: None,
        },
        config,
    )
}

/// Per-row class probabilities and argmax labels (dense class indices).
#[derive(Debug, Clone)]
pub struct Predictions {
    pub class_count: usize,
    pub probabilities: Vec<f64>,
    pub labels: Vec<u32>,
    pub confidences: Vec<f64>,
}

/// Softmax of the head's logits for every row of a store.
pub fn predict(head: &HeadParams, store: &EmbeddingStore) -> Result<Predictions> {
    let n = store.count();
    let c = head.class_count();
    let x = store_to_f64(store, None);
    let logits = forward(head, &x, n)?;
    let mut probabilities = vec![0.0; n * c];
    let mut labels = Vec::with_capacity(n);
    let mut confidences = Vec::with_capacity(n);
    for b in 0..n {
        let row = &logits[b * c..(b + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += (v - max).exp();
        }
        let mut best = 0usize;
        for ci in 0..c {
            let p = (row[ci] - max).exp() / sum;
            probabilities[b * c + ci] = p;
            if probabilities[b * c + ci] > probabilities[b * c + best] {
                best = ci;
            }
        }
        labels.push(best as u32);
        confidences.push(probabilities[b * c + best]);
    }
    Ok(Predictions {
        class_count: c,
        probabilities,
        labels,
        confidences,
    })
}

fn accuracy_on(head: &HeadParams, store: &EmbeddingStore, targets: &[u32]) -> Result<f64> {
    let preds = predict(head, store)?;
    if preds.labels.is_empty() {
        return Ok(0.0);
    }
    let correct = preds
        .labels
        .iter()
        .zip(targets)
        .filter(|(a, b)| a == b)
        .count();
    Ok(correct as f64 / targets.len() as f64)
}

/// Evaluate head accuracy against dense targets.
pub fn evaluate_head(head: &HeadParams, store: &EmbeddingStore, targets: &[u32]) -> Result<f64> {
    if store.count() != targets.len() {
        return Err(Error::Dimension {
            what: "evaluation targets".into(),
            expected: store.count(),
            got: targets.len(),
        });
    }
    accuracy_on(head, store, targets)
}

/// Representation feeding the final layer: the hidden activations for an
/// MLP head, the input embeddings themselves for a linear head.
pub fn penultimate(head: &HeadParams, store: &EmbeddingStore) -> Result<Vec<f64>> {
    let n = store.count();
    let x = store_to_f64(store, None);
    if head.layers.len() == 1 {
        return Ok(x);
    }
    let trace = forward_trace(head, &x, n)?;
    Ok(trace.post.last().expect("mlp has a hidden layer").clone())
}

const HEAD_MAGIC: &[u8; 4] = b"HEAD";
const HEAD_VERSION: u16 = 1;

/// Serialize a head: magic "HEAD", version u16 LE, class count u32 LE,
/// layer count u8, per layer rows/cols u32 LE + f64 LE weights (row-major)
/// + f64 LE bias, CRC32 trailer. A single layer means a linear head, two
/// layers a GELU MLP.
pub fn save_head(head: &HeadParams, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(HEAD_MAGIC);
    buf.extend_from_slice(&HEAD_VERSION.to_le_bytes());
    buf.extend_from_slice(&(head.class_count() as u32).to_le_bytes());
    buf.push(head.layers.len() as u8);
    for layer in &head.layers {
        buf.extend_from_slice(&(layer.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(layer.cols as u32).to_le_bytes());
        for w in &layer.weights {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        for b in &layer.bias {
            buf.extend_from_slice(&b.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Load a head checkpoint saved by [`save_head`].
pub fn load_head(path: &Path) -> Result<HeadParams> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 11 + 4 {
        return Err(Error::format(path, "file too short for header"));
    }
    if &buf[0..4] != HEAD_MAGIC {
        return Err(Error::format(path, "bad magic, expected \"HEAD\""));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != HEAD_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let body = &buf[..buf.len() - 4];
    let stored_crc = u32::from_le_bytes(buf[buf.len() - 4..].try_into().unwrap());
    if crc32fast::hash(body) != stored_crc {
        return Err(Error::format(path, "checksum mismatch"));
    }
    let class_count = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as usize;
    let layer_count = buf[10] as usize;
    let mut off = 11;
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        if off + 8 > body.len() {
            return Err(Error::format(path, "truncated layer header"));
        }
        let rows = u32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(buf[off + 4..off + 8].try_into().unwrap()) as usize;
        off += 8;
        let need = (rows * cols + rows) * 8;
        if off + need > body.len() {
            return Err(Error::format(path, "truncated layer payload"));
        }
        let mut weights = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            weights.push(f64::from_le_bytes(buf[off..off + 8].try_into().unwrap()));
            off += 8;
        }
        let mut bias = Vec::with_capacity(rows);
        for _ in 0..rows {
            bias.push(f64::from_le_bytes(buf[off..off + 8].try_into().unwrap()));
            off += 8;
        }
        layers.push(Layer {
            rows,
            cols,
            weights,
            bias,
        });
    }
    if off != body.len() {
        return Err(Error::format(path, "trailing bytes after layers"));
    }
    if layers.is_empty() || layers.last().unwrap().rows != class_count {
        return Err(Error::format(path, "layer shapes disagree with class count"));
    }
    let activation = if layers.len() == 1 {
        Activation::None
    } else {
        Activation::Gelu
    };
    Ok(HeadParams { layers, activation })
}
