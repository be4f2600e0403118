//! A single feed-forward block (linear, exact GeLU, linear, softmax) with
//! synthetic classification data, so the pruning pipeline can be exercised
//! end to end without an external model.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::activation::ActivationMatrix;
use crate::error::{invalid_param, Error, Result};
use crate::mask::PruneMask;
use crate::metrics::{accuracy, Architecture, FfnShape};

pub const DEFAULT_STEPS: usize = 500;
pub const DEFAULT_LR: f64 = 0.05;

/// Distance of each class centre from the origin, in noise standard deviations.
const CENTER_RADIUS: f64 = 3.0;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for mut row in out.row_iter_mut() {
        let m = row.max();
        row.apply(|v| *v = (*v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// How input features relate to the latent class structure.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum RedundancyPlan {
    /// Every input feature is an independent latent coordinate.
    #[default]
    None,
    /// Input feature `j` is a noisy copy of latent factor `j % groups`.
    Grouped { groups: usize, noise: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(rows.iter()),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            n_classes: self.n_classes,
        }
    }

    /// First `n_train` rows and the rest.
    pub fn split(&self, n_train: usize) -> Result<(Dataset, Dataset)> {
        if n_train == 0 || n_train >= self.len() {
            return Err(invalid_param(format!("split point {n_train} outside (0, {})", self.len())));
        }
        let a: Vec<usize> = (0..n_train).collect();
        let b: Vec<usize> = (n_train..self.len()).collect();
        Ok((self.select(&a), self.select(&b)))
    }
}

/// Seeded Gaussian-blob classification data.
///
/// Class `c` is centred at `±3 e_{c/2}` in latent space (sign alternating
/// with `c`), with unit isotropic noise. Classes are balanced round-robin.
pub fn synth_task(seed: u64, n_samples: usize, d_in: usize, n_classes: usize, plan: RedundancyPlan) -> Result<Dataset> {
    if n_samples == 0 {
        return Err(invalid_param("n_samples must be positive"));
    }
    if d_in == 0 {
        return Err(invalid_param("d_in must be positive"));
    }
    if n_classes < 2 {
        return Err(invalid_param("need at least two classes"));
    }
    let latent_dim = match plan {
        RedundancyPlan::None => d_in,
        RedundancyPlan::Grouped { groups, noise } => {
            if groups == 0 || groups > d_in {
                return Err(invalid_param(format!("group count {groups} outside [1, {d_in}]")));
            }
            if !(noise >= 0.0) || !noise.is_finite() {
                return Err(invalid_param(format!("group noise must be non-negative, got {noise}")));
            }
            groups
        }
    };
    if n_classes > 2 * latent_dim {
        return Err(invalid_param(format!("{n_classes} classes need a latent dimension of at least {}", n_classes.div_ceil(2))));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = DMatrix::zeros(n_samples, d_in);
    let mut labels = Vec::with_capacity(n_samples);
    let mut latent = vec![0.0; latent_dim];
    for i in 0..n_samples {
        let c = i % n_classes;
        for z in latent.iter_mut() {
            *z = StandardNormal.sample(&mut rng);
        }
        latent[c / 2] += if c % 2 == 0 { CENTER_RADIUS } else { -CENTER_RADIUS };
        for j in 0..d_in {
            inputs[(i, j)] = match plan {
                RedundancyPlan::None => latent[j],
                RedundancyPlan::Grouped { groups, noise } => {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    latent[j % groups] + noise * eps
                }
            };
        }
        labels.push(c);
    }
    // Shuffle so that contiguous splits stay balanced in expectation.
    let mut order: Vec<usize> = (0..n_samples).collect();
    for i in (1..n_samples).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    Ok(Dataset { inputs, labels, n_classes }.select(&order))
}

/// `d_in -> K -> C` classifier with an exact GeLU hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyFfn {
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
    b2: DVector<f64>,
}

impl ToyFfn {
    pub fn from_parts(w1: DMatrix<f64>, b1: DVector<f64>, w2: DMatrix<f64>, b2: DVector<f64>) -> Result<Self> {
        let (d_in, k) = w1.shape();
        if d_in == 0 || k == 0 || w2.ncols() == 0 {
            return Err(invalid_param("model dimensions must be positive"));
        }
        if b1.len() != k || w2.nrows() != k || b2.len() != w2.ncols() {
            return Err(invalid_param(format!(
                "inconsistent shapes: W1 {:?}, b1 {}, W2 {:?}, b2 {}",
                w1.shape(),
                b1.len(),
                w2.shape(),
                b2.len()
            )));
        }
        let all = w1.iter().chain(b1.iter()).chain(w2.iter()).chain(b2.iter());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(invalid_param("model parameters must be finite"));
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    /// Seeded initialisation: `W1 ~ N(0, 2/d_in)`, `W2 ~ N(0, 1/K)`, zero biases.
    pub fn init(d_in: usize, k: usize, n_classes: usize, seed: u64) -> Result<Self> {
        if d_in == 0 || k == 0 || n_classes == 0 {
            return Err(invalid_param("model dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s1 = (2.0 / d_in as f64).sqrt();
        let s2 = (1.0 / k as f64).sqrt();
        let w1 = DMatrix::from_fn(d_in, k, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            s1 * z
        });
        let w2 = DMatrix::from_fn(k, n_classes, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            s2 * z
        });
        Self::from_parts(w1, DVector::zeros(k), w2, DVector::zeros(n_classes))
    }

    pub fn d_in(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.w2.ncols()
    }

    pub fn w1(&self) -> &DMatrix<f64> {
        &self.w1
    }

    pub fn b1(&self) -> &DVector<f64> {
        &self.b1
    }

    /// Outgoing weights, one row per hidden neuron.
    pub fn w2(&self) -> &DMatrix<f64> {
        &self.w2
    }

    pub fn b2(&self) -> &DVector<f64> {
        &self.b2
    }

    pub fn shape(&self) -> FfnShape {
        FfnShape { d_in: self.d_in(), hidden: self.hidden(), d_out: self.n_classes() }
    }

    /// The prunable FFN plus a fixed cost for the output bias and softmax.
    pub fn architecture(&self) -> Architecture {
        Architecture { ffn_layers: vec![self.shape()], fixed_flops: 4 * self.n_classes() as u64 }
    }

    /// Pre-activations `X W1 + b1`.
    fn pre_activation(&self, inputs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut a = inputs * &self.w1;
        for mut row in a.row_iter_mut() {
            row += self.b1.transpose();
        }
        a
    }

    fn check_inputs(&self, inputs: &DMatrix<f64>) -> Result<()> {
        if inputs.ncols() != self.d_in() {
            return Err(invalid_param(format!("inputs have {} features, model expects {}", inputs.ncols(), self.d_in())));
        }
        Ok(())
    }

    pub fn hidden_activations(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_inputs(inputs)?;
        Ok(self.pre_activation(inputs).map(gelu))
    }

    fn head(&self, hidden: &DMatrix<f64>) -> DMatrix<f64> {
        let mut logits = hidden * &self.w2;
        for mut row in logits.row_iter_mut() {
            row += self.b2.transpose();
        }
        logits
    }

    pub fn logits(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.head(&self.hidden_activations(inputs)?))
    }

    /// Class-probability rows.
    pub fn forward(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(softmax_rows(&self.logits(inputs)?))
    }

    /// Forward pass with the dropped hidden units zeroed. Survivors are untouched.
    pub fn forward_with_mask(&self, mask: &PruneMask, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_mask(mask)?;
        let mut h = self.hidden_activations(inputs)?;
        for j in mask.dropped_indices() {
            h.column_mut(j).fill(0.0);
        }
        Ok(softmax_rows(&self.head(&h)))
    }

    /// The smaller model obtained by deleting dropped units from both layers.
    pub fn reduced(&self, mask: &PruneMask) -> Result<ToyFfn> {
        self.check_mask(mask)?;
        let kept = mask.kept_indices();
        ToyFfn::from_parts(
            self.w1.select_columns(kept.iter()),
            self.b1.select_rows(kept.iter()),
            self.w2.select_rows(kept.iter()),
            self.b2.clone(),
        )
    }

    fn check_mask(&self, mask: &PruneMask) -> Result<()> {
        if mask.len() != self.hidden() {
            return Err(invalid_param(format!("mask covers {} neurons, model has {}", mask.len(), self.hidden())));
        }
        if mask.kept_count() == 0 {
            return Err(invalid_param("mask drops every neuron"));
        }
        Ok(())
    }

    /// Parameters in the order W1 (row-major), b1, W2 (row-major), b2.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend(self.w1.transpose().iter());
        out.extend(self.b1.iter());
        out.extend(self.w2.transpose().iter());
        out.extend(self.b2.iter());
        out
    }

    pub fn param_count(&self) -> usize {
        Self::param_count_for(self.d_in(), self.hidden(), self.n_classes())
    }

    pub fn param_count_for(d_in: usize, k: usize, c: usize) -> usize {
        d_in * k + k + k * c + c
    }

    pub fn from_flat(d_in: usize, k: usize, c: usize, params: &[f64]) -> Result<Self> {
        let expected = Self::param_count_for(d_in, k, c);
        if params.len() != expected {
            return Err(invalid_param(format!("expected {expected} parameters, got {}", params.len())));
        }
        let (w1, rest) = params.split_at(d_in * k);
        let (b1, rest) = rest.split_at(k);
        let (w2, b2) = rest.split_at(k * c);
        Self::from_parts(
            DMatrix::from_row_slice(d_in, k, w1),
            DVector::from_column_slice(b1),
            DMatrix::from_row_slice(k, c, w2),
            DVector::from_column_slice(b2),
        )
    }

    /// Copies hidden unit `src` into slot `dst`, so both produce identical
    /// activations.
    pub fn with_copied_unit(&self, src: usize, dst: usize) -> Result<ToyFfn> {
        let k = self.hidden();
        if src >= k || dst >= k {
            return Err(invalid_param(format!("unit index outside [0, {k})")));
        }
        let mut out = self.clone();
        let col = self.w1.column(src).clone_owned();
        out.w1.set_column(dst, &col);
        out.b1[dst] = self.b1[src];
        let row = self.w2.row(src).clone_owned();
        out.w2.set_row(dst, &row);
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { hidden: 64, steps: DEFAULT_STEPS, lr: DEFAULT_LR, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: ToyFfn,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

fn cross_entropy(probs: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    -labels.iter().enumerate().map(|(i, &y)| probs[(i, y)].ln().max(-700.0)).sum::<f64>() / n
}

/// Full-batch gradient descent on mean cross-entropy.
pub fn train_toy_ffn(data: &Dataset, config: &TrainConfig) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(invalid_param("empty training set"));
    }
    if data.labels.iter().any(|&y| y >= data.n_classes) {
        return Err(invalid_param("label outside the class range"));
    }
    if !(config.lr > 0.0) || !config.lr.is_finite() {
        return Err(invalid_param(format!("learning rate must be positive, got {}", config.lr)));
    }
    let x = &data.inputs;
    let n = data.len() as f64;
    let mut model = ToyFfn::init(x.ncols(), config.hidden, data.n_classes, config.seed)?;
    let mut loss = f64::NAN;

    for step in 0..=config.steps {
        let a = model.pre_activation(x);
        let h = a.map(gelu);
        let probs = softmax_rows(&model.head(&h));
        loss = cross_entropy(&probs, &data.labels);
        if !loss.is_finite() || probs.iter().any(|p| p.is_nan()) {
            let max_w = model.to_flat().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            return Err(Error::Training(format!(
                "loss became {loss} at step {step} (lr {}, largest |parameter| {max_w:.3e})",
                config.lr
            )));
        }
        if step == config.steps {
            break;
        }
        let mut d_logits = probs;
        for (i, &y) in data.labels.iter().enumerate() {
            d_logits[(i, y)] -= 1.0;
        }
        d_logits /= n;
        let d_w2 = h.transpose() * &d_logits;
        let d_b2 = d_logits.row_sum().transpose();
        let mut d_a = &d_logits * model.w2.transpose();
        d_a.zip_apply(&a, |g, pre| *g *= gelu_grad(pre));
        let d_w1 = x.transpose() * &d_a;
        let d_b1 = d_a.row_sum().transpose();

        model.w1 -= d_w1 * config.lr;
        model.b1 -= d_b1 * config.lr;
        model.w2 -= d_w2 * config.lr;
        model.b2 -= d_b2 * config.lr;
    }
    let train_accuracy = accuracy(&model.forward(x)?, &data.labels)?;
    Ok(TrainReport { model, final_loss: loss, train_accuracy })
}

/// Post-GeLU hidden activations of `inputs`, the pruning substrate.
pub fn capture_activations(model: &ToyFfn, inputs: &DMatrix<f64>, layer_id: &str) -> Result<ActivationMatrix> {
    ActivationMatrix::new(model.hidden_activations(inputs)?, layer_id, 1.0)
}
