//! Feed-forward rectifier network that predicts accelerations, integrated
//! semi-implicitly into a next-state prediction.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{TransitionDataset, TransitionRecord};
use crate::error::{Error, Result};
use crate::linalg::{self, serde_matrix, serde_vector};

pub const HIDDEN_SIZES: [usize; 2] = [60, 40];
pub const MLP_FORMAT: &str = "adaptmpc-mlp";
pub const MLP_VERSION: u32 = 1;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Which inputs the network sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// `[x_t; u_t]`.
    Markov,
    /// `[x_{t-1}; u_{t-1}; x_t; u_t]`.
    Context,
}

/// Indices of the position and velocity blocks inside a state vector. The
/// i-th velocity is the time derivative of the i-th position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateLayout {
    pub position: Vec<usize>,
    pub velocity: Vec<usize>,
}

impl StateLayout {
    /// `[q; v]` with `n` entries each.
    pub fn split_half(n: usize) -> Self {
        Self { position: (0..n).collect(), velocity: (n..2 * n).collect() }
    }

    pub fn accel_dim(&self) -> usize {
        self.velocity.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    #[serde(with = "serde_matrix")]
    pub weights: DMatrix<f64>,
    #[serde(with = "serde_vector")]
    pub bias: DVector<f64>,
}

impl Dense {
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weights = DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..bound));
        Self { weights, bias: DVector::zeros(fan_out) }
    }
}

/// Per-dimension standardization of inputs and predicted accelerations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    #[serde(with = "serde_vector")]
    pub input_mean: DVector<f64>,
    #[serde(with = "serde_vector")]
    pub input_std: DVector<f64>,
    #[serde(with = "serde_vector")]
    pub accel_mean: DVector<f64>,
    #[serde(with = "serde_vector")]
    pub accel_std: DVector<f64>,
}

impl Normalization {
    pub fn identity(input_dim: usize, accel_dim: usize) -> Self {
        Self {
            input_mean: DVector::zeros(input_dim),
            input_std: DVector::from_element(input_dim, 1.0),
            accel_mean: DVector::zeros(accel_dim),
            accel_std: DVector::from_element(accel_dim, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub architecture: Architecture,
    pub state_dim: usize,
    pub action_dim: usize,
    pub dt: f64,
    pub layout: StateLayout,
    pub layers: Vec<Dense>,
    pub norm: Normalization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub accel: DVector<f64>,
    pub next_state: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Heavy-ball momentum.
    Sgd,
    /// Adam with `momentum` as the first-moment decay and 0.999 for the second.
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Fraction of the dataset held out for validation.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            learning_rate: 3e-3,
            momentum: 0.9,
            batch_size: 64,
            epochs: 200,
            weight_decay: 0.0,
            seed: 0,
            validation_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Next-state mean squared error on the training split.
    pub train_loss: f64,
    /// Next-state mean squared error on the validation split.
    pub val_loss: f64,
    /// Normalized training objective averaged over each epoch.
    pub epoch_losses: Vec<f64>,
    pub train_size: usize,
    pub val_size: usize,
}

#[derive(Serialize, Deserialize)]
struct MlpDocument {
    format: String,
    version: u32,
    model: MlpModel,
}

struct Cache {
    pre: Vec<DMatrix<f64>>,
    act: Vec<DMatrix<f64>>,
}

fn relu_mask(a: f64) -> f64 {
    if a > 0.0 {
        1.0
    } else {
        0.0
    }
}

impl MlpModel {
    /// Randomly initialized network with the standard 60/40 hidden layers.
    pub fn new(
        architecture: Architecture,
        state_dim: usize,
        action_dim: usize,
        layout: StateLayout,
        dt: f64,
        seed: u64,
    ) -> Result<Self> {
        Self::with_hidden(architecture, state_dim, action_dim, layout, dt, &HIDDEN_SIZES, seed)
    }

    pub fn with_hidden(
        architecture: Architecture,
        state_dim: usize,
        action_dim: usize,
        layout: StateLayout,
        dt: f64,
        hidden: &[usize],
        seed: u64,
    ) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidInput(format!("time step must be positive, got {dt}")));
        }
        if layout.position.len() != layout.velocity.len()
            || layout.position.iter().chain(&layout.velocity).any(|&i| i >= state_dim)
        {
            return Err(Error::InvalidInput("state layout does not fit the state dimension".into()));
        }
        let input_dim = match architecture {
            Architecture::Markov => state_dim + action_dim,
            Architecture::Context => 2 * (state_dim + action_dim),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(layout.accel_dim());
        let layers = sizes.windows(2).map(|w| Dense::glorot(w[0], w[1], &mut rng)).collect();
        let norm = Normalization::identity(input_dim, layout.accel_dim());
        Ok(Self { architecture, state_dim, action_dim, dt, layout, layers, norm })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn accel_dim(&self) -> usize {
        self.layout.accel_dim()
    }

    /// Offset of `x_t` inside the network input.
    pub fn current_state_offset(&self) -> usize {
        match self.architecture {
            Architecture::Markov => 0,
            Architecture::Context => self.state_dim + self.action_dim,
        }
    }

    /// Builds the network input for a record according to the architecture.
    pub fn input_for(&self, r: &TransitionRecord) -> DVector<f64> {
        match self.architecture {
            Architecture::Markov => r.state_action(),
            Architecture::Context => r.context_input(),
        }
    }

    pub fn check_invariants(&self) -> bool {
        let chain = self.layers.windows(2).all(|w| w[0].weights.nrows() == w[1].weights.ncols());
        let last = self.layers.last().map_or(false, |l| l.weights.nrows() == self.accel_dim());
        chain && last && self.dt > 0.0
    }

    fn validate_input(&self, input: &DVector<f64>) -> Result<()> {
        linalg::check_dim("network input", input.len(), self.input_dim())?;
        if !linalg::all_finite_vec(input) {
            return Err(Error::InvalidInput("non-finite network input".into()));
        }
        Ok(())
    }

    fn normalize_inputs(&self, inputs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = inputs.clone();
        for mut col in z.column_iter_mut() {
            for i in 0..col.len() {
                col[i] = (col[i] - self.norm.input_mean[i]) / self.norm.input_std[i];
            }
        }
        z
    }

    /// Forward pass on a batch whose columns are samples; returns raw network outputs.
    fn forward_batch(&self, inputs: &DMatrix<f64>) -> (DMatrix<f64>, Cache) {
        let mut act = vec![self.normalize_inputs(inputs)];
        let mut pre = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let mut a = &layer.weights * act.last().unwrap();
            for mut col in a.column_iter_mut() {
                col += &layer.bias;
            }
            let out = if li + 1 < self.layers.len() { a.map(|v| v.max(0.0)) } else { a.clone() };
            pre.push(a);
            act.push(out);
        }
        let out = act.last().unwrap().clone();
        (out, Cache { pre, act })
    }

    fn accel_from_output(&self, out: &DVector<f64>) -> DVector<f64> {
        out.component_mul(&self.norm.accel_std) + &self.norm.accel_mean
    }

    /// Semi-implicit step: velocity first, then position with the new velocity.
    pub fn integrate(&self, x: &DVector<f64>, accel: &DVector<f64>) -> DVector<f64> {
        let mut next = x.clone();
        for (k, (&qi, &vi)) in self.layout.position.iter().zip(&self.layout.velocity).enumerate() {
            let v_new = x[vi] + accel[k] * self.dt;
            next[vi] = v_new;
            next[qi] = x[qi] + v_new * self.dt;
        }
        next
    }

    pub fn current_state(&self, input: &DVector<f64>) -> DVector<f64> {
        input.rows(self.current_state_offset(), self.state_dim).into_owned()
    }

    pub fn forward(&self, input: &DVector<f64>) -> Result<Prediction> {
        self.validate_input(input)?;
        let (out, _) = self.forward_batch(&DMatrix::from_column_slice(input.len(), 1, input.as_slice()));
        let accel = self.accel_from_output(&out.column(0).into_owned());
        let next_state = self.integrate(&self.current_state(input), &accel);
        Ok(Prediction { accel, next_state })
    }

    /// Jacobian of the predicted acceleration with respect to the raw input.
    pub fn accel_jacobian(&self, input: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.validate_input(input)?;
        let (_, cache) = self.forward_batch(&DMatrix::from_column_slice(input.len(), 1, input.as_slice()));
        let n = self.layers.len();
        let mut j = self.layers[n - 1].weights.clone();
        for li in (0..n - 1).rev() {
            let mask = cache.pre[li].column(0).map(relu_mask);
            for (r, m) in mask.iter().enumerate() {
                if *m == 0.0 {
                    j.column_mut(r).fill(0.0);
                }
            }
            j = j * &self.layers[li].weights;
        }
        for (r, s) in self.norm.accel_std.iter().enumerate() {
            j.row_mut(r).scale_mut(*s);
        }
        for (c, s) in self.norm.input_std.iter().enumerate() {
            j.column_mut(c).unscale_mut(*s);
        }
        Ok(j)
    }

    /// Jacobian of the next-state prediction with respect to the full input.
    pub fn jacobian(&self, input: &DVector<f64>) -> Result<DMatrix<f64>> {
        let ja = self.accel_jacobian(input)?;
        let off = self.current_state_offset();
        let mut jac = DMatrix::zeros(self.state_dim, self.input_dim());
        for i in 0..self.state_dim {
            jac[(i, off + i)] = 1.0;
        }
        let dt = self.dt;
        for (k, (&qi, &vi)) in self.layout.position.iter().zip(&self.layout.velocity).enumerate() {
            jac[(qi, off + vi)] += dt;
            for c in 0..self.input_dim() {
                jac[(vi, c)] += dt * ja[(k, c)];
                jac[(qi, c)] += dt * dt * ja[(k, c)];
            }
        }
        Ok(jac)
    }

    /// Fits normalization statistics from a dataset (inputs and finite-difference accelerations).
    pub fn fit_normalization(&mut self, dataset: &TransitionDataset) {
        let inputs: Vec<DVector<f64>> = dataset.records.iter().map(|r| self.input_for(r)).collect();
        let accels: Vec<DVector<f64>> =
            dataset.records.iter().map(|r| self.empirical_accel(r)).collect();
        let (im, is) = mean_std(&inputs);
        let (am, as_) = mean_std(&accels);
        self.norm = Normalization { input_mean: im, input_std: is, accel_mean: am, accel_std: as_ };
    }

    fn empirical_accel(&self, r: &TransitionRecord) -> DVector<f64> {
        DVector::from_iterator(
            self.accel_dim(),
            self.layout.velocity.iter().map(|&vi| (r.x_next[vi] - r.x[vi]) / self.dt),
        )
    }

    /// Mean squared next-state error over the records, averaged over state dimensions.
    pub fn mse(&self, records: &[&TransitionRecord]) -> Result<f64> {
        if records.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for r in records {
            let p = self.forward(&self.input_for(r))?;
            total += (p.next_state - &r.x_next).norm_squared();
        }
        Ok(total / (records.len() * self.state_dim) as f64)
    }

    /// Minibatch training (momentum SGD or Adam) on next-state prediction error,
    /// backpropagated through the integrator.
    pub fn train(&mut self, dataset: &TransitionDataset, cfg: &TrainConfig) -> Result<TrainReport> {
        if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) || cfg.epochs == 0 {
            return Err(Error::Config(format!("invalid training config {cfg:?}")));
        }
        if !(cfg.validation_fraction > 0.0 && cfg.validation_fraction < 1.0) {
            return Err(Error::Config("validation fraction must lie in (0,1)".into()));
        }
        if dataset.len() < 2 * cfg.batch_size {
            return Err(Error::InvalidInput(format!(
                "dataset has {} rows, need at least {}",
                dataset.len(),
                2 * cfg.batch_size
            )));
        }
        linalg::check_dim("dataset state", dataset.state_dim(), self.state_dim)?;
        linalg::check_dim("dataset action", dataset.action_dim(), self.action_dim)?;

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        let n_val = ((dataset.len() as f64) * cfg.validation_fraction).round().max(1.0) as usize;
        let (val_idx, train_idx) = order.split_at(n_val);
        let train_set = TransitionDataset {
            records: train_idx.iter().map(|&i| dataset.records[i].clone()).collect(),
            meta: dataset.meta.clone(),
        };
        self.fit_normalization(&train_set);

        // One scale for every state dimension.
        let deltas: Vec<DVector<f64>> = train_set.records.iter().map(|r| &r.x_next - &r.x).collect();
        let (_, delta_std) = mean_std(&deltas);
        let scale = delta_std.map(|s| s * s).mean().max(f64::MIN_POSITIVE);
        let inv_var = DVector::from_element(self.state_dim, 1.0 / scale);

        let inputs: Vec<DVector<f64>> = train_set.records.iter().map(|r| self.input_for(r)).collect();
        let mut velocity: Vec<(DMatrix<f64>, DVector<f64>)> = self
            .layers
            .iter()
            .map(|l| (DMatrix::zeros(l.weights.nrows(), l.weights.ncols()), DVector::zeros(l.bias.len())))
            .collect();

        let mut second = velocity.clone();
        let mut step = 0i32;
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        let mut idx: Vec<usize> = (0..train_set.len()).collect();
        let mut initial: Option<f64> = None;
        for epoch in 0..cfg.epochs {
            idx.shuffle(&mut rng);
            let mut sum = 0.0;
            let mut batches = 0usize;
            for chunk in idx.chunks(cfg.batch_size) {
                let (loss, grads) = self.batch_gradient(&train_set.records, &inputs, chunk, &inv_var);
                if !loss.is_finite() {
                    return Err(Error::Divergence(format!("non-finite loss at epoch {epoch}")));
                }
                sum += loss;
                batches += 1;
                step += 1;
                let layers = self.layers.iter_mut().zip(velocity.iter_mut()).zip(second.iter_mut());
                for (((layer, vel), sq), (gw, gb)) in layers.zip(grads) {
                    let gw = gw + &layer.weights * cfg.weight_decay;
                    match cfg.optimizer {
                        Optimizer::Sgd => {
                            vel.0 = &vel.0 * cfg.momentum - gw * cfg.learning_rate;
                            vel.1 = &vel.1 * cfg.momentum - gb * cfg.learning_rate;
                            layer.weights += &vel.0;
                            layer.bias += &vel.1;
                        }
                        Optimizer::Adam => {
                            let (b1, b2) = (cfg.momentum, ADAM_BETA2);
                            let c1 = 1.0 - b1.powi(step);
                            let c2 = 1.0 - b2.powi(step);
                            vel.0 = &vel.0 * b1 + &gw * (1.0 - b1);
                            vel.1 = &vel.1 * b1 + &gb * (1.0 - b1);
                            sq.0 = &sq.0 * b2 + gw.map(|g| g * g) * (1.0 - b2);
                            sq.1 = &sq.1 * b2 + gb.map(|g| g * g) * (1.0 - b2);
                            let lr = cfg.learning_rate;
                            layer.weights -= vel.0.zip_map(&sq.0, |m, v| lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS));
                            layer.bias -= vel.1.zip_map(&sq.1, |m, v| lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS));
                        }
                    }
                }
            }
            let avg = sum / batches as f64;
            let first = *initial.get_or_insert(avg);
            if avg > 1e3 * first {
                return Err(Error::Divergence(format!(
                    "epoch {epoch} loss {avg:.3e} exceeds 1000x the initial {first:.3e}"
                )));
            }
            epoch_losses.push(avg);
        }

        let train_refs: Vec<&TransitionRecord> = train_set.records.iter().collect();
        let val_refs: Vec<&TransitionRecord> = val_idx.iter().map(|&i| &dataset.records[i]).collect();
        Ok(TrainReport {
            train_loss: self.mse(&train_refs)?,
            val_loss: self.mse(&val_refs)?,
            epoch_losses,
            train_size: train_refs.len(),
            val_size: val_refs.len(),
        })
    }

    fn batch_gradient(
        &self,
        records: &[TransitionRecord],
        inputs: &[DVector<f64>],
        chunk: &[usize],
        inv_var: &DVector<f64>,
    ) -> (f64, Vec<(DMatrix<f64>, DVector<f64>)>) {
        let b = chunk.len();
        let dim_in = self.input_dim();
        let x = DMatrix::from_fn(dim_in, b, |r, c| inputs[chunk[c]][r]);
        let (out, cache) = self.forward_batch(&x);
        let scale = 1.0 / (b * self.state_dim) as f64;
        let dt = self.dt;
        let mut loss = 0.0;
        let mut grad_out = DMatrix::zeros(self.accel_dim(), b);
        for (c, &i) in chunk.iter().enumerate() {
            let rec = &records[i];
            let accel = self.accel_from_output(&out.column(c).into_owned());
            let pred = self.integrate(&rec.x, &accel);
            let err = pred - &rec.x_next;
            loss += err.component_mul(&err).dot(inv_var) * scale;
            let g = err.component_mul(inv_var) * (2.0 * scale);
            for (k, (&qi, &vi)) in self.layout.position.iter().zip(&self.layout.velocity).enumerate() {
                grad_out[(k, c)] = (dt * g[vi] + dt * dt * g[qi]) * self.norm.accel_std[k];
            }
        }
        let n = self.layers.len();
        let mut grads = vec![(DMatrix::zeros(0, 0), DVector::zeros(0)); n];
        let mut delta = grad_out;
        for li in (0..n).rev() {
            let gw = &delta * cache.act[li].transpose();
            let gb = delta.column_sum();
            if li > 0 {
                let mut back = self.layers[li].weights.transpose() * &delta;
                back.zip_apply(&cache.pre[li - 1], |d, a| *d *= relu_mask(a));
                delta = back;
            }
            grads[li] = (gw, gb);
        }
        (loss, grads)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&MlpDocument {
            format: MLP_FORMAT.into(),
            version: MLP_VERSION,
            model: self.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: MlpDocument = serde_json::from_str(s)?;
        if doc.format != MLP_FORMAT || doc.version != MLP_VERSION {
            return Err(Error::InvalidInput(format!("unsupported model document {} v{}", doc.format, doc.version)));
        }
        if !doc.model.check_invariants() {
            return Err(Error::InvalidInput("model layers do not chain".into()));
        }
        Ok(doc.model)
    }
}

/// Per-dimension mean and standard deviation, with degenerate deviations replaced by 1.
fn mean_std(rows: &[DVector<f64>]) -> (DVector<f64>, DVector<f64>) {
    let d = rows.first().map_or(0, |r| r.len());
    let n = rows.len().max(1) as f64;
    let mut mean = DVector::zeros(d);
    for r in rows {
        mean += r;
    }
    mean /= n;
    let mut var = DVector::zeros(d);
    for r in rows {
        let e = r - &mean;
        var += e.component_mul(&e);
    }
    var /= n;
    let std = var.map(|v| if v.sqrt() > 1e-8 { v.sqrt() } else { 1.0 });
    (mean, std)
}
