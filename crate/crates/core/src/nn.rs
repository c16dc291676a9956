//! Fully connected ReLU network with a linear output layer.
//!
//! Inputs and outputs pass through a fixed affine standardization stored in
//! the model (identity unless built with [`MlpModel::for_data`]). The loss and
//! parameter gradients are defined on the standardized scale; prediction,
//! Jacobians and training history are in original units.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TrainingSet;
use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    /// Plain gradient descent with a fixed step.
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub l2_penalty: f64,
    pub learning_rate: f64,
    /// Per-epoch multiplicative learning-rate decay.
    #[serde(default = "one")]
    pub lr_decay: f64,
    /// Mini-batch size; `0` means full batch.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    #[serde(default = "adam")]
    pub optimizer: Optimizer,
}

fn one() -> f64 {
    1.0
}

fn adam() -> Optimizer {
    Optimizer::Adam
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            l2_penalty: 1e-4,
            learning_rate: 1e-3,
            lr_decay: 1.0,
            batch_size: 32,
            max_epochs: 2000,
            early_stop_patience: 50,
            seed: 0,
            optimizer: Optimizer::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("train config: {m}")));
        if !(self.l2_penalty >= 0.0 && self.l2_penalty.is_finite()) {
            return bad("l2_penalty must be finite and >= 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    /// `out × in`
    w: DMatrix<f64>,
    b: DVector<f64>,
}

/// Gradient of the loss with respect to each layer's weights and intercepts.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl ParamGrad {
    pub fn norm(&self) -> f64 {
        self.weights
            .iter()
            .map(|w| w.norm_squared())
            .chain(self.biases.iter().map(|b| b.norm_squared()))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mae: f64,
    pub train_mse: f64,
    pub val_mae: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpData", into = "MlpData")]
pub struct MlpModel {
    pub layer_sizes: Vec<usize>,
    layers: Vec<Layer>,
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output_shift: Vec<f64>,
    pub output_scale: Vec<f64>,
    pub config: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
struct MlpData {
    layer_sizes: Vec<usize>,
    /// Row-major `out × in` matrices.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    input_shift: Vec<f64>,
    input_scale: Vec<f64>,
    output_shift: Vec<f64>,
    output_scale: Vec<f64>,
    config: Option<TrainConfig>,
}

impl From<MlpModel> for MlpData {
    fn from(m: MlpModel) -> Self {
        Self {
            weights: m.layers.iter().map(|l| l.w.transpose().as_slice().to_vec()).collect(),
            biases: m.layers.iter().map(|l| l.b.as_slice().to_vec()).collect(),
            layer_sizes: m.layer_sizes,
            input_shift: m.input_shift,
            input_scale: m.input_scale,
            output_shift: m.output_shift,
            output_scale: m.output_scale,
            config: m.config,
        }
    }
}

impl TryFrom<MlpData> for MlpModel {
    type Error = Error;

    fn try_from(d: MlpData) -> Result<Self> {
        let mut m = MlpModel::zeros(&d.layer_sizes)?;
        check_len("MLP weight matrices", m.layers.len(), d.weights.len())?;
        check_len("MLP intercept vectors", m.layers.len(), d.biases.len())?;
        for (l, (w, b)) in m.layers.iter_mut().zip(d.weights.iter().zip(&d.biases)) {
            check_len("MLP weight matrix", l.w.len(), w.len())?;
            check_len("MLP intercepts", l.b.len(), b.len())?;
            l.w = DMatrix::from_row_slice(l.w.nrows(), l.w.ncols(), w);
            l.b = DVector::from_column_slice(b);
        }
        m.set_scaling(d.input_shift, d.input_scale, d.output_shift, d.output_scale)?;
        m.config = d.config;
        m.check_finite()?;
        Ok(m)
    }
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

impl MlpModel {
    /// All weights and intercepts zero, identity scaling.
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer sizes must have >= 2 positive entries, got {layer_sizes:?}"
            )));
        }
        let layers = layer_sizes
            .windows(2)
            .map(|w| Layer {
                w: DMatrix::zeros(w[1], w[0]),
                b: DVector::zeros(w[1]),
            })
            .collect();
        let (din, dout) = (layer_sizes[0], *layer_sizes.last().unwrap());
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            layers,
            input_shift: vec![0.0; din],
            input_scale: vec![1.0; din],
            output_shift: vec![0.0; dout],
            output_scale: vec![1.0; dout],
            config: None,
        })
    }

    /// Seeded fan-in-scaled uniform weights, zero intercepts, identity scaling.
    pub fn new(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        let mut m = Self::zeros(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = m.layers.len() - 1;
        for (i, l) in m.layers.iter_mut().enumerate() {
            let fan_in = l.w.ncols() as f64;
            let limit = if i == last { (3.0 / fan_in).sqrt() } else { (6.0 / fan_in).sqrt() };
            l.w = DMatrix::from_fn(l.w.nrows(), l.w.ncols(), |_, _| rng.random_range(-limit..limit));
        }
        Ok(m)
    }

    /// Like [`MlpModel::new`], with input/output standardization fitted to
    /// `training` (per-input mean and sd; per-output mean and one pooled sd).
    pub fn for_data(layer_sizes: &[usize], training: &TrainingSet, seed: u64) -> Result<Self> {
        let mut m = Self::new(layer_sizes, seed)?;
        m.check_dims(training)?;
        let n = training.len() as f64;
        let mean = |rows: &[Vec<f64>], j: usize| rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let din = training.input_dim();
        let in_shift: Vec<f64> = (0..din).map(|j| mean(&training.inputs, j)).collect();
        let in_scale: Vec<f64> = (0..din)
            .map(|j| {
                let v = training.inputs.iter().map(|r| (r[j] - in_shift[j]).powi(2)).sum::<f64>() / n;
                if v > 0.0 { v.sqrt() } else { 1.0 }
            })
            .collect();
        let dout = training.output_dim();
        let out_shift: Vec<f64> = (0..dout).map(|j| mean(&training.outputs, j)).collect();
        let pooled = training
            .outputs
            .iter()
            .flat_map(|r| r.iter().zip(&out_shift).map(|(y, m)| (y - m).powi(2)))
            .sum::<f64>()
            / (n * dout as f64);
        let out_scale = if pooled > 0.0 { pooled.sqrt() } else { 1.0 };
        m.set_scaling(in_shift, in_scale, out_shift, vec![out_scale; dout])?;
        Ok(m)
    }

    pub fn set_scaling(
        &mut self,
        input_shift: Vec<f64>,
        input_scale: Vec<f64>,
        output_shift: Vec<f64>,
        output_scale: Vec<f64>,
    ) -> Result<()> {
        check_len("MLP input shift", self.input_dim(), input_shift.len())?;
        check_len("MLP input scale", self.input_dim(), input_scale.len())?;
        check_len("MLP output shift", self.output_dim(), output_shift.len())?;
        check_len("MLP output scale", self.output_dim(), output_scale.len())?;
        if input_scale.iter().chain(&output_scale).any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("scaling factors must be positive".into()));
        }
        self.input_shift = input_shift;
        self.input_scale = input_scale;
        self.output_shift = output_shift;
        self.output_scale = output_scale;
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn weights(&self, layer: usize) -> &DMatrix<f64> {
        &self.layers[layer].w
    }

    pub fn biases(&self, layer: usize) -> &DVector<f64> {
        &self.layers[layer].b
    }

    pub fn set_layer(&mut self, layer: usize, w: DMatrix<f64>, b: DVector<f64>) -> Result<()> {
        let l = &self.layers[layer];
        if w.shape() != l.w.shape() || b.len() != l.b.len() {
            return Err(Error::DimensionMismatch {
                context: "MLP layer",
                expected: l.w.len() + l.b.len(),
                got: w.len() + b.len(),
            });
        }
        self.layers[layer] = Layer { w, b };
        Ok(())
    }

    fn check_finite(&self) -> Result<()> {
        let ok = self.layers.iter().all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()));
        if ok {
            Ok(())
        } else {
            Err(Error::Validation("non-finite MLP parameters".into()))
        }
    }

    fn check_dims(&self, set: &TrainingSet) -> Result<()> {
        check_len("MLP input features", self.input_dim(), set.input_dim())?;
        check_len("MLP output features", self.output_dim(), set.output_dim())
    }

    fn normalize_input(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            x.len(),
            x.iter().zip(&self.input_shift).zip(&self.input_scale).map(|((v, m), s)| (v - m) / s),
        )
    }

    /// Network output on the standardized scale, plus hidden pre-activations.
    fn forward_raw(&self, u: DVector<f64>) -> (DVector<f64>, Vec<DVector<f64>>) {
        let mut a = u;
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let z = &l.w * &a + &l.b;
            if i == last {
                return (z, pre);
            }
            a = z.map(relu);
            pre.push(z);
        }
        unreachable!()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("MLP input", self.input_dim(), x.len())?;
        let (z, _) = self.forward_raw(self.normalize_input(x));
        Ok(z.iter()
            .zip(&self.output_shift)
            .zip(&self.output_scale)
            .map(|((z, m), s)| z * s + m)
            .collect())
    }

    /// `d forward / d x`, `d_out × d_in`. The ReLU derivative at 0 is 0.
    pub fn grad_input(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        check_len("MLP input", self.input_dim(), x.len())?;
        let (_, pre) = self.forward_raw(self.normalize_input(x));
        let mut j = self.layers[0].w.clone();
        for (c, s) in self.input_scale.iter().enumerate() {
            j.column_mut(c).scale_mut(1.0 / s);
        }
        for (l, z) in self.layers[1..].iter().zip(&pre) {
            for (r, zv) in z.iter().enumerate() {
                if *zv <= 0.0 {
                    j.row_mut(r).fill(0.0);
                }
            }
            j = &l.w * j;
        }
        for (r, s) in self.output_scale.iter().enumerate() {
            j.row_mut(r).scale_mut(*s);
        }
        Ok(j)
    }

    /// `J(x)ᵀ v` without forming the Jacobian.
    pub fn vjp(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        check_len("MLP input", self.input_dim(), x.len())?;
        check_len("MLP cotangent", self.output_dim(), v.len())?;
        let (_, pre) = self.forward_raw(self.normalize_input(x));
        let mut delta = DVector::from_iterator(v.len(), v.iter().zip(&self.output_scale).map(|(a, s)| a * s));
        for (l, z) in self.layers[1..].iter().zip(&pre).rev() {
            delta = l.w.tr_mul(&delta);
            delta.iter_mut().zip(z.iter()).for_each(|(d, z)| {
                if *z <= 0.0 {
                    *d = 0.0
                }
            });
        }
        let g = self.layers[0].w.tr_mul(&delta);
        Ok(g.iter().zip(&self.input_scale).map(|(g, s)| g / s).collect())
    }

    /// Standardized batch: samples as columns.
    fn batch_matrices(&self, set: &TrainingSet, rows: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
        let u = DMatrix::from_fn(self.input_dim(), rows.len(), |i, j| {
            (set.inputs[rows[j]][i] - self.input_shift[i]) / self.input_scale[i]
        });
        let y = DMatrix::from_fn(self.output_dim(), rows.len(), |i, j| {
            (set.outputs[rows[j]][i] - self.output_shift[i]) / self.output_scale[i]
        });
        (u, y)
    }

    fn forward_batch(&self, u: &DMatrix<f64>) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let mut acts = vec![u.clone()];
        let mut pres = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.w * acts.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += &l.b;
            }
            if i < last {
                acts.push(z.map(relu));
            }
            pres.push(z);
        }
        (acts, pres)
    }

    fn penalty(&self, l2: f64) -> f64 {
        l2 * self.layers.iter().map(|l| l.w.norm_squared()).sum::<f64>()
    }

    fn loss_and_grad_rows(&self, set: &TrainingSet, rows: &[usize], l2: f64, want_grad: bool) -> (f64, Option<ParamGrad>) {
        let (u, y) = self.batch_matrices(set, rows);
        let (acts, pres) = self.forward_batch(&u);
        let b = rows.len() as f64;
        let resid = pres.last().unwrap() - &y;
        let loss = resid.norm_squared() / b + self.penalty(l2);
        if !want_grad {
            return (loss, None);
        }
        let n = self.layers.len();
        let mut gw = vec![DMatrix::zeros(0, 0); n];
        let mut gb = vec![DVector::zeros(0); n];
        let mut delta = resid * (2.0 / b);
        for l in (0..n).rev() {
            gw[l] = &delta * acts[l].transpose() + &self.layers[l].w * (2.0 * l2);
            gb[l] = delta.column_sum();
            if l > 0 {
                let mut next = self.layers[l].w.tr_mul(&delta);
                next.zip_apply(&pres[l - 1], |d, z| {
                    if z <= 0.0 {
                        *d = 0.0
                    }
                });
                delta = next;
            }
        }
        (loss, Some(ParamGrad { weights: gw, biases: gb }))
    }

    /// Mean squared error over the batch plus `l2 · Σ‖A‖²_F`, on the
    /// standardized scale.
    pub fn loss(&self, batch: &TrainingSet, l2_penalty: f64) -> Result<f64> {
        self.check_dims(batch)?;
        let rows: Vec<usize> = (0..batch.len()).collect();
        Ok(self.loss_and_grad_rows(batch, &rows, l2_penalty, false).0)
    }

    pub fn grad_params(&self, batch: &TrainingSet, l2_penalty: f64) -> Result<ParamGrad> {
        self.check_dims(batch)?;
        let rows: Vec<usize> = (0..batch.len()).collect();
        Ok(self.loss_and_grad_rows(batch, &rows, l2_penalty, true).1.unwrap())
    }

    /// Mean absolute and mean squared error in original units, pooled over
    /// all outputs and samples.
    pub fn errors(&self, set: &TrainingSet) -> Result<(f64, f64)> {
        self.check_dims(set)?;
        let rows: Vec<usize> = (0..set.len()).collect();
        let (u, _) = self.batch_matrices(set, &rows);
        let (_, pres) = self.forward_batch(&u);
        let out = pres.last().unwrap();
        let (mut ae, mut se) = (0.0, 0.0);
        for (j, row) in set.outputs.iter().enumerate() {
            for (i, y) in row.iter().enumerate() {
                let e = out[(i, j)] * self.output_scale[i] + self.output_shift[i] - y;
                ae += e.abs();
                se += e * e;
            }
        }
        let n = (set.len() * self.output_dim()) as f64;
        Ok((ae / n, se / n))
    }

    /// Mini-batch training with early stopping on validation MSE. The
    /// weights of the best validation epoch are returned.
    pub fn train(&self, training: &TrainingSet, validation: &TrainingSet, config: &TrainConfig) -> Result<(MlpModel, TrainHistory)> {
        config.validate()?;
        self.check_dims(training)?;
        self.check_dims(validation)?;
        let mut model = self.clone();
        model.config = Some(config.clone());
        let mut history = TrainHistory::default();
        if config.max_epochs == 0 {
            return Ok((model, history));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n = training.len();
        let batch = if config.batch_size == 0 { n } else { config.batch_size.min(n) };
        let mut order: Vec<usize> = (0..n).collect();
        let nl = model.layers.len();
        let mut m_w: Vec<DMatrix<f64>> = model.layers.iter().map(|l| DMatrix::zeros(l.w.nrows(), l.w.ncols())).collect();
        let mut v_w = m_w.clone();
        let mut m_b: Vec<DVector<f64>> = model.layers.iter().map(|l| DVector::zeros(l.b.len())).collect();
        let mut v_b = m_b.clone();
        let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let mut step = 0i32;
        let mut best: Option<(f64, MlpModel)> = None;
        let mut since_best = 0;
        let mut lr = config.learning_rate;
        for epoch in 1..=config.max_epochs {
            if batch < n {
                order.shuffle(&mut rng);
            }
            for chunk in order.chunks(batch) {
                let (loss, grad) = model.loss_and_grad_rows(training, chunk, config.l2_penalty, true);
                if !loss.is_finite() {
                    return Err(Error::TrainingDiverged {
                        epoch,
                        reason: format!("loss is {loss}"),
                    });
                }
                let g = grad.unwrap();
                step += 1;
                match config.optimizer {
                    Optimizer::Sgd => {
                        for l in 0..nl {
                            model.layers[l].w -= &g.weights[l] * lr;
                            model.layers[l].b -= &g.biases[l] * lr;
                        }
                    }
                    Optimizer::Adam => {
                        let c1 = 1.0 - beta1.powi(step);
                        let c2 = 1.0 - beta2.powi(step);
                        let a = lr * c2.sqrt() / c1;
                        for l in 0..nl {
                            adam_update(&mut model.layers[l].w, &g.weights[l], &mut m_w[l], &mut v_w[l], a, beta1, beta2, eps * c2.sqrt());
                            adam_update(&mut model.layers[l].b, &g.biases[l], &mut m_b[l], &mut v_b[l], a, beta1, beta2, eps * c2.sqrt());
                        }
                    }
                }
            }
            lr *= config.lr_decay;
            let (train_mae, train_mse) = model.errors(training)?;
            let (val_mae, val_mse) = model.errors(validation)?;
            if !(train_mse.is_finite() && val_mse.is_finite()) {
                return Err(Error::TrainingDiverged {
                    epoch,
                    reason: "non-finite prediction error".into(),
                });
            }
            history.epochs.push(EpochRecord {
                epoch,
                train_mae,
                train_mse,
                val_mae,
                val_mse,
            });
            if best.as_ref().map_or(true, |(b, _)| val_mse < *b) {
                best = Some((val_mse, model.clone()));
                history.best_epoch = Some(epoch);
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= config.early_stop_patience {
                    history.stopped_early = true;
                    break;
                }
            }
        }
        let (_, best_model) = best.expect("at least one epoch ran");
        Ok((best_model, history))
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_update<D: nalgebra::Dim, C: nalgebra::Dim>(
    p: &mut nalgebra::OMatrix<f64, D, C>,
    g: &nalgebra::OMatrix<f64, D, C>,
    m: &mut nalgebra::OMatrix<f64, D, C>,
    v: &mut nalgebra::OMatrix<f64, D, C>,
    a: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) where
    nalgebra::DefaultAllocator: nalgebra::allocator::Allocator<D, C>,
{
    for i in 0..p.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        p[i] -= a * m[i] / (v[i].sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn set(inputs: Vec<Vec<f64>>, outputs: Vec<Vec<f64>>) -> TrainingSet {
        TrainingSet::new(inputs, outputs, "t").unwrap()
    }

    fn random_set(din: usize, dout: usize, n: usize, seed: u64) -> TrainingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..n).map(|_| (0..din).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y = (0..n).map(|_| (0..dout).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        set(x, y)
    }

    /// Model with random intercepts too, so hidden units are not all alive.
    fn random_model(sizes: &[usize], seed: u64) -> MlpModel {
        let mut m = MlpModel::new(sizes, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for l in 0..m.n_layers() {
            let w = m.weights(l).clone();
            let b = DVector::from_fn(m.biases(l).len(), |_, _| rng.random_range(-0.5..0.5));
            m.set_layer(l, w, b).unwrap();
        }
        m
    }

    /// Independent scalar re-implementation of the forward pass.
    fn oracle_forward(m: &MlpModel, x: &[f64]) -> Vec<f64> {
        let mut a: Vec<f64> = x.iter().zip(&m.input_shift).zip(&m.input_scale).map(|((v, s), c)| (v - s) / c).collect();
        for l in 0..m.n_layers() {
            let w = m.weights(l);
            let b = m.biases(l);
            let mut z = vec![0.0; w.nrows()];
            for r in 0..w.nrows() {
                z[r] = b[r] + (0..w.ncols()).map(|c| w[(r, c)] * a[c]).sum::<f64>();
            }
            a = if l + 1 < m.n_layers() { z.iter().map(|v| v.max(0.0)).collect() } else { z };
        }
        a.iter().zip(&m.output_shift).zip(&m.output_scale).map(|((z, s), c)| z * c + s).collect()
    }

    fn oracle_loss(m: &MlpModel, s: &TrainingSet, l2: f64) -> f64 {
        let mut total = 0.0;
        for (x, y) in s.inputs.iter().zip(&s.outputs) {
            let p = oracle_forward(m, x);
            total += p.iter().zip(y).zip(&m.output_scale).map(|((a, b), c)| ((a - b) / c).powi(2)).sum::<f64>();
        }
        let pen: f64 = (0..m.n_layers()).map(|l| m.weights(l).iter().map(|w| w * w).sum::<f64>()).sum();
        total / s.len() as f64 + l2 * pen
    }

    fn perturbed(m: &MlpModel, layer: usize, idx: usize, is_bias: bool, h: f64) -> MlpModel {
        let mut out = m.clone();
        let mut w = m.weights(layer).clone();
        let mut b = m.biases(layer).clone();
        if is_bias {
            b[idx] += h;
        } else {
            w[idx] += h;
        }
        out.set_layer(layer, w, b).unwrap();
        out
    }

    #[test]
    fn zero_model_outputs_zero() {
        let m = MlpModel::zeros(&[3, 5, 2]).unwrap();
        assert_eq!(m.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer() {
        let mut m = MlpModel::zeros(&[3, 3]).unwrap();
        m.set_layer(0, DMatrix::identity(3, 3), DVector::zeros(3)).unwrap();
        assert_eq!(m.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
        assert_eq!(m.grad_input(&[0.3, 0.1, 0.2]).unwrap(), DMatrix::identity(3, 3));
    }

    #[test]
    fn relu_unit() {
        let mut m = MlpModel::zeros(&[1, 1, 1]).unwrap();
        m.set_layer(0, DMatrix::from_element(1, 1, 1.0), DVector::zeros(1)).unwrap();
        m.set_layer(1, DMatrix::from_element(1, 1, 1.0), DVector::zeros(1)).unwrap();
        assert_eq!(m.forward(&[-1.0]).unwrap(), vec![0.0]);
        assert_eq!(m.forward(&[2.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let m = random_model(&[4, 8, 8, 12], 3);
        let x = [0.3, -0.2, 0.9, 0.1];
        for (a, b) in m.forward(&x).unwrap().iter().zip(oracle_forward(&m, &x)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_special_cases_and_oracle() {
        let s = random_set(3, 2, 10, 1);
        let zero = MlpModel::zeros(&[3, 4, 2]).unwrap();
        let mean_sq: f64 = s.outputs.iter().map(|y| y.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / 10.0;
        assert!((zero.loss(&s, 0.0).unwrap() - mean_sq).abs() < 1e-12);

        let mut lin = MlpModel::zeros(&[2, 2]).unwrap();
        lin.set_layer(0, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, 0.5]), DVector::from_vec(vec![0.1, 0.0])).unwrap();
        let x: Vec<Vec<f64>> = vec![vec![0.0, 1.0], vec![1.0, 1.0], vec![2.0, -1.0]];
        let y: Vec<Vec<f64>> = x.iter().map(|v| lin.forward(v).unwrap()).collect();
        assert_eq!(lin.loss(&set(x, y), 0.0).unwrap(), 0.0);

        for seed in 0..5 {
            let m = random_model(&[3, 6, 5, 2], seed);
            assert!((m.loss(&s, 0.01).unwrap() - oracle_loss(&m, &s, 0.01)).abs() < 1e-10);
        }
    }

    #[test]
    fn gradient_vanishes_at_perfect_linear_fit() {
        let mut lin = MlpModel::zeros(&[2, 3]).unwrap();
        lin.set_layer(0, DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 0.3, 0.3]), DVector::from_vec(vec![0.1, 0.0, -0.2])).unwrap();
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 0.3, 1.0 - i as f64 * 0.1]).collect();
        let y: Vec<Vec<f64>> = x.iter().map(|v| lin.forward(v).unwrap()).collect();
        assert!(lin.grad_params(&set(x, y), 0.0).unwrap().norm() < 1e-8);
    }

    #[test]
    fn duplicated_batch_gives_same_gradient() {
        let s = random_set(3, 2, 6, 2);
        let mut x2 = s.inputs.clone();
        x2.extend(s.inputs.clone());
        let mut y2 = s.outputs.clone();
        y2.extend(s.outputs.clone());
        let m = random_model(&[3, 5, 2], 4);
        let a = m.grad_params(&s, 0.1).unwrap();
        let b = m.grad_params(&set(x2, y2), 0.1).unwrap();
        for (ga, gb) in a.weights.iter().zip(&b.weights) {
            assert!((ga - gb).amax() < 1e-12);
        }
    }

    #[test]
    fn dead_first_layer_gives_zero_jacobian() {
        let mut m = random_model(&[3, 4, 2], 1);
        m.set_layer(0, m.weights(0).clone(), DVector::from_element(4, -100.0)).unwrap();
        assert_eq!(m.grad_input(&[0.1, 0.2, 0.3]).unwrap(), DMatrix::zeros(2, 3));
    }

    fn check_param_grad(m: &MlpModel, s: &TrainingSet, l2: f64) -> bool {
        let g = m.grad_params(s, l2).unwrap();
        let h = 1e-5;
        for l in 0..m.n_layers() {
            for (is_bias, count) in [(false, m.weights(l).len()), (true, m.biases(l).len())] {
                for idx in 0..count {
                    let up = perturbed(m, l, idx, is_bias, h).loss(s, l2).unwrap();
                    let dn = perturbed(m, l, idx, is_bias, -h).loss(s, l2).unwrap();
                    let fd = (up - dn) / (2.0 * h);
                    let an = if is_bias { g.biases[l][idx] } else { g.weights[l][idx] };
                    if (fd - an).abs() > 1e-4 * fd.abs().max(an.abs()).max(1e-3) {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn check_input_grad(m: &MlpModel, x: &[f64]) -> bool {
        let j = m.grad_input(x).unwrap();
        let h = 1e-5;
        for c in 0..x.len() {
            let mut up = x.to_vec();
            let mut dn = x.to_vec();
            up[c] += h;
            dn[c] -= h;
            let fu = m.forward(&up).unwrap();
            let fd = m.forward(&dn).unwrap();
            for r in 0..fu.len() {
                let num = (fu[r] - fd[r]) / (2.0 * h);
                if (num - j[(r, c)]).abs() > 1e-4 * num.abs().max(j[(r, c)].abs()).max(1e-3) {
                    return false;
                }
            }
        }
        true
    }

    #[test]
    fn vjp_equals_jacobian_transpose_product() {
        let m = random_model(&[4, 8, 8, 12], 5);
        let x = [0.2, 0.4, -0.3, 0.8];
        let v: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let j = m.grad_input(&x).unwrap();
        let expect = j.tr_mul(&DVector::from_vec(v.clone()));
        for (a, b) in m.vjp(&x, &v).unwrap().iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scaling_is_respected_by_jacobian_and_vjp() {
        let s = random_set(3, 4, 20, 8);
        let m = MlpModel::for_data(&[3, 6, 4], &s, 2).unwrap();
        assert!(check_input_grad(&m, &[0.1, -0.5, 0.7]));
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let s = random_set(2, 2, 8, 1);
        let m = MlpModel::new(&[2, 4, 2], 1).unwrap();
        let cfg = TrainConfig { max_epochs: 0, ..Default::default() };
        let (out, hist) = m.train(&s, &s, &cfg).unwrap();
        assert_eq!(out.forward(&[0.1, 0.2]).unwrap(), m.forward(&[0.1, 0.2]).unwrap());
        assert!(hist.epochs.is_empty());
    }

    #[test]
    fn learns_linear_map_to_noise_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = 0.01;
        let mut make = |n: usize| {
            let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
            let y: Vec<Vec<f64>> = x
                .iter()
                .map(|v| {
                    let e: f64 = rng.random_range(-noise..noise);
                    vec![0.5 * v[0] - v[1] + 0.2 + e]
                })
                .collect();
            set(x, y)
        };
        let train = make(200);
        let val = make(50);
        let m = MlpModel::new(&[2, 1], 3).unwrap();
        let cfg = TrainConfig { l2_penalty: 0.0, learning_rate: 0.01, max_epochs: 500, ..Default::default() };
        let (fit, hist) = m.train(&train, &val, &cfg).unwrap();
        let (mae, _) = fit.errors(&val).unwrap();
        // uniform(-a, a) noise has mean absolute value a/2
        assert!(mae < 0.5 * noise * 1.3, "val MAE {mae}");
        let best = hist.epochs.iter().find(|e| Some(e.epoch) == hist.best_epoch).unwrap();
        assert!((best.val_mae - mae).abs() < 1e-12);
        assert!(hist.epochs.iter().all(|e| e.val_mse >= best.val_mse));
    }

    #[test]
    fn full_batch_small_step_decreases_loss() {
        let s = random_set(3, 2, 30, 4);
        let m = random_model(&[3, 8, 2], 6);
        let cfg = TrainConfig {
            optimizer: Optimizer::Sgd,
            batch_size: 0,
            learning_rate: 1e-3,
            max_epochs: 100,
            early_stop_patience: 1000,
            l2_penalty: 0.0,
            ..Default::default()
        };
        let (_, hist) = m.train(&s, &s, &cfg).unwrap();
        assert!(hist.epochs.windows(2).all(|w| w[1].train_mse <= w[0].train_mse + 1e-15));
    }

    #[test]
    fn training_is_deterministic() {
        let s = random_set(2, 3, 40, 9);
        let m = MlpModel::new(&[2, 8, 3], 1).unwrap();
        let cfg = TrainConfig { max_epochs: 20, ..Default::default() };
        let (a, ha) = m.train(&s, &s, &cfg).unwrap();
        let (b, hb) = m.train(&s, &s, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let s = random_set(2, 1, 20, 1);
        let m = random_model(&[2, 8, 1], 2);
        let cfg = TrainConfig { optimizer: Optimizer::Sgd, learning_rate: 1e6, max_epochs: 50, ..Default::default() };
        assert!(matches!(m.train(&s, &s, &cfg), Err(Error::TrainingDiverged { .. })));
    }

    #[test]
    fn json_round_trip() {
        let s = random_set(3, 2, 10, 2);
        let m = MlpModel::for_data(&[3, 4, 2], &s, 5).unwrap();
        let back: MlpModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(m, back);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn gradients_match_finite_differences(
            seed in any::<u64>(),
            sizes in prop::sample::select(vec![vec![2usize, 3], vec![3, 4, 2], vec![4, 8, 8, 12], vec![2, 5, 3, 4]]),
        ) {
            let m = random_model(&sizes, seed);
            let s = random_set(sizes[0], *sizes.last().unwrap(), 5, seed.wrapping_add(1));
            prop_assert!(check_param_grad(&m, &s, 0.01));
            prop_assert!(check_input_grad(&m, &s.inputs[0]));
        }
    }
}
