//! Neural surrogate mapping a flattened density field to its robust
//! compliance. Dense ReLU stack with one linear output; labels are z-scored
//! during training and predictions are mapped back to the original units.

use crate::nn::{
    self, backward, forward, sc, Activation, AdamState, MlpParams, Scalar,
};
use crate::vae::VaeArchitecture;
use crate::{Result, RtoError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel<F: Scalar> {
    pub net: MlpParams<F>,
    /// Label normalization fitted on the training split.
    pub label_mean: f64,
    pub label_std: f64,
}

impl<F: Scalar> SurrogateModel<F> {
    /// Fresh model with the same width scaling rule as the autoencoder,
    /// ending in a single linear unit.
    pub fn init(height: usize, width: usize, seed: u64) -> Result<Self> {
        let arch = VaeArchitecture::scaled(height, width, 1, 3);
        Self::init_with_hidden(height * width, &arch.hidden, seed)
    }

    pub fn init_with_hidden(input_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden.is_empty() {
            return Err(RtoError::Parameter("surrogate needs input and hidden widths".into()));
        }
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let mut acts = vec![Activation::Relu; hidden.len()];
        acts.push(Activation::Linear);
        let net = nn::init_params(&dims, &acts, seed)?;
        Ok(SurrogateModel { net, label_mean: 0.0, label_std: 1.0 })
    }

    pub fn cast<G: Scalar>(&self) -> SurrogateModel<G> {
        SurrogateModel {
            net: self.net.cast(),
            label_mean: self.label_mean,
            label_std: self.label_std,
        }
    }

    /// Predictions in original label units for a batch of flattened fields.
    pub fn predict(&self, x: &[F], batch: usize) -> Result<Vec<f64>> {
        let cache = forward(&self.net, x, batch)?;
        Ok(cache
            .output()
            .iter()
            .map(|&v| v.to_f64().unwrap() * self.label_std + self.label_mean)
            .collect())
    }

    /// Gradient of the (original-units) prediction with respect to each input
    /// pixel, for a single field.
    pub fn input_gradient(&self, x: &[F]) -> Result<Vec<F>> {
        let cache = forward(&self.net, x, 1)?;
        let (_, gx) = backward(&self.net, &cache, &[F::one()])?;
        let s = sc::<F>(self.label_std);
        Ok(gx.into_iter().map(|g| g * s).collect())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SurrogateTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SurrogateTrainConfig {
    fn default() -> Self {
        SurrogateTrainConfig { epochs: 200, batch_size: 32, learning_rate: 1e-4, seed: 0 }
    }
}

/// Held-out regression quality in original label units.
#[derive(Debug, Clone, Copy)]
pub struct RegressionReport {
    pub mse: f64,
    pub r_squared: f64,
    pub pearson: f64,
}

/// Pearson correlation coefficient of two equal-length samples.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Evaluates the model on a labelled set in original units.
pub fn evaluate<F: Scalar>(
    model: &SurrogateModel<F>,
    rows: &[Vec<F>],
    labels: &[f64],
) -> Result<RegressionReport> {
    if rows.len() != labels.len() || rows.is_empty() {
        return Err(RtoError::Shape("evaluation rows and labels mismatch".into()));
    }
    let mut preds = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(64) {
        let flat: Vec<F> = chunk.iter().flatten().copied().collect();
        preds.extend(model.predict(&flat, chunk.len())?);
    }
    let n = labels.len() as f64;
    let mse = preds.iter().zip(labels).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / n;
    let mean_y = labels.iter().sum::<f64>() / n;
    let ss_tot: f64 = labels.iter().map(|y| (y - mean_y) * (y - mean_y)).sum();
    let r_squared = if ss_tot == 0.0 { 0.0 } else { 1.0 - mse * n / ss_tot };
    Ok(RegressionReport { mse, r_squared, pearson: pearson(&preds, labels) })
}

/// Adam training on the mean squared error of z-scored labels. Returns the
/// per-epoch held-out MSE (original units), starting with the untrained model.
pub fn train_surrogate<F: Scalar>(
    model: &mut SurrogateModel<F>,
    train: &[Vec<F>],
    train_labels: &[f64],
    test: &[Vec<F>],
    test_labels: &[f64],
    config: &SurrogateTrainConfig,
) -> Result<Vec<f64>> {
    if train.len() != train_labels.len() || train.is_empty() {
        return Err(RtoError::Shape("training rows and labels mismatch".into()));
    }
    let input = model.net.input_dim();
    for row in train.iter().chain(test) {
        if row.len() != input {
            return Err(RtoError::Shape("row length != surrogate input width".into()));
        }
    }
    let n = train_labels.len() as f64;
    model.label_mean = train_labels.iter().sum::<f64>() / n;
    let var = train_labels.iter().map(|y| (y - model.label_mean).powi(2)).sum::<f64>() / n;
    model.label_std = var.sqrt().max(1e-12);
    let targets: Vec<f64> =
        train_labels.iter().map(|y| (y - model.label_mean) / model.label_std).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamState::new(&model.net, config.learning_rate);
    let held_out = |m: &SurrogateModel<F>| -> Result<f64> {
        if test.is_empty() {
            return Ok(f64::NAN);
        }
        Ok(evaluate(m, test, test_labels)?.mse)
    };
    let mut history = vec![held_out(model)?];
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for ids in order.chunks(config.batch_size.max(1)) {
            let flat: Vec<F> = ids.iter().flat_map(|&i| train[i].iter().copied()).collect();
            let cache = forward(&model.net, &flat, ids.len())?;
            let inv = sc::<F>(2.0 / ids.len() as f64);
            let mut loss = 0.0f64;
            let grad_out: Vec<F> = cache
                .output()
                .iter()
                .zip(ids)
                .map(|(&p, &i)| {
                    let r = p - sc::<F>(targets[i]);
                    loss += r.to_f64().unwrap().powi(2);
                    r * inv
                })
                .collect();
            if !loss.is_finite() {
                return Err(RtoError::TrainingDiverged(format!(
                    "non-finite loss at epoch {epoch}"
                )));
            }
            let (grads, _) = backward(&model.net, &cache, &grad_out)?;
            nn::adam_step(&mut opt, &mut model.net, &grads)?;
        }
        history.push(held_out(model)?);
    }
    Ok(history)
}
