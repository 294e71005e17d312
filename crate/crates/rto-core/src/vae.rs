//! Variational autoencoder over flattened density fields.
//!
//! Encoder: dense ReLU stack ending in one linear layer of width 2|z| whose
//! halves are the posterior mean and log-variance. Decoder: mirrored ReLU
//! stack with a linear output producing per-pixel logits, smoothed by a
//! stride-1 average pool with replicate padding, then a sigmoid so every
//! decoded pixel lands in (0, 1).
//!
//! The reconstruction term is binary cross-entropy evaluated from the pooled
//! logits in the numerically stable form, and the KL term is the closed-form
//! diagonal-Gaussian expression. Loss and gradients take the reparametrization
//! noise as an explicit argument, which keeps the objective a deterministic
//! function of the parameters (finite differences in the tests rely on that).

use crate::nn::{
    self, avg_pool_same, avg_pool_same_backward, backward, forward, sc, Activation, AdamState,
    ForwardCache, MlpGrads, MlpParams, Scalar,
};
use crate::{Result, RtoError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Reference layer widths for a 100 x 100 field, scaled to other resolutions
/// by the ratio of input sizes and floored at 8.
const BASE_WIDTHS: [usize; 7] = [5000, 2500, 1000, 500, 100, 50, 10];
const BASE_INPUT: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VaeArchitecture {
    pub height: usize,
    pub width: usize,
    pub latent_dim: usize,
    /// Encoder hidden widths, widest first. The decoder mirrors them.
    pub hidden: Vec<usize>,
    /// Odd window of the smoothing pool on the decoder output.
    pub pool_window: usize,
}

impl VaeArchitecture {
    /// Scales the reference widths to the given field resolution.
    pub fn scaled(height: usize, width: usize, latent_dim: usize, pool_window: usize) -> Self {
        let input = height * width;
        let hidden = BASE_WIDTHS
            .iter()
            .map(|&w| ((w * input) as f64 / BASE_INPUT as f64).round().max(8.0) as usize)
            .collect();
        VaeArchitecture { height, width, latent_dim, hidden, pool_window }
    }

    pub fn input_dim(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(RtoError::Parameter("empty field shape".into()));
        }
        if self.latent_dim == 0 {
            return Err(RtoError::Parameter("latent dimension must be positive".into()));
        }
        if self.hidden.is_empty() {
            return Err(RtoError::Parameter("at least one hidden layer required".into()));
        }
        if self.pool_window % 2 == 0 {
            return Err(RtoError::Parameter(format!(
                "pool window {} must be odd",
                self.pool_window
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel<F: Scalar> {
    pub arch: VaeArchitecture,
    pub encoder: MlpParams<F>,
    pub decoder: MlpParams<F>,
}

impl<F: Scalar> VaeModel<F> {
    /// Seeded fresh model for the given architecture.
    pub fn init(arch: VaeArchitecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut enc_dims = vec![arch.input_dim()];
        enc_dims.extend_from_slice(&arch.hidden);
        enc_dims.push(2 * arch.latent_dim);
        let mut enc_acts = vec![Activation::Relu; arch.hidden.len()];
        enc_acts.push(Activation::Linear);
        let encoder = nn::init_params(&enc_dims, &enc_acts, seed)?;

        let mut dec_dims = vec![arch.latent_dim];
        dec_dims.extend(arch.hidden.iter().rev());
        dec_dims.push(arch.input_dim());
        let mut dec_acts = vec![Activation::Relu; arch.hidden.len()];
        dec_acts.push(Activation::Linear);
        let decoder = nn::init_params(&dec_dims, &dec_acts, seed.wrapping_add(1))?;
        Ok(VaeModel { arch, encoder, decoder })
    }

    pub fn cast<G: Scalar>(&self) -> VaeModel<G> {
        VaeModel {
            arch: self.arch.clone(),
            encoder: self.encoder.cast(),
            decoder: self.decoder.cast(),
        }
    }

    /// Posterior parameters for a batch of flattened fields: (mu, log_var),
    /// each batch x latent_dim.
    pub fn encode(&self, x: &[F], batch: usize) -> Result<(Vec<F>, Vec<F>)> {
        let cache = forward(&self.encoder, x, batch)?;
        Ok(split_posterior(cache.output(), batch, self.arch.latent_dim))
    }

    /// Decoded densities for a batch of latent points, each pixel in (0, 1).
    pub fn decode(&self, z: &[F], batch: usize) -> Result<Vec<F>> {
        Ok(self.decode_with_cache(z, batch)?.theta)
    }

    /// Decode keeping intermediates so a loss gradient on the output field
    /// can be pulled back to the latent point.
    pub fn decode_with_cache(&self, z: &[F], batch: usize) -> Result<DecodeCache<F>> {
        let mlp = forward(&self.decoder, z, batch)?;
        let (h, w) = (self.arch.height, self.arch.width);
        let mut logits = Vec::with_capacity(batch * h * w);
        for r in 0..batch {
            let raw = &mlp.output()[r * h * w..(r + 1) * h * w];
            logits.extend(avg_pool_same(raw, h, w, self.arch.pool_window)?);
        }
        let theta: Vec<F> = logits.iter().map(|&t| nn::sigmoid(t)).collect();
        Ok(DecodeCache { mlp, logits, theta })
    }

    /// dL/dz from dL/d(theta), using the cached decode.
    pub fn decode_backward(&self, cache: &DecodeCache<F>, grad_theta: &[F]) -> Result<Vec<F>> {
        let batch = cache.mlp.batch;
        let (h, w) = (self.arch.height, self.arch.width);
        if grad_theta.len() != batch * h * w {
            return Err(RtoError::Shape("decode gradient length mismatch".into()));
        }
        // through the sigmoid, then the pooling transpose, per sample
        let mut grad_raw = Vec::with_capacity(batch * h * w);
        for r in 0..batch {
            let gl: Vec<F> = (0..h * w)
                .map(|i| {
                    let t = cache.theta[r * h * w + i];
                    grad_theta[r * h * w + i] * t * (F::one() - t)
                })
                .collect();
            grad_raw.extend(avg_pool_same_backward(&gl, h, w, self.arch.pool_window)?);
        }
        let (_, gz) = backward(&self.decoder, &cache.mlp, &grad_raw)?;
        Ok(gz)
    }

    /// Decodes `n` draws from the latent prior N(0, I).
    pub fn generate(&self, n: usize, seed: u64) -> Result<Vec<Vec<F>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let z: Vec<F> = (0..self.arch.latent_dim)
                .map(|_| sc(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)))
                .collect();
            out.push(self.decode(&z, 1)?);
        }
        Ok(out)
    }
}

pub struct DecodeCache<F: Scalar> {
    mlp: ForwardCache<F>,
    /// Pooled logits, batch x (h*w).
    pub logits: Vec<F>,
    pub theta: Vec<F>,
}

fn split_posterior<F: Scalar>(enc_out: &[F], batch: usize, latent: usize) -> (Vec<F>, Vec<F>) {
    let mut mu = Vec::with_capacity(batch * latent);
    let mut log_var = Vec::with_capacity(batch * latent);
    for r in 0..batch {
        let row = &enc_out[r * 2 * latent..(r + 1) * 2 * latent];
        mu.extend_from_slice(&row[..latent]);
        log_var.extend_from_slice(&row[latent..]);
    }
    (mu, log_var)
}

/// z = mu + eps * exp(log_var / 2), elementwise.
pub fn reparametrize<F: Scalar>(mu: &[F], log_var: &[F], eps: &[F]) -> Vec<F> {
    let half = sc::<F>(0.5);
    mu.iter()
        .zip(log_var)
        .zip(eps)
        .map(|((&m, &lv), &e)| m + e * (half * lv).exp())
        .collect()
}

/// Stable per-pixel binary cross-entropy from a logit `t` and target `x`:
/// max(t, 0) - t x + ln(1 + exp(-|t|)).
fn bce_from_logit<F: Scalar>(t: F, x: F) -> F {
    t.max(F::zero()) - t * x + (-(t.abs())).exp().ln_1p()
}

/// Value and full parameter gradients of the VAE objective on one batch with
/// fixed reparametrization noise. The loss is the batch mean of
/// (pixel-summed BCE + KL to the standard normal prior).
pub fn vae_loss_and_grads<F: Scalar>(
    model: &VaeModel<F>,
    x: &[F],
    batch: usize,
    eps: &[F],
) -> Result<(f64, MlpGrads<F>, MlpGrads<F>)> {
    let latent = model.arch.latent_dim;
    let pixels = model.arch.input_dim();
    if x.len() != batch * pixels || eps.len() != batch * latent {
        return Err(RtoError::Shape("vae batch shape mismatch".into()));
    }
    let enc_cache = forward(&model.encoder, x, batch)?;
    let (mu, log_var) = split_posterior(enc_cache.output(), batch, latent);
    let z = reparametrize(&mu, &log_var, eps);
    let dec = model.decode_with_cache(&z, batch)?;

    let inv_batch = 1.0 / batch as f64;
    let mut recon = 0.0f64;
    for (&t, &xv) in dec.logits.iter().zip(x) {
        recon += bce_from_logit(t, xv).to_f64().unwrap();
    }
    let mut kl = 0.0f64;
    for (&m, &lv) in mu.iter().zip(&log_var) {
        let (m, lv) = (m.to_f64().unwrap(), lv.to_f64().unwrap());
        kl += -0.5 * (1.0 + lv - m * m - lv.exp());
    }
    let loss = (recon + kl) * inv_batch;

    // d(recon)/d(pooled logit) = sigmoid(t) - x, scaled by the batch mean
    let scale = sc::<F>(inv_batch);
    let grad_theta_logits: Vec<F> = dec
        .logits
        .iter()
        .zip(x)
        .map(|(&t, &xv)| (nn::sigmoid(t) - xv) * scale)
        .collect();
    let mut grad_raw = Vec::with_capacity(batch * pixels);
    let (h, w) = (model.arch.height, model.arch.width);
    for r in 0..batch {
        grad_raw.extend(avg_pool_same_backward(
            &grad_theta_logits[r * pixels..(r + 1) * pixels],
            h,
            w,
            model.arch.pool_window,
        )?);
    }
    let (dec_grads, gz) = backward(&model.decoder, &dec.mlp, &grad_raw)?;

    // chain z = mu + eps exp(lv/2) plus the closed-form KL gradients
    let half = sc::<F>(0.5);
    let mut grad_enc_out = vec![F::zero(); batch * 2 * latent];
    for r in 0..batch {
        for j in 0..latent {
            let i = r * latent + j;
            let dmu = gz[i] + scale * mu[i];
            let dlv = gz[i] * eps[i] * half * (half * log_var[i]).exp()
                + scale * half * (log_var[i].exp() - F::one());
            grad_enc_out[r * 2 * latent + j] = dmu;
            grad_enc_out[r * 2 * latent + latent + j] = dlv;
        }
    }
    let (enc_grads, _) = backward(&model.encoder, &enc_cache, &grad_enc_out)?;
    Ok((loss, enc_grads, dec_grads))
}

/// The objective alone, with noise fixed to zero (z = mu). Used for held-out
/// evaluation so the reported numbers are deterministic.
pub fn vae_eval_loss<F: Scalar>(model: &VaeModel<F>, x: &[F], batch: usize) -> Result<f64> {
    let latent = model.arch.latent_dim;
    let enc_cache = forward(&model.encoder, x, batch)?;
    let (mu, log_var) = split_posterior(enc_cache.output(), batch, latent);
    let dec = model.decode_with_cache(&mu, batch)?;
    let mut recon = 0.0f64;
    for (&t, &xv) in dec.logits.iter().zip(x) {
        recon += bce_from_logit(t, xv).to_f64().unwrap();
    }
    let mut kl = 0.0f64;
    for (&m, &lv) in mu.iter().zip(&log_var) {
        let (m, lv) = (m.to_f64().unwrap(), lv.to_f64().unwrap());
        kl += -0.5 * (1.0 + lv - m * m - lv.exp());
    }
    Ok((recon + kl) / batch as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig { epochs: 100, batch_size: 32, learning_rate: 1e-4, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
}

/// Adam training loop. `train` and `test` hold one flattened field per row.
/// Epoch 0 in the history is the untrained model, so the curve shows the
/// starting point.
pub fn train_vae<F: Scalar>(
    model: &mut VaeModel<F>,
    train: &[Vec<F>],
    test: &[Vec<F>],
    config: &VaeTrainConfig,
) -> Result<Vec<EpochStats>> {
    if train.is_empty() {
        return Err(RtoError::Parameter("empty training set".into()));
    }
    let pixels = model.arch.input_dim();
    for row in train.iter().chain(test) {
        if row.len() != pixels {
            return Err(RtoError::Shape("training row length mismatch".into()));
        }
    }
    let latent = model.arch.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut enc_opt = AdamState::new(&model.encoder, config.learning_rate);
    let mut dec_opt = AdamState::new(&model.decoder, config.learning_rate);
    let eval = |m: &VaeModel<F>, rows: &[Vec<F>]| -> Result<f64> {
        if rows.is_empty() {
            return Ok(f64::NAN);
        }
        let mut total = 0.0;
        for chunk in rows.chunks(64) {
            let flat: Vec<F> = chunk.iter().flatten().copied().collect();
            total += vae_eval_loss(m, &flat, chunk.len())? * chunk.len() as f64;
        }
        Ok(total / rows.len() as f64)
    };
    let mut history = vec![EpochStats {
        epoch: 0,
        train_loss: eval(model, train)?,
        test_loss: eval(model, test)?,
    }];
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for ids in order.chunks(config.batch_size.max(1)) {
            let flat: Vec<F> = ids.iter().flat_map(|&i| train[i].iter().copied()).collect();
            let eps: Vec<F> = (0..ids.len() * latent)
                .map(|_| {
                    sc(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                })
                .collect();
            let (loss, eg, dg) = vae_loss_and_grads(model, &flat, ids.len(), &eps)?;
            if !loss.is_finite() {
                return Err(RtoError::TrainingDiverged(format!(
                    "non-finite loss at epoch {epoch}"
                )));
            }
            nn::adam_step(&mut enc_opt, &mut model.encoder, &eg)?;
            nn::adam_step(&mut dec_opt, &mut model.decoder, &dg)?;
        }
        history.push(EpochStats {
            epoch,
            train_loss: eval(model, train)?,
            test_loss: eval(model, test)?,
        });
    }
    Ok(history)
}
