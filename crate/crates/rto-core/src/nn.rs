//! Minimal neural stack: dense layers, ReLU/sigmoid, stride-1 average
//! pooling, reverse-mode gradients, Adam, and the RTOM checkpoint format.
//!
//! Everything is generic over [`Scalar`]: training runs in f32 for speed,
//! gradient checks run in f64. Matrix products parallelize over output rows
//! with a fixed per-row reduction order, so results do not depend on thread
//! count.

use crate::parallel::par_map_indexed;
use crate::{Result, RtoError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

/// Floating point type for network storage and arithmetic.
pub trait Scalar:
    num_traits::Float + num_traits::NumCast + std::fmt::Debug + Send + Sync + 'static
{
}
impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for lossy conversion of an f64 constant into the scalar type.
pub fn sc<F: Scalar>(x: f64) -> F {
    F::from(x).unwrap()
}

/// Dense tensor in flat row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(RtoError::Shape(format!(
                "tensor data length {} != shape product {n}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply<F: Scalar>(&self, x: F) -> F {
        match self {
            Activation::Linear => x,
            Activation::Relu => x.max(F::zero()),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the pre-activation value.
    fn deriv<F: Scalar>(&self, pre: F) -> F {
        match self {
            Activation::Linear => F::one(),
            Activation::Relu => {
                if pre > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(pre);
                s * (F::one() - s)
            }
        }
    }

    pub fn tag(&self) -> u8 {
        match self {
            Activation::Linear => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Linear),
            1 => Ok(Activation::Relu),
            2 => Ok(Activation::Sigmoid),
            t => Err(RtoError::Format(format!("unknown activation tag {t}"))),
        }
    }
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// One fully connected layer: y = act(x W + b).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<F: Scalar> {
    pub in_dim: usize,
    pub out_dim: usize,
    /// in_dim × out_dim, row-major.
    pub weights: Vec<F>,
    pub bias: Vec<F>,
    pub activation: Activation,
}

/// A stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<F: Scalar> {
    pub layers: Vec<DenseLayer<F>>,
}

impl<F: Scalar> MlpParams<F> {
    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Converts parameter storage to another scalar type (through f64).
    pub fn cast<G: Scalar>(&self) -> MlpParams<G> {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    in_dim: l.in_dim,
                    out_dim: l.out_dim,
                    weights: l.weights.iter().map(|&w| sc(w.to_f64().unwrap())).collect(),
                    bias: l.bias.iter().map(|&b| sc(b.to_f64().unwrap())).collect(),
                    activation: l.activation,
                })
                .collect(),
        }
    }
}

/// Cached intermediates of one forward pass, consumed by [`backward`].
pub struct ForwardCache<F: Scalar> {
    pub batch: usize,
    input: Vec<F>,
    /// Pre-activation values per layer.
    preacts: Vec<Vec<F>>,
    /// Post-activation values per layer.
    acts: Vec<Vec<F>>,
}

impl<F: Scalar> ForwardCache<F> {
    pub fn output(&self) -> &[F] {
        self.acts.last().unwrap()
    }
}

/// Runs `x` (a batch of `batch` rows) through the stack, caching
/// intermediates for the backward pass.
pub fn forward<F: Scalar>(params: &MlpParams<F>, x: &[F], batch: usize) -> Result<ForwardCache<F>> {
    if x.len() != batch * params.input_dim() {
        return Err(RtoError::Shape(format!(
            "input length {} != batch {batch} x width {}",
            x.len(),
            params.input_dim()
        )));
    }
    let mut preacts = Vec::with_capacity(params.layers.len());
    let mut acts = Vec::with_capacity(params.layers.len());
    let mut current = x.to_vec();
    for layer in &params.layers {
        let mut pre = matmul(&current, &layer.weights, batch, layer.in_dim, layer.out_dim);
        for r in 0..batch {
            for c in 0..layer.out_dim {
                pre[r * layer.out_dim + c] = pre[r * layer.out_dim + c] + layer.bias[c];
            }
        }
        let act: Vec<F> = pre.iter().map(|&v| layer.activation.apply(v)).collect();
        current = act.clone();
        preacts.push(pre);
        acts.push(act);
    }
    Ok(ForwardCache { batch, input: x.to_vec(), preacts, acts })
}

/// Parameter gradients mirroring [`MlpParams`].
#[derive(Debug, Clone)]
pub struct MlpGrads<F: Scalar> {
    pub weights: Vec<Vec<F>>,
    pub bias: Vec<Vec<F>>,
}

/// Reverse-mode pass: given dL/d(output), returns parameter gradients and
/// dL/d(input). The input gradient is what lets the latent search
/// differentiate through frozen networks.
pub fn backward<F: Scalar>(
    params: &MlpParams<F>,
    cache: &ForwardCache<F>,
    grad_out: &[F],
) -> Result<(MlpGrads<F>, Vec<F>)> {
    let batch = cache.batch;
    if grad_out.len() != batch * params.output_dim() {
        return Err(RtoError::Shape("output gradient length mismatch".into()));
    }
    let nl = params.layers.len();
    let mut dw = vec![Vec::new(); nl];
    let mut db = vec![Vec::new(); nl];
    let mut grad = grad_out.to_vec();
    for (l, layer) in params.layers.iter().enumerate().rev() {
        let pre = &cache.preacts[l];
        // dL/d(pre) = dL/d(act) ⊙ act'(pre)
        let dz: Vec<F> =
            grad.iter().zip(pre).map(|(&g, &p)| g * layer.activation.deriv(p)).collect();
        let prev: &[F] = if l == 0 { &cache.input } else { &cache.acts[l - 1] };
        dw[l] = matmul_at(prev, &dz, batch, layer.in_dim, layer.out_dim);
        let mut bias_grad = vec![F::zero(); layer.out_dim];
        for r in 0..batch {
            for c in 0..layer.out_dim {
                bias_grad[c] = bias_grad[c] + dz[r * layer.out_dim + c];
            }
        }
        db[l] = bias_grad;
        grad = matmul_bt(&dz, &layer.weights, batch, layer.out_dim, layer.in_dim);
    }
    Ok((MlpGrads { weights: dw, bias: db }, grad))
}

/// a [m×k] · b [k×n] → [m×n], parallel over output rows.
pub fn matmul<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let rows = par_map_indexed(m, |i| {
        let mut row = vec![F::zero(); n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av != F::zero() {
                let brow = &b[kk * n..(kk + 1) * n];
                for (r, &bv) in row.iter_mut().zip(brow) {
                    *r = *r + av * bv;
                }
            }
        }
        row
    });
    rows.into_iter().flatten().collect()
}

/// aᵀ [k×m] · b [m×n] → [k×n] where a is stored [m×k].
fn matmul_at<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let rows = par_map_indexed(k, |i| {
        let mut row = vec![F::zero(); n];
        for r in 0..m {
            let av = a[r * k + i];
            if av != F::zero() {
                let brow = &b[r * n..(r + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
        row
    });
    rows.into_iter().flatten().collect()
}

/// a [m×n] · bᵀ [n×k] → [m×k] where b is stored [k×n].
fn matmul_bt<F: Scalar>(a: &[F], b: &[F], m: usize, n: usize, k: usize) -> Vec<F> {
    let rows = par_map_indexed(m, |i| {
        let arow = &a[i * n..(i + 1) * n];
        let mut row = vec![F::zero(); k];
        for (c, out) in row.iter_mut().enumerate() {
            let brow = &b[c * n..(c + 1) * n];
            let mut acc = F::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            *out = acc;
        }
        row
    });
    rows.into_iter().flatten().collect()
}

/// Stride-1 average pooling with an odd window and edge-replicate padding;
/// output has the same shape as the input.
pub fn avg_pool_same<F: Scalar>(img: &[F], h: usize, w: usize, window: usize) -> Result<Vec<F>> {
    if window % 2 == 0 {
        return Err(RtoError::Parameter(format!("pooling window {window} must be odd")));
    }
    if img.len() != h * w {
        return Err(RtoError::Shape("image length != h*w".into()));
    }
    let half = (window / 2) as isize;
    let inv = sc::<F>(1.0 / (window * window) as f64);
    let mut out = vec![F::zero(); h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let mut acc = F::zero();
            for dr in -half..=half {
                for dc in -half..=half {
                    let rr = (r + dr).clamp(0, h as isize - 1) as usize;
                    let cc = (c + dc).clamp(0, w as isize - 1) as usize;
                    acc = acc + img[rr * w + cc];
                }
            }
            out[(r * w as isize + c) as usize] = acc * inv;
        }
    }
    Ok(out)
}

/// Exact gradient of [`avg_pool_same`]: the transpose of the (linear) pooling
/// operator, including the replicate-padding index clamping.
pub fn avg_pool_same_backward<F: Scalar>(
    grad_out: &[F],
    h: usize,
    w: usize,
    window: usize,
) -> Result<Vec<F>> {
    if window % 2 == 0 {
        return Err(RtoError::Parameter(format!("pooling window {window} must be odd")));
    }
    let half = (window / 2) as isize;
    let inv = sc::<F>(1.0 / (window * window) as f64);
    let mut out = vec![F::zero(); h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let g = grad_out[(r * w as isize + c) as usize] * inv;
            for dr in -half..=half {
                for dc in -half..=half {
                    let rr = (r + dr).clamp(0, h as isize - 1) as usize;
                    let cc = (c + dc).clamp(0, w as isize - 1) as usize;
                    out[rr * w + cc] = out[rr * w + cc] + g;
                }
            }
        }
    }
    Ok(out)
}

/// Adam optimizer state for one [`MlpParams`].
#[derive(Debug, Clone)]
pub struct AdamState<F: Scalar> {
    pub step: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m_w: Vec<Vec<F>>,
    v_w: Vec<Vec<F>>,
    m_b: Vec<Vec<F>>,
    v_b: Vec<Vec<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &MlpParams<F>, lr: f64) -> Self {
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m_w: params.layers.iter().map(|l| vec![F::zero(); l.weights.len()]).collect(),
            v_w: params.layers.iter().map(|l| vec![F::zero(); l.weights.len()]).collect(),
            m_b: params.layers.iter().map(|l| vec![F::zero(); l.bias.len()]).collect(),
            v_b: params.layers.iter().map(|l| vec![F::zero(); l.bias.len()]).collect(),
        }
    }
}

/// Standard Adam update with bias correction.
pub fn adam_step<F: Scalar>(
    state: &mut AdamState<F>,
    params: &mut MlpParams<F>,
    grads: &MlpGrads<F>,
) -> Result<()> {
    if grads.weights.len() != params.layers.len() {
        return Err(RtoError::Shape("gradient layer count mismatch".into()));
    }
    state.step += 1;
    let t = state.step as f64;
    let b1 = sc::<F>(state.beta1);
    let b2 = sc::<F>(state.beta2);
    let one = F::one();
    let lr = sc::<F>(state.lr);
    let eps = sc::<F>(state.eps);
    let corr1 = sc::<F>(1.0 - state.beta1.powf(t));
    let corr2 = sc::<F>(1.0 - state.beta2.powf(t));
    for (l, layer) in params.layers.iter_mut().enumerate() {
        if grads.weights[l].len() != layer.weights.len()
            || grads.bias[l].len() != layer.bias.len()
        {
            return Err(RtoError::Shape(format!("gradient shape mismatch at layer {l}")));
        }
        let update = |p: &mut [F], g: &[F], m: &mut [F], v: &mut [F]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mhat = m[i] / corr1;
                let vhat = v[i] / corr2;
                p[i] = p[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        };
        update(&mut layer.weights, &grads.weights[l], &mut state.m_w[l], &mut state.v_w[l]);
        update(&mut layer.bias, &grads.bias[l], &mut state.m_b[l], &mut state.v_b[l]);
    }
    Ok(())
}

/// Seeded initialization: He-uniform fan-in scaling for ReLU layers,
/// Glorot-uniform for sigmoid/linear; biases zero.
pub fn init_params<F: Scalar>(dims: &[usize], acts: &[Activation], seed: u64) -> Result<MlpParams<F>> {
    if dims.len() < 2 || acts.len() != dims.len() - 1 {
        return Err(RtoError::Parameter(format!(
            "layer dims {} and activations {} do not chain",
            dims.len(),
            acts.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(acts.len());
    for (l, &act) in acts.iter().enumerate() {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        let limit = match act {
            Activation::Relu => (6.0 / fan_in as f64).sqrt(),
            _ => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        };
        let weights: Vec<F> =
            (0..fan_in * fan_out).map(|_| sc(rng.gen_range(-limit..limit))).collect();
        layers.push(DenseLayer {
            in_dim: fan_in,
            out_dim: fan_out,
            weights,
            bias: vec![F::zero(); fan_out],
            activation: act,
        });
    }
    Ok(MlpParams { layers })
}

const MODEL_MAGIC: &[u8; 4] = b"RTOM";
const MODEL_VERSION: u32 = 1;

/// Writes the network in the RTOM layout: magic, version, layer count, then
/// per layer (in, out as u32, activation tag u8, W then b as little-endian f32).
pub fn save_mlp<F: Scalar>(params: &MlpParams<F>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.layers.len() as u32).to_le_bytes());
    for layer in &params.layers {
        buf.extend_from_slice(&(layer.in_dim as u32).to_le_bytes());
        buf.extend_from_slice(&(layer.out_dim as u32).to_le_bytes());
        buf.push(layer.activation.tag());
        for &wv in &layer.weights {
            buf.extend_from_slice(&(wv.to_f64().unwrap() as f32).to_le_bytes());
        }
        for &bv in &layer.bias {
            buf.extend_from_slice(&(bv.to_f64().unwrap() as f32).to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Reads an RTOM checkpoint.
pub fn load_mlp<F: Scalar>(path: &Path) -> Result<MlpParams<F>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(RtoError::Format(format!("{}: truncated", path.display())));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MODEL_MAGIC {
        return Err(RtoError::Format(format!("{}: bad magic", path.display())));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(RtoError::Format(format!("{}: unsupported version {version}", path.display())));
    }
    let layer_count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let in_dim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let out_dim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let act = Activation::from_tag(take(&mut pos, 1)?[0])?;
        let read_f32s = |pos: &mut usize, n: usize| -> Result<Vec<F>> {
            let raw = take(pos, 4 * n)?;
            Ok(raw
                .chunks_exact(4)
                .map(|c| sc(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect())
        };
        let weights = read_f32s(&mut pos, in_dim * out_dim)?;
        let bias = read_f32s(&mut pos, out_dim)?;
        layers.push(DenseLayer { in_dim, out_dim, weights, bias, activation: act });
    }
    Ok(MlpParams { layers })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_net(seed: u64) -> MlpParams<f64> {
        init_params(
            &[5, 7, 6, 3],
            &[Activation::Relu, Activation::Sigmoid, Activation::Linear],
            seed,
        )
        .unwrap()
    }

    #[test]
    fn forward_bias_only() {
        let mut net: MlpParams<f64> = init_params(&[3, 2], &[Activation::Linear], 0).unwrap();
        for w in &mut net.layers[0].weights {
            *w = 0.0;
        }
        net.layers[0].bias = vec![1.5, -2.0];
        let cache = forward(&net, &[0.3, 0.7, -0.2], 1).unwrap();
        assert_eq!(cache.output(), &[1.5, -2.0]);
    }

    #[test]
    fn activation_definitions() {
        assert_eq!(Activation::Relu.apply(-1.0), 0.0);
        assert_eq!(Activation::Relu.apply(2.0), 2.0);
        assert_eq!(sigmoid(0.0f64), 0.5);
    }

    #[test]
    fn single_linear_layer_weight_gradient() {
        // y = x W, dL/dW = x^T dL/dy
        let net: MlpParams<f64> = init_params(&[2, 2], &[Activation::Linear], 3).unwrap();
        let x = [0.4, -1.2];
        let cache = forward(&net, &x, 1).unwrap();
        let gy = [1.0, 0.5];
        let (grads, gx) = backward(&net, &cache, &gy).unwrap();
        let expected = [
            x[0] * gy[0],
            x[0] * gy[1],
            x[1] * gy[0],
            x[1] * gy[1],
        ];
        for (a, b) in grads.weights[0].iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14);
        }
        // dL/dx = dL/dy W^T
        let w = &net.layers[0].weights;
        let ex = [gy[0] * w[0] + gy[1] * w[1], gy[0] * w[2] + gy[1] * w[3]];
        assert!((gx[0] - ex[0]).abs() < 1e-14);
        assert!((gx[1] - ex[1]).abs() < 1e-14);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let net = toy_net(11);
        let batch = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..batch * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // loss = sum of squares of outputs
        let loss = |p: &MlpParams<f64>| -> f64 {
            let c = forward(p, &x, batch).unwrap();
            c.output().iter().map(|v| v * v).sum()
        };
        let cache = forward(&net, &x, batch).unwrap();
        let gy: Vec<f64> = cache.output().iter().map(|v| 2.0 * v).collect();
        let (grads, gx) = backward(&net, &cache, &gy).unwrap();

        let delta = 1e-5;
        for l in 0..net.layers.len() {
            for i in [0usize, 3, net.layers[l].weights.len() - 1] {
                let mut up = net.clone();
                up.layers[l].weights[i] += delta;
                let mut dn = net.clone();
                dn.layers[l].weights[i] -= delta;
                let fd = (loss(&up) - loss(&dn)) / (2.0 * delta);
                let an = grads.weights[l][i];
                assert!(
                    (fd - an).abs() <= 1e-6 * fd.abs().max(1.0),
                    "layer {l} weight {i}: {an} vs {fd}"
                );
            }
            let mut up = net.clone();
            up.layers[l].bias[0] += delta;
            let mut dn = net.clone();
            dn.layers[l].bias[0] -= delta;
            let fd = (loss(&up) - loss(&dn)) / (2.0 * delta);
            assert!((fd - grads.bias[l][0]).abs() <= 1e-6 * fd.abs().max(1.0));
        }
        // input gradient
        for i in [0usize, 7, 19] {
            let mut xu = x.clone();
            xu[i] += delta;
            let mut xd = x.clone();
            xd[i] -= delta;
            let fu: f64 = forward(&net, &xu, batch).unwrap().output().iter().map(|v| v * v).sum();
            let fdn: f64 = forward(&net, &xd, batch).unwrap().output().iter().map(|v| v * v).sum();
            let fd = (fu - fdn) / (2.0 * delta);
            assert!((fd - gx[i]).abs() <= 1e-6 * fd.abs().max(1.0), "input {i}");
        }
    }

    #[test]
    fn relu_blocks_gradient_at_negative_preactivation() {
        let mut net: MlpParams<f64> = init_params(&[1, 1], &[Activation::Relu], 0).unwrap();
        net.layers[0].weights = vec![1.0];
        net.layers[0].bias = vec![-2.0];
        let cache = forward(&net, &[1.0], 1).unwrap();
        let (grads, gx) = backward(&net, &cache, &[1.0]).unwrap();
        assert_eq!(grads.weights[0][0], 0.0);
        assert_eq!(gx[0], 0.0);
    }

    #[test]
    fn pooling_basics() {
        // constant image is unchanged
        let img = vec![0.7f64; 25];
        let out = avg_pool_same(&img, 5, 5, 3).unwrap();
        for v in &out {
            assert!((v - 0.7).abs() < 1e-15);
        }
        // interior impulse spreads 1/win^2 over the window
        let mut impulse = vec![0.0f64; 121];
        impulse[5 * 11 + 5] = 1.0;
        let out = avg_pool_same(&impulse, 11, 11, 9).unwrap();
        let nonzero: Vec<f64> = out.iter().copied().filter(|&v| v != 0.0).collect();
        assert_eq!(nonzero.len(), 81);
        for v in nonzero {
            assert!((v - 1.0 / 81.0).abs() < 1e-15);
        }
        assert!(avg_pool_same(&img, 5, 5, 4).is_err());
    }

    #[test]
    fn pooling_smooths_checkerboard() {
        let n = 12;
        let img: Vec<f64> = (0..n * n)
            .map(|i| if (i / n + i % n) % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let out = avg_pool_same(&img, n, n, 9).unwrap();
        for r in 2..n - 2 {
            for c in 2..n - 2 {
                assert!(out[r * n + c].abs() < 0.2, "({r},{c}) = {}", out[r * n + c]);
            }
        }
    }

    #[test]
    fn pooling_is_linear_and_transpose_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (h, w, win) = (6, 7, 3);
        let x: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // linearity
        let ax: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let lhs = avg_pool_same(
            &ax.iter().zip(&y).map(|(a, b)| a + 3.0 * b).collect::<Vec<_>>(),
            h,
            w,
            win,
        )
        .unwrap();
        let px = avg_pool_same(&x, h, w, win).unwrap();
        let py = avg_pool_same(&y, h, w, win).unwrap();
        for i in 0..h * w {
            assert!((lhs[i] - (2.0 * px[i] + 3.0 * py[i])).abs() < 1e-12);
        }
        // adjoint: <Px, y> == <x, P^T y>
        let pty = avg_pool_same_backward(&y, h, w, win).unwrap();
        let a: f64 = px.iter().zip(&y).map(|(u, v)| u * v).sum();
        let b: f64 = x.iter().zip(&pty).map(|(u, v)| u * v).sum();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        // At t=1 with |g| >> eps the update is ~ -lr * sign(g).
        let mut net: MlpParams<f64> = init_params(&[1, 2], &[Activation::Linear], 1).unwrap();
        let before = net.layers[0].weights.clone();
        let mut state = AdamState::new(&net, 0.01);
        let grads = MlpGrads { weights: vec![vec![5.0, -0.3]], bias: vec![vec![0.0, 0.0]] };
        adam_step(&mut state, &mut net, &grads).unwrap();
        assert!((net.layers[0].weights[0] - (before[0] - 0.01)).abs() < 1e-6);
        assert!((net.layers[0].weights[1] - (before[1] + 0.01)).abs() < 1e-6);
        // zero gradient leaves bias untouched
        assert_eq!(net.layers[0].bias, vec![0.0, 0.0]);
    }

    #[test]
    fn adam_step_magnitude_bounded() {
        let mut net = toy_net(4);
        let before = net.clone();
        let mut state = AdamState::new(&net, 0.05);
        let grads = MlpGrads {
            weights: net.layers.iter().map(|l| vec![0.7; l.weights.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![-0.2; l.bias.len()]).collect(),
        };
        adam_step(&mut state, &mut net, &grads).unwrap();
        for l in 0..net.layers.len() {
            for (a, b) in net.layers[l].weights.iter().zip(&before.layers[l].weights) {
                assert!((a - b).abs() <= 0.05 * 1.001);
            }
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a: MlpParams<f32> =
            init_params(&[10, 4], &[Activation::Relu], 123).unwrap();
        let b: MlpParams<f32> =
            init_params(&[10, 4], &[Activation::Relu], 123).unwrap();
        assert_eq!(a, b);
        let limit = (6.0f32 / 10.0).sqrt();
        assert!(a.layers[0].weights.iter().all(|w| w.abs() <= limit));
        assert!(a.layers[0].bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let net: MlpParams<f32> = init_params(
            &[4, 3, 2],
            &[Activation::Relu, Activation::Sigmoid],
            77,
        )
        .unwrap();
        let dir = std::env::temp_dir().join(format!("rto-nn-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.rtom");
        save_mlp(&net, &path).unwrap();
        let back: MlpParams<f32> = load_mlp(&path).unwrap();
        assert_eq!(net, back);
        std::fs::write(&path, b"XXXX").unwrap();
        assert!(load_mlp::<f32>(&path).is_err());
    }
}
