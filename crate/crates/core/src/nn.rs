//! Neural network building blocks on top of the autodiff [`Tensor`].
//!
//! All layers hold their parameters as `Tensor::param` leaves and expose
//! them through [`Layer::params`] so optimizers and checkpoint code can
//! walk a model in a stable, declared order.

use ndarray::{Array1, Array2, Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Arr, Tensor};

/// Anything that owns trainable parameters.
pub trait Layer {
    /// Parameters in a stable order (used for checkpoints and optimizers).
    fn params(&self) -> Vec<Tensor>;
}

fn normal_init(rng: &mut ChaCha8Rng, std: f64, shape: &[usize]) -> Arr {
    let dist = Normal::new(0.0, std).expect("normal dist");
    let mut a = ArrayD::zeros(IxDyn(shape));
    for v in a.iter_mut() {
        *v = dist.sample(rng);
    }
    a
}

/// Fully connected layer; stores the weight as (in, out) so that a
/// (n, in) token matrix maps with a single matmul.
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, dim_in: usize, dim_out: usize) -> Linear {
        let std = (2.0 / dim_in as f64).sqrt();
        Linear {
            w: Tensor::param(normal_init(rng, std, &[dim_in, dim_out])),
            b: Tensor::param(ArrayD::zeros(IxDyn(&[dim_out]))),
        }
    }

    /// x: (n, in) -> (n, out)
    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.w).add_row(&self.b)
    }

    /// 1-D convenience: (in,) -> (out,)
    pub fn forward_vec(&self, x: &Tensor) -> Tensor {
        let d = x.shape()[0];
        self.forward(&x.reshape(&[1, d])).reshape(&[self.b.shape()[0]])
    }
}

impl Layer for Linear {
    fn params(&self) -> Vec<Tensor> {
        vec![self.w.clone(), self.b.clone()]
    }
}

/// 2-D convolution layer (single-sample CHW).
pub struct Conv2d {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Conv2d {
        let fan_in = (c_in * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        Conv2d {
            w: Tensor::param(normal_init(rng, std, &[c_out, c_in, k, k])),
            b: Tensor::param(ArrayD::zeros(IxDyn(&[c_out]))),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv2d(&self.w, self.stride, self.pad).add_chan(&self.b)
    }
}

impl Layer for Conv2d {
    fn params(&self) -> Vec<Tensor> {
        vec![self.w.clone(), self.b.clone()]
    }
}

/// Layer normalization over the last axis of a (n, d) tensor.
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> LayerNorm {
        LayerNorm {
            gain: Tensor::param(ArrayD::from_elem(IxDyn(&[dim]), 1.0)),
            bias: Tensor::param(ArrayD::zeros(IxDyn(&[dim]))),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mu = x.mean_axis(1);
        let centered = x.add_col(&mu.neg());
        let var = centered.square().mean_axis(1);
        let inv_std = var.add_s(self.eps).sqrt().recip();
        centered
            .mul_col(&inv_std)
            .mul_row(&self.gain)
            .add_row(&self.bias)
    }
}

impl Layer for LayerNorm {
    fn params(&self) -> Vec<Tensor> {
        vec![self.gain.clone(), self.bias.clone()]
    }
}

/// Group normalization over a (C, H, W) tensor.
pub struct GroupNorm {
    pub gain: Tensor,
    pub bias: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(channels: usize, groups: usize) -> GroupNorm {
        assert_eq!(channels % groups, 0, "group norm: channels % groups != 0");
        GroupNorm {
            gain: Tensor::param(ArrayD::from_elem(IxDyn(&[channels]), 1.0)),
            bias: Tensor::param(ArrayD::zeros(IxDyn(&[channels]))),
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let shape = x.shape();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let flat = x.reshape(&[self.groups, c / self.groups * h * w]);
        let mu = flat.mean_axis(1);
        let centered = flat.add_col(&mu.neg());
        let var = centered.square().mean_axis(1);
        let inv_std = var.add_s(self.eps).sqrt().recip();
        centered
            .mul_col(&inv_std)
            .reshape(&[c, h, w])
            .mul_chan(&self.gain)
            .add_chan(&self.bias)
    }
}

impl Layer for GroupNorm {
    fn params(&self) -> Vec<Tensor> {
        vec![self.gain.clone(), self.bias.clone()]
    }
}

/// Multi-head self-attention over a (n, d) token matrix.
///
/// `forward` returns both the mixed tokens and the head-averaged
/// attention matrix (n, n); the latter stays in the autodiff graph so
/// attention-level losses can backpropagate through it.
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize) -> MultiHeadAttention {
        assert_eq!(dim % heads, 0, "attention: dim % heads != 0");
        MultiHeadAttention {
            wq: Linear::new(rng, dim, dim),
            wk: Linear::new(rng, dim, dim),
            wv: Linear::new(rng, dim, dim),
            wo: Linear::new(rng, dim, dim),
            heads,
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, Tensor) {
        let d = x.shape()[1];
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.wq.forward(x);
        let k = self.wk.forward(x);
        let v = self.wv.forward(x);
        let mut outs = Vec::with_capacity(self.heads);
        let mut attn_sum: Option<Tensor> = None;
        for h in 0..self.heads {
            let qh = q.narrow(1, h * dh, dh);
            let kh = k.narrow(1, h * dh, dh);
            let vh = v.narrow(1, h * dh, dh);
            let attn = qh.matmul(&kh.t2()).mul_s(scale).softmax_rows();
            outs.push(attn.matmul(&vh));
            attn_sum = Some(match attn_sum {
                Some(s) => s.add(&attn),
                None => attn,
            });
        }
        let mixed = Tensor::concat(&outs, 1);
        let attn_avg = attn_sum.unwrap().mul_s(1.0 / self.heads as f64);
        (self.wo.forward(&mixed), attn_avg)
    }
}

impl Layer for MultiHeadAttention {
    fn params(&self) -> Vec<Tensor> {
        [&self.wq, &self.wk, &self.wv, &self.wo]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
}

/// Sinusoidal timestep embedding (constant per step).
pub fn timestep_embedding(t: usize, dim: usize) -> Arr {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out.into_dyn()
}

/// First-order adaptive-moment optimizer (Adam).
pub struct Adam {
    params: Vec<Tensor>,
    m: Vec<Arr>,
    v: Vec<Arr>,
    step: u64,
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: Vec<Tensor>, lr: f64) -> Adam {
        let m = params.iter().map(|p| Arr::zeros(p.value().raw_dim())).collect();
        let v = params.iter().map(|p| Arr::zeros(p.value().raw_dim())).collect();
        Adam {
            params,
            m,
            v,
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.clear_grad();
        }
    }

    pub fn step(&mut self) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in self.params.iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            self.m[i] = &self.m[i] * self.beta1 + &g * (1.0 - self.beta1);
            self.v[i] = &self.v[i] * self.beta2 + &g.mapv(|x| x * x) * (1.0 - self.beta2);
            let mhat = &self.m[i] / bc1;
            let vhat = &self.v[i] / bc2;
            let mut value = p.value();
            value
                .iter_mut()
                .zip(mhat.iter())
                .zip(vhat.iter())
                .for_each(|((w, m), v)| *w -= self.lr * m / (v.sqrt() + self.eps));
            p.assign(value);
        }
    }
}

/// Deterministic seeded RNG used everywhere a model is initialized.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard-normal array draw.
pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
    normal_init(rng, 1.0, shape)
}

/// Uniform array draw in [lo, hi).
pub fn rand_uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Arr {
    let mut a = ArrayD::zeros(IxDyn(shape));
    for v in a.iter_mut() {
        *v = rng.random_range(lo..hi);
    }
    a
}

/// Serialize parameters into a flat little-endian f64 blob.
pub fn params_to_blob(params: &[Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    for p in params {
        for v in p.value().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Restore parameters from a blob produced by [`params_to_blob`].
pub fn params_from_blob(params: &[Tensor], blob: &[u8]) -> crate::Result<()> {
    let total: usize = params.iter().map(|p| p.value().len()).sum();
    if blob.len() != total * 8 {
        return Err(crate::Error::Config(format!(
            "parameter blob size mismatch: expected {} bytes, got {}",
            total * 8,
            blob.len()
        )));
    }
    let mut offset = 0;
    for p in params {
        let mut value = p.value();
        for v in value.iter_mut() {
            let mut bytes = [0u8; 8];
            bytes.copy_from_slice(&blob[offset..offset + 8]);
            *v = f64::from_le_bytes(bytes);
            offset += 8;
        }
        p.assign(value);
    }
    Ok(())
}

/// Collect params from a list of layers.
pub fn collect_params(layers: &[&dyn Layer]) -> Vec<Tensor> {
    layers.iter().flat_map(|l| l.params()).collect()
}

#[allow(unused)]
fn _type_checks() {
    // Ensure the helper array types stay in sync with ndarray's API.
    let _: Option<Array2<f64>> = None;
    let _: Option<Array4<f64>> = None;
}
