//! Latent autoencoder and the diffusion-schedule arithmetic: noise
//! schedule construction, forward diffusion, and the deterministic
//! reverse step.

use std::fs;
use std::path::Path;

use ndarray::{Array3, ArrayD};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::nn::{collect_params, params_from_blob, params_to_blob, seeded_rng, Adam, Conv2d, Layer};
use crate::tensor::Tensor;
use crate::zoo::{hex_digest, Image};
use crate::{Error, Result};

/// C x h x w latent values.
pub type LatentCode = Array3<f64>;

// ---------------------------------------------------------------------------
// Autoencoder
// ---------------------------------------------------------------------------

/// Convolutional autoencoder: the encoder downsamples by `factor` via
/// stride-2 stages and maps to `channels` latent channels; the decoder
/// mirrors it with nearest-neighbor upsampling.
pub struct Codec {
    enc: Vec<Conv2d>,
    dec: Vec<Conv2d>,
    pub channels: usize,
    pub factor: usize,
    pub resolution: usize,
    pub mse: Option<f64>,
    seed: u64,
}

fn stage_widths(factor: usize) -> Result<Vec<usize>> {
    match factor {
        1 => Ok(vec![]),
        2 => Ok(vec![32]),
        4 => Ok(vec![16, 32]),
        other => Err(Error::Config(format!(
            "unsupported downsample factor {other} (1, 2, or 4)"
        ))),
    }
}

impl Codec {
    fn build(channels: usize, factor: usize, resolution: usize, seed: u64) -> Result<Codec> {
        let widths = stage_widths(factor)?;
        if resolution % factor != 0 {
            return Err(Error::Config(format!(
                "resolution {resolution} not divisible by factor {factor}"
            )));
        }
        let mut rng = seeded_rng(seed);
        let mut enc = Vec::new();
        let mut c_in = 3;
        for &w in &widths {
            enc.push(Conv2d::new(&mut rng, c_in, w, 3, 2, 1));
            c_in = w;
        }
        enc.push(Conv2d::new(&mut rng, c_in, channels, 3, 1, 1));
        let mut dec = Vec::new();
        let mut c_dec = channels;
        for &w in widths.iter().rev() {
            dec.push(Conv2d::new(&mut rng, c_dec, w, 3, 1, 1));
            c_dec = w;
        }
        dec.push(Conv2d::new(&mut rng, c_dec, 3, 3, 1, 1));
        Ok(Codec {
            enc,
            dec,
            channels,
            factor,
            resolution,
            mse: None,
            seed,
        })
    }

    fn encode_graph(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        let last = self.enc.len() - 1;
        for (i, conv) in self.enc.iter().enumerate() {
            h = conv.forward(&h);
            if i != last {
                h = h.relu();
            }
        }
        h
    }

    fn decode_graph(&self, z: &Tensor) -> Tensor {
        let mut h = z.clone();
        let last = self.dec.len() - 1;
        for (i, conv) in self.dec.iter().enumerate() {
            h = conv.forward(&h);
            if i != last {
                h = h.relu().upsample2();
            }
        }
        h
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let side = self.resolution / self.factor;
        (self.channels, side, side)
    }

    pub fn encode(&self, x: &Image) -> LatentCode {
        let z = self.encode_graph(&Tensor::constant(x.clone().into_dyn()));
        z.value().into_dimensionality::<ndarray::Ix3>().unwrap()
    }

    /// Decode and clamp to the pixel range.
    pub fn decode(&self, z: &LatentCode) -> Image {
        let x = self.decode_graph(&Tensor::constant(z.clone().into_dyn()));
        x.value()
            .mapv(|v| v.clamp(0.0, 1.0))
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
    }

    pub fn param_hash(&self) -> String {
        hex_digest(&params_to_blob(&self.params()))
    }
}

impl Layer for Codec {
    fn params(&self) -> Vec<Tensor> {
        let layers: Vec<&dyn Layer> = self
            .enc
            .iter()
            .chain(self.dec.iter())
            .map(|c| c as &dyn Layer)
            .collect();
        collect_params(&layers)
    }
}

/// Train the autoencoder on pixel MSE; reports held-out reconstruction
/// MSE per pixel channel.
pub fn train_autoencoder(
    images: &[Image],
    channels: usize,
    factor: usize,
    epochs: usize,
    seed: u64,
) -> Result<Codec> {
    if images.is_empty() {
        return Err(Error::Argument("no training images".into()));
    }
    let resolution = images[0].dim().1;
    let mut codec = Codec::build(channels, factor, resolution, seed)?;
    let n_val = (images.len() / 5).max(1).min(images.len().saturating_sub(1));
    let n_train = images.len() - n_val;
    let mut rng = seeded_rng(seed ^ 0x636f_6465);
    let mut opt = Adam::new(codec.params(), 5e-3);
    let mut order: Vec<usize> = (0..n_train).collect();
    let batch = 8usize;
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            opt.zero_grad();
            let mut total = 0.0;
            for &i in chunk {
                let x = Tensor::constant(images[i].clone().into_dyn());
                let recon = codec.decode_graph(&codec.encode_graph(&x));
                let loss = recon.sub(&x).square().mean().mul_s(1.0 / chunk.len() as f64);
                total += loss.scalar_value();
                loss.backward();
            }
            if !total.is_finite() {
                return Err(Error::Training(format!("non-finite loss at epoch {epoch}")));
            }
            opt.step();
        }
    }
    let mut mse = 0.0;
    for img in &images[n_train..] {
        let recon = codec.decode(&codec.encode(img));
        mse += (&recon - img).mapv(|v| v * v).mean().unwrap();
    }
    codec.mse = Some(mse / n_val as f64);
    Ok(codec)
}

/// Latent perturbation budget: 4x the root-mean-square per-dimension
/// standard deviation of the encoded training latents.
pub fn latent_budget(codec: &Codec, images: &[Image], multiplier: f64) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Argument("no images for latent statistics".into()));
    }
    let latents: Vec<LatentCode> = images.iter().map(|x| codec.encode(x)).collect();
    let dims = latents[0].len();
    let n = latents.len() as f64;
    let mut var_sum = 0.0;
    for d in 0..dims {
        let vals: Vec<f64> = latents.iter().map(|z| z.as_slice().unwrap()[d]).collect();
        let mean = vals.iter().sum::<f64>() / n;
        var_sum += vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    }
    Ok(multiplier * (var_sum / dims as f64).sqrt())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CodecHeader {
    channels: usize,
    factor: usize,
    resolution: usize,
    mse: Option<f64>,
    seed: u64,
    blob_len: usize,
}

pub fn save_codec(codec: &Codec, path: &Path) -> Result<()> {
    let blob = params_to_blob(&codec.params());
    let header = CodecHeader {
        channels: codec.channels,
        factor: codec.factor,
        resolution: codec.resolution,
        mse: codec.mse,
        seed: codec.seed,
        blob_len: blob.len(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    bytes.extend_from_slice(&blob);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_codec(path: &Path) -> Result<Codec> {
    let (header_bytes, blob) = crate::zoo::read_header_blob(path)?;
    let header: CodecHeader = serde_json::from_slice(&header_bytes)?;
    let mut codec = Codec::build(header.channels, header.factor, header.resolution, header.seed)?;
    params_from_blob(&codec.params(), &blob)?;
    codec.mse = header.mse;
    Ok(codec)
}

// ---------------------------------------------------------------------------
// Noise schedule and diffusion steps
// ---------------------------------------------------------------------------

/// Cumulative signal strengths alpha_bar[t] for t = 1..=T (stored
/// 0-indexed), strictly decreasing when the betas are positive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// 1-indexed accessor matching the subscripts in the update rules.
    pub fn at(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }
}

/// Linearly spaced betas from `beta_min` to `beta_max`;
/// alpha_bar[t] is the running product of (1 - beta).
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Argument("schedule needs at least one step".into()));
    }
    if !(0.0..1.0).contains(&beta_min) || !(0.0..1.0).contains(&beta_max) || beta_min > beta_max {
        return Err(Error::Argument(format!(
            "invalid beta range [{beta_min}, {beta_max}]"
        )));
    }
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut prod = 1.0;
    for t in 0..steps {
        let beta = if steps == 1 {
            beta_min
        } else {
            beta_min + (beta_max - beta_min) * t as f64 / (steps - 1) as f64
        };
        prod *= 1.0 - beta;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule { steps, alpha_bar })
}

pub fn default_schedule() -> NoiseSchedule {
    make_schedule(50, 1e-4, 2e-2).unwrap()
}

fn check_step(t: usize, min: usize, schedule: &NoiseSchedule) -> Result<()> {
    if t < min || t > schedule.steps {
        return Err(Error::Argument(format!(
            "step {t} outside [{min}, {}]",
            schedule.steps
        )));
    }
    Ok(())
}

/// z_t = sqrt(alpha_bar_t) * z + sqrt(1 - alpha_bar_t) * eps.
pub fn forward_diffuse(
    z: &ArrayD<f64>,
    t: usize,
    eps: &ArrayD<f64>,
    schedule: &NoiseSchedule,
) -> Result<ArrayD<f64>> {
    check_step(t, 1, schedule)?;
    if z.shape() != eps.shape() {
        return Err(Error::Argument("noise shape mismatch".into()));
    }
    let ab = schedule.at(t);
    Ok(z * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// Deterministic reverse update: reconstruct the clean estimate from
/// the predicted noise and re-noise it at strength alpha_bar_{t-1}.
pub fn reverse_step(
    z_t: &ArrayD<f64>,
    eps_hat: &ArrayD<f64>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<ArrayD<f64>> {
    check_step(t, 2, schedule)?;
    if z_t.shape() != eps_hat.shape() {
        return Err(Error::Argument("noise shape mismatch".into()));
    }
    let ab_t = schedule.at(t);
    let ab_prev = schedule.at(t - 1);
    let z0 = (z_t - &(eps_hat * (1.0 - ab_t).sqrt())) / ab_t.sqrt();
    Ok(&z0 * ab_prev.sqrt() + eps_hat * (1.0 - ab_prev).sqrt())
}
