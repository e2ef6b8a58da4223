//! The student noise predictor: a small U-Net over latent codes with
//! self-attention taps at the two deepest levels. The final (bottleneck)
//! attention matrix is aggregated into the student saliency map A^G.

use std::cell::RefCell;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{normalize_resize, AttentionMap};
use crate::codec::LatentCode;
use crate::nn::{
    collect_params, params_from_blob, params_to_blob, seeded_rng, timestep_embedding, Conv2d,
    Layer, Linear, MultiHeadAttention,
};
use crate::tensor::Tensor;
use crate::zoo::hex_digest;
use crate::{Error, Result};

const WIDTHS: [usize; 3] = [32, 64, 128];
const HEADS: usize = 4;
const TEMB_DIM: usize = 32;

/// U-Net noise predictor. Attention taps are recorded per forward pass
/// and cleared at the start of the next one.
pub struct Generator {
    in_conv: Conv2d,
    enc0: Conv2d,
    down1: Conv2d,
    enc1: Conv2d,
    down2: Conv2d,
    mid: Conv2d,
    attn_mid1: MultiHeadAttention,
    attn_bottleneck: MultiHeadAttention,
    up1: Conv2d,
    dec1: Conv2d,
    up0: Conv2d,
    dec0: Conv2d,
    out_conv: Conv2d,
    temb: [Linear; 3],
    pub latent_shape: (usize, usize, usize),
    pub t_steps: usize,
    pub codec_hash: String,
    seed: u64,
    taps: RefCell<Vec<Tensor>>,
}

/// Attention initialized with near-constant queries (small input weight,
/// random query bias) and boosted keys, with every head starting from
/// the same query-bias/key block. All queries and heads then agree on
/// one decisive, key-dependent attention row, so the aggregated saliency
/// map starts peaked at an arbitrary position instead of washing out to
/// uniform over query and head averaging; the alignment loss gets a real
/// gradient from the first step, and training is free to diversify the
/// heads afterwards.
fn sharp_attention(rng: &mut rand_chacha::ChaCha8Rng, dim: usize) -> MultiHeadAttention {
    let attn = MultiHeadAttention::new(rng, dim, HEADS);
    let dh = dim / HEADS;
    attn.wq.w.assign(attn.wq.w.value() * 0.05);
    let bq_head = crate::nn::randn(rng, &[dh]) * 1.5;
    let mut bq = ndarray::ArrayD::zeros(ndarray::IxDyn(&[dim]));
    let mut wk = attn.wk.w.value() * 3.0;
    for h in 0..HEADS {
        for j in 0..dh {
            bq[[h * dh + j]] = bq_head[[j]];
            for i in 0..dim {
                wk[[i, h * dh + j]] = wk[[i, j]];
            }
        }
    }
    attn.wq.b.assign(bq);
    attn.wk.w.assign(wk);
    attn
}

impl Generator {
    pub fn new(
        latent_shape: (usize, usize, usize),
        t_steps: usize,
        codec_hash: String,
        seed: u64,
    ) -> Result<Generator> {
        let (c, h, w) = latent_shape;
        if h % 4 != 0 || w % 4 != 0 || h == 0 {
            return Err(Error::Config(format!(
                "latent side {h}x{w} must be divisible by 4"
            )));
        }
        let mut rng = seeded_rng(seed);
        let [w0, w1, w2] = WIDTHS;
        Ok(Generator {
            in_conv: Conv2d::new(&mut rng, c, w0, 3, 1, 1),
            enc0: Conv2d::new(&mut rng, w0, w0, 3, 1, 1),
            down1: Conv2d::new(&mut rng, w0, w1, 3, 2, 1),
            enc1: Conv2d::new(&mut rng, w1, w1, 3, 1, 1),
            down2: Conv2d::new(&mut rng, w1, w2, 3, 2, 1),
            mid: Conv2d::new(&mut rng, w2, w2, 3, 1, 1),
            attn_mid1: sharp_attention(&mut rng, w1),
            attn_bottleneck: sharp_attention(&mut rng, w2),
            up1: Conv2d::new(&mut rng, w2, w1, 3, 1, 1),
            dec1: Conv2d::new(&mut rng, 2 * w1, w1, 3, 1, 1),
            up0: Conv2d::new(&mut rng, w1, w0, 3, 1, 1),
            dec0: Conv2d::new(&mut rng, 2 * w0, w0, 3, 1, 1),
            out_conv: Conv2d::new(&mut rng, w0, c, 3, 1, 1),
            temb: [
                Linear::new(&mut rng, TEMB_DIM, w0),
                Linear::new(&mut rng, TEMB_DIM, w1),
                Linear::new(&mut rng, TEMB_DIM, w2),
            ],
            latent_shape,
            t_steps,
            codec_hash,
            seed,
            taps: RefCell::new(Vec::new()),
        })
    }

    /// Residual self-attention over the spatial positions of a CHW map.
    /// Returns the mixed map and the head-averaged attention matrix.
    fn spatial_attention(attn: &MultiHeadAttention, x: &Tensor) -> (Tensor, Tensor) {
        let shape = x.shape();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let tokens = x.reshape(&[c, h * w]).t2();
        let (mixed, weights) = attn.forward(&tokens);
        let out = tokens.add(&mixed).t2().reshape(&[c, h, w]);
        (out, weights)
    }

    /// Full differentiable forward pass; records attention taps.
    pub fn predict_noise_graph(&self, z_t: &Tensor, t: usize) -> Result<Tensor> {
        if t < 1 || t > self.t_steps {
            return Err(Error::Argument(format!(
                "step {t} outside [1, {}]",
                self.t_steps
            )));
        }
        let shape = z_t.shape();
        if shape != [self.latent_shape.0, self.latent_shape.1, self.latent_shape.2] {
            return Err(Error::Argument(format!(
                "latent shape {shape:?} does not match configured {:?}",
                self.latent_shape
            )));
        }
        self.taps.borrow_mut().clear();
        let emb = Tensor::constant(timestep_embedding(t, TEMB_DIM).into_dyn());
        let t0 = self.temb[0].forward_vec(&emb);
        let t1 = self.temb[1].forward_vec(&emb);
        let t2 = self.temb[2].forward_vec(&emb);

        let h0 = self.in_conv.forward(z_t).add_chan(&t0).relu();
        let s0 = self.enc0.forward(&h0).relu();

        let h1 = self.down1.forward(&s0).add_chan(&t1).relu();
        let h1 = self.enc1.forward(&h1).relu();
        let (s1, attn1) = Self::spatial_attention(&self.attn_mid1, &h1);
        self.taps.borrow_mut().push(attn1);

        let h2 = self.down2.forward(&s1).add_chan(&t2).relu();
        let h2 = self.mid.forward(&h2).relu();
        let (h2, attn2) = Self::spatial_attention(&self.attn_bottleneck, &h2);
        self.taps.borrow_mut().push(attn2);

        let u1 = self.up1.forward(&h2.upsample2()).relu();
        let u1 = self.dec1.forward(&Tensor::concat(&[u1, s1], 0)).relu();
        let u0 = self.up0.forward(&u1.upsample2()).relu();
        let u0 = self.dec0.forward(&Tensor::concat(&[u0, s0], 0)).relu();
        Ok(self.out_conv.forward(&u0))
    }

    /// Plain inference: predicted noise for a latent at step `t`.
    pub fn predict_noise(&self, z_t: &LatentCode, t: usize) -> Result<LatentCode> {
        let out = self.predict_noise_graph(&Tensor::constant(z_t.clone().into_dyn()), t)?;
        Ok(out
            .value()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap())
    }

    /// Student saliency from the last pass, differentiable: the deepest
    /// attention matrix with a non-degenerate token grid (a 1x1
    /// bottleneck attends to a single key and carries no signal),
    /// already head-averaged, is averaged over query positions to one
    /// mass per key and reshaped to its grid.
    pub fn attention_graph(&self) -> Result<Tensor> {
        let taps = self.taps.borrow();
        let weights = taps
            .iter()
            .rev()
            .find(|t| t.shape()[1] > 1)
            .or_else(|| taps.last())
            .ok_or_else(|| Error::State("no forward pass recorded".into()))?;
        let n = weights.shape()[1];
        let grid = (n as f64).sqrt().round() as usize;
        Ok(weights.mean_axis(0).reshape(&[grid, grid]))
    }

    /// A^G for inspection and the distillation cosine metric: the
    /// aggregated student map resized and min-max normalized to the
    /// requested resolution.
    pub fn generator_attention(&self, resolution: usize) -> Result<AttentionMap> {
        let mass = self.attention_graph()?.value();
        let grid = mass.shape()[0];
        let raw = mass
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .into_shape_with_order((grid, grid))
            .unwrap();
        normalize_resize(&raw, resolution, resolution)
    }

    /// All recorded attention matrices of the last pass, shallowest
    /// first (diagnostic surface).
    pub fn attention_taps(&self) -> Vec<Tensor> {
        self.taps.borrow().clone()
    }

    pub fn param_hash(&self) -> String {
        hex_digest(&params_to_blob(&self.params()))
    }
}

impl Layer for Generator {
    fn params(&self) -> Vec<Tensor> {
        let layers: Vec<&dyn Layer> = vec![
            &self.in_conv,
            &self.enc0,
            &self.down1,
            &self.enc1,
            &self.down2,
            &self.mid,
            &self.attn_mid1,
            &self.attn_bottleneck,
            &self.up1,
            &self.dec1,
            &self.up0,
            &self.dec0,
            &self.out_conv,
            &self.temb[0],
            &self.temb[1],
            &self.temb[2],
        ];
        collect_params(&layers)
    }
}

#[derive(Serialize, Deserialize)]
struct GeneratorHeader {
    levels: usize,
    widths: Vec<usize>,
    heads: usize,
    attention_levels: Vec<usize>,
    t_steps: usize,
    codec_hash: String,
    latent: (usize, usize, usize),
    seed: u64,
    blob_len: usize,
}

pub fn save_generator(gen: &Generator, path: &Path) -> Result<()> {
    let blob = params_to_blob(&gen.params());
    let header = GeneratorHeader {
        levels: 3,
        widths: WIDTHS.to_vec(),
        heads: HEADS,
        attention_levels: vec![1, 2],
        t_steps: gen.t_steps,
        codec_hash: gen.codec_hash.clone(),
        latent: gen.latent_shape,
        seed: gen.seed,
        blob_len: blob.len(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    bytes.extend_from_slice(&blob);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_generator(path: &Path) -> Result<Generator> {
    let (header_bytes, blob) = crate::zoo::read_header_blob(path)?;
    let header: GeneratorHeader = serde_json::from_slice(&header_bytes)?;
    let gen = Generator::new(header.latent, header.t_steps, header.codec_hash, header.seed)?;
    params_from_blob(&gen.params(), &blob)?;
    Ok(gen)
}
