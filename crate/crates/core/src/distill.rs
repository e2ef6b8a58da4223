//! Distillation losses, mask-ratio scheduling, and the generator
//! training loop.
//!
//! Four terms drive training: noise-prediction MSE, a cosine loss
//! aligning the student attention map with the joint teacher map, an
//! overlap loss steering the predicted-noise error distribution toward
//! the teacher's salient region, and a region loss penalizing latent
//! perturbation mass outside it.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayD};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{resize_bilinear, AttentionMap};
use crate::codec::{forward_diffuse, Codec, LatentCode, NoiseSchedule};
use crate::dataprep::PairedDataset;
use crate::generator::Generator;
use crate::nn::{randn, seeded_rng, Adam, Layer};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_attn: f64,
    pub lambda_pert: f64,
    pub lambda_reg: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights {
            lambda_attn: 5.0,
            lambda_pert: 1.0,
            lambda_reg: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MaskMode {
    /// Anneal the supervised region from everything to nothing.
    Dynamic,
    Fixed(f64),
}

/// Fraction of highest-attention cells carrying perturbation
/// supervision this epoch. The dynamic schedule is linear from 1 at
/// epoch 0 to 0 at the last epoch; a single-epoch run uses 1.
pub fn mask_ratio(epoch: usize, total_epochs: usize, mode: MaskMode) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(Error::Argument(format!(
            "epoch {epoch} outside 0..{total_epochs}"
        )));
    }
    match mode {
        MaskMode::Dynamic => {
            if total_epochs == 1 {
                Ok(1.0)
            } else {
                Ok(1.0 - epoch as f64 / (total_epochs - 1) as f64)
            }
        }
        MaskMode::Fixed(r) => {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Argument(format!("fixed mask ratio {r} outside [0,1]")));
            }
            Ok(r)
        }
    }
}

/// Indicator map of the top `ratio` fraction of cells by value; ties
/// resolved toward lower flat index.
pub fn top_region(map: &Array2<f64>, ratio: f64) -> Array2<f64> {
    let n = map.len();
    let keep = ((ratio * n as f64).round() as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    let flat = map.as_slice().unwrap();
    idx.sort_by(|&a, &b| flat[b].partial_cmp(&flat[a]).unwrap().then(a.cmp(&b)));
    let mut out = Array2::zeros(map.dim());
    for &i in idx.iter().take(keep) {
        out.as_slice_mut().unwrap()[i] = 1.0;
    }
    out
}

// ---------------------------------------------------------------------------
// Loss terms (differentiable and array forms)
// ---------------------------------------------------------------------------

/// Mean squared error over all elements.
pub fn loss_denoise_t(eps_hat: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if eps_hat.shape() != eps.shape() {
        return Err(Error::Argument("noise shape mismatch".into()));
    }
    Ok(eps_hat.sub(eps).square().mean())
}

pub fn loss_denoise(eps_hat: &ArrayD<f64>, eps: &ArrayD<f64>) -> Result<f64> {
    Ok(loss_denoise_t(
        &Tensor::constant(eps_hat.clone()),
        &Tensor::constant(eps.clone()),
    )?
    .scalar_value())
}

/// 1 minus the cosine similarity; 1 if either map has zero norm.
pub fn loss_attn_t(a_g: &Tensor, a_t: &Tensor) -> Result<Tensor> {
    if a_g.shape() != a_t.shape() {
        return Err(Error::Argument("attention shape mismatch".into()));
    }
    let norm_g = a_g.square().sum().scalar_value().sqrt();
    let norm_t = a_t.square().sum().scalar_value().sqrt();
    if norm_g == 0.0 || norm_t == 0.0 {
        return Ok(Tensor::scalar(1.0));
    }
    let dot = a_g.mul(a_t).sum();
    let denom = a_g
        .square()
        .sum()
        .sqrt()
        .mul(&a_t.square().sum().sqrt())
        .recip();
    Ok(Tensor::scalar(1.0).sub(&dot.mul(&denom)))
}

pub fn loss_attn(a_g: &AttentionMap, a_t: &AttentionMap) -> Result<f64> {
    Ok(loss_attn_t(
        &Tensor::constant(a_g.values.clone().into_dyn()),
        &Tensor::constant(a_t.values.clone().into_dyn()),
    )?
    .scalar_value())
}

/// Channel-averaged absolute prediction error, normalized to a spatial
/// probability map; an exact prediction yields the uniform map.
pub fn perturbation_distribution_t(eps_hat: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if eps_hat.shape() != eps.shape() {
        return Err(Error::Argument("noise shape mismatch".into()));
    }
    let m = eps_hat.sub(eps).abs().mean_axis(0);
    let total = m.sum();
    if total.scalar_value() <= 0.0 {
        let shape = m.shape();
        let n = (shape[0] * shape[1]) as f64;
        return Ok(Tensor::constant(ArrayD::from_elem(
            ndarray::IxDyn(&shape),
            1.0 / n,
        )));
    }
    Ok(m.scale(&total.recip()))
}

pub fn perturbation_distribution(eps_hat: &LatentCode, eps: &LatentCode) -> Result<Array2<f64>> {
    let t = perturbation_distribution_t(
        &Tensor::constant(eps_hat.clone().into_dyn()),
        &Tensor::constant(eps.clone().into_dyn()),
    )?;
    Ok(t.value().into_dimensionality::<ndarray::Ix2>().unwrap())
}

fn check_distribution(v: &ArrayD<f64>, name: &str) -> Result<()> {
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || v.iter().any(|&x| x < -1e-12) {
        return Err(Error::Argument(format!(
            "{name} is not a probability map (sum {sum})"
        )));
    }
    Ok(())
}

/// 1 minus the inner product of the two spatial distributions. The
/// `sqrt_overlap` variant uses the square-root overlap instead.
pub fn loss_pert_t(m_pert: &Tensor, a_t: &Tensor, sqrt_overlap: bool) -> Result<Tensor> {
    if m_pert.shape() != a_t.shape() {
        return Err(Error::Argument("distribution shape mismatch".into()));
    }
    m_pert.with_value(|v| check_distribution(v, "perturbation map"))?;
    a_t.with_value(|v| check_distribution(v, "teacher map"))?;
    let overlap = if sqrt_overlap {
        m_pert.mul(a_t).sqrt().sum()
    } else {
        m_pert.mul(a_t).sum()
    };
    Ok(Tensor::scalar(1.0).sub(&overlap))
}

pub fn loss_pert(m_pert: &Array2<f64>, a_t: &Array2<f64>, sqrt_overlap: bool) -> Result<f64> {
    Ok(loss_pert_t(
        &Tensor::constant(m_pert.clone().into_dyn()),
        &Tensor::constant(a_t.clone().into_dyn()),
        sqrt_overlap,
    )?
    .scalar_value())
}

/// Mean absolute latent difference outside the teacher's attention:
/// mask 1 - A_T (resized to the latent grid) broadcast over channels.
pub fn loss_region(z_adv: &LatentCode, z: &LatentCode, a_t: &AttentionMap) -> Result<f64> {
    loss_region_masked(z_adv, z, a_t, None)
}

/// As [`loss_region`], additionally zeroing the mask inside `region`
/// (the epoch's supervised top-attention cells).
pub fn loss_region_masked(
    z_adv: &LatentCode,
    z: &LatentCode,
    a_t: &AttentionMap,
    region: Option<&Array2<f64>>,
) -> Result<f64> {
    if z_adv.dim() != z.dim() {
        return Err(Error::Argument("latent shape mismatch".into()));
    }
    let (c, h, w) = z.dim();
    let mask_src = resize_bilinear(&a_t.values, h, w);
    if let Some(r) = region {
        if r.dim() != (h, w) {
            return Err(Error::Argument("region mask shape mismatch".into()));
        }
    }
    let mut acc = 0.0;
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut m = 1.0 - mask_src[[i, j]];
                if let Some(r) = region {
                    m *= 1.0 - r[[i, j]];
                }
                acc += ((z_adv[[ch, i, j]] - z[[ch, i, j]]) * m).abs();
            }
        }
    }
    Ok(acc / (c * h * w) as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub denoise: f64,
    pub attn: f64,
    pub pert: f64,
    pub region: f64,
}

pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<f64> {
    for (name, v) in [
        ("denoise", parts.denoise),
        ("attention", parts.attn),
        ("perturbation", parts.pert),
        ("region", parts.region),
    ] {
        if !v.is_finite() {
            return Err(Error::Training(format!("non-finite {name} loss: {v}")));
        }
    }
    Ok(parts.denoise
        + weights.lambda_attn * parts.attn
        + weights.lambda_pert * parts.pert
        + weights.lambda_reg * parts.region)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillConfig {
    pub weights: LossWeights,
    pub epochs: usize,
    pub batch: usize,
    pub mask_mode: MaskMode,
    pub seed: u64,
    pub sqrt_overlap: bool,
    pub learning_rate: f64,
}

impl Default for DistillConfig {
    fn default() -> DistillConfig {
        DistillConfig {
            weights: LossWeights::default(),
            epochs: 20,
            batch: 8,
            mask_mode: MaskMode::Dynamic,
            seed: 0,
            sqrt_overlap: false,
            learning_rate: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub denoise: f64,
    pub attn: f64,
    pub pert: f64,
    pub region: f64,
    pub total: f64,
    pub cosine: f64,
    pub mask_ratio: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingReport {
    pub records: Vec<EpochRecord>,
}

impl TrainingReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out =
            String::from("epoch,denoise,attn,pert,region,total,cosine,mask_ratio\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.epoch, r.denoise, r.attn, r.pert, r.region, r.total, r.cosine, r.mask_ratio
            ));
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Repeat nearest-neighbour doubling until the square map reaches
/// `target`; the ratio must be a power of two.
fn upsample_to(map: &Tensor, target: usize) -> Tensor {
    let mut side = map.shape()[0];
    let mut t = map.reshape(&[1, side, side]);
    while side < target {
        t = t.upsample2();
        side *= 2;
    }
    assert_eq!(side, target, "upsample ratio must be a power of two");
    t.reshape(&[target, target])
}

/// Algorithm: per pair, encode to (z, z_adv), draw (t, eps), noise the
/// adversarial latent, predict noise, and descend on the weighted sum
/// of the four losses with this epoch's mask ratio.
pub fn train(
    generator: &Generator,
    dataset: &PairedDataset,
    codec: &Codec,
    schedule: &NoiseSchedule,
    cfg: &DistillConfig,
) -> Result<TrainingReport> {
    if dataset.pairs.is_empty() {
        return Err(Error::Argument("empty training dataset".into()));
    }
    let mut report = TrainingReport::default();
    if cfg.epochs == 0 {
        return Ok(report);
    }
    let (_, lh, lw) = codec.latent_shape();
    let resolution = dataset.manifest.resolution;

    struct Prepared {
        z: LatentCode,
        z_adv: LatentCode,
        a_t_full: Tensor,
        a_t_latent: Array2<f64>,
        attn: AttentionMap,
    }
    let prepared: Vec<Prepared> = dataset
        .pairs
        .iter()
        .map(|pair| Prepared {
            z: codec.encode(&pair.clean),
            z_adv: codec.encode(&pair.adv),
            a_t_full: Tensor::constant(pair.attn.values.clone().into_dyn()),
            a_t_latent: resize_bilinear(&pair.attn.values, lh, lw),
            attn: pair.attn.clone(),
        })
        .collect();

    let mut rng = seeded_rng(cfg.seed ^ 0x6469_7374);
    let mut opt = Adam::new(generator.params(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..prepared.len()).collect();

    for epoch in 0..cfg.epochs {
        let ratio = mask_ratio(epoch, cfg.epochs, cfg.mask_mode)?;
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let mut count = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch.max(1)).enumerate() {
            opt.zero_grad();
            for &i in chunk {
                let p = &prepared[i];
                let t = rng.random_range(1..=schedule.steps);
                let eps = randn(&mut rng, &[p.z.dim().0, lh, lw]);
                let z_t = forward_diffuse(&p.z_adv.clone().into_dyn(), t, &eps, schedule)?;

                let eps_t = Tensor::constant(eps);
                let eps_hat = generator.predict_noise_graph(&Tensor::constant(z_t), t)?;
                let a_g = upsample_to(&generator.attention_graph()?, resolution);

                let l_denoise = loss_denoise_t(&eps_hat, &eps_t)?;
                let l_attn = loss_attn_t(&a_g, &p.a_t_full)?;

                let region = top_region(&p.a_t_latent, ratio);
                let region_t = Tensor::constant(region.clone().into_dyn());
                let masked_teacher = &p.a_t_latent * &region;
                let teacher_mass: f64 = masked_teacher.iter().sum();
                let l_pert = if teacher_mass > 0.0 {
                    let m_raw = eps_hat.sub(&eps_t).abs().mean_axis(0).mul(&region_t);
                    let m_total = m_raw.sum();
                    if m_total.scalar_value() > 0.0 {
                        let m_norm = m_raw.scale(&m_total.recip());
                        let teacher_norm =
                            Tensor::constant((masked_teacher / teacher_mass).into_dyn());
                        loss_pert_t(&m_norm, &teacher_norm, cfg.sqrt_overlap)?
                    } else {
                        Tensor::scalar(0.0)
                    }
                } else {
                    Tensor::scalar(0.0)
                };

                let l_region = loss_region_masked(&p.z_adv, &p.z, &p.attn, Some(&region))?;

                let parts = LossParts {
                    denoise: l_denoise.scalar_value(),
                    attn: l_attn.scalar_value(),
                    pert: l_pert.scalar_value(),
                    region: l_region,
                };
                let total_value = total_loss(&parts, &cfg.weights).map_err(|e| {
                    Error::Training(format!("batch {batch_idx}: {e} (parts {parts:?})"))
                })?;

                let total_t = l_denoise
                    .add(&l_attn.mul_s(cfg.weights.lambda_attn))
                    .add(&l_pert.mul_s(cfg.weights.lambda_pert))
                    .add_s(cfg.weights.lambda_reg * l_region);
                total_t.mul_s(1.0 / chunk.len() as f64).backward();

                sums.0 += parts.denoise;
                sums.1 += parts.attn;
                sums.2 += parts.pert;
                sums.3 += parts.region;
                sums.4 += total_value;
                sums.5 += 1.0 - parts.attn;
                count += 1;
            }
            opt.step();
        }
        let n = count as f64;
        report.records.push(EpochRecord {
            epoch,
            denoise: sums.0 / n,
            attn: sums.1 / n,
            pert: sums.2 / n,
            region: sums.3 / n,
            total: sums.4 / n,
            cosine: sums.5 / n,
            mask_ratio: ratio,
        });
    }
    Ok(report)
}
