//! White-box adversarial pair generation (PGD, MI-FGSM) and the paired
//! dataset with one joint attention map per image.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionMap, AttentionMeta};
use crate::tensor::Tensor;
use crate::zoo::{ClassifierModel, Image, LabeledSet};
use crate::{Error, Result};

pub const EPS_PIXEL: f64 = 16.0 / 255.0;
pub const ALPHA_PIXEL: f64 = 2.0 / 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackKind {
    Pgd,
    MiFgsm,
}

impl AttackKind {
    pub fn tag(&self) -> &'static str {
        match self {
            AttackKind::Pgd => "pgd",
            AttackKind::MiFgsm => "mifgsm",
        }
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<AttackKind> {
        match s {
            "pgd" => Ok(AttackKind::Pgd),
            "mifgsm" | "mi-fgsm" => Ok(AttackKind::MiFgsm),
            other => Err(Error::Config(format!("unknown attack tag: {other}"))),
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Cross-entropy gradient of a classifier with respect to its input.
fn input_gradient(model: &ClassifierModel, x: &Image, y: usize) -> Result<Array3<f64>> {
    let input = Tensor::param(x.clone().into_dyn());
    let trace = model.forward_traced(&input);
    trace.logits.log_softmax().pick(y).neg().backward();
    let grad = input
        .grad()
        .ok_or_else(|| Error::Numeric("no gradient reached the input".into()))?;
    for p in model.params() {
        p.clear_grad();
    }
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite input gradient".into()));
    }
    Ok(grad.into_dimensionality::<ndarray::Ix3>().unwrap())
}

fn project_clamp(x: &mut Image, clean: &Image, eps: f64) {
    for (v, &c) in x.iter_mut().zip(clean.iter()) {
        *v = v.clamp(c - eps, c + eps).clamp(0.0, 1.0);
    }
}

/// Shared iteration core: `grad_fn` yields the ascent gradient at the
/// current iterate; momentum decay 0 disables the accumulator and
/// recovers plain PGD.
fn sign_ascent(
    grad_fn: &mut dyn FnMut(&Image) -> Result<Array3<f64>>,
    x: &Image,
    eps: f64,
    alpha: f64,
    mu: f64,
    steps: usize,
    momentum: bool,
) -> Result<Image> {
    let mut adv = x.clone();
    let mut g: Array3<f64> = Array3::zeros(x.dim());
    for _ in 0..steps {
        let grad = grad_fn(&adv)?;
        if momentum {
            let l1: f64 = grad.iter().map(|v| v.abs()).sum();
            g.mapv_inplace(|v| v * mu);
            if l1 > 0.0 {
                g.scaled_add(1.0 / l1, &grad);
            }
        } else {
            g = grad;
        }
        for (v, &d) in adv.iter_mut().zip(g.iter()) {
            // f64::signum maps +-0.0 to +-1.0; a zero gradient must not move.
            if d != 0.0 {
                *v += alpha * d.signum();
            }
        }
        project_clamp(&mut adv, x, eps);
    }
    Ok(adv)
}

/// Projected gradient descent on cross-entropy: `steps` sign-gradient
/// ascent updates of size `alpha`, each projected to the L-infinity
/// `eps`-ball around `x` and clamped to [0, 1]. Deterministic; the seed
/// is accepted for interface uniformity with randomized variants.
pub fn pgd(
    model: &ClassifierModel,
    x: &Image,
    y: usize,
    eps: f64,
    alpha: f64,
    steps: usize,
    _seed: u64,
) -> Result<Image> {
    if eps < 0.0 || alpha < 0.0 {
        return Err(Error::Argument("eps and alpha must be nonnegative".into()));
    }
    sign_ascent(
        &mut |cur| input_gradient(model, cur, y),
        x,
        eps,
        alpha,
        0.0,
        steps,
        false,
    )
}

/// Momentum iterative FGSM: accumulator g <- mu*g + grad/||grad||_1,
/// update by alpha*sign(g). A zero-gradient step adds nothing to g.
pub fn mi_fgsm(
    model: &ClassifierModel,
    x: &Image,
    y: usize,
    eps: f64,
    alpha: f64,
    mu: f64,
    steps: usize,
    _seed: u64,
) -> Result<Image> {
    if eps < 0.0 || alpha < 0.0 || mu < 0.0 {
        return Err(Error::Argument("eps, alpha, mu must be nonnegative".into()));
    }
    sign_ascent(
        &mut |cur| input_gradient(model, cur, y),
        x,
        eps,
        alpha,
        mu,
        steps,
        true,
    )
}

// ---------------------------------------------------------------------------
// Paired dataset
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrepConfig {
    pub eps: f64,
    pub alpha: f64,
    pub steps: usize,
    pub mu: f64,
    pub attacks: Vec<AttackKind>,
    /// Use only the deepest layer per teacher instead of depth fusion.
    pub single_layer_attention: bool,
    pub seed: u64,
}

impl Default for PrepConfig {
    fn default() -> PrepConfig {
        PrepConfig {
            eps: EPS_PIXEL,
            alpha: ALPHA_PIXEL,
            steps: 10,
            mu: 1.0,
            attacks: vec![AttackKind::MiFgsm],
            single_layer_attention: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairEntry {
    pub image_id: usize,
    pub clean: String,
    pub adv: String,
    pub label: usize,
    pub teacher: String,
    pub attack: AttackKind,
    pub attn: String,
    /// The attacked teacher already misclassified the clean image.
    pub clean_misclassified: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub resolution: usize,
    pub classes: usize,
    pub eps: f64,
    pub alpha: f64,
    pub steps: usize,
    pub mu: f64,
    pub cnn_teacher_hash: String,
    pub vit_teacher_hash: String,
    pub entries: Vec<PairEntry>,
}

/// One loaded clean/adversarial pair plus the image's joint teacher map.
pub struct TrainingPair {
    pub clean: Image,
    pub adv: Image,
    pub label: usize,
    pub attn: AttentionMap,
    pub teacher: String,
    pub attack: AttackKind,
    pub clean_misclassified: bool,
}

pub struct PairedDataset {
    pub manifest: Manifest,
    pub pairs: Vec<TrainingPair>,
}

/// 8-bit PNG round trip for CHW images in [0, 1].
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let (_, h, w) = img.dim();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (img[[c, y as usize, x as usize]] * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    buf.save(path)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn(
        (3, h as usize, w as usize),
        |(c, i, j)| f64::from(img.get_pixel(j as u32, i as u32)[c]) / 255.0,
    ))
}

/// Generate the paired dataset: one adversarial per (teacher, attack)
/// and one joint attention map per image, laid out as
/// `manifest.json` + `images/*.png` + `attn/*.f32`.
pub fn build_dataset(
    data: &LabeledSet,
    cnn: &ClassifierModel,
    vit: &ClassifierModel,
    cfg: &PrepConfig,
    out_dir: &Path,
) -> Result<Manifest> {
    if cfg.attacks.is_empty() {
        return Err(Error::Config("at least one attack must be configured".into()));
    }
    let resolution = cnn.spec.resolution;
    fs::create_dir_all(out_dir.join("images"))?;
    fs::create_dir_all(out_dir.join("attn"))?;
    let mut entries = Vec::new();
    for (id, (image, &label)) in data.images.iter().zip(&data.labels).enumerate() {
        let clean_rel = format!("images/{id:04}_clean.png");
        save_png(image, &out_dir.join(&clean_rel))?;

        let (attn, w_cnn, w_vit) = attention::teacher_attention(
            cnn,
            vit,
            image,
            label,
            resolution,
            cfg.single_layer_attention,
        )?;
        let attn_rel = format!("attn/{id:04}.f32");
        attention::save_attention(
            &attn,
            &AttentionMeta {
                height: attn.height(),
                width: attn.width(),
                source: "joint".into(),
                weights: [w_cnn, w_vit],
            },
            &out_dir.join(&attn_rel),
        )?;

        for (teacher_tag, teacher) in [("cnn", cnn), ("vit", vit)] {
            for &attack in &cfg.attacks {
                let seed = cfg.seed ^ (id as u64) << 8;
                let adv = match attack {
                    AttackKind::Pgd => {
                        pgd(teacher, image, label, cfg.eps, cfg.alpha, cfg.steps, seed)?
                    }
                    AttackKind::MiFgsm => mi_fgsm(
                        teacher, image, label, cfg.eps, cfg.alpha, cfg.mu, cfg.steps, seed,
                    )?,
                };
                let adv_rel = format!("images/{id:04}_{teacher_tag}_{}.png", attack.tag());
                save_png(&adv, &out_dir.join(&adv_rel))?;
                entries.push(PairEntry {
                    image_id: id,
                    clean: clean_rel.clone(),
                    adv: adv_rel,
                    label,
                    teacher: teacher_tag.into(),
                    attack,
                    attn: attn_rel.clone(),
                    clean_misclassified: teacher.predict(image) != label,
                });
            }
        }
    }
    let manifest = Manifest {
        resolution,
        classes: cnn.spec.classes,
        eps: cfg.eps,
        alpha: cfg.alpha,
        steps: cfg.steps,
        mu: cfg.mu,
        cnn_teacher_hash: cnn.param_hash(),
        vit_teacher_hash: vit.param_hash(),
        entries,
    };
    fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn manifest_path(root: &Path) -> PathBuf {
    root.join("manifest.json")
}

/// Load the dataset and verify every stored adversarial satisfies the
/// budget (with 1/255 quantization slack per endpoint) and pixel range.
pub fn load_dataset(root: &Path) -> Result<PairedDataset> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(manifest_path(root))?)?;
    let slack = 2.0 / 255.0 + 1e-9;
    let mut pairs = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let clean = load_png(&root.join(&entry.clean))?;
        let adv = load_png(&root.join(&entry.adv))?;
        for (&a, &c) in adv.iter().zip(clean.iter()) {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!(
                    "adversarial pixel out of range in {}",
                    entry.adv
                )));
            }
            if (a - c).abs() > manifest.eps + slack {
                return Err(Error::Config(format!(
                    "budget violation in {}: |{a} - {c}| > {}",
                    entry.adv, manifest.eps
                )));
            }
        }
        let (attn, _) = attention::load_attention(&root.join(&entry.attn))?;
        pairs.push(TrainingPair {
            clean,
            adv,
            label: entry.label,
            attn,
            teacher: entry.teacher.clone(),
            attack: entry.attack,
            clean_misclassified: entry.clean_misclassified,
        });
    }
    Ok(PairedDataset { manifest, pairs })
}
