//! Evaluation harness: attack-success metrics, input-transformation
//! defenses, experiment orchestration with deterministic reports, and a
//! query-budget success curve.

use std::io::Cursor;
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::attack::{attack, AttackConfig, AttackStatus};
use crate::codec::{Codec, NoiseSchedule};
use crate::generator::Generator;
use crate::nn::seeded_rng;
use crate::zoo::{hex_digest, ClassifierModel, Image, LabeledSet, Oracle};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub total: usize,
    pub successes: usize,
    pub asr: f64,
    /// Mean queries over successful attacks only; absent without successes.
    pub avg_queries: Option<f64>,
    /// Lower median of queries over successful attacks only.
    pub median_queries: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageOutcome {
    pub index: usize,
    pub label: usize,
    pub status: AttackStatus,
    pub queries: u64,
    pub final_margin: Option<f64>,
}

pub fn compute_metrics(outcomes: &[ImageOutcome]) -> Result<Metrics> {
    if outcomes.is_empty() {
        return Err(Error::Argument("metrics need at least one outcome".into()));
    }
    let mut success_queries: Vec<u64> = outcomes
        .iter()
        .filter(|o| o.status == AttackStatus::Success)
        .map(|o| o.queries)
        .collect();
    success_queries.sort_unstable();
    let successes = success_queries.len();
    let (avg, med) = if successes == 0 {
        (None, None)
    } else {
        let avg = success_queries.iter().sum::<u64>() as f64 / successes as f64;
        let med = success_queries[(successes - 1) / 2];
        (Some(avg), Some(med))
    };
    Ok(Metrics {
        total: outcomes.len(),
        successes,
        asr: successes as f64 / outcomes.len() as f64,
        avg_queries: avg,
        median_queries: med,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum Defense {
    None,
    /// JPEG re-encode at the given quality (1..=100).
    Jpeg(u8),
    /// Bit-depth reduction to the given number of bits (1..=8).
    BitDepth(u8),
    /// Pixel deflection: random pixels replaced by random neighbours.
    PixelDeflection {
        deflections: usize,
        window: usize,
        seed: u64,
    },
}

impl Defense {
    pub fn tag(&self) -> String {
        match self {
            Defense::None => "none".into(),
            Defense::Jpeg(q) => format!("jpeg-{q}"),
            Defense::BitDepth(b) => format!("bdr-{b}"),
            Defense::PixelDeflection { deflections, window, .. } => {
                format!("pd-{deflections}-{window}")
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Defense::Jpeg(q) if !(1..=100).contains(q) => {
                Err(Error::Argument("jpeg quality must be in 1..=100".into()))
            }
            Defense::BitDepth(b) if !(1..=8).contains(b) => {
                Err(Error::Argument("bit depth must be in 1..=8".into()))
            }
            Defense::PixelDeflection { window, .. } if *window == 0 => {
                Err(Error::Argument("deflection window must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn apply(&self, image: &Image) -> Result<Image> {
        self.validate()?;
        Ok(match self {
            Defense::None => image.clone(),
            Defense::Jpeg(q) => defense_jpeg(image, *q)?,
            Defense::BitDepth(b) => defense_bdr(image, *b)?,
            Defense::PixelDeflection {
                deflections,
                window,
                seed,
            } => defense_pd(image, *deflections, *window, *seed)?,
        })
    }
}

/// Round-trip through the JPEG codec at the given quality.
pub fn defense_jpeg(image: &Image, quality: u8) -> Result<Image> {
    if !(1..=100).contains(&quality) {
        return Err(Error::Argument("jpeg quality must be in 1..=100".into()));
    }
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::Argument("jpeg defense expects 3 channels".into()));
    }
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (image[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            rgb.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    let mut buf = Vec::new();
    let mut enc = image::codecs::jpeg::JpegEncoder::new_with_quality(Cursor::new(&mut buf), quality);
    enc.encode_image(&rgb)?;
    let decoded = image::load_from_memory(&buf)?.to_rgb8();
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let px = decoded.get_pixel(x as u32, y as u32);
            for ch in 0..3 {
                out[[ch, y, x]] = px[ch] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Quantize each value to `bits` bits: round(x * (2^b - 1)) / (2^b - 1).
pub fn defense_bdr(image: &Image, bits: u8) -> Result<Image> {
    if !(1..=8).contains(&bits) {
        return Err(Error::Argument("bit depth must be in 1..=8".into()));
    }
    let levels = (1u32 << bits) as f64 - 1.0;
    Ok(image.mapv(|v| (v.clamp(0.0, 1.0) * levels).round() / levels))
}

/// Replace `deflections` randomly chosen pixels with a random pixel
/// from the surrounding window (all channels together).
pub fn defense_pd(image: &Image, deflections: usize, window: usize, seed: u64) -> Result<Image> {
    if window == 0 {
        return Err(Error::Argument("deflection window must be positive".into()));
    }
    let (c, h, w) = image.dim();
    let mut rng = seeded_rng(seed);
    let mut out = image.clone();
    let r = window as i64;
    for _ in 0..deflections {
        let y = rand::Rng::random_range(&mut rng, 0..h) as i64;
        let x = rand::Rng::random_range(&mut rng, 0..w) as i64;
        let sy = (y + rand::Rng::random_range(&mut rng, -r..=r)).clamp(0, h as i64 - 1) as usize;
        let sx = (x + rand::Rng::random_range(&mut rng, -r..=r)).clamp(0, w as i64 - 1) as usize;
        for ch in 0..c {
            out[[ch, y as usize, x as usize]] = image[[ch, sy, sx]];
        }
    }
    Ok(out)
}

/// Peak signal-to-noise ratio in dB between two images in [0,1].
pub fn psnr(a: &Image, b: &Image) -> f64 {
    let mse = (a - b).mapv(|v| v * v).mean().unwrap_or(0.0);
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub attack: AttackConfig,
    pub defense: Defense,
    /// Cap on how many pre-filtered images to attack; 0 means all.
    pub max_images: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub defense: String,
    pub num_input: usize,
    pub num_attacked: usize,
    /// Set when the clean-accuracy pre-filter leaves nothing to attack.
    pub empty: bool,
    pub clean_accuracy: f64,
    pub metrics: Option<Metrics>,
    pub outcomes: Vec<ImageOutcome>,
    pub report_hash: String,
}

/// Borrowing oracle over a victim model with per-attack budget.
struct VictimOracle<'a> {
    model: &'a ClassifierModel,
    defense: &'a Defense,
    counter: u64,
    budget: u64,
}

impl VictimOracle<'_> {
    fn precheck_predict(&self, image: &Image) -> Result<usize> {
        Ok(self.model.predict(&self.defense.apply(image)?))
    }
}

impl Oracle for VictimOracle<'_> {
    fn query(&mut self, image: &Image) -> Result<Array1<f64>> {
        if self.counter >= self.budget {
            return Err(Error::BudgetExhausted(self.counter));
        }
        self.counter += 1;
        Ok(self.model.logits(&self.defense.apply(image)?))
    }

    fn queries(&self) -> u64 {
        self.counter
    }

    fn budget(&self) -> u64 {
        self.budget
    }
}

/// Run the attack over a labeled set against one victim. Images the
/// defended victim already misclassifies are skipped without queries.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    data: &LabeledSet,
    victim: &ClassifierModel,
    generator: &Generator,
    codec: &Codec,
    schedule: &NoiseSchedule,
) -> Result<ExperimentReport> {
    cfg.attack.validate()?;
    cfg.defense.validate()?;
    if generator.codec_hash != codec.param_hash() {
        return Err(Error::Config(format!(
            "generator was trained against codec {} but got {}",
            generator.codec_hash,
            codec.param_hash()
        )));
    }
    if generator.t_steps != schedule.steps {
        return Err(Error::Config(
            "generator timestep count does not match the schedule".into(),
        ));
    }

    let mut keep: Vec<usize> = Vec::new();
    for (i, (img, &label)) in data.images.iter().zip(&data.labels).enumerate() {
        let probe = VictimOracle {
            model: victim,
            defense: &cfg.defense,
            counter: 0,
            budget: 1,
        };
        if probe.precheck_predict(img)? == label {
            keep.push(i);
        }
    }
    let clean_accuracy = if data.images.is_empty() {
        0.0
    } else {
        keep.len() as f64 / data.images.len() as f64
    };
    if cfg.max_images > 0 {
        keep.truncate(cfg.max_images);
    }

    let mut outcomes = Vec::with_capacity(keep.len());
    for &i in &keep {
        let mut oracle = VictimOracle {
            model: victim,
            defense: &cfg.defense,
            counter: 0,
            budget: cfg.attack.budget,
        };
        let attack_cfg = AttackConfig {
            seed: cfg.attack.seed.wrapping_add(i as u64),
            ..cfg.attack.clone()
        };
        let res = attack(
            &data.images[i],
            data.labels[i],
            &mut oracle,
            generator,
            codec,
            schedule,
            &attack_cfg,
        )?;
        debug_assert_eq!(res.queries, oracle.counter);
        outcomes.push(ImageOutcome {
            index: i,
            label: data.labels[i],
            status: res.status,
            queries: res.queries,
            final_margin: res.margin_trace.last().map(|p| p.margin),
        });
    }

    let metrics = if outcomes.is_empty() {
        None
    } else {
        Some(compute_metrics(&outcomes)?)
    };
    let mut report = ExperimentReport {
        name: cfg.name.clone(),
        defense: cfg.defense.tag(),
        num_input: data.images.len(),
        num_attacked: outcomes.len(),
        empty: outcomes.is_empty(),
        clean_accuracy,
        metrics,
        outcomes,
        report_hash: String::new(),
    };
    report.report_hash = hex_digest(&serde_json::to_vec(&report)?);
    Ok(report)
}

pub fn write_report_json(report: &ExperimentReport, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(report)?)?;
    Ok(())
}

pub fn write_report_csv(report: &ExperimentReport, path: &Path) -> Result<()> {
    let mut s = String::from("index,label,status,queries,final_margin\n");
    for o in &report.outcomes {
        s.push_str(&format!(
            "{},{},{:?},{},{}\n",
            o.index,
            o.label,
            o.status,
            o.queries,
            o.final_margin.map_or("".into(), |m| format!("{m}")),
        ));
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// ASR per defense configuration, one row each.
pub fn write_defense_table(rows: &[(String, Metrics)], path: &Path) -> Result<()> {
    let mut s = String::from("defense,total,successes,asr,avg_queries,median_queries\n");
    for (tag, m) in rows {
        s.push_str(&format!(
            "{},{},{},{:.4},{},{}\n",
            tag,
            m.total,
            m.successes,
            m.asr,
            m.avg_queries.map_or("undefined".into(), |v| format!("{v:.2}")),
            m.median_queries.map_or("undefined".into(), |v| v.to_string()),
        ));
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Cumulative success rate as a function of allowed query budget.
/// Returns (budget, asr) points; the curve is nondecreasing.
pub fn asr_vs_queries(outcomes: &[ImageOutcome], max_budget: u64) -> Result<Vec<(u64, f64)>> {
    if outcomes.is_empty() {
        return Err(Error::Argument("curve needs at least one outcome".into()));
    }
    let total = outcomes.len() as f64;
    let mut points = Vec::new();
    for b in 1..=max_budget {
        let ok = outcomes
            .iter()
            .filter(|o| o.status == AttackStatus::Success && o.queries <= b)
            .count();
        points.push((b, ok as f64 / total));
    }
    Ok(points)
}

/// Write the success curve as CSV plus a rendered PNG line plot.
pub fn plot_asr_vs_queries(
    outcomes: &[ImageOutcome],
    max_budget: u64,
    csv_path: &Path,
    png_path: &Path,
) -> Result<()> {
    let points = asr_vs_queries(outcomes, max_budget)?;
    let mut s = String::from("budget,asr\n");
    for (b, a) in &points {
        s.push_str(&format!("{b},{a:.6}\n"));
    }
    std::fs::write(csv_path, s)?;

    let (w, h) = (480u32, 320u32);
    let margin = 40u32;
    let mut img = image::RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));
    for x in margin..w - 10 {
        img.put_pixel(x, h - margin, image::Rgb([0, 0, 0]));
    }
    for y in 10..=h - margin {
        img.put_pixel(margin, y, image::Rgb([0, 0, 0]));
    }
    let plot_w = (w - margin - 10) as f64;
    let plot_h = (h - margin - 10) as f64;
    let to_px = |b: u64, a: f64| {
        let x = margin as f64 + (b as f64 / max_budget as f64) * plot_w;
        let y = (h - margin) as f64 - a * plot_h;
        (x as u32, y as u32)
    };
    let mut prev = to_px(points[0].0, points[0].1);
    for &(b, a) in &points[1..] {
        let next = to_px(b, a);
        let steps = prev.0.abs_diff(next.0).max(prev.1.abs_diff(next.1)).max(1);
        for k in 0..=steps {
            let f = k as f64 / steps as f64;
            let x = prev.0 as f64 + f * (next.0 as f64 - prev.0 as f64);
            let y = prev.1 as f64 + f * (next.1 as f64 - prev.1 as f64);
            img.put_pixel(x as u32, y as u32, image::Rgb([200, 30, 30]));
        }
        prev = next;
    }
    img.save(png_path)?;
    Ok(())
}
