//! Synthetic classification data.
//!
//! Each class is a colored Gaussian blob at a class-specific position on
//! a ring, over a gray background with additive noise. The blob is the
//! only discriminative region, so saliency maps have an unambiguous
//! ground truth and moderate perturbations inside the blob flip labels.

use ndarray::Array3;
use rand::Rng;

use crate::nn::seeded_rng;
use crate::zoo::{Image, LabeledSet};

/// Knobs controlling class separation and difficulty.
#[derive(Debug, Clone)]
pub struct ToyConfig {
    pub classes: usize,
    pub resolution: usize,
    /// Blob peak height above the background.
    pub amplitude: f64,
    /// Per-pixel uniform noise half-width.
    pub noise: f64,
    /// Blob standard deviation as a fraction of the resolution.
    pub sigma_frac: f64,
    /// Place the blob at a random position per sample instead of the
    /// class-specific ring position. The class is then color-only and
    /// saliency must track the blob wherever it lands.
    pub random_position: bool,
    /// Add a second blob with a different class's color. The true blob
    /// carries a small white marker at its center, so the label cannot be
    /// recovered by pooling colors globally: the model has to find the
    /// marked blob and ignore the other one. Implies random positions.
    pub distractor: bool,
}

impl Default for ToyConfig {
    fn default() -> ToyConfig {
        ToyConfig {
            classes: 10,
            resolution: 32,
            amplitude: 0.5,
            noise: 0.08,
            sigma_frac: 0.15,
            random_position: false,
            distractor: false,
        }
    }
}

/// Class-specific RGB direction, spread around the color wheel.
fn class_color(class: usize, classes: usize) -> [f64; 3] {
    let hue = class as f64 / classes as f64 * std::f64::consts::TAU;
    [
        0.5 + 0.5 * hue.cos(),
        0.5 + 0.5 * (hue + 2.0).cos(),
        0.5 + 0.5 * (hue + 4.0).cos(),
    ]
}

fn class_center(class: usize, classes: usize, resolution: usize) -> (f64, f64) {
    let angle = class as f64 / classes as f64 * std::f64::consts::TAU;
    let r = 0.28 * resolution as f64;
    let mid = (resolution as f64 - 1.0) / 2.0;
    (mid + r * angle.sin(), mid + r * angle.cos())
}

/// One blob to paint: position, RGB direction, peak height, sigma in pixels.
struct Blob {
    center: (f64, f64),
    color: [f64; 3],
    amplitude: f64,
    sigma: f64,
}

fn render(blobs: &[Blob], resolution: usize) -> Image {
    let mut img = Array3::from_elem((3, resolution, resolution), 0.35);
    for b in blobs {
        let (cy, cx) = b.center;
        for c in 0..3 {
            for i in 0..resolution {
                for j in 0..resolution {
                    let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                    let bump = b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
                    img[[c, i, j]] += bump * b.color[c];
                }
            }
        }
    }
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    img
}

fn class_blob(class: usize, cfg: &ToyConfig, center: (f64, f64)) -> Blob {
    Blob {
        center,
        color: class_color(class, cfg.classes),
        amplitude: cfg.amplitude,
        sigma: cfg.sigma_frac * cfg.resolution as f64,
    }
}

/// Noise-free class template at the class ring position, single blob.
pub fn template(class: usize, cfg: &ToyConfig) -> Image {
    let center = class_center(class, cfg.classes, cfg.resolution);
    render(&[class_blob(class, cfg, center)], cfg.resolution)
}

/// Deterministic sample plus uniform pixel noise. With `random_position`
/// the blob center is drawn from the sample's rng; with `distractor` a
/// second blob in another class's color is added and the true blob gets a
/// white center marker.
pub fn sample(class: usize, cfg: &ToyConfig, seed: u64) -> Image {
    let mut rng = seeded_rng(seed);
    let res = cfg.resolution as f64;
    let rand_center = |rng: &mut rand_chacha::ChaCha8Rng| {
        (
            rng.random_range(0.2 * res..0.8 * res),
            rng.random_range(0.2 * res..0.8 * res),
        )
    };
    let center = if cfg.random_position || cfg.distractor {
        rand_center(&mut rng)
    } else {
        class_center(class, cfg.classes, cfg.resolution)
    };
    let mut blobs = vec![class_blob(class, cfg, center)];
    if cfg.distractor {
        // A far-enough second center so the blobs do not merge.
        let min_sep = 0.35 * res;
        let other_center = loop {
            let c = rand_center(&mut rng);
            let d2 = (c.0 - center.0).powi(2) + (c.1 - center.1).powi(2);
            if d2 >= min_sep * min_sep {
                break c;
            }
        };
        let shift = 1 + rng.random_range(0..cfg.classes.saturating_sub(1).max(1));
        let other_class = (class + shift) % cfg.classes;
        blobs.push(class_blob(other_class, cfg, other_center));
        // White marker on the true blob, small and bright.
        blobs.push(Blob {
            center,
            color: [1.0, 1.0, 1.0],
            amplitude: cfg.amplitude,
            sigma: 0.35 * cfg.sigma_frac * res,
        });
    }
    let mut img = render(&blobs, cfg.resolution);
    for v in img.iter_mut() {
        *v = (*v + rng.random_range(-cfg.noise..cfg.noise)).clamp(0.0, 1.0);
    }
    img
}

/// Balanced labeled set: `per_class` samples of every class. Classes are
/// interleaved so any contiguous split stays balanced.
pub fn make_dataset(cfg: &ToyConfig, per_class: usize, seed: u64) -> LabeledSet {
    let mut images = Vec::with_capacity(cfg.classes * per_class);
    let mut labels = Vec::with_capacity(cfg.classes * per_class);
    for k in 0..per_class {
        for class in 0..cfg.classes {
            images.push(sample(
                class,
                cfg,
                seed ^ (class as u64) << 32 ^ k as u64,
            ));
            labels.push(class);
        }
    }
    LabeledSet { images, labels }
}
