//! Black-box latent-space attack: per-step candidate sampling through
//! the generator, margin-based selection via victim queries, a
//! coordinate-wise greedy latent refinement, and strict query
//! accounting.

use ndarray::{Array1, ArrayD};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{forward_diffuse, Codec, LatentCode, NoiseSchedule};
use crate::generator::Generator;
use crate::nn::{randn, seeded_rng};
use crate::zoo::{Image, Oracle};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    pub eps_pixel: f64,
    pub eps_latent: f64,
    pub budget: u64,
    pub num_candidates: usize,
    pub targeted: bool,
    pub target: Option<usize>,
    /// Candidate jitter scale as a fraction of `eps_latent`.
    pub jitter_frac: f64,
    /// Greedy step size as a fraction of `eps_latent`.
    pub greedy_step_frac: f64,
    pub greedy_passes: usize,
    /// Momentum accumulator (decay 0.9) on accepted greedy moves.
    pub greedy_momentum: bool,
    /// Run the greedy refinement after every sweep step instead of only
    /// once at the end. Spends queries on refinement early, which pays
    /// off when the victim falls to small coordinate moves.
    pub greedy_interleave: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> AttackConfig {
        AttackConfig {
            eps_pixel: 16.0 / 255.0,
            eps_latent: 1.0,
            budget: 1000,
            num_candidates: 5,
            targeted: false,
            target: None,
            jitter_frac: 0.05,
            greedy_step_frac: 0.25,
            greedy_passes: 2,
            greedy_momentum: false,
            greedy_interleave: false,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget < 1 || self.num_candidates < 1 || self.eps_pixel <= 0.0 {
            return Err(Error::Config(
                "budget and candidates must be >= 1, eps_pixel > 0".into(),
            ));
        }
        if self.targeted && self.target.is_none() {
            return Err(Error::Config("targeted attack needs a target class".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackStatus {
    Success,
    Failure,
    BudgetExhausted,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MarginPoint {
    pub query: u64,
    pub margin: f64,
}

pub struct AttackResult {
    pub status: AttackStatus,
    pub adversarial: Image,
    pub queries: u64,
    pub margin_trace: Vec<MarginPoint>,
}

/// Untargeted: best non-true logit minus the true logit (positive means
/// misclassified). Targeted: target logit minus best other logit.
pub fn margin_loss(
    logits: &Array1<f64>,
    y: usize,
    targeted: bool,
    target: Option<usize>,
) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::Argument("margin needs at least two classes".into()));
    }
    let anchor = if targeted {
        target.ok_or_else(|| Error::Argument("targeted margin needs a target".into()))?
    } else {
        y
    };
    if anchor >= logits.len() || y >= logits.len() {
        return Err(Error::Argument("class index out of range".into()));
    }
    let best_other = logits
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != anchor)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(if targeted {
        logits[anchor] - best_other
    } else {
        best_other - logits[anchor]
    })
}

/// Cellwise clamp of `v` into the L-infinity ball around `center`.
pub fn project_linf(v: &ArrayD<f64>, center: &ArrayD<f64>, eps: f64) -> ArrayD<f64> {
    let mut out = v.clone();
    for (o, &c) in out.iter_mut().zip(center.iter()) {
        *o = o.clamp(c - eps, c + eps);
    }
    out
}

/// Pixel-space budget enforcement applied to every decoded candidate
/// before it reaches the oracle.
pub fn pixel_project(x_cand: &Image, x_clean: &Image, eps_pixel: f64) -> Image {
    let mut out = x_cand.clone();
    for (o, &c) in out.iter_mut().zip(x_clean.iter()) {
        *o = o.clamp(c - eps_pixel, c + eps_pixel).clamp(0.0, 1.0);
    }
    out
}

/// One reverse step broken into its two halves. The decoder only sees
/// clean latents during autoencoder training, so the image shown to the
/// oracle comes from the clean-latent estimate, not the still-noisy
/// next-step latent.
pub struct Candidate {
    /// Clean-latent estimate recovered from the noise prediction and
    /// projected into the latent budget; its decode is what gets queried.
    pub estimate: LatentCode,
    /// Next sweep latent: the projected estimate re-noised at t-1.
    pub next: LatentCode,
}

/// One reverse step per candidate: candidate 0 uses `z_t` as-is, the
/// rest jitter it with fresh Gaussian draws before noise prediction.
/// The latent budget is enforced on the clean estimate; the noise
/// scaffolding of the trajectory is rebuilt around the projected
/// estimate rather than clipped away.
pub fn sample_candidates(
    generator: &Generator,
    z_t: &LatentCode,
    z_clean: &LatentCode,
    t: usize,
    k: usize,
    schedule: &NoiseSchedule,
    sigma: f64,
    eps_latent: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Candidate>> {
    if k < 1 {
        return Err(Error::Argument("need at least one candidate".into()));
    }
    let shape: Vec<usize> = z_t.shape().to_vec();
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let input = if i == 0 {
            z_t.clone()
        } else {
            let noise = randn(rng, &shape)
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap();
            z_t + &(noise * sigma)
        };
        let eps_hat = generator.predict_noise(&input, t)?.into_dyn();
        let ab_t = schedule.at(t);
        let z0 = (&input.into_dyn() - &(&eps_hat * (1.0 - ab_t).sqrt())) / ab_t.sqrt();
        let estimate = project_linf(&z0, &z_clean.clone().into_dyn(), eps_latent);
        let next = forward_diffuse(&estimate, t - 1, &eps_hat, schedule)?;
        out.push(Candidate {
            estimate: estimate.into_dimensionality::<ndarray::Ix3>().unwrap(),
            next: next.into_dimensionality::<ndarray::Ix3>().unwrap(),
        });
    }
    Ok(out)
}

struct EvalState<'a> {
    oracle: &'a mut dyn Oracle,
    start: u64,
    trace: Vec<MarginPoint>,
    best_running: f64,
}

impl<'a> EvalState<'a> {
    fn new(oracle: &'a mut dyn Oracle) -> EvalState<'a> {
        let start = oracle.queries();
        EvalState {
            oracle,
            start,
            trace: Vec::new(),
            best_running: f64::NEG_INFINITY,
        }
    }

    fn queries(&self) -> u64 {
        self.oracle.queries() - self.start
    }

    /// Query one image; Ok(None) signals budget exhaustion.
    fn eval(&mut self, image: &Image, cfg: &AttackConfig, y: usize) -> Result<Option<f64>> {
        let logits = match self.oracle.query(image) {
            Ok(l) => l,
            Err(Error::BudgetExhausted(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        let margin = margin_loss(&logits, y, cfg.targeted, cfg.target)?;
        self.trace.push(MarginPoint {
            query: self.queries(),
            margin,
        });
        self.best_running = self.best_running.max(margin);
        Ok(Some(margin))
    }
}

struct Selection {
    latent: LatentCode,
    next: LatentCode,
    image: Image,
    margin: f64,
    success: bool,
    exhausted: bool,
}

/// Decode each candidate's clean estimate, project, and query in order;
/// short-circuit on the first success; ties keep the lowest index.
fn select_best(
    candidates: &[Candidate],
    x_clean: &Image,
    y: usize,
    codec: &Codec,
    state: &mut EvalState,
    cfg: &AttackConfig,
) -> Result<Selection> {
    let mut best: Option<Selection> = None;
    for cand in candidates {
        let image = pixel_project(&codec.decode(&cand.estimate), x_clean, cfg.eps_pixel);
        let margin = match state.eval(&image, cfg, y)? {
            Some(m) => m,
            None => {
                let mut sel = best.unwrap_or_else(|| Selection {
                    latent: candidates[0].estimate.clone(),
                    next: candidates[0].next.clone(),
                    image: pixel_project(
                        &codec.decode(&candidates[0].estimate),
                        x_clean,
                        cfg.eps_pixel,
                    ),
                    margin: f64::NEG_INFINITY,
                    success: false,
                    exhausted: true,
                });
                sel.exhausted = true;
                return Ok(sel);
            }
        };
        let success = margin > 0.0;
        let better = best.as_ref().is_none_or(|b| margin > b.margin);
        if better || success {
            best = Some(Selection {
                latent: cand.estimate.clone(),
                next: cand.next.clone(),
                image,
                margin,
                success,
                exhausted: false,
            });
        }
        if success {
            return Ok(best.unwrap());
        }
    }
    Ok(best.expect("at least one candidate"))
}

/// Channel-wise +-step probing of the latent around the clean code,
/// keeping only strictly margin-improving moves.
fn coordinate_greedy(
    start_latent: &LatentCode,
    start_image: Image,
    start_margin: f64,
    z_clean: &LatentCode,
    x_clean: &Image,
    y: usize,
    codec: &Codec,
    state: &mut EvalState,
    cfg: &AttackConfig,
) -> Result<Selection> {
    let mut cur = Selection {
        latent: start_latent.clone(),
        next: start_latent.clone(),
        image: start_image,
        margin: start_margin,
        success: start_margin > 0.0,
        exhausted: false,
    };
    if cur.success {
        return Ok(cur);
    }
    let step = cfg.greedy_step_frac * cfg.eps_latent;
    let channels = cur.latent.dim().0;
    let mut velocity = vec![0.0f64; channels];
    for _ in 0..cfg.greedy_passes {
        for ch in 0..channels {
            // After an accepted move the opposite probe lands back on the
            // known-worse previous point, so it is skipped.
            for dir in [1.0f64, -1.0] {
                let mut delta = dir * step;
                if cfg.greedy_momentum {
                    delta += 0.9 * velocity[ch];
                }
                let mut cand = cur.latent.clone();
                for v in cand.index_axis_mut(ndarray::Axis(0), ch).iter_mut() {
                    *v += delta;
                }
                let cand = project_linf(&cand.into_dyn(), &z_clean.clone().into_dyn(), cfg.eps_latent)
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap();
                let image = pixel_project(&codec.decode(&cand), x_clean, cfg.eps_pixel);
                match state.eval(&image, cfg, y)? {
                    Some(margin) => {
                        if margin > cur.margin {
                            cur = Selection {
                                latent: cand.clone(),
                                next: cand,
                                image,
                                margin,
                                success: margin > 0.0,
                                exhausted: false,
                            };
                            if cfg.greedy_momentum {
                                velocity[ch] = delta;
                            }
                            if cur.success {
                                return Ok(cur);
                            }
                            break;
                        }
                    }
                    None => {
                        cur.exhausted = true;
                        return Ok(cur);
                    }
                }
            }
        }
    }
    Ok(cur)
}

/// Full inference attack: noised-latent initialization, reverse sweep
/// with candidate selection, then greedy refinement. Terminates on the
/// first success; never queries past the budget.
pub fn attack(
    x: &Image,
    y: usize,
    oracle: &mut dyn Oracle,
    generator: &Generator,
    codec: &Codec,
    schedule: &NoiseSchedule,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed);
    let z_clean = codec.encode(x);
    let shape: Vec<usize> = z_clean.shape().to_vec();
    let init_noise = randn(&mut rng, &shape);
    let mut current = forward_diffuse(
        &z_clean.clone().into_dyn(),
        schedule.steps,
        &init_noise,
        schedule,
    )?
    .into_dimensionality::<ndarray::Ix3>()
    .unwrap();

    let mut state = EvalState::new(oracle);
    let sigma = cfg.jitter_frac * cfg.eps_latent;
    let mut best = Selection {
        latent: z_clean.clone(),
        next: current.clone(),
        image: pixel_project(&codec.decode(&z_clean), x, cfg.eps_pixel),
        margin: f64::NEG_INFINITY,
        success: false,
        exhausted: false,
    };

    for t in (2..=schedule.steps).rev() {
        // Interleaved mode alternates refinement with the sweep starting
        // on the refinement side, so the query-efficient coordinate moves
        // are spent before any generator proposals.
        if cfg.greedy_interleave {
            let refined = coordinate_greedy(
                &best.latent.clone(),
                best.image.clone(),
                best.margin,
                &z_clean,
                x,
                y,
                codec,
                &mut state,
                cfg,
            )?;
            if refined.success {
                return Ok(finish(AttackStatus::Success, refined, state));
            }
            if refined.exhausted {
                return Ok(finish(AttackStatus::BudgetExhausted, best, state));
            }
            if refined.margin >= best.margin {
                best = refined;
            }
        }
        let candidates = sample_candidates(
            generator,
            &current,
            &z_clean,
            t,
            cfg.num_candidates,
            schedule,
            sigma,
            cfg.eps_latent,
            &mut rng,
        )?;
        let sel = select_best(&candidates, x, y, codec, &mut state, cfg)?;
        let exhausted = sel.exhausted;
        if sel.margin >= best.margin {
            best = Selection {
                latent: sel.latent.clone(),
                next: sel.next.clone(),
                image: sel.image.clone(),
                margin: sel.margin,
                success: sel.success,
                exhausted,
            };
        }
        if sel.success {
            return Ok(finish(AttackStatus::Success, sel, state));
        }
        if exhausted {
            return Ok(finish(AttackStatus::BudgetExhausted, best, state));
        }
        current = sel.next;
    }

    let refined = coordinate_greedy(
        &best.latent.clone(),
        best.image.clone(),
        best.margin,
        &z_clean,
        x,
        y,
        codec,
        &mut state,
        cfg,
    )?;
    let status = if refined.success {
        AttackStatus::Success
    } else if refined.exhausted {
        AttackStatus::BudgetExhausted
    } else {
        AttackStatus::Failure
    };
    Ok(finish(status, refined, state))
}

fn finish(status: AttackStatus, sel: Selection, state: EvalState) -> AttackResult {
    AttackResult {
        status,
        adversarial: sel.image,
        queries: state.queries(),
        margin_trace: state.trace,
    }
}
