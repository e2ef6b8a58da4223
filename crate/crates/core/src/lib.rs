//! Joint attention distillation into a latent diffusion generator, plus a
//! query-efficient black-box attack engine and evaluation harness.
//!
//! The crate is organized around the attack pipeline:
//!
//! 1. [`attention`] — Grad-CAM / ViT CLS attention extraction and the
//!    two-step joint fusion that produces the teacher map.
//! 2. [`zoo`] — desk-scale classifier models, training, checkpoints, and
//!    the strict query-counting black-box oracle.
//! 3. [`dataprep`] — white-box PGD / MI-FGSM pair generation and the
//!    paired dataset with per-image joint attention maps.
//! 4. [`codec`] — latent autoencoder plus the diffusion noise schedule,
//!    forward diffusion, and the deterministic reverse step.
//! 5. [`generator`] — the U-Net noise predictor with attention taps.
//! 6. [`distill`] — the four loss terms, mask-ratio scheduling, and the
//!    distillation training loop.
//! 7. [`attack`] — candidate sampling, margin-based selection, the
//!    coordinate-wise greedy refinement, and query accounting.
//! 8. [`harness`] — experiment orchestration, metrics, input-transform
//!    defenses, and report/plot emission.

pub mod attack;
pub mod attention;
pub mod codec;
pub mod dataprep;
pub mod distill;
mod error;
pub mod generator;
pub mod harness;
pub mod nn;
pub mod tensor;
pub mod toydata;
pub mod zoo;

pub use error::{Error, Result};
