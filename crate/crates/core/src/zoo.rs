//! Desk-scale classifier models, training, checkpoints, and the strict
//! query-counting black-box oracle.
//!
//! Four architectures are supported: a VGG-style 6-conv net
//! (`small-cnn`), a residual variant (`small-resnet`), a 4-block ViT
//! with patch size 4 (`small-vit`), and a windowed-attention
//! transformer without a class token (`small-swin`).

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array3};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nn::{
    collect_params, params_from_blob, params_to_blob, seeded_rng, Adam, Conv2d, Layer, LayerNorm,
    Linear, MultiHeadAttention,
};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Pixel image in CHW layout with values in [0, 1].
pub type Image = Array3<f64>;

/// Labeled image collection.
#[derive(Clone, Default)]
pub struct LabeledSet {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    SmallCnn,
    SmallResnet,
    SmallVit,
    SmallSwin,
}

impl Arch {
    pub fn tag(&self) -> &'static str {
        match self {
            Arch::SmallCnn => "small-cnn",
            Arch::SmallResnet => "small-resnet",
            Arch::SmallVit => "small-vit",
            Arch::SmallSwin => "small-swin",
        }
    }

    pub fn is_transformer(&self) -> bool {
        matches!(self, Arch::SmallVit | Arch::SmallSwin)
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Arch> {
        match s {
            "small-cnn" => Ok(Arch::SmallCnn),
            "small-resnet" => Ok(Arch::SmallResnet),
            "small-vit" => Ok(Arch::SmallVit),
            "small-swin" => Ok(Arch::SmallSwin),
            other => Err(Error::Config(format!("unknown architecture tag: {other}"))),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Architecture tag plus the hyperparameters needed to build a model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub resolution: usize,
    pub classes: usize,
    pub seed: u64,
}

/// Everything a single forward pass exposes.
pub struct ForwardTrace {
    pub logits: Tensor,
    /// Final activation of each convolutional stage (CNN families only).
    pub stage_activations: Vec<Tensor>,
    /// Head-averaged self-attention matrix per transformer block
    /// (token x token, CLS first for the ViT).
    pub attentions: Vec<Tensor>,
}

// ---------------------------------------------------------------------------
// Architectures
// ---------------------------------------------------------------------------

pub struct SmallCnn {
    convs: Vec<Conv2d>, // two per stage
    head: Linear,
    stages: usize,
}

impl SmallCnn {
    fn new(rng: &mut ChaCha8Rng, resolution: usize, classes: usize) -> SmallCnn {
        let widths = [16usize, 32, 64];
        let mut convs = Vec::new();
        let mut c_in = 3;
        for &w in &widths {
            convs.push(Conv2d::new(rng, c_in, w, 3, 1, 1));
            convs.push(Conv2d::new(rng, w, w, 3, 1, 1));
            c_in = w;
        }
        let final_res = resolution / 8;
        SmallCnn {
            convs,
            head: Linear::new(rng, 64 * final_res * final_res, classes),
            stages: widths.len(),
        }
    }

    fn forward(&self, x: &Tensor) -> ForwardTrace {
        let mut h = x.clone();
        let mut stage_activations = Vec::new();
        for s in 0..self.stages {
            h = self.convs[2 * s].forward(&h).relu();
            h = self.convs[2 * s + 1].forward(&h).relu();
            h = h.maxpool2();
            stage_activations.push(h.clone());
        }
        let flat_len = h.shape().iter().product::<usize>();
        let logits = self.head.forward_vec(&h.reshape(&[flat_len]));
        ForwardTrace {
            logits,
            stage_activations,
            attentions: Vec::new(),
        }
    }
}

impl Layer for SmallCnn {
    fn params(&self) -> Vec<Tensor> {
        let mut layers: Vec<&dyn Layer> = self.convs.iter().map(|c| c as &dyn Layer).collect();
        layers.push(&self.head);
        collect_params(&layers)
    }
}

struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> ResBlock {
        ResBlock {
            conv1: Conv2d::new(rng, c_in, c_out, 3, 1, 1),
            conv2: Conv2d::new(rng, c_out, c_out, 3, 1, 1),
            skip: (c_in != c_out).then(|| Conv2d::new(rng, c_in, c_out, 1, 1, 0)),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let h = self.conv2.forward(&self.conv1.forward(x).relu());
        let s = match &self.skip {
            Some(conv) => conv.forward(x),
            None => x.clone(),
        };
        h.add(&s).relu()
    }

    fn layer_params(&self) -> Vec<Tensor> {
        let mut p = self.conv1.params();
        p.extend(self.conv2.params());
        if let Some(s) = &self.skip {
            p.extend(s.params());
        }
        p
    }
}

pub struct SmallResnet {
    stem: Conv2d,
    blocks: Vec<ResBlock>,
    head: Linear,
}

impl SmallResnet {
    fn new(rng: &mut ChaCha8Rng, resolution: usize, classes: usize) -> SmallResnet {
        let stem = Conv2d::new(rng, 3, 16, 3, 1, 1);
        let blocks = vec![
            ResBlock::new(rng, 16, 16),
            ResBlock::new(rng, 16, 32),
            ResBlock::new(rng, 32, 64),
        ];
        let final_res = resolution / 8;
        SmallResnet {
            stem,
            blocks,
            head: Linear::new(rng, 64 * final_res * final_res, classes),
        }
    }

    fn forward(&self, x: &Tensor) -> ForwardTrace {
        let mut h = self.stem.forward(x).relu();
        let mut stage_activations = Vec::new();
        for block in &self.blocks {
            h = block.forward(&h).maxpool2();
            stage_activations.push(h.clone());
        }
        let flat_len = h.shape().iter().product::<usize>();
        let logits = self.head.forward_vec(&h.reshape(&[flat_len]));
        ForwardTrace {
            logits,
            stage_activations,
            attentions: Vec::new(),
        }
    }
}

impl Layer for SmallResnet {
    fn params(&self) -> Vec<Tensor> {
        let mut p = self.stem.params();
        for b in &self.blocks {
            p.extend(b.layer_params());
        }
        p.extend(self.head.params());
        p
    }
}

struct TransformerBlock {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    mlp1: Linear,
    mlp2: Linear,
}

impl TransformerBlock {
    fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize, hidden: usize) -> TransformerBlock {
        TransformerBlock {
            norm1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(rng, dim, heads),
            norm2: LayerNorm::new(dim),
            mlp1: Linear::new(rng, dim, hidden),
            mlp2: Linear::new(rng, hidden, dim),
        }
    }

    /// Returns mixed tokens and the head-averaged attention matrix.
    fn forward(&self, x: &Tensor) -> (Tensor, Tensor) {
        let (mixed, attn) = self.attn.forward(&self.norm1.forward(x));
        let x = x.add(&mixed);
        let mlp = self.mlp2.forward(&self.mlp1.forward(&self.norm2.forward(&x)).silu());
        (x.add(&mlp), attn)
    }

    fn layer_params(&self) -> Vec<Tensor> {
        let layers: [&dyn Layer; 5] = [&self.norm1, &self.attn, &self.norm2, &self.mlp1, &self.mlp2];
        collect_params(&layers)
    }
}

pub struct SmallVit {
    patch_embed: Conv2d,
    cls: Tensor,
    pos: Tensor,
    blocks: Vec<TransformerBlock>,
    final_norm: LayerNorm,
    head: Linear,
    pub patch: usize,
    pub dim: usize,
}

impl SmallVit {
    fn new(rng: &mut ChaCha8Rng, resolution: usize, classes: usize) -> SmallVit {
        let patch = 4;
        let dim = 64;
        let n_patches = (resolution / patch) * (resolution / patch);
        let patch_embed = Conv2d::new(rng, 3, dim, patch, patch, 0);
        let cls = Tensor::param(crate::nn::randn(rng, &[1, dim]).mapv(|v| v * 0.02));
        let pos = Tensor::param(crate::nn::randn(rng, &[n_patches + 1, dim]).mapv(|v| v * 0.02));
        let blocks = (0..4)
            .map(|_| TransformerBlock::new(rng, dim, 4, 2 * dim))
            .collect();
        SmallVit {
            patch_embed,
            cls,
            pos,
            blocks,
            final_norm: LayerNorm::new(dim),
            head: Linear::new(rng, dim, classes),
            patch,
            dim,
        }
    }

    fn forward(&self, x: &Tensor) -> ForwardTrace {
        let emb = self.patch_embed.forward(x); // (dim, g, g)
        let shape = emb.shape();
        let n = shape[1] * shape[2];
        let tokens = emb.reshape(&[self.dim, n]).t2(); // (n, dim)
        let mut h = Tensor::concat(&[self.cls.clone(), tokens], 0).add(&self.pos);
        let mut attentions = Vec::new();
        for block in &self.blocks {
            let (next, attn) = block.forward(&h);
            h = next;
            attentions.push(attn);
        }
        let cls_out = self.final_norm.forward(&h).narrow(0, 0, 1);
        let logits = self.head.forward(&cls_out).reshape(&[self.head.b.shape()[0]]);
        ForwardTrace {
            logits,
            stage_activations: Vec::new(),
            attentions,
        }
    }
}

impl Layer for SmallVit {
    fn params(&self) -> Vec<Tensor> {
        let mut p = self.patch_embed.params();
        p.push(self.cls.clone());
        p.push(self.pos.clone());
        for b in &self.blocks {
            p.extend(b.layer_params());
        }
        p.extend(self.final_norm.params());
        p.extend(self.head.params());
        p
    }
}

/// Windowed-attention transformer: tokens attend within 4x4 windows of
/// the patch grid; odd blocks shift the grid by 2 to mix windows. Mean
/// pooling replaces the class token.
pub struct SmallSwin {
    patch_embed: Conv2d,
    pos: Tensor,
    blocks: Vec<TransformerBlock>,
    final_norm: LayerNorm,
    head: Linear,
    grid: usize,
    dim: usize,
}

impl SmallSwin {
    fn new(rng: &mut ChaCha8Rng, resolution: usize, classes: usize) -> SmallSwin {
        let patch = 4;
        let dim = 64;
        let grid = resolution / patch;
        let patch_embed = Conv2d::new(rng, 3, dim, patch, patch, 0);
        let pos = Tensor::param(crate::nn::randn(rng, &[grid * grid, dim]).mapv(|v| v * 0.02));
        let blocks = (0..4)
            .map(|_| TransformerBlock::new(rng, dim, 4, 2 * dim))
            .collect();
        SmallSwin {
            patch_embed,
            pos,
            blocks,
            final_norm: LayerNorm::new(dim),
            head: Linear::new(rng, dim, classes),
            grid,
            dim,
        }
    }

    /// Permutation that groups tokens into contiguous window-major order,
    /// optionally after rolling the grid by `shift`.
    fn window_perm(&self, shift: usize) -> Vec<usize> {
        let g = self.grid;
        let w = 4.min(g);
        let mut perm = Vec::with_capacity(g * g);
        for wi in (0..g).step_by(w) {
            for wj in (0..g).step_by(w) {
                for di in 0..w {
                    for dj in 0..w {
                        let i = (wi + di + shift) % g;
                        let j = (wj + dj + shift) % g;
                        perm.push(i * g + j);
                    }
                }
            }
        }
        perm
    }

    fn forward(&self, x: &Tensor) -> ForwardTrace {
        let emb = self.patch_embed.forward(x);
        let n = self.grid * self.grid;
        let mut h = emb.reshape(&[self.dim, n]).t2().add(&self.pos);
        let w = 4.min(self.grid);
        let win = w * w;
        let mut attentions = Vec::new();
        for (bi, block) in self.blocks.iter().enumerate() {
            let shift = if bi % 2 == 1 { 2 } else { 0 };
            let perm = self.window_perm(shift);
            let mut inverse = vec![0usize; n];
            for (slot, &orig) in perm.iter().enumerate() {
                inverse[orig] = slot;
            }
            let grouped = h.gather_rows(&perm);
            let mut outs = Vec::new();
            let mut attns = Vec::new();
            for wstart in (0..n).step_by(win) {
                let window = grouped.narrow(0, wstart, win);
                let (out, attn) = block.forward(&window);
                outs.push(out);
                attns.push(attn);
            }
            h = Tensor::concat(&outs, 0).gather_rows(&inverse);
            // Block-diagonal window attention, kept per window.
            attentions.push(Tensor::concat(&attns, 0));
        }
        let pooled = self.final_norm.forward(&h).mean_axis(0);
        let logits = self.head.forward_vec(&pooled);
        ForwardTrace {
            logits,
            stage_activations: Vec::new(),
            attentions,
        }
    }
}

impl Layer for SmallSwin {
    fn params(&self) -> Vec<Tensor> {
        let mut p = self.patch_embed.params();
        p.push(self.pos.clone());
        for b in &self.blocks {
            p.extend(b.layer_params());
        }
        p.extend(self.final_norm.params());
        p.extend(self.head.params());
        p
    }
}

// ---------------------------------------------------------------------------
// ClassifierModel
// ---------------------------------------------------------------------------

enum Net {
    Cnn(SmallCnn),
    Resnet(SmallResnet),
    Vit(SmallVit),
    Swin(SmallSwin),
}

/// A classifier with deterministic logits for fixed input and parameters.
pub struct ClassifierModel {
    net: Net,
    pub spec: ModelSpec,
    pub accuracy: Option<f64>,
}

/// Build a randomly initialized model from its spec.
pub fn build_model(spec: &ModelSpec) -> Result<ClassifierModel> {
    if spec.resolution % 8 != 0 {
        return Err(Error::Config(format!(
            "resolution {} must be divisible by 8",
            spec.resolution
        )));
    }
    if spec.classes < 2 {
        return Err(Error::Config("at least two classes required".into()));
    }
    let mut rng = seeded_rng(spec.seed);
    let net = match spec.arch {
        Arch::SmallCnn => Net::Cnn(SmallCnn::new(&mut rng, spec.resolution, spec.classes)),
        Arch::SmallResnet => Net::Resnet(SmallResnet::new(&mut rng, spec.resolution, spec.classes)),
        Arch::SmallVit => Net::Vit(SmallVit::new(&mut rng, spec.resolution, spec.classes)),
        Arch::SmallSwin => Net::Swin(SmallSwin::new(&mut rng, spec.resolution, spec.classes)),
    };
    Ok(ClassifierModel {
        net,
        spec: spec.clone(),
        accuracy: None,
    })
}

impl ClassifierModel {
    /// Full forward pass with intermediate taps, input kept in the graph.
    pub fn forward_traced(&self, input: &Tensor) -> ForwardTrace {
        match &self.net {
            Net::Cnn(m) => m.forward(input),
            Net::Resnet(m) => m.forward(input),
            Net::Vit(m) => m.forward(input),
            Net::Swin(m) => m.forward(input),
        }
    }

    /// Plain inference: logits for an image.
    pub fn logits(&self, image: &Image) -> Array1<f64> {
        let input = Tensor::constant(image.clone().into_dyn());
        let trace = self.forward_traced(&input);
        let v = trace.logits.value();
        Array1::from_iter(v.iter().cloned())
    }

    pub fn predict(&self, image: &Image) -> usize {
        let logits = self.logits(image);
        argmax(&logits)
    }

    pub fn params(&self) -> Vec<Tensor> {
        match &self.net {
            Net::Cnn(m) => m.params(),
            Net::Resnet(m) => m.params(),
            Net::Vit(m) => m.params(),
            Net::Swin(m) => m.params(),
        }
    }

    /// Number of convolutional stages (CNN families) or transformer
    /// blocks (ViT families) exposed for attention extraction.
    pub fn num_attention_layers(&self) -> usize {
        match &self.net {
            Net::Cnn(_) | Net::Resnet(_) => 3,
            Net::Vit(_) | Net::Swin(_) => 4,
        }
    }

    pub fn has_class_token(&self) -> bool {
        matches!(self.net, Net::Vit(_))
    }

    /// SHA-256 of the parameter blob, hex encoded.
    pub fn param_hash(&self) -> String {
        hex_digest(&params_to_blob(&self.params()))
    }
}

pub fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Train with cross-entropy on an 80/20 train/validation split.
///
/// Returns held-out accuracy. `epochs == 0` leaves the model untouched
/// and reports accuracy of the initialized network.
pub fn train_classifier(
    model: &mut ClassifierModel,
    data: &LabeledSet,
    epochs: usize,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Argument("empty training set".into()));
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= model.spec.classes) {
        return Err(Error::Argument(format!(
            "label {bad} outside class count {}",
            model.spec.classes
        )));
    }
    let n_val = (data.len() / 5).max(1).min(data.len().saturating_sub(1));
    let n_train = data.len() - n_val;
    let mut rng = seeded_rng(seed ^ 0x7261_696e);
    let mut opt = Adam::new(model.params(), 1e-3);
    let batch = 16usize;
    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            opt.zero_grad();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let input = Tensor::constant(data.images[i].clone().into_dyn());
                let trace = model.forward_traced(&input);
                let loss = trace
                    .logits
                    .log_softmax()
                    .pick(data.labels[i])
                    .neg()
                    .mul_s(1.0 / chunk.len() as f64);
                batch_loss += loss.scalar_value();
                loss.backward();
            }
            if !batch_loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}"
                )));
            }
            opt.step();
        }
    }
    let mut correct = 0usize;
    for i in n_train..data.len() {
        if model.predict(&data.images[i]) == data.labels[i] {
            correct += 1;
        }
    }
    let accuracy = correct as f64 / n_val as f64;
    model.accuracy = Some(accuracy);
    Ok(accuracy)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    arch: Arch,
    resolution: usize,
    classes: usize,
    seed: u64,
    accuracy: Option<f64>,
    blob_len: usize,
}

/// Save a model as a one-line JSON header followed by the raw f64 blob.
pub fn save_checkpoint(model: &ClassifierModel, path: &Path) -> Result<()> {
    let blob = params_to_blob(&model.params());
    let header = CheckpointHeader {
        arch: model.spec.arch,
        resolution: model.spec.resolution,
        classes: model.spec.classes,
        seed: model.spec.seed,
        accuracy: model.accuracy,
        blob_len: blob.len(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    bytes.extend_from_slice(&blob);
    fs::write(path, bytes)?;
    Ok(())
}

/// Split a header+blob checkpoint file.
pub(crate) fn read_header_blob(path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Config(format!("malformed checkpoint {}", path.display())))?;
    Ok((bytes[..newline].to_vec(), bytes[newline + 1..].to_vec()))
}

pub fn load_checkpoint(path: &Path) -> Result<ClassifierModel> {
    let (header_bytes, blob) = read_header_blob(path)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
    let spec = ModelSpec {
        arch: header.arch,
        resolution: header.resolution,
        classes: header.classes,
        seed: header.seed,
    };
    let mut model = build_model(&spec)?;
    params_from_blob(&model.params(), &blob)?;
    model.accuracy = header.accuracy;
    Ok(model)
}

/// SHA-256 of a checkpoint's parameter blob.
pub fn checkpoint_hash(path: &Path) -> Result<String> {
    let (_, blob) = read_header_blob(path)?;
    Ok(hex_digest(&blob))
}

// ---------------------------------------------------------------------------
// Query oracle
// ---------------------------------------------------------------------------

/// Black-box access: logits in, one counted query per request, nothing
/// else reachable.
pub trait Oracle {
    fn query(&mut self, image: &Image) -> Result<Array1<f64>>;
    fn queries(&self) -> u64;
    fn budget(&self) -> u64;
}

type InputTransform = Box<dyn Fn(&Image) -> Image>;

/// The standard oracle: wraps a victim model, counts queries, refuses
/// requests beyond the budget, and optionally applies an input
/// transformation defense before classification.
pub struct QueryOracle {
    model: ClassifierModel,
    counter: u64,
    budget: u64,
    transform: Option<InputTransform>,
}

impl QueryOracle {
    pub fn new(model: ClassifierModel, budget: u64) -> QueryOracle {
        assert!(budget >= 1, "budget must be positive");
        QueryOracle {
            model,
            counter: 0,
            budget,
            transform: None,
        }
    }

    pub fn with_transform(mut self, transform: InputTransform) -> QueryOracle {
        self.transform = Some(transform);
        self
    }

    /// Uncounted prediction used by the harness for the clean-accuracy
    /// pre-check. Not part of the [`Oracle`] surface the attack sees.
    pub fn precheck_predict(&self, image: &Image) -> usize {
        let image = match &self.transform {
            Some(t) => t(image),
            None => image.clone(),
        };
        self.model.predict(&image)
    }
}

impl Oracle for QueryOracle {
    fn query(&mut self, image: &Image) -> Result<Array1<f64>> {
        if self.counter >= self.budget {
            return Err(Error::BudgetExhausted(self.counter));
        }
        self.counter += 1;
        let image = match &self.transform {
            Some(t) => t(image),
            None => image.clone(),
        };
        Ok(self.model.logits(&image))
    }

    fn queries(&self) -> u64 {
        self.counter
    }

    fn budget(&self) -> u64 {
        self.budget
    }
}
