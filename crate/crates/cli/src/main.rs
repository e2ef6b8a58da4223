//! `jad`: command-line front end for the attack pipeline. Stages write
//! checkpoints and datasets to disk so each step can run independently.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use jad_core::attack::AttackConfig;
use jad_core::codec::{load_codec, make_schedule, save_codec, train_autoencoder};
use jad_core::dataprep::{build_dataset, load_dataset, load_png, save_png, AttackKind, PrepConfig};
use jad_core::distill::{self, DistillConfig, LossWeights, MaskMode};
use jad_core::generator::{load_generator, save_generator, Generator};
use jad_core::harness::{
    plot_asr_vs_queries, run_experiment, write_defense_table, write_report_csv,
    write_report_json, Defense, ExperimentConfig, ExperimentReport,
};
use jad_core::toydata::{make_dataset, ToyConfig};
use jad_core::zoo::{
    build_model, load_checkpoint, save_checkpoint, train_classifier, Arch, LabeledSet, ModelSpec,
};

#[derive(Parser)]
#[command(name = "jad", about = "Latent-space black-box attack pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled image set.
    ToyData(ToyDataArgs),
    /// Surrogate model zoo operations.
    Zoo {
        #[command(subcommand)]
        command: ZooCommand,
    },
    /// Build the clean/adversarial training pairs with teacher attention.
    PrepareData(PrepareArgs),
    /// Train the latent autoencoder.
    TrainCodec(TrainCodecArgs),
    /// Distill the attention-guided noise predictor.
    TrainGenerator(TrainGeneratorArgs),
    /// Black-box attack operations.
    Attack {
        #[command(subcommand)]
        command: AttackCommand,
    },
    /// Run a full experiment and emit its report.
    Evaluate(EvaluateArgs),
    /// Re-derive CSV, curve, and defense table from saved reports.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum ZooCommand {
    Train(ZooTrainArgs),
}

#[derive(Subcommand)]
enum AttackCommand {
    Run(AttackRunArgs),
}

/// Resolve a checkpoint path against JAD_CACHE when the bare name does
/// not exist locally.
fn resolve(path: &Path) -> PathBuf {
    if path.exists() {
        return path.to_path_buf();
    }
    if let Ok(cache) = std::env::var("JAD_CACHE") {
        let cached = Path::new(&cache).join(path);
        if cached.exists() {
            return cached;
        }
    }
    path.to_path_buf()
}

/// Output location for a checkpoint: relative bare names go into
/// JAD_CACHE when it is set.
fn resolve_out(path: &Path) -> Result<PathBuf> {
    let target = if path.is_relative() && path.parent() == Some(Path::new("")) {
        match std::env::var("JAD_CACHE") {
            Ok(cache) => {
                std::fs::create_dir_all(&cache)?;
                Path::new(&cache).join(path)
            }
            Err(_) => path.to_path_buf(),
        }
    } else {
        path.to_path_buf()
    };
    if let Some(parent) = target.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(target)
}

// ---------------------------------------------------------------------------
// Labeled image directories: images/NNNN.png + labels.json
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LabelsFile {
    resolution: usize,
    classes: usize,
    labels: Vec<usize>,
}

fn save_labeled_set(set: &LabeledSet, classes: usize, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    for (i, img) in set.images.iter().enumerate() {
        save_png(img, &dir.join(format!("images/{i:04}.png")))?;
    }
    let resolution = set.images.first().map_or(0, |im| im.dim().1);
    let meta = LabelsFile {
        resolution,
        classes,
        labels: set.labels.clone(),
    };
    std::fs::write(dir.join("labels.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

fn load_labeled_set(dir: &Path) -> Result<(LabeledSet, usize)> {
    let raw = std::fs::read_to_string(dir.join("labels.json"))
        .with_context(|| format!("no labels.json in {}", dir.display()))?;
    let meta: LabelsFile = serde_json::from_str(&raw)?;
    let mut images = Vec::with_capacity(meta.labels.len());
    for i in 0..meta.labels.len() {
        images.push(load_png(&dir.join(format!("images/{i:04}.png")))?);
    }
    Ok((
        LabeledSet {
            images,
            labels: meta.labels,
        },
        meta.classes,
    ))
}

// ---------------------------------------------------------------------------
// Subcommand arguments
// ---------------------------------------------------------------------------

#[derive(Args)]
struct ToyDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ZooTrainArgs {
    #[arg(long)]
    arch: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    cnn: PathBuf,
    #[arg(long)]
    vit: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated list: pgd, mifgsm.
    #[arg(long, default_value = "mifgsm")]
    attacks: String,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// Use only the deepest attention layer per teacher.
    #[arg(long, default_value_t = false)]
    single_layer: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainCodecArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 4)]
    channels: usize,
    #[arg(long, default_value_t = 4)]
    factor: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainGeneratorArgs {
    /// JSON file: {epochs, batch, t_steps, lambda_attn, lambda_pert,
    /// lambda_reg, mask_mode, seed, dataset, codec, out}.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Deserialize)]
struct GeneratorTrainFile {
    epochs: usize,
    #[serde(default = "default_batch")]
    batch: usize,
    #[serde(default = "default_t")]
    t_steps: usize,
    #[serde(default = "default_attn")]
    lambda_attn: f64,
    #[serde(default = "default_one")]
    lambda_pert: f64,
    #[serde(default = "default_one")]
    lambda_reg: f64,
    /// "dynamic" or "fixed:<ratio>".
    #[serde(default = "default_mask")]
    mask_mode: String,
    #[serde(default)]
    seed: u64,
    dataset: PathBuf,
    codec: PathBuf,
    out: PathBuf,
}

fn default_batch() -> usize {
    8
}
fn default_t() -> usize {
    50
}
fn default_attn() -> f64 {
    5.0
}
fn default_one() -> f64 {
    1.0
}
fn default_mask() -> String {
    "dynamic".into()
}

fn parse_mask_mode(s: &str) -> Result<MaskMode> {
    if s == "dynamic" {
        return Ok(MaskMode::Dynamic);
    }
    if let Some(r) = s.strip_prefix("fixed:") {
        return Ok(MaskMode::Fixed(r.parse()?));
    }
    bail!("mask_mode must be \"dynamic\" or \"fixed:<ratio>\"");
}

#[derive(Args)]
struct AttackRunArgs {
    /// JSON attack configuration; omitted fields use defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    victim: PathBuf,
    #[arg(long)]
    generator: PathBuf,
    #[arg(long)]
    codec: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    victim: PathBuf,
    #[arg(long)]
    generator: PathBuf,
    #[arg(long)]
    codec: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// none | jpeg:<q> | bdr:<bits> | pd:<count>,<window>
    #[arg(long, default_value = "none")]
    defense: String,
    #[arg(long, default_value_t = 0)]
    max_images: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Saved experiment report JSON files.
    #[arg(long, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_defense(s: &str) -> Result<Defense> {
    if s == "none" {
        return Ok(Defense::None);
    }
    if let Some(q) = s.strip_prefix("jpeg:") {
        return Ok(Defense::Jpeg(q.parse()?));
    }
    if let Some(b) = s.strip_prefix("bdr:") {
        return Ok(Defense::BitDepth(b.parse()?));
    }
    if let Some(rest) = s.strip_prefix("pd:") {
        let (count, window) = rest
            .split_once(',')
            .context("pd defense needs <count>,<window>")?;
        return Ok(Defense::PixelDeflection {
            deflections: count.parse()?,
            window: window.parse()?,
            seed: 0,
        });
    }
    bail!("unknown defense: {s}");
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::ToyData(a) => toy_data(a),
        Command::Zoo {
            command: ZooCommand::Train(a),
        } => zoo_train(a),
        Command::PrepareData(a) => prepare_data(a),
        Command::TrainCodec(a) => train_codec(a),
        Command::TrainGenerator(a) => train_generator(a),
        Command::Attack {
            command: AttackCommand::Run(a),
        } => attack_run(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
    }
}

fn toy_data(a: ToyDataArgs) -> Result<()> {
    let cfg = ToyConfig {
        classes: a.classes,
        resolution: a.resolution,
        ..ToyConfig::default()
    };
    let set = make_dataset(&cfg, a.per_class, a.seed);
    save_labeled_set(&set, a.classes, &a.out)?;
    println!(
        "wrote {} images ({} classes, {}x{}) to {}",
        set.len(),
        a.classes,
        a.resolution,
        a.resolution,
        a.out.display()
    );
    Ok(())
}

fn zoo_train(a: ZooTrainArgs) -> Result<()> {
    let arch: Arch = a.arch.parse()?;
    let (data, classes) = load_labeled_set(&a.data)?;
    let resolution = data
        .images
        .first()
        .context("training data is empty")?
        .dim()
        .1;
    let spec = ModelSpec {
        arch,
        resolution,
        classes,
        seed: a.seed,
    };
    let mut model = build_model(&spec)?;
    let acc = train_classifier(&mut model, &data, a.epochs, a.seed)?;
    let out = resolve_out(&a.out)?;
    save_checkpoint(&model, &out)?;
    println!(
        "trained {} for {} epochs, val accuracy {acc:.3}, checkpoint {}",
        arch,
        a.epochs,
        out.display()
    );
    Ok(())
}

fn prepare_data(a: PrepareArgs) -> Result<()> {
    let (data, _) = load_labeled_set(&a.data)?;
    let cnn = load_checkpoint(&resolve(&a.cnn))?;
    let vit = load_checkpoint(&resolve(&a.vit))?;
    let attacks = a
        .attacks
        .split(',')
        .map(|s| s.trim().parse::<AttackKind>())
        .collect::<jad_core::Result<Vec<_>>>()?;
    let cfg = PrepConfig {
        steps: a.steps,
        attacks,
        single_layer_attention: a.single_layer,
        seed: a.seed,
        ..PrepConfig::default()
    };
    let manifest = build_dataset(&data, &cnn, &vit, &cfg, &a.out)?;
    println!(
        "wrote {} training pairs to {}",
        manifest.entries.len(),
        a.out.display()
    );
    Ok(())
}

fn train_codec(a: TrainCodecArgs) -> Result<()> {
    let (data, _) = load_labeled_set(&a.data)?;
    let codec = train_autoencoder(&data.images, a.channels, a.factor, a.epochs, a.seed)?;
    let out = resolve_out(&a.out)?;
    save_codec(&codec, &out)?;
    println!(
        "codec C={} f={} val mse {}, checkpoint {}",
        a.channels,
        a.factor,
        codec
            .mse
            .map_or("n/a".into(), |m| format!("{m:.5}")),
        out.display()
    );
    Ok(())
}

fn train_generator(a: TrainGeneratorArgs) -> Result<()> {
    let raw = std::fs::read_to_string(&a.config)?;
    let file: GeneratorTrainFile = serde_json::from_str(&raw)?;
    let dataset = load_dataset(&file.dataset)?;
    let codec = load_codec(&resolve(&file.codec))?;
    let schedule = make_schedule(file.t_steps, 1e-4, 2e-2)?;
    let generator = Generator::new(
        codec.latent_shape(),
        file.t_steps,
        codec.param_hash(),
        file.seed,
    )?;
    let cfg = DistillConfig {
        weights: LossWeights {
            lambda_attn: file.lambda_attn,
            lambda_pert: file.lambda_pert,
            lambda_reg: file.lambda_reg,
        },
        epochs: file.epochs,
        batch: file.batch,
        mask_mode: parse_mask_mode(&file.mask_mode)?,
        seed: file.seed,
        ..DistillConfig::default()
    };
    let report = distill::train(&generator, &dataset, &codec, &schedule, &cfg)?;
    let out = resolve_out(&file.out)?;
    save_generator(&generator, &out)?;
    report.write_csv(&out.with_extension("csv"))?;
    if let Some(last) = report.records.last() {
        println!(
            "generator trained for {} epochs, final cosine {:.3}, checkpoint {}",
            file.epochs,
            last.cosine,
            out.display()
        );
    }
    Ok(())
}

fn load_attack_config(path: &Option<PathBuf>) -> Result<AttackConfig> {
    match path {
        Some(p) => Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?),
        None => Ok(AttackConfig::default()),
    }
}

fn attack_run(a: AttackRunArgs) -> Result<()> {
    let attack_cfg = load_attack_config(&a.config)?;
    let victim = load_checkpoint(&resolve(&a.victim))?;
    let generator = load_generator(&resolve(&a.generator))?;
    let codec = load_codec(&resolve(&a.codec))?;
    let schedule = make_schedule(generator.t_steps, 1e-4, 2e-2)?;
    let (data, _) = load_labeled_set(&a.images)?;
    std::fs::create_dir_all(&a.out)?;

    let cfg = ExperimentConfig {
        name: "attack-run".into(),
        attack: attack_cfg,
        defense: Defense::None,
        max_images: 0,
    };
    let report = run_experiment(&cfg, &data, &victim, &generator, &codec, &schedule)?;
    // Re-run per image to persist adversarial PNGs and traces.
    for o in &report.outcomes {
        let mut oracle = jad_core::zoo::QueryOracle::new(
            load_checkpoint(&resolve(&a.victim))?,
            cfg.attack.budget,
        );
        let per_cfg = AttackConfig {
            seed: cfg.attack.seed.wrapping_add(o.index as u64),
            ..cfg.attack.clone()
        };
        let res = jad_core::attack::attack(
            &data.images[o.index],
            data.labels[o.index],
            &mut oracle,
            &generator,
            &codec,
            &schedule,
            &per_cfg,
        )?;
        save_png(
            &res.adversarial,
            &a.out.join(format!("{:04}_adv.png", o.index)),
        )?;
        let detail = serde_json::json!({
            "index": o.index,
            "status": res.status,
            "queries": res.queries,
            "margin_trace": res.margin_trace,
        });
        std::fs::write(
            a.out.join(format!("{:04}.json", o.index)),
            serde_json::to_vec_pretty(&detail)?,
        )?;
    }
    write_report_json(&report, &a.out.join("report.json"))?;
    summarize(&report);
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let attack_cfg = load_attack_config(&a.config)?;
    let victim = load_checkpoint(&resolve(&a.victim))?;
    let generator = load_generator(&resolve(&a.generator))?;
    let codec = load_codec(&resolve(&a.codec))?;
    let schedule = make_schedule(generator.t_steps, 1e-4, 2e-2)?;
    let (data, _) = load_labeled_set(&a.images)?;
    std::fs::create_dir_all(&a.out)?;
    let cfg = ExperimentConfig {
        name: "evaluate".into(),
        attack: attack_cfg,
        defense: parse_defense(&a.defense)?,
        max_images: a.max_images,
    };
    let report = run_experiment(&cfg, &data, &victim, &generator, &codec, &schedule)?;
    write_report_json(&report, &a.out.join("report.json"))?;
    write_report_csv(&report, &a.out.join("report.csv"))?;
    if !report.outcomes.is_empty() {
        plot_asr_vs_queries(
            &report.outcomes,
            cfg.attack.budget,
            &a.out.join("asr_vs_queries.csv"),
            &a.out.join("asr_vs_queries.png"),
        )?;
    }
    summarize(&report);
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    let mut rows = Vec::new();
    for path in &a.input {
        let raw = std::fs::read_to_string(path)?;
        let rep: ExperimentReport = serde_json::from_str(&raw)?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("report");
        write_report_csv(&rep, &a.out.join(format!("{stem}.csv")))?;
        if !rep.outcomes.is_empty() {
            let budget = rep.outcomes.iter().map(|o| o.queries).max().unwrap_or(1).max(1);
            plot_asr_vs_queries(
                &rep.outcomes,
                budget,
                &a.out.join(format!("{stem}_curve.csv")),
                &a.out.join(format!("{stem}_curve.png")),
            )?;
        }
        if let Some(m) = rep.metrics.clone() {
            rows.push((rep.defense.clone(), m));
        }
        summarize(&rep);
    }
    if !rows.is_empty() {
        write_defense_table(&rows, &a.out.join("defense_table.csv"))?;
    }
    Ok(())
}

fn summarize(report: &ExperimentReport) {
    match &report.metrics {
        Some(m) => println!(
            "{} [{}]: {}/{} attacked, asr {:.3}, avg.q {}, med.q {}",
            report.name,
            report.defense,
            m.successes,
            m.total,
            m.asr,
            m.avg_queries.map_or("undefined".into(), |v| format!("{v:.1}")),
            m.median_queries.map_or("undefined".into(), |v| v.to_string()),
        ),
        None => println!(
            "{} [{}]: nothing to attack after the clean-accuracy filter",
            report.name, report.defense
        ),
    }
}
