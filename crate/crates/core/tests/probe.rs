//! Temporary sizing probe, not part of the acceptance gate.

use std::time::Instant;

use jad_core::attention::teacher_attention;
use jad_core::toydata::{make_dataset, ToyConfig};
use jad_core::zoo::{build_model, train_classifier, Arch, ModelSpec};

fn block_ceiling(map: &ndarray::Array2<f64>, grid: usize) -> f64 {
    // Cosine between the map and its best constant-block approximation:
    // an upper bound proxy for what a grid x grid student can reach.
    let (h, w) = map.dim();
    let (bh, bw) = (h / grid, w / grid);
    let mut approx = ndarray::Array2::<f64>::zeros((h, w));
    for gi in 0..grid {
        for gj in 0..grid {
            let mut s = 0.0;
            for i in 0..bh {
                for j in 0..bw {
                    s += map[[gi * bh + i, gj * bw + j]];
                }
            }
            let mean = s / (bh * bw) as f64;
            for i in 0..bh {
                for j in 0..bw {
                    approx[[gi * bh + i, gj * bw + j]] = mean;
                }
            }
        }
    }
    let dot: f64 = map.iter().zip(approx.iter()).map(|(a, b)| a * b).sum();
    let na: f64 = map.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = approx.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
#[ignore]
fn teacher_map_peakedness() {
    let res = 32;
    let sigma: f64 = std::env::var("PROBE_SIGMA")
        .map(|v| v.parse().unwrap())
        .unwrap_or(0.15);
    let noise: f64 = std::env::var("PROBE_NOISE")
        .map(|v| v.parse().unwrap())
        .unwrap_or(0.08);
    let single: bool = std::env::var("PROBE_SINGLE").map(|v| v == "1").unwrap_or(false);
    eprintln!("sigma_frac {sigma}, noise {noise}, single_layer {single}");
    let cfg = ToyConfig {
        classes: 10,
        resolution: res,
        sigma_frac: sigma,
        noise,
        ..ToyConfig::default()
    };
    let data = make_dataset(&cfg, 20, 101); // 200 images
    let t0 = Instant::now();
    let mut cnn = build_model(&ModelSpec {
        arch: Arch::SmallCnn,
        resolution: res,
        classes: 10,
        seed: 11,
    })
    .unwrap();
    let acc_cnn = train_classifier(&mut cnn, &data, 6, 11).unwrap();
    eprintln!("cnn acc {acc_cnn:.3} in {:.0?}", t0.elapsed());
    let t1 = Instant::now();
    let mut vit = build_model(&ModelSpec {
        arch: Arch::SmallVit,
        resolution: res,
        classes: 10,
        seed: 12,
    })
    .unwrap();
    let acc_vit = train_classifier(&mut vit, &data, 6, 12).unwrap();
    eprintln!("vit acc {acc_vit:.3} in {:.0?}", t1.elapsed());

    let t2 = Instant::now();
    let mut coss = Vec::new();
    let mut ceil = Vec::new();
    for i in 0..20 {
        let (map, wc, wv) =
            teacher_attention(&cnn, &vit, &data.images[i], data.labels[i], res, single).unwrap();
        let n = (res * res) as f64;
        let s: f64 = map.values.iter().sum();
        let ss: f64 = map.values.iter().map(|v| v * v).sum();
        let cos = s / (n.sqrt() * ss.sqrt());
        coss.push(cos);
        ceil.push(block_ceiling(&map.values, 4));
        if i < 5 {
            eprintln!(
                "img {i}: cos-vs-uniform {cos:.3}, w_cnn {wc:.2}, w_vit {wv:.2}, max {:.2}, mean {:.2}",
                map.values.iter().cloned().fold(f64::MIN, f64::max),
                s / n
            );
        }
    }
    coss.sort_by(f64::total_cmp);
    ceil.sort_by(f64::total_cmp);
    eprintln!("4x4 block ceiling: median {:.3}, min {:.3}", ceil[ceil.len() / 2], ceil[0]);
    eprintln!(
        "teacher maps: cos-vs-uniform median {:.3}, min {:.3}, max {:.3}; extraction {:.0?} for 20",
        coss[coss.len() / 2],
        coss[0],
        coss[coss.len() - 1],
        t2.elapsed()
    );
}

#[test]
#[ignore]
fn distill_cosine_trajectory() {
    use jad_core::codec::{default_schedule, train_autoencoder};
    use jad_core::dataprep::{build_dataset, load_dataset, PrepConfig};
    use jad_core::distill::{self, DistillConfig, LossWeights, MaskMode};
    use jad_core::generator::Generator;

    let res = 32;
    let cfg = ToyConfig {
        classes: 10,
        resolution: res,
        sigma_frac: 0.10,
        noise: 0.05,
        ..ToyConfig::default()
    };
    let teacher_data = make_dataset(&cfg, 30, 101); // 300 images
    let data = make_dataset(&cfg, 6, 909); // 60 images for pairs
    let mut cnn = build_model(&ModelSpec { arch: Arch::SmallCnn, resolution: res, classes: 10, seed: 11 }).unwrap();
    let acc_cnn = train_classifier(&mut cnn, &teacher_data, 8, 11).unwrap();
    let mut vit = build_model(&ModelSpec { arch: Arch::SmallVit, resolution: res, classes: 10, seed: 12 }).unwrap();
    let acc_vit = train_classifier(&mut vit, &teacher_data, 15, 12).unwrap();
    eprintln!("teachers: cnn {acc_cnn:.2}, vit {acc_vit:.2}");
    {
        let mut coss = Vec::new();
        for i in 0..30 {
            let (map, _, _) = jad_core::attention::teacher_attention(&cnn, &vit, &data.images[i], data.labels[i], res, false).unwrap();
            let n = (res * res) as f64;
            let s: f64 = map.values.iter().sum();
            let ss: f64 = map.values.iter().map(|v| v * v).sum();
            coss.push(s / (n.sqrt() * ss.sqrt()));
        }
        coss.sort_by(f64::total_cmp);
        eprintln!("teacher cos-vs-uniform median {:.3} min {:.3} max {:.3}", coss[15], coss[0], coss[29]);
    }

    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs");
    let t0 = Instant::now();
    build_dataset(&data, &cnn, &vit, &PrepConfig::default(), &pairs).unwrap();
    eprintln!("pairs in {:.0?}", t0.elapsed());
    let dataset = load_dataset(&pairs).unwrap();

    let t0 = Instant::now();
    let codec = train_autoencoder(&data.images, 4, 4, 15, 31).unwrap();
    eprintln!("codec mse {:?} in {:.0?}", codec.mse, t0.elapsed());
    let schedule = default_schedule();
    let lr: f64 = std::env::var("PROBE_LR").map(|v| v.parse().unwrap()).unwrap_or(1e-4);
    let lam: f64 = std::env::var("PROBE_LAM").map(|v| v.parse().unwrap()).unwrap_or(5.0);
    let gen = Generator::new(codec.latent_shape(), 50, codec.param_hash(), 61).unwrap();
    let dcfg = DistillConfig {
        weights: LossWeights { lambda_attn: lam, ..LossWeights::default() },
        epochs: 12,
        batch: 8,
        mask_mode: MaskMode::Dynamic,
        seed: 51,
        learning_rate: lr,
        ..DistillConfig::default()
    };
    let t0 = Instant::now();
    let report = distill::train(&gen, &dataset, &codec, &schedule, &dcfg).unwrap();
    for r in &report.records {
        eprintln!("epoch {}: cosine {:.3} denoise {:.3} pert {:.3}", r.epoch, r.cosine, r.denoise, r.pert);
    }
    eprintln!("distill {:.0?} for {} pairs x 12 epochs", t0.elapsed(), dataset.pairs.len());
}

#[test]
#[ignore]
fn teacher_component_diffuseness() {
    use jad_core::attention::model_attention;
    let res = 32;
    let envf = |k: &str, d: f64| std::env::var(k).map(|v| v.parse().unwrap()).unwrap_or(d);
    let cfg = ToyConfig {
        classes: 10,
        resolution: res,
        sigma_frac: envf("SIGMA", 0.10),
        noise: envf("NOISE", 0.05),
        amplitude: envf("AMP", 0.5),
        random_position: envf("RANDPOS", 0.0) > 0.5,
        distractor: envf("DISTRACT", 0.0) > 0.5,
        ..ToyConfig::default()
    };
    let vit_epochs = envf("VIT_EPOCHS", 15.0) as usize;
    let teacher_data = make_dataset(&cfg, 30, 101);
    let mut cnn = build_model(&ModelSpec { arch: Arch::SmallCnn, resolution: res, classes: 10, seed: 11 }).unwrap();
    let ca = train_classifier(&mut cnn, &teacher_data, 8, 11).unwrap();
    let mut vit = build_model(&ModelSpec { arch: Arch::SmallVit, resolution: res, classes: 10, seed: 12 }).unwrap();
    let va = train_classifier(&mut vit, &teacher_data, vit_epochs, 12).unwrap();
    eprintln!("acc cnn {ca:.2} vit {va:.2}");
    let cosu = |m: &jad_core::attention::AttentionMap| {
        let n = (res * res) as f64;
        let s: f64 = m.values.iter().sum();
        let ss: f64 = m.values.iter().map(|v| v * v).sum();
        s / (n.sqrt() * ss.sqrt())
    };
    for single in [false, true] {
        let mut cs = Vec::new();
        let mut vs = Vec::new();
        for i in 0..20 {
            let img = &teacher_data.images[i];
            let y = teacher_data.labels[i];
            cs.push(cosu(&model_attention(&cnn, img, y, res, single).unwrap()));
            vs.push(cosu(&model_attention(&vit, img, y, res, single).unwrap()));
        }
        cs.sort_by(f64::total_cmp);
        vs.sort_by(f64::total_cmp);
        eprintln!(
            "single_layer={single}: cnn median {:.3} (min {:.3}), vit median {:.3} (min {:.3})",
            cs[10], cs[0], vs[10], vs[0]
        );
    }
}

#[test]
#[ignore]
fn student_init_peakedness() {
    use jad_core::generator::Generator;
    use jad_core::nn::{randn, seeded_rng};
    for seed in [61u64, 62, 63] {
        let g = Generator::new((4, 8, 8), 50, "x".into(), seed).unwrap();
        let mut coss = Vec::new();
        for zs in 0..8 {
            let z = randn(&mut seeded_rng(1000 + zs), &[4, 8, 8])
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap();
            g.predict_noise(&z, 25).unwrap();
            let m = g.generator_attention(32).unwrap();
            let n = (32 * 32) as f64;
            let s: f64 = m.values.iter().sum();
            let ss: f64 = m.values.iter().map(|v| v * v).sum();
            coss.push(s / (n.sqrt() * ss.sqrt()));
        }
        eprintln!("seed {seed}: init cos-vs-uniform {:?}", coss.iter().map(|c| (c * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    }
}

#[test]
#[ignore]
fn student_init_mass() {
    use jad_core::generator::Generator;
    use jad_core::nn::{randn, seeded_rng};
    let g = Generator::new((4, 8, 8), 50, "x".into(), 61).unwrap();
    for zs in 0..4 {
        let z = randn(&mut seeded_rng(1000 + zs), &[4, 8, 8])
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        g.predict_noise(&z, 25).unwrap();
        let taps = g.attention_taps();
        for (ti, t) in taps.iter().enumerate() {
            let m = t.mean_axis(0).value();
            let v: Vec<f64> = m.iter().map(|x| (x * 1000.0).round() / 1000.0).collect();
            eprintln!("z{zs} tap{ti} shape {:?} mass {:?}", t.shape(), &v[..v.len().min(16)]);
        }
    }
}

#[test]
#[ignore]
fn attack_knob_sweep() {
    use jad_core::codec::{default_schedule, latent_budget, load_codec};
    use jad_core::generator::load_generator;
    use jad_core::harness::{run_experiment, Defense, ExperimentConfig};
    use jad_core::attack::AttackConfig;
    use jad_core::zoo::load_checkpoint;
    let dir = std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../target/acceptance_cache/v3");
    let codec = load_codec(&dir.join("codec.ckpt")).unwrap();
    let gen = load_generator(&dir.join("gen_joint.gen")).unwrap();
    let schedule = default_schedule();
    let gepochs: usize = std::env::var("GEPOCHS").map(|v| v.parse().unwrap()).unwrap_or(0);
    if gepochs > 0 {
        use jad_core::dataprep::load_dataset;
        use jad_core::distill::{self, DistillConfig};
        let pairs = load_dataset(&dir.join("pairs_joint")).unwrap();
        let dcfg = DistillConfig {
            epochs: gepochs,
            batch: 16,
            seed: 52,
            learning_rate: 1e-4,
            ..DistillConfig::default()
        };
        let t0 = Instant::now();
        let rep = distill::train(&gen, &pairs, &codec, &schedule, &dcfg).unwrap();
        let last = rep.records.last().unwrap();
        eprintln!("extra {gepochs} epochs: denoise {:.4} total {:.4} in {:.0?}", last.denoise, last.total, t0.elapsed());
    }
    let cfg = ToyConfig {
        classes: 10,
        resolution: 32,
        amplitude: 0.3,
        noise: 0.08,
        sigma_frac: 0.18,
        ..ToyConfig::default()
    };
    let train = make_dataset(&cfg, 50, 101);
    let vepochs: usize = std::env::var("VEPOCHS").map(|v| v.parse().unwrap()).unwrap_or(0);
    let varch = std::env::var("VICTIM").unwrap_or_else(|_| "cnn".into());
    let victim = if vepochs == 0 && varch == "vit" {
        load_checkpoint(&dir.join("victim_vit.ckpt")).unwrap()
    } else if vepochs > 0 && varch == "vit" {
        let mut m = build_model(&ModelSpec { arch: Arch::SmallVit, resolution: 32, classes: 10, seed: 22 }).unwrap();
        let acc = train_classifier(&mut m, &train, vepochs, 22).unwrap();
        eprintln!("fresh vit victim {vepochs} epochs acc {acc:.3}");
        m
    } else if vepochs == 0 {
        load_checkpoint(&dir.join("victim_cnn.ckpt")).unwrap()
    } else {
        let mut m = build_model(&ModelSpec { arch: Arch::SmallCnn, resolution: 32, classes: 10, seed: 21 }).unwrap();
        let acc = train_classifier(&mut m, &train, vepochs, 21).unwrap();
        eprintln!("fresh victim {vepochs} epochs acc {acc:.3}");
        m
    };
    let base = latent_budget(&codec, &train.images, 1.0).unwrap();
    eprintln!("latent budget unit {base:.4}");
    let pool = make_dataset(&cfg, 40, 2020);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (img, &label) in pool.images.iter().zip(&pool.labels) {
        if victim.predict(img) == label {
            images.push(img.clone());
            labels.push(label);
            if images.len() == std::env::var("N").map(|v| v.parse().unwrap()).unwrap_or(50) { break; }
        }
    }
    let set = jad_core::zoo::LabeledSet { images, labels };
    let mult: f64 = std::env::var("MULT").map(|v| v.parse().unwrap()).unwrap_or(8.0);
    let jitter: f64 = std::env::var("JIT").map(|v| v.parse().unwrap()).unwrap_or(0.05);
    let budget: u64 = std::env::var("BUDGET").map(|v| v.parse().unwrap()).unwrap_or(1000);
    let inter: bool = std::env::var("INTERLEAVE").map(|v| v == "1").unwrap_or(false);
    let k: usize = std::env::var("K").map(|v| v.parse().unwrap()).unwrap_or(5);
    let passes: usize = std::env::var("PASSES").map(|v| v.parse().unwrap()).unwrap_or(2);
    let step: f64 = std::env::var("STEP").map(|v| v.parse().unwrap()).unwrap_or(0.25);
    let mom: bool = std::env::var("MOM").map(|v| v == "1").unwrap_or(false);
    let attack = AttackConfig {
        eps_latent: base * mult,
        budget,
        num_candidates: k,
        jitter_frac: jitter,
        greedy_interleave: inter,
        greedy_passes: passes,
        greedy_step_frac: step,
        greedy_momentum: mom,
        seed: 71,
        ..AttackConfig::default()
    };
    if std::env::var("DIAG").is_ok() {
        use jad_core::attack::{pixel_project, project_linf};
        use jad_core::codec::forward_diffuse;
        use jad_core::nn::{randn, seeded_rng};
        let mut rng = seeded_rng(7);
        let (mut flips, mut total) = (0, 0);
        for (img, &y) in set.images.iter().zip(&set.labels).take(30) {
            let z = codec.encode(img);
            let shape: Vec<usize> = z.shape().to_vec();
            let eps = randn(&mut rng, &shape);
            let t = schedule.steps;
            let zt = forward_diffuse(&z.clone().into_dyn(), t, &eps, &schedule).unwrap()
                .into_dimensionality::<ndarray::Ix3>().unwrap();
            let eps_hat = gen.predict_noise(&zt, t).unwrap().into_dyn();
            let ab = schedule.at(t);
            let z0 = (&zt.into_dyn() - &(&eps_hat * (1.0 - ab).sqrt())) / ab.sqrt();
            let est = project_linf(&z0, &z.clone().into_dyn(), base * mult)
                .into_dimensionality::<ndarray::Ix3>().unwrap();
            let x = pixel_project(&codec.decode(&est), img, 16.0 / 255.0);
            total += 1;
            if victim.predict(&x) != y { flips += 1; }
        }
        eprintln!("one-step estimate flip rate: {flips}/{total}");
    }
    let t0 = Instant::now();
    let report = run_experiment(
        &ExperimentConfig { name: "sweep".into(), attack, defense: Defense::None, max_images: 0 },
        &set, &victim, &gen, &codec, &schedule,
    ).unwrap();
    let m = report.metrics.unwrap();
    eprintln!(
        "mult {mult} jit {jitter} k {k} step {step} inter {inter}: asr {:.3} avg.q {:?} med.q {:?} in {:.0?}",
        m.asr, m.avg_queries, m.median_queries, t0.elapsed()
    );
}

#[test]
#[ignore]
fn recon_flip_rate() {
    use jad_core::attack::{pixel_project, project_linf};
    use jad_core::codec::{latent_budget, train_autoencoder};
    use jad_core::nn::{randn, seeded_rng};
    let envf = |k: &str, d: f64| std::env::var(k).map(|v| v.parse().unwrap()).unwrap_or(d);
    let cepochs = envf("CEPOCHS", 20.0) as usize;
    let cfg = ToyConfig {
        classes: 10,
        resolution: 32,
        amplitude: 0.3,
        noise: 0.08,
        sigma_frac: 0.18,
        ..ToyConfig::default()
    };
    let train = make_dataset(&cfg, 50, 101);
    let mut victim = build_model(&ModelSpec { arch: Arch::SmallCnn, resolution: 32, classes: 10, seed: 21 }).unwrap();
    let va = train_classifier(&mut victim, &train, 6, 21).unwrap();
    let codec = train_autoencoder(&train.images, 4, 4, cepochs, 31).unwrap();
    let unit = latent_budget(&codec, &train.images, 1.0).unwrap();
    eprintln!("codec epochs {cepochs} mse {:?} unit {unit:.4} victim acc {va:.2}", codec.mse);
    let pool = make_dataset(&cfg, 40, 2020);
    let eps = 16.0 / 255.0;
    let mut rng = seeded_rng(9);
    for sig_mult in [0.0, 0.5, 1.0, 2.0, 4.0] {
        let (mut n, mut flips) = (0, 0);
        for (img, &y) in pool.images.iter().zip(&pool.labels) {
            if victim.predict(img) != y { continue; }
            n += 1;
            let z = codec.encode(img);
            let shape: Vec<usize> = z.shape().to_vec();
            let zj = &z.clone().into_dyn() + &(randn(&mut rng, &shape) * (sig_mult * unit));
            let zj = project_linf(&zj, &z.clone().into_dyn(), 6.0 * unit)
                .into_dimensionality::<ndarray::Ix3>().unwrap();
            let x = pixel_project(&codec.decode(&zj), img, eps);
            if victim.predict(&x) != y { flips += 1; }
            if n == 60 { break; }
        }
        eprintln!("jitter {sig_mult} x unit: {flips}/{n} flips");
    }
}

#[test]
#[ignore]
fn whitebox_feasibility() {
    use jad_core::dataprep::pgd;
    use jad_core::zoo::load_checkpoint;
    let dir = std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../target/acceptance_cache/v2");
    let victim = load_checkpoint(&dir.join("victim_cnn.ckpt")).unwrap();
    let cfg = ToyConfig {
        classes: 10,
        resolution: 32,
        sigma_frac: 0.10,
        noise: 0.05,
        ..ToyConfig::default()
    };
    let pool = make_dataset(&cfg, 40, 2020);
    let eps = 16.0 / 255.0;
    let (mut total, mut flips) = (0, 0);
    for (img, &y) in pool.images.iter().zip(&pool.labels) {
        if victim.predict(img) != y { continue; }
        total += 1;
        let adv = pgd(&victim, img, y, eps, eps / 4.0, 20, 0).unwrap();
        if victim.predict(&adv) != y { flips += 1; }
        if total == 100 { break; }
    }
    eprintln!("white-box pgd eps 16/255: {flips}/{total} flipped");
}

#[test]
#[ignore]
fn transfer_and_roundtrip() {
    use jad_core::attack::pixel_project;
    use jad_core::codec::load_codec;
    use jad_core::dataprep::mi_fgsm;
    use jad_core::zoo::load_checkpoint;
    let dir = std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../target/acceptance_cache/v3");
    let codec = load_codec(&dir.join("codec.ckpt")).unwrap();
    let teacher = load_checkpoint(&dir.join("teacher_cnn.ckpt")).unwrap();
    let victim = load_checkpoint(&dir.join("victim_cnn.ckpt")).unwrap();
    let cfg = ToyConfig {
        classes: 10,
        resolution: 32,
        sigma_frac: 0.10,
        noise: 0.05,
        ..ToyConfig::default()
    };
    let pool = make_dataset(&cfg, 40, 2020);
    let eps = 16.0 / 255.0;
    let (mut n, mut fv, mut fvr, mut ft, mut ftr) = (0, 0, 0, 0, 0);
    for (img, &y) in pool.images.iter().zip(&pool.labels) {
        if victim.predict(img) != y || teacher.predict(img) != y { continue; }
        n += 1;
        let adv = mi_fgsm(&teacher, img, y, eps, eps / 4.0, 0.9, 10, 0).unwrap();
        let rt = pixel_project(&codec.decode(&codec.encode(&adv)), img, eps);
        if victim.predict(&adv) != y { fv += 1; }
        if victim.predict(&rt) != y { fvr += 1; }
        if teacher.predict(&adv) != y { ft += 1; }
        if teacher.predict(&rt) != y { ftr += 1; }
        if n == 60 { break; }
    }
    eprintln!("n {n}: victim direct {fv}, victim roundtrip {fvr}, teacher direct {ft}, teacher roundtrip {ftr}");
}

#[test]
#[ignore]
fn semantic_transfer_sweep() {
    use jad_core::attack::pixel_project;
    use jad_core::codec::train_autoencoder;
    use jad_core::dataprep::mi_fgsm;
    let envf = |k: &str, d: f64| std::env::var(k).map(|v| v.parse().unwrap()).unwrap_or(d);
    let cfg = ToyConfig {
        classes: 10,
        resolution: 32,
        amplitude: envf("AMP", 0.3),
        noise: envf("NOISE", 0.08),
        sigma_frac: envf("SIGMA", 0.18),
        ..ToyConfig::default()
    };
    let factor = envf("FACTOR", 4.0) as usize;
    let chans = envf("CHANNELS", 4.0) as usize;
    let train = make_dataset(&cfg, 30, 101);
    let mut teacher = build_model(&ModelSpec { arch: Arch::SmallCnn, resolution: 32, classes: 10, seed: 11 }).unwrap();
    let ta = train_classifier(&mut teacher, &train, 8, 11).unwrap();
    let mut victim = build_model(&ModelSpec { arch: Arch::SmallCnn, resolution: 32, classes: 10, seed: 21 }).unwrap();
    let va = train_classifier(&mut victim, &train, 4, 21).unwrap();
    let codec = train_autoencoder(&train.images, chans, factor, 20, 31).unwrap();
    eprintln!("chans {chans} acc teacher {ta:.2} victim {va:.2} codec mse {:?}", codec.mse);
    let pool = make_dataset(&cfg, 20, 2020);
    let eps = 16.0 / 255.0;
    let (mut n, mut fv, mut fvr, mut ft, mut ftr) = (0, 0, 0, 0, 0);
    for (img, &y) in pool.images.iter().zip(&pool.labels) {
        if victim.predict(img) != y || teacher.predict(img) != y { continue; }
        n += 1;
        let adv = mi_fgsm(&teacher, img, y, eps, eps / 4.0, 0.9, 10, 0).unwrap();
        let rt = pixel_project(&codec.decode(&codec.encode(&adv)), img, eps);
        if victim.predict(&adv) != y { fv += 1; }
        if victim.predict(&rt) != y { fvr += 1; }
        if teacher.predict(&adv) != y { ft += 1; }
        if teacher.predict(&rt) != y { ftr += 1; }
        if n == 60 { break; }
    }
    eprintln!("n {n}: victim direct {fv}, victim rt {fvr}, teacher direct {ft}, teacher rt {ftr}");
}

#[test]
#[ignore]
fn vit_victim_transfer() {
    use jad_core::attack::pixel_project;
    use jad_core::codec::train_autoencoder;
    use jad_core::dataprep::mi_fgsm;
    let cfg = ToyConfig {
        classes: 10,
        resolution: 32,
        amplitude: 0.3,
        noise: 0.08,
        sigma_frac: 0.18,
        ..ToyConfig::default()
    };
    let train = make_dataset(&cfg, 50, 101);
    let mut teacher = build_model(&ModelSpec { arch: Arch::SmallCnn, resolution: 32, classes: 10, seed: 11 }).unwrap();
    let ta = train_classifier(&mut teacher, &train, 8, 11).unwrap();
    let mut vcnn = build_model(&ModelSpec { arch: Arch::SmallCnn, resolution: 32, classes: 10, seed: 21 }).unwrap();
    let ca = train_classifier(&mut vcnn, &train, 6, 21).unwrap();
    let mut vvit = build_model(&ModelSpec { arch: Arch::SmallVit, resolution: 32, classes: 10, seed: 22 }).unwrap();
    let va = train_classifier(&mut vvit, &train, 10, 22).unwrap();
    let codec = train_autoencoder(&train.images, 4, 4, 20, 31).unwrap();
    eprintln!("acc teacher {ta:.2} vcnn {ca:.2} vvit {va:.2} codec mse {:?}", codec.mse);
    let pool = make_dataset(&cfg, 20, 2020);
    let eps = 16.0 / 255.0;
    let (mut n, mut fc, mut fcr, mut fv, mut fvr) = (0, 0, 0, 0, 0);
    for (img, &y) in pool.images.iter().zip(&pool.labels) {
        if vcnn.predict(img) != y || vvit.predict(img) != y || teacher.predict(img) != y { continue; }
        n += 1;
        let adv = mi_fgsm(&teacher, img, y, eps, eps / 4.0, 0.9, 10, 0).unwrap();
        let rt = pixel_project(&codec.decode(&codec.encode(&adv)), img, eps);
        if vcnn.predict(&adv) != y { fc += 1; }
        if vcnn.predict(&rt) != y { fcr += 1; }
        if vvit.predict(&adv) != y { fv += 1; }
        if vvit.predict(&rt) != y { fvr += 1; }
        if n == 60 { break; }
    }
    eprintln!("n {n}: vcnn direct {fc} rt {fcr}, vvit direct {fv} rt {fvr}");
}
