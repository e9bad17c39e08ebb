//! Command-line surface: train, attack, analyze, prune, verify, data.
//!
//! Every subcommand resolves its settings in three layers (built-in
//! defaults, then `--config` file, then command-line flags), runs, and
//! writes a manifest into `--out-dir` recording the resolved settings,
//! the seed, and a sha256 of every artifact produced.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use robuq::attack::{self, AttackConfig};
use robuq::checkpoint::Checkpoint;
use robuq::config::Config;
use robuq::data::{gen_synthetic, load_idx, write_idx, DatasetHandle, Split, SyntheticKind};
use robuq::metrics::{format_row, write_manifest, MetricsWriter, CSV_HEADER};
use robuq::nets::NetworkSpec;
use robuq::quant::Scheme;
use robuq::rng::{derive_rng, DOMAIN_ATTACK, DOMAIN_DATA};
use robuq::sparsity::{bound_statistic, prune_channels, sparsity_report};
use robuq::tensor::Tensor;
use robuq::theory::{verify_prop1, verify_prop2, PhiLoss};
use robuq::train::{run_training, EvalConfig, LossSpec, TrainConfig, Trainer};

#[derive(Parser)]
#[command(
    name = "robuq",
    version,
    about = "Robust training of small quantized networks: quantization schedules, attacks, sparsity, pruning, and risk checks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a network and write metrics plus a final checkpoint.
    Train(TrainArgs),
    /// Attack a trained checkpoint and report adversarial accuracy.
    Attack(AttackArgs),
    /// Report parameter counts, sparsity, and the weight-scale statistic.
    Analyze(AnalyzeArgs),
    /// Remove dead channels from a checkpoint, preserving outputs exactly.
    Prune(PruneArgs),
    /// Check the risk inequalities by exhaustive search on toy problems.
    Verify(VerifyArgs),
    /// Generate a synthetic dataset and export it as IDX files.
    Data(DataArgs),
}

#[derive(Args, Clone)]
struct Universal {
    /// Master seed; all randomness is derived from it.
    #[arg(long, default_value_t = 41)]
    seed: u64,
    /// key=value settings file; # starts a comment. Flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for artifacts and the run manifest.
    #[arg(long, default_value = "runs/out")]
    out_dir: PathBuf,
    /// Extra key=value override, repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl Universal {
    /// defaults < config file < --set overrides. Direct flags are folded
    /// in afterwards by each subcommand.
    fn resolve(&self, defaults: Config) -> anyhow::Result<Config> {
        let mut cfg = defaults;
        if let Some(path) = &self.config {
            let file = Config::load(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.merge_from(&file);
        }
        cfg.apply_overrides(&self.sets)?;
        Ok(cfg)
    }

    fn ensure_out_dir(&self) -> anyhow::Result<()> {
        fs::create_dir_all(&self.out_dir)
            .with_context(|| format!("creating {}", self.out_dir.display()))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    uni: Universal,
    /// Dataset kind: blobs, moons, or digits (or IDX paths via --set).
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Quantization scheme: none, binary, ternary, ternary-threshold, 4bit.
    #[arg(long)]
    scheme: Option<String>,
    /// Training loss: natural, adversarial, trades, tradeoff.
    #[arg(long)]
    loss: Option<String>,
    /// Natural-term weight of the tradeoff loss.
    #[arg(long)]
    alpha: Option<f64>,
    /// Robust-term weight of the tradeoff and trades losses.
    #[arg(long)]
    beta: Option<f64>,
    /// Continue from a checkpoint written by an identical configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    uni: Universal,
    /// Checkpoint to attack.
    #[arg(long)]
    model: PathBuf,
    /// fgsm, ifgsm, cw, or pgd.
    #[arg(long, default_value = "ifgsm")]
    method: String,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    cw_lr: Option<f64>,
    /// Evaluate on the first N samples; 0 means all.
    #[arg(long)]
    subset: Option<usize>,
    /// Dataset kind for the test split.
    #[arg(long)]
    data: Option<String>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    uni: Universal,
    /// Checkpoint to analyze.
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct PruneArgs {
    #[command(flatten)]
    uni: Universal,
    /// Checkpoint to prune.
    #[arg(long)]
    model: PathBuf,
    /// Inputs for the exact-equivalence check.
    #[arg(long, default_value_t = 16)]
    check_n: usize,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    uni: Universal,
    /// Which claim to check: 1 or 2.
    #[arg(long)]
    prop: u32,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    /// Margin loss for claim 2: hinge, sigmoid, or logistic.
    #[arg(long, default_value = "hinge")]
    loss: String,
}

#[derive(Args)]
struct DataArgs {
    #[command(flatten)]
    uni: Universal,
    /// blobs, moons, or digits.
    #[arg(long, default_value = "digits")]
    kind: String,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 500)]
    n_test: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
}

const TRAIN_KEYS: &[&str] = &[
    "data", "n-train", "n-test", "data-noise", "images", "labels", "test-images", "test-labels",
    "epochs", "batch", "lr", "lr-decay", "milestones", "momentum", "weight-decay",
    "scheme", "rho", "cutoff", "loss", "alpha", "beta", "trades-soft",
    "attack-eps", "attack-alpha", "attack-iters",
    "blocks", "widths", "ensemble", "noise-std", "batch-norm", "exempt-first", "exempt-last",
    "eval-subset", "eval-every", "eval-cw", "eval-eps", "eval-alpha", "eval-iters",
    "ckpt-every",
];

fn train_defaults() -> Config {
    let mut c = Config::new();
    let desk = TrainConfig::desk(0);
    c.set("data", "digits");
    c.set("n-train", "2000");
    c.set("n-test", "500");
    c.set("data-noise", "0.05");
    c.set("images", "");
    c.set("labels", "");
    c.set("test-images", "");
    c.set("test-labels", "");
    c.set("epochs", &desk.epochs.to_string());
    c.set("batch", &desk.batch.to_string());
    c.set("lr", &desk.lr.to_string());
    c.set("lr-decay", &desk.lr_decay.to_string());
    c.set(
        "milestones",
        &desk
            .milestones
            .iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    c.set("momentum", &desk.momentum.to_string());
    c.set("weight-decay", &desk.weight_decay.to_string());
    c.set("scheme", "none");
    c.set("rho", &desk.rho.to_string());
    c.set("cutoff", &desk.cutoff_epoch.to_string());
    c.set("loss", "natural");
    c.set("alpha", "1");
    c.set("beta", "1");
    c.set("trades-soft", "false");
    c.set("attack-eps", &desk.pgd.eps.to_string());
    c.set("attack-alpha", &desk.pgd.alpha.to_string());
    c.set("attack-iters", &desk.pgd.iters.to_string());
    c.set("blocks", "1,1,1");
    c.set("widths", "4,8,16");
    c.set("ensemble", "1");
    c.set("noise-std", "0.1");
    c.set("batch-norm", "true");
    c.set("exempt-first", "true");
    c.set("exempt-last", "true");
    c.set("eval-subset", "250");
    c.set("eval-every", "1");
    c.set("eval-cw", "false");
    c.set("eval-eps", "0.031");
    c.set("eval-alpha", &(1.0 / 255.0).to_string());
    c.set("eval-iters", "20");
    c.set("ckpt-every", "0");
    c
}

fn parse_loss(cfg: &Config) -> anyhow::Result<LossSpec> {
    let alpha = cfg.f64_or("alpha", 1.0)?;
    let beta = cfg.f64_or("beta", 1.0)?;
    Ok(match cfg.str_or("loss", "natural").as_str() {
        "natural" => LossSpec::Natural,
        "adversarial" => LossSpec::Adversarial,
        "trades" => LossSpec::Trades {
            beta,
            soft_label_ce: cfg.bool_or("trades-soft", false)?,
        },
        "tradeoff" => LossSpec::Tradeoff { alpha, beta },
        other => bail!("unknown loss '{other}'"),
    })
}

fn build_train_config(cfg: &Config, seed: u64) -> anyhow::Result<TrainConfig> {
    let tc = TrainConfig {
        epochs: cfg.usize_or("epochs", 20)?,
        batch: cfg.usize_or("batch", 50)?,
        lr: cfg.f64_or("lr", 0.02)?,
        lr_decay: cfg.f64_or("lr-decay", 0.1)?,
        milestones: cfg.usize_list_or("milestones", &[12, 17])?,
        momentum: cfg.f64_or("momentum", 0.9)?,
        weight_decay: cfg.f64_or("weight-decay", 5e-4)?,
        seed,
        scheme: Scheme::parse(&cfg.str_or("scheme", "none"))?,
        rho: cfg.f64_or("rho", 1.02)?,
        cutoff_epoch: cfg.usize_or("cutoff", 16)?,
        loss: parse_loss(cfg)?,
        pgd: AttackConfig {
            eps: cfg.f64_or("attack-eps", 0.031)?,
            alpha: cfg.f64_or("attack-alpha", 0.007)?,
            iters: cfg.usize_or("attack-iters", 10)?,
            ..AttackConfig::default()
        },
        exempt_first: cfg.bool_or("exempt-first", true)?,
        exempt_last: cfg.bool_or("exempt-last", true)?,
    };
    tc.validate()?;
    Ok(tc)
}

fn build_eval_config(cfg: &Config) -> anyhow::Result<EvalConfig> {
    Ok(EvalConfig {
        attack: AttackConfig {
            eps: cfg.f64_or("eval-eps", 0.031)?,
            alpha: cfg.f64_or("eval-alpha", 1.0 / 255.0)?,
            iters: cfg.usize_or("eval-iters", 20)?,
            ..AttackConfig::default()
        },
        include_cw: cfg.bool_or("eval-cw", false)?,
        subset: cfg.usize_or("eval-subset", 250)?,
        eval_every: cfg.usize_or("eval-every", 1)?,
    })
}

fn load_split(cfg: &Config, seed: u64, split: Split) -> anyhow::Result<DatasetHandle> {
    let (img_key, lbl_key, n_key) = match split {
        Split::Train => ("images", "labels", "n-train"),
        Split::Test => ("test-images", "test-labels", "n-test"),
    };
    let images = cfg.str_or(img_key, "");
    let labels = cfg.str_or(lbl_key, "");
    if !images.is_empty() || !labels.is_empty() {
        if images.is_empty() || labels.is_empty() {
            bail!("both {img_key} and {lbl_key} must be set for IDX input");
        }
        return Ok(load_idx(Path::new(&images), Path::new(&labels), split)?);
    }
    let kind = SyntheticKind::parse(&cfg.str_or("data", "digits"))?;
    let n = cfg.usize_or(n_key, 0)?;
    let noise = cfg.f64_or("data-noise", 0.05)?;
    Ok(gen_synthetic(kind, n, noise, seed, split)?)
}

fn net_spec_from(cfg: &Config, data: &DatasetHandle) -> anyhow::Result<NetworkSpec> {
    let (c, h, w) = data.image_dims();
    let spec = NetworkSpec {
        in_channels: c,
        in_h: h,
        in_w: w,
        classes: data.classes,
        blocks: cfg.usize_list_or("blocks", &[1, 1, 1])?,
        widths: cfg.usize_list_or("widths", &[4, 8, 16])?,
        ensemble: cfg.usize_or("ensemble", 1)?,
        noise_std: cfg.f64_or("noise-std", 0.1)?,
        batch_norm: cfg.bool_or("batch-norm", true)?,
    };
    spec.validate()?;
    Ok(spec)
}

fn acc_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{:.4}", x)).unwrap_or_else(|| "-".into())
}

fn cmd_train(args: &TrainArgs) -> anyhow::Result<u8> {
    let mut cfg = args.uni.resolve(train_defaults())?;
    if let Some(v) = &args.data {
        cfg.set("data", v);
    }
    if let Some(v) = args.epochs {
        cfg.set("epochs", &v.to_string());
    }
    if let Some(v) = args.batch {
        cfg.set("batch", &v.to_string());
    }
    if let Some(v) = args.lr {
        cfg.set("lr", &v.to_string());
    }
    if let Some(v) = &args.scheme {
        cfg.set("scheme", v);
    }
    if let Some(v) = &args.loss {
        cfg.set("loss", v);
    }
    if let Some(v) = args.alpha {
        cfg.set("alpha", &v.to_string());
    }
    if let Some(v) = args.beta {
        cfg.set("beta", &v.to_string());
    }
    cfg.check_known(TRAIN_KEYS)?;
    args.uni.ensure_out_dir()?;

    let seed = args.uni.seed;
    let train_ds = load_split(&cfg, seed, Split::Train)?;
    let test_ds = load_split(&cfg, seed, Split::Test)?;
    let tcfg = build_train_config(&cfg, seed)?;
    let ecfg = build_eval_config(&cfg)?;
    let digest = cfg.digest();

    let mut trainer = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.config_digest != digest {
                bail!(
                    "checkpoint {} was written by a different configuration (digest {} vs {})",
                    path.display(),
                    ck.config_digest,
                    digest
                );
            }
            if ck.seed != seed {
                bail!("checkpoint seed {} does not match --seed {}", ck.seed, seed);
            }
            if ck.state.epoch >= tcfg.epochs {
                bail!(
                    "checkpoint already at epoch {} of {}",
                    ck.state.epoch,
                    tcfg.epochs
                );
            }
            println!("resuming from {} at epoch {}", path.display(), ck.state.epoch);
            Trainer {
                net: ck.network(),
                state: ck.state,
                cfg: tcfg.clone(),
            }
        }
        None => {
            let spec = net_spec_from(&cfg, &train_ds)?;
            Trainer::new(&spec, tcfg.clone())?
        }
    };

    println!(
        "training on {} ({} train / {} test), loss {}, scheme {}, {} epochs",
        train_ds.name,
        train_ds.len(),
        test_ds.len(),
        tcfg.loss.name(),
        tcfg.scheme.name(),
        tcfg.epochs
    );
    println!("{CSV_HEADER}");

    let metrics_path = args.uni.out_dir.join("metrics.csv");
    let writer = MetricsWriter::open(&metrics_path)?;
    let ckpt_every = cfg.usize_or("ckpt-every", 0)?;
    let out_dir = args.uni.out_dir.clone();
    let digest_cb = digest.clone();
    let mut epoch_ckpts: Vec<PathBuf> = Vec::new();
    let (rows, trace, final_acc) = run_training(
        &mut trainer,
        &train_ds,
        &test_ds,
        &ecfg,
        |t, row| {
            println!("{}", format_row(row));
            writer.append(row)?;
            let done = row.epoch + 1;
            if ckpt_every > 0 && done % ckpt_every == 0 && done < t.cfg.epochs {
                let p = out_dir.join(format!("epoch_{done}.ckpt"));
                Checkpoint::from_parts(&t.net, &t.state, t.cfg.seed, &digest_cb).save(&p)?;
                epoch_ckpts.push(p);
            }
            Ok(())
        },
    )?;

    let model_path = args.uni.out_dir.join("model.ckpt");
    Checkpoint::from_parts(&trainer.net, &trainer.state, seed, &digest).save(&model_path)?;

    let sp = sparsity_report(&trainer.state);
    println!(
        "final: N {} A1 {} A2 {} A3 {} | weight sparsity {:.4} channel sparsity {:.4}",
        acc_cell(Some(final_acc.n)),
        acc_cell(Some(final_acc.a1)),
        acc_cell(Some(final_acc.a2)),
        acc_cell(final_acc.a3),
        sp.weight_sparsity,
        sp.channel_sparsity
    );
    println!(
        "weight-scale bound M = {:.6} over {} epochs (stabilized: {})",
        trace.m,
        rows.len(),
        trace.stabilized()
    );

    let mut artifacts: Vec<(String, PathBuf)> = vec![
        ("metrics.csv".into(), metrics_path.clone()),
        ("model.ckpt".into(), model_path.clone()),
    ];
    for p in &epoch_ckpts {
        artifacts.push((p.file_name().unwrap().to_string_lossy().into_owned(), p.clone()));
    }
    let refs: Vec<(&str, &Path)> = artifacts
        .iter()
        .map(|(n, p)| (n.as_str(), p.as_path()))
        .collect();
    write_manifest(&args.uni.out_dir.join("manifest.txt"), &cfg, seed, &refs)?;
    Ok(0)
}

const ATTACK_KEYS: &[&str] = &[
    "data", "n-test", "data-noise", "test-images", "test-labels",
    "model", "method", "eps", "alpha", "iters", "cw-lr", "kappa", "subset",
];

fn cmd_attack(args: &AttackArgs) -> anyhow::Result<u8> {
    let mut defaults = Config::new();
    defaults.set("data", "digits");
    defaults.set("n-test", "500");
    defaults.set("data-noise", "0.05");
    defaults.set("test-images", "");
    defaults.set("test-labels", "");
    defaults.set("method", "ifgsm");
    defaults.set("eps", "0.031");
    defaults.set("alpha", &(1.0 / 255.0).to_string());
    defaults.set("iters", "20");
    defaults.set("cw-lr", "0.0006");
    defaults.set("kappa", "0");
    defaults.set("subset", "0");
    let mut cfg = args.uni.resolve(defaults)?;
    cfg.set("model", &args.model.display().to_string());
    cfg.set("method", &args.method);
    if let Some(v) = args.eps {
        cfg.set("eps", &v.to_string());
    }
    if let Some(v) = args.alpha {
        cfg.set("alpha", &v.to_string());
    }
    if let Some(v) = args.iters {
        cfg.set("iters", &v.to_string());
    }
    if let Some(v) = args.cw_lr {
        cfg.set("cw-lr", &v.to_string());
    }
    if let Some(v) = args.subset {
        cfg.set("subset", &v.to_string());
    }
    if let Some(v) = &args.data {
        cfg.set("data", v);
    }
    cfg.check_known(ATTACK_KEYS)?;
    args.uni.ensure_out_dir()?;

    let seed = args.uni.seed;
    let ck = Checkpoint::load(&args.model)?;
    let net = ck.network();
    let state = ck.state;

    let mut test_cfg = Config::new();
    test_cfg.set("data", &cfg.str_or("data", "digits"));
    test_cfg.set("n-test", &cfg.str_or("n-test", "500"));
    test_cfg.set("data-noise", &cfg.str_or("data-noise", "0.05"));
    test_cfg.set("test-images", &cfg.str_or("test-images", ""));
    test_cfg.set("test-labels", &cfg.str_or("test-labels", ""));
    let mut ds = load_split(&test_cfg, seed, Split::Test)?;
    let subset = cfg.usize_or("subset", 0)?;
    if subset > 0 && subset < ds.len() {
        ds = ds.take(subset);
    }

    let acfg = AttackConfig {
        eps: cfg.f64_or("eps", 0.031)?,
        alpha: cfg.f64_or("alpha", 1.0 / 255.0)?,
        iters: cfg.usize_or("iters", 20)?,
        cw_lr: cfg.f64_or("cw-lr", 0.0006)?,
        kappa: cfg.f64_or("kappa", 0.0)?,
        ..AttackConfig::default()
    };
    let method = cfg.str_or("method", "ifgsm");
    let mut attack_rng = derive_rng(seed, DOMAIN_ATTACK, 0);

    let idx: Vec<usize> = (0..ds.len()).collect();
    let (mut hits_clean, mut hits_adv) = (0usize, 0usize);
    let mut max_dist: f64 = 0.0;
    let mut sum_dist = 0.0;
    for chunk in idx.chunks(50) {
        let (batch, labels) = ds.batch(chunk);
        let clean_logits = net.logits_eval(&state, &batch)?;
        let adv = match method.as_str() {
            "fgsm" => attack::fgsm(&net, &state, &batch, &labels, &acfg)?,
            "ifgsm" => attack::ifgsm(&net, &state, &batch, &labels, &acfg)?,
            "cw" => attack::cw_linf(&net, &state, &batch, &labels, &acfg)?,
            "pgd" => attack::pgd(&net, &state, &batch, &labels, &acfg, &mut attack_rng)?,
            other => bail!("unknown attack method '{other}'"),
        };
        let adv_logits = net.logits_eval(&state, &adv)?;
        let k = clean_logits.shape()[1];
        for (i, &y) in labels.iter().enumerate() {
            let row = |t: &Tensor| {
                let d = &t.data()[i * k..(i + 1) * k];
                let mut best = 0;
                for (j, &v) in d.iter().enumerate() {
                    if v > d[best] {
                        best = j;
                    }
                }
                best
            };
            if row(&clean_logits) == y {
                hits_clean += 1;
            }
            if row(&adv_logits) == y {
                hits_adv += 1;
            }
        }
        let d = attack::linf_distance(&batch, &adv);
        max_dist = max_dist.max(d);
        sum_dist += d * labels.len() as f64;
    }
    let n = ds.len() as f64;
    let clean_acc = hits_clean as f64 / n;
    let adv_acc = hits_adv as f64 / n;
    println!(
        "{} on {} samples: clean {:.4}, adversarial {:.4}, max linf {:.6} (budget {})",
        method,
        ds.len(),
        clean_acc,
        adv_acc,
        max_dist,
        acfg.eps
    );

    let report_path = args.uni.out_dir.join("attack_report.txt");
    let mut rep = Config::new();
    rep.set("method", &method);
    rep.set("samples", &ds.len().to_string());
    rep.set("clean_accuracy", &clean_acc.to_string());
    rep.set("adversarial_accuracy", &adv_acc.to_string());
    rep.set("max_linf", &max_dist.to_string());
    rep.set("mean_batch_linf", &(sum_dist / n).to_string());
    rep.set("eps", &acfg.eps.to_string());
    fs::write(&report_path, rep.resolved_string())?;
    write_manifest(
        &args.uni.out_dir.join("manifest.txt"),
        &cfg,
        seed,
        &[("attack_report.txt", &report_path)],
    )?;
    Ok(0)
}

fn cmd_analyze(args: &AnalyzeArgs) -> anyhow::Result<u8> {
    let mut cfg = args.uni.resolve(Config::new())?;
    cfg.set("model", &args.model.display().to_string());
    cfg.check_known(&["model"])?;
    args.uni.ensure_out_dir()?;

    let ck = Checkpoint::load(&args.model)?;
    let net = ck.network();
    let sp = sparsity_report(&ck.state);
    let m_t = bound_statistic(&ck.state);
    let params = robuq::nets::param_count(&ck.state);
    let weights = robuq::nets::weight_param_count(&ck.state);

    println!("checkpoint: {}", args.model.display());
    println!(
        "scheme {} | epoch {} | lambda {:.6}",
        ck.state.scheme.name(),
        ck.state.epoch,
        ck.state.lambda
    );
    println!("parameters: {params} total, {weights} in weight matrices");
    println!(
        "weight sparsity {:.4} ({} / {} zeros), channel sparsity {:.4} ({} / {} dead filters)",
        sp.weight_sparsity, sp.zeros, sp.total, sp.channel_sparsity, sp.zero_channels, sp.channels
    );
    println!("weight-scale statistic M_t = {m_t:.6}");
    println!("per-layer:");
    for l in &sp.per_layer {
        println!(
            "  {} zeros {}/{} dead {}/{}",
            l.layer, l.zeros, l.total, l.zero_channels, l.channels
        );
    }

    let report_path = args.uni.out_dir.join("analyze_report.txt");
    let mut rep = Config::new();
    rep.set("scheme", ck.state.scheme.name());
    rep.set("epoch", &ck.state.epoch.to_string());
    rep.set("lambda", &ck.state.lambda.to_string());
    rep.set("params_total", &params.to_string());
    rep.set("params_weights", &weights.to_string());
    rep.set("weight_sparsity", &sp.weight_sparsity.to_string());
    rep.set("channel_sparsity", &sp.channel_sparsity.to_string());
    rep.set("m_t", &m_t.to_string());
    rep.set("ensemble", &net.spec.ensemble.to_string());
    fs::write(&report_path, rep.resolved_string())?;
    write_manifest(
        &args.uni.out_dir.join("manifest.txt"),
        &cfg,
        args.uni.seed,
        &[("analyze_report.txt", &report_path)],
    )?;
    Ok(0)
}

fn cmd_prune(args: &PruneArgs) -> anyhow::Result<u8> {
    let mut cfg = args.uni.resolve(Config::new())?;
    cfg.set("model", &args.model.display().to_string());
    cfg.set("check-n", &args.check_n.to_string());
    cfg.check_known(&["model", "check-n"])?;
    args.uni.ensure_out_dir()?;

    let ck = Checkpoint::load(&args.model)?;
    let net = ck.network();
    let before = robuq::nets::param_count(&ck.state);
    let (pruned_net, pruned_state, report) = prune_channels(&net, &ck.state)?;
    let after = robuq::nets::param_count(&pruned_state);

    // Exact-equivalence check on deterministic random inputs.
    let mut max_diff: f64 = 0.0;
    if args.check_n > 0 {
        use rand::Rng;
        let mut rng = derive_rng(args.uni.seed, DOMAIN_DATA, 0xC0DE);
        let spec = &net.spec;
        let numel = args.check_n * spec.in_channels * spec.in_h * spec.in_w;
        let data: Vec<f64> = (0..numel).map(|_| rng.random_range(0.0..1.0)).collect();
        let x = Tensor::new(
            vec![args.check_n, spec.in_channels, spec.in_h, spec.in_w],
            data,
        )?;
        let a = net.logits_eval(&ck.state, &x)?;
        let b = pruned_net.logits_eval(&pruned_state, &x)?;
        max_diff = a.max_abs_diff(&b);
    }

    println!(
        "pruned {} filters ({} masked only), parameters {} -> {} (-{})",
        report.pruned, report.masked_only, before, after, report.removed_params
    );
    println!("max |logit difference| on {} random inputs: {}", args.check_n, max_diff);

    let pruned_path = args.uni.out_dir.join("pruned.ckpt");
    Checkpoint::from_parts(&pruned_net, &pruned_state, ck.seed, &ck.config_digest)
        .save(&pruned_path)?;

    let report_path = args.uni.out_dir.join("prune_report.txt");
    let mut rep = Config::new();
    rep.set("filters_removed", &report.pruned.to_string());
    rep.set("filters_masked", &report.masked_only.to_string());
    rep.set("params_before", &before.to_string());
    rep.set("params_after", &after.to_string());
    rep.set("params_removed", &report.removed_params.to_string());
    rep.set("max_logit_diff", &max_diff.to_string());
    fs::write(&report_path, rep.resolved_string())?;
    write_manifest(
        &args.uni.out_dir.join("manifest.txt"),
        &cfg,
        args.uni.seed,
        &[("pruned.ckpt", &pruned_path), ("prune_report.txt", &report_path)],
    )?;

    if max_diff != 0.0 {
        eprintln!("pruning changed outputs (max diff {max_diff}); this indicates a bug");
        return Ok(2);
    }
    Ok(0)
}

fn cmd_verify(args: &VerifyArgs) -> anyhow::Result<u8> {
    let mut cfg = args.uni.resolve(Config::new())?;
    cfg.set("prop", &args.prop.to_string());
    cfg.set("trials", &args.trials.to_string());
    cfg.set("loss", &args.loss);
    cfg.check_known(&["prop", "trials", "loss"])?;
    args.uni.ensure_out_dir()?;

    let report = match args.prop {
        1 => verify_prop1(args.trials, args.uni.seed)?,
        2 => verify_prop2(args.trials, args.uni.seed, PhiLoss::parse(&args.loss)?)?,
        other => bail!("--prop must be 1 or 2, got {other}"),
    };
    println!(
        "claim {}: {} trials, {} violations, {} wrong-then-right samples",
        args.prop, report.trials, report.violations, report.e_samples
    );
    if let Some(w) = &report.witness {
        println!("witness: {w}");
    }

    let report_path = args.uni.out_dir.join("verify_report.txt");
    let mut rep = Config::new();
    rep.set("prop", &args.prop.to_string());
    rep.set("trials", &report.trials.to_string());
    rep.set("violations", &report.violations.to_string());
    rep.set("e_samples", &report.e_samples.to_string());
    rep.set("passed", if report.passed() { "true" } else { "false" });
    if let Some(w) = &report.witness {
        rep.set("witness", &w.replace('\n', " "));
    }
    fs::write(&report_path, rep.resolved_string())?;
    write_manifest(
        &args.uni.out_dir.join("manifest.txt"),
        &cfg,
        args.uni.seed,
        &[("verify_report.txt", &report_path)],
    )?;

    if !report.passed() {
        eprintln!("verification found counterexamples; see the witness above");
        return Ok(2);
    }
    Ok(0)
}

/// Multi-channel images are exported by stacking channels along rows,
/// since the IDX image format is single-channel.
fn exportable(ds: &DatasetHandle) -> anyhow::Result<DatasetHandle> {
    let (c, h, w) = ds.image_dims();
    if c == 1 {
        return Ok(ds.clone());
    }
    let images = Tensor::new(vec![ds.len(), 1, c * h, w], ds.images.data().to_vec())?;
    Ok(DatasetHandle::new(
        ds.name.clone(),
        ds.split,
        images,
        ds.labels.clone(),
        ds.classes,
    )?)
}

fn cmd_data(args: &DataArgs) -> anyhow::Result<u8> {
    let mut cfg = args.uni.resolve(Config::new())?;
    cfg.set("kind", &args.kind);
    cfg.set("n-train", &args.n_train.to_string());
    cfg.set("n-test", &args.n_test.to_string());
    cfg.set("noise", &args.noise.to_string());
    cfg.check_known(&["kind", "n-train", "n-test", "noise"])?;
    args.uni.ensure_out_dir()?;

    let kind = SyntheticKind::parse(&args.kind)?;
    let mut artifacts: Vec<(String, PathBuf)> = Vec::new();
    for (split, n) in [(Split::Train, args.n_train), (Split::Test, args.n_test)] {
        let ds = gen_synthetic(kind, n, args.noise, args.uni.seed, split)?;
        let tag = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let ip = args.uni.out_dir.join(format!("{}_{}_images.idx", kind.name(), tag));
        let lp = args.uni.out_dir.join(format!("{}_{}_labels.idx", kind.name(), tag));
        write_idx(&exportable(&ds)?, &ip, &lp)?;
        let mut hist = vec![0usize; ds.classes];
        for &l in &ds.labels {
            hist[l] += 1;
        }
        println!(
            "{tag}: {} samples, {} classes {:?} -> {}",
            ds.len(),
            ds.classes,
            hist,
            ip.display()
        );
        artifacts.push((format!("{}_{}_images.idx", kind.name(), tag), ip));
        artifacts.push((format!("{}_{}_labels.idx", kind.name(), tag), lp));
    }
    let refs: Vec<(&str, &Path)> = artifacts
        .iter()
        .map(|(n, p)| (n.as_str(), p.as_path()))
        .collect();
    write_manifest(&args.uni.out_dir.join("manifest.txt"), &cfg, args.uni.seed, &refs)?;
    Ok(0)
}

fn run() -> anyhow::Result<u8> {
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Attack(a) => cmd_attack(a),
        Cmd::Analyze(a) => cmd_analyze(a),
        Cmd::Prune(a) => cmd_prune(a),
        Cmd::Verify(a) => cmd_verify(a),
        Cmd::Data(a) => cmd_data(a),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
