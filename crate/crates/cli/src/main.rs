use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use haug::io::checkpoint::load_checkpoint;
use haug::io::config::Config;
use haug::io::dataset::{load_dataset, Dataset};
use haug::io::synthetic::{generate_synthetic, manifest_path, write_synthetic};
use haug::model::Model;
use haug::probes::{
    aug_probe, invariance_report, linear_probe, rotation_csv, rotation_placement_experiment, variant_mean, InvKind,
    InvarianceReport, ProbeOptions, ProbeRepr, ProbeResult,
};
use haug::trainer::run_pretrain;

#[derive(Parser, Debug)]
#[command(name = "haug", version, about = "Hierarchical augmentation invariance for siamese self-supervised learning")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Config file (`key = value` lines under `[section]` headers).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set augment.mode=uniform`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Overrides `train.seed`; also seeds the probes.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain on `data.train`; writes metrics.csv and checkpoints.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Checkpoint every N epochs (0: final only).
        #[arg(long, value_name = "EPOCHS")]
        ckpt_every: Option<usize>,
    },
    /// Linear probe on frozen stage features.
    LinearProbe {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to probe; a randomly initialized model when absent.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        stage: Option<usize>,
        /// Fail unless the checkpoint beats a random-init backbone.
        #[arg(long)]
        check: bool,
    },
    /// Predict the color-jitter strength bucket from `e` and `h(e)`.
    AugProbe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Checkpoint trained without expansion, probed for comparison.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Fail unless acc(e) beats acc(h(e)) and, with --baseline, the baseline's acc(e).
        #[arg(long)]
        check: bool,
    },
    /// Per-stage cosine invariance of frozen features to each transform.
    InvarianceReport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Comma-separated transforms (default: all).
        #[arg(long, value_delimiter = ',')]
        kinds: Vec<InvKind>,
        /// Fail unless flip invariance grows from stage 1 to 4 and crop
        /// invariance matches or beats the untrained model at every stage.
        #[arg(long)]
        check: bool,
    },
    /// Pretrain without rotation and with rotation from stage 1 and 4, then probe each.
    RotationStudy {
        #[command(flatten)]
        common: Common,
        /// Fail unless rotation from stage 4 probes at least as well as from stage 1.
        #[arg(long)]
        check: bool,
    },
    /// Write a synthetic shape/color dataset and its class-pair manifest.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    for s in &common.set {
        cfg.set(s)?;
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(cfg: &Config, ckpt: Option<&Path>) -> Result<Model> {
    let mut model = Model::new(cfg.model_config()?, cfg.train.seed)?;
    if let Some(path) = ckpt {
        load_checkpoint(path, &mut model, None)?;
    }
    Ok(model)
}

fn load_split(cfg: &Config, path: &Path) -> Result<Dataset> {
    let s = cfg.data.image_size;
    Ok(load_dataset(path, s, s)?)
}

fn write_out(dir: &Path, name: &str, body: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn probe_csv(results: &[&ProbeResult]) -> String {
    let mut out = format!("{}\n", ProbeResult::CSV_HEADER);
    for r in results {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Writes `summary.txt`, echoes it, and reports whether every check held.
fn finish(dir: &Path, summary: &str, checks: &[(String, bool)]) -> Result<bool> {
    let mut text = summary.to_string();
    for (name, ok) in checks {
        let _ = writeln!(text, "{} {name}", if *ok { "PASS" } else { "FAIL" });
    }
    write_out(dir, "summary.txt", &text)?;
    print!("{text}");
    Ok(checks.iter().all(|(_, ok)| *ok))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { n, classes, seed, size, out } => {
            let data = generate_synthetic(n, classes, seed, size)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            write_synthetic(&out, &data, classes)?;
            println!("wrote {} images to {} ({})", n, out.display(), manifest_path(&out).display());
            Ok(true)
        }
        Command::Pretrain { common, ckpt_every } => {
            let mut cfg = load_config(&common)?;
            if let Some(k) = ckpt_every {
                cfg.train.ckpt_every = k;
            }
            write_out(&common.out, "config.cfg", &cfg.render())?;
            let run = run_pretrain(&cfg, &common.out, &mut |e| {
                eprintln!(
                    "epoch {:>3}  L1 {:.4}  L2 {:.4}  L3 {:.4}  L4 {:.4}  overall {:.4}",
                    e.epoch, e.mean[0], e.mean[1], e.mean[2], e.mean[3], e.mean_overall
                );
            })?;
            if let Some(p) = &run.checkpoint {
                println!("checkpoint {}", p.display());
            }
            if let Some(p) = &run.metrics {
                println!("metrics {}", p.display());
            }
            Ok(true)
        }
        Command::LinearProbe { common, ckpt, stage, check } => {
            let cfg = load_config(&common)?;
            let stage = stage.unwrap_or(cfg.eval.stage);
            let train = load_split(&cfg, &cfg.data.train)?;
            let test = load_split(&cfg, &cfg.data.test)?;
            let opts = ProbeOptions::from(&cfg.eval);
            let seed = cfg.train.seed;
            let model = load_model(&cfg, ckpt.as_deref())?;
            let result = linear_probe(&model, &train, &test, stage, &opts, seed)?;
            let mut results = vec![result.clone()];
            let mut checks = Vec::new();
            if check {
                let mut random = linear_probe(&load_model(&cfg, None)?, &train, &test, stage, &opts, seed)?;
                random.task = format!("{}_random_init", random.task);
                checks.push((
                    format!("pretrained {:.4} > random-init {:.4}", result.accuracy, random.accuracy),
                    result.accuracy > random.accuracy,
                ));
                results.push(random);
            }
            let refs: Vec<&ProbeResult> = results.iter().collect();
            write_out(&common.out, "linear_probe.csv", &probe_csv(&refs))?;
            finish(&common.out, &format!("linear probe stage {stage}: {:.4}\n", result.accuracy), &checks)
        }
        Command::AugProbe { common, ckpt, baseline, check } => {
            let cfg = load_config(&common)?;
            let images = load_split(&cfg, &cfg.data.test)?.images;
            let e = &cfg.eval;
            let opts = ProbeOptions::from(e);
            let seed = cfg.train.seed;
            let s = &cfg.augment.settings;
            let probe = |model: &Model, repr| {
                aug_probe(model, &images, s, repr, e.n_buckets, e.aug_probe_train, e.aug_probe_test, &opts, seed)
            };
            let model = load_model(&cfg, ckpt.as_deref())?;
            let re = probe(&model, ProbeRepr::Features)?;
            let rh = probe(&model, ProbeRepr::Projection)?;
            let mut summary = format!(
                "aug probe (chance {:.4}): e {:.4}  h(e) {:.4}\n",
                1.0 / e.n_buckets as f64,
                re.accuracy,
                rh.accuracy
            );
            let mut checks =
                vec![(format!("acc(e) {:.4} > acc(h(e)) {:.4}", re.accuracy, rh.accuracy), re.accuracy > rh.accuracy)];
            let mut results = vec![re.clone(), rh];
            if let Some(path) = baseline {
                let mut bcfg = cfg.clone();
                bcfg.model.expansion.clear();
                let mut rb = probe(&load_model(&bcfg, Some(&path))?, ProbeRepr::Features)?;
                rb.task = format!("{}_baseline", rb.task);
                let _ = writeln!(summary, "baseline e {:.4}", rb.accuracy);
                checks.push((
                    format!("acc(e) {:.4} > baseline acc(e) {:.4}", re.accuracy, rb.accuracy),
                    re.accuracy > rb.accuracy,
                ));
                results.push(rb);
            }
            let refs: Vec<&ProbeResult> = results.iter().collect();
            write_out(&common.out, "aug_probe.csv", &probe_csv(&refs))?;
            finish(&common.out, &summary, if check { &checks } else { &[] })
        }
        Command::InvarianceReport { common, ckpt, kinds, check } => {
            let cfg = load_config(&common)?;
            let mut kinds = if kinds.is_empty() { InvKind::ALL.to_vec() } else { kinds };
            if check {
                for k in [InvKind::HFlip, InvKind::Crop] {
                    if !kinds.contains(&k) {
                        kinds.push(k);
                    }
                }
            }
            let mut images = load_split(&cfg, &cfg.data.test)?.images;
            images.truncate(cfg.eval.invariance_samples);
            let s = &cfg.augment.settings;
            let report = invariance_report(&load_model(&cfg, ckpt.as_deref())?, &images, &kinds, s)?;
            let untrained = invariance_report(&load_model(&cfg, None)?, &images, &kinds, s)?;
            write_out(&common.out, "invariance.csv", &report.to_csv())?;
            write_out(&common.out, "invariance_untrained.csv", &untrained.to_csv())?;
            let mut checks = Vec::new();
            if check {
                checks = invariance_checks(&report, &untrained);
            }
            finish(&common.out, &report.to_csv(), &checks)
        }
        Command::RotationStudy { common, check } => {
            let cfg = load_config(&common)?;
            let train = load_split(&cfg, &cfg.data.train)?;
            let test = load_split(&cfg, &cfg.data.test)?;
            let rows = rotation_placement_experiment(&cfg, &train, &test, &mut |s| eprintln!("{s}"))?;
            write_out(&common.out, "rotation_study.csv", &rotation_csv(&rows))?;
            let (none, r1, r4) =
                (variant_mean(&rows, "none"), variant_mean(&rows, "from_stage1"), variant_mean(&rows, "from_stage4"));
            let summary = format!("mean probe: none {none:.4}  from_stage1 {r1:.4}  from_stage4 {r4:.4}\n");
            let checks = vec![(format!("from_stage4 {r4:.4} >= from_stage1 {r1:.4}"), r4 >= r1)];
            finish(&common.out, &summary, if check { &checks } else { &[] })
        }
    }
}

fn invariance_checks(report: &InvarianceReport, untrained: &InvarianceReport) -> Vec<(String, bool)> {
    let get = |r: &InvarianceReport, stage, kind| r.get(stage, kind).unwrap_or(f64::NAN);
    let (f1, f4) = (get(report, 1, InvKind::HFlip), get(report, 4, InvKind::HFlip));
    let mut checks = vec![(format!("flip invariance stage4 {f4:.4} > stage1 {f1:.4}"), f4 > f1)];
    for stage in 1..=4 {
        let (c, u) = (get(report, stage, InvKind::Crop), get(untrained, stage, InvKind::Crop));
        checks.push((format!("crop invariance stage{stage} {c:.4} >= untrained {u:.4}"), c >= u));
    }
    checks
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<haug::Error>()
                .is_some_and(|e| matches!(e, haug::Error::InvalidConfig(_) | haug::Error::Config { .. }))
            {
                return ExitCode::from(2);
            }
            ExitCode::from(1)
        }
    }
}
