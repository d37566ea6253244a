//! Command-line entry point: dataset generation, training, evaluation, and
//! cross-validation protocols driven by one TOML configuration.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use simplelog::{ColorChoice, CombinedLogger, Config, LevelFilter, TermLogger, TerminalMode, WriteLogger};

use physiosync::config::RunConfig;
use physiosync::dataset::{load_manifest, Dataset, DatasetManifest};
use physiosync::diagnostics;
use physiosync::nn::checkpoint;
use physiosync::trainer::{self, finetune::build_finetune_net, FoldResult, ProtocolReport};
use physiosync::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "physiosync",
    version,
    about = "Contrastive pre-training and fusion fine-tuning for multimodal physiological signals"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML configuration file; values not given fall back to the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset when no config file is given: `reference` or `desk`.
    #[arg(long, default_value = "reference")]
    preset: String,
    /// Override one key, e.g. `--set pretrain.epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for every random stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the resolved config, log, and artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset container under `--out`.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Contrastive pre-training on a dataset; saves `pretrain.ckpt`.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Supervised fine-tuning; saves `finetune.ckpt`.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        /// Pre-trained encoders (required unless `pretrain.enabled = false`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a fine-tuned checkpoint on every trial of a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Ten-fold cross-stimulus protocol.
    Cv10 {
        #[arg(long)]
        data: PathBuf,
        /// Folds run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Leave-one-subject-out protocol.
    Loso {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Validate a dataset and print its counts.
    Inspect {
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference gradient checks of every primitive and both losses.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Eval { .. } => "eval",
            Command::Cv10 { .. } => "cv10",
            Command::Loso { .. } => "loso",
            Command::Inspect { .. } => "inspect",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Synth { common }
            | Command::Pretrain { common, .. }
            | Command::Finetune { common, .. }
            | Command::Eval { common, .. }
            | Command::Cv10 { common, .. }
            | Command::Loso { common, .. }
            | Command::Inspect { common, .. }
            | Command::Gradcheck { common, .. } => common,
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::preset(&common.preset)?,
    };
    for o in &common.overrides {
        cfg.set(o)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn init_logging(out: Option<&Path>) -> Result<()> {
    let term = TermLogger::new(
        LevelFilter::Info,
        Config::default(),
        TerminalMode::Stderr,
        ColorChoice::Never,
    );
    let mut loggers: Vec<Box<dyn simplelog::SharedLogger>> = vec![term];
    if let Some(dir) = out {
        loggers.push(WriteLogger::new(
            LevelFilter::Info,
            Config::default(),
            File::create(dir.join("run.log"))?,
        ));
    }
    CombinedLogger::init(loggers).map_err(|e| Error::InvalidArgument(format!("logger: {e}")))
}

fn load_data(cfg: &RunConfig, path: &Path) -> Result<Dataset> {
    let manifest = load_manifest(path)?;
    let pre = cfg.data.preprocess(manifest.kind);
    Ok(Dataset::from_manifest(manifest, &pre)?)
}

fn write_curves(out: &Path, curves: &[trainer::LossCurve]) -> Result<()> {
    for c in curves {
        std::fs::write(out.join(c.file_name()), c.to_csv())?;
        info!("{}: {} epochs, kept epoch {:?}", c.label, c.rows.len(), c.best_epoch);
    }
    Ok(())
}

fn describe(m: &DatasetManifest) -> String {
    let mut s = format!(
        "dataset {} ({:?}): {} subjects, {} stimuli, {} trials, {} Hz",
        m.name,
        m.kind,
        m.subjects.len(),
        m.stimuli().len(),
        m.trials.len(),
        m.sample_rate_hz
    );
    for md in &m.modalities {
        s.push_str(&format!("\nmodality {}: {} channels", md.id, md.channels));
    }
    s
}

fn log_fold(f: &FoldResult) {
    info!("{}: accuracy {:.4}, f1 {:.4}", f.name, f.metrics.accuracy, f.metrics.f1);
}

fn report_protocol(report: &ProtocolReport) {
    let (a, f) = (report.accuracy(), report.f1());
    info!("accuracy {:.4} ± {:.4}, f1 {:.4} ± {:.4}", a.mean, a.std, f.mean, f.std);
}

fn run(cmd: &Command, cfg: &RunConfig, out: Option<&Path>) -> Result<bool> {
    let seed = cfg.seed;
    match cmd {
        Command::Synth { .. } => {
            let dir = out.expect("synth has an output directory");
            let mut sc = cfg.synth.clone();
            sc.seed = seed;
            let m = physiosync::synth::generate(&sc, dir)?;
            info!("wrote {}", describe(&m));
        }
        Command::Pretrain { data, .. } => {
            let out = out.expect("output directory");
            let d = load_data(cfg, data)?;
            let (train, val) = trainer::holdout(cfg, &d);
            info!("pre-training on {} trials, validating on {}", train.len(), val.len());
            let p = trainer::pretrain(cfg, &d, &train, &val, seed)?;
            write_curves(out, &p.curves)?;
            if p.skipped_steps > 0 {
                info!("skipped {} steps with non-finite gradients", p.skipped_steps);
            }
            checkpoint::save(&out.join("pretrain.ckpt"), &p.store, &[""], &cfg.to_toml())?;
        }
        Command::Finetune {
            data, checkpoint: ckpt, ..
        } => {
            let out = out.expect("output directory");
            let d = load_data(cfg, data)?;
            let pre = match (ckpt, cfg.pretrain.enabled) {
                (Some(path), _) => Some(checkpoint::load(path)?.0),
                (None, false) => None,
                (None, true) => {
                    return Err(Error::Checkpoint(
                        "fine-tuning needs --checkpoint unless pretrain.enabled = false".into(),
                    ))
                }
            };
            let (train, val) = trainer::holdout(cfg, &d);
            let ft = trainer::finetune(cfg, &d, &train, &val, pre.as_ref(), seed)?;
            write_curves(out, std::slice::from_ref(&ft.curve))?;
            checkpoint::save(&out.join("finetune.ckpt"), &ft.store, &[""], &cfg.to_toml())?;
        }
        Command::Eval {
            data, checkpoint: ckpt, ..
        } => {
            let out = out.expect("output directory");
            let d = load_data(cfg, data)?;
            let (archive, _) = checkpoint::load(ckpt)?;
            let (mut store, net) = build_finetune_net(cfg, &d, None, seed)?;
            checkpoint::restore(&mut store, &archive, "")?;
            let all: trainer::TrialSet = d.trials.iter().map(|t| (t.subject, t.stimulus)).collect();
            let metrics = trainer::evaluate(cfg, &net, &store, &d, &all)?;
            let report = ProtocolReport {
                folds: vec![FoldResult {
                    name: "all".into(),
                    metrics,
                    curves: Vec::new(),
                    skipped_steps: 0,
                }],
            };
            log_fold(&report.folds[0]);
            report.write(out, cfg.task.name())?;
        }
        Command::Cv10 { data, jobs, .. } | Command::Loso { data, jobs, .. } => {
            let d = load_data(cfg, data)?;
            let plans = if matches!(cmd, Command::Cv10 { .. }) {
                trainer::tenfold_plans(cfg, &d)?
            } else {
                trainer::loso_plans(cfg, &d)?
            };
            for p in &plans {
                trainer::audit(p)?;
            }
            info!("{} folds pass the leakage audit", plans.len());
            let report = trainer::run_protocol(cfg, &d, &plans, *jobs, out, &log_fold)?;
            report_protocol(&report);
        }
        Command::Inspect { data, .. } => {
            let m = load_manifest(data)?;
            println!("{}", describe(&m));
        }
        Command::Gradcheck { seeds, .. } => {
            let mut ok = true;
            for name in diagnostics::check_names() {
                let mut worst = 0.0f64;
                let mut passed = true;
                for s in 0..*seeds {
                    let o = diagnostics::run_check(name, s)?;
                    worst = worst.max(o.report.max_rel_error);
                    passed &= o.passed();
                }
                println!(
                    "{} {name}: max relative error {worst:.3e}",
                    if passed { "PASS" } else { "FAIL" }
                );
                ok &= passed;
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = cli.command.common();
    let cfg = match resolve(common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let out = match (&cli.command, &common.out) {
        (_, Some(o)) => Some(o.clone()),
        (Command::Inspect { .. } | Command::Gradcheck { .. }, None) => None,
        (cmd, None) => Some(PathBuf::from("runs").join(cmd.name())),
    };
    let setup = || -> Result<()> {
        if let Some(dir) = &out {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("config_resolved.toml"), cfg.to_toml())?;
        }
        init_logging(out.as_deref())
    };
    if let Err(e) = setup() {
        eprintln!("error[{}]: {e}", e.category());
        return ExitCode::from(e.exit_code() as u8);
    }
    info!("{} with seed {}", cli.command.name(), cfg.seed);
    match run(&cli.command, &cfg, out.as_deref()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            error!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
