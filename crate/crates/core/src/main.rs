use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use hypopose::decoder::{decode, DecoderConfig};
use hypopose::harness::checkpoint::Checkpoint;
use hypopose::harness::config::ExperimentConfig;
use hypopose::harness::{dataset, evaluate, fixture, gradsuite, train, write_reports, Model};
use hypopose::metrics::Protocol;
use hypopose::Error;

#[derive(Parser)]
#[command(name = "hypopose", version, about = "Multi-hypothesis 3D pose decoding and training experiments")]
struct Cli {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file, for `decode`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Generate {
        #[arg(long, default_value_t = 2000)]
        count: usize,
    },
    /// Train detector and discriminator on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Selection protocols; the config's list when omitted.
        #[arg(long = "protocol")]
        protocols: Vec<Protocol>,
    },
    /// Decode one heatmap file into hypotheses (JSON).
    Decode {
        input: PathBuf,
        #[arg(long)]
        n_hypo: Option<usize>,
        #[arg(long)]
        n_w: Option<usize>,
    },
    /// Check every analytic gradient against finite differences.
    Gradcheck,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Numeric(anyhow::Error),
}

fn classify(e: anyhow::Error) -> Failure {
    let numeric = e
        .chain()
        .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::NonFinite(_) | Error::SamplingExhausted { .. })));
    if numeric {
        Failure::Numeric(e)
    } else {
        Failure::Usage(e)
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn digest_files(paths: &[PathBuf]) -> anyhow::Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        h.update(std::fs::read(p).with_context(|| format!("reading {}", p.display()))?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Generate { count } => {
            let cfg = load_config(cli).map_err(Failure::Usage)?;
            let dir = out_dir(cli, "data");
            let ds = dataset::generate(&cfg.data, *count, cfg.seed).map_err(|e| classify(e.into()))?;
            dataset::save(&ds, &dir).map_err(|e| Failure::Usage(e.into()))?;
            let digest = digest_files(&[dir.join(dataset::INDEX_FILE), dir.join(dataset::RECORDS_FILE)]).map_err(Failure::Usage)?;
            println!("wrote {} records to {}", ds.len(), dir.display());
            println!("sha256 {digest}");
        }
        Command::Train { data } => {
            let cfg = load_config(cli).map_err(Failure::Usage)?;
            let dir = out_dir(cli, "run");
            let ds = dataset::load(data)
                .with_context(|| format!("loading dataset {}", data.display()))
                .map_err(Failure::Usage)?;
            std::fs::create_dir_all(&dir).map_err(|e| Failure::Usage(e.into()))?;
            let text = cfg.to_toml_string().map_err(|e| Failure::Usage(e.into()))?;
            std::fs::write(dir.join("config.toml"), text).map_err(|e| Failure::Usage(e.into()))?;
            let outcome = train(&cfg, &ds, Some(&dir)).map_err(|e| classify(e.into()))?;
            if let Some(last) = outcome.log.last() {
                println!("trained {} epochs, final render loss {:.6}", last.epoch, last.losses.render);
            }
            for r in &outcome.val_reports {
                println!("validation {}: mpjpe {:.3} mm", r.protocol, r.mpjpe);
            }
        }
        Command::Eval {
            checkpoint,
            data,
            protocols,
        } => {
            let cfg = load_config(cli).map_err(Failure::Usage)?;
            let dir = out_dir(cli, "eval");
            let ck = Checkpoint::load(checkpoint, &cfg.hash().map_err(|e| Failure::Usage(e.into()))?)
                .with_context(|| format!("loading checkpoint {}", checkpoint.display()))
                .map_err(Failure::Usage)?;
            let model = Model::from_checkpoint(&cfg, &ck).map_err(|e| Failure::Usage(e.into()))?;
            let ds = dataset::load(data)
                .with_context(|| format!("loading dataset {}", data.display()))
                .map_err(Failure::Usage)?;
            let protocols = if protocols.is_empty() { cfg.eval.protocols.clone() } else { protocols.clone() };
            let reports = evaluate(&model, &ds, &protocols).map_err(|e| classify(e.into()))?;
            write_reports(&reports, &dir).map_err(|e| Failure::Usage(e.into()))?;
            for r in &reports {
                println!("{}", r.csv_row());
            }
        }
        Command::Decode { input, n_hypo, n_w } => {
            let mut dcfg = match &cli.config {
                Some(_) => load_config(cli).map_err(Failure::Usage)?.decoder,
                None => DecoderConfig::default(),
            };
            dcfg.n_hypo = n_hypo.unwrap_or(dcfg.n_hypo);
            dcfg.n_w = n_w.unwrap_or(dcfg.n_w);
            let h = fixture::read_heatmap(input)
                .with_context(|| format!("reading heatmap {}", input.display()))
                .map_err(classify)?;
            let set = decode(&h, &dcfg).map_err(|e| classify(e.into()))?;
            let json = serde_json::to_string_pretty(&set).map_err(|e| Failure::Usage(e.into()))?;
            match &cli.out {
                Some(p) => write_text(p, &json).map_err(Failure::Usage)?,
                None => println!("{json}"),
            }
        }
        Command::Gradcheck => {
            let results = gradsuite::run_gradient_suite(cli.seed.unwrap_or(0)).map_err(|e| classify(e.into()))?;
            let mut worst: f64 = 0.0;
            for r in &results {
                println!("{:<28} {:.3e}", r.name, r.max_relative_error);
                worst = worst.max(r.max_relative_error);
            }
            println!("max relative error {worst:.3e}");
            if !(worst < gradsuite::TOLERANCE) {
                return Err(Failure::Numeric(anyhow::anyhow!("gradient check exceeded {:e}", gradsuite::TOLERANCE)));
            }
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    if path.is_dir() {
        bail!("{} is a directory", path.display());
    }
    std::fs::write(path, format!("{text}\n"))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Numeric(e)) => {
            eprintln!("numeric failure: {e:#}");
            ExitCode::from(2)
        }
    }
}
