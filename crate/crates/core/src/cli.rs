//! `zsad` command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::feature_io::{
    load_split, read_bundle, read_manifest, read_textbank, synth_dataset, write_synth, Split,
    SynthSpec,
};
use crate::head::infer;
use crate::map_io::{write_pfm, write_pgm};
use crate::metrics::{evaluate, evaluate_baseline};
use crate::training::train_from_manifest;

#[derive(Debug, Parser)]
#[command(name = "zsad", version, about = "Adapter head for zero-shot anomaly localization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (bundles, manifest, text bank).
    Synth(SynthArgs),
    /// Check bundles, text banks and manifests against their invariants.
    Validate(ValidateArgs),
    /// Train an adapter stack and write a checkpoint.
    Train(TrainArgs),
    /// Pixel AUROC / max-F1 over the test split.
    Eval(EvalArgs),
    /// Write the anomaly map of one bundle.
    Infer(InferArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML generator settings; defaults when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// A .adft/.adtx/.tsv file, or a directory holding them.
    #[arg(long)]
    pub features: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub textbank: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step loss log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub textbank: Option<PathBuf>,
    #[arg(long, required_unless_present = "baseline")]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` report file.
    #[arg(long)]
    pub report: PathBuf,
    /// Evaluate the training-free channel-mean map instead of a checkpoint.
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub textbank: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_pfm: PathBuf,
    #[arg(long)]
    pub out_pgm: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn manifest_base(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default()
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(p) => SynthSpec::load(p)?,
        None => SynthSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let data = synth_dataset(&spec)?;
    write_synth(&data, &args.out)?;
    println!(
        "wrote {} bundles to {}",
        data.bundles.len(),
        args.out.display()
    );
    Ok(())
}

fn check_file(path: &Path) -> Option<Result<()>> {
    let ext = path.extension()?.to_str()?;
    Some(match ext {
        "adft" => read_bundle(path).map(|_| ()),
        "adtx" => read_textbank(path).map(|_| ()),
        "tsv" => read_manifest(path).and_then(|m| {
            let base = manifest_base(path);
            for e in &m.entries {
                let p = base.join(&e.path);
                if !p.is_file() {
                    return Err(Error::Validation(format!(
                        "listed bundle {} does not exist",
                        p.display()
                    )));
                }
            }
            Ok(())
        }),
        _ => return None,
    })
}

/// Returns the number of problems found.
pub fn cmd_validate(args: &ValidateArgs) -> Result<usize> {
    let files = if args.features.is_dir() {
        let mut files = std::fs::read_dir(&args.features)
            .map_err(|e| Error::io(&args.features, e))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io(&args.features, e))?;
        files.sort();
        files
    } else {
        vec![args.features.clone()]
    };
    let (mut checked, mut problems) = (0, 0);
    for f in &files {
        match check_file(f) {
            None if files.len() == 1 => {
                return Err(Error::Validation(format!(
                    "{}: unrecognized file type",
                    f.display()
                )))
            }
            None => {}
            Some(Ok(())) => checked += 1,
            Some(Err(e)) => {
                checked += 1;
                problems += 1;
                println!("{}: {}: {e}", f.display(), e.category());
            }
        }
    }
    println!("{checked} files checked, {problems} with problems");
    Ok(problems)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let manifest = read_manifest(&args.manifest)?;
    let bank = read_textbank(&args.textbank)?;
    let report = train_from_manifest(&manifest, &manifest_base(&args.manifest), &bank, &cfg)?;
    save_checkpoint(&report.stack, &args.out)?;
    if let Some(log) = &args.log {
        report.write_loss_log(log)?;
    }
    if let Some(last) = report.epochs.last() {
        println!(
            "trained {} steps, final epoch loss {:.6} (cm {:.6}, aacm {:.6})",
            report.steps.len(),
            last.total,
            last.cm,
            last.aacm
        );
    }
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let manifest = read_manifest(&args.manifest)?;
    let loaded = load_split(&manifest, &manifest_base(&args.manifest), Split::Test)?;
    let bundles: Vec<_> = loaded.iter().map(|(_, b)| b).collect();
    let names: Vec<String> = loaded.iter().map(|(p, _)| p.display().to_string()).collect();
    let report = if args.baseline {
        evaluate_baseline(&bundles, cfg.execution)?
    } else {
        let textbank = args
            .textbank
            .as_ref()
            .ok_or_else(|| Error::Config("--textbank is required without --baseline".into()))?;
        let bank = read_textbank(textbank)?;
        let ckpt = args.ckpt.as_ref().expect("clap enforces --ckpt");
        let stack = load_checkpoint(ckpt, &cfg)?;
        evaluate(&bundles, &stack, &bank, &cfg)?
    };
    report.write_key_values(&args.report)?;
    print!("{}", report.to_text(Some(&names)));
    Ok(())
}

pub fn cmd_infer(args: &InferArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let bundle = read_bundle(&args.bundle)?;
    let bank = read_textbank(&args.textbank)?;
    let stack = load_checkpoint(&args.ckpt, &cfg)?;
    let map = infer(&bundle, &stack, &bank, &cfg)?.map;
    write_pfm(&map.scores, &args.out_pfm)?;
    if let Some(pgm) = &args.out_pgm {
        write_pgm(&map.scores, pgm)?;
    }
    Ok(())
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Validate(a) => match cmd_validate(a) {
            Ok(0) => Ok(()),
            Ok(_) => return 1,
            Err(e) => Err(e),
        },
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}: {e}", e.category());
            2
        }
    }
}
