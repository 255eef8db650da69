use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use pix2next::backbone::{registry_root, ConvPyramid};
use pix2next::blob::write_blob;
use pix2next::config::RunConfig;
use pix2next::data::{load_manifest, make_synthetic_dataset};
use pix2next::metrics::{evaluate_dirs, BackendKind, Backends, FeatureBackendSpec};
use pix2next::trainer::{fit, list_images, FitOptions, Translator};
use pix2next::Error;

/// Name of the effective configuration written into every training output directory.
const EFFECTIVE_CONFIG: &str = "config.toml";

#[derive(Parser, Debug)]
#[command(name = "pix2next", version, about = "RGB to NIR/LWIR image translation")]
struct Cli {
    /// Seed for the command (training seed, synthetic data seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output; repeat for trace level.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic paired dataset.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Side length of the square images.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train from a TOML config. Any `--section.key=value` flag overrides a config entry.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the log, checkpoints and effective config.
        #[arg(long, default_value = "runs/run")]
        out: PathBuf,
        /// Continue from the newest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Translate every image in a directory with a trained generator.
    Translate {
        /// Checkpoint directory, run directory or checkpoints root.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score generated images against filename-matched ground truth.
    Evaluate {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value_t = BackendChoice::Stub)]
        backends: BackendChoice,
        /// Weights file or registry key for the inception-like backend.
        #[arg(long, default_value = "")]
        backend_weights: String,
        /// Embedding width of the inception-like backend.
        #[arg(long, default_value_t = 2048)]
        embedding_dim: usize,
        /// Directory for report.csv and report.json.
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Install backbone weights into the local registry.
    FetchWeights {
        /// Registry key, e.g. `resnet`, `vit`, `inception-like`.
        key: String,
        /// Weights blob to validate and copy.
        #[arg(long, conflicts_with = "seeded", required_unless_present = "seeded")]
        from: Option<PathBuf>,
        /// Write an untrained seeded stack with these comma-separated widths (input first).
        #[arg(long, value_delimiter = ',')]
        seeded: Option<Vec<usize>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendChoice {
    None,
    Stub,
    InceptionLike,
}

/// Splits `--a.b=c` and `--a.b c` config overrides out of the raw arguments.
fn split_overrides(args: Vec<OsString>) -> anyhow::Result<(Vec<OsString>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.to_str().and_then(|s| s.strip_prefix("--")) else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k, Some(v.to_string())),
            None => (flag, None),
        };
        if !key.contains('.') {
            rest.push(arg);
            continue;
        }
        let key = key.to_string();
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .and_then(|v| v.into_string().ok())
                .ok_or_else(|| anyhow!(Error::Config(format!("override `--{key}` needs a value"))))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

/// Exit status by failure category.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Spec(_)) => 2,
        Some(
            Error::Dataset(_)
            | Error::NoPairs { .. }
            | Error::DuplicateId(_)
            | Error::MissingFile(_)
            | Error::Decode { .. }
            | Error::Shape(_)
            | Error::Metric(_),
        ) => 3,
        Some(Error::MissingWeights { .. } | Error::CorruptBlob { .. } | Error::Checkpoint(_)) => 4,
        Some(Error::Diverged { .. } | Error::NonFinite(_)) => 5,
        _ => 1,
    }
}

fn category(code: u8) -> &'static str {
    match code {
        2 => "configuration error",
        3 => "input error",
        4 => "weights or checkpoint error",
        5 => "training diverged",
        _ => "error",
    }
}

fn synth(n: usize, out: &Path, size: usize, seed: u64) -> anyhow::Result<()> {
    if n == 0 {
        return Err(Error::Config("--n must be at least 1".into()).into());
    }
    if size == 0 || size % 8 != 0 {
        return Err(Error::Config(format!("--size {size} must be a positive multiple of 8")).into());
    }
    let m = make_synthetic_dataset(out, n, seed, (size, size))?;
    println!("wrote {} pairs to {}", m.entries.len(), out.display());
    Ok(())
}

fn train(
    config: &Path,
    out: &Path,
    resume: bool,
    seed: Option<u64>,
    overrides: &[(String, String)],
) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    let cfg = cfg.with_overrides(overrides)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let effective = out.join(EFFECTIVE_CONFIG);
    std::fs::write(&effective, cfg.to_toml_string()?).map_err(|e| Error::io(&effective, e))?;
    let manifest = load_manifest(&cfg.data.root, cfg.data.layout)?;
    let start = Instant::now();
    let summary = fit(
        &cfg,
        &manifest,
        out,
        &FitOptions {
            resume,
            halt_after: None,
        },
    )?;
    let last = summary
        .last
        .map(|r| format!(", final L_total {:.4} L_SSIM {:.4}", r.total, r.ssim))
        .unwrap_or_default();
    println!(
        "trained {}/{} steps in {:.1}s{last}; log {}; checkpoint {}",
        summary.steps,
        summary.total_steps,
        start.elapsed().as_secs_f64(),
        summary.log.display(),
        summary
            .checkpoint
            .as_ref()
            .map_or("none".to_string(), |p| p.display().to_string())
    );
    Ok(())
}

fn translate(checkpoint: &Path, input: &Path, output: &Path) -> anyhow::Result<()> {
    let start = Instant::now();
    let inputs = list_images(input)?;
    if inputs.is_empty() {
        return Err(Error::Dataset(format!("no inputs in {}", input.display())).into());
    }
    let translator = Translator::load(checkpoint)?;
    let results = translator.translate_files(&inputs, output)?;
    let mut failed = 0;
    for (src, r) in &results {
        if let Err(e) = r {
            failed += 1;
            eprintln!("failed: {}: {e}", src.display());
        }
    }
    println!(
        "translated {} of {} images into {} in {:.2}s",
        results.len() - failed,
        results.len(),
        output.display(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(Error::Dataset(format!("{failed} of {} inputs failed", results.len())).into());
    }
    Ok(())
}

fn evaluate(
    gen: &Path,
    gt: &Path,
    choice: BackendChoice,
    weights: String,
    embedding_dim: usize,
    seed: Option<u64>,
    out: &Path,
) -> anyhow::Result<()> {
    let backends = match choice {
        BackendChoice::None => Backends::None,
        BackendChoice::Stub => match seed {
            Some(seed) => Backends::Spec(FeatureBackendSpec {
                seed,
                ..FeatureBackendSpec::default()
            }),
            None => Backends::Stub,
        },
        BackendChoice::InceptionLike => Backends::Spec(FeatureBackendSpec {
            kind: BackendKind::InceptionLike,
            weights,
            embedding_dim,
            seed: 0,
        }),
    };
    let report = evaluate_dirs(gen, gt, &backends)?;
    let (csv, json) = report.write(out)?;
    print!("{}", report.table());
    for (metric, reason) in &report.skipped {
        println!("skipped {metric}: {reason}");
    }
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(())
}

fn fetch_weights(key: &str, from: Option<&Path>, seeded: Option<&[usize]>, seed: u64) -> anyhow::Result<()> {
    if key.is_empty() || key.contains(['/', '\\']) {
        return Err(Error::Config(format!("invalid registry key `{key}`")).into());
    }
    let root = registry_root();
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let dest = root.join(format!("{key}.bin"));
    let desc = match (from, seeded) {
        (Some(src), _) => {
            let stack = ConvPyramid::load(src, key)?;
            std::fs::copy(src, &dest).map_err(|e| Error::io(&dest, e))?;
            format!("{} stages from {}", stack.depth(), src.display())
        }
        (None, Some(widths)) => {
            if widths.len() < 2 || widths[0] != 3 || widths.contains(&0) {
                return Err(Error::Config("--seeded widths must start at 3 and list at least one stage".into()).into());
            }
            let stack = ConvPyramid::seeded(widths, 3, seed, 0x5EED_0200)?;
            write_blob(&dest, &stack.to_blob()?)?;
            log::warn!("{key}: seeded weights are untrained stand-ins");
            format!("untrained seeded stack {widths:?}")
        }
        (None, None) => return Err(Error::Config("pass --from or --seeded".into()).into()),
    };
    println!("installed {key} ({desc}) at {}", dest.display());
    Ok(())
}

fn run(cli: Cli, overrides: &[(String, String)]) -> anyhow::Result<()> {
    if !overrides.is_empty() && !matches!(cli.command, Command::Train { .. }) {
        let keys: Vec<&str> = overrides.iter().map(|(k, _)| k.as_str()).collect();
        return Err(Error::Config(format!("config overrides apply to `train` only: {}", keys.join(", "))).into());
    }
    match cli.command {
        Command::Synth { n, out, size } => synth(n, &out, size, cli.seed.unwrap_or(0)),
        Command::Train { config, out, resume } => train(&config, &out, resume, cli.seed, overrides)
            .with_context(|| format!("training with {}", config.display())),
        Command::Translate {
            checkpoint,
            input,
            output,
        } => translate(&checkpoint, &input, &output),
        Command::Evaluate {
            gen,
            gt,
            backends,
            backend_weights,
            embedding_dim,
            out,
        } => evaluate(&gen, &gt, backends, backend_weights, embedding_dim, cli.seed, &out),
        Command::FetchWeights { key, from, seeded } => {
            fetch_weights(&key, from.as_deref(), seeded.as_deref(), cli.seed.unwrap_or(0))
        }
    }
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args_os().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("{}: {e:#}", category(code));
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(args: &[&str]) -> Vec<OsString> {
        args.iter().map(OsString::from).collect()
    }

    #[test]
    fn overrides_are_split_from_regular_flags() {
        let (rest, o) = split_overrides(os(&[
            "pix2next",
            "train",
            "--config",
            "a.toml",
            "--train.attention=B-only",
            "--data.resize",
            "[64, 64]",
            "--resume",
        ]))
        .unwrap();
        assert_eq!(rest, os(&["pix2next", "train", "--config", "a.toml", "--resume"]));
        assert_eq!(
            o,
            vec![
                ("train.attention".to_string(), "B-only".to_string()),
                ("data.resize".to_string(), "[64, 64]".to_string())
            ]
        );
        assert!(split_overrides(os(&["pix2next", "--train.seed"])).is_err());
    }

    #[test]
    fn errors_map_to_categories() {
        assert_eq!(exit_code(&Error::Config("x".into()).into()), 2);
        assert_eq!(exit_code(&Error::Dataset("x".into()).into()), 3);
        assert_eq!(exit_code(&Error::Checkpoint("x".into()).into()), 4);
        let wrapped = anyhow::Error::from(Error::Config("x".into())).context("training");
        assert_eq!(exit_code(&wrapped), 2);
        assert_eq!(exit_code(&anyhow!("other")), 1);
    }
}
