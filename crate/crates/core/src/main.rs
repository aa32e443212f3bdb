use clap::{Parser, Subcommand};
use preskip::checkpoint;
use preskip::checks;
use preskip::error::{Error, Result};
use preskip::model::{generate, init_param_store, partition_params, ParamStore, Protocol};
use preskip::runconfig::RunConfig;
use preskip::train::{loss_csv, probe_train};
use preskip::{analyze, model};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Desk-scale lab for transformer attention-block variants: nonlinear
/// pre-projection, learned content-skip bypass, and LoRA injection, trained
/// as frozen probes on byte corpora.
#[derive(Parser)]
#[command(name = "preskip", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the built-in invariant, gradient, and oracle suites.
    Check {
        /// Seed for the randomized checks.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a variant as a frozen probe and write checkpoint + loss CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Raw byte corpus; overrides corpus_path from the config.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Output directory; overrides out_dir from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Variant name; overrides the config.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Evaluate perplexity of a checkpoint on a byte corpus.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
    },
    /// Print the parameter-overhead report for a config.
    Params {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        variant: Option<String>,
        /// Externally supplied base-model parameter count for the overhead
        /// column (for accounting against reference models).
        #[arg(long)]
        base_params: Option<u64>,
    },
    /// Print per-layer content-skip Frobenius norms from a checkpoint.
    SkipNorms {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Generate bytes from a checkpoint; raw bytes go to stdout.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prompt bytes (UTF-8 string).
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
        /// 0 is greedy argmax; > 0 samples from softmax(logits / t).
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        variant: Option<String>,
    },
}

fn load_config(
    path: &Path,
    variant: Option<&str>,
    seed: Option<u64>,
) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_file(path)?;
    if let Some(v) = variant {
        cfg.variant = v.to_string();
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_corpus(flag: Option<&Path>, cfg: &RunConfig) -> Result<Vec<u8>> {
    let path = match flag {
        Some(p) => p.to_path_buf(),
        None => PathBuf::from(cfg.corpus_path.clone().ok_or_else(|| {
            Error::Config("no corpus: pass --corpus or set corpus_path".into())
        })?),
    };
    Ok(std::fs::read(path)?)
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into())
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn load_validated_store(path: &Path, cfg: &RunConfig) -> Result<ParamStore<f32>> {
    let store = checkpoint::load(path)?;
    let model_cfg = cfg.model_config()?;
    model::validate_store(&store, &model_cfg)?;
    Ok(store)
}

fn cmd_train(
    config: &Path,
    corpus: Option<&Path>,
    out: Option<&Path>,
    seed: Option<u64>,
    variant: Option<&str>,
) -> Result<()> {
    let cfg = load_config(config, variant, seed)?;
    let model_cfg = cfg.model_config()?;
    let corpus_bytes = read_corpus(corpus, &cfg)?;
    let out_dir = match out {
        Some(p) => p.to_path_buf(),
        None => PathBuf::from(cfg.out_dir.clone().unwrap_or_else(|| "out".into())),
    };

    let mut store = init_param_store::<f32>(&model_cfg, cfg.seed)?;
    let trainable = partition_params(&mut store, Protocol::Probe)?;
    if trainable == 0 {
        eprintln!(
            "warning: variant {} has 0 trainable parameters; the probe will only measure loss",
            cfg.variant
        );
    }
    let result = probe_train(&mut store, &model_cfg, &corpus_bytes, &cfg.train_config())?;

    let ckpt_path = out_dir.join("checkpoint.bin");
    checkpoint::save(&store, &ckpt_path)?;
    let csv_path = out_dir.join("loss.csv");
    atomic_write(&csv_path, loss_csv(&result.history).as_bytes())?;
    eprintln!(
        "trained {} steps: loss {} -> {}",
        result.history.len(),
        result.initial_loss(),
        result.final_loss()
    );
    println!("{}", ckpt_path.display());
    println!("{}", csv_path.display());
    Ok(())
}

fn cmd_eval(
    config: &Path,
    ckpt: &Path,
    corpus: Option<&Path>,
    variant: Option<&str>,
) -> Result<()> {
    let cfg = load_config(config, variant, None)?;
    let store = load_validated_store(ckpt, &cfg)?;
    let corpus_bytes = read_corpus(corpus, &cfg)?;
    let report = analyze::perplexity(&store, &cfg.model_config()?, &corpus_bytes)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn cmd_params(config: &Path, variant: Option<&str>, base: Option<u64>) -> Result<()> {
    let cfg = load_config(config, variant, None)?;
    let report = analyze::count_params(&cfg.model_config()?, cfg.variant()?, base)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_skip_norms(ckpt: &Path) -> Result<()> {
    let store = checkpoint::load(ckpt)?;
    let report = analyze::skip_norms_from_store(&store)?;
    print!("{}", report.csv());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    config: &Path,
    ckpt: &Path,
    prompt: &str,
    max_new: usize,
    temperature: f64,
    seed: Option<u64>,
    variant: Option<&str>,
) -> Result<()> {
    let cfg = load_config(config, variant, seed)?;
    let store = load_validated_store(ckpt, &cfg)?;
    let model_cfg = cfg.model_config()?;
    let prompt_tokens: Vec<usize> = prompt.as_bytes().iter().map(|&b| b as usize).collect();
    let out = generate(&store, &model_cfg, &prompt_tokens, max_new, temperature, cfg.seed)?;
    let bytes: Vec<u8> = out.iter().map(|&t| t as u8).collect();
    std::io::stdout().write_all(&bytes)?;
    std::io::stdout().flush()?;
    Ok(())
}

fn cmd_check(seed: u64) -> Result<()> {
    let results = checks::run_all(seed);
    let (report, ok) = checks::render(&results);
    print!("{report}");
    if ok {
        Ok(())
    } else {
        Err(Error::Config("self-check failures".into()))
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Check { seed } => cmd_check(*seed),
        Command::Train { config, corpus, out, seed, variant } => cmd_train(
            config,
            corpus.as_deref(),
            out.as_deref(),
            *seed,
            variant.as_deref(),
        ),
        Command::Eval { config, checkpoint, corpus, variant } => {
            cmd_eval(config, checkpoint, corpus.as_deref(), variant.as_deref())
        }
        Command::Params { config, variant, base_params } => {
            cmd_params(config, variant.as_deref(), *base_params)
        }
        Command::SkipNorms { checkpoint } => cmd_skip_norms(checkpoint),
        Command::Generate { config, checkpoint, prompt, max_new, temperature, seed, variant } => {
            cmd_generate(
                config,
                checkpoint,
                prompt,
                *max_new,
                *temperature,
                *seed,
                variant.as_deref(),
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
