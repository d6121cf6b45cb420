//! `dlpo`: pretraining, fine-tuning, evaluation, verification and plot export.
//!
//! Exit codes: 0 success, 1 check or run failure, 2 usage or configuration error.

mod plotdata;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use dlpo_core::checkpoint::load_checkpoint_checked;
use dlpo_core::trainer::{ground_truth_report, write_reports};
use dlpo_core::verify::{run_suite, Suite, VerifyOptions};
use dlpo_core::{evaluate_checkpoint, finetune, save_checkpoint, Algo, Lab, RunConfig, SplitName};

/// Relative artifact paths are resolved under this directory when it is set.
const OUT_ROOT_ENV: &str = "DLPO_OUT_ROOT";

#[derive(Parser)]
#[command(name = "dlpo", version, about = "Toy diffusion waveform lab with policy-gradient fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration. Missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set beta=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default configuration as TOML.
    Defaults,
    /// Pretrain the denoiser on the training split and write a checkpoint.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a pretrained checkpoint with one objective.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// One of rwr, ddpo, dpok, klinr, dlpo, onlydl. Overrides the config.
        #[arg(long)]
        algo: Option<Algo>,
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score checkpoints on a split next to the clean templates.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint to score. Repeat to compare several.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, default_value = "test")]
        split: SplitName,
        /// Samples per condition (defaults to eval_samples_per_condition).
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run invariant suites. Exits 1 if any check fails.
    Verify {
        /// grad, bias, reduction or schedule. Repeatable; all suites when omitted.
        #[arg(long)]
        suite: Vec<Suite>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Bias reports are appended to this file.
        #[arg(long, default_value = "verify.log")]
        log: PathBuf,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Reshape metrics.csv files into long format for plotting.
    Plotdata {
        /// A run directory, a directory of run directories, or a long-format CSV.
        run_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Marks errors that should exit with the usage code.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<UsageError>()) {
        return 2;
    }
    match err.downcast_ref::<dlpo_core::Error>() {
        Some(dlpo_core::Error::Config(_) | dlpo_core::Error::InvalidArgument(_) | dlpo_core::Error::EmptySplit(_)) => 2,
        _ => 1,
    }
}

fn artifact_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) if !path.is_file() => return Err(usage(format!("config file not found: {}", path.display()))),
        Some(path) => RunConfig::load(path).map_err(|e| usage(e.to_string()))?,
        None => RunConfig::default(),
    };
    let mut overrides: Vec<(String, String, &str)> = args
        .set
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string(), "--set"))
                .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))
        })
        .collect::<Result<_>>()?;
    if let Some(seed) = args.seed {
        overrides.push(("seed".into(), seed.to_string(), "--seed"));
    }
    for (key, value, flag) in overrides {
        let old = cfg.get(&key).unwrap_or_else(|| "?".into());
        cfg.set(&key, &value).map_err(|e| usage(e.to_string()))?;
        eprintln!("override {key} = {} (was {old}) from {flag}", cfg.get(&key).unwrap_or(value));
    }
    Ok(cfg)
}

fn echo_config(cfg: &RunConfig) {
    eprintln!("# effective config\n{}", cfg.to_toml_string());
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    Ok(())
}

fn cmd_pretrain(args: &ConfigArgs, out: &Path) -> Result<ExitCode> {
    let cfg = load_config(args)?;
    echo_config(&cfg);
    let out = artifact_path(out);
    let (fine, _) = cfg.schedules()?;
    let scorer = cfg.scorer()?;
    let (params, report) = cfg.pretrain_model(&scorer, &fine)?;
    save_checkpoint(&params, &cfg.checkpoint_meta(cfg.pretrain_steps, 0), &out)?;
    let metrics = out.with_extension("pretrain.csv");
    let mut w = csv::Writer::from_path(&metrics).with_context(|| format!("cannot write {}", metrics.display()))?;
    for row in &report.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    println!(
        "pretrained {} steps, final loss {:.4}: {}",
        cfg.pretrain_steps,
        report.final_loss,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_finetune(args: &ConfigArgs, algo: Option<Algo>, pretrained: &Path, out_dir: &Path) -> Result<ExitCode> {
    let mut cfg = load_config(args)?;
    if let Some(a) = algo {
        eprintln!("override algo = \"{a}\" (was \"{}\") from --algo", cfg.algo);
        cfg.algo = a;
    }
    echo_config(&cfg);
    let pretrained = artifact_path(pretrained);
    if !pretrained.is_file() {
        return Err(usage(format!("pretrained checkpoint not found: {}", pretrained.display())));
    }
    let out_dir = artifact_path(out_dir);
    let meta = cfg.checkpoint_meta(0, 0);
    let loaded = load_checkpoint_checked(&pretrained, &meta)?;
    for w in &loaded.warnings {
        eprintln!("warning: {}: {w}", pretrained.display());
    }
    let (fine, coarse) = cfg.schedules()?;
    let scorer = cfg.scorer()?;
    let lab = Lab {
        scorer: &scorer,
        fine: &fine,
        coarse: &coarse,
    };
    let artifacts = finetune(&loaded.params, &lab, &cfg.train_config())?;
    artifacts.write(&out_dir, &meta)?;
    std::fs::write(out_dir.join("run_config.toml"), cfg.to_toml_string())?;
    let tail = 20.min(cfg.episodes);
    println!(
        "{} {} episodes: last {tail} mean proxy {:.4}, eval {:.4}; best episode {}: {}",
        cfg.algo,
        cfg.episodes,
        artifacts.mean_reward_last(tail),
        artifacts.mean_eval_last(tail),
        artifacts.best().episode,
        out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: &ConfigArgs, checkpoints: &[PathBuf], split: SplitName, samples: Option<usize>, out: &Path) -> Result<ExitCode> {
    let cfg = load_config(args)?;
    echo_config(&cfg);
    let (fine, coarse) = cfg.schedules()?;
    let scorer = cfg.scorer()?;
    let lab = Lab {
        scorer: &scorer,
        fine: &fine,
        coarse: &coarse,
    };
    let conditions = scorer.corpus().conditions_in(split);
    if conditions.is_empty() {
        return Err(usage(format!("split {split:?} is empty")));
    }
    let n = samples.unwrap_or(cfg.eval_samples_per_condition);
    let meta = cfg.checkpoint_meta(0, 0);
    let mut reports = Vec::new();
    for path in checkpoints {
        let path = artifact_path(path);
        if !path.is_file() {
            return Err(usage(format!("checkpoint not found: {}", path.display())));
        }
        let loaded = load_checkpoint_checked(&path, &meta)?;
        for w in &loaded.warnings {
            eprintln!("warning: {}: {w}", path.display());
        }
        let mut r = evaluate_checkpoint(&loaded.params, &lab, &conditions, n, cfg.seed)?;
        r.label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into());
        reports.push(r);
    }
    reports.push(ground_truth_report(&scorer, &conditions)?);
    let out = artifact_path(out);
    ensure_parent(&out)?;
    write_reports(
        BufWriter::new(File::create(&out).with_context(|| format!("cannot write {}", out.display()))?),
        &reports,
    )?;
    for r in &reports {
        println!("{r}");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(suites: &[Suite], seed: u64, log: &Path, inject_fault: bool) -> Result<ExitCode> {
    let opts = VerifyOptions {
        seed,
        inject_fault,
        log_path: Some(artifact_path(log)),
        ..VerifyOptions::default()
    };
    let suites = if suites.is_empty() { Suite::ALL.to_vec() } else { suites.to_vec() };
    let mut failed = 0;
    let mut total = 0;
    for s in suites {
        for line in run_suite(s, &opts)? {
            println!("{line}");
            total += 1;
            failed += usize::from(!line.passed);
        }
    }
    println!("{} of {total} checks passed", total - failed);
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_plotdata(input: &Path, out: &Path) -> Result<ExitCode> {
    let input = artifact_path(input);
    if !input.exists() {
        return Err(usage(format!("missing metrics input {}", input.display())));
    }
    let rows = plotdata::collect(&input)?;
    let out = artifact_path(out);
    plotdata::write(&out, &rows)?;
    println!("{} rows: {}", rows.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Defaults => {
            print!("{}", RunConfig::default().to_toml_string());
            Ok(ExitCode::SUCCESS)
        }
        Command::Pretrain { cfg, out } => cmd_pretrain(cfg, out),
        Command::Finetune {
            cfg,
            algo,
            pretrained,
            out_dir,
        } => cmd_finetune(cfg, *algo, pretrained, out_dir),
        Command::Eval {
            cfg,
            checkpoint,
            split,
            samples,
            out,
        } => cmd_eval(cfg, checkpoint, *split, *samples, out),
        Command::Verify {
            suite,
            seed,
            log,
            inject_fault,
        } => cmd_verify(suite, *seed, log, *inject_fault),
        Command::Plotdata { run_dir, out } => cmd_plotdata(run_dir, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
