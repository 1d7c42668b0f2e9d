use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use geoadapt_core::checkpoint::Checkpoint;
use geoadapt_core::config::{DataSource, RunConfig};
use geoadapt_core::data::{export_pair, load_image_dir, save_png, synth_pair, to_rgb8};
use geoadapt_core::evaluation::{
    identity_preservation, m_sweep, mean_corner_error, plot_m_sweep, retrieval_with_adaptation,
    write_metrics_csv, ToyRetrievalConfig,
};
use geoadapt_core::gradcheck::{run_suite, GradcheckOptions};
use geoadapt_core::training::{adapt, train, RunOutput};
use geoadapt_core::Error;

/// Directory under which `train` creates run directories.
const RUN_ROOT_ENV: &str = "GEOADAPT_RUN_ROOT";

#[derive(Parser)]
#[command(
    name = "geoadapt",
    version,
    about = "Geometric domain adaptation for person re-identification"
)]
struct Cli {
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the adaptation model.
    Train(TrainArgs),
    /// Produce M adapted images per input image.
    Adapt(AdaptArgs),
    /// Evaluate a checkpoint; writes metrics CSVs and the M-sweep plot.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic dataset pair to disk.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Output directory; defaults to `$GEOADAPT_RUN_ROOT/<name>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run name under the run root (default: `train-<config hash prefix>`).
    #[arg(long)]
    name: Option<String>,
    /// Replace an existing run directory.
    #[arg(long)]
    overwrite: bool,
    /// Continue from `last.ckpt` in the run directory.
    #[arg(long, conflicts_with = "overwrite")]
    resume: bool,
    /// Config file (`key = value` lines).
    config: PathBuf,
    /// Config overrides as `--key value` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of input images.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of spatial codes (default: the checkpoint's `adapt_m`).
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated M values for the sweep.
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10")]
    m_values: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    overwrite: bool,
    /// Dataset overrides applied to the checkpoint's config, as `--key value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Test fixture: negate the spatial cycle loss gradient.
    #[arg(long, hide = true)]
    flip_scl: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Optional config file; synthetic keys are used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    overwrite: bool,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn io(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_)
            | Error::InvalidArgument(_)
            | Error::UnsupportedKind { .. }
            | Error::Shape(_)
            | Error::ParamLength { .. }
            | Error::KindMismatch(..)
            | Error::EmptyBatch(_) => 2,
            Error::Io { .. }
            | Error::Checkpoint(_)
            | Error::EmptyDataset(_)
            | Error::Image(_)
            | Error::Csv(_) => 3,
            Error::NonFinite { .. } | Error::Singular { .. } => 4,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn apply_overrides(cfg: &mut RunConfig, args: &[String]) -> CmdResult {
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let Some(key) = flag.strip_prefix("--") else {
            return Err(Failure::usage(format!(
                "expected --key value, got {flag:?}"
            )));
        };
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Failure::usage(format!("missing value for --{key}")))?;
                (key.to_string(), v.clone())
            }
        };
        cfg.set(&key.replace('-', "_"), &value)?;
    }
    cfg.validate()?;
    Ok(())
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    if !path.is_file() {
        return Err(Failure::usage(format!(
            "config file {} not found",
            path.display()
        )));
    }
    Ok(RunConfig::load(path)?)
}

/// Creates `dir`, refusing to reuse a non-empty directory unless `overwrite`.
fn fresh_dir(dir: &Path, overwrite: bool) -> CmdResult {
    let occupied = dir.exists()
        && fs::read_dir(dir)
            .map(|mut d| d.next().is_some())
            .unwrap_or(true);
    if occupied {
        if !overwrite {
            return Err(Failure::usage(format!(
                "{} already exists; pass --overwrite to replace it",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir)
            .map_err(|e| Failure::io(format!("cannot clear {}: {e}", dir.display())))?;
    }
    fs::create_dir_all(dir)
        .map_err(|e| Failure::io(format!("cannot create {}: {e}", dir.display())))
}

fn write_resolved_config(dir: &Path, cfg: &RunConfig) -> CmdResult {
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Failure::io(format!("cannot write {}: {e}", p.display())))
    };
    write("config.txt", cfg.to_text())?;
    write("config.sha256", format!("{}\n", cfg.hash()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path)
        .map_err(|e| Failure::io(format!("cannot load checkpoint {}: {e}", path.display())))
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut cfg = load_config(&a.config)?;
    apply_overrides(&mut cfg, &a.overrides)?;
    let hash = cfg.hash();
    let dir = match (&a.out, &a.name) {
        (Some(out), _) => out.clone(),
        (None, name) => {
            let root = std::env::var_os(RUN_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| "runs".into());
            root.join(
                name.clone()
                    .unwrap_or_else(|| format!("train-{}", &hash[..12])),
            )
        }
    };
    let resume = if a.resume {
        // Only the step budget may change when resuming.
        let ck = load_checkpoint(&dir.join("last.ckpt"))?;
        let mut prev = RunConfig::parse(&ck.config_text)?;
        prev.train.steps = cfg.train.steps;
        if prev != cfg {
            return Err(Failure::usage("config differs from the run being resumed"));
        }
        let state = ck.to_state(&cfg.train)?;
        write_resolved_config(&dir, &cfg)?;
        Some(state)
    } else {
        fresh_dir(&dir, a.overwrite)?;
        write_resolved_config(&dir, &cfg)?;
        None
    };
    let data = cfg.load_data()?;
    let out = RunOutput {
        dir: Some(dir.clone()),
        config_text: cfg.to_text(),
    };
    log::info!("training into {}", dir.display());
    let outcome = train(&cfg.train, &data.as_train_data(), &out, resume)?;
    println!("run directory: {}", dir.display());
    println!("config hash: {hash}");
    println!("steps: {}", outcome.state.step);
    if let Some(ce) = outcome.log.iter().rev().find_map(|r| r.corner_error) {
        println!("final corner error: {ce:.4} px");
    }
    Ok(())
}

fn cmd_adapt(a: AdaptArgs) -> CmdResult {
    let ck = load_checkpoint(&a.checkpoint)?;
    let (cfg, models) = ck.restore_models()?;
    let m = a.m.unwrap_or(cfg.train.adapt_m);
    if m == 0 {
        return Err(Failure::usage("--m must be positive"));
    }
    let input = load_image_dir(&a.input, cfg.train.net.size)?;
    fresh_dir(&a.out, a.overwrite)?;
    let outputs = adapt(&models, &input.dataset.items, m, a.seed)?;
    for (k, batch) in outputs.iter().enumerate() {
        for (i, name) in input.dataset.names.iter().enumerate() {
            save_png(
                &to_rgb8(&batch.values, i),
                &a.out.join(format!("{name}_m{k}.png")),
            )?;
        }
    }
    println!(
        "wrote {} images to {}",
        m * input.dataset.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let ck = load_checkpoint(&a.checkpoint)?;
    let (mut cfg, models) = ck.restore_models()?;
    apply_overrides(&mut cfg, &a.overrides)?;
    if a.m_values.is_empty() || a.m_values.contains(&0) {
        return Err(Failure::usage("--m-values must be positive integers"));
    }
    let data = cfg.load_data()?;
    fresh_dir(&a.out, a.overwrite)?;
    write_resolved_config(&a.out, &cfg)?;
    let toy = ToyRetrievalConfig {
        seed: a.seed,
        ..ToyRetrievalConfig::default()
    };
    let (x, y) = (&data.x.items, &data.y.items);
    let m_full = cfg.train.adapt_m;
    let rows = vec![
        (
            "Original".to_string(),
            retrieval_with_adaptation(&models, x, y, 0, &toy)?,
        ),
        (
            "Adapted".to_string(),
            retrieval_with_adaptation(&models, x, y, 1, &toy)?,
        ),
        (
            format!("Adapted[M={m_full}]"),
            retrieval_with_adaptation(&models, x, y, m_full, &toy)?,
        ),
    ];
    write_metrics_csv(&a.out.join("metrics.csv"), &rows)?;
    for (name, r) in &rows {
        println!(
            "{name:<16} R-1 {:.4}  R-5 {:.4}  R-10 {:.4}  mAP {:.4}",
            r.r1, r.r5, r.r10, r.map
        );
    }
    let sweep = m_sweep(&models, x, y, &a.m_values, &toy)?;
    let sweep_rows: Vec<_> = sweep
        .rows
        .iter()
        .map(|r| (format!("M={}", r.m), r.result.clone()))
        .collect();
    write_metrics_csv(&a.out.join("m_sweep.csv"), &sweep_rows)?;
    plot_m_sweep(&a.out.join("m_sweep.png"), &sweep)?;
    match sweep.spearman {
        Some(rho) => println!("M-sweep Spearman rho: {rho:.4}"),
        None => println!("M-sweep Spearman rho: undefined"),
    }
    let n = x.len().min(y.len());
    let idx: Vec<usize> = (0..n).collect();
    let (pos, neg) = identity_preservation(&models, &x.select(&idx), &y.select(&idx), a.seed)?;
    println!("identity preservation: positive {pos:.4}, negative {neg:.4}");
    if let (Some(gt), DataSource::Synthetic) = (&data.gt, &cfg.data) {
        let ce = mean_corner_error(&models, x, gt, a.seed)?;
        println!(
            "corner error: mean {:.4} px, median {:.4} px",
            ce.mean, ce.median
        );
        let p = a.out.join("corner_error.csv");
        fs::write(&p, format!("mean,median\n{},{}\n", ce.mean, ce.median))
            .map_err(|e| Failure::io(format!("cannot write {}: {e}", p.display())))?;
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let opts = GradcheckOptions {
        seed: a.seed,
        flip_scl_gradient: a.flip_scl,
        ..GradcheckOptions::default()
    };
    let report = run_suite(&opts)?;
    for line in report.lines() {
        println!("{line}");
    }
    if report.passed() {
        println!(
            "all {} checks passed (tolerance {:e})",
            report.results.len(),
            report.tolerance
        );
        Ok(())
    } else {
        let failed = report.results.iter().filter(|r| !r.passed).count();
        Err(Failure {
            code: 4,
            message: format!("{failed} gradient check(s) failed"),
        })
    }
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let mut cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, &a.overrides)?;
    let pair = synth_pair(&cfg.synth)?;
    fresh_dir(&a.out, a.overwrite)?;
    write_resolved_config(&a.out, &cfg)?;
    export_pair(&pair, &a.out)?;
    println!(
        "wrote {} + {} images to {}",
        pair.x.len(),
        pair.y.len(),
        a.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Adapt(a) => cmd_adapt(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
