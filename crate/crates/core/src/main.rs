use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use amopt::checkpoint;
use amopt::config::RunConfig;
use amopt::evaluation::{Diagnostics, EvalConfig, EvalKind};
use amopt::io::write_atomic;
use amopt::model_based::transfer_eval;
use amopt::rng::resolve_seed;
use amopt::training::train;
use amopt::{Error, Result};

#[derive(Parser)]
#[command(name = "amopt", version, about = "Amortized policy optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent from a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to `out_dir` from the config, then `runs/<env>-<optimizer>-seed<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one diagnostic on a saved checkpoint.
    Eval {
        #[arg(value_enum)]
        kind: Kind,
        #[arg(long)]
        checkpoint: PathBuf,
        /// TOML file with an `[eval]` table overriding the checkpoint's settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Action dimensions for the slice diagnostic, e.g. `0,1`.
        #[arg(long, value_delimiter = ',')]
        slice_dims: Option<Vec<usize>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plug a model-free agent's optimizer into a model-based value estimate.
    Transfer {
        /// Model-free agent.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Agent whose critics and learned models supply the value.
        #[arg(long)]
        mb_checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Gap,
    Bias,
    Modes,
    Compare,
    Slice,
}

impl From<Kind> for EvalKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Gap => EvalKind::Gap,
            Kind::Bias => EvalKind::Bias,
            Kind::Modes => EvalKind::Modes,
            Kind::Compare => EvalKind::Compare,
            Kind::Slice => EvalKind::Slice,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalOverride {
    eval: EvalConfig,
}

#[derive(Serialize)]
struct TransferSummary<'a> {
    #[serde(flatten)]
    report: &'a amopt::model_based::TransferReport,
    pre_mean_return: f64,
    post_mean_return: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, out } => cmd_train(&config, out),
        Command::Eval {
            kind,
            checkpoint,
            config,
            slice_dims,
            out,
        } => cmd_eval(kind.into(), &checkpoint, config.as_deref(), slice_dims, out),
        Command::Transfer {
            checkpoint,
            mb_checkpoint,
            episodes,
            out,
        } => cmd_transfer(&checkpoint, &mb_checkpoint, episodes, out),
    }
}

fn cmd_train(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = RunConfig::from_path(config)?;
    cfg.seed = resolve_seed(cfg.seed)?;
    let dir = out.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| {
        PathBuf::from("runs").join(format!("{}-{}-seed{}", cfg.env, cfg.train.optimizer.name(), cfg.seed))
    });
    let artifacts = train(&cfg, Some(&dir))?;
    println!("run directory: {}", dir.display());
    if let Some(last) = artifacts.evals.last() {
        println!(
            "final evaluation at step {}: mean return {:.4} (std {:.4}, {} episodes)",
            last.step, last.mean_return, last.std_return, last.episodes
        );
    }
    if let Some(ck) = artifacts.checkpoints.last() {
        println!("last checkpoint: {}", ck.display());
    }
    Ok(())
}

/// `run/checkpoints/x.ckpt` belongs to `run`; anything else to its own folder.
fn run_dir_of(checkpoint: &Path) -> PathBuf {
    let parent = checkpoint.parent().unwrap_or(Path::new("."));
    match parent.file_name() {
        Some(n) if n == "checkpoints" => parent.parent().unwrap_or(Path::new(".")).to_path_buf(),
        _ => parent.to_path_buf(),
    }
}

fn cmd_eval(
    kind: EvalKind,
    ckpt: &Path,
    config: Option<&Path>,
    slice_dims: Option<Vec<usize>>,
    out: Option<PathBuf>,
) -> Result<()> {
    let loaded = checkpoint::load(ckpt)?;
    let cfg = loaded.config().clone();
    let mut eval = match config {
        Some(p) => {
            let text = amopt::io::read_to_string(p)?;
            toml::from_str::<EvalOverride>(&text)
                .map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?
                .eval
        }
        None => cfg.eval.clone(),
    };
    if let Some(d) = slice_dims {
        let [i, j] = d[..] else {
            return Err(Error::Config(format!("--slice-dims takes two indices, got {}", d.len())));
        };
        eval.slice_dims = [i, j];
    }
    eval.validate()?;
    let adim = loaded.agent.action_dim();
    if kind == EvalKind::Slice && eval.slice_dims.iter().any(|&d| d >= adim) {
        return Err(Error::Config(format!(
            "slice_dims {:?} out of range for a {adim}-dimensional action space",
            eval.slice_dims
        )));
    }
    let seed = resolve_seed(cfg.seed)?;
    let dir = out.unwrap_or_else(|| run_dir_of(ckpt).join("eval"));
    let diag = Diagnostics {
        agent: &loaded.agent,
        cfg: &cfg,
        eval: &eval,
        seed,
    };
    for p in diag.write(kind, &dir)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_transfer(mf_path: &Path, mb_path: &Path, episodes: usize, out: Option<PathBuf>) -> Result<()> {
    if episodes == 0 {
        return Err(Error::Config("episodes must be positive".into()));
    }
    let mf = checkpoint::load(mf_path)?;
    let mb = checkpoint::load(mb_path)?;
    if mf.header.env != mb.header.env {
        return Err(Error::Incompatible(format!(
            "checkpoints are for different environments: {} vs {}",
            mf.header.env, mb.header.env
        )));
    }
    let seed = resolve_seed(mf.config().seed)?;
    let report = transfer_eval(&mf.agent, mf.config(), &mb.agent, mb.config(), episodes, seed)?;
    let dir = out.unwrap_or_else(|| run_dir_of(mf_path).join("transfer"));
    let summary = TransferSummary {
        report: &report,
        pre_mean_return: report.pre_mean_return(),
        post_mean_return: report.post_mean_return(),
    };
    let json = serde_json::to_vec_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(dir.join("transfer.csv"), &report.to_csv()?)?;
    write_atomic(dir.join("transfer_summary.json"), &json)?;
    println!(
        "mean return before {:.4}, after {:.4}; objective-independent: {}",
        summary.pre_mean_return, summary.post_mean_return, report.objective_independent
    );
    match report.post_mean_improvement {
        Some(d) => println!("mean per-step improvement under the new value: {d:.6}"),
        None => println!("actions identical: {}", report.actions_identical),
    }
    println!("wrote {}", dir.display());
    Ok(())
}
