use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prunelab::experiment::{
    cmd_correlate, cmd_prune, cmd_report, cmd_sweep, cmd_train, cmd_transfer, ExperimentConfig,
};
use prunelab::metrics::{fmt_acc, fmt_r, format_pp};
use prunelab::pruning::StructureMode;
use prunelab::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(
    name = "prunelab",
    version,
    about = "Structured pruning and robustness experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base network and evaluate it under every attack.
    Train(Common),
    /// Iteratively prune the base network for every configured cell.
    Prune {
        #[command(flatten)]
        common: Common,
        /// Base checkpoint directory (default: <out>/checkpoints/base).
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Remove each prunable element alone and bucket the robustness gains.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory (default: <out>/checkpoints/base).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// FGSM transfer matrix between two or more checkpoints.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(required = true, num_args = 2..)]
        checkpoints: Vec<PathBuf>,
    },
    /// Correlation between clean and adversarial accuracy across iterations.
    Correlate {
        #[command(flatten)]
        common: Common,
        /// `iterations.json` files or single eval reports.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Summarize every table listed in the run manifest.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config (default: the desk preset).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluate on the first N test images.
    #[arg(long)]
    subset: Option<usize>,
    /// Comma-separated attack tags.
    #[arg(long, value_delimiter = ',')]
    attacks: Option<Vec<String>>,
    /// Comma-separated criteria: l1, expected_abs, pls.
    #[arg(long, value_delimiter = ',')]
    criterion: Option<Vec<String>>,
    #[arg(long, value_parser = ["filters", "layers", "both"])]
    structure: Option<String>,
    /// Comma-separated schemes: finetune, scratch-same, scratch-double, wticket.
    #[arg(long, value_delimiter = ',')]
    scheme: Option<Vec<String>>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
}

impl Common {
    fn config(&self) -> prunelab::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::desk(self.seed, "runs/desk"),
        };
        cfg.seed = self.seed;
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(n) = self.subset {
            cfg.dataset.subset = Some(n);
        }
        if let Some(a) = &self.attacks {
            cfg.attacks.list = a.clone();
        }
        if let Some(c) = &self.criterion {
            cfg.prune.criteria = c.clone();
        }
        if let Some(s) = &self.structure {
            cfg.prune.structure = StructureMode::from_tag(s)?;
        }
        if let Some(s) = &self.scheme {
            cfg.prune.schemes = s.clone();
        }
        if let Some(p) = self.ratio {
            cfg.prune.ratio = p;
        }
        if let Some(k) = self.iterations {
            cfg.prune.iterations = k;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> prunelab::Result<()> {
    match cli.command {
        Command::Train(common) => {
            let s = cmd_train(&common.config()?)?;
            println!("train accuracy {}", fmt_acc(s.train_accuracy));
            println!("test accuracy {}", fmt_acc(s.report.acc_clean));
            for a in &s.report.acc_adv {
                println!("{} accuracy {}", a.attack, fmt_acc(a.accuracy));
            }
        }
        Command::Prune { common, base } => {
            let s = cmd_prune(&common.config()?, base.as_deref())?;
            for cell in &s.cells {
                for (k, d) in cell.deltas.iter().enumerate() {
                    let row: Vec<String> = d
                        .rows
                        .iter()
                        .map(|r| format!("{} {}", r.column, format_pp(r.delta_pp)))
                        .collect();
                    println!("{} k{}: {}", cell.label, k + 1, row.join(", "));
                }
                if let Some(why) = &cell.stopped_early {
                    println!("{} stopped early: {why}", cell.label);
                }
            }
        }
        Command::Sweep { common, checkpoint } => {
            let s = cmd_sweep(&common.config()?, checkpoint.as_deref())?;
            for (sweep, pct) in s.sweeps.iter().map(|sw| (sw, sw.percentages())) {
                for (attack, row) in pct {
                    let cells: Vec<String> = row.iter().map(|p| format!("{p:.2}")).collect();
                    println!("{} {attack}: {}", sweep.elements.tag(), cells.join(" "));
                }
            }
        }
        Command::Transfer {
            common,
            checkpoints,
        } => {
            let s = cmd_transfer(&common.config()?, &checkpoints)?;
            for (src, row) in s.matrix.tags.iter().zip(&s.matrix.cells) {
                let cells: Vec<String> = row.iter().map(|&c| fmt_acc(c)).collect();
                println!("{src}: {}", cells.join(" "));
            }
            for (src, ok) in &s.off_diagonal_at_least_diagonal {
                println!(
                    "{src}: off-diagonal >= diagonal: {}",
                    if *ok { "yes" } else { "no" }
                );
            }
        }
        Command::Correlate { common, reports } => {
            let s = cmd_correlate(&common.config()?, &reports)?;
            for (attack, r) in &s.r {
                let r = r.ok_or(Error::Undefined("zero variance"));
                println!("r(clean, {attack}) = {}", fmt_r(&r));
            }
        }
        Command::Report(common) => print!("{}", cmd_report(&common.config()?)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config { .. } => EXIT_CONFIG,
                _ => EXIT_RUNTIME,
            })
        }
    }
}
