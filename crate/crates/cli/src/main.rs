use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use nudgeseg_core::driver::{run_batch, run_sweep, write_run, write_sweep};
use nudgeseg_core::eval::match_and_score;
use nudgeseg_core::flow::read_flo;
use nudgeseg_core::hypothesis::SegmentationHypothesis;
use nudgeseg_core::motioncluster::cluster_flow;
use nudgeseg_core::raster::{read_pgm, write_pgm16, Grid};
use nudgeseg_core::{Error, RunConfig};

#[derive(Parser)]
#[command(name = "nudgeseg", version, about = "Interactive segmentation of simulated object piles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run seeded trials and write per-trial and summary CSVs.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write hyp_<trial>_<nudge>.pgm after every nudge.
        #[arg(long)]
        snapshots: bool,
        /// Exit 0 even when some trials failed.
        #[arg(long)]
        keep_going: bool,
    },
    /// Flow-noise study over magnitude (%) and angle (degree) bounds.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,5,10,20")]
        eps_m: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,10,20,30")]
        eps_a: Vec<f64>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        keep_going: bool,
    },
    /// Cluster a .flo file into rigid-motion segments (16-bit label PGM).
    Cluster {
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score a label PGM against a ground-truth label PGM.
    Eval {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { config, trials, seed, out, snapshots, keep_going } => {
            let cfg = load_config(&config)?;
            let trials = trials.unwrap_or(cfg.trials);
            let out = out.unwrap_or_else(|| cfg.out_dir.clone());
            let outcomes = run_batch(&cfg, seed, trials);
            let summary = write_run(&out, &outcomes, snapshots)?;
            println!(
                "trials {} failures {} iou {:.4} dr50 {:.4} dr75 {:.4} iou_s {:.4} nudges {:.2}",
                summary.trials,
                summary.failures,
                summary.mean_iou,
                summary.dr50,
                summary.dr75,
                summary.iou_s,
                summary.mean_nudges
            );
            for o in outcomes.iter().filter(|o| o.record.failure.is_some()) {
                eprintln!("trial seed {} failed: {}", o.record.seed, o.record.failure.as_deref().unwrap_or(""));
            }
            Ok(if summary.failures > 0 && !keep_going { ExitCode::from(3) } else { ExitCode::SUCCESS })
        }
        Command::Sweep { config, eps_m, eps_a, trials, seed, out, keep_going } => {
            let cfg = load_config(&config)?;
            if eps_m.iter().chain(&eps_a).any(|&e| e < 0.0 || !e.is_finite()) {
                return Err(Error::Config("noise bounds must be finite and nonnegative".into()).into());
            }
            let trials = trials.unwrap_or(cfg.trials);
            let out = out.unwrap_or_else(|| cfg.out_dir.clone());
            let rows = run_sweep(&cfg, &eps_m, &eps_a, seed, trials);
            write_sweep(&out, &rows)?;
            for r in &rows {
                println!(
                    "eps_m {:>5} eps_a {:>5}  iou {:.4} dr50 {:.4} dr75 {:.4}",
                    r.eps_m, r.eps_a, r.summary.mean_iou, r.summary.dr50, r.summary.dr75
                );
            }
            let failures: usize = rows.iter().map(|r| r.summary.failures).sum();
            Ok(if failures > 0 && !keep_going { ExitCode::from(3) } else { ExitCode::SUCCESS })
        }
        Command::Cluster { flow, out, config } => {
            let cfg = load_config(&config)?;
            let field = read_flo(&flow).with_context(|| format!("reading {}", flow.display()))?;
            let (labels, k) = cluster_flow(&field, &cfg.cluster, None);
            let img = SegmentationHypothesis::from_labels(labels, 0).to_label_image()?;
            write_pgm16(&out, &img)?;
            println!("clusters {k}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { hyp, gt, tau } => {
            if !(tau > 0.0 && tau < 1.0) {
                return Err(Error::Config("tau must lie in (0, 1)".into()).into());
            }
            let h = read_pgm(&hyp).with_context(|| format!("reading {}", hyp.display()))?;
            let g = read_pgm(&gt).with_context(|| format!("reading {}", gt.display()))?;
            if !h.same_size(&g) {
                return Err(Error::Format("hypothesis and ground truth differ in size".into()).into());
            }
            let hyp = SegmentationHypothesis::from_labels(
                Grid::from_vec(h.width, h.height, h.data.iter().map(|&v| v as u32).collect()),
                0,
            );
            let scores = match_and_score(&hyp, &g, tau);
            println!("gt_id,iou,success");
            for s in &scores {
                println!("{},{:.6},{}", s.gt_id, s.best_iou, s.success);
            }
            let n = scores.len().max(1) as f64;
            let mean = scores.iter().map(|s| s.best_iou).sum::<f64>() / n;
            let dr = scores.iter().filter(|s| s.success).count() as f64 / n;
            println!("mean_iou {mean:.6} dr {dr:.6}");
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = matches!(e.downcast_ref::<Error>(), Some(Error::Config(_)));
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}
