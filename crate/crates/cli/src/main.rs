use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ou3d_core::metrics::SweepGrid;
use ou3d_core::pipeline::{self, PipelineConfig, PipelineError, Stage};

#[derive(Parser)]
#[command(name = "ou3d", version, about = "Open-vocabulary segmentation of urban point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Pipeline configuration (JSON); unset fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for all stage artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, env = "OU3D_THREADS")]
    threads: Option<usize>,
    /// Weight of the 3D features in the fusion.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Local grid granularity.
    #[arg(long = "K", global = true)]
    k: Option<u32>,
    /// Angular interval between orbit views, in degrees.
    #[arg(long = "A", global = true)]
    a: Option<u32>,
    /// Local orbit radius divisor.
    #[arg(long = "R", global = true)]
    r: Option<f64>,
    /// Sample balancing on or off.
    #[arg(long, global = true)]
    sbff: Option<bool>,
    /// Splat size in pixels (odd).
    #[arg(long, global = true)]
    splat: Option<u32>,
    /// Free-text query restricting the scored classes.
    #[arg(long, global = true)]
    query: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or load the point cloud and the class text table.
    GenScene,
    /// Place virtual cameras and render every view.
    Render,
    /// Produce per-view masks and mask features.
    Extract,
    /// Lift mask features onto points, balance and fuse them.
    Lift,
    /// Train the 3D feature field on the fused features.
    Distill,
    /// Label every point against the text table.
    Segment,
    /// Score the labels against ground truth.
    Eval,
    /// Run an ablation grid.
    Sweep {
        /// Grid file (JSON with K, A, R, alpha, sbff, k_topk, splat_px lists).
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Grid cells run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run every stage.
    End2end,
}

fn load_config(c: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::read(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = &c.out {
        cfg.out = v.clone();
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = c.threads {
        cfg.threads = Some(v);
    }
    if let Some(v) = c.alpha {
        cfg.fusion.alpha = v;
    }
    if let Some(v) = c.k {
        cfg.views.k = v;
    }
    if let Some(v) = c.a {
        cfg.views.a_deg = v;
    }
    if let Some(v) = c.r {
        cfg.views.r = v;
    }
    if let Some(v) = c.sbff {
        cfg.sbff.enabled = v;
    }
    if let Some(v) = c.splat {
        cfg.splat_px = v;
    }
    if let Some(v) = &c.query {
        cfg.query = Some(v.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let stage = match cli.command {
        Command::GenScene => Stage::GenScene,
        Command::Render => Stage::Render,
        Command::Extract => Stage::Extract,
        Command::Lift => Stage::Lift,
        Command::Distill => Stage::Distill,
        Command::Segment => Stage::Segment,
        Command::Eval => Stage::Eval,
        Command::Sweep { grid, jobs } => {
            let grid: SweepGrid = match grid {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => SweepGrid {
                    k: vec![cfg.views.k],
                    a_deg: vec![cfg.views.a_deg],
                    r: vec![cfg.views.r],
                    alpha: vec![cfg.fusion.alpha],
                    sbff: vec![cfg.sbff.enabled],
                    k_topk: vec![cfg.sbff.k],
                    splat_px: vec![cfg.splat_px],
                },
            };
            let dir = cfg.out.join("sweep");
            let outcome = pipeline::sweep(&cfg, &grid, &dir, jobs)?;
            println!(
                "{}",
                serde_json::json!({
                    "csv": dir.join("sweep.csv"),
                    "rows": outcome.rows.len(),
                    "skipped": outcome.skipped,
                    "failed": outcome.failures.len(),
                })
            );
            return Ok(());
        }
        Command::End2end => {
            let (report, path) = pipeline::end2end(&cfg)?;
            let mut value = serde_json::to_value(&report)?;
            value["metrics_file"] = serde_json::json!(path);
            println!("{}", serde_json::to_string_pretty(&value)?);
            return Ok(());
        }
    };
    let path = pipeline::run_stage(&cfg, stage)?;
    if stage == Stage::Eval {
        println!("{}", std::fs::read_to_string(&path)?);
    } else {
        println!("{}", serde_json::json!({ "stage": stage.name(), "dir": path }));
    }
    Ok(())
}

fn error_json(err: &anyhow::Error) -> serde_json::Value {
    let (kind, stage) = match err.downcast_ref::<PipelineError>() {
        Some(p) => (p.kind(), p.stage().map(Stage::name)),
        None => ("error", None),
    };
    serde_json::json!({
        "error": {
            "kind": kind,
            "stage": stage,
            "message": format!("{err:#}"),
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
