//! `statarb` command line: synthetic data, features, backtests and reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use statarb_core::backtest::{run_backtest, run_features, run_report, run_synth, ModelMode, RunConfig, SUMMARY_FILE};
use statarb_core::Error;

#[derive(Parser)]
#[command(name = "statarb", version, about = "Filtered factor premia and a mean-reversion backtester")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic panel (assets.csv, index.csv, factors.csv).
    Synth(Common),
    /// Compute exposures, betas and universe membership (exposures.csv).
    Features(Common),
    /// Run the configured grid and write ledgers, tables and summary.json.
    Backtest(BacktestArgs),
    /// Re-derive statistics from a finished run and print its tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BacktestArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated models: kf, ukf, ols, bench.
    #[arg(long, value_delimiter = ',')]
    mode: Option<Vec<String>>,
    /// Comma-separated transaction costs in basis points per trade.
    #[arg(long = "tc-bps", value_delimiter = ',')]
    tc_bps: Option<Vec<f64>>,
    /// Comma-separated spread windows.
    #[arg(long, value_delimiter = ',')]
    ws: Option<Vec<usize>>,
    /// Long entry thresholds, paired in order with --short-z.
    #[arg(long = "long-z", value_delimiter = ',', allow_negative_numbers = true)]
    long_z: Option<Vec<f64>>,
    /// Short entry thresholds, paired in order with --long-z.
    #[arg(long = "short-z", value_delimiter = ',', allow_negative_numbers = true)]
    short_z: Option<Vec<f64>>,
    /// Beta hedge with the index (true/false).
    #[arg(long, action = clap::ArgAction::Set)]
    hedge: Option<bool>,
    /// Emit the blended long-only / long-short series (true/false).
    #[arg(long, action = clap::ArgAction::Set)]
    blend: Option<bool>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory of a finished backtest.
    #[arg(long)]
    out: PathBuf,
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

/// Pairs long and short thresholds; a single value on either side is
/// broadcast, and a missing side keeps the configured values.
fn threshold_pairs(long: Option<&[f64]>, short: Option<&[f64]>, current: &[[f64; 2]]) -> Result<Vec<[f64; 2]>, Error> {
    match (long, short) {
        (None, None) => Ok(current.to_vec()),
        (Some(l), None) => Ok(current.iter().flat_map(|p| l.iter().map(move |v| [*v, p[1]])).collect()),
        (None, Some(s)) => Ok(current.iter().flat_map(|p| s.iter().map(move |v| [p[0], *v])).collect()),
        (Some(l), Some(s)) => {
            let n = l.len().max(s.len());
            if (l.len() != n && l.len() != 1) || (s.len() != n && s.len() != 1) {
                return Err(Error::Config(vec![format!(
                    "--long-z has {} values and --short-z has {}; give equal counts or a single value",
                    l.len(),
                    s.len()
                )]));
            }
            Ok((0..n).map(|i| [l[i.min(l.len() - 1)], s[i.min(s.len() - 1)]]).collect())
        }
    }
}

fn apply_overrides(cfg: &mut RunConfig, args: &BacktestArgs) -> Result<(), Error> {
    let mut problems = Vec::new();
    if let Some(modes) = &args.mode {
        let mut parsed = Vec::new();
        for m in modes {
            match m.parse::<ModelMode>() {
                Ok(mode) => parsed.push(mode),
                Err(e) => problems.push(format!("--mode: {e}")),
            }
        }
        cfg.grid.modes = parsed;
    }
    if let Some(tc) = &args.tc_bps {
        cfg.grid.tc_bps = tc.clone();
    }
    if let Some(ws) = &args.ws {
        cfg.grid.ws = ws.clone();
    }
    match threshold_pairs(args.long_z.as_deref(), args.short_z.as_deref(), &cfg.grid.thresholds) {
        Ok(pairs) => cfg.grid.thresholds = pairs,
        Err(Error::Config(list)) => problems.extend(list),
        Err(e) => problems.push(e.to_string()),
    }
    if let Some(h) = args.hedge {
        cfg.portfolio.hedge = h;
    }
    if let Some(b) = args.blend {
        cfg.portfolio.blend = b;
    }
    if problems.is_empty() { Ok(()) } else { Err(Error::Config(problems)) }
}

fn print_ok(value: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&value).unwrap_or_default());
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth(common) => {
            let cfg = load_config(&common)?;
            let (assets, index) = run_synth(&cfg, &cfg.out)?;
            print_ok(serde_json::json!({
                "status": "ok",
                "assets": display(&assets),
                "index": display(&index),
                "factors": display(&cfg.out.join("factors.csv")),
            }));
        }
        Command::Features(common) => {
            let cfg = load_config(&common)?;
            cfg.validate()?;
            let path = run_features(&cfg, &cfg.out)?;
            print_ok(serde_json::json!({ "status": "ok", "exposures": display(&path) }));
        }
        Command::Backtest(args) => {
            let mut cfg = load_config(&args.common)?;
            apply_overrides(&mut cfg, &args)?;
            let report = run_backtest(&cfg)?;
            print_ok(serde_json::json!({
                "status": "ok",
                "summary": display(&cfg.out.join(SUMMARY_FILE)),
                "points": report.points.len(),
            }));
        }
        Command::Report(args) => {
            let out = run_report(&args.out)?;
            print!("{}", out.text);
            if !out.mismatches.is_empty() {
                return Err(Error::invalid(format!(
                    "summary disagrees with emitted CSVs for: {}",
                    out.mismatches.join(", ")
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let problems = match &err {
                Error::Config(list) => list.clone(),
                other => vec![other.to_string()],
            };
            let report = serde_json::json!({
                "status": "error",
                "kind": err.kind(),
                "message": err.to_string(),
                "problems": problems,
            });
            eprintln!("{}", serde_json::to_string_pretty(&report).unwrap_or_default());
            ExitCode::from(if matches!(err, Error::Config(_)) { 2 } else { 1 })
        }
    }
}
