//! Experiment orchestration: run configuration, the backtest grid, emitted
//! artifacts and the report that re-derives the summary from them.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::{
    annual_sharpes, mean_annual_sharpe, perf_summary, percentile_table, render_percentile_text, rolling_drawdown,
    sharpe_annual, write_activity_csv, write_percentile_csv, ActivityRow, PercentileRow, PerfSummary,
    DRAWDOWN_WINDOW,
};
use crate::factor_engine::{run_engine, write_diagnostics, EngineConfig, EngineMode, EngineRun};
use crate::market_data::{
    fmt_exact, fmt_sig, load_panel, synth_generate, write_panel, FactorPanel, FeatureParams, PanelOptions,
    SchemaVersion, SynthConfig,
};
use crate::portfolio::{blend_series, build_ledger, BlendState, Ledger, LedgerConfig};
use crate::strategy::{run_signals, SignalMode, Signals, StrategyParams};
use crate::{Error, Result};

pub const SUMMARY_SCHEMA: &str = "statarb-summary";
pub const SUMMARY_VERSION: u32 = 1;
pub const SUMMARY_FILE: &str = "summary.json";

/// Fair-value model behind a grid point; `Bench` trades the
/// cross-sectional reversal benchmark without any factor model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelMode {
    Kf,
    Ukf,
    Ols,
    Bench,
}

impl ModelMode {
    pub const ALL: [ModelMode; 4] = [ModelMode::Kf, ModelMode::Ukf, ModelMode::Ols, ModelMode::Bench];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelMode::Kf => "kf",
            ModelMode::Ukf => "ukf",
            ModelMode::Ols => "ols",
            ModelMode::Bench => "bench",
        }
    }

    pub fn engine(self) -> Option<EngineMode> {
        match self {
            ModelMode::Kf => Some(EngineMode::Kf),
            ModelMode::Ukf => Some(EngineMode::Ukf),
            ModelMode::Ols => Some(EngineMode::Ols),
            ModelMode::Bench => None,
        }
    }
}

impl std::str::FromStr for ModelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelMode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid(format!("unknown mode `{s}` (expected kf, ukf, ols or bench)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub assets: Option<PathBuf>,
    pub index: Option<PathBuf>,
    /// Generator settings; the run seed replaces `synth.seed`.
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { source: DataSource::Synthetic, assets: None, index: None, synth: SynthConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub modes: Vec<ModelMode>,
    pub ws: Vec<usize>,
    /// `[L, S]` entry thresholds.
    pub thresholds: Vec<[f64; 2]>,
    pub tc_bps: Vec<f64>,
    pub z_window: usize,
    pub exit_level: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        let base = StrategyParams::default();
        Self {
            modes: ModelMode::ALL.to_vec(),
            ws: vec![5, 10],
            thresholds: vec![[0.5, 2.0], [1.0, 2.0], [1.5, 2.0]],
            tc_bps: vec![5.0],
            z_window: base.z_window,
            exit_level: base.exit_level,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PortfolioConfig {
    pub hedge: bool,
    pub hedge_financing: bool,
    pub hedge_tc_bps: f64,
    pub blend: bool,
}

impl Default for PortfolioConfig {
    fn default() -> Self {
        Self { hedge: true, hedge_financing: true, hedge_tc_bps: 0.0, blend: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Per-asset signal CSVs (large on big panels).
    pub signals: bool,
    pub diagnostics: bool,
    /// Neural transition snapshots of UKF runs.
    pub models: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { signals: false, diagnostics: true, models: true }
    }
}

/// Everything a backtest needs; parsed from a sectioned `key = value`
/// (TOML) file and overridable from the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory; not part of the summary so reruns elsewhere match.
    #[serde(skip_serializing)]
    pub out: PathBuf,
    pub data: DataConfig,
    pub features: FeatureParams,
    pub panel: PanelOptions,
    /// Engine settings; the run seed replaces `engine.seed`.
    pub engine: EngineConfig,
    pub grid: GridConfig,
    pub portfolio: PortfolioConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            data: DataConfig::default(),
            features: FeatureParams::default(),
            panel: PanelOptions::default(),
            engine: EngineConfig::default(),
            grid: GridConfig::default(),
            portfolio: PortfolioConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

fn config_problems(err: Error, prefix: &str, into: &mut Vec<String>) {
    match err {
        Error::Config(list) => into.extend(list.into_iter().map(|p| format!("{prefix}: {p}"))),
        other => into.push(format!("{prefix}: {other}")),
    }
}

fn has_duplicates<T: PartialEq>(xs: &[T]) -> bool {
    xs.iter().enumerate().any(|(i, a)| xs[..i].contains(a))
}

impl RunConfig {
    /// Parses TOML text; syntax errors, unknown keys and mistyped values
    /// are reported with their position. Relative data paths resolve
    /// against `base`.
    pub fn from_toml_str(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        if let Some(base) = base {
            for p in [&mut cfg.data.assets, &mut cfg.data.index].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("cannot read config {}: {e}", path.display())]))?;
        Self::from_toml_str(&text, path.parent())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("config serialization: {e}")))
    }

    /// Every problem with the configuration, or `Ok` when it is runnable.
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        let g = &self.grid;
        if g.modes.is_empty() {
            p.push("grid.modes is empty".to_string());
        }
        if g.ws.is_empty() {
            p.push("grid.ws is empty".to_string());
        }
        if g.thresholds.is_empty() {
            p.push("grid.thresholds is empty".to_string());
        }
        if g.tc_bps.is_empty() {
            p.push("grid.tc_bps is empty".to_string());
        }
        if has_duplicates(&g.modes) {
            p.push("grid.modes has duplicates".to_string());
        }
        if has_duplicates(&g.ws) {
            p.push("grid.ws has duplicates".to_string());
        }
        if has_duplicates(&g.thresholds) {
            p.push("grid.thresholds has duplicates".to_string());
        }
        if has_duplicates(&g.tc_bps) {
            p.push("grid.tc_bps has duplicates".to_string());
        }
        for &ws in &g.ws {
            for &[l, s] in &g.thresholds {
                let params = StrategyParams { ws, long_z: l, short_z: s, z_window: g.z_window, exit_level: g.exit_level };
                if let Err(e) = params.validate() {
                    config_problems(e, &format!("grid (ws {ws}, L {l}, S {s})"), &mut p);
                }
            }
        }
        for &tc in &g.tc_bps {
            if !(tc.is_finite() && tc >= 0.0) {
                p.push(format!("grid.tc_bps entry {tc} must be finite and >= 0"));
            }
        }
        let ledger = LedgerConfig { hedge_tc_bps: self.portfolio.hedge_tc_bps, ..LedgerConfig::default() };
        if let Err(e) = ledger.validate() {
            config_problems(e, "portfolio", &mut p);
        }
        if let Err(e) = self.engine_config().validate() {
            config_problems(e, "engine", &mut p);
        }
        if self.panel.universe_size == 0 {
            p.push("panel.universe_size must be positive".to_string());
        }
        match self.data.source {
            DataSource::Synthetic => {
                if let Err(e) = self.synth_config().validate() {
                    config_problems(e, "data.synth", &mut p);
                }
            }
            DataSource::Csv => {
                for (key, path) in [("data.assets", &self.data.assets), ("data.index", &self.data.index)] {
                    match path {
                        None => p.push(format!("{key} is required for csv data")),
                        Some(path) if !path.is_file() => p.push(format!("{key} {} does not exist", path.display())),
                        _ => {}
                    }
                }
            }
        }
        let f = &self.features;
        if f.beta_window < 3 || f.momentum_lookback <= f.momentum_skip {
            p.push("features: beta_window >= 3 and momentum_lookback > momentum_skip required".to_string());
        }
        if p.is_empty() { Ok(()) } else { Err(Error::Config(p)) }
    }

    /// The configuration with the run seed written into every seeded
    /// section.
    pub fn effective(&self) -> RunConfig {
        let mut cfg = self.clone();
        cfg.data.synth.seed = self.seed;
        cfg.engine.seed = self.seed;
        cfg
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig { seed: self.seed, ..self.data.synth.clone() }
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig { seed: self.seed, ..self.engine.clone() }
    }

    pub fn ledger_config(&self, tc_bps: f64) -> LedgerConfig {
        LedgerConfig {
            tc_bps,
            hedge: self.portfolio.hedge,
            hedge_financing: self.portfolio.hedge_financing,
            hedge_tc_bps: self.portfolio.hedge_tc_bps,
            ..LedgerConfig::default()
        }
    }
}

/// Builds the factor panel from the configured source.
pub fn prepare_panel(cfg: &RunConfig) -> Result<FactorPanel> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let out = synth_generate(&cfg.synth_config())?;
            FactorPanel::from_parts(&out.panel, &out.exposures, &cfg.panel)
        }
        DataSource::Csv => {
            let (a, i) = match (&cfg.data.assets, &cfg.data.index) {
                (Some(a), Some(i)) => (a, i),
                _ => return Err(Error::Config(vec!["csv data needs data.assets and data.index".into()])),
            };
            let raw = load_panel(a, i, SchemaVersion::V1)?;
            FactorPanel::from_raw(&raw, &cfg.features, &cfg.panel)
        }
    }
}

/// Writes the synthetic asset and index files; returns their paths.
pub fn run_synth(cfg: &RunConfig, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let synth = cfg.synth_config();
    synth.validate()?;
    let out = synth_generate(&synth)?;
    std::fs::create_dir_all(out_dir)?;
    let (a, i) = (out_dir.join("assets.csv"), out_dir.join("index.csv"));
    write_panel(&out.panel, &a, &i)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out_dir.join("factors.csv"))?);
    let names: Vec<String> = (1..=synth.n_factors).map(|j| format!("f_x{j}")).collect();
    writeln!(f, "date,{}", names.join(","))?;
    for (date, fk) in out.panel.dates.iter().zip(&out.factors) {
        let cells: Vec<String> = fk.iter().map(|v| fmt_exact(*v)).collect();
        writeln!(f, "{date},{}", cells.join(","))?;
    }
    f.flush()?;
    Ok((a, i))
}

/// Writes `exposures.csv`: the priced exposures, beta and universe flag of
/// every listed asset-day.
pub fn run_features(cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    let panel = prepare_panel(cfg)?;
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join("exposures.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    writeln!(f, "date,asset_id,in_universe,beta,{}", panel.factor_names.join(","))?;
    for (k, date) in panel.dates.iter().enumerate() {
        for (i, id) in panel.asset_ids.iter().enumerate() {
            let x = panel.exposures[k].row(i);
            let beta = panel.betas[(k, i)];
            if !panel.in_universe[(k, i)] && !beta.is_finite() && x.iter().all(|v| !v.is_finite()) {
                continue;
            }
            let cells: Vec<String> = x.iter().map(|v| fmt_sig(*v)).collect();
            writeln!(f, "{date},{id},{},{},{}", u8::from(panel.in_universe[(k, i)]), fmt_sig(beta), cells.join(","))?;
        }
    }
    f.flush()?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendSummary {
    pub states: Vec<BlendState>,
    pub mean_annual_sharpe: Option<f64>,
    pub pooled_sharpe: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub tag: String,
    pub mode: ModelMode,
    pub ws: usize,
    pub long_z: f64,
    pub short_z: f64,
    pub tc_bps: f64,
    pub perf: PerfSummary,
    pub blend: Option<BlendSummary>,
    /// Held positions that had no return on a holding day.
    pub missing_returns: usize,
    /// Paths relative to the output directory.
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelInfo {
    pub days: usize,
    pub assets: usize,
    pub factors: Vec<String>,
    pub start: Option<NaiveDate>,
    pub end: Option<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexPerf {
    pub mean_annual_sharpe: Option<f64>,
    pub pooled_sharpe: Option<f64>,
    pub max_drawdown: f64,
}

/// Versioned summary of a backtest run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub schema: String,
    pub version: u32,
    pub seed: u64,
    pub config: RunConfig,
    pub panel: PanelInfo,
    pub index: IndexPerf,
    pub points: Vec<PointResult>,
    pub percentiles: Vec<PercentileRow>,
}

fn num_tag(v: f64) -> String {
    fmt_sig(v).replace('-', "m")
}

pub fn point_tag(mode: ModelMode, ws: usize, long_z: f64, short_z: f64, tc_bps: f64) -> String {
    format!("{}_ws{ws}_l{}_s{}_tc{}", mode.as_str(), num_tag(long_z), num_tag(short_z), num_tag(tc_bps))
}

/// Activity behind each ledger row (same timing as the ledger).
pub fn activity_rows(panel: &FactorPanel, positions: &DMatrix<i8>, ledger: &Ledger) -> Vec<ActivityRow> {
    let n = panel.assets();
    ledger
        .rows
        .iter()
        .enumerate()
        .map(|(k, row)| {
            if k == 0 {
                return ActivityRow { date: row.date, traded: 0.0, entries: 0, held: 0, universe: 0, turnover: 0.0 };
            }
            let mut entries = 0;
            let mut held = 0;
            for i in 0..n {
                let now = positions[(k - 1, i)];
                let before = if k >= 2 { positions[(k - 2, i)] } else { 0 };
                held += usize::from(now != 0);
                entries += usize::from(now != 0 && before == 0);
            }
            let universe = (0..n).filter(|&i| panel.in_universe[(k - 1, i)]).count();
            let base = if row.pi > 0.0 { row.pi } else { ledger.rows[k - 1].pi };
            let turnover = if row.traded > 0.0 && base > 0.0 { row.traded / base } else { 0.0 };
            ActivityRow { date: row.date, traded: row.traded, entries, held, universe, turnover }
        })
        .collect()
}

fn write_drawdown_csv(dates: &[NaiveDate], net: &[f64], path: &Path) -> Result<()> {
    let dd = rolling_drawdown(net, DRAWDOWN_WINDOW)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "date,equity,drawdown")?;
    for ((d, e), x) in dates.iter().zip(&dd.equity).zip(&dd.drawdown) {
        writeln!(out, "{d},{},{}", fmt_exact(*e), fmt_exact(*x))?;
    }
    out.flush()?;
    Ok(())
}

fn write_blend_csv(dates: &[NaiveDate], lo: &[f64], ls: &[f64], blended: &[f64], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "date,long_only,long_short,blended")?;
    for k in 0..dates.len() {
        writeln!(out, "{},{},{},{}", dates[k], fmt_exact(lo[k]), fmt_exact(ls[k]), fmt_exact(blended[k]))?;
    }
    out.flush()?;
    Ok(())
}

struct SignalPoint {
    mode: ModelMode,
    ws: usize,
    long_z: f64,
    short_z: f64,
}

fn evaluate_point(
    cfg: &RunConfig,
    panel: &FactorPanel,
    sp: &SignalPoint,
    signals: &Signals,
    out_dir: &Path,
) -> Result<Vec<PointResult>> {
    let mut results = Vec::new();
    let long_only = &panel.index_excess_returns;
    for &tc in &cfg.grid.tc_bps {
        let tag = point_tag(sp.mode, sp.ws, sp.long_z, sp.short_z, tc);
        let dir = out_dir.join("points").join(&tag);
        std::fs::create_dir_all(&dir)?;
        let ledger = build_ledger(panel, &signals.positions, &cfg.ledger_config(tc))?;
        let activity = activity_rows(panel, &signals.positions, &ledger);
        let net = ledger.net_excess();
        let perf = perf_summary(&panel.dates, &net, &activity)?;
        ledger.write_csv(&dir.join("ledger.csv"))?;
        write_activity_csv(&activity, &dir.join("activity.csv"))?;
        write_drawdown_csv(&panel.dates, &net, &dir.join("drawdown.csv"))?;
        let mut files = ["ledger.csv", "activity.csv", "drawdown.csv"].map(|f| format!("points/{tag}/{f}")).to_vec();
        let blend = if cfg.portfolio.blend {
            let b = blend_series(&panel.dates, long_only, &net)?;
            write_blend_csv(&panel.dates, long_only, &net, &b.returns, &dir.join("blend.csv"))?;
            files.push(format!("points/{tag}/blend.csv"));
            Some(BlendSummary {
                mean_annual_sharpe: mean_annual_sharpe(&annual_sharpes(&panel.dates, &b.returns)),
                pooled_sharpe: sharpe_annual(&b.returns),
                states: b.states,
            })
        } else {
            None
        };
        results.push(PointResult {
            tag,
            mode: sp.mode,
            ws: sp.ws,
            long_z: sp.long_z,
            short_z: sp.short_z,
            tc_bps: tc,
            perf,
            blend,
            missing_returns: ledger.missing_returns,
            files,
        });
    }
    Ok(results)
}

fn write_annual_sharpe_csv(points: &[PointResult], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "tag,mode,ws,long_z,short_z,tc_bps,year,observations,flagged,sharpe")?;
    for p in points {
        for y in &p.perf.annual {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                p.tag,
                p.mode.as_str(),
                p.ws,
                fmt_sig(p.long_z),
                fmt_sig(p.short_z),
                fmt_sig(p.tc_bps),
                y.year.unwrap_or_default(),
                y.observations,
                u8::from(y.flagged),
                y.sharpe.map(fmt_exact).unwrap_or_default()
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Canonical ordering so permuted grids give identical summaries.
fn sort_points(points: &mut [PointResult]) {
    points.sort_by(|a, b| {
        a.mode
            .cmp(&b.mode)
            .then(a.ws.cmp(&b.ws))
            .then(a.long_z.total_cmp(&b.long_z))
            .then(a.short_z.total_cmp(&b.short_z))
            .then(a.tc_bps.total_cmp(&b.tc_bps))
    });
}

/// Annual-Sharpe quartiles per `(mode, tc, ws)`, pooled over thresholds.
pub fn grid_percentiles(points: &[PointResult]) -> Vec<PercentileRow> {
    let groups: Vec<((String, f64, usize), Vec<f64>)> = points
        .iter()
        .map(|p| {
            let vals = p.perf.annual.iter().filter_map(|y| y.sharpe).collect();
            ((p.mode.as_str().to_string(), p.tc_bps, p.ws), vals)
        })
        .collect();
    percentile_table(&groups)
}

fn write_models(run: &EngineRun, path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Snapshot<'a> {
        schema: &'static str,
        factors: &'a [String],
        models: &'a [crate::transition::NeuralARModel],
    }
    if let Some(models) = &run.models {
        let snap = Snapshot { schema: "statarb-neural-models/1", factors: &run.factor_names, models };
        std::fs::write(path, serde_json::to_string_pretty(&snap)?)?;
    }
    Ok(())
}

/// Runs the whole grid and writes every artifact under `cfg.out`.
///
/// Engines run once per model mode, signals once per `(mode, ws, L, S)`,
/// and ledgers once per transaction-cost level.
pub fn run_backtest(cfg: &RunConfig) -> Result<BacktestReport> {
    cfg.validate()?;
    let panel = prepare_panel(cfg)?;
    let out_dir = cfg.out.clone();
    std::fs::create_dir_all(&out_dir)?;
    let engine_cfg = cfg.engine_config();
    let modes: BTreeSet<ModelMode> = cfg.grid.modes.iter().copied().collect();
    let engine_modes: Vec<EngineMode> = modes.iter().filter_map(|m| m.engine()).collect();
    let runs: Vec<EngineRun> =
        engine_modes.par_iter().map(|m| run_engine(&panel, *m, &engine_cfg)).collect::<Result<_>>()?;
    for run in &runs {
        if cfg.output.diagnostics {
            write_diagnostics(run, &out_dir.join(format!("engine_{}.csv", run.mode.as_str())))?;
        }
        if cfg.output.models && run.models.is_some() {
            write_models(run, &out_dir.join(format!("models_{}.json", run.mode.as_str())))?;
        }
    }
    let mut signal_points = Vec::new();
    for &mode in &modes {
        for &ws in &cfg.grid.ws {
            for &[long_z, short_z] in &cfg.grid.thresholds {
                signal_points.push(SignalPoint { mode, ws, long_z, short_z });
            }
        }
    }
    let mut points: Vec<PointResult> = signal_points
        .par_iter()
        .map(|sp| {
            let params = StrategyParams {
                ws: sp.ws,
                long_z: sp.long_z,
                short_z: sp.short_z,
                z_window: cfg.grid.z_window,
                exit_level: cfg.grid.exit_level,
            };
            let signals = match sp.mode.engine() {
                Some(em) => {
                    let run = runs.iter().find(|r| r.mode == em).expect("engine run per mode");
                    run_signals(&panel, Some(&run.r_filt), &params, SignalMode::Model)?
                }
                None => run_signals(&panel, None, &params, SignalMode::Benchmark)?,
            };
            if cfg.output.signals {
                let tag = point_tag(sp.mode, sp.ws, sp.long_z, sp.short_z, f64::NAN);
                let tag = tag.trim_end_matches("_tc").to_string();
                std::fs::create_dir_all(out_dir.join("signals"))?;
                signals.write_csv(&panel, &out_dir.join("signals").join(format!("{tag}.csv")))?;
            }
            evaluate_point(cfg, &panel, sp, &signals, &out_dir)
        })
        .collect::<Result<Vec<Vec<PointResult>>>>()?
        .into_iter()
        .flatten()
        .collect();
    sort_points(&mut points);
    let percentiles = grid_percentiles(&points);
    write_percentile_csv(&percentiles, &out_dir.join("percentiles.csv"))?;
    std::fs::write(out_dir.join("percentiles.txt"), render_percentile_text(&percentiles))?;
    write_annual_sharpe_csv(&points, &out_dir.join("annual_sharpe.csv"))?;
    let idx = &panel.index_excess_returns;
    let index = IndexPerf {
        mean_annual_sharpe: mean_annual_sharpe(&annual_sharpes(&panel.dates, idx)),
        pooled_sharpe: sharpe_annual(idx),
        max_drawdown: rolling_drawdown(idx, DRAWDOWN_WINDOW)?.max_drawdown,
    };
    let report = BacktestReport {
        schema: SUMMARY_SCHEMA.to_string(),
        version: SUMMARY_VERSION,
        seed: cfg.seed,
        config: cfg.effective(),
        panel: PanelInfo {
            days: panel.days(),
            assets: panel.assets(),
            factors: panel.factor_names.clone(),
            start: panel.dates.first().copied(),
            end: panel.dates.last().copied(),
        },
        index,
        points,
        percentiles,
    };
    std::fs::write(out_dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    std::fs::write(out_dir.join("config.toml"), cfg.effective().to_toml()?)?;
    Ok(report)
}

/// Reads a ledger CSV back into `(dates, net_excess)`.
pub fn read_ledger_net(path: &Path) -> Result<(Vec<NaiveDate>, Vec<f64>)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn {
            path: path.display().to_string(),
            column: name.to_string(),
        })
    };
    let (c_date, c_net) = (col("date")?, col("net_excess")?);
    let (mut dates, mut net) = (Vec::new(), Vec::new());
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse_err = |message: String| Error::Parse { path: path.display().to_string(), line: line as u64 + 2, message };
        dates.push(rec[c_date].parse::<NaiveDate>().map_err(|e| parse_err(e.to_string()))?);
        net.push(rec[c_net].parse::<f64>().map_err(|e| parse_err(e.to_string()))?);
    }
    Ok((dates, net))
}

/// Reads an activity CSV back into rows.
pub fn read_activity(path: &Path) -> Result<Vec<ActivityRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse_err = |message: String| Error::Parse { path: path.display().to_string(), line: line as u64 + 2, message };
        let num = |i: usize| rec[i].parse::<f64>().map_err(|e| parse_err(e.to_string()));
        let int = |i: usize| rec[i].parse::<usize>().map_err(|e| parse_err(e.to_string()));
        rows.push(ActivityRow {
            date: rec[0].parse().map_err(|e: chrono::ParseError| parse_err(e.to_string()))?,
            traded: num(1)?,
            entries: int(2)?,
            held: int(3)?,
            universe: int(4)?,
            turnover: num(5)?,
        });
    }
    Ok(rows)
}

fn opt_close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= 1e-12 * x.abs().max(1.0),
        _ => false,
    }
}

fn perf_close(a: &PerfSummary, b: &PerfSummary) -> bool {
    let stats = a.annual.iter().chain([&a.aggregate]).zip(b.annual.iter().chain([&b.aggregate]));
    a.annual.len() == b.annual.len()
        && opt_close(a.mean_annual_sharpe, b.mean_annual_sharpe)
        && opt_close(a.pooled_sharpe, b.pooled_sharpe)
        && stats.into_iter().all(|(x, y)| {
            x.year == y.year
                && x.observations == y.observations
                && x.flagged == y.flagged
                && x.trades == y.trades
                && opt_close(x.sharpe, y.sharpe)
                && opt_close(Some(x.max_drawdown), Some(y.max_drawdown))
                && opt_close(Some(x.turnover), Some(y.turnover))
                && opt_close(Some(x.invested_pct), Some(y.invested_pct))
        })
}

#[derive(Debug, Clone)]
pub struct ReportOutput {
    pub summary: BacktestReport,
    /// Tags whose statistics could not be reproduced from their CSVs.
    pub mismatches: Vec<String>,
    pub text: String,
}

/// Re-derives every grid point's statistics from its emitted ledger and
/// activity CSVs, checks them against the summary and renders tables.
pub fn run_report(out_dir: &Path) -> Result<ReportOutput> {
    let summary_path = out_dir.join(SUMMARY_FILE);
    let text = std::fs::read_to_string(&summary_path)
        .map_err(|e| Error::invalid(format!("cannot read {}: {e}", summary_path.display())))?;
    let summary: BacktestReport = serde_json::from_str(&text)?;
    if summary.schema != SUMMARY_SCHEMA || summary.version != SUMMARY_VERSION {
        return Err(Error::invalid(format!(
            "unsupported summary schema {} v{} (expected {SUMMARY_SCHEMA} v{SUMMARY_VERSION})",
            summary.schema, summary.version
        )));
    }
    let mut mismatches = Vec::new();
    for p in &summary.points {
        let dir = out_dir.join("points").join(&p.tag);
        let (dates, net) = read_ledger_net(&dir.join("ledger.csv"))?;
        let activity = read_activity(&dir.join("activity.csv"))?;
        let perf = perf_summary(&dates, &net, &activity)?;
        if !perf_close(&perf, &p.perf) {
            mismatches.push(p.tag.clone());
        }
    }
    let recomputed = grid_percentiles(&summary.points);
    if recomputed != summary.percentiles {
        mismatches.push("percentiles".to_string());
    }
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} v{}  seed {}  panel {} days x {} assets",
        summary.schema, summary.version, summary.seed, summary.panel.days, summary.panel.assets
    );
    let show = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "NA".into());
    let _ = writeln!(
        out,
        "index: mean annual Sharpe {}  pooled Sharpe {}  max drawdown {:.2}%\n",
        show(summary.index.mean_annual_sharpe),
        show(summary.index.pooled_sharpe),
        100.0 * summary.index.max_drawdown
    );
    let header = ["tag", "mean_sr", "pooled_sr", "max_dd%", "trades", "invested%", "blend_sr"];
    let rows: Vec<[String; 7]> = summary
        .points
        .iter()
        .map(|p| {
            [
                p.tag.clone(),
                show(p.perf.mean_annual_sharpe),
                show(p.perf.pooled_sharpe),
                format!("{:.2}", 100.0 * p.perf.aggregate.max_drawdown),
                p.perf.aggregate.trades.to_string(),
                format!("{:.1}", p.perf.aggregate.invested_pct),
                show(p.blend.as_ref().and_then(|b| b.mean_annual_sharpe)),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  "));
    };
    line(header.to_vec());
    for r in &rows {
        line(r.iter().map(String::as_str).collect());
    }
    out.push('\n');
    out.push_str(&render_percentile_text(&summary.percentiles));
    if !mismatches.is_empty() {
        let _ = writeln!(out, "\ninconsistent with emitted CSVs: {}", mismatches.join(", "));
    }
    Ok(ReportOutput { summary, mismatches, text: out })
}
