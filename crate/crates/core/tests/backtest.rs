use std::path::Path;
use std::time::Instant;

use statarb_core::backtest::*;
use statarb_core::market_data::{ExposureProcess, MispricingSpec, SynthConfig};
use statarb_core::Error;

fn small_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig { seed: 3, out: out.to_path_buf(), ..RunConfig::default() };
    cfg.data.synth = SynthConfig {
        n_assets: 50,
        n_factors: 3,
        days: 500,
        mispricing: Some(MispricingSpec { half_life: 5.0, std: 0.04 }),
        ..SynthConfig::default()
    };
    cfg.grid.modes = vec![ModelMode::Kf];
    cfg.grid.ws = vec![5];
    cfg.grid.thresholds = vec![[1.5, 2.0]];
    cfg
}

#[test]
fn smoke_run_emits_declared_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let start = Instant::now();
    let report = run_backtest(&cfg).unwrap();
    assert!(start.elapsed().as_secs_f64() < 10.0);
    assert_eq!(report.points.len(), 1);
    let p = &report.points[0];
    assert_eq!(p.tag, "kf_ws5_l1.5_s2_tc5");
    assert!(p.perf.aggregate.trades > 0);
    for f in ["summary.json", "config.toml", "percentiles.csv", "percentiles.txt", "annual_sharpe.csv", "engine_kf.csv"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    for f in &p.files {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    assert_eq!(p.files.len(), 4);
    let ledger = std::fs::read_to_string(dir.path().join(&p.files[0])).unwrap();
    assert_eq!(ledger.lines().count(), 501);
}

#[test]
fn reruns_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = small_config(a.path());
    cfg.grid.tc_bps = vec![0.0, 5.0];
    run_backtest(&cfg).unwrap();
    cfg.out = b.path().to_path_buf();
    run_backtest(&cfg).unwrap();
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(a.path(), SUMMARY_FILE), read(b.path(), SUMMARY_FILE));
    assert_eq!(
        read(a.path(), "points/kf_ws5_l1.5_s2_tc0/ledger.csv"),
        read(b.path(), "points/kf_ws5_l1.5_s2_tc0/ledger.csv")
    );
}

#[test]
fn permuted_grid_gives_identical_outputs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = small_config(a.path());
    cfg.grid.modes = vec![ModelMode::Ols, ModelMode::Bench];
    cfg.grid.ws = vec![5, 10];
    cfg.grid.thresholds = vec![[1.0, 2.0], [1.5, 1.5]];
    cfg.grid.tc_bps = vec![0.0, 10.0];
    run_backtest(&cfg).unwrap();
    cfg.out = b.path().to_path_buf();
    cfg.grid.modes.reverse();
    cfg.grid.ws.reverse();
    cfg.grid.thresholds.reverse();
    cfg.grid.tc_bps.reverse();
    let report = run_backtest(&cfg).unwrap();
    assert_eq!(report.points.len(), 16);
    for p in &report.points {
        for f in &p.files {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }
    let sa: BacktestReport = serde_json::from_slice(&std::fs::read(a.path().join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(sa.points, report.points);
    assert_eq!(sa.percentiles, report.percentiles);
}

#[test]
fn summary_is_recomputable_from_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.data.synth.days = 800;
    cfg.grid.tc_bps = vec![0.0, 5.0, 15.0];
    let report = run_backtest(&cfg).unwrap();
    let out = run_report(dir.path()).unwrap();
    assert!(out.mismatches.is_empty(), "{:?}", out.mismatches);
    assert_eq!(out.summary.points, report.points);
    assert_eq!(out.summary.percentiles, report.percentiles);
    assert_eq!(out.summary.config.data.synth.seed, 3);
    assert!(out.text.contains("kf_ws5_l1.5_s2_tc15"));
    // a tampered ledger is caught
    let ledger = dir.path().join(&report.points[0].files[0]);
    let text = std::fs::read_to_string(&ledger).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let row = lines.len() - 3;
    let mut cells: Vec<String> = lines[row].split(',').map(String::from).collect();
    cells[7] = "0.05".into();
    lines[row] = cells.join(",");
    std::fs::write(&ledger, lines.join("\n") + "\n").unwrap();
    let out = run_report(dir.path()).unwrap();
    assert_eq!(out.mismatches, vec![report.points[0].tag.clone()]);
}

#[test]
fn bench_on_identical_assets_never_trades() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.data.synth = SynthConfig {
        n_assets: 20,
        n_factors: 1,
        days: 300,
        sigma_r: 0.0,
        exposure: ExposureProcess::Constant { value: 1.0 },
        risk_free_annual: 0.03,
        ..SynthConfig::default()
    };
    cfg.grid.modes = vec![ModelMode::Bench];
    cfg.grid.thresholds = vec![[0.5, 0.5]];
    let report = run_backtest(&cfg).unwrap();
    let p = &report.points[0];
    assert_eq!(p.perf.aggregate.trades, 0);
    let ledger = std::fs::read_to_string(dir.path().join(&p.files[0])).unwrap();
    for line in ledger.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        assert!(cells[1..].iter().all(|c| c.parse::<f64>().unwrap() == 0.0), "{line}");
    }
}

#[test]
fn validation_lists_every_problem() {
    let mut cfg = RunConfig::default();
    cfg.grid.ws = vec![];
    cfg.grid.tc_bps = vec![-1.0, 5.0, 5.0];
    cfg.grid.thresholds = vec![[0.0, 2.0]];
    cfg.engine.cold_start = 0;
    cfg.data.source = DataSource::Csv;
    match cfg.validate() {
        Err(Error::Config(list)) => {
            let all = list.join("\n");
            for needle in ["grid.ws is empty", "tc_bps has duplicates", "-1", "engine", "data.assets", "data.index"] {
                assert!(all.contains(needle), "missing `{needle}` in\n{all}");
            }
            assert!(list.len() >= 6);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn config_file_parsing() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(
        &path,
        r#"
seed = 9

[data]
source = "csv"
assets = "assets.csv"
index = "index.csv"

[grid]
modes = ["kf", "bench"]
ws = [5]
thresholds = [[1.5, 2.0]]
tc_bps = [0, 5, 10, 15]

[engine.neural_config]
epochs = 50
"#,
    )
    .unwrap();
    let cfg = RunConfig::from_file(&path).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.grid.modes, vec![ModelMode::Kf, ModelMode::Bench]);
    assert_eq!(cfg.grid.tc_bps, vec![0.0, 5.0, 10.0, 15.0]);
    assert_eq!(cfg.engine.neural_config.epochs, 50);
    assert_eq!(cfg.engine.neural_config.hidden, 32);
    assert_eq!(cfg.data.assets.as_deref(), Some(dir.path().join("assets.csv").as_path()));
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));

    let typo = RunConfig::from_toml_str("[grid]\nws = [5]\ntc_bp = [5]\n", None).unwrap_err();
    assert!(typo.to_string().contains("tc_bp"), "{typo}");
    let back = RunConfig::from_toml_str(&RunConfig::default().to_toml().unwrap(), None).unwrap();
    assert_eq!(back.grid, RunConfig::default().grid);
    assert_eq!(back.engine, RunConfig::default().engine);
}

#[test]
fn synth_and_features_commands_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.data.synth.days = 320;
    let (a, i) = run_synth(&cfg, dir.path()).unwrap();
    assert!(dir.path().join("factors.csv").is_file());
    let csv_cfg = RunConfig {
        data: DataConfig { source: DataSource::Csv, assets: Some(a), index: Some(i), ..DataConfig::default() },
        ..cfg.clone()
    };
    csv_cfg.validate().unwrap();
    let path = run_features(&csv_cfg, &dir.path().join("feat")).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().next().unwrap(), "date,asset_id,in_universe,beta,size,volatility,momentum,value");
    assert!(text.lines().count() > 320 * 50 / 2);
}
