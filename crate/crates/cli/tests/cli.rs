use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use minealloc::aggregate::{predict_ibt_series, AggregateSeries};
use minealloc::Allocation;

const T0: i64 = 444_444 * 3600;
const HOURS: i64 = 1000;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_minealloc"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn minealloc")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    /// Hourly prices, constant difficulty, and blocks from miners A (both
    /// chains) and B (BTC only).
    fn new(flat_prices: bool) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let mut prices = String::from("timestamp,chain,price_usd\n");
        let mut blocks = String::from("chain,height,timestamp,miner,difficulty\n");
        let (mut btc_h, mut bch_h) = (0, 0);
        for h in 0..HOURS {
            let t = T0 + h * 3600;
            let x = h as f64;
            let (btc, bch) = if flat_prices {
                (10000.0, 1500.0)
            } else {
                (
                    10000.0 * (1.0 + 0.05 * (0.1 * x).sin()),
                    1500.0 * (1.0 + 0.08 * (0.037 * x + 1.0).sin() + 0.02 * (0.9 * x).cos()),
                )
            };
            writeln!(prices, "{t},BTC,{btc}").unwrap();
            writeln!(prices, "{t},BCH,{bch}").unwrap();
            for k in 0..5 {
                btc_h += 1;
                let miner = if k < 3 { "A" } else { "B" };
                writeln!(blocks, "BTC,{btc_h},{},{miner},1000", t + 600 * k + 60).unwrap();
            }
            if h % 2 == 0 || (h % 7 == 3) {
                bch_h += 1;
                writeln!(blocks, "BCH,{bch_h},{},A,150", t + 1800).unwrap();
            }
        }
        fs::write(root.join("prices.csv"), prices).unwrap();
        fs::write(
            root.join("difficulty.csv"),
            format!("timestamp,chain,difficulty\n{T0},BTC,1000\n{T0},BCH,150\n"),
        )
        .unwrap();
        fs::write(root.join("blocks.csv"), blocks).unwrap();
        Fixture { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn market_args(&self) -> Vec<String> {
        vec![
            "--prices".into(),
            self.path("prices.csv").display().to_string(),
            "--difficulty".into(),
            self.path("difficulty.csv").display().to_string(),
        ]
    }
}

fn run_owned(args: Vec<String>) -> Output {
    bin().args(&args).output().expect("spawn minealloc")
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

#[test]
fn fit_without_blocks_is_usage_error() {
    let f = Fixture::new(false);
    let mut args = vec!["fit".to_string()];
    args.extend(f.market_args());
    args.extend(["--miner", "A", "--out"].map(String::from));
    args.push(f.path("p.json").display().to_string());
    let o = run_owned(args);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("--blocks"));
}

#[test]
fn fit_unknown_miner_is_insufficient_data() {
    let f = Fixture::new(false);
    let mut args = vec!["fit".to_string()];
    args.extend(f.market_args());
    args.extend(["--blocks", s(&f.path("blocks.csv")), "--miner", "Nobody", "--out", s(&f.path("p.json"))].map(String::from));
    let o = run_owned(args);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("Nobody"));
}

#[test]
fn malformed_price_row_reports_line() {
    let f = Fixture::new(false);
    let mut text = fs::read_to_string(f.path("prices.csv")).unwrap();
    text.push_str(&format!("{},BTC,abc\n", T0 + HOURS * 3600));
    fs::write(f.path("prices.csv"), text).unwrap();
    let mut args = vec!["fit".to_string()];
    args.extend(f.market_args());
    args.extend(["--blocks", s(&f.path("blocks.csv")), "--miner", "A", "--out", s(&f.path("p.json"))].map(String::from));
    let o = run_owned(args);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains(&format!("line {}", 2 * HOURS + 2)), "{}", stderr(&o));
}

#[test]
fn fit_writes_params_and_manifest() {
    let f = Fixture::new(false);
    let out = f.path("params.json");
    let mut args = vec!["fit".to_string()];
    args.extend(f.market_args());
    args.extend(["--blocks", s(&f.path("blocks.csv")), "--miner", "A", "--out", s(&out), "--threads", "2"].map(String::from));
    let o = run_owned(args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let params: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let p = &params[0];
    assert_eq!(p["miner"], "A");
    let lb = p["lookback_hours"].as_u64().unwrap() as usize;
    assert!(minealloc::risk::lookback_candidates().contains(&lb));
    assert!(p["risk"].as_f64().unwrap() > 0.0);
    let manifest = f.path("params.json.manifest.json");
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(m["command"], "fit");
    assert_eq!(m["inputs"].as_array().unwrap().len(), 3);
    assert_eq!(code(&run(&["verify", s(&manifest)])), 0);
    fs::write(&out, "[]").unwrap();
    assert_eq!(code(&run(&["verify", s(&manifest)])), 2);
}

fn allocate(f: &Fixture, params: &str, weights: &str, out: &Path) -> Output {
    fs::write(f.path("params.json"), params).unwrap();
    fs::write(f.path("weights.csv"), weights).unwrap();
    let mut args = vec!["allocate".to_string()];
    args.extend(f.market_args());
    args.extend(
        ["--params", s(&f.path("params.json")), "--hash-weights", s(&f.path("weights.csv")), "--out", s(out)]
            .map(String::from),
    );
    run_owned(args)
}

#[test]
fn allocate_constant_prices_gives_constant_columns() {
    let f = Fixture::new(true);
    let out = f.path("alloc.csv");
    let o = allocate(&f, r#"[{"miner":"A","lookback_hours":24,"risk":1e-4}]"#, "miner,weight\nA,1\n", &out);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (_, rows) = read_csv(&out);
    assert!(rows.len() > 900);
    for r in &rows {
        for (a, b) in r[1..].iter().zip(&rows[0][1..]) {
            assert_eq!(a, b);
        }
    }
}

#[test]
fn allocate_four_miners_round_trip() {
    let f = Fixture::new(false);
    let out = f.path("alloc.csv");
    let params = serde_json::to_string(&minealloc::risk::default_aggregate_miners()).unwrap();
    let weights = "miner,weight\nViaBTC,3\nBTC.TOP,1\nAntPool,2\nBTC.com,4\n";
    let o = allocate(&f, &params, weights, &out);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, rows) = read_csv(&out);
    let miners = ["ViaBTC", "BTC.TOP", "AntPool", "BTC.com"];
    let mut expected = vec!["timestamp", "BTC_allocation", "BCH_allocation"].into_iter().map(String::from).collect::<Vec<_>>();
    for m in miners {
        expected.extend([format!("{m}/BTC_allocation"), format!("{m}/BCH_allocation"), format!("{m}/hash_weight")]);
    }
    expected.extend(["dari/BTC_allocation", "dari/BCH_allocation", "price/BTC_allocation", "price/BCH_allocation"].map(String::from));
    assert_eq!(header, expected);
    for r in &rows {
        let total: f64 = (0..4).map(|j| r[5 + 3 * j]).sum();
        for c in 0..2 {
            let agg: f64 = (0..4).map(|j| r[3 + 3 * j + c] * r[5 + 3 * j]).sum::<f64>() / total;
            assert!((agg - r[1 + c]).abs() <= 1e-9, "{agg} vs {}", r[1 + c]);
        }
        assert!((r[15] + r[16] - 1.0).abs() < 1e-12);
        assert!((r[17] + r[18] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn allocate_from_blocks_and_short_history() {
    let f = Fixture::new(false);
    let out = f.path("alloc.csv");
    fs::write(f.path("params.json"), r#"[{"miner":"A","lookback_hours":24,"risk":1e-4}]"#).unwrap();
    let mut args = vec!["allocate".to_string()];
    args.extend(f.market_args());
    args.extend(["--params", s(&f.path("params.json")), "--blocks", s(&f.path("blocks.csv")), "--out", s(&out)].map(String::from));
    let o = run_owned(args.clone());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    fs::write(f.path("params.json"), r#"[{"miner":"A","lookback_hours":5000,"risk":1e-4}]"#).unwrap();
    let o = run_owned(args);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

fn write_allocations(path: &Path, bch: impl Fn(usize) -> f64, hours: usize) {
    let mut text = String::from("timestamp,BTC_allocation,BCH_allocation\n");
    for h in 0..hours {
        let w = bch(h);
        writeln!(text, "{},{},{}", T0 + h as i64 * 3600, 1.0 - w, w).unwrap();
    }
    fs::write(path, text).unwrap();
}

fn predict(f: &Fixture, extra: &[&str]) -> Output {
    let (alloc, out) = (f.path("alloc.csv"), f.path("ibt.csv"));
    let mut args = vec!["predict-ibt", "--allocations", s(&alloc), "--out", s(&out)];
    args.extend(extra);
    run(&args)
}

#[test]
fn predict_constant_allocation_is_flat() {
    let f = Fixture::new(true);
    write_allocations(&f.path("alloc.csv"), |_| 0.1, 400);
    let o = predict(&f, &["--target", "600"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, rows) = read_csv(&f.path("ibt.csv"));
    assert_eq!(header, ["period_start", "ibt_change_BTC", "ibt_change_BCH", "ibt_seconds_BTC", "ibt_seconds_BCH"]);
    assert!(!rows.is_empty());
    for r in rows {
        assert_eq!(&r[1..], [1.0, 1.0, 600.0, 600.0]);
    }
}

#[test]
fn predict_step_fixture_matches_library() {
    let f = Fixture::new(true);
    let bch = |h: usize| if h < 250 { 0.1 } else { 0.05 + 0.001 * (h % 13) as f64 };
    write_allocations(&f.path("alloc.csv"), bch, 500);
    let o = predict(&f, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let agg = AggregateSeries {
        chains: vec!["BTC".into(), "BCH".into()],
        miners: Vec::new(),
        samples: (0..500)
            .map(|h| (T0 + h as i64 * 3600, Allocation::new(vec![1.0 - bch(h), bch(h)]).unwrap()))
            .collect(),
    };
    let oracle = predict_ibt_series(&agg, 6, 7).unwrap();
    let (_, rows) = read_csv(&f.path("ibt.csv"));
    assert_eq!(rows.len(), oracle.samples.len());
    for (r, (t, v)) in rows.iter().zip(&oracle.samples) {
        assert_eq!(r[0] as i64, *t);
        assert_eq!(&r[1..3], v.as_slice());
    }

    // Scoring the prediction against itself.
    fs::copy(f.path("ibt.csv"), f.path("actual.csv")).unwrap();
    let actual = f.path("actual.csv");
    let o = predict(&f, &["--actual", s(&actual)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((metrics["pearson"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(metrics["mae"].as_f64().unwrap(), 0.0);
}

#[test]
fn predict_short_history_exit_3() {
    let f = Fixture::new(true);
    write_allocations(&f.path("alloc.csv"), |_| 0.1, 100);
    assert_eq!(code(&predict(&f, &[])), 3);
}

fn shock(dir: &Path, name: &str, extra: &[&str]) -> (Output, Vec<u8>) {
    let out = dir.join(name);
    let mut args = vec!["shock", "--trials", "6", "--seed", "11", "--out", s(&out)];
    args.extend(extra);
    let o = run(&args);
    let bytes = fs::read(&out).unwrap_or_default();
    (o, bytes)
}

#[test]
fn shock_reproducible_and_flat_without_shock() {
    let dir = tempfile::tempdir().unwrap();
    let (o, a) = shock(dir.path(), "a.csv", &["--multiplier", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (_, b) = shock(dir.path(), "b.csv", &["--multiplier", "1", "--threads", "1"]);
    assert_eq!(a, b);
    let (_, rows) = read_csv(&dir.path().join("a.csv"));
    let mean = rows.iter().map(|r| r[2]).sum::<f64>() / rows.len() as f64;
    assert!((mean / 600.0 - 1.0).abs() < 0.25, "mean BCH IBT {mean}");

    let trace = dir.path().join("trace");
    let (o, c) = shock(dir.path(), "c.csv", &["--multiplier", "1", "--trace-dir", s(&trace)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(a, c);
    assert_eq!(fs::read_dir(&trace).unwrap().count(), 6);
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("c.csv.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["master_seed"], 11);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 7);
}

#[test]
fn shock_config_file_and_bad_multiplier() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"schema_version":1,"horizon_days":2,"noise_fraction":0.05}"#).unwrap();
    let (o, bytes) = shock(dir.path(), "a.csv", &["--multiplier", "2", "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(bytes).unwrap();
    assert!(text.lines().last().unwrap().starts_with("42,"));
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a.csv.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["inputs"][0]["path"], s(&cfg));

    for x in ["0", "-1", "4.5"] {
        let (o, _) = shock(dir.path(), "x.csv", &["--multiplier", x]);
        assert_eq!(code(&o), 2, "x={x}: {}", stderr(&o));
    }
    fs::write(&cfg, r#"{"schema_version":1,"bogus":3}"#).unwrap();
    let (o, _) = shock(dir.path(), "y.csv", &["--multiplier", "2", "--config", s(&cfg)]);
    assert_eq!(code(&o), 2);
    let (o, _) = shock(dir.path(), "z.csv", &["--multiplier", "2", "--seed"]);
    assert_eq!(code(&o), 2);
}
