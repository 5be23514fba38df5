mod manifest;
mod tables;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;

use minealloc::aggregate::{
    baseline_dari_allocation, baseline_price_allocation, economic_allocations, mean_abs_error, pearson,
    predict_ibt_series, DEFAULT_PERIOD_HOURS, DEFAULT_ROLLING_DAYS,
};
use minealloc::market::{
    load_blocks_csv, load_difficulty_csv, load_price_csv, profit_series, ChainSpec, DaaKind, DifficultySeries,
    PriceSeries, ProfitSeries, DEFAULT_COOLDOWN_HOURS, DEFAULT_TARGET_IBT,
};
use minealloc::risk::{
    actual_allocation_series, fit_grid, hash_weight_series, FitOptions, HashWeightSeries, MinerParams,
    DEFAULT_HALF_LIFE_HOURS,
};
use minealloc::shock::{combine_trials, run_experiment, run_trial, summarize_trial, write_summary_csv, write_trace_csv, ShockConfig};
use minealloc::{Error, Result};

use manifest::{manifest_path, FileDigest, RunManifest};

#[derive(Parser)]
#[command(name = "minealloc", version, about = "Hash-rate allocation across proof-of-work chains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit lookback and risk tolerance per miner from block attributions.
    Fit(FitArgs),
    /// Hourly economic allocation per miner, aggregate and baselines.
    Allocate(AllocateArgs),
    /// Predicted inter-block-time change from an allocation table.
    PredictIbt(PredictArgs),
    /// Monte Carlo price shock against difficulty adjustment.
    Shock(ShockArgs),
    /// Recompute the digests recorded in a run manifest.
    Verify {
        #[arg(value_name = "MANIFEST")]
        manifest: PathBuf,
    },
}

#[derive(Args)]
struct MarketArgs {
    #[arg(long, value_name = "F")]
    prices: PathBuf,
    #[arg(long, value_name = "F")]
    difficulty: PathBuf,
    #[arg(long, default_value_t = DEFAULT_COOLDOWN_HOURS)]
    cooldown_hours: usize,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    market: MarketArgs,
    #[arg(long, value_name = "F")]
    blocks: PathBuf,
    #[arg(long, value_name = "NAME", num_args = 1.., required = true)]
    miner: Vec<String>,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Worker threads for the grid search.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct AllocateArgs {
    #[command(flatten)]
    market: MarketArgs,
    #[arg(long, value_name = "FILE")]
    params: PathBuf,
    /// `timestamp,miner,weight` or `miner,weight`.
    #[arg(long, value_name = "FILE", required_unless_present = "blocks", conflicts_with = "blocks")]
    hash_weights: Option<PathBuf>,
    #[arg(long, value_name = "F")]
    blocks: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[arg(long, value_name = "FILE")]
    gnuplot_script: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long, value_name = "F")]
    allocations: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TARGET_IBT)]
    target: f64,
    #[arg(long, default_value_t = DEFAULT_PERIOD_HOURS)]
    period_hours: usize,
    #[arg(long, default_value_t = DEFAULT_ROLLING_DAYS)]
    rolling_days: usize,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Observed `period_start,ibt_change_<chain>` table to score against.
    #[arg(long, value_name = "F")]
    actual: Option<PathBuf>,
    /// Chain scored against `--actual`.
    #[arg(long, default_value = "BCH")]
    chain: String,
    #[arg(long, value_name = "FILE")]
    gnuplot_script: Option<PathBuf>,
}

#[derive(Args)]
struct ShockArgs {
    #[arg(long, value_name = "X", allow_negative_numbers = true)]
    multiplier: f64,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, value_name = "N")]
    seed: u64,
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[arg(long)]
    threads: Option<usize>,
    /// Writes one per-block trace CSV per trial here.
    #[arg(long, value_name = "DIR")]
    trace_dir: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    gnuplot_script: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(&a),
        Command::Allocate(a) => cmd_allocate(&a),
        Command::PredictIbt(a) => cmd_predict_ibt(&a),
        Command::Shock(a) => cmd_shock(&a),
        Command::Verify { manifest } => cmd_verify(&manifest),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_validation() || matches!(e, Error::Io { .. }) {
        2
    } else if e.is_insufficient_data() {
        3
    } else {
        4
    }
}

fn io_error(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(io_error(path))
}

fn digest(path: &Path) -> Result<FileDigest> {
    FileDigest::of(path).map_err(io_error(path))
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match threads {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(f),
    }
}

fn finish(mut m: RunManifest, inputs: &[&Path], outputs: &[PathBuf], primary: &Path) -> Result<()> {
    m.inputs = inputs.iter().map(|p| digest(p)).collect::<Result<_>>()?;
    m.outputs = outputs.iter().map(|p| digest(p)).collect::<Result<_>>()?;
    let path = manifest_path(primary);
    m.write(&path).map_err(io_error(&path))
}

fn chain_spec(chain: &str) -> ChainSpec {
    match chain {
        "BTC" => ChainSpec::btc(),
        "BCH" => ChainSpec::bch(),
        other => ChainSpec::new(other, DaaKind::PerBlockWindow),
    }
}

fn load_market(a: &MarketArgs) -> Result<(PriceSeries, DifficultySeries, ProfitSeries)> {
    let prices = load_price_csv(&a.prices)?;
    let diffs = load_difficulty_csv(&a.difficulty)?;
    let specs: Vec<ChainSpec> = prices.chains().iter().map(|c| chain_spec(c)).collect();
    let market = profit_series(&prices, &diffs, &specs)?;
    Ok((prices, diffs, market))
}

fn cmd_fit(a: &FitArgs) -> Result<()> {
    let (prices, diffs, market) = load_market(&a.market)?;
    let blocks = load_blocks_csv(&a.blocks, prices.chains())?;
    let opts = FitOptions {
        focus_chain: prices.chain_index("BCH").unwrap_or(prices.chains().len() - 1),
        ..FitOptions::default()
    };
    let params = with_threads(a.threads, || {
        a.miner
            .iter()
            .map(|m| {
                let actual = actual_allocation_series(&blocks, &diffs, m, DEFAULT_HALF_LIFE_HOURS)?;
                Ok(fit_grid(&actual, &market, a.market.cooldown_hours, &opts)?.params)
            })
            .collect::<Result<Vec<MinerParams>>>()
    })?;
    let mut text = serde_json::to_string_pretty(&params).map_err(|e| Error::Config(e.to_string()))?;
    text.push('\n');
    fs::write(&a.out, text).map_err(io_error(&a.out))?;

    let config = json!({
        "miners": a.miner,
        "cooldown_hours": a.market.cooldown_hours,
        "half_life_hours": DEFAULT_HALF_LIFE_HOURS,
        "focus_chain": opts.focus_chain,
        "lookbacks": opts.lookbacks,
        "risks_per_lookback": opts.risks_per_lookback,
        "min_eval_hours": opts.min_eval_hours,
    });
    finish(
        RunManifest::new("fit", &config.to_string(), None),
        &[&a.market.prices, &a.market.difficulty, &a.blocks],
        std::slice::from_ref(&a.out),
        &a.out,
    )
}

fn read_params(path: &Path) -> Result<Vec<MinerParams>> {
    let text = fs::read_to_string(path).map_err(io_error(path))?;
    let params: Vec<MinerParams> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line() as u64,
        message: e.to_string(),
    })?;
    if params.is_empty() {
        return Err(Error::Config(format!("{}: no miners", path.display())));
    }
    for p in &params {
        p.validate()?;
    }
    Ok(params)
}

fn cmd_allocate(a: &AllocateArgs) -> Result<()> {
    let (prices, diffs, market) = load_market(&a.market)?;
    let params = read_params(&a.params)?;
    let weights: Vec<HashWeightSeries> = match (&a.hash_weights, &a.blocks) {
        (Some(path), _) => {
            let file = File::open(path).map_err(io_error(path))?;
            let table = tables::read_hash_weights(file)?;
            params
                .iter()
                .map(|p| {
                    table
                        .iter()
                        .find(|w| w.miner_id == p.miner_id)
                        .cloned()
                        .ok_or_else(|| Error::UnknownMiner(p.miner_id.clone()))
                })
                .collect::<Result<_>>()?
        }
        (None, Some(path)) => {
            let blocks = load_blocks_csv(path, prices.chains())?;
            params
                .iter()
                .map(|p| hash_weight_series(&blocks, &diffs, &p.miner_id, DEFAULT_HALF_LIFE_HOURS))
                .collect::<Result<_>>()?
        }
        (None, None) => return Err(Error::Config("one of --hash-weights or --blocks is required".into())),
    };
    let econ = economic_allocations(&params, &market, &weights, a.market.cooldown_hours)?;

    let chains = market.chains().to_vec();
    let specs: Vec<ChainSpec> = chains.iter().map(|c| chain_spec(c)).collect();
    let price_cols: Vec<usize> = chains.iter().map(|c| prices.chain_index(c).unwrap_or(0)).collect();
    let diff_cols: Vec<usize> = chains.iter().map(|c| diffs.chain_index(c).unwrap_or(0)).collect();
    let mut dari = Vec::new();
    let mut by_price = Vec::new();
    for (t, _) in &econ.aggregate.samples {
        let i = prices.index_of(*t).ok_or_else(|| Error::InsufficientHistory(format!("no price at {t}")))?;
        let p: Vec<f64> = price_cols.iter().map(|&c| prices.price(c, i)).collect();
        let rewards: Vec<f64> = p.iter().zip(&specs).map(|(p, s)| p * s.coinbase_subsidy).collect();
        let d = diff_cols.iter().map(|&c| diffs.value_at(c, *t)).collect::<Result<Vec<_>>>()?;
        dari.push(baseline_dari_allocation(&rewards, &d)?.into_inner());
        by_price.push(baseline_price_allocation(&p)?.into_inner());
    }
    let timestamps: Vec<i64> = econ.aggregate.samples.iter().map(|(t, _)| *t).collect();
    let table = tables::AllocationTable {
        chains: &chains,
        aggregate: econ.aggregate.samples.iter().map(|(_, w)| w.weights()).collect(),
        miners: params
            .iter()
            .zip(&econ.per_miner)
            .zip(&weights)
            .map(|((p, series), hw)| {
                (
                    p.miner_id.clone(),
                    series.iter().map(|w| w.weights()).collect(),
                    timestamps.iter().map(|t| hw.value_at(*t).unwrap_or(0.0)).collect(),
                )
            })
            .collect(),
        timestamps: timestamps.clone(),
        dari,
        price: by_price,
    };
    table.write(create(&a.out)?)?;

    let mut outputs = vec![a.out.clone()];
    if let Some(script) = &a.gnuplot_script {
        let cols: Vec<String> = table.header();
        let plots: Vec<String> = cols
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, c)| c.ends_with("_allocation"))
            .map(|(k, c)| format!("'{}' using 1:{} with lines title '{}'", a.out.display(), k + 1, c))
            .collect();
        write_script(script, "allocation", &plots)?;
        outputs.push(script.clone());
    }

    let config = json!({
        "params": params,
        "cooldown_hours": a.market.cooldown_hours,
        "half_life_hours": DEFAULT_HALF_LIFE_HOURS,
        "weights_from": if a.hash_weights.is_some() { "hash_weights" } else { "blocks" },
    });
    let mut inputs: Vec<&Path> = vec![&a.market.prices, &a.market.difficulty, &a.params];
    inputs.extend(a.hash_weights.as_deref());
    inputs.extend(a.blocks.as_deref());
    finish(RunManifest::new("allocate", &config.to_string(), None), &inputs, &outputs, &a.out)
}

fn write_script(path: &Path, ylabel: &str, plots: &[String]) -> Result<()> {
    let mut w = create(path)?;
    let text = format!(
        "set datafile separator ','\nset key autotitle columnhead\nset xlabel 'time'\nset ylabel '{ylabel}'\nplot {}\n",
        plots.join(", \\\n     ")
    );
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(io_error(path))
}

fn cmd_predict_ibt(a: &PredictArgs) -> Result<()> {
    if !(a.target > 0.0 && a.target.is_finite()) {
        return Err(Error::Config(format!("target {} must be > 0", a.target)));
    }
    let file = File::open(&a.allocations).map_err(io_error(&a.allocations))?;
    let agg = tables::read_aggregate(file)?;
    let prediction = predict_ibt_series(&agg, a.period_hours, a.rolling_days)?;
    tables::write_prediction(&prediction, a.target, create(&a.out)?)?;

    let mut inputs: Vec<&Path> = vec![&a.allocations];
    if let Some(path) = &a.actual {
        let file = File::open(path).map_err(io_error(path))?;
        let (chains, rows) = tables::read_ibt_changes(file)?;
        let col = chains
            .iter()
            .position(|c| *c == a.chain)
            .ok_or_else(|| Error::Config(format!("{}: no column for chain {}", path.display(), a.chain)))?;
        let pcol = prediction
            .chains
            .iter()
            .position(|c| *c == a.chain)
            .ok_or_else(|| Error::Config(format!("allocations have no chain {}", a.chain)))?;
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for (t, r) in &prediction.samples {
            if let Ok(k) = rows.binary_search_by_key(t, |(s, _)| *s) {
                xs.push(r[pcol]);
                ys.push(rows[k].1[col]);
            }
        }
        let metrics = json!({
            "chain": a.chain,
            "periods": xs.len(),
            "pearson": pearson(&xs, &ys)?,
            "mae": mean_abs_error(&xs, &ys)?,
        });
        println!("{metrics}");
        inputs.push(path);
    }

    let mut outputs = vec![a.out.clone()];
    if let Some(script) = &a.gnuplot_script {
        let plots: Vec<String> = prediction
            .chains
            .iter()
            .enumerate()
            .map(|(k, c)| format!("'{}' using 1:{} with lines title 'ibt_change_{c}'", a.out.display(), k + 2))
            .collect();
        write_script(script, "IBT change ratio", &plots)?;
        outputs.push(script.clone());
    }
    let config = json!({
        "target": a.target,
        "period_hours": a.period_hours,
        "rolling_days": a.rolling_days,
        "chain": a.chain,
    });
    finish(RunManifest::new("predict-ibt", &config.to_string(), None), &inputs, &outputs, &a.out)
}

fn cmd_shock(a: &ShockArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_error(path))?;
            serde_json::from_str::<ShockConfig>(&text).map_err(|e| Error::Parse {
                line: e.line() as u64,
                message: e.to_string(),
            })?
        }
        None => ShockConfig::default(),
    };
    config.shock_multiplier = a.multiplier;
    config.master_seed = a.seed;
    if let Some(n) = a.trials {
        config.trials = n;
    }
    config.validate()?;

    let mut outputs = vec![a.out.clone()];
    let summary = with_threads(a.threads, || match &a.trace_dir {
        None => run_experiment(&config),
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_error(dir))?;
            let per_trial = (0..config.trials as u64)
                .into_par_iter()
                .map(|k| {
                    let trial = run_trial(&config, k)?;
                    let path = dir.join(format!("trial_{k:04}.csv"));
                    write_trace_csv(&trial, create(&path)?)?;
                    Ok(summarize_trial(&config, &trial))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(combine_trials(&config, &per_trial))
        }
    })?;
    write_summary_csv(&summary, create(&a.out)?)?;
    if let Some(dir) = &a.trace_dir {
        outputs.extend((0..config.trials).map(|k| dir.join(format!("trial_{k:04}.csv"))));
    }
    if let Some(script) = &a.gnuplot_script {
        let out = a.out.display();
        let plots = [
            format!("'{out}' using 1:3 with lines title 'BCH IBT'"),
            format!("'{out}' using 1:4 with lines title 'BTC IBT'"),
            format!("'{out}' using 1:2 with lines axes x1y2 title 'median BCH allocation'"),
        ];
        write_script(script, "seconds", &plots)?;
        outputs.push(script.clone());
    }

    let config_json = serde_json::to_string(&config).map_err(|e| Error::Config(e.to_string()))?;
    let mut inputs: Vec<&Path> = Vec::new();
    inputs.extend(a.config.as_deref());
    finish(RunManifest::new("shock", &config_json, Some(a.seed)), &inputs, &outputs, &a.out)
}

fn cmd_verify(path: &Path) -> Result<()> {
    let m = RunManifest::read(path).map_err(io_error(path))?;
    let bad = m.mismatches();
    if bad.is_empty() {
        println!("ok: {} inputs, {} outputs", m.inputs.len(), m.outputs.len());
        Ok(())
    } else {
        Err(Error::Config(format!("digest mismatch: {}", bad.join(", "))))
    }
}
