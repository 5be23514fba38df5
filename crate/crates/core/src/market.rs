//! Price, difficulty and block ingestion; the normalized profit vector and its
//! windowed mean and lagged-difference covariance.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::portfolio::{ProfitVector, VolatilityMatrix};

pub const HOUR: i64 = 3600;
/// Longest run of missing hours that is forward-filled.
pub const MAX_FILL_HOURS: usize = 6;
/// Coinbase maturity of 101 blocks, in whole hours.
pub const DEFAULT_COOLDOWN_HOURS: usize = 101 / 6;
pub const DEFAULT_SUBSIDY: f64 = 12.5;
pub const DEFAULT_TARGET_IBT: f64 = 600.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DaaKind {
    /// Retarget every block over a rolling window of prior blocks.
    PerBlockWindow,
    /// Retarget once per fixed-length epoch.
    Epoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub chain_id: String,
    /// Target inter-block time in seconds.
    pub target_ibt: f64,
    /// Coins per block, fees excluded.
    pub coinbase_subsidy: f64,
    pub cooldown_hours: usize,
    pub daa_kind: DaaKind,
}

impl ChainSpec {
    pub fn new(chain_id: &str, daa_kind: DaaKind) -> Self {
        ChainSpec {
            chain_id: chain_id.to_string(),
            target_ibt: DEFAULT_TARGET_IBT,
            coinbase_subsidy: DEFAULT_SUBSIDY,
            cooldown_hours: DEFAULT_COOLDOWN_HOURS,
            daa_kind,
        }
    }

    pub fn btc() -> Self {
        ChainSpec::new("BTC", DaaKind::Epoch)
    }

    pub fn bch() -> Self {
        ChainSpec::new("BCH", DaaKind::PerBlockWindow)
    }

    pub fn validate(&self) -> Result<()> {
        if self.chain_id.is_empty() || self.chain_id.contains(['.', ',']) {
            return Err(Error::Config(format!("invalid chain id {:?}", self.chain_id)));
        }
        if !(self.target_ibt > 0.0 && self.target_ibt.is_finite()) {
            return Err(Error::Config(format!("{}: target_ibt must be > 0", self.chain_id)));
        }
        if !(self.coinbase_subsidy > 0.0 && self.coinbase_subsidy.is_finite()) {
            return Err(Error::Config(format!("{}: subsidy must be > 0", self.chain_id)));
        }
        Ok(())
    }
}

/// Hourly USD quotes on a common grid, one column per chain.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    chains: Vec<String>,
    start: i64,
    columns: Vec<Vec<f64>>,
}

impl PriceSeries {
    /// Builds a series from complete hourly columns starting at `start`.
    pub fn new(chains: Vec<String>, start: i64, columns: Vec<Vec<f64>>) -> Result<Self> {
        if chains.is_empty() || chains.len() != columns.len() {
            return Err(Error::DimensionMismatch {
                expected: chains.len(),
                found: columns.len(),
            });
        }
        chain_positions(&chains)?;
        if start % HOUR != 0 {
            return Err(Error::Config(format!("start {start} is not on an hour boundary")));
        }
        let len = columns[0].len();
        for (c, col) in columns.iter().enumerate() {
            if col.len() != len {
                return Err(Error::DimensionMismatch {
                    expected: len,
                    found: col.len(),
                });
            }
            if let Some(p) = col.iter().find(|p| !(**p > 0.0 && p.is_finite())) {
                return Err(Error::NonPositiveInput(format!("{} price {p}", chains[c])));
            }
        }
        Ok(PriceSeries {
            chains,
            start,
            columns,
        })
    }

    pub fn chains(&self) -> &[String] {
        &self.chains
    }

    pub fn chain_index(&self, chain: &str) -> Option<usize> {
        self.chains.iter().position(|c| c == chain)
    }

    pub fn start(&self) -> i64 {
        self.start
    }

    pub fn len(&self) -> usize {
        self.columns[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn timestamp(&self, i: usize) -> i64 {
        self.start + i as i64 * HOUR
    }

    pub fn index_of(&self, t: i64) -> Option<usize> {
        if t < self.start || (t - self.start) % HOUR != 0 {
            return None;
        }
        let i = ((t - self.start) / HOUR) as usize;
        (i < self.len()).then_some(i)
    }

    pub fn price(&self, chain: usize, i: usize) -> f64 {
        self.columns[chain][i]
    }

    pub fn column(&self, chain: usize) -> &[f64] {
        &self.columns[chain]
    }

    /// Prices of every chain at hour `i`.
    pub fn row(&self, i: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[i]).collect()
    }
}

/// Per-chain difficulty observations at irregular timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct DifficultySeries {
    chains: Vec<String>,
    samples: Vec<Vec<(i64, f64)>>,
}

impl DifficultySeries {
    pub fn new(chains: Vec<String>, samples: Vec<Vec<(i64, f64)>>) -> Result<Self> {
        if chains.len() != samples.len() {
            return Err(Error::DimensionMismatch {
                expected: chains.len(),
                found: samples.len(),
            });
        }
        chain_positions(&chains)?;
        for (c, s) in samples.iter().enumerate() {
            if s.windows(2).any(|w| w[1].0 <= w[0].0) {
                return Err(Error::UnsortedTimestamps {
                    line: 0,
                    chain: chains[c].clone(),
                });
            }
            if let Some((_, d)) = s.iter().find(|(_, d)| !(*d > 0.0 && d.is_finite())) {
                return Err(Error::NonPositiveInput(format!("{} difficulty {d}", chains[c])));
            }
        }
        Ok(DifficultySeries { chains, samples })
    }

    /// One constant difficulty per chain from `since` onwards.
    pub fn constant(chains: Vec<String>, since: i64, values: &[f64]) -> Result<Self> {
        let samples = values.iter().map(|&d| vec![(since, d)]).collect();
        DifficultySeries::new(chains, samples)
    }

    pub fn chains(&self) -> &[String] {
        &self.chains
    }

    pub fn chain_index(&self, chain: &str) -> Option<usize> {
        self.chains.iter().position(|c| c == chain)
    }

    pub fn samples(&self, chain: usize) -> &[(i64, f64)] {
        &self.samples[chain]
    }

    /// Most recent difficulty at or before `t`.
    pub fn value_at(&self, chain: usize, t: i64) -> Result<f64> {
        let s = &self.samples[chain];
        let k = s.partition_point(|(ts, _)| *ts <= t);
        if k == 0 {
            return Err(Error::MissingDifficulty {
                chain: self.chains[chain].clone(),
                timestamp: t,
            });
        }
        Ok(s[k - 1].1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub chain_id: String,
    pub height: u64,
    pub timestamp: i64,
    pub miner_id: String,
    pub difficulty: f64,
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn csv_reader<R: Read>(reader: R, expected: &[&str]) -> Result<csv::Reader<R>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let found: Vec<&str> = headers.iter().collect();
    if found != expected {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {:?}, found {:?}", expected.join(","), found.join(",")),
        });
    }
    Ok(rdr)
}

fn field(rec: &csv::StringRecord, i: usize, line: u64) -> Result<&str> {
    rec.get(i).ok_or_else(|| Error::Parse {
        line,
        message: format!("missing field {}", i + 1),
    })
}

fn parse_float(s: &str, line: u64, what: &str) -> Result<f64> {
    let v: f64 = s.parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid {what} {s:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            message: format!("non-finite {what} {s:?}"),
        });
    }
    Ok(v)
}

fn parse_int<T: std::str::FromStr>(s: &str, line: u64, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid {what} {s:?}"),
    })
}

fn records<R: Read>(rdr: &mut csv::Reader<R>) -> impl Iterator<Item = Result<(u64, csv::StringRecord)>> + '_ {
    rdr.records().map(|r| {
        let rec = r.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        Ok((line, rec))
    })
}

/// Reads a `timestamp,chain,price_usd` CSV onto an hourly grid.
pub fn load_price_csv(path: impl AsRef<Path>) -> Result<PriceSeries> {
    read_price_csv(open(path.as_ref())?)
}

pub fn read_price_csv<R: Read>(reader: R) -> Result<PriceSeries> {
    let mut rdr = csv_reader(reader, &["timestamp", "chain", "price_usd"])?;
    let mut chains: Vec<String> = Vec::new();
    let mut rows: Vec<Vec<(i64, f64)>> = Vec::new();
    for item in records(&mut rdr) {
        let (line, rec) = item?;
        let ts: i64 = parse_int(field(&rec, 0, line)?, line, "timestamp")?;
        if ts % HOUR != 0 {
            return Err(Error::Parse {
                line,
                message: format!("timestamp {ts} is not on an hour boundary"),
            });
        }
        let chain = field(&rec, 1, line)?;
        let price = parse_float(field(&rec, 2, line)?, line, "price")?;
        if price <= 0.0 {
            return Err(Error::NonPositivePrice { line, price });
        }
        let c = match chains.iter().position(|x| x == chain) {
            Some(c) => c,
            None => {
                chains.push(chain.to_string());
                rows.push(Vec::new());
                chains.len() - 1
            }
        };
        if let Some(&(prev, _)) = rows[c].last() {
            if ts <= prev {
                return Err(Error::UnsortedTimestamps {
                    line,
                    chain: chain.to_string(),
                });
            }
        }
        rows[c].push((ts, price));
    }
    if chains.is_empty() {
        return Err(Error::EmptyInput);
    }
    let start = rows.iter().map(|r| r[0].0).min().unwrap_or(0);
    let end = rows.iter().map(|r| r[r.len() - 1].0).max().unwrap_or(0);
    let len = ((end - start) / HOUR + 1) as usize;
    let mut columns = Vec::with_capacity(chains.len());
    for (c, obs) in rows.iter().enumerate() {
        if obs[0].0 != start {
            return Err(Error::LeadingGap {
                chain: chains[c].clone(),
                timestamp: start,
            });
        }
        let mut col = Vec::with_capacity(len);
        let mut next = obs.iter().peekable();
        let mut last = f64::NAN;
        let mut run = 0usize;
        for i in 0..len {
            let t = start + i as i64 * HOUR;
            if next.peek().is_some_and(|(ts, _)| *ts == t) {
                last = next.next().map(|(_, p)| *p).unwrap_or(last);
                run = 0;
            } else {
                run += 1;
                if run > MAX_FILL_HOURS {
                    return Err(Error::GapTooLong {
                        chain: chains[c].clone(),
                        timestamp: t,
                        hours: run,
                        limit: MAX_FILL_HOURS,
                    });
                }
            }
            col.push(last);
        }
        columns.push(col);
    }
    PriceSeries::new(chains, start, columns)
}

/// Reads a `timestamp,chain,difficulty` CSV.
pub fn load_difficulty_csv(path: impl AsRef<Path>) -> Result<DifficultySeries> {
    read_difficulty_csv(open(path.as_ref())?)
}

pub fn read_difficulty_csv<R: Read>(reader: R) -> Result<DifficultySeries> {
    let mut rdr = csv_reader(reader, &["timestamp", "chain", "difficulty"])?;
    let mut chains: Vec<String> = Vec::new();
    let mut samples: Vec<Vec<(i64, f64)>> = Vec::new();
    for item in records(&mut rdr) {
        let (line, rec) = item?;
        let ts: i64 = parse_int(field(&rec, 0, line)?, line, "timestamp")?;
        let chain = field(&rec, 1, line)?;
        let d = parse_float(field(&rec, 2, line)?, line, "difficulty")?;
        if d <= 0.0 {
            return Err(Error::Parse {
                line,
                message: format!("non-positive difficulty {d}"),
            });
        }
        let c = match chains.iter().position(|x| x == chain) {
            Some(c) => c,
            None => {
                chains.push(chain.to_string());
                samples.push(Vec::new());
                chains.len() - 1
            }
        };
        if samples[c].last().is_some_and(|(prev, _)| ts <= *prev) {
            return Err(Error::UnsortedTimestamps {
                line,
                chain: chain.to_string(),
            });
        }
        samples[c].push((ts, d));
    }
    if chains.is_empty() {
        return Err(Error::EmptyInput);
    }
    DifficultySeries::new(chains, samples)
}

/// Reads a `chain,height,timestamp,miner,difficulty` CSV. Every chain must
/// appear in `known_chains`.
pub fn load_blocks_csv(path: impl AsRef<Path>, known_chains: &[String]) -> Result<Vec<BlockRecord>> {
    read_blocks_csv(open(path.as_ref())?, known_chains)
}

pub fn read_blocks_csv<R: Read>(reader: R, known_chains: &[String]) -> Result<Vec<BlockRecord>> {
    let mut rdr = csv_reader(reader, &["chain", "height", "timestamp", "miner", "difficulty"])?;
    let mut seen: HashSet<(String, u64)> = HashSet::new();
    let mut out = Vec::new();
    for item in records(&mut rdr) {
        let (line, rec) = item?;
        let chain = field(&rec, 0, line)?;
        if !known_chains.iter().any(|c| c == chain) {
            return Err(Error::UnknownChain {
                line,
                chain: chain.to_string(),
            });
        }
        let height: u64 = parse_int(field(&rec, 1, line)?, line, "height")?;
        let timestamp: i64 = parse_int(field(&rec, 2, line)?, line, "timestamp")?;
        let miner = field(&rec, 3, line)?;
        let difficulty = parse_float(field(&rec, 4, line)?, line, "difficulty")?;
        if difficulty <= 0.0 {
            return Err(Error::Parse {
                line,
                message: format!("non-positive difficulty {difficulty}"),
            });
        }
        if !seen.insert((chain.to_string(), height)) {
            return Err(Error::DuplicateBlock {
                line,
                chain: chain.to_string(),
                height,
            });
        }
        out.push(BlockRecord {
            chain_id: chain.to_string(),
            height,
            timestamp,
            miner_id: miner.to_string(),
            difficulty,
        });
    }
    Ok(out)
}

/// Profit per chain normalized by total reward and total difficulty:
/// `π = R/D · (eᵀD)/(eᵀR)`.
pub fn profit_vector(rewards: &[f64], difficulties: &[f64]) -> Result<ProfitVector> {
    if rewards.len() != difficulties.len() {
        return Err(Error::DimensionMismatch {
            expected: rewards.len(),
            found: difficulties.len(),
        });
    }
    if rewards.is_empty() {
        return Err(Error::EmptyInput);
    }
    if rewards
        .iter()
        .chain(difficulties)
        .any(|x| !(*x > 0.0 && x.is_finite()))
    {
        return Err(Error::NonPositiveInput("rewards and difficulties must be > 0".into()));
    }
    ProfitVector::new(profit_values(rewards, difficulties))
}

pub(crate) fn profit_values(rewards: &[f64], difficulties: &[f64]) -> Vec<f64> {
    let total_d: f64 = difficulties.iter().sum();
    let total_r: f64 = rewards.iter().sum();
    let scale = total_d / total_r;
    rewards
        .iter()
        .zip(difficulties)
        .map(|(r, d)| r / d * scale)
        .collect()
}

/// Hourly profit vectors on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfitSeries {
    chains: Vec<String>,
    start: i64,
    rows: Vec<Vec<f64>>,
}

impl ProfitSeries {
    pub fn new(chains: Vec<String>, start: i64, rows: Vec<Vec<f64>>) -> Result<Self> {
        if start % HOUR != 0 {
            return Err(Error::Config(format!("start {start} is not on an hour boundary")));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != chains.len()) {
            return Err(Error::DimensionMismatch {
                expected: chains.len(),
                found: r.len(),
            });
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("profit series".into()));
        }
        Ok(ProfitSeries { chains, start, rows })
    }

    pub fn chains(&self) -> &[String] {
        &self.chains
    }

    pub fn dim(&self) -> usize {
        self.chains.len()
    }

    pub fn start(&self) -> i64 {
        self.start
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn timestamp(&self, i: usize) -> i64 {
        self.start + i as i64 * HOUR
    }

    pub fn index_of(&self, t: i64) -> Option<usize> {
        if t < self.start || (t - self.start) % HOUR != 0 {
            return None;
        }
        let i = ((t - self.start) / HOUR) as usize;
        (i < self.len()).then_some(i)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn iter(&self) -> impl Iterator<Item = (i64, &[f64])> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| (self.timestamp(i), r.as_slice()))
    }
}

/// One profit vector per price hour, with `R_i = subsidy_i · price_i` and
/// difficulty carried forward from the latest sample at or before the hour.
pub fn profit_series(
    prices: &PriceSeries,
    difficulties: &DifficultySeries,
    specs: &[ChainSpec],
) -> Result<ProfitSeries> {
    if specs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut price_idx = Vec::with_capacity(specs.len());
    let mut diff_idx = Vec::with_capacity(specs.len());
    for spec in specs {
        spec.validate()?;
        price_idx.push(prices.chain_index(&spec.chain_id).ok_or_else(|| {
            Error::Config(format!("no prices for chain {}", spec.chain_id))
        })?);
        diff_idx.push(difficulties.chain_index(&spec.chain_id).ok_or_else(|| {
            Error::MissingDifficulty {
                chain: spec.chain_id.clone(),
                timestamp: prices.start(),
            }
        })?);
    }
    let n = specs.len();
    let mut rows = Vec::with_capacity(prices.len());
    let mut rewards = vec![0.0; n];
    let mut diffs = vec![0.0; n];
    for i in 0..prices.len() {
        let t = prices.timestamp(i);
        for k in 0..n {
            rewards[k] = specs[k].coinbase_subsidy * prices.price(price_idx[k], i);
            diffs[k] = difficulties.value_at(diff_idx[k], t)?;
        }
        rows.push(profit_values(&rewards, &diffs));
    }
    ProfitSeries::new(
        specs.iter().map(|s| s.chain_id.clone()).collect(),
        prices.start(),
        rows,
    )
}

fn window_index(series: &ProfitSeries, t: i64, back: usize) -> Result<usize> {
    let i = series
        .index_of(t)
        .ok_or_else(|| Error::InsufficientHistory(format!("timestamp {t} is outside the profit series")))?;
    if i < back {
        return Err(Error::InsufficientHistory(format!(
            "need {back} hours before {t}, have {i}"
        )));
    }
    Ok(i)
}

/// Mean profit vector over the closed window `[t − Δt, t]`.
pub fn expected_profit_vector(series: &ProfitSeries, t: i64, lookback_hours: usize) -> Result<ProfitVector> {
    let i = window_index(series, t, lookback_hours)?;
    let n = series.dim();
    let mut mean = vec![0.0; n];
    for row in &series.rows[i - lookback_hours..=i] {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let m = (lookback_hours + 1) as f64;
    ProfitVector::new(mean.into_iter().map(|s| s / m).collect())
}

/// Sample covariance (divisor `m − 1`) of `{π(x) − π(x − Δc) : t − Δt ≤ x ≤ t}`.
pub fn volatility_matrix(
    series: &ProfitSeries,
    t: i64,
    lookback_hours: usize,
    cooldown_hours: usize,
) -> Result<VolatilityMatrix> {
    let i = window_index(series, t, lookback_hours + cooldown_hours)?;
    let m = lookback_hours + 1;
    if m < 2 {
        return Err(Error::InsufficientHistory(
            "volatility needs at least two difference vectors".into(),
        ));
    }
    let n = series.dim();
    let diffs: Vec<Vec<f64>> = (i - lookback_hours..=i)
        .map(|x| {
            let now = &series.rows[x];
            let then = &series.rows[x - cooldown_hours];
            now.iter().zip(then).map(|(a, b)| a - b).collect()
        })
        .collect();
    let mut mean = vec![0.0; n];
    for d in &diffs {
        for (acc, v) in mean.iter_mut().zip(d) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= m as f64;
    }
    let mut entries = vec![0.0; n * n];
    for r in 0..n {
        for c in r..n {
            let s: f64 = diffs
                .iter()
                .map(|d| (d[r] - mean[r]) * (d[c] - mean[c]))
                .sum::<f64>()
                / (m - 1) as f64;
            entries[r * n + c] = s;
            entries[c * n + r] = s;
        }
    }
    Ok(VolatilityMatrix::from_row_major(n, entries))
}

/// Prefix sums over a growing profit series, giving O(1) windowed means and
/// lagged-difference covariances for any lookback.
///
/// Rows can be appended and the last row can be replaced, which lets a
/// simulation refresh the current hour as difficulties move.
#[derive(Debug, Clone)]
pub struct RollingProfitStats {
    n: usize,
    cooldown: usize,
    rows: Vec<Vec<f64>>,
    /// `Σ_{x<k} π_x`, flattened `(len + 1) × n`.
    sum: Vec<f64>,
    /// `Σ_{c≤x<k} d_x`.
    diff_sum: Vec<f64>,
    /// `Σ_{c≤x<k} d_x d_xᵀ`, flattened `(len + 1) × n²`.
    diff_outer: Vec<f64>,
}

impl RollingProfitStats {
    pub fn new(n: usize, cooldown_hours: usize) -> Self {
        RollingProfitStats {
            n,
            cooldown: cooldown_hours,
            rows: Vec::new(),
            sum: vec![0.0; n],
            diff_sum: vec![0.0; n],
            diff_outer: vec![0.0; n * n],
        }
    }

    pub fn from_series(series: &ProfitSeries, cooldown_hours: usize) -> Self {
        let mut stats = RollingProfitStats::new(series.dim(), cooldown_hours);
        for row in series.rows() {
            stats.push(row.clone());
        }
        stats
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn cooldown(&self) -> usize {
        self.cooldown
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.n);
        self.rows.push(row);
        self.extend_prefix();
    }

    /// Replaces the most recent row.
    pub fn replace_last(&mut self, row: Vec<f64>) {
        let n = self.n;
        let k = self.rows.len();
        assert!(k > 0, "replace_last on empty stats");
        self.rows[k - 1] = row;
        self.sum.truncate(k * n);
        self.diff_sum.truncate(k * n);
        self.diff_outer.truncate(k * n * n);
        self.extend_prefix();
    }

    fn extend_prefix(&mut self) {
        let n = self.n;
        let x = self.rows.len() - 1;
        let base = x * n;
        for i in 0..n {
            let v = self.sum[base + i] + self.rows[x][i];
            self.sum.push(v);
        }
        let d: Vec<f64> = if x >= self.cooldown {
            let then = &self.rows[x - self.cooldown];
            self.rows[x].iter().zip(then).map(|(a, b)| a - b).collect()
        } else {
            vec![0.0; n]
        };
        for i in 0..n {
            let v = self.diff_sum[base + i] + d[i];
            self.diff_sum.push(v);
        }
        let obase = x * n * n;
        for r in 0..n {
            for c in 0..n {
                let v = self.diff_outer[obase + r * n + c] + d[r] * d[c];
                self.diff_outer.push(v);
            }
        }
    }

    /// Whether mean and covariance are defined at row `i` for `lookback`.
    pub fn covers(&self, i: usize, lookback: usize) -> bool {
        i < self.rows.len() && i >= lookback + self.cooldown && lookback >= 1
    }

    /// Mean over rows `[i − lookback, i]`.
    pub fn mean(&self, i: usize, lookback: usize) -> Result<ProfitVector> {
        if i >= self.rows.len() || i < lookback {
            return Err(Error::InsufficientHistory(format!(
                "mean at row {i} with lookback {lookback}"
            )));
        }
        let n = self.n;
        let (hi, lo) = ((i + 1) * n, (i - lookback) * n);
        let m = (lookback + 1) as f64;
        ProfitVector::new((0..n).map(|k| (self.sum[hi + k] - self.sum[lo + k]) / m).collect())
    }

    /// Covariance of the lagged differences over rows `[i − lookback, i]`.
    pub fn covariance(&self, i: usize, lookback: usize) -> Result<VolatilityMatrix> {
        if !self.covers(i, lookback) {
            return Err(Error::InsufficientHistory(format!(
                "covariance at row {i} with lookback {lookback} and cooldown {}",
                self.cooldown
            )));
        }
        let n = self.n;
        let m = (lookback + 1) as f64;
        let (hi, lo) = (i + 1, i - lookback);
        let s1: Vec<f64> = (0..n)
            .map(|k| self.diff_sum[hi * n + k] - self.diff_sum[lo * n + k])
            .collect();
        let mut entries = vec![0.0; n * n];
        for r in 0..n {
            for c in r..n {
                let s2 = self.diff_outer[hi * n * n + r * n + c] - self.diff_outer[lo * n * n + r * n + c];
                let v = (s2 - s1[r] * s1[c] / m) / (m - 1.0);
                entries[r * n + c] = v;
                entries[c * n + r] = v;
            }
        }
        // Prefix differences can leave a rounding-level negative variance.
        for k in 0..n {
            if entries[k * n + k] < 0.0 {
                entries[k * n + k] = 0.0;
            }
        }
        Ok(VolatilityMatrix::from_row_major(n, entries))
    }
}

/// Maps chain ids to positions, rejecting duplicates.
pub(crate) fn chain_positions(chains: &[String]) -> Result<HashMap<&str, usize>> {
    let mut map = HashMap::new();
    for (i, c) in chains.iter().enumerate() {
        if map.insert(c.as_str(), i).is_some() {
            return Err(Error::Config(format!("duplicate chain {c}")));
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    const T0: i64 = 1_510_617_600;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn cooldown_default() {
        assert_eq!(DEFAULT_COOLDOWN_HOURS, 16);
    }

    #[test]
    fn price_csv_two_chains() {
        let csv = format!(
            "timestamp,chain,price_usd\n{T0},BTC,6000.0\n{T0},BCH,1000.0\n{},BTC,6100.0\n{},BCH,990.0\n",
            T0 + HOUR,
            T0 + HOUR
        );
        let p = read_price_csv(csv.as_bytes()).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.chains(), &["BTC".to_string(), "BCH".to_string()]);
        assert_eq!(p.price(0, 1), 6100.0);
        assert_eq!(p.price(1, 1), 990.0);
    }

    #[test]
    fn price_csv_forward_fill() {
        let csv = format!(
            "timestamp,chain,price_usd\n{T0},BCH,1.0\n{},BCH,2.0\n{},BCH,4.0\n",
            T0 + HOUR,
            T0 + 3 * HOUR
        );
        let p = read_price_csv(csv.as_bytes()).unwrap();
        assert_eq!(p.column(0), &[1.0, 2.0, 2.0, 4.0]);
    }

    #[test]
    fn price_csv_gap_limit() {
        let csv = format!(
            "timestamp,chain,price_usd\n{T0},BCH,1.0\n{},BCH,2.0\n",
            T0 + 8 * HOUR
        );
        assert!(matches!(
            read_price_csv(csv.as_bytes()),
            Err(Error::GapTooLong { hours: 7, .. })
        ));
        let csv = format!(
            "timestamp,chain,price_usd\n{T0},BCH,1.0\n{},BCH,2.0\n",
            T0 + 7 * HOUR
        );
        assert!(read_price_csv(csv.as_bytes()).is_ok());
    }

    #[test]
    fn price_csv_errors() {
        let csv = format!("timestamp,chain,price_usd\n{T0},BCH,1.0\n{},BCH,-1\n", T0 + HOUR);
        assert_eq!(
            read_price_csv(csv.as_bytes()).unwrap_err(),
            Error::NonPositivePrice { line: 3, price: -1.0 }
        );
        let csv = format!("timestamp,chain,price_usd\n{},BCH,1.0\n{T0},BCH,2.0\n", T0 + HOUR);
        assert!(matches!(
            read_price_csv(csv.as_bytes()),
            Err(Error::UnsortedTimestamps { line: 3, .. })
        ));
        let csv = format!("timestamp,chain,price_usd\n{T0},BTC,1.0\n{},BCH,2.0\n", T0 + HOUR);
        assert!(matches!(read_price_csv(csv.as_bytes()), Err(Error::LeadingGap { .. })));
        let csv = format!("timestamp,chain,price_usd\n{},BCH,1.0\n", T0 + 5);
        assert!(matches!(read_price_csv(csv.as_bytes()), Err(Error::Parse { line: 2, .. })));
        let csv = format!("timestamp,chain,price_usd\n{T0},BCH,1,0\n");
        assert!(matches!(read_price_csv(csv.as_bytes()), Err(Error::Parse { .. })));
        let csv = format!("time,chain,price\n{T0},BCH,1.0\n");
        assert!(matches!(read_price_csv(csv.as_bytes()), Err(Error::Parse { line: 1, .. })));
        let csv = format!("timestamp,chain,price_usd\n{T0},BCH,1.5e3\n");
        assert_eq!(read_price_csv(csv.as_bytes()).unwrap().price(0, 0), 1500.0);
    }

    #[test]
    fn blocks_csv() {
        let known = vec!["BTC".to_string(), "BCH".to_string()];
        let csv = "chain,height,timestamp,miner,difficulty\nBTC,1,100,ViaBTC,5.0\nBCH,1,120,ViaBTC,1.0\nBCH,2,700,AntPool,1.0\n";
        assert_eq!(read_blocks_csv(csv.as_bytes(), &known).unwrap().len(), 3);
        let csv = "chain,height,timestamp,miner,difficulty\nLTC,1,100,ViaBTC,5.0\n";
        assert!(matches!(
            read_blocks_csv(csv.as_bytes(), &known),
            Err(Error::UnknownChain { line: 2, .. })
        ));
        let csv = "chain,height,timestamp,miner,difficulty\nBTC,1,100,a,5.0\nBTC,1,200,b,5.0\n";
        assert!(matches!(
            read_blocks_csv(csv.as_bytes(), &known),
            Err(Error::DuplicateBlock { line: 3, height: 1, .. })
        ));
    }

    #[test]
    fn difficulty_locf() {
        let csv = "timestamp,chain,difficulty\n100,BTC,5\n4000,BTC,6\n";
        let d = read_difficulty_csv(csv.as_bytes()).unwrap();
        assert_eq!(d.value_at(0, 100).unwrap(), 5.0);
        assert_eq!(d.value_at(0, 3999).unwrap(), 5.0);
        assert_eq!(d.value_at(0, 4000).unwrap(), 6.0);
        assert!(matches!(d.value_at(0, 99), Err(Error::MissingDifficulty { .. })));
    }

    #[test]
    fn profit_vector_examples() {
        let p = profit_vector(&[2.0, 1.0], &[4.0, 1.0]).unwrap();
        assert!(close(p.values()[0], 5.0 / 6.0, 1e-15));
        assert!(close(p.values()[1], 5.0 / 3.0, 1e-15));
        let p = profit_vector(&[3.0, 7.0, 0.5], &[3.0, 7.0, 0.5]).unwrap();
        assert!(p.values().iter().all(|v| close(*v, 1.0, 1e-15)));
        assert_eq!(profit_vector(&[10.0], &[7.0]).unwrap().values(), &[1.0]);
        assert!(matches!(profit_vector(&[1.0, 0.0], &[1.0, 1.0]), Err(Error::NonPositiveInput(_))));
        assert!(matches!(profit_vector(&[1.0], &[1.0, 1.0]), Err(Error::DimensionMismatch { .. })));
    }

    fn series(rows: Vec<Vec<f64>>) -> ProfitSeries {
        let n = rows[0].len();
        ProfitSeries::new((0..n).map(|i| format!("C{i}")).collect(), T0, rows).unwrap()
    }

    #[test]
    fn profit_series_examples() {
        let specs = vec![ChainSpec::btc(), ChainSpec::bch()];
        let chains = vec!["BTC".to_string(), "BCH".to_string()];
        let prices = PriceSeries::new(
            chains.clone(),
            T0,
            vec![vec![8000.0; 5], vec![1000.0, 1000.0, 1000.0, 500.0, 500.0]],
        )
        .unwrap();
        let diffs = DifficultySeries::constant(chains.clone(), T0, &[8.0, 2.0]).unwrap();
        let s = profit_series(&prices, &diffs, &specs).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s.row(0), s.row(2));
        let expect = profit_vector(&[12.5 * 8000.0, 12.5 * 500.0], &[8.0, 2.0]).unwrap();
        assert_eq!(s.row(3), expect.values());

        let single = PriceSeries::new(vec!["BCH".into()], T0, vec![vec![1000.0, 900.0, 1100.0]]).unwrap();
        let d = DifficultySeries::constant(vec!["BCH".into()], T0, &[3.0]).unwrap();
        let s = profit_series(&single, &d, &[ChainSpec::bch()]).unwrap();
        assert!(s.rows().iter().all(|r| r == &[1.0]));

        let late = DifficultySeries::constant(chains, T0 + HOUR, &[8.0, 2.0]).unwrap();
        assert!(matches!(
            profit_series(&prices, &late, &specs),
            Err(Error::MissingDifficulty { .. })
        ));
    }

    #[test]
    fn expected_profit_examples() {
        let s = series(vec![vec![0.7, 1.3]; 10]);
        let mu = expected_profit_vector(&s, T0 + 9 * HOUR, 5).unwrap();
        assert!(close(mu.values()[0], 0.7, 1e-15));

        let s = series(vec![vec![9.0, 9.0], vec![1.0, 1.0], vec![3.0, 1.0]]);
        let mu = expected_profit_vector(&s, T0 + 2 * HOUR, 1).unwrap();
        assert_eq!(mu.values(), &[2.0, 1.0]);

        let ramp = series((0..48).map(|i| vec![i as f64, 2.0 * i as f64]).collect());
        let mu = expected_profit_vector(&ramp, T0 + 47 * HOUR, 47).unwrap();
        assert!(close(mu.values()[0], 23.5, 1e-12));
        assert!(close(mu.values()[1], 47.0, 1e-12));

        assert!(matches!(
            expected_profit_vector(&ramp, T0 + 3 * HOUR, 4),
            Err(Error::InsufficientHistory(_))
        ));
    }

    #[test]
    fn volatility_examples() {
        let s = series(vec![vec![0.7, 1.3]; 30]);
        let v = volatility_matrix(&s, T0 + 29 * HOUR, 10, 16).unwrap();
        assert!(v.entries().iter().all(|x| *x == 0.0));

        // Differences with cooldown 1: +d then -d.
        let s = series(vec![vec![0.0, 5.0], vec![1.0, 5.0], vec![0.0, 5.0]]);
        let v = volatility_matrix(&s, T0 + 2 * HOUR, 1, 1).unwrap();
        assert_eq!(v.entries(), &[2.0, 0.0, 0.0, 0.0]);

        let noisy = series((0..20).map(|i| vec![(i * 7 % 5) as f64, (i * 3 % 4) as f64]).collect());
        let v = volatility_matrix(&noisy, T0 + 19 * HOUR, 10, 0).unwrap();
        assert!(v.entries().iter().all(|x| *x == 0.0));

        assert!(matches!(
            volatility_matrix(&noisy, T0 + 19 * HOUR, 10, 10),
            Err(Error::InsufficientHistory(_))
        ));
    }

    #[test]
    fn rolling_matches_direct() {
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|i| {
                let x = i as f64;
                vec![1.0 + 0.1 * (x * 0.37).sin(), 0.9 + 0.05 * (x * 1.3).cos() + 0.001 * x]
            })
            .collect();
        let s = series(rows);
        let stats = RollingProfitStats::from_series(&s, 16);
        for (i, lb) in [(199, 144), (150, 4), (40, 24), (17, 1)] {
            let t = s.timestamp(i);
            let a = stats.mean(i, lb).unwrap();
            let b = expected_profit_vector(&s, t, lb).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                assert!(close(*x, *y, 1e-12));
            }
            let a = stats.covariance(i, lb).unwrap();
            let b = volatility_matrix(&s, t, lb, 16).unwrap();
            for (x, y) in a.entries().iter().zip(b.entries()) {
                assert!(close(*x, *y, 1e-12 * (1.0 + y.abs())), "{x} vs {y}");
            }
        }
        assert!(!stats.covers(16, 1));
        assert!(stats.covers(17, 1));
    }

    #[test]
    fn rolling_replace_last() {
        let mut stats = RollingProfitStats::new(2, 2);
        for i in 0..10 {
            stats.push(vec![i as f64, 1.0]);
        }
        let mut other = stats.clone();
        stats.replace_last(vec![42.0, 3.0]);
        let mut rebuilt = RollingProfitStats::new(2, 2);
        for i in 0..9 {
            rebuilt.push(vec![i as f64, 1.0]);
        }
        rebuilt.push(vec![42.0, 3.0]);
        assert_eq!(stats.mean(9, 5).unwrap(), rebuilt.mean(9, 5).unwrap());
        assert_eq!(stats.covariance(9, 5).unwrap(), rebuilt.covariance(9, 5).unwrap());
        other.push(vec![0.0, 0.0]);
        assert_eq!(other.len(), 11);
    }
}
