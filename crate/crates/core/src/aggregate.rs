//! Aggregate allocation across miners, baselines, inter-block-time
//! prediction, and comparison metrics.

use crate::error::{Error, Result};
use crate::market::{BlockRecord, PriceSeries, ProfitSeries, RollingProfitStats, HOUR};
use crate::portfolio::{solve_or_hold, Allocation, RiskTolerance};
use crate::risk::{HashWeightSeries, MinerParams};

pub use crate::risk::mean_abs_error;

pub const DEFAULT_PERIOD_HOURS: usize = 6;
pub const DEFAULT_ROLLING_DAYS: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateSeries {
    pub chains: Vec<String>,
    pub miners: Vec<String>,
    pub samples: Vec<(i64, Allocation)>,
}

/// Economic allocations per miner and their aggregate, on a shared hourly grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EconomicAllocations {
    pub aggregate: AggregateSeries,
    /// `per_miner[j][k]` is miner `j`'s allocation at `aggregate.samples[k].0`.
    pub per_miner: Vec<Vec<Allocation>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IbtPrediction {
    pub chains: Vec<String>,
    pub period_hours: usize,
    pub rolling_window_days: usize,
    /// `(period_start, ratio per chain)`; the ratio multiplies the previous
    /// period's inter-block time.
    pub samples: Vec<(i64, Vec<f64>)>,
}

impl IbtPrediction {
    pub fn buckets_per_window(&self) -> usize {
        self.rolling_window_days * 24 / self.period_hours
    }
}

/// Hash-weighted mean of per-miner allocations.
pub fn aggregate_allocation(per_miner: &[(Allocation, f64)]) -> Result<Allocation> {
    let (first, _) = per_miner.first().ok_or(Error::EmptyInput)?;
    let n = first.len();
    let mut acc = vec![0.0; n];
    let mut total = 0.0;
    for (w, h) in per_miner {
        if w.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: w.len(),
            });
        }
        if !h.is_finite() {
            return Err(Error::NonFiniteInput(format!("hash weight {h}")));
        }
        if *h < 0.0 {
            return Err(Error::NonPositiveInput(format!("hash weight {h}")));
        }
        for (a, x) in acc.iter_mut().zip(w.weights()) {
            *a += h * x;
        }
        total += h;
    }
    if total <= 0.0 {
        return Err(Error::ZeroTotalWeight);
    }
    Ok(Allocation::from_weights(acc.into_iter().map(|a| a / total).collect()))
}

/// Solves each miner's allocation every hour and aggregates them.
pub fn economic_allocation_series(
    params: &[MinerParams],
    market: &ProfitSeries,
    hash_weights: &[HashWeightSeries],
    cooldown_hours: usize,
) -> Result<AggregateSeries> {
    Ok(economic_allocations(params, market, hash_weights, cooldown_hours)?.aggregate)
}

/// Like [`economic_allocation_series`], also returning each miner's series.
///
/// Hours start at the first row whose window is covered for every miner.
/// A miner without a weight sample at or before an hour gets weight zero.
pub fn economic_allocations(
    params: &[MinerParams],
    market: &ProfitSeries,
    hash_weights: &[HashWeightSeries],
    cooldown_hours: usize,
) -> Result<EconomicAllocations> {
    if params.is_empty() {
        return Err(Error::EmptyInput);
    }
    if params.len() != hash_weights.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            found: hash_weights.len(),
        });
    }
    for p in params {
        p.validate()?;
    }
    let n = market.dim();
    let stats = RollingProfitStats::from_series(market, cooldown_hours);
    let longest = params.iter().map(|p| p.lookback_hours).max().unwrap_or(0);
    let first = (0..market.len())
        .find(|&i| stats.covers(i, longest))
        .ok_or_else(|| {
            Error::InsufficientHistory(format!(
                "market has {} hours; need more than {}",
                market.len(),
                longest + cooldown_hours
            ))
        })?;
    let risks: Vec<RiskTolerance> = params
        .iter()
        .map(|p| RiskTolerance::new(p.risk))
        .collect::<Result<_>>()?;
    let mut hold = vec![Allocation::uniform(n); params.len()];
    let mut per_miner = vec![Vec::with_capacity(market.len() - first); params.len()];
    let mut samples = Vec::with_capacity(market.len() - first);
    for i in first..market.len() {
        let t = market.timestamp(i);
        let mut parts = Vec::with_capacity(params.len());
        for (j, p) in params.iter().enumerate() {
            let mu = stats.mean(i, p.lookback_hours)?;
            let sigma = stats.covariance(i, p.lookback_hours)?;
            let out = solve_or_hold(&mu, &sigma, risks[j], &hold[j])?;
            hold[j] = out.allocation.clone();
            per_miner[j].push(out.allocation.clone());
            parts.push((out.allocation, hash_weights[j].value_at(t).unwrap_or(0.0)));
        }
        samples.push((t, aggregate_allocation(&parts)?));
    }
    Ok(EconomicAllocations {
        aggregate: AggregateSeries {
            chains: market.chains().to_vec(),
            miners: params.iter().map(|p| p.miner_id.clone()).collect(),
            samples,
        },
        per_miner,
    })
}

fn check_positive(xs: &[f64], what: &str) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::EmptyInput);
    }
    for x in xs {
        if !x.is_finite() {
            return Err(Error::NonFiniteInput(format!("{what} {x}")));
        }
        if *x <= 0.0 {
            return Err(Error::NonPositiveInput(format!("{what} {x}")));
        }
    }
    Ok(())
}

fn normalized(xs: Vec<f64>) -> Allocation {
    let total: f64 = xs.iter().sum();
    Allocation::from_weights(xs.into_iter().map(|x| x / total).collect())
}

/// Allocation proportional to each chain's reward per unit difficulty.
pub fn baseline_dari_allocation(rewards: &[f64], difficulties: &[f64]) -> Result<Allocation> {
    if rewards.len() != difficulties.len() {
        return Err(Error::DimensionMismatch {
            expected: rewards.len(),
            found: difficulties.len(),
        });
    }
    check_positive(rewards, "reward")?;
    check_positive(difficulties, "difficulty")?;
    Ok(normalized(rewards.iter().zip(difficulties).map(|(r, d)| r / d).collect()))
}

/// Allocation proportional to price.
pub fn baseline_price_allocation(prices: &[f64]) -> Result<Allocation> {
    check_positive(prices, "price")?;
    Ok(normalized(prices.to_vec()))
}

/// Expected inter-block times after a change of allocation, per chain.
pub fn predict_ibt_change(w_before: &Allocation, w_after: &Allocation, targets: &[f64]) -> Result<Vec<f64>> {
    let n = w_before.len();
    for len in [w_after.len(), targets.len()] {
        if len != n {
            return Err(Error::DimensionMismatch { expected: n, found: len });
        }
    }
    ibt_ratios(w_before.weights(), w_after.weights())
        .map(|r| r.iter().zip(targets).map(|(r, t)| r * t).collect())
}

fn ibt_ratios(before: &[f64], after: &[f64]) -> Result<Vec<f64>> {
    before
        .iter()
        .zip(after)
        .enumerate()
        .map(|(chain, (b, a))| {
            if *a > 0.0 {
                Ok(b / a)
            } else {
                Err(Error::ZeroAllocationAfter { chain })
            }
        })
        .collect()
}

/// Mean allocation per non-overlapping period starting at the first sample.
/// Periods without samples repeat the previous period's mean.
fn bucket_means(agg: &AggregateSeries, period_hours: usize) -> Result<(i64, Vec<Vec<f64>>)> {
    let (t0, first) = agg.samples.first().ok_or(Error::EmptyInput)?;
    let n = first.len();
    let width = period_hours as i64 * HOUR;
    let last = agg.samples.last().map(|s| s.0).unwrap_or(*t0);
    let count = ((last - t0) / width + 1) as usize;
    let mut sums = vec![vec![0.0; n]; count];
    let mut hits = vec![0usize; count];
    for (t, w) in &agg.samples {
        let k = ((t - t0) / width) as usize;
        for (s, x) in sums[k].iter_mut().zip(w.weights()) {
            *s += x;
        }
        hits[k] += 1;
    }
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(count);
    for (s, h) in sums.into_iter().zip(hits) {
        if h > 0 {
            means.push(s.into_iter().map(|x| x / h as f64).collect());
        } else {
            let prev = means.last().cloned().unwrap_or_else(|| vec![0.0; n]);
            means.push(prev);
        }
    }
    Ok((*t0, means))
}

/// Trailing rolling mean, emitted only for full windows.
fn trailing_mean(rows: &[Vec<f64>], window: usize) -> Vec<Vec<f64>> {
    if window == 0 || rows.len() < window {
        return Vec::new();
    }
    rows.windows(window)
        .map(|w| {
            (0..w[0].len())
                .map(|c| w.iter().map(|r| r[c]).sum::<f64>() / window as f64)
                .collect()
        })
        .collect()
}

fn window_buckets(period_hours: usize, rolling_days: usize) -> Result<usize> {
    if period_hours == 0 || rolling_days == 0 || !(rolling_days * 24).is_multiple_of(period_hours) {
        return Err(Error::Config(format!(
            "{rolling_days} days is not a whole number of {period_hours} h periods"
        )));
    }
    Ok(rolling_days * 24 / period_hours)
}

/// Predicted inter-block-time change between consecutive periods, smoothed
/// by a trailing rolling mean. Each output is stamped with the start of the
/// later period of its newest ratio.
pub fn predict_ibt_series(
    agg: &AggregateSeries,
    period_hours: usize,
    rolling_days: usize,
) -> Result<IbtPrediction> {
    let window = window_buckets(period_hours, rolling_days)?;
    let (t0, means) = bucket_means(agg, period_hours)?;
    if means.len() < window + 1 {
        return Err(Error::InsufficientHistory(format!(
            "{} periods of {period_hours} h; need {}",
            means.len(),
            window + 1
        )));
    }
    let ratios = means
        .windows(2)
        .map(|p| ibt_ratios(&p[0], &p[1]))
        .collect::<Result<Vec<_>>>()?;
    let width = period_hours as i64 * HOUR;
    let samples = trailing_mean(&ratios, window)
        .into_iter()
        .enumerate()
        .map(|(k, r)| (t0 + (k + window) as i64 * width, r))
        .collect();
    Ok(IbtPrediction {
        chains: agg.chains.clone(),
        period_hours,
        rolling_window_days: rolling_days,
        samples,
    })
}

/// Observed inter-block-time change of one chain between consecutive
/// periods, smoothed like [`predict_ibt_series`]. Periods are aligned to
/// `start`; the mean IBT of a period is its span over its block count.
pub fn observed_ibt_change_series(
    blocks: &[BlockRecord],
    chain_id: &str,
    start: i64,
    period_hours: usize,
    rolling_days: usize,
) -> Result<Vec<(i64, f64)>> {
    let window = window_buckets(period_hours, rolling_days)?;
    let width = period_hours as i64 * HOUR;
    let mut times: Vec<i64> = blocks
        .iter()
        .filter(|b| b.chain_id == chain_id && b.timestamp >= start)
        .map(|b| b.timestamp)
        .collect();
    times.sort_unstable();
    let last = *times.last().ok_or(Error::EmptyInput)?;
    let count = ((last - start) / width + 1) as usize;
    let mut hits = vec![0usize; count];
    for t in &times {
        hits[((t - start) / width) as usize] += 1;
    }
    let ibt: Vec<f64> = hits
        .iter()
        .map(|&h| if h > 0 { width as f64 / h as f64 } else { f64::INFINITY })
        .collect();
    let ratios: Vec<Vec<f64>> = ibt.windows(2).map(|p| vec![p[1] / p[0]]).collect();
    if ratios.iter().any(|r| !r[0].is_finite()) {
        return Err(Error::InsufficientHistory(format!("{chain_id}: a period has no blocks")));
    }
    if ratios.len() < window {
        return Err(Error::InsufficientHistory(format!(
            "{} periods of {period_hours} h; need {}",
            count,
            window + 1
        )));
    }
    Ok(trailing_mean(&ratios, window)
        .into_iter()
        .enumerate()
        .map(|(k, r)| (start + (k + window) as i64 * width, r[0]))
        .collect())
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            found: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::EmptyInput);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(Error::DegenerateVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Ratio of the BCH price share to its value `lag_hours` earlier.
pub fn price_change_ratio_series(prices: &PriceSeries, lag_hours: usize) -> Result<Vec<(i64, f64)>> {
    let chain = |name: &str| {
        prices.chain_index(name).ok_or_else(|| Error::UnknownChain {
            line: 0,
            chain: name.to_string(),
        })
    };
    let (btc, bch) = (chain("BTC")?, chain("BCH")?);
    if prices.len() <= lag_hours {
        return Err(Error::InsufficientHistory(format!(
            "{} hours of prices; need more than {lag_hours}",
            prices.len()
        )));
    }
    let q = |i: usize| {
        let b = prices.price(bch, i);
        b / (prices.price(btc, i) + b)
    };
    Ok((lag_hours..prices.len())
        .map(|i| (prices.timestamp(i), q(i) / q(i - lag_hours)))
        .collect())
}
