//! Observed allocations from block attribution, inferred risk, and the
//! per-miner (lookback, risk) fit.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{BlockRecord, DifficultySeries, ProfitSeries, RollingProfitStats, HOUR};
use crate::portfolio::{inferred_risk, solve_or_hold, Allocation, RiskTolerance, SolveOutcome};

pub const DEFAULT_HALF_LIFE_HOURS: f64 = 10.0;
/// Risk candidates tested per lookback.
pub const RISKS_PER_LOOKBACK: usize = 8;
/// Minimum number of evaluated hours for a fit (30 days).
pub const DEFAULT_MIN_EVAL_HOURS: usize = 30 * 24;

/// Lookback periods tested by the fit, in hours:
/// 4–24 step 6, 24–144 step 24, 168–1344 step 168.
pub fn lookback_candidates() -> Vec<usize> {
    let mut s: Vec<usize> = (4..=24)
        .step_by(6)
        .chain((24..=144).step_by(24))
        .chain((168..=1344).step_by(168))
        .collect();
    s.sort_unstable();
    s.dedup();
    s
}

/// Per-step decay factor of an EWMA with the given half-life.
pub fn ewma_alpha(half_life_hours: f64) -> f64 {
    (-1.0 / half_life_hours).exp2()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActualAllocationSeries {
    pub miner_id: String,
    pub chains: Vec<String>,
    pub half_life_hours: f64,
    pub samples: Vec<(i64, Allocation)>,
}

impl ActualAllocationSeries {
    /// Focus-chain component of every sample.
    pub fn component(&self, chain: usize) -> Vec<f64> {
        self.samples.iter().map(|(_, w)| w.weights()[chain]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HashWeightSeries {
    pub miner_id: String,
    /// `(timestamp, weight)` in difficulty units per hour.
    pub samples: Vec<(i64, f64)>,
}

impl HashWeightSeries {
    /// A weight that applies at every timestamp.
    pub fn constant(miner_id: &str, weight: f64) -> Self {
        HashWeightSeries {
            miner_id: miner_id.to_string(),
            samples: vec![(i64::MIN, weight)],
        }
    }

    /// Latest weight at or before `t`.
    pub fn value_at(&self, t: i64) -> Option<f64> {
        let k = self.samples.partition_point(|(ts, _)| *ts <= t);
        (k > 0).then(|| self.samples[k - 1].1)
    }
}

/// Fitted behavior of one miner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinerParams {
    #[serde(rename = "miner")]
    pub miner_id: String,
    pub lookback_hours: usize,
    pub risk: f64,
    #[serde(rename = "ks", default)]
    pub fit_statistic: Option<f64>,
    #[serde(rename = "mae", default)]
    pub mean_abs_error: Option<f64>,
}

impl MinerParams {
    pub fn new(miner_id: &str, lookback_hours: usize, risk: f64) -> Self {
        MinerParams {
            miner_id: miner_id.to_string(),
            lookback_hours,
            risk,
            fit_statistic: None,
            mean_abs_error: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lookback_hours == 0 {
            return Err(Error::Config(format!("{}: lookback must be > 0", self.miner_id)));
        }
        RiskTolerance::new(self.risk)?;
        Ok(())
    }
}

/// Published fits for the five largest pools active on both BTC and BCH.
pub fn published_miner_params() -> Vec<MinerParams> {
    let rows = [
        ("ViaBTC", 144, 6.42e-4, 0.200),
        ("BTC.TOP", 16, 8.54e-5, 0.207),
        ("Bitcoin.com", 1008, 2.40e-3, 0.360),
        ("AntPool", 10, 3.33e-5, 0.170),
        ("BTC.com", 4, 3.81e-6, 0.144),
    ];
    rows.iter()
        .map(|&(m, lb, r, mae)| MinerParams {
            mean_abs_error: Some(mae),
            ..MinerParams::new(m, lb, r)
        })
        .collect()
}

/// Published fits without Bitcoin.com, whose risk tolerance drifts.
pub fn default_aggregate_miners() -> Vec<MinerParams> {
    published_miner_params()
        .into_iter()
        .filter(|p| p.miner_id != "Bitcoin.com")
        .collect()
}

/// EWMA of hourly block counts per chain for one miner, plus the grid start.
fn ewma_block_rates(
    blocks: &[BlockRecord],
    chains: &[String],
    miner_id: &str,
    half_life_hours: f64,
) -> Result<(i64, Vec<Vec<f64>>)> {
    if !(half_life_hours > 0.0 && half_life_hours.is_finite()) {
        return Err(Error::Config(format!("half-life {half_life_hours} must be > 0")));
    }
    if !blocks.iter().any(|b| b.miner_id == miner_id) {
        return Err(Error::UnknownMiner(miner_id.to_string()));
    }
    let start = blocks.iter().map(|b| b.timestamp).min().unwrap_or(0).div_euclid(HOUR) * HOUR;
    let end = blocks.iter().map(|b| b.timestamp).max().unwrap_or(0).div_euclid(HOUR) * HOUR;
    let hours = ((end - start) / HOUR + 1) as usize;
    let n = chains.len();
    let mut counts = vec![vec![0.0; n]; hours];
    for b in blocks.iter().filter(|b| b.miner_id == miner_id) {
        let c = chains.iter().position(|c| *c == b.chain_id).ok_or_else(|| Error::UnknownChain {
            line: 0,
            chain: b.chain_id.clone(),
        })?;
        let h = ((b.timestamp.div_euclid(HOUR) * HOUR - start) / HOUR) as usize;
        counts[h][c] += 1.0;
    }
    let alpha = ewma_alpha(half_life_hours);
    let mut rate = vec![0.0; n];
    let rates = counts
        .into_iter()
        .map(|c| {
            for (r, x) in rate.iter_mut().zip(&c) {
                *r = alpha * *r + (1.0 - alpha) * x;
            }
            rate.clone()
        })
        .collect();
    Ok((start, rates))
}

/// Hash-proportional scores `b_i · D_i` at hour `t`. Difficulty is only
/// looked up where the block rate is non-zero.
fn scores(rate: &[f64], difficulties: &DifficultySeries, t: i64) -> Result<Vec<f64>> {
    rate.iter()
        .enumerate()
        .map(|(i, &b)| {
            if b > 0.0 {
                Ok(b * difficulties.value_at(i, t)?)
            } else {
                Ok(0.0)
            }
        })
        .collect()
}

/// Observed hourly allocation of one miner: EWMA block rates per chain,
/// weighted by difficulty and normalized. Hours with no recent blocks emit
/// no sample.
pub fn actual_allocation_series(
    blocks: &[BlockRecord],
    difficulties: &DifficultySeries,
    miner_id: &str,
    half_life_hours: f64,
) -> Result<ActualAllocationSeries> {
    let chains = difficulties.chains().to_vec();
    let (start, rates) = ewma_block_rates(blocks, &chains, miner_id, half_life_hours)?;
    let mut samples = Vec::new();
    for (h, rate) in rates.iter().enumerate() {
        let t = start + h as i64 * HOUR;
        let s = scores(rate, difficulties, t)?;
        let total: f64 = s.iter().sum();
        if total > 0.0 {
            samples.push((t, Allocation::from_weights(s.iter().map(|x| x / total).collect())));
        }
    }
    Ok(ActualAllocationSeries {
        miner_id: miner_id.to_string(),
        chains,
        half_life_hours,
        samples,
    })
}

/// Total hash weight `Σ_i b_i(t) · D_i(t)` of one miner per hour.
pub fn hash_weight_series(
    blocks: &[BlockRecord],
    difficulties: &DifficultySeries,
    miner_id: &str,
    half_life_hours: f64,
) -> Result<HashWeightSeries> {
    let (start, rates) = ewma_block_rates(blocks, difficulties.chains(), miner_id, half_life_hours)?;
    let samples = rates
        .iter()
        .enumerate()
        .map(|(h, rate)| {
            let t = start + h as i64 * HOUR;
            Ok((t, scores(rate, difficulties, t)?.iter().sum()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HashWeightSeries {
        miner_id: miner_id.to_string(),
        samples,
    })
}

fn check_chains(actual: &ActualAllocationSeries, market: &ProfitSeries) -> Result<()> {
    if actual.chains != market.chains() {
        return Err(Error::Config(format!(
            "allocation chains {:?} differ from market chains {:?}",
            actual.chains,
            market.chains()
        )));
    }
    Ok(())
}

/// `(row index in market, sample index)` for samples inside the market grid.
fn aligned(actual: &ActualAllocationSeries, market: &ProfitSeries) -> Vec<(usize, usize)> {
    actual
        .samples
        .iter()
        .enumerate()
        .filter_map(|(k, (t, _))| market.index_of(*t).map(|i| (i, k)))
        .collect()
}

/// Risk `w_act(t)ᵀ Σ(t) w_act(t)` implied by the observed allocation, for
/// every sample whose volatility window is covered by the market history.
pub fn infer_risk_series(
    actual: &ActualAllocationSeries,
    market: &ProfitSeries,
    lookback_hours: usize,
    cooldown_hours: usize,
) -> Result<Vec<(i64, f64)>> {
    check_chains(actual, market)?;
    let stats = RollingProfitStats::from_series(market, cooldown_hours);
    let out = infer_with_stats(actual, &stats, &aligned(actual, market), lookback_hours)?;
    if out.is_empty() {
        return Err(Error::InsufficientHistory(format!(
            "no allocation sample has {} hours of market history",
            lookback_hours + cooldown_hours
        )));
    }
    Ok(out
        .into_iter()
        .map(|(k, rho)| (actual.samples[k].0, rho))
        .collect())
}

fn infer_with_stats(
    actual: &ActualAllocationSeries,
    stats: &RollingProfitStats,
    rows: &[(usize, usize)],
    lookback: usize,
) -> Result<Vec<(usize, f64)>> {
    rows.iter()
        .filter(|(i, _)| stats.covers(*i, lookback))
        .map(|&(i, k)| {
            let sigma = stats.covariance(i, lookback)?;
            Ok((k, inferred_risk(&actual.samples[k].1, &sigma)?))
        })
        .collect()
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_x − F_y|`.
pub fn ks_statistic(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::EmptyInput);
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(Error::NonFiniteInput("NaN in KS sample".into()));
    }
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut best: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let v = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        best = best.max((i as f64 / n - j as f64 / m).abs());
    }
    Ok(best)
}

/// Linearly interpolated percentile (`q` in [0, 1]) of unsorted data.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// `count` equally spaced values from `lo` to `hi`, both included.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count)
            .map(|k| {
                if k == count - 1 {
                    hi
                } else {
                    lo + (hi - lo) * k as f64 / (count - 1) as f64
                }
            })
            .collect(),
    }
}

/// How economic and observed allocations are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KsMode {
    /// Two-sample KS between the value distributions of the two series.
    #[default]
    Distribution,
    /// KS between the paired residuals `e_t − a_t` and their mirror image;
    /// zero when residuals are symmetric about zero.
    PairedResiduals,
}

fn fit_statistic(mode: KsMode, economic: &[f64], actual: &[f64]) -> Result<f64> {
    match mode {
        KsMode::Distribution => ks_statistic(economic, actual),
        KsMode::PairedResiduals => {
            let r: Vec<f64> = economic.iter().zip(actual).map(|(e, a)| e - a).collect();
            let mirrored: Vec<f64> = r.iter().map(|x| -x).collect();
            ks_statistic(&r, &mirrored)
        }
    }
}

/// Mean absolute difference of two equal-length series.
pub fn mean_abs_error(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            found: ys.len(),
        });
    }
    if xs.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(xs.iter().zip(ys).map(|(x, y)| (x - y).abs()).sum::<f64>() / xs.len() as f64)
}

/// Economic allocation of one miner at market row `i`. Falls back to `hold`
/// when the window has no usable volatility.
pub fn economic_allocation_at(
    stats: &RollingProfitStats,
    i: usize,
    lookback: usize,
    rho: RiskTolerance,
    hold: &Allocation,
) -> Result<SolveOutcome> {
    let mu = stats.mean(i, lookback)?;
    let sigma = stats.covariance(i, lookback)?;
    solve_or_hold(&mu, &sigma, rho, hold)
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Index of the chain whose allocation fraction is compared.
    pub focus_chain: usize,
    pub ks_mode: KsMode,
    pub min_eval_hours: usize,
    pub lookbacks: Vec<usize>,
    pub risks_per_lookback: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            focus_chain: 1,
            ks_mode: KsMode::Distribution,
            min_eval_hours: DEFAULT_MIN_EVAL_HOURS,
            lookbacks: lookback_candidates(),
            risks_per_lookback: RISKS_PER_LOOKBACK,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitCell {
    pub lookback_hours: usize,
    pub risk: f64,
    pub ks: f64,
    pub mae: f64,
    /// Hours where the requested risk was below the feasible minimum.
    pub risk_clamped_hours: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub params: MinerParams,
    /// Every evaluated cell, in lookback-major order.
    pub cells: Vec<FitCell>,
    /// Risk grid per evaluated lookback.
    pub risk_grids: Vec<(usize, Vec<f64>)>,
    pub evaluated_hours: usize,
}

impl FitReport {
    /// Spacing of the risk grid at the selected lookback.
    pub fn risk_step(&self) -> f64 {
        self.risk_grids
            .iter()
            .find(|(lb, _)| *lb == self.params.lookback_hours)
            .map(|(_, g)| if g.len() > 1 { g[1] - g[0] } else { 0.0 })
            .unwrap_or(0.0)
    }
}

/// Orders cells by KS, then lookback, then risk.
pub fn cell_order(a: &FitCell, b: &FitCell) -> Ordering {
    a.ks.total_cmp(&b.ks)
        .then(a.lookback_hours.cmp(&b.lookback_hours))
        .then(a.risk.total_cmp(&b.risk))
}

/// Fits `(lookback, risk)` for one miner and returns the selected pair.
pub fn fit_parameters(
    actual: &ActualAllocationSeries,
    market: &ProfitSeries,
    cooldown_hours: usize,
) -> Result<MinerParams> {
    Ok(fit_grid(actual, market, cooldown_hours, &FitOptions::default())?.params)
}

/// Evaluates the full lookback × risk grid.
///
/// All cells are scored on the same hours: those observed samples whose
/// window is covered for the longest lookback that still leaves
/// `min_eval_hours` samples. Longer lookbacks are dropped.
pub fn fit_grid(
    actual: &ActualAllocationSeries,
    market: &ProfitSeries,
    cooldown_hours: usize,
    opts: &FitOptions,
) -> Result<FitReport> {
    check_chains(actual, market)?;
    if opts.focus_chain >= market.dim() {
        return Err(Error::Config(format!("focus chain {} out of range", opts.focus_chain)));
    }
    let stats = RollingProfitStats::from_series(market, cooldown_hours);
    let rows = aligned(actual, market);

    let mut lookbacks = opts.lookbacks.clone();
    lookbacks.sort_unstable();
    lookbacks.dedup();
    let usable = |lb: usize| rows.iter().filter(|(i, _)| stats.covers(*i, lb)).count();
    lookbacks.retain(|&lb| lb >= 1 && usable(lb) >= opts.min_eval_hours.max(2));
    let longest = *lookbacks.last().ok_or_else(|| {
        Error::InsufficientHistory(format!(
            "fewer than {} allocation samples with {} hours of market history",
            opts.min_eval_hours,
            opts.lookbacks.iter().min().copied().unwrap_or(0) + cooldown_hours
        ))
    })?;
    let eval: Vec<(usize, usize)> = rows
        .iter()
        .copied()
        .filter(|(i, _)| stats.covers(*i, longest))
        .collect();
    let focus = opts.focus_chain;
    let observed: Vec<f64> = eval
        .iter()
        .map(|&(_, k)| actual.samples[k].1.weights()[focus])
        .collect();

    let per_lookback: Vec<(usize, Vec<f64>, Vec<FitCell>)> = lookbacks
        .par_iter()
        .map(|&lb| evaluate_lookback(actual, &stats, &eval, &observed, lb, opts))
        .collect::<Result<_>>()?;

    let mut cells = Vec::new();
    let mut risk_grids = Vec::new();
    for (lb, grid, c) in per_lookback {
        risk_grids.push((lb, grid));
        cells.extend(c);
    }
    let best = cells
        .iter()
        .min_by(|a, b| cell_order(a, b))
        .cloned()
        .ok_or_else(|| Error::InsufficientHistory("empty fit grid".into()))?;
    Ok(FitReport {
        params: MinerParams {
            miner_id: actual.miner_id.clone(),
            lookback_hours: best.lookback_hours,
            risk: best.risk,
            fit_statistic: Some(best.ks),
            mean_abs_error: Some(best.mae),
        },
        cells,
        risk_grids,
        evaluated_hours: eval.len(),
    })
}

fn evaluate_lookback(
    actual: &ActualAllocationSeries,
    stats: &RollingProfitStats,
    eval: &[(usize, usize)],
    observed: &[f64],
    lookback: usize,
    opts: &FitOptions,
) -> Result<(usize, Vec<f64>, Vec<FitCell>)> {
    let inferred: Vec<f64> = infer_with_stats(actual, stats, eval, lookback)?
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    let grid = linspace(
        percentile(&inferred, 0.25)?,
        percentile(&inferred, 0.75)?,
        opts.risks_per_lookback,
    );
    let n = actual.chains.len();
    let risks: Vec<RiskTolerance> = grid
        .iter()
        .map(|&r| RiskTolerance::new(r.max(0.0)))
        .collect::<Result<_>>()?;
    let mut economic = vec![Vec::with_capacity(eval.len()); risks.len()];
    let mut clamped = vec![0usize; risks.len()];
    let mut hold = vec![Allocation::uniform(n); risks.len()];
    for &(i, _) in eval {
        let mu = stats.mean(i, lookback)?;
        let sigma = stats.covariance(i, lookback)?;
        for (k, rho) in risks.iter().enumerate() {
            let out = solve_or_hold(&mu, &sigma, *rho, &hold[k])?;
            clamped[k] += usize::from(out.flags.risk_clamped);
            economic[k].push(out.allocation.weights()[opts.focus_chain]);
            hold[k] = out.allocation;
        }
    }
    let cells = risks
        .iter()
        .zip(economic)
        .zip(clamped)
        .map(|((rho, econ), clamped)| {
            Ok(FitCell {
                lookback_hours: lookback,
                risk: rho.rho(),
                ks: fit_statistic(opts.ks_mode, &econ, observed)?,
                mae: mean_abs_error(&econ, observed)?,
                risk_clamped_hours: clamped,
            })
        })
        .collect::<Result<_>>()?;
    Ok((lookback, grid, cells))
}
