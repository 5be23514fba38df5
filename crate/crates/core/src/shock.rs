//! Monte Carlo block generation under a single BCH price shock.
//!
//! Two chains share one pool of hash. Every block and every hour the
//! modeled miners re-solve their allocations against the synthetic market,
//! the aggregate sets each chain's hash rate, and each chain's difficulty
//! adjustment reacts to the blocks it sees. Time is measured in seconds
//! relative to the shock.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::aggregate_allocation;
use crate::error::{Error, Result};
use crate::market::{profit_values, ChainSpec, DaaKind, PriceSeries, ProfitSeries, RollingProfitStats, HOUR};
use crate::portfolio::{solve_or_hold, Allocation, RiskTolerance};
use crate::risk::{default_aggregate_miners, MinerParams};

pub const SCHEMA_VERSION: u32 = 1;
pub const BCH_WINDOW_BLOCKS: usize = 144;
pub const BTC_EPOCH_BLOCKS: usize = 2016;
/// Largest factor by which one retarget may move difficulty, either way.
pub const DAA_CLAMP: f64 = 4.0;

/// How the hourly price noise is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScale {
    /// `± noise_fraction · base price`, before and after the shock.
    #[default]
    Base,
    /// `± noise_fraction · current level`, so the shock scales the noise too.
    Level,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShockConfig {
    pub schema_version: u32,
    /// BCH price multiplier applied from the shock onward.
    pub shock_multiplier: f64,
    pub base_price_bch: f64,
    pub base_price_btc: f64,
    pub noise_fraction: f64,
    pub noise_scale: NoiseScale,
    pub trials: usize,
    /// Block generation before the shock, in days.
    pub warmup_days: f64,
    pub horizon_days: f64,
    /// Pre-shock days included in the summary.
    pub report_pre_days: f64,
    pub bucket_hours: usize,
    pub miner_params: Vec<MinerParams>,
    /// One weight per miner; empty means equal weights.
    pub hash_weights: Vec<f64>,
    pub master_seed: u64,
    /// `[BTC-like, BCH-like]`; the shock hits the second chain.
    pub chains: Vec<ChainSpec>,
    pub cooldown_hours: usize,
    /// Lower bound on each chain's share of hash.
    pub allocation_floor: f64,
    /// Share of hash that keeps the initial allocation.
    pub inelastic_fraction: f64,
    /// Use the median of three timestamps at each end of the BCH window.
    pub median_of_three: bool,
    /// Replaces the economic allocation with a constant one.
    pub fixed_allocation: Option<Vec<f64>>,
}

impl Default for ShockConfig {
    fn default() -> Self {
        ShockConfig {
            schema_version: SCHEMA_VERSION,
            shock_multiplier: 1.0,
            base_price_bch: 1500.0,
            base_price_btc: 10000.0,
            noise_fraction: 0.1,
            noise_scale: NoiseScale::Base,
            trials: 180,
            warmup_days: 14.0,
            horizon_days: 14.0,
            report_pre_days: 3.0,
            bucket_hours: 6,
            miner_params: default_aggregate_miners(),
            hash_weights: Vec::new(),
            master_seed: 0,
            chains: vec![ChainSpec::btc(), ChainSpec::bch()],
            cooldown_hours: crate::market::DEFAULT_COOLDOWN_HOURS,
            allocation_floor: 1e-6,
            inelastic_fraction: 0.0,
            median_of_three: false,
            fixed_allocation: None,
        }
    }
}

impl ShockConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {}", self.schema_version));
        }
        if !(self.shock_multiplier > 0.0 && self.shock_multiplier <= 4.0) {
            return bad(format!("shock multiplier {} outside (0, 4]", self.shock_multiplier));
        }
        if !(self.base_price_bch > 0.0 && self.base_price_btc > 0.0)
            || !(self.base_price_bch.is_finite() && self.base_price_btc.is_finite())
        {
            return bad("base prices must be positive".into());
        }
        if !(0.0..1.0).contains(&self.noise_fraction) {
            return bad(format!("noise fraction {} outside [0, 1)", self.noise_fraction));
        }
        if self.trials == 0 {
            return bad("trials must be >= 1".into());
        }
        for (name, v) in [
            ("warmup_days", self.warmup_days),
            ("horizon_days", self.horizon_days),
            ("report_pre_days", self.report_pre_days),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0"));
            }
        }
        if self.horizon_days <= 0.0 {
            return bad("horizon_days must be > 0".into());
        }
        if self.report_pre_days > self.warmup_days {
            return bad("report_pre_days exceeds warmup_days".into());
        }
        if self.bucket_hours == 0 {
            return bad("bucket_hours must be > 0".into());
        }
        if self.chains.len() != 2 {
            return bad(format!("expected 2 chains, found {}", self.chains.len()));
        }
        for c in &self.chains {
            c.validate()?;
        }
        if self.chains[0].chain_id == self.chains[1].chain_id {
            return bad("chain ids must differ".into());
        }
        if !(0.0..0.5).contains(&self.allocation_floor) {
            return bad(format!("allocation floor {} outside [0, 0.5)", self.allocation_floor));
        }
        if !(0.0..1.0).contains(&self.inelastic_fraction) {
            return bad(format!("inelastic fraction {} outside [0, 1)", self.inelastic_fraction));
        }
        match &self.fixed_allocation {
            Some(w) => {
                Allocation::new(w.clone())?;
                if w.len() != 2 {
                    return bad("fixed allocation needs 2 components".into());
                }
            }
            None => {
                if self.miner_params.is_empty() {
                    return bad("no miners configured".into());
                }
                for p in &self.miner_params {
                    p.validate()?;
                }
            }
        }
        if !self.hash_weights.is_empty() {
            if self.hash_weights.len() != self.miner_params.len() {
                return bad(format!(
                    "{} hash weights for {} miners",
                    self.hash_weights.len(),
                    self.miner_params.len()
                ));
            }
            if self.hash_weights.iter().any(|h| !(*h >= 0.0 && h.is_finite()))
                || self.hash_weights.iter().sum::<f64>() <= 0.0
            {
                return bad("hash weights must be >= 0 with a positive sum".into());
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> Vec<f64> {
        if self.hash_weights.is_empty() {
            vec![1.0; self.miner_params.len()]
        } else {
            self.hash_weights.clone()
        }
    }

    pub fn max_lookback(&self) -> usize {
        self.miner_params.iter().map(|p| p.lookback_hours).max().unwrap_or(1)
    }

    /// Hours of price history before block generation starts.
    pub fn pre_history_hours(&self) -> usize {
        self.max_lookback() + self.cooldown_hours + 1
    }

    pub fn warmup_hours(&self) -> usize {
        (self.warmup_days * 24.0).ceil() as usize
    }

    pub fn horizon_hours(&self) -> usize {
        (self.horizon_days * 24.0).ceil() as usize
    }

    /// Hour offset of the first price row relative to the shock.
    pub fn first_hour(&self) -> i64 {
        -((self.pre_history_hours() + self.warmup_hours()) as i64)
    }

    pub fn total_hours(&self) -> usize {
        self.pre_history_hours() + self.warmup_hours() + self.horizon_hours()
    }
}

/// RNG stream for one trial.
pub fn trial_rng(master_seed: u64, trial_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(trial_index);
    rng
}

/// Hourly BTC and BCH prices: constant bases with uniform noise, and the
/// BCH base multiplied by the shock from hour 0 on. Timestamps are seconds
/// relative to the shock.
pub fn generate_shock_prices<R: Rng>(config: &ShockConfig, rng: &mut R) -> Result<PriceSeries> {
    config.validate()?;
    let hours = config.total_hours();
    let first = config.first_hour();
    let f = config.noise_fraction;
    let noise = |rng: &mut R, scale: f64| {
        if f > 0.0 {
            rng.random_range(-f * scale..=f * scale)
        } else {
            0.0
        }
    };
    let mut btc = Vec::with_capacity(hours);
    let mut bch = Vec::with_capacity(hours);
    for h in 0..hours {
        let post = first + h as i64 >= 0;
        let level = config.base_price_bch * if post { config.shock_multiplier } else { 1.0 };
        let scale = match config.noise_scale {
            NoiseScale::Base => config.base_price_bch,
            NoiseScale::Level => level,
        };
        let b = config.base_price_btc + noise(rng, config.base_price_btc);
        let c = level + noise(rng, scale);
        btc.push(b);
        // Base-scaled noise can reach zero after a deep drop.
        bch.push(c.max(1e-3 * level));
    }
    let chains = config.chains.iter().map(|c| c.chain_id.clone()).collect();
    PriceSeries::new(chains, first * HOUR, vec![btc, bch])
}

/// One mined block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockStamp {
    pub height: u64,
    /// Seconds relative to the shock.
    pub timestamp: f64,
    /// Difficulty the block was mined at.
    pub difficulty: f64,
}

fn clamp_elapsed(elapsed: f64, expected: f64) -> f64 {
    elapsed.clamp(expected / DAA_CLAMP, expected * DAA_CLAMP)
}

fn median3(a: f64, b: f64, c: f64) -> f64 {
    a.max(b).min(a.min(b).max(c))
}

fn window_daa(history: &[BlockStamp], target_ibt: f64, median_of_three: bool) -> Result<f64> {
    let w = BCH_WINDOW_BLOCKS;
    let need = w + 1 + if median_of_three { 2 } else { 0 };
    if history.len() < need {
        return Err(Error::InsufficientHistory(format!(
            "{} blocks; window difficulty adjustment needs {need}",
            history.len()
        )));
    }
    let k = history.len() - 1;
    let ts = |i: usize| {
        if median_of_three {
            median3(history[i - 2].timestamp, history[i - 1].timestamp, history[i].timestamp)
        } else {
            history[i].timestamp
        }
    };
    let elapsed = ts(k) - ts(k - w);
    let mean_d = history[k + 1 - w..=k].iter().map(|b| b.difficulty).sum::<f64>() / w as f64;
    let expected = w as f64 * target_ibt;
    Ok(mean_d * expected / clamp_elapsed(elapsed, expected))
}

/// Next difficulty from the last 145 blocks: mean difficulty over the last
/// 144 blocks scaled by target over elapsed time, elapsed clamped to within
/// a factor of 4 of the target.
pub fn bch_daa_next_difficulty(history: &[BlockStamp], target_ibt: f64) -> Result<f64> {
    window_daa(history, target_ibt, false)
}

/// Difficulty after an epoch. `epoch` holds the block before the epoch
/// followed by the epoch's blocks; the adjustment factor is clamped to
/// `[1/4, 4]`.
pub fn btc_daa_next_difficulty(epoch: &[BlockStamp], target_ibt: f64) -> Result<f64> {
    let (first, last) = match (epoch.first(), epoch.last()) {
        (Some(f), Some(l)) if epoch.len() >= 2 => (f, l),
        _ => return Err(Error::InsufficientHistory("epoch needs at least 2 blocks".into())),
    };
    let expected = (epoch.len() - 1) as f64 * target_ibt;
    Ok(last.difficulty * expected / clamp_elapsed(last.timestamp - first.timestamp, expected))
}

/// One block in a trial trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockEvent {
    pub timestamp: f64,
    pub difficulty: f64,
    /// Seconds since the previous block on the same chain.
    pub ibt: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub trial_index: u64,
    pub chains: Vec<String>,
    /// Per chain, every block from the start of block generation.
    pub blocks: Vec<Vec<BlockEvent>>,
    /// `(hour relative to shock, aggregate allocation)` at each hour start.
    pub hourly_allocation: Vec<(i64, Vec<f64>)>,
    /// Profit rows the miners saw, one per hour, with the final
    /// difficulty of each hour.
    pub profit: ProfitSeries,
    /// Allocation updates where the floor was raised on some chain.
    pub floor_binding_events: usize,
}

struct ChainState {
    spec: ChainSpec,
    difficulty: f64,
    height: u64,
    history: Vec<BlockStamp>,
    trace: Vec<BlockEvent>,
}

impl ChainState {
    fn mine(&mut self, t: f64, median_of_three: bool) -> Result<()> {
        let prev = self.history.last().map_or(t, |b| b.timestamp);
        self.height += 1;
        let stamp = BlockStamp {
            height: self.height,
            timestamp: t,
            difficulty: self.difficulty,
        };
        self.history.push(stamp);
        self.trace.push(BlockEvent {
            timestamp: t,
            difficulty: self.difficulty,
            ibt: t - prev,
        });
        let target = self.spec.target_ibt;
        match self.spec.daa_kind {
            DaaKind::PerBlockWindow => {
                if let Ok(d) = window_daa(&self.history, target, median_of_three) {
                    self.difficulty = d;
                }
                let keep = BCH_WINDOW_BLOCKS + 3;
                if self.history.len() > 4 * keep {
                    self.history.drain(..self.history.len() - keep);
                }
            }
            DaaKind::Epoch => {
                if self.height.is_multiple_of(BTC_EPOCH_BLOCKS as u64) {
                    let from = self.history.len().saturating_sub(BTC_EPOCH_BLOCKS + 1);
                    self.difficulty = btc_daa_next_difficulty(&self.history[from..], target)?;
                    let last = *self.history.last().expect("just pushed");
                    self.history.clear();
                    self.history.push(last);
                }
            }
        }
        Ok(())
    }
}

struct Market<'a> {
    prices: &'a PriceSeries,
    rewards_per_coin: Vec<f64>,
    stats: RollingProfitStats,
}

impl Market<'_> {
    fn row(&self, hour: usize, difficulties: &[f64]) -> Vec<f64> {
        let rewards: Vec<f64> = self
            .rewards_per_coin
            .iter()
            .enumerate()
            .map(|(c, s)| s * self.prices.price(c, hour))
            .collect();
        profit_values(&rewards, difficulties)
    }
}

struct Allocator {
    miners: Vec<(usize, RiskTolerance)>,
    weights: Vec<f64>,
    hold: Vec<Allocation>,
    fixed: Option<Allocation>,
    floor: f64,
    floor_binding_events: usize,
}

impl Allocator {
    fn new(config: &ShockConfig) -> Result<Self> {
        let miners = config
            .miner_params
            .iter()
            .map(|p| Ok((p.lookback_hours, RiskTolerance::new(p.risk)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Allocator {
            hold: vec![Allocation::uniform(2); miners.len()],
            miners,
            weights: config.weights(),
            fixed: config.fixed_allocation.clone().map(Allocation::from_weights),
            floor: config.allocation_floor,
            floor_binding_events: 0,
        })
    }

    fn solve(&mut self, stats: &RollingProfitStats) -> Result<Vec<f64>> {
        let w = match &self.fixed {
            Some(w) => w.weights().to_vec(),
            None => {
                let i = stats.len() - 1;
                let mut parts = Vec::with_capacity(self.miners.len());
                for (j, &(lookback, rho)) in self.miners.iter().enumerate() {
                    let mu = stats.mean(i, lookback)?;
                    let sigma = stats.covariance(i, lookback)?;
                    let out = solve_or_hold(&mu, &sigma, rho, &self.hold[j])?;
                    self.hold[j] = out.allocation.clone();
                    parts.push((out.allocation, self.weights[j]));
                }
                aggregate_allocation(&parts)?.into_inner()
            }
        };
        if w.iter().any(|x| *x < self.floor) {
            self.floor_binding_events += 1;
            let raised: Vec<f64> = w.iter().map(|x| x.max(self.floor)).collect();
            let total: f64 = raised.iter().sum();
            return Ok(raised.into_iter().map(|x| x / total).collect());
        }
        Ok(w)
    }
}

/// Runs one trial. The RNG stream is fixed by `(master_seed, trial_index)`.
pub fn run_trial(config: &ShockConfig, trial_index: u64) -> Result<TrialResult> {
    config.validate()?;
    let mut rng = trial_rng(config.master_seed, trial_index);
    let prices = generate_shock_prices(config, &mut rng)?;
    let chains: Vec<String> = config.chains.iter().map(|c| c.chain_id.clone()).collect();

    // Start where every chain's reward per unit difficulty is equal, with
    // total hash sized so each chain meets its target at the resulting
    // difficulty-share allocation.
    let initial: Vec<f64> = config
        .chains
        .iter()
        .zip([config.base_price_btc, config.base_price_bch])
        .map(|(c, p)| p * c.coinbase_subsidy)
        .collect();
    let rates: Vec<f64> = initial.iter().zip(&config.chains).map(|(d, c)| d / c.target_ibt).collect();
    let total_hash: f64 = rates.iter().sum();
    let w0: Vec<f64> = rates.iter().map(|r| r / total_hash).collect();

    let mut market = Market {
        prices: &prices,
        rewards_per_coin: config.chains.iter().map(|c| c.coinbase_subsidy).collect(),
        stats: RollingProfitStats::new(2, config.cooldown_hours),
    };
    let pre = config.pre_history_hours();
    for h in 0..=pre {
        let row = market.row(h, &initial);
        market.stats.push(row);
    }

    let mut states: Vec<ChainState> = config
        .chains
        .iter()
        .zip(&initial)
        .map(|(spec, &d)| ChainState {
            spec: spec.clone(),
            difficulty: d,
            height: 0,
            history: Vec::new(),
            trace: Vec::new(),
        })
        .collect();
    let start = -(config.warmup_hours() as f64) * HOUR as f64;
    for s in &mut states {
        s.history.push(BlockStamp {
            height: 0,
            timestamp: start,
            difficulty: s.difficulty,
        });
    }
    let end = config.horizon_hours() as f64 * HOUR as f64;
    let elastic = 1.0 - config.inelastic_fraction;

    let mut allocator = Allocator::new(config)?;
    let mut hour = pre;
    let mut hourly = Vec::with_capacity(config.warmup_hours() + config.horizon_hours() + 1);
    let mut w = allocator.solve(&market.stats)?;
    hourly.push((config.first_hour() + hour as i64, w.clone()));

    let mut t = start;
    let mut next_hour = start + HOUR as f64;
    let draw = |rng: &mut ChaCha8Rng, t: f64, w: &[f64], states: &[ChainState]| -> Vec<f64> {
        states
            .iter()
            .enumerate()
            .map(|(c, s)| {
                let share = elastic * w[c] + config.inelastic_fraction * w0[c];
                let rate = total_hash * share / s.difficulty;
                let u: f64 = rng.sample(Exp1);
                if rate > 0.0 {
                    t + u / rate
                } else {
                    f64::INFINITY
                }
            })
            .collect()
    };
    let mut pending = draw(&mut rng, t, &w, &states);
    loop {
        let (chain, t_block) = pending
            .iter()
            .copied()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("two chains");
        if next_hour <= t_block {
            if next_hour >= end {
                break;
            }
            t = next_hour;
            next_hour += HOUR as f64;
            hour += 1;
            let d: Vec<f64> = states.iter().map(|s| s.difficulty).collect();
            let row = market.row(hour, &d);
            market.stats.push(row);
            w = allocator.solve(&market.stats)?;
            hourly.push((config.first_hour() + hour as i64, w.clone()));
        } else {
            if t_block >= end {
                break;
            }
            t = t_block;
            states[chain].mine(t, config.median_of_three)?;
            // The hour's profit row keeps the difficulty seen at the hour
            // start, so the allocation holds until the next hour.
            pending[chain] = draw(&mut rng, t, &w, &states)[chain];
            continue;
        }
        pending = draw(&mut rng, t, &w, &states);
    }

    let rows: Vec<Vec<f64>> = (0..market.stats.len()).map(|i| market.stats.row(i).to_vec()).collect();
    Ok(TrialResult {
        trial_index,
        profit: ProfitSeries::new(chains.clone(), prices.start(), rows)?,
        chains,
        blocks: states.into_iter().map(|s| s.trace).collect(),
        hourly_allocation: hourly,
        floor_binding_events: allocator.floor_binding_events,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryBucket {
    pub start_hours_from_shock: i64,
    pub median_bch_allocation: f64,
    pub mean_bch_ibt_seconds: f64,
    pub mean_btc_ibt_seconds: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub shock_multiplier: f64,
    pub bucket_hours: usize,
    pub buckets: Vec<SummaryBucket>,
    pub floor_binding_events: usize,
}

impl ExperimentSummary {
    /// Buckets whose start lies in `[from, to)` hours from the shock.
    pub fn window(&self, from: i64, to: i64) -> impl Iterator<Item = &SummaryBucket> {
        self.buckets
            .iter()
            .filter(move |b| b.start_hours_from_shock >= from && b.start_hours_from_shock < to)
    }
}

/// Per-trial means per bucket; NaN where a bucket has no data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialBuckets {
    pub bch_allocation: Vec<f64>,
    pub bch_ibt: Vec<f64>,
    pub btc_ibt: Vec<f64>,
    pub floor_binding_events: usize,
}

fn bucket_starts(config: &ShockConfig) -> Vec<i64> {
    let b = config.bucket_hours as i64;
    let first = -((config.report_pre_days * 24.0) as i64).div_euclid(b) * b;
    let last = config.horizon_hours() as i64;
    (0..).map(|k| first + k * b).take_while(|s| *s < last).collect()
}

fn bucket_means(starts: &[i64], width: i64, samples: impl Iterator<Item = (f64, f64)>) -> Vec<f64> {
    let mut sum = vec![0.0; starts.len()];
    let mut count = vec![0usize; starts.len()];
    let (first, w) = (starts[0] as f64 * HOUR as f64, (width * HOUR) as f64);
    for (t, v) in samples {
        let k = ((t - first) / w).floor();
        if k >= 0.0 && (k as usize) < starts.len() {
            sum[k as usize] += v;
            count[k as usize] += 1;
        }
    }
    sum.iter()
        .zip(&count)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
        .collect()
}

/// Reduces one trial to bucket means.
pub fn summarize_trial(config: &ShockConfig, trial: &TrialResult) -> TrialBuckets {
    let starts = bucket_starts(config);
    let width = config.bucket_hours as i64;
    let ibt = |c: usize| bucket_means(&starts, width, trial.blocks[c].iter().map(|b| (b.timestamp, b.ibt)));
    TrialBuckets {
        bch_allocation: bucket_means(
            &starts,
            width,
            trial
                .hourly_allocation
                .iter()
                .map(|(h, w)| ((h * HOUR) as f64, w[1])),
        ),
        btc_ibt: ibt(0),
        bch_ibt: ibt(1),
        floor_binding_events: trial.floor_binding_events,
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Runs all trials, in parallel on the current rayon pool, and summarizes
/// them per bucket. The result does not depend on the number of threads.
pub fn run_experiment(config: &ShockConfig) -> Result<ExperimentSummary> {
    config.validate()?;
    let per_trial: Vec<TrialBuckets> = (0..config.trials as u64)
        .into_par_iter()
        .map(|k| run_trial(config, k).map(|t| summarize_trial(config, &t)))
        .collect::<Result<_>>()?;
    Ok(combine_trials(config, &per_trial))
}

/// Across-trial median allocation and mean inter-block times per bucket.
pub fn combine_trials(config: &ShockConfig, per_trial: &[TrialBuckets]) -> ExperimentSummary {
    let starts = bucket_starts(config);
    let column = |k: usize, pick: fn(&TrialBuckets) -> &Vec<f64>| -> Vec<f64> {
        per_trial.iter().map(|t| pick(t)[k]).filter(|v| !v.is_nan()).collect()
    };
    let buckets = starts
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            let bch = column(k, |t| &t.bch_ibt);
            SummaryBucket {
                start_hours_from_shock: s,
                median_bch_allocation: median(column(k, |t| &t.bch_allocation)),
                mean_bch_ibt_seconds: mean(&bch),
                mean_btc_ibt_seconds: mean(&column(k, |t| &t.btc_ibt)),
                trials: bch.len(),
            }
        })
        .collect();
    ExperimentSummary {
        shock_multiplier: config.shock_multiplier,
        bucket_hours: config.bucket_hours,
        buckets,
        floor_binding_events: per_trial.iter().map(|t| t.floor_binding_events).sum(),
    }
}

pub const SUMMARY_HEADER: [&str; 5] = [
    "bucket_start_hours_from_shock",
    "median_bch_allocation",
    "mean_bch_ibt_seconds",
    "mean_btc_ibt_seconds",
    "trials",
];

pub fn write_summary_csv<W: Write>(summary: &ExperimentSummary, out: W) -> Result<()> {
    let io = |e: csv::Error| Error::Io {
        path: "summary".into(),
        message: e.to_string(),
    };
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(SUMMARY_HEADER).map_err(io)?;
    for b in &summary.buckets {
        w.write_record([
            b.start_hours_from_shock.to_string(),
            b.median_bch_allocation.to_string(),
            b.mean_bch_ibt_seconds.to_string(),
            b.mean_btc_ibt_seconds.to_string(),
            b.trials.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: "summary".into(),
        message: e.to_string(),
    })
}

/// Per-block trace of one trial: `chain,timestamp,difficulty,ibt`.
pub fn write_trace_csv<W: Write>(trial: &TrialResult, out: W) -> Result<()> {
    let io = |e: csv::Error| Error::Io {
        path: "trace".into(),
        message: e.to_string(),
    };
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["chain", "timestamp", "difficulty", "ibt"]).map_err(io)?;
    for (c, blocks) in trial.blocks.iter().enumerate() {
        for b in blocks {
            w.write_record([
                trial.chains[c].clone(),
                b.timestamp.to_string(),
                b.difficulty.to_string(),
                b.ibt.to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::Io {
        path: "trace".into(),
        message: e.to_string(),
    })
}
