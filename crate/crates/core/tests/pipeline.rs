use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use minealloc::aggregate::observed_ibt_change_series;
use minealloc::market::{
    profit_series, BlockRecord, ChainSpec, DifficultySeries, PriceSeries, RollingProfitStats, HOUR,
};
use minealloc::portfolio::solve_or_hold;
use minealloc::risk::{cell_order, fit_grid, ActualAllocationSeries, FitCell, FitOptions};
use minealloc::shock::{run_trial, ShockConfig};
use minealloc::{Allocation, RiskTolerance};

fn brute_ks(xs: &[f64], ys: &[f64]) -> f64 {
    let ecdf = |s: &[f64], v: f64| s.iter().filter(|x| **x <= v).count() as f64 / s.len() as f64;
    xs.iter()
        .chain(ys)
        .map(|&v| (ecdf(xs, v) - ecdf(ys, v)).abs())
        .fold(0.0, f64::max)
}

#[test]
fn fit_selects_grid_minimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let chains = vec!["BTC".to_string(), "BCH".to_string()];
    let hours = 900;
    let mut p = [10000.0, 1500.0];
    let cols: Vec<Vec<f64>> = {
        let mut cols = vec![Vec::new(), Vec::new()];
        for _ in 0..hours {
            for (k, col) in cols.iter_mut().enumerate() {
                p[k] *= 1.0 + rng.random_range(-0.02..0.02);
                col.push(p[k]);
            }
        }
        cols
    };
    let diffs = DifficultySeries::constant(chains.clone(), 0, &[125_000.0, 18_750.0]).unwrap();
    let specs = [ChainSpec::btc(), ChainSpec::bch()];
    let market = profit_series(&PriceSeries::new(chains.clone(), 0, cols).unwrap(), &diffs, &specs).unwrap();
    // Observed allocation: noisy share around 0.2 on BCH.
    let samples = (100..hours)
        .map(|h| {
            let b: f64 = 0.2 + rng.random_range(-0.1..0.1);
            (h as i64 * HOUR, Allocation::new(vec![1.0 - b, b]).unwrap())
        })
        .collect();
    let actual = ActualAllocationSeries {
        miner_id: "m".into(),
        chains,
        half_life_hours: 10.0,
        samples,
    };
    let opts = FitOptions {
        min_eval_hours: 300,
        lookbacks: vec![4, 10, 24, 48, 96, 700],
        ..FitOptions::default()
    };
    let report = fit_grid(&actual, &market, 16, &opts).unwrap();
    // 700 h leaves fewer than 300 evaluation hours and is dropped.
    assert_eq!(report.risk_grids.len(), 5);
    assert_eq!(report.cells.len(), 40);

    let stats = RollingProfitStats::from_series(&market, 16);
    let eval: Vec<(usize, f64)> = actual
        .samples
        .iter()
        .filter_map(|(t, w)| market.index_of(*t).map(|i| (i, w.weights()[1])))
        .filter(|(i, _)| stats.covers(*i, 96))
        .collect();
    assert_eq!(eval.len(), report.evaluated_hours);
    let observed: Vec<f64> = eval.iter().map(|(_, x)| *x).collect();

    let mut rescanned = Vec::new();
    for (lb, grid) in &report.risk_grids {
        for &rho in grid {
            let mut hold = Allocation::uniform(2);
            let econ: Vec<f64> = eval
                .iter()
                .map(|&(i, _)| {
                    let out = solve_or_hold(
                        &stats.mean(i, *lb).unwrap(),
                        &stats.covariance(i, *lb).unwrap(),
                        RiskTolerance::new(rho).unwrap(),
                        &hold,
                    )
                    .unwrap();
                    hold = out.allocation;
                    hold.weights()[1]
                })
                .collect();
            rescanned.push(FitCell {
                lookback_hours: *lb,
                risk: rho,
                ks: brute_ks(&econ, &observed),
                mae: 0.0,
                risk_clamped_hours: 0,
            });
        }
    }
    for (a, b) in rescanned.iter().zip(&report.cells) {
        assert_eq!((a.lookback_hours, a.risk), (b.lookback_hours, b.risk));
        assert!((a.ks - b.ks).abs() < 1e-12);
    }
    let best = rescanned.iter().min_by(|a, b| cell_order(a, b)).unwrap();
    assert_eq!(report.params.lookback_hours, best.lookback_hours);
    assert_eq!(report.params.risk, best.risk);
}

#[test]
fn observed_ibt_changes_follow_block_counts() {
    let start = 1_500_000_000 / HOUR * HOUR;
    let counts = [6usize, 6, 3, 3, 12, 4, 6, 6, 2, 8];
    let mut blocks = Vec::new();
    for (k, &n) in counts.iter().enumerate() {
        for j in 0..n {
            blocks.push(BlockRecord {
                chain_id: "BCH".into(),
                height: blocks.len() as u64,
                timestamp: start + k as i64 * 6 * HOUR + (j as i64 * 6 * HOUR) / n as i64,
                miner_id: "x".into(),
                difficulty: 1.0,
            });
        }
    }
    let series = observed_ibt_change_series(&blocks, "BCH", start, 6, 1).unwrap();
    let ratios: Vec<f64> = counts.windows(2).map(|p| p[0] as f64 / p[1] as f64).collect();
    let expected: Vec<(i64, f64)> = ratios
        .windows(4)
        .enumerate()
        .map(|(k, w)| (start + (k as i64 + 4) * 6 * HOUR, w.iter().sum::<f64>() / 4.0))
        .collect();
    assert_eq!(series.len(), expected.len());
    for (a, b) in series.iter().zip(&expected) {
        assert_eq!(a.0, b.0);
        assert!((a.1 - b.1).abs() < 1e-12);
    }
    assert!(observed_ibt_change_series(&blocks, "BCH", start, 6, 3).is_err());
    assert!(observed_ibt_change_series(&blocks, "BTC", start, 6, 1).is_err());
}

#[test]
fn shock_traces_keep_difficulty_positive() {
    for x in [0.25, 4.0] {
        let config = ShockConfig {
            shock_multiplier: x,
            horizon_days: 4.0,
            trials: 2,
            ..ShockConfig::default()
        };
        for k in 0..2 {
            let trial = run_trial(&config, k).unwrap();
            for chain in &trial.blocks {
                assert!(chain.iter().all(|b| b.difficulty > 0.0 && b.difficulty.is_finite()));
                assert!(chain.windows(2).all(|p| p[1].timestamp >= p[0].timestamp));
            }
        }
    }
}
