use proptest::prelude::*;

use minealloc::aggregate::{
    aggregate_allocation, baseline_dari_allocation, baseline_price_allocation, pearson, predict_ibt_change,
};
use minealloc::market::{profit_vector, volatility_matrix, ProfitSeries};
use minealloc::risk::ks_statistic;
use minealloc::{
    inferred_risk, min_variance_allocation, solve_max_profit, Allocation, ProfitVector, RiskTolerance, SolvePolicy,
    VolatilityMatrix,
};

/// `AAᵀ + ridge·I` from a flat list of `n²` entries.
fn spd(n: usize, a: &[f64], ridge: f64) -> VolatilityMatrix {
    let rows = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (0..n).map(|k| a[i * n + k] * a[j * n + k]).sum::<f64>() + if i == j { ridge } else { 0.0 })
                .collect()
        })
        .collect();
    VolatilityMatrix::new(rows).unwrap()
}

/// `(μ, Σ, ρ)` with `ρ` at `1 + extra` times the minimum risk.
fn instance() -> impl Strategy<Value = (ProfitVector, VolatilityMatrix, f64)> {
    (2usize..=5).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0..2.0f64, n),
            prop::collection::vec(-1.0..1.0f64, n * n),
            0.01..3.0f64,
        )
            .prop_map(move |(mu, a, extra)| {
                let sigma = spd(n, &a, 0.05);
                let (_, min_risk) = min_variance_allocation(&sigma).unwrap();
                (ProfitVector::new(mu).unwrap(), sigma, min_risk * (1.0 + extra))
            })
    })
}

fn allocation(n: usize) -> impl Strategy<Value = Allocation> {
    prop::collection::vec(0.01..1.0f64, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        Allocation::new(v.iter().map(|x| x / s).collect()).unwrap()
    })
}

fn valid(w: &Allocation) -> bool {
    let sum: f64 = w.weights().iter().sum();
    (sum - 1.0).abs() <= 1e-12 && w.weights().iter().all(|x| (0.0..=1.0).contains(x))
}

proptest! {
    #[test]
    fn strict_solve_meets_constraints((mu, sigma, rho) in instance()) {
        let out = solve_max_profit(&mu, &sigma, RiskTolerance::new(rho).unwrap(), SolvePolicy::STRICT).unwrap();
        let w = out.allocation.weights();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!((sigma.quadratic(w) - rho).abs() <= 1e-9 * rho);
        prop_assert!((inferred_risk(&out.allocation, &sigma).unwrap() - rho).abs() <= 1e-9 * rho);
        if let Some(alt) = out.alternate_profit {
            prop_assert!(out.expected_profit >= alt);
        }
    }

    #[test]
    fn scaling_profit_keeps_allocation((mu, sigma, rho) in instance(), k in 0.01..100.0f64) {
        let rho = RiskTolerance::new(rho).unwrap();
        let base = solve_max_profit(&mu, &sigma, rho, SolvePolicy::STRICT).unwrap();
        let scaled = ProfitVector::new(mu.values().iter().map(|x| x * k).collect()).unwrap();
        let other = solve_max_profit(&scaled, &sigma, rho, SolvePolicy::STRICT).unwrap();
        for (a, b) in base.allocation.weights().iter().zip(other.allocation.weights()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn minimum_risk_gives_min_variance((mu, sigma, _) in instance()) {
        let (w_mv, min_risk) = min_variance_allocation(&sigma).unwrap();
        let out = solve_max_profit(&mu, &sigma, RiskTolerance::new(min_risk).unwrap(), SolvePolicy::STRICT).unwrap();
        for (a, b) in out.allocation.weights().iter().zip(w_mv.weights()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn pipeline_solve_is_a_valid_allocation((mu, sigma, rho) in instance(), shrink in 0.0..1.0f64) {
        let rho = RiskTolerance::new(rho * shrink + 1e-12).unwrap();
        let out = solve_max_profit(&mu, &sigma, rho, SolvePolicy::PIPELINE).unwrap();
        prop_assert!(valid(&out.allocation));
    }

    #[test]
    fn profit_vector_conservation(
        prices in prop::collection::vec(1.0..1e5f64, 2..6),
        diffs in prop::collection::vec(1e3..1e13f64, 6),
        k in 1e-3..1e3f64,
    ) {
        let n = prices.len();
        let rewards: Vec<f64> = prices.iter().map(|p| 12.5 * p).collect();
        let d = &diffs[..n];
        let pi = profit_vector(&rewards, d).unwrap();
        let total: f64 = d.iter().sum();
        let weighted: f64 = pi.values().iter().zip(d).map(|(p, d)| p * d).sum();
        prop_assert!((weighted - total).abs() <= 1e-9 * total);
        let scaled: Vec<f64> = rewards.iter().map(|r| r * k).collect();
        for (a, b) in profit_vector(&scaled, d).unwrap().values().iter().zip(pi.values()) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs());
        }
    }

    #[test]
    fn volatility_is_symmetric_psd(
        rows in prop::collection::vec(prop::collection::vec(0.5..1.5f64, 3), 40..80),
        lookback in 2usize..20,
        cooldown in 1usize..16,
    ) {
        let n = rows.len();
        let series = ProfitSeries::new(vec!["A".into(), "B".into(), "C".into()], 0, rows).unwrap();
        let t = (n as i64 - 1) * 3600;
        let s = volatility_matrix(&series, t, lookback, cooldown).unwrap();
        prop_assert!(s.is_symmetric(0.0));
        prop_assert!(s.eigenvalues().iter().all(|e| *e >= -1e-12));
    }

    #[test]
    fn aggregate_is_in_convex_hull(
        ws in prop::collection::vec(allocation(3), 1..6),
        hs in prop::collection::vec(0.0..10.0f64, 6),
    ) {
        let mut hs = hs[..ws.len()].to_vec();
        hs[0] += 0.1;
        let pairs: Vec<(Allocation, f64)> = ws.iter().cloned().zip(hs).collect();
        let agg = aggregate_allocation(&pairs).unwrap();
        prop_assert!(valid(&agg));
        for c in 0..3 {
            let lo = ws.iter().map(|w| w.weights()[c]).fold(f64::INFINITY, f64::min);
            let hi = ws.iter().map(|w| w.weights()[c]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(agg.weights()[c] >= lo - 1e-12 && agg.weights()[c] <= hi + 1e-12);
        }
        let same: Vec<(Allocation, f64)> = pairs.iter().map(|(_, h)| (ws[0].clone(), *h)).collect();
        for (a, b) in aggregate_allocation(&same).unwrap().weights().iter().zip(ws[0].weights()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn ibt_change_reciprocity(a in allocation(3), b in allocation(3), t in 60.0..1200.0f64) {
        let targets = [t, 2.0 * t, 600.0];
        let fwd = predict_ibt_change(&a, &b, &targets).unwrap();
        let back = predict_ibt_change(&b, &a, &targets).unwrap();
        for ((f, r), t) in fwd.iter().zip(&back).zip(targets) {
            prop_assert!((f * r - t * t).abs() <= 1e-9 * t * t);
        }
    }

    #[test]
    fn baselines_are_allocations(
        prices in prop::collection::vec(0.01..1e5f64, 2..5),
        diffs in prop::collection::vec(1.0..1e12f64, 5),
    ) {
        let n = prices.len();
        prop_assert!(valid(&baseline_price_allocation(&prices).unwrap()));
        prop_assert!(valid(&baseline_dari_allocation(&prices, &diffs[..n]).unwrap()));
    }

    #[test]
    fn pearson_affine_invariance(
        xs in prop::collection::vec(-10.0..10.0f64, 3..30),
        noise in prop::collection::vec(-5.0..5.0f64, 30),
        p in 0.1..10.0f64,
        q in -100.0..100.0f64,
    ) {
        let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, e)| x + e).collect();
        let base = pearson(&xs, &ys);
        prop_assume!(base.is_ok());
        let base = base.unwrap();
        let mapped: Vec<f64> = xs.iter().map(|x| p * x + q).collect();
        prop_assert!((pearson(&mapped, &ys).unwrap() - base).abs() <= 1e-9);
        let mapped: Vec<f64> = ys.iter().map(|y| p * y + q).collect();
        prop_assert!((pearson(&xs, &mapped).unwrap() - base).abs() <= 1e-9);
        prop_assert!((-1.0..=1.0).contains(&base));
    }

    #[test]
    fn ks_bounds_and_symmetry(
        xs in prop::collection::vec(0u8..8, 1..20),
        ys in prop::collection::vec(0u8..8, 1..20),
    ) {
        let xs: Vec<f64> = xs.into_iter().map(f64::from).collect();
        let ys: Vec<f64> = ys.into_iter().map(f64::from).collect();
        let d = ks_statistic(&xs, &ys).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, ks_statistic(&ys, &xs).unwrap());
        prop_assert_eq!(ks_statistic(&xs, &xs).unwrap(), 0.0);
    }
}
