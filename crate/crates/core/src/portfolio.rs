//! Closed-form solution of the risk-constrained profit maximization problem.
//!
//! A miner holding allocation `w` over `n` chains earns expected profit
//! `wᵀμ` and carries risk `wᵀΣw`. Given a risk tolerance `ρ`, the miner
//! picks the allocation on `{wᵀe = 1, wᵀΣw = ρ}` with the largest expected
//! profit. The Lagrangian critical points are
//!
//! ```text
//! w  = Σ⁻¹(μ − λ₂e) / (2λ₁)          a = eᵀΣ⁻¹e
//! λ₁ = (b − aλ₂) / 2                 b = eᵀΣ⁻¹μ
//! λ₂ = b/a ± √((b² − ac)(1 − aρ)) / (a(1 − aρ))      c = μᵀΣ⁻¹μ
//! ```
//!
//! Both roots are evaluated and the more profitable one is returned.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Condition number above which the volatility matrix is jittered.
pub const MAX_CONDITION: f64 = 1e12;
/// Diagonal jitter, relative to the mean diagonal entry.
pub const JITTER: f64 = 1e-10;
/// Spread of `μ` relative to its largest entry below which the objective is flat.
pub const DEGENERATE_TOL: f64 = 1e-12;
/// Relative tolerance on `1 − aρ` for the minimum-variance boundary.
pub const BOUNDARY_TOL: f64 = 1e-12;

/// Normalized expected profit per chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfitVector(Vec<f64>);

impl ProfitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("profit vector".into()));
        }
        Ok(ProfitVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Returns a copy with every component multiplied by `k`.
    pub fn scaled(&self, k: f64) -> ProfitVector {
        ProfitVector(self.0.iter().map(|v| v * k).collect())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Covariance of cooldown-lagged profit differences, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VolatilityMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl VolatilityMatrix {
    /// Builds a matrix from rows, checking shape, symmetry and positive
    /// semi-definiteness.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        let mut entries = Vec::with_capacity(n * n);
        for row in &rows {
            if row.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: row.len(),
                });
            }
            entries.extend_from_slice(row);
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("volatility matrix".into()));
        }
        let m = VolatilityMatrix { n, entries };
        if !m.is_symmetric(1e-12) {
            return Err(Error::Config("volatility matrix is not symmetric".into()));
        }
        if !m.is_psd() {
            return Err(Error::Config(
                "volatility matrix is not positive semi-definite".into(),
            ));
        }
        Ok(m)
    }

    pub(crate) fn from_row_major(n: usize, entries: Vec<f64>) -> Self {
        debug_assert_eq!(entries.len(), n * n);
        VolatilityMatrix { n, entries }
    }

    pub fn zeros(n: usize) -> Self {
        VolatilityMatrix::from_row_major(n, vec![0.0; n * n])
    }

    pub fn identity(n: usize) -> Self {
        VolatilityMatrix::diagonal(&vec![1.0; n])
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut entries = vec![0.0; n * n];
        for (i, d) in diag.iter().enumerate() {
            entries[i * n + i] = *d;
        }
        VolatilityMatrix::from_row_major(n, entries)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }

    /// All eigenvalues at or above `−1e-10 · trace`.
    pub fn is_psd(&self) -> bool {
        let floor = -1e-10 * self.trace().abs();
        self.eigenvalues().iter().all(|&l| l >= floor)
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        self.to_matrix()
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .collect()
    }

    /// Quadratic form `xᵀΣx`.
    pub fn quadratic(&self, x: &[f64]) -> f64 {
        let n = self.n;
        let mut acc = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += self.entries[i * n + j] * x[j];
            }
            acc += x[i] * row;
        }
        acc
    }

    /// Principal submatrix on the given indices.
    pub fn submatrix(&self, idx: &[usize]) -> VolatilityMatrix {
        let k = idx.len();
        let mut entries = Vec::with_capacity(k * k);
        for &i in idx {
            for &j in idx {
                entries.push(self.get(i, j));
            }
        }
        VolatilityMatrix::from_row_major(k, entries)
    }

    fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, &self.entries)
    }
}

/// Fraction of hash rate applied to each chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation(Vec<f64>);

impl Allocation {
    /// Validating constructor for externally supplied weights.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::EmptyInput);
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFiniteInput("allocation".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("allocation sums to {sum}, not 1")));
        }
        Ok(Allocation(weights))
    }

    pub(crate) fn from_weights(weights: Vec<f64>) -> Self {
        Allocation(weights)
    }

    pub fn uniform(n: usize) -> Self {
        Allocation(vec![1.0 / n as f64; n])
    }

    /// All weight on chain `i`.
    pub fn vertex(n: usize, i: usize) -> Self {
        let mut w = vec![0.0; n];
        w[i] = 1.0;
        Allocation(w)
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Maximum portfolio variance a miner accepts.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct RiskTolerance(f64);

impl RiskTolerance {
    pub fn new(rho: f64) -> Result<Self> {
        if !rho.is_finite() {
            return Err(Error::NonFiniteInput("risk tolerance".into()));
        }
        if rho < 0.0 {
            return Err(Error::NonPositiveInput(format!("risk tolerance {rho}")));
        }
        Ok(RiskTolerance(rho))
    }

    pub fn rho(self) -> f64 {
        self.0
    }

    /// Square root of the tolerance, in units of summed fiat price.
    pub fn root_risk(self) -> f64 {
        self.0.sqrt()
    }
}

/// What to do when the requested risk is below the minimum-variance risk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RiskPolicy {
    Strict,
    ClampRisk,
}

/// Whether negative (short) weights are allowed in the output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightPolicy {
    AllowShort,
    ClampWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SolvePolicy {
    pub risk: RiskPolicy,
    pub weights: WeightPolicy,
}

impl SolvePolicy {
    /// Exact closed form; infeasible risks are errors, shorts are allowed.
    pub const STRICT: SolvePolicy = SolvePolicy {
        risk: RiskPolicy::Strict,
        weights: WeightPolicy::AllowShort,
    };

    /// Used by every pipeline: risk clamped to the feasible floor, weights in [0, 1].
    pub const PIPELINE: SolvePolicy = SolvePolicy {
        risk: RiskPolicy::ClampRisk,
        weights: WeightPolicy::ClampWeights,
    };
}

impl Default for SolvePolicy {
    fn default() -> Self {
        SolvePolicy::PIPELINE
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SolveFlags {
    /// `μ ∝ e`: every feasible allocation earns the same profit.
    pub degenerate: bool,
    /// Requested risk was below `1/a` and was raised to it.
    pub risk_clamped: bool,
    /// Negative weights were removed by the active-set step.
    pub weights_clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutcome {
    pub allocation: Allocation,
    pub expected_profit: f64,
    /// `wᵀΣw` of the returned allocation against the caller's matrix.
    pub achieved_risk: f64,
    /// Multiplier on the risk constraint. `0` when degenerate, `+∞` on the
    /// minimum-variance boundary.
    pub lambda1: f64,
    /// Multiplier on the budget constraint.
    pub lambda2: f64,
    /// Expected profit of the root that was not returned, when two roots exist.
    pub alternate_profit: Option<f64>,
    pub flags: SolveFlags,
}

/// Factorized volatility matrix with the `a, b, c` scalars of a profit vector.
struct Factorized {
    chol: Cholesky<f64, Dyn>,
    /// `Σ⁻¹e`
    inv_e: DVector<f64>,
    a: f64,
}

fn factorize(sigma: &VolatilityMatrix) -> Result<Factorized> {
    let n = sigma.dim();
    if sigma.entries().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("volatility matrix".into()));
    }
    let mut m = sigma.to_matrix();
    let eig = m.clone().symmetric_eigenvalues();
    let lo = eig.min();
    let hi = eig.max();
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if cond > MAX_CONDITION {
        let jitter = JITTER * sigma.trace() / n as f64;
        for i in 0..n {
            m[(i, i)] += jitter;
        }
    }
    let chol = m.cholesky().ok_or(Error::SingularVolatility)?;
    let inv_e = chol.solve(&DVector::from_element(n, 1.0));
    let a = inv_e.sum();
    if !(a.is_finite() && a > 0.0) {
        return Err(Error::SingularVolatility);
    }
    Ok(Factorized { chol, inv_e, a })
}

/// Minimum-variance allocation `Σ⁻¹e / (eᵀΣ⁻¹e)` and its risk `1/a`.
pub fn min_variance_allocation(sigma: &VolatilityMatrix) -> Result<(Allocation, f64)> {
    let f = factorize(sigma)?;
    let w: Vec<f64> = f.inv_e.iter().map(|x| x / f.a).collect();
    Ok((Allocation::from_weights(w), 1.0 / f.a))
}

/// Risk `wᵀΣw` of an allocation.
pub fn inferred_risk(w: &Allocation, sigma: &VolatilityMatrix) -> Result<f64> {
    if w.len() != sigma.dim() {
        return Err(Error::DimensionMismatch {
            expected: sigma.dim(),
            found: w.len(),
        });
    }
    Ok(sigma.quadratic(w.weights()).max(0.0))
}

/// Expected profit `wᵀμ` of an allocation.
pub fn expected_profit(w: &Allocation, mu: &ProfitVector) -> Result<f64> {
    if w.len() != mu.len() {
        return Err(Error::DimensionMismatch {
            expected: mu.len(),
            found: w.len(),
        });
    }
    Ok(dot(w.weights(), mu.values()))
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

struct RawSolution {
    weights: Vec<f64>,
    lambda1: f64,
    lambda2: f64,
    alternate_profit: Option<f64>,
    degenerate: bool,
    risk_clamped: bool,
}

fn solve_unclamped(
    mu: &[f64],
    sigma: &VolatilityMatrix,
    rho: f64,
    risk: RiskPolicy,
) -> Result<RawSolution> {
    let f = factorize(sigma)?;
    let a = f.a;
    let mu_v = DVector::from_column_slice(mu);
    let inv_mu = f.chol.solve(&mu_v);
    let b = inv_mu.sum();
    let min_risk = 1.0 / a;
    let w_mv = &f.inv_e / a;

    let mut rho = rho;
    let mut risk_clamped = false;
    if a * rho < 1.0 - BOUNDARY_TOL {
        match risk {
            RiskPolicy::Strict => return Err(Error::InfeasibleRisk { rho, min_risk }),
            RiskPolicy::ClampRisk => {
                rho = min_risk;
                risk_clamped = true;
            }
        }
    }

    // ac − b² computed as a·μ̃ᵀΣ⁻¹μ̃ with μ̃ = μ − (b/a)e, which avoids the
    // cancellation of the direct difference.
    let centered = mu_v.add_scalar(-b / a);
    let z = f.chol.solve(&centered);
    let gap = (a * centered.dot(&z)).max(0.0);

    let mean = mu.iter().sum::<f64>() / mu.len() as f64;
    let spread = mu.iter().map(|m| (m - mean).abs()).fold(0.0, f64::max);
    let scale = mu.iter().map(|m| m.abs()).fold(0.0, f64::max);
    if spread <= DEGENERATE_TOL * scale || gap == 0.0 {
        return Ok(RawSolution {
            weights: w_mv.iter().copied().collect(),
            lambda1: 0.0,
            lambda2: b / a,
            alternate_profit: None,
            degenerate: true,
            risk_clamped,
        });
    }

    let one_minus = 1.0 - a * rho;
    if one_minus.abs() <= BOUNDARY_TOL {
        return Ok(RawSolution {
            weights: w_mv.iter().copied().collect(),
            lambda1: f64::INFINITY,
            lambda2: b / a,
            alternate_profit: None,
            degenerate: false,
            risk_clamped,
        });
    }

    // Step from the minimum-variance point along Σ⁻¹μ̃, kept on eᵀw = 1, with
    // the step length solved against Σ itself. Near-singular Σ makes the
    // Lagrange form lose the sum constraint to cancellation.
    let n = mu.len();
    let total: f64 = w_mv.iter().sum();
    let w0: Vec<f64> = w_mv.iter().map(|m| m / total).collect();
    let shift = z.sum() / n as f64;
    let d: Vec<f64> = z.iter().map(|zi| zi - shift).collect();
    let q = sigma.quadratic(&d);
    let cross: f64 = (0..n)
        .map(|i| w0[i] * (0..n).map(|j| sigma.get(i, j) * d[j]).sum::<f64>())
        .sum();
    if !(q > 0.0) {
        return Ok(RawSolution {
            weights: w0,
            lambda1: f64::INFINITY,
            lambda2: b / a,
            alternate_profit: None,
            degenerate: true,
            risk_clamped,
        });
    }
    let disc = (cross * cross - q * (sigma.quadratic(&w0) - rho)).max(0.0).sqrt();
    let candidates = [(-cross + disc) / q, (-cross - disc) / q].map(|t| {
        let w: Vec<f64> = w0.iter().zip(&d).map(|(m, di)| m + t * di).collect();
        let lambda1 = 0.5 / t;
        let lambda2 = (b - 2.0 * lambda1) / a;
        let profit = dot(&w, mu);
        (w, lambda1, lambda2, profit)
    });
    let [plus, minus] = candidates;
    let (best, other) = if minus.3 > plus.3 {
        (minus, plus)
    } else {
        (plus, minus)
    };
    Ok(RawSolution {
        weights: best.0,
        lambda1: best.1,
        lambda2: best.2,
        alternate_profit: Some(other.3),
        degenerate: false,
        risk_clamped,
    })
}

/// Solves the risk-constrained profit maximization for one miner.
pub fn solve_max_profit(
    mu: &ProfitVector,
    sigma: &VolatilityMatrix,
    rho: RiskTolerance,
    policy: SolvePolicy,
) -> Result<SolveOutcome> {
    let n = mu.len();
    if sigma.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: sigma.dim(),
        });
    }
    if n < 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            found: n,
        });
    }

    let raw = solve_unclamped(mu.values(), sigma, rho.rho(), policy.risk)?;
    let mut flags = SolveFlags {
        degenerate: raw.degenerate,
        risk_clamped: raw.risk_clamped,
        weights_clamped: false,
    };
    let mut weights = raw.weights;

    if policy.weights == WeightPolicy::ClampWeights && weights.iter().any(|&w| w < 0.0) {
        weights = active_set(mu.values(), sigma, rho.rho(), weights)?;
        flags.weights_clamped = true;
    }

    let allocation = Allocation::from_weights(weights);
    Ok(SolveOutcome {
        expected_profit: dot(allocation.weights(), mu.values()),
        achieved_risk: sigma.quadratic(allocation.weights()),
        allocation,
        lambda1: raw.lambda1,
        lambda2: raw.lambda2,
        alternate_profit: raw.alternate_profit,
        flags,
    })
}

/// Zeroes negative weights and re-solves on the remaining chains until the
/// allocation is non-negative. A single remaining chain takes all weight.
fn active_set(mu: &[f64], sigma: &VolatilityMatrix, rho: f64, first: Vec<f64>) -> Result<Vec<f64>> {
    let n = mu.len();
    let mut active: Vec<usize> = (0..n).collect();
    let mut sub = first;
    loop {
        let kept: Vec<usize> = active
            .iter()
            .zip(&sub)
            .filter(|(_, &w)| w >= 0.0)
            .map(|(&i, _)| i)
            .collect();
        if kept.len() == active.len() {
            break;
        }
        active = kept;
        if active.len() == 1 {
            sub = vec![1.0];
            break;
        }
        let sub_mu: Vec<f64> = active.iter().map(|&i| mu[i]).collect();
        let sub_sigma = sigma.submatrix(&active);
        sub = solve_unclamped(&sub_mu, &sub_sigma, rho, RiskPolicy::ClampRisk)?.weights;
    }
    let mut full = vec![0.0; n];
    for (&i, w) in active.iter().zip(sub) {
        full[i] = w;
    }
    Ok(full)
}

/// Pipeline solve that never fails on a singular matrix.
///
/// When the volatility matrix carries no usable information the miner keeps
/// `fallback` (the previous allocation, or whatever the caller considers the
/// neutral position), flagged as degenerate.
pub fn solve_or_hold(
    mu: &ProfitVector,
    sigma: &VolatilityMatrix,
    rho: RiskTolerance,
    fallback: &Allocation,
) -> Result<SolveOutcome> {
    match solve_max_profit(mu, sigma, rho, SolvePolicy::PIPELINE) {
        Err(Error::SingularVolatility) => Ok(SolveOutcome {
            expected_profit: dot(fallback.weights(), mu.values()),
            achieved_risk: sigma.quadratic(fallback.weights()),
            allocation: fallback.clone(),
            lambda1: 0.0,
            lambda2: 0.0,
            alternate_profit: None,
            flags: SolveFlags {
                degenerate: true,
                ..SolveFlags::default()
            },
        }),
        other => other,
    }
}
