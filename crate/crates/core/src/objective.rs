//! Economic core: the optimal-bid formula, CPA constraint accounting, and the
//! evaluation metrics (conversions, budget utilization, CPA ratio, penalty, score).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::ImpressionOpportunity;

/// Division guard used when a performance sum can be zero.
pub const EPS_DIV: f64 = 1e-9;

/// Ratio reported when money was spent but no performance was realized.
/// Keeps the metric total while penalizing the degenerate case heavily.
pub const SENTINEL_CPA_RATIO: f64 = 10.0;

/// Bidding parameters: `bid = lambda0 * v + sum_j lambdas[j] * p_j * C_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BidParams {
    pub lambda0: f64,
    pub lambdas: Vec<f64>,
}

impl BidParams {
    pub fn new(lambda0: f64, lambdas: Vec<f64>) -> Self {
        Self { lambda0, lambdas }
    }

    /// Single CPA constraint with a fixed value coefficient; the scalar action
    /// drives `lambda1` while `lambda0` stays at its configured value.
    pub fn from_scalar_action(lambda0: f64, action: f64) -> Self {
        Self {
            lambda0,
            lambdas: vec![action.max(0.0)],
        }
    }
}

/// Full-period evaluation of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub conversions: f64,
    pub budget_utilization: f64,
    pub cpa_ratio: f64,
    pub penalty: f64,
    pub score: f64,
}

/// Optimal-bid formula: `lambda0 * v_i + sum_j lambda_j * p_ij * C_j`.
pub fn compute_bid(
    params: &BidParams,
    opp: &ImpressionOpportunity,
    constraints: &[f64],
) -> Result<f64> {
    if params.lambdas.len() != constraints.len() {
        return Err(Error::ConstraintMismatch {
            params: params.lambdas.len(),
            constraints: constraints.len(),
        });
    }
    let mut bid = params.lambda0 * opp.value;
    for (j, (&lambda, &c)) in params.lambdas.iter().zip(constraints).enumerate() {
        let perf = opp.constraint_perf.get(j).copied().unwrap_or(1.0);
        bid += lambda * perf * c;
    }
    Ok(bid.max(0.0))
}

/// Realized-CPA over constraint: `(total_cost / total_perf) / C`.
///
/// Zero realized performance with positive spend yields the sentinel ratio so
/// downstream metrics stay finite.
pub fn cpa_ratio(total_cost: f64, total_perf: f64, c: f64) -> Result<f64> {
    if total_cost < 0.0 || total_perf < 0.0 {
        return Err(Error::InvalidArgument(
            "cpa_ratio: negative cost or performance".into(),
        ));
    }
    if c <= 0.0 {
        return Err(Error::InvalidArgument("cpa_ratio: C must be positive".into()));
    }
    if total_perf <= 0.0 {
        return Ok(if total_cost > 0.0 { SENTINEL_CPA_RATIO } else { 0.0 });
    }
    Ok((total_cost / total_perf.max(EPS_DIV)) / c)
}

/// Constraint penalty: `min{(1/ratio)^2, 1}`; a ratio of 0 maps to 1.
pub fn penalty(cpa_ratio: f64) -> f64 {
    if cpa_ratio <= 1.0 {
        1.0
    } else {
        (1.0 / cpa_ratio).powi(2)
    }
}

/// `score = conversions * penalty(cpa_ratio)`.
pub fn score(conversions: f64, cpa_ratio: f64) -> f64 {
    conversions * penalty(cpa_ratio)
}

/// Episode totals needed to produce a [`MetricReport`].
#[derive(Debug, Clone, Copy, Default)]
pub struct EpisodeTotals {
    pub conversions: f64,
    pub cost: f64,
    pub perf: f64,
}

pub fn evaluate_totals(totals: &EpisodeTotals, c: f64, budget: f64) -> Result<MetricReport> {
    if budget <= 0.0 {
        return Err(Error::InvalidArgument("evaluate: budget must be positive".into()));
    }
    let ratio = cpa_ratio(totals.cost, totals.perf, c)?;
    let pen = penalty(ratio);
    Ok(MetricReport {
        conversions: totals.conversions,
        budget_utilization: (totals.cost / budget).clamp(0.0, 1.0),
        cpa_ratio: ratio,
        penalty: pen,
        score: totals.conversions * pen,
    })
}

impl MetricReport {
    /// Flat CSV row matching [`MetricReport::CSV_HEADER`].
    pub const CSV_HEADER: &'static str =
        "conversions,budget_utilization,cpa_ratio,penalty,score";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.conversions, self.budget_utilization, self.cpa_ratio, self.penalty, self.score
        )
    }
}
