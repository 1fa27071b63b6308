//! Synthetic ad-auction environment: impression streams, second-price auction
//! resolution, budget/CPA accounting, and offline trajectory generation.

pub mod policies;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{self, BidParams};

/// One impression opportunity arriving at auction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpressionOpportunity {
    /// Predicted conversion value, in [0, 1].
    pub value: f64,
    /// Bids of competing advertisers; non-empty, all >= 0.
    pub competitor_bids: Vec<f64>,
    /// Per-constraint performance indicators p_j; defaults to the constant 1.
    pub constraint_perf: Vec<f64>,
}

impl ImpressionOpportunity {
    pub fn validate(&self) -> Result<()> {
        if self.competitor_bids.is_empty() {
            return Err(Error::InvalidOpportunity("empty competitor bid list".into()));
        }
        if self.competitor_bids.iter().any(|&b| b < 0.0 || !b.is_finite()) {
            return Err(Error::InvalidOpportunity("negative or non-finite competitor bid".into()));
        }
        if !(0.0..=1.0).contains(&self.value) {
            return Err(Error::InvalidOpportunity(format!(
                "value {} outside [0,1]",
                self.value
            )));
        }
        Ok(())
    }
}

/// Result of one auction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuctionOutcome {
    pub won: bool,
    pub cost: f64,
    pub conversion_value: f64,
}

impl AuctionOutcome {
    pub const LOST: AuctionOutcome = AuctionOutcome { won: false, cost: 0.0, conversion_value: 0.0 };
}

/// Second-price auction with strict-inequality win rule: ties lose.
///
/// In sparse mode the conversion is a Bernoulli draw on the predicted value;
/// in dense mode it is the expected value itself.
pub fn run_auction(
    bid: f64,
    opp: &ImpressionOpportunity,
    sparse_mode: bool,
    rng: &mut impl Rng,
) -> Result<AuctionOutcome> {
    opp.validate()?;
    if bid < 0.0 {
        return Err(Error::InvalidArgument("bid must be non-negative".into()));
    }
    let top = opp
        .competitor_bids
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if bid <= top {
        return Ok(AuctionOutcome::LOST);
    }
    let conversion_value = if sparse_mode {
        if rng.gen::<f64>() < opp.value { 1.0 } else { 0.0 }
    } else {
        opp.value
    };
    Ok(AuctionOutcome { won: true, cost: top, conversion_value })
}

/// Competitor bid model: log-normal draws whose scale drifts sinusoidally
/// across the period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompetitorModel {
    pub num_competitors: usize,
    /// Median of the log-normal bid distribution at drift phase zero.
    pub base_scale: f64,
    pub sigma: f64,
    /// Amplitude of the sinusoidal drift applied to the log-median.
    pub drift_amplitude: f64,
}

impl Default for CompetitorModel {
    fn default() -> Self {
        Self { num_competitors: 5, base_scale: 2.5, sigma: 0.45, drift_amplitude: 0.35 }
    }
}

/// Per-episode configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub budget: f64,
    pub cpa_constraint: f64,
    pub num_steps: usize,
    pub impressions_per_step: usize,
    pub sparse_mode: bool,
    pub rng_seed: u64,
    /// Fixed value coefficient in the bid formula; the scalar action drives lambda1.
    pub lambda0: f64,
    pub action_min: f64,
    pub action_max: f64,
    pub competitors: CompetitorModel,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            budget: 12_000.0,
            cpa_constraint: 6.0,
            num_steps: 48,
            impressions_per_step: 1000,
            sparse_mode: false,
            rng_seed: 0,
            lambda0: 1.0,
            action_min: 0.0,
            action_max: 10.0,
            competitors: CompetitorModel::default(),
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget <= 0.0 {
            return Err(Error::Config("budget must be positive".into()));
        }
        if self.cpa_constraint <= 0.0 {
            return Err(Error::Config("cpa_constraint must be positive".into()));
        }
        if self.num_steps < 1 {
            return Err(Error::Config("num_steps must be >= 1".into()));
        }
        if self.action_max <= self.action_min {
            return Err(Error::Config("action_max must exceed action_min".into()));
        }
        Ok(())
    }
}

pub const STATE_DIM: usize = 16;

/// Frozen feature roster; datasets and model checkpoints carry a hash of it.
pub const FEATURE_NAMES: [&str; STATE_DIM] = [
    "time_left",
    "budget_left",
    "budget_consumption_speed",
    "current_cpa_ratio",
    "cumulative_conversions",
    "cumulative_cost",
    "last_action",
    "mean_impression_value",
    "impression_count_forecast",
    "win_rate_recent",
    "recent_cost_per_win",
    "recent_reward",
    "recent_bid_mean",
    "recent_value_std",
    "cpa_trend",
    "competitor_intensity",
];

pub fn feature_roster_hash() -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(FEATURE_NAMES.join(",").as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// The 16-feature interval state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeState(pub [f64; STATE_DIM]);

impl EpisodeState {
    pub fn feature(&self, name: &str) -> f64 {
        let idx = FEATURE_NAMES.iter().position(|&n| n == name).expect("unknown feature");
        self.0[idx]
    }

    pub fn as_slice(&self) -> &[f64; STATE_DIM] {
        &self.0
    }
}

/// Metadata attached to a generated trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub budget: f64,
    pub cpa_constraint: f64,
    pub seed: u64,
    pub behavior_policy: String,
    pub action_min: f64,
    pub action_max: f64,
    pub sparse_mode: bool,
    pub roster_hash: String,
}

/// One full episode of (state, action, reward, return-to-go) at T steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: u64,
    pub states: Vec<[f64; STATE_DIM]>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    /// Spend per interval; keeps CPA accounting reconstructible per suffix.
    pub costs: Vec<f64>,
    pub returns_to_go: Vec<f64>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.states.len();
        if self.actions.len() != t
            || self.rewards.len() != t
            || self.costs.len() != t
            || self.returns_to_go.len() != t
        {
            return Err(Error::Dataset("inconsistent trajectory lengths".into()));
        }
        Ok(())
    }

    /// Total conversions over the episode.
    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Plain suffix-sum returns-to-go.
pub fn returns_to_go(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, &r) in rewards.iter().enumerate().rev() {
        acc += r;
        out[i] = acc;
    }
    out
}

#[derive(Debug, Clone, Copy, Default)]
struct IntervalStats {
    impressions: usize,
    wins: usize,
    cost: f64,
    reward: f64,
    bid_sum: f64,
    value_sum: f64,
    value_sq_sum: f64,
    top_competitor_sum: f64,
}

/// Single-episode auction environment. One instance is single-threaded;
/// distinct episodes are independent.
pub struct BidEnv {
    cfg: EpisodeConfig,
    rng: ChaCha8Rng,
    t: usize,
    spent: f64,
    conversions: f64,
    last_action: f64,
    last_action_clamped: bool,
    prev_cpa_ratio: f64,
    last_interval: IntervalStats,
    terminated: bool,
}

impl BidEnv {
    pub fn new(cfg: EpisodeConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        Ok(Self {
            cfg,
            rng,
            t: 0,
            spent: 0.0,
            conversions: 0.0,
            last_action: 0.0,
            last_action_clamped: false,
            prev_cpa_ratio: 0.0,
            last_interval: IntervalStats::default(),
            terminated: false,
        })
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.cfg
    }

    pub fn step_index(&self) -> usize {
        self.t
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    pub fn spent(&self) -> f64 {
        self.spent
    }

    pub fn conversions(&self) -> f64 {
        self.conversions
    }

    pub fn last_action_clamped(&self) -> bool {
        self.last_action_clamped
    }

    pub fn current_cpa_ratio(&self) -> f64 {
        objective::cpa_ratio(self.spent, self.conversions, self.cfg.cpa_constraint)
            .unwrap_or(objective::SENTINEL_CPA_RATIO)
    }

    fn sample_opportunity(&mut self) -> ImpressionOpportunity {
        let m = &self.cfg.competitors;
        let phase = 2.0 * std::f64::consts::PI * self.t as f64 / self.cfg.num_steps as f64;
        let mu = m.base_scale.ln() + m.drift_amplitude * phase.sin();
        let value: f64 = self.rng.gen();
        let competitor_bids = (0..m.num_competitors.max(1))
            .map(|_| {
                // Box-Muller standard normal
                let u1: f64 = self.rng.gen::<f64>().max(1e-12);
                let u2: f64 = self.rng.gen();
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                (mu + m.sigma * z).exp()
            })
            .collect();
        ImpressionOpportunity { value, competitor_bids, constraint_perf: vec![value] }
    }

    /// Advance one interval under the given bidding-parameter action.
    ///
    /// Bidding halts for the remainder of the interval once the remaining
    /// budget can no longer cover a marginal win, so total spend never
    /// exceeds the budget.
    pub fn step(&mut self, action: f64) -> Result<(EpisodeState, f64)> {
        if self.terminated {
            return Err(Error::EpisodeFinished);
        }
        if !action.is_finite() {
            return Err(Error::InvalidArgument("action must be finite".into()));
        }
        let clamped = action.clamp(self.cfg.action_min, self.cfg.action_max);
        self.last_action_clamped = clamped != action;
        let params = BidParams::from_scalar_action(self.cfg.lambda0, clamped);
        let constraints = [self.cfg.cpa_constraint];

        let mut stats = IntervalStats::default();
        let mut halted = false;
        for _ in 0..self.cfg.impressions_per_step {
            let opp = self.sample_opportunity();
            stats.impressions += 1;
            stats.value_sum += opp.value;
            stats.value_sq_sum += opp.value * opp.value;
            let top = opp.competitor_bids.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            stats.top_competitor_sum += top;
            if halted {
                continue;
            }
            let bid = objective::compute_bid(&params, &opp, &constraints)?;
            if bid > self.cfg.budget - self.spent {
                // A win could cost up to the bid; stop bidding this interval.
                halted = true;
                continue;
            }
            stats.bid_sum += bid;
            let out = run_auction(bid, &opp, self.cfg.sparse_mode, &mut self.rng)?;
            if out.won {
                debug_assert!(out.cost <= bid);
                stats.wins += 1;
                stats.cost += out.cost;
                stats.reward += out.conversion_value;
                self.spent += out.cost;
                self.conversions += out.conversion_value;
            }
        }

        self.prev_cpa_ratio = self.current_cpa_ratio();
        self.last_action = clamped;
        self.last_interval = stats;
        self.t += 1;
        if self.t >= self.cfg.num_steps {
            self.terminated = true;
        }
        let reward = stats.reward;
        Ok((self.build_state_inner(), reward))
    }

    /// Deterministic snapshot of the 16-feature state.
    pub fn build_state(&self) -> EpisodeState {
        self.build_state_inner()
    }

    fn build_state_inner(&self) -> EpisodeState {
        let cfg = &self.cfg;
        let s = &self.last_interval;
        let time_left = 1.0 - self.t as f64 / cfg.num_steps as f64;
        let budget_left = ((cfg.budget - self.spent) / cfg.budget).clamp(0.0, 1.0);
        let uniform_interval_budget = cfg.budget / cfg.num_steps as f64;
        let speed = (s.cost / uniform_interval_budget).clamp(0.0, 10.0);
        let ratio = self.current_cpa_ratio().clamp(0.0, objective::SENTINEL_CPA_RATIO);
        let n = s.impressions.max(1) as f64;
        let mean_value = s.value_sum / n;
        let var = (s.value_sq_sum / n - mean_value * mean_value).max(0.0);
        let win_rate = s.wins as f64 / n;
        let cost_per_win = if s.wins > 0 { s.cost / s.wins as f64 } else { 0.0 };
        let bid_mean = if s.impressions > 0 { s.bid_sum / n } else { 0.0 };
        let trend = (ratio - self.prev_cpa_ratio).clamp(-5.0, 5.0);
        EpisodeState([
            time_left,
            budget_left,
            speed,
            ratio,
            self.conversions,
            self.spent,
            self.last_action,
            mean_value,
            cfg.impressions_per_step as f64,
            win_rate,
            cost_per_win,
            s.reward,
            bid_mean,
            var.sqrt(),
            trend,
            s.top_competitor_sum / n,
        ])
    }

    /// Episode totals for metric evaluation.
    pub fn totals(&self) -> objective::EpisodeTotals {
        objective::EpisodeTotals {
            conversions: self.conversions,
            cost: self.spent,
            perf: self.conversions,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opp(value: f64, bids: &[f64]) -> ImpressionOpportunity {
        ImpressionOpportunity {
            value,
            competitor_bids: bids.to_vec(),
            constraint_perf: vec![1.0],
        }
    }

    #[test]
    fn second_price_win() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = run_auction(0.5, &opp(0.9, &[0.3, 0.4]), false, &mut rng).unwrap();
        assert!(out.won);
        assert_eq!(out.cost, 0.4);
        assert_eq!(out.conversion_value, 0.9);
    }

    #[test]
    fn ties_lose() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = run_auction(0.4, &opp(0.9, &[0.3, 0.4]), false, &mut rng).unwrap();
        assert!(!out.won);
        assert_eq!(out.cost, 0.0);
        assert_eq!(out.conversion_value, 0.0);
    }

    #[test]
    fn zero_bid_loses() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = run_auction(0.0, &opp(0.9, &[0.1]), false, &mut rng).unwrap();
        assert!(!out.won);
    }

    #[test]
    fn empty_competitors_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = ImpressionOpportunity {
            value: 0.5,
            competitor_bids: vec![],
            constraint_perf: vec![1.0],
        };
        assert!(run_auction(0.5, &bad, false, &mut rng).is_err());
    }

    #[test]
    fn sparse_mode_is_binary() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let out = run_auction(1.0, &opp(0.5, &[0.2]), true, &mut rng).unwrap();
            assert!(out.conversion_value == 0.0 || out.conversion_value == 1.0);
        }
    }

    #[test]
    fn sparse_dense_consistency() {
        // Expected sparse reward converges to the dense reward within 3 sigma.
        let value = 0.37;
        let n = 20_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut total = 0.0;
        for _ in 0..n {
            total += run_auction(1.0, &opp(value, &[0.2]), true, &mut rng)
                .unwrap()
                .conversion_value;
        }
        let mean = total / n as f64;
        let sigma = (value * (1.0 - value) / n as f64).sqrt();
        assert!((mean - value).abs() < 3.0 * sigma, "mean {mean} vs {value}");
    }

    #[test]
    fn fresh_state() {
        let env = BidEnv::new(EpisodeConfig::default()).unwrap();
        let s = env.build_state();
        assert_eq!(s.feature("time_left"), 1.0);
        assert_eq!(s.feature("budget_left"), 1.0);
        assert_eq!(s.feature("cumulative_conversions"), 0.0);
    }

    #[test]
    fn step_terminated_errors() {
        let cfg = EpisodeConfig { num_steps: 1, impressions_per_step: 10, ..Default::default() };
        let mut env = BidEnv::new(cfg).unwrap();
        env.step(1.0).unwrap();
        assert!(matches!(env.step(1.0), Err(Error::EpisodeFinished)));
    }

    #[test]
    fn zero_action_zero_reward_with_zero_lambda0() {
        let cfg = EpisodeConfig { lambda0: 0.0, impressions_per_step: 50, ..Default::default() };
        let mut env = BidEnv::new(cfg).unwrap();
        let (_, reward) = env.step(0.0).unwrap();
        assert_eq!(reward, 0.0);
        assert_eq!(env.spent(), 0.0);
    }

    #[test]
    fn exhausted_budget_wins_nothing() {
        let cfg = EpisodeConfig { budget: 1e-6, impressions_per_step: 100, ..Default::default() };
        let mut env = BidEnv::new(cfg).unwrap();
        let (_, reward) = env.step(10.0).unwrap();
        // Any bid above the residual budget halts the interval.
        assert_eq!(reward, 0.0);
        assert!(env.spent() <= 1e-6);
    }

    #[test]
    fn budget_conservation_and_cost_le_bid() {
        for seed in 0..20 {
            let cfg = EpisodeConfig {
                budget: 50.0,
                impressions_per_step: 200,
                rng_seed: seed,
                ..Default::default()
            };
            let mut env = BidEnv::new(cfg.clone()).unwrap();
            while !env.is_terminated() {
                env.step(5.0).unwrap();
            }
            assert!(env.spent() <= cfg.budget + 1e-9, "seed {seed}: overspent");
        }
    }

    #[test]
    fn determinism() {
        let run = || {
            let cfg = EpisodeConfig { rng_seed: 42, impressions_per_step: 100, ..Default::default() };
            let mut env = BidEnv::new(cfg).unwrap();
            let mut log = Vec::new();
            let mut a = 1.0;
            while !env.is_terminated() {
                let (s, r) = env.step(a).unwrap();
                log.push((s, r));
                a = (a + 0.1).min(3.0);
            }
            log
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn cpa_ratio_by_hand() {
        // cost 12, conversions 1, C 6 -> ratio 2
        let r = objective::cpa_ratio(12.0, 1.0, 6.0).unwrap();
        assert!((r - 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_impression_hand_trace() {
        // Deterministic competitors at exactly 0.5; bid = lambda0 * v with
        // lambda0 large enough to win whenever v > 0.05.
        let cfg = EpisodeConfig {
            impressions_per_step: 1,
            lambda0: 10.0,
            competitors: CompetitorModel {
                num_competitors: 3,
                base_scale: 0.5,
                sigma: 0.0,
                drift_amplitude: 0.0,
            },
            rng_seed: 5,
            ..Default::default()
        };
        let mut env = BidEnv::new(cfg).unwrap();
        let (state, reward) = env.step(0.0).unwrap();
        let v = state.feature("mean_impression_value");
        if reward > 0.0 {
            assert!((reward - v).abs() < 1e-12);
            assert!((env.spent() - 0.5).abs() < 1e-12);
        } else {
            assert_eq!(env.spent(), 0.0);
        }
    }

    #[test]
    fn returns_to_go_suffix_sums() {
        assert_eq!(returns_to_go(&[1.0, 2.0, 3.0]), vec![6.0, 5.0, 3.0]);
    }

    #[test]
    fn auction_dominance() {
        // Raising the bid never flips a win to a loss.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let o = opp(rng.gen(), &[rng.gen::<f64>() * 2.0, rng.gen::<f64>() * 2.0]);
            let low: f64 = rng.gen::<f64>() * 2.0;
            let high = low + rng.gen::<f64>();
            let w_low = run_auction(low, &o, false, &mut rng.clone()).unwrap().won;
            let w_high = run_auction(high, &o, false, &mut rng.clone()).unwrap().won;
            assert!(!w_low || w_high);
        }
    }
}
