//! Evaluation protocol: episodes run with asynchronous CoT generation
//! (request at t-1, hard deadline at decision time), metric aggregation,
//! parameter sweeps, and the behavior scatter.

use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::act::{ActModel, CotTokens, DecisionSequence, RtgTracker};
use crate::config::{EvalConfig, ThinkConfig};
use crate::error::{Error, Result};
use crate::objective::MetricReport;
use crate::sim::{feature_roster_hash, BidEnv, EpisodeConfig, STATE_DIM};
use crate::think::{
    CotGenerator, CotResponse, Direction, PromptContext, StepIndicators, ThinkScheduler,
    HISTORY_LEN,
};

/// Refuse model checkpoints trained under a different simulator feature
/// roster.
pub fn check_roster(act: &ActModel) -> Result<()> {
    if act.stats.roster_hash != feature_roster_hash() {
        return Err(Error::Checkpoint(
            "model was trained under a different simulator feature roster".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub seed: u64,
    pub report: MetricReport,
    pub cot_misses: usize,
    pub actions: Vec<f64>,
    /// CPA ratio observed at each decision time.
    pub ratios: Vec<f64>,
}

fn override_cot(direction: Direction, vocab: usize, max_len: usize) -> CotTokens {
    CotTokens::from_text(
        &format!("DIRECTION: {}", direction.as_str()),
        direction,
        vocab,
        max_len,
    )
}

/// One evaluation episode under the asynchronous inference procedure: the
/// CoT for step t is requested while step t-1 executes and collected under
/// the deadline; the return-to-go starts at the dataset maximum.
pub fn run_episode(
    act: &ActModel,
    sim_cfg: &EpisodeConfig,
    backend: Arc<dyn CotGenerator>,
    think_cfg: &ThinkConfig,
    eval_cfg: &EvalConfig,
    seed: u64,
) -> Result<EpisodeOutcome> {
    check_roster(act)?;
    let mut cfg = sim_cfg.clone();
    cfg.rng_seed = seed;
    let mut env = BidEnv::new(cfg.clone())?;
    let mut tracker = RtgTracker::init(&act.stats, act.cfg.return_scale, eval_cfg.rtg_w)?;
    let mut scheduler = ThinkScheduler::new(backend, Duration::from_millis(think_cfg.deadline_ms));

    let forced = match eval_cfg.instruction_override.as_str() {
        "INCREASE" => Some(Direction::Increase),
        "DECREASE" => Some(Direction::Decrease),
        _ => None,
    };

    let mut states: Vec<[f64; STATE_DIM]> = Vec::with_capacity(cfg.num_steps);
    let mut actions: Vec<f64> = Vec::with_capacity(cfg.num_steps);
    let mut rtg_values: Vec<f64> = Vec::with_capacity(cfg.num_steps);
    let mut ratios = Vec::with_capacity(cfg.num_steps);
    let mut history: Vec<StepIndicators> = Vec::new();

    let mut state = env.build_state();
    for t in 0..cfg.num_steps {
        states.push(*state.as_slice());
        rtg_values.push(tracker.value);

        let cot = if !eval_cfg.use_cot {
            CotTokens::empty()
        } else if let Some(direction) = forced {
            override_cot(direction, act.cfg.vocab_size, act.cfg.max_cot_len)
        } else if t == 0 {
            // nothing could have been requested before the first step
            CotTokens::empty()
        } else {
            let resp: CotResponse = scheduler.collect(t);
            CotTokens::from_text(&resp.text, resp.direction, act.cfg.vocab_size, act.cfg.max_cot_len)
        };

        let seq = DecisionSequence::from_parts(
            &states,
            &actions,
            &rtg_values,
            t,
            act.cfg.window,
            &act.stats,
            act.cfg.return_scale,
        )?;
        ratios.push(env.current_cpa_ratio());
        let action = act.forward(&cot, &seq)?;

        let spent_before = env.spent();
        let (next, reward) = env.step(action)?;
        actions.push(action);
        tracker.step(reward);

        history.push(StepIndicators {
            t,
            conversions: reward,
            spend: env.spent() - spent_before,
            remaining_budget: (cfg.budget - env.spent()).max(0.0),
            predicted_impression_value: state.feature("mean_impression_value")
                * state.feature("impression_count_forecast"),
            action,
        });
        if history.len() > HISTORY_LEN {
            history.remove(0);
        }

        // run the reasoner ahead of the next decision
        if eval_cfg.use_cot && forced.is_none() && t + 1 < cfg.num_steps {
            let ctx = PromptContext {
                history: history.clone(),
                cumulative_cost: env.spent(),
                cumulative_conversions: env.conversions(),
                constraint: cfg.cpa_constraint,
                t: t + 1,
            };
            scheduler.request(t + 1, ctx, seed.wrapping_add(t as u64 + 1));
        }
        state = next;
    }

    let report = crate::objective::evaluate_totals(&env.totals(), cfg.cpa_constraint, cfg.budget)?;
    Ok(EpisodeOutcome {
        seed,
        report,
        cot_misses: scheduler.misses(),
        actions,
        ratios,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: Vec<EpisodeOutcome>,
    pub mean_conversions: f64,
    pub mean_score: f64,
    pub mean_cpa_ratio: f64,
    pub mean_budget_utilization: f64,
    pub total_cot_misses: usize,
}

/// Parallel evaluation over `episodes` consecutive seeds; results ordered by
/// seed.
pub fn evaluate(
    act: &ActModel,
    sim_cfg: &EpisodeConfig,
    backend: Arc<dyn CotGenerator>,
    think_cfg: &ThinkConfig,
    eval_cfg: &EvalConfig,
) -> Result<EvalSummary> {
    check_roster(act)?;
    let outcomes: Vec<Result<EpisodeOutcome>> = (0..eval_cfg.episodes as u64)
        .into_par_iter()
        .map(|i| {
            run_episode(
                act,
                sim_cfg,
                Arc::clone(&backend),
                think_cfg,
                eval_cfg,
                eval_cfg.seed.wrapping_add(i),
            )
        })
        .collect();
    let mut episodes = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        episodes.push(o?);
    }
    episodes.sort_by_key(|e| e.seed);
    let n = episodes.len() as f64;
    let mean = |f: &dyn Fn(&EpisodeOutcome) -> f64| episodes.iter().map(|e| f(e)).sum::<f64>() / n;
    Ok(EvalSummary {
        mean_conversions: mean(&|e| e.report.conversions),
        mean_score: mean(&|e| e.report.score),
        mean_cpa_ratio: mean(&|e| e.report.cpa_ratio),
        mean_budget_utilization: mean(&|e| e.report.budget_utilization),
        total_cot_misses: episodes.iter().map(|e| e.cot_misses).sum(),
        episodes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    BudgetRatio,
    RtgWeightW,
    InstructionOverride,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    /// Cell values; numeric axes parse them as floats.
    pub values: Vec<String>,
    pub episodes_per_cell: usize,
    pub seed: u64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("sweep needs at least one value".into()));
        }
        match self.axis {
            SweepAxis::BudgetRatio | SweepAxis::RtgWeightW => {
                for v in &self.values {
                    let x: f64 = v
                        .parse()
                        .map_err(|_| Error::Config(format!("non-numeric sweep value '{v}'")))?;
                    if self.axis == SweepAxis::BudgetRatio && x <= 0.0 {
                        return Err(Error::Config("budget_ratio must be > 0".into()));
                    }
                }
            }
            SweepAxis::InstructionOverride => {
                for v in &self.values {
                    if !matches!(v.as_str(), "INCREASE" | "DECREASE" | "base") {
                        return Err(Error::Config(format!("bad override cell '{v}'")));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub episodes: usize,
    pub mean_conversions: f64,
    pub mean_score: f64,
    pub mean_cpa_ratio: f64,
    pub mean_budget_utilization: f64,
    /// Mean of per-step action deltas, used by the instruction experiment.
    pub mean_action_delta: f64,
}

pub const SWEEP_CSV_HEADER: &str =
    "axis,value,episodes,mean_conversions,mean_score,mean_cpa_ratio,mean_budget_utilization,mean_action_delta";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.axis,
            r.value,
            r.episodes,
            r.mean_conversions,
            r.mean_score,
            r.mean_cpa_ratio,
            r.mean_budget_utilization,
            r.mean_action_delta
        ));
    }
    out
}

fn mean_action_delta(episodes: &[EpisodeOutcome]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for e in episodes {
        for w in e.actions.windows(2) {
            sum += w[1] - w[0];
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// One evaluation per cell; cells ordered as given, episodes ordered by seed
/// within each cell.
pub fn run_sweep(
    act: &ActModel,
    sim_cfg: &EpisodeConfig,
    backend: Arc<dyn CotGenerator>,
    think_cfg: &ThinkConfig,
    eval_base: &EvalConfig,
    spec: &SweepSpec,
) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let mut rows = Vec::with_capacity(spec.values.len());
    for value in &spec.values {
        let mut sim = sim_cfg.clone();
        let mut eval_cfg = eval_base.clone();
        eval_cfg.episodes = spec.episodes_per_cell;
        eval_cfg.seed = spec.seed;
        let axis_name = match spec.axis {
            SweepAxis::BudgetRatio => {
                sim.budget = sim_cfg.budget * value.parse::<f64>().unwrap();
                "budget_ratio"
            }
            SweepAxis::RtgWeightW => {
                eval_cfg.rtg_w = value.parse::<f64>().unwrap();
                "rtg_weight_w"
            }
            SweepAxis::InstructionOverride => {
                eval_cfg.instruction_override =
                    if value == "base" { String::new() } else { value.clone() };
                "instruction_override"
            }
        };
        let summary = evaluate(act, &sim, Arc::clone(&backend), think_cfg, &eval_cfg)?;
        rows.push(SweepRow {
            axis: axis_name.to_string(),
            value: value.clone(),
            episodes: summary.episodes.len(),
            mean_conversions: summary.mean_conversions,
            mean_score: summary.mean_score,
            mean_cpa_ratio: summary.mean_cpa_ratio,
            mean_budget_utilization: summary.mean_budget_utilization,
            mean_action_delta: mean_action_delta(&summary.episodes),
        });
    }
    Ok(rows)
}

pub const SCATTER_CSV_HEADER: &str = "cpa_ratio,action_delta";

/// (CPA ratio at decision time, action delta) pairs collected from evaluation
/// episodes until `samples` points exist.
pub fn behavior_scatter(
    act: &ActModel,
    sim_cfg: &EpisodeConfig,
    backend: Arc<dyn CotGenerator>,
    think_cfg: &ThinkConfig,
    eval_cfg: &EvalConfig,
    samples: usize,
) -> Result<Vec<(f64, f64)>> {
    let mut points = Vec::with_capacity(samples);
    let mut seed = eval_cfg.seed;
    while points.len() < samples {
        let outcome =
            run_episode(act, sim_cfg, Arc::clone(&backend), think_cfg, eval_cfg, seed)?;
        for t in 1..outcome.actions.len() {
            points.push((outcome.ratios[t], outcome.actions[t] - outcome.actions[t - 1]));
            if points.len() == samples {
                break;
            }
        }
        seed = seed.wrapping_add(1);
    }
    Ok(points)
}

pub fn scatter_csv(points: &[(f64, f64)]) -> String {
    let mut out = String::from(SCATTER_CSV_HEADER);
    out.push('\n');
    for (r, d) in points {
        out.push_str(&format!("{r:.6},{d:.6}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::act::{assemble_samples, train_act, ActModelConfig};
    use crate::dataset::{generate_trajectories, DatasetStats};
    use crate::nn::optim::AdamWConfig;
    use crate::think::ThinkBackend;

    fn sim_cfg() -> EpisodeConfig {
        EpisodeConfig {
            num_steps: 6,
            impressions_per_step: 30,
            budget: 150.0,
            rng_seed: 21,
            ..Default::default()
        }
    }

    fn tiny_model() -> ActModel {
        let trajs = generate_trajectories(
            &sim_cfg(),
            &["random-walk".into(), "constraint-aware".into()],
            3,
        )
        .unwrap();
        let stats = DatasetStats::compute(&trajs).unwrap();
        let cfg = ActModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            window: 3,
            max_cot_len: 16,
            decision_mlp_widths: vec![16, 16],
            action_head_widths: vec![16, 1],
            return_scale: 100.0,
            ..Default::default()
        };
        let mut model = ActModel::new(cfg.clone(), stats.clone(), 8).unwrap();
        let samples = assemble_samples(&trajs, &[], &cfg, &stats, 0.0).unwrap();
        train_act(&mut model, &samples, 10, 4, &AdamWConfig::with_lr(1e-3), 0).unwrap();
        model
    }

    #[test]
    fn episode_completes_with_scripted_oracle_and_no_misses() {
        let act = tiny_model();
        let outcome = run_episode(
            &act,
            &sim_cfg(),
            Arc::new(ThinkBackend::ScriptedOracle),
            &ThinkConfig::default(),
            &EvalConfig::default(),
            3,
        )
        .unwrap();
        assert_eq!(outcome.actions.len(), 6);
        assert_eq!(outcome.cot_misses, 0);
        assert!(outcome.report.budget_utilization <= 1.0);
    }

    #[test]
    fn evaluate_is_deterministic_and_ordered() {
        let act = tiny_model();
        let eval_cfg = EvalConfig { episodes: 4, seed: 5, ..Default::default() };
        let a = evaluate(
            &act,
            &sim_cfg(),
            Arc::new(ThinkBackend::ScriptedOracle),
            &ThinkConfig::default(),
            &eval_cfg,
        )
        .unwrap();
        let b = evaluate(
            &act,
            &sim_cfg(),
            Arc::new(ThinkBackend::ScriptedOracle),
            &ThinkConfig::default(),
            &eval_cfg,
        )
        .unwrap();
        assert_eq!(a, b);
        let seeds: Vec<u64> = a.episodes.iter().map(|e| e.seed).collect();
        assert_eq!(seeds, vec![5, 6, 7, 8]);
    }

    #[test]
    fn roster_mismatch_refused() {
        let mut act = tiny_model();
        act.stats.roster_hash = "deadbeef".into();
        let err = run_episode(
            &act,
            &sim_cfg(),
            Arc::new(ThinkBackend::ScriptedOracle),
            &ThinkConfig::default(),
            &EvalConfig::default(),
            0,
        );
        assert!(err.is_err());
    }

    #[test]
    fn dead_remote_backend_all_misses_episode_still_completes() {
        let act = tiny_model();
        let backend = ThinkBackend::RemoteChat(crate::think::RemoteChatConfig {
            endpoint: "http://127.0.0.1:1/unreachable".into(),
            timeout_ms: 10,
            max_retries: 0,
            ..Default::default()
        });
        let think_cfg = ThinkConfig { deadline_ms: 30, ..Default::default() };
        let outcome = run_episode(
            &act,
            &sim_cfg(),
            Arc::new(backend),
            &think_cfg,
            &EvalConfig::default(),
            7,
        )
        .unwrap();
        assert_eq!(outcome.actions.len(), 6);
        // a CoT was requested for every step but the first
        assert_eq!(outcome.cot_misses, 5);
    }

    #[test]
    fn sweep_shapes_and_csv() {
        let act = tiny_model();
        let spec = SweepSpec {
            axis: SweepAxis::BudgetRatio,
            values: vec!["0.5".into(), "1.0".into(), "1.5".into()],
            episodes_per_cell: 2,
            seed: 0,
        };
        let rows = run_sweep(
            &act,
            &sim_cfg(),
            Arc::new(ThinkBackend::ScriptedOracle),
            &ThinkConfig::default(),
            &EvalConfig::default(),
            &spec,
        )
        .unwrap();
        assert_eq!(rows.len(), 3);
        let csv = sweep_csv(&rows);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("axis,value"));
    }

    #[test]
    fn bad_sweep_specs_rejected() {
        let base = SweepSpec {
            axis: SweepAxis::BudgetRatio,
            values: vec![],
            episodes_per_cell: 1,
            seed: 0,
        };
        assert!(base.validate().is_err());
        let neg = SweepSpec { values: vec!["-1".into()], ..base.clone() };
        assert!(neg.validate().is_err());
        let bad = SweepSpec {
            axis: SweepAxis::InstructionOverride,
            values: vec!["HOLD".into()],
            episodes_per_cell: 1,
            seed: 0,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn scatter_count() {
        let act = tiny_model();
        let points = behavior_scatter(
            &act,
            &sim_cfg(),
            Arc::new(ThinkBackend::ScriptedOracle),
            &ThinkConfig::default(),
            &EvalConfig::default(),
            12,
        )
        .unwrap();
        assert_eq!(points.len(), 12);
        assert_eq!(scatter_csv(&points).lines().count(), 13);
    }
}
