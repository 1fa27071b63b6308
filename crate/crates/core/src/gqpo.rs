//! Fine-tuning data construction: sample CoT groups per state, score each by
//! relative-Q through the decision model and the learned critic, keep the
//! argmax under the positivity constraint, and export the result as a
//! weighted SFT dataset.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::act::{ActModel, CotTokens, DecisionSequence};
use crate::error::{Error, Result};
use crate::iql::IqlModel;
use crate::sim::Trajectory;
use crate::think::{build_prompt, CotGenerator, CotResponse, Direction, PromptContext, StepIndicators, HISTORY_LEN};

pub const SFT_FORMAT_VERSION: &str = "gqpo-sft-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GqpoConfig {
    /// Group size N.
    pub group_size: usize,
    /// Weight exponent: weight = exp(beta * delta_q).
    pub beta: f64,
    pub target_samples: usize,
    pub seed: u64,
    /// Training-time return-to-go reweight used when windows are rebuilt.
    pub rtg_w: f64,
}

impl Default for GqpoConfig {
    fn default() -> Self {
        Self { group_size: 3, beta: 1.0, target_samples: 2000, seed: 0, rtg_w: 0.0 }
    }
}

impl GqpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be >= 2".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::Config("beta must be >= 0".into()));
        }
        Ok(())
    }
}

/// One exported SFT sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GqpoRecord {
    pub prompt: String,
    pub response: String,
    pub delta_q: f64,
    pub weight: f64,
    pub trajectory_id: u64,
    pub t: usize,
    /// All ΔQ values of the (deduplicated) group.
    pub group_delta_q: Vec<f64>,
    /// Group entries whose ΔQ was not positive.
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GqpoReport {
    pub groups_evaluated: usize,
    pub accepted: usize,
    pub acceptance_rate: f64,
    pub mean_delta_q_accepted: f64,
    pub direction_counts: [usize; 3], // INCREASE, DECREASE, NONE among chosen
    pub delta_q_histogram: Vec<(f64, usize)>,
    pub backend_failures: usize,
}

/// Critic interface: Q at a dataset position, for an arbitrary action.
pub trait Critic {
    fn q(&self, traj: &Trajectory, t: usize, action: f64) -> Result<f64>;
}

impl Critic for IqlModel {
    fn q(&self, traj: &Trajectory, t: usize, action: f64) -> Result<f64> {
        let lo = (t + 1).saturating_sub(self.cfg.seq_len);
        let (v, _ood) = self.q_value(&traj.states[lo..=t], &traj.actions[lo..t], action)?;
        Ok(v)
    }
}

/// Action produced from a dataset position under a candidate CoT.
pub trait CotConditionedPolicy {
    fn act(&self, traj: &Trajectory, t: usize, cot: &CotResponse) -> Result<f64>;
}

impl CotConditionedPolicy for ActModel {
    fn act(&self, traj: &Trajectory, t: usize, cot: &CotResponse) -> Result<f64> {
        let rtg = crate::act::rtg_reweight(traj, 0.0)?;
        let seq = DecisionSequence::build(
            traj,
            &rtg,
            t,
            self.cfg.window,
            &self.stats,
            self.cfg.return_scale,
        )?;
        let tokens = CotTokens::from_text(
            &cot.text,
            cot.direction,
            self.cfg.vocab_size,
            self.cfg.max_cot_len,
        );
        self.forward(&tokens, &seq)
    }
}

/// ΔQ = Q(s, ã) − Q(s, a): positive when the CoT-conditioned action improves
/// on the logged one per the critic.
pub fn relative_q(
    critic: &dyn Critic,
    traj: &Trajectory,
    t: usize,
    cot_action: f64,
    dataset_action: f64,
) -> Result<f64> {
    Ok(critic.q(traj, t, cot_action)? - critic.q(traj, t, dataset_action)?)
}

/// Index of the largest strictly-positive ΔQ; `None` is REJECT-ALL. Ties go
/// to the lowest index.
pub fn select_best(delta_qs: &[f64]) -> Result<Option<usize>> {
    if delta_qs.is_empty() {
        return Err(Error::InvalidArgument("empty group".into()));
    }
    let mut best: Option<usize> = None;
    for (i, &dq) in delta_qs.iter().enumerate() {
        if dq > 0.0 && best.map_or(true, |b| dq > delta_qs[b]) {
            best = Some(i);
        }
    }
    Ok(best)
}

/// Reconstruct the reasoning context for (trajectory, t); needs t >= 1 so a
/// non-empty history exists.
pub fn prompt_context(traj: &Trajectory, t: usize) -> Result<PromptContext> {
    if t == 0 || t >= traj.len() {
        return Err(Error::InvalidArgument("prompt context needs 1 <= t < T".into()));
    }
    let lo = t.saturating_sub(HISTORY_LEN);
    let history = (lo..t)
        .map(|i| StepIndicators {
            t: i,
            conversions: traj.rewards[i],
            spend: traj.costs[i],
            remaining_budget: (traj.meta.budget - traj.states[i][5] - traj.costs[i]).max(0.0),
            predicted_impression_value: traj.states[i][7] * traj.states[i][8],
            action: traj.actions[i],
        })
        .collect();
    Ok(PromptContext {
        history,
        cumulative_cost: traj.states[t][5],
        cumulative_conversions: traj.states[t][4],
        constraint: traj.meta.cpa_constraint,
        t,
    })
}

/// Sample (trajectory, t) pairs uniformly without replacement, build a CoT
/// group per pair, score by relative-Q, and keep the per-group argmax until
/// the target count is reached or pairs run out.
pub fn run_pipeline(
    trajs: &[Trajectory],
    policy: &dyn CotConditionedPolicy,
    critic: &dyn Critic,
    backend: &dyn CotGenerator,
    cfg: &GqpoConfig,
) -> Result<(Vec<GqpoRecord>, GqpoReport)> {
    cfg.validate()?;
    let mut pairs: Vec<(usize, usize)> = trajs
        .iter()
        .enumerate()
        .flat_map(|(i, traj)| (1..traj.len()).map(move |t| (i, t)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    pairs.shuffle(&mut rng);

    let mut records = Vec::new();
    let mut groups_evaluated = 0usize;
    let mut backend_failures = 0usize;
    let mut direction_counts = [0usize; 3];
    for (ti, t) in pairs {
        if records.len() >= cfg.target_samples {
            break;
        }
        let traj = &trajs[ti];
        let ctx = prompt_context(traj, t)?;
        let seed = cfg
            .seed
            .wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add(traj.id.wrapping_mul(10_007).wrapping_add(t as u64));
        let cots = match backend.generate(&ctx, cfg.group_size, seed) {
            Ok(c) => c,
            Err(Error::BackendUnavailable(_)) => {
                // preserve partial output rather than aborting the run
                backend_failures += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        groups_evaluated += 1;
        // duplicate CoT texts carry identical ΔQ; collapse before selection
        let mut unique: Vec<&CotResponse> = Vec::new();
        for c in &cots {
            if !unique.iter().any(|u| u.text == c.text) {
                unique.push(c);
            }
        }
        let dataset_action = traj.actions[t];
        let mut delta_qs = Vec::with_capacity(unique.len());
        for cot in &unique {
            let a_tilde = policy.act(traj, t, cot)?;
            delta_qs.push(relative_q(critic, traj, t, a_tilde, dataset_action)?);
        }
        if let Some(best) = select_best(&delta_qs)? {
            let chosen = unique[best];
            let dq = delta_qs[best];
            let dir_idx = match chosen.direction {
                Direction::Increase => 0,
                Direction::Decrease => 1,
                Direction::None => 2,
            };
            direction_counts[dir_idx] += 1;
            records.push(GqpoRecord {
                prompt: build_prompt(&ctx)?,
                response: chosen.text.clone(),
                delta_q: dq,
                weight: (cfg.beta * dq).exp(),
                trajectory_id: traj.id,
                t,
                rejected: delta_qs.iter().filter(|&&d| d <= 0.0).count(),
                group_delta_q: delta_qs,
            });
        }
    }
    records.sort_by(|a, b| (a.trajectory_id, a.t).cmp(&(b.trajectory_id, b.t)));

    let accepted = records.len();
    let mean_dq = if accepted > 0 {
        records.iter().map(|r| r.delta_q).sum::<f64>() / accepted as f64
    } else {
        0.0
    };
    let mut histogram = Vec::new();
    if accepted > 0 {
        let max_dq = records.iter().map(|r| r.delta_q).fold(f64::NEG_INFINITY, f64::max);
        let buckets = 8;
        let width = (max_dq / buckets as f64).max(1e-12);
        for b in 0..buckets {
            let lo = b as f64 * width;
            let hi = lo + width;
            let count = records
                .iter()
                .filter(|r| r.delta_q >= lo && (r.delta_q < hi || b == buckets - 1))
                .count();
            histogram.push((lo, count));
        }
    }
    let report = GqpoReport {
        groups_evaluated,
        accepted,
        acceptance_rate: if groups_evaluated > 0 {
            accepted as f64 / groups_evaluated as f64
        } else {
            0.0
        },
        mean_delta_q_accepted: mean_dq,
        direction_counts,
        delta_q_histogram: histogram,
        backend_failures,
    };
    Ok((records, report))
}

#[derive(Debug, Serialize, Deserialize)]
struct SftHeader {
    version: String,
    num_records: usize,
    /// Downstream fine-tune settings this dataset was prepared for.
    recommended_finetune: serde_json::Value,
}

/// JSON-lines export: a version header then one record per line. Refuses any
/// record violating the ΔQ > 0 invariant.
pub fn export_sft(path: &Path, records: &[GqpoRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records to export".into()));
    }
    if let Some(bad) = records.iter().find(|r| r.delta_q <= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "record (traj {}, t {}) has delta_q {} <= 0",
            bad.trajectory_id, bad.t, bad.delta_q
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    let header = SftHeader {
        version: SFT_FORMAT_VERSION.to_string(),
        num_records: records.len(),
        recommended_finetune: serde_json::json!({
            "batch_size": 64,
            "learning_rate": 1e-6,
            "epochs": 5,
        }),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sft(path: &Path) -> Result<Vec<GqpoRecord>> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header: SftHeader = serde_json::from_str(
        &lines.next().ok_or_else(|| Error::Dataset("empty SFT file".into()))??,
    )?;
    if header.version != SFT_FORMAT_VERSION {
        return Err(Error::Dataset(format!("unsupported SFT version {}", header.version)));
    }
    let mut out = Vec::with_capacity(header.num_records);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    if out.len() != header.num_records {
        return Err(Error::Dataset("SFT record count mismatch".into()));
    }
    Ok(out)
}

pub fn write_report(path: &Path, report: &GqpoReport) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}
