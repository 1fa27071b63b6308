//! Trajectory dataset I/O: the "traj-v1" JSON-lines format shared by the
//! simulator, the decision model, and value learning, plus the CoT side-file.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::policies::BehaviorPolicy;
use crate::sim::{
    feature_roster_hash, returns_to_go, BidEnv, EpisodeConfig, Trajectory, TrajectoryMeta,
    STATE_DIM,
};

pub const TRAJ_FORMAT_VERSION: &str = "traj-v1";
pub const COT_FORMAT_VERSION: &str = "cot-v1";

#[derive(Debug, Serialize, Deserialize)]
struct TrajHeader {
    version: String,
    roster_hash: String,
    num_trajectories: usize,
}

/// One line of the CoT side-file, keyed by (trajectory id, t).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotRecord {
    pub trajectory_id: u64,
    pub t: usize,
    pub text: String,
    pub direction: String,
}

/// Write a dataset in the traj-v1 JSON-lines format: one header line, then one
/// trajectory per line.
pub fn write_trajectories(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = TrajHeader {
        version: TRAJ_FORMAT_VERSION.to_string(),
        roster_hash: feature_roster_hash(),
        num_trajectories: trajectories.len(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for traj in trajectories {
        serde_json::to_writer(&mut w, traj)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Dataset("empty trajectory file".into()))??;
    let header: TrajHeader = serde_json::from_str(&header_line)?;
    if header.version != TRAJ_FORMAT_VERSION {
        return Err(Error::Dataset(format!(
            "unsupported trajectory format version {}",
            header.version
        )));
    }
    if header.roster_hash != feature_roster_hash() {
        return Err(Error::Dataset(
            "trajectory file was generated under a different feature roster".into(),
        ));
    }
    let mut out = Vec::with_capacity(header.num_trajectories);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let traj: Trajectory = serde_json::from_str(&line)?;
        traj.validate()?;
        out.push(traj);
    }
    if out.len() != header.num_trajectories {
        return Err(Error::Dataset(format!(
            "header claims {} trajectories, found {}",
            header.num_trajectories,
            out.len()
        )));
    }
    Ok(out)
}

pub fn write_cot_records(path: &Path, records: &[CotRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", serde_json::json!({ "version": COT_FORMAT_VERSION }))?;
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cot_records(path: &Path) -> Result<Vec<CotRecord>> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header: serde_json::Value = serde_json::from_str(
        &lines
            .next()
            .ok_or_else(|| Error::Dataset("empty CoT file".into()))??,
    )?;
    if header["version"] != COT_FORMAT_VERSION {
        return Err(Error::Dataset("unsupported CoT file version".into()));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Per-feature normalization constants plus return statistics, computed once
/// per dataset and stored alongside model checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub action_mean: f64,
    pub action_std: f64,
    pub max_return: f64,
    pub roster_hash: String,
}

impl DatasetStats {
    pub fn compute(trajectories: &[Trajectory]) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::Dataset("cannot compute stats of an empty dataset".into()));
        }
        let mut mean = vec![0.0; STATE_DIM];
        let mut m2 = vec![0.0; STATE_DIM];
        let mut a_mean = 0.0;
        let mut a_m2 = 0.0;
        let mut n = 0.0;
        let mut max_return = f64::NEG_INFINITY;
        for traj in trajectories {
            max_return = max_return.max(traj.returns_to_go.first().copied().unwrap_or(0.0));
            for (s, &a) in traj.states.iter().zip(&traj.actions) {
                n += 1.0;
                for (i, &x) in s.iter().enumerate() {
                    let d = x - mean[i];
                    mean[i] += d / n;
                    m2[i] += d * (x - mean[i]);
                }
                let d = a - a_mean;
                a_mean += d / n;
                a_m2 += d * (a - a_mean);
            }
        }
        let std = m2
            .iter()
            .map(|&v| (v / n.max(1.0)).sqrt().max(1e-6))
            .collect();
        Ok(Self {
            feature_mean: mean,
            feature_std: std,
            action_mean: a_mean,
            action_std: (a_m2 / n.max(1.0)).sqrt().max(1e-6),
            max_return,
            roster_hash: feature_roster_hash(),
        })
    }

    pub fn normalize_state(&self, state: &[f64; STATE_DIM]) -> [f64; STATE_DIM] {
        let mut out = [0.0; STATE_DIM];
        for i in 0..STATE_DIM {
            out[i] = (state[i] - self.feature_mean[i]) / self.feature_std[i];
        }
        out
    }
}

/// Run one episode under a behavior policy and package it as a trajectory.
pub fn rollout_episode(
    cfg: &EpisodeConfig,
    policy: &mut dyn BehaviorPolicy,
    id: u64,
) -> Result<Trajectory> {
    let mut env = BidEnv::new(cfg.clone())?;
    let mut policy_rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.rng_seed.wrapping_add(0x9e37));
    use rand_chacha::rand_core::SeedableRng;
    policy.reset(&mut policy_rng);
    let mut states = Vec::with_capacity(cfg.num_steps);
    let mut actions = Vec::with_capacity(cfg.num_steps);
    let mut rewards = Vec::with_capacity(cfg.num_steps);
    let mut costs = Vec::with_capacity(cfg.num_steps);
    let mut state = env.build_state();
    while !env.is_terminated() {
        let action = policy.act(&state, &mut policy_rng);
        let spent_before = env.spent();
        let (next, reward) = env.step(action)?;
        states.push(*state.as_slice());
        actions.push(action.clamp(cfg.action_min, cfg.action_max));
        rewards.push(reward);
        costs.push(env.spent() - spent_before);
        state = next;
    }
    let rtg = returns_to_go(&rewards);
    Ok(Trajectory {
        id,
        states,
        actions,
        rewards,
        costs,
        returns_to_go: rtg,
        meta: TrajectoryMeta {
            budget: cfg.budget,
            cpa_constraint: cfg.cpa_constraint,
            seed: cfg.rng_seed,
            behavior_policy: policy.name().to_string(),
            action_min: cfg.action_min,
            action_max: cfg.action_max,
            sparse_mode: cfg.sparse_mode,
            roster_hash: feature_roster_hash(),
        },
    })
}

/// Generate `num_periods x policies` trajectories, sharding periods across
/// workers and merging deterministically by period index.
pub fn generate_trajectories(
    base: &EpisodeConfig,
    policy_names: &[String],
    num_periods: usize,
) -> Result<Vec<Trajectory>> {
    if num_periods == 0 {
        return Err(Error::InvalidArgument("num_periods must be >= 1".into()));
    }
    if policy_names.is_empty() {
        return Err(Error::InvalidArgument("at least one behavior policy required".into()));
    }
    let results: Vec<Result<Vec<Trajectory>>> = (0..num_periods)
        .into_par_iter()
        .map(|period| {
            let mut out = Vec::with_capacity(policy_names.len());
            for (pi, name) in policy_names.iter().enumerate() {
                let mut policy = crate::sim::policies::policy_by_name(
                    name,
                    base.action_min,
                    base.action_max,
                )
                .ok_or_else(|| Error::Config(format!("unknown behavior policy '{name}'")))?;
                let mut cfg = base.clone();
                cfg.rng_seed = base
                    .rng_seed
                    .wrapping_mul(0x100000001b3)
                    .wrapping_add((period * policy_names.len() + pi) as u64);
                let id = (period * policy_names.len() + pi) as u64;
                out.push(rollout_episode(&cfg, policy.as_mut(), id)?);
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::with_capacity(num_periods * policy_names.len());
    for r in results {
        all.extend(r?);
    }
    Ok(all)
}
