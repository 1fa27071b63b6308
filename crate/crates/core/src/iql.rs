//! Offline value learning: sequence-conditioned Q and V networks trained by
//! implicit Q-learning — V by expectile regression against the target Q,
//! Q by TD against V — with Polyak-averaged targets.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetStats;
use crate::error::{Error, Result};
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::layers::{Linear, Mlp, Transformer, TransformerConfig};
use crate::nn::optim::{adamw_step, AdamWConfig, ParamStore};
use crate::nn::tensor::Tensor;
use crate::sim::{Trajectory, STATE_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IqlConfig {
    pub gamma: f64,
    pub polyak_tau: f64,
    pub expectile: f64,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub return_scale: f64,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for IqlConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            polyak_tau: 0.01,
            expectile: 0.7,
            d_model: 512,
            n_layers: 6,
            n_heads: 8,
            seq_len: 10,
            return_scale: 2000.0,
            lr: 1e-4,
            batch: 128,
            steps: 20_000,
            seed: 0,
        }
    }
}

impl IqlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) || self.gamma == 0.0 {
            return Err(Error::Config("gamma must lie in (0,1]".into()));
        }
        if !(0.0..1.0).contains(&self.expectile) || self.expectile == 0.0 {
            return Err(Error::Config("expectile must lie in (0,1)".into()));
        }
        if !(0.0..=1.0).contains(&self.polyak_tau) || self.polyak_tau == 0.0 {
            return Err(Error::Config("polyak_tau must lie in (0,1]".into()));
        }
        if self.seq_len == 0 || self.batch == 0 {
            return Err(Error::Config("seq_len and batch must be >= 1".into()));
        }
        self.transformer_config(true).validate()
    }

    fn transformer_config(&self, with_actions: bool) -> TransformerConfig {
        TransformerConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            max_seq_len: if with_actions { 2 * self.seq_len } else { self.seq_len },
            dropout: 0.0,
            causal: true,
        }
    }
}

/// Transformer over a (state[, action]) window with a scalar head at the
/// final position.
struct SeqValueNet {
    proj_s: Linear,
    proj_a: Option<Linear>,
    tf: Transformer,
    head: Mlp,
}

impl SeqValueNet {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &IqlConfig,
        with_actions: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let proj_s = Linear::new(store, &format!("{prefix}.proj_s"), STATE_DIM, d, rng);
        let proj_a =
            with_actions.then(|| Linear::new(store, &format!("{prefix}.proj_a"), 1, d, rng));
        let tf = Transformer::new(store, &format!("{prefix}.tf"), cfg.transformer_config(with_actions), rng)?;
        let head = Mlp::new(store, &format!("{prefix}.head"), d, &[d, 1], rng);
        Ok(Self { proj_s, proj_a, tf, head })
    }

    /// States are already normalized; actions standardized. Interleaves
    /// s/a when the net consumes actions.
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        states: &[[f64; STATE_DIM]],
        actions: Option<&[f64]>,
    ) -> Result<NodeId> {
        if states.is_empty() {
            return Err(Error::InvalidArgument("empty value window".into()));
        }
        let n = states.len();
        let s_leaf = g.leaf(Tensor::new(vec![n, STATE_DIM], states.concat())?);
        let s_emb = self.proj_s.forward(g, store, s_leaf);
        let x = match (&self.proj_a, actions) {
            (Some(proj_a), Some(acts)) => {
                if acts.len() != n {
                    return Err(Error::ShapeMismatch("action window length mismatch".into()));
                }
                let a_leaf = g.leaf(Tensor::new(vec![n, 1], acts.to_vec())?);
                let a_emb = proj_a.forward(g, store, a_leaf);
                // interleave s_0, a_0, s_1, a_1, ...
                let stacked = g.concat_rows(&[s_emb, a_emb]);
                let perm: Vec<usize> = (0..2 * n).map(|i| if i % 2 == 0 { i / 2 } else { n + i / 2 }).collect();
                g.gather_rows(stacked, perm)
            }
            (None, None) => s_emb,
            _ => return Err(Error::InvalidArgument("action window presence mismatch".into())),
        };
        let h = self.tf.forward(g, store, x)?;
        let rows = g.value(h).rows();
        let last = g.gather_rows(h, vec![rows - 1]);
        Ok(self.head.forward(g, store, last))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub v_loss: f64,
    pub q_loss: f64,
}

pub struct IqlModel {
    pub cfg: IqlConfig,
    pub stats: DatasetStats,
    /// Smallest/largest action seen in training, for out-of-distribution flags.
    pub action_range: (f64, f64),
    q_store: ParamStore,
    q_target_store: ParamStore,
    v_store: ParamStore,
    q_net: SeqValueNet,
    v_net: SeqValueNet,
}

impl IqlModel {
    pub fn new(cfg: IqlConfig, stats: DatasetStats, action_range: (f64, f64)) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut q_store = ParamStore::new();
        let q_net = SeqValueNet::new(&mut q_store, "q", &cfg, true, &mut rng)?;
        let mut q_target_store = ParamStore::new();
        {
            let mut rng_t = ChaCha8Rng::seed_from_u64(cfg.seed);
            SeqValueNet::new(&mut q_target_store, "q", &cfg, true, &mut rng_t)?;
        }
        q_target_store.copy_from(&q_store)?;
        let mut v_store = ParamStore::new();
        let v_net = SeqValueNet::new(&mut v_store, "v", &cfg, false, &mut rng)?;
        Ok(Self { cfg, stats, action_range, q_store, q_target_store, v_store, q_net, v_net })
    }

    fn norm_states(&self, states: &[[f64; STATE_DIM]]) -> Vec<[f64; STATE_DIM]> {
        states.iter().map(|s| self.stats.normalize_state(s)).collect()
    }

    fn norm_actions(&self, actions: &[f64]) -> Vec<f64> {
        actions
            .iter()
            .map(|a| (a - self.stats.action_mean) / self.stats.action_std)
            .collect()
    }

    /// Q(s-window, a-window ending in `action`); the boolean flags an action
    /// outside the training range.
    pub fn q_value(
        &self,
        states: &[[f64; STATE_DIM]],
        prev_actions: &[f64],
        action: f64,
    ) -> Result<(f64, bool)> {
        if states.is_empty() || prev_actions.len() + 1 != states.len() {
            return Err(Error::InvalidArgument(
                "q_value expects n states and n-1 previous actions".into(),
            ));
        }
        let mut actions = prev_actions.to_vec();
        actions.push(action);
        let mut g = Graph::new();
        let out = self.q_net.forward(
            &mut g,
            &self.q_store,
            &self.norm_states(states),
            Some(&self.norm_actions(&actions)),
        )?;
        let ood = action < self.action_range.0 || action > self.action_range.1;
        Ok((g.value(out).item(), ood))
    }

    pub fn v_value(&self, states: &[[f64; STATE_DIM]]) -> Result<f64> {
        let mut g = Graph::new();
        let out = self.v_net.forward(&mut g, &self.v_store, &self.norm_states(states), None)?;
        Ok(g.value(out).item())
    }

    fn q_target_value(&self, states: &[[f64; STATE_DIM]], actions: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let out = self.q_net.forward(
            &mut g,
            &self.q_target_store,
            &self.norm_states(states),
            Some(&self.norm_actions(actions)),
        )?;
        Ok(g.value(out).item())
    }

    pub fn polyak_update(&mut self) -> Result<()> {
        self.q_target_store.polyak_from(&self.q_store, self.cfg.polyak_tau)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let meta = serde_json::json!({
            "kind": "iql-v1",
            "config": self.cfg,
            "stats": self.stats,
            "action_range": self.action_range,
        });
        save_checkpoint(&dir.join("q.ckpt"), &self.q_store, &meta, true)?;
        save_checkpoint(&dir.join("q_target.ckpt"), &self.q_target_store, &meta, false)?;
        save_checkpoint(&dir.join("v.ckpt"), &self.v_store, &meta, true)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (q_store, meta) = load_checkpoint(&dir.join("q.ckpt"))?;
        if meta["kind"] != "iql-v1" {
            return Err(Error::Checkpoint("not an IQL checkpoint".into()));
        }
        let cfg: IqlConfig = serde_json::from_value(meta["config"].clone())?;
        let stats: DatasetStats = serde_json::from_value(meta["stats"].clone())?;
        let action_range: (f64, f64) = serde_json::from_value(meta["action_range"].clone())?;
        let mut model = Self::new(cfg, stats, action_range)?;
        model.q_store.copy_from(&q_store)?;
        model.q_target_store.copy_from(&load_checkpoint(&dir.join("q_target.ckpt"))?.0)?;
        model.v_store.copy_from(&load_checkpoint(&dir.join("v.ckpt"))?.0)?;
        Ok(model)
    }
}

/// One sampled transition index.
#[derive(Debug, Clone, Copy)]
struct Sample {
    traj: usize,
    t: usize,
}

fn window_bounds(t: usize, seq_len: usize) -> usize {
    (t + 1).saturating_sub(seq_len)
}

/// Expectile loss of the residual Q̄(s,a) − V(s) over the batch; the target Q
/// is frozen for the step.
fn v_step(
    model: &mut IqlModel,
    trajs: &[Trajectory],
    batch: &[Sample],
    opt: &AdamWConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let mut residuals = Vec::with_capacity(batch.len());
    for s in batch {
        let traj = &trajs[s.traj];
        let lo = window_bounds(s.t, model.cfg.seq_len);
        let states = &traj.states[lo..=s.t];
        let actions = &traj.actions[lo..=s.t];
        let qbar = model.q_target_value(states, actions)?;
        let v = model.v_net.forward(&mut g, &model.v_store, &model.norm_states(states), None)?;
        let qbar_leaf = g.leaf(Tensor::new(vec![1, 1], vec![qbar])?);
        residuals.push(g.sub(qbar_leaf, v));
    }
    let u = g.concat_rows(&residuals);
    let loss = g.expectile(u, model.cfg.expectile)?;
    g.backward(loss)?;
    let grads = g.param_grads();
    let value = g.value(loss).item();
    adamw_step(&mut model.v_store, &grads, opt)?;
    Ok(value)
}

/// Mean squared TD error (r + γV(s') − Q(s,a))²; terminal steps bootstrap
/// with V(s') = 0, truncation at the horizon does not occur in episodic data.
fn q_step(
    model: &mut IqlModel,
    trajs: &[Trajectory],
    batch: &[Sample],
    opt: &AdamWConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let mut residuals = Vec::with_capacity(batch.len());
    for s in batch {
        let traj = &trajs[s.traj];
        let lo = window_bounds(s.t, model.cfg.seq_len);
        let states = &traj.states[lo..=s.t];
        let actions = &traj.actions[lo..=s.t];
        let r = traj.rewards[s.t] / model.cfg.return_scale;
        let terminal = s.t + 1 >= traj.len();
        let v_next = if terminal {
            0.0
        } else {
            let nlo = window_bounds(s.t + 1, model.cfg.seq_len);
            model.v_value(&traj.states[nlo..=s.t + 1])?
        };
        let y = r + model.cfg.gamma * v_next;
        let q = model.q_net.forward(
            &mut g,
            &model.q_store,
            &model.norm_states(states),
            Some(&model.norm_actions(actions)),
        )?;
        let y_leaf = g.leaf(Tensor::new(vec![1, 1], vec![y])?);
        residuals.push(g.sub(y_leaf, q));
    }
    let u = g.concat_rows(&residuals);
    let sq = g.mul(u, u);
    let loss = g.mean_all(sq);
    g.backward(loss)?;
    let grads = g.param_grads();
    let value = g.value(loss).item();
    adamw_step(&mut model.q_store, &grads, opt)?;
    Ok(value)
}

/// Alternating V-step / Q-step / Polyak per batch.
pub fn train_iql(trajs: &[Trajectory], cfg: IqlConfig) -> Result<(IqlModel, Vec<LogEntry>)> {
    cfg.validate()?;
    let total: usize = trajs.iter().map(|t| t.len()).sum();
    if total < cfg.batch {
        return Err(Error::Dataset(format!(
            "dataset has {total} transitions, batch needs {}",
            cfg.batch
        )));
    }
    let stats = DatasetStats::compute(trajs)?;
    let (mut amin, mut amax) = (f64::INFINITY, f64::NEG_INFINITY);
    for traj in trajs {
        for &a in &traj.actions {
            amin = amin.min(a);
            amax = amax.max(a);
        }
    }
    let mut model = IqlModel::new(cfg.clone(), stats, (amin, amax))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x51c7));
    let opt = AdamWConfig::with_lr(cfg.lr);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<Sample> = (0..cfg.batch)
            .map(|_| {
                let traj = rng.gen_range(0..trajs.len());
                let t = rng.gen_range(0..trajs[traj].len());
                Sample { traj, t }
            })
            .collect();
        let v_loss = v_step(&mut model, trajs, &batch, &opt)?;
        let q_loss = q_step(&mut model, trajs, &batch, &opt)?;
        model.polyak_update()?;
        log.push(LogEntry { step, v_loss, q_loss });
    }
    Ok((model, log))
}

pub fn write_training_log(path: &Path, log: &[LogEntry]) -> Result<()> {
    let mut out = String::new();
    for e in log {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[doc(hidden)]
pub mod toy {
    //! Deterministic 5-state chain used to check the learner against a
    //! value-iteration oracle. Action 1 advances, action 0 stays; reaching
    //! the last state pays reward 1 and ends the episode.
    use super::*;
    use crate::sim::TrajectoryMeta;

    pub const N_STATES: usize = 5;
    pub const GAMMA: f64 = 0.99;

    pub fn encode(state: usize) -> [f64; STATE_DIM] {
        let mut s = [0.0; STATE_DIM];
        s[0] = state as f64;
        // a couple of redundant encodings keep the normalized features informative
        s[1] = (state as f64 / (N_STATES - 1) as f64) * 2.0 - 1.0;
        s[2] = if state % 2 == 0 { 1.0 } else { -1.0 };
        s
    }

    /// Roll a uniformly random behavior policy; episode ends on reaching the
    /// terminal state or after `max_len` steps.
    pub fn rollouts(n: usize, max_len: usize, seed: u64) -> Vec<Trajectory> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        for id in 0..n {
            let mut state = 0usize;
            let mut states = Vec::new();
            let mut actions = Vec::new();
            let mut rewards = Vec::new();
            for _ in 0..max_len {
                let a = if rng.gen::<bool>() { 1.0 } else { 0.0 };
                states.push(encode(state));
                actions.push(a);
                let next = if a > 0.5 { state + 1 } else { state };
                let r = if next == N_STATES - 1 { 1.0 } else { 0.0 };
                rewards.push(r);
                state = next;
                if state == N_STATES - 1 {
                    break;
                }
            }
            let costs = vec![0.0; rewards.len()];
            let rtg = crate::sim::returns_to_go(&rewards);
            out.push(Trajectory {
                id: id as u64,
                states,
                actions,
                rewards,
                costs,
                returns_to_go: rtg,
                meta: TrajectoryMeta {
                    budget: 1.0,
                    cpa_constraint: 1.0,
                    seed,
                    behavior_policy: "uniform".into(),
                    action_min: 0.0,
                    action_max: 1.0,
                    sparse_mode: false,
                    roster_hash: String::new(),
                },
            });
        }
        out
    }

    /// Infinite-horizon value iteration on the chain (terminal state absorbing
    /// with value 0).
    pub fn value_iteration() -> Vec<[f64; 2]> {
        let mut q = vec![[0.0f64; 2]; N_STATES - 1];
        for _ in 0..10_000 {
            let mut next = q.clone();
            for s in 0..N_STATES - 1 {
                let v = |s: usize| -> f64 {
                    if s == N_STATES - 1 {
                        0.0
                    } else {
                        q[s][0].max(q[s][1])
                    }
                };
                let r_adv = if s + 1 == N_STATES - 1 { 1.0 } else { 0.0 };
                next[s][0] = GAMMA * v(s); // stay
                next[s][1] = r_adv + GAMMA * v(s + 1); // advance
            }
            q = next;
        }
        q
    }

    pub fn toy_config() -> IqlConfig {
        IqlConfig {
            gamma: GAMMA,
            polyak_tau: 0.05,
            expectile: 0.7,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            seq_len: 1,
            return_scale: 1.0,
            lr: 3e-3,
            batch: 64,
            steps: 1200,
            seed: 7,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_q_matches_value_iteration_oracle() {
        let trajs = toy::rollouts(200, 12, 3);
        let (model, log) = train_iql(&trajs, toy::toy_config()).unwrap();
        let oracle = toy::value_iteration();
        for s in 0..toy::N_STATES - 1 {
            for (a_idx, &a) in [0.0, 1.0].iter().enumerate() {
                let (q, ood) = model.q_value(&[toy::encode(s)], &[], a).unwrap();
                assert!(!ood);
                let target = oracle[s][a_idx];
                let rel = (q - target).abs() / target.abs().max(1e-6);
                assert!(
                    rel < 0.05,
                    "state {s} action {a}: learned {q:.4} vs oracle {target:.4} (rel {rel:.4})"
                );
            }
        }
        assert!(log.last().unwrap().q_loss < log.first().unwrap().q_loss);
    }

    #[test]
    fn expectile_half_learns_the_mean() {
        // two-point {0, 10} toy: the tau=0.5 expectile of the residual target
        // is the mean, so a constant V must land on 5.
        let mut store = ParamStore::new();
        let v = store.add("v", Tensor::zeros(vec![1, 1]));
        let opt = AdamWConfig { lr: 5e-2, weight_decay: 0.0, ..Default::default() };
        for _ in 0..2000 {
            let mut g = Graph::new();
            let vn = g.param(&store, v);
            let stacked = g.concat_rows(&[vn, vn]);
            let targets = g.leaf(Tensor::new(vec![2, 1], vec![0.0, 10.0]).unwrap());
            let u = g.sub(targets, stacked);
            let loss = g.expectile(u, 0.5).unwrap();
            g.backward(loss).unwrap();
            adamw_step(&mut store, &g.param_grads(), &opt).unwrap();
        }
        let learned = store.get(v).data[0];
        assert!((learned - 5.0).abs() < 1e-2, "learned {learned}");
    }

    #[test]
    fn expectile_optimum_monotone_in_tau() {
        let residual_fit = |tau: f64| {
            let mut store = ParamStore::new();
            let v = store.add("v", Tensor::zeros(vec![1, 1]));
            let opt = AdamWConfig { lr: 5e-2, weight_decay: 0.0, ..Default::default() };
            let data = [0.0, 2.0, 3.0, 10.0];
            for _ in 0..2000 {
                let mut g = Graph::new();
                let vn = g.param(&store, v);
                let stacked = g.concat_rows(&[vn, vn, vn, vn]);
                let targets = g.leaf(Tensor::new(vec![4, 1], data.to_vec()).unwrap());
                let u = g.sub(targets, stacked);
                let loss = g.expectile(u, tau).unwrap();
                g.backward(loss).unwrap();
                adamw_step(&mut store, &g.param_grads(), &opt).unwrap();
            }
            store.get(v).data[0]
        };
        let (lo, mid, hi) = (residual_fit(0.3), residual_fit(0.5), residual_fit(0.7));
        assert!(lo < mid && mid < hi, "{lo} {mid} {hi}");
    }

    #[test]
    fn q_loss_hand_arithmetic() {
        // r=1, gamma=0.99, V(s')=2, Q=0 -> (1 + 1.98)^2 = 8.8804
        let y: f64 = 1.0 + 0.99 * 2.0;
        let q = 0.0;
        assert!(((y - q).powi(2) - 8.8804).abs() < 1e-12);
    }

    #[test]
    fn deterministic_given_seed() {
        let trajs = toy::rollouts(40, 10, 1);
        let mut cfg = toy::toy_config();
        cfg.steps = 30;
        let (_, log_a) = train_iql(&trajs, cfg.clone()).unwrap();
        let (_, log_b) = train_iql(&trajs, cfg).unwrap();
        assert_eq!(log_a.last().unwrap().v_loss, log_b.last().unwrap().v_loss);
        assert_eq!(log_a.last().unwrap().q_loss, log_b.last().unwrap().q_loss);
    }

    #[test]
    fn polyak_target_lag_shrinks_geometrically() {
        let trajs = toy::rollouts(40, 10, 2);
        let mut cfg = toy::toy_config();
        cfg.steps = 1;
        cfg.polyak_tau = 0.1;
        let (mut model, _) = train_iql(&trajs, cfg).unwrap();
        // freeze the online net and measure the gap closing
        let gap = |m: &IqlModel| {
            let mut sum = 0.0;
            for id in m.q_store.ids() {
                for (a, b) in m.q_store.get(id).data.iter().zip(&m.q_target_store.get(id).data) {
                    sum += (a - b).powi(2);
                }
            }
            sum.sqrt()
        };
        let g0 = gap(&model);
        assert!(g0 > 0.0);
        let k = 5;
        for _ in 0..k {
            model.polyak_update().unwrap();
        }
        let expected = g0 * (1.0 - 0.1f64).powi(k);
        assert!((gap(&model) - expected).abs() / expected < 1e-9);
    }

    #[test]
    fn q_value_flags_out_of_distribution_actions() {
        let trajs = toy::rollouts(40, 10, 4);
        let mut cfg = toy::toy_config();
        cfg.steps = 5;
        let (model, _) = train_iql(&trajs, cfg).unwrap();
        let (_, ood) = model.q_value(&[toy::encode(1)], &[], 7.5).unwrap();
        assert!(ood);
        let (_, ood) = model.q_value(&[toy::encode(1)], &[], 1.0).unwrap();
        assert!(!ood);
    }

    #[test]
    fn small_dataset_rejected() {
        let trajs = toy::rollouts(1, 3, 0);
        assert!(train_iql(&trajs, toy::toy_config()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let trajs = toy::rollouts(40, 10, 5);
        let mut cfg = toy::toy_config();
        cfg.steps = 10;
        let (model, _) = train_iql(&trajs, cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("iql");
        model.save(&path).unwrap();
        let loaded = IqlModel::load(&path).unwrap();
        let (a, _) = model.q_value(&[toy::encode(2)], &[], 1.0).unwrap();
        let (b, _) = loaded.q_value(&[toy::encode(2)], &[], 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn terminal_ordering_after_training() {
        let trajs = toy::rollouts(200, 12, 3);
        let (model, _) = train_iql(&trajs, toy::toy_config()).unwrap();
        // at the state before terminal, advancing must beat staying
        let (q_adv, _) = model.q_value(&[toy::encode(3)], &[], 1.0).unwrap();
        let (q_stay, _) = model.q_value(&[toy::encode(3)], &[], 0.0).unwrap();
        assert!(q_adv > q_stay);
    }
}
