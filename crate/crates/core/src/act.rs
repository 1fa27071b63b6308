//! The low-level decision model: a dual embedding of CoT tokens and numeric
//! decision items, fused by a causal transformer, with an action head,
//! anchor-direction filtering, and return-to-go conditioning.

use std::collections::HashMap;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{CotRecord, DatasetStats};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::layers::{Linear, Mlp, Transformer, TransformerConfig};
use crate::nn::optim::{adamw_step, AdamWConfig, ParamId, ParamStore};
use crate::nn::tensor::Tensor;
use crate::objective;
use crate::sim::{Trajectory, STATE_DIM};
use crate::think::Direction;

pub const DEFAULT_VOCAB_SIZE: usize = 2048;
pub const DEFAULT_MAX_COT_LEN: usize = 128;

/// Hash-based word-piece tokenizer over whitespace/punctuation splits. The
/// vocabulary is a fixed id space; token text is mapped with FNV-1a so the
/// same word always lands on the same id. Id 0 is reserved.
pub fn tokenize(text: &str, vocab_size: usize, max_len: usize) -> Vec<usize> {
    fn fnv1a(s: &str) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in s.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
    let mut ids = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, ids: &mut Vec<usize>| {
        if !word.is_empty() {
            ids.push(1 + (fnv1a(word) % (vocab_size as u64 - 1)) as usize);
            word.clear();
        }
    };
    for ch in text.chars() {
        if ch.is_whitespace() {
            flush(&mut word, &mut ids);
        } else if ch.is_ascii_punctuation() {
            flush(&mut word, &mut ids);
            ids.push(1 + (fnv1a(&ch.to_string()) % (vocab_size as u64 - 1)) as usize);
        } else {
            word.push(ch.to_ascii_lowercase());
        }
    }
    flush(&mut word, &mut ids);
    ids.truncate(max_len);
    ids
}

/// Tokenized CoT plus its parsed adjustment direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotTokens {
    pub ids: Vec<usize>,
    pub direction: Direction,
}

impl CotTokens {
    pub fn empty() -> Self {
        Self { ids: Vec::new(), direction: Direction::None }
    }

    pub fn from_text(text: &str, direction: Direction, vocab_size: usize, max_len: usize) -> Self {
        Self { ids: tokenize(text, vocab_size, max_len), direction }
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// One slot of the numeric block.
#[derive(Debug, Clone, PartialEq)]
pub enum DecisionItem {
    Return(f64),
    State([f64; STATE_DIM]),
    Action(f64),
}

/// The interleaved {R, s, a} window, already normalized. `padded` marks a
/// shortened window at episode start.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionSequence {
    pub items: Vec<DecisionItem>,
    pub padded: bool,
    normalized: bool,
}

impl DecisionSequence {
    /// Raw constructor for callers that normalize themselves (tests mostly).
    pub fn from_normalized(items: Vec<DecisionItem>, padded: bool) -> Self {
        Self { items, padded, normalized: true }
    }

    /// Window ending at step `t`: R_{t-L..t}, s_{t-L..t} interleaved with
    /// a_{t-L..t-1}; 3(L+1)-1 items with full history. Returns-to-go come
    /// from `rtg` (reweighted or plain), divided by `return_scale`.
    pub fn build(
        traj: &Trajectory,
        rtg: &[f64],
        t: usize,
        window: usize,
        stats: &DatasetStats,
        return_scale: f64,
    ) -> Result<Self> {
        if rtg.len() != traj.len() {
            return Err(Error::InvalidArgument("window index out of range".into()));
        }
        Self::from_parts(&traj.states, &traj.actions, rtg, t, window, stats, return_scale)
    }

    /// Slice-level builder shared with the online episode runner, where the
    /// action at `t` does not exist yet (`actions` may have length t).
    pub fn from_parts(
        states: &[[f64; STATE_DIM]],
        actions: &[f64],
        rtg: &[f64],
        t: usize,
        window: usize,
        stats: &DatasetStats,
        return_scale: f64,
    ) -> Result<Self> {
        if t >= states.len() || t >= rtg.len() || actions.len() < t {
            return Err(Error::InvalidArgument("window index out of range".into()));
        }
        if return_scale <= 0.0 {
            return Err(Error::InvalidArgument("return_scale must be positive".into()));
        }
        let start = t.saturating_sub(window);
        let mut items = Vec::with_capacity(3 * (t - start + 1) - 1);
        for i in start..=t {
            items.push(DecisionItem::Return(rtg[i] / return_scale));
            items.push(DecisionItem::State(stats.normalize_state(&states[i])));
            if i < t {
                items.push(DecisionItem::Action(
                    (actions[i] - stats.action_mean) / stats.action_std,
                ));
            }
        }
        Ok(Self { items, padded: t < window, normalized: true })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Decision-window length L.
    pub window: usize,
    pub vocab_size: usize,
    pub max_cot_len: usize,
    /// Shared decision-embed MLP widths; the last must equal d_model.
    pub decision_mlp_widths: Vec<usize>,
    /// Action head widths; the last must be 1.
    pub action_head_widths: Vec<usize>,
    /// Divisor applied to returns-to-go before embedding.
    pub return_scale: f64,
    pub action_min: f64,
    pub action_max: f64,
}

impl Default for ActModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            window: 10,
            vocab_size: DEFAULT_VOCAB_SIZE,
            max_cot_len: DEFAULT_MAX_COT_LEN,
            decision_mlp_widths: vec![64, 64, 64],
            action_head_widths: vec![64, 64, 1],
            return_scale: 2000.0,
            action_min: 0.0,
            action_max: 10.0,
        }
    }
}

impl ActModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.decision_mlp_widths.last() != Some(&self.d_model) {
            return Err(Error::Config("decision MLP must end at d_model".into()));
        }
        if self.action_head_widths.last() != Some(&1) {
            return Err(Error::Config("action head must end at width 1".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be >= 2".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be >= 1".into()));
        }
        if self.action_max <= self.action_min {
            return Err(Error::Config("action_max must exceed action_min".into()));
        }
        self.transformer_config().validate()
    }

    pub fn transformer_config(&self) -> TransformerConfig {
        TransformerConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            max_seq_len: self.max_cot_len + 3 * (self.window + 1),
            dropout: 0.0,
            causal: true,
        }
    }
}

/// One training sample after anchor filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct ActSample {
    pub cot: CotTokens,
    pub seq: DecisionSequence,
    pub label: f64,
}

pub struct ActModel {
    pub cfg: ActModelConfig,
    pub store: ParamStore,
    pub stats: DatasetStats,
    token_emb: ParamId,
    seg_emb: ParamId,
    proj_r: Linear,
    proj_s: Linear,
    proj_a: Linear,
    decision_mlp: Mlp,
    transformer: Transformer,
    action_head: Mlp,
}

impl ActModel {
    pub fn new(cfg: ActModelConfig, stats: DatasetStats, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let token_emb = store.add(
            "act.token_emb",
            Tensor::randn(vec![cfg.vocab_size, d], crate::nn::layers::INIT_STD, &mut rng),
        );
        let seg_emb = store.add(
            "act.seg_emb",
            Tensor::randn(vec![2, d], crate::nn::layers::INIT_STD, &mut rng),
        );
        let proj_r = Linear::new(&mut store, "act.proj_r", 1, d, &mut rng);
        let proj_s = Linear::new(&mut store, "act.proj_s", STATE_DIM, d, &mut rng);
        let proj_a = Linear::new(&mut store, "act.proj_a", 1, d, &mut rng);
        let decision_mlp = Mlp::new(&mut store, "act.dec_mlp", d, &cfg.decision_mlp_widths, &mut rng);
        let transformer = Transformer::new(&mut store, "act.tf", cfg.transformer_config(), &mut rng)?;
        let action_head = Mlp::new(&mut store, "act.head", d, &cfg.action_head_widths, &mut rng);
        Ok(Self {
            cfg,
            store,
            stats,
            token_emb,
            seg_emb,
            proj_r,
            proj_s,
            proj_a,
            decision_mlp,
            transformer,
            action_head,
        })
    }

    /// Token embeddings for the CoT block followed by decision embeddings for
    /// the numeric block, with segment embeddings added per position.
    pub fn dual_embed(&self, g: &mut Graph, cot: &CotTokens, seq: &DecisionSequence) -> Result<NodeId> {
        if !seq.normalized {
            return Err(Error::InvalidArgument("decision sequence must be normalized".into()));
        }
        if seq.items.is_empty() {
            return Err(Error::InvalidArgument("empty decision sequence".into()));
        }
        if cot.ids.len() > self.cfg.max_cot_len {
            return Err(Error::InvalidArgument("CoT exceeds max length".into()));
        }
        if cot.ids.iter().any(|&i| i >= self.cfg.vocab_size) {
            return Err(Error::InvalidArgument("token id outside vocabulary".into()));
        }
        if cot.ids.len() + seq.items.len() > self.transformer.cfg.max_seq_len {
            return Err(Error::ShapeMismatch("dual-embedded sequence overlength".into()));
        }

        // Group numeric items by kind so each kind goes through its own input
        // projection in one matmul, then restore interleaved order.
        let mut r_data = Vec::new();
        let mut s_data = Vec::new();
        let mut a_data = Vec::new();
        let mut kind_index = Vec::with_capacity(seq.items.len());
        for item in &seq.items {
            match item {
                DecisionItem::Return(r) => {
                    kind_index.push((0usize, r_data.len()));
                    r_data.push(*r);
                }
                DecisionItem::State(s) => {
                    kind_index.push((1, s_data.len() / STATE_DIM));
                    s_data.extend_from_slice(s);
                }
                DecisionItem::Action(a) => {
                    kind_index.push((2, a_data.len()));
                    a_data.push(*a);
                }
            }
        }
        let (n_r, n_s) = (r_data.len(), s_data.len() / STATE_DIM);
        let mut parts = Vec::new();
        if n_r > 0 {
            let x = g.leaf(Tensor::new(vec![n_r, 1], r_data)?);
            parts.push(self.proj_r.forward(g, &self.store, x));
        }
        if n_s > 0 {
            let x = g.leaf(Tensor::new(vec![n_s, STATE_DIM], s_data)?);
            parts.push(self.proj_s.forward(g, &self.store, x));
        }
        if !a_data.is_empty() {
            let x = g.leaf(Tensor::new(vec![a_data.len(), 1], a_data)?);
            parts.push(self.proj_a.forward(g, &self.store, x));
        }
        let grouped = g.concat_rows(&parts);
        let embedded = self.decision_mlp.forward(g, &self.store, grouped);
        let perm: Vec<usize> = kind_index
            .iter()
            .map(|&(kind, idx)| match kind {
                0 => idx,
                1 => n_r + idx,
                _ => n_r + n_s + idx,
            })
            .collect();
        let numeric = g.gather_rows(embedded, perm);

        let (full, seg_ids) = if cot.ids.is_empty() {
            (numeric, vec![1usize; seq.items.len()])
        } else {
            let table = g.param(&self.store, self.token_emb);
            let tokens = g.gather_rows(table, cot.ids.clone());
            let mut seg = vec![0usize; cot.ids.len()];
            seg.extend(std::iter::repeat(1).take(seq.items.len()));
            (g.concat_rows(&[tokens, numeric]), seg)
        };
        let seg_table = g.param(&self.store, self.seg_emb);
        let seg = g.gather_rows(seg_table, seg_ids);
        Ok(g.add(full, seg))
    }

    /// Unclamped prediction node ([1,1]) read from the final position.
    pub fn predict_node(&self, g: &mut Graph, cot: &CotTokens, seq: &DecisionSequence) -> Result<NodeId> {
        let x = self.dual_embed(g, cot, seq)?;
        let h = self.transformer.forward(g, &self.store, x)?;
        let n = g.value(h).rows();
        let last = g.gather_rows(h, vec![n - 1]);
        Ok(self.action_head.forward(g, &self.store, last))
    }

    /// Predicted action, clamped to the configured range.
    pub fn forward(&self, cot: &CotTokens, seq: &DecisionSequence) -> Result<f64> {
        let mut g = Graph::new();
        let out = self.predict_node(&mut g, cot, seq)?;
        let a = g.value(out).item();
        if !a.is_finite() {
            return Err(Error::Numeric("non-finite action prediction".into()));
        }
        Ok(a.clamp(self.cfg.action_min, self.cfg.action_max))
    }

    /// One optimization step on the batch; returns the mean per-sample L2
    /// distance between prediction and label.
    pub fn train_step(&mut self, batch: &[ActSample], opt: &AdamWConfig) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        let mut g = Graph::new();
        let mut preds = Vec::with_capacity(batch.len());
        for sample in batch {
            preds.push(self.predict_node(&mut g, &sample.cot, &sample.seq)?);
        }
        let pred = g.concat_rows(&preds);
        let labels = g.leaf(Tensor::new(
            vec![batch.len(), 1],
            batch.iter().map(|s| s.label).collect(),
        )?);
        let diff = g.sub(pred, labels);
        let loss = abs_mean(&mut g, diff);
        g.backward(loss)?;
        let grads = g.param_grads();
        let value = g.value(loss).item();
        adamw_step(&mut self.store, &grads, opt)?;
        Ok(value)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "act-v1",
            "config": self.cfg,
            "stats": self.stats,
        });
        save_checkpoint(path, &self.store, &meta, true)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = load_checkpoint(path)?;
        if meta["kind"] != "act-v1" {
            return Err(Error::Checkpoint("not an act-model checkpoint".into()));
        }
        let cfg: ActModelConfig = serde_json::from_value(meta["config"].clone())?;
        let stats: DatasetStats = serde_json::from_value(meta["stats"].clone())?;
        let mut model = Self::new(cfg, stats, 0)?;
        model.store.copy_from(&store)?;
        Ok(model)
    }
}

/// Mean absolute residual via relu(u) + relu(-u); the per-sample L2 distance
/// for a one-dimensional action, with subgradient 0 at u = 0.
pub(crate) fn abs_mean(g: &mut Graph, u: NodeId) -> NodeId {
    let pos = g.relu(u);
    let negu = g.scale(u, -1.0);
    let neg = g.relu(negu);
    let abs = g.add(pos, neg);
    g.mean_all(abs)
}

/// Accept/reject a CoT against the dataset's action delta. NONE always
/// accepts; a zero delta accepts either direction.
pub fn anchor_filter(direction: Direction, a_t: f64, a_prev: f64) -> bool {
    let delta = a_t - a_prev;
    match direction {
        Direction::None => true,
        Direction::Increase => delta >= 0.0,
        Direction::Decrease => delta <= 0.0,
    }
}

/// Training-time return-to-go with a constraint-aware bonus:
/// rtg_w[t] = sum of rewards from t plus w times the penalty computed from
/// cost and performance accumulated over [t, T).
pub fn rtg_reweight(traj: &Trajectory, w: f64) -> Result<Vec<f64>> {
    traj.validate()?;
    if traj.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    let t_len = traj.len();
    let mut out = vec![0.0; t_len];
    let mut cost_suffix = 0.0;
    let mut perf_suffix = 0.0;
    let mut reward_suffix = 0.0;
    for t in (0..t_len).rev() {
        cost_suffix += traj.costs[t];
        perf_suffix += traj.rewards[t];
        reward_suffix += traj.rewards[t];
        let ratio = objective::cpa_ratio(cost_suffix, perf_suffix, traj.meta.cpa_constraint)?;
        out[t] = reward_suffix + w * objective::penalty(ratio);
    }
    Ok(out)
}

/// Return-to-go tracker for inference: starts at the dataset's maximum return
/// (scaled, with the penalty term fixed to 1) and decrements realized reward.
#[derive(Debug, Clone, Copy)]
pub struct RtgTracker {
    pub value: f64,
    scale: f64,
}

impl RtgTracker {
    pub fn init(stats: &DatasetStats, return_scale: f64, w: f64) -> Result<Self> {
        if return_scale <= 0.0 {
            return Err(Error::InvalidArgument("return_scale must be positive".into()));
        }
        if !stats.max_return.is_finite() {
            return Err(Error::Dataset("dataset statistics lack a max return".into()));
        }
        Ok(Self { value: (stats.max_return + w) / return_scale, scale: return_scale })
    }

    pub fn step(&mut self, realized_reward: f64) {
        self.value -= realized_reward / self.scale;
    }
}

/// Join trajectories with the CoT side-file, apply anchor filtering (rejected
/// CoTs become empty, the sample stays), and normalize windows.
pub fn assemble_samples(
    trajectories: &[Trajectory],
    cots: &[CotRecord],
    cfg: &ActModelConfig,
    stats: &DatasetStats,
    rtg_w: f64,
) -> Result<Vec<ActSample>> {
    let mut by_key: HashMap<(u64, usize), &CotRecord> = HashMap::new();
    for rec in cots {
        by_key.insert((rec.trajectory_id, rec.t), rec);
    }
    let mut samples = Vec::new();
    for traj in trajectories {
        let rtg = rtg_reweight(traj, rtg_w)?;
        for t in 0..traj.len() {
            let seq = DecisionSequence::build(traj, &rtg, t, cfg.window, stats, cfg.return_scale)?;
            let cot = match by_key.get(&(traj.id, t)) {
                Some(rec) => {
                    let direction = Direction::from_str(&rec.direction);
                    let a_prev = if t > 0 { traj.actions[t - 1] } else { traj.actions[t] };
                    if anchor_filter(direction, traj.actions[t], a_prev) {
                        CotTokens::from_text(&rec.text, direction, cfg.vocab_size, cfg.max_cot_len)
                    } else {
                        CotTokens::empty()
                    }
                }
                None => CotTokens::empty(),
            };
            samples.push(ActSample { cot, seq, label: traj.actions[t] });
        }
    }
    Ok(samples)
}

/// Full training loop: shuffled minibatches, one AdamW step each; returns the
/// per-step loss curve.
pub fn train_act(
    model: &mut ActModel,
    samples: &[ActSample],
    steps: usize,
    batch_size: usize,
    opt: &AdamWConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut losses = Vec::with_capacity(steps);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = samples.len();
    for _ in 0..steps {
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..batch_size.max(1) {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(samples[order[cursor]].clone());
            cursor += 1;
        }
        losses.push(model.train_step(&batch, opt)?);
    }
    Ok(losses)
}
