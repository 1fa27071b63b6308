//! Model building blocks: linear/MLP, layer norm, multi-head causal
//! attention, and the transformer stack.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::optim::{ParamId, ParamStore};
use crate::nn::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub causal: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self { d_model: 64, n_heads: 4, n_layers: 2, max_seq_len: 64, dropout: 0.0, causal: true }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{prefix}.w"), Tensor::randn(vec![d_in, d_out], INIT_STD, rng));
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(vec![d_out]));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, w);
        g.add_bias(xw, b)
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists layer output sizes, e.g. `[64, 64, 1]` on input `d_in`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        widths: &[usize],
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut d = d_in;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Linear::new(store, &format!("{prefix}.{i}"), d, w, rng));
            d = w;
        }
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h);
            if i < last {
                h = g.relu(h);
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        let gain = store.add(format!("{prefix}.gain"), Tensor::full(vec![d], 1.0));
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(vec![d]));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let norm = g.layernorm(x);
        let scaled = g.mul_row(norm, gain);
        g.add_bias(scaled, bias)
    }
}

fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            data[i * n + j] = MASK_NEG;
        }
    }
    Tensor { shape: vec![n, n], data }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, n_heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            wq: Linear::new(store, &format!("{prefix}.wq"), d, d, rng),
            wk: Linear::new(store, &format!("{prefix}.wk"), d, d, rng),
            wv: Linear::new(store, &format!("{prefix}.wv"), d, d, rng),
            wo: Linear::new(store, &format!("{prefix}.wo"), d, d, rng),
            n_heads,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        causal: bool,
    ) -> NodeId {
        let n = g.value(x).rows();
        let d = g.value(x).cols();
        let dh = d / self.n_heads;
        let q = self.wq.forward(g, store, x);
        let k = self.wk.forward(g, store, x);
        let v = self.wv.forward(g, store, x);
        let mask = causal.then(|| causal_mask(n));
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let masked = match &mask {
                Some(m) => g.add_const(scaled, m),
                None => scaled,
            };
            let probs = g.softmax_rows(masked);
            heads.push(g.matmul(probs, vh));
        }
        let ctx = g.concat_cols(&heads);
        self.wo.forward(g, store, ctx)
    }
}

/// Bare attention over explicit q, k, v matrices (no projections); used by the
/// gradient-check harness and as the shared primitive.
pub fn attention(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId, causal: bool) -> NodeId {
    let n = g.value(q).rows();
    let dk = g.value(q).cols();
    assert_eq!(g.value(k).cols(), dk, "attention: q/k width mismatch");
    assert_eq!(g.value(k).rows(), g.value(v).rows(), "attention: k/v height mismatch");
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt);
    let scaled = g.scale(scores, 1.0 / (dk as f64).sqrt());
    let masked = if causal {
        let m = causal_mask(n);
        g.add_const(scaled, &m)
    } else {
        scaled
    };
    let probs = g.softmax_rows(masked);
    g.matmul(probs, v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &TransformerConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        Self {
            ln1: LayerNorm::new(store, &format!("{prefix}.ln1"), d),
            attn: MultiHeadAttention::new(store, &format!("{prefix}.attn"), d, cfg.n_heads, rng),
            ln2: LayerNorm::new(store, &format!("{prefix}.ln2"), d),
            ffn: Mlp::new(store, &format!("{prefix}.ffn"), d, &[4 * d, d], rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        causal: bool,
    ) -> NodeId {
        let normed = self.ln1.forward(g, store, x);
        let attn = self.attn.forward(g, store, normed, causal);
        let x = g.add(x, attn);
        let normed = self.ln2.forward(g, store, x);
        let ffn = self.ffn.forward(g, store, normed);
        g.add(x, ffn)
    }
}

/// Causal transformer with learned positional embeddings and a final norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transformer {
    pub cfg: TransformerConfig,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub final_ln: LayerNorm,
}

impl Transformer {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: TransformerConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let pos = store.add(
            format!("{prefix}.pos"),
            Tensor::randn(vec![cfg.max_seq_len, cfg.d_model], INIT_STD, rng),
        );
        let blocks = (0..cfg.n_layers)
            .map(|i| TransformerBlock::new(store, &format!("{prefix}.block{i}"), &cfg, rng))
            .collect();
        let final_ln = LayerNorm::new(store, &format!("{prefix}.ln_f"), cfg.d_model);
        Ok(Self { cfg, pos, blocks, final_ln })
    }

    /// Input `x` is [n, d_model] of already-embedded positions.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let n = g.value(x).rows();
        if n > self.cfg.max_seq_len {
            return Err(Error::ShapeMismatch(format!(
                "sequence length {} exceeds max {}",
                n, self.cfg.max_seq_len
            )));
        }
        let pos_table = g.param(store, self.pos);
        let pos = g.gather_rows(pos_table, (0..n).collect());
        let mut h = g.add(x, pos);
        for block in &self.blocks {
            h = block.forward(g, store, h, self.cfg.causal);
        }
        Ok(self.final_ln.forward(g, store, h))
    }
}
