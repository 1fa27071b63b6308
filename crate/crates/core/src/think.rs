//! Reasoning client: prompt construction from recent performance indicators,
//! CoT generation (scripted oracle, noisy oracle, or a remote chat-completion
//! service), response parsing, the hallucination check, and the asynchronous
//! per-step scheduler used during evaluation.

use std::collections::HashMap;
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective;

pub const PROMPT_TEMPLATE_VERSION: &str = "prompt-v1";
/// Number of history timesteps rendered into the prompt.
pub const HISTORY_LEN: usize = 4;
/// Environment variable consulted for the remote backend's bearer token.
pub const AUTH_TOKEN_ENV: &str = "AUTOBID_API_TOKEN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "INCREASE")]
    Increase,
    #[serde(rename = "DECREASE")]
    Decrease,
    #[serde(rename = "NONE")]
    None,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Increase => "INCREASE",
            Direction::Decrease => "DECREASE",
            Direction::None => "NONE",
        }
    }

    pub fn from_str(s: &str) -> Direction {
        match s.trim() {
            "INCREASE" => Direction::Increase,
            "DECREASE" => Direction::Decrease,
            _ => Direction::None,
        }
    }

    pub fn flipped(self) -> Direction {
        match self {
            Direction::Increase => Direction::Decrease,
            Direction::Decrease => Direction::Increase,
            Direction::None => Direction::None,
        }
    }
}

/// Per-step performance indicators rendered as one prompt table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepIndicators {
    pub t: usize,
    pub conversions: f64,
    pub spend: f64,
    pub remaining_budget: f64,
    /// mean impression value x opportunity count
    pub predicted_impression_value: f64,
    pub action: f64,
}

/// Everything the prompt template consumes for one decision step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    /// Most recent steps first-to-last; at most [`HISTORY_LEN`] entries.
    pub history: Vec<StepIndicators>,
    pub cumulative_cost: f64,
    pub cumulative_conversions: f64,
    pub constraint: f64,
    pub t: usize,
}

impl PromptContext {
    /// The ratio the reasoner is expected to derive from the raw numbers.
    pub fn computed_cpa_ratio(&self) -> f64 {
        objective::cpa_ratio(self.cumulative_cost, self.cumulative_conversions, self.constraint)
            .unwrap_or(objective::SENTINEL_CPA_RATIO)
    }
}

/// Deterministic template rendering. Only raw numbers are included; the
/// responder must derive the CPA ratio itself.
pub fn build_prompt(ctx: &PromptContext) -> Result<String> {
    if ctx.history.is_empty() {
        return Err(Error::InvalidArgument("prompt context needs at least one history step".into()));
    }
    if ctx.history.len() > HISTORY_LEN {
        return Err(Error::InvalidArgument(format!(
            "prompt history exceeds {HISTORY_LEN} steps"
        )));
    }
    let mut out = String::new();
    out.push_str(&format!("[{PROMPT_TEMPLATE_VERSION}]\n"));
    out.push_str(&format!(
        "You manage bidding for an ad campaign. Current timestep: {}.\n",
        ctx.t
    ));
    out.push_str(&format!(
        "Cost-per-action constraint C: {:.2}\n", ctx.constraint
    ));
    out.push_str(&format!(
        "Cumulative cost so far: {:.2}\nCumulative conversions so far: {:.4}\n",
        ctx.cumulative_cost, ctx.cumulative_conversions
    ));
    out.push_str("Recent history (oldest first):\n");
    out.push_str("step | conversions | spend | remaining_budget | predicted_impression_value | action\n");
    for h in &ctx.history {
        out.push_str(&format!(
            "{} | {:.4} | {:.2} | {:.2} | {:.2} | {:.4}\n",
            h.t, h.conversions, h.spend, h.remaining_budget, h.predicted_impression_value, h.action
        ));
    }
    out.push_str(
        "First compute the CPA ratio: (cumulative cost / cumulative conversions) divided by C. \
         Reason briefly about pacing and constraint pressure, then conclude with exactly one \
         final line of the form \"DIRECTION: INCREASE\" or \"DIRECTION: DECREASE\" stating how \
         the bidding parameter should move.\n",
    );
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotResponse {
    pub text: String,
    pub claimed_cpa_ratio: Option<f64>,
    pub direction: Direction,
    pub diagnostics: Vec<String>,
}

impl CotResponse {
    /// The fallback used whenever no CoT is available in time.
    pub fn empty() -> Self {
        Self {
            text: String::new(),
            claimed_cpa_ratio: None,
            direction: Direction::None,
            diagnostics: Vec::new(),
        }
    }
}

/// Total parser: extracts the final DIRECTION line and the last decimal
/// following "CPA ratio" phrasing. Never fails; ambiguity lands in
/// diagnostics with direction NONE.
pub fn parse_cot(text: &str) -> CotResponse {
    use std::sync::OnceLock;
    static DIR_RE: OnceLock<regex::Regex> = OnceLock::new();
    static RATIO_RE: OnceLock<regex::Regex> = OnceLock::new();
    let dir_re = DIR_RE
        .get_or_init(|| regex::Regex::new(r"(?m)^\s*DIRECTION:\s*(INCREASE|DECREASE)\s*$").unwrap());
    let ratio_re = RATIO_RE.get_or_init(|| {
        regex::Regex::new(r"(?i)CPA\s+ratio[^0-9\-]*(-?[0-9]+(?:\.[0-9]+)?)").unwrap()
    });

    let mut diagnostics = Vec::new();
    let matches: Vec<_> = dir_re.captures_iter(text).collect();
    let direction = match matches.len() {
        0 => {
            diagnostics.push("no DIRECTION line found".into());
            Direction::None
        }
        1 => Direction::from_str(&matches[0][1]),
        n => {
            diagnostics.push(format!("{n} DIRECTION lines found; last one wins"));
            Direction::from_str(&matches[n - 1][1])
        }
    };
    let claimed = ratio_re
        .captures_iter(text)
        .last()
        .and_then(|c| c[1].parse::<f64>().ok())
        .filter(|r| *r >= 0.0);
    CotResponse {
        text: text.to_string(),
        claimed_cpa_ratio: claimed,
        direction,
        diagnostics,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HallucinationVerdict {
    Pass,
    /// No ratio claim present; nothing to check.
    PassWithWarning,
    Fail,
}

/// Compare the CoT's claimed CPA ratio against the one computed from the
/// context; relative tolerance `tol` (default 0.05 in config).
pub fn hallucination_check(ctx: &PromptContext, cot: &CotResponse, tol: f64) -> HallucinationVerdict {
    match cot.claimed_cpa_ratio {
        None => HallucinationVerdict::PassWithWarning,
        Some(claimed) => {
            let computed = ctx.computed_cpa_ratio();
            let rel = (claimed - computed).abs() / computed.max(objective::EPS_DIV);
            if rel > tol {
                HallucinationVerdict::Fail
            } else {
                HallucinationVerdict::Pass
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemoteChatConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub timeout_ms: u64,
    pub max_retries: usize,
    pub max_in_flight: usize,
}

impl Default for RemoteChatConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "reasoner".into(),
            temperature: 0.7,
            timeout_ms: 2_000,
            max_retries: 2,
            max_in_flight: 4,
        }
    }
}

/// CoT source. Exactly one variant is active per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ThinkBackend {
    /// Rule-based CoT: DECREASE iff the computed CPA ratio exceeds 1.
    ScriptedOracle,
    /// Scripted oracle whose direction is flipped with probability `noise_rate`
    /// (creates group diversity for the selection pipeline).
    NoisyOracle { noise_rate: f64 },
    RemoteChat(RemoteChatConfig),
}

/// Anything able to produce CoTs for a context; lets tests inject faults.
pub trait CotGenerator: Send + Sync {
    fn generate(&self, ctx: &PromptContext, n: usize, seed: u64) -> Result<Vec<CotResponse>>;
}

fn scripted_cot(ctx: &PromptContext, direction: Direction) -> CotResponse {
    let ratio = ctx.computed_cpa_ratio();
    let text = format!(
        "Cumulative cost is {:.2} over {:.4} conversions against constraint {:.2}. \
         The CPA ratio is {ratio}. {}\nDIRECTION: {}",
        ctx.cumulative_cost,
        ctx.cumulative_conversions,
        ctx.constraint,
        if ratio > 1.0 {
            "Spending is above the constraint, so bids should come down."
        } else {
            "There is headroom under the constraint, so bids can be raised."
        },
        direction.as_str()
    );
    CotResponse {
        text,
        claimed_cpa_ratio: Some(ratio),
        direction,
        diagnostics: Vec::new(),
    }
}

fn remote_generate(
    cfg: &RemoteChatConfig,
    prompt: &str,
    n: usize,
) -> Result<Vec<CotResponse>> {
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_millis(cfg.timeout_ms.max(1)))
        .build()
        .map_err(|e| Error::BackendUnavailable(e.to_string()))?;
    let body = serde_json::json!({
        "model": cfg.model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": cfg.temperature,
        "n": n,
    });
    let mut last_err = String::new();
    for _ in 0..=cfg.max_retries {
        let mut req = client.post(&cfg.endpoint).json(&body);
        if let Ok(token) = std::env::var(AUTH_TOKEN_ENV) {
            req = req.bearer_auth(token);
        }
        match req.send() {
            Ok(resp) if resp.status().is_success() => {
                let v: serde_json::Value =
                    resp.json().map_err(|e| Error::BackendUnavailable(e.to_string()))?;
                let choices = v["choices"]
                    .as_array()
                    .ok_or_else(|| Error::BackendUnavailable("malformed chat response".into()))?;
                return Ok(choices
                    .iter()
                    .map(|c| parse_cot(c["message"]["content"].as_str().unwrap_or_default()))
                    .collect());
            }
            Ok(resp) => last_err = format!("http status {}", resp.status()),
            Err(e) => last_err = e.to_string(),
        }
    }
    Err(Error::BackendUnavailable(last_err))
}

impl CotGenerator for ThinkBackend {
    fn generate(&self, ctx: &PromptContext, n: usize, seed: u64) -> Result<Vec<CotResponse>> {
        if n == 0 {
            return Err(Error::InvalidArgument("n must be >= 1".into()));
        }
        match self {
            ThinkBackend::ScriptedOracle => {
                let dir = if ctx.computed_cpa_ratio() > 1.0 {
                    Direction::Decrease
                } else {
                    Direction::Increase
                };
                Ok((0..n).map(|_| scripted_cot(ctx, dir)).collect())
            }
            ThinkBackend::NoisyOracle { noise_rate } => {
                use rand::Rng;
                use rand_chacha::rand_core::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let base = if ctx.computed_cpa_ratio() > 1.0 {
                    Direction::Decrease
                } else {
                    Direction::Increase
                };
                Ok((0..n)
                    .map(|_| {
                        let dir = if rng.gen::<f64>() < *noise_rate { base.flipped() } else { base };
                        scripted_cot(ctx, dir)
                    })
                    .collect())
            }
            ThinkBackend::RemoteChat(cfg) => {
                let prompt = build_prompt(ctx)?;
                remote_generate(cfg, &prompt, n)
            }
        }
    }
}

pub fn generate_cot(
    backend: &dyn CotGenerator,
    ctx: &PromptContext,
    n: usize,
    seed: u64,
) -> Result<Vec<CotResponse>> {
    backend.generate(ctx, n, seed)
}

/// Runs CoT generation ahead of the decision loop: the CoT for step t is
/// requested at step t-1 and collected with a hard deadline; a miss falls
/// back to the empty CoT and is counted, never blocking the episode.
pub struct ThinkScheduler {
    backend: Arc<dyn CotGenerator>,
    deadline: Duration,
    pending: HashMap<usize, mpsc::Receiver<Result<Vec<CotResponse>>>>,
    misses: usize,
}

impl ThinkScheduler {
    pub fn new(backend: Arc<dyn CotGenerator>, deadline: Duration) -> Self {
        Self { backend, deadline, pending: HashMap::new(), misses: 0 }
    }

    /// Kick off generation for `step` (normally called while deciding step-1).
    pub fn request(&mut self, step: usize, ctx: PromptContext, seed: u64) {
        let (tx, rx) = mpsc::channel();
        let backend = Arc::clone(&self.backend);
        std::thread::spawn(move || {
            let _ = tx.send(backend.generate(&ctx, 1, seed));
        });
        self.pending.insert(step, rx);
    }

    /// Collect the CoT for `step`, waiting at most the deadline. Missing or
    /// failed generations degrade to the empty CoT.
    pub fn collect(&mut self, step: usize) -> CotResponse {
        match self.pending.remove(&step) {
            None => {
                self.misses += 1;
                CotResponse::empty()
            }
            Some(rx) => match rx.recv_timeout(self.deadline) {
                Ok(Ok(mut v)) if !v.is_empty() => v.remove(0),
                _ => {
                    self.misses += 1;
                    CotResponse::empty()
                }
            },
        }
    }

    pub fn misses(&self) -> usize {
        self.misses
    }
}
