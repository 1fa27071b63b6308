//! Acceptance suite: one test per criterion, each printing a single
//! PASS line (visible with `--nocapture`) once its assertions hold.

use std::sync::{Arc, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use autobid_core::act::{
    anchor_filter, assemble_samples, train_act, ActModel, ActModelConfig,
};
use autobid_core::config::{EvalConfig, ThinkConfig};
use autobid_core::dataset::{generate_trajectories, CotRecord, DatasetStats};
use autobid_core::eval::{evaluate, run_sweep, SweepAxis, SweepSpec};
use autobid_core::gqpo::{export_sft, prompt_context, read_sft, select_best, GqpoRecord};
use autobid_core::iql::{toy, train_iql};
use autobid_core::nn::gradcheck::grad_check;
use autobid_core::nn::graph::Graph;
use autobid_core::nn::layers::{Mlp, MultiHeadAttention};
use autobid_core::nn::optim::{adamw_step, AdamWConfig, ParamStore};
use autobid_core::nn::tensor::Tensor;
use autobid_core::objective::{penalty, score};
use autobid_core::sim::{
    run_auction, BidEnv, EpisodeConfig, ImpressionOpportunity, Trajectory,
};
use autobid_core::think::{CotGenerator, RemoteChatConfig, ThinkBackend};

fn pass(n: usize, what: &str, detail: &str) {
    println!("PASS criterion {n:>2} ({what}): {detail}");
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness of each network component.
// ---------------------------------------------------------------------------
#[test]
fn criterion_01_gradient_correctness() {
    let start = Instant::now();
    let tol = 1e-4;
    let eps = 1e-6; // small step keeps finite differences off the ReLU kinks
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    // attention block (d=4, 2 heads, 3 positions, causal)
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", 4, 2, &mut rng);
    let x = store.add("x", Tensor::randn(vec![3, 4], 1.0, &mut rng));
    let err_attn = grad_check(
        |g, s| {
            let xin = g.param(s, x);
            let out = mha.forward(g, s, xin, true);
            Ok(g.sum_all(out))
        },
        &mut store,
        eps,
    )
    .unwrap();
    assert!(err_attn < tol, "attention rel err {err_attn}");

    // decision-embed MLP (ReLU hidden layer)
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "embed", 4, &[6, 4], &mut rng);
    let x = store.add("x", Tensor::randn(vec![2, 4], 1.0, &mut rng));
    let err_mlp = grad_check(
        |g, s| {
            let xin = g.param(s, x);
            let out = mlp.forward(g, s, xin);
            Ok(g.sum_all(out))
        },
        &mut store,
        eps,
    )
    .unwrap();
    assert!(err_mlp < tol, "decision-embed MLP rel err {err_mlp}");

    // action head (scalar output)
    let mut store = ParamStore::new();
    let head = Mlp::new(&mut store, "head", 4, &[6, 1], &mut rng);
    let x = store.add("x", Tensor::randn(vec![2, 4], 1.0, &mut rng));
    let err_head = grad_check(
        |g, s| {
            let xin = g.param(s, x);
            let out = head.forward(g, s, xin);
            Ok(g.sum_all(out))
        },
        &mut store,
        eps,
    )
    .unwrap();
    assert!(err_head < tol, "action head rel err {err_head}");

    // expectile loss on a residual vector
    let mut store = ParamStore::new();
    let u = store.add("u", Tensor::randn(vec![8], 1.0, &mut rng));
    let err_exp = grad_check(
        |g, s| {
            let uin = g.param(s, u);
            g.expectile(uin, 0.7)
        },
        &mut store,
        eps,
    )
    .unwrap();
    assert!(err_exp < tol, "expectile rel err {err_exp}");

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "gradient suite took {elapsed:?}");
    pass(
        1,
        "gradient correctness",
        &format!(
            "attention {err_attn:.2e}, embed MLP {err_mlp:.2e}, head {err_head:.2e}, expectile {err_exp:.2e} (< {tol:.0e}) in {elapsed:?}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. Expectile identities.
// ---------------------------------------------------------------------------
#[test]
fn criterion_02_expectile_identities() {
    // tau = 0.5 equals half the mean squared error
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let residuals: Vec<f64> = (0..64).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let mut g = Graph::new();
    let u = g.leaf(Tensor::new(vec![residuals.len()], residuals.clone()).unwrap());
    let loss = g.expectile(u, 0.5).unwrap();
    let got = g.value(loss).item();
    let half_mse =
        0.5 * residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64;
    assert!((got - half_mse).abs() < 1e-9, "{got} vs {half_mse}");

    // optimal constant under tau = 0.5 on the two-point {0, 10} set is 5
    let mut store = ParamStore::new();
    let v = store.add("v", Tensor::zeros(vec![1, 1]));
    let opt = AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() };
    for _ in 0..2_000 {
        let mut g = Graph::new();
        let vin = g.param(&store, v);
        let broadcast = g.gather_rows(vin, vec![0, 0]);
        let targets = g.leaf(Tensor::new(vec![2, 1], vec![0.0, 10.0]).unwrap());
        let resid = g.sub(targets, broadcast);
        let loss = g.expectile(resid, 0.5).unwrap();
        g.backward(loss).unwrap();
        let grads = g.param_grads();
        adamw_step(&mut store, &grads, &opt).unwrap();
    }
    let learned = store.get(v).data[0];
    assert!((learned - 5.0).abs() < 1e-2, "learned constant {learned}");
    pass(
        2,
        "expectile identities",
        &format!("tau=0.5 loss == MSE/2 to 1e-9; two-point optimum {learned:.4} == 5 +- 1e-2"),
    );
}

// ---------------------------------------------------------------------------
// 3. IQL matches a value-iteration oracle on a deterministic chain.
// ---------------------------------------------------------------------------
#[test]
fn criterion_03_iql_chain_oracle() {
    let start = Instant::now();
    let trajs = toy::rollouts(200, 12, 3);
    let (model, _log) = train_iql(&trajs, toy::toy_config()).unwrap();
    let oracle = toy::value_iteration();
    let mut worst = 0.0_f64;
    for s in 0..toy::N_STATES - 1 {
        for (a_idx, &a) in [0.0, 1.0].iter().enumerate() {
            let (q, _) = model.q_value(&[toy::encode(s)], &[], a).unwrap();
            let target = oracle[s][a_idx];
            let rel = (q - target).abs() / target.abs().max(1e-6);
            assert!(rel < 0.05, "state {s} action {a}: {q:.4} vs {target:.4} (rel {rel:.4})");
            worst = worst.max(rel);
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 120, "IQL chain took {elapsed:?}");
    pass(
        3,
        "IQL chain oracle",
        &format!("worst relative error {worst:.4} (< 0.05) over all (s, a) in {elapsed:?}"),
    );
}

// ---------------------------------------------------------------------------
// 4. Metric exactness.
// ---------------------------------------------------------------------------
#[test]
fn criterion_04_metric_exactness() {
    assert!((penalty(2.0) - 0.25).abs() < 1e-12);
    assert!((penalty(1.0) - 1.0).abs() < 1e-12);
    assert!((penalty(0.5) - 1.0).abs() < 1e-12);
    assert!((score(100.0, 2.0) - 25.0).abs() < 1e-12);
    pass(4, "metric exactness", "penalty(2)=0.25, penalty(1)=1, penalty(0.5)=1, score(100,2)=25");
}

// ---------------------------------------------------------------------------
// 5. Group selection equals a brute-force oracle; exports are clean and
//    round-trip losslessly.
// ---------------------------------------------------------------------------
#[test]
fn criterion_05_group_selection() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut agreements = 0usize;
    let mut records = Vec::new();
    for i in 0..1_000u64 {
        let n = rng.gen_range(2..=6);
        let delta_qs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // brute force: lowest index among maxima, but only when positive
        let mut oracle: Option<usize> = None;
        for (j, &dq) in delta_qs.iter().enumerate() {
            if dq > 0.0 && oracle.map_or(true, |b| dq > delta_qs[b]) {
                oracle = Some(j);
            }
        }
        let got = select_best(&delta_qs).unwrap();
        assert_eq!(got, oracle, "group {i}: {delta_qs:?}");
        agreements += 1;
        if let Some(j) = got {
            records.push(GqpoRecord {
                prompt: format!("prompt {i}"),
                response: format!("response {i} choice {j}"),
                delta_q: delta_qs[j],
                weight: delta_qs[j].exp(),
                trajectory_id: i,
                t: (i % 7) as usize + 1,
                group_delta_q: delta_qs.clone(),
                rejected: 0,
            });
        }
    }
    assert!(records.iter().all(|r| r.delta_q > 0.0));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sft.jsonl");
    export_sft(&path, &records).unwrap();
    let back = read_sft(&path).unwrap();
    assert_eq!(records, back, "export/read round trip");

    // exporting a non-positive advantage is refused
    let mut bad = records[0].clone();
    bad.delta_q = 0.0;
    assert!(export_sft(&dir.path().join("bad.jsonl"), &[bad]).is_err());
    pass(
        5,
        "group selection",
        &format!(
            "{agreements}/1000 groups match the brute-force oracle; {} exported records all with positive advantage; round trip lossless",
            records.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Anchor-filter soundness.
// ---------------------------------------------------------------------------
#[test]
fn criterion_06_anchor_filter() {
    use autobid_core::think::Direction;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dirs = [Direction::Increase, Direction::Decrease, Direction::None];
    for _ in 0..10_000 {
        let d = dirs[rng.gen_range(0..3)];
        let a_t: f64 = rng.gen_range(-1.0..11.0);
        let a_prev: f64 = if rng.gen_bool(0.1) { a_t } else { rng.gen_range(-1.0..11.0) };
        let accepted = anchor_filter(d, a_t, a_prev);
        if accepted {
            match d {
                Direction::Increase => assert!(a_t >= a_prev, "INCREASE with {a_t} < {a_prev}"),
                Direction::Decrease => assert!(a_t <= a_prev, "DECREASE with {a_t} > {a_prev}"),
                Direction::None => {}
            }
        } else {
            // only a genuine sign conflict may reject
            assert!(d != Direction::None && a_t != a_prev);
        }
    }
    pass(6, "anchor filter", "10000 random triples: no accepted sample violates sign agreement");
}

// ---------------------------------------------------------------------------
// 7. Simulator invariants.
// ---------------------------------------------------------------------------
#[test]
fn criterion_07_simulator_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // 1000 random episodes never overspend
    for i in 0..1_000u64 {
        let cfg = EpisodeConfig {
            num_steps: 6,
            impressions_per_step: rng.gen_range(10..60),
            budget: rng.gen_range(5.0..400.0),
            rng_seed: i,
            ..Default::default()
        };
        let mut env = BidEnv::new(cfg.clone()).unwrap();
        for _ in 0..cfg.num_steps {
            env.step(rng.gen_range(0.0..10.0)).unwrap();
        }
        assert!(
            env.spent() <= cfg.budget + 1e-9,
            "episode {i}: spent {} over budget {}",
            env.spent(),
            cfg.budget
        );
    }

    // second-price rule: every win costs at most the bid
    for _ in 0..10_000 {
        let opp = ImpressionOpportunity {
            value: rng.gen_range(0.0..1.0),
            competitor_bids: (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0.0..8.0)).collect(),
            constraint_perf: vec![1.0],
        };
        let bid = rng.gen_range(0.0..8.0);
        let out = run_auction(bid, &opp, false, &mut rng).unwrap();
        if out.won {
            assert!(out.cost <= bid + 1e-12, "won at cost {} with bid {bid}", out.cost);
        }
    }

    // byte-identical rollouts under a fixed seed
    let base = EpisodeConfig { num_steps: 8, impressions_per_step: 40, ..Default::default() };
    let names = vec!["random-walk".to_string(), "noisy-pid".to_string()];
    let a = generate_trajectories(&base, &names, 5).unwrap();
    let b = generate_trajectories(&base, &names, 5).unwrap();
    let bytes_a = serde_json::to_vec(&a).unwrap();
    let bytes_b = serde_json::to_vec(&b).unwrap();
    assert_eq!(bytes_a, bytes_b, "rollouts differ under the same seed");
    pass(
        7,
        "simulator invariants",
        "1000 episodes within budget; 10000 auctions cost <= bid; seeded rollouts byte-identical",
    );
}

// ---------------------------------------------------------------------------
// 8. End-to-end learning signal on the decision model.
// ---------------------------------------------------------------------------
#[test]
fn criterion_08_learning_signal() {
    // 200 trajectories from the full-size simulator configuration
    let base = EpisodeConfig::default();
    let names: Vec<String> =
        ["random-walk", "noisy-pid", "constraint-aware"].map(String::from).to_vec();
    let trajs = generate_trajectories(&base, &names, 67).unwrap();
    assert!(trajs.len() >= 200);
    let stats = DatasetStats::compute(&trajs).unwrap();
    let cfg = ActModelConfig::default();
    let mut model = ActModel::new(cfg.clone(), stats.clone(), 8).unwrap();
    let samples = assemble_samples(&trajs, &[], &cfg, &stats, 0.0).unwrap();

    // train in chunks; stop as soon as the smoothed loss has halved
    let mut all_losses: Vec<f64> = Vec::new();
    let opt = AdamWConfig::with_lr(1e-3);
    let mut halved = false;
    let mut initial = f64::NAN;
    for chunk in 0..20 {
        let losses = train_act(&mut model, &samples, 100, 8, &opt, chunk).unwrap();
        all_losses.extend(losses);
        if all_losses.len() >= 20 {
            initial = all_losses[..10].iter().sum::<f64>() / 10.0;
            let tail = &all_losses[all_losses.len() - 10..];
            let recent = tail.iter().sum::<f64>() / 10.0;
            if recent <= 0.5 * initial {
                halved = true;
                break;
            }
        }
    }
    assert!(
        halved,
        "loss did not halve within {} steps (initial {initial:.4}, last {:.4})",
        all_losses.len(),
        all_losses.last().unwrap()
    );

    // a constant-action dataset is fit to within 0.1
    let mut const_trajs = trajs[..12].to_vec();
    for t in &mut const_trajs {
        for a in &mut t.actions {
            *a = 4.0;
        }
    }
    let const_stats = DatasetStats::compute(&const_trajs).unwrap();
    let small = ActModelConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        window: 3,
        max_cot_len: 16,
        decision_mlp_widths: vec![16, 16],
        action_head_widths: vec![16, 1],
        ..Default::default()
    };
    let mut const_model = ActModel::new(small.clone(), const_stats.clone(), 1).unwrap();
    let const_samples = assemble_samples(&const_trajs, &[], &small, &const_stats, 0.0).unwrap();
    let losses =
        train_act(&mut const_model, &const_samples, 150, 16, &AdamWConfig::with_lr(3e-3), 1)
            .unwrap();
    let fit = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(fit < 0.1, "constant-action fit {fit}");
    pass(
        8,
        "learning signal",
        &format!(
            "loss halved after {} steps ({initial:.3} -> <= {:.3}); constant-action fit {fit:.4} < 0.1",
            all_losses.len(),
            0.5 * initial
        ),
    );
}

// ---------------------------------------------------------------------------
// Shared model stack for the directional criteria (9-11): a decision model
// trained on mixed behavior policies with oracle CoT annotations.
// ---------------------------------------------------------------------------
struct Stack {
    act: ActModel,
    sim: EpisodeConfig,
    think: ThinkConfig,
}

fn stack() -> &'static Stack {
    static STACK: OnceLock<Stack> = OnceLock::new();
    STACK.get_or_init(|| {
        let sim = EpisodeConfig {
            num_steps: 16,
            impressions_per_step: 250,
            budget: 3_000.0,
            rng_seed: 17,
            ..Default::default()
        };
        let names: Vec<String> =
            ["random-walk", "noisy-pid", "constraint-aware"].map(String::from).to_vec();
        let trajs = generate_trajectories(&sim, &names, 12).unwrap();
        let oracle = ThinkBackend::ScriptedOracle;
        let mut cots = Vec::new();
        for traj in &trajs {
            for t in 1..traj.len() {
                let ctx = prompt_context(traj, t).unwrap();
                let resp = oracle.generate(&ctx, 1, traj.id * 31 + t as u64).unwrap().remove(0);
                cots.push(CotRecord {
                    trajectory_id: traj.id,
                    t,
                    text: resp.text,
                    direction: resp.direction.as_str().to_string(),
                });
            }
        }
        let stats = DatasetStats::compute(&trajs).unwrap();
        let cfg = ActModelConfig {
            d_model: 32,
            n_heads: 2,
            n_layers: 1,
            window: 6,
            max_cot_len: 48,
            decision_mlp_widths: vec![32, 32],
            action_head_widths: vec![32, 1],
            return_scale: stats.max_return.max(1.0),
            ..Default::default()
        };
        let mut act = ActModel::new(cfg.clone(), stats.clone(), 9).unwrap();
        let samples = assemble_samples(&trajs, &cots, &cfg, &stats, 0.0).unwrap();
        train_act(&mut act, &samples, 700, 16, &AdamWConfig::with_lr(1e-3), 9).unwrap();
        Stack { act, sim, think: ThinkConfig::default() }
    })
}

fn eval_with(stack: &Stack, eval_cfg: &EvalConfig) -> autobid_core::eval::EvalSummary {
    evaluate(
        &stack.act,
        &stack.sim,
        Arc::new(ThinkBackend::ScriptedOracle),
        &stack.think,
        eval_cfg,
    )
    .unwrap()
}

// ---------------------------------------------------------------------------
// 9. CoT utility: oracle CoT does not hurt the score.
// ---------------------------------------------------------------------------
#[test]
fn criterion_09_cot_utility() {
    let s = stack();
    let base = EvalConfig { episodes: 24, seed: 100, ..Default::default() };
    let with_cot = eval_with(s, &base);
    let without = eval_with(s, &EvalConfig { use_cot: false, ..base });
    let delta = with_cot.mean_score - without.mean_score;
    assert!(
        with_cot.mean_score >= without.mean_score,
        "CoT score {:.3} < empty-CoT score {:.3}",
        with_cot.mean_score,
        without.mean_score
    );
    pass(
        9,
        "CoT utility",
        &format!(
            "24 paired episodes: score with CoT {:.3} >= without {:.3} (delta {delta:+.3})",
            with_cot.mean_score, without.mean_score
        ),
    );
}

// ---------------------------------------------------------------------------
// 10. Instruction following: forced DECREASE yields a CPA ratio no higher
//     than forced INCREASE.
// ---------------------------------------------------------------------------
#[test]
fn criterion_10_instruction_following() {
    let s = stack();
    let base = EvalConfig { episodes: 24, seed: 300, ..Default::default() };
    let dec = eval_with(s, &EvalConfig { instruction_override: "DECREASE".into(), ..base.clone() });
    let inc = eval_with(s, &EvalConfig { instruction_override: "INCREASE".into(), ..base });
    assert!(
        dec.mean_cpa_ratio <= inc.mean_cpa_ratio,
        "DECREASE ratio {:.4} > INCREASE ratio {:.4}",
        dec.mean_cpa_ratio,
        inc.mean_cpa_ratio
    );
    pass(
        10,
        "instruction following",
        &format!(
            "24 paired episodes: CPA ratio {:.4} (forced DECREASE) <= {:.4} (forced INCREASE)",
            dec.mean_cpa_ratio, inc.mean_cpa_ratio
        ),
    );
}

// ---------------------------------------------------------------------------
// 11. Budget monotonicity.
// ---------------------------------------------------------------------------
#[test]
fn criterion_11_budget_monotonicity() {
    let s = stack();
    // base budget low enough that every cell's budget constraint binds
    let sim = EpisodeConfig { budget: 1_500.0, ..s.sim.clone() };
    let spec = SweepSpec {
        axis: SweepAxis::BudgetRatio,
        values: vec!["0.5".into(), "1.0".into(), "1.5".into()],
        episodes_per_cell: 10,
        seed: 500,
    };
    let rows = run_sweep(
        &s.act,
        &sim,
        Arc::new(ThinkBackend::ScriptedOracle),
        &s.think,
        &EvalConfig::default(),
        &spec,
    )
    .unwrap();
    for pair in rows.windows(2) {
        assert!(
            pair[1].mean_conversions >= pair[0].mean_conversions,
            "conversions fell from {:.2} (ratio {}) to {:.2} (ratio {})",
            pair[0].mean_conversions,
            pair[0].value,
            pair[1].mean_conversions,
            pair[1].value
        );
    }
    let summary: Vec<String> =
        rows.iter().map(|r| format!("{}x -> {:.2}", r.value, r.mean_conversions)).collect();
    pass(
        11,
        "budget monotonicity",
        &format!("mean conversions over 10 seeds per cell: {}", summary.join(", ")),
    );
}

// ---------------------------------------------------------------------------
// 12. Asynchrony and liveness under a fault-injected remote backend.
// ---------------------------------------------------------------------------
#[test]
fn criterion_12_asynchrony_liveness() {
    let s = stack();
    let sim = EpisodeConfig { num_steps: 6, ..s.sim.clone() };
    let backend = ThinkBackend::RemoteChat(RemoteChatConfig {
        endpoint: "http://127.0.0.1:1/unreachable".into(),
        timeout_ms: 10,
        max_retries: 0,
        ..Default::default()
    });
    let think = ThinkConfig { deadline_ms: 40, ..Default::default() };
    let eval_cfg = EvalConfig { episodes: 4, seed: 900, ..Default::default() };
    let start = Instant::now();
    let summary = evaluate(&s.act, &sim, Arc::new(backend), &think, &eval_cfg).unwrap();
    let elapsed = start.elapsed();
    for e in &summary.episodes {
        assert_eq!(e.actions.len(), sim.num_steps, "episode {} did not complete", e.seed);
        // one request per step after the first, all of which time out
        assert_eq!(e.cot_misses, sim.num_steps - 1, "episode {} miss count", e.seed);
    }
    assert_eq!(summary.total_cot_misses, eval_cfg.episodes * (sim.num_steps - 1));
    // per episode: at most one deadline wait per step plus scheduling slack
    let budget_ms = (eval_cfg.episodes as u64) * (sim.num_steps as u64) * think.deadline_ms + 5_000;
    assert!(
        elapsed.as_millis() <= budget_ms as u128,
        "evaluation took {elapsed:?}, budget {budget_ms} ms"
    );
    pass(
        12,
        "asynchrony/liveness",
        &format!(
            "4 episodes completed in {elapsed:?} with exact miss counts ({} total)",
            summary.total_cot_misses
        ),
    );
}

#[allow(dead_code)]
fn _type_checks(t: &Trajectory) -> usize {
    t.len()
}
