//! Command-line harness: dataset generation, value/decision-model training,
//! SFT export, and evaluation. Exit codes: 0 success, 2 configuration error,
//! 3 missing input artifact, 4 reasoning backend failure, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use autobid_core::act::{assemble_samples, ActModel};
use autobid_core::config::RunConfig;
use autobid_core::dataset::{
    generate_trajectories, read_cot_records, read_trajectories, write_cot_records,
    write_trajectories, CotRecord, DatasetStats,
};
use autobid_core::error::Error;
use autobid_core::eval::{
    behavior_scatter, evaluate, run_sweep, scatter_csv, sweep_csv, SweepAxis, SweepSpec,
};
use autobid_core::gqpo::{export_sft, run_pipeline, write_report};
use autobid_core::iql::{train_iql, write_training_log, IqlModel};
use autobid_core::nn::optim::AdamWConfig;
use autobid_core::think::{CotGenerator, ThinkBackend};

#[derive(Parser)]
#[command(name = "autobid", version, about = "Hierarchical auto-bidding engine")]
struct Cli {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out behavior policies and write the trajectory dataset plus the
    /// scripted-oracle CoT side-file.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// CoT side-file path; defaults to <out> with a .cot.jsonl suffix.
        #[arg(long)]
        cot_out: Option<PathBuf>,
    },
    /// Train the IQL value functions on a trajectory dataset.
    TrainIql {
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the Q/target/V checkpoints and loss log.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train the dual-embedding decision model.
    TrainAct {
        #[arg(long)]
        data: PathBuf,
        /// Optional CoT side-file joined by (trajectory id, step).
        #[arg(long)]
        cot: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score sampled CoT groups against the critic and export accepted
    /// winners as a fine-tuning dataset.
    GqpoExport {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        act: PathBuf,
        #[arg(long)]
        iql_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Selection report path; defaults to <out> with a .report.json suffix.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run evaluation episodes and write the metric summary.
    Evaluate {
        #[arg(long)]
        act: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate across one axis of cells and write a CSV.
    Sweep {
        #[arg(long)]
        act: PathBuf,
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated cell values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long, default_value_t = 10)]
        episodes_per_cell: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect (CPA ratio, action delta) points from evaluation episodes.
    BehaviorScatter {
        #[arg(long)]
        act: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    BudgetRatio,
    RtgWeightW,
    InstructionOverride,
}

impl From<AxisArg> for SweepAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::BudgetRatio => SweepAxis::BudgetRatio,
            AxisArg::RtgWeightW => SweepAxis::RtgWeightW,
            AxisArg::InstructionOverride => SweepAxis::InstructionOverride,
        }
    }
}

/// Provenance sidecar written next to CSV outputs; JSON outputs carry the
/// same fields inline.
#[derive(Serialize)]
struct RunMeta {
    config_hash: String,
    seed: u64,
}

fn write_meta(out: &Path, meta: &RunMeta) -> autobid_core::Result<()> {
    let path = out.with_extension(format!(
        "{}{}",
        out.extension().and_then(|e| e.to_str()).map(|e| format!("{e}.")).unwrap_or_default(),
        "meta.json"
    ));
    std::fs::write(path, serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

fn derive_sidecar(base: &Path, suffix: &str) -> PathBuf {
    let mut name = base.file_stem().and_then(|s| s.to_str()).unwrap_or("out").to_string();
    name.push_str(suffix);
    base.with_file_name(name)
}

fn load_act(path: &Path) -> autobid_core::Result<ActModel> {
    ActModel::load(path)
}

fn scripted_cots(
    trajs: &[autobid_core::sim::Trajectory],
    backend: &dyn CotGenerator,
    seed: u64,
) -> autobid_core::Result<Vec<CotRecord>> {
    let mut records = Vec::new();
    for traj in trajs {
        for t in 1..traj.len() {
            let ctx = autobid_core::gqpo::prompt_context(traj, t)?;
            let resp = backend
                .generate(&ctx, 1, seed.wrapping_add(traj.id * 10007 + t as u64))?
                .into_iter()
                .next()
                .ok_or_else(|| Error::BackendUnavailable("empty CoT batch".into()))?;
            records.push(CotRecord {
                trajectory_id: traj.id,
                t,
                text: resp.text,
                direction: resp.direction.as_str().to_string(),
            });
        }
    }
    Ok(records)
}

fn run(cli: Cli) -> autobid_core::Result<()> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    let meta = RunMeta { config_hash: cfg.hash(), seed: cfg.simulator.rng_seed };

    match cli.command {
        Command::GenData { out, cot_out } => {
            let trajs = generate_trajectories(
                &cfg.simulator,
                &cfg.data.behavior_policies,
                cfg.data.num_periods,
            )?;
            write_trajectories(&out, &trajs)?;
            let cot_path = cot_out.unwrap_or_else(|| derive_sidecar(&out, ".cot.jsonl"));
            let cots = scripted_cots(&trajs, &ThinkBackend::ScriptedOracle, cfg.simulator.rng_seed)?;
            write_cot_records(&cot_path, &cots)?;
            write_meta(&out, &meta)?;
            println!(
                "wrote {} trajectories to {} and {} CoT records to {} (config {})",
                trajs.len(),
                out.display(),
                cots.len(),
                cot_path.display(),
                meta.config_hash
            );
        }
        Command::TrainIql { data, out_dir } => {
            let trajs = read_trajectories(&data)?;
            let (model, log) = train_iql(&trajs, cfg.iql.clone())?;
            std::fs::create_dir_all(&out_dir)?;
            model.save(&out_dir)?;
            write_training_log(&out_dir.join("loss_log.csv"), &log)?;
            write_meta(&out_dir.join("iql"), &meta)?;
            println!(
                "trained IQL on {} trajectories; checkpoints in {} (config {})",
                trajs.len(),
                out_dir.display(),
                meta.config_hash
            );
        }
        Command::TrainAct { data, cot, out } => {
            let trajs = read_trajectories(&data)?;
            let cots = match cot {
                Some(p) => read_cot_records(&p)?,
                None => Vec::new(),
            };
            let stats = DatasetStats::compute(&trajs)?;
            let mut model = ActModel::new(cfg.act_model.clone(), stats.clone(), cfg.act_train.seed)?;
            let samples =
                assemble_samples(&trajs, &cots, &cfg.act_model, &stats, cfg.act_train.rtg_w)?;
            let losses = autobid_core::act::train_act(
                &mut model,
                &samples,
                cfg.act_train.steps,
                cfg.act_train.batch_size,
                &AdamWConfig::with_lr(cfg.act_train.lr),
                cfg.act_train.seed,
            )?;
            model.save(&out)?;
            write_meta(&out, &meta)?;
            let last = losses.last().copied().unwrap_or(f64::NAN);
            println!(
                "trained decision model on {} samples; final loss {last:.4}; saved {} (config {})",
                samples.len(),
                out.display(),
                meta.config_hash
            );
        }
        Command::GqpoExport { data, act, iql_dir, out, report } => {
            let trajs = read_trajectories(&data)?;
            let act_model = load_act(&act)?;
            let iql = IqlModel::load(&iql_dir)?;
            let (records, rep) =
                run_pipeline(&trajs, &act_model, &iql, &cfg.think.backend, &cfg.gqpo)?;
            if records.is_empty() && rep.backend_failures > 0 {
                return Err(Error::BackendUnavailable(format!(
                    "no groups produced ({} backend failures)",
                    rep.backend_failures
                )));
            }
            export_sft(&out, &records)?;
            let report_path = report.unwrap_or_else(|| derive_sidecar(&out, ".report.json"));
            write_report(&report_path, &rep)?;
            write_meta(&out, &meta)?;
            println!(
                "exported {} SFT records ({} groups, acceptance {:.1}%) to {} (config {})",
                records.len(),
                rep.groups_evaluated,
                100.0 * rep.acceptance_rate,
                out.display(),
                meta.config_hash
            );
        }
        Command::Evaluate { act, out } => {
            let act_model = load_act(&act)?;
            let backend: Arc<dyn CotGenerator> = Arc::new(cfg.think.backend.clone());
            let summary =
                evaluate(&act_model, &cfg.simulator, backend, &cfg.think, &cfg.eval)?;
            #[derive(Serialize)]
            struct Out<'a> {
                config_hash: &'a str,
                seed: u64,
                #[serde(flatten)]
                summary: &'a autobid_core::eval::EvalSummary,
            }
            std::fs::write(
                &out,
                serde_json::to_string_pretty(&Out {
                    config_hash: &meta.config_hash,
                    seed: cfg.eval.seed,
                    summary: &summary,
                })?,
            )?;
            println!(
                "{} episodes: mean conversions {:.2}, mean CPA ratio {:.3}, score {:.2}, CoT misses {} -> {} (config {})",
                summary.episodes.len(),
                summary.mean_conversions,
                summary.mean_cpa_ratio,
                summary.mean_score,
                summary.total_cot_misses,
                out.display(),
                meta.config_hash
            );
        }
        Command::Sweep { act, axis, values, episodes_per_cell, out } => {
            let act_model = load_act(&act)?;
            let spec = SweepSpec {
                axis: axis.into(),
                values,
                episodes_per_cell,
                seed: cfg.eval.seed,
            };
            let backend: Arc<dyn CotGenerator> = Arc::new(cfg.think.backend.clone());
            let rows =
                run_sweep(&act_model, &cfg.simulator, backend, &cfg.think, &cfg.eval, &spec)?;
            std::fs::write(&out, sweep_csv(&rows))?;
            write_meta(&out, &meta)?;
            println!("wrote {} sweep rows to {} (config {})", rows.len(), out.display(), meta.config_hash);
        }
        Command::BehaviorScatter { act, samples, out } => {
            let act_model = load_act(&act)?;
            let backend: Arc<dyn CotGenerator> = Arc::new(cfg.think.backend.clone());
            let points = behavior_scatter(
                &act_model,
                &cfg.simulator,
                backend,
                &cfg.think,
                &cfg.eval,
                samples,
            )?;
            std::fs::write(&out, scatter_csv(&points))?;
            write_meta(&out, &meta)?;
            println!("wrote {} scatter points to {} (config {})", points.len(), out.display(), meta.config_hash);
        }
    }
    Ok(())
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::MissingArtifact(_) => 3,
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 3,
        Error::BackendUnavailable(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
