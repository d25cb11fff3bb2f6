mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;
use sqlo1::data_prep::{build_psg_corpus, build_sft_corpus, collect_failures, greedy_predictions, mix_corpus};
use sqlo1::db::{introspect_schema, load_tasks, DatabaseCatalog, QueryTask, RewardMode, SqlEnv};
use sqlo1::evaluate::{
    lambda_sweep, read_predictions, run_inference, score_ex, write_jsonl, write_predictions, InferenceOptions,
};
use sqlo1::policy::{Policy, PolicyError, RemotePolicy, ScriptedPolicy};
use sqlo1::search::run_mcts;

use config::{process_env, resolve, CommonArgs, RunConfig};

#[derive(Parser)]
#[command(name = "sqlo1", version, about = "Self-rewarded tree search for text-to-SQL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a database schema as JSON
    Introspect {
        db: PathBuf,
        #[arg(long, default_value_t = sqlo1::db::DEFAULT_SAMPLES_PER_COLUMN)]
        samples: usize,
    },
    /// Search for the SQL answering one question
    Search {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        question: String,
        #[arg(long)]
        evidence: Option<String>,
        /// Gold SQL; enables oracle rewards. Without it the search runs blind.
        #[arg(long)]
        gold: Option<String>,
        /// Print machine-readable stats on stderr
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Search every task in a task file and write predictions
    Batch {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Score predictions by execution accuracy
    Eval {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        /// Also write the full report as JSON
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Build SFT, PSG and mixed training corpora
    Prepare {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        /// Predictions whose failures seed the PSG corpus; without it a
        /// greedy decode with the configured policy is used
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the task file at several pruning strengths
    Sweep {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1.0,0.9,0.8,0.0")]
        lambdas: Vec<f64>,
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        common: CommonArgs,
    },
}

/// A failure and the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

const EXIT_CONFIG: u8 = 1;
const EXIT_SERVICE: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        let unavailable = error.chain().any(|c| {
            matches!(c.downcast_ref::<PolicyError>(), Some(PolicyError::Unavailable(_)))
                || c.downcast_ref::<sqlo1::search::SearchError>().is_some_and(|s| s.is_unavailable())
        });
        Failure {
            code: if unavailable { EXIT_SERVICE } else { EXIT_CONFIG },
            error,
        }
    }
}

type CmdResult = Result<ExitCode, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // usage errors share the configuration exit code; --help and --version succeed
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::Introspect { db, samples } => introspect(&db, samples),
        Command::Search {
            db,
            question,
            evidence,
            gold,
            json,
            common,
        } => search(&db, question, evidence, gold, json, &common),
        Command::Batch { tasks, out, common } => batch(&tasks, &out, &common),
        Command::Eval {
            tasks,
            predictions,
            report,
            common,
        } => eval(&tasks, &predictions, report.as_deref(), &common),
        Command::Prepare {
            tasks,
            out_dir,
            predictions,
            common,
        } => prepare(&tasks, &out_dir, predictions.as_deref(), &common),
        Command::Sweep {
            tasks,
            lambdas,
            json,
            common,
        } => sweep(&tasks, &lambdas, json, &common),
    }
}

fn load_config(common: &CommonArgs) -> Result<RunConfig, Failure> {
    Ok(resolve(common, &process_env)?)
}

fn build_policy(cfg: &RunConfig) -> Result<Arc<dyn Policy>, Failure> {
    if let Some(path) = &cfg.scripted {
        return Ok(Arc::new(ScriptedPolicy::from_file(path)?));
    }
    if cfg.remote.endpoint.is_empty() {
        return Err(anyhow!(
            "no policy configured: pass --scripted <trie.json> or set an endpoint (--endpoint, {} or [remote] endpoint)",
            config::ENV_ENDPOINT
        )
        .into());
    }
    Ok(Arc::new(RemotePolicy::new(cfg.remote.clone())?))
}

fn catalog(cfg: &RunConfig, tasks_file: &Path) -> DatabaseCatalog {
    let root = cfg
        .db_root
        .clone()
        .or_else(|| tasks_file.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    DatabaseCatalog::new(root)
}

fn tasks(path: &Path) -> Result<Vec<QueryTask>, Failure> {
    Ok(load_tasks(path)?)
}

fn options(cfg: &RunConfig) -> InferenceOptions {
    InferenceOptions {
        workers: cfg.workers,
        samples_per_column: cfg.samples_per_column,
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).context("serialising output")?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        // a closed pipe downstream is not our failure
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(anyhow::Error::from(e).into()),
        _ => Ok(()),
    }
}

fn introspect(db: &Path, samples: usize) -> CmdResult {
    let schema = introspect_schema(db, samples)?;
    print_json(&schema)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct SearchStatsLine<'a> {
    predicted_sql: &'a str,
    leaf_q: f64,
    exec_reward: i8,
    reward_mode: RewardMode,
    #[serde(flatten)]
    stats: &'a sqlo1::search::SearchStats,
}

fn search(
    db: &Path,
    question: String,
    evidence: Option<String>,
    gold: Option<String>,
    json: bool,
    common: &CommonArgs,
) -> CmdResult {
    let mut cfg = load_config(common)?;
    if gold.is_none() && cfg.search.reward_mode == RewardMode::Oracle {
        log::info!("no gold SQL given; searching in blind mode");
        cfg.search.reward_mode = RewardMode::Blind;
    }
    let policy = build_policy(&cfg)?;
    let mut schema = introspect_schema(db, cfg.samples_per_column)?;
    schema.db_id = db.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let env = SqlEnv::open(db)?;
    let task = QueryTask {
        id: "0".into(),
        question,
        db_id: schema.db_id.clone(),
        gold_sql: gold,
        evidence,
    };
    let out = run_mcts(&task, &schema, policy.as_ref(), &env, &cfg.search)?;
    println!("{}", out.final_sql.replace('\n', " "));
    if json {
        let line = SearchStatsLine {
            predicted_sql: &out.final_sql,
            leaf_q: out.leaf_q,
            exec_reward: out.exec_reward.value(),
            reward_mode: cfg.search.reward_mode,
            stats: &out.stats,
        };
        eprintln!("{}", serde_json::to_string(&line).context("serialising stats")?);
    } else {
        let s = &out.stats;
        eprintln!(
            "leaf_q {:.4}, exec_reward {}, rollouts {}, nodes {}, {:.1} ms{}{}",
            out.leaf_q,
            out.exec_reward.value(),
            s.rollouts_used,
            s.nodes_created,
            s.elapsed_ms,
            if s.early_stopped { ", early stop" } else { "" },
            if s.fallback { ", greedy fallback" } else { "" },
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn batch(tasks_file: &Path, out: &Path, common: &CommonArgs) -> CmdResult {
    let cfg = load_config(common)?;
    let policy = build_policy(&cfg)?;
    let tasks = tasks(tasks_file)?;
    let results = run_inference(&tasks, &catalog(&cfg, tasks_file), policy.as_ref(), &cfg.search, &options(&cfg))?;
    write_predictions(out, &results)?;
    let failed = results.iter().filter(|r| r.is_failed()).count();
    let unavailable = results.iter().filter(|r| r.is_unavailable()).count();
    eprintln!("{} records written to {}, {failed} failed", results.len(), out.display());
    if !results.is_empty() && unavailable == results.len() {
        eprintln!("error: policy unavailable for every task");
        return Ok(ExitCode::from(EXIT_SERVICE));
    }
    Ok(if failed > 0 { ExitCode::from(EXIT_PARTIAL) } else { ExitCode::SUCCESS })
}

fn eval(tasks_file: &Path, predictions: &Path, report_path: Option<&Path>, common: &CommonArgs) -> CmdResult {
    let cfg = load_config(common)?;
    let tasks = tasks(tasks_file)?;
    let preds = read_predictions(predictions)?;
    let report = score_ex(&preds, &tasks, &catalog(&cfg, tasks_file), cfg.workers)?;
    println!("{}", report.summary());
    if let Some(p) = report_path {
        std::fs::write(p, serde_json::to_string_pretty(&report).context("serialising report")?)
            .with_context(|| format!("cannot write {}", p.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct PrepareSummary {
    sft: usize,
    sft_skipped: usize,
    failures: usize,
    psg: usize,
    psg_skipped: usize,
    train: usize,
    train_psg: usize,
    psg_ratio: f64,
}

fn prepare(tasks_file: &Path, out_dir: &Path, predictions: Option<&Path>, common: &CommonArgs) -> CmdResult {
    let cfg = load_config(common)?;
    let tasks = tasks(tasks_file)?;
    let cat = catalog(&cfg, tasks_file);
    let (sft, sft_skipped) = build_sft_corpus(&tasks, &cat, cfg.samples_per_column, cfg.workers);

    let preds = match predictions {
        Some(p) => read_predictions(p)?,
        None => {
            let policy = build_policy(&cfg)?;
            let preds = greedy_predictions(&tasks, &cat, policy.as_ref(), &cfg.search, cfg.samples_per_column, cfg.workers);
            if !preds.is_empty() && preds.iter().all(|p| p.is_unavailable()) {
                return Err(Failure {
                    code: EXIT_SERVICE,
                    error: anyhow!("policy unavailable for every task"),
                });
            }
            preds
        }
    };
    let failures = collect_failures(&preds, &tasks, &cat, cfg.workers)?;
    let (psg, psg_skipped) = build_psg_corpus(
        &failures,
        &cat,
        cfg.prepare.sample_per_query,
        cfg.samples_per_column,
        cfg.workers,
    );
    let train = mix_corpus(&sft, &psg, cfg.prepare.psg_ratio, cfg.seed)?;

    write_jsonl(&out_dir.join("sft.jsonl"), &sft)?;
    write_jsonl(&out_dir.join("psg.jsonl"), &psg)?;
    write_jsonl(&out_dir.join("train.jsonl"), &train)?;
    let summary = PrepareSummary {
        sft: sft.len(),
        sft_skipped: sft_skipped.len(),
        failures: failures.len(),
        psg: psg.len(),
        psg_skipped: psg_skipped.len(),
        train: train.len(),
        train_psg: train.len() - sft.len(),
        psg_ratio: cfg.prepare.psg_ratio,
    };
    print_json(&summary)?;
    Ok(ExitCode::SUCCESS)
}

fn sweep(tasks_file: &Path, lambdas: &[f64], json: bool, common: &CommonArgs) -> CmdResult {
    let cfg = load_config(common)?;
    for &l in lambdas {
        if !(0.0..=1.0).contains(&l) {
            return Err(anyhow!("lambda {l} outside [0, 1]").into());
        }
    }
    let policy = build_policy(&cfg)?;
    let tasks = tasks(tasks_file)?;
    let rows = lambda_sweep(
        &tasks,
        &catalog(&cfg, tasks_file),
        policy.as_ref(),
        &cfg.search,
        lambdas,
        &options(&cfg),
    )?;
    if json {
        print_json(&rows)?;
    } else {
        println!("{:>6}  {:>6}  {:>12}  {:>10}  {:>10}", "lambda", "EX", "mean_ms", "prune_rate", "mean_nodes");
        for r in &rows {
            println!(
                "{:>6.2}  {:>6.4}  {:>12.3}  {:>10.4}  {:>10.2}",
                r.lambda, r.ex, r.mean_time_ms, r.early_prune_rate, r.mean_nodes
            );
        }
    }
    Ok(if rows.iter().any(|r| r.failures > 0) { ExitCode::from(EXIT_PARTIAL) } else { ExitCode::SUCCESS })
}
