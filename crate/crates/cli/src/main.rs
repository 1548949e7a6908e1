//! `optdisc`: train option-discovery agents and evaluate them.
//!
//! Exit codes: 0 success, 1 invalid usage or configuration (and I/O
//! failures), 2 numerical failure (non-finite training values, failed
//! gradient or KL checks).

mod manifest;

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use optdisc::eval::{self, KlCheck, KL_TOLERANCE};
use optdisc::grad_suite::{self, CASE_NAMES, GRAD_TOLERANCE};
use optdisc::par::Executor;
use optdisc::policy::ActionMode;
use optdisc::tape::OpKind;
use optdisc::trainer::{self, parse_flat, Trainer, TrainerConfig, DEFAULT_PATHS, PAPER_PATHS};

use manifest::{RunManifest, MANIFEST_FILE};

/// Environment variable naming the default root for run directories.
const OUT_ENV: &str = "OPTDISC_OUT";
const DEFAULT_OUT_ROOT: &str = "runs";

#[derive(Parser, Debug)]
#[command(
    name = "optdisc",
    version,
    about = "Variational option discovery: VALOR, VIC and DIAYN on small environments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a context-conditioned policy and its decoder.
    Train(Box<TrainArgs>),
    /// Score a trained run and export X-Y traces.
    Evaluate(EvaluateArgs),
    /// Roll out policies conditioned on blends of two context embeddings.
    Interpolate(InterpolateArgs),
    /// Check the entropy/KL identity on small enumerable MDPs.
    Klcheck(KlcheckArgs),
    /// Finite-difference check of every layer and composite loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// 100 paths per epoch.
    Desk,
    /// 1000 paths per epoch.
    Paper,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Stochastic,
    Deterministic,
}

impl From<Mode> for ActionMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Stochastic => ActionMode::Stochastic,
            Mode::Deterministic => ActionMode::Deterministic,
        }
    }
}

#[derive(Args, Debug)]
struct WorkerArgs {
    /// Rollout worker threads (results do not depend on this).
    #[arg(long, default_value_t = default_workers())]
    workers: usize,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Flat `key = value` config file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// valor, valor_states, vic, diayn or random_reward.
    #[arg(long)]
    algo: Option<String>,
    /// point2d or chain.
    #[arg(long)]
    env: Option<String>,
    /// Fixed number of contexts (not with --curriculum).
    #[arg(long = "K")]
    k: Option<usize>,
    /// Largest number of contexts under the curriculum.
    #[arg(long = "K-max")]
    k_max: Option<usize>,
    /// Starting number of contexts under the curriculum (default 2).
    #[arg(long = "K-init")]
    k_init: Option<usize>,
    /// Grow K whenever the decoder masters the current contexts.
    #[arg(long)]
    curriculum: bool,
    /// Learned context embeddings instead of one-hot conditioning.
    #[arg(long, conflicts_with = "one_hot")]
    embed: bool,
    /// Force one-hot conditioning (overrides a config file).
    #[arg(long)]
    one_hot: bool,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Trajectories per epoch.
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    /// Entropy bonus weight (must be 0 for vic).
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Mastery threshold on E[P_D(c|tau)].
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Stop once all K_max contexts are mastered.
    #[arg(long)]
    stop_at_mastery: bool,
    /// Record real epoch times in wall_ms (breaks byte-identical metrics).
    #[arg(long)]
    wall_clock: bool,
    /// Run directory (default: $OPTDISC_OUT/<run-name>, or runs/<run-name>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print a progress line every this many epochs (0: silent).
    #[arg(long, default_value_t = 50)]
    log_every: usize,
    #[command(flatten)]
    workers: WorkerArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Where to write scores.csv, traces.jsonl and eval.json (default: the run).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "stochastic")]
    score_mode: Mode,
    #[arg(long, value_enum, default_value = "deterministic")]
    trace_mode: Mode,
    /// Base seed for the evaluation rollouts.
    #[arg(long, default_value_t = 0)]
    eval_seed: u64,
    #[command(flatten)]
    workers: WorkerArgs,
}

#[derive(Args, Debug)]
struct InterpolateArgs {
    #[arg(long)]
    run: PathBuf,
    /// Context at alpha = 0.
    #[arg(long)]
    from: usize,
    /// Context at alpha = 1.
    #[arg(long)]
    to: usize,
    /// Comma-separated blend weights.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1"
    )]
    alphas: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSONL file (default: <run>/interpolation_<from>_<to>.jsonl).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct KlcheckArgs {
    /// Check this MDP file instead of the built-in fixtures.
    #[arg(long)]
    mdp: Option<PathBuf>,
    /// Largest accepted |lhs - rhs|.
    #[arg(long, default_value_t = KL_TOLERANCE)]
    tol: f64,
    /// Directory for klcheck.txt.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Only run cases whose name contains this string.
    #[arg(long)]
    layer: Option<String>,
    /// Corrupt one backward rule (harness self-test).
    #[arg(long, hide = true)]
    corrupt_backward: Option<String>,
    #[command(flatten)]
    workers: WorkerArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<optdisc::Error>() {
        Some(optdisc::Error::Numerical { .. } | optdisc::Error::NonFinite(_)) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(a) => cmd_train(*a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Interpolate(a) => cmd_interpolate(a),
        Command::Klcheck(a) => cmd_klcheck(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

/// Merge the config file with flag overrides into one key/value map.
fn train_config(a: &TrainArgs) -> Result<TrainerConfig> {
    let mut map = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            parse_flat(&text)?
        }
        None => BTreeMap::new(),
    };
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            map.insert(k.to_string(), v);
        }
    };
    put(
        "paths",
        a.preset.map(|p| match p {
            Preset::Desk => DEFAULT_PATHS.to_string(),
            Preset::Paper => PAPER_PATHS.to_string(),
        }),
    );
    put("algo", a.algo.clone());
    put("env", a.env.clone());
    put("K", a.k.map(|v| v.to_string()));
    put("K_max", a.k_max.map(|v| v.to_string()));
    put("K_init", a.k_init.map(|v| v.to_string()));
    put("curriculum", a.curriculum.then(|| "true".into()));
    put("embed", a.embed.then(|| "true".into()));
    put("embed", a.one_hot.then(|| "false".into()));
    put("embed_dim", a.embed_dim.map(|v| v.to_string()));
    put("epochs", a.epochs.map(|v| v.to_string()));
    put("paths", a.paths.map(|v| v.to_string()));
    put("seed", a.seed.map(|v| v.to_string()));
    put("beta", a.beta.map(|v| v.to_string()));
    put("gamma", a.gamma.map(|v| v.to_string()));
    put("lr", a.lr.map(|v| v.to_string()));
    put("threshold", a.threshold.map(|v| v.to_string()));
    put("horizon", a.horizon.map(|v| v.to_string()));
    put("checkpoint_every", a.checkpoint_every.map(|v| v.to_string()));
    put("stop_at_mastery", a.stop_at_mastery.then(|| "true".into()));
    put("wall_clock", a.wall_clock.then(|| "true".into()));
    Ok(TrainerConfig::from_map(&map)?)
}

fn default_run_name(c: &TrainerConfig) -> String {
    let schedule = if c.contexts.is_curriculum() { "cur" } else { "K" };
    let enc = if c.embed_dim.is_some() { "embed" } else { "onehot" };
    format!(
        "{}-{}-{}{}-{}-s{}",
        c.algo.name(),
        c.env.name(),
        schedule,
        c.contexts.k_max(),
        enc,
        c.seed
    )
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT), PathBuf::from)
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    // Everything that can be rejected is rejected before touching the disk.
    let config = train_config(&a)?;
    let exec = Executor::with_workers(a.workers.workers);
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| out_root().join(default_run_name(&config)));
    let _probe = Trainer::new(config.clone())?;
    drop(_probe);

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut manifest = RunManifest::start(&config.to_flat(), config.seed, exec.workers());
    manifest.write(&out)?;

    let start = Instant::now();
    let log_every = a.log_every;
    let mut progress = |m: &trainer::EpochMetrics| {
        if log_every > 0 && (m.epoch % log_every == 0 || m.epoch == 1) {
            println!(
                "epoch {:>5}  K {:>3}  E[logP_D] {:>9.4}  E[P_D] {:.4}  H {:.4}  ({:.1}s)",
                m.epoch,
                m.k_current,
                m.mean_logpd,
                m.mean_pd,
                m.mean_entropy,
                start.elapsed().as_secs_f64()
            );
        }
    };
    let result = trainer::train(&config, &out, &exec, &mut progress);
    let mut artifacts = trainer::run_artifacts(&out, config.algo.decoder().is_some());
    artifacts.push(out.join(MANIFEST_FILE));
    match result {
        Ok(summary) => {
            manifest.finish(&out, "complete", &artifacts)?;
            println!(
                "done: {} epochs, K = {}, mastered at {}; artifacts in {}",
                summary.epochs_completed,
                summary.k_current,
                summary
                    .mastered_epoch
                    .map_or("never".to_string(), |e| format!("epoch {e}")),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            manifest.finish(&out, &format!("failed: {e}"), &artifacts)?;
            Err(anyhow::Error::new(e).context(format!("training run in {}", out.display())))
        }
    }
}

#[derive(Serialize)]
struct EvalInfo {
    run: String,
    k: usize,
    rollouts_per_context: usize,
    seeds: Vec<u64>,
    score: &'static str,
    score_mode: &'static str,
    trace_mode: Option<&'static str>,
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<ExitCode> {
    let t = Trainer::load(&a.run).with_context(|| format!("loading run {}", a.run.display()))?;
    let exec = Executor::with_workers(a.workers.workers);
    let out = a.out.clone().unwrap_or_else(|| a.run.clone());
    let k = t.curriculum.k_current;
    let seeds = eval::eval_seeds(a.eval_seed);
    let (score_name, score_fn) = eval::default_score(&t.env);
    let scores = eval::collect_scores(
        &t.policy,
        &t.policy_store,
        &t.env,
        k,
        score_fn.as_ref(),
        &seeds,
        a.score_mode.into(),
        &exec,
    )?;
    fs::create_dir_all(&out)?;
    fs::write(out.join("scores.csv"), eval::scores_csv(&scores))?;
    let point = t.env.name() == "point2d";
    if point {
        eval::export_traces(
            &t.policy,
            &t.policy_store,
            &t.env,
            k,
            &seeds,
            a.trace_mode.into(),
            &out.join("traces.jsonl"),
            &exec,
        )?;
    }
    let info = EvalInfo {
        run: a.run.display().to_string(),
        k,
        rollouts_per_context: eval::EVAL_ROLLOUTS,
        seeds,
        score: score_name,
        score_mode: eval::mode_name(a.score_mode.into()),
        trace_mode: point.then(|| eval::mode_name(a.trace_mode.into())),
    };
    fs::write(out.join("eval.json"), serde_json::to_string_pretty(&info)? + "\n")?;
    println!("context_id  mean        std");
    for s in &scores {
        println!("{:>10}  {:<10.6}  {:.6}", s.context_id, s.mean, s.std);
    }
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_interpolate(a: InterpolateArgs) -> Result<ExitCode> {
    let t = Trainer::load(&a.run).with_context(|| format!("loading run {}", a.run.display()))?;
    if a.alphas.is_empty() {
        bail!("--alphas needs at least one value");
    }
    let traces = eval::interpolation_sweep(
        &t.policy,
        &t.policy_store,
        &t.env,
        t.curriculum.k_current,
        a.from,
        a.to,
        &a.alphas,
        a.seed,
    )?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.run.join(format!("interpolation_{}_{}.jsonl", a.from, a.to)));
    fs::write(&out, eval::traces_jsonl(&traces)?).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "{} traces, largest gap between neighbouring alphas {:.6}; wrote {}",
        traces.len(),
        eval::max_adjacent_distance(&traces),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_klcheck(a: KlcheckArgs) -> Result<ExitCode> {
    if a.tol.is_nan() || a.tol <= 0.0 {
        bail!("--tol must be positive");
    }
    let fixtures = match &a.mdp {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading MDP {}", p.display()))?;
            vec![eval::parse_mdp_fixture(&text).with_context(|| format!("parsing {}", p.display()))?]
        }
        None => eval::kl_fixtures(),
    };
    let mut results: Vec<(String, KlCheck)> = Vec::new();
    for f in &fixtures {
        results.push((f.name.clone(), eval::kl_identity_check(&f.mdp, &f.policy)?));
    }
    let report = eval::klcheck_report(&results);
    print!("{report}");
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("klcheck.txt"), &report)?;
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|(_, r)| r.diff.is_nan() || r.diff >= a.tol)
        .map(|(n, _)| n.as_str())
        .collect();
    if failed.is_empty() {
        println!("all {} fixtures within {:e}", results.len(), a.tol);
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAILED (tolerance {:e}): {}", a.tol, failed.join(", "));
        Ok(ExitCode::from(2))
    }
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let corrupt = match &a.corrupt_backward {
        Some(name) => Some(OpKind::parse(name).ok_or_else(|| anyhow!("unknown op `{name}`"))?),
        None => None,
    };
    if let Some(f) = &a.layer {
        if !CASE_NAMES.iter().any(|n| n.contains(f.as_str())) {
            bail!("no gradient case matches `{f}`; cases: {}", CASE_NAMES.join(", "));
        }
    }
    let exec = Executor::with_workers(a.workers.workers);
    let start = Instant::now();
    let results = grad_suite::run_suite(a.layer.as_deref(), corrupt, &exec)?;
    println!(
        "{:<26} {:>12} {:>8} {:>9}  result",
        "case", "max_rel_err", "checked", "time_ms"
    );
    for r in &results {
        println!(
            "{:<26} {:>12.3e} {:>8} {:>9}  {}",
            r.name,
            r.report.max_rel_err,
            r.report.checked,
            r.elapsed.as_millis(),
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let worst = results
        .iter()
        .max_by(|x, y| x.report.max_rel_err.total_cmp(&y.report.max_rel_err))
        .expect("at least one case");
    if let Some(m) = &worst.report.worst {
        println!(
            "worst: {} {}[{}] analytic {:.6e} numeric {:.6e} (rel err {:.3e})",
            worst.name, m.param, m.index, m.analytic, m.numeric, worst.report.max_rel_err
        );
    }
    println!("total {:.2}s", start.elapsed().as_secs_f64());
    if results.iter().all(|r| r.passed()) {
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAILED: relative error above {GRAD_TOLERANCE:e}");
        Ok(ExitCode::from(2))
    }
}
