//! Command-line entry point: `gen-corpus`, `pretrain`, `train`, `eval` and
//! `inspect`, all writing under one output directory.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::config::{Mode, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_eval_csv, EvalReport};
use crate::orchestrator::pipeline::{self, World};
use crate::orchestrator::train::{read_csv, CurriculumRow, MetricsRow, RunSummary, UpdateEvent};
use crate::system_agent::SystemAgent;

#[derive(Debug, Parser)]
#[command(
    name = "aurl",
    version,
    about = "Asynchronous multi-agent RL for slot-filling dialog"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration file; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory all artifacts are written under.
    #[arg(long, global = true, default_value = "aurl-out")]
    pub out: PathBuf,
    /// Only log errors.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the labelled pretraining corpus.
    GenCorpus,
    /// Supervised pretraining of every module on the corpus.
    Pretrain,
    /// Reinforcement-learning run in the configured mode.
    Train(TrainArgs),
    /// Evaluate a system against the rule-based user.
    Eval(EvalArgs),
    /// Summarize one or more run directories.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// SL, RL-fixed_DST, RL-train_DST, AURL or AURL-MURL.
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub n_users: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory holding a system (or a `system/` subdirectory).
    /// Without it the pretrained system for the seed is evaluated.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Run directories, or output directories containing `runs/`.
    /// Defaults to `--out`.
    pub paths: Vec<PathBuf>,
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.common.quiet);
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                1
            } else {
                2
            }
        }
    }
}

fn init_logging(quiet: bool) {
    let level = if quiet {
        log::LevelFilter::Error
    } else {
        match std::env::var("AURL_LOG_LEVEL").as_deref() {
            Ok("error") => log::LevelFilter::Error,
            Ok("debug") => log::LevelFilter::Debug,
            _ => log::LevelFilter::Info,
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .try_init();
}

/// Loads the configuration and applies the command-line overrides.
pub fn resolve_config(common: &Common, train: Option<&TrainArgs>) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) if !path.exists() => {
            return Err(Error::Config(format!(
                "config file not found: {}",
                path.display()
            )))
        }
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = pipeline::with_seed(cfg, seed);
    }
    if let Some(t) = train {
        if let Some(mode) = t.mode {
            cfg.train.mode = mode;
            if mode == Mode::AurlMurl && t.n_users.is_none() && cfg.train.n_users < 2 {
                cfg.train.n_users = 2;
            } else if mode != Mode::AurlMurl && t.n_users.is_none() {
                cfg.train.n_users = 1;
            }
        }
        if let Some(n) = t.n_users {
            cfg.train.n_users = n;
        }
        if let Some(e) = t.epochs {
            cfg.train.epochs = e;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<()> {
    let common = &cli.common;
    let out = &common.out;
    match &cli.command {
        Command::GenCorpus => {
            let cfg = resolve_config(common, None)?;
            let world = World::build(&cfg)?;
            let path = pipeline::gen_corpus(&world.env(&cfg), &cfg, out)?;
            println!("corpus written to {}", path.display());
        }
        Command::Pretrain => {
            let cfg = resolve_config(common, None)?;
            let world = World::build(&cfg)?;
            let p = pipeline::pretrain_to(&world.env(&cfg), &cfg, out)?;
            println!(
                "pretrained models written to {}",
                pipeline::pretrained_dir(out, cfg.train.seed).display()
            );
            println!(
                "held-out tracker joint accuracy {:.4}",
                p.report.dst_joint_accuracy
            );
            for (action, entry) in &p.difficulty.entries {
                println!(
                    "  {:<13} accuracy {:.4}  n={:<5} {}",
                    action.name(),
                    entry.accuracy,
                    entry.count,
                    entry.level.name()
                );
            }
        }
        Command::Train(args) => {
            let cfg = resolve_config(common, Some(args))?;
            let world = World::build(&cfg)?;
            let env = world.env(&cfg);
            let pretrained = pipeline::load_or_pretrain(&env, &cfg, out)?;
            let dir = pipeline::run_dir(out, &cfg);
            let art = pipeline::train_to(env, &cfg, &pretrained, out)?;
            print_report(&format!("{} final", cfg.train.mode), &art.final_report);
            println!("run written to {}", dir.display());
        }
        Command::Eval(args) => {
            let cfg = resolve_config(common, None)?;
            let world = World::build(&cfg)?;
            let env = world.env(&cfg);
            let (system, name) = match &args.checkpoint {
                Some(dir) => (load_checkpoint(dir, &world)?, "checkpoint"),
                None => (
                    pipeline::load_or_pretrain(&env, &cfg, out)?.system,
                    "pretrained",
                ),
            };
            let report = evaluate(
                &system,
                &env,
                cfg.eval.n_dialogs,
                cfg.eval.repeats,
                crate::orchestrator::train::eval_seed(cfg.train.seed),
                cfg.eval.record_time,
            )?;
            let dir = out.join("eval");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let path = dir.join(format!("{name}-seed{}.csv", cfg.train.seed));
            write_eval_csv(&path, &report)?;
            print_report(name, &report);
            println!("written to {}", path.display());
        }
        Command::Inspect(args) => {
            let paths = if args.paths.is_empty() {
                vec![out.clone()]
            } else {
                args.paths.clone()
            };
            print!("{}", inspect(&paths)?);
        }
    }
    Ok(())
}

fn load_checkpoint(dir: &Path, world: &World) -> Result<SystemAgent> {
    if !dir.is_dir() {
        return Err(Error::Checkpoint {
            path: dir.to_path_buf(),
            reason: "directory does not exist".into(),
        });
    }
    let sys = dir.join("system");
    let dir = if sys.is_dir() { sys } else { dir.to_path_buf() };
    SystemAgent::load(&dir, &world.schema)
}

fn print_report(name: &str, report: &EvalReport) {
    let m = &report.aggregate;
    println!(
        "{name}: dialog_succ {:.4}  avg_turn {:.3}  avg_reward {:.4}  dst_acc {:.4}  ({} dialogs over {} repeats)",
        m.dialog_succ,
        m.avg_turn,
        m.avg_reward,
        m.dst_acc,
        m.n_dialogs,
        report.per_repeat.len()
    );
}

#[derive(Debug, Clone, Deserialize)]
struct EvalRow {
    repeat: String,
    dialog_succ: f64,
    avg_turn: f64,
    avg_reward: f64,
    dst_acc: f64,
}

/// One run directory's files, read back.
#[derive(Debug, Clone)]
pub struct RunView {
    pub dir: PathBuf,
    pub metrics: Vec<MetricsRow>,
    pub updates: Vec<UpdateEvent>,
    pub curriculum: Vec<CurriculumRow>,
    pub summary: Option<RunSummary>,
    final_eval: Option<EvalRow>,
}

impl RunView {
    pub fn read(dir: &Path) -> Result<Self> {
        let metrics: Vec<MetricsRow> = read_csv(&dir.join("metrics.csv"))?;
        if metrics.is_empty() {
            return Err(Error::Malformed {
                path: dir.join("metrics.csv"),
                reason: "no rows".into(),
            });
        }
        let updates = if dir.join("updates.csv").exists() {
            read_csv(&dir.join("updates.csv"))?
        } else {
            Vec::new()
        };
        let curriculum = if dir.join("curriculum.csv").exists() {
            read_csv(&dir.join("curriculum.csv"))?
        } else {
            Vec::new()
        };
        let final_eval = if dir.join("final_eval.csv").exists() {
            read_csv::<EvalRow>(&dir.join("final_eval.csv"))?
                .into_iter()
                .find(|r| r.repeat == "aggregate")
        } else {
            None
        };
        let summary_path = dir.join("run_summary.json");
        let summary = if summary_path.exists() {
            Some(RunSummary::read(&summary_path)?)
        } else {
            None
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics,
            updates,
            curriculum,
            summary,
            final_eval,
        })
    }

    pub fn name(&self) -> String {
        self.dir.file_name().map_or_else(
            || self.dir.display().to_string(),
            |n| n.to_string_lossy().into_owned(),
        )
    }

    pub fn mode(&self) -> &str {
        &self.metrics[self.metrics.len() - 1].mode
    }

    /// Final metrics: the full evaluation when present, else the last
    /// interval row.
    pub fn final_metrics(&self) -> (f64, f64, f64, f64) {
        match &self.final_eval {
            Some(r) => (r.dialog_succ, r.avg_turn, r.avg_reward, r.dst_acc),
            None => {
                let r = &self.metrics[self.metrics.len() - 1];
                (r.dialog_succ, r.avg_turn, r.avg_reward, r.dst_acc)
            }
        }
    }

    /// Updates per buffer, split by update type.
    pub fn update_counts(&self) -> BTreeMap<(String, String), usize> {
        let mut counts = BTreeMap::new();
        for u in &self.updates {
            *counts
                .entry((u.buffer.clone(), u.update_type.clone()))
                .or_default() += 1;
        }
        counts
    }
}

fn collect_runs(paths: &[PathBuf]) -> Result<Vec<RunView>> {
    let mut runs = Vec::new();
    for p in paths {
        if p.join("metrics.csv").exists() {
            runs.push(RunView::read(p)?);
            continue;
        }
        let root = if p.join("runs").is_dir() {
            p.join("runs")
        } else {
            p.clone()
        };
        let entries = std::fs::read_dir(&root).map_err(|e| Error::io(&root, e))?;
        let mut dirs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|d| d.join("metrics.csv").exists())
            .collect();
        dirs.sort();
        for d in dirs {
            runs.push(RunView::read(&d)?);
        }
    }
    if runs.is_empty() {
        return Err(Error::Malformed {
            path: paths.first().cloned().unwrap_or_default(),
            reason: "no run directories with metrics.csv found".into(),
        });
    }
    Ok(runs)
}

/// Human-readable summary of the given runs, with a comparison table when
/// there is more than one.
pub fn inspect(paths: &[PathBuf]) -> Result<String> {
    let runs = collect_runs(paths)?;
    let mut s = String::new();
    for run in &runs {
        let (succ, turn, reward, dst) = run.final_metrics();
        let _ = writeln!(s, "run {} ({})", run.name(), run.dir.display());
        let _ = writeln!(
            s,
            "  final       dialog_succ {succ:.4}  avg_turn {turn:.3}  avg_reward {reward:.4}  dst_acc {dst:.4}"
        );
        let curve: Vec<String> = run
            .metrics
            .iter()
            .map(|m| format!("{}:{:.3}", m.epoch, m.dialog_succ))
            .collect();
        let _ = writeln!(s, "  curve       {}", curve.join(" "));
        let counts = run.update_counts();
        if !counts.is_empty() {
            let parts: Vec<String> = counts
                .iter()
                .map(|((b, t), n)| format!("{b}/{t}={n}"))
                .collect();
            let _ = writeln!(s, "  updates     {}", parts.join("  "));
        }
        if let Some(sum) = &run.summary {
            let expected = match sum.dst_unit.as_str() {
                "turns" => sum.total_turns / sum.dst_capacity,
                _ => sum.dialogs / sum.dst_capacity,
            };
            let _ = writeln!(
                s,
                "  schedule    epochs {}  dialogs {}  turns {}  dp updates {}  dst updates {} (+{} discarded), buffer {} {} -> expected {}",
                sum.epochs,
                sum.dialogs,
                sum.total_turns,
                sum.dp_updates,
                sum.dst_updates,
                sum.dst_discards,
                sum.dst_capacity,
                sum.dst_unit,
                expected
            );
        }
        if !run.curriculum.is_empty() {
            let n_updates = run.curriculum.iter().map(|r| r.update).max().unwrap_or(0);
            let mut phases: BTreeMap<(usize, String), (usize, usize, f64)> = BTreeMap::new();
            for r in &run.curriculum {
                let e = phases.entry((r.phase, r.level.clone())).or_default();
                e.0 += r.examples;
                e.1 += r.steps;
                e.2 += r.mean_loss;
            }
            let _ = writeln!(s, "  curriculum  {n_updates} updates");
            for ((phase, level), (examples, steps, loss)) in &phases {
                let rows = run
                    .curriculum
                    .iter()
                    .filter(|r| r.phase == *phase && &r.level == level)
                    .count();
                let _ = writeln!(
                    s,
                    "    phase {phase} {level:<7} examples {examples:<7} steps {steps:<6} mean loss {:.4}",
                    loss / rows.max(1) as f64
                );
            }
        }
    }
    if runs.len() > 1 {
        let _ = writeln!(
            s,
            "\n{:<24} {:<13} {:>11} {:>9} {:>10} {:>8}",
            "run", "mode", "dialog_succ", "avg_turn", "avg_reward", "dst_acc"
        );
        for run in &runs {
            let (succ, turn, reward, dst) = run.final_metrics();
            let _ = writeln!(
                s,
                "{:<24} {:<13} {:>11.4} {:>9.3} {:>10.4} {:>8.4}",
                run.name(),
                run.mode(),
                succ,
                turn,
                reward,
                dst
            );
        }
    }
    Ok(s)
}
