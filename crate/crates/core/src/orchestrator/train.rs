//! The reinforcement-learning run: dialogs between the system and one or
//! more learned users, small buffers drained into policy updates every
//! epoch, and the tracker buffer drained into curriculum updates whenever
//! it fills.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::buffers::BufferSet;
use crate::config::{DstUnit, Mode, RunConfig};
use crate::curriculum::{
    measure_difficulty, run_curriculum_update, CurriculumPhasePlan, DifficultyTable,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, fmt_time, write_eval_csv, EvalReport};
use crate::nnet::OptimizerState;
use crate::orchestrator::episode::{run_dialog, Env, EpisodeLog, NeuralSystem, NeuralUser};
use crate::orchestrator::pretrain::Pretrained;
use crate::policy::{
    a2c_update, supervised_policy_update, DecodeMode, PolicyExample, PolicyTransition,
};
use crate::system_agent::{DstExample, SystemAgent};
use crate::user_agent::UserAgent;

/// One dialog's worth of experience for one user.
#[derive(Debug, Clone, PartialEq)]
pub struct UserBatch<T> {
    pub user: usize,
    pub items: Vec<T>,
}

pub type RunBuffers = BufferSet<
    UserBatch<PolicyTransition>,
    UserBatch<PolicyExample>,
    Vec<PolicyTransition>,
    Vec<DstExample>,
>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub mode: String,
    pub dialog_succ: f64,
    pub avg_turn: f64,
    pub avg_reward: f64,
    pub dst_acc: f64,
    pub wall_ms_per_turn: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateEvent {
    pub epoch: usize,
    pub buffer: String,
    pub user: String,
    pub size: usize,
    pub update_type: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumRow {
    pub update: usize,
    pub epoch: usize,
    pub phase: usize,
    pub level: String,
    pub examples: usize,
    pub steps: usize,
    pub mean_loss: f64,
}

struct SystemOpts {
    dst: OptimizerState,
    dp: OptimizerState,
    critic: OptimizerState,
}

struct UserOpts {
    nlu: OptimizerState,
    dp: OptimizerState,
    critic: OptimizerState,
}

/// Counts a run leaves behind next to its CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: String,
    pub seed: u64,
    pub epochs: usize,
    pub n_users: usize,
    pub dialogs: usize,
    pub total_turns: usize,
    pub train_success: f64,
    pub dp_updates: usize,
    pub dst_updates: usize,
    pub dst_discards: usize,
    pub dst_capacity: usize,
    pub dst_unit: String,
}

impl RunSummary {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub metrics: Vec<MetricsRow>,
    pub updates: Vec<UpdateEvent>,
    pub curriculum: Vec<CurriculumRow>,
    pub total_turns: usize,
    pub dialogs: usize,
    pub user_dialogs: Vec<usize>,
    pub final_report: EvalReport,
    pub summary: RunSummary,
    /// The difficulty table as it stood when the run ended.
    pub difficulty: DifficultyTable,
    pub system: SystemAgent,
    pub users: Vec<UserAgent>,
}

impl RunArtifacts {
    pub fn count_updates(&self, buffer: &str, update_type: Option<&str>) -> usize {
        self.updates
            .iter()
            .filter(|u| u.buffer == buffer && update_type.is_none_or(|t| u.update_type == t))
            .count()
    }
}

/// The seed evaluation uses for a run seed; independent of the training
/// stream, so every mode is scored on the same dialogs.
pub fn eval_seed(seed: u64) -> u64 {
    seed ^ 0x5EED_E7A1
}

pub struct Trainer<'a> {
    env: Env<'a>,
    cfg: RunConfig,
    pub system: SystemAgent,
    pub users: Vec<UserAgent>,
    sys_opts: SystemOpts,
    user_opts: Vec<UserOpts>,
    buffers: RunBuffers,
    table: DifficultyTable,
    plan: CurriculumPhasePlan,
    rng: ChaCha8Rng,
    epoch: usize,
    total_turns: usize,
    dialogs: usize,
    successes: usize,
    user_dialogs: Vec<usize>,
    dst_updates: usize,
    pub updates: Vec<UpdateEvent>,
    pub curriculum: Vec<CurriculumRow>,
    transcript: Option<BufWriter<std::fs::File>>,
    transcript_path: PathBuf,
}

impl<'a> Trainer<'a> {
    pub fn new(env: Env<'a>, cfg: &RunConfig, pretrained: &Pretrained) -> Result<Self> {
        let cfg = cfg.clone().normalized();
        cfg.validate()?;
        let n_users = if cfg.train.mode == Mode::AurlMurl {
            cfg.train.n_users
        } else {
            1
        };
        let system = pretrained.system.clone();
        let users = vec![pretrained.user.clone(); n_users];
        let n = &cfg.nnet;
        let sys_opts = SystemOpts {
            dst: OptimizerState::new(&system.dst, n.dst_lr, n.clip_norm),
            dp: OptimizerState::new(&system.dp, n.rl_lr, n.clip_norm),
            critic: OptimizerState::new(&system.critic, n.rl_lr, n.clip_norm),
        };
        let user_opts = users
            .iter()
            .map(|u| UserOpts {
                nlu: OptimizerState::new(&u.nlu, n.sl_lr, n.clip_norm),
                dp: OptimizerState::new(&u.dp, n.rl_lr, n.clip_norm),
                critic: OptimizerState::new(&u.critic, n.rl_lr, n.clip_norm),
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        rng.set_stream(11);
        Ok(Self {
            env,
            buffers: RunBuffers::new(&cfg.buffers),
            table: pretrained.difficulty.clone(),
            plan: CurriculumPhasePlan::standard(),
            user_dialogs: vec![0; n_users],
            cfg,
            system,
            users,
            sys_opts,
            user_opts,
            rng,
            epoch: 0,
            total_turns: 0,
            dialogs: 0,
            successes: 0,
            dst_updates: 0,
            updates: Vec::new(),
            curriculum: Vec::new(),
            transcript: None,
            transcript_path: PathBuf::new(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn total_turns(&self) -> usize {
        self.total_turns
    }

    /// Training dialogs run so far and how many of them succeeded.
    pub fn dialog_counts(&self) -> (usize, usize) {
        (self.dialogs, self.successes)
    }

    pub fn buffers(&self) -> &RunBuffers {
        &self.buffers
    }

    fn log_update(&mut self, buffer: &str, user: Option<usize>, size: usize, kind: &str) {
        self.updates.push(UpdateEvent {
            epoch: self.epoch,
            buffer: buffer.to_string(),
            user: user.map_or_else(|| "-".to_string(), |u| u.to_string()),
            size,
            update_type: kind.to_string(),
        });
    }

    fn small_buffer_full(&self) -> bool {
        self.buffers.user_dp.is_full()
            || self.buffers.user_nlu.is_full()
            || self.buffers.sys_dp.is_full()
    }

    fn record(&mut self, log: &EpisodeLog) -> Result<()> {
        if let Some(w) = self.transcript.as_mut() {
            let line = serde_json::to_string(log).map_err(|e| Error::Malformed {
                path: self.transcript_path.clone(),
                reason: e.to_string(),
            })?;
            writeln!(w, "{line}").map_err(|e| Error::io(&self.transcript_path, e))?;
        }
        let user = log.user_id;
        self.buffers.sys_dp.push(log.system_transitions()?)?;
        self.buffers.user_dp.push(UserBatch {
            user,
            items: log.user_transitions()?,
        })?;
        self.buffers.user_nlu.push(UserBatch {
            user,
            items: log.nlu_examples(self.env.schema.n_slots())?,
        })?;
        let examples = log.dst_examples()?;
        match self.cfg.buffers.dst_unit {
            DstUnit::Dialogs => {
                self.buffers.sys_dst.push(examples)?;
                self.maybe_update_dst()?;
            }
            DstUnit::Turns => {
                for ex in examples {
                    self.buffers.sys_dst.push(vec![ex])?;
                    self.maybe_update_dst()?;
                }
            }
        }
        Ok(())
    }

    fn maybe_update_dst(&mut self) -> Result<()> {
        if !self.buffers.schedule_check().update_dst {
            return Ok(());
        }
        let drained: Vec<DstExample> = self.buffers.sys_dst.drain().into_iter().flatten().collect();
        let size = drained.len();
        if self.cfg.train.mode == Mode::RlFixedDst {
            self.log_update("sys_dst", None, size, "discard");
            return Ok(());
        }
        let enabled = self.cfg.curriculum.enabled;
        if enabled && self.cfg.curriculum.remeasure {
            self.remeasure(&drained)?;
        }
        let logs = run_curriculum_update(
            &mut self.system.dst,
            &mut self.sys_opts.dst,
            self.env.schema,
            &drained,
            &self.table,
            &self.plan,
            self.cfg.curriculum.batch_size,
            enabled,
        )?;
        if !self.system.dst.is_finite() {
            return Err(Error::Training(format!(
                "tracker parameters became non-finite at epoch {}",
                self.epoch
            )));
        }
        self.dst_updates += 1;
        for l in logs {
            self.curriculum.push(CurriculumRow {
                update: self.dst_updates,
                epoch: self.epoch,
                phase: l.phase,
                level: l
                    .level
                    .map_or_else(|| "all".to_string(), |lv| lv.name().to_string()),
                examples: l.examples,
                steps: l.steps,
                mean_loss: l.mean_loss,
            });
        }
        self.log_update(
            "sys_dst",
            None,
            size,
            if enabled { "curriculum" } else { "uniform" },
        );
        Ok(())
    }

    /// Re-scores every action seen in the drain with the current tracker;
    /// actions absent from it keep their previous level.
    fn remeasure(&mut self, drained: &[DstExample]) -> Result<()> {
        let c = &self.cfg.curriculum;
        let fresh = measure_difficulty(&self.system.dst, self.env.schema, drained, &[], c)?;
        for (action, entry) in fresh.entries {
            self.table.entries.insert(action, entry);
        }
        Ok(())
    }

    fn update_fast_modules(&mut self) -> Result<()> {
        let gamma = self.cfg.reward.gamma;
        let beta = self.cfg.train.entropy_coef;
        let sys: Vec<PolicyTransition> =
            self.buffers.sys_dp.drain().into_iter().flatten().collect();
        let size = sys.len();
        let layout = self.system.layout().clone();
        let stats = a2c_update(
            &mut self.system.dp,
            &mut self.sys_opts.dp,
            &mut self.system.critic,
            &mut self.sys_opts.critic,
            &layout,
            &sys,
            gamma,
            beta,
        )
        .map_err(|e| Error::Training(format!("system update at epoch {}: {e}", self.epoch)))?;
        log::debug!("epoch {} system a2c {:?}", self.epoch, stats);
        self.log_update("sys_dp", None, size, "a2c");

        let mut per_user: BTreeMap<usize, Vec<PolicyTransition>> = BTreeMap::new();
        for b in self.buffers.user_dp.drain() {
            per_user.entry(b.user).or_default().extend(b.items);
        }
        let mut per_user_nlu: BTreeMap<usize, Vec<PolicyExample>> = BTreeMap::new();
        for b in self.buffers.user_nlu.drain() {
            per_user_nlu.entry(b.user).or_default().extend(b.items);
        }
        for (u, trs) in per_user {
            let layout = self.users[u].layout().clone();
            let user = &mut self.users[u];
            let opts = &mut self.user_opts[u];
            a2c_update(
                &mut user.dp,
                &mut opts.dp,
                &mut user.critic,
                &mut opts.critic,
                &layout,
                &trs,
                gamma,
                beta,
            )
            .map_err(|e| {
                Error::Training(format!("user {u} update at epoch {}: {e}", self.epoch))
            })?;
            self.log_update("user_dp", Some(u), trs.len(), "a2c");
        }
        for (u, exs) in per_user_nlu {
            let layout = self.users[u].nlu_layout().clone();
            let refs: Vec<&PolicyExample> = exs.iter().collect();
            let user = &mut self.users[u];
            supervised_policy_update(&mut user.nlu, &mut self.user_opts[u].nlu, &layout, &refs)?;
            self.log_update("user_nlu", Some(u), exs.len(), "supervised");
        }
        Ok(())
    }

    /// One epoch: `dialogs_per_epoch` dialogs (users in rotation), tracker
    /// updates whenever its buffer fills, then the policy, critic and NLU
    /// updates from the small buffers.
    pub fn run_epoch(&mut self) -> Result<()> {
        self.epoch += 1;
        let n_users = self.users.len();
        for d in 0..self.cfg.train.dialogs_per_epoch {
            if self.small_buffer_full() {
                log::warn!(
                    "epoch {}: small buffer full, stopping dialogs early",
                    self.epoch
                );
                break;
            }
            let u = d % n_users;
            let log = {
                let mut sys = NeuralSystem {
                    agent: &self.system,
                    mode: DecodeMode::Sample,
                    with_value: false,
                };
                let mut user = NeuralUser {
                    agent: &self.users[u],
                    mode: DecodeMode::Sample,
                };
                run_dialog(&self.env, &mut sys, &mut user, u, &mut self.rng)?
            };
            self.total_turns += log.n_turns;
            self.dialogs += 1;
            self.successes += usize::from(log.success());
            self.user_dialogs[u] += 1;
            self.record(&log)?;
        }
        if self.buffers.schedule_check().update_fast_modules {
            self.update_fast_modules()?;
        }
        Ok(())
    }

    pub fn evaluate(&self, n_dialogs: usize, repeats: usize) -> Result<EvalReport> {
        evaluate(
            &self.system,
            &self.env,
            n_dialogs,
            repeats,
            eval_seed(self.cfg.train.seed),
            self.cfg.eval.record_time,
        )
    }

    fn metrics_row(&self, report: &EvalReport) -> MetricsRow {
        let m = &report.aggregate;
        MetricsRow {
            epoch: self.epoch,
            mode: self.cfg.train.mode.name().to_string(),
            dialog_succ: m.dialog_succ,
            avg_turn: m.avg_turn,
            avg_reward: m.avg_reward,
            dst_acc: m.dst_acc,
            wall_ms_per_turn: fmt_time(m.avg_time_ms),
        }
    }

    pub fn save_checkpoint(&self, run_dir: &Path) -> Result<()> {
        let dir = run_dir.join(format!("epoch_{}", self.epoch));
        self.system.save(&dir.join("system"))?;
        for (i, u) in self.users.iter().enumerate() {
            u.save(&dir.join("users").join(format!("user_{i}")))?;
        }
        Ok(())
    }

    /// Runs every epoch, evaluating every `eval_interval` epochs, and
    /// finishes with the full evaluation. With `run_dir` set, writes the
    /// metric, update, curriculum and evaluation files and checkpoints.
    pub fn run(mut self, run_dir: Option<&Path>) -> Result<RunArtifacts> {
        if let Some(dir) = run_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            std::fs::write(dir.join("config.toml"), self.cfg.to_toml_string())
                .map_err(|e| Error::io(dir.join("config.toml"), e))?;
            if self.cfg.train.write_transcripts {
                let p = dir.join("transcripts.jsonl");
                let f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
                self.transcript = Some(BufWriter::new(f));
                self.transcript_path = p;
            }
        }
        let ev = self.cfg.eval.clone();
        let mut metrics = vec![self.metrics_row(&self.evaluate(ev.interval_dialogs, 1)?)];
        let epochs = if self.cfg.train.mode == Mode::Sl {
            0
        } else {
            self.cfg.train.epochs
        };
        let started = Instant::now();
        for _ in 0..epochs {
            self.run_epoch()?;
            let interval = self.cfg.train.eval_interval;
            if interval > 0 && self.epoch.is_multiple_of(interval) {
                let row = self.metrics_row(&self.evaluate(ev.interval_dialogs, 1)?);
                log::info!(
                    "{} epoch {}: succ {:.3} reward {:.3} dst {:.3}",
                    row.mode,
                    row.epoch,
                    row.dialog_succ,
                    row.avg_reward,
                    row.dst_acc
                );
                metrics.push(row);
            }
            let every = self.cfg.train.checkpoint_every;
            if let (Some(dir), true) = (run_dir, every > 0 && self.epoch.is_multiple_of(every)) {
                self.save_checkpoint(dir)?;
            }
        }
        log::info!(
            "{}: {} epochs, {} turns, {} tracker updates in {:.1}s",
            self.cfg.train.mode,
            self.epoch,
            self.total_turns,
            self.dst_updates,
            started.elapsed().as_secs_f64()
        );
        let final_report = self.evaluate(ev.n_dialogs, ev.repeats)?;
        if let Some(w) = self.transcript.as_mut() {
            w.flush().map_err(|e| Error::io(&self.transcript_path, e))?;
        }
        let count = |buffer: &str, kind: Option<&str>| {
            self.updates
                .iter()
                .filter(|u| u.buffer == buffer && kind.is_none_or(|k| u.update_type == k))
                .count()
        };
        let dst_discards = count("sys_dst", Some("discard"));
        let summary = RunSummary {
            mode: self.cfg.train.mode.name().to_string(),
            seed: self.cfg.train.seed,
            epochs: self.epoch,
            n_users: self.users.len(),
            dialogs: self.dialogs,
            total_turns: self.total_turns,
            train_success: if self.dialogs == 0 {
                0.0
            } else {
                self.successes as f64 / self.dialogs as f64
            },
            dp_updates: count("sys_dp", None),
            dst_updates: count("sys_dst", None) - dst_discards,
            dst_discards,
            dst_capacity: self.cfg.buffers.sys_dst,
            dst_unit: format!("{:?}", self.cfg.buffers.dst_unit).to_lowercase(),
        };
        if let Some(dir) = run_dir {
            self.save_checkpoint(dir)?;
            summary.write(&dir.join("run_summary.json"))?;
            write_csv(&dir.join("metrics.csv"), &metrics)?;
            write_csv(&dir.join("updates.csv"), &self.updates)?;
            write_csv(&dir.join("curriculum.csv"), &self.curriculum)?;
            write_eval_csv(&dir.join("final_eval.csv"), &final_report)?;
        }
        Ok(RunArtifacts {
            metrics,
            updates: self.updates,
            curriculum: self.curriculum,
            total_turns: self.total_turns,
            dialogs: self.dialogs,
            user_dialogs: self.user_dialogs,
            final_report,
            summary,
            difficulty: self.table,
            system: self.system,
            users: self.users,
        })
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let err = |e: csv::Error| Error::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let err = |e: csv::Error| Error::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    r.deserialize().map(|row| row.map_err(err)).collect()
}

/// The directory name of a run: mode and seed.
pub fn run_name(cfg: &RunConfig) -> String {
    format!("{}-seed{}", cfg.train.mode.name(), cfg.train.seed)
}
