//! Run configuration.
//!
//! A TOML file with one table per subsystem. Every field has a default, so an
//! empty file (or no file) is a valid configuration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub slot_count: usize,
    pub vocab_size: usize,
    pub noise_rate: f64,
    pub update_prob: f64,
    pub max_turns: usize,
    pub db_size: usize,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            slot_count: 3,
            vocab_size: 8,
            noise_rate: 0.15,
            update_prob: 0.7,
            max_turns: 16,
            db_size: 50,
            seed: 0,
        }
    }
}

/// Reward magnitudes and the individually switchable penalty triggers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub success_reward: f64,
    pub failure_penalty: f64,
    pub system_penalty_unit: f64,
    pub user_penalty_unit: f64,
    pub gamma: f64,
    pub length_penalty: bool,
    pub confirm_empty_penalty: bool,
    pub redundant_request_penalty: bool,
    pub result_after_deny_penalty: bool,
    pub premature_bye_penalty: bool,
    pub needless_repeat_penalty: bool,
    pub repeated_inform_penalty: bool,
    pub unprompted_affirm_penalty: bool,
    pub silence_fallback_penalty: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            success_reward: 2.0,
            failure_penalty: -1.0,
            system_penalty_unit: -0.05,
            user_penalty_unit: -0.02,
            gamma: 0.99,
            length_penalty: true,
            confirm_empty_penalty: true,
            redundant_request_penalty: true,
            result_after_deny_penalty: true,
            premature_bye_penalty: true,
            needless_repeat_penalty: true,
            repeated_inform_penalty: true,
            unprompted_affirm_penalty: true,
            silence_fallback_penalty: true,
        }
    }
}

/// What one slot of the system DST buffer holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DstUnit {
    Turns,
    Dialogs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BufferConfig {
    pub user_dp: usize,
    pub user_nlu: usize,
    pub sys_dp: usize,
    pub sys_dst: usize,
    pub dst_unit: DstUnit,
}

impl Default for BufferConfig {
    fn default() -> Self {
        Self {
            user_dp: 6,
            user_nlu: 6,
            sys_dp: 6,
            sys_dst: 3000,
            dst_unit: DstUnit::Turns,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub enabled: bool,
    pub easy_threshold: f64,
    pub middle_threshold: f64,
    pub batch_size: usize,
    pub min_test_per_action: usize,
    pub remeasure: bool,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            easy_threshold: 0.82,
            middle_threshold: 0.55,
            batch_size: 32,
            min_test_per_action: 20,
            remeasure: false,
        }
    }
}

/// Knobs of the scripted policies that generate the pretraining corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_dialogs: usize,
    pub system_confirm_prob: f64,
    pub system_readback_prob: f64,
    pub user_multi_prob: f64,
    pub user_silence_prob: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_dialogs: 4000,
            system_confirm_prob: 0.2,
            system_readback_prob: 0.3,
            user_multi_prob: 0.3,
            user_silence_prob: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub hidden: usize,
    pub sl_lr: f64,
    pub rl_lr: f64,
    pub dst_lr: f64,
    pub clip_norm: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            sl_lr: 1e-3,
            rl_lr: 3e-4,
            dst_lr: 3e-4,
            clip_norm: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub dst_epochs: usize,
    pub nlu_epochs: usize,
    pub dp_epochs: usize,
    pub batch_size: usize,
    pub held_out_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            dst_epochs: 12,
            nlu_epochs: 4,
            dp_epochs: 8,
            batch_size: 32,
            held_out_fraction: 0.1,
        }
    }
}

/// The five training regimes compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "SL")]
    Sl,
    #[serde(rename = "RL-fixed_DST")]
    RlFixedDst,
    #[serde(rename = "RL-train_DST")]
    RlTrainDst,
    #[serde(rename = "AURL")]
    Aurl,
    #[serde(rename = "AURL-MURL")]
    AurlMurl,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Sl,
        Mode::RlFixedDst,
        Mode::RlTrainDst,
        Mode::Aurl,
        Mode::AurlMurl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Sl => "SL",
            Mode::RlFixedDst => "RL-fixed_DST",
            Mode::RlTrainDst => "RL-train_DST",
            Mode::Aurl => "AURL",
            Mode::AurlMurl => "AURL-MURL",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub n_users: usize,
    pub epochs: usize,
    pub dialogs_per_epoch: usize,
    pub eval_interval: usize,
    pub seed: u64,
    pub entropy_coef: f64,
    pub checkpoint_every: usize,
    pub auto_pretrain: bool,
    pub write_transcripts: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Aurl,
            n_users: 1,
            epochs: 2000,
            dialogs_per_epoch: 6,
            eval_interval: 100,
            seed: 0,
            entropy_coef: 0.03,
            checkpoint_every: 0,
            auto_pretrain: true,
            write_transcripts: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_dialogs: usize,
    pub repeats: usize,
    pub interval_dialogs: usize,
    pub record_time: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_dialogs: 300,
            repeats: 3,
            interval_dialogs: 200,
            record_time: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub reward: RewardConfig,
    pub buffers: BufferConfig,
    pub curriculum: CurriculumConfig,
    pub corpus: CorpusConfig,
    pub nnet: NetConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies the mode's structural constraints: the synchronous baseline
    /// uses dialog-sized DST buffers and no curriculum.
    pub fn normalized(mut self) -> Self {
        if self.train.mode == Mode::RlTrainDst {
            self.buffers.sys_dst = self.buffers.sys_dp;
            self.buffers.dst_unit = DstUnit::Dialogs;
            self.curriculum.enabled = false;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.env;
        if e.slot_count < 1 {
            return Err(Error::Config("env.slot_count must be >= 1".into()));
        }
        if e.vocab_size < 2 {
            return Err(Error::Config("env.vocab_size must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&e.noise_rate) {
            return Err(Error::Config("env.noise_rate must be in [0,1)".into()));
        }
        if !(0.0..1.0).contains(&e.update_prob) {
            return Err(Error::Config("env.update_prob must be in [0,1)".into()));
        }
        if e.max_turns < 2 {
            return Err(Error::Config("env.max_turns must be >= 2".into()));
        }
        if e.db_size < 1 {
            return Err(Error::Config("env.db_size must be >= 1".into()));
        }
        let r = &self.reward;
        if !(r.success_reward > 0.0 && r.failure_penalty < 0.0) {
            return Err(Error::Config(
                "reward: success_reward > 0 > failure_penalty required".into(),
            ));
        }
        if !(r.system_penalty_unit < 0.0 && r.user_penalty_unit < 0.0) {
            return Err(Error::Config(
                "reward: penalty units must be negative".into(),
            ));
        }
        if !(r.gamma > 0.0 && r.gamma <= 1.0) {
            return Err(Error::Config("reward.gamma must be in (0,1]".into()));
        }
        let b = &self.buffers;
        if b.user_dp == 0 || b.user_nlu == 0 || b.sys_dp == 0 || b.sys_dst == 0 {
            return Err(Error::Config("buffer capacities must be positive".into()));
        }
        let c = &self.curriculum;
        if !(0.0..=1.0).contains(&c.middle_threshold)
            || !(0.0..=1.0).contains(&c.easy_threshold)
            || c.middle_threshold > c.easy_threshold
        {
            return Err(Error::Config(
                "curriculum thresholds must satisfy 0 <= middle <= easy <= 1".into(),
            ));
        }
        if c.batch_size == 0 {
            return Err(Error::Config(
                "curriculum.batch_size must be positive".into(),
            ));
        }
        let t = &self.train;
        if t.n_users == 0 {
            return Err(Error::Config("train.n_users must be >= 1".into()));
        }
        match t.mode {
            Mode::AurlMurl if t.n_users < 2 => {
                return Err(Error::Config("AURL-MURL requires n_users >= 2".into()))
            }
            Mode::AurlMurl => {}
            _ if t.n_users != 1 => {
                return Err(Error::Config(format!(
                    "mode {} requires n_users == 1",
                    t.mode
                )))
            }
            _ => {}
        }
        if t.dialogs_per_epoch == 0 {
            return Err(Error::Config(
                "train.dialogs_per_epoch must be positive".into(),
            ));
        }
        if self.nnet.hidden == 0 {
            return Err(Error::Config("nnet.hidden must be positive".into()));
        }
        if !(self.pretrain.held_out_fraction > 0.0 && self.pretrain.held_out_fraction < 1.0) {
            return Err(Error::Config(
                "pretrain.held_out_fraction must be in (0,1)".into(),
            ));
        }
        Ok(())
    }
}
