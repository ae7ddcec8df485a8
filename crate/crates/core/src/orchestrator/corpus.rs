//! Synthetic pretraining corpus: a scripted system talking to a stochastic
//! agenda user, every turn labelled with gold states and decisions.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::CorpusConfig;
use crate::domain::{rule_track, BeliefState, SlotId, SystemAction, UserAction, Utterance};
use crate::error::{Error, Result};
use crate::eval::{FsaStyle, FsaUser};
use crate::orchestrator::episode::{
    run_dialog, Env, EpisodeLog, SysChoice, SysView, SystemDriver, Tracked,
};

/// Rule system over a rule tracker fed the noisy user side. It requests
/// a random unfilled slot, sometimes confirms what it just heard, and once every slot
/// is filled either reads the belief back or closes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScriptedSystem {
    pub confirm_prob: f64,
    pub readback_prob: f64,
}

impl ScriptedSystem {
    pub fn from_config(cfg: &CorpusConfig) -> Self {
        Self {
            confirm_prob: cfg.system_confirm_prob,
            readback_prob: cfg.system_readback_prob,
        }
    }

    fn draw(p: f64, rng: &mut ChaCha8Rng) -> bool {
        p > 0.0 && rng.gen::<f64>() < p
    }
}

impl SystemDriver for ScriptedSystem {
    fn track(
        &mut self,
        _env: &Env<'_>,
        prev_bs: &BeliefState,
        prev_sys: &Utterance,
        user: &Utterance,
    ) -> Result<Tracked> {
        Ok(Tracked {
            bs: rule_track(prev_bs, prev_sys, user),
            ctx: Vec::new(),
            predicted_user_action: user.user_action(),
            dst_input: None,
        })
    }

    fn decide(
        &mut self,
        _env: &Env<'_>,
        view: &SysView<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Result<SysChoice> {
        let choice = |action, slot| SysChoice {
            action,
            slot,
            policy_input: None,
            value: None,
        };
        let heard = view.last_user.user_action().unwrap_or(UserAction::Silence);
        let (prev, prev_slot) = view.prev;
        match heard {
            UserAction::Silence => return Ok(choice(SystemAction::Repeat, None)),
            UserAction::Bye => return Ok(choice(SystemAction::Bye, None)),
            UserAction::Affirm if prev == SystemAction::InformResult => {
                return Ok(choice(SystemAction::Bye, None))
            }
            UserAction::RestartSlot if view.last_user.slot.is_some() => {
                return Ok(choice(SystemAction::Request, view.last_user.slot))
            }
            UserAction::Deny if prev == SystemAction::Confirm && prev_slot.is_some() => {
                return Ok(choice(SystemAction::Request, prev_slot))
            }
            _ => {}
        }
        if heard.is_inform() {
            if let Some(s) = view.last_user.slot.filter(|&s| view.bs.values[s].is_some()) {
                if Self::draw(self.confirm_prob, rng) {
                    return Ok(choice(SystemAction::Confirm, Some(s)));
                }
            }
        }
        let unfilled: Vec<SlotId> = (0..view.bs.values.len())
            .filter(|&s| view.bs.values[s].is_none())
            .collect();
        if let Some(&s) = unfilled.choose(rng) {
            return Ok(choice(SystemAction::Request, Some(s)));
        }
        if Self::draw(self.readback_prob, rng) {
            Ok(choice(SystemAction::InformResult, None))
        } else {
            Ok(choice(SystemAction::Bye, None))
        }
    }
}

pub fn corpus_user(cfg: &CorpusConfig) -> FsaUser {
    FsaUser::new(FsaStyle {
        multi_prob: cfg.user_multi_prob,
        silence_prob: cfg.user_silence_prob,
    })
}

pub fn generate_corpus(
    env: &Env<'_>,
    cfg: &CorpusConfig,
    n_dialogs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpisodeLog>> {
    if n_dialogs == 0 {
        return Err(Error::Config("corpus.n_dialogs must be >= 1".into()));
    }
    let mut system = ScriptedSystem::from_config(cfg);
    let mut user = corpus_user(cfg);
    (0..n_dialogs)
        .map(|_| run_dialog(env, &mut system, &mut user, 0, rng))
        .collect()
}

/// One JSON record per dialog.
pub fn write_jsonl(path: &Path, logs: &[EpisodeLog]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for l in logs {
        let line = serde_json::to_string(l).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<EpisodeLog>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    std::io::BufReader::new(f)
        .lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|line| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        })
        .collect()
}
