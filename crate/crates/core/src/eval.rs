//! Evaluation against a hand-written user automaton, and the dialog metrics.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{
    BeliefState, Schema, SlotId, SystemAction, UserAction, UserGoal, Utterance, ValueToken,
};
use crate::error::{Error, Result};
use crate::orchestrator::episode::{
    run_dialog, Env, EpisodeLog, NeuralSystem, SysChoice, SysView, SystemDriver, Tracked,
    UserChoice, UserDriver, UserView,
};
use crate::policy::DecodeMode;
use crate::system_agent::SystemAgent;
use crate::user_agent::{verbalize, UserStateVector, INFORMED, NOT_INFORMED};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FsaState {
    Start,
    Answering,
    Updating,
    Confirming,
    Closing,
}

/// Randomness of the automaton. The evaluator uses the zero style; the
/// corpus user draws multi-slot answers and silences.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FsaStyle {
    pub multi_prob: f64,
    pub silence_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FsaReply {
    pub action: UserAction,
    pub slot: Option<SlotId>,
    pub value_tokens: Vec<ValueToken>,
    pub state: FsaState,
}

/// Agenda-style user: answers requests from its goal, voices fired
/// revisions, affirms correct confirmations and denies wrong ones, and
/// says bye to a correct read-back. A revision of a slot it has itself
/// withdrawn (by a deny or a restart) is voiced as a plain inform.
#[derive(Debug, Clone, PartialEq)]
pub struct FsaUser {
    pub state: FsaState,
    pub style: FsaStyle,
    last_prompt: Option<Utterance>,
    withdrawn: BTreeSet<SlotId>,
}

impl FsaUser {
    pub fn new(style: FsaStyle) -> Self {
        Self {
            state: FsaState::Start,
            style,
            last_prompt: None,
            withdrawn: BTreeSet::new(),
        }
    }

    pub fn reset(&mut self) {
        self.state = FsaState::Start;
        self.last_prompt = None;
        self.withdrawn.clear();
    }

    fn draw(p: f64, rng: &mut impl Rng) -> bool {
        p > 0.0 && rng.gen::<f64>() < p
    }

    /// Chooses the act for one turn. `sys` is the system utterance as heard;
    /// a `repeat` is answered as if the previous utterance were said again.
    pub fn fsa_step(
        &mut self,
        schema: &Schema,
        sys: &Utterance,
        st: &UserStateVector,
        goal: &UserGoal,
        turn: usize,
        rng: &mut impl Rng,
    ) -> FsaReply {
        let prompt = match sys.system_action() {
            Some(SystemAction::Repeat) => self.last_prompt.clone(),
            _ => {
                self.last_prompt = Some(sys.clone());
                Some(sys.clone())
            }
        };
        let (action, slot, state) = match &prompt {
            None => (UserAction::Silence, None, self.state),
            Some(p) => self.answer(schema, p, st, goal, turn, rng),
        };
        self.state = state;
        self.note_withdrawals(schema, prompt.as_ref(), action, slot);
        let (utt, _) = verbalize(schema, action, slot, goal, turn);
        FsaReply {
            action,
            slot,
            value_tokens: utt.value_tokens,
            state,
        }
    }

    fn note_withdrawals(
        &mut self,
        schema: &Schema,
        prompt: Option<&Utterance>,
        action: UserAction,
        slot: Option<SlotId>,
    ) {
        match (action, slot) {
            (UserAction::Deny, _) => {
                if let Some(s) = prompt
                    .filter(|p| p.system_action() == Some(SystemAction::Confirm))
                    .and_then(|p| p.slot)
                    .filter(|&s| s < schema.n_slots())
                {
                    self.withdrawn.insert(s);
                }
            }
            (UserAction::RestartSlot, Some(s)) => {
                self.withdrawn.insert(s);
            }
            (UserAction::InformNorm | UserAction::UpdateSub, Some(s)) => {
                self.withdrawn.remove(&s);
            }
            (UserAction::InformMulti, Some(s)) => {
                self.withdrawn.remove(&s);
                self.withdrawn.remove(&((s + 1) % schema.n_slots()));
            }
            _ => {}
        }
    }

    fn answer(
        &self,
        schema: &Schema,
        prompt: &Utterance,
        st: &UserStateVector,
        goal: &UserGoal,
        turn: usize,
        rng: &mut impl Rng,
    ) -> (UserAction, Option<SlotId>, FsaState) {
        let n = schema.n_slots();
        let said = |s: SlotId| {
            prompt
                .value_tokens
                .iter()
                .find(|t| t.slot == s)
                .map(|t| t.value)
        };
        match prompt.system_action().unwrap_or(SystemAction::Greet) {
            SystemAction::Bye => (UserAction::Bye, None, FsaState::Closing),
            SystemAction::Repeat => (UserAction::Silence, None, self.state),
            SystemAction::Confirm => {
                let Some(s) = prompt.slot.filter(|&s| s < n) else {
                    return (UserAction::Deny, None, FsaState::Confirming);
                };
                if said(s) == Some(goal.value_at(s, turn)) {
                    let done = st.status.iter().all(|&v| v == INFORMED);
                    let next = if done {
                        FsaState::Closing
                    } else {
                        FsaState::Confirming
                    };
                    (UserAction::Affirm, None, next)
                } else {
                    (UserAction::Deny, None, FsaState::Confirming)
                }
            }
            SystemAction::InformResult => {
                match (0..n).find(|&s| said(s) != Some(goal.value_at(s, turn))) {
                    None => (UserAction::Bye, None, FsaState::Closing),
                    Some(s) => (UserAction::RestartSlot, Some(s), FsaState::Answering),
                }
            }
            a @ (SystemAction::Greet | SystemAction::Request) => {
                if let Some(p) = (0..n).find(|&s| st.pending_revision(s)) {
                    if self.withdrawn.contains(&p) {
                        return (UserAction::InformNorm, Some(p), FsaState::Answering);
                    }
                    return (UserAction::UpdateSub, Some(p), FsaState::Updating);
                }
                if Self::draw(self.style.silence_prob, rng) {
                    return (UserAction::Silence, None, self.state);
                }
                let fallback = || {
                    st.status
                        .iter()
                        .position(|&v| v == NOT_INFORMED)
                        .or_else(|| st.status.iter().position(|&v| v != INFORMED))
                        .unwrap_or(0)
                };
                let target = match (a, prompt.slot) {
                    (SystemAction::Request, Some(s)) if s < n => s,
                    _ => fallback(),
                };
                let next = (target + 1) % n;
                if n > 1
                    && st.status[next] == NOT_INFORMED
                    && Self::draw(self.style.multi_prob, rng)
                {
                    (UserAction::InformMulti, Some(target), FsaState::Answering)
                } else {
                    (UserAction::InformNorm, Some(target), FsaState::Answering)
                }
            }
        }
    }
}

impl UserDriver for FsaUser {
    fn begin(&mut self, _goal: &UserGoal) {
        self.reset();
    }

    fn respond(
        &mut self,
        env: &Env<'_>,
        view: &UserView<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Result<UserChoice> {
        let reply = self.fsa_step(
            env.schema,
            view.sys_utt,
            view.state,
            view.goal,
            view.turn,
            rng,
        );
        Ok(UserChoice {
            action: reply.action,
            slot: reply.slot,
            perceived: (
                view.sys_utt.system_action().unwrap_or(SystemAction::Greet),
                view.sys_utt.slot,
            ),
            nlu_input: None,
            policy_input: None,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n_dialogs: usize,
    pub dialog_succ: f64,
    /// Mean turns over successful dialogs; 0 when none succeeded.
    pub avg_turn: f64,
    pub avg_reward: f64,
    pub dst_acc: f64,
    pub avg_time_ms: Option<f64>,
}

/// Running sums from which [`Metrics`] are read off.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricsAccumulator {
    dialogs: usize,
    successes: usize,
    success_turns: usize,
    reward: f64,
    turns: usize,
    dst_correct: usize,
    time_ms: f64,
    timed_responses: usize,
}

impl MetricsAccumulator {
    pub fn add(&mut self, log: &EpisodeLog) {
        self.dialogs += 1;
        if log.success() {
            self.successes += 1;
            self.success_turns += log.n_turns;
        }
        self.reward += log.system_return;
        self.turns += log.turns.len();
        self.dst_correct += log.turns.iter().filter(|r| r.dst_correct()).count();
    }

    pub fn add_time(&mut self, ms: f64, responses: usize) {
        self.time_ms += ms;
        self.timed_responses += responses;
    }

    pub fn merge(&mut self, other: &Self) {
        self.dialogs += other.dialogs;
        self.successes += other.successes;
        self.success_turns += other.success_turns;
        self.reward += other.reward;
        self.turns += other.turns;
        self.dst_correct += other.dst_correct;
        self.time_ms += other.time_ms;
        self.timed_responses += other.timed_responses;
    }

    pub fn metrics(&self, timed: bool) -> Metrics {
        let ratio = |a: f64, b: usize| if b == 0 { 0.0 } else { a / b as f64 };
        Metrics {
            n_dialogs: self.dialogs,
            dialog_succ: ratio(self.successes as f64, self.dialogs),
            avg_turn: ratio(self.success_turns as f64, self.successes),
            avg_reward: ratio(self.reward, self.dialogs),
            dst_acc: ratio(self.dst_correct as f64, self.turns),
            avg_time_ms: timed.then(|| ratio(self.time_ms, self.timed_responses)),
        }
    }
}

pub fn metrics_from_logs(logs: &[EpisodeLog]) -> Metrics {
    let mut acc = MetricsAccumulator::default();
    for l in logs {
        acc.add(l);
    }
    acc.metrics(false)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_repeat: Vec<Metrics>,
    pub aggregate: Metrics,
}

struct Timed<'s, S: ?Sized> {
    inner: &'s mut S,
    elapsed_ms: f64,
    responses: usize,
}

impl<S: SystemDriver + ?Sized> SystemDriver for Timed<'_, S> {
    fn track(
        &mut self,
        env: &Env<'_>,
        prev_bs: &BeliefState,
        prev_sys: &Utterance,
        user: &Utterance,
    ) -> Result<Tracked> {
        let t0 = Instant::now();
        let out = self.inner.track(env, prev_bs, prev_sys, user);
        self.elapsed_ms += t0.elapsed().as_secs_f64() * 1e3;
        out
    }

    fn decide(
        &mut self,
        env: &Env<'_>,
        view: &SysView<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Result<SysChoice> {
        let t0 = Instant::now();
        let out = self.inner.decide(env, view, rng);
        self.elapsed_ms += t0.elapsed().as_secs_f64() * 1e3;
        self.responses += 1;
        out
    }
}

/// The random stream for evaluation repeat `repeat` under `seed`.
pub fn eval_rng(seed: u64, repeat: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(1 + repeat as u64);
    r
}

/// Runs `repeats` blocks of `n_dialogs` dialogs of `system` against the
/// deterministic automaton. The same seed yields the same goals and noise
/// for any system.
pub fn evaluate_driver<S: SystemDriver + ?Sized>(
    system: &mut S,
    env: &Env<'_>,
    n_dialogs: usize,
    repeats: usize,
    seed: u64,
    record_time: bool,
    mut sink: impl FnMut(&EpisodeLog),
) -> Result<EvalReport> {
    if n_dialogs == 0 || repeats == 0 {
        return Err(Error::Config(
            "evaluation needs n_dialogs >= 1 and repeats >= 1".into(),
        ));
    }
    let mut user = FsaUser::new(FsaStyle::default());
    let mut total = MetricsAccumulator::default();
    let mut per_repeat = Vec::with_capacity(repeats);
    for rep in 0..repeats {
        let mut rng = eval_rng(seed, rep);
        let mut acc = MetricsAccumulator::default();
        for _ in 0..n_dialogs {
            let mut timed = Timed {
                inner: &mut *system,
                elapsed_ms: 0.0,
                responses: 0,
            };
            let log = run_dialog(env, &mut timed, &mut user, 0, &mut rng)?;
            acc.add_time(timed.elapsed_ms, timed.responses);
            acc.add(&log);
            sink(&log);
        }
        per_repeat.push(acc.metrics(record_time));
        total.merge(&acc);
    }
    Ok(EvalReport {
        per_repeat,
        aggregate: total.metrics(record_time),
    })
}

/// Greedy evaluation of a trained system.
pub fn evaluate(
    agent: &SystemAgent,
    env: &Env<'_>,
    n_dialogs: usize,
    repeats: usize,
    seed: u64,
    record_time: bool,
) -> Result<EvalReport> {
    let mut sys = NeuralSystem {
        agent,
        mode: DecodeMode::Greedy,
        with_value: false,
    };
    evaluate_driver(&mut sys, env, n_dialogs, repeats, seed, record_time, |_| {})
}

pub fn fmt_time(t: Option<f64>) -> String {
    t.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

/// One row per repeat plus an `aggregate` row.
pub fn write_eval_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out =
        String::from("repeat,n_dialogs,dialog_succ,avg_turn,avg_reward,dst_acc,avg_time_ms\n");
    let row = |name: String, m: &Metrics| {
        format!(
            "{name},{},{:.6},{:.6},{:.6},{:.6},{}\n",
            m.n_dialogs,
            m.dialog_succ,
            m.avg_turn,
            m.avg_reward,
            m.dst_acc,
            fmt_time(m.avg_time_ms)
        )
    };
    for (i, m) in report.per_repeat.iter().enumerate() {
        out.push_str(&row(i.to_string(), m));
    }
    out.push_str(&row("aggregate".into(), &report.aggregate));
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
