//! One dialog between a system and a user, with every turn recorded.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{EnvConfig, RewardConfig};
use crate::domain::{
    corrupt, db_query, ops_between, rule_track, sample_goal, success_check, BeliefState, Database,
    QueryFeature, Schema, SlotId, SlotOp, SystemAction, Terminal, UserAction, UserGoal, Utterance,
};
use crate::error::{Error, Result};
use crate::policy::{DecodeMode, PolicyExample, PolicyTransition};
use crate::rewards::{system_breakdown, user_breakdown, RewardBreakdown, TurnContext};
use crate::system_agent::{DstExample, SystemAgent};
use crate::user_agent::{
    nlu_input, update_user_state, user_policy_input, verbalize, UserAgent, UserStateVector,
};

/// The fixed parts of the world a dialog runs in.
#[derive(Debug, Clone, Copy)]
pub struct Env<'a> {
    pub schema: &'a Schema,
    pub db: &'a Database,
    pub cfg: &'a EnvConfig,
    pub reward: &'a RewardConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracked {
    pub bs: BeliefState,
    pub ctx: Vec<f64>,
    pub predicted_user_action: Option<UserAction>,
    pub dst_input: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct SysView<'a> {
    pub prev: (SystemAction, Option<SlotId>),
    pub bs: &'a BeliefState,
    pub ctx: &'a [f64],
    pub q: QueryFeature,
    pub last_user: &'a Utterance,
    pub turn: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SysChoice {
    pub action: SystemAction,
    pub slot: Option<SlotId>,
    pub policy_input: Option<Vec<f64>>,
    pub value: Option<f64>,
}

pub trait SystemDriver {
    fn track(
        &mut self,
        env: &Env<'_>,
        prev_bs: &BeliefState,
        prev_sys: &Utterance,
        user: &Utterance,
    ) -> Result<Tracked>;

    fn decide(
        &mut self,
        env: &Env<'_>,
        view: &SysView<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Result<SysChoice>;
}

#[derive(Debug, Clone, Copy)]
pub struct UserView<'a> {
    pub goal: &'a UserGoal,
    pub state: &'a UserStateVector,
    pub sys_utt: &'a Utterance,
    pub prev: Option<(UserAction, Option<SlotId>)>,
    pub turn: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserChoice {
    pub action: UserAction,
    pub slot: Option<SlotId>,
    pub perceived: (SystemAction, Option<SlotId>),
    pub nlu_input: Option<Vec<f64>>,
    pub policy_input: Option<Vec<f64>>,
}

pub trait UserDriver {
    /// Called once per dialog before the first turn.
    fn begin(&mut self, _goal: &UserGoal) {}

    fn respond(
        &mut self,
        env: &Env<'_>,
        view: &UserView<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Result<UserChoice>;
}

/// The spoken form of a system decision: a confirm carries the believed
/// value, a read-back carries every believed value.
pub fn realize_system(
    action: SystemAction,
    slot: Option<SlotId>,
    bs: &BeliefState,
    turn: usize,
) -> Utterance {
    let tokens = match (action, slot) {
        (SystemAction::Confirm, Some(s)) => {
            bs.tokens().into_iter().filter(|t| t.slot == s).collect()
        }
        (SystemAction::InformResult, _) => bs.tokens(),
        _ => Vec::new(),
    };
    let slot = if action.is_slot_bearing() { slot } else { None };
    Utterance::system(action, slot, turn).with_values(tokens)
}

/// Network inputs seen during a turn; never serialized.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TurnTensors {
    pub dst_input: Option<Vec<f64>>,
    pub sys_policy_input: Option<Vec<f64>>,
    pub nlu_input: Option<Vec<f64>>,
    pub user_policy_input: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn: usize,
    pub system_utterance: Utterance,
    pub perceived_system_action: SystemAction,
    pub perceived_system_slot: Option<SlotId>,
    pub user_state: Vec<u8>,
    pub user_decision: UserAction,
    pub user_decision_slot: Option<SlotId>,
    pub user_clean: Utterance,
    pub user_noisy: Utterance,
    pub silence_fallback: bool,
    pub sys_bs_before: BeliefState,
    pub sys_bs_after: BeliefState,
    pub gold_before: BeliefState,
    pub gold_after: BeliefState,
    pub predicted_user_action: Option<UserAction>,
    pub system_action: SystemAction,
    pub system_slot: Option<SlotId>,
    pub query: QueryFeature,
    pub system_value: Option<f64>,
    pub system_reward: RewardBreakdown,
    pub user_reward: RewardBreakdown,
    pub terminal: Terminal,
    #[serde(skip)]
    pub tensors: TurnTensors,
}

impl TurnRecord {
    pub fn user_action(&self) -> UserAction {
        self.user_clean.user_action().unwrap_or(UserAction::Silence)
    }

    /// The system's belief equals the oracle state after this turn.
    pub fn dst_correct(&self) -> bool {
        self.sys_bs_after == self.gold_after
    }

    /// Tracker labels for this turn: what the clean user utterance does to
    /// the belief the tracker actually started from.
    pub fn dst_target_ops(&self) -> Vec<SlotOp> {
        let target = rule_track(
            &self.sys_bs_before,
            &self.system_utterance,
            &self.user_clean,
        );
        ops_between(&self.sys_bs_before, &target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub user_id: usize,
    pub goal: UserGoal,
    pub turns: Vec<TurnRecord>,
    pub outcome: Terminal,
    pub n_turns: usize,
    pub system_return: f64,
    pub user_return: f64,
}

impl EpisodeLog {
    pub fn success(&self) -> bool {
        self.outcome == Terminal::Success
    }

    pub fn system_transitions(&self) -> Result<Vec<PolicyTransition>> {
        transitions(&self.turns, |r| {
            (
                r.tensors.sys_policy_input.clone(),
                r.system_action.index(),
                r.system_slot,
                r.system_reward.total(),
            )
        })
    }

    pub fn user_transitions(&self) -> Result<Vec<PolicyTransition>> {
        transitions(&self.turns, |r| {
            (
                r.tensors.user_policy_input.clone(),
                r.user_decision.index(),
                r.user_decision_slot,
                r.user_reward.total(),
            )
        })
    }

    pub fn nlu_examples(&self, n_slots: usize) -> Result<Vec<PolicyExample>> {
        self.turns
            .iter()
            .map(|r| {
                let input = r
                    .tensors
                    .nlu_input
                    .clone()
                    .ok_or(Error::Training("episode has no NLU inputs".into()))?;
                Ok(PolicyExample {
                    input,
                    action: r
                        .system_utterance
                        .system_action()
                        .map_or(0, SystemAction::index),
                    slot: Some(r.system_utterance.slot.unwrap_or(n_slots)),
                })
            })
            .collect()
    }

    pub fn dst_examples(&self) -> Result<Vec<DstExample>> {
        self.turns
            .iter()
            .map(|r| {
                let input = r
                    .tensors
                    .dst_input
                    .clone()
                    .ok_or(Error::Training("episode has no tracker inputs".into()))?;
                Ok(DstExample {
                    input,
                    ops: r.dst_target_ops(),
                    user_action: r.user_action(),
                })
            })
            .collect()
    }
}

type Step = (Option<Vec<f64>>, usize, Option<SlotId>, f64);

fn transitions(
    turns: &[TurnRecord],
    pick: impl Fn(&TurnRecord) -> Step,
) -> Result<Vec<PolicyTransition>> {
    let steps: Vec<Step> = turns.iter().map(pick).collect();
    let mut out = Vec::with_capacity(steps.len());
    for (i, (input, action, slot, reward)) in steps.iter().enumerate() {
        let input = input
            .clone()
            .ok_or_else(|| Error::Training("episode has no policy inputs".into()))?;
        let next_input = match steps.get(i + 1) {
            Some((next, ..)) => Some(
                next.clone()
                    .ok_or_else(|| Error::Training("episode has no policy inputs".into()))?,
            ),
            None => None,
        };
        out.push(PolicyTransition {
            input,
            action: *action,
            slot: *slot,
            reward: *reward,
            next_input,
        });
    }
    Ok(out)
}

/// Runs one dialog. The system opens with a greeting; each turn the user
/// answers the last system utterance, the answer passes through the noise
/// channel, the system tracks it and decides its next act. The dialog ends
/// when the system says bye or the turn budget is spent.
pub fn run_dialog<S, U>(
    env: &Env<'_>,
    system: &mut S,
    user: &mut U,
    user_id: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeLog>
where
    S: SystemDriver + ?Sized,
    U: UserDriver + ?Sized,
{
    let schema = env.schema;
    let goal = sample_goal(schema, env.cfg.update_prob, rng);
    user.begin(&goal);
    let mut ustate = UserStateVector::new(schema.n_slots());
    let mut sys_bs = BeliefState::empty(schema);
    let mut gold = BeliefState::empty(schema);
    let mut sys_utt = Utterance::system(SystemAction::Greet, None, 0);
    let mut prev_sys = (SystemAction::Greet, None);
    let mut prev_user: Option<(UserAction, Option<SlotId>)> = None;
    let mut turns = Vec::new();
    let mut outcome = Terminal::Ongoing;

    for t in 0..env.cfg.max_turns {
        ustate.fire_due(&goal, t);
        ustate.note_system_claims(&sys_utt, &goal, t);
        let state_before = ustate.clone();
        let uc = user.respond(
            env,
            &UserView {
                goal: &goal,
                state: &ustate,
                sys_utt: &sys_utt,
                prev: prev_user,
                turn: t,
            },
            rng,
        )?;
        let (clean, fallback) = verbalize(schema, uc.action, uc.slot, &goal, t);
        let said = (
            clean.user_action().unwrap_or(UserAction::Silence),
            clean.slot,
        );
        ustate = update_user_state(&ustate, said.0, said.1, &goal, t);
        let noisy = corrupt(&clean, env.cfg.noise_rate, schema, rng);
        let gold_next = rule_track(&gold, &sys_utt, &clean);

        let tracked = system.track(env, &sys_bs, &sys_utt, &noisy)?;
        let q = db_query(&tracked.bs, env.db);
        let sc = system.decide(
            env,
            &SysView {
                prev: prev_sys,
                bs: &tracked.bs,
                ctx: &tracked.ctx,
                q,
                last_user: &noisy,
                turn: t,
            },
            rng,
        )?;
        let closed = sc.action == SystemAction::Bye;
        let terminal = success_check(&tracked.bs, &goal, closed, t + 1, env.cfg.max_turns);
        let goal_now = goal.values_at(t);
        let ctx = TurnContext {
            prompt: sys_utt.system_action().unwrap_or(SystemAction::Greet),
            system_action: sc.action,
            system_slot: sc.slot,
            bs_before: &sys_bs,
            bs_after: &tracked.bs,
            goal_values: &goal_now,
            user_action: said.0,
            user_slot: said.1,
            perceived_user_action: tracked.predicted_user_action,
            prev_user,
            silence_fallback: fallback,
            terminal,
        };
        let system_reward = system_breakdown(&ctx, env.reward);
        let user_reward = user_breakdown(&ctx, env.reward);

        turns.push(TurnRecord {
            turn: t,
            system_utterance: sys_utt.clone(),
            perceived_system_action: uc.perceived.0,
            perceived_system_slot: uc.perceived.1,
            user_state: state_before.status.clone(),
            user_decision: uc.action,
            user_decision_slot: uc.slot,
            user_clean: clean,
            user_noisy: noisy,
            silence_fallback: fallback,
            sys_bs_before: sys_bs.clone(),
            sys_bs_after: tracked.bs.clone(),
            gold_before: gold.clone(),
            gold_after: gold_next.clone(),
            predicted_user_action: tracked.predicted_user_action,
            system_action: sc.action,
            system_slot: sc.slot,
            query: q,
            system_value: sc.value,
            system_reward,
            user_reward,
            terminal,
            tensors: TurnTensors {
                dst_input: tracked.dst_input,
                sys_policy_input: sc.policy_input,
                nlu_input: uc.nlu_input,
                user_policy_input: uc.policy_input,
            },
        });

        prev_user = Some(said);
        prev_sys = (sc.action, sc.slot);
        sys_bs = tracked.bs;
        gold = gold_next;
        if terminal.is_terminal() {
            outcome = terminal;
            break;
        }
        sys_utt = realize_system(sc.action, sc.slot, &sys_bs, t + 1);
    }

    let system_return = turns.iter().map(|r| r.system_reward.total()).sum();
    let user_return = turns.iter().map(|r| r.user_reward.total()).sum();
    Ok(EpisodeLog {
        user_id,
        goal,
        n_turns: turns.len(),
        turns,
        outcome,
        system_return,
        user_return,
    })
}

/// The learned system: neural tracker plus policy.
pub struct NeuralSystem<'a> {
    pub agent: &'a SystemAgent,
    pub mode: DecodeMode,
    pub with_value: bool,
}

impl SystemDriver for NeuralSystem<'_> {
    fn track(
        &mut self,
        env: &Env<'_>,
        prev_bs: &BeliefState,
        prev_sys: &Utterance,
        user: &Utterance,
    ) -> Result<Tracked> {
        let out = self.agent.track(env.schema, prev_bs, prev_sys, user)?;
        Ok(Tracked {
            bs: out.bs,
            ctx: out.ctx,
            predicted_user_action: Some(out.user_action),
            dst_input: Some(out.input),
        })
    }

    fn decide(
        &mut self,
        env: &Env<'_>,
        view: &SysView<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Result<SysChoice> {
        let input = self
            .agent
            .policy_input(env.schema, view.prev, view.bs, view.ctx, &view.q);
        let d = self.agent.decide(&input, self.mode, rng)?;
        let value = if self.with_value {
            Some(self.agent.value(&input)?)
        } else {
            None
        };
        Ok(SysChoice {
            action: d.action,
            slot: d.slot,
            policy_input: Some(input),
            value,
        })
    }
}

/// A learned user: NLU perception then a sampled (or greedy) act.
pub struct NeuralUser<'a> {
    pub agent: &'a UserAgent,
    pub mode: DecodeMode,
}

impl UserDriver for NeuralUser<'_> {
    fn respond(
        &mut self,
        env: &Env<'_>,
        view: &UserView<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Result<UserChoice> {
        let nlu_in = nlu_input(env.schema, view.goal, view.turn, view.sys_utt);
        let perceived = self.agent.perceive(&nlu_in, env.schema)?;
        let p_in = user_policy_input(env.schema, view.prev.map(|p| p.0), perceived, view.state);
        let d = self.agent.decide(&p_in, self.mode, rng)?;
        Ok(UserChoice {
            action: d.action,
            slot: d.slot,
            perceived,
            nlu_input: Some(nlu_in),
            policy_input: Some(p_in),
        })
    }
}

/// Chooses uniformly among all system acts and slots; a floor for
/// evaluation.
pub struct RandomSystem;

impl SystemDriver for RandomSystem {
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
        env: &Env<'_>,
        _view: &SysView<'_>,
        rng: &mut ChaCha8Rng,
    ) -> Result<SysChoice> {
        let action = SystemAction::ALL[rng.gen_range(0..SystemAction::ALL.len())];
        let slot = action
            .is_slot_bearing()
            .then(|| rng.gen_range(0..env.schema.n_slots()));
        Ok(SysChoice {
            action,
            slot,
            policy_input: None,
            value: None,
        })
    }
}
