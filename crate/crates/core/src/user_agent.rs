//! The learnable user simulator: an NLU that perceives system utterances, a
//! per-slot progress vector, a two-headed policy, and verbalization.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Schema, SlotId, SystemAction, UserAction, UserGoal, Utterance, ValueToken};
use crate::error::{Error, Result};
use crate::nnet::{argmax, Net};
use crate::policy::{choose, zero_critic, DecodeMode, HeadLayout};
use crate::system_agent::{
    encode_system_utterance, system_utterance_dim, N_SYSTEM_ACTIONS, N_USER_ACTIONS,
};

pub const NOT_INFORMED: u8 = 0;
pub const INFORMED: u8 = 1;
pub const NEEDS_UPDATE: u8 = 2;

/// Per-slot progress from the user's point of view: 0 never informed,
/// 1 informed and believed current, 2 must be (re)informed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserStateVector {
    pub status: Vec<u8>,
    fired: Vec<bool>,
}

impl UserStateVector {
    pub fn new(n_slots: usize) -> Self {
        Self {
            status: vec![NOT_INFORMED; n_slots],
            fired: vec![false; n_slots],
        }
    }

    /// A vector with the given statuses and no fired revisions.
    pub fn from_status(status: Vec<u8>) -> Self {
        let n = status.len();
        Self {
            status,
            fired: vec![false; n],
        }
    }

    /// Fires every scheduled revision whose turn has come. A revision to a
    /// slot that was never informed changes nothing visible.
    pub fn fire_due(&mut self, goal: &UserGoal, turn: usize) {
        for (&s, upd) in &goal.update_schedule {
            if turn >= upd.earliest_turn && !self.fired[s] {
                self.fired[s] = true;
                if self.status[s] == INFORMED {
                    self.status[s] = NEEDS_UPDATE;
                }
            }
        }
    }

    /// A confirm or read-back that disagrees with the goal marks the slot
    /// as needing to be said again.
    pub fn note_system_claims(&mut self, sys: &Utterance, goal: &UserGoal, turn: usize) {
        let claimed: Vec<SlotId> = match sys.system_action() {
            Some(SystemAction::Confirm) => sys.slot.into_iter().collect(),
            Some(SystemAction::InformResult) => (0..self.status.len()).collect(),
            _ => return,
        };
        for s in claimed {
            let said = sys
                .value_tokens
                .iter()
                .find(|t| t.slot == s)
                .map(|t| t.value);
            if self.status[s] == INFORMED && said != Some(goal.value_at(s, turn)) {
                self.status[s] = NEEDS_UPDATE;
            }
        }
    }

    /// Slots with a fired revision that the user has not yet voiced.
    pub fn pending_revision(&self, s: SlotId) -> bool {
        self.fired[s] && self.status[s] == NEEDS_UPDATE
    }

    pub fn as_features(&self) -> Vec<f64> {
        let mut out = vec![0.0; 3 * self.status.len()];
        for (s, &v) in self.status.iter().enumerate() {
            out[3 * s + usize::from(v.min(2))] = 1.0;
        }
        out
    }
}

/// Slots whose value is voiced by an act.
pub fn informed_slots(action: UserAction, slot: Option<SlotId>, n_slots: usize) -> Vec<SlotId> {
    match (action, slot) {
        (UserAction::InformNorm | UserAction::UpdateSub, Some(s)) => vec![s],
        (UserAction::InformMulti, Some(s)) if n_slots > 1 => vec![s, (s + 1) % n_slots],
        _ => Vec::new(),
    }
}

pub fn update_user_state(
    state: &UserStateVector,
    action: UserAction,
    slot: Option<SlotId>,
    goal: &UserGoal,
    turn: usize,
) -> UserStateVector {
    let mut next = state.clone();
    for s in informed_slots(action, slot, state.status.len()) {
        next.status[s] = INFORMED;
    }
    next.fire_due(goal, turn);
    next
}

/// Turns a decided act into a clean utterance. Acts that cannot be voiced
/// (a slot-bearing act without a slot, or a two-slot inform in a one-slot
/// domain) fall back to silence; the flag reports the fallback.
pub fn verbalize(
    schema: &Schema,
    action: UserAction,
    slot: Option<SlotId>,
    goal: &UserGoal,
    turn: usize,
) -> (Utterance, bool) {
    let n = schema.n_slots();
    let silence = || (Utterance::user(UserAction::Silence, None, turn), true);
    let tok = |s: SlotId| ValueToken {
        slot: s,
        value: goal.value_at(s, turn),
    };
    if action.is_slot_bearing() && !matches!(slot, Some(s) if s < n) {
        return silence();
    }
    let utt = match action {
        UserAction::InformNorm => {
            let s = slot.unwrap_or_default();
            Utterance::user(action, slot, turn).with_values(vec![tok(s)])
        }
        UserAction::InformMulti => {
            if n < 2 {
                return silence();
            }
            let s = slot.unwrap_or_default();
            Utterance::user(action, slot, turn).with_values(vec![tok(s), tok((s + 1) % n)])
        }
        UserAction::UpdateSub => {
            let s = slot.unwrap_or_default();
            let current = tok(s);
            let original = goal.original(s);
            let tokens = if original != current.value {
                vec![
                    ValueToken {
                        slot: s,
                        value: original,
                    },
                    current,
                ]
            } else {
                vec![current]
            };
            Utterance::user(action, slot, turn).with_values(tokens)
        }
        UserAction::RestartSlot => Utterance::user(action, slot, turn),
        UserAction::Deny | UserAction::Affirm | UserAction::Silence | UserAction::Bye => {
            Utterance::user(action, None, turn)
        }
    };
    (utt, false)
}

pub fn nlu_input(schema: &Schema, goal: &UserGoal, turn: usize, sys: &Utterance) -> Vec<f64> {
    let v = schema.max_vocab();
    let mut out = vec![0.0; schema.n_slots() * v];
    for (s, value) in goal.values_at(turn).into_iter().enumerate() {
        out[s * v + value] = 1.0;
    }
    out.extend(encode_system_utterance(schema, sys));
    out
}

pub fn nlu_input_dim(schema: &Schema) -> usize {
    schema.n_slots() * schema.max_vocab() + system_utterance_dim(schema)
}

/// The NLU classifies the system act and its slot (last class = no slot).
pub fn nlu_layout(schema: &Schema) -> HeadLayout {
    HeadLayout {
        n_actions: N_SYSTEM_ACTIONS,
        n_slots: schema.n_slots() + 1,
        slot_bearing: vec![true; N_SYSTEM_ACTIONS],
    }
}

pub fn user_layout(schema: &Schema) -> HeadLayout {
    HeadLayout {
        n_actions: N_USER_ACTIONS,
        n_slots: schema.n_slots(),
        slot_bearing: UserAction::ALL
            .iter()
            .map(|a| a.is_slot_bearing())
            .collect(),
    }
}

/// `[previous own act (or none); perceived system act; perceived slot; progress]`.
pub fn user_policy_input(
    schema: &Schema,
    prev: Option<UserAction>,
    perceived: (SystemAction, Option<SlotId>),
    state: &UserStateVector,
) -> Vec<f64> {
    let n = schema.n_slots();
    let mut out = vec![0.0; N_USER_ACTIONS + 1 + N_SYSTEM_ACTIONS + n + 1];
    out[prev.map_or(N_USER_ACTIONS, UserAction::index)] = 1.0;
    out[N_USER_ACTIONS + 1 + perceived.0.index()] = 1.0;
    out[N_USER_ACTIONS + 1 + N_SYSTEM_ACTIONS + perceived.1.unwrap_or(n)] = 1.0;
    out.extend(state.as_features());
    out
}

pub fn user_policy_input_dim(schema: &Schema) -> usize {
    N_USER_ACTIONS + 1 + N_SYSTEM_ACTIONS + schema.n_slots() + 1 + 3 * schema.n_slots()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserDecision {
    pub action: UserAction,
    pub slot: Option<SlotId>,
    pub logp_action: f64,
    pub logp_slot: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserAgent {
    pub nlu: Net,
    pub dp: Net,
    pub critic: Net,
    layout: HeadLayout,
    nlu_layout: HeadLayout,
}

impl UserAgent {
    pub fn new(schema: &Schema, hidden: usize, rng: &mut impl Rng) -> Self {
        let nlu_layout = nlu_layout(schema);
        let layout = user_layout(schema);
        let nlu = Net::new(
            &[nlu_input_dim(schema), hidden, hidden, nlu_layout.width()],
            rng,
        );
        let p_in = user_policy_input_dim(schema);
        let dp = Net::new(&[p_in, hidden, hidden, layout.width()], rng);
        let critic = zero_critic(p_in, hidden, rng);
        Self {
            nlu,
            dp,
            critic,
            layout,
            nlu_layout,
        }
    }

    pub fn layout(&self) -> &HeadLayout {
        &self.layout
    }

    pub fn nlu_layout(&self) -> &HeadLayout {
        &self.nlu_layout
    }

    /// Greedy reading of a system utterance.
    pub fn perceive(
        &self,
        input: &[f64],
        schema: &Schema,
    ) -> Result<(SystemAction, Option<SlotId>)> {
        let out = self.nlu.forward(input)?;
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("nlu output"));
        }
        let a = argmax(self.nlu_layout.action_logits(&out));
        let s = argmax(self.nlu_layout.slot_logits(&out));
        Ok((SystemAction::ALL[a], (s < schema.n_slots()).then_some(s)))
    }

    pub fn decide(
        &self,
        input: &[f64],
        mode: DecodeMode,
        rng: &mut impl Rng,
    ) -> Result<UserDecision> {
        let out = self.dp.forward(input)?;
        let c = choose(&self.layout, &out, mode, rng)?;
        Ok(UserDecision {
            action: UserAction::ALL[c.action],
            slot: c.slot,
            logp_action: c.logp_action,
            logp_slot: c.logp_slot,
        })
    }

    pub fn value(&self, input: &[f64]) -> Result<f64> {
        Ok(self.critic.forward(input)?[0])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.nlu.save(&dir.join("nlu.bin"))?;
        self.dp.save(&dir.join("dp.bin"))?;
        self.critic.save(&dir.join("critic.bin"))
    }

    pub fn load(dir: &Path, schema: &Schema) -> Result<Self> {
        let nlu = Net::load(&dir.join("nlu.bin"))?;
        let dp = Net::load(&dir.join("dp.bin"))?;
        let critic = Net::load(&dir.join("critic.bin"))?;
        let layout = user_layout(schema);
        let nlu_layout = nlu_layout(schema);
        let checks = [
            (nlu.input_dim(), nlu_input_dim(schema), "nlu.bin"),
            (nlu.output_dim(), nlu_layout.width(), "nlu.bin"),
            (dp.input_dim(), user_policy_input_dim(schema), "dp.bin"),
            (dp.output_dim(), layout.width(), "dp.bin"),
            (
                critic.input_dim(),
                user_policy_input_dim(schema),
                "critic.bin",
            ),
            (critic.output_dim(), 1, "critic.bin"),
        ];
        for (got, expected, file) in checks {
            if got != expected {
                return Err(Error::Checkpoint {
                    path: dir.join(file),
                    reason: format!("shape {got} does not fit the schema (expected {expected})"),
                });
            }
        }
        Ok(Self {
            nlu,
            dp,
            critic,
            layout,
            nlu_layout,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EnvConfig;
    use crate::domain::{build_schema, ScheduledUpdate};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn schema() -> Schema {
        build_schema(&EnvConfig::default()).unwrap()
    }

    fn goal_with_update() -> UserGoal {
        let mut sched = BTreeMap::new();
        sched.insert(
            1,
            ScheduledUpdate {
                revised: 5,
                earliest_turn: 3,
            },
        );
        UserGoal {
            targets: vec![2, 3, 7],
            update_schedule: sched,
        }
    }

    #[test]
    fn scheduled_revision_moves_informed_slot_to_two() {
        let g = goal_with_update();
        let st = UserStateVector::new(3);
        let st = update_user_state(&st, UserAction::InformNorm, Some(1), &g, 1);
        assert_eq!(st.status, vec![0, 1, 0]);
        let st = update_user_state(&st, UserAction::Silence, None, &g, 2);
        assert_eq!(st.status, vec![0, 1, 0]);
        let st = update_user_state(&st, UserAction::Silence, None, &g, 3);
        assert_eq!(st.status, vec![0, 2, 0]);
        assert!(st.pending_revision(1));
        let st = update_user_state(&st, UserAction::UpdateSub, Some(1), &g, 4);
        assert_eq!(st.status, vec![0, 1, 0]);
        // fires only once
        let st = update_user_state(&st, UserAction::Silence, None, &g, 9);
        assert_eq!(st.status, vec![0, 1, 0]);
    }

    #[test]
    fn revision_of_uninformed_slot_is_silent() {
        let g = goal_with_update();
        let mut st = UserStateVector::new(3);
        st.fire_due(&g, 5);
        assert_eq!(st.status, vec![0, 0, 0]);
        let st = update_user_state(&st, UserAction::InformNorm, Some(1), &g, 6);
        assert_eq!(st.status, vec![0, 1, 0]);
    }

    #[test]
    fn multi_inform_marks_two_slots() {
        let g = goal_with_update();
        let st = update_user_state(
            &UserStateVector::new(3),
            UserAction::InformMulti,
            Some(2),
            &g,
            0,
        );
        assert_eq!(st.status, vec![1, 0, 1]);
    }

    #[test]
    fn mismatching_confirm_marks_slot() {
        let g = goal_with_update();
        let mut st = update_user_state(
            &UserStateVector::new(3),
            UserAction::InformNorm,
            Some(0),
            &g,
            0,
        );
        let ok = Utterance::system(SystemAction::Confirm, Some(0), 1)
            .with_values(vec![ValueToken { slot: 0, value: 2 }]);
        st.note_system_claims(&ok, &g, 1);
        assert_eq!(st.status[0], INFORMED);
        let bad = Utterance::system(SystemAction::Confirm, Some(0), 1)
            .with_values(vec![ValueToken { slot: 0, value: 4 }]);
        st.note_system_claims(&bad, &g, 1);
        assert_eq!(st.status[0], NEEDS_UPDATE);
        assert!(!st.pending_revision(0));
    }

    #[test]
    fn verbalize_tokens() {
        let s = schema();
        let g = goal_with_update();
        let (u, fb) = verbalize(&s, UserAction::InformNorm, Some(2), &g, 0);
        assert!(!fb);
        assert_eq!(u.value_tokens, vec![ValueToken { slot: 2, value: 7 }]);
        let (u, _) = verbalize(&s, UserAction::InformMulti, Some(2), &g, 0);
        assert_eq!(
            u.value_tokens,
            vec![
                ValueToken { slot: 2, value: 7 },
                ValueToken { slot: 0, value: 2 }
            ]
        );
        let (u, _) = verbalize(&s, UserAction::UpdateSub, Some(1), &g, 4);
        assert_eq!(
            u.value_tokens,
            vec![
                ValueToken { slot: 1, value: 3 },
                ValueToken { slot: 1, value: 5 }
            ]
        );
        let (u, _) = verbalize(&s, UserAction::UpdateSub, Some(0), &g, 4);
        assert_eq!(u.value_tokens, vec![ValueToken { slot: 0, value: 2 }]);
        let (u, fb) = verbalize(&s, UserAction::InformNorm, None, &g, 0);
        assert!(fb);
        assert_eq!(u.user_action(), Some(UserAction::Silence));
        let (u, fb) = verbalize(&s, UserAction::Affirm, None, &g, 0);
        assert!(!fb && u.value_tokens.is_empty());
    }

    #[test]
    fn one_slot_multi_inform_falls_back() {
        let s = build_schema(&EnvConfig {
            slot_count: 1,
            ..EnvConfig::default()
        })
        .unwrap();
        let g = UserGoal {
            targets: vec![0],
            update_schedule: BTreeMap::new(),
        };
        let (u, fb) = verbalize(&s, UserAction::InformMulti, Some(0), &g, 0);
        assert!(fb);
        assert_eq!(u.user_action(), Some(UserAction::Silence));
    }

    #[test]
    fn agent_shapes_and_round_trip() {
        let s = schema();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let a = UserAgent::new(&s, 16, &mut r);
        let g = goal_with_update();
        let sys = Utterance::system(SystemAction::Request, Some(1), 1);
        let p = a.perceive(&nlu_input(&s, &g, 1, &sys), &s).unwrap();
        let inp = user_policy_input(&s, None, p, &UserStateVector::new(3));
        assert_eq!(inp.len(), user_policy_input_dim(&s));
        let d = a.decide(&inp, DecodeMode::Sample, &mut r).unwrap();
        assert_eq!(d.slot.is_some(), d.action.is_slot_bearing());
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        assert_eq!(UserAgent::load(dir.path(), &s).unwrap(), a);
    }
}
